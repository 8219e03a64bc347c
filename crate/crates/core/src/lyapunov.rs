//! Lyapunov exponent `μ(η)`, critical exponent `η_c` and the rate function.
//!
//! For `λ > 0`, with `s = √(2λ)`, `g = e^{−2sℓ}` and `y = 1 − 1/ξ_λ`,
//!
//! ```text
//! μ(−λ) = Ē[−sℓ_0 + ln y − ln(1 − g + g·y)] / Ē[ℓ_0],
//! ```
//!
//! the log of the Laplace transform of the hitting time of `z_0` from `z_1`
//! averaged over the environment. The environment average is taken along
//! one long realization: shift `i` pairs `ℓ_i` with `ξ_λ` of the tree
//! re-rooted at interface `i`, and one downward Möbius sweep delivers all
//! shifts at once. For one-point laws the average collapses to the closed
//! form; for the line `μ(−λ) = −√(2λ)`.
//!
//! At `λ = 0` the same average of `ln P(T_0 < ∞)` is built from the
//! backward recursion `w ← ρ/(ρ + 1 − w)` of the embedded birth–death
//! chain.

use std::cell::Cell;
use std::sync::RwLock;

use rayon::prelude::*;
use serde::Serialize;

use crate::env::{EnvConfig, LengthLaw, TreeEnvironment};
use crate::error::{Error, Result};
use crate::kernel::{self, SkewExitKernel};
use crate::mobius::{self, InterfaceMatrixParams, XiOptions};
use crate::optimize::{bisect_predicate, golden_section_min};
use crate::rng::StreamFamily;
use crate::stats::MeanVar;

/// Accuracy and averaging controls.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LyapunovOptions {
    /// Number of environment shifts in the ergodic average.
    pub n_interfaces: usize,
    /// Required relative precision of every `1 − 1/ξ` (and `ln w`).
    pub tol: f64,
    /// Initial number of extra generations above the averaging window.
    pub burn_min: usize,
    /// Largest burn-in tried before giving up.
    pub burn_cap: usize,
}

impl Default for LyapunovOptions {
    fn default() -> Self {
        Self {
            n_interfaces: 100_000,
            tol: 1e-13,
            burn_min: 256,
            burn_cap: 1 << 16,
        }
    }
}

/// A value of `μ` with its Monte Carlo standard error (zero for exact
/// evaluations).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MuEstimate {
    pub lambda: f64,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug)]
enum Kind {
    Line,
    Homogeneous { p: f64, ell: f64 },
    Ergodic { env: TreeEnvironment, count: usize },
}

/// Evaluator of `μ(−λ)`, `λ ≥ 0`, for one environment.
#[derive(Clone, Debug)]
pub struct LyapunovModel {
    kind: Kind,
    opts: LyapunovOptions,
    digest: String,
}

impl LyapunovModel {
    pub fn new(env: &TreeEnvironment, opts: LyapunovOptions) -> Result<Self> {
        let digest = env.digest();
        let kind = if env.is_degenerate_line() {
            Kind::Line
        } else if env.is_homogeneous() {
            Kind::Homogeneous {
                p: env.p(1),
                ell: env.length(0),
            }
        } else {
            Self::ergodic_kind(env, &opts)?
        };
        Ok(Self { kind, opts, digest })
    }

    /// Like [`Self::new`] but never takes the constant-tree shortcut: every
    /// non-line environment goes through the Möbius sweep and the ergodic
    /// averages. Used to check the generic pipeline against closed forms.
    pub fn generic(env: &TreeEnvironment, opts: LyapunovOptions) -> Result<Self> {
        let kind = if env.is_degenerate_line() {
            Kind::Line
        } else {
            Self::ergodic_kind(env, &opts)?
        };
        Ok(Self {
            kind,
            opts,
            digest: env.digest(),
        })
    }

    fn ergodic_kind(env: &TreeEnvironment, opts: &LyapunovOptions) -> Result<Kind> {
        let wanted = opts.n_interfaces + opts.burn_cap + 2;
        let env = if env.is_extendable() {
            env.extend_to(wanted)?
        } else {
            env.clone()
        };
        let available = env.max_interface() as usize;
        // Keep room above the averaged interfaces for at least one doubling
        // of the burn-in, so that convergence can be confirmed.
        let reserve = (2 * opts.burn_min).max(available / 4).min(opts.burn_cap);
        let count = opts.n_interfaces.min(available.saturating_sub(reserve));
        if count < 1000 {
            return Err(Error::InsufficientHorizon {
                required: 1000 + 2 * opts.burn_min + 1,
                available: env.horizon(),
            });
        }
        Ok(Kind::Ergodic { env, count })
    }

    /// Constant `(d, ℓ)` tree without materializing an environment.
    pub fn constant(d: u32, ell: f64) -> Result<Self> {
        if d < 2 || !(ell > 0.0 && ell.is_finite()) {
            return Err(Error::Domain(format!("invalid constant tree (d = {d}, ell = {ell})")));
        }
        let kind = if d == 2 {
            Kind::Line
        } else {
            Kind::Homogeneous {
                p: crate::env::skewness(d),
                ell,
            }
        };
        Ok(Self {
            kind,
            opts: LyapunovOptions::default(),
            digest: format!("constant(d={d},ell={ell})"),
        })
    }

    /// `"line"`, `"homogeneous"` or `"ergodic"`.
    pub fn kind(&self) -> &'static str {
        match self.kind {
            Kind::Line => "line",
            Kind::Homogeneous { .. } => "homogeneous",
            Kind::Ergodic { .. } => "ergodic",
        }
    }

    pub fn env_digest(&self) -> &str {
        &self.digest
    }

    pub fn is_line(&self) -> bool {
        matches!(self.kind, Kind::Line)
    }

    /// `μ(−λ)` for `λ > 0`.
    pub fn mu_negative(&self, lambda: f64) -> Result<MuEstimate> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Domain(format!(
                "mu(-lambda) needs lambda in (0, ∞), got {lambda}"
            )));
        }
        let s = (2.0 * lambda).sqrt();
        match &self.kind {
            Kind::Line => Ok(MuEstimate {
                lambda,
                value: -s,
                std_error: 0.0,
            }),
            Kind::Homogeneous { p, ell } => {
                let m = InterfaceMatrixParams::new(lambda, *p, *ell);
                let (_, y) = mobius::constant_fixed_point(&m);
                Ok(MuEstimate {
                    lambda,
                    value: log_hit_term(s, *ell, y) / ell,
                    std_error: 0.0,
                })
            }
            Kind::Ergodic { env, count } => {
                let ys = converged_shift_complements(env, lambda, *count, &self.opts)?;
                let terms: Vec<f64> = (0..*count)
                    .map(|i| log_hit_term(s, env.length(i), ys[i]))
                    .collect();
                Ok(ratio_with_batches(lambda, &terms, &env.lengths()[..*count]))
            }
        }
    }

    /// `μ(−λ)` for `λ ≥ 0` (`λ = 0` gives `μ(0)`).
    pub fn mu(&self, lambda: f64) -> Result<MuEstimate> {
        if lambda == 0.0 {
            self.mu_zero()
        } else {
            self.mu_negative(lambda)
        }
    }

    /// `μ(0) = Ē[ln P(T_0 < ∞ | start z_1)] / Ē[ℓ_0]`.
    pub fn mu_zero(&self) -> Result<MuEstimate> {
        match &self.kind {
            Kind::Line => Ok(MuEstimate {
                lambda: 0.0,
                value: 0.0,
                std_error: 0.0,
            }),
            Kind::Homogeneous { p, ell } => Ok(MuEstimate {
                lambda: 0.0,
                value: ((1.0 - p) / p).ln() / ell,
                std_error: 0.0,
            }),
            Kind::Ergodic { env, count } => {
                let logs = converged_hit_logs(env, *count, &self.opts)?;
                Ok(ratio_with_batches(0.0, &logs, &env.lengths()[..*count]))
            }
        }
    }

    /// `μ′(0)` from the left: Richardson-extrapolated one-sided
    /// differences `(μ(0) − μ(−h))/h` at `h = 1e-3, 5e-4, 2.5e-4, …`,
    /// halving until two successive second-order estimates agree to 1e-4
    /// relative. Infinite for the line.
    pub fn mu_prime_zero(&self) -> Result<f64> {
        if let Kind::Line = self.kind {
            return Ok(f64::INFINITY);
        }
        let mu0 = self.mu_zero()?.value;
        let diff = |h: f64| -> Result<f64> { Ok((mu0 - self.mu_negative(h)?.value) / h) };
        let mut h = 1e-3;
        let mut d = vec![diff(h)?, diff(h / 2.0)?, diff(h / 4.0)?];
        h /= 4.0;
        let r1 = |d: &[f64], j: usize| 2.0 * d[j + 1] - d[j];
        let r2 = |d: &[f64], j: usize| (4.0 * r1(d, j + 1) - r1(d, j)) / 3.0;
        let mut prev = r2(&d, 0);
        for _ in 0..8 {
            h /= 2.0;
            d.push(diff(h)?);
            let next = r2(&d, d.len() - 3);
            if (next - prev).abs() <= 1e-4 * next.abs() {
                return Ok(next);
            }
            prev = next;
        }
        Err(Error::Numerical(
            "Richardson extrapolation of mu'(0) did not settle".into(),
        ))
    }
}

/// `−sℓ + ln y − ln(1 − g + g y)` with `g = e^{−2sℓ}`: the log Laplace
/// transform of one crossing, given the complement `y = 1 − 1/ξ`.
fn log_hit_term(s: f64, ell: f64, y: f64) -> f64 {
    let g = (-2.0 * s * ell).exp();
    let h = -(-2.0 * s * ell).exp_m1();
    -s * ell + y.ln() - (h + g * y).ln()
}

/// Ratio estimator `Σ terms / Σ lengths` with a batch-means standard error.
fn ratio_with_batches(lambda: f64, terms: &[f64], lengths: &[f64]) -> MuEstimate {
    let value = terms.iter().sum::<f64>() / lengths.iter().sum::<f64>();
    let batches = 100;
    let size = terms.len() / batches;
    let std_error = if size >= 10 {
        let acc: MeanVar = (0..batches)
            .map(|b| {
                let r = b * size..(b + 1) * size;
                terms[r.clone()].iter().sum::<f64>() / lengths[r].iter().sum::<f64>()
            })
            .collect();
        acc.std_error()
    } else {
        f64::NAN
    };
    MuEstimate {
        lambda,
        value,
        std_error,
    }
}

/// `1 − 1/ξ` of the first `count` shifts, each to relative precision
/// `tol`, doubling the burn-in until the sweep bracket is tight enough.
fn converged_shift_complements(
    env: &TreeEnvironment,
    lambda: f64,
    count: usize,
    opts: &LyapunovOptions,
) -> Result<Vec<f64>> {
    let available = env.max_interface() as usize;
    let cap = opts.burn_cap.min(available - count);
    let mut burn = opts.burn_min.min(cap);
    loop {
        let sweep = mobius::shifted_inverse_xi(env, lambda, count, count + burn);
        let worst = sweep
            .iter()
            .map(|&(_, y, w)| w / y)
            .fold(0.0, f64::max);
        if worst <= opts.tol {
            return Ok(sweep.into_iter().map(|(_, y, _)| y).collect());
        }
        if burn >= cap {
            return Err(Error::Numerical(format!(
                "xi sweep at lambda = {lambda} not converged after {burn} burn-in \
                 generations (relative width {worst:e})"
            )));
        }
        burn = (2 * burn).min(cap);
    }
}

/// `ln P(hit z_i from z_{i+1})` for `i < count`, doubling the burn-in until
/// two successive truncations agree to `tol`.
fn converged_hit_logs(env: &TreeEnvironment, count: usize, opts: &LyapunovOptions) -> Result<Vec<f64>> {
    let available = env.max_interface() as usize;
    let cap = opts.burn_cap.min(available - count);
    let sweep = |top: usize| -> Vec<f64> {
        let mut out = vec![0.0; count];
        let mut w = 0.0;
        for j in (1..=top).rev() {
            let rho = kernel::odds(env, j);
            w = rho / (rho + 1.0 - w);
            if j - 1 < count {
                out[j - 1] = w.ln();
            }
        }
        out
    };
    let mut burn = opts.burn_min.min(cap);
    let mut prev = sweep(count + burn);
    while burn < cap {
        burn = (2 * burn).min(cap);
        let next = sweep(count + burn);
        let worst = prev
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max);
        if worst <= opts.tol {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::Numerical(format!(
        "hitting-probability recursion not converged after {burn} burn-in generations \
         (the embedded walk may be recurrent)"
    )))
}

/// `μ(−λ)` of `env` (see [`LyapunovModel::mu_negative`]).
pub fn mu_negative(env: &TreeEnvironment, lambda: f64, opts: LyapunovOptions) -> Result<f64> {
    Ok(LyapunovModel::new(env, opts)?.mu_negative(lambda)?.value)
}

/// `(μ(0), μ′(0))` of `env`; `(0, ∞)` for the line.
pub fn mu_zero_and_prime(env: &TreeEnvironment, opts: LyapunovOptions) -> Result<(f64, f64)> {
    let model = LyapunovModel::new(env, opts)?;
    Ok((model.mu_zero()?.value, model.mu_prime_zero()?))
}

/// Second estimator of `μ(−λ)` from the law of the environment: `1/ξ` is
/// sampled from its stationary law (shifts of an independent realization)
/// and the independent root length `ℓ_0` is integrated exactly (discrete
/// law) or by composite Simpson quadrature (uniform law).
pub fn mu_negative_quadrature(
    config: &EnvConfig,
    lambda: f64,
    n_samples: usize,
    opts: LyapunovOptions,
) -> Result<MuEstimate> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    config.validate()?;
    use rand::Rng;
    let seed: u64 = StreamFamily::new(config.seed, "lyapunov.quadrature").stream(0).random();
    let sample_env = crate::env::generate(
        &config
            .clone()
            .with_seed(seed)
            .with_horizon(n_samples + opts.burn_cap + 2),
    )?;
    let nodes: Vec<(f64, f64)> = match &config.length_law {
        LengthLaw::Discrete { support } => support.clone(),
        LengthLaw::Uniform { lo, hi } if lo == hi => vec![(*lo, 1.0)],
        LengthLaw::Uniform { lo, hi } => {
            let panels = 64;
            let step = (hi - lo) / panels as f64;
            (0..=panels)
                .map(|j| {
                    let w = match j {
                        0 => 1.0,
                        j if j == panels => 1.0,
                        j if j % 2 == 1 => 4.0,
                        _ => 2.0,
                    };
                    (lo + j as f64 * step, w / (3.0 * panels as f64))
                })
                .collect()
        }
    };
    let s = (2.0 * lambda).sqrt();
    let ys = converged_shift_complements(&sample_env, lambda, n_samples, &opts)?;
    let values: Vec<f64> = ys
        .iter()
        .map(|&y| nodes.iter().map(|&(l, w)| w * log_hit_term(s, l, y)).sum())
        .collect();
    let mean_length = config.length_law.mean();
    let ones = vec![mean_length; values.len()];
    Ok(ratio_with_batches(lambda, &values, &ones))
}

/// `w_λ(ℓ_0) = E[e^{−λ T_0} ; T_0 < ∞ | start z_1]
///          = e^{−√(2λ)ℓ_0}·(ξ_λ − 1)/(ξ_λ − e^{−2√(2λ)ℓ_0})`.
pub fn w_laplace(env: &TreeEnvironment, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    let s = (2.0 * lambda).sqrt();
    let ell = env.length(0);
    if env.is_degenerate_line() {
        return Ok((-s * ell).exp());
    }
    let est = mobius::xi(env, lambda, XiOptions::default())?;
    Ok(log_hit_term(s, ell, est.one_minus_inv_xi).exp())
}

/// Estimate of `η_c` with its bracket.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EtaCEstimate {
    pub estimate: f64,
    /// `[lower, upper]`; the upper end is the finite-height threshold,
    /// which can only overestimate `η_c`.
    #[serde(serialize_with = "crate::report::ser_f64_pair")]
    pub bracket: (f64, f64),
    /// Height truncation `H` of the last transfer operator.
    pub k_used: usize,
    pub step_product_ok: bool,
    /// Smallest `η` with `min_i J^i_+·J^{i+1}_− > 1/4`, an upper bound on
    /// `η_c`.
    #[serde(serialize_with = "crate::report::ser_f64")]
    pub b_star: f64,
    /// Whether successive height doublings moved the threshold by less
    /// than the requested tolerance.
    pub converged: bool,
}

/// Controls for [`eta_c`].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EtaCOptions {
    pub height_start: usize,
    pub height_cap: usize,
    /// Stop doubling once the threshold moves by less than this.
    pub move_tol: f64,
    /// Bisection tolerance in `η`.
    pub eta_tol: f64,
}

impl Default for EtaCOptions {
    fn default() -> Self {
        Self {
            height_start: 64,
            height_cap: 1 << 16,
            move_tol: 1e-6,
            eta_tol: 1e-12,
        }
    }
}

/// Critical exponent `η_c` of the hitting-time exponential moments.
///
/// The path sum `Z_{2k}` over excursions of the embedded walk above the
/// root (weights `J^j_±`) grows like `λ_max^{2k}`, where `λ_max` is the top
/// eigenvalue of the weighted transfer operator on heights `1, 2, …`. On
/// heights `1..H` that operator is similar to the symmetric Jacobi matrix
/// with off-diagonal `b_i = √(J^i_+ J^{i+1}_−)`, and `λ_max < 1` iff every
/// pivot of the LDLᵀ factorization of `I − B` is positive. The threshold
/// is found by bisection in `η` and `H` is doubled until it settles; since
/// `λ_max` increases with `H`, each finite-`H` threshold is an upper bound.
pub fn eta_c(env: &TreeEnvironment, opts: EtaCOptions) -> Result<EtaCEstimate> {
    let step_product_ok = kernel::step_product_condition(env);
    if env.is_degenerate_line() {
        return Ok(EtaCEstimate {
            estimate: 0.0,
            bracket: (0.0, 0.0),
            k_used: 0,
            step_product_ok,
            b_star: 0.0,
            converged: true,
        });
    }
    let owned;
    let env = if env.is_extendable() && env.max_interface() < opts.height_cap as i64 + 1 {
        owned = env.extend_to(opts.height_cap + 2)?;
        &owned
    } else {
        env
    };
    let h_max = opts.height_cap.min(env.max_interface() as usize - 1);
    if h_max < 2 {
        return Err(Error::InsufficientHorizon {
            required: 4,
            available: env.horizon(),
        });
    }
    let kernels = kernel::kernels(env, h_max + 1)?;
    let eta_div = kernels
        .iter()
        .map(SkewExitKernel::divergence_threshold)
        .fold(f64::INFINITY, f64::min);

    let min_product = |eta: f64| {
        kernels
            .windows(2)
            .map(|w| w[0].exit_laplace(eta).0 * w[1].exit_laplace(eta).1)
            .fold(f64::INFINITY, f64::min)
    };
    let (_, b_star) = bisect_predicate(|eta| min_product(eta) > 0.25, 0.0, eta_div, opts.eta_tol);

    let supercritical = |eta: f64, h: usize| -> bool {
        let mut pivot = 1.0;
        let mut upper = kernels[0].exit_laplace(eta);
        for k in &kernels[1..h] {
            let next = k.exit_laplace(eta);
            let b2 = upper.0 * next.1;
            if !b2.is_finite() {
                return true;
            }
            pivot = 1.0 - b2 / pivot;
            if pivot <= 0.0 {
                return true;
            }
            upper = next;
        }
        false
    };

    let mut h = opts.height_start.clamp(2, h_max);
    let mut prev: Option<f64> = None;
    loop {
        let upper = if supercritical(0.0, h) {
            0.0
        } else {
            bisect_predicate(|eta| supercritical(eta, h), 0.0, eta_div, opts.eta_tol).1
        };
        if let Some(p) = prev {
            let movement = (p - upper).max(0.0);
            let converged = movement < opts.move_tol;
            if converged || 2 * h > h_max {
                // Where every b_i² exceeds 1/4 the spectrum already reaches
                // past 1, so B* caps η_c as well.
                let upper = upper.min(b_star);
                let lower = (upper - movement).max(0.0);
                let estimate = (upper - movement / 3.0).clamp(lower, upper);
                return Ok(EtaCEstimate {
                    estimate,
                    bracket: (lower, upper),
                    k_used: h,
                    step_product_ok,
                    b_star,
                    converged,
                });
            }
        }
        prev = Some(upper);
        h = (2 * h).min(h_max);
    }
}

/// `Θ^{(k)}_η = Z_{2k}^{1/k}`: the weighted sum over embedded-walk paths of
/// `2k` steps from `z_1` back to `z_1` that never visit `z_0`.
pub fn theta_dp(env: &TreeEnvironment, eta: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    let kernels = kernel::kernels(env, k + 1)?;
    let weights: Vec<(f64, f64)> = kernels.iter().map(|kr| kr.exit_laplace(eta)).collect();
    if weights.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Ok(f64::INFINITY);
    }
    // v[h] is the mass at height h + 1.
    let mut v = vec![0.0; k + 1];
    v[0] = 1.0;
    let mut log_scale = 0.0;
    for step in 0..2 * k {
        let reach = (step + 1).min(k);
        let mut next = vec![0.0; k + 1];
        for h in 0..=reach {
            let mut acc = 0.0;
            if h > 0 {
                acc += v[h - 1] * weights[h - 1].0;
            }
            if h < k {
                acc += v[h + 1] * weights[h + 1].1;
            }
            next[h] = acc;
        }
        let m = next.iter().copied().fold(0.0, f64::max);
        if m == 0.0 {
            return Ok(0.0);
        }
        for x in &mut next {
            *x /= m;
        }
        log_scale += m.ln();
        v = next;
    }
    Ok(((log_scale + v[0].ln()) / k as f64).exp())
}

/// Sampled `λ ↦ μ(−λ)` with the data at `λ = 0` and `η_c`.
#[derive(Clone, Debug, Serialize)]
pub struct LyapunovCurve {
    pub lambda_grid: Vec<f64>,
    pub mu_values: Vec<f64>,
    pub mu_std_errors: Vec<f64>,
    pub mu0: f64,
    #[serde(serialize_with = "crate::report::ser_f64")]
    pub mu_prime_0: f64,
    pub eta_c: EtaCEstimate,
    pub env_digest: String,
    pub model: &'static str,
}

/// Evaluate `μ(−λ)` on `lambda_grid` (in parallel) together with `μ(0)`,
/// `μ′(0)` and `η_c`.
pub fn curve(
    env: &TreeEnvironment,
    lambda_grid: &[f64],
    opts: LyapunovOptions,
    eta_opts: EtaCOptions,
) -> Result<LyapunovCurve> {
    if lambda_grid.windows(2).any(|w| !(w[1] > w[0])) || lambda_grid.first().is_some_and(|&l| l <= 0.0) {
        return Err(Error::Domain("lambda grid must be positive and increasing".into()));
    }
    let model = LyapunovModel::new(env, opts)?;
    let values = lambda_grid
        .par_iter()
        .map(|&l| model.mu_negative(l))
        .collect::<Result<Vec<_>>>()?;
    Ok(LyapunovCurve {
        lambda_grid: lambda_grid.to_vec(),
        mu_values: values.iter().map(|m| m.value).collect(),
        mu_std_errors: values.iter().map(|m| m.std_error).collect(),
        mu0: model.mu_zero()?.value,
        mu_prime_0: model.mu_prime_zero()?,
        eta_c: eta_c(env, eta_opts)?,
        env_digest: model.env_digest().to_string(),
        model: model.kind(),
    })
}

/// One evaluation of the rate function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RatePoint {
    pub a: f64,
    pub value: f64,
    /// Maximizing `η(a) ≤ 0`.
    pub eta_star: f64,
}

/// `I(a) = sup_{η ≤ 0} (aη − μ(η))` on `a ∈ (0, μ′(0)]`, with a cache that
/// admits concurrent readers.
#[derive(Debug)]
pub struct RateFunction {
    model: LyapunovModel,
    mu0: f64,
    mu_prime_0: f64,
    cache: RwLock<Vec<RatePoint>>,
}

impl RateFunction {
    pub fn new(model: LyapunovModel) -> Result<Self> {
        let mu0 = model.mu_zero()?.value;
        let mu_prime_0 = model.mu_prime_zero()?;
        Ok(Self {
            model,
            mu0,
            mu_prime_0,
            cache: RwLock::new(Vec::new()),
        })
    }

    pub fn model(&self) -> &LyapunovModel {
        &self.model
    }

    pub fn mu0(&self) -> f64 {
        self.mu0
    }

    pub fn mu_prime_0(&self) -> f64 {
        self.mu_prime_0
    }

    /// `μ(−λ)` for `λ ≥ 0`, reusing the stored `μ(0)`.
    fn mu_at(&self, lambda: f64) -> Result<f64> {
        if lambda == 0.0 {
            Ok(self.mu0)
        } else {
            Ok(self.model.mu_negative(lambda)?.value)
        }
    }

    /// `I(a)` and its maximizer. The objective `−aλ − μ(−λ)` is concave in
    /// `λ`, so golden section applies; the search interval starts at
    /// `[0, 10]` and grows while the maximizer sits at its right end.
    pub fn rate(&self, a: f64) -> Result<RatePoint> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Domain(format!("rate needs a > 0, got {a}")));
        }
        if a > self.mu_prime_0 * (1.0 + 1e-9) {
            return Err(Error::OutOfDomain {
                a,
                limit: self.mu_prime_0,
            });
        }
        if let Some(hit) = self
            .cache
            .read()
            .expect("rate cache poisoned")
            .iter()
            .find(|p| p.a.to_bits() == a.to_bits())
        {
            return Ok(*hit);
        }
        let failure: Cell<Option<Error>> = Cell::new(None);
        let objective = |lambda: f64| match self.mu_at(lambda) {
            Ok(mu) => a * lambda + mu,
            Err(e) => {
                failure.set(Some(e));
                f64::NAN
            }
        };
        let mut upper = 10.0;
        let (lambda, min) = loop {
            let (x, v) = golden_section_min(&objective, 0.0, upper, 1e-11 * upper);
            if let Some(e) = failure.take() {
                return Err(e);
            }
            if x < 0.9 * upper || upper > 1e12 {
                break (x, v);
            }
            upper *= 4.0;
        };
        let point = RatePoint {
            a,
            value: -min,
            eta_star: -lambda,
        };
        self.cache.write().expect("rate cache poisoned").push(point);
        Ok(point)
    }
}
