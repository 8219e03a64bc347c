//! Asymptotic front speed `c* = inf_{λ ≥ 0} (λ + β)/|μ(−λ)|`, the critical
//! reaction rate, and closed forms for constant trees.

use std::cell::Cell;

use serde::Serialize;

use crate::env::EnvBounds;
use crate::error::{Error, Result};
use crate::lyapunov::{LyapunovCurve, LyapunovModel};
use crate::optimize::grid_refine_min;

/// How a [`SpeedResult`] was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedMethod {
    Variational,
    ConstantClosedForm,
    DegenerateLine,
}

/// Whether `β` exceeds the critical rate. `Uncertain` means `β` lies
/// inside the bracket of `β_c` induced by the `η_c` bracket.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AssumptionStatus {
    Satisfied,
    Violated,
    Uncertain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpeedResult {
    pub beta: f64,
    pub c_star: f64,
    pub lambda_star: f64,
    pub beta_c: f64,
    /// `β > β_c` with certainty.
    pub assumption_ok: bool,
    pub assumption: AssumptionStatus,
    pub method: SpeedMethod,
    pub mu0: f64,
    #[serde(serialize_with = "crate::report::ser_f64")]
    pub mu_prime_0: f64,
    #[serde(serialize_with = "crate::report::ser_f64_pair")]
    pub eta_c_bracket: (f64, f64),
    /// Local minima of the objective on the coarse grid (1 = unimodal).
    pub local_minima: usize,
}

/// Upper end of the λ search: `max(10β, 100)`.
pub fn lambda_max(beta: f64) -> f64 {
    (10.0 * beta).max(100.0)
}

/// `{0} ∪ {Λ_max (i/48)² : i = 1..48}`: dense near 0, where the minimizer
/// sits for small `β`.
fn speed_grid(beta: f64) -> Vec<f64> {
    let top = lambda_max(beta);
    (0..=48).map(|i| top * (i as f64 / 48.0).powi(2)).collect()
}

/// Minimize `(λ + β)/|μ(−λ)|` given an evaluator of `|μ(−λ)|`.
fn minimize_speed<F: Fn(f64) -> Result<f64>>(beta: f64, abs_mu: F) -> Result<(f64, f64, usize)> {
    let failure: Cell<Option<crate::Error>> = Cell::new(None);
    let objective = |lambda: f64| match abs_mu(lambda) {
        Ok(m) if m > 0.0 => (lambda + beta) / m,
        Ok(_) => f64::INFINITY,
        Err(e) => {
            failure.set(Some(e));
            f64::NAN
        }
    };
    let found = grid_refine_min(&objective, &speed_grid(beta), 1e-10);
    if let Some(e) = failure.take() {
        return Err(e);
    }
    if !found.value.is_finite() {
        return Err(Error::Numerical(format!("speed objective has no finite minimum at beta = {beta}")));
    }
    Ok((found.value, found.x, found.local_minima))
}

/// `β_c = max(η_c, −μ(0)/μ′(0))`; the ratio is 0 for the line.
pub fn beta_c(curve: &LyapunovCurve) -> f64 {
    drift_ratio(curve.mu0, curve.mu_prime_0).max(curve.eta_c.estimate)
}

fn drift_ratio(mu0: f64, mu_prime_0: f64) -> f64 {
    if mu_prime_0.is_infinite() {
        0.0
    } else {
        (-mu0 / mu_prime_0).max(0.0)
    }
}

fn assumption_status(beta: f64, ratio: f64, eta_bracket: (f64, f64)) -> AssumptionStatus {
    let lower = ratio.max(eta_bracket.0);
    let upper = ratio.max(eta_bracket.1);
    if beta > upper {
        AssumptionStatus::Satisfied
    } else if beta <= lower {
        AssumptionStatus::Violated
    } else {
        AssumptionStatus::Uncertain
    }
}

/// Variational speed through the generic pipeline. `curve` supplies
/// `μ(0)`, `μ′(0)` and the `η_c` bracket (its λ grid is not used). For
/// `β ≤ β_c` the formal minimizer is still returned, flagged.
pub fn speed_variational(model: &LyapunovModel, beta: f64, curve: &LyapunovCurve) -> Result<SpeedResult> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    let mu0 = curve.mu0;
    let (c_star, lambda_star, local_minima) = minimize_speed(beta, |lambda| {
        if lambda == 0.0 {
            Ok(-mu0)
        } else {
            Ok(-model.mu_negative(lambda)?.value)
        }
    })?;
    let ratio = drift_ratio(curve.mu0, curve.mu_prime_0);
    let assumption = assumption_status(beta, ratio, curve.eta_c.bracket);
    Ok(SpeedResult {
        beta,
        c_star,
        lambda_star,
        beta_c: beta_c(curve),
        assumption_ok: assumption == AssumptionStatus::Satisfied,
        assumption,
        method: if model.is_line() {
            SpeedMethod::DegenerateLine
        } else {
            SpeedMethod::Variational
        },
        mu0,
        mu_prime_0: curve.mu_prime_0,
        eta_c_bracket: curve.eta_c.bracket,
        local_minima,
    })
}

/// `|μ(−λ)|` of the constant `(d, ℓ)` tree in the form
/// `√(2λ) + (1/ℓ)·ln(4p / (1 + γ² − √((γ² − 1)² + 4ζ²γ²)))`, evaluated
/// after multiplying through by the conjugate so that no cancellation
/// occurs: with `g = γ^{−2}` the log argument is
/// `(1 + g + √((1 − g)² + 4ζ²g)) / (4(1 − p))`.
pub fn constant_abs_mu(d: u32, ell: f64, lambda: f64) -> f64 {
    let p = crate::env::skewness(d);
    let zeta = 2.0 * p - 1.0;
    let s = (2.0 * lambda).sqrt();
    let g = (-2.0 * s * ell).exp();
    let h = -(-2.0 * s * ell).exp_m1();
    let root = (h * h + 4.0 * zeta * zeta * g).sqrt();
    s + ((1.0 + g + root) / (4.0 * (1.0 - p))).ln() / ell
}

/// `((d − 2)/(ℓ² d))·ln(d − 1)`: `−μ(0)/μ′(0)` of the constant tree.
pub fn beta_c_constant(d: u32, ell: f64) -> f64 {
    let df = d as f64;
    (df - 2.0) / (ell * ell * df) * (df - 1.0).ln()
}

/// `arccos²(2√(p(1 − p)))/(2ℓ²)`.
pub fn eta_c_constant(d: u32, ell: f64) -> f64 {
    let p = crate::env::skewness(d);
    (2.0 * (p * (1.0 - p)).sqrt()).min(1.0).acos().powi(2) / (2.0 * ell * ell)
}

/// Speed of the constant `(d, ℓ)` tree from the closed-form `|μ|`.
pub fn speed_constant_closed_form(d: u32, ell: f64, beta: f64) -> Result<SpeedResult> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    if d < 2 || !(ell > 0.0 && ell.is_finite()) {
        return Err(Error::Domain(format!("invalid constant tree (d = {d}, ell = {ell})")));
    }
    if d == 2 {
        return Ok(SpeedResult {
            beta,
            c_star: (2.0 * beta).sqrt(),
            lambda_star: beta,
            beta_c: 0.0,
            assumption_ok: true,
            assumption: AssumptionStatus::Satisfied,
            method: SpeedMethod::DegenerateLine,
            mu0: 0.0,
            mu_prime_0: f64::INFINITY,
            eta_c_bracket: (0.0, 0.0),
            local_minima: 1,
        });
    }
    let (c_star, lambda_star, local_minima) = minimize_speed(beta, |l| Ok(constant_abs_mu(d, ell, l)))?;
    let p = crate::env::skewness(d);
    let ratio = beta_c_constant(d, ell);
    let eta = eta_c_constant(d, ell);
    let bc = ratio.max(eta);
    let assumption = if beta > bc {
        AssumptionStatus::Satisfied
    } else {
        AssumptionStatus::Violated
    };
    Ok(SpeedResult {
        beta,
        c_star,
        lambda_star,
        beta_c: bc,
        assumption_ok: beta > bc,
        assumption,
        method: SpeedMethod::ConstantClosedForm,
        mu0: ((1.0 - p) / p).ln() / ell,
        mu_prime_0: ell / (2.0 * p - 1.0),
        eta_c_bracket: (eta, eta),
        local_minima,
    })
}

/// `ln(e^x − 1)` for `x > 0` without overflow.
fn ln_expm1(x: f64) -> f64 {
    if x > 30.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Upper bound on `√(2β) − c*` from the support bounds alone: the speed
/// with `|μ(−λ)|` replaced by
/// `√(2λ) + (1/ℓ_lo)·ln(1 + (d̄/2)·e^{2ℓ_hi√(2√(2β))}·(e^{4ℓ_hi√(2λ)} − 1)/(e^{2ℓ_lo√(2λ)} − 1))`.
/// At `λ = 0` the ratio of exponentials is replaced by its limit
/// `2ℓ_hi/ℓ_lo`. The inner expression is evaluated in log space.
pub fn slowdown_bound(bounds: EnvBounds, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    let EnvBounds {
        d_max,
        ell_lo,
        ell_hi,
        ..
    } = bounds;
    if d_max < 2 || !(ell_lo > 0.0 && ell_hi >= ell_lo) {
        return Err(Error::Domain(format!("invalid support bounds {bounds:?}")));
    }
    let lead = (d_max as f64 / 2.0).ln() + 2.0 * ell_hi * (2.0 * (2.0 * beta).sqrt()).sqrt();
    let abs_mu = |lambda: f64| -> Result<f64> {
        let s = (2.0 * lambda).sqrt();
        let ratio = if s == 0.0 {
            (2.0 * ell_hi / ell_lo).ln()
        } else {
            ln_expm1(4.0 * s * ell_hi) - ln_expm1(2.0 * s * ell_lo)
        };
        Ok(s + softplus(lead + ratio) / ell_lo)
    };
    let (inf, _, _) = minimize_speed(beta, abs_mu)?;
    Ok(((2.0 * beta).sqrt() - inf).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn closed_form_matches_literal_gamma_expression() {
        // Literal (unrationalized) form, fine for moderate λ.
        let lit = |d: u32, ell: f64, lambda: f64| {
            let p = crate::env::skewness(d);
            let z = 2.0 * p - 1.0;
            let g2 = (2.0 * ell * (2.0 * lambda).sqrt()).exp();
            let den = 1.0 + g2 - ((g2 - 1.0).powi(2) + 4.0 * z * z * g2).sqrt();
            (2.0 * lambda).sqrt() + (4.0 * p / den).ln() / ell
        };
        for (d, ell, lambda) in [(3, 1.0, 0.3), (4, 2.0, 1.0), (10, 0.5, 2.0)] {
            assert_relative_eq!(constant_abs_mu(d, ell, lambda), lit(d, ell, lambda), max_relative = 1e-10);
        }
        // λ = 0 gives −μ(0) = ln(p/(1−p))/ℓ.
        assert_relative_eq!(constant_abs_mu(3, 2.0, 0.0), (2.0f64).ln() / 2.0, max_relative = 1e-15);
    }

    #[test]
    fn critical_rate_examples() {
        assert_relative_eq!(beta_c_constant(4, 1.0), 0.5 * (3.0f64).ln(), max_relative = 1e-15);
        assert_relative_eq!(beta_c_constant(3, 1.0), (2.0f64).ln() / 3.0, max_relative = 1e-15);
        assert!(beta_c_constant(3, 1.0) > beta_c_constant(3, 10.0));
        assert!(beta_c_constant(3, 10.0) > beta_c_constant(3, 100.0));
        assert!(beta_c_constant(3, 100.0) < 1e-4);
        for d in [3, 4, 10] {
            assert!(beta_c_constant(d, 1.0) > eta_c_constant(d, 1.0));
        }
    }

    #[test]
    fn line_speed_is_classical() {
        let r = speed_constant_closed_form(2, 1.0, 2.0).unwrap();
        assert_eq!((r.c_star, r.lambda_star), (2.0, 2.0));
    }

    #[test]
    fn closed_form_speed_properties() {
        let r = speed_constant_closed_form(3, 1.0, 5.0).unwrap();
        assert!(r.assumption_ok && r.local_minima == 1);
        assert!(r.c_star < (10.0f64).sqrt() && r.c_star > 1.0 / r.mu_prime_0);
        let ratios: Vec<f64> = [10.0, 1e2, 1e3, 1e4]
            .iter()
            .map(|&b| speed_constant_closed_form(3, 1.0, b).unwrap().c_star / (2.0 * b).sqrt())
            .collect();
        assert!(ratios.windows(2).all(|w| w[1] > w[0]), "{ratios:?}");
        assert!(ratios[3] > 0.9);
    }

    #[test]
    fn slowdown_bound_examples() {
        let b = |ell: f64| {
            slowdown_bound(
                EnvBounds {
                    d_min: 3,
                    d_max: 3,
                    ell_lo: ell,
                    ell_hi: ell,
                },
                5.0,
            )
            .unwrap()
        };
        let measured = (10.0f64).sqrt() - speed_constant_closed_form(3, 1.0, 5.0).unwrap().c_star;
        assert!(b(1.0) >= measured && measured > 0.0);
        assert!(b(1.0) > b(5.0) && b(5.0) > b(10.0), "{} {} {}", b(1.0), b(5.0), b(10.0));
        assert!(b(10.0) >= 0.0);
    }
}
