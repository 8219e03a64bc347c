//! Finite-difference solver for the projected FKPP equation
//! `∂_t v = ½∂²_x v + βv(1 − v)` on `[−L, L]` with skew interface
//! conditions, and front tracking.
//!
//! # Discretization
//!
//! Every interface `±z_i` inside the domain is a grid node; segment `i`
//! (between `z_i` and `z_{i+1}`) is cut into `n_i = round(ℓ_i/dx)` equal
//! cells of size `h_i`, and the negative half mirrors the positive one
//! node for node.
//!
//! Away from interfaces the diffusion term is the usual
//! `½(v_{j+1} − 2v_j + v_{j−1})/h²`. At an interface node with left/right
//! cells `h_L`, `h_R` and weights `w_R = p`, `w_L = 1 − p` (for `−z_i`
//! the weight on the right is `1 − p_i`, i.e. `p_{−i}`), the generator is
//! discretized in finite-volume form against the speed measure
//! `w_L dx` on the left and `w_R dx` on the right:
//!
//! ```text
//!   (Δv)_j = [w_R (v_{j+1} − v_j)/h_R − w_L (v_j − v_{j−1})/h_L] / (w_R h_R + w_L h_L).
//! ```
//!
//! This follows from eliminating ghost values: integrating `½v″` over the
//! dual cell `[z − h_L/2, z + h_R/2]` with weights and using the flux
//! condition `p·v′(z+) = (1 − p)·v′(z−)` to cancel the interface term.
//! Continuity of `v` holds because the interface is a single node. Both
//! one-sided flux terms are first-order accurate, so the scheme is
//! first-order at interfaces and second-order elsewhere; the residual of
//! the flux condition, `w_R g_+ − w_L g_−`, equals `∂_t v − βv(1−v)`
//! times `(w_R h_R + w_L h_L)`, i.e. `O(dx)`. The jump rates of this
//! operator are exactly those of the lattice walk in [`crate::mcsim`].
//!
//! Time stepping is Strang splitting: half a step of exact logistic
//! growth, one backward-Euler diffusion step (an M-matrix solve, so
//! `0 ≤ v ≤ 1` is preserved for every `dt`), half a step of growth. The
//! tridiagonal matrix does not change between steps and is factored once.

use rayon::prelude::*;
use serde::Serialize;

use crate::env::TreeEnvironment;
use crate::error::{Error, Result};
use crate::lyapunov::{self, EtaCOptions, LyapunovModel, LyapunovOptions};
use crate::speed;

/// Solver settings.
#[derive(Clone, Debug, Serialize)]
pub struct PdeConfig {
    /// Domain is `[−L, L]`.
    pub half_width: f64,
    /// Target cell size; each segment rounds it to divide its length.
    pub dx: f64,
    pub dt: f64,
    pub t_max: f64,
    pub beta: f64,
    /// Initial condition is the indicator of `(−δ, δ)`; `None` uses
    /// `ℓ_lo/2`.
    pub delta: Option<f64>,
    pub front_level: f64,
    /// Fraction of the post-transient record used for the speed fit.
    pub fit_window: f64,
    /// Time between recorded front positions.
    pub record_interval: f64,
    /// Times at which the full field is saved.
    pub snapshot_times: Vec<f64>,
}

impl Default for PdeConfig {
    fn default() -> Self {
        Self {
            half_width: 200.0,
            dx: 0.02,
            dt: 0.01,
            t_max: 60.0,
            beta: 2.0,
            delta: None,
            front_level: 0.5,
            fit_window: 0.4,
            record_interval: 0.1,
            snapshot_times: Vec::new(),
        }
    }
}

impl PdeConfig {
    fn validate(&self, ell_lo: f64) -> Result<f64> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.beta) {
            return Err(Error::config("beta", "must be positive"));
        }
        if !pos(self.dt) || !pos(self.t_max) || self.dt > self.t_max {
            return Err(Error::config("dt", "need 0 < dt ≤ t_max"));
        }
        if !pos(self.dx) || self.dx > ell_lo / 4.0 {
            return Err(Error::config("dx", format!("must lie in (0, ell_lo/4 = {}]", ell_lo / 4.0)));
        }
        if !pos(self.half_width) || self.half_width < 10.0 * self.dx {
            return Err(Error::config("half_width", "must be positive and span at least ten cells"));
        }
        let delta = self.delta.unwrap_or(0.5 * ell_lo);
        if !(delta > 0.0 && delta < ell_lo) {
            return Err(Error::config("delta", format!("must lie in (0, ell_lo = {ell_lo})")));
        }
        if !(self.front_level > 0.0 && self.front_level < 1.0) {
            return Err(Error::config("front_level", "must lie in (0, 1)"));
        }
        if !(self.fit_window > 0.0 && self.fit_window <= 1.0) {
            return Err(Error::config("fit_window", "must lie in (0, 1]"));
        }
        if !pos(self.record_interval) {
            return Err(Error::config("record_interval", "must be positive"));
        }
        Ok(delta)
    }
}

/// Front positions over time and the fitted speed.
#[derive(Clone, Debug, Serialize)]
pub struct FrontTrace {
    pub times: Vec<f64>,
    /// `sup{x : v(t, x) ≥ level}`.
    pub right: Vec<f64>,
    /// `−inf{x : v(t, x) ≥ level}` (mirrored to be positive).
    pub left: Vec<f64>,
    /// Least-squares slope of the right front on the fit window.
    pub fitted_speed: f64,
    /// Same for the left front.
    pub left_speed: f64,
    /// Root-mean-square residual of the right fit.
    pub fit_residual: f64,
    /// First time in the fit window.
    pub fit_start: f64,
    /// Right front non-decreasing on the fit window.
    pub monotone: bool,
}

/// Saved field.
#[derive(Clone, Debug, Serialize)]
pub struct Snapshot {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

/// Everything [`solve`] returns.
#[derive(Clone, Debug, Serialize)]
pub struct PdeRun {
    pub trace: FrontTrace,
    pub snapshots: Vec<Snapshot>,
    /// `max |v(x) − v(−x)|` over recorded times.
    pub max_asymmetry: f64,
    /// `max |p g_+ − (1−p) g_−|` over interfaces and recorded times.
    pub max_flux_residual: f64,
    pub n_nodes: usize,
    pub min_cell: f64,
}

/// Grid nodes with the off-diagonal weights of the discrete generator:
/// `(Δv)_j = lo_j (v_{j−1} − v_j) + up_j (v_{j+1} − v_j)`.
struct Grid {
    x: Vec<f64>,
    lo: Vec<f64>,
    up: Vec<f64>,
    /// `(node, p)` for every interface node.
    interfaces: Vec<(usize, f64)>,
}

impl Grid {
    fn build(env: &TreeEnvironment, half_width: f64, dx: f64) -> Self {
        // Non-negative half: node positions and, per node, the weight of
        // the right-hand side if it is an interface.
        let mut pos = vec![0.0];
        let mut skew = vec![Some(0.5)];
        let mut k = 0usize;
        loop {
            let start = env.z(k as i64);
            let end = env.z(k as i64 + 1).min(half_width);
            let len = end - start;
            if len <= 1e-12 * half_width {
                break;
            }
            let n = ((len / dx).round() as usize).max(1);
            let h = len / n as f64;
            for m in 1..n {
                pos.push(start + m as f64 * h);
                skew.push(None);
            }
            pos.push(end);
            if end >= half_width {
                skew.push(None);
                break;
            }
            k += 1;
            skew.push(Some(env.p(k as i64)));
        }
        let n_half = pos.len();
        let mut x: Vec<f64> = pos[1..].iter().rev().map(|v| -v).collect();
        x.extend_from_slice(&pos);
        let n = x.len();
        let mut lo = vec![0.0; n];
        let mut up = vec![0.0; n];
        let mut interfaces = Vec::new();
        let centre = n_half - 1;
        for j in 1..n - 1 {
            let hl = x[j] - x[j - 1];
            let hr = x[j + 1] - x[j];
            let offset = j.abs_diff(centre);
            match skew[offset] {
                Some(p_pos) => {
                    let p = if j >= centre { p_pos } else { 1.0 - p_pos };
                    let q = 1.0 - p;
                    let denom = p * hr + q * hl;
                    up[j] = p / (hr * denom);
                    lo[j] = q / (hl * denom);
                    interfaces.push((j, p));
                }
                None => {
                    let h2 = 0.5 * (hl + hr) * hl.min(hr);
                    up[j] = 0.5 / h2;
                    lo[j] = 0.5 / h2;
                }
            }
        }
        Self { x, lo, up, interfaces }
    }
}

/// LU factors of the backward-Euler matrix `I − dt·Δ` with Dirichlet rows
/// at both ends.
struct Factored {
    sub: Vec<f64>,
    /// `1 / pivot`.
    inv_pivot: Vec<f64>,
    sup: Vec<f64>,
}

impl Factored {
    fn new(grid: &Grid, dt: f64) -> Self {
        let n = grid.x.len();
        let mut sub = vec![0.0; n];
        let mut sup = vec![0.0; n];
        let mut diag = vec![1.0; n];
        for j in 1..n - 1 {
            sub[j] = -dt * grid.lo[j];
            sup[j] = -dt * grid.up[j];
            diag[j] = 1.0 + dt * (grid.lo[j] + grid.up[j]);
        }
        let mut inv_pivot = vec![0.0; n];
        let mut pivot = diag[0];
        inv_pivot[0] = 1.0 / pivot;
        for j in 1..n {
            pivot = diag[j] - sub[j] * sup[j - 1] / pivot;
            inv_pivot[j] = 1.0 / pivot;
        }
        Self { sub, inv_pivot, sup }
    }

    /// Solve in place (the right-hand side's boundary entries are zero).
    fn solve(&self, v: &mut [f64]) {
        let n = v.len();
        v[0] *= self.inv_pivot[0];
        for j in 1..n {
            v[j] = (v[j] - self.sub[j] * v[j - 1]) * self.inv_pivot[j];
        }
        for j in (0..n - 1).rev() {
            v[j] -= self.sup[j] * self.inv_pivot[j] * v[j + 1];
        }
    }
}

/// Exact logistic flow `v ↦ v e / (1 + v(e − 1))` with `e = e^{βτ}`.
fn logistic(v: &mut [f64], growth: f64) {
    let gm1 = growth - 1.0;
    for x in v.iter_mut() {
        *x = *x * growth / (1.0 + *x * gm1);
    }
}

fn right_front(x: &[f64], v: &[f64], level: f64) -> Option<f64> {
    let j = v.iter().rposition(|&u| u >= level)?;
    if j + 1 == v.len() {
        return Some(x[j]);
    }
    let frac = (v[j] - level) / (v[j] - v[j + 1]);
    Some(x[j] + frac * (x[j + 1] - x[j]))
}

fn left_front(x: &[f64], v: &[f64], level: f64) -> Option<f64> {
    let j = v.iter().position(|&u| u >= level)?;
    if j == 0 {
        return Some(-x[0]);
    }
    let frac = (v[j] - level) / (v[j] - v[j - 1]);
    Some(-(x[j] - frac * (x[j] - x[j - 1])))
}

/// Least-squares slope and RMS residual.
fn fit_line(t: &[f64], y: &[f64]) -> (f64, f64) {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let stt: f64 = t.iter().map(|a| (a - tm).powi(2)).sum();
    let sty: f64 = t.iter().zip(y).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let slope = sty / stt;
    let rss: f64 = t
        .iter()
        .zip(y)
        .map(|(a, b)| (b - ym - slope * (a - tm)).powi(2))
        .sum();
    (slope, (rss / n).sqrt())
}

fn flux_residual(grid: &Grid, v: &[f64]) -> f64 {
    grid.interfaces
        .iter()
        .map(|&(j, p)| {
            let gp = (v[j + 1] - v[j]) / (grid.x[j + 1] - grid.x[j]);
            let gm = (v[j] - v[j - 1]) / (grid.x[j] - grid.x[j - 1]);
            (p * gp - (1.0 - p) * gm).abs()
        })
        .fold(0.0, f64::max)
}

fn asymmetry(v: &[f64]) -> f64 {
    let n = v.len();
    (0..n / 2).map(|j| (v[j] - v[n - 1 - j]).abs()).fold(0.0, f64::max)
}

/// Integrate from the indicator initial condition and track the front.
pub fn solve(env: &TreeEnvironment, cfg: &PdeConfig) -> Result<PdeRun> {
    let bounds = env.bounds();
    let delta = cfg.validate(bounds.ell_lo)?;
    let needed = (cfg.half_width / bounds.ell_lo).ceil() as usize + 2;
    let env = if env.z(env.horizon() as i64) > cfg.half_width {
        env.clone()
    } else if env.is_extendable() {
        env.extend_to(needed)?
    } else {
        return Err(Error::InsufficientHorizon {
            required: needed,
            available: env.horizon(),
        });
    };
    let grid = Grid::build(&env, cfg.half_width, cfg.dx);
    let lu = Factored::new(&grid, cfg.dt);
    let n = grid.x.len();
    let mut v: Vec<f64> = grid
        .x
        .iter()
        .map(|&x| if x.abs() < delta { 1.0 } else { 0.0 })
        .collect();
    let half_growth = (0.5 * cfg.beta * cfg.dt).exp();
    let n_steps = (cfg.t_max / cfg.dt).round() as usize;
    let record_every = ((cfg.record_interval / cfg.dt).round() as usize).max(1);
    let margin = 5.0 * bounds.ell_hi;
    let mut snap_times: Vec<f64> = cfg.snapshot_times.clone();
    snap_times.sort_by(f64::total_cmp);
    let mut snap_next = 0;

    let mut times = Vec::new();
    let mut right = Vec::new();
    let mut left = Vec::new();
    let mut max_asym: f64 = 0.0;
    let mut max_flux: f64 = 0.0;
    let mut snapshots = Vec::new();
    for step in 1..=n_steps {
        logistic(&mut v, half_growth);
        v[0] = 0.0;
        v[n - 1] = 0.0;
        lu.solve(&mut v);
        logistic(&mut v, half_growth);
        let t = step as f64 * cfg.dt;
        let want_snap = snap_next < snap_times.len() && t + 0.5 * cfg.dt >= snap_times[snap_next];
        if step % record_every == 0 || step == n_steps || want_snap {
            let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &u| (a.min(u), b.max(u)));
            if !(lo >= -1e-9) || !(hi <= 1.0 + 1e-9) {
                return Err(Error::Unstable {
                    t,
                    value: if lo < -1e-9 || lo.is_nan() { lo } else { hi },
                });
            }
            let r = right_front(&grid.x, &v, cfg.front_level).unwrap_or(0.0);
            let l = left_front(&grid.x, &v, cfg.front_level).unwrap_or(0.0);
            if r.max(l) > cfg.half_width - margin {
                let rate = r.max(l) / t;
                return Err(Error::DomainTooSmall {
                    half_width: cfg.half_width,
                    margin,
                    t,
                    suggested: (1.25 * rate * cfg.t_max + 4.0 * margin).ceil(),
                });
            }
            times.push(t);
            right.push(r);
            left.push(l);
            max_asym = max_asym.max(asymmetry(&v));
            max_flux = max_flux.max(flux_residual(&grid, &v));
            while snap_next < snap_times.len() && t + 0.5 * cfg.dt >= snap_times[snap_next] {
                snapshots.push(Snapshot {
                    t,
                    x: grid.x.clone(),
                    v: v.clone(),
                });
                snap_next += 1;
            }
        }
    }

    let clear = 10.0 * bounds.ell_hi;
    let Some(first) = right.iter().position(|&r| r > clear) else {
        return Err(Error::Numerical(format!(
            "front never passed x = {clear} before t_max = {}; increase t_max",
            cfg.t_max
        )));
    };
    let t0 = times[first];
    let t_fit = t0 + (1.0 - cfg.fit_window) * (cfg.t_max - t0);
    let start = times.iter().position(|&t| t >= t_fit).unwrap_or(first);
    if times.len() - start < 3 {
        return Err(Error::Numerical("too few recorded times in the fit window".into()));
    }
    let (fitted_speed, fit_residual) = fit_line(&times[start..], &right[start..]);
    let (left_speed, _) = fit_line(&times[start..], &left[start..]);
    let monotone = right[start..].windows(2).all(|w| w[1] >= w[0] - 1e-12);
    let min_cell = grid.x.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    Ok(PdeRun {
        trace: FrontTrace {
            times,
            right,
            left,
            fitted_speed,
            left_speed,
            fit_residual,
            fit_start: t_fit,
            monotone,
        },
        snapshots,
        max_asymmetry: max_asym,
        max_flux_residual: max_flux,
        n_nodes: n,
        min_cell,
    })
}

/// One row of [`empirical_speed_sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub beta: f64,
    pub fitted: f64,
    pub predicted: f64,
    pub half_width: f64,
}

/// Predicted `c*` for `env` at each `β`: closed forms for the line and
/// for constant trees, the variational formula otherwise.
pub fn predicted_speeds(env: &TreeEnvironment, betas: &[f64]) -> Result<Vec<f64>> {
    if env.is_degenerate_line() {
        return Ok(betas.iter().map(|b| (2.0 * b).sqrt()).collect());
    }
    if env.is_homogeneous() {
        let (d, ell) = (env.degree(1), env.length(0));
        return betas
            .iter()
            .map(|&b| speed::speed_constant_closed_form(d, ell, b).map(|r| r.c_star))
            .collect();
    }
    let model = LyapunovModel::new(env, LyapunovOptions::default())?;
    let curve = lyapunov::curve(env, &[], LyapunovOptions::default(), EtaCOptions::default())?;
    betas
        .iter()
        .map(|&b| speed::speed_variational(&model, b, &curve).map(|r| r.c_star))
        .collect()
}

/// Solve for each `β` (in parallel) with `L` scaled so the front stays
/// clear of the boundary, and compare with the predicted speed.
pub fn empirical_speed_sweep(env: &TreeEnvironment, betas: &[f64], base: &PdeConfig) -> Result<Vec<SweepRow>> {
    let predicted = predicted_speeds(env, betas)?;
    let ell_hi = env.bounds().ell_hi;
    betas
        .par_iter()
        .zip(predicted.par_iter())
        .map(|(&beta, &c)| {
            // √(2β) bounds every front speed.
            let half_width = base
                .half_width
                .max((1.15 * (2.0 * beta).sqrt() * base.t_max + 20.0 * ell_hi).ceil());
            let cfg = PdeConfig {
                beta,
                half_width,
                snapshot_times: Vec::new(),
                ..base.clone()
            };
            let run = solve(env, &cfg)?;
            Ok(SweepRow {
                beta,
                fitted: run.trace.fitted_speed,
                predicted: c,
                half_width,
            })
        })
        .collect()
}
