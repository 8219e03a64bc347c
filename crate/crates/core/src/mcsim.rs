//! Monte Carlo simulation of the multi-skewed Brownian motion.
//!
//! Two simulators:
//!
//! * the **embedded walk** jumps between neighbouring interfaces with the
//!   exact exit probabilities and an exactly sampled exit time;
//! * the **lattice walk** is a nearest-neighbour random walk on a grid that
//!   contains every interface, skewed only at interfaces.
//!
//! Exit times are assembled from exit times `τ` of standard Brownian motion
//! from `(−1, 1)`, sampled by numerically inverting their distribution
//! function. Skew BM started at its skew point leaves the symmetric window
//! `(−m, m)` after `m²τ`, to the right with probability `p`,
//! independently of `τ` (its modulus is reflecting BM). From there the
//! longer side of `(−a, b)` is handled by plain BM moves of the form
//! "exit the largest symmetric window that fits", each of which either
//! ends at a boundary or returns to the skew point with probability 1/2.
//!
//! Paths use pre-assigned random streams and are reduced in fixed-size
//! chunks in order, so results do not depend on the number of threads.

use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::env::TreeEnvironment;
use crate::error::{Error, Result};
use crate::kernel::{self, SkewExitKernel};
use crate::rng::{open01, StreamFamily, StreamRng};
use crate::stats::MeanVar;

const CHUNK: usize = 1024;

// ---------------------------------------------------------------------------
// Exit time of standard Brownian motion from (−1, 1)

/// `erfc` comes from `libm`, which is accurate to an ulp; the statrs
/// implementation is only good to ~1e-10, visible in the CDF tails.
///
/// Below this time the image (erfc) series is used, above it the
/// eigenfunction series; both need at most a handful of terms there.
const SWITCH: f64 = 0.6;

fn small_cdf(t: f64) -> f64 {
    let r = 1.0 / (2.0 * t).sqrt();
    let mut sum = 0.0;
    for n in 0..32 {
        let term = erfc((2 * n + 1) as f64 * r);
        sum += if n % 2 == 0 { term } else { -term };
        if term <= 1e-18 * sum.abs() {
            break;
        }
    }
    2.0 * sum
}

fn small_density(t: f64) -> f64 {
    let mut sum = 0.0;
    for n in 0..32 {
        let c = (2 * n + 1) as f64;
        let term = c * (-c * c / (2.0 * t)).exp();
        sum += if n % 2 == 0 { term } else { -term };
        if term <= 1e-18 * sum.abs() {
            break;
        }
    }
    (2.0 / std::f64::consts::PI).sqrt() * t.powf(-1.5) * sum
}

fn large_terms(t: f64) -> (f64, f64) {
    use std::f64::consts::PI;
    let (mut surv, mut dens) = (0.0, 0.0);
    for n in 0..32 {
        let c = (2 * n + 1) as f64;
        let e = (-c * c * PI * PI * t / 8.0).exp();
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        surv += sign * e / c;
        dens += sign * c * e;
        if e <= 1e-18 * surv.abs() {
            break;
        }
    }
    (4.0 / PI * surv, PI / 2.0 * dens)
}

/// `P(τ ≤ t)`.
pub fn bm_exit_cdf(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t < SWITCH {
        small_cdf(t)
    } else {
        1.0 - large_terms(t).0
    }
}

/// `P(τ > t)`.
pub fn bm_exit_survival(t: f64) -> f64 {
    if t <= 0.0 {
        1.0
    } else if t < SWITCH {
        1.0 - small_cdf(t)
    } else {
        large_terms(t).0
    }
}

/// Density of `τ`.
pub fn bm_exit_density(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t < SWITCH {
        small_density(t)
    } else {
        large_terms(t).1
    }
}

fn cdf_at_switch() -> f64 {
    static F: OnceLock<f64> = OnceLock::new();
    *F.get_or_init(|| small_cdf(SWITCH))
}

/// Quantile of `τ` at `u ∈ (0, 1)`: safeguarded Newton on `F(t) = u` for
/// the early part and on `ln S(t) = ln(1 − u)` for the tail.
pub fn bm_exit_quantile(u: f64) -> f64 {
    debug_assert!(u > 0.0 && u < 1.0);
    use std::f64::consts::PI;
    if u < cdf_at_switch() {
        let x = erfc_inv(0.5 * u);
        let (mut lo, mut hi) = (0.0, SWITCH);
        let mut t = (0.5 / (x * x)).clamp(1e-300, SWITCH);
        for _ in 0..100 {
            let g = small_cdf(t) - u;
            if g > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let mut next = t - g / small_density(t);
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() <= 1e-15 * t {
                return next;
            }
            t = next;
        }
        t
    } else {
        let target = (-u).ln_1p();
        let (mut lo, mut hi) = (SWITCH, f64::INFINITY);
        let mut t = (8.0 / (PI * PI) * ((4.0 / PI).ln() - target)).max(SWITCH);
        for _ in 0..100 {
            let (s, f) = large_terms(t);
            let g = s.ln() - target;
            if g > 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let mut next = t + g * s / f;
            if !(next > lo && next < hi) {
                next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * t };
            }
            if (next - t).abs() <= 1e-15 * t {
                return next;
            }
            t = next;
        }
        t
    }
}

/// Draw `τ`.
pub fn sample_bm_exit_time<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    bm_exit_quantile(open01(rng))
}

// ---------------------------------------------------------------------------
// Skew exit and the embedded walk

/// Exit of skew BM from `(−a, b)` started at the skew point: returns
/// `(exited right, exit time)`.
pub fn sample_skew_exit<R: Rng + ?Sized>(k: &SkewExitKernel, rng: &mut R) -> (bool, f64) {
    let (a, b) = (k.a, k.b);
    let m = a.min(b);
    let long = a.max(b);
    let long_is_right = b > a;
    let mut time = 0.0;
    'excursion: loop {
        time += m * m * sample_bm_exit_time(rng);
        let right = rng.random::<f64>() < k.p;
        if a == b || right != long_is_right {
            return (right, time);
        }
        // Plain BM on the long side, at distance d0 from the skew point and
        // d1 from the far boundary.
        let (mut d0, mut d1) = (m, long - m);
        loop {
            let r = d0.min(d1);
            time += r * r * sample_bm_exit_time(rng);
            let outward = rng.random::<bool>();
            if d0 <= d1 {
                if !outward {
                    continue 'excursion;
                }
                d0 += r;
                d1 -= r;
                if d1 <= 0.0 {
                    return (long_is_right, time);
                }
            } else {
                if outward {
                    return (long_is_right, time);
                }
                d1 += r;
                d0 -= r;
            }
        }
    }
}

/// Position of the embedded walk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WalkState {
    pub interface_index: i64,
    pub clock: f64,
    pub rng_stream: u64,
}

/// One interface-to-interface move.
pub fn embedded_walk_step<R: Rng + ?Sized>(
    state: &WalkState,
    env: &TreeEnvironment,
    rng: &mut R,
) -> Result<WalkState> {
    let k = SkewExitKernel::at(env, state.interface_index)?;
    let (right, dt) = sample_skew_exit(&k, rng);
    Ok(WalkState {
        interface_index: state.interface_index + if right { 1 } else { -1 },
        clock: state.clock + dt,
        rng_stream: state.rng_stream,
    })
}

// ---------------------------------------------------------------------------
// Tracks: finite stretches of the interface line, with optional extra
// (unskewed) points

/// A finite increasing list of points; each interior point carries the
/// exit kernel to its two neighbours, and both end points absorb.
#[derive(Clone, Debug)]
pub struct Track {
    pos: Vec<f64>,
    kernels: Vec<Option<SkewExitKernel>>,
}

impl Track {
    /// From `(position, skewness)` pairs in increasing position order.
    pub fn new(points: &[(f64, f64)]) -> Result<Self> {
        if points.len() < 2 || points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Domain("track needs at least two increasing points".into()));
        }
        let n = points.len();
        let kernels = (0..n)
            .map(|t| {
                if t == 0 || t + 1 == n {
                    Ok(None)
                } else {
                    let a = points[t].0 - points[t - 1].0;
                    let b = points[t + 1].0 - points[t].0;
                    SkewExitKernel::new(points[t].1, a, b).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pos: points.iter().map(|p| p.0).collect(),
            kernels,
        })
    }

    /// Interfaces `lo..=hi` (signed) of `env` plus unskewed points at
    /// `extra` positions not already on an interface.
    pub fn from_env(env: &TreeEnvironment, lo: i64, hi: i64, extra: &[f64]) -> Result<Self> {
        let n = env.horizon() as i64;
        if lo.abs() > n || hi.abs() > n {
            return Err(Error::InsufficientHorizon {
                required: lo.unsigned_abs().max(hi.unsigned_abs()) as usize,
                available: env.horizon(),
            });
        }
        let mut points: Vec<(f64, f64)> = (lo..=hi).map(|k| (env.z(k), env.p(k))).collect();
        for &x in extra {
            if x > env.z(lo) && x < env.z(hi) && points.iter().all(|p| (p.0 - x).abs() > 1e-12) {
                points.push((x, 0.5));
            }
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self::new(&points)
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }

    pub fn position(&self, t: usize) -> f64 {
        self.pos[t]
    }

    /// Index of the point at `x` (within 1e-12).
    pub fn index_of(&self, x: f64) -> Option<usize> {
        self.pos.iter().position(|&p| (p - x).abs() <= 1e-12)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Outcome {
    /// Hitting time and the roulette boost of the path.
    Hit(f64, f64),
    /// Lost at roulette, or weight `e^{−λT}` below the kill threshold.
    Killed,
    /// Reached a certified escape point.
    Escaped,
    /// Reached the far end of the track without a certificate.
    Boundary,
    /// Step cap exhausted.
    Capped,
}

/// Russian roulette on the path weight `e^{−λ·clock}`: whenever the
/// (boosted) weight drops below `threshold`, the path survives with
/// probability `survival` and its boost is divided by it. The estimator
/// stays unbiased while paths that wander off stop early. A hard kill at
/// `kill_clock` remains as a backstop.
#[derive(Clone, Copy, Debug)]
struct Roulette {
    next: f64,
    spacing: f64,
    survival: f64,
    boost: f64,
    kill_clock: f64,
}

impl Roulette {
    fn new(lambda: f64, opts: &HitOptions) -> Self {
        let kill_clock = if lambda > 0.0 {
            (1.0 / opts.kill_weight).ln() / lambda
        } else {
            f64::INFINITY
        };
        let active = lambda > 0.0 && opts.roulette_weight > 0.0 && opts.roulette_survival < 1.0;
        if !active {
            return Self {
                next: f64::INFINITY,
                spacing: 0.0,
                survival: 1.0,
                boost: 1.0,
                kill_clock,
            };
        }
        Self {
            next: (1.0 / opts.roulette_weight).ln() / lambda,
            spacing: (1.0 / opts.roulette_survival).ln() / lambda,
            survival: opts.roulette_survival,
            boost: 1.0,
            kill_clock,
        }
    }

    /// `false` when the path dies at `clock`.
    #[inline]
    fn survives(&mut self, clock: f64, rng: &mut StreamRng) -> bool {
        if clock > self.kill_clock {
            return false;
        }
        while clock > self.next {
            if rng.random::<f64>() >= self.survival {
                return false;
            }
            self.boost /= self.survival;
            self.next += self.spacing;
        }
        true
    }
}

struct PathSpec<'a> {
    track: &'a Track,
    start: usize,
    target: usize,
    roulette: Roulette,
    far_end_certified: bool,
    max_steps: u64,
}

fn run_path(spec: &PathSpec, rng: &mut StreamRng) -> Outcome {
    let far = if spec.target == 0 { spec.track.len() - 1 } else { 0 };
    let mut t = spec.start;
    let mut clock = 0.0;
    let mut roulette = spec.roulette;
    for _ in 0..spec.max_steps {
        if t == spec.target {
            return Outcome::Hit(clock, roulette.boost);
        }
        if t == far {
            return if spec.far_end_certified {
                Outcome::Escaped
            } else {
                Outcome::Boundary
            };
        }
        let k = spec.track.kernels[t].as_ref().expect("interior point");
        let (right, dt) = sample_skew_exit(k, rng);
        clock += dt;
        if !roulette.survives(clock, rng) {
            return Outcome::Killed;
        }
        t = if right { t + 1 } else { t - 1 };
    }
    Outcome::Capped
}

/// Per-chunk tallies, merged in chunk order.
#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    weight: MeanVar,
    hits: u64,
    killed: u64,
    escaped: u64,
    boundary: u64,
    capped: u64,
}

impl Tally {
    fn merge(&mut self, o: &Tally) {
        self.weight.merge(&o.weight);
        self.hits += o.hits;
        self.killed += o.killed;
        self.escaped += o.escaped;
        self.boundary += o.boundary;
        self.capped += o.capped;
    }
}

fn simulate<F>(n_paths: usize, family: &StreamFamily, base: u64, lambda: f64, path: F) -> Tally
where
    F: Fn(&mut StreamRng) -> Outcome + Sync,
{
    let chunks = n_paths.div_ceil(CHUNK);
    let parts: Vec<Tally> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut tally = Tally::default();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_paths) {
                let mut rng = family.stream(base + i as u64);
                let w = match path(&mut rng) {
                    Outcome::Hit(t, boost) => {
                        tally.hits += 1;
                        boost * (-lambda * t).exp()
                    }
                    Outcome::Killed => {
                        tally.killed += 1;
                        0.0
                    }
                    Outcome::Escaped => {
                        tally.escaped += 1;
                        0.0
                    }
                    Outcome::Boundary => {
                        tally.boundary += 1;
                        0.0
                    }
                    Outcome::Capped => {
                        tally.capped += 1;
                        0.0
                    }
                };
                tally.weight.push(w);
            }
            tally
        })
        .collect();
    let mut total = Tally::default();
    for p in &parts {
        total.merge(p);
    }
    total
}

/// Controls for the hitting-time simulators.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct HitOptions {
    /// Paths whose weight `e^{−λT}` falls below this are stopped (λ > 0).
    pub kill_weight: f64,
    /// Roulette threshold on the path weight for λ > 0 (0 disables).
    pub roulette_weight: f64,
    /// Survival probability at each roulette round.
    pub roulette_survival: f64,
    /// A λ = 0 path counts as escaped once its probability of ever
    /// returning is below this.
    pub escape_return_prob: f64,
    pub max_steps: u64,
    /// Largest horizon a generated environment is extended to.
    pub max_horizon: usize,
}

impl Default for HitOptions {
    fn default() -> Self {
        Self {
            kill_weight: 1e-10,
            roulette_weight: 1e-3,
            roulette_survival: 0.1,
            escape_return_prob: 1e-6,
            max_steps: 10_000_000,
            max_horizon: 1 << 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HitStatus {
    /// Every path hit, was killed by weight, or escaped with a certificate.
    Certified,
    /// Some paths ended without a certificate; the standard error is
    /// widened by their fraction.
    Capped,
}

/// Monte Carlo estimate of `E[e^{−λT}; T < ∞]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HitResult {
    pub estimate: f64,
    pub std_error: f64,
    /// Fraction of paths that reached the target.
    pub p_hit: f64,
    pub n_paths: usize,
    pub hits: u64,
    pub killed: u64,
    pub escaped: u64,
    pub boundary: u64,
    pub capped: u64,
    pub status: HitStatus,
}

impl HitResult {
    fn from_tally(t: &Tally, n_paths: usize, lambda: f64) -> Self {
        let uncertified = t.capped + if lambda > 0.0 { 0 } else { t.boundary };
        let widen = uncertified as f64 / n_paths as f64;
        Self {
            estimate: t.weight.mean(),
            std_error: t.weight.std_error() + widen,
            p_hit: t.hits as f64 / n_paths as f64,
            n_paths,
            hits: t.hits,
            killed: t.killed,
            escaped: t.escaped,
            boundary: t.boundary,
            capped: t.capped,
            status: if uncertified == 0 {
                HitStatus::Certified
            } else {
                HitStatus::Capped
            },
        }
    }
}

/// Distance beyond which a λ > 0 path is stopped: travelling that far
/// before the weight falls below `kill` would be a > 10σ event.
fn kill_distance(lambda: f64, kill: f64, ell_hi: f64) -> (f64, f64) {
    let t_kill = (1.0 / kill).ln() / lambda;
    (t_kill, t_kill + 10.0 * t_kill.sqrt() + 20.0 * ell_hi)
}

/// First index `m > start` from which the walk returns to `root` with
/// probability below `eps`, or `None` if the materialized environment is
/// too short to tell. `root ≥ 0`; the return probability from `m` is
/// `Σ_{k≥m} π_k / (1 + Σ_{k>root} π_k)` with `π_k = Π_{root<j≤k} ρ_j`.
fn escape_index(env: &TreeEnvironment, root: usize, start: usize, eps: f64) -> Option<usize> {
    let top = env.max_interface() as usize;
    if top <= root + 1 {
        return None;
    }
    let mut pi = Vec::with_capacity(top - root);
    let mut prod = 1.0;
    for j in root + 1..=top {
        prod *= kernel::odds(env, j);
        pi.push(prod);
    }
    // suffix[m - root - 1] = Σ_{k ≥ m} π_k
    let mut suffix = vec![0.0; pi.len() + 1];
    for i in (0..pi.len()).rev() {
        suffix[i] = suffix[i + 1] + pi[i];
    }
    let norm = 1.0 + suffix[0];
    let from = (start + 1).max(root + 1);
    (from..=top).find(|&m| suffix[m - root - 1] / norm < eps && pi[m - root - 1] < eps)
}

fn extended(env: &TreeEnvironment, n: usize, opts: &HitOptions) -> Result<TreeEnvironment> {
    if n <= env.horizon() {
        Ok(env.clone())
    } else if env.is_extendable() && n <= opts.max_horizon {
        env.extend_to(n)
    } else {
        Err(Error::InsufficientHorizon {
            required: n,
            available: env.horizon(),
        })
    }
}

/// Smallest `k ≥ 0` with `z_k ≥ x`, extending the environment if needed.
fn index_beyond(env: &mut TreeEnvironment, x: f64, opts: &HitOptions) -> Result<i64> {
    loop {
        if let Some(k) = (0..=env.horizon() as i64).find(|&k| env.z(k) >= x) {
            return Ok(k);
        }
        let n = (2 * env.horizon()).max(16);
        *env = extended(env, n, opts)?;
    }
}

/// Track and certification for a hit of interface `to` from `from`.
fn hitting_track(
    env: &TreeEnvironment,
    from: i64,
    to: i64,
    lambda: f64,
    opts: &HitOptions,
) -> Result<(Track, usize, usize, bool)> {
    let mut env = env.clone();
    let ell_hi = env.bounds().ell_hi;
    let (lo, hi, certified) = if lambda > 0.0 {
        let (_, dist) = kill_distance(lambda, opts.kill_weight, ell_hi);
        if from > to {
            let x = env.z(from).abs() + dist;
            let hi = index_beyond(&mut env, x, opts)?;
            (to, hi.max(from + 1), false)
        } else {
            let x = dist - env.z(from).min(0.0);
            let reach = index_beyond(&mut env, x, opts)?;
            let lo = -(reach.max(from.unsigned_abs() as i64 + 1));
            (lo, to, false)
        }
    } else {
        // Escape is certified once the return probability is small; the
        // negative side mirrors the positive one through the root.
        let (root, start) = if from > to {
            (to as usize, from as usize)
        } else {
            (0, from.unsigned_abs() as usize)
        };
        let mut found = None;
        loop {
            if let Some(m) = escape_index(&env, root, start, opts.escape_return_prob) {
                found = Some(m);
                break;
            }
            let n = (2 * env.horizon()).max(64);
            if !env.is_extendable() || n > opts.max_horizon {
                break;
            }
            env = env.extend_to(n)?;
        }
        let m = found.unwrap_or(env.max_interface() as usize) as i64;
        if from > to {
            (to, m.max(from + 1), found.is_some())
        } else {
            (-m.max(from.abs() + 1), to, found.is_some())
        }
    };
    let track = Track::from_env(&env, lo, hi, &[])?;
    let start = (from - lo) as usize;
    let target = (to - lo) as usize;
    Ok((track, start, target, certified))
}

fn check_indices(env: &TreeEnvironment, from: i64, to: i64) -> Result<()> {
    let top = from.abs().max(to.abs());
    if top > env.max_interface() {
        return Err(Error::InsufficientHorizon {
            required: top as usize + 1,
            available: env.horizon(),
        });
    }
    Ok(())
}

/// Monte Carlo estimate of `E[e^{−λT}; T < ∞]` for the hitting time `T` of
/// `z_to` from `z_from` (signed indices). Paths are never censored for
/// `λ > 0` (they are stopped once their weight is negligible); for `λ = 0`
/// they stop at a certified escape point.
pub fn hitting_time_laplace_mc(
    env: &TreeEnvironment,
    from: i64,
    to: i64,
    lambda: f64,
    n_paths: usize,
    seed: u64,
    opts: HitOptions,
) -> Result<HitResult> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be ≥ 0, got {lambda}")));
    }
    if n_paths < 2 {
        return Err(Error::Domain("need at least two paths".into()));
    }
    check_indices(env, from, to)?;
    // Mirror so that the target sits on the non-negative side.
    let (from, to) = if to < 0 || (to == 0 && from < 0) { (-from, -to) } else { (from, to) };
    let family = StreamFamily::new(seed, "mc.hit");
    if from == to {
        let mut t = Tally::default();
        for _ in 0..n_paths {
            t.weight.push(1.0);
        }
        t.hits = n_paths as u64;
        return Ok(HitResult::from_tally(&t, n_paths, lambda));
    }
    let (track, start, target, certified) = hitting_track(env, from, to, lambda, &opts)?;
    let spec = PathSpec {
        track: &track,
        start,
        target,
        roulette: Roulette::new(lambda, &opts),
        far_end_certified: certified,
        max_steps: opts.max_steps,
    };
    let tally = simulate(n_paths, &family, 0, lambda, |rng| run_path(&spec, rng));
    Ok(HitResult::from_tally(&tally, n_paths, lambda))
}

/// Hitting times of `z_to` from `z_from` at `λ = 0`: `Some(T)` for paths
/// that hit, `None` for certified escapes (or uncertified stops).
pub fn hitting_times(
    env: &TreeEnvironment,
    from: i64,
    to: i64,
    n_paths: usize,
    seed: u64,
    label: &str,
    opts: HitOptions,
) -> Result<Vec<Option<f64>>> {
    check_indices(env, from, to)?;
    let (from, to) = if to < 0 || (to == 0 && from < 0) { (-from, -to) } else { (from, to) };
    let (track, start, target, certified) = hitting_track(env, from, to, 0.0, &opts)?;
    let spec = PathSpec {
        track: &track,
        start,
        target,
        roulette: Roulette::new(0.0, &opts),
        far_end_certified: certified,
        max_steps: opts.max_steps,
    };
    let family = StreamFamily::new(seed, label);
    let chunks = n_paths.div_ceil(CHUNK);
    let parts: Vec<Vec<Option<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            (c * CHUNK..((c + 1) * CHUNK).min(n_paths))
                .map(|i| match run_path(&spec, &mut family.stream(i as u64)) {
                    Outcome::Hit(t, _) => Some(t),
                    _ => None,
                })
                .collect()
        })
        .collect();
    Ok(parts.concat())
}

// ---------------------------------------------------------------------------
// Large-deviation trend

/// One row of [`ldp_trend`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LdpRow {
    pub t: f64,
    /// `ln q̂ / ((v − c)t)`.
    #[serde(serialize_with = "crate::report::ser_f64")]
    pub value: f64,
    #[serde(serialize_with = "crate::report::ser_f64")]
    pub std_error: f64,
    /// `ln q̂`.
    #[serde(serialize_with = "crate::report::ser_f64")]
    pub log_q: f64,
    /// Number of point-to-point stages.
    pub levels: usize,
    /// Some stage had no successful path.
    pub flagged: bool,
}

/// `(1/((v − c)t))·ln Ê[e^{−λT}]`, where `T` is the hitting time of `ct`
/// from `vt`, for every `t` in `t_grid`.
///
/// A direct average of `e^{−λT}` is hopeless at desk scale (it is of order
/// `e^{μ(−λ)(v−c)t}`), so the strong Markov property is used instead: the
/// walk must visit every interface between `vt` and `ct` in order, hence
/// `E[e^{−λT}]` is the product of the one-step transforms, each estimated
/// with `n_paths` independent paths. `ct` and `vt` are added to the track as
/// unskewed points when they are not interfaces. The standard error
/// follows from the delta method.
#[allow(clippy::too_many_arguments)]
pub fn ldp_trend(
    env: &TreeEnvironment,
    c: f64,
    v: f64,
    lambda: f64,
    t_grid: &[f64],
    n_paths: usize,
    seed: u64,
    opts: HitOptions,
) -> Result<Vec<LdpRow>> {
    if !(c > 0.0 && v > c && v.is_finite()) {
        return Err(Error::Domain(format!("need 0 < c < v, got c = {c}, v = {v}")));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    if n_paths < 2 || t_grid.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::Domain("need n_paths ≥ 2 and positive times".into()));
    }
    let family = StreamFamily::new(seed, "mc.ldp");
    let mut env = env.clone();
    let (_, dist) = kill_distance(lambda, opts.kill_weight, env.bounds().ell_hi);
    let mut rows = Vec::with_capacity(t_grid.len());
    for (row, &t) in t_grid.iter().enumerate() {
        let (low, high) = (c * t, v * t);
        let top = index_beyond(&mut env, high + dist, &opts)?;
        let bottom = index_beyond(&mut env, low, &opts)?.saturating_sub(1);
        let full = Track::from_env(&env, bottom, top, &[low, high])?;
        let first = full
            .index_of(low)
            .or_else(|| full.pos.iter().position(|&p| p > low))
            .expect("low point on track");
        let points: Vec<(f64, f64)> = (first..full.len())
            .map(|i| {
                let p = full.kernels[i].map_or(0.5, |k| k.p);
                (full.pos[i], p)
            })
            .collect();
        let track = Track::new(&points)?;
        let start = track.index_of(high).expect("high point on track");
        let mut log_q = 0.0;
        let mut var = 0.0;
        let mut flagged = false;
        for level in 0..start {
            let spec = PathSpec {
                track: &track,
                start: level + 1,
                target: level,
                roulette: Roulette::new(lambda, &opts),
                far_end_certified: false,
                max_steps: opts.max_steps,
            };
            let base = ((row as u64) << 48) | ((level as u64) << 32);
            let tally = simulate(n_paths, &family, base, lambda, |rng| run_path(&spec, rng));
            let q = tally.weight.mean();
            if tally.hits == 0 || q <= 0.0 {
                flagged = true;
                log_q = f64::NEG_INFINITY;
                var = f64::NAN;
                break;
            }
            log_q += q.ln();
            var += (tally.weight.std_error() / q).powi(2);
        }
        let scale = (v - c) * t;
        rows.push(LdpRow {
            t,
            value: log_q / scale,
            std_error: var.sqrt() / scale,
            log_q,
            levels: start,
            flagged,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Lattice walk

/// Lattice simulator settings.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LatticeSimConfig {
    /// Target spacing `h`; segment `i` uses `ℓ_i / round(ℓ_i/h)`.
    pub step: f64,
    pub t_max: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl LatticeSimConfig {
    fn validate(&self, env: &TreeEnvironment) -> Result<()> {
        let ell_lo = env.bounds().ell_lo;
        if !(self.step > 0.0 && self.step <= ell_lo / 8.0 * (1.0 + 1e-12)) {
            return Err(Error::config(
                "step",
                format!("lattice step {} must lie in (0, ell_lo/8 = {}]", self.step, ell_lo / 8.0),
            ));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::config("t_max", "must be positive"));
        }
        if self.n_paths < 2 {
            return Err(Error::config("n_paths", "need at least two paths"));
        }
        Ok(())
    }
}

/// Per-generation grid: segment `i` (length `ℓ_i`) is cut into `n_i`
/// steps of size `h_i`; negative segments mirror positive ones.
struct Lattice<'a> {
    env: &'a TreeEnvironment,
    n_sub: Vec<u32>,
    h: Vec<f64>,
}

/// Fair coin flips, 64 per draw.
struct Bits {
    word: u64,
    left: u32,
}

impl Bits {
    fn new() -> Self {
        Self { word: 0, left: 0 }
    }

    #[inline]
    fn next(&mut self, rng: &mut StreamRng) -> bool {
        if self.left == 0 {
            self.word = rng.random();
            self.left = 64;
        }
        let b = self.word & 1 == 1;
        self.word >>= 1;
        self.left -= 1;
        b
    }
}

impl<'a> Lattice<'a> {
    fn new(env: &'a TreeEnvironment, step: f64) -> Self {
        let n_sub: Vec<u32> = env
            .lengths()
            .iter()
            .map(|&l| ((l / step).round() as u32).max(1))
            .collect();
        let h = env.lengths().iter().zip(&n_sub).map(|(l, &n)| l / n as f64).collect();
        Self { env, n_sub, h }
    }

    /// Generation index of signed segment `s` (between `z_s` and `z_{s+1}`).
    #[inline]
    fn gen(s: i64) -> usize {
        if s >= 0 {
            s as usize
        } else {
            (-s - 1) as usize
        }
    }

    fn limit(&self) -> i64 {
        self.n_sub.len() as i64 - 1
    }

    fn position(&self, s: i64, m: u32) -> f64 {
        self.env.z(s) + m as f64 * self.h[Self::gen(s)]
    }

    /// One lattice step from `(s, m)`; returns the elapsed time.
    #[inline]
    fn step(&self, s: &mut i64, m: &mut u32, rng: &mut StreamRng, bits: &mut Bits) -> f64 {
        if *m == 0 {
            let hl = self.h[Self::gen(*s - 1)];
            let hr = self.h[Self::gen(*s)];
            let p = self.env.p(*s);
            let q = 1.0 - p;
            let den = p * hl + q * hr;
            let dt = hl * hr * (p * hr + q * hl) / den;
            if rng.random::<f64>() < p * hl / den {
                if self.n_sub[Self::gen(*s)] == 1 {
                    *s += 1;
                } else {
                    *m = 1;
                }
            } else {
                *s -= 1;
                *m = self.n_sub[Self::gen(*s)] - 1;
            }
            dt
        } else {
            let g = Self::gen(*s);
            if bits.next(rng) {
                *m += 1;
                if *m == self.n_sub[g] {
                    *s += 1;
                    *m = 0;
                }
            } else {
                *m -= 1;
            }
            self.h[g] * self.h[g]
        }
    }
}

/// Result of [`lln_drift`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DriftResult {
    /// Mean of `Y_{t_max}/t_max`.
    pub speed_estimate: f64,
    pub std_error: f64,
    /// 95% confidence interval.
    #[serde(serialize_with = "crate::report::ser_f64_pair")]
    pub ci: (f64, f64),
    /// Average of `ρ_i` over the materialized interfaces.
    pub mean_rho: f64,
    /// `mean_rho ≥ 1`: the law of large numbers check may not apply.
    pub warning: bool,
    pub n_paths: usize,
}

/// `E[Y_t]/t` at `t = t_max` from `z_start` with the lattice walk.
pub fn lln_drift(env: &TreeEnvironment, sim: &LatticeSimConfig, start: i64) -> Result<DriftResult> {
    sim.validate(env)?;
    let b = env.bounds();
    let reach = env.z(start.abs().min(env.horizon() as i64)).abs()
        + sim.t_max / b.ell_lo
        + 10.0 * sim.t_max.sqrt()
        + 10.0 * b.ell_hi;
    let needed = (reach / b.ell_lo).ceil() as usize + 2;
    let env = extended(env, needed, &HitOptions::default())?;
    if start.unsigned_abs() as usize >= env.horizon() {
        return Err(Error::InsufficientHorizon {
            required: start.unsigned_abs() as usize + 1,
            available: env.horizon(),
        });
    }
    let sample = (env.max_interface() as usize).min(10_000);
    let mean_rho = (1..=sample).map(|j| kernel::odds(&env, j)).sum::<f64>() / sample as f64;
    let lattice = Lattice::new(&env, sim.step);
    let limit = lattice.limit();
    let family = StreamFamily::new(sim.seed, "mc.drift");
    let chunks = sim.n_paths.div_ceil(CHUNK);
    let parts: Vec<Result<MeanVar>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = MeanVar::new();
            for i in c * CHUNK..((c + 1) * CHUNK).min(sim.n_paths) {
                let mut rng = family.stream(i as u64);
                let mut bits = Bits::new();
                let (mut s, mut m) = (start, 0u32);
                let mut clock = 0.0;
                while clock < sim.t_max {
                    clock += lattice.step(&mut s, &mut m, &mut rng, &mut bits);
                    if s.abs() >= limit {
                        return Err(Error::InsufficientHorizon {
                            required: 2 * env.horizon(),
                            available: env.horizon(),
                        });
                    }
                }
                acc.push(lattice.position(s, m) / sim.t_max);
            }
            Ok(acc)
        })
        .collect();
    let mut acc = MeanVar::new();
    for p in parts {
        acc.merge(&p?);
    }
    let (mean, se) = (acc.mean(), acc.std_error());
    Ok(DriftResult {
        speed_estimate: mean,
        std_error: se,
        ci: (mean - 1.96 * se, mean + 1.96 * se),
        mean_rho,
        warning: mean_rho >= 1.0,
        n_paths: sim.n_paths,
    })
}

/// Exit statistics of the lattice walk started at `z_i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LatticeExit {
    pub right: u64,
    pub left: u64,
    pub mean_time: f64,
    pub time_std_error: f64,
}

/// First neighbouring interface reached by the lattice walk from `z_i`.
pub fn lattice_first_exit(env: &TreeEnvironment, i: i64, step: f64, n_paths: usize, seed: u64) -> Result<LatticeExit> {
    let sim = LatticeSimConfig {
        step,
        t_max: 1.0,
        n_paths,
        seed,
    };
    sim.validate(env)?;
    if i.abs() > env.max_interface() {
        return Err(Error::InsufficientHorizon {
            required: i.unsigned_abs() as usize + 1,
            available: env.horizon(),
        });
    }
    let lattice = Lattice::new(env, step);
    let family = StreamFamily::new(seed, "mc.lattice-exit");
    let chunks = n_paths.div_ceil(CHUNK);
    let parts: Vec<(u64, MeanVar)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut right = 0;
            let mut times = MeanVar::new();
            for k in c * CHUNK..((c + 1) * CHUNK).min(n_paths) {
                let mut rng = family.stream(k as u64);
                let mut bits = Bits::new();
                let (mut s, mut m) = (i, 0u32);
                let mut clock = lattice.step(&mut s, &mut m, &mut rng, &mut bits);
                // Returns to z_i do not count; only the neighbours end the run.
                while m != 0 || s == i {
                    clock += lattice.step(&mut s, &mut m, &mut rng, &mut bits);
                }
                if s > i {
                    right += 1;
                }
                times.push(clock);
            }
            (right, times)
        })
        .collect();
    let mut right = 0;
    let mut times = MeanVar::new();
    for (r, t) in &parts {
        right += r;
        times.merge(t);
    }
    Ok(LatticeExit {
        right,
        left: n_paths as u64 - right,
        mean_time: times.mean(),
        time_std_error: times.std_error(),
    })
}

/// Lattice analogue of [`hitting_time_laplace_mc`] for `λ > 0` and a
/// target below the start on the non-negative side.
pub fn lattice_hitting_laplace(
    env: &TreeEnvironment,
    from: i64,
    to: i64,
    lambda: f64,
    step: f64,
    n_paths: usize,
    seed: u64,
) -> Result<HitResult> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    if !(from > to && to >= 0) {
        return Err(Error::Domain("lattice hitting needs from > to ≥ 0".into()));
    }
    let sim = LatticeSimConfig {
        step,
        t_max: 1.0,
        n_paths,
        seed,
    };
    sim.validate(env)?;
    let opts = HitOptions::default();
    let (_, dist) = kill_distance(lambda, opts.kill_weight, env.bounds().ell_hi);
    let mut env = env.clone();
    let x = env.z(from) + dist;
    let top = index_beyond(&mut env, x, &opts)?;
    let env = extended(&env, top as usize + 2, &opts)?;
    let lattice = Lattice::new(&env, step);
    let family = StreamFamily::new(seed, "mc.lattice-hit");
    let tally = simulate(n_paths, &family, 0, lambda, |rng| {
        let mut bits = Bits::new();
        let (mut s, mut m) = (from, 0u32);
        let mut clock = 0.0;
        let mut roulette = Roulette::new(lambda, &opts);
        loop {
            if s == to && m == 0 {
                return Outcome::Hit(clock, roulette.boost);
            }
            if s >= top {
                return Outcome::Boundary;
            }
            clock += lattice.step(&mut s, &mut m, rng, &mut bits);
            if !roulette.survives(clock, rng) {
                return Outcome::Killed;
            }
        }
    });
    Ok(HitResult::from_tally(&tally, n_paths, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate, EnvConfig};
    use crate::rng::stream;
    use approx::assert_relative_eq;

    #[test]
    fn exit_time_distribution_is_consistent() {
        // Both series agree at the switch and the CDF is the integral of
        // the density.
        let t = SWITCH;
        assert_relative_eq!(small_cdf(t), 1.0 - large_terms(t).0, epsilon = 1e-14);
        assert_relative_eq!(small_density(t), large_terms(t).1, max_relative = 1e-12);
        let (a, b) = (0.3, 1.7);
        let n = 4000;
        let hstep = (b - a) / n as f64;
        let integral: f64 = (0..n)
            .map(|i| bm_exit_density(a + (i as f64 + 0.5) * hstep) * hstep)
            .sum();
        assert_relative_eq!(integral, bm_exit_cdf(b) - bm_exit_cdf(a), max_relative = 1e-6);
        for u in [1e-12, 1e-3, 0.2, cdf_at_switch(), 0.5, 0.9, 1.0 - 1e-12] {
            let q = bm_exit_quantile(u);
            assert_relative_eq!(bm_exit_cdf(q), u, max_relative = 1e-9);
        }
    }

    #[test]
    fn exit_time_moments() {
        // E τ = 1 and E τ² = 5/3 for the exit from (−1, 1).
        let mut rng = stream(1, "test.tau", 0);
        let acc: MeanVar = (0..200_000).map(|_| sample_bm_exit_time(&mut rng)).collect();
        assert!((acc.mean() - 1.0).abs() < 3.0 * acc.std_error(), "{acc:?}");
        let var = acc.variance();
        assert!((var - 2.0 / 3.0).abs() < 0.02, "{var}");
    }

    /// Mean exit time of skew BM from (−a, b) started at the skew point:
    /// solve ½u″ = −1 with u(−a) = u(b) = 0, u continuous and
    /// p·u′(0+) = (1−p)·u′(0−).
    fn mean_exit_time(p: f64, a: f64, b: f64) -> f64 {
        let q = 1.0 - p;
        let alpha = (b * b - a * a) / (b + p * a / q);
        b * b - alpha * b
    }

    #[test]
    fn skew_exit_matches_probabilities_and_mean_time() {
        let cases = [(0.5, 1.0, 1.0), (2.0 / 3.0, 1.0, 1.0), (0.75, 0.6, 1.9), (0.8, 2.0, 0.7)];
        for (case, &(p, a, b)) in cases.iter().enumerate() {
            let k = SkewExitKernel::new(p, a, b).unwrap();
            let mut rng = stream(2, "test.skew", case as u64);
            let n = 200_000;
            let mut right = 0u64;
            let mut times = MeanVar::new();
            for _ in 0..n {
                let (r, t) = sample_skew_exit(&k, &mut rng);
                right += u64::from(r);
                times.push(t);
            }
            let (pp, _) = k.exit_probabilities();
            let se = (pp * (1.0 - pp) / n as f64).sqrt();
            assert!((right as f64 / n as f64 - pp).abs() < 4.0 * se, "case {case}");
            let want = mean_exit_time(p, a, b);
            assert!((times.mean() - want).abs() < 4.0 * times.std_error(), "case {case}: {} vs {want}", times.mean());
        }
        // Symmetric window: E σ = ab.
        assert_relative_eq!(mean_exit_time(0.5, 0.7, 1.3), 0.91, max_relative = 1e-12);
    }

    #[test]
    fn embedded_walk_right_frequency() {
        let env = generate(&EnvConfig::constant(3, 1.0, 10)).unwrap();
        let mut rng = stream(3, "test.walk", 0);
        let n = 200_000;
        let mut right = 0u64;
        for _ in 0..n {
            let s = WalkState {
                interface_index: 2,
                clock: 0.0,
                rng_stream: 0,
            };
            let next = embedded_walk_step(&s, &env, &mut rng).unwrap();
            assert!(next.clock > 0.0);
            right += u64::from(next.interface_index == 3);
        }
        let f = right as f64 / n as f64;
        let se = (2.0 / 9.0 / n as f64).sqrt();
        assert!((f - 2.0 / 3.0).abs() < 3.0 * se, "{f}");
        // Root: fair.
        let k0 = SkewExitKernel::at(&env, 0).unwrap();
        assert_eq!(k0.exit_probabilities(), (0.5, 0.5));
    }

    #[test]
    fn line_hitting_transform() {
        let env = generate(&EnvConfig::constant(2, 1.0, 50)).unwrap();
        let r = hitting_time_laplace_mc(&env, 1, 0, 0.5, 100_000, 4, HitOptions::default()).unwrap();
        let want = (-1.0f64).exp();
        assert!((r.estimate - want).abs() < 3.0 * r.std_error, "{r:?}");
        assert_eq!(r.status, HitStatus::Certified);
    }

    #[test]
    fn hit_probability_at_zero_lambda() {
        let env = generate(&EnvConfig::constant(3, 1.0, 100)).unwrap();
        let r = hitting_time_laplace_mc(&env, 1, 0, 0.0, 100_000, 5, HitOptions::default()).unwrap();
        assert_eq!(r.status, HitStatus::Certified);
        assert!((r.p_hit - 0.5).abs() < 3.0 * r.std_error, "{r:?}");
        // Mirrored problem gives the same law.
        let m = hitting_time_laplace_mc(&env, -1, 0, 0.0, 100_000, 5, HitOptions::default()).unwrap();
        assert_eq!(m.p_hit, r.p_hit);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let env = generate(&EnvConfig::constant(3, 1.0, 100)).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| hitting_time_laplace_mc(&env, 1, 0, 1.0, 5000, 9, HitOptions::default()).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn lattice_drift_signs() {
        let env = generate(&EnvConfig::constant(3, 1.0, 50)).unwrap();
        let sim = LatticeSimConfig {
            step: 0.125,
            t_max: 60.0,
            n_paths: 4000,
            seed: 6,
        };
        let up = lln_drift(&env, &sim, 1).unwrap();
        assert!(up.ci.0 > 0.0, "{up:?}");
        let down = lln_drift(&env, &sim, -1).unwrap();
        assert!(down.ci.1 < 0.0, "{down:?}");
        assert!((up.speed_estimate + down.speed_estimate).abs() < 3.0 * up.std_error.hypot(down.std_error));

        let line = generate(&EnvConfig::constant(2, 1.0, 50)).unwrap();
        let flat = lln_drift(&line, &sim, 0).unwrap();
        assert!(flat.ci.0 < 0.0 && flat.ci.1 > 0.0, "{flat:?}");
    }

    #[test]
    fn lattice_step_validation() {
        let env = generate(&EnvConfig::constant(3, 1.0, 50)).unwrap();
        let sim = LatticeSimConfig {
            step: 0.2,
            t_max: 1.0,
            n_paths: 10,
            seed: 0,
        };
        assert!(matches!(lln_drift(&env, &sim, 1), Err(Error::Config { .. })));
    }
}
