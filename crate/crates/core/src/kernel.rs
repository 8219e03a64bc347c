//! Interface-to-interface exit quantities of the embedded walk.
//!
//! Started at an interface with skewness `p`, the process leaves the
//! window `(−a, b)` around it through the right end with probability
//! `a·p / (b(1−p) + a·p)`. The exponential moments
//! `J_± = E[e^{ησ}; exit ±]` solve `½u″ + ηu = 0` on both sides of the
//! interface with `u` continuous and `p·u′(0+) = (1−p)·u′(0−)`. With
//! `k = √(2|η|)` and the common denominator
//!
//! ```text
//! D = (1−p)·C(ka)·S(kb) + p·S(ka)·C(kb)
//! ```
//!
//! one gets `J_+ = p·S(ka)/D` and `J_− = (1−p)·S(kb)/D`, where `(S, C)` is
//! `(sin, cos)` for `η > 0` and `(sinh, cosh)` for `η < 0`. For `η > 0`,
//! `D = ½[sin(k(a+b)) + (2p−1)·sin(k(a−b))]` first vanishes at the
//! principal eigenvalue of the two-sided problem, where both moments blow
//! up.

use serde::Serialize;

use crate::env::TreeEnvironment;
use crate::error::{Error, Result};

/// Skew exit problem around one interface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SkewExitKernel {
    /// Skewness (probability of an infinitesimal right excursion).
    pub p: f64,
    /// Left gap.
    pub a: f64,
    /// Right gap.
    pub b: f64,
}

impl SkewExitKernel {
    pub fn new(p: f64, a: f64, b: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("skewness {p} outside (0, 1)")));
        }
        if !(a.is_finite() && a > 0.0 && b.is_finite() && b > 0.0) {
            return Err(Error::Domain(format!("gaps ({a}, {b}) must be positive")));
        }
        Ok(Self { p, a, b })
    }

    /// Kernel at signed interface `i` of `env` (mirrored for `i < 0`).
    pub fn at(env: &TreeEnvironment, i: i64) -> Result<Self> {
        if i.abs() > env.max_interface() {
            return Err(Error::InsufficientHorizon {
                required: i.unsigned_abs() as usize + 1,
                available: env.horizon(),
            });
        }
        let (a, b) = env.gaps(i);
        Ok(Self { p: env.p(i), a, b })
    }

    /// `(p^i_{+1}, p^i_{−1})`.
    pub fn exit_probabilities(&self) -> (f64, f64) {
        let right = self.a * self.p;
        let left = self.b * (1.0 - self.p);
        let plus = right / (right + left);
        (plus, left / (right + left))
    }

    /// `(J_+, J_−)` at `eta`; both infinite at or past the divergence
    /// threshold.
    pub fn exit_laplace(&self, eta: f64) -> (f64, f64) {
        let (p, q, a, b) = (self.p, 1.0 - self.p, self.a, self.b);
        if eta == 0.0 {
            return self.exit_probabilities();
        }
        if eta < 0.0 {
            let k = (-2.0 * eta).sqrt();
            let (ta, tb) = ((k * a).tanh(), (k * b).tanh());
            let den = q * tb + p * ta;
            (p * ta * sech(k * b) / den, q * tb * sech(k * a) / den)
        } else {
            let k = (2.0 * eta).sqrt();
            // D has a single root on (0, π/max(a, b)): a second eigenfunction
            // would need a full half-wave on one side. So `k` is below the
            // threshold iff it is below that bound and D(k) > 0.
            if k * a.max(b) >= std::f64::consts::PI {
                return (f64::INFINITY, f64::INFINITY);
            }
            let (sa, ca) = (k * a).sin_cos();
            let (sb, cb) = (k * b).sin_cos();
            let den = q * ca * sb + p * sa * cb;
            if den <= 0.0 {
                return (f64::INFINITY, f64::INFINITY);
            }
            (p * sa / den, q * sb / den)
        }
    }

    /// Smallest `η > 0` at which the exponential moments diverge.
    pub fn divergence_threshold(&self) -> f64 {
        let zeta = 2.0 * self.p - 1.0;
        let (a, b) = (self.a, self.b);
        let den = |k: f64| (k * (a + b)).sin() + zeta * (k * (a - b)).sin();
        let (mut lo, mut hi) = (0.0, std::f64::consts::PI / a.max(b));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if den(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * lo * lo
    }
}

fn sech(x: f64) -> f64 {
    if x > 20.0 {
        let e = (-x).exp();
        2.0 * e / (1.0 + e * e)
    } else {
        1.0 / x.cosh()
    }
}

/// Certification status of a truncated series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesStatus {
    /// Closed form (e.g. the recurrent line).
    Exact,
    /// Tail bounded by a geometric majorant.
    Certified,
    /// Tail only observed to be negligible (partial products < 1e-14).
    EstimatedOnly,
}

/// Probability of ever reaching the root from an interface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HitProbability {
    pub value: f64,
    pub terms: usize,
    pub tail_bound: f64,
    pub status: SeriesStatus,
}

const TAIL_TOL: f64 = 1e-12;
const PARTIAL_TOL: f64 = 1e-14;

/// `ρ_j = ℓ_j(1−p_j) / (ℓ_{j−1} p_j)`: the left/right odds of the embedded
/// walk at interface `j ≥ 1`.
pub fn odds(env: &TreeEnvironment, j: usize) -> f64 {
    let p = env.p(j as i64);
    env.length(j) * (1.0 - p) / (env.length(j - 1) * p)
}

/// `P(T_0 < ∞)` from `z_i`, `i ≥ 1`.
///
/// With `π_k = Π_{j=1}^{k} ρ_j` and `σ_i = Σ_{k≥i} π_k`, the birth–death
/// chain reaches 0 from `i` with probability `σ_i / (1 + σ_1)`; for
/// `i = 1` this is `σ_1 / (1 + σ_1)`.
pub fn hit_probability_series(env: &TreeEnvironment, i: usize) -> Result<HitProbability> {
    if i == 0 {
        return Err(Error::Domain("starting interface must be ≥ 1".into()));
    }
    if env.is_degenerate_line() {
        return Ok(HitProbability {
            value: 1.0,
            terms: 0,
            tail_bound: 0.0,
            status: SeriesStatus::Exact,
        });
    }
    let last = env.max_interface() as usize;
    if i > last {
        return Err(Error::InsufficientHorizon {
            required: i + 1,
            available: env.horizon(),
        });
    }
    let bounds = env.bounds();
    let p_lo = crate::env::skewness(bounds.d_min);
    let rho_bar = bounds.ell_hi * (1.0 - p_lo) / (bounds.ell_lo * p_lo);

    let mut prod = 1.0;
    let mut sigma_1 = 0.0;
    let mut sigma_i = 0.0;
    let mut terms = 0;
    for k in 1..=last {
        prod *= odds(env, k);
        sigma_1 += prod;
        if k >= i {
            sigma_i += prod;
        }
        terms = k;
        if rho_bar >= 1.0 && k >= i && prod < PARTIAL_TOL {
            return Ok(HitProbability {
                value: sigma_i / (1.0 + sigma_1),
                terms,
                tail_bound: f64::NAN,
                status: SeriesStatus::EstimatedOnly,
            });
        }
    }
    if rho_bar < 1.0 {
        let tail = prod * rho_bar / (1.0 - rho_bar);
        if tail <= TAIL_TOL {
            return Ok(HitProbability {
                value: sigma_i / (1.0 + sigma_1),
                terms,
                tail_bound: tail,
                status: SeriesStatus::Certified,
            });
        }
        let extra = ((TAIL_TOL * (1.0 - rho_bar) / (prod * rho_bar)).ln() / rho_bar.ln()).ceil();
        return Err(Error::InsufficientHorizon {
            required: env.horizon() + extra.max(1.0) as usize,
            available: env.horizon(),
        });
    }
    // Partial products never became negligible: extrapolate the decay rate.
    let rate = prod.ln() / terms as f64;
    let required = if rate < 0.0 {
        env.horizon() + ((PARTIAL_TOL.ln() - prod.ln()) / rate).ceil().max(1.0) as usize
    } else {
        2 * env.horizon()
    };
    Err(Error::InsufficientHorizon {
        required,
        available: env.horizon(),
    })
}

/// Sufficient condition for `η_c > 0`: every consecutive pair of materialized
/// interfaces has `p^i_{+1}·p^{i+1}_{−1} < 1/4`.
pub fn step_product_condition(env: &TreeEnvironment) -> bool {
    max_step_product(env) < 0.25
}

/// `max_i p^i_{+1}·p^{i+1}_{−1}` over materialized `i ≥ 1`.
pub fn max_step_product(env: &TreeEnvironment) -> f64 {
    let last = env.max_interface();
    let mut worst: f64 = 0.0;
    for i in 1..last {
        let (plus, _) = SkewExitKernel::at(env, i).expect("in range").exit_probabilities();
        let (_, minus) = SkewExitKernel::at(env, i + 1).expect("in range").exit_probabilities();
        worst = worst.max(plus * minus);
    }
    worst
}

/// Kernels for interfaces `1..=n`.
pub fn kernels(env: &TreeEnvironment, n: usize) -> Result<Vec<SkewExitKernel>> {
    (1..=n as i64).map(|i| SkewExitKernel::at(env, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate, EnvConfig, LengthLaw};
    use approx::assert_relative_eq;

    #[test]
    fn exit_probabilities_examples() {
        let k = SkewExitKernel::new(2.0 / 3.0, 1.0, 1.0).unwrap();
        let (p, q) = k.exit_probabilities();
        assert_relative_eq!(p, 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(q, 1.0 / 3.0, epsilon = 1e-15);

        // Gambler's ruin on {−2, 0, 1}: from 0 the right end (distance 1)
        // is hit first with probability 2/3.
        let (p, q) = SkewExitKernel::new(0.5, 2.0, 1.0).unwrap().exit_probabilities();
        assert_relative_eq!(p, 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(q, 1.0 / 3.0, epsilon = 1e-15);

        let (p, q) = SkewExitKernel::new(2.0 / 3.0, 1.0, 2.0).unwrap().exit_probabilities();
        assert_relative_eq!(p, 0.5, epsilon = 1e-15);
        assert_relative_eq!(q, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn laplace_at_zero_is_probability() {
        let k = SkewExitKernel::new(0.8, 0.6, 1.7).unwrap();
        let (jp, jm) = k.exit_laplace(0.0);
        let (pp, pm) = k.exit_probabilities();
        assert_eq!((jp, jm), (pp, pm));
        // Continuity from both sides.
        let (a, b) = k.exit_laplace(1e-10);
        let (c, d) = k.exit_laplace(-1e-10);
        assert!((a - pp).abs() < 1e-9 && (c - pp).abs() < 1e-9);
        assert!((b - pm).abs() < 1e-9 && (d - pm).abs() < 1e-9);
    }

    #[test]
    fn symmetric_gaps_reduce_to_cos_and_cosh() {
        let (p, ell) = (2.0 / 3.0, 1.3);
        let k = SkewExitKernel::new(p, ell, ell).unwrap();
        for eta in [0.05, 0.2, 0.5] {
            let (jp, jm) = k.exit_laplace(eta);
            let c = ((2.0 * eta).sqrt() * ell).cos();
            assert_relative_eq!(jp, p / c, max_relative = 1e-13);
            assert_relative_eq!(jm, (1.0 - p) / c, max_relative = 1e-13);
        }
        let half = SkewExitKernel::new(0.5, ell, ell).unwrap();
        for lambda in [0.1, 1.0, 30.0, 5000.0] {
            let (jp, _) = half.exit_laplace(-lambda);
            let want = 0.5 / ((2.0 * lambda).sqrt() * ell).cosh();
            assert_relative_eq!(jp, want, max_relative = 1e-12);
        }
        let thr = k.divergence_threshold();
        let want = (std::f64::consts::FRAC_PI_2 / ell).powi(2) / 2.0;
        assert_relative_eq!(thr, want, max_relative = 1e-12);
        assert!(k.exit_laplace(thr * 1.0000001).0.is_infinite());
    }

    #[test]
    fn threshold_is_root_of_denominator() {
        for &(p, a, b) in &[(0.5, 1.0, 2.0), (0.9, 2.0, 0.5), (0.6, 0.3, 1.9), (0.75, 1.0, 1.0)] {
            let k = SkewExitKernel::new(p, a, b).unwrap();
            let eta = k.divergence_threshold();
            let (jp, _) = k.exit_laplace(eta * (1.0 - 1e-9));
            assert!(jp > 1e6, "J_+ = {jp} just below threshold {eta}");
        }
        // Unskewed BM: the Dirichlet eigenvalue of an interval of length a+b.
        let k = SkewExitKernel::new(0.5, 0.7, 1.6).unwrap();
        let want = 0.5 * (std::f64::consts::PI / 2.3).powi(2);
        assert_relative_eq!(k.divergence_threshold(), want, max_relative = 1e-12);
    }

    #[test]
    fn hit_probability_examples() {
        let env = generate(&EnvConfig::constant(3, 1.0, 200)).unwrap();
        let h = hit_probability_series(&env, 1).unwrap();
        assert_relative_eq!(h.value, 0.5, epsilon = 1e-12);
        assert_eq!(h.status, SeriesStatus::Certified);
        // From z_i the constant walk returns with probability ((1−p)/p)^i.
        let h3 = hit_probability_series(&env, 3).unwrap();
        assert_relative_eq!(h3.value, 0.125, epsilon = 1e-12);

        let env = generate(&EnvConfig::constant(4, 1.0, 200)).unwrap();
        assert_relative_eq!(hit_probability_series(&env, 1).unwrap().value, 1.0 / 3.0, epsilon = 1e-12);

        let env = generate(&EnvConfig::constant(2, 1.0, 20)).unwrap();
        let h = hit_probability_series(&env, 1).unwrap();
        assert_eq!((h.value, h.status), (1.0, SeriesStatus::Exact));
    }

    #[test]
    fn short_horizon_reports_requirement() {
        let env = generate(&EnvConfig::constant(3, 1.0, 10)).unwrap();
        match hit_probability_series(&env, 1) {
            Err(Error::InsufficientHorizon { required, available }) => {
                assert_eq!(available, 10);
                let longer = env.extend_to(required).unwrap();
                hit_probability_series(&longer, 1).unwrap();
            }
            other => panic!("expected insufficient horizon, got {other:?}"),
        }
    }

    #[test]
    fn step_product_condition_examples() {
        let env = generate(&EnvConfig::constant(3, 1.7, 40)).unwrap();
        assert!(step_product_condition(&env));
        let env = generate(&EnvConfig::constant(2, 1.0, 40)).unwrap();
        assert!(!step_product_condition(&env));
        assert_relative_eq!(max_step_product(&env), 0.25);

        let cfg = EnvConfig {
            degree_support: vec![(2, 0.5), (3, 0.5)],
            length_law: LengthLaw::Discrete {
                support: vec![(1.0, 1.0)],
            },
            horizon: 60,
            seed: 9,
        };
        let env = generate(&cfg).unwrap();
        // With equal gaps p^i_{+1} = p_i, so the literal product is
        // p_i(1 − p_{i+1}); a (3, 2) pair gives (2/3)(1/2) = 1/3.
        let lit = (1..59)
            .map(|i| env.p(i) * (1.0 - env.p(i + 1)))
            .fold(0.0f64, f64::max);
        assert_relative_eq!(max_step_product(&env), lit, epsilon = 1e-15);
        assert_eq!(step_product_condition(&env), lit < 0.25);
    }
}
