//! The limit ratio `ξ_λ` of the interface matrix products.
//!
//! Interface `k` contributes
//!
//! ```text
//! M_k = 1/(2 p_k γ_k) · [[γ_k², ζ_k γ_k²], [ζ_k, 1]],  γ_k = e^{√(2λ) ℓ_k},  ζ_k = 2p_k − 1,
//! ```
//!
//! and `(L_k, R_k) = (1, 1)·M_{k−1}⋯M_1`. The ratio `R_k/L_k` equals
//! `Φ_1∘⋯∘Φ_{k−1}(1)` for the Möbius maps `Φ(x) = (ζγ² + x)/(γ² + ζx)` and
//! converges to `1/ξ_λ ∈ [0, 1]`.
//!
//! All arithmetic uses `g = γ^{−2} ∈ (0, 1)`, which never overflows:
//! `Φ(x) = (ζ + g x)/(1 + ζ g x)`. Near `λ = 0` the limit approaches 1, so
//! the complement `y = 1 − x` is iterated separately through
//! `1 − Φ(x) = (1 − ζ)(1 − g + g y)/(1 + ζ g (1 − y))`.

use serde::Serialize;

use crate::env::TreeEnvironment;
use crate::error::{Error, Result};

/// `(γ, ζ)` of one interface, stored through `g = γ^{−2}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InterfaceMatrixParams {
    /// `√(2λ)·ℓ`, i.e. `ln γ`.
    pub log_gamma: f64,
    pub zeta: f64,
    /// `γ^{−2}`.
    pub g: f64,
    /// `1 − γ^{−2}`, computed without cancellation.
    pub one_minus_g: f64,
}

impl InterfaceMatrixParams {
    pub fn new(lambda: f64, p: f64, ell: f64) -> Self {
        let log_gamma = (2.0 * lambda).sqrt() * ell;
        Self {
            log_gamma,
            zeta: 2.0 * p - 1.0,
            g: (-2.0 * log_gamma).exp(),
            one_minus_g: -(-2.0 * log_gamma).exp_m1(),
        }
    }

    /// Parameters of interface `k ≥ 1` of `env`.
    pub fn at(env: &TreeEnvironment, lambda: f64, k: usize) -> Self {
        Self::new(lambda, env.p(k as i64), env.length(k))
    }

    pub fn gamma(&self) -> f64 {
        self.log_gamma.exp()
    }

    /// Lipschitz constant of `Φ` in the angle `θ = arctan x` on `[0, π/4]`.
    pub fn contraction_constant(&self) -> f64 {
        let (z, g) = (self.zeta, self.g);
        let zz = z * z;
        let k0 = (1.0 - zz) * g / (1.0 + zz);
        let k1 = 2.0 * (1.0 - zz) * g / ((1.0 + zz) * (1.0 + g * g) + 4.0 * z * g);
        k0.max(k1)
    }
}

/// `Φ_{(ζ,γ)}(x)`.
#[inline]
pub fn mobius_step(x: f64, m: &InterfaceMatrixParams) -> f64 {
    (m.zeta + m.g * x) / (1.0 + m.zeta * m.g * x)
}

/// `1 − Φ(1 − y)`.
#[inline]
pub fn complement_step(y: f64, m: &InterfaceMatrixParams) -> f64 {
    (1.0 - m.zeta) * (m.one_minus_g + m.g * y) / (1.0 + m.zeta * m.g * (1.0 - y))
}

/// Fixed point of `Φ` in `[0, 1]` for constant `(ζ, γ)`, returned as
/// `(x*, 1 − x*)` with both components free of cancellation.
pub fn constant_fixed_point(m: &InterfaceMatrixParams) -> (f64, f64) {
    let (z, g, h) = (m.zeta, m.g, m.one_minus_g);
    let disc = (h * h + 4.0 * z * z * g).sqrt();
    let x = 2.0 * z / (h + disc);
    let b = h + 2.0 * z * g;
    let y = 2.0 * h * (1.0 - z) / (b + disc);
    (x, y)
}

/// `ξ_λ` for the constant `(d, ℓ)` tree from the quadratic
/// `ξ = (√((γ²−1)² + 4ζ²γ²) + γ² − 1) / (2ζγ²)`.
pub fn xi_constant(d: u32, ell: f64, lambda: f64) -> f64 {
    let m = InterfaceMatrixParams::new(lambda, crate::env::skewness(d), ell);
    let (x, _) = constant_fixed_point(&m);
    1.0 / x
}

/// How an [`XiEstimate`] was stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum XiStatus {
    /// The monotone bracket or the contraction product is below `tol`.
    Certified,
    /// Only the residual stagnated below `tol` (contraction too weak).
    ResidualOnly,
}

/// Result of the backward Möbius iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct XiEstimate {
    pub lambda: f64,
    /// `1/ξ ∈ [0, 1]`, the primary value.
    pub inv_xi: f64,
    /// `1 − 1/ξ`, accurate even when `ξ` is close to 1.
    pub one_minus_inv_xi: f64,
    /// `ξ`, infinite when `1/ξ < 1e-300`.
    #[serde(serialize_with = "crate::report::ser_f64")]
    pub xi: f64,
    pub iterations: usize,
    /// Certified bound on `|1/ξ_k − 1/ξ|`.
    pub contraction_bound: f64,
    pub residual: f64,
    pub status: XiStatus,
}

/// Options for [`xi`].
#[derive(Clone, Copy, Debug)]
pub struct XiOptions {
    pub tol: f64,
    pub max_iterations: usize,
    /// Consecutive small residuals accepted as convergence when the
    /// certificate is unavailable.
    pub stagnation_steps: usize,
}

impl Default for XiOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iterations: 20_000,
            stagnation_steps: 10,
        }
    }
}

/// Backward iteration `Φ_1∘⋯∘Φ_k(1)`, recomposed from scratch for every `k`.
///
/// Since every `Φ_j` is increasing and maps `[0, 1]` into itself, the limit
/// lies between `Φ_1∘⋯∘Φ_k(0)` and `Φ_1∘⋯∘Φ_k(1)`; that bracket and the
/// angle-metric contraction product `(π/2)·Π K_j` both certify the error.
/// Generated environments are extended on demand; loaded ones fail with an
/// insufficient-horizon error.
pub fn xi(env: &TreeEnvironment, lambda: f64, opts: XiOptions) -> Result<XiEstimate> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!(
            "xi is defined for lambda in (0, ∞), got {lambda}"
        )));
    }
    if env.is_degenerate_line() {
        // Every Φ is x ↦ γ^{−2}x, so the composition tends to 0 exactly.
        return Ok(XiEstimate {
            lambda,
            inv_xi: 0.0,
            one_minus_inv_xi: 1.0,
            xi: f64::INFINITY,
            iterations: 0,
            contraction_bound: 0.0,
            residual: 0.0,
            status: XiStatus::Certified,
        });
    }
    let mut owned: Option<TreeEnvironment> = None;
    let mut params: Vec<InterfaceMatrixParams> = Vec::new();
    let mut k_factor_product = 1.0;
    let mut prev_hi = f64::NAN;
    let mut small_residuals = 0;
    let mut residual = f64::INFINITY;

    for k in 1..=opts.max_iterations {
        let e = owned.as_ref().unwrap_or(env);
        if k > e.max_interface() as usize {
            let next = e.extend_to(2 * e.horizon() + 1)?;
            owned = Some(next);
        }
        let e = owned.as_ref().unwrap_or(env);
        let m = InterfaceMatrixParams::at(e, lambda, k);
        k_factor_product *= m.contraction_constant();
        params.push(m);

        let (mut hi, mut lo) = (1.0, 0.0);
        let (mut y_hi, mut y_lo) = (0.0, 1.0);
        for m in params.iter().rev() {
            hi = mobius_step(hi, m);
            lo = mobius_step(lo, m);
            y_hi = complement_step(y_hi, m);
            y_lo = complement_step(y_lo, m);
        }
        let bracket = (hi - lo).max(y_lo - y_hi).max(0.0);
        let bound = bracket.min(std::f64::consts::FRAC_PI_2 * k_factor_product);
        if k > 1 {
            residual = (hi - prev_hi).abs();
        }
        prev_hi = hi;
        let status = if bound < opts.tol {
            Some(XiStatus::Certified)
        } else {
            if residual < opts.tol {
                small_residuals += 1;
            } else {
                small_residuals = 0;
            }
            (small_residuals >= opts.stagnation_steps).then_some(XiStatus::ResidualOnly)
        };
        if let Some(status) = status {
            let inv_xi = hi;
            return Ok(XiEstimate {
                lambda,
                inv_xi,
                one_minus_inv_xi: y_hi,
                xi: if inv_xi < 1e-300 { f64::INFINITY } else { 1.0 / inv_xi },
                iterations: k,
                contraction_bound: bound,
                residual,
                status,
            });
        }
    }
    Err(Error::Numerical(format!(
        "xi did not converge within {} iterations at lambda = {lambda}",
        opts.max_iterations
    )))
}

/// Column sums of `(1, 1)·M_{k−1}⋯M_1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MatrixProduct {
    pub k: usize,
    pub log_l: f64,
    pub log_r: f64,
    /// `R_k / L_k ∈ [0, 1]`.
    pub ratio: f64,
}

/// Explicit product of interface matrices, renormalized every step and
/// accumulated in log space.
pub fn matrix_product_ratio(env: &TreeEnvironment, lambda: f64, k: usize) -> Result<MatrixProduct> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    if k > env.horizon() {
        return Err(Error::InsufficientHorizon {
            required: k,
            available: env.horizon(),
        });
    }
    let (mut l, mut r) = (1.0f64, 1.0f64);
    let mut log_scale = 0.0;
    // The row vector meets M_{k−1} first.
    for j in (1..k).rev() {
        let p = env.p(j as i64);
        let m = InterfaceMatrixParams::at(env, lambda, j);
        // (l, r)·M_j = (γ/(2p))·(l + ζ g r, ζ l + g r)
        let nl = l + m.zeta * m.g * r;
        let nr = m.zeta * l + m.g * r;
        log_scale += m.log_gamma - (2.0 * p).ln();
        let s = nl.max(nr);
        l = nl / s;
        r = nr / s;
        log_scale += s.ln();
    }
    Ok(MatrixProduct {
        k,
        log_l: log_scale + l.ln(),
        log_r: log_scale + r.ln(),
        ratio: r / l,
    })
}

/// `1/ξ` for every shift of a window: entry `i` is the limit of
/// `Φ_{i+1}∘Φ_{i+2}∘⋯(1)`, i.e. `1/ξ_λ` of the environment re-rooted at
/// interface `i`. Computed by one downward sweep from index `top` with a
/// bracket `[from 0, from 1]`; returns `(x, 1 − x, bracket width)`.
pub(crate) fn shifted_inverse_xi(
    env: &TreeEnvironment,
    lambda: f64,
    count: usize,
    top: usize,
) -> Vec<(f64, f64, f64)> {
    debug_assert!(top <= env.max_interface() as usize && count <= top);
    let (mut hi, mut lo) = (1.0, 0.0);
    let (mut y_hi, mut y_lo) = (0.0, 1.0);
    let mut out = vec![(0.0, 0.0, 0.0); count];
    for j in (1..=top).rev() {
        let m = InterfaceMatrixParams::at(env, lambda, j);
        hi = mobius_step(hi, &m);
        lo = mobius_step(lo, &m);
        y_hi = complement_step(y_hi, &m);
        y_lo = complement_step(y_lo, &m);
        let i = j - 1;
        if i < count {
            out[i] = (hi, y_hi, (hi - lo).max(y_lo - y_hi));
        }
    }
    out
}

/// Lower bound `1 + 2/d̄ · (e^{2ℓ_lo√(2λ)} − 1)/(e^{2ℓ_hi√(2λ)} + 1)` on `ξ_λ`.
pub fn xi_lower_bound(d_max: u32, ell_lo: f64, ell_hi: f64, lambda: f64) -> f64 {
    let s = (2.0 * lambda).sqrt();
    1.0 + 2.0 / d_max as f64 * (2.0 * ell_lo * s).exp_m1() / ((2.0 * ell_hi * s).exp() + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate, EnvConfig, LengthLaw};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn quadratic_xi(p: f64, ell: f64, lambda: f64) -> f64 {
        // Literal formula with γ, valid for moderate λ.
        let g2 = ((2.0 * lambda).sqrt() * ell * 2.0).exp();
        let z = 2.0 * p - 1.0;
        (((g2 - 1.0) * (g2 - 1.0) + 4.0 * z * z * g2).sqrt() + g2 - 1.0) / (2.0 * z * g2)
    }

    #[test]
    fn step_examples() {
        let m = InterfaceMatrixParams::new(0.7, 0.75, 1.2);
        assert_relative_eq!(mobius_step(0.0, &m), m.zeta, epsilon = 1e-16);
        let line = InterfaceMatrixParams::new(0.7, 0.5, 1.2);
        assert_relative_eq!(mobius_step(0.3, &line), 0.3 * line.g, epsilon = 1e-16);
        let mut x = 1.0;
        for _ in 0..200 {
            x = mobius_step(x, &line);
        }
        assert!(x < 1e-100);
    }

    #[test]
    fn constant_tree_matches_quadratic() {
        let env = generate(&EnvConfig::constant(3, 1.0, 50)).unwrap();
        let est = xi(&env, 0.5, XiOptions::default()).unwrap();
        let want = quadratic_xi(2.0 / 3.0, 1.0, 0.5);
        assert_relative_eq!(est.xi, want, max_relative = 1e-11);
        assert_relative_eq!(xi_constant(3, 1.0, 0.5), want, max_relative = 1e-14);
        assert!(want > 2.0 && want < 3.0);
        assert_eq!(est.status, XiStatus::Certified);
        let m = InterfaceMatrixParams::new(0.5, 2.0 / 3.0, 1.0);
        let (x, y) = constant_fixed_point(&m);
        assert_relative_eq!(mobius_step(x, &m), x, max_relative = 1e-15);
        assert_relative_eq!(x + y, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn line_gives_infinite_xi() {
        let env = generate(&EnvConfig::constant(2, 1.0, 10)).unwrap();
        let est = xi(&env, 1.0, XiOptions::default()).unwrap();
        assert!(est.xi.is_infinite(), "{est:?}");
        assert_eq!(est.inv_xi, 0.0);
    }

    #[test]
    fn shared_prefix_agrees_within_bound() {
        let cfg = |seed| EnvConfig {
            degree_support: vec![(3, 0.5), (4, 0.3), (6, 0.2)],
            length_law: LengthLaw::Uniform { lo: 0.5, hi: 2.0 },
            horizon: 400,
            seed,
        };
        let a = generate(&cfg(1)).unwrap();
        let b = generate(&cfg(2)).unwrap();
        let mut degrees = a.degrees()[..50].to_vec();
        degrees.extend_from_slice(&b.degrees()[50..]);
        let mut lengths = a.lengths()[..50].to_vec();
        lengths.extend_from_slice(&b.lengths()[50..]);
        let spliced = TreeEnvironment::from_parts(0, degrees, lengths).unwrap();
        let xa = xi(&a, 1.0, XiOptions::default()).unwrap();
        let xb = xi(&spliced, 1.0, XiOptions::default()).unwrap();
        // Certified bound after 50 steps from the contraction product.
        let bound50: f64 = std::f64::consts::FRAC_PI_2
            * (1..=50)
                .map(|k| InterfaceMatrixParams::at(&a, 1.0, k).contraction_constant())
                .product::<f64>();
        assert!((xa.inv_xi - xb.inv_xi).abs() <= bound50 + 2e-12);
    }

    #[test]
    fn matrix_products_match_iteration() {
        let cfg = EnvConfig {
            degree_support: vec![(2, 0.2), (3, 0.5), (5, 0.3)],
            length_law: LengthLaw::Uniform { lo: 0.5, hi: 2.0 },
            horizon: 300,
            seed: 4,
        };
        let env = generate(&cfg).unwrap();
        let first = matrix_product_ratio(&env, 0.3, 1).unwrap();
        assert_eq!((first.log_l, first.log_r, first.ratio), (0.0, 0.0, 1.0));
        let mut prev_sum = f64::NEG_INFINITY;
        for k in 2..60 {
            let mp = matrix_product_ratio(&env, 0.3, k).unwrap();
            assert!(mp.log_l > mp.log_r);
            let sum = mp.log_l + (1.0 + (mp.log_r - mp.log_l).exp()).ln();
            assert!(sum > prev_sum);
            prev_sum = sum;
        }
        let est = xi(&env, 0.3, XiOptions::default()).unwrap();
        let mp = matrix_product_ratio(&env, 0.3, 200).unwrap();
        assert!((mp.ratio - est.inv_xi).abs() < est.contraction_bound.max(1e-12));
    }

    #[test]
    fn shifted_sweep_matches_direct_xi() {
        let cfg = EnvConfig {
            degree_support: vec![(3, 0.6), (4, 0.4)],
            length_law: LengthLaw::Discrete {
                support: vec![(1.0, 0.5), (2.0, 0.5)],
            },
            horizon: 500,
            seed: 8,
        };
        let env = generate(&cfg).unwrap();
        let sweep = shifted_inverse_xi(&env, 0.8, 10, 400);
        for i in [0usize, 3, 9] {
            let shifted = TreeEnvironment::from_parts(
                0,
                env.degrees()[i..].to_vec(),
                env.lengths()[i..].to_vec(),
            )
            .unwrap();
            let direct = xi(&shifted, 0.8, XiOptions::default()).unwrap();
            assert_relative_eq!(sweep[i].0, direct.inv_xi, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn step_is_increasing_self_map(
            x in 0.0f64..=1.0, dx in 1e-6f64..0.5,
            p in 0.5f64..0.999, ell in 0.05f64..5.0, lambda in 1e-4f64..50.0,
        ) {
            let m = InterfaceMatrixParams::new(lambda, p, ell);
            let y = mobius_step(x, &m);
            prop_assert!((0.0..1.0).contains(&y));
            let x2 = (x + dx).min(1.0);
            if x2 > x {
                // Increasing, up to rounding when g underflows against ζ.
                prop_assert!(mobius_step(x2, &m) >= y - 1e-15);
            }
            let c = complement_step(1.0 - x, &m);
            prop_assert!((c - (1.0 - y)).abs() < 1e-12);
        }

        #[test]
        fn contraction_constant_bounds_angle_lipschitz(
            x in 0.0f64..1.0, x2 in 0.0f64..1.0,
            p in 0.5f64..0.999, ell in 0.05f64..5.0, lambda in 1e-4f64..50.0,
        ) {
            let m = InterfaceMatrixParams::new(lambda, p, ell);
            let k = m.contraction_constant();
            prop_assert!(k < 1.0);
            let dt = (x.atan() - x2.atan()).abs();
            let dphi = (mobius_step(x, &m).atan() - mobius_step(x2, &m).atan()).abs();
            prop_assert!(dphi <= k * dt * (1.0 + 1e-9) + 1e-15);
        }

        #[test]
        fn xi_respects_lower_bound(log_lambda in -3.0f64..2.0, seed in 0u64..50) {
            let lambda = 10f64.powf(log_lambda);
            let cfg = EnvConfig {
                degree_support: vec![(3, 0.5), (5, 0.5)],
                length_law: LengthLaw::Uniform { lo: 0.5, hi: 2.0 },
                horizon: 200,
                seed,
            };
            let env = generate(&cfg).unwrap();
            let est = xi(&env, lambda, XiOptions::default()).unwrap();
            prop_assert!(est.xi >= 1.0);
            prop_assert!(est.xi >= xi_lower_bound(5, 0.5, 2.0, lambda) * (1.0 - 1e-12));
        }
    }
}
