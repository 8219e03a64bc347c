//! Statistical cross-checks between the simulators and the closed forms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skewfront::env::{generate, EnvConfig, LengthLaw, TreeEnvironment};
use skewfront::kernel::SkewExitKernel;
use skewfront::mcsim::{self, HitOptions};
use skewfront::mobius::{self, InterfaceMatrixParams, XiOptions};
use skewfront::rng::StreamFamily;
use skewfront::stats::{chi_square, ks_two_sample, MeanVar};

fn constant(d: u32, ell: f64) -> TreeEnvironment {
    generate(&EnvConfig::constant(d, ell, 200)).unwrap()
}

fn mixed(seed: u64, horizon: usize) -> TreeEnvironment {
    generate(&EnvConfig {
        degree_support: vec![(2, 0.3), (3, 0.4), (5, 0.3)],
        length_law: LengthLaw::Uniform { lo: 0.5, hi: 1.5 },
        horizon,
        seed,
    })
    .unwrap()
}

#[test]
fn exit_kernel_matches_simulated_exits() {
    let mut pick = ChaCha8Rng::seed_from_u64(2024);
    let family = StreamFamily::new(5, "test.kernel");
    let n = 100_000;
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let k = SkewExitKernel::new(
            pick.random_range(0.5..0.95),
            pick.random_range(0.3..2.0),
            pick.random_range(0.3..2.0),
        )
        .unwrap();
        let etas = [-1.0, -0.1, 0.1 * k.divergence_threshold()];
        let mut acc = [[MeanVar::new(), MeanVar::new()]; 3];
        for i in 0..n {
            let (right, t) = mcsim::sample_skew_exit(&k, &mut family.stream((case << 32) | i));
            for (j, &eta) in etas.iter().enumerate() {
                let w = (eta * t).exp();
                acc[j][0].push(if right { w } else { 0.0 });
                acc[j][1].push(if right { 0.0 } else { w });
            }
        }
        for (j, &eta) in etas.iter().enumerate() {
            let (jp, jm) = k.exit_laplace(eta);
            for (mv, want) in [(&acc[j][0], jp), (&acc[j][1], jm)] {
                let z = (mv.mean() - want).abs() / mv.std_error();
                worst = worst.max(z);
                assert!(z < 3.0, "{k:?} eta {eta}: {} vs {want} (z = {z:.2})", mv.mean());
            }
        }
    }
    println!("largest deviation over 120 comparisons: {worst:.2} standard errors");
}

#[test]
fn lattice_first_exit_matches_the_embedded_walk() {
    let env = mixed(3, 50);
    let n = 100_000;
    for i in [1i64, 2, 4, 7] {
        let k = SkewExitKernel::at(&env, i).unwrap();
        let (pp, pm) = k.exit_probabilities();
        let step = env.bounds().ell_lo / 8.0;
        let exit = mcsim::lattice_first_exit(&env, i, step, n, 40 + i as u64).unwrap();
        let test = chi_square(&[exit.right, exit.left], &[pp, pm]);
        assert!(test.p_value > 0.01, "interface {i}: {exit:?} vs ({pp}, {pm}), p = {}", test.p_value);

        // Mean exit time of the skew BM from (−a, b): ab(pb + qa)/(qb + pa).
        let (a, b, p) = (k.a, k.b, k.p);
        let q = 1.0 - p;
        let want = a * b * (p * b + q * a) / (q * b + p * a);
        let z = (exit.mean_time - want).abs() / exit.time_std_error;
        assert!(z < 3.0, "interface {i}: mean time {} vs {want} (z = {z:.2})", exit.mean_time);
    }
}

#[test]
fn hitting_clock_is_additive() {
    let env = constant(3, 1.0);
    let n = 20_000;
    let opts = HitOptions::default();
    let hits = |from, to, label| -> Vec<f64> {
        mcsim::hitting_times(&env, from, to, n, 8, label, opts)
            .unwrap()
            .into_iter()
            .flatten()
            .collect()
    };
    let direct = hits(2, 0, "direct");
    let first = hits(2, 1, "first");
    let second = hits(1, 0, "second");
    let composed: Vec<f64> = first.iter().zip(&second).map(|(a, b)| a + b).collect();
    let test = ks_two_sample(&direct, &composed);
    assert!(
        test.p_value > 0.01,
        "KS D = {}, p = {} ({} vs {} samples)",
        test.statistic,
        test.p_value,
        direct.len(),
        composed.len()
    );
    // The hit fractions multiply as well: P(2 → 0) = P(2 → 1)·P(1 → 0).
    let frac = |v: &[f64]| v.len() as f64 / n as f64;
    let (pd, pc) = (frac(&direct), frac(&first) * frac(&second));
    let se = (pd * (1.0 - pd) / n as f64).sqrt() + (pc * (1.0 - pc) / n as f64).sqrt();
    assert!((pd - pc).abs() < 3.0 * se, "{pd} vs {pc}");
}

#[test]
fn halving_the_lattice_step_stays_within_noise() {
    let env = constant(3, 1.0);
    let n = 100_000;
    let coarse = mcsim::lattice_hitting_laplace(&env, 1, 0, 1.0, 0.125, n, 1).unwrap();
    let fine = mcsim::lattice_hitting_laplace(&env, 1, 0, 1.0, 0.0625, n, 2).unwrap();
    let se = coarse.std_error.hypot(fine.std_error);
    assert!(
        (coarse.estimate - fine.estimate).abs() < 3.0 * se,
        "{} vs {} (se {se})",
        coarse.estimate,
        fine.estimate
    );
    let exact = mcsim::hitting_time_laplace_mc(&env, 1, 0, 1.0, n, 3, HitOptions::default()).unwrap();
    let se = fine.std_error.hypot(exact.std_error);
    assert!((fine.estimate - exact.estimate).abs() < 3.0 * se);
}

#[test]
fn inverse_xi_is_a_fixed_point_in_law() {
    let lambda = 0.5;
    let seeds = 1000u64;
    let inv = |seed: u64| mobius::xi(&mixed(seed, 200), lambda, XiOptions::default()).unwrap().inv_xi;
    let direct: Vec<f64> = (0..seeds).map(inv).collect();
    let cfg = mixed(0, 1).config().unwrap().clone();
    let mut fresh = ChaCha8Rng::seed_from_u64(99);
    let mapped: Vec<f64> = (seeds..2 * seeds)
        .map(|seed| {
            let d = match fresh.random_range(0.0..1.0) {
                u if u < 0.3 => 2u32,
                u if u < 0.7 => 3,
                _ => 5,
            };
            let LengthLaw::Uniform { lo, hi } = cfg.length_law else { unreachable!() };
            let ell = fresh.random_range(lo..hi);
            let m = InterfaceMatrixParams::new(lambda, (d as f64 - 1.0) / d as f64, ell);
            mobius::mobius_step(inv(seed), &m)
        })
        .collect();
    let test = ks_two_sample(&direct, &mapped);
    assert!(test.p_value > 0.01, "KS D = {}, p = {}", test.statistic, test.p_value);
}

#[test]
fn line_large_deviation_values_sit_at_minus_sqrt_two() {
    let line = constant(2, 1.0);
    let rows = mcsim::ldp_trend(&line, 0.5, 1.5, 1.0, &[10.0, 20.0], 20_000, 4, HitOptions::default()).unwrap();
    let want = -(2.0f64).sqrt();
    for r in &rows {
        assert!(!r.flagged);
        assert!((r.value - want).abs() < 4.0 * r.std_error + 0.01, "{r:?}");
    }
}

#[test]
fn large_deviation_values_do_not_depend_on_the_window() {
    let env = constant(3, 1.0);
    let opts = HitOptions::default();
    let a = mcsim::ldp_trend(&env, 0.5, 1.5, 1.0, &[20.0], 20_000, 5, opts).unwrap()[0];
    let b = mcsim::ldp_trend(&env, 1.0, 2.0, 1.0, &[20.0], 20_000, 6, opts).unwrap()[0];
    let se = a.std_error.hypot(b.std_error);
    assert!((a.value - b.value).abs() < 4.0 * se + 0.02 * a.value.abs(), "{a:?} vs {b:?}");
}
