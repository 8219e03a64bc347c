use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn skewfront(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skewfront"))
        .args(args)
        .current_dir(dir)
        .env_remove("SKEWFRONT_BETA")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> Value {
    serde_json::from_str(&stdout(o)).unwrap_or_else(|e| panic!("bad JSON ({e}): {}", stdout(o)))
}

#[test]
fn closed_form_speed_minimizes_the_speed_objective() {
    let dir = tempfile::tempdir().unwrap();
    let out = skewfront(&["speed", "--closed-form", "3,1", "--beta", "5"], dir.path());
    assert!(out.status.success(), "{out:?}");
    let r = json(&out);
    let c = r["c_star"].as_f64().unwrap();
    // Brute-force minimum of (λ + β)/|μ(−λ)| on a fine grid, with
    // |μ(−λ)| = √(2λ) + ln(4p/(1 + γ² − √((γ² − 1)² + 4ζ²γ²)))/ℓ,
    // γ² = e^{2√(2λ)ℓ}, ζ = 2p − 1, evaluated as written.
    let (p, ell, beta) = (2.0 / 3.0, 1.0f64, 5.0);
    let zeta = 2.0 * p - 1.0;
    let abs_mu = |l: f64| {
        let s = (2.0 * l).sqrt();
        let g2 = (2.0 * s * ell).exp();
        let root = ((g2 - 1.0) * (g2 - 1.0) + 4.0 * zeta * zeta * g2).sqrt();
        s + (4.0 * p / (1.0 + g2 - root)).ln() / ell
    };
    let best = (1..200_000)
        .map(|i| {
            let l = i as f64 * 1e-4;
            (l + beta) / abs_mu(l)
        })
        .fold(f64::INFINITY, f64::min);
    assert!((c - best).abs() < 1e-6, "{c} vs {best}");
    assert_eq!(r["method"], "constant_closed_form");
    assert_eq!(r["assumption"], "satisfied");
}

#[test]
fn gen_env_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        [
            "gen-env",
            "--degrees",
            "3:1.0",
            "--lengths",
            "1:1.0",
            "--horizon",
            "100",
            "--seed",
            "7",
            "--out",
            out,
        ]
    };
    assert!(skewfront(&args("a.json"), dir.path()).status.success());
    assert!(skewfront(&args("b.json"), dir.path()).status.success());
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.json")).unwrap());
    let env = skewfront::env::load(dir.path().join("a.json")).unwrap();
    assert_eq!(env.horizon(), 100);
    assert!(env.degrees().iter().all(|&d| d == 3));

    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "gen-env");
    assert_eq!(manifest["seeds"]["env"], 7);
    assert_eq!(manifest["env_digest"], env.digest());
    assert_eq!(manifest["config"]["env"]["horizon"], 100);
}

#[test]
fn usage_errors_exit_64() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(skewfront(&["speed", "--bogus"], dir.path()).status.code(), Some(64));
    assert_eq!(skewfront(&[], dir.path()).status.code(), Some(64));
    assert_eq!(skewfront(&["xi", "--lambda-grid", "1:0:3"], dir.path()).status.code(), Some(64));
    assert_eq!(skewfront(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = skewfront(&["xi", "--env", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn strict_flags_subcritical_beta() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["speed", "--closed-form", "3,1", "--beta", "0.1"];
    assert_eq!(skewfront(&args, dir.path()).status.code(), Some(0));
    let mut strict = args.to_vec();
    strict.push("--strict");
    let out = skewfront(&strict, dir.path());
    assert_eq!(out.status.code(), Some(2));
    // The result is still written.
    assert_eq!(json(&out)["assumption"], "violated");
}

#[test]
fn precedence_is_flag_then_env_var_then_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[speed]\nbeta = 3.0\n").unwrap();
    let show = |extra: &[&str], var: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_skewfront"));
        cmd.current_dir(dir.path()).env_remove("SKEWFRONT_BETA");
        if let Some(v) = var {
            cmd.env("SKEWFRONT_BETA", v);
        }
        let out = cmd.args(["--config", "run.toml", "--show-config", "speed"]).args(extra).output().unwrap();
        assert!(out.status.success());
        let cfg: toml::Value = toml::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
        cfg["speed"]["beta"].as_float().unwrap()
    };
    assert_eq!(show(&[], None), 3.0);
    assert_eq!(show(&[], Some("4")), 4.0);
    assert_eq!(show(&["--beta", "5"], Some("4")), 5.0);
}

#[test]
fn show_config_prints_every_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = skewfront(&["--show-config"], dir.path());
    assert!(out.status.success());
    let cfg: toml::Value = toml::from_str(&stdout(&out)).unwrap();
    for section in ["env", "lyapunov", "xi", "eta_c", "speed", "mc", "pde", "validate"] {
        assert!(cfg.get(section).is_some(), "missing section {section}");
    }
    assert_eq!(cfg["mc"]["n_paths"].as_integer(), Some(100_000));
}

#[test]
fn non_finite_numbers_are_strings() {
    let dir = tempfile::tempdir().unwrap();
    let out = skewfront(&["speed", "--closed-form", "2,1", "--beta", "2"], dir.path());
    let text = stdout(&out);
    assert!(text.contains(r#""mu_prime_0": "inf""#), "{text}");
    assert!(json(&out)["c_star"].as_f64().unwrap() == 2.0);
}

#[test]
fn xi_csv_matches_constant_tree_formula() {
    let dir = tempfile::tempdir().unwrap();
    let out = skewfront(
        &["xi", "--degrees", "3:1", "--lengths", "1:1", "--lambda-grid", "0.5:2:3"],
        dir.path(),
    );
    assert!(out.status.success());
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("lambda,inv_xi,iterations,certified_bound,status"));
    let zeta = 1.0 / 3.0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let lambda: f64 = f[0].parse().unwrap();
        let inv_xi: f64 = f[1].parse().unwrap();
        let g2 = (2.0 * (2.0 * lambda).sqrt()).exp();
        let xi = (((g2 - 1.0) * (g2 - 1.0) + 4.0 * zeta * zeta * g2).sqrt() + g2 - 1.0) / (2.0 * zeta * g2);
        assert!((inv_xi - 1.0 / xi).abs() < 1e-10, "{line}");
        assert_eq!(f[4], "certified");
    }
}

#[test]
fn monte_carlo_output_does_not_depend_on_threads() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str| {
        let out = skewfront(
            &["mc-hit", "--n-paths", "3000", "--lambda", "0.5", "--seed", "3", "--threads", threads],
            dir.path(),
        );
        assert!(out.status.success());
        stdout(&out)
    };
    assert_eq!(run("1"), run("3"));
}

#[test]
fn validate_passes_on_a_constant_tree() {
    let dir = tempfile::tempdir().unwrap();
    assert!(skewfront(
        &["gen-env", "--degrees", "3:1.0", "--lengths", "1:1.0", "--horizon", "3000", "--seed", "1", "--out", "e.json"],
        dir.path()
    )
    .status
    .success());
    let out = skewfront(
        &["validate", "--env", "e.json", "--n-exits", "4000", "--n-kernels", "2", "--n-interfaces", "1500"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.starts_with("check,value,reference,error,tolerance,status,note"));
    assert!(text.contains("variational vs closed form"));
    assert!(text.contains("xi vs matrix product"));
    assert!(!text.contains(",fail,"));
}

#[test]
fn pde_writes_trace_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let out = skewfront(
        &[
            "pde", "--degrees", "2:1", "--lengths", "1:1", "--beta", "0.5", "--L", "40", "--t-max", "20", "--dx",
            "0.05", "--dt", "0.02", "--snapshots", "snaps", "--snapshot-times", "5,20", "--out", "front.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{out:?}");
    let trace = std::fs::read_to_string(dir.path().join("front.csv")).unwrap();
    assert!(trace.starts_with("t,x_front_right,x_front_left\n"));
    assert!(trace.lines().count() > 50);
    for k in 0..2 {
        let snap = std::fs::read_to_string(dir.path().join(format!("snaps/snapshot_{k}.csv"))).unwrap();
        assert!(snap.starts_with("x,v\n"));
    }
    let manifest = std::fs::read_to_string(dir.path().join("front.csv.manifest.json")).unwrap();
    assert!(manifest.contains("snapshot_1.csv"));
}

#[test]
fn speed_runs_on_a_loaded_random_environment() {
    let dir = tempfile::tempdir().unwrap();
    let gen = [
        "gen-env", "--degrees", "3:0.5,4:0.5", "--lengths", "uniform:0.5:2", "--horizon", "2000", "--seed", "7",
        "--out", "e.json",
    ];
    assert!(skewfront(&gen, dir.path()).status.success());
    let out = skewfront(&["speed", "--env", "e.json", "--beta", "5"], dir.path());
    assert!(out.status.success(), "{out:?}");
    let r = json(&out);
    assert_eq!(r["method"], "variational");
    let c = r["c_star"].as_f64().unwrap();
    assert!(c > 0.0 && c < 10f64.sqrt(), "{c}");
}
