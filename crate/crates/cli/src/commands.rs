//! Subcommand workflows.

use std::path::PathBuf;

use serde_json::{json, Value};
use skewfront::env::{self, TreeEnvironment};
use skewfront::kernel::{self, SkewExitKernel};
use skewfront::lyapunov::{self, EtaCOptions, LyapunovModel, LyapunovOptions};
use skewfront::mcsim::{self, HitOptions, HitStatus, LatticeSimConfig};
use skewfront::mobius::{self, XiOptions, XiStatus};
use skewfront::pde::{self, PdeConfig};
use skewfront::report::Num;
use skewfront::rng::StreamFamily;
use skewfront::speed::{self, AssumptionStatus, SpeedResult};
use skewfront::stats::MeanVar;
use skewfront::Error;

use crate::config::{parse_closed_form, parse_grid, parse_list, Config};
use crate::output::{cell, write_file, Format, Report, Table};
use crate::{Command, EnvArgs, Failure, LyapunovArgs, McArgs, UsageError};

fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
    if let Some(v) = src {
        *dst = v.clone();
    }
}

fn apply_env(a: &EnvArgs, cfg: &mut Config) {
    if let Some(p) = &a.env {
        cfg.env.file = p.display().to_string();
    }
    set(&mut cfg.env.degrees, &a.degrees);
    set(&mut cfg.env.lengths, &a.lengths);
    set(&mut cfg.env.horizon, &a.horizon);
    set(&mut cfg.env.seed, &a.env_seed);
}

fn apply_lyapunov(a: &LyapunovArgs, cfg: &mut Config) {
    set(&mut cfg.lyapunov.n_interfaces, &a.n_interfaces);
}

fn apply_mc(a: &McArgs, cfg: &mut Config) {
    set(&mut cfg.mc.seed, &a.seed);
    set(&mut cfg.mc.n_paths, &a.n_paths);
}

/// Overlay the subcommand's flags on `cfg`.
pub fn apply_flags(cmd: &Command, cfg: &mut Config) {
    match cmd {
        Command::GenEnv(a) => {
            cfg.env.file.clear();
            set(&mut cfg.env.degrees, &a.degrees);
            set(&mut cfg.env.lengths, &a.lengths);
            set(&mut cfg.env.horizon, &a.horizon);
            set(&mut cfg.env.seed, &a.seed);
        }
        Command::Xi(a) => {
            apply_env(&a.env, cfg);
            set(&mut cfg.lyapunov.lambda_grid, &a.lambda_grid);
            set(&mut cfg.xi.tol, &a.tol);
            set(&mut cfg.xi.max_iterations, &a.max_iterations);
        }
        Command::Mu(a) => {
            apply_env(&a.env, cfg);
            apply_lyapunov(&a.lyapunov, cfg);
            set(&mut cfg.lyapunov.lambda_grid, &a.lambda_grid);
        }
        Command::EtaC(a) => {
            apply_env(&a.env, cfg);
            set(&mut cfg.eta_c.height_cap, &a.height_cap);
            set(&mut cfg.eta_c.move_tol, &a.move_tol);
        }
        Command::Speed(a) => {
            apply_env(&a.env, cfg);
            apply_lyapunov(&a.lyapunov, cfg);
            set(&mut cfg.speed.beta, &a.beta);
            set(&mut cfg.speed.closed_form, &a.closed_form);
        }
        Command::SpeedSweep(a) => {
            apply_env(&a.env, cfg);
            apply_lyapunov(&a.lyapunov, cfg);
            set(&mut cfg.speed.beta_grid, &a.beta);
            set(&mut cfg.speed.closed_form, &a.closed_form);
            set(&mut cfg.speed.beta, &a.at_beta);
        }
        Command::McHit(a) => {
            apply_env(&a.env, cfg);
            apply_mc(&a.mc, cfg);
            set(&mut cfg.mc.from, &a.from);
            set(&mut cfg.mc.to, &a.to);
            set(&mut cfg.mc.lambda, &a.lambda);
            set(&mut cfg.mc.step, &a.step);
            set(&mut cfg.mc.kill_weight, &a.kill_weight);
        }
        Command::McDrift(a) => {
            apply_env(&a.env, cfg);
            apply_mc(&a.mc, cfg);
            set(&mut cfg.mc.step, &a.step);
            set(&mut cfg.mc.t_max, &a.t_max);
            set(&mut cfg.mc.start, &a.start);
        }
        Command::McLdp(a) => {
            apply_env(&a.env, cfg);
            apply_mc(&a.mc, cfg);
            set(&mut cfg.mc.c, &a.c);
            set(&mut cfg.mc.v, &a.v);
            set(&mut cfg.mc.lambda, &a.lambda);
            set(&mut cfg.mc.t_grid, &a.t_grid);
        }
        Command::Pde(a) => {
            apply_env(&a.env, cfg);
            set(&mut cfg.pde.beta, &a.beta);
            set(&mut cfg.pde.half_width, &a.half_width);
            set(&mut cfg.pde.t_max, &a.t_max);
            set(&mut cfg.pde.dx, &a.dx);
            set(&mut cfg.pde.dt, &a.dt);
            set(&mut cfg.pde.front_level, &a.front_level);
            set(&mut cfg.pde.fit_window, &a.fit_window);
            set(&mut cfg.pde.record_interval, &a.record_interval);
            set(&mut cfg.pde.snapshot_times, &a.snapshot_times);
        }
        Command::Validate(a) => {
            apply_env(&a.env, cfg);
            apply_lyapunov(&a.lyapunov, cfg);
            set(&mut cfg.validate.n_exits, &a.n_exits);
            set(&mut cfg.validate.n_kernels, &a.n_kernels);
            set(&mut cfg.validate.seed, &a.seed);
        }
    }
}

/// Run `cmd` with the resolved settings. Under `strict`, uncertified
/// results and violated assumptions are reported as failures.
pub fn execute(cmd: &Command, cfg: &Config, strict: bool) -> Result<Report, Failure> {
    match cmd {
        Command::GenEnv(_) => gen_env(cfg),
        Command::Xi(_) => xi(cfg, strict),
        Command::Mu(_) => mu(cfg),
        Command::EtaC(_) => eta_c(cfg, strict),
        Command::Speed(_) => speed_one(cfg, strict),
        Command::SpeedSweep(a) => match &a.vs_degree {
            Some(range) => speed_vs_degree(cfg, range, a.ell, strict),
            None => speed_sweep(cfg, a.pde, strict),
        },
        Command::McHit(_) => mc_hit(cfg, strict),
        Command::McDrift(_) => mc_drift(cfg),
        Command::McLdp(_) => mc_ldp(cfg, strict),
        Command::Pde(a) => run_pde(cfg, a.snapshots.as_ref()),
        Command::Validate(_) => validate(cfg),
    }
}

fn to_json<T: serde::Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("result serializes")
}

fn load_env(cfg: &Config) -> Result<TreeEnvironment, Failure> {
    if cfg.env.file.is_empty() {
        Ok(env::generate(&cfg.env.to_env_config()?)?)
    } else {
        Ok(env::load(&cfg.env.file)?)
    }
}

fn with_env(mut report: Report, env: &TreeEnvironment, cfg: &Config) -> Report {
    report.env_digest = Some(env.digest());
    if cfg.env.file.is_empty() {
        report.seeds.insert("env", cfg.env.seed);
    }
    report
}

fn lyapunov_options(cfg: &Config) -> LyapunovOptions {
    LyapunovOptions {
        n_interfaces: cfg.lyapunov.n_interfaces,
        tol: cfg.lyapunov.tol,
        ..LyapunovOptions::default()
    }
}

fn eta_options(cfg: &Config) -> EtaCOptions {
    EtaCOptions {
        height_cap: cfg.eta_c.height_cap,
        move_tol: cfg.eta_c.move_tol,
        ..EtaCOptions::default()
    }
}

fn hit_options(cfg: &Config) -> HitOptions {
    HitOptions {
        kill_weight: cfg.mc.kill_weight,
        ..HitOptions::default()
    }
}

fn strict_failure(strict: bool, problems: Vec<String>) -> Option<String> {
    (strict && !problems.is_empty()).then(|| problems.join("; "))
}

fn gen_env(cfg: &Config) -> Result<Report, Failure> {
    let env = env::generate(&cfg.env.to_env_config()?)?;
    let json: Value = serde_json::from_str(&env.to_json()).expect("environment JSON parses");
    let mut report = with_env(Report::new(json, Format::Json), &env, cfg);
    report.table = Some({
        let mut t = Table::new(&["i", "degree", "length", "p", "z"]);
        for i in 0..env.horizon() {
            t.push(vec![
                i.to_string(),
                env.degree(i).to_string(),
                cell(env.length(i)),
                cell(env.p(i as i64)),
                cell(env.z(i as i64)),
            ]);
        }
        t
    });
    Ok(report)
}

fn xi(cfg: &Config, strict: bool) -> Result<Report, Failure> {
    let env = load_env(cfg)?;
    let grid = parse_grid(&cfg.lyapunov.lambda_grid)?;
    let opts = XiOptions {
        tol: cfg.xi.tol,
        max_iterations: cfg.xi.max_iterations,
        ..XiOptions::default()
    };
    let estimates = grid
        .iter()
        .map(|&l| mobius::xi(&env, l, opts))
        .collect::<Result<Vec<_>, _>>()?;
    let mut t = Table::new(&["lambda", "inv_xi", "iterations", "certified_bound", "status"]);
    for e in &estimates {
        t.push(vec![
            cell(e.lambda),
            cell(e.inv_xi),
            e.iterations.to_string(),
            cell(e.contraction_bound),
            to_json(&e.status).as_str().unwrap_or_default().to_string(),
        ]);
    }
    let uncertified: Vec<String> = estimates
        .iter()
        .filter(|e| e.status != XiStatus::Certified)
        .map(|e| format!("xi at lambda = {} is not certified", e.lambda))
        .collect();
    let mut report = with_env(Report::new(to_json(&estimates), Format::Csv).with_table(t), &env, cfg);
    report.failure = strict_failure(strict, uncertified);
    Ok(report)
}

fn mu(cfg: &Config) -> Result<Report, Failure> {
    let env = load_env(cfg)?;
    let grid = parse_grid(&cfg.lyapunov.lambda_grid)?;
    let curve = lyapunov::curve(&env, &grid, lyapunov_options(cfg), eta_options(cfg))?;
    let mut t = Table::new(&["lambda", "mu", "std_error"]);
    t.push(vec![cell(0.0), cell(curve.mu0), cell(0.0)]);
    for i in 0..grid.len() {
        t.push(vec![
            cell(curve.lambda_grid[i]),
            cell(curve.mu_values[i]),
            cell(curve.mu_std_errors[i]),
        ]);
    }
    Ok(with_env(Report::new(to_json(&curve), Format::Csv).with_table(t), &env, cfg))
}

fn eta_c(cfg: &Config, strict: bool) -> Result<Report, Failure> {
    let env = load_env(cfg)?;
    let est = lyapunov::eta_c(&env, eta_options(cfg))?;
    let mut report = with_env(Report::new(to_json(&est), Format::Json), &env, cfg);
    let problems = if est.converged {
        Vec::new()
    } else {
        vec!["eta_c height doubling did not settle".to_string()]
    };
    report.failure = strict_failure(strict, problems);
    Ok(report)
}

fn assumption_problem(r: &SpeedResult) -> Option<String> {
    match r.assumption {
        AssumptionStatus::Satisfied => None,
        AssumptionStatus::Violated => Some(format!("beta = {} does not exceed beta_c = {}", r.beta, r.beta_c)),
        AssumptionStatus::Uncertain => Some(format!(
            "beta = {} lies inside the uncertainty bracket of beta_c = {}",
            r.beta, r.beta_c
        )),
    }
}

fn speed_one(cfg: &Config, strict: bool) -> Result<Report, Failure> {
    let beta = cfg.speed.beta;
    let (result, mut report) = if cfg.speed.closed_form.is_empty() {
        let env = load_env(cfg)?;
        let model = LyapunovModel::new(&env, lyapunov_options(cfg))?;
        let curve = lyapunov::curve(&env, &[], lyapunov_options(cfg), eta_options(cfg))?;
        let r = speed::speed_variational(&model, beta, &curve)?;
        (r, with_env(Report::new(to_json(&r), Format::Json), &env, cfg))
    } else {
        let (d, ell) = parse_closed_form(&cfg.speed.closed_form)?;
        let r = speed::speed_constant_closed_form(d, ell, beta)?;
        (r, Report::new(to_json(&r), Format::Json))
    };
    report.failure = strict_failure(strict, assumption_problem(&result).into_iter().collect());
    Ok(report)
}

fn speed_sweep(cfg: &Config, with_pde: bool, strict: bool) -> Result<Report, Failure> {
    let betas = parse_grid(&cfg.speed.beta_grid)?;
    if betas.iter().any(|&b| b <= 0.0) {
        return Err(UsageError("beta grid must be positive".into()).into());
    }
    let closed = (!cfg.speed.closed_form.is_empty())
        .then(|| parse_closed_form(&cfg.speed.closed_form))
        .transpose()?;
    let env = match closed {
        Some((d, ell)) if with_pde => Some(env::generate(&env::EnvConfig::constant(d, ell, 64))?),
        Some(_) => None,
        None => Some(load_env(cfg)?),
    };
    let results: Vec<SpeedResult> = match (closed, &env) {
        (Some((d, ell)), _) => betas
            .iter()
            .map(|&b| speed::speed_constant_closed_form(d, ell, b))
            .collect::<Result<_, _>>()?,
        (None, Some(env)) => {
            let model = LyapunovModel::new(env, lyapunov_options(cfg))?;
            let curve = lyapunov::curve(env, &[], lyapunov_options(cfg), eta_options(cfg))?;
            betas
                .iter()
                .map(|&b| speed::speed_variational(&model, b, &curve))
                .collect::<Result<_, _>>()?
        }
        (None, None) => unreachable!("an environment is loaded when no closed form is given"),
    };
    let fitted: Option<Vec<f64>> = match (&env, with_pde) {
        (Some(env), true) => {
            let rows = pde::empirical_speed_sweep(env, &betas, &pde_config(cfg)?)?;
            Some(rows.iter().map(|r| r.fitted).collect())
        }
        _ => None,
    };
    let mut header = vec!["beta", "c_star", "lambda_star", "beta_c", "assumption", "sqrt_2beta"];
    if fitted.is_some() {
        header.push("pde_speed");
    }
    let mut t = Table::new(&header);
    let mut rows_json = Vec::new();
    for (i, r) in results.iter().enumerate() {
        let assumption = to_json(&r.assumption).as_str().unwrap_or_default().to_string();
        let mut row = vec![
            cell(r.beta),
            cell(r.c_star),
            cell(r.lambda_star),
            cell(r.beta_c),
            assumption,
            cell((2.0 * r.beta).sqrt()),
        ];
        let mut obj = to_json(r);
        if let Some(f) = &fitted {
            row.push(cell(f[i]));
            obj["pde_speed"] = to_json(&Num(f[i]));
        }
        t.push(row);
        rows_json.push(obj);
    }
    let mut report = Report::new(Value::Array(rows_json), Format::Csv).with_table(t);
    if let Some(env) = &env {
        report = with_env(report, env, cfg);
    }
    report.failure = strict_failure(strict, results.iter().filter_map(assumption_problem).collect());
    Ok(report)
}

fn speed_vs_degree(cfg: &Config, range: &str, ell: f64, strict: bool) -> Result<Report, Failure> {
    let (lo, hi) = range
        .split_once(':')
        .and_then(|(a, b)| Some((a.trim().parse::<u32>().ok()?, b.trim().parse::<u32>().ok()?)))
        .filter(|&(a, b)| a >= 2 && b >= a)
        .ok_or_else(|| UsageError(format!("invalid degree range `{range}`: expected lo:hi with 2 ≤ lo ≤ hi")))?;
    let beta = cfg.speed.beta;
    let mut t = Table::new(&["d", "p", "beta", "c_star", "beta_c", "assumption"]);
    let mut rows = Vec::new();
    let mut problems = Vec::new();
    for d in lo..=hi {
        let r = speed::speed_constant_closed_form(d, ell, beta)?;
        let p = env::skewness(d);
        t.push(vec![
            d.to_string(),
            cell(p),
            cell(beta),
            cell(r.c_star),
            cell(r.beta_c),
            to_json(&r.assumption).as_str().unwrap_or_default().to_string(),
        ]);
        let mut obj = to_json(&r);
        obj["d"] = json!(d);
        obj["p"] = json!(p);
        rows.push(obj);
        problems.extend(assumption_problem(&r));
    }
    let mut report = Report::new(Value::Array(rows), Format::Csv).with_table(t);
    report.failure = strict_failure(strict, problems);
    Ok(report)
}

fn mc_hit(cfg: &Config, strict: bool) -> Result<Report, Failure> {
    let env = load_env(cfg)?;
    let m = &cfg.mc;
    let (result, method) = if m.step > 0.0 {
        let r = mcsim::lattice_hitting_laplace(&env, m.from, m.to, m.lambda, m.step, m.n_paths, m.seed)?;
        (r, "lattice")
    } else {
        let r = mcsim::hitting_time_laplace_mc(&env, m.from, m.to, m.lambda, m.n_paths, m.seed, hit_options(cfg))?;
        (r, "skew_exit")
    };
    let mut json = to_json(&result);
    json["from"] = json!(m.from);
    json["to"] = json!(m.to);
    json["lambda"] = json!(m.lambda);
    json["method"] = json!(method);
    let mut report = with_env(Report::new(json, Format::Json), &env, cfg);
    report.seeds.insert("mc", m.seed);
    let problems = if result.status == HitStatus::Certified {
        Vec::new()
    } else {
        vec![format!("{} paths ended without a certificate", result.capped + result.boundary)]
    };
    report.failure = strict_failure(strict, problems);
    Ok(report)
}

fn mc_drift(cfg: &Config) -> Result<Report, Failure> {
    let env = load_env(cfg)?;
    let m = &cfg.mc;
    let step = if m.step > 0.0 { m.step } else { env.bounds().ell_lo / 8.0 };
    let sim = LatticeSimConfig {
        step,
        t_max: m.t_max,
        n_paths: m.n_paths,
        seed: m.seed,
    };
    let result = mcsim::lln_drift(&env, &sim, m.start)?;
    let mut json = to_json(&result);
    json["step"] = json!(step);
    json["t_max"] = json!(m.t_max);
    json["start"] = json!(m.start);
    let mut report = with_env(Report::new(json, Format::Json), &env, cfg);
    report.seeds.insert("mc", m.seed);
    Ok(report)
}

fn mc_ldp(cfg: &Config, strict: bool) -> Result<Report, Failure> {
    let env = load_env(cfg)?;
    let m = &cfg.mc;
    let times = parse_list(&m.t_grid)?;
    let rows = mcsim::ldp_trend(&env, m.c, m.v, m.lambda, &times, m.n_paths, m.seed, hit_options(cfg))?;
    let mut t = Table::new(&["t", "value", "std_error", "log_q", "levels", "flagged"]);
    for r in &rows {
        t.push(vec![
            cell(r.t),
            cell(r.value),
            cell(r.std_error),
            cell(r.log_q),
            r.levels.to_string(),
            r.flagged.to_string(),
        ]);
    }
    let problems = rows
        .iter()
        .filter(|r| r.flagged)
        .map(|r| format!("t = {}: a stage had no successful path", r.t))
        .collect();
    let mut report = with_env(Report::new(to_json(&rows), Format::Csv).with_table(t), &env, cfg);
    report.seeds.insert("mc", m.seed);
    report.failure = strict_failure(strict, problems);
    Ok(report)
}

fn pde_config(cfg: &Config) -> Result<PdeConfig, Failure> {
    let p = &cfg.pde;
    Ok(PdeConfig {
        half_width: p.half_width,
        dx: p.dx,
        dt: p.dt,
        t_max: p.t_max,
        beta: p.beta,
        front_level: p.front_level,
        fit_window: p.fit_window,
        record_interval: p.record_interval,
        snapshot_times: parse_list(&p.snapshot_times)?,
        ..PdeConfig::default()
    })
}

fn run_pde(cfg: &Config, snapshots: Option<&PathBuf>) -> Result<Report, Failure> {
    let env = load_env(cfg)?;
    let mut pcfg = pde_config(cfg)?;
    if snapshots.is_some() && pcfg.snapshot_times.is_empty() {
        pcfg.snapshot_times = vec![pcfg.t_max];
    }
    let run = pde::solve(&env, &pcfg)?;
    let trace = &run.trace;
    let mut t = Table::new(&["t", "x_front_right", "x_front_left"]);
    for i in 0..trace.times.len() {
        t.push(vec![cell(trace.times[i]), cell(trace.right[i]), cell(trace.left[i])]);
    }
    let mut files = Vec::new();
    if let Some(dir) = snapshots {
        std::fs::create_dir_all(dir)?;
        for (k, snap) in run.snapshots.iter().enumerate() {
            let mut s = Table::new(&["x", "v"]);
            for (x, v) in snap.x.iter().zip(&snap.v) {
                s.push(vec![cell(*x), cell(*v)]);
            }
            let path = dir.join(format!("snapshot_{k}.csv"));
            let text = Report::new(Value::Null, Format::Csv).with_table(s).render(Format::Csv);
            write_file(&path, &text)?;
            files.push(path);
        }
    }
    let json = json!({
        "beta": pcfg.beta,
        "fitted_speed": Num(trace.fitted_speed),
        "left_speed": Num(trace.left_speed),
        "fit_residual": Num(trace.fit_residual),
        "fit_start": Num(trace.fit_start),
        "monotone": trace.monotone,
        "max_asymmetry": Num(run.max_asymmetry),
        "max_flux_residual": Num(run.max_flux_residual),
        "n_nodes": run.n_nodes,
        "min_cell": Num(run.min_cell),
        "snapshot_times": run.snapshots.iter().map(|s| s.t).collect::<Vec<_>>(),
        "trace": {
            "t": to_json(&trace.times.iter().map(|&x| Num(x)).collect::<Vec<_>>()),
            "x_front_right": to_json(&trace.right.iter().map(|&x| Num(x)).collect::<Vec<_>>()),
            "x_front_left": to_json(&trace.left.iter().map(|&x| Num(x)).collect::<Vec<_>>()),
        },
    });
    let mut report = with_env(Report::new(json, Format::Csv).with_table(t), &env, cfg);
    report.files = files;
    Ok(report)
}

// ---------------------------------------------------------------------------
// validate

#[derive(Debug, serde::Serialize)]
struct Check {
    check: String,
    value: Num,
    reference: Num,
    error: Num,
    tolerance: Num,
    status: &'static str,
    note: String,
}

impl Check {
    fn new(check: String, value: f64, reference: f64, error: f64, tolerance: f64) -> Self {
        Self {
            check,
            value: Num(value),
            reference: Num(reference),
            error: Num(error),
            tolerance: Num(tolerance),
            status: if error <= tolerance { "pass" } else { "fail" },
            note: String::new(),
        }
    }

    fn not_run(check: &str, e: Error) -> Self {
        let status = match e {
            Error::InsufficientHorizon { .. } => "skipped",
            _ => "fail",
        };
        Self {
            check: check.into(),
            value: Num(f64::NAN),
            reference: Num(f64::NAN),
            error: Num(f64::NAN),
            tolerance: Num(f64::NAN),
            status,
            note: e.to_string(),
        }
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

/// Simulated skew exits against the closed-form kernel: `J_±(η)` at
/// `η ∈ {0, −1, −0.1, threshold/10}` within `z_max` standard errors.
fn kernel_checks(env: &TreeEnvironment, cfg: &Config) -> Vec<Check> {
    let v = &cfg.validate;
    let family = StreamFamily::new(v.seed, "validate.kernel");
    let last = (v.n_kernels as i64).min(env.max_interface() - 1).max(0);
    let mut out = Vec::new();
    for i in 1..=last {
        let k = match SkewExitKernel::at(env, i) {
            Ok(k) => k,
            Err(e) => {
                out.push(Check::not_run(&format!("kernel[{i}]"), e));
                continue;
            }
        };
        let mut etas = vec![0.0, -1.0, -0.1];
        let threshold = k.divergence_threshold();
        if threshold.is_finite() {
            etas.push(0.1 * threshold);
        }
        let mut acc = vec![(MeanVar::new(), MeanVar::new()); etas.len()];
        for n in 0..v.n_exits {
            let mut rng = family.stream(((i as u64) << 40) | n as u64);
            let (right, time) = mcsim::sample_skew_exit(&k, &mut rng);
            for (j, &eta) in etas.iter().enumerate() {
                let w = (eta * time).exp();
                acc[j].0.push(if right { w } else { 0.0 });
                acc[j].1.push(if right { 0.0 } else { w });
            }
        }
        for (j, &eta) in etas.iter().enumerate() {
            let (jp, jm) = k.exit_laplace(eta);
            for (side, mv, want) in [("+", &acc[j].0, jp), ("-", &acc[j].1, jm)] {
                let se = mv.std_error().max(1e-300);
                out.push(Check::new(
                    format!("kernel[{i}] J{side}(eta={eta:.4})"),
                    mv.mean(),
                    want,
                    (mv.mean() - want).abs() / se,
                    v.z_max,
                )
                .with_note("error in standard errors"));
            }
        }
    }
    out
}

/// Backward Möbius limit against an explicit matrix product.
fn xi_checks(env: &TreeEnvironment) -> Vec<Check> {
    [0.1, 1.0]
        .into_iter()
        .map(|lambda| {
            let name = format!("xi vs matrix product (lambda={lambda})");
            let run = || -> Result<Check, Error> {
                let est = mobius::xi(env, lambda, XiOptions::default())?;
                let k = (2 * est.iterations + 50).min(env.horizon());
                let mp = mobius::matrix_product_ratio(env, lambda, k)?;
                Ok(Check::new(
                    name.clone(),
                    est.inv_xi,
                    mp.ratio,
                    (mp.ratio - est.inv_xi).abs(),
                    est.contraction_bound.max(1e-12) + 1e-10,
                ))
            };
            run().unwrap_or_else(|e| Check::not_run(&name, e))
        })
        .collect()
}

/// Variational speed against the closed forms (line and constant trees)
/// or, for general environments, against the support-bound slow-down.
fn speed_checks(env: &TreeEnvironment, cfg: &Config) -> Vec<Check> {
    let opts = lyapunov_options(cfg);
    let run = || -> Result<Check, Error> {
        let curve = lyapunov::curve(env, &[], opts, EtaCOptions::default())?;
        let beta = 2.0 * speed::beta_c(&curve) + 1.0;
        if env.is_degenerate_line() {
            let model = LyapunovModel::new(env, opts)?;
            let r = speed::speed_variational(&model, beta, &curve)?;
            let want = (2.0 * beta).sqrt();
            return Ok(Check::new(
                format!("line speed (beta={beta})"),
                r.c_star,
                want,
                (r.c_star - want).abs() / want,
                1e-10,
            ));
        }
        if env.is_homogeneous() {
            let model = LyapunovModel::generic(env, opts)?;
            let r = speed::speed_variational(&model, beta, &curve)?;
            let cf = speed::speed_constant_closed_form(env.degree(1), env.length(0), beta)?;
            return Ok(Check::new(
                format!("variational vs closed form (beta={beta:.4})"),
                r.c_star,
                cf.c_star,
                (r.c_star - cf.c_star).abs() / cf.c_star,
                1e-8,
            )
            .with_note("relative error"));
        }
        let model = LyapunovModel::new(env, opts)?;
        let r = speed::speed_variational(&model, beta, &curve)?;
        let bound = speed::slowdown_bound(env.bounds(), beta)?;
        let gap = (2.0 * beta).sqrt() - r.c_star;
        // Pass when 0 ≤ gap ≤ bound.
        let excess = if gap < 0.0 { -gap } else { (gap - bound).max(0.0) };
        Ok(Check::new(format!("slow-down within bound (beta={beta:.4})"), gap, bound, excess, 1e-9)
            .with_note("value: sqrt(2 beta) - c*; reference: bound"))
    };
    vec![run().unwrap_or_else(|e| Check::not_run("speed", e))]
}

/// Series for `P(T_0 < ∞)` from `z_1` against simulation.
fn hit_checks(env: &TreeEnvironment, cfg: &Config) -> Vec<Check> {
    let v = &cfg.validate;
    let name = "hit probability from z_1";
    let run = || -> Result<Option<Check>, Error> {
        let series = kernel::hit_probability_series(env, 1)?;
        if series.value >= 1.0 - 1e-12 {
            return Ok(None);
        }
        let mc = mcsim::hitting_time_laplace_mc(env, 1, 0, 0.0, v.n_exits, v.seed, HitOptions::default())?;
        let se = mc.std_error.max(1e-300);
        Ok(Some(
            Check::new(
                name.into(),
                mc.estimate,
                series.value,
                (mc.estimate - series.value).abs() / se,
                v.z_max,
            )
            .with_note("error in standard errors"),
        ))
    };
    match run() {
        Ok(c) => c.into_iter().collect(),
        Err(e) => vec![Check::not_run(name, e)],
    }
}

fn validate(cfg: &Config) -> Result<Report, Failure> {
    let env = load_env(cfg)?;
    let mut checks = kernel_checks(&env, cfg);
    checks.extend(xi_checks(&env));
    checks.extend(speed_checks(&env, cfg));
    checks.extend(hit_checks(&env, cfg));
    let mut t = Table::new(&["check", "value", "reference", "error", "tolerance", "status", "note"]);
    for c in &checks {
        t.push(vec![
            c.check.clone(),
            cell(c.value.0),
            cell(c.reference.0),
            cell(c.error.0),
            cell(c.tolerance.0),
            c.status.into(),
            c.note.clone(),
        ]);
    }
    let failed: Vec<String> = checks.iter().filter(|c| c.status == "fail").map(|c| c.check.clone()).collect();
    let json = json!({
        "checks": to_json(&checks),
        "passed": checks.iter().filter(|c| c.status == "pass").count(),
        "failed": failed.len(),
        "skipped": checks.iter().filter(|c| c.status == "skipped").count(),
    });
    let mut report = with_env(Report::new(json, Format::Csv).with_table(t), &env, cfg);
    report.seeds.insert("validate", cfg.validate.seed);
    if !failed.is_empty() {
        report.failure = Some(format!("{} check(s) failed: {}", failed.len(), failed.join(", ")));
    }
    Ok(report)
}
