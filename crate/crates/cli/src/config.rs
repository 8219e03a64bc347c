//! Resolved run configuration.
//!
//! Every subcommand reads its settings from one [`Config`]. Values come
//! from, in increasing priority: built-in defaults, the TOML file given by
//! `--config`, `SKEWFRONT_*` environment variables and command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use skewfront::env::{EnvConfig, LengthLaw};

use crate::UsageError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub env: EnvSection,
    pub lyapunov: LyapunovSection,
    pub xi: XiSection,
    pub eta_c: EtaCSection,
    pub speed: SpeedSection,
    pub mc: McSection,
    pub pde: PdeSection,
    pub validate: ValidateSection,
}

/// How to obtain the environment when no `--env` file is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    /// Environment file; when empty the environment is generated.
    pub file: String,
    /// `d:w,d:w,…` degree support.
    pub degrees: String,
    /// `l:w,l:w,…` discrete lengths or `uniform:lo:hi`.
    pub lengths: String,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            file: String::new(),
            degrees: "3:1.0".into(),
            lengths: "1:1.0".into(),
            horizon: 1000,
            seed: 0,
        }
    }
}

impl EnvSection {
    pub fn to_env_config(&self) -> Result<EnvConfig, UsageError> {
        Ok(EnvConfig {
            degree_support: parse_degrees(&self.degrees)?,
            length_law: parse_lengths(&self.lengths)?,
            horizon: self.horizon,
            seed: self.seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LyapunovSection {
    pub n_interfaces: usize,
    pub tol: f64,
    /// `lo:hi:n`, linearly spaced and inclusive.
    pub lambda_grid: String,
}

impl Default for LyapunovSection {
    fn default() -> Self {
        Self {
            n_interfaces: 100_000,
            tol: 1e-13,
            lambda_grid: "0.1:5:50".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XiSection {
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for XiSection {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iterations: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtaCSection {
    pub height_cap: usize,
    pub move_tol: f64,
}

impl Default for EtaCSection {
    fn default() -> Self {
        Self {
            height_cap: 1 << 16,
            move_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeedSection {
    pub beta: f64,
    /// `lo:hi:n` for `speed-sweep`.
    pub beta_grid: String,
    /// Empty, or `d,ell` to use the constant-tree closed form.
    pub closed_form: String,
}

impl Default for SpeedSection {
    fn default() -> Self {
        Self {
            beta: 2.0,
            beta_grid: "0.5:5:10".into(),
            closed_form: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub seed: u64,
    pub n_paths: usize,
    pub lambda: f64,
    pub from: i64,
    pub to: i64,
    /// Lattice spacing; `mc-hit` uses the skew-exit walk when this is 0.
    pub step: f64,
    pub t_max: f64,
    pub start: i64,
    pub c: f64,
    pub v: f64,
    /// Comma-separated times for `mc-ldp`.
    pub t_grid: String,
    pub kill_weight: f64,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            seed: 1,
            n_paths: 100_000,
            lambda: 1.0,
            from: 1,
            to: 0,
            step: 0.0,
            t_max: 20.0,
            start: 0,
            c: 0.5,
            v: 1.5,
            t_grid: "10,20,40".into(),
            kill_weight: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeSection {
    pub beta: f64,
    pub half_width: f64,
    pub dx: f64,
    pub dt: f64,
    pub t_max: f64,
    pub front_level: f64,
    pub fit_window: f64,
    pub record_interval: f64,
    /// Comma-separated snapshot times (empty for none).
    pub snapshot_times: String,
}

impl Default for PdeSection {
    fn default() -> Self {
        let d = skewfront::pde::PdeConfig::default();
        Self {
            beta: d.beta,
            half_width: d.half_width,
            dx: d.dx,
            dt: d.dt,
            t_max: d.t_max,
            front_level: d.front_level,
            fit_window: d.fit_window,
            record_interval: d.record_interval,
            snapshot_times: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSection {
    /// Samples per kernel in the kernel-vs-simulation check.
    pub n_exits: usize,
    /// Interfaces checked (from 1 upward).
    pub n_kernels: usize,
    /// Allowed deviation in standard errors.
    pub z_max: f64,
    pub seed: u64,
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self {
            n_exits: 100_000,
            n_kernels: 5,
            z_max: 4.0,
            seed: 11,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn bad(what: &str, text: &str, why: &str) -> UsageError {
    UsageError(format!("invalid {what} `{text}`: {why}"))
}

/// `d:w,d:w,…`
pub fn parse_degrees(text: &str) -> Result<Vec<(u32, f64)>, UsageError> {
    text.split(',')
        .map(|item| {
            let (d, w) = item.split_once(':').ok_or_else(|| bad("degree support", text, "expected d:weight"))?;
            let d = d.trim().parse().map_err(|_| bad("degree support", text, "degree is not an integer"))?;
            let w = w.trim().parse().map_err(|_| bad("degree support", text, "weight is not a number"))?;
            Ok((d, w))
        })
        .collect()
}

/// `l:w,l:w,…` or `uniform:lo:hi`.
pub fn parse_lengths(text: &str) -> Result<LengthLaw, UsageError> {
    if let Some(rest) = text.strip_prefix("uniform:") {
        let (lo, hi) = rest.split_once(':').ok_or_else(|| bad("length law", text, "expected uniform:lo:hi"))?;
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("length law", text, "bound is not a number"));
        return Ok(LengthLaw::Uniform {
            lo: num(lo)?,
            hi: num(hi)?,
        });
    }
    let support = text
        .split(',')
        .map(|item| {
            let (l, w) = item.split_once(':').ok_or_else(|| bad("length law", text, "expected l:weight"))?;
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("length law", text, "not a number"));
            Ok((num(l)?, num(w)?))
        })
        .collect::<Result<_, UsageError>>()?;
    Ok(LengthLaw::Discrete { support })
}

/// `lo:hi:n`, `n` points including both ends (`n = 1` gives `lo`).
pub fn parse_grid(text: &str) -> Result<Vec<f64>, UsageError> {
    let parts: Vec<&str> = text.split(':').collect();
    let [lo, hi, n] = parts[..] else {
        return Err(bad("grid", text, "expected lo:hi:n"));
    };
    let lo: f64 = lo.trim().parse().map_err(|_| bad("grid", text, "lo is not a number"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad("grid", text, "hi is not a number"))?;
    let n: usize = n.trim().parse().map_err(|_| bad("grid", text, "n is not an integer"))?;
    if n == 0 || !(lo.is_finite() && hi.is_finite()) || (n > 1 && hi <= lo) {
        return Err(bad("grid", text, "need finite lo < hi and n ≥ 1"));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

/// Comma-separated numbers (empty string gives an empty list).
pub fn parse_list(text: &str) -> Result<Vec<f64>, UsageError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad("list", text, "expected comma-separated numbers")))
        .collect()
}

/// `d,ell`.
pub fn parse_closed_form(text: &str) -> Result<(u32, f64), UsageError> {
    let (d, ell) = text.split_once(',').ok_or_else(|| bad("closed form", text, "expected d,ell"))?;
    Ok((
        d.trim().parse().map_err(|_| bad("closed form", text, "d is not an integer"))?,
        ell.trim().parse().map_err(|_| bad("closed form", text, "ell is not a number"))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_and_supports() {
        assert_eq!(parse_grid("1:3:3").unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(parse_grid("0.5:9:1").unwrap(), vec![0.5]);
        assert!(parse_grid("3:1:4").is_err());
        assert!(parse_grid("1:2").is_err());
        assert_eq!(parse_degrees("2:0.5,3:0.5").unwrap(), vec![(2, 0.5), (3, 0.5)]);
        assert_eq!(parse_lengths("uniform:0.5:1.5").unwrap(), LengthLaw::Uniform { lo: 0.5, hi: 1.5 });
        assert_eq!(
            parse_lengths("1:1.0").unwrap(),
            LengthLaw::Discrete {
                support: vec![(1.0, 1.0)]
            }
        );
        assert_eq!(parse_closed_form("3,1").unwrap(), (3, 1.0));
        assert_eq!(parse_list("10, 20").unwrap(), vec![10.0, 20.0]);
    }

    #[test]
    fn partial_files_keep_defaults() {
        let cfg: Config = toml::from_str("[mc]\nn_paths = 7\n").unwrap();
        assert_eq!(cfg.mc.n_paths, 7);
        assert_eq!(cfg.mc.seed, McSection::default().seed);
        assert_eq!(cfg.pde, PdeSection::default());
        let round: Config = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(round, cfg);
        assert!(toml::from_str::<Config>("[mc]\nbogus = 1\n").is_err());
    }
}
