//! Random symmetric tree environments.
//!
//! A tree is described generation by generation: every vertex of
//! generation `i` has degree `d_i` and every edge from generation `i` to
//! `i + 1` has length `ℓ_i`. Projected onto the signed distance to the
//! root, the tree becomes a line with interfaces `z_i` carrying skewness
//! `p_i = (d_i − 1)/d_i`. The root always has degree 2, so `p_0 = 1/2`.
//!
//! Only the positive side is stored. The negative side is the mirror image:
//! `z_{−i} = −z_i` and `p_{−i} = 1 − p_i`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::StreamFamily;

pub const SCHEMA_VERSION: u32 = 1;

const WEIGHT_TOL: f64 = 1e-12;

/// Law of the edge lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthLaw {
    /// Finite support: `(length, weight)` pairs.
    Discrete { support: Vec<(f64, f64)> },
    /// Uniform on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

impl LengthLaw {
    pub fn mean(&self) -> f64 {
        match self {
            LengthLaw::Discrete { support } => support.iter().map(|(l, w)| l * w).sum(),
            LengthLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            LengthLaw::Discrete { support } => {
                let m = self.mean();
                support.iter().map(|(l, w)| w * (l - m) * (l - m)).sum()
            }
            LengthLaw::Uniform { lo, hi } => (hi - lo) * (hi - lo) / 12.0,
        }
    }

    fn range(&self) -> (f64, f64) {
        match self {
            LengthLaw::Discrete { support } => support.iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), &(l, _)| (lo.min(l), hi.max(l)),
            ),
            LengthLaw::Uniform { lo, hi } => (*lo, *hi),
        }
    }

    fn sample(&self, u: f64) -> f64 {
        match self {
            LengthLaw::Discrete { support } => pick(support, u),
            LengthLaw::Uniform { lo, hi } => lo + (hi - lo) * u,
        }
    }
}

/// Inverse-CDF pick from a weighted finite support using one uniform.
fn pick<T: Copy>(support: &[(T, f64)], u: f64) -> T {
    let mut acc = 0.0;
    for &(v, w) in support {
        acc += w;
        if u < acc {
            return v;
        }
    }
    support[support.len() - 1].0
}

/// Generation recipe for a random environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// `(degree, weight)` pairs; degrees must be at least 2.
    pub degree_support: Vec<(u32, f64)>,
    pub length_law: LengthLaw,
    /// Number of generations `N` to materialize.
    pub horizon: usize,
    pub seed: u64,
}

impl EnvConfig {
    /// Deterministic tree with every degree `d` and every length `ell`.
    pub fn constant(d: u32, ell: f64, horizon: usize) -> Self {
        Self {
            degree_support: vec![(d, 1.0)],
            length_law: LengthLaw::Discrete {
                support: vec![(ell, 1.0)],
            },
            horizon,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree_support.is_empty() {
            return Err(Error::config("degree_support", "empty support"));
        }
        let mut total = 0.0;
        for &(d, w) in &self.degree_support {
            if d < 2 {
                return Err(Error::config(
                    "degree_support",
                    format!("degree {d} < 2"),
                ));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(
                    "degree_support",
                    format!("weight {w} for degree {d} is not a probability"),
                ));
            }
            total += w;
        }
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::config(
                "degree_support",
                format!("weights sum to {total}, not 1"),
            ));
        }
        match &self.length_law {
            LengthLaw::Discrete { support } => {
                if support.is_empty() {
                    return Err(Error::config("length_support", "empty support"));
                }
                let mut total = 0.0;
                for &(l, w) in support {
                    if !(l.is_finite() && l > 0.0) {
                        return Err(Error::config(
                            "length_support",
                            format!("length {l} is not a positive finite number"),
                        ));
                    }
                    if !(w.is_finite() && w >= 0.0) {
                        return Err(Error::config(
                            "length_support",
                            format!("weight {w} for length {l} is not a probability"),
                        ));
                    }
                    total += w;
                }
                if (total - 1.0).abs() > WEIGHT_TOL {
                    return Err(Error::config(
                        "length_support",
                        format!("weights sum to {total}, not 1"),
                    ));
                }
            }
            LengthLaw::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && *lo > 0.0) {
                    return Err(Error::config(
                        "length_support",
                        format!("uniform bounds [{lo}, {hi}] must be positive and finite"),
                    ));
                }
                if lo > hi {
                    return Err(Error::config(
                        "length_support",
                        format!("uniform bounds inverted: lo = {lo} > hi = {hi}"),
                    ));
                }
            }
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        Ok(())
    }

    pub fn bounds(&self) -> EnvBounds {
        let (ell_lo, ell_hi) = self.length_law.range();
        let (d_min, d_max) = self
            .degree_support
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .fold((u32::MAX, 0), |(lo, hi), &(d, _)| (lo.min(d), hi.max(d)));
        EnvBounds {
            d_min,
            d_max,
            ell_lo,
            ell_hi,
        }
    }
}

/// Support bounds of an environment law (or of a materialized sample).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvBounds {
    pub d_min: u32,
    pub d_max: u32,
    pub ell_lo: f64,
    pub ell_hi: f64,
}

/// A materialized environment `(d_1..d_N, ℓ_0..ℓ_{N−1})` with derived
/// skewness and interface positions. Immutable once built.
#[derive(Clone, Debug)]
pub struct TreeEnvironment {
    seed: u64,
    /// `d_1..d_N`.
    degrees: Vec<u32>,
    /// `ℓ_0..ℓ_{N−1}`.
    lengths: Vec<f64>,
    /// `p_0..p_N`, with `p_0 = 1/2`.
    skew: Vec<f64>,
    /// `z_0..z_N`.
    z: Vec<f64>,
    /// Present when the environment was generated, enabling extension.
    config: Option<EnvConfig>,
}

impl PartialEq for TreeEnvironment {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.degrees == other.degrees
            && self.lengths.len() == other.lengths.len()
            && self
                .lengths
                .iter()
                .zip(&other.lengths)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvFile {
    schema_version: u32,
    seed: u64,
    degrees: Vec<u32>,
    lengths: Vec<f64>,
}

/// Draw an environment from `config`.
///
/// Degrees and lengths come from two independent labelled streams, one
/// uniform per generation, so the first `n` generations of a longer
/// environment coincide with an environment of horizon `n`.
pub fn generate(config: &EnvConfig) -> Result<TreeEnvironment> {
    config.validate()?;
    let n = config.horizon;
    let mut drng = StreamFamily::new(config.seed, "env.degrees").stream(0);
    let mut lrng = StreamFamily::new(config.seed, "env.lengths").stream(0);
    let degrees: Vec<u32> = (0..n)
        .map(|_| pick(&config.degree_support, drng.random::<f64>()))
        .collect();
    let lengths: Vec<f64> = (0..n)
        .map(|_| config.length_law.sample(lrng.random::<f64>()))
        .collect();
    let mut env = TreeEnvironment::from_parts(config.seed, degrees, lengths)?;
    env.config = Some(config.clone());
    Ok(env)
}

pub fn save(env: &TreeEnvironment, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, env.to_json())?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TreeEnvironment> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    TreeEnvironment::from_json(&text)
        .map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
}

impl TreeEnvironment {
    /// Build from raw sequences, validating and deriving `p` and `z`.
    pub fn from_parts(seed: u64, degrees: Vec<u32>, lengths: Vec<f64>) -> Result<Self> {
        if degrees.is_empty() {
            return Err(Error::Validation("environment has no generations".into()));
        }
        if degrees.len() != lengths.len() {
            return Err(Error::Validation(format!(
                "{} degrees (d_1..d_N) but {} lengths (ℓ_0..ℓ_(N-1))",
                degrees.len(),
                lengths.len()
            )));
        }
        let mut skew = Vec::with_capacity(degrees.len() + 1);
        skew.push(0.5);
        for (k, &d) in degrees.iter().enumerate() {
            let p = skewness(d);
            if !(0.5..1.0).contains(&p) {
                return Err(Error::Validation(format!(
                    "d_{} = {d} gives p_{} = {p}, outside [1/2, 1)",
                    k + 1,
                    k + 1
                )));
            }
            skew.push(p);
        }
        let mut z = Vec::with_capacity(lengths.len() + 1);
        z.push(0.0);
        for (k, &l) in lengths.iter().enumerate() {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::Validation(format!(
                    "ℓ_{k} = {l} is not a positive finite length"
                )));
            }
            z.push(z[k] + l);
        }
        Ok(Self {
            seed,
            degrees,
            lengths,
            skew,
            z,
            config: None,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: EnvFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        Self::from_parts(file.seed, file.degrees, file.lengths)
    }

    pub fn to_json(&self) -> String {
        let file = EnvFile {
            schema_version: SCHEMA_VERSION,
            seed: self.seed,
            degrees: self.degrees.clone(),
            lengths: self.lengths.clone(),
        };
        serde_json::to_string(&file).expect("environment serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let d = Sha256::digest(self.to_json().as_bytes());
        let mut s = String::with_capacity(64);
        for b in d.iter() {
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of materialized generations `N`.
    pub fn horizon(&self) -> usize {
        self.degrees.len()
    }

    pub fn config(&self) -> Option<&EnvConfig> {
        self.config.as_ref()
    }

    /// `d_1..d_N`.
    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    /// `ℓ_0..ℓ_{N−1}`.
    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    /// `d_i` for `0 ≤ i ≤ N` (`d_0 = 2`).
    pub fn degree(&self, i: usize) -> u32 {
        if i == 0 {
            2
        } else {
            self.degrees[i - 1]
        }
    }

    /// `ℓ_i` for `0 ≤ i < N`.
    pub fn length(&self, i: usize) -> f64 {
        self.lengths[i]
    }

    /// Skewness at signed interface `i`, `|i| ≤ N`.
    pub fn p(&self, i: i64) -> f64 {
        if i >= 0 {
            self.skew[i as usize]
        } else {
            1.0 - self.skew[i.unsigned_abs() as usize]
        }
    }

    /// Position of signed interface `i`, `|i| ≤ N`.
    pub fn z(&self, i: i64) -> f64 {
        if i >= 0 {
            self.z[i as usize]
        } else {
            -self.z[i.unsigned_abs() as usize]
        }
    }

    /// Largest `|i|` whose two neighbouring gaps are both materialized.
    pub fn max_interface(&self) -> i64 {
        self.horizon() as i64 - 1
    }

    /// Left and right gaps `(a, b)` around signed interface `i`,
    /// `|i| ≤ N − 1`.
    pub fn gaps(&self, i: i64) -> (f64, f64) {
        let m = i.unsigned_abs() as usize;
        match i {
            0 => (self.lengths[0], self.lengths[0]),
            i if i > 0 => (self.lengths[m - 1], self.lengths[m]),
            _ => (self.lengths[m], self.lengths[m - 1]),
        }
    }

    /// Every degree is 2, so the tree is the real line. Judged from the
    /// generating law when known, otherwise from the sample.
    pub fn is_degenerate_line(&self) -> bool {
        match &self.config {
            Some(c) => c.degree_support.iter().all(|&(d, w)| d == 2 || w == 0.0),
            None => self.degrees.iter().all(|&d| d == 2),
        }
    }

    /// One degree and one length throughout (law or sample, as above).
    pub fn is_homogeneous(&self) -> bool {
        match &self.config {
            Some(c) => {
                let degrees = c.degree_support.iter().filter(|(_, w)| *w > 0.0).count();
                let lengths = match &c.length_law {
                    LengthLaw::Discrete { support } => {
                        support.iter().filter(|(_, w)| *w > 0.0).count()
                    }
                    LengthLaw::Uniform { lo, hi } => usize::from(lo != hi) + 1,
                };
                degrees == 1 && lengths == 1
            }
            None => {
                let d = self.degrees[0];
                let l = self.lengths[0].to_bits();
                self.degrees.iter().all(|&x| x == d)
                    && self.lengths.iter().all(|x| x.to_bits() == l)
            }
        }
    }

    /// Support bounds: from the generating law when known, otherwise from
    /// the materialized sample.
    pub fn bounds(&self) -> EnvBounds {
        if let Some(c) = &self.config {
            return c.bounds();
        }
        let (d_min, d_max) = self
            .degrees
            .iter()
            .fold((u32::MAX, 0), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        let (ell_lo, ell_hi) = self
            .lengths
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &l| {
                (lo.min(l), hi.max(l))
            });
        EnvBounds {
            d_min,
            d_max,
            ell_lo,
            ell_hi,
        }
    }

    /// Whether [`Self::extend_to`] can materialize more generations.
    pub fn is_extendable(&self) -> bool {
        self.config.is_some()
    }

    /// Environment with at least `n` generations whose first `N` coincide
    /// with `self`. Only generated environments can be extended.
    pub fn extend_to(&self, n: usize) -> Result<TreeEnvironment> {
        if n <= self.horizon() {
            return Ok(self.clone());
        }
        match &self.config {
            Some(c) => generate(&c.clone().with_horizon(n)),
            None => Err(Error::InsufficientHorizon {
                required: n,
                available: self.horizon(),
            }),
        }
    }

    /// Copy keeping only the first `n` generations.
    pub fn truncated(&self, n: usize) -> TreeEnvironment {
        let n = n.clamp(1, self.horizon());
        let mut env = TreeEnvironment::from_parts(
            self.seed,
            self.degrees[..n].to_vec(),
            self.lengths[..n].to_vec(),
        )
        .expect("prefix of a valid environment is valid");
        env.config = self.config.clone().map(|c| c.with_horizon(n));
        env
    }
}

/// `p = (d − 1)/d`.
pub fn skewness(d: u32) -> f64 {
    (d as f64 - 1.0) / d as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_tree_matches_figure_values() {
        let env = generate(&EnvConfig::constant(3, 1.0, 3)).unwrap();
        for i in 1..=3 {
            assert!((env.p(i) - 2.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(
            (0..=3).map(|i| env.z(i)).collect::<Vec<_>>(),
            vec![0.0, 1.0, 2.0, 3.0]
        );
        assert!((env.p(-1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn line_has_half_skewness() {
        let cfg = EnvConfig {
            degree_support: vec![(2, 1.0)],
            length_law: LengthLaw::Uniform { lo: 0.5, hi: 2.0 },
            horizon: 5,
            seed: 3,
        };
        let env = generate(&cfg).unwrap();
        assert!((1..=5).all(|i| env.p(i) == 0.5));
        assert!(env.is_degenerate_line());
    }

    #[test]
    fn generation_is_deterministic_and_prefix_stable() {
        let cfg = EnvConfig {
            degree_support: vec![(3, 0.5), (4, 0.5)],
            length_law: LengthLaw::Uniform { lo: 0.5, hi: 2.0 },
            horizon: 50,
            seed: 11,
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let long = a.extend_to(200).unwrap();
        assert_eq!(&long.degrees()[..50], a.degrees());
        assert_eq!(&long.lengths()[..50], a.lengths());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = EnvConfig::constant(3, 1.0, 5);
        cfg.degree_support = vec![(3, 0.5), (4, 0.4)];
        let e = generate(&cfg).unwrap_err().to_string();
        assert!(e.contains("degree_support"), "{e}");

        let mut cfg = EnvConfig::constant(3, 1.0, 5);
        cfg.degree_support = vec![(1, 1.0)];
        assert!(generate(&cfg).unwrap_err().to_string().contains("degree_support"));

        let mut cfg = EnvConfig::constant(3, 1.0, 5);
        cfg.length_law = LengthLaw::Uniform { lo: 2.0, hi: 1.0 };
        let e = generate(&cfg).unwrap_err().to_string();
        assert!(e.contains("length_support") && e.contains("inverted"), "{e}");
    }

    #[test]
    fn json_rejects_bad_files() {
        let e = TreeEnvironment::from_json(r#"{"schema_version":1,"seed":1,"degrees":[3]}"#)
            .unwrap_err();
        assert!(matches!(e, Error::Parse(ref m) if m.contains("lengths")), "{e}");

        // d_1 = 1 would mean p_1 = 0 < 1/2.
        let e = TreeEnvironment::from_json(
            r#"{"schema_version":1,"seed":1,"degrees":[1],"lengths":[1.0]}"#,
        )
        .unwrap_err();
        assert!(matches!(e, Error::Validation(_)), "{e}");

        let e = TreeEnvironment::from_json(
            r#"{"schema_version":1,"seed":1,"degrees":[3],"lengths":[1.0],"skewness":[0.4]}"#,
        )
        .unwrap_err();
        assert!(matches!(e, Error::Parse(_)), "{e}");
    }

    #[test]
    fn mirror_accessors() {
        let cfg = EnvConfig {
            degree_support: vec![(2, 0.3), (5, 0.7)],
            length_law: LengthLaw::Discrete {
                support: vec![(0.7, 0.5), (1.3, 0.5)],
            },
            horizon: 30,
            seed: 5,
        };
        let env = generate(&cfg).unwrap();
        for i in 0..=30i64 {
            assert_eq!(env.p(i) + env.p(-i), 1.0);
            assert_eq!(env.z(i) + env.z(-i), 0.0);
        }
        let (a, b) = env.gaps(4);
        let (a2, b2) = env.gaps(-4);
        assert_eq!((a, b), (b2, a2));
    }
}
