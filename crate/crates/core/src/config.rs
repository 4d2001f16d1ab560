//! Pipeline configuration file (TOML).
//!
//! Every section and key is optional; missing values take the library
//! defaults. Unknown keys are rejected. Example:
//!
//! ```toml
//! [paths]
//! manifest = "data/train.jsonl"
//! eval_manifest = "data/test.jsonl"
//! bundle = "out/model"
//!
//! [fit]
//! clusters = 64
//! prepool_dim = 192
//!
//! [burst]
//! a = 10.0
//! b = -5.0
//! p = 1.0
//!
//! [train]
//! lr = 1e-5
//! steps = 200
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{BurstParams, DEFAULT_SHARPNESS};
use crate::error::{Error, Result};
use crate::pipeline::{FitSettings, PrepoolInit, TripletSettings};
use crate::projection::DEFAULT_WHITENING_EPSILON;
use crate::retrieval::synthetic::BurstBenchParams;
use crate::retrieval::DEFAULT_RADIUS_M;
use crate::training::{OptimizerConfig, DEFAULT_LR, DEFAULT_MARGIN};
use crate::vocabulary::{DEFAULT_MAX_ITERS, DEFAULT_TOL};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub fit: FitConfig,
    pub burst: BurstConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub gen: GenConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Manifest used for fitting and training.
    pub manifest: Option<PathBuf>,
    /// Manifest used for aggregation and evaluation; falls back to `manifest`.
    pub eval_manifest: Option<PathBuf>,
    pub bundle: PathBuf,
    pub descriptors: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            eval_manifest: None,
            bundle: PathBuf::from("model"),
            descriptors: PathBuf::from("descriptors"),
            output: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub clusters: usize,
    pub sample_count: usize,
    pub seed: u64,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub prepool_dim: Option<usize>,
    pub prepool_init: PrepoolInit,
    pub sharpness: f64,
    /// Output dimension of post-pool whitening; `None` disables it.
    pub whitening_dim: Option<usize>,
    pub whitening_epsilon: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            clusters: 64,
            sample_count: 50_000,
            seed: 0,
            kmeans_max_iters: DEFAULT_MAX_ITERS,
            kmeans_tol: DEFAULT_TOL,
            prepool_dim: None,
            prepool_init: PrepoolInit::Pca,
            sharpness: DEFAULT_SHARPNESS,
            whitening_dim: None,
            whitening_epsilon: DEFAULT_WHITENING_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurstConfig {
    pub enabled: bool,
    pub a: f64,
    pub b: f64,
    pub p: f64,
}

impl Default for BurstConfig {
    fn default() -> Self {
        let d = BurstParams::default();
        Self {
            enabled: d.enabled,
            a: d.a,
            b: d.b,
            p: d.p,
        }
    }
}

impl BurstConfig {
    pub fn params(&self) -> BurstParams {
        BurstParams {
            a: self.a,
            b: self.b,
            p: self.p,
            enabled: self.enabled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub margin: f64,
    pub batch_size: usize,
    pub negatives: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        let t = TripletSettings::default();
        Self {
            lr: DEFAULT_LR,
            steps: o.steps,
            seed: o.seed,
            margin: DEFAULT_MARGIN,
            batch_size: t.batch_size,
            negatives: t.negatives,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            steps: self.steps,
            seed: self.seed,
        }
    }

    pub fn triplets(&self) -> TripletSettings {
        TripletSettings {
            batch_size: self.batch_size,
            negatives: self.negatives,
            margin: self.margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub radius_m: f64,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            radius_m: DEFAULT_RADIUS_M,
            ks: vec![1, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Raw feature dimension.
    pub d: usize,
    pub dims: Vec<usize>,
    pub n: usize,
    pub clusters: usize,
    pub runs: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d: 768,
            dims: vec![768, 384, 192, 64],
            n: 1024,
            clusters: 64,
            runs: 30,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    /// Written as a `[gen.params]` table.
    pub params: BurstBenchParams,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Schema checks that do not need any data.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let f = &self.fit;
        if f.clusters < 2 {
            return bad(format!("fit.clusters must be >= 2, got {}", f.clusters));
        }
        if f.sample_count == 0 {
            return bad("fit.sample_count must be positive".into());
        }
        if f.prepool_dim == Some(0) || f.whitening_dim == Some(0) {
            return bad("projection dimensions must be positive".into());
        }
        if !(f.sharpness > 0.0 && f.sharpness.is_finite()) {
            return bad(format!("fit.sharpness must be positive, got {}", f.sharpness));
        }
        if !(f.kmeans_tol >= 0.0) || !(f.whitening_epsilon >= 0.0) {
            return bad("tolerances must be >= 0".into());
        }
        self.burst.params().validate()?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", t.lr));
        }
        if !(t.margin >= 0.0 && t.margin.is_finite()) {
            return bad(format!("train.margin must be >= 0, got {}", t.margin));
        }
        if t.batch_size == 0 || t.negatives == 0 {
            return bad("train.batch_size and train.negatives must be positive".into());
        }
        if !(self.eval.radius_m >= 0.0 && self.eval.radius_m.is_finite()) {
            return bad(format!("eval.radius_m must be >= 0, got {}", self.eval.radius_m));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval.ks must be a non-empty list of K >= 1".into());
        }
        let b = &self.bench;
        if b.dims.is_empty() || b.dims.iter().any(|&d| d == 0 || d > b.d) {
            return bad(format!("bench.dims must lie in 1..={}", b.d));
        }
        if b.runs < crate::bench::MIN_RUNS {
            return bad(format!("bench.runs must be >= {}", crate::bench::MIN_RUNS));
        }
        if b.n == 0 || b.clusters < 2 || b.threads == 0 {
            return bad("bench.n, bench.clusters and bench.threads must be positive".into());
        }
        self.gen.params.validate()
    }

    pub fn fit_settings(&self) -> FitSettings {
        let f = &self.fit;
        FitSettings {
            clusters: f.clusters,
            sample_count: f.sample_count,
            seed: f.seed,
            kmeans_max_iters: f.kmeans_max_iters,
            kmeans_tol: f.kmeans_tol,
            prepool_dim: f.prepool_dim,
            prepool_init: f.prepool_init,
            sharpness: f.sharpness,
            burst: self.burst.params(),
        }
    }

    /// SHA-256 of the canonical JSON form, as 16 hex digits. Key order in
    /// the source file does not matter since the struct fixes the order.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = PipelineConfig::from_toml("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.fit.clusters, 64);
        assert_eq!(cfg.burst.params(), BurstParams::default());
        assert_eq!(cfg.eval.radius_m, 25.0);
        assert_eq!(cfg.train.margin, 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["[fit]\nclusterz = 3", "bogus = 1", "[gen.params]\nn_place = 4"] {
            assert!(matches!(PipelineConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = PipelineConfig::from_toml("[burst]\na = 3.0\nb = -1.0\n[fit]\nclusters = 8\nseed = 2").unwrap();
        let b = PipelineConfig::from_toml("[fit]\nseed = 2\nclusters = 8\n[burst]\nb = -1.0\na = 3.0").unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        let c = PipelineConfig::from_toml("[fit]\nseed = 3\nclusters = 8\n[burst]\nb = -1.0\na = 3.0").unwrap();
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.paths.manifest = Some("m.jsonl".into());
        cfg.fit.prepool_dim = Some(16);
        cfg.gen.params.n_places = 10;
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
    }

    #[test]
    fn invalid_values() {
        for text in [
            "[fit]\nclusters = 1",
            "[train]\nlr = 0.0",
            "[eval]\nks = [0]",
            "[bench]\nruns = 5",
            "[bench]\ndims = [1000]",
            "[burst]\na = 0.0\nb = -100.0",
        ] {
            assert!(matches!(PipelineConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }
}
