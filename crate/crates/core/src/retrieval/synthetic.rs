//! Synthetic place-recognition data with controllable burstiness.
//!
//! Every place owns one distinctive feature. Each image of a place also
//! contains `burst_size` near-duplicates of a repetitive pattern drawn from a
//! small pool that many places share. The pattern gets a fresh per-image
//! offset, so two views of the same place agree on the distinctive feature
//! but not on the exact look of their repeated structure. Distinctive
//! features lean toward their place's pattern (cosine `distinct_alignment`)
//! so both land in the same vocabulary cell, where the repeated copies can
//! drown the distinctive residual unless they are discounted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ManifestEntry, Split, DEFAULT_RADIUS_M};
use crate::error::{Error, Result};
use crate::featureio::{self, LocalFeatureSet};
use crate::linalg;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurstBenchParams {
    pub n_places: usize,
    pub n_distractors: usize,
    pub burst_size: usize,
    pub d: usize,
    /// Number of shared repetitive patterns.
    pub pool_size: usize,
    /// Fraction of places (and distractors) used for training.
    pub train_fraction: f64,
    /// Cosine between a distinctive feature and its place's pattern.
    pub distinct_alignment: f64,
    /// Expected norm of the noise separating two views' distinctive features.
    pub distinct_noise: f64,
    /// Expected norm of the per-image offset applied to the repeated pattern.
    pub burst_offset: f64,
    /// Expected norm of the per-copy jitter inside one burst.
    pub burst_jitter: f64,
}

impl Default for BurstBenchParams {
    fn default() -> Self {
        Self {
            n_places: 64,
            n_distractors: 32,
            burst_size: 16,
            d: 32,
            pool_size: 8,
            train_fraction: 0.5,
            distinct_alignment: 0.35,
            distinct_noise: 0.1,
            burst_offset: 0.5,
            burst_jitter: 0.05,
        }
    }
}

impl BurstBenchParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_places < 2 {
            return bad(format!("need at least 2 places, got {}", self.n_places));
        }
        if self.d == 0 || self.pool_size == 0 || self.pool_size >= self.d {
            return bad(format!(
                "pattern pool ({}) must be non-empty and smaller than the dimension ({})",
                self.pool_size, self.d
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must be in (0, 1), got {}", self.train_fraction));
        }
        let n_train = self.train_places();
        if n_train == 0 || n_train == self.n_places {
            return bad("train/test split leaves one side without places".into());
        }
        if !(0.0..1.0).contains(&self.distinct_alignment) {
            return bad(format!("distinct_alignment must be in [0, 1), got {}", self.distinct_alignment));
        }
        for (name, v) in [
            ("distinct_noise", self.distinct_noise),
            ("burst_offset", self.burst_offset),
            ("burst_jitter", self.burst_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn train_places(&self) -> usize {
        (self.n_places as f64 * self.train_fraction).round() as usize
    }
}

/// Generated data: disjoint train and test manifests plus every image's
/// features, keyed by image id.
#[derive(Debug, Clone)]
pub struct BurstBenchmark {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    pub features: BTreeMap<String, LocalFeatureSet>,
}

impl BurstBenchmark {
    pub fn sets_for<'a>(&'a self, manifest: &'a DatasetManifest) -> impl Iterator<Item = &'a LocalFeatureSet> + 'a {
        manifest.entries.iter().map(|e| &self.features[&e.image_id])
    }
}

const PLACE_SPACING_M: f64 = 100.0;
const VIEW_JITTER_M: f64 = 5.0;
const DISTRACTOR_OFFSET_M: f64 = 1000.0;

fn noise(rng: &mut rng::Rng, d: usize, norm: f64) -> Array1<f64> {
    let scale = norm / (d as f64).sqrt();
    Array1::from_shape_simple_fn(d, || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

struct Place {
    pattern: usize,
    distinctive: Array1<f64>,
}

fn make_place(rng: &mut rng::Rng, patterns: &Array2<f64>, pattern: usize, alignment: f64) -> Place {
    let d = patterns.nrows();
    // Random direction orthogonal to every pattern.
    let mut g = noise(rng, d, 1.0);
    for k in 0..patterns.ncols() {
        let p = patterns.column(k);
        let c = g.dot(&p);
        g.scaled_add(-c, &p);
    }
    let g = unit(g);
    let distinctive = &patterns.column(pattern) * alignment + &g * (1.0 - alignment * alignment).sqrt();
    Place { pattern, distinctive }
}

fn make_view(rng: &mut rng::Rng, id: String, place: &Place, patterns: &Array2<f64>, params: &BurstBenchParams) -> Result<LocalFeatureSet> {
    let d = params.d;
    let mut m = Array2::zeros((1 + params.burst_size, d));
    m.row_mut(0)
        .assign(&unit(&place.distinctive + &noise(rng, d, params.distinct_noise)));
    let offset = noise(rng, d, params.burst_offset);
    let base = &patterns.column(place.pattern) + &offset;
    for i in 0..params.burst_size {
        m.row_mut(1 + i)
            .assign(&unit(&base + &noise(rng, d, params.burst_jitter)));
    }
    // Storage is f32; keep the in-memory copy identical to what lands on disk.
    m.mapv_inplace(|v| v as f32 as f64);
    LocalFeatureSet::new(id, m)
}

/// Build the benchmark in memory. Deterministic per seed.
pub fn synthesize(seed: u64, params: &BurstBenchParams) -> Result<BurstBenchmark> {
    params.validate()?;
    let mut rng = rng::seeded(seed);
    let d = params.d;
    let raw = Array2::from_shape_simple_fn((d, params.pool_size), || StandardNormal.sample(&mut rng));
    let patterns = linalg::orthonormal_columns(&raw);

    let n_train = params.train_places();
    let n_train_distractors = (params.n_distractors as f64 * params.train_fraction).round() as usize;
    let mut features = BTreeMap::new();
    let mut train = Vec::new();
    let mut test = Vec::new();

    for i in 0..params.n_places {
        let place = make_place(&mut rng, &patterns, i % params.pool_size, params.distinct_alignment);
        let x0 = PLACE_SPACING_M * i as f64;
        let bucket = if i < n_train { &mut train } else { &mut test };
        for (prefix, split) in [("q", Split::Query), ("r", Split::Reference)] {
            let id = format!("{prefix}{i:04}");
            let set = make_view(&mut rng, id.clone(), &place, &patterns, params)?;
            let dx = rng.random_range(-VIEW_JITTER_M..VIEW_JITTER_M);
            let dy = rng.random_range(-VIEW_JITTER_M..VIEW_JITTER_M);
            bucket.push(ManifestEntry {
                image_id: id.clone(),
                feature_path: PathBuf::from("features").join(format!("{id}.vbff")),
                x_m: x0 + dx,
                y_m: dy,
                split,
            });
            features.insert(id, set);
        }
    }
    for j in 0..params.n_distractors {
        let pattern = rng.random_range(0..params.pool_size);
        let place = make_place(&mut rng, &patterns, pattern, params.distinct_alignment);
        let id = format!("d{j:04}");
        let set = make_view(&mut rng, id.clone(), &place, &patterns, params)?;
        let bucket = if j < n_train_distractors { &mut train } else { &mut test };
        bucket.push(ManifestEntry {
            image_id: id.clone(),
            feature_path: PathBuf::from("features").join(format!("{id}.vbff")),
            x_m: PLACE_SPACING_M * j as f64,
            y_m: DISTRACTOR_OFFSET_M,
            split: Split::Reference,
        });
        features.insert(id, set);
    }

    Ok(BurstBenchmark {
        train: DatasetManifest::new(train, DEFAULT_RADIUS_M, PathBuf::new())?,
        test: DatasetManifest::new(test, DEFAULT_RADIUS_M, PathBuf::new())?,
        features,
    })
}

/// Build the benchmark and write it under `out_dir`:
/// `features/<id>.vbff`, `train.jsonl` and `test.jsonl`.
pub fn generate_burst_benchmark(seed: u64, params: &BurstBenchParams, out_dir: &Path) -> Result<BurstBenchmark> {
    let mut bench = synthesize(seed, params)?;
    let feature_dir = out_dir.join("features");
    std::fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    for (id, set) in &bench.features {
        featureio::save_features(set, &feature_dir.join(format!("{id}.vbff")))?;
    }
    bench.train.base_dir = out_dir.to_path_buf();
    bench.test.base_dir = out_dir.to_path_buf();
    bench.train.save(&out_dir.join("train.jsonl"))?;
    bench.test.save(&out_dir.join("test.jsonl"))?;
    Ok(bench)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::ground_truth_within_radius;

    #[test]
    fn every_query_has_exactly_one_positive() {
        let b = synthesize(1, &BurstBenchParams::default()).unwrap();
        for m in [&b.train, &b.test] {
            let gt = ground_truth_within_radius(m);
            assert!(gt.excluded.is_empty());
            assert!(gt.positives.values().all(|p| p.len() == 1));
            for (q, p) in &gt.positives {
                assert_eq!(&q[1..], &p.iter().next().unwrap()[1..]);
            }
        }
        assert_eq!(b.train.queries().count(), 32);
        assert_eq!(b.test.references().count(), 32 + 16);
    }

    #[test]
    fn shapes_and_burst_similarity() {
        let p = BurstBenchParams::default();
        let b = synthesize(2, &p).unwrap();
        let s = &b.features["q0005"];
        assert_eq!(s.features().dim(), (1 + p.burst_size, p.d));
        let x = s.features();
        let cos = x.row(1).dot(&x.row(2));
        assert!(cos > 0.9, "burst copies should be near-identical, cos = {cos}");
        let distinct = x.row(0).dot(&x.row(1));
        assert!(distinct < 0.5, "distinctive feature too close to the burst: {distinct}");
    }

    #[test]
    fn deterministic_files() {
        let p = BurstBenchParams {
            n_places: 4,
            n_distractors: 2,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_burst_benchmark(3, &p, a.path()).unwrap();
        generate_burst_benchmark(3, &p, b.path()).unwrap();
        for name in ["train.jsonl", "test.jsonl", "features/q0001.vbff", "features/d0001.vbff"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap(),
                "{name}"
            );
        }
        let loaded = DatasetManifest::load(&a.path().join("train.jsonl"), 25.0).unwrap();
        let mem = synthesize(3, &p).unwrap();
        for e in &loaded.entries {
            let from_disk = featureio::load_features(&loaded.resolve(&e.feature_path)).unwrap();
            assert_eq!(from_disk.features(), mem.features[&e.image_id].features());
        }
    }

    #[test]
    fn rejects_degenerate_sizes() {
        for p in [
            BurstBenchParams { n_places: 1, ..Default::default() },
            BurstBenchParams { pool_size: 32, ..Default::default() },
            BurstBenchParams { d: 0, ..Default::default() },
            BurstBenchParams { train_fraction: 1.0, ..Default::default() },
        ] {
            assert!(matches!(synthesize(0, &p), Err(Error::Config(_))));
        }
    }
}
