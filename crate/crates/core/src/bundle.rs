//! Model bundles: a directory with one `model.json` holding the scalars and
//! flags, plus VBFF matrices for every array.
//!
//! ```text
//! model.json
//! vocabulary.vbff, vocabulary.json
//! assign_weights.vbff, assign_biases.vbff
//! prepool_mean.vbff, prepool_rotation.vbff, prepool.json      (optional)
//! whitening_mean.vbff, whitening_rotation.vbff, whitening.json (optional)
//! ```
//!
//! All matrices are stored as f64, so a save/load cycle is bit-exact. Loading
//! recomputes the config hash and rejects bundles whose stored hash differs.

use std::path::Path;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationModel, AssignmentParams, BurstParams};
use crate::error::{Error, Result};
use crate::featureio::{self, Dtype};
use crate::projection::{PcaModel, WhiteningModel};
use crate::vocabulary::Vocabulary;

pub const BUNDLE_VERSION: u32 = 1;
const MODEL_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    config_hash: String,
    clusters: usize,
    dim: usize,
    a: f64,
    b: f64,
    p: f64,
    s: f64,
    burst_enabled: bool,
    prepool: bool,
    whitening: bool,
}

pub fn save_bundle(model: &AggregationModel, dir: &Path) -> Result<()> {
    model.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // Drop optional parts left over from an earlier save into the same dir.
    for stem in ["prepool", "whitening"] {
        for suffix in ["_mean.vbff", "_rotation.vbff", ".json"] {
            let p = dir.join(format!("{stem}{suffix}"));
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    model.vocabulary.save(dir, "vocabulary")?;
    featureio::write_matrix(&dir.join("assign_weights.vbff"), model.assignment.weights.view(), Dtype::F64)?;
    featureio::write_matrix(
        &dir.join("assign_biases.vbff"),
        model.assignment.biases.view().insert_axis(Axis(0)),
        Dtype::F64,
    )?;
    if let Some(p) = &model.prepool {
        p.save(dir, "prepool")?;
    }
    if let Some(w) = &model.whitening {
        w.save(dir, "whitening")?;
    }
    let meta = ModelFile {
        version: BUNDLE_VERSION,
        config_hash: model.compute_hash(),
        clusters: model.num_clusters(),
        dim: model.local_dim(),
        a: model.burst.a,
        b: model.burst.b,
        p: model.burst.p,
        s: model.assignment.sharpness_init,
        burst_enabled: model.burst.enabled,
        prepool: model.prepool.is_some(),
        whitening: model.whitening.is_some(),
    };
    let path = dir.join(MODEL_FILE);
    let json = serde_json::to_string_pretty(&meta).expect("model file serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_bundle(dir: &Path) -> Result<AggregationModel> {
    let path = dir.join(MODEL_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: ModelFile =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if meta.version != BUNDLE_VERSION {
        return Err(Error::Format(format!(
            "{}: bundle version {} is not supported",
            path.display(),
            meta.version
        )));
    }
    let vocabulary = Vocabulary::load(dir, "vocabulary")?;
    let (weights, _) = featureio::read_matrix(&dir.join("assign_weights.vbff"))?;
    let (biases, _) = featureio::read_matrix(&dir.join("assign_biases.vbff"))?;
    if biases.nrows() != 1 {
        return Err(Error::Shape("assign_biases.vbff must hold one row".into()));
    }
    if vocabulary.num_clusters() != meta.clusters || vocabulary.dim() != meta.dim {
        return Err(Error::Shape(format!(
            "model.json says {}x{}, vocabulary is {}x{}",
            meta.clusters,
            meta.dim,
            vocabulary.num_clusters(),
            vocabulary.dim()
        )));
    }
    let assignment = AssignmentParams {
        weights,
        biases: biases.row(0).to_owned(),
        sharpness_init: meta.s,
    };
    let burst = BurstParams {
        a: meta.a,
        b: meta.b,
        p: meta.p,
        enabled: meta.burst_enabled,
    };
    let prepool = meta.prepool.then(|| PcaModel::load(dir, "prepool")).transpose()?;
    let whitening = meta.whitening.then(|| WhiteningModel::load(dir, "whitening")).transpose()?;
    let model = AggregationModel::new(vocabulary, assignment, burst, prepool, whitening)?;
    if model.config_hash != meta.config_hash {
        return Err(Error::Format(format!(
            "{}: stored config_hash {} does not match contents ({})",
            dir.display(),
            meta.config_hash,
            model.config_hash
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{fit_whitening, make_random_projection};
    use crate::rng;
    use ndarray::Array2;
    use rand_distr::{Distribution, StandardNormal};

    fn model(prepool: bool, whitening: bool) -> AggregationModel {
        let mut r = rng::seeded(5);
        let c = Array2::from_shape_simple_fn((3, 4), || StandardNormal.sample(&mut r));
        let vocab = Vocabulary {
            centroids: c,
            fitted_on_normalized: true,
            seed: 5,
            inertia: 0.1 + 0.2,
        };
        let pre = prepool.then(|| make_random_projection(6, 4, 1).unwrap());
        let mut m = AggregationModel::from_vocabulary(vocab, 7.3, BurstParams::default(), pre).unwrap();
        if whitening {
            let descs = Array2::from_shape_simple_fn((20, 12), || StandardNormal.sample(&mut r));
            m.whitening = Some(fit_whitening(&descs, 5, 1e-8).unwrap());
            m.rehash();
        }
        m
    }

    #[test]
    fn round_trip_is_exact() {
        for (pre, white) in [(false, false), (true, false), (true, true), (false, true)] {
            let m = model(pre, white);
            let dir = tempfile::tempdir().unwrap();
            save_bundle(&m, dir.path()).unwrap();
            let back = load_bundle(dir.path()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn overwriting_drops_stale_parts() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&model(true, true), dir.path()).unwrap();
        let plain = model(false, false);
        save_bundle(&plain, dir.path()).unwrap();
        assert!(!dir.path().join("prepool.json").exists());
        assert_eq!(load_bundle(dir.path()).unwrap(), plain);
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&model(false, false), dir.path()).unwrap();
        let path = dir.path().join("model.json");
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("\"p\": 1.0", "\"p\": 0.5")).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Format(_))));
    }
}
