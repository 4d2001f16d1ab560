//! End-to-end helpers that chain the individual modules: fitting a model
//! from feature sets, describing a dataset, and training a model on a
//! manifest.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationModel, BurstParams};
use crate::error::{Error, Result};
use crate::featureio::{self, GlobalDescriptor, LocalFeatureSet};
use crate::projection::{self, PcaModel, WhiteningModel};
use crate::retrieval::{self, DatasetManifest, RetrievalResult};
use crate::training::{self, OptimizerConfig, TrainOutcome, TrainableModel};
use crate::vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrepoolInit {
    Pca,
    Random,
}

/// Everything `fit_model` needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub clusters: usize,
    pub sample_count: usize,
    pub seed: u64,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    /// Projected dimension, or `None` to aggregate the raw features.
    pub prepool_dim: Option<usize>,
    pub prepool_init: PrepoolInit,
    pub sharpness: f64,
    pub burst: BurstParams,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            clusters: 64,
            sample_count: 50_000,
            seed: 0,
            kmeans_max_iters: vocabulary::DEFAULT_MAX_ITERS,
            kmeans_tol: vocabulary::DEFAULT_TOL,
            prepool_dim: None,
            prepool_init: PrepoolInit::Pca,
            sharpness: crate::aggregation::DEFAULT_SHARPNESS,
            burst: BurstParams::default(),
        }
    }
}

/// Sample features, fit the optional projection, fit the vocabulary in the
/// (projected, normalized) aggregation space and initialize the assignment.
///
/// At most `sample_count` features are drawn; smaller datasets are used in
/// full.
pub fn fit_model(sets: &[LocalFeatureSet], settings: &FitSettings) -> Result<AggregationModel> {
    let total: usize = sets.iter().map(LocalFeatureSet::len).sum();
    let count = settings.sample_count.min(total);
    let samples = featureio::sample_from_sets(sets, count, settings.seed)?;
    let d = samples.ncols();

    let prepool = match settings.prepool_dim {
        None => None,
        Some(out) => Some(match settings.prepool_init {
            PrepoolInit::Pca => projection::fit_pca(&samples, out)?,
            PrepoolInit::Random => projection::make_random_projection(d, out, settings.seed)?,
        }),
    };
    let projected = match &prepool {
        Some(p) => p.apply_affine(&samples),
        None => samples,
    };
    let unit = featureio::normalize_rows(&projected)
        .map_err(|row| Error::Data(format!("sampled feature {row} has zero norm after projection")))?;

    let vocab = vocabulary::kmeans_fit(
        &unit,
        settings.clusters,
        settings.seed,
        settings.kmeans_max_iters,
        settings.kmeans_tol,
    )?;
    AggregationModel::from_vocabulary(vocab, settings.sharpness, settings.burst, prepool)
}

/// Same vocabulary, assignment and projection; different burst settings.
pub fn with_burst(model: &AggregationModel, burst: BurstParams) -> Result<AggregationModel> {
    AggregationModel::new(
        model.vocabulary.clone(),
        model.assignment.clone(),
        burst,
        model.prepool.clone(),
        model.whitening.clone(),
    )
}

/// Aggregate every set.
pub fn describe<'a>(
    model: &AggregationModel,
    sets: impl IntoIterator<Item = &'a LocalFeatureSet>,
) -> Result<HashMap<String, GlobalDescriptor>> {
    sets.into_iter()
        .map(|s| aggregate(s, model).map(|d| (s.image_id().to_string(), d)))
        .collect()
}

/// Fit post-pool whitening on the pooled descriptors of `sets`. Any
/// whitening already attached to `model` is ignored.
pub fn fit_whitening_on(
    model: &AggregationModel,
    sets: &[LocalFeatureSet],
    out_dim: usize,
    epsilon: f64,
) -> Result<WhiteningModel> {
    let plain = AggregationModel {
        whitening: None,
        ..model.clone()
    };
    let mut stacked = ndarray::Array2::zeros((sets.len(), plain.pooled_len()));
    for (mut row, set) in stacked.outer_iter_mut().zip(sets) {
        row.assign(&aggregate(set, &plain)?.vector);
    }
    projection::fit_whitening(&stacked, out_dim, epsilon)
}

/// Describe the manifest's images and compute Recall@K.
pub fn evaluate_model(
    model: &AggregationModel,
    manifest: &DatasetManifest,
    sets: &BTreeMap<String, LocalFeatureSet>,
    ks: &[usize],
) -> Result<RetrievalResult> {
    let chosen = manifest
        .entries
        .iter()
        .map(|e| {
            sets.get(&e.image_id)
                .ok_or_else(|| Error::Data(format!("no features for {}", e.image_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let descs = describe(model, chosen)?;
    retrieval::evaluate(manifest, &descs, ks)
}

/// Triplet settings used to turn a manifest into training batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletSettings {
    pub batch_size: usize,
    pub negatives: usize,
    pub margin: f64,
}

impl Default for TripletSettings {
    fn default() -> Self {
        Self {
            batch_size: 4,
            negatives: 10,
            margin: training::DEFAULT_MARGIN,
        }
    }
}

/// Train every parameter group of `model` on triplets mined from `manifest`.
pub fn train_on_manifest(
    model: AggregationModel,
    manifest: &DatasetManifest,
    sets: &BTreeMap<String, LocalFeatureSet>,
    triplets: &TripletSettings,
    optimizer: &OptimizerConfig,
) -> Result<TrainOutcome> {
    let batches = training::make_batches(
        manifest,
        sets,
        triplets.batch_size,
        triplets.negatives,
        triplets.margin,
        optimizer.seed,
    )?;
    training::train(TrainableModel::all_trainable(model), &batches, optimizer)
}

/// Pre-pool model for a given input dimension (used by benchmarks).
pub fn projection_for(d: usize, out: usize, init: PrepoolInit, samples: &ndarray::Array2<f64>, seed: u64) -> Result<PcaModel> {
    match init {
        PrepoolInit::Pca => projection::fit_pca(samples, out),
        PrepoolInit::Random => projection::make_random_projection(d, out, seed),
    }
}
