//! Randomized comparison of the analytic gradient against central
//! differences on small models.

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{backward, batch_loss, central_difference, euclid, pooled, ParamGroup, TrainableModel, Triplet, TripletBatch};
use crate::aggregation::{AggregationModel, BurstParams};
use crate::error::Result;
use crate::featureio::LocalFeatureSet;
use crate::projection::{InitKind, PcaModel};
use crate::rng;
use crate::vocabulary::Vocabulary;

/// Hinges closer to zero than this are treated as kinks; such configs are
/// redrawn because central differences straddle the kink.
const KINK_GAP: f64 = 1e-3;

pub const DEFAULT_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero components.
pub const DEFAULT_ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CheckCase {
    pub model: TrainableModel,
    pub batch: TripletBatch,
}

fn gaussian(r: &mut rng::Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || -> f64 { StandardNormal.sample(r) })
}

fn features(r: &mut rng::Rng, id: &str, d: usize) -> LocalFeatureSet {
    let n = r.random_range(2..=6);
    let x = gaussian(r, n, d);
    crate::featureio::l2_normalize_rows(&LocalFeatureSet::new(id, x).expect("gaussian rows are finite"))
        .expect("gaussian rows are nonzero")
}

/// Draw one small random configuration. Every case has a pre-pool
/// projection and the burst weighting enabled, so all parameter groups are
/// live.
pub fn random_case(seed: u64) -> Result<CheckCase> {
    let mut r = rng::seeded(seed);
    loop {
        let d = r.random_range(3..=6);
        let dp = r.random_range(2..=d);
        let c = r.random_range(2..=4);
        let centroids = gaussian(&mut r, c, dp) * 0.5;
        let vocab = Vocabulary {
            centroids,
            fitted_on_normalized: true,
            seed,
            inertia: 0.0,
        };
        let prepool = PcaModel {
            mean: Array1::from_shape_simple_fn(d, || -> f64 { 0.2 * Distribution::<f64>::sample(&StandardNormal, &mut r) }),
            rotation: gaussian(&mut r, d, dp) / (d as f64).sqrt(),
            eigenvalues: Array1::zeros(dp),
            init_kind: InitKind::RandomLinear,
        };
        let burst = BurstParams {
            a: r.random_range(1.0..8.0),
            b: r.random_range(-4.0..0.0),
            p: r.random_range(0.3..1.5),
            enabled: true,
        };
        let s = r.random_range(1.0..4.0);
        let model = AggregationModel::from_vocabulary(vocab, s, burst, Some(prepool))?;
        let n_neg = r.random_range(1..=3);
        let n_trip = r.random_range(1..=2);
        let triplets: Vec<_> = (0..n_trip)
            .map(|t| Triplet {
                anchor: features(&mut r, &format!("a{t}"), d),
                positive: features(&mut r, &format!("p{t}"), d),
                negatives: (0..n_neg).map(|k| features(&mut r, &format!("n{t}{k}"), d)).collect(),
            })
            .collect();
        let batch = TripletBatch {
            triplets,
            margin: r.random_range(0.2..1.0),
        };
        if !suitable(&model, &batch) {
            continue;
        }
        return Ok(CheckCase {
            model: TrainableModel::all_trainable(model),
            batch,
        });
    }
}

/// At least one active hinge and none within `KINK_GAP` of zero.
fn suitable(model: &AggregationModel, batch: &TripletBatch) -> bool {
    let check = || -> Result<bool> {
        let mut active = false;
        for t in &batch.triplets {
            let a = pooled(&t.anchor, model)?;
            let dp = euclid(&a, &pooled(&t.positive, model)?);
            for n in &t.negatives {
                let hinge = dp - euclid(&a, &pooled(n, model)?) + batch.margin;
                if hinge.abs() < KINK_GAP {
                    return Ok(false);
                }
                active |= hinge > 0.0;
            }
        }
        Ok(active)
    };
    check().unwrap_or(false)
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub seed: u64,
    pub params: usize,
    pub loss: f64,
    pub max_rel_error: f64,
    /// Worst relative error per parameter group.
    pub per_group: Vec<(ParamGroup, f64)>,
    pub passed: bool,
}

/// Per-component `|g - r| / max(|g|, |r|, floor)`.
fn rel_errors(g: &[f64], r: &[f64], floor: f64) -> Vec<f64> {
    g.iter()
        .zip(r)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .collect()
}

pub fn check_case(seed: u64, case: &CheckCase, h: f64, tol: f64, floor: f64) -> Result<CheckResult> {
    let (loss, g) = backward(&case.model, &case.batch)?;
    let mut probe = case.model.clone();
    let fd = central_difference(
        |t| {
            probe.unflatten(t)?;
            batch_loss(&probe.model, &case.batch)
        },
        &case.model.flatten(),
        h,
    )?;
    let errs = rel_errors(&g, &fd, floor);
    let mut per_group = Vec::new();
    let mut offset = 0;
    for grp in ParamGroup::ALL {
        if !case.model.trainable().contains(&grp) {
            continue;
        }
        let len = case.model.group_len(grp);
        let worst = errs[offset..offset + len].iter().copied().fold(0.0, f64::max);
        per_group.push((grp, worst));
        offset += len;
    }
    let max_rel_error = errs.iter().copied().fold(0.0, f64::max);
    Ok(CheckResult {
        seed,
        params: g.len(),
        loss,
        max_rel_error,
        per_group,
        passed: max_rel_error <= tol,
    })
}

/// Run `count` random cases with seeds `base_seed..base_seed + count`.
pub fn run_suite(count: usize, base_seed: u64, h: f64, tol: f64, floor: f64) -> Result<Vec<CheckResult>> {
    (0..count as u64)
        .map(|i| {
            let seed = base_seed + i;
            check_case(seed, &random_case(seed)?, h, tol, floor)
        })
        .collect()
}
