//! Triplet-margin training of the aggregation layer.
//!
//! Gradients are derived by hand and flow from the loss back through global
//! normalization, per-cluster normalization, residual pooling, the burst
//! weights `w^-p`, the sigmoid soft count, the assignment softmax, row
//! normalization and finally the pre-pool affine map. Whitening is never
//! trained: the loss is computed on the pooled vector before whitening.
//!
//! Normalization Jacobians use `(I - v v^T) / |v|`; blocks caught by the zero
//! guard are treated as constants.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::aggregation::{self, AggregationModel, Forward, ZERO_GUARD};
use crate::error::{Error, Result};
use crate::featureio::LocalFeatureSet;
use crate::retrieval::{ground_truth_within_radius, DatasetManifest};
use crate::rng;

pub mod gradcheck;

pub const DEFAULT_MARGIN: f64 = 0.1;
pub const DEFAULT_LR: f64 = 1e-5;
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Learnable parameter groups, in flattening order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    A,
    B,
    P,
    Centroids,
    AssignWeights,
    AssignBiases,
    ProjRotation,
    ProjMean,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::A,
        ParamGroup::B,
        ParamGroup::P,
        ParamGroup::Centroids,
        ParamGroup::AssignWeights,
        ParamGroup::AssignBiases,
        ParamGroup::ProjRotation,
        ParamGroup::ProjMean,
    ];

    pub fn is_projection(self) -> bool {
        matches!(self, ParamGroup::ProjRotation | ParamGroup::ProjMean)
    }
}

/// An aggregation model plus the set of groups that training may change.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableModel {
    pub model: AggregationModel,
    trainable: BTreeSet<ParamGroup>,
}

impl TrainableModel {
    pub fn new(model: AggregationModel, trainable: impl IntoIterator<Item = ParamGroup>) -> Result<Self> {
        let trainable: BTreeSet<ParamGroup> = trainable.into_iter().collect();
        if model.prepool.is_none() {
            if let Some(g) = trainable.iter().find(|g| g.is_projection()) {
                return Err(Error::Config(format!("{g:?} is trainable but the model has no projection")));
            }
        }
        Ok(Self { model, trainable })
    }

    /// Every group the model has is trainable.
    pub fn all_trainable(model: AggregationModel) -> Self {
        let has_proj = model.prepool.is_some();
        let groups = ParamGroup::ALL
            .into_iter()
            .filter(|g| has_proj || !g.is_projection());
        Self::new(model, groups).expect("groups filtered to those present")
    }

    pub fn trainable(&self) -> &BTreeSet<ParamGroup> {
        &self.trainable
    }

    pub(crate) fn group_len(&self, g: ParamGroup) -> usize {
        let m = &self.model;
        match g {
            ParamGroup::A | ParamGroup::B | ParamGroup::P => 1,
            ParamGroup::Centroids => m.vocabulary.centroids.len(),
            ParamGroup::AssignWeights => m.assignment.weights.len(),
            ParamGroup::AssignBiases => m.assignment.biases.len(),
            ParamGroup::ProjRotation => m.prepool.as_ref().map_or(0, |p| p.rotation.len()),
            ParamGroup::ProjMean => m.prepool.as_ref().map_or(0, |p| p.mean.len()),
        }
    }

    pub fn num_params(&self) -> usize {
        self.trainable.iter().map(|&g| self.group_len(g)).sum()
    }

    /// Trainable parameters as one flat vector.
    pub fn flatten(&self) -> Vec<f64> {
        let m = &self.model;
        let mut out = Vec::with_capacity(self.num_params());
        for &g in &self.trainable {
            match g {
                ParamGroup::A => out.push(m.burst.a),
                ParamGroup::B => out.push(m.burst.b),
                ParamGroup::P => out.push(m.burst.p),
                ParamGroup::Centroids => out.extend(m.vocabulary.centroids.iter()),
                ParamGroup::AssignWeights => out.extend(m.assignment.weights.iter()),
                ParamGroup::AssignBiases => out.extend(m.assignment.biases.iter()),
                ParamGroup::ProjRotation => out.extend(m.prepool.as_ref().unwrap().rotation.iter()),
                ParamGroup::ProjMean => out.extend(m.prepool.as_ref().unwrap().mean.iter()),
            }
        }
        out
    }

    /// Inverse of [`TrainableModel::flatten`]. Leaves `config_hash` stale;
    /// call [`TrainableModel::into_model`] or `model.rehash()` afterwards.
    pub fn unflatten(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, model has {}",
                theta.len(),
                self.num_params()
            )));
        }
        let mut rest = theta;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        let fill = |dst: &mut dyn Iterator<Item = &mut f64>, src: &[f64]| {
            for (d, s) in dst.zip(src) {
                *d = *s;
            }
        };
        let groups: Vec<ParamGroup> = self.trainable.iter().copied().collect();
        for g in groups {
            let n = self.group_len(g);
            let src = take(n);
            let m = &mut self.model;
            match g {
                ParamGroup::A => m.burst.a = src[0],
                ParamGroup::B => m.burst.b = src[0],
                ParamGroup::P => m.burst.p = src[0],
                ParamGroup::Centroids => fill(&mut m.vocabulary.centroids.iter_mut(), src),
                ParamGroup::AssignWeights => fill(&mut m.assignment.weights.iter_mut(), src),
                ParamGroup::AssignBiases => fill(&mut m.assignment.biases.iter_mut(), src),
                ParamGroup::ProjRotation => fill(&mut m.prepool.as_mut().unwrap().rotation.iter_mut(), src),
                ParamGroup::ProjMean => fill(&mut m.prepool.as_mut().unwrap().mean.iter_mut(), src),
            }
        }
        Ok(())
    }

    pub fn into_model(mut self) -> AggregationModel {
        self.model.rehash();
        self.model
    }
}

/// One anchor with its positive and one or more negatives.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub anchor: LocalFeatureSet,
    pub positive: LocalFeatureSet,
    pub negatives: Vec<LocalFeatureSet>,
}

#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
    pub margin: f64,
}

impl TripletBatch {
    pub fn validate(&self) -> Result<()> {
        if self.triplets.is_empty() {
            return Err(Error::Config("empty triplet batch".into()));
        }
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        let d = self.triplets[0].anchor.dim();
        for t in &self.triplets {
            if t.negatives.is_empty() {
                return Err(Error::Config(format!("triplet {} has no negatives", t.anchor.image_id())));
            }
            let mut all = [&t.anchor, &t.positive].into_iter().chain(t.negatives.iter());
            if let Some(bad) = all.find(|s| s.dim() != d) {
                return Err(Error::Shape(format!("{} has dimension {}, expected {d}", bad.image_id(), bad.dim())));
            }
        }
        Ok(())
    }
}

fn euclid(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `sum_n max(0, |a - p| - |a - n| + margin)`.
pub fn triplet_loss(anchor: &Array1<f64>, positive: &Array1<f64>, negatives: &[Array1<f64>], margin: f64) -> Result<f64> {
    let len = anchor.len();
    if positive.len() != len || negatives.iter().any(|n| n.len() != len) {
        return Err(Error::Shape("triplet descriptors have different lengths".into()));
    }
    let dp = euclid(anchor, positive);
    Ok(negatives
        .iter()
        .map(|n| (dp - euclid(anchor, n) + margin).max(0.0))
        .sum())
}

/// Loss and its gradient with respect to the anchor, positive and negatives.
fn triplet_loss_grad(
    anchor: &Array1<f64>,
    positive: &Array1<f64>,
    negatives: &[Array1<f64>],
    margin: f64,
) -> (f64, Array1<f64>, Array1<f64>, Vec<Array1<f64>>) {
    let unit_diff = |x: &Array1<f64>, y: &Array1<f64>| {
        let d = x - y;
        let n = d.dot(&d).sqrt();
        if n < ZERO_GUARD {
            (n, Array1::zeros(d.len()))
        } else {
            (n, d / n)
        }
    };
    let (dp, up) = unit_diff(anchor, positive);
    let mut loss = 0.0;
    let mut ga = Array1::zeros(anchor.len());
    let mut gp = Array1::zeros(anchor.len());
    let mut gn = Vec::with_capacity(negatives.len());
    for n in negatives {
        let (dn, un) = unit_diff(anchor, n);
        let hinge = dp - dn + margin;
        if hinge > 0.0 {
            loss += hinge;
            ga = ga + &up - &un;
            gp = gp - &up;
            gn.push(un);
        } else {
            gn.push(Array1::zeros(anchor.len()));
        }
    }
    (loss, ga, gp, gn)
}

/// Pooled (pre-whitening) descriptor used by the loss.
fn pooled(set: &LocalFeatureSet, model: &AggregationModel) -> Result<Array1<f64>> {
    aggregation::forward(set, model, false).map(|f| f.pooled)
}

/// Mean triplet loss over the batch.
pub fn batch_loss(model: &AggregationModel, batch: &TripletBatch) -> Result<f64> {
    batch.validate()?;
    let mut total = 0.0;
    for t in &batch.triplets {
        let a = pooled(&t.anchor, model)?;
        let p = pooled(&t.positive, model)?;
        let ns = t.negatives.iter().map(|n| pooled(n, model)).collect::<Result<Vec<_>>>()?;
        total += triplet_loss(&a, &p, &ns, batch.margin)?;
    }
    Ok(total / batch.triplets.len() as f64)
}

/// Full-size gradient buffers for every group.
struct Grads {
    a: f64,
    b: f64,
    p: f64,
    centroids: Array2<f64>,
    weights: Array2<f64>,
    biases: Array1<f64>,
    rotation: Option<Array2<f64>>,
    mean: Option<Array1<f64>>,
}

impl Grads {
    fn zeros(m: &AggregationModel) -> Self {
        Self {
            a: 0.0,
            b: 0.0,
            p: 0.0,
            centroids: Array2::zeros(m.vocabulary.centroids.dim()),
            weights: Array2::zeros(m.assignment.weights.dim()),
            biases: Array1::zeros(m.assignment.biases.len()),
            rotation: m.prepool.as_ref().map(|p| Array2::zeros(p.rotation.dim())),
            mean: m.prepool.as_ref().map(|p| Array1::zeros(p.mean.len())),
        }
    }

    fn flatten(&self, tm: &TrainableModel) -> Vec<f64> {
        let mut out = Vec::with_capacity(tm.num_params());
        for &g in tm.trainable() {
            match g {
                ParamGroup::A => out.push(self.a),
                ParamGroup::B => out.push(self.b),
                ParamGroup::P => out.push(self.p),
                ParamGroup::Centroids => out.extend(self.centroids.iter()),
                ParamGroup::AssignWeights => out.extend(self.weights.iter()),
                ParamGroup::AssignBiases => out.extend(self.biases.iter()),
                ParamGroup::ProjRotation => out.extend(self.rotation.as_ref().unwrap().iter()),
                ParamGroup::ProjMean => out.extend(self.mean.as_ref().unwrap().iter()),
            }
        }
        out
    }
}

fn check_finite(stage: &'static str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(stage, "non-finite gradient"));
    }
    Ok(())
}

/// Accumulate `d loss / d params` for one image given `d loss / d pooled`.
fn backprop_image(
    fwd: &Forward,
    model: &AggregationModel,
    g_out: &Array1<f64>,
    scale: f64,
    grads: &mut Grads,
) -> Result<()> {
    let (c, dl) = fwd.blocks.dim();

    // Global normalization.
    let proj = fwd.pooled.dot(g_out);
    let g_flat = (g_out - &(&fwd.pooled * proj)) / fwd.global_norm;
    let g_blocks = g_flat
        .into_shape_with_order((c, dl))
        .expect("pooled length is C * D'");

    // Per-cluster normalization.
    let mut g_v = Array2::<f64>::zeros((c, dl));
    for k in 0..c {
        let nrm = fwd.block_norms[k];
        if nrm < ZERO_GUARD {
            continue;
        }
        let bn = fwd.blocks.row(k);
        let gb = g_blocks.row(k);
        let dot = bn.dot(&gb);
        let mut row = g_v.row_mut(k);
        Zip::from(&mut row).and(&gb).and(&bn).for_each(|o, &g, &b| *o = (g - b * dot) / nrm);
    }
    check_finite("intra-normalization", g_v.iter().copied())?;

    // V_k = sum_i weight_ik x_i - mass_k c_k
    let centroids = &model.vocabulary.centroids;
    let mass = fwd.weight.sum_axis(Axis(0));
    for k in 0..c {
        grads.centroids.row_mut(k).scaled_add(-mass[k] * scale, &g_v.row(k));
    }
    let gv_dot_c: Array1<f64> = g_v
        .outer_iter()
        .zip(centroids.outer_iter())
        .map(|(g, ck)| g.dot(&ck))
        .collect();
    let g_weight = fwd.x.dot(&g_v.t()) - &gv_dot_c;
    let mut g_x = fwd.weight.dot(&g_v);

    // weight = alpha * u
    let u_col = fwd.u.view().insert_axis(Axis(1));
    let g_alpha = &g_weight * &u_col;
    let g_u = (&g_weight * &fwd.alpha).sum_axis(Axis(1));

    let burst = model.burst;
    if burst.enabled {
        let gram = fwd.gram.as_ref().expect("forward kept the Gram matrix");
        let sig = fwd.sig.as_ref().expect("forward kept the sigmoid matrix");
        let mut g_p = 0.0;
        let mut g_w = Array1::zeros(fwd.w.len());
        for i in 0..fwd.w.len() {
            let (w, u) = (fwd.w[i], fwd.u[i]);
            g_p += g_u[i] * (-w.ln() * u);
            g_w[i] = g_u[i] * (-burst.p * u / w);
        }
        // H_ij = g_w_i * s_ij (1 - s_ij)
        let mut h = sig.mapv(|s| s * (1.0 - s));
        h *= &g_w.view().insert_axis(Axis(1));
        let g_a = (&h * gram).sum();
        let g_b = h.sum();
        let g_gram = &h * burst.a;
        g_x = g_x + (&g_gram + &g_gram.t()).dot(&fwd.x);
        grads.a += g_a * scale;
        grads.b += g_b * scale;
        grads.p += g_p * scale;
        check_finite("soft count", [g_a, g_b, g_p])?;
    }

    // Softmax over clusters.
    let inner = (&g_alpha * &fwd.alpha).sum_axis(Axis(1));
    let g_logits = &fwd.alpha * &(&g_alpha - &inner.view().insert_axis(Axis(1)));
    grads.weights.scaled_add(scale, &g_logits.t().dot(&fwd.x));
    grads.biases.scaled_add(scale, &g_logits.sum_axis(Axis(0)));
    g_x = g_x + g_logits.dot(&model.assignment.weights);
    check_finite("soft assignment", g_x.iter().copied())?;

    // Row normalization and projection.
    if let Some(pre) = &model.prepool {
        let mut g_z = g_x;
        for ((mut gz, x), &n) in g_z
            .axis_iter_mut(Axis(0))
            .zip(fwd.x.outer_iter())
            .zip(fwd.row_norms.iter())
        {
            let dot = x.dot(&gz);
            Zip::from(&mut gz).and(&x).for_each(|g, &xv| *g = (*g - xv * dot) / n);
        }
        let centered = fwd.centered.as_ref().expect("forward kept centered inputs");
        let g_r = centered.t().dot(&g_z);
        let g_m = -pre.rotation.dot(&g_z.sum_axis(Axis(0)));
        check_finite("pre-pool projection", g_r.iter().chain(g_m.iter()).copied())?;
        grads.rotation.as_mut().unwrap().scaled_add(scale, &g_r);
        grads.mean.as_mut().unwrap().scaled_add(scale, &g_m);
    }
    Ok(())
}

/// Mean batch loss and its analytic gradient, aligned with
/// [`TrainableModel::flatten`].
pub fn backward(tm: &TrainableModel, batch: &TripletBatch) -> Result<(f64, Vec<f64>)> {
    batch.validate()?;
    let model = &tm.model;
    let mut grads = Grads::zeros(model);
    let scale = 1.0 / batch.triplets.len() as f64;
    let mut total = 0.0;
    for t in &batch.triplets {
        let fa = aggregation::forward(&t.anchor, model, true)?;
        let fp = aggregation::forward(&t.positive, model, true)?;
        let fns = t
            .negatives
            .iter()
            .map(|n| aggregation::forward(n, model, true))
            .collect::<Result<Vec<_>>>()?;
        let negs: Vec<Array1<f64>> = fns.iter().map(|f| f.pooled.clone()).collect();
        let (loss, ga, gp, gn) = triplet_loss_grad(&fa.pooled, &fp.pooled, &negs, batch.margin);
        if !loss.is_finite() {
            return Err(Error::numerical("triplet loss", format!("loss = {loss}")));
        }
        total += loss;
        backprop_image(&fa, model, &ga, scale, &mut grads)?;
        backprop_image(&fp, model, &gp, scale, &mut grads)?;
        for (f, g) in fns.iter().zip(&gn) {
            backprop_image(f, model, g, scale, &mut grads)?;
        }
    }
    Ok((total * scale, grads.flatten(tm)))
}

/// Central differences of `f` at `theta`.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        work[i] = theta[i] + h;
        let plus = f(&work)?;
        work[i] = theta[i] - h;
        let minus = f(&work)?;
        work[i] = theta[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Finite-difference gradient of [`batch_loss`] over the trainable parameters.
pub fn finite_diff_grad(tm: &TrainableModel, batch: &TripletBatch, h: f64) -> Result<Vec<f64>> {
    let mut probe = tm.clone();
    let theta = tm.flatten();
    central_difference(
        |t| {
            probe.unflatten(t)?;
            batch_loss(&probe.model, batch)
        },
        &theta,
        h,
    )
}

/// Elementwise relative error `|g - r| / max(|g|, |r|, floor)`.
pub fn max_relative_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(g, r)| (g - r).abs() / g.abs().max(r.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            steps: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub a: f64,
    pub b: f64,
    pub p: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AggregationModel,
    pub trace: Vec<TraceRow>,
}

/// Plain gradient descent with a fixed learning rate. Batches are visited
/// in a seeded order, reshuffled every pass. Each trace row holds the loss
/// evaluated before that step's update.
pub fn train(mut tm: TrainableModel, batches: &[TripletBatch], cfg: &OptimizerConfig) -> Result<TrainOutcome> {
    if batches.is_empty() {
        return Err(Error::Config("training needs at least one batch".into()));
    }
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let mut rng = rng::seeded(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut theta = tm.flatten();

    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..batches.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let batch = &batches[order.pop().unwrap()];
        let (loss, grad) = backward(&tm, batch).map_err(|e| match e {
            Error::Numerical { stage, detail } => Error::Numerical {
                stage,
                detail: format!("step {step}: {detail}"),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::numerical("training", format!("step {step}: loss = {loss}")));
        }
        let burst = tm.model.burst;
        trace.push(TraceRow {
            step,
            loss,
            a: burst.a,
            b: burst.b,
            p: burst.p,
        });
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= cfg.lr * g;
        }
        tm.unflatten(&theta)?;
        if tm.model.burst.validate().is_err() {
            return Err(Error::numerical(
                "training",
                format!("step {step}: burst parameters left the valid region: {:?}", tm.model.burst),
            ));
        }
    }
    Ok(TrainOutcome {
        model: tm.into_model(),
        trace,
    })
}

/// `step,loss,a,b,p` with a header row.
pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,loss,a,b,p").unwrap();
    for r in trace {
        writeln!(out, "{},{:e},{:e},{:e},{:e}", r.step, r.loss, r.a, r.b, r.p).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Triplets from a manifest: every query with an in-radius reference becomes
/// an anchor, its nearest in-radius reference the positive, and
/// `n_negatives` references outside the radius (sampled without replacement)
/// the negatives. Triplets are shuffled and chunked into batches.
pub fn make_batches(
    manifest: &DatasetManifest,
    sets: &BTreeMap<String, LocalFeatureSet>,
    batch_size: usize,
    n_negatives: usize,
    margin: f64,
    seed: u64,
) -> Result<Vec<TripletBatch>> {
    if batch_size == 0 || n_negatives == 0 {
        return Err(Error::Config("batch size and negative count must be positive".into()));
    }
    let fetch = |id: &str| {
        sets.get(id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no features loaded for {id}")))
    };
    let gt = ground_truth_within_radius(manifest);
    let refs: Vec<_> = manifest.references().collect();
    let mut rng = rng::seeded(seed);
    let mut triplets = Vec::new();
    for q in manifest.queries() {
        let Some(pos) = gt.positives.get(&q.image_id) else {
            continue;
        };
        let positive = refs
            .iter()
            .filter(|r| pos.contains(&r.image_id))
            .min_by(|a, b| {
                let da = (q.x_m - a.x_m).hypot(q.y_m - a.y_m);
                let db = (q.x_m - b.x_m).hypot(q.y_m - b.y_m);
                da.total_cmp(&db).then_with(|| a.image_id.cmp(&b.image_id))
            })
            .expect("positive set is non-empty");
        let pool: Vec<_> = refs.iter().filter(|r| !pos.contains(&r.image_id)).collect();
        if pool.len() < n_negatives {
            return Err(Error::Data(format!(
                "query {} has only {} negatives, {n_negatives} requested",
                q.image_id,
                pool.len()
            )));
        }
        let negatives = pool
            .choose_multiple(&mut rng, n_negatives)
            .map(|r| fetch(&r.image_id))
            .collect::<Result<Vec<_>>>()?;
        triplets.push(Triplet {
            anchor: fetch(&q.image_id)?,
            positive: fetch(&positive.image_id)?,
            negatives,
        });
    }
    if triplets.is_empty() {
        return Err(Error::Data("no query has an in-radius reference".into()));
    }
    triplets.shuffle(&mut rng);
    Ok(triplets
        .chunks(batch_size)
        .map(|c| TripletBatch {
            triplets: c.to_vec(),
            margin,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::BurstParams;
    use crate::vocabulary::Vocabulary;
    use ndarray::array;

    #[test]
    fn loss_hand_cases() {
        let a = array![1.0, 0.0];
        let p = array![0.0, 1.0];
        let n = array![-1.0, 0.0];
        assert_eq!(triplet_loss(&a, &p, &[n], 0.1).unwrap(), 0.0);
        assert_eq!(triplet_loss(&a, &a, &[array![0.0, 1.0]], 0.1).unwrap(), 0.0);
        let l = triplet_loss(&a, &p, &[p.clone(), p.clone()], 0.1).unwrap();
        assert!((l - 0.2).abs() < 1e-15);
        assert!(matches!(triplet_loss(&a, &array![1.0], &[p], 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn quadratic_central_difference() {
        let g = central_difference(|t| Ok(t[0] * t[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        assert!(matches!(central_difference(|t| Ok(t[0]), &[1.0], 0.0), Err(Error::Config(_))));
    }

    fn tiny_model(enabled: bool) -> AggregationModel {
        let vocab = Vocabulary {
            centroids: array![[1.0, 0.0, 0.0], [0.0, 0.8, 0.6]],
            fitted_on_normalized: true,
            seed: 0,
            inertia: 0.0,
        };
        let burst = BurstParams { enabled, ..BurstParams::default() };
        AggregationModel::from_vocabulary(vocab, 3.0, burst, None).unwrap()
    }

    fn tiny_batch() -> TripletBatch {
        let s = |id: &str, m: Array2<f64>| LocalFeatureSet::new(id, m).unwrap();
        TripletBatch {
            triplets: vec![Triplet {
                anchor: s("a", array![[1.0, 0.2, 0.1], [0.1, 1.0, 0.3], [0.9, 0.1, 0.2]]),
                positive: s("p", array![[0.1, 0.9, 0.5], [1.0, 0.3, 0.0]]),
                negatives: vec![s("n", array![[0.2, 0.9, 0.1], [0.3, 0.2, 1.0]])],
            }],
            margin: 0.5,
        }
    }

    #[test]
    fn frozen_model_has_empty_gradient() {
        let tm = TrainableModel::new(tiny_model(true), []).unwrap();
        let (_, g) = backward(&tm, &tiny_batch()).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn p_gradient_is_zero_when_disabled() {
        let tm = TrainableModel::new(tiny_model(false), [ParamGroup::P, ParamGroup::A]).unwrap();
        let (_, g) = backward(&tm, &tiny_batch()).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let tm = TrainableModel::all_trainable(tiny_model(true));
        let batch = tiny_batch();
        let (loss, g) = backward(&tm, &batch).unwrap();
        assert!(loss > 0.0);
        let fd = finite_diff_grad(&tm, &batch, 1e-5).unwrap();
        let err = max_relative_error(&g, &fd, 1e-6);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn flatten_round_trip() {
        let mut tm = TrainableModel::all_trainable(tiny_model(true));
        let theta = tm.flatten();
        assert_eq!(theta.len(), 3 + 6 + 6 + 2);
        let shifted: Vec<f64> = theta.iter().map(|v| v + 0.25).collect();
        tm.unflatten(&shifted).unwrap();
        assert_eq!(tm.flatten(), shifted);
        assert!(tm.unflatten(&theta[1..]).is_err());
    }

    #[test]
    fn projection_groups_need_a_projection() {
        assert!(TrainableModel::new(tiny_model(true), [ParamGroup::ProjMean]).is_err());
    }

    #[test]
    fn frozen_training_keeps_parameters_and_loss() {
        let model = tiny_model(true);
        let tm = TrainableModel::new(model.clone(), []).unwrap();
        let out = train(tm, &[tiny_batch()], &OptimizerConfig { lr: 0.1, steps: 5, seed: 1 }).unwrap();
        assert_eq!(out.model, model);
        assert!(out.trace.windows(2).all(|w| w[0].loss == w[1].loss));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = OptimizerConfig { lr: 0.05, steps: 30, seed: 4 };
        let run = || train(TrainableModel::all_trainable(tiny_model(true)), &[tiny_batch()], &cfg).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.trace, b.trace);
        assert!(a.trace.last().unwrap().loss < a.trace[0].loss);
    }
}
