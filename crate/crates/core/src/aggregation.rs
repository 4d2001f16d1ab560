//! Burst-aware VLAD pooling.
//!
//! For L2-normalized local features `x_i` the layer computes
//!
//! ```text
//! alpha_ik = softmax_k(W_k . x_i + beta_k)
//! w_i      = sum_j sigmoid(a * (x_i . x_j) + b)
//! V_k      = sum_i alpha_ik / w_i^p * (x_i - c_k)
//! ```
//!
//! then normalizes every `V_k`, flattens, and normalizes the result. With the
//! burst weighting disabled (or `p = 0`) this is plain NetVLAD.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featureio::{self, GlobalDescriptor, LocalFeatureSet};
use crate::projection::{self, PcaModel, WhiteningModel};
use crate::vocabulary::Vocabulary;

pub const DEFAULT_A: f64 = 10.0;
pub const DEFAULT_B: f64 = -5.0;
pub const DEFAULT_P: f64 = 1.0;
pub const DEFAULT_SHARPNESS: f64 = 100.0;

/// Blocks with a norm below this are left at zero instead of normalized.
pub const ZERO_GUARD: f64 = 1e-12;

/// Lower bound on the self-similarity term `sigmoid(a + b)`.
pub const SELF_TERM_FLOOR: f64 = 1e-12;

/// Tolerance used to decide whether input rows are unit length.
const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentParams {
    /// `C x D'`, one linear filter per cluster.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub sharpness_init: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstParams {
    pub a: f64,
    pub b: f64,
    pub p: f64,
    pub enabled: bool,
}

impl Default for BurstParams {
    fn default() -> Self {
        Self {
            a: DEFAULT_A,
            b: DEFAULT_B,
            p: DEFAULT_P,
            enabled: true,
        }
    }
}

impl BurstParams {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite() && self.p.is_finite()) {
            return Err(Error::Config(format!("burst parameters must be finite: {self:?}")));
        }
        if self.enabled && sigmoid(self.a + self.b) < SELF_TERM_FLOOR {
            return Err(Error::Config(format!(
                "sigmoid(a + b) = {:e} is below {SELF_TERM_FLOOR:e}; soft counts would vanish",
                sigmoid(self.a + self.b)
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Assignment filters that reproduce nearest-centroid soft assignment:
/// `W_k = 2 s c_k`, `beta_k = -s |c_k|^2`.
pub fn init_assignment_from_vocab(vocab: &Vocabulary, s: f64) -> Result<AssignmentParams> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Config(format!("assignment sharpness must be positive, got {s}")));
    }
    let weights = &vocab.centroids * (2.0 * s);
    let biases = vocab.centroids.map_axis(Axis(1), |c| -s * c.dot(&c));
    Ok(AssignmentParams {
        weights,
        biases,
        sharpness_init: s,
    })
}

fn logits(x: ArrayView2<'_, f64>, params: &AssignmentParams) -> Array2<f64> {
    x.dot(&params.weights.t()) + &params.biases
}

/// Row-wise softmax with max subtraction, in place.
pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn check_unit_rows(features: &LocalFeatureSet) -> Result<()> {
    if features.normalized() {
        return Ok(());
    }
    for (i, row) in features.features().outer_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!(
                "{}: row {i} has norm {norm}, expected unit-normalized features",
                features.image_id()
            )));
        }
    }
    Ok(())
}

/// Soft assignment `alpha` (`N x C`), softmax over clusters.
pub fn soft_assign(features: &LocalFeatureSet, params: &AssignmentParams) -> Result<Array2<f64>> {
    if features.dim() != params.weights.ncols() {
        return Err(Error::Shape(format!(
            "features have dimension {}, assignment filters {}",
            features.dim(),
            params.weights.ncols()
        )));
    }
    if params.biases.len() != params.weights.nrows() {
        return Err(Error::Shape("assignment weights and biases disagree on C".into()));
    }
    let mut alpha = logits(features.features().view(), params);
    softmax_rows(&mut alpha);
    Ok(alpha)
}

/// Soft count `w_i = sum_j sigmoid(a d_ij + b)` over the full Gram matrix,
/// self term included.
pub fn soft_count(features: &LocalFeatureSet, burst: &BurstParams) -> Result<Array1<f64>> {
    check_unit_rows(features)?;
    let x = features.features();
    let gram = x.dot(&x.t());
    Ok(soft_count_from_gram(&gram, burst.a, burst.b))
}

fn soft_count_from_gram(gram: &Array2<f64>, a: f64, b: f64) -> Array1<f64> {
    pair_sigmoids(gram, a, b, false).1
}

/// `w_i = sum_j sigmoid(a g_ij + b)` using only the upper triangle of the
/// symmetric Gram matrix, optionally also returning the full sigmoid matrix.
/// Both outputs are bit-identical whether or not the matrix is kept.
fn pair_sigmoids(gram: &Array2<f64>, a: f64, b: f64, keep: bool) -> (Option<Array2<f64>>, Array1<f64>) {
    let n = gram.nrows();
    let mut w = Array1::<f64>::zeros(n);
    let mut sig = keep.then(|| Array2::<f64>::zeros((n, n)));
    for i in 0..n {
        let row = gram.row(i);
        let mut acc = 0.0;
        for j in i..n {
            let s = sigmoid(a * row[j] + b);
            acc += s;
            if j > i {
                w[j] += s;
            }
            if let Some(m) = sig.as_mut() {
                m[[i, j]] = s;
                m[[j, i]] = s;
            }
        }
        w[i] += acc;
    }
    (sig, w)
}

/// Everything needed to describe one aggregation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationModel {
    pub vocabulary: Vocabulary,
    pub assignment: AssignmentParams,
    pub burst: BurstParams,
    pub prepool: Option<PcaModel>,
    pub whitening: Option<WhiteningModel>,
    pub config_hash: String,
}

impl AggregationModel {
    /// Assemble and validate a model, computing its hash.
    pub fn new(
        vocabulary: Vocabulary,
        assignment: AssignmentParams,
        burst: BurstParams,
        prepool: Option<PcaModel>,
        whitening: Option<WhiteningModel>,
    ) -> Result<Self> {
        let mut model = Self {
            vocabulary,
            assignment,
            burst,
            prepool,
            whitening,
            config_hash: String::new(),
        };
        model.validate()?;
        model.rehash();
        Ok(model)
    }

    /// Vocabulary-initialized model without whitening.
    pub fn from_vocabulary(
        vocabulary: Vocabulary,
        sharpness: f64,
        burst: BurstParams,
        prepool: Option<PcaModel>,
    ) -> Result<Self> {
        let assignment = init_assignment_from_vocab(&vocabulary, sharpness)?;
        Self::new(vocabulary, assignment, burst, prepool, None)
    }

    pub fn num_clusters(&self) -> usize {
        self.vocabulary.num_clusters()
    }

    /// Dimension of the features entering the layer.
    pub fn input_dim(&self) -> usize {
        self.prepool.as_ref().map_or(self.local_dim(), |p| p.in_dim())
    }

    /// Dimension after the optional pre-pool projection.
    pub fn local_dim(&self) -> usize {
        self.vocabulary.dim()
    }

    /// Length of the pooled vector before whitening.
    pub fn pooled_len(&self) -> usize {
        self.num_clusters() * self.local_dim()
    }

    pub fn output_len(&self) -> usize {
        self.whitening.as_ref().map_or(self.pooled_len(), |w| w.out_dim())
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_clusters();
        let d = self.local_dim();
        if c < 2 {
            return Err(Error::Config(format!("need at least 2 clusters, got {c}")));
        }
        if self.assignment.weights.dim() != (c, d) || self.assignment.biases.len() != c {
            return Err(Error::Shape(format!(
                "assignment is {:?} + {}, vocabulary is {c}x{d}",
                self.assignment.weights.dim(),
                self.assignment.biases.len()
            )));
        }
        if let Some(p) = &self.prepool {
            if p.out_dim() != d || p.mean.len() != p.in_dim() {
                return Err(Error::Shape(format!(
                    "projection maps {} -> {}, vocabulary dimension is {d}",
                    p.in_dim(),
                    p.out_dim()
                )));
            }
        }
        if let Some(w) = &self.whitening {
            if w.in_dim() != c * d || w.mean.len() != c * d || w.eigenvalues.len() != w.out_dim() {
                return Err(Error::Shape(format!(
                    "whitening expects {} inputs, pooled vector has {}",
                    w.in_dim(),
                    c * d
                )));
            }
        }
        let finite = |m: &Array2<f64>| m.iter().all(|v| v.is_finite());
        if !finite(&self.assignment.weights) || !self.assignment.biases.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("assignment parameters must be finite".into()));
        }
        self.burst.validate()
    }

    /// Recompute `config_hash` from the current parameters.
    pub fn rehash(&mut self) {
        self.config_hash = self.compute_hash();
    }

    /// SHA-256 over every parameter's bit pattern, as 16 hex digits.
    pub fn compute_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |tag: &str, vals: &mut dyn Iterator<Item = f64>| {
            h.update(tag.as_bytes());
            for v in vals {
                h.update(v.to_bits().to_le_bytes());
            }
        };
        let v = &self.vocabulary;
        put(
            "vocab",
            &mut [v.num_clusters() as f64, v.dim() as f64].into_iter().chain(v.centroids.iter().copied()),
        );
        put("assign.w", &mut self.assignment.weights.iter().copied());
        put("assign.b", &mut self.assignment.biases.iter().copied());
        put("assign.s", &mut std::iter::once(self.assignment.sharpness_init));
        let burst = self.burst;
        put(
            "burst",
            &mut [burst.a, burst.b, burst.p, if burst.enabled { 1.0 } else { 0.0 }].into_iter(),
        );
        if let Some(p) = &self.prepool {
            put("prepool.kind", &mut std::iter::once(p.init_kind as u8 as f64));
            put("prepool.m", &mut p.mean.iter().copied());
            put(
                "prepool.r",
                &mut [p.in_dim() as f64, p.out_dim() as f64].into_iter().chain(p.rotation.iter().copied()),
            );
            put("prepool.l", &mut p.eigenvalues.iter().copied());
        }
        if let Some(w) = &self.whitening {
            put("white.m", &mut w.mean.iter().copied());
            put(
                "white.r",
                &mut [w.in_dim() as f64, w.out_dim() as f64].into_iter().chain(w.rotation.iter().copied()),
            );
            put("white.l", &mut w.eigenvalues.iter().copied());
            put("white.e", &mut std::iter::once(w.epsilon));
        }
        let digest = h.finalize();
        hex::encode(&digest[..8])
    }
}

/// Intermediate values of one forward pass. Training keeps the optional
/// fields for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    /// `X - m` when a projection is present and intermediates are kept.
    pub centered: Option<Array2<f64>>,
    /// Norms of the rows before normalization (projected rows if projecting).
    pub row_norms: Array1<f64>,
    /// Normalized local features, `N x D'`.
    pub x: Array2<f64>,
    pub alpha: Array2<f64>,
    pub gram: Option<Array2<f64>>,
    pub sig: Option<Array2<f64>>,
    pub w: Array1<f64>,
    /// `w^-p`, or ones when burst weighting is off.
    pub u: Array1<f64>,
    /// `alpha * u`
    pub weight: Array2<f64>,
    /// Residual sums `V` before any normalization, `C x D'`.
    pub residuals: Array2<f64>,
    pub block_norms: Array1<f64>,
    /// Intra-normalized blocks, `C x D'`.
    pub blocks: Array2<f64>,
    pub global_norm: f64,
    /// Flattened, globally normalized pooled vector (pre-whitening).
    pub pooled: Array1<f64>,
}

pub(crate) fn forward(features: &LocalFeatureSet, model: &AggregationModel, keep: bool) -> Result<Forward> {
    let id = features.image_id();
    if features.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "{id}: features have dimension {}, model expects {}",
            features.dim(),
            model.input_dim()
        )));
    }

    let (centered, z) = match &model.prepool {
        Some(p) if keep => {
            let centered = features.features() - &p.mean;
            let z = centered.dot(&p.rotation);
            (Some(centered), z)
        }
        Some(p) => {
            let mut z = features.features().dot(&p.rotation);
            z -= &p.mean.dot(&p.rotation);
            (None, z)
        }
        None => (None, features.features().clone()),
    };
    let row_norms: Array1<f64> = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = row_norms.iter().position(|&n| !(n >= featureio::ZERO_ROW_NORM)) {
        return Err(if model.prepool.is_some() {
            Error::Data(format!("{id}: row {i} projects to the zero vector"))
        } else {
            Error::Data(format!("{id}: row {i} has zero norm"))
        });
    }
    let mut x = z;
    for (mut row, &n) in x.axis_iter_mut(Axis(0)).zip(row_norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }

    let mut alpha = logits(x.view(), &model.assignment);
    softmax_rows(&mut alpha);
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("soft assignment", format!("{id}: non-finite softmax")));
    }

    let burst = model.burst;
    let n = x.nrows();
    let (gram, sig, w, u) = if burst.enabled {
        let gram = x.dot(&x.t());
        let (sig, w) = pair_sigmoids(&gram, burst.a, burst.b, keep);
        if let Some(i) = w.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::numerical("soft count", format!("{id}: w[{i}] = {}", w[i])));
        }
        let u = w.mapv(|v| (-burst.p * v.ln()).exp());
        if let Some(i) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical("burst weight", format!("{id}: w[{i}]^-p = {}", u[i])));
        }
        (keep.then_some(gram), sig, w, u)
    } else {
        (None, None, Array1::ones(n), Array1::ones(n))
    };

    let weight = &alpha * &u.view().insert_axis(Axis(1));
    let mass = weight.sum_axis(Axis(0));
    let mut v = weight.t().dot(&x);
    for (mut row, (&m, c)) in v
        .axis_iter_mut(Axis(0))
        .zip(mass.iter().zip(model.vocabulary.centroids.outer_iter()))
    {
        row.scaled_add(-m, &c);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("residual pooling", format!("{id}: non-finite residual sum")));
    }

    let block_norms: Array1<f64> = v.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let residuals = v.clone();
    let mut blocks = v;
    for (mut row, &nrm) in blocks.axis_iter_mut(Axis(0)).zip(block_norms.iter()) {
        if nrm < ZERO_GUARD {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|x| x / nrm);
        }
    }
    let global_norm = blocks.iter().map(|v| v * v).sum::<f64>().sqrt();
    if global_norm < ZERO_GUARD {
        return Err(Error::Degenerate(format!("{id}: every cluster residual vanished")));
    }
    let pooled = Array1::from_iter(blocks.iter().map(|v| v / global_norm));

    Ok(Forward {
        centered,
        row_norms,
        x,
        alpha,
        gram,
        sig,
        w,
        u,
        weight,
        residuals,
        block_norms,
        blocks,
        global_norm,
        pooled,
    })
}

/// Full pipeline: project, normalize, assign, discount, pool, normalize,
/// optionally whiten.
pub fn aggregate(features: &LocalFeatureSet, model: &AggregationModel) -> Result<GlobalDescriptor> {
    let fwd = forward(features, model, false)?;
    let desc = GlobalDescriptor {
        image_id: features.image_id().to_string(),
        vector: fwd.pooled,
        config_hash: model.config_hash.clone(),
    };
    match &model.whitening {
        Some(w) => projection::apply_whitening(&desc, w),
        None => Ok(desc),
    }
}

/// Burst-weighted residual sums `V_k` (`C x D'`) before normalization.
pub fn residual_sums(features: &LocalFeatureSet, model: &AggregationModel) -> Result<Array2<f64>> {
    forward(features, model, false).map(|f| f.residuals)
}

/// Intra-normalized cluster blocks (`C x D'`) before flattening.
pub fn aggregate_blocks(features: &LocalFeatureSet, model: &AggregationModel) -> Result<Array2<f64>> {
    forward(features, model, false).map(|f| f.blocks)
}

/// Per-cluster triplet margins `|q_k - n_k| - |q_k - p_k|` and the
/// cluster ranking they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMargins {
    pub margins: Vec<f64>,
    /// `ranks[k]` is cluster `k`'s position when sorted by margin,
    /// largest first (0 = largest). Ties go to the lower index.
    pub ranks: Vec<usize>,
}

pub fn cluster_margin_analysis(
    query: &Array2<f64>,
    positive: &Array2<f64>,
    negative: &Array2<f64>,
) -> Result<ClusterMargins> {
    if query.dim() != positive.dim() || query.dim() != negative.dim() {
        return Err(Error::Shape(format!(
            "block shapes differ: query {:?}, positive {:?}, negative {:?}",
            query.dim(),
            positive.dim(),
            negative.dim()
        )));
    }
    let dist = |a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>| {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let margins: Vec<f64> = query
        .outer_iter()
        .zip(positive.outer_iter())
        .zip(negative.outer_iter())
        .map(|((q, p), n)| dist(q, n) - dist(q, p))
        .collect();
    let mut order: Vec<usize> = (0..margins.len()).collect();
    order.sort_by(|&a, &b| margins[b].total_cmp(&margins[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; margins.len()];
    for (pos, &k) in order.iter().enumerate() {
        ranks[k] = pos;
    }
    Ok(ClusterMargins { margins, ranks })
}

/// Cluster whose rank improved the most going from `baseline` to
/// `candidate`: `argmax_k(r_k^baseline - r_k^candidate)`, lowest index on ties.
pub fn most_improved_cluster(baseline: &ClusterMargins, candidate: &ClusterMargins) -> Result<usize> {
    if baseline.ranks.len() != candidate.ranks.len() || baseline.ranks.is_empty() {
        return Err(Error::Shape(format!(
            "rank vectors have lengths {} and {}",
            baseline.ranks.len(),
            candidate.ranks.len()
        )));
    }
    let diff = |k: usize| baseline.ranks[k] as i64 - candidate.ranks[k] as i64;
    Ok((0..baseline.ranks.len())
        .fold(0, |best, k| if diff(k) > diff(best) { k } else { best }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn vocab(c: Array2<f64>) -> Vocabulary {
        Vocabulary {
            centroids: c,
            fitted_on_normalized: true,
            seed: 0,
            inertia: 0.0,
        }
    }

    fn unit(id: &str, m: Array2<f64>) -> LocalFeatureSet {
        featureio::l2_normalize_rows(&LocalFeatureSet::new(id, m).unwrap()).unwrap()
    }

    #[test]
    fn init_formula_for_unit_centroids() {
        let v = vocab(array![[1.0, 0.0], [0.0, 1.0]]);
        let a = init_assignment_from_vocab(&v, 1.0).unwrap();
        assert_eq!(a.weights, array![[2.0, 0.0], [0.0, 2.0]]);
        assert_eq!(a.biases, array![-1.0, -1.0]);
        assert!(matches!(init_assignment_from_vocab(&v, 0.0), Err(Error::Config(_))));
        assert!(matches!(init_assignment_from_vocab(&v, -2.0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_filters_assign_uniformly() {
        let params = AssignmentParams {
            weights: Array2::zeros((4, 2)),
            biases: Array1::zeros(4),
            sharpness_init: 1.0,
        };
        let f = unit("u", array![[1.0, 2.0], [3.0, -1.0]]);
        let alpha = soft_assign(&f, &params).unwrap();
        assert!(alpha.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_matches_direct_exponentials() {
        // Logits [[1,0],[0,1],[2,2]] come from W = I, beta = 0 on these rows.
        let params = AssignmentParams {
            weights: Array2::eye(2),
            biases: Array1::zeros(2),
            sharpness_init: 1.0,
        };
        let f = LocalFeatureSet::new("s", array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]).unwrap();
        let alpha = soft_assign(&f, &params).unwrap();
        let rows = [[1.0f64, 0.0], [0.0, 1.0], [2.0, 2.0]];
        for (i, l) in rows.iter().enumerate() {
            let e = [l[0].exp(), l[1].exp()];
            let s = e[0] + e[1];
            for k in 0..2 {
                assert!((alpha[[i, k]] - e[k] / s).abs() < 1e-12);
            }
            assert!((alpha.row(i).sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn soft_count_hand_values() {
        let f = unit("e", array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let w = soft_count(&f, &BurstParams { a: 4.0, b: -2.0, p: 1.0, enabled: true }).unwrap();
        assert!((w[0] - 1.8808).abs() < 5e-5);
        assert!((w[1] - 1.8808).abs() < 5e-5);
        assert!((w[2] - 1.1192).abs() < 5e-5);

        let w = soft_count(&f, &BurstParams { a: 0.0, b: 0.0, p: 1.0, enabled: true }).unwrap();
        assert!(w.iter().all(|&v| v == 1.5));

        let one = unit("o", array![[0.3, 0.4]]);
        let burst = BurstParams { a: 3.0, b: -1.0, p: 1.0, enabled: true };
        let w = soft_count(&one, &burst).unwrap();
        assert!((w[0] - sigmoid(2.0)).abs() < 1e-15);
    }

    #[test]
    fn soft_count_requires_unit_rows() {
        let raw = LocalFeatureSet::new("r", array![[3.0, 4.0]]).unwrap();
        assert!(matches!(soft_count(&raw, &BurstParams::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn feature_on_centroid_keeps_other_clusters() {
        let v = vocab(array![[1.0, 0.0], [0.0, 1.0]]);
        let model = AggregationModel::from_vocabulary(v, 5.0, BurstParams::default(), None).unwrap();
        let f = unit("c", array![[1.0, 0.0]]);
        let fwd = forward(&f, &model, false).unwrap();
        assert!(fwd.alpha[[0, 0]] > 0.9999);
        assert_eq!(fwd.block_norms[0], 0.0);
        assert!(fwd.blocks.row(0).iter().all(|&v| v == 0.0));
        assert!(fwd.block_norms[1] > ZERO_GUARD);
        let d = aggregate(&f, &model).unwrap();
        assert!((d.vector.dot(&d.vector).sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_aggregate_is_degenerate() {
        let v = vocab(array![[1.0, 0.0], [1.0, 0.0]]);
        let assignment = AssignmentParams {
            weights: Array2::zeros((2, 2)),
            biases: Array1::zeros(2),
            sharpness_init: 1.0,
        };
        let model = AggregationModel::new(v, assignment, BurstParams::disabled(), None, None).unwrap();
        let f = unit("z", array![[1.0, 0.0]]);
        assert!(matches!(aggregate(&f, &model), Err(Error::Degenerate(_))));
    }

    #[test]
    fn margins_hand_case() {
        let q = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let p = array![[1.0, 0.0], [1.0, 0.0], [0.6, 0.8]];
        let n = array![[0.0, 1.0], [0.0, 1.0], [-0.6, 0.8]];
        let m = cluster_margin_analysis(&q, &p, &n).unwrap();
        let s2 = 2f64.sqrt();
        let expected = [s2, -s2, 1.2];
        for (a, b) in m.margins.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(m.ranks, vec![0, 2, 1]);

        let same = cluster_margin_analysis(&q, &q, &n).unwrap();
        assert!(same.margins.iter().all(|&v| v >= 0.0));
        let flat = cluster_margin_analysis(&q, &p, &p).unwrap();
        assert!(flat.margins.iter().all(|&v| v == 0.0));
        assert!(matches!(
            cluster_margin_analysis(&q, &p, &array![[1.0, 0.0]]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn most_improved_cluster_picks_largest_rank_drop() {
        let nv = ClusterMargins { margins: vec![], ranks: vec![0, 2, 1] };
        let vb = ClusterMargins { margins: vec![], ranks: vec![2, 0, 1] };
        assert_eq!(most_improved_cluster(&nv, &vb).unwrap(), 1);
    }

    #[test]
    fn hash_changes_with_parameters() {
        let v = vocab(array![[1.0, 0.0], [0.0, 1.0]]);
        let a = AggregationModel::from_vocabulary(v.clone(), 100.0, BurstParams::default(), None).unwrap();
        let b = AggregationModel::from_vocabulary(v, 100.0, BurstParams { p: 0.5, ..BurstParams::default() }, None)
            .unwrap();
        assert_eq!(a.config_hash, a.compute_hash());
        assert_ne!(a.config_hash, b.config_hash);
        assert_eq!(a.config_hash.len(), 16);
    }
}
