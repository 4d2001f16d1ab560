//! Linear projections of local features before pooling, and PCA whitening
//! of global descriptors after pooling.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featureio::{self, Dtype, GlobalDescriptor, LocalFeatureSet};
use crate::linalg;
use crate::rng;

pub const DEFAULT_WHITENING_EPSILON: f64 = 1e-8;

/// Relative eigenvalue floor below which a direction counts as rank deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Pca,
    RandomLinear,
    /// Placeholder for a nonlinear random bottleneck. Not constructible
    /// through this crate.
    RandomMlpStub,
}

/// Pre-pool projection `x' = (x - mean) . rotation`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// `D x D'`
    pub rotation: Array2<f64>,
    pub eigenvalues: Array1<f64>,
    pub init_kind: InitKind,
}

impl PcaModel {
    pub fn in_dim(&self) -> usize {
        self.rotation.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.rotation.ncols()
    }

    /// `m = 0`, `R = I`.
    pub fn identity(d: usize) -> Self {
        Self {
            mean: Array1::zeros(d),
            rotation: Array2::eye(d),
            eigenvalues: Array1::zeros(d),
            init_kind: InitKind::Pca,
        }
    }

    /// Projection without the trailing row normalization.
    pub fn apply_affine(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean).dot(&self.rotation)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        save_affine(
            dir,
            stem,
            &self.mean,
            &self.rotation,
            &Sidecar {
                kind: self.init_kind,
                dims: [self.in_dim(), self.out_dim()],
                epsilon: None,
                eigenvalues: self.eigenvalues.to_vec(),
            },
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (mean, rotation, sidecar) = load_affine(dir, stem)?;
        Ok(Self {
            mean,
            rotation,
            eigenvalues: Array1::from(sidecar.eigenvalues),
            init_kind: sidecar.kind,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    kind: InitKind,
    dims: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    eigenvalues: Vec<f64>,
}

fn save_affine(dir: &Path, stem: &str, mean: &Array1<f64>, rotation: &Array2<f64>, sidecar: &Sidecar) -> Result<()> {
    featureio::write_matrix(
        &dir.join(format!("{stem}_mean.vbff")),
        mean.view().insert_axis(Axis(0)),
        Dtype::F64,
    )?;
    featureio::write_matrix(&dir.join(format!("{stem}_rotation.vbff")), rotation.view(), Dtype::F64)?;
    let path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn load_affine(dir: &Path, stem: &str) -> Result<(Array1<f64>, Array2<f64>, Sidecar)> {
    let (mean, _) = featureio::read_matrix(&dir.join(format!("{stem}_mean.vbff")))?;
    let (rotation, _) = featureio::read_matrix(&dir.join(format!("{stem}_rotation.vbff")))?;
    let path = dir.join(format!("{stem}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if mean.nrows() != 1
        || mean.ncols() != rotation.nrows()
        || sidecar.dims != [rotation.nrows(), rotation.ncols()]
        || sidecar.eigenvalues.len() != rotation.ncols()
    {
        return Err(Error::Shape(format!("{stem}: inconsistent projection files")));
    }
    Ok((mean.row(0).to_owned(), rotation, sidecar))
}

/// Top-`out_dim` principal directions of `samples` (population covariance).
///
/// Uses the covariance eigenproblem when `M >= D` and the `M x M` Gram
/// eigenproblem otherwise; both produce the same subspace and are mapped
/// through the same sign convention.
pub fn fit_pca(samples: &Array2<f64>, out_dim: usize) -> Result<PcaModel> {
    let (mean, rotation, eigenvalues) = principal_components(samples, out_dim)?;
    Ok(PcaModel {
        mean,
        rotation,
        eigenvalues,
        init_kind: InitKind::Pca,
    })
}

fn principal_components(samples: &Array2<f64>, out_dim: usize) -> Result<(Array1<f64>, Array2<f64>, Array1<f64>)> {
    let (m, d) = samples.dim();
    if out_dim == 0 || out_dim > d {
        return Err(Error::Config(format!("output dimension {out_dim} must be in 1..={d}")));
    }
    if m <= out_dim {
        return Err(Error::Data(format!(
            "{m} samples are not enough to fit {out_dim} components"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("PCA samples contain non-finite values".into()));
    }
    let (mean, centered) = linalg::center(samples);
    let scale = 1.0 / m as f64;

    let (values, vectors) = if m >= d {
        let cov = centered.t().dot(&centered) * scale;
        linalg::symmetric_eigen(&cov)
    } else {
        let gram = centered.dot(&centered.t()) * scale;
        let (vals, us) = linalg::symmetric_eigen(&gram);
        let top = vals[0].max(0.0);
        let keep = vals.iter().take_while(|&&l| l > RANK_TOL * top && l > 0.0).count();
        let mut vecs = Array2::zeros((d, keep));
        for k in 0..keep {
            let v = centered.t().dot(&us.column(k));
            let norm = v.dot(&v).sqrt();
            let pivot = v
                .iter()
                .enumerate()
                .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            vecs.column_mut(k).assign(&(v * (sign / norm)));
        }
        (vals.slice(ndarray::s![..keep]).to_owned(), vecs)
    };

    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let rank = values.iter().filter(|&&l| l > RANK_TOL * top && l > 0.0).count();
    if rank < out_dim {
        return Err(Error::Degenerate(format!(
            "sample covariance has rank {rank}, fewer than the {out_dim} requested components"
        )));
    }
    let rotation = vectors.slice(ndarray::s![.., ..out_dim]).to_owned();
    let eigenvalues = values.slice(ndarray::s![..out_dim]).mapv(|l| l.max(0.0));
    Ok((mean, rotation, eigenvalues))
}

/// `x' = (x - m) . R`, then row L2 normalization.
pub fn project_prepool(features: &LocalFeatureSet, model: &PcaModel) -> Result<LocalFeatureSet> {
    if features.dim() != model.in_dim() {
        return Err(Error::Shape(format!(
            "features have dimension {}, projection expects {}",
            features.dim(),
            model.in_dim()
        )));
    }
    let projected = model.apply_affine(features.features());
    let normalized = featureio::normalize_rows(&projected).map_err(|row| {
        Error::Data(format!(
            "{}: row {row} projects to the zero vector",
            features.image_id()
        ))
    })?;
    Ok(LocalFeatureSet::from_normalized(features.image_id().to_string(), normalized))
}

/// Random linear map: zero mean, entries `N(0, 1) / sqrt(D)`.
pub fn make_random_projection(d: usize, out_dim: usize, seed: u64) -> Result<PcaModel> {
    if out_dim == 0 || out_dim > d {
        return Err(Error::Config(format!("output dimension {out_dim} must be in 1..={d}")));
    }
    let mut rng = rng::seeded(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let rotation = Array2::from_shape_simple_fn((d, out_dim), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    });
    Ok(PcaModel {
        mean: Array1::zeros(d),
        rotation,
        eigenvalues: Array1::zeros(out_dim),
        init_kind: InitKind::RandomLinear,
    })
}

/// Post-pool PCA whitening.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningModel {
    pub mean: Array1<f64>,
    /// `L x K`
    pub rotation: Array2<f64>,
    pub eigenvalues: Array1<f64>,
    pub epsilon: f64,
}

impl WhiteningModel {
    pub fn in_dim(&self) -> usize {
        self.rotation.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.rotation.ncols()
    }

    fn scales(&self) -> Array1<f64> {
        self.eigenvalues.mapv(|l| 1.0 / (l + self.epsilon).sqrt())
    }

    /// Whitened coordinates before the final normalization.
    pub fn whiten(&self, v: &Array1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "descriptor has length {}, whitening expects {}",
                v.len(),
                self.in_dim()
            )));
        }
        Ok((v - &self.mean).dot(&self.rotation) * self.scales())
    }

    /// Inverse of [`WhiteningModel::whiten`] (exact when `K = L`).
    pub fn unwhiten(&self, y: &Array1<f64>) -> Array1<f64> {
        let scaled = y / &self.scales();
        self.rotation.dot(&scaled) + &self.mean
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        save_affine(
            dir,
            stem,
            &self.mean,
            &self.rotation,
            &Sidecar {
                kind: InitKind::Pca,
                dims: [self.in_dim(), self.out_dim()],
                epsilon: Some(self.epsilon),
                eigenvalues: self.eigenvalues.to_vec(),
            },
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (mean, rotation, sidecar) = load_affine(dir, stem)?;
        let epsilon = sidecar
            .epsilon
            .ok_or_else(|| Error::Format(format!("{stem}.json: missing epsilon")))?;
        Ok(Self {
            mean,
            rotation,
            eigenvalues: Array1::from(sidecar.eigenvalues),
            epsilon,
        })
    }
}

pub fn fit_whitening(descriptors: &Array2<f64>, out_dim: usize, epsilon: f64) -> Result<WhiteningModel> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::Config(format!("whitening epsilon must be finite and >= 0, got {epsilon}")));
    }
    let (mean, rotation, eigenvalues) = principal_components(descriptors, out_dim)?;
    if eigenvalues.iter().any(|&l| l + epsilon <= 0.0) {
        return Err(Error::Degenerate("zero eigenvalue with zero epsilon".into()));
    }
    Ok(WhiteningModel {
        mean,
        rotation,
        eigenvalues,
        epsilon,
    })
}

/// Center, rotate, scale by `1 / sqrt(lambda + eps)`, renormalize.
pub fn apply_whitening(descriptor: &GlobalDescriptor, model: &WhiteningModel) -> Result<GlobalDescriptor> {
    let y = model.whiten(&descriptor.vector)?;
    let norm = y.dot(&y).sqrt();
    if !(norm > featureio::ZERO_ROW_NORM) {
        return Err(Error::Degenerate(format!(
            "{}: whitened descriptor has zero norm",
            descriptor.image_id
        )));
    }
    Ok(GlobalDescriptor {
        image_id: descriptor.image_id.clone(),
        vector: y / norm,
        config_hash: descriptor.config_hash.clone(),
    })
}
