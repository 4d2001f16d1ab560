//! Visual vocabulary: k-means centroids used as residual anchors and to
//! initialize the soft assignment.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featureio::{self, Dtype, LocalFeatureSet};
use crate::rng;

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Centroids closer than this are considered identical.
const DISTINCT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub centroids: Array2<f64>,
    pub fitted_on_normalized: bool,
    pub seed: u64,
    pub inertia: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    c: usize,
    seed: u64,
    inertia: f64,
    fitted_on_normalized: bool,
    dim: usize,
}

impl Vocabulary {
    pub fn num_clusters(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Writes `<stem>.vbff` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        featureio::write_matrix(&dir.join(format!("{stem}.vbff")), self.centroids.view(), Dtype::F64)?;
        let sidecar = Sidecar {
            c: self.num_clusters(),
            seed: self.seed,
            inertia: self.inertia,
            fitted_on_normalized: self.fitted_on_normalized,
            dim: self.dim(),
        };
        let path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (centroids, _) = featureio::read_matrix(&dir.join(format!("{stem}.vbff")))?;
        let path = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if sidecar.c != centroids.nrows() || sidecar.dim != centroids.ncols() {
            return Err(Error::Shape(format!(
                "vocabulary sidecar says {}x{}, matrix is {}x{}",
                sidecar.c,
                sidecar.dim,
                centroids.nrows(),
                centroids.ncols()
            )));
        }
        Ok(Self {
            centroids,
            fitted_on_normalized: sidecar.fitted_on_normalized,
            seed: sidecar.seed,
            inertia: sidecar.inertia,
        })
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distances from every sample to every centroid, via the
/// `|x|^2 + |c|^2 - 2 x.c` expansion (clamped at zero).
fn distance_matrix(samples: &Array2<f64>, centroids: &Array2<f64>) -> Array2<f64> {
    let xs: Array1<f64> = samples.map_axis(Axis(1), |r| r.dot(&r));
    let cs: Array1<f64> = centroids.map_axis(Axis(1), |r| r.dot(&r));
    let mut d = samples.dot(&centroids.t());
    for ((i, k), v) in d.indexed_iter_mut() {
        *v = (xs[i] + cs[k] - 2.0 * *v).max(0.0);
    }
    d
}

fn argmin_rows(d: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    d.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = k;
                }
            }
            (best, row[best])
        })
        .unzip()
}

fn kmeans_pp(samples: &Array2<f64>, c: usize, rng: &mut rng::Rng) -> Array2<f64> {
    let m = samples.nrows();
    let mut centroids = Array2::zeros((c, samples.ncols()));
    let first = rng.random_range(0..m);
    centroids.row_mut(0).assign(&samples.row(first));
    let mut min_d: Vec<f64> = samples
        .outer_iter()
        .map(|x| sq_dist(x, centroids.row(0)))
        .collect();
    for k in 1..c {
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = m - 1;
            for (i, &d) in min_d.iter().enumerate() {
                acc += d;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..m)
        };
        centroids.row_mut(k).assign(&samples.row(pick));
        for (i, x) in samples.outer_iter().enumerate() {
            let d = sq_dist(x, centroids.row(k));
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans_fit(samples: &Array2<f64>, c: usize, seed: u64, max_iters: usize, tol: f64) -> Result<Vocabulary> {
    kmeans_fit_traced(samples, c, seed, max_iters, tol).map(|(v, _)| v)
}

/// As [`kmeans_fit`], also returning the inertia after every assignment step.
pub fn kmeans_fit_traced(
    samples: &Array2<f64>,
    c: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<(Vocabulary, Vec<f64>)> {
    let (m, dim) = samples.dim();
    if c == 0 {
        return Err(Error::Config("cluster count must be positive".into()));
    }
    if m < c {
        return Err(Error::Data(format!("{m} samples cannot seed {c} clusters")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("k-means samples contain non-finite values".into()));
    }
    if !(tol >= 0.0) {
        return Err(Error::Config(format!("tolerance must be nonnegative, got {tol}")));
    }

    let mut rng = rng::seeded(seed);
    let mut centroids = kmeans_pp(samples, c, &mut rng);
    let mut trace = Vec::new();

    for _ in 0..max_iters {
        let (labels, dists) = argmin_rows(&distance_matrix(samples, &centroids));
        trace.push(dists.iter().sum());

        let mut sums = Array2::<f64>::zeros((c, dim));
        let mut counts = vec![0usize; c];
        for (x, &k) in samples.outer_iter().zip(&labels) {
            sums.row_mut(k).scaled_add(1.0, &x);
            counts[k] += 1;
        }
        let mut taken = vec![false; m];
        let mut updated = centroids.clone();
        for k in 0..c {
            if counts[k] > 0 {
                let mean = &sums.row(k) / counts[k] as f64;
                updated.row_mut(k).assign(&mean);
            } else {
                // Re-seed an empty cluster at the sample farthest from its
                // assigned centroid.
                let far = (0..m)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("m >= c guarantees a free sample");
                taken[far] = true;
                updated.row_mut(k).assign(&samples.row(far));
            }
        }
        let shift = centroids
            .outer_iter()
            .zip(updated.outer_iter())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < tol {
            break;
        }
    }

    let (_, dists) = argmin_rows(&distance_matrix(samples, &centroids));
    let inertia: f64 = dists.iter().sum();
    trace.push(inertia);

    for a in 0..c {
        for b in a + 1..c {
            if sq_dist(centroids.row(a), centroids.row(b)).sqrt() < DISTINCT_EPS {
                return Err(Error::Degenerate(format!(
                    "centroids {a} and {b} coincide; the samples hold fewer than {c} distinct points"
                )));
            }
        }
    }

    let fitted_on_normalized = samples
        .outer_iter()
        .all(|r| (r.dot(&r).sqrt() - 1.0).abs() < 1e-5);

    Ok((
        Vocabulary {
            centroids,
            fitted_on_normalized,
            seed,
            inertia,
        },
        trace,
    ))
}

/// Nearest centroid per feature; ties go to the lowest index.
pub fn assign_hard(features: &LocalFeatureSet, vocab: &Vocabulary) -> Result<Vec<usize>> {
    if features.dim() != vocab.dim() {
        return Err(Error::Shape(format!(
            "features have dimension {}, vocabulary {}",
            features.dim(),
            vocab.dim()
        )));
    }
    Ok(features
        .features()
        .outer_iter()
        .map(|x| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in vocab.centroids.outer_iter().enumerate() {
                let d = sq_dist(x, c);
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn square_corners_are_recovered() {
        let pts = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let v = kmeans_fit(&pts, 4, 7, 100, 1e-6).unwrap();
        assert_eq!(v.inertia, 0.0);
        let mut rows: Vec<(i64, i64)> = v
            .centroids
            .outer_iter()
            .map(|r| (r[0] as i64, r[1] as i64))
            .collect();
        rows.sort();
        assert_eq!(rows, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = array![[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]];
        let v = kmeans_fit(&pts, 1, 0, 100, 1e-6).unwrap();
        assert!((v.centroids[[0, 0]] - 3.0).abs() < 1e-12);
        assert!((v.centroids[[0, 1]] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn two_blobs() {
        let mut rng = rng::seeded(11);
        let mut pts = Array2::zeros((200, 2));
        for i in 0..200 {
            let cx = if i < 100 { 5.0 } else { -5.0 };
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);
            pts[[i, 0]] = cx + nx;
            pts[[i, 1]] = ny;
        }
        let means = [
            pts.slice(ndarray::s![..100, ..]).mean_axis(Axis(0)).unwrap(),
            pts.slice(ndarray::s![100.., ..]).mean_axis(Axis(0)).unwrap(),
        ];
        let v = kmeans_fit(&pts, 2, 3, 100, 1e-6).unwrap();
        for mean in &means {
            let best = v
                .centroids
                .outer_iter()
                .map(|c| sq_dist(c, mean.view()).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.5, "centroid {best} away from blob mean");
        }
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = rng::seeded(5);
        let pts = Array2::from_shape_simple_fn((300, 4), || StandardNormal.sample(&mut rng));
        let (_, trace) = kmeans_fit_traced(&pts, 6, 1, 100, 0.0).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let mut rng = rng::seeded(9);
        let pts = Array2::from_shape_simple_fn((120, 3), || StandardNormal.sample(&mut rng));
        let a = kmeans_fit(&pts, 5, 4, 100, 1e-6).unwrap();
        let b = kmeans_fit(&pts, 5, 4, 100, 1e-6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_samples_or_nan() {
        let pts = array![[0.0, 1.0]];
        assert!(matches!(kmeans_fit(&pts, 2, 0, 10, 0.0), Err(Error::Data(_))));
        let pts = array![[0.0, f64::NAN], [1.0, 1.0]];
        assert!(matches!(kmeans_fit(&pts, 1, 0, 10, 0.0), Err(Error::Data(_))));
    }

    fn vocab(centroids: Array2<f64>) -> Vocabulary {
        Vocabulary {
            centroids,
            fitted_on_normalized: false,
            seed: 0,
            inertia: 0.0,
        }
    }

    #[test]
    fn hard_assignment_exact_and_tie() {
        let v = vocab(array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]);
        let f = LocalFeatureSet::new("f", array![[0.0, -1.0], [0.0, 0.5]]).unwrap();
        assert_eq!(assign_hard(&f, &v).unwrap(), vec![3, 2]);
        let tie = LocalFeatureSet::new("t", array![[0.0, 0.25]]).unwrap();
        let v2 = vocab(array![[1.0, 0.0], [-1.0, 0.0]]);
        assert_eq!(assign_hard(&tie, &v2).unwrap(), vec![0]);
        let wrong = LocalFeatureSet::new("w", array![[1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(assign_hard(&wrong, &v), Err(Error::Shape(_))));
    }

    #[test]
    fn hard_assignment_matches_full_distance_matrix() {
        let mut rng = rng::seeded(21);
        let x: Array2<f64> = Array2::from_shape_simple_fn((20, 6), || StandardNormal.sample(&mut rng));
        let c: Array2<f64> = Array2::from_shape_simple_fn((5, 6), || StandardNormal.sample(&mut rng));
        let mut oracle = Vec::new();
        for i in 0..20 {
            let mut d = Vec::new();
            for k in 0..5 {
                let mut s = 0.0f64;
                for j in 0..6 {
                    s += (x[[i, j]] - c[[k, j]]).powi(2);
                }
                d.push(s);
            }
            let best = (0..5).min_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap()).unwrap();
            oracle.push(best);
        }
        let f = LocalFeatureSet::new("r", x).unwrap();
        assert_eq!(assign_hard(&f, &vocab(c)).unwrap(), oracle);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary {
            centroids: array![[0.1, 0.2], [0.3, 1.0 / 3.0]],
            fitted_on_normalized: true,
            seed: 17,
            inertia: 0.25,
        };
        v.save(dir.path(), "vocab").unwrap();
        assert_eq!(Vocabulary::load(dir.path(), "vocab").unwrap(), v);
    }
}
