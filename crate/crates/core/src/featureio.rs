//! Local-feature and descriptor storage.
//!
//! Matrices live in the VBFF container: a 24-byte little-endian header
//! followed by a dense row-major payload.
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `b"VBFF"`                    |
//! | 4      | 4    | version, `u32` = 1                 |
//! | 8      | 8    | rows `N`, `u64`                    |
//! | 16     | 4    | cols `D`, `u32`                    |
//! | 20     | 4    | dtype tag, `u32` (1 = f32, 2 = f64)|
//! | 24     | ..   | `N * D` values                     |
//!
//! Local features are always written as f32. Model parameters and global
//! descriptors use the f64 tag so trained values survive a round trip.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::retrieval::DatasetManifest;
use crate::rng;

pub const MAGIC: [u8; 4] = *b"VBFF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// Rows with a norm below this are treated as zero.
pub const ZERO_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u32 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Serialize a matrix into VBFF bytes.
pub fn encode_matrix(m: ArrayView2<'_, f64>, dtype: Dtype) -> Vec<u8> {
    let (n, d) = m.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + n * d * dtype.width());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&dtype.tag().to_le_bytes());
    for &v in m.iter() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

/// Parse VBFF bytes. Values are widened to f64.
pub fn decode_matrix(bytes: &[u8]) -> Result<(Array2<f64>, Dtype)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let d = u32_at(16) as u64;
    let tag = u32_at(20);
    let dtype = Dtype::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;

    let found = (bytes.len() - HEADER_LEN) as u64;
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(dtype.width() as u64))
        .ok_or_else(|| Error::Format(format!("header dimensions overflow: {n}x{d}")))?;
    if found != expected {
        return Err(Error::Truncated { expected, found });
    }

    let payload = &bytes[HEADER_LEN..];
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let m = Array2::from_shape_vec((n as usize, d as usize), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((m, dtype))
}

pub fn read_matrix(path: &Path) -> Result<(Array2<f64>, Dtype)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes)
}

pub fn write_matrix(path: &Path, m: ArrayView2<'_, f64>, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_matrix(m, dtype)).map_err(|e| Error::io(path, e))
}

/// One image's local descriptors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureSet {
    image_id: String,
    features: Array2<f64>,
    normalized: bool,
}

impl LocalFeatureSet {
    /// Validates shape, finiteness and the absence of zero rows.
    pub fn new(image_id: impl Into<String>, features: Array2<f64>) -> Result<Self> {
        let image_id = image_id.into();
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(Error::Data(format!("{image_id}: empty feature matrix {n}x{d}")));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "{image_id}: non-finite value at row {} col {}",
                pos / d,
                pos % d
            )));
        }
        if let Some(row) = features
            .outer_iter()
            .position(|r| r.iter().all(|&v| v == 0.0))
        {
            return Err(Error::Data(format!("{image_id}: row {row} is all zeros")));
        }
        Ok(Self {
            image_id,
            features,
            normalized: false,
        })
    }

    pub(crate) fn from_normalized(image_id: String, features: Array2<f64>) -> Self {
        Self {
            image_id,
            features,
            normalized: true,
        }
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn into_features(self) -> Array2<f64> {
        self.features
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }
}

/// Load a feature file. The image id is the file stem.
pub fn load_features(path: &Path) -> Result<LocalFeatureSet> {
    let (m, _) = read_matrix(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LocalFeatureSet::new(id, m)
}

pub fn save_features(set: &LocalFeatureSet, path: &Path) -> Result<()> {
    write_matrix(path, set.features.view(), Dtype::F32)
}

/// Divide every row by its L2 norm.
pub fn l2_normalize_rows(set: &LocalFeatureSet) -> Result<LocalFeatureSet> {
    let features = normalize_rows(&set.features)
        .map_err(|row| Error::Data(format!("{}: row {row} has zero norm", set.image_id)))?;
    Ok(LocalFeatureSet::from_normalized(set.image_id.clone(), features))
}

/// Row-normalize a matrix; on failure returns the index of the first
/// zero-norm row.
pub(crate) fn normalize_rows(m: &Array2<f64>) -> std::result::Result<Array2<f64>, usize> {
    let mut out = m.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm < ZERO_ROW_NORM {
            return Err(i);
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// A single image's aggregated vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub image_id: String,
    pub vector: Array1<f64>,
    pub config_hash: String,
}

impl GlobalDescriptor {
    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }
}

/// Descriptors are stored as a 1-row f64 matrix.
pub fn save_descriptor(desc: &GlobalDescriptor, path: &Path) -> Result<()> {
    let row = desc.vector.view().insert_axis(Axis(0));
    write_matrix(path, row, Dtype::F64)
}

pub fn load_descriptor(path: &Path, config_hash: &str) -> Result<GlobalDescriptor> {
    let (m, _) = read_matrix(path)?;
    if m.nrows() != 1 {
        return Err(Error::Format(format!(
            "{}: descriptor file holds {} rows, expected 1",
            path.display(),
            m.nrows()
        )));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(GlobalDescriptor {
        image_id: id,
        vector: m.row(0).to_owned(),
        config_hash: config_hash.to_string(),
    })
}

/// Per-image quotas for a stratified sample of `count` rows.
///
/// Each image gets `floor(count * n_i / total)`; the leftover rows go one at
/// a time to images visited in a seeded random order, skipping images whose
/// quota already equals their size.
pub fn stratified_quotas(sizes: &[usize], count: usize, seed: u64) -> Result<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    if count == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    if total < count {
        return Err(Error::Data(format!(
            "requested {count} features but only {total} are available"
        )));
    }
    let mut quotas: Vec<usize> = sizes
        .iter()
        .map(|&n| ((count as u128 * n as u128) / total as u128) as usize)
        .collect();
    let mut remaining = count - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.shuffle(&mut rng::substream(seed, 1));
    while remaining > 0 {
        for &i in &order {
            if remaining == 0 {
                break;
            }
            if quotas[i] < sizes[i] {
                quotas[i] += 1;
                remaining -= 1;
            }
        }
    }
    Ok(quotas)
}

/// Stratified sample without replacement from in-memory sets.
pub fn sample_from_sets(sets: &[LocalFeatureSet], count: usize, seed: u64) -> Result<Array2<f64>> {
    let Some(first) = sets.first() else {
        return Err(Error::Data("no feature sets to sample from".into()));
    };
    let d = first.dim();
    if let Some(bad) = sets.iter().find(|s| s.dim() != d) {
        return Err(Error::Shape(format!(
            "{} has dimension {}, expected {d}",
            bad.image_id(),
            bad.dim()
        )));
    }
    let sizes: Vec<usize> = sets.iter().map(|s| s.len()).collect();
    let quotas = stratified_quotas(&sizes, count, seed)?;
    let mut out = Array2::zeros((count, d));
    let mut next = 0;
    for (i, (set, &quota)) in sets.iter().zip(&quotas).enumerate() {
        let mut rows: Vec<usize> = (0..set.len()).collect();
        rows.shuffle(&mut rng::substream(seed, 2 + i as u64));
        for &r in &rows[..quota] {
            out.row_mut(next).assign(&set.features().row(r));
            next += 1;
        }
    }
    Ok(out)
}

/// Stratified sample of `count` raw features across every manifest entry.
pub fn sample_features(manifest: &DatasetManifest, count: usize, seed: u64) -> Result<Array2<f64>> {
    let sets = manifest
        .entries
        .iter()
        .map(|e| load_features(&manifest.resolve(&e.feature_path)))
        .collect::<Result<Vec<_>>>()?;
    sample_from_sets(&sets, count, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn set(m: Array2<f64>) -> LocalFeatureSet {
        LocalFeatureSet::new("t", m).unwrap()
    }

    #[test]
    fn decodes_identity_payload() {
        let m = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let bytes = encode_matrix(m.view(), Dtype::F32);
        let (back, dtype) = decode_matrix(&bytes).unwrap();
        assert_eq!(dtype, Dtype::F32);
        assert_eq!(back, m);
    }

    #[test]
    fn one_by_one_file_is_28_bytes() {
        let bytes = encode_matrix(array![[0.5]].view(), Dtype::F32);
        assert_eq!(bytes.len(), 28);
        assert_eq!(&bytes[..4], b"VBFF");
        assert_eq!(&bytes[24..], &0.5f32.to_le_bytes());
    }

    #[test]
    fn short_payload_is_truncated() {
        let m = Array2::from_elem((4, 2), 1.0);
        let mut bytes = encode_matrix(m.view(), Dtype::F32);
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(
            decode_matrix(&bytes),
            Err(Error::Truncated { expected: 32, found: 24 })
        ));
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = encode_matrix(array![[1.0]].view(), Dtype::F32);
        bytes[0] = b'X';
        assert!(matches!(decode_matrix(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_matrix(array![[1.0]].view(), Dtype::F32);
        bytes[4] = 7;
        assert!(matches!(decode_matrix(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_matrix(array![[1.0]].view(), Dtype::F32);
        bytes[20] = 9;
        assert!(matches!(decode_matrix(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_nan_and_zero_rows_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.vbff");
        write_matrix(&p, array![[1.0, f64::NAN]].view(), Dtype::F32).unwrap();
        assert!(matches!(load_features(&p), Err(Error::Data(_))));
        write_matrix(&p, array![[1.0, 2.0], [0.0, 0.0]].view(), Dtype::F32).unwrap();
        assert!(matches!(load_features(&p), Err(Error::Data(_))));
    }

    #[test]
    fn save_into_missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing").join("x.vbff");
        let s = set(array![[1.0]]);
        assert!(matches!(save_features(&s, &p), Err(Error::Io { .. })));
    }

    #[test]
    fn normalizes_three_four_five() {
        let n = l2_normalize_rows(&set(array![[3.0, 4.0]])).unwrap();
        assert!(n.normalized());
        assert!((n.features()[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((n.features()[[0, 1]] - 0.8).abs() < 1e-15);
        let again = l2_normalize_rows(&n).unwrap();
        for (a, b) in again.features().iter().zip(n.features()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_row_cannot_be_normalized() {
        // Bypass the constructor check to reach the normalization guard.
        let s = LocalFeatureSet {
            image_id: "z".into(),
            features: array![[0.0, 0.0]],
            normalized: false,
        };
        assert!(matches!(l2_normalize_rows(&s), Err(Error::Data(_))));
        assert!(LocalFeatureSet::new("z", array![[0.0, 0.0]]).is_err());
    }

    #[test]
    fn quotas_are_proportional() {
        assert_eq!(stratified_quotas(&[30, 15, 5], 50, 0).unwrap(), vec![30, 15, 5]);
        let q = stratified_quotas(&[10, 10, 10], 20, 3).unwrap();
        assert_eq!(q.iter().sum::<usize>(), 20);
        assert!(q.iter().all(|&x| x == 6 || x == 7));
        assert!(matches!(stratified_quotas(&[3], 4, 0), Err(Error::Data(_))));
    }

    #[test]
    fn exhaustive_sample_is_a_seeded_permutation() {
        let m = Array2::from_shape_fn((10, 2), |(i, j)| (i * 2 + j + 1) as f64);
        let s = set(m.clone());
        let a = sample_from_sets(std::slice::from_ref(&s), 10, 42).unwrap();
        let b = sample_from_sets(std::slice::from_ref(&s), 10, 42).unwrap();
        assert_eq!(a, b);
        let mut firsts: Vec<i64> = a.column(0).iter().map(|&v| v as i64).collect();
        firsts.sort();
        let expected: Vec<i64> = m.column(0).iter().map(|&v| v as i64).collect();
        assert_eq!(firsts, expected);
    }
}
