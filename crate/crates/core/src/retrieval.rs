//! Dataset manifests, exhaustive retrieval and Recall@K.

pub mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featureio::GlobalDescriptor;

pub const DEFAULT_RADIUS_M: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Query,
    Reference,
}

/// One line of a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    pub feature_path: PathBuf,
    pub x_m: f64,
    pub y_m: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub radius_m: f64,
    /// Relative feature paths are resolved against this directory.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    /// Validates ids, splits and radius. Paths are not touched.
    pub fn new(entries: Vec<ManifestEntry>, radius_m: f64, base_dir: impl Into<PathBuf>) -> Result<Self> {
        if !(radius_m >= 0.0) || !radius_m.is_finite() {
            return Err(Error::Config(format!("radius must be finite and >= 0, got {radius_m}")));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::Config(format!("duplicate image id {:?}", e.image_id)));
            }
            if !(e.x_m.is_finite() && e.y_m.is_finite()) {
                return Err(Error::Config(format!("{}: non-finite position", e.image_id)));
            }
        }
        if !entries.iter().any(|e| e.split == Split::Query) {
            return Err(Error::Config("manifest has no query entries".into()));
        }
        if !entries.iter().any(|e| e.split == Split::Reference) {
            return Err(Error::Config("manifest has no reference entries".into()));
        }
        Ok(Self {
            entries,
            radius_m,
            base_dir: base_dir.into(),
        })
    }

    /// Parse a JSON Lines manifest and check that every feature file exists.
    pub fn load(path: &Path, radius_m: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            entries.push(entry);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::new(entries, radius_m, base)?;
        for e in &manifest.entries {
            let p = manifest.resolve(&e.feature_path);
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "{}: feature file {} does not exist",
                    e.image_id,
                    p.display()
                )));
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn queries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Query)
    }

    pub fn references(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Reference)
    }
}

/// Positives per query. Queries without any in-radius reference are listed
/// in `excluded` and have no entry in `positives`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub positives: BTreeMap<String, HashSet<String>>,
    pub excluded: Vec<String>,
}

pub fn ground_truth_within_radius(manifest: &DatasetManifest) -> GroundTruth {
    let refs: Vec<&ManifestEntry> = manifest.references().collect();
    let mut gt = GroundTruth::default();
    for q in manifest.queries() {
        let pos: HashSet<String> = refs
            .iter()
            .filter(|r| (q.x_m - r.x_m).hypot(q.y_m - r.y_m) <= manifest.radius_m)
            .map(|r| r.image_id.clone())
            .collect();
        if pos.is_empty() {
            gt.excluded.push(q.image_id.clone());
        } else {
            gt.positives.insert(q.image_id.clone(), pos);
        }
    }
    gt
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub reference_id: String,
    pub distance: f64,
}

/// All references sorted by ascending Euclidean distance, ties by id.
pub fn rank_references(query: &GlobalDescriptor, references: &[GlobalDescriptor]) -> Result<Vec<Ranked>> {
    let mut out = Vec::with_capacity(references.len());
    for r in references {
        if r.vector.len() != query.vector.len() {
            return Err(Error::Shape(format!(
                "query {} has length {}, reference {} has {}",
                query.image_id,
                query.vector.len(),
                r.image_id,
                r.vector.len()
            )));
        }
        let d2: f64 = query
            .vector
            .iter()
            .zip(r.vector.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        out.push(Ranked {
            reference_id: r.image_id.clone(),
            distance: d2.sqrt(),
        });
    }
    out.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.reference_id.cmp(&b.reference_id))
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    pub query_id: String,
    pub ranked: Vec<Ranked>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub rankings: Vec<QueryRanking>,
    pub recall_at: BTreeMap<usize, f64>,
    pub excluded_queries: usize,
}

/// Fraction of ground-truthed queries with a positive in the top K.
/// Rankings for excluded queries are ignored.
pub fn recall_at_k(rankings: &[QueryRanking], gt: &GroundTruth, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if let Some(&k) = ks.iter().find(|&&k| k < 1) {
        return Err(Error::Config(format!("recall cutoff K must be >= 1, got {k}")));
    }
    let excluded: HashSet<&str> = gt.excluded.iter().map(String::as_str).collect();
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut scored = 0usize;
    for q in rankings {
        if excluded.contains(q.query_id.as_str()) {
            continue;
        }
        let positives = gt
            .positives
            .get(&q.query_id)
            .ok_or_else(|| Error::Data(format!("query {} has no ground truth", q.query_id)))?;
        scored += 1;
        let first_hit = q
            .ranked
            .iter()
            .position(|r| positives.contains(&r.reference_id));
        for (&k, count) in hits.iter_mut() {
            if first_hit.is_some_and(|p| p < k) {
                *count += 1;
            }
        }
    }
    if scored == 0 {
        return Err(Error::Data("no query has an in-radius reference".into()));
    }
    Ok(hits
        .into_iter()
        .map(|(k, h)| (k, h as f64 / scored as f64))
        .collect())
}

/// Rank every query against every reference and score the result.
pub fn evaluate(
    manifest: &DatasetManifest,
    descriptors: &HashMap<String, GlobalDescriptor>,
    ks: &[usize],
) -> Result<RetrievalResult> {
    let fetch = |id: &str| {
        descriptors
            .get(id)
            .ok_or_else(|| Error::Data(format!("missing descriptor for {id}")))
    };
    let refs = manifest
        .references()
        .map(|e| fetch(&e.image_id).cloned())
        .collect::<Result<Vec<_>>>()?;
    let gt = ground_truth_within_radius(manifest);
    let rankings = manifest
        .queries()
        .map(|q| {
            Ok(QueryRanking {
                query_id: q.image_id.clone(),
                ranked: rank_references(fetch(&q.image_id)?, &refs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let recall_at = recall_at_k(&rankings, &gt, ks)?;
    Ok(RetrievalResult {
        rankings,
        recall_at,
        excluded_queries: gt.excluded.len(),
    })
}

/// Serialized recall report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub config_hash: String,
    pub radius_m: f64,
    pub recalls: BTreeMap<String, f64>,
    pub excluded_queries: usize,
}

impl RecallReport {
    pub fn new(config_hash: &str, radius_m: f64, result: &RetrievalResult) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            radius_m,
            recalls: result
                .recall_at
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            excluded_queries: result.excluded_queries,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn entry(id: &str, x: f64, y: f64, split: Split) -> ManifestEntry {
        ManifestEntry {
            image_id: id.into(),
            feature_path: format!("{id}.vbff").into(),
            x_m: x,
            y_m: y,
            split,
        }
    }

    fn desc(id: &str, v: Vec<f64>) -> GlobalDescriptor {
        GlobalDescriptor {
            image_id: id.into(),
            vector: Array1::from(v),
            config_hash: String::new(),
        }
    }

    #[test]
    fn radius_boundary() {
        let m = DatasetManifest::new(
            vec![
                entry("q", 0.0, 0.0, Split::Query),
                entry("in", 0.0, 24.0, Split::Reference),
                entry("out", 0.0, 26.0, Split::Reference),
                entry("edge", 25.0, 0.0, Split::Reference),
            ],
            25.0,
            ".",
        )
        .unwrap();
        let gt = ground_truth_within_radius(&m);
        let pos = &gt.positives["q"];
        assert!(pos.contains("in") && pos.contains("edge") && !pos.contains("out"));
    }

    #[test]
    fn zero_radius_needs_colocation() {
        let m = DatasetManifest::new(
            vec![
                entry("q", 1.0, 1.0, Split::Query),
                entry("same", 1.0, 1.0, Split::Reference),
                entry("near", 1.0, 1.0 + 1e-9, Split::Reference),
                entry("q2", 5.0, 5.0, Split::Query),
            ],
            0.0,
            ".",
        )
        .unwrap();
        let gt = ground_truth_within_radius(&m);
        assert_eq!(gt.positives["q"].len(), 1);
        assert_eq!(gt.excluded, vec!["q2".to_string()]);
    }

    #[test]
    fn manifest_validation() {
        let dup = vec![entry("a", 0.0, 0.0, Split::Query), entry("a", 0.0, 0.0, Split::Reference)];
        assert!(matches!(DatasetManifest::new(dup, 25.0, "."), Err(Error::Config(_))));
        let no_ref = vec![entry("a", 0.0, 0.0, Split::Query)];
        assert!(matches!(DatasetManifest::new(no_ref, 25.0, "."), Err(Error::Config(_))));
    }

    #[test]
    fn jsonl_round_trip_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(
            vec![entry("q", 0.0, 0.0, Split::Query), entry("r", 3.0, 4.0, Split::Reference)],
            25.0,
            dir.path(),
        )
        .unwrap();
        let path = dir.path().join("m.jsonl");
        m.save(&path).unwrap();
        assert!(matches!(DatasetManifest::load(&path, 25.0), Err(Error::Config(_))));
        std::fs::write(dir.path().join("q.vbff"), b"").unwrap();
        std::fs::write(dir.path().join("r.vbff"), b"").unwrap();
        assert_eq!(DatasetManifest::load(&path, 25.0).unwrap(), m);

        std::fs::write(&path, "{\"image_id\":\"q\",\"bogus\":1}\n").unwrap();
        assert!(matches!(DatasetManifest::load(&path, 25.0), Err(Error::Config(_))));
    }

    #[test]
    fn identical_reference_ranks_first() {
        let q = desc("q", vec![0.6, 0.8]);
        let refs = vec![desc("b", vec![1.0, 0.0]), desc("a", vec![0.6, 0.8]), desc("c", vec![0.0, 1.0])];
        let r = rank_references(&q, &refs).unwrap();
        assert_eq!(r[0].reference_id, "a");
        assert_eq!(r[0].distance, 0.0);
        assert!(r.windows(2).all(|w| w[0].distance <= w[1].distance));
        assert!(matches!(rank_references(&q, &[desc("x", vec![1.0])]), Err(Error::Shape(_))));
    }

    #[test]
    fn ties_broken_by_reference_id() {
        let q = desc("q", vec![1.0, 0.0]);
        let refs = vec![desc("z", vec![0.0, 1.0]), desc("m", vec![0.0, -1.0])];
        let r = rank_references(&q, &refs).unwrap();
        assert_eq!(r[0].reference_id, "m");
    }

    #[test]
    fn third_place_positive() {
        let ranked = ["x", "y", "p", "z"]
            .iter()
            .enumerate()
            .map(|(i, id)| Ranked {
                reference_id: id.to_string(),
                distance: i as f64,
            })
            .collect();
        let rankings = vec![QueryRanking {
            query_id: "q".into(),
            ranked,
        }];
        let mut gt = GroundTruth::default();
        gt.positives.insert("q".into(), ["p".to_string()].into_iter().collect());
        let r = recall_at_k(&rankings, &gt, &[1, 5]).unwrap();
        assert_eq!(r[&1], 0.0);
        assert_eq!(r[&5], 1.0);
        assert!(matches!(recall_at_k(&rankings, &gt, &[0]), Err(Error::Config(_))));
    }

    #[test]
    fn report_json_shape() {
        let result = RetrievalResult {
            rankings: vec![],
            recall_at: [(1, 0.5), (5, 1.0)].into_iter().collect(),
            excluded_queries: 2,
        };
        let json = serde_json::to_value(RecallReport::new("abc", 25.0, &result)).unwrap();
        assert_eq!(json["recalls"]["1"], 0.5);
        assert_eq!(json["recalls"]["5"], 1.0);
        assert_eq!(json["excluded_queries"], 2);
        assert_eq!(json["radius_m"], 25.0);
    }
}
