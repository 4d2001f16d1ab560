//! Wall-clock timing of projection plus aggregation across pre-pool sizes.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationModel, BurstParams, DEFAULT_SHARPNESS};
use crate::error::{Error, Result};
use crate::featureio::{GlobalDescriptor, LocalFeatureSet};
use crate::projection;
use crate::rng;
use crate::vocabulary::Vocabulary;

pub const MIN_RUNS: usize = 30;
pub const WARMUP_RUNS: usize = 10;
/// Coefficient of variation at or above which a config is flagged unstable.
pub const UNSTABLE_CV: f64 = 0.2;
/// The timer must resolve at least this fraction of the mean.
const RESOLUTION_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub d_prime: usize,
    pub n: usize,
    pub c: usize,
    pub projected: bool,
    pub threads: usize,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    pub runs: usize,
    pub unstable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub configs: Vec<BenchEntry>,
    pub environment: String,
}

impl BenchReport {
    pub fn entry(&self, d_prime: usize) -> Option<&BenchEntry> {
        self.configs.iter().find(|e| e.d_prime == d_prime)
    }

    /// `mean(from) / mean(to)`.
    pub fn speedup(&self, from: usize, to: usize) -> Option<f64> {
        Some(self.entry(from)?.mean_ms / self.entry(to)?.mean_ms)
    }

    /// True when mean time never increases as `d_prime` decreases.
    pub fn monotone_in_dim(&self) -> bool {
        let mut sorted: Vec<_> = self.configs.iter().collect();
        sorted.sort_by(|a, b| b.d_prime.cmp(&a.d_prime));
        sorted.windows(2).all(|w| w[1].mean_ms <= w[0].mean_ms)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("d_prime,n,c,projected,threads,mean_ms,stddev_ms,runs,unstable\n");
        for e in &self.configs {
            out += &format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.d_prime, e.n, e.c, e.projected, e.threads, e.mean_ms, e.stddev_ms, e.runs, e.unstable
            );
        }
        out
    }
}

/// `n` seeded Gaussian features of dimension `d`, L2 normalized.
pub fn bench_input(n: usize, d: usize, seed: u64) -> Result<LocalFeatureSet> {
    let mut r = rng::substream(seed, 1);
    let x = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut r));
    crate::featureio::l2_normalize_rows(&LocalFeatureSet::new("bench", x)?)
}

/// One model per entry of `dims`. `d' = d` aggregates the raw features
/// directly; smaller sizes get a seeded random linear projection. Centroids
/// are random unit vectors: the cost of the layer does not depend on their
/// values.
pub fn bench_family(d: usize, dims: &[usize], c: usize, seed: u64) -> Result<Vec<AggregationModel>> {
    dims.iter()
        .map(|&dp| {
            if dp == 0 || dp > d {
                return Err(Error::Config(format!("projected size {dp} must be in 1..={d}")));
            }
            let mut r = rng::substream(seed, 2 + dp as u64);
            let raw = Array2::from_shape_simple_fn((c, dp), || StandardNormal.sample(&mut r));
            let centroids = crate::featureio::normalize_rows(&raw)
                .map_err(|_| Error::Degenerate("zero centroid".into()))?;
            let vocab = Vocabulary {
                centroids,
                fitted_on_normalized: true,
                seed,
                inertia: 0.0,
            };
            let prepool = if dp == d {
                None
            } else {
                Some(projection::make_random_projection(d, dp, seed)?)
            };
            AggregationModel::from_vocabulary(vocab, DEFAULT_SHARPNESS, BurstParams::default(), prepool)
        })
        .collect()
}

/// The timed unit of work.
pub fn run_once(model: &AggregationModel, input: &LocalFeatureSet) -> Result<GlobalDescriptor> {
    aggregate(input, model)
}

/// Smallest nonzero step observed between consecutive clock reads.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..16 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

fn environment(threads: usize) -> String {
    format!(
        "{}-{}, {} thread(s), {} build, {} logical cpus",
        std::env::consts::OS,
        std::env::consts::ARCH,
        threads,
        if cfg!(debug_assertions) { "debug" } else { "optimized" },
        std::thread::available_parallelism().map_or(1, |n| n.get())
    )
}

/// Time `models` on the same input: `WARMUP_RUNS` untimed calls per model,
/// then `runs` rounds that time each model once, so slow periods of the
/// machine are shared across configs.
///
/// With `threads > 1` every run aggregates `threads` copies of the input on
/// a dedicated pool, measuring parallel throughput.
pub fn time_aggregation(
    models: &[AggregationModel],
    input: &LocalFeatureSet,
    runs: usize,
    threads: usize,
) -> Result<BenchReport> {
    if runs < MIN_RUNS {
        return Err(Error::Config(format!("need at least {MIN_RUNS} runs, got {runs}")));
    }
    if threads == 0 {
        return Err(Error::Config("thread count must be positive".into()));
    }
    let pool = (threads > 1)
        .then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Bench(format!("cannot start thread pool: {e}")))
        })
        .transpose()?;
    let once = |m: &AggregationModel| -> Result<()> {
        match &pool {
            None => run_once(m, input).map(|_| ()),
            Some(p) => p.install(|| (0..threads).into_par_iter().try_for_each(|_| run_once(m, input).map(|_| ()))),
        }
    };
    let resolution = timer_resolution().as_secs_f64() * 1e3;

    for m in models {
        if m.input_dim() != input.dim() {
            return Err(Error::Shape(format!(
                "model expects {}-dim input, bench input is {}-dim",
                m.input_dim(),
                input.dim()
            )));
        }
        for _ in 0..WARMUP_RUNS {
            once(m)?;
        }
    }
    let mut times = vec![Vec::with_capacity(runs); models.len()];
    for _ in 0..runs {
        for (m, t) in models.iter().zip(times.iter_mut()) {
            let t0 = Instant::now();
            once(m)?;
            t.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }

    let mut configs = Vec::with_capacity(models.len());
    for (m, times) in models.iter().zip(&times) {
        let mean = times.iter().sum::<f64>() / runs as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        let stddev = var.sqrt();
        if !(mean > 0.0) || resolution > RESOLUTION_FRACTION * mean {
            return Err(Error::Bench(format!(
                "timer resolution {resolution:.2e} ms is coarse against a mean of {mean:.2e} ms; \
                 increase the number of features per image"
            )));
        }
        configs.push(BenchEntry {
            d_prime: m.local_dim(),
            n: input.len(),
            c: m.num_clusters(),
            projected: m.prepool.is_some(),
            threads,
            mean_ms: mean,
            stddev_ms: stddev,
            runs,
            unstable: stddev / mean >= UNSTABLE_CV,
        });
    }
    Ok(BenchReport {
        configs,
        environment: environment(threads),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timed_path_matches_untimed() {
        let input = bench_input(40, 24, 3).unwrap();
        for m in bench_family(24, &[24, 8], 4, 3).unwrap() {
            assert_eq!(run_once(&m, &input).unwrap(), aggregate(&input, &m).unwrap());
        }
    }

    #[test]
    fn family_shapes() {
        let fam = bench_family(32, &[32, 16, 4], 5, 0).unwrap();
        assert!(fam[0].prepool.is_none());
        assert_eq!(fam.iter().map(|m| m.local_dim()).collect::<Vec<_>>(), [32, 16, 4]);
        assert!(fam.iter().all(|m| m.input_dim() == 32 && m.num_clusters() == 5));
        assert!(matches!(bench_family(8, &[9], 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn report_fields() {
        let input = bench_input(256, 32, 0).unwrap();
        let fam = bench_family(32, &[32, 8], 8, 0).unwrap();
        assert!(matches!(time_aggregation(&fam, &input, 5, 1), Err(Error::Config(_))));
        let r = time_aggregation(&fam, &input, MIN_RUNS, 1).unwrap();
        assert_eq!(r.configs.len(), 2);
        assert!(r.configs.iter().all(|e| e.runs == 30 && e.mean_ms > 0.0 && e.n == 256));
        assert_eq!(r.to_csv().lines().count(), 3);
        let back: BenchReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn monotone_and_speedup() {
        let entry = |d_prime, mean_ms| BenchEntry {
            d_prime,
            n: 1,
            c: 1,
            projected: true,
            threads: 1,
            mean_ms,
            stddev_ms: 0.0,
            runs: 30,
            unstable: false,
        };
        let mut r = BenchReport {
            configs: vec![entry(64, 1.0), entry(768, 4.0), entry(192, 2.0)],
            environment: String::new(),
        };
        assert!(r.monotone_in_dim());
        assert_eq!(r.speedup(768, 192), Some(2.0));
        r.configs[0].mean_ms = 2.5;
        assert!(!r.monotone_in_dim());
    }
}
