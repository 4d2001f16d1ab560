use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use vladbuff_core::bench;
use vladbuff_core::featureio::{self, LocalFeatureSet};
use vladbuff_core::pipeline;
use vladbuff_core::retrieval::synthetic::generate_burst_benchmark;
use vladbuff_core::retrieval::RecallReport;
use vladbuff_core::training::{self, gradcheck};
use vladbuff_core::{aggregate, load_bundle, save_bundle, AggregationModel, BurstParams, DatasetManifest, Error, PipelineConfig};

use crate::plot;
use crate::{AggregateArgs, BenchArgs, Cli, Command, EvalArgs, FitArgs, GenArgs, PathOverrides, PlotArgs, TrainArgs};

const STAMP_FILE: &str = ".config_hash";

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    apply_paths(&mut cfg, &cli.paths);
    match cli.command {
        Command::Fit(args) => fit(cfg, &args),
        Command::Aggregate(args) => aggregate_cmd(&resolved(cfg)?, &args),
        Command::Train(args) => train(cfg, &args),
        Command::Eval(args) => eval(&resolved(cfg)?, &args),
        Command::Bench(args) => bench_cmd(cfg, &args),
        Command::Gen(args) => gen(cfg, &args),
        Command::Plot(args) => plot_cmd(&args),
        Command::ShowConfig => {
            let cfg = resolved(cfg)?;
            print!("{}", cfg.to_toml());
            println!("# config_hash = {}", cfg.config_hash());
            Ok(())
        }
    }
}

fn apply_paths(cfg: &mut PipelineConfig, o: &PathOverrides) {
    let p = &mut cfg.paths;
    if o.manifest.is_some() {
        p.manifest.clone_from(&o.manifest);
    }
    if o.eval_manifest.is_some() {
        p.eval_manifest.clone_from(&o.eval_manifest);
    }
    for (dst, src) in [
        (&mut p.bundle, &o.bundle),
        (&mut p.descriptors, &o.descriptors),
        (&mut p.output, &o.output),
    ] {
        if let Some(v) = src {
            dst.clone_from(v);
        }
    }
}

/// Validate after overrides and log the result.
fn resolved(cfg: PipelineConfig) -> Result<PipelineConfig> {
    cfg.validate()?;
    info!("config_hash {}", cfg.config_hash());
    for line in cfg.to_toml().lines() {
        log::debug!("  {line}");
    }
    Ok(cfg)
}

fn train_manifest(cfg: &PipelineConfig) -> Result<DatasetManifest> {
    let path = cfg
        .paths
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("no manifest given (paths.manifest or --manifest)".into()))?;
    Ok(DatasetManifest::load(path, cfg.eval.radius_m)?)
}

fn eval_manifest(cfg: &PipelineConfig) -> Result<DatasetManifest> {
    let path = cfg
        .paths
        .eval_manifest
        .as_ref()
        .or(cfg.paths.manifest.as_ref())
        .ok_or_else(|| Error::Config("no manifest given (paths.eval_manifest or --eval-manifest)".into()))?;
    Ok(DatasetManifest::load(path, cfg.eval.radius_m)?)
}

fn load_sets(manifest: &DatasetManifest) -> Result<BTreeMap<String, LocalFeatureSet>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = manifest.resolve(&e.feature_path);
            let raw = featureio::load_features(&path)?;
            // The manifest id wins over the file stem.
            let set = LocalFeatureSet::new(e.image_id.clone(), raw.into_features())?;
            Ok((e.image_id.clone(), set))
        })
        .collect()
}

fn fit(mut cfg: PipelineConfig, args: &FitArgs) -> Result<()> {
    if let Some(c) = args.clusters {
        cfg.fit.clusters = c;
    }
    if args.prepool_dim.is_some() {
        cfg.fit.prepool_dim = args.prepool_dim;
    }
    if let Some(s) = args.seed {
        cfg.fit.seed = s;
    }
    if args.no_burst {
        cfg.burst.enabled = false;
    }
    let cfg = resolved(cfg)?;
    let manifest = train_manifest(&cfg)?;
    let sets = load_sets(&manifest)?;
    let list: Vec<LocalFeatureSet> = manifest.entries.iter().map(|e| sets[&e.image_id].clone()).collect();
    info!("fitting on {} images", list.len());
    let mut model = pipeline::fit_model(&list, &cfg.fit_settings())?;
    if let Some(k) = cfg.fit.whitening_dim {
        model.whitening = Some(pipeline::fit_whitening_on(&model, &list, k, cfg.fit.whitening_epsilon)?);
        model.rehash();
    }
    save_bundle(&model, &cfg.paths.bundle)?;
    println!(
        "wrote {} (C={}, D'={}, config_hash {})",
        cfg.paths.bundle.display(),
        model.num_clusters(),
        model.local_dim(),
        model.config_hash
    );
    Ok(())
}

fn is_up_to_date(out: &Path, input: &Path) -> bool {
    let mtime = |p: &Path| std::fs::metadata(p).and_then(|m| m.modified()).ok();
    matches!((mtime(out), mtime(input)), (Some(o), Some(i)) if o >= i)
}

fn aggregate_cmd(cfg: &PipelineConfig, args: &AggregateArgs) -> Result<()> {
    let model = load_bundle(&cfg.paths.bundle).with_context(|| format!("loading bundle {}", cfg.paths.bundle.display()))?;
    let manifest = eval_manifest(cfg)?;
    let dir = &cfg.paths.descriptors;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let stamp = dir.join(STAMP_FILE);
    let same_model = std::fs::read_to_string(&stamp).is_ok_and(|s| s.trim() == model.config_hash);
    if !same_model {
        // Invalidate first so an interrupted run is never mistaken for up to date.
        std::fs::remove_file(&stamp).ok();
    }
    let outcomes = manifest
        .entries
        .par_iter()
        .map(|e| -> Result<bool> {
            let input = manifest.resolve(&e.feature_path);
            let out = dir.join(format!("{}.vbff", e.image_id));
            if same_model && !args.force && is_up_to_date(&out, &input) {
                return Ok(false);
            }
            let raw = featureio::load_features(&input)?;
            let set = LocalFeatureSet::new(e.image_id.clone(), raw.into_features())?;
            featureio::save_descriptor(&aggregate(&set, &model)?, &out)?;
            Ok(true)
        })
        .collect::<Result<Vec<bool>>>()?;
    std::fs::write(&stamp, format!("{}\n", model.config_hash)).with_context(|| format!("writing {}", stamp.display()))?;
    let written = outcomes.iter().filter(|&&w| w).count();
    println!(
        "{} descriptors in {} ({} written, {} up to date)",
        outcomes.len(),
        dir.display(),
        written,
        outcomes.len() - written
    );
    Ok(())
}

fn train(mut cfg: PipelineConfig, args: &TrainArgs) -> Result<()> {
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    let cfg = resolved(cfg)?;
    if args.check_grads {
        return check_grads(args.grad_cases, cfg.train.seed);
    }
    let model = load_bundle(&cfg.paths.bundle).with_context(|| format!("loading bundle {}", cfg.paths.bundle.display()))?;
    let manifest = train_manifest(&cfg)?;
    let sets = load_sets(&manifest)?;
    let outcome = pipeline::train_on_manifest(model, &manifest, &sets, &cfg.train.triplets(), &cfg.train.optimizer())?;
    let out_bundle = args.out_bundle.clone().unwrap_or_else(|| cfg.paths.output.join("trained"));
    save_bundle(&outcome.model, &out_bundle)?;
    std::fs::create_dir_all(&cfg.paths.output)?;
    let trace_path = cfg.paths.output.join("loss.csv");
    training::write_trace_csv(&outcome.trace, &trace_path)?;
    let (first, last) = match (outcome.trace.first(), outcome.trace.last()) {
        (Some(f), Some(l)) => (f.loss, l.loss),
        _ => (f64::NAN, f64::NAN),
    };
    let b = outcome.model.burst;
    println!(
        "trained {} steps: loss {first:.6} -> {last:.6}; a={:.4} b={:.4} p={:.4}",
        outcome.trace.len(),
        b.a,
        b.b,
        b.p
    );
    println!(
        "wrote {} (config_hash {}) and {}",
        out_bundle.display(),
        outcome.model.config_hash,
        trace_path.display()
    );
    Ok(())
}

fn check_grads(cases: usize, seed: u64) -> Result<()> {
    if cases == 0 {
        return Err(Error::Config("--grad-cases must be positive".into()).into());
    }
    let results = gradcheck::run_suite(
        cases,
        seed,
        training::DEFAULT_FD_STEP,
        gradcheck::DEFAULT_REL_TOL,
        gradcheck::DEFAULT_ABS_FLOOR,
    )?;
    let mut failed = 0;
    for r in &results {
        println!(
            "case {:>4}: {:>3} params, max rel error {:.3e} {}",
            r.seed,
            r.params,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        bail!(
            "{failed} of {} gradient checks exceed relative error {:e}",
            results.len(),
            gradcheck::DEFAULT_REL_TOL
        );
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

#[derive(Serialize)]
struct Comparison {
    candidate: RecallReport,
    baseline: RecallReport,
    /// `candidate - baseline` per K.
    delta: BTreeMap<String, f64>,
}

fn report_for(model: &AggregationModel, manifest: &DatasetManifest, sets: &BTreeMap<String, LocalFeatureSet>, cfg: &PipelineConfig) -> Result<RecallReport> {
    let result = pipeline::evaluate_model(model, manifest, sets, &cfg.eval.ks)?;
    Ok(RecallReport::new(&model.config_hash, manifest.radius_m, &result))
}

/// Entries in numeric order of K.
fn by_k(m: &BTreeMap<String, f64>) -> Vec<(&String, f64)> {
    let mut v: Vec<_> = m.iter().map(|(k, x)| (k, *x)).collect();
    v.sort_by_key(|(k, _)| k.parse::<usize>().unwrap_or(usize::MAX));
    v
}

fn eval(cfg: &PipelineConfig, args: &EvalArgs) -> Result<()> {
    let model = load_bundle(&cfg.paths.bundle).with_context(|| format!("loading bundle {}", cfg.paths.bundle.display()))?;
    let manifest = eval_manifest(cfg)?;
    let sets = load_sets(&manifest)?;
    let report = report_for(&model, &manifest, &sets, cfg)?;
    let path = args.report.clone().unwrap_or_else(|| cfg.paths.output.join("recall.json"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let json = match &args.compare {
        None => {
            for (k, v) in by_k(&report.recalls) {
                println!("R@{k}: {v:.4}");
            }
            println!("excluded queries: {}", report.excluded_queries);
            serde_json::to_string_pretty(&report)?
        }
        Some(baseline_path) => {
            let baseline = match baseline_path {
                Some(p) => load_bundle(p).with_context(|| format!("loading baseline bundle {}", p.display()))?,
                None => pipeline::with_burst(&model, BurstParams { enabled: false, ..model.burst })?,
            };
            let base = report_for(&baseline, &manifest, &sets, cfg)?;
            let delta: BTreeMap<String, f64> = report
                .recalls
                .iter()
                .map(|(k, v)| (k.clone(), v - base.recalls[k]))
                .collect();
            println!("{:>6} {:>10} {:>10} {:>10}", "K", "candidate", "baseline", "delta");
            for (k, d) in by_k(&delta) {
                println!("{:>6} {:>10.4} {:>10.4} {:>+10.4}", k, report.recalls[k], base.recalls[k], d);
            }
            println!("excluded queries: {}", report.excluded_queries);
            serde_json::to_string_pretty(&Comparison {
                candidate: report,
                baseline: base,
                delta,
            })?
        }
    };
    std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn bench_cmd(mut cfg: PipelineConfig, args: &BenchArgs) -> Result<()> {
    if let Some(r) = args.runs {
        cfg.bench.runs = r;
    }
    if let Some(t) = args.threads {
        cfg.bench.threads = t;
    }
    let cfg = resolved(cfg)?;
    let b = &cfg.bench;
    let input = bench::bench_input(b.n, b.d, b.seed)?;
    let family = bench::bench_family(b.d, &b.dims, b.clusters, b.seed)?;
    let report = bench::time_aggregation(&family, &input, b.runs, b.threads)?;
    println!("{}", report.environment);
    println!("{:>6} {:>10} {:>10} {:>6}", "D'", "mean_ms", "stddev_ms", "runs");
    for e in &report.configs {
        println!("{:>6} {:>10.3} {:>10.3} {:>6}{}", e.d_prime, e.mean_ms, e.stddev_ms, e.runs, if e.unstable { "  unstable" } else { "" });
        if e.unstable {
            warn!("D'={}: stddev/mean >= {}", e.d_prime, bench::UNSTABLE_CV);
        }
    }
    let top = b.dims.iter().copied().max().unwrap_or(b.d);
    for &d in &b.dims {
        if d != top {
            if let Some(s) = report.speedup(top, d) {
                println!("speedup D'={d} vs {top}: {s:.2}x");
            }
        }
    }
    let out = &cfg.paths.output;
    std::fs::create_dir_all(out)?;
    let json_path = out.join("bench.json");
    std::fs::write(&json_path, report.to_json())?;
    println!("wrote {}", json_path.display());
    if args.csv {
        let p = out.join("bench.csv");
        std::fs::write(&p, report.to_csv())?;
        println!("wrote {}", p.display());
    }
    if args.svg {
        let p = out.join("bench.svg");
        std::fs::write(&p, plot::time_vs_dim(&report))?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn gen(mut cfg: PipelineConfig, args: &GenArgs) -> Result<()> {
    if let Some(s) = args.seed {
        cfg.gen.seed = s;
    }
    let cfg = resolved(cfg)?;
    let out = &cfg.paths.output;
    let b = generate_burst_benchmark(cfg.gen.seed, &cfg.gen.params, out)?;
    println!(
        "wrote {} images to {} (train: {} entries, test: {} entries)",
        b.features.len(),
        out.display(),
        b.train.entries.len(),
        b.test.entries.len()
    );
    Ok(())
}

fn plot_cmd(args: &PlotArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", args.input.display())))?;
    let report: bench::BenchReport = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{} is not a bench report: {e}", args.input.display())))?;
    let out: PathBuf = args.output.clone().unwrap_or_else(|| args.input.with_extension("svg"));
    std::fs::write(&out, plot::time_vs_dim(&report)).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}
