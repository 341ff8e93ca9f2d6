use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;

use rr_core::distill::{distill_sample_observed, export_robust_sample, pick_source, DistillConfig};
use rr_core::gradnet::load_network;
use rr_core::memory::{Budget, RehearsalMemory};
use rr_core::metrics::accuracy;
use rr_core::protocols::load_dataset;
use rr_core::{netpbm, run_experiment, Array, DatasetSplits, Split, Strategy};

use crate::manifest::{Manifest, Resolved};
use crate::{
    Axis, CliError, Command, DataArgs, DistillArgs, EvalArgs, ExportArgs, Overrides, RunArgs,
    SplitArg, SweepArgs, OUTPUT_ROOT_ENV,
};

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run(a) => cmd_run(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Distill(a) => cmd_distill(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Export(a) => cmd_export(&a),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Load, override and validate a manifest. Every field error is listed.
pub fn load_manifest(path: &Path, ov: &Overrides) -> Result<Resolved, CliError> {
    let mut m = Manifest::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(s) = &ov.seeds {
        m.seeds = s.clone();
    }
    if let Some(s) = &ov.strategies {
        m.strategy = None;
        m.strategies = s.clone();
    }
    if let Some(b) = ov.budget {
        m.memory.budget = Some(b);
        m.memory.per_class = None;
    }
    if let Some(k) = ov.k_clr {
        m.memory.k_clr = k;
    }
    if let Some(e) = ov.epochs_first {
        m.train.epochs_first = e;
    }
    if let Some(e) = ov.epochs_rest {
        m.train.epochs_rest = e;
    }
    if let Some(s) = ov.distill_steps {
        m.distill.steps = s;
    }
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut resolved = m.resolve(&base).map_err(|errs| {
        let lines: Vec<String> = errs.iter().map(|e| format!("  {e}")).collect();
        usage(format!("invalid manifest {}:\n{}", path.display(), lines.join("\n")))
    })?;
    let out = match (&ov.out, &resolved.manifest.output) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => o.clone(),
        (None, None) => {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into());
            let root = std::env::var_os(OUTPUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"));
            root.join(stem)
        }
    };
    let out = std::path::absolute(&out).unwrap_or(out);
    resolved.manifest.output = Some(out);
    Ok(resolved)
}

fn output_dir(r: &Resolved) -> PathBuf {
    r.manifest.output.clone().expect("output set by load_manifest")
}

/// ACA of one (strategy, seed) run.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub aca: f64,
}

/// Run every (strategy, seed) pair, each in its own directory under `out`.
fn run_all(
    r: &Resolved,
    data: &DatasetSplits,
    out: &Path,
    artifacts: bool,
) -> Result<Vec<SeedResult>, CliError> {
    let proto = r.task_sequence(data.class_count()).map_err(|e| usage(format!("protocol: {e}")))?;
    let jobs: Vec<(Strategy, u64)> = r
        .strategies
        .iter()
        .flat_map(|&s| r.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(strategy, seed)| -> anyhow::Result<SeedResult> {
            let dir = out.join(strategy.name()).join(format!("seed-{seed}"));
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let cfg = r.experiment_config(strategy);
            let outcome = run_experiment(&proto, data, &cfg, seed, artifacts.then_some(dir.as_path()))
                .with_context(|| format!("{strategy} seed {seed}"))?;
            if !artifacts {
                outcome.matrix.save_csv(&dir.join("accuracy_matrix.csv"))?;
            }
            Ok(SeedResult {
                strategy,
                seed,
                aca: outcome.aca()?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(results)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write_summary(path: &Path, strategies: &[Strategy], results: &[SeedResult]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["strategy", "n_seeds", "aca_mean", "aca_std", "seeds", "aca_per_seed"])?;
    for &s in strategies {
        let rows: Vec<&SeedResult> = results.iter().filter(|r| r.strategy == s).collect();
        let acas: Vec<f64> = rows.iter().map(|r| r.aca).collect();
        let (mean, std) = mean_std(&acas);
        let seeds: Vec<String> = rows.iter().map(|r| r.seed.to_string()).collect();
        let per: Vec<String> = acas.iter().map(|a| a.to_string()).collect();
        w.write_record([
            s.name().to_string(),
            rows.len().to_string(),
            mean.to_string(),
            std.to_string(),
            seeds.join(";"),
            per.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_resolved(r: &Resolved, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("manifest.resolved"), r.to_toml())?;
    Ok(())
}

fn load_data(r: &Resolved) -> Result<DatasetSplits, CliError> {
    r.load_data()
        .map_err(|e| CliError::Runtime(anyhow::Error::new(e).context("loading dataset")))
}

pub fn cmd_run(a: &RunArgs) -> Result<(), CliError> {
    let r = load_manifest(&a.manifest, &a.overrides)?;
    let out = output_dir(&r);
    let data = load_data(&r)?;
    write_resolved(&r, &out)?;
    let results = run_all(&r, &data, &out, !a.overrides.no_artifacts)?;
    write_summary(&out.join("summary.csv"), &r.strategies, &results)?;
    for s in &r.strategies {
        let acas: Vec<f64> = results.iter().filter(|x| x.strategy == *s).map(|x| x.aca).collect();
        let (m, sd) = mean_std(&acas);
        println!("{s}: aca {m:.4} +/- {sd:.4} over {} seeds", acas.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    if a.values.is_empty() {
        return Err(usage("--values must list at least one value"));
    }
    let mut seen = a.values.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != a.values.len() {
        return Err(usage("--values contains duplicates"));
    }
    if a.values.contains(&0) {
        return Err(usage("--values must be positive"));
    }
    let base = load_manifest(&a.manifest, &a.overrides)?;
    let out = output_dir(&base);
    let data = load_data(&base)?;

    // Resolve every point up front so a bad value fails before any training.
    let mut points = Vec::new();
    for &v in &a.values {
        let mut m = base.manifest.clone();
        m.output = None;
        match a.axis {
            Axis::Memory => {
                if m.memory.per_class.is_some() {
                    m.memory.per_class = Some(v);
                } else {
                    m.memory.budget = Some(v);
                }
            }
            Axis::Tasks => {
                if m.protocol.kind != "split" {
                    return Err(usage("--axis tasks needs protocol.kind = \"split\""));
                }
                m.protocol.tasks = v;
                m.protocol.first = None;
            }
        }
        let r = m.resolve(&base.base_dir).map_err(|errs| {
            usage(format!(
                "value {v}: {}",
                errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
            ))
        })?;
        r.task_sequence(data.class_count())
            .map_err(|e| usage(format!("value {v}: {e}")))?;
        points.push((v, r));
    }

    write_resolved(&base, &out)?;
    let mut w = csv::Writer::from_path(out.join(format!("sweep_{}.csv", a.axis.name())))
        .context("creating sweep csv")?;
    w.write_record(["axis", "value", "strategy", "seed", "aca"])
        .context("writing sweep csv")?;
    for (v, r) in &points {
        let dir = out.join(format!("{}-{v}", a.axis.name()));
        write_resolved(r, &dir)?;
        let results = run_all(r, &data, &dir, !a.overrides.no_artifacts)?;
        write_summary(&dir.join("summary.csv"), &r.strategies, &results)?;
        for res in &results {
            w.write_record([
                a.axis.name().to_string(),
                v.to_string(),
                res.strategy.name().to_string(),
                res.seed.to_string(),
                res.aca.to_string(),
            ])
            .context("writing sweep csv")?;
        }
        println!("{} = {v}: {} runs", a.axis.name(), results.len());
    }
    w.flush().context("writing sweep csv")?;
    println!("wrote {}", out.display());
    Ok(())
}

fn load_data_args(d: &DataArgs) -> Result<(DatasetSplits, Option<Resolved>), CliError> {
    match (&d.manifest, &d.data) {
        (Some(m), None) => {
            let r = load_manifest(m, &Overrides::default())?;
            let data = load_data(&r)?;
            Ok((data, Some(r)))
        }
        (None, Some(dir)) => {
            if !dir.join("labels.csv").is_file() {
                return Err(usage(format!("--data: {} has no labels.csv", dir.display())));
            }
            let data = load_dataset(dir, None)
                .map_err(|e| CliError::Runtime(anyhow::Error::new(e).context("loading dataset")))?;
            Ok((data, None))
        }
        _ => Err(usage("give exactly one of --manifest or --data")),
    }
}

fn load_checkpoint(path: &Path) -> Result<rr_core::Network, CliError> {
    if !path.is_file() {
        return Err(usage(format!("--checkpoint: {} does not exist", path.display())));
    }
    load_network(path).map_err(|e| {
        CliError::Runtime(anyhow::Error::new(e).context(format!("loading {}", path.display())))
    })
}

pub fn cmd_distill(a: &DistillArgs) -> Result<(), CliError> {
    let net = load_checkpoint(&a.checkpoint)?;
    let (data, manifest) = load_data_args(&a.data)?;
    let train = &data.train;
    let targets: Vec<_> = train.of_class(a.class).take(a.k).collect();
    if targets.is_empty() {
        return Err(usage(format!("--class: class {} has no training samples", a.class)));
    }
    if a.k == 0 {
        return Err(usage("--k must be positive"));
    }
    let mut cfg = match &manifest {
        Some(r) => r.manifest.distill_config(),
        None => DistillConfig::new(net.n_blocks()),
    };
    if cfg.betas.len() != net.n_blocks() {
        cfg.betas = vec![1.0; net.n_blocks()];
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(e) = a.eta {
        cfg.eta = e;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    cfg.validate(net.n_blocks()).map_err(|e| usage(e.to_string()))?;

    fs::create_dir_all(&a.out).context("creating output directory")?;
    for (i, target) in targets.iter().enumerate() {
        let seed = rr_core::rng::derive_seed(a.seed, &[target.id]);
        let source = pick_source(train, a.class, seed)?;
        let mut snap_err: Option<rr_core::Error> = None;
        let every = a.snapshot_every;
        let out = &a.out;
        let mut observer = |step: usize, x: &Array, _loss: f64| {
            if every > 0 && (step + 1).is_multiple_of(every) && snap_err.is_none() {
                let p = out.join(format!("class{}_k{i}_step{:06}.pgm", a.class, step + 1));
                if let Err(e) = write_snapshot(x, &p) {
                    snap_err = Some(e);
                }
            }
        };
        let sample = distill_sample_observed(&net, source, target, &cfg, 0, seed, Some(&mut observer))?;
        if let Some(e) = snap_err {
            return Err(e.into());
        }
        let img = export_robust_sample(&sample, &a.out, &format!("class{}_k{i}_final", a.class))?;
        println!(
            "target {} from source {}: final loss {:.6} -> {}",
            target.id,
            source.id,
            sample.final_loss,
            img.display()
        );
    }
    Ok(())
}

fn write_snapshot(x: &Array, path: &Path) -> rr_core::Result<()> {
    let rgb = matches!(x.shape(), [3, _, _]);
    let path = if rgb { path.with_extension("ppm") } else { path.to_path_buf() };
    netpbm::write_image(&x.clamped(0.0, 1.0), &path)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let net = load_checkpoint(&a.checkpoint)?;
    let (data, _) = load_data_args(&a.data)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let mut ds = data.split(split).clone();
    if let Some(c) = &a.classes {
        ds = ds.restrict(c);
    }
    if ds.is_empty() {
        return Err(usage(format!("no {split} samples for the requested classes")));
    }
    let acc = accuracy(&net, &ds)?;
    println!("accuracy {acc} on {} {split} samples", ds.len());
    Ok(())
}

pub fn cmd_export(a: &ExportArgs) -> Result<(), CliError> {
    if !a.memory.join("manifest.txt").is_file() {
        return Err(usage(format!(
            "--memory: {} is not a memory snapshot",
            a.memory.display()
        )));
    }
    let mem = RehearsalMemory::load_snapshot(&a.memory)?;
    let originals = a.out.join("originals");
    fs::create_dir_all(&originals).context("creating output directory")?;
    let mut n = 0;
    for &c in mem.seen_classes() {
        for s in mem.originals(c) {
            write_snapshot(&s.x, &originals.join(format!("class{c}_id{}.pgm", s.id)))?;
            n += 1;
        }
        for r in mem.robust(c) {
            export_robust_sample(r, &a.out.join("robust"), &format!("class{c}_target{}", r.target_id))?;
            n += 1;
        }
    }
    let budget = match mem.budget() {
        Budget::Total(b) => format!("total {b}"),
        Budget::PerClass(k) => format!("{k} per class"),
    };
    println!(
        "exported {n} images ({} originals, {} robust; budget {budget})",
        mem.original_count(),
        mem.robust_count()
    );
    Ok(())
}
