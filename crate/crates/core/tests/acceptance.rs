//! Acceptance checks. Each test writes one `PASS` / `FAIL` line to stderr
//! (bypassing output capture) and then asserts the same condition.

mod support;

use std::io::Write;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use rr_core::distill::{distill_sample, reconsolidate_sample, DistillConfig, RobustSample};
use rr_core::memory::{Budget, RehearsalMemory};
use rr_core::metrics::{aca, AccuracyMatrix};
use rr_core::protocols::{gen_blobs, make_split, BlobSpec, LabeledDataset, Sample, Split};
use rr_core::{run_experiment, Array, DatasetSplits, ExperimentConfig, Strategy, TaskSequence};
use support::*;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "acceptance {id} [{name}]: {verdict} {detail}");
}

#[test]
fn c1_gradient_oracle() {
    let start = Instant::now();
    let check = gradient_oracle_check(100, 2024);
    let took = start.elapsed();
    let pass = check.nets == 100
        && check.input_err <= 1e-4
        && check.param_err <= 1e-4
        && took < Duration::from_secs(60);
    report(
        1,
        "gradient oracle",
        pass,
        &format!(
            "nets={} coords={} skipped={} max_rel_err input={:.2e} params={:.2e} time={:.1?}",
            check.nets, check.coords, check.skipped, check.input_err, check.param_err, took
        ),
    );
    assert!(pass);
}

#[test]
fn c2_distillation_optimum() {
    let start = Instant::now();
    let (ratio, dist, affine) = affine_regime_convergence(24, 77);
    let took = start.elapsed();
    let pass = affine && ratio <= 1e-4 && dist <= 1e-3 && took < Duration::from_secs(60);
    report(
        2,
        "distillation optimum",
        pass,
        &format!(
            "cases=24 worst loss ratio={ratio:.2e} worst |x-target|={dist:.2e} affine={affine} time={took:.1?}"
        ),
    );
    assert!(pass);
}

#[test]
fn c3_algorithm_fidelity() {
    let mut r = rng(303);
    let mut fixed_point = true;
    let mut untouched = true;
    for _ in 0..20 {
        let net = random_net(&mut r);
        let sum = net.checksum();
        let d = net.input_shape()[0];
        let mut cfg = DistillConfig::new(net.n_blocks());
        cfg.steps = 300;
        let target = Sample { id: 1, x: random_input(&mut r, d), label: 0 };
        let other = Sample { id: 2, x: random_input(&mut r, d), label: 1 };
        let same = distill_sample(&net, &target, &target, &cfg, 1, 0).unwrap();
        fixed_point &= same.x_clr.bit_eq(&target.x);
        let moved = distill_sample(&net, &other, &target, &cfg, 1, 0).unwrap();
        let ds = LabeledDataset::new(vec![target.clone()], 2, Split::Train).unwrap();
        let mut mem = RehearsalMemory::new(Budget::PerClass(1), 1);
        mem.insert_task_exemplars(&ds, 1, 0).unwrap();
        reconsolidate_sample(&net, &moved, &mem, &cfg, 2).unwrap();
        untouched &= net.checksum() == sum;
    }
    let pass = fixed_point && untouched;
    report(
        3,
        "distillation fidelity",
        pass,
        &format!("source=target bitwise={fixed_point} parameters unchanged={untouched}"),
    );
    assert!(pass);
}

// Stream and settings shared by the ordering and forgetting checks.
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const BUDGETS: [usize; 3] = [8, 32, 128];

fn ordering_stream(seed: u64) -> (TaskSequence, DatasetSplits) {
    let spec = BlobSpec::new(6, 200, 16, 3.0, 1000 + seed);
    (make_split(6, 3, None, seed).unwrap(), gen_blobs(&spec).unwrap())
}

fn ordering_config(strategy: Strategy, budget: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(strategy);
    cfg.budget = Budget::Total(budget);
    cfg.train.lr = 0.005;
    cfg
}

/// (aca, accuracy on the final task) for one run.
fn run_once(strategy: Strategy, budget: usize, seed: u64) -> (f64, f64) {
    let (proto, data) = ordering_stream(seed);
    let out = run_experiment(&proto, &data, &ordering_config(strategy, budget), seed, None).unwrap();
    let last = out.matrix.final_row().unwrap();
    (out.aca().unwrap(), *last.last().unwrap())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn c4_ordering_reproduction() {
    let start = Instant::now();
    let mut jobs: Vec<(Strategy, usize, u64)> = SEEDS
        .iter()
        .map(|&s| (Strategy::FineTune, 0, s))
        .collect();
    for &b in &BUDGETS {
        for &s in &SEEDS {
            jobs.push((Strategy::NaiveRehearsal, b, s));
            jobs.push((Strategy::RobustRehearsal, b, s));
        }
    }
    let results: Vec<((Strategy, usize, u64), f64)> = jobs
        .par_iter()
        .map(|&(st, b, s)| ((st, b, s), run_once(st, b.max(1), s).0))
        .collect();
    let took = start.elapsed();
    let mean_of = |st: Strategy, b: usize| {
        mean(
            &results
                .iter()
                .filter(|((s, bb, _), _)| *s == st && *bb == b)
                .map(|(_, a)| *a)
                .collect::<Vec<_>>(),
        )
    };
    let ft = mean_of(Strategy::FineTune, 0);
    let mut pass = took < Duration::from_secs(15 * 60);
    let mut detail = format!("fine-tune={ft:.4}");
    for (i, &b) in BUDGETS.iter().enumerate() {
        let naive = mean_of(Strategy::NaiveRehearsal, b);
        let robust = mean_of(Strategy::RobustRehearsal, b);
        let ok = ft < naive && naive < robust && (i > 0 || robust - naive >= 0.02);
        pass &= ok;
        detail.push_str(&format!(
            " | budget {b}: naive={naive:.4} robust={robust:.4} diff={:+.4} {}",
            robust - naive,
            if ok { "ok" } else { "violated" }
        ));
    }
    detail.push_str(&format!(" | time={took:.1?}"));
    report(4, "ordering fine-tune < naive < robust", pass, &detail);
    assert!(pass);
}

#[test]
fn c5_forgetting_sanity() {
    let runs: Vec<(f64, f64)> = SEEDS
        .par_iter()
        .map(|&s| run_once(Strategy::FineTune, 1, s))
        .collect();
    let aca_mean = mean(&runs.iter().map(|r| r.0).collect::<Vec<_>>());
    let last_mean = mean(&runs.iter().map(|r| r.1).collect::<Vec<_>>());
    let chance = 1.0 / 6.0;
    let pass = (aca_mean - chance).abs() <= 0.10 && last_mean >= 0.80;
    report(
        5,
        "fine-tune forgets",
        pass,
        &format!(
            "aca={aca_mean:.4} (target {chance:.4} +/- 0.10) final-task accuracy={last_mean:.4} (>= 0.80)"
        ),
    );
    assert!(pass);
}

#[test]
fn c6_aca_metric() {
    let cases: Vec<(Vec<Vec<f64>>, f64)> = vec![
        (vec![vec![1.0], vec![1.0, 1.0]], 1.0),
        (vec![vec![0.9], vec![0.6, 0.8], vec![0.5, 0.7, 0.9]], (0.5 + 0.7 + 0.9) / 3.0),
        (vec![vec![0.42]], 0.42),
        (
            vec![vec![1.0], vec![0.0, 1.0], vec![0.0, 0.0, 1.0], vec![0.25, 0.5, 0.75, 0.125]],
            (0.25 + 0.5 + 0.75 + 0.125) / 4.0,
        ),
    ];
    let mut worst = 0.0f64;
    for (rows, want) in &cases {
        let m = AccuracyMatrix::from_rows(rows.clone()).unwrap();
        worst = worst.max((aca(&m).unwrap() - want).abs());
    }
    let mut shape_enforced = AccuracyMatrix::from_rows(vec![vec![0.5, 0.5]]).is_err();
    let mut m = AccuracyMatrix::new(3);
    shape_enforced &= m.set(0, 2, 0.5).is_err();
    shape_enforced &= m.set(1, 1, 1.5).is_err();
    shape_enforced &= aca(&m).is_err();
    let pass = worst <= 1e-12 && shape_enforced;
    report(
        6,
        "average classification accuracy",
        pass,
        &format!("max abs error={worst:.1e} lower-triangular enforced={shape_enforced}"),
    );
    assert!(pass);
}

#[test]
fn c7_attitude_binning() {
    let (points, bad) = attitude_grid_check();
    let pass = bad == 0 && points == 121 * 121;
    report(
        7,
        "attitude binning",
        pass,
        &format!("grid points={points} mismatches={bad}"),
    );
    assert!(pass);
}

#[test]
fn c8_usefulness_diagnostics() {
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for (i, c) in [-1.0, 0.0, 0.5, 1.0].into_iter().enumerate() {
        let est = usefulness_estimate(c, 10_000, 800 + i as u64);
        worst = worst.max((est - c).abs());
        detail.push_str(&format!("c={c}: {est:.4}  "));
    }
    let pass = worst <= 0.05;
    report(
        8,
        "usefulness estimates",
        pass,
        &format!("{detail}max abs error={worst:.4}"),
    );
    assert!(pass);
}

fn synthetic_task(classes: &[usize], per_class: usize, first_id: u64, total: usize) -> LabeledDataset {
    let mut samples = Vec::new();
    let mut id = first_id;
    for &c in classes {
        for k in 0..per_class {
            samples.push(Sample {
                id,
                x: Array::from_vec(vec![c as f32, k as f32]),
                label: c,
            });
            id += 1;
        }
    }
    LabeledDataset::new(samples, total, Split::Train).unwrap()
}

fn fake_robust(mem: &RehearsalMemory, class: usize, task: usize) -> Vec<RobustSample> {
    mem.robust_targets(class)
        .iter()
        .map(|t| RobustSample {
            x_clr: t.x.clone(),
            class_id: class,
            target_id: t.id,
            source_id: 0,
            distilled_at_task: task,
            final_loss: 0.0,
            seed: 0,
        })
        .collect()
}

/// Random task streams through the memory: budget respected, robust
/// samples only for seen classes, replacement never accumulates.
fn memory_invariant_sweep(cases: usize, seed: u64) -> (usize, usize) {
    let mut r = rng(seed);
    let mut violations = 0;
    for _ in 0..cases {
        let sizes: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(1..4)).collect();
        let total: usize = sizes.iter().sum();
        let budget = if r.random_bool(0.5) {
            Budget::Total(r.random_range(total..200))
        } else {
            Budget::PerClass(r.random_range(1..12))
        };
        let k_clr = r.random_range(0..5);
        let per_class = r.random_range(1..15);
        let mut mem = RehearsalMemory::new(budget, k_clr);
        let mut next = 0;
        for (t, &n) in sizes.iter().enumerate() {
            let classes: Vec<usize> = (next..next + n).collect();
            next += n;
            let old = mem.seen_classes().to_vec();
            mem.insert_task_exemplars(&synthetic_task(&classes, per_class, (t * 1000) as u64, total), t + 1, seed)
                .unwrap();
            for &c in classes.iter().chain(&old) {
                let fresh = fake_robust(&mem, c, t + 1);
                let want = fresh.len();
                mem.replace_robust(c, fresh).unwrap();
                if mem.robust(c).len() != want || want > k_clr {
                    violations += 1;
                }
            }
            if mem.original_count() > budget.capacity(next) || mem.check_invariants().is_err() {
                violations += 1;
            }
            if (0..total).any(|c| !mem.seen_classes().contains(&c) && !mem.robust(c).is_empty()) {
                violations += 1;
            }
            let unseen = fake_robust(&mem, classes[0], t + 1)
                .into_iter()
                .map(|mut s| {
                    s.class_id = total + 1;
                    s
                })
                .collect();
            if mem.replace_robust(total + 1, unseen).is_ok() {
                violations += 1;
            }
        }
    }
    (cases, violations)
}

fn artifact_bytes(dir: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.ends_with("accuracy_matrix.csv") || p.extension().is_some_and(|e| e == "pgm") {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c9_determinism_and_memory_invariants() {
    let (proto, data) = tiny_stream(12);
    let cfg = tiny_config(Strategy::RobustRehearsal);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&proto, &data, &cfg, 4, Some(a.path())).unwrap();
    run_experiment(&proto, &data, &cfg, 4, Some(b.path())).unwrap();
    let (fa, fb) = (artifact_bytes(a.path()), artifact_bytes(b.path()));
    let pgms = fa.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "pgm")).count();
    let identical = !fa.is_empty() && pgms > 0 && fa == fb;
    let (cases, violations) = memory_invariant_sweep(300, 99);
    let pass = identical && violations == 0;
    report(
        9,
        "determinism and memory invariants",
        pass,
        &format!(
            "files compared={} (pgm={pgms}) identical={identical} invariant streams={cases} violations={violations}",
            fa.len()
        ),
    );
    assert!(pass);
}
