//! Interleaved rehearsal training and the multi-task pipeline: train on a
//! task with replay from memory, store exemplars, distill robust samples
//! for the new classes, re-consolidate the old ones, evaluate.

use std::borrow::Cow;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::array::Array;
use crate::distill::{
    distill_sample, export_robust_sample, pick_source, reconsolidate_toward, DistillConfig,
    RobustSample,
};
use crate::error::{Error, Result};
use crate::gradnet::{self, grad_wrt_params, Layout, MomentumSgd, Network};
use crate::memory::{Budget, RehearsalMemory};
use crate::metrics::{accuracy, AccuracyMatrix};
use crate::protocols::{DatasetSplits, LabeledDataset, Sample, TaskSequence};
use crate::rng::{self, derive_seed, purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// No memory at all.
    FineTune,
    /// Replay of original exemplars only.
    NaiveRehearsal,
    /// Replay of exemplars plus distilled robust samples.
    RobustRehearsal,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::FineTune,
        Strategy::NaiveRehearsal,
        Strategy::RobustRehearsal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FineTune => "fine-tune",
            Strategy::NaiveRehearsal => "naive-rehearsal",
            Strategy::RobustRehearsal => "robust-rehearsal",
        }
    }

    pub fn uses_memory(self) -> bool {
        self != Strategy::FineTune
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                format!("unknown strategy {s:?} (expected fine-tune, naive-rehearsal or robust-rehearsal)")
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Multiplier applied at each milestone.
    pub lr_decay: f64,
    pub epochs_first: usize,
    pub epochs_rest: usize,
    pub batch_size: usize,
    pub memory_batch_size: usize,
    /// Milestones as fractions of the epoch count.
    pub milestones: Vec<f64>,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            lr_decay: 0.1,
            epochs_first: 20,
            epochs_rest: 13,
            batch_size: 32,
            memory_batch_size: 32,
            milestones: vec![0.5, 0.75],
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.epochs_first == 0 || self.epochs_rest == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("milestones must be fractions in [0, 1]");
        }
        Ok(())
    }

    pub fn epochs_for(&self, task: usize) -> usize {
        if task == 1 {
            self.epochs_first
        } else {
            self.epochs_rest
        }
    }

    fn milestone_epochs(&self, epochs: usize) -> Vec<usize> {
        self.milestones
            .iter()
            .map(|f| (f * epochs as f64).ceil() as usize)
            .collect()
    }
}

/// Seeded crop-with-pad (one pixel, edge replicated) and brightness jitter.
/// Arrays that are not `[c, h, w]` only get the brightness shift.
pub fn augment(x: &Array, r: &mut rng::Rng) -> Array {
    let delta: f32 = r.random_range(-0.1..=0.1);
    let mut out = match *x.shape() {
        [c, h, w] if h > 2 && w > 2 => {
            let dy = r.random_range(-1i64..=1) as isize;
            let dx = r.random_range(-1i64..=1) as isize;
            let src = x.data();
            let mut data = Vec::with_capacity(src.len());
            for ch in 0..c {
                for y in 0..h {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for xx in 0..w {
                        let sx = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                        data.push(src[ch * h * w + sy * w + sx]);
                    }
                }
            }
            Array::new(x.shape().to_vec(), data).expect("same shape")
        }
        _ => x.clone(),
    };
    out.data_mut().iter_mut().for_each(|v| *v += delta);
    out
}

/// Evaluation record for one completed task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub task: usize,
    pub classes: Vec<usize>,
    /// Accuracy on each task's test split seen so far.
    pub accuracies: Vec<f64>,
    pub final_train_loss: f64,
    pub distilled: usize,
    pub reconsolidated: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentState {
    pub net: Network,
    pub mem: RehearsalMemory,
    /// Number of completed tasks.
    pub task_index: usize,
    pub history: Vec<TaskRecord>,
    pub seed: u64,
}

impl ExperimentState {
    pub fn new(net: Network, mem: RehearsalMemory, seed: u64) -> Self {
        Self {
            net,
            mem,
            task_index: 0,
            history: Vec::new(),
            seed,
        }
    }
}

/// Train `state.net` on one task with replay from `state.mem`. Returns the
/// mean loss of the final epoch.
pub fn train_task(
    state: &mut ExperimentState,
    task_data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    cfg.validate()?;
    if task_data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = task_data.classes();
    if let Some(c) = classes.iter().find(|c| state.mem.seen_classes().contains(c)) {
        return Err(Error::Protocol(format!(
            "class {c} of the new task was already learned"
        )));
    }
    let t = state.task_index + 1;
    let seed = state.seed;
    let epochs = cfg.epochs_for(t);
    let milestones = cfg.milestone_epochs(epochs);
    let mut opt = MomentumSgd::new(&state.net, cfg.lr as f32, cfg.momentum as f32)?;
    let mut order: Vec<usize> = (0..task_data.len()).collect();
    let mut last_epoch_loss = 0.0;

    for epoch in 0..epochs {
        opt.lr = gradnet::step_lr(cfg.lr, cfg.lr_decay, epoch, &milestones) as f32;
        order.shuffle(&mut rng::rng_for(
            seed,
            &[purpose::SHUFFLE, t as u64, epoch as u64],
        ));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let path = [t as u64, epoch as u64, b as u64];
            let mut aug_rng = rng::rng_for(seed, &[purpose::AUGMENT, path[0], path[1], path[2]]);
            let mut batch: Vec<(Cow<'_, Array>, usize)> =
                Vec::with_capacity(chunk.len() + cfg.memory_batch_size);
            for &i in chunk {
                let s = &task_data.samples[i];
                let x = if cfg.augment {
                    Cow::Owned(augment(&s.x, &mut aug_rng))
                } else {
                    Cow::Borrowed(&s.x)
                };
                batch.push((x, s.label));
            }
            let mem_seed = derive_seed(seed, &[purpose::MEMORY_BATCH, path[0], path[1], path[2]]);
            for item in state.mem.retrieve_batch(cfg.memory_batch_size, mem_seed) {
                let x = if cfg.augment && item.augmentable {
                    Cow::Owned(augment(item.x, &mut aug_rng))
                } else {
                    Cow::Borrowed(item.x)
                };
                batch.push((x, item.label));
            }
            let refs: Vec<(&Array, usize)> = batch.iter().map(|(x, l)| (x.as_ref(), *l)).collect();
            let (loss, grads) = grad_wrt_params(&state.net, &refs)?;
            opt.step(&mut state.net, &grads)?;
            loss_sum += loss;
            batches += 1;
        }
        last_epoch_loss = loss_sum / batches as f64;
    }
    Ok(last_epoch_loss)
}

/// Settings for one end-to-end run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub budget: Budget,
    /// Robust samples per class.
    pub k_clr: usize,
    pub width: usize,
    pub blocks: usize,
}

impl ExperimentConfig {
    pub fn new(strategy: Strategy) -> Self {
        let blocks = 2;
        Self {
            strategy,
            train: TrainConfig::default(),
            distill: DistillConfig::new(blocks),
            budget: Budget::Total(32),
            k_clr: 4,
            width: 32,
            blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.strategy == Strategy::RobustRehearsal {
            self.distill.validate(self.blocks)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub matrix: AccuracyMatrix,
    pub state: ExperimentState,
    pub distillations: usize,
    pub reconsolidations: usize,
}

impl ExperimentOutcome {
    pub fn aca(&self) -> Result<f64> {
        crate::metrics::aca(&self.matrix)
    }
}

/// Sources for a new class: current task samples of other classes, or
/// stored exemplars of other classes when the task holds a single class.
fn source_pool(task_data: &LabeledDataset, mem: &RehearsalMemory) -> LabeledDataset {
    if task_data.classes().len() > 1 {
        return task_data.clone();
    }
    let mut pool = task_data.clone();
    for &c in mem.seen_classes() {
        pool.samples.extend(mem.originals(c).iter().cloned());
    }
    pool
}

fn distill_new_classes(
    state: &ExperimentState,
    task_data: &LabeledDataset,
    classes: &[usize],
    cfg: &DistillConfig,
    t: usize,
) -> Result<Vec<(usize, Vec<RobustSample>)>> {
    let pool = source_pool(task_data, &state.mem);
    let mut jobs: Vec<(&Sample, &Sample, u64)> = Vec::new();
    for &c in classes {
        for target in state.mem.robust_targets(c) {
            let seed = derive_seed(state.seed, &[purpose::SOURCE, t as u64, target.id]);
            let source = pick_source(&pool, c, seed)?;
            jobs.push((source, target, seed));
        }
    }
    let results = jobs
        .par_iter()
        .map(|&(source, target, seed)| distill_sample(&state.net, source, target, cfg, t, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(group_by_class(classes, results))
}

fn reconsolidate_old_classes(
    state: &ExperimentState,
    classes: &[usize],
    cfg: &DistillConfig,
    t: usize,
) -> Result<Vec<(usize, Vec<RobustSample>)>> {
    let mut jobs: Vec<(&RobustSample, &Sample)> = Vec::new();
    for &c in classes {
        for prior in state.mem.robust(c) {
            let target = state
                .mem
                .exemplar(prior.target_id)
                .ok_or(Error::MissingExemplar(prior.target_id))?;
            jobs.push((prior, target));
        }
    }
    let results = jobs
        .par_iter()
        .map(|&(prior, target)| reconsolidate_toward(&state.net, prior, target, cfg, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(group_by_class(classes, results))
}

fn group_by_class(
    classes: &[usize],
    samples: Vec<RobustSample>,
) -> Vec<(usize, Vec<RobustSample>)> {
    let mut out: Vec<(usize, Vec<RobustSample>)> =
        classes.iter().map(|&c| (c, Vec::new())).collect();
    for s in samples {
        if let Some((_, list)) = out.iter_mut().find(|(c, _)| *c == s.class_id) {
            list.push(s);
        }
    }
    out
}

fn write_task_artifacts(state: &ExperimentState, matrix: &AccuracyMatrix, dir: &Path, t: usize) -> Result<()> {
    let task_dir = dir.join(format!("task-{t}"));
    fs::create_dir_all(&task_dir)?;
    gradnet::save_network(&state.net, &task_dir.join("checkpoint.gnet"))?;
    state.mem.save_snapshot(&task_dir.join("memory"))?;
    for &c in state.mem.seen_classes() {
        for r in state.mem.robust(c) {
            export_robust_sample(
                r,
                &task_dir.join("robust"),
                &format!("class{}_target{}", r.class_id, r.target_id),
            )?;
        }
    }
    matrix.save_csv(&dir.join("accuracy_matrix.csv"))?;
    Ok(())
}

/// Run every task of `protocol` in order. When `artifacts` is set, writes a
/// checkpoint, a memory snapshot and robust-sample images per task, and the
/// accuracy matrix.
pub fn run_experiment(
    protocol: &TaskSequence,
    data: &DatasetSplits,
    cfg: &ExperimentConfig,
    seed: u64,
    artifacts: Option<&Path>,
) -> Result<ExperimentOutcome> {
    protocol.validate()?;
    cfg.validate()?;
    let input_shape = data
        .input_shape()
        .ok_or(Error::EmptyDataset)?
        .to_vec();
    let classes = data.class_count();
    if let Some(c) = protocol.classes().into_iter().find(|&c| c >= classes) {
        return Err(Error::Protocol(format!(
            "protocol uses class {c} but the dataset has {classes}"
        )));
    }
    let layout = Layout::new(&input_shape, cfg.width, cfg.blocks, classes);
    let net = Network::init_xavier(layout, derive_seed(seed, &[purpose::INIT]))?;
    let mem = RehearsalMemory::new(
        cfg.budget,
        if cfg.strategy == Strategy::RobustRehearsal {
            cfg.k_clr
        } else {
            0
        },
    );
    let mut state = ExperimentState::new(net, mem, seed);
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;

    let test_splits: Vec<LabeledDataset> = protocol
        .tasks
        .iter()
        .map(|cls| data.test.restrict(cls))
        .collect();
    let mut matrix = AccuracyMatrix::new(protocol.tasks.len());
    let mut distillations = 0;
    let mut reconsolidations = 0;

    for (ti, task_classes) in protocol.tasks.iter().enumerate() {
        let t = ti + 1;
        let mut step = || -> Result<TaskRecord> {
            let task_data = data.train.restrict(task_classes);
            let loss = train_task(&mut state, &task_data, &train_cfg)?;
            let old_classes = state.mem.seen_classes().to_vec();

            if cfg.strategy.uses_memory() {
                state
                    .mem
                    .insert_task_exemplars(&task_data, t, derive_seed(seed, &[purpose::EXEMPLARS]))?;
            } else {
                state.mem.mark_seen(task_classes)?;
            }

            let (mut distilled, mut reconsolidated) = (0, 0);
            if cfg.strategy == Strategy::RobustRehearsal && cfg.k_clr > 0 {
                let fresh = distill_new_classes(&state, &task_data, task_classes, &cfg.distill, t)?;
                let renewed = reconsolidate_old_classes(&state, &old_classes, &cfg.distill, t)?;
                for (c, samples) in fresh {
                    distilled += samples.len();
                    state.mem.replace_robust(c, samples)?;
                }
                for (c, samples) in renewed {
                    reconsolidated += samples.len();
                    state.mem.replace_robust(c, samples)?;
                }
            }

            let mut accuracies = Vec::with_capacity(t);
            for (i, ds) in test_splits.iter().take(t).enumerate() {
                let acc = accuracy(&state.net, ds)?;
                matrix.set(ti, i, acc)?;
                accuracies.push(acc);
            }
            Ok(TaskRecord {
                task: t,
                classes: task_classes.clone(),
                accuracies,
                final_train_loss: loss,
                distilled,
                reconsolidated,
            })
        };
        let record = step().map_err(|e| e.at_task(t))?;
        distillations += record.distilled;
        reconsolidations += record.reconsolidated;
        state.history.push(record);
        state.task_index += 1;
        if let Some(dir) = artifacts {
            write_task_artifacts(&state, &matrix, dir, t).map_err(|e| e.at_task(t))?;
        }
    }

    Ok(ExperimentOutcome {
        matrix,
        state,
        distillations,
        reconsolidations,
    })
}
