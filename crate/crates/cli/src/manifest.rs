//! Experiment manifest: TOML with one section per concern. Every field has
//! a default except where noted; `Manifest::resolve` validates the whole
//! file and reports problems by field name.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rr_core::distill::DistillConfig;
use rr_core::memory::Budget;
use rr_core::protocols::{gen_blobs, load_dataset, make_b0, make_b50, make_split, BlobSpec};
use rr_core::trainer::{ExperimentConfig, Strategy, TrainConfig};
use rr_core::{DatasetSplits, TaskSequence};

/// A manifest problem tied to a field path such as `dataset.path`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub msg: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.msg)
    }
}

impl std::error::Error for FieldError {}

fn field_err(field: &str, msg: impl Into<String>) -> FieldError {
    FieldError {
        field: field.to_string(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default)]
    pub strategies: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub memory: MemorySection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub distill: DistillSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// `blobs` (generated) or `dir` (labels.csv plus sample files).
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: "blobs".into(),
            path: None,
            classes: 6,
            per_class: 200,
            side: 16,
            separation: 3.0,
            noise: 0.15,
            seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    /// `split`, `b0` or `b50`.
    pub kind: String,
    /// Task count for `split`.
    pub tasks: usize,
    /// Optional size of the first task for `split`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first: Option<usize>,
    /// Classes per step for `b0` and `b50`.
    pub increment: usize,
    /// Class-order seed.
    pub seed: u64,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            kind: "split".into(),
            tasks: 3,
            first: None,
            increment: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySection {
    /// Total exemplar budget shared across seen classes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    /// Fixed exemplars per class; exclusive with `budget`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    pub k_clr: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self {
            budget: None,
            per_class: None,
            k_clr: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub width: usize,
    pub blocks: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            width: 32,
            blocks: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub milestones: Vec<f64>,
    pub epochs_first: usize,
    pub epochs_rest: usize,
    pub batch_size: usize,
    /// Defaults to `batch_size`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory_batch_size: Option<usize>,
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            momentum: t.momentum,
            lr_decay: t.lr_decay,
            milestones: t.milestones,
            epochs_first: t.epochs_first,
            epochs_rest: t.epochs_rest,
            batch_size: t.batch_size,
            memory_batch_size: None,
            augment: t.augment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub alpha: f64,
    /// One weight per block; empty means 1.0 for every block.
    pub betas: Vec<f64>,
    pub gamma: f64,
    pub eta: f64,
    pub momentum: f64,
    pub steps: usize,
    pub anneal: bool,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::new(0);
        Self {
            alpha: d.alpha,
            betas: Vec::new(),
            gamma: d.gamma,
            eta: d.eta,
            momentum: d.momentum,
            steps: d.steps,
            anneal: d.anneal,
        }
    }
}

/// A validated manifest, ready to run.
#[derive(Debug, Clone)]
pub struct Resolved {
    /// The manifest with every default filled in.
    pub manifest: Manifest,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub budget: Budget,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, FieldError> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].lines().count().max(1);
                    format!("line {line}")
                })
                .unwrap_or_else(|| "manifest".into());
            field_err(&field, msg)
        })
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| field_err("manifest", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Validate every section. `base_dir` anchors relative paths.
    pub fn resolve(mut self, base_dir: &Path) -> Result<Resolved, Vec<FieldError>> {
        let mut errs = Vec::new();

        let mut names = self.strategies.clone();
        if let Some(s) = self.strategy.take() {
            if names.is_empty() {
                names.push(s);
            } else {
                errs.push(field_err("strategy", "give either strategy or strategies, not both"));
            }
        }
        if names.is_empty() {
            errs.push(field_err("strategies", "at least one strategy is required"));
        }
        let mut strategies = Vec::new();
        for n in &names {
            match n.parse::<Strategy>() {
                Ok(s) if strategies.contains(&s) => {
                    errs.push(field_err("strategies", format!("{s} listed twice")))
                }
                Ok(s) => strategies.push(s),
                Err(e) => errs.push(field_err("strategies", e)),
            }
        }
        self.strategies = names;

        if self.seeds.is_empty() {
            errs.push(field_err("seeds", "at least one seed is required"));
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            errs.push(field_err("seeds", "seeds must be distinct"));
        }

        let ds = &mut self.dataset;
        match ds.kind.as_str() {
            "blobs" => {
                if ds.path.is_some() {
                    errs.push(field_err("dataset.path", "only used when dataset.kind = \"dir\""));
                }
                if ds.classes < 2 {
                    errs.push(field_err("dataset.classes", "need at least 2 classes"));
                }
                if ds.per_class < 5 {
                    errs.push(field_err("dataset.per_class", "need at least 5 samples per class"));
                }
                if ds.side == 0 {
                    errs.push(field_err("dataset.side", "must be positive"));
                }
                if !(ds.separation >= 0.0) {
                    errs.push(field_err("dataset.separation", "must be >= 0"));
                }
                if !(ds.noise > 0.0) {
                    errs.push(field_err("dataset.noise", "must be > 0"));
                }
            }
            "dir" => match &ds.path {
                None => errs.push(field_err(
                    "dataset.path",
                    "required when dataset.kind = \"dir\"",
                )),
                Some(p) => {
                    let full = base_dir.join(p);
                    if !full.join("labels.csv").is_file() {
                        errs.push(field_err(
                            "dataset.path",
                            format!("{} has no labels.csv", full.display()),
                        ));
                    }
                    ds.path = Some(full);
                }
            },
            other => errs.push(field_err(
                "dataset.kind",
                format!("unknown kind {other:?} (expected blobs or dir)"),
            )),
        }

        let budget = match (self.memory.budget, self.memory.per_class) {
            (Some(_), Some(_)) => {
                errs.push(field_err("memory", "give either budget or per_class, not both"));
                Budget::Total(0)
            }
            (Some(b), None) => Budget::Total(b),
            (None, Some(k)) => Budget::PerClass(k),
            (None, None) => {
                if self.protocol.kind == "b50" {
                    self.memory.per_class = Some(20);
                    Budget::PerClass(20)
                } else {
                    self.memory.budget = Some(32);
                    Budget::Total(32)
                }
            }
        };
        if strategies.iter().any(|s| s.uses_memory()) {
            match budget {
                Budget::Total(0) | Budget::PerClass(0) => errs.push(field_err(
                    "memory.budget",
                    "rehearsal strategies need a positive budget",
                )),
                _ => {}
            }
        }
        if strategies.contains(&Strategy::RobustRehearsal) && self.memory.k_clr == 0 {
            errs.push(field_err("memory.k_clr", "robust-rehearsal needs k_clr > 0"));
        }

        if !(1..=8).contains(&self.network.blocks) {
            errs.push(field_err("network.blocks", "must be in 1..=8"));
        }
        if self.network.width == 0 {
            errs.push(field_err("network.width", "must be positive"));
        }

        if self.train.memory_batch_size.is_none() {
            self.train.memory_batch_size = Some(self.train.batch_size);
        }
        if let Err(e) = self.train_config().validate() {
            errs.push(field_err("train", e.to_string()));
        }

        if self.distill.betas.is_empty() {
            self.distill.betas = vec![1.0; self.network.blocks];
        }
        if strategies.contains(&Strategy::RobustRehearsal) {
            if self.distill.betas.len() != self.network.blocks {
                errs.push(field_err(
                    "distill.betas",
                    format!(
                        "{} weights for {} blocks",
                        self.distill.betas.len(),
                        self.network.blocks
                    ),
                ));
            } else if let Err(e) = self.distill_config().validate(self.network.blocks) {
                errs.push(field_err("distill", e.to_string()));
            }
        }

        match self.protocol.kind.as_str() {
            "split" | "b0" | "b50" => {
                if let Err(e) = self.task_sequence_checked(self.dataset.classes) {
                    if self.dataset.kind == "blobs" {
                        errs.push(field_err("protocol", e.to_string()));
                    }
                }
            }
            other => errs.push(field_err(
                "protocol.kind",
                format!("unknown protocol {other:?} (expected split, b0 or b50)"),
            )),
        }

        if let Some(o) = &self.output {
            self.output = Some(base_dir.join(o));
        }

        if errs.is_empty() {
            Ok(Resolved {
                seeds: self.seeds.clone(),
                manifest: self,
                strategies,
                budget,
                base_dir: base_dir.to_path_buf(),
            })
        } else {
            Err(errs)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            momentum: t.momentum,
            lr_decay: t.lr_decay,
            epochs_first: t.epochs_first,
            epochs_rest: t.epochs_rest,
            batch_size: t.batch_size,
            memory_batch_size: t.memory_batch_size.unwrap_or(t.batch_size),
            milestones: t.milestones.clone(),
            augment: t.augment,
            seed: 0,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            alpha: d.alpha,
            betas: if d.betas.is_empty() {
                vec![1.0; self.network.blocks]
            } else {
                d.betas.clone()
            },
            gamma: d.gamma,
            eta: d.eta,
            momentum: d.momentum,
            steps: d.steps,
            anneal: d.anneal,
        }
    }

    fn task_sequence_checked(&self, classes: usize) -> rr_core::Result<TaskSequence> {
        let p = &self.protocol;
        match p.kind.as_str() {
            "b0" => make_b0(classes, p.increment, p.seed),
            "b50" => make_b50(classes, p.increment, p.seed),
            _ => make_split(classes, p.tasks, p.first, p.seed),
        }
    }
}

impl Resolved {
    pub fn experiment_config(&self, strategy: Strategy) -> ExperimentConfig {
        let m = &self.manifest;
        ExperimentConfig {
            strategy,
            train: m.train_config(),
            distill: m.distill_config(),
            budget: self.budget,
            k_clr: m.memory.k_clr,
            width: m.network.width,
            blocks: m.network.blocks,
        }
    }

    pub fn load_data(&self) -> rr_core::Result<DatasetSplits> {
        let d = &self.manifest.dataset;
        match &d.path {
            Some(p) => load_dataset(p, None),
            None => {
                let mut spec = BlobSpec::new(d.classes, d.per_class, d.side, d.separation, d.seed);
                spec.noise = d.noise;
                gen_blobs(&spec)
            }
        }
    }

    pub fn task_sequence(&self, classes: usize) -> rr_core::Result<TaskSequence> {
        Ok(self
            .manifest
            .task_sequence_checked(classes)?
            .with_budget(self.budget))
    }

    /// The manifest with every default made explicit.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&self.manifest).expect("manifest serializes")
    }
}
