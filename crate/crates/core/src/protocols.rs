//! Datasets, class-incremental task construction, the synthetic blob
//! generator, directory loading, and attitude binning.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::gradnet::checkpoint::{read_records, RecordWriter};
use crate::memory::Budget;
use crate::netpbm;
use crate::rng::{self, purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One labelled input.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub x: Array,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub class_count: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, class_count: usize, split: Split) -> Result<Self> {
        let ds = Self {
            samples,
            class_count,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.samples.len());
        let shape = self.samples.first().map(|s| s.x.shape().to_vec());
        for s in &self.samples {
            if s.label >= self.class_count {
                return Err(Error::InvalidConfig(format!(
                    "sample {} has label {} outside [0, {})",
                    s.id, s.label, self.class_count
                )));
            }
            if !ids.insert(s.id) {
                return Err(Error::InvalidConfig(format!("duplicate sample id {}", s.id)));
            }
            if Some(s.x.shape()) != shape.as_deref() {
                return Err(Error::InvalidConfig(format!(
                    "sample {} has shape {:?}, expected {:?}",
                    s.id,
                    s.x.shape(),
                    shape.as_deref().unwrap_or(&[])
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.x.shape())
    }

    /// Distinct labels present, ascending.
    pub fn classes(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| s.label)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Subset restricted to the given classes, order preserved.
    pub fn restrict(&self, classes: &[usize]) -> LabeledDataset {
        let keep: HashSet<usize> = classes.iter().copied().collect();
        LabeledDataset {
            samples: self
                .samples
                .iter()
                .filter(|s| keep.contains(&s.label))
                .cloned()
                .collect(),
            class_count: self.class_count,
            split: self.split,
        }
    }

    pub fn of_class(&self, class: usize) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.label == class)
    }

    pub fn as_batch(&self) -> Vec<(&Array, usize)> {
        self.samples.iter().map(|s| (&s.x, s.label)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl DatasetSplits {
    pub fn class_count(&self) -> usize {
        self.train.class_count
    }

    pub fn input_shape(&self) -> Option<&[usize]> {
        self.train.input_shape()
    }

    pub fn split(&self, s: Split) -> &LabeledDataset {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

// ---------------------------------------------------------------------------
// Task sequences

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolName {
    /// Fixed number of tasks, optionally with a larger first task.
    Split(usize),
    /// Equal increments from zero.
    B0,
    /// Half the classes up front, then equal increments.
    B50,
}

impl fmt::Display for ProtocolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtocolName::Split(n) => write!(f, "split-{n}"),
            ProtocolName::B0 => f.write_str("B0"),
            ProtocolName::B50 => f.write_str("B50"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSequence {
    pub tasks: Vec<Vec<usize>>,
    pub protocol: ProtocolName,
    pub budget: Budget,
}

impl TaskSequence {
    pub fn with_budget(mut self, budget: Budget) -> Self {
        self.budget = budget;
        self
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(Vec::len).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.tasks.iter().flatten().copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.tasks.iter().any(Vec::is_empty) {
            return Err(Error::Protocol("every task needs at least one class".into()));
        }
        let mut seen = HashSet::new();
        for c in self.tasks.iter().flatten() {
            if !seen.insert(*c) {
                return Err(Error::Protocol(format!("class {c} appears in two tasks")));
            }
        }
        if self.protocol == ProtocolName::B50
            && self.tasks.len() > 1
            && self.tasks[0].len() < self.tasks[1].len()
        {
            return Err(Error::Protocol(
                "B50 base task must not be smaller than the increments".into(),
            ));
        }
        Ok(())
    }
}

fn class_order(classes: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut rng::rng_for(seed, &[purpose::CLASS_ORDER]));
    order
}

fn chunk_tasks(order: &[usize], sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &s in sizes {
        let mut task = order[at..at + s].to_vec();
        task.sort_unstable();
        out.push(task);
        at += s;
    }
    out
}

/// Split `classes` into `n_tasks` tasks. The first task gets
/// `first_task_size` classes (default: an equal share); the remainder is
/// divided equally among the other tasks.
pub fn make_split(
    classes: usize,
    n_tasks: usize,
    first_task_size: Option<usize>,
    seed: u64,
) -> Result<TaskSequence> {
    if n_tasks == 0 || classes < n_tasks {
        return Err(Error::Protocol(format!(
            "cannot split {classes} classes into {n_tasks} tasks"
        )));
    }
    let sizes = match first_task_size {
        None => {
            if !classes.is_multiple_of(n_tasks) {
                return Err(Error::Protocol(format!(
                    "{classes} classes do not divide into {n_tasks} equal tasks"
                )));
            }
            vec![classes / n_tasks; n_tasks]
        }
        Some(first) => {
            if first == 0 || first > classes {
                return Err(Error::Protocol(format!("bad first task size {first}")));
            }
            let rest = classes - first;
            if n_tasks == 1 {
                if rest != 0 {
                    return Err(Error::Protocol("one task must hold every class".into()));
                }
                vec![first]
            } else {
                let per = rest / (n_tasks - 1);
                if per == 0 || !rest.is_multiple_of(n_tasks - 1) {
                    return Err(Error::Protocol(format!(
                        "{rest} remaining classes do not divide into {} tasks",
                        n_tasks - 1
                    )));
                }
                std::iter::once(first)
                    .chain(std::iter::repeat_n(per, n_tasks - 1))
                    .collect()
            }
        }
    };
    let seq = TaskSequence {
        tasks: chunk_tasks(&class_order(classes, seed), &sizes),
        protocol: ProtocolName::Split(n_tasks),
        budget: Budget::Total(2000),
    };
    seq.validate()?;
    Ok(seq)
}

/// Equal increments of `increment` classes starting from zero.
pub fn make_b0(classes: usize, increment: usize, seed: u64) -> Result<TaskSequence> {
    if increment == 0 || !classes.is_multiple_of(increment) {
        return Err(Error::Protocol(format!(
            "increment {increment} does not divide {classes}"
        )));
    }
    let mut seq = make_split(classes, classes / increment, None, seed)?;
    seq.protocol = ProtocolName::B0;
    Ok(seq)
}

/// Half the classes in the first task, the rest in equal increments,
/// with a per-class memory budget.
pub fn make_b50(classes: usize, increment: usize, seed: u64) -> Result<TaskSequence> {
    if classes < 2 || !classes.is_multiple_of(2) {
        return Err(Error::Protocol(format!(
            "B50 needs an even class count, got {classes}"
        )));
    }
    let half = classes / 2;
    if increment == 0 || !half.is_multiple_of(increment) {
        return Err(Error::Protocol(format!(
            "increment {increment} does not divide {half}"
        )));
    }
    let sizes: Vec<usize> = std::iter::once(half)
        .chain(std::iter::repeat_n(increment, half / increment))
        .collect();
    let seq = TaskSequence {
        tasks: chunk_tasks(&class_order(classes, seed), &sizes),
        protocol: ProtocolName::B50,
        budget: Budget::PerClass(20),
    };
    seq.validate()?;
    Ok(seq)
}

// ---------------------------------------------------------------------------
// Attitude binning

/// Attitude class for a (pitch, roll) pair in degrees with threshold
/// `alpha`: 0 NU, 1 ND, 2 RP, 3 RN, 4 NU&RP, 5 NU&RN, 6 ND&RP, 7 ND&RN, 8 L.
/// Exceedance is strict; the level band `[-alpha, alpha]` is inclusive.
pub fn attitude_class(pitch: f64, roll: f64, alpha: f64) -> Result<u8> {
    if !pitch.is_finite() || !roll.is_finite() {
        return Err(Error::NonFinite(format!("attitude ({pitch}, {roll})")));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "attitude threshold must be positive, got {alpha}"
        )));
    }
    let band = |v: f64| {
        if v > alpha {
            1i8
        } else if v < -alpha {
            -1
        } else {
            0
        }
    };
    Ok(match (band(pitch), band(roll)) {
        (1, 0) => 0,
        (-1, 0) => 1,
        (0, 1) => 2,
        (0, -1) => 3,
        (1, 1) => 4,
        (1, -1) => 5,
        (-1, 1) => 6,
        (-1, -1) => 7,
        _ => 8,
    })
}

pub const ATTITUDE_NAMES: [&str; 9] = [
    "NU", "ND", "RP", "RN", "NU&RP", "NU&RN", "ND&RP", "ND&RN", "L",
];

// ---------------------------------------------------------------------------
// Synthetic data

/// Parameters of the synthetic class-template generator.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    /// Samples per class across all splits (60/20/20 train/val/test).
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Template amplitude relative to the pixel noise.
    pub separation: f64,
    /// Pixel noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn new(classes: usize, per_class: usize, side: usize, separation: f64, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            height: side,
            width: side,
            separation,
            noise: 0.15,
            seed,
        }
    }
}

/// Smooth class template on an `h x w` grid: a few signed Gaussian bumps,
/// scaled to unit peak magnitude.
fn make_template(h: usize, w: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let bumps = 3;
    let params: Vec<(f64, f64, f64, f64)> = (0..bumps)
        .map(|k| {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let sigma = rng.random_range(1.5..3.0) * (h.max(w) as f64 / 16.0);
            let sign = if k == 0 || rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (cy, cx, sigma, sign)
        })
        .collect();
    let mut t: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            params
                .iter()
                .map(|&(cy, cx, s, sign)| {
                    sign * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp()
                })
                .sum()
        })
        .collect();
    let peak = t.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    t.iter_mut().for_each(|v| *v /= peak);
    t
}

/// Class-conditional samples: `0.5 + gain * separation * noise * T_c + noise * eps`,
/// with per-sample gain in `[0.75, 1.25]` and white Gaussian `eps`.
/// Inputs have shape `[1, height, width]`.
pub fn gen_blobs(spec: &BlobSpec) -> Result<DatasetSplits> {
    if spec.classes == 0 || spec.per_class < 3 || spec.height == 0 || spec.width == 0 {
        return Err(Error::InvalidConfig(
            "blob generator needs classes > 0, per_class >= 3 and a nonempty grid".into(),
        ));
    }
    if !(spec.separation >= 0.0) || !(spec.noise > 0.0) {
        return Err(Error::InvalidConfig(
            "separation must be >= 0 and noise > 0".into(),
        ));
    }
    let (h, w) = (spec.height, spec.width);
    let mut trng = rng::rng_for(spec.seed, &[purpose::DATA, 0]);
    let templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| make_template(h, w, &mut trng))
        .collect();

    let n_train = spec.per_class * 3 / 5;
    let n_val = spec.per_class / 5;
    let n_test = spec.per_class - n_train - n_val;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let amp = spec.separation * spec.noise;

    let mut next_id = 0u64;
    let mut build = |split: Split, count: usize, stream: u64| -> Result<LabeledDataset> {
        let mut samples = Vec::with_capacity(count * spec.classes);
        for (c, tpl) in templates.iter().enumerate() {
            let mut r = rng::rng_for(spec.seed, &[purpose::DATA, stream, c as u64]);
            for _ in 0..count {
                let gain = r.random_range(0.75..1.25);
                let data = tpl
                    .iter()
                    .map(|&t| {
                        let e: f64 = normal.sample(&mut r);
                        (0.5 + gain * amp * t + spec.noise * e) as f32
                    })
                    .collect();
                samples.push(Sample {
                    id: next_id,
                    x: Array::new(vec![1, h, w], data)?,
                    label: c,
                });
                next_id += 1;
            }
        }
        LabeledDataset::new(samples, spec.classes, split)
    };
    Ok(DatasetSplits {
        train: build(Split::Train, n_train, 1)?,
        val: build(Split::Val, n_val, 2)?,
        test: build(Split::Test, n_test, 3)?,
    })
}

// ---------------------------------------------------------------------------
// Directory datasets

/// On-disk encoding for [`write_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    /// `<id>.f32`: a single-record `GRADNET v1` stream.
    Raw,
    /// `<id>.pgm` / `<id>.ppm`, 8-bit.
    Netpbm,
}

fn sample_file(dir: &Path, id: u64) -> Result<PathBuf> {
    for ext in ["f32", "pgm", "ppm"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no array file for sample {id} in {}", dir.display()),
    )))
}

fn read_sample_array(path: &Path) -> Result<Array> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("f32") => {
            let recs = read_records(fs::File::open(path)?)?;
            match <[_; 1]>::try_from(recs.arrays) {
                Ok([(_, arr)]) => Ok(arr),
                Err(_) => Err(Error::format("sample", "expected exactly one record")),
            }
        }
        _ => netpbm::read_image(path),
    }
}

/// Load `labels.csv` (`id,label,split`) and one array file per id.
/// `class_count` bounds labels when given; otherwise it is `max label + 1`.
pub fn load_dataset(dir: &Path, class_count: Option<usize>) -> Result<DatasetSplits> {
    let labels_path = dir.join("labels.csv");
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&labels_path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "label", "split"] {
        return Err(Error::Parse {
            path: labels_path,
            line: 1,
            msg: "header must be id,label,split".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let bad = |msg: String| Error::Parse {
            path: labels_path.clone(),
            line,
            msg,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", rec.len())));
        }
        let id: u64 = rec[0]
            .parse()
            .map_err(|_| bad(format!("id {:?} is not a non-negative integer", &rec[0])))?;
        let label: usize = rec[1]
            .parse()
            .map_err(|_| bad(format!("label {:?} is not a non-negative integer", &rec[1])))?;
        if let Some(c) = class_count {
            if label >= c {
                return Err(bad(format!("label {label} out of range for {c} classes")));
            }
        }
        let split: Split = rec[2].parse().map_err(bad)?;
        rows.push((line, id, label, split));
    }
    let classes = class_count.unwrap_or_else(|| rows.iter().map(|r| r.2 + 1).max().unwrap_or(0));

    let mut parts: [Vec<Sample>; 3] = Default::default();
    let mut shape: Option<Vec<usize>> = None;
    let mut ids = HashSet::new();
    for (line, id, label, split) in rows {
        let bad = |msg: String| Error::Parse {
            path: labels_path.clone(),
            line,
            msg,
        };
        if !ids.insert(id) {
            return Err(bad(format!("duplicate id {id}")));
        }
        let x = read_sample_array(&sample_file(dir, id)?)?;
        match &shape {
            None => shape = Some(x.shape().to_vec()),
            Some(s) if s.as_slice() != x.shape() => {
                return Err(bad(format!(
                    "sample {id} has shape {:?}, expected {s:?}",
                    x.shape()
                )))
            }
            _ => {}
        }
        x.ensure_finite(&format!("sample {id}"))?;
        let slot = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        parts[slot].push(Sample { id, x, label });
    }
    let [train, val, test] = parts;
    Ok(DatasetSplits {
        train: LabeledDataset::new(train, classes, Split::Train)?,
        val: LabeledDataset::new(val, classes, Split::Val)?,
        test: LabeledDataset::new(test, classes, Split::Test)?,
    })
}

/// Write splits in the layout read by [`load_dataset`].
pub fn write_dataset(splits: &DatasetSplits, dir: &Path, format: SampleFormat) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
    w.write_record(["id", "label", "split"])?;
    for ds in [&splits.train, &splits.val, &splits.test] {
        for s in &ds.samples {
            w.write_record([s.id.to_string(), s.label.to_string(), ds.split.to_string()])?;
            match format {
                SampleFormat::Raw => {
                    let f = fs::File::create(dir.join(format!("{}.f32", s.id)))?;
                    let mut rw = RecordWriter::new(std::io::BufWriter::new(f), &[])?;
                    rw.record("x", &s.x)?;
                    rw.finish()?;
                }
                SampleFormat::Netpbm => {
                    let ext = if s.x.shape().first() == Some(&3) && s.x.shape().len() == 3 {
                        "ppm"
                    } else {
                        "pgm"
                    };
                    netpbm::write_image(&s.x, &dir.join(format!("{}.{ext}", s.id)))?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
