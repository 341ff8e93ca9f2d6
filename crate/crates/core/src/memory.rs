//! Rehearsal memory: original exemplars per class plus the robust samples
//! distilled from them. Only originals count against the budget.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::{index, SliceRandom};

use crate::array::Array;
use crate::distill::RobustSample;
use crate::error::{Error, Result};
use crate::gradnet::checkpoint::{read_records, RecordWriter};
use crate::protocols::{LabeledDataset, Sample};
use crate::rng::{self, purpose};

/// How many original exemplars may be stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    /// Shared by all seen classes, split equally (floor).
    Total(usize),
    /// Fixed allowance per class.
    PerClass(usize),
}

impl Budget {
    fn per_class(self, classes: usize) -> Result<usize> {
        match self {
            Budget::Total(b) => {
                if classes > 0 && b < classes {
                    return Err(Error::BudgetTooSmall { budget: b, classes });
                }
                Ok(b.checked_div(classes).unwrap_or(b))
            }
            Budget::PerClass(0) => Err(Error::BudgetTooSmall {
                budget: 0,
                classes,
            }),
            Budget::PerClass(k) => Ok(k),
        }
    }

    pub fn capacity(self, classes: usize) -> usize {
        match self {
            Budget::Total(b) => b,
            Budget::PerClass(k) => k * classes,
        }
    }
}

/// A draw from [`RehearsalMemory::retrieve_batch`].
#[derive(Debug, Clone, Copy)]
pub struct MemoryItem<'a> {
    pub x: &'a Array,
    pub label: usize,
    /// Originals may be augmented; robust samples are replayed as stored.
    pub augmentable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RehearsalMemory {
    budget: Budget,
    k_clr: usize,
    originals: BTreeMap<usize, Vec<Sample>>,
    robust: BTreeMap<usize, Vec<RobustSample>>,
    seen_classes: Vec<usize>,
}

impl RehearsalMemory {
    pub fn new(budget: Budget, k_clr: usize) -> Self {
        Self {
            budget,
            k_clr,
            originals: BTreeMap::new(),
            robust: BTreeMap::new(),
            seen_classes: Vec::new(),
        }
    }

    pub fn budget(&self) -> Budget {
        self.budget
    }

    pub fn k_clr(&self) -> usize {
        self.k_clr
    }

    /// Change the robust allowance; lists already stored are truncated.
    pub fn set_k_clr(&mut self, k_clr: usize) {
        self.k_clr = k_clr;
        for list in self.robust.values_mut() {
            list.truncate(k_clr);
        }
    }

    pub fn seen_classes(&self) -> &[usize] {
        &self.seen_classes
    }

    pub fn originals(&self, class: usize) -> &[Sample] {
        self.originals.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn robust(&self, class: usize) -> &[RobustSample] {
        self.robust.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn original_count(&self) -> usize {
        self.originals.values().map(Vec::len).sum()
    }

    pub fn robust_count(&self) -> usize {
        self.robust.values().map(Vec::len).sum()
    }

    /// `|M_R| = |M| + |M_clr|`.
    pub fn len(&self) -> usize {
        self.original_count() + self.robust_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn exemplar(&self, id: u64) -> Option<&Sample> {
        self.originals.values().flatten().find(|s| s.id == id)
    }

    /// Targets for new robust samples of `class`: its first `k_clr` exemplars.
    pub fn robust_targets(&self, class: usize) -> &[Sample] {
        let o = self.originals(class);
        &o[..o.len().min(self.k_clr)]
    }

    fn check_new_classes(&self, classes: &[usize]) -> Result<()> {
        if let Some(c) = classes.iter().find(|c| self.seen_classes.contains(c)) {
            return Err(Error::Protocol(format!("class {c} has already been seen")));
        }
        Ok(())
    }

    /// Record classes as seen without storing exemplars (memoryless training).
    pub fn mark_seen(&mut self, classes: &[usize]) -> Result<()> {
        self.check_new_classes(classes)?;
        self.seen_classes.extend_from_slice(classes);
        Ok(())
    }

    /// Add exemplars for the classes of `task_data` and rebalance the budget.
    ///
    /// New classes get a uniform random subset of their samples. Old classes
    /// shrink to the new per-class share by dropping their most recently
    /// selected exemplars; robust samples whose target is dropped go too.
    pub fn insert_task_exemplars(
        &mut self,
        task_data: &LabeledDataset,
        task: usize,
        seed: u64,
    ) -> Result<()> {
        let new_classes = task_data.classes();
        self.check_new_classes(&new_classes)?;
        let total_classes = self.seen_classes.len() + new_classes.len();
        let share = self.budget.per_class(total_classes)?;

        for list in self.originals.values_mut() {
            list.truncate(share);
        }
        for (class, list) in &mut self.robust {
            let kept: BTreeSet<u64> = self
                .originals
                .get(class)
                .map(|o| o.iter().map(|s| s.id).collect())
                .unwrap_or_default();
            list.retain(|r| kept.contains(&r.target_id));
        }

        for &c in &new_classes {
            let pool: Vec<&Sample> = task_data.of_class(c).collect();
            let mut r = rng::rng_for(seed, &[purpose::EXEMPLARS, task as u64, c as u64]);
            let take = share.min(pool.len());
            let chosen = index::sample(&mut r, pool.len(), take);
            self.originals
                .insert(c, chosen.iter().map(|i| pool[i].clone()).collect());
            self.seen_classes.push(c);
        }
        Ok(())
    }

    /// Uniform sample without replacement from originals and robust samples.
    pub fn retrieve_batch(&self, batch_size: usize, seed: u64) -> Vec<MemoryItem<'_>> {
        let mut all: Vec<MemoryItem<'_>> = Vec::with_capacity(self.len());
        for list in self.originals.values() {
            all.extend(list.iter().map(|s| MemoryItem {
                x: &s.x,
                label: s.label,
                augmentable: true,
            }));
        }
        for list in self.robust.values() {
            all.extend(list.iter().map(|r| MemoryItem {
                x: &r.x_clr,
                label: r.class_id,
                augmentable: false,
            }));
        }
        if all.is_empty() || batch_size == 0 {
            return Vec::new();
        }
        let mut r = rng::rng_for(seed, &[purpose::MEMORY_BATCH]);
        if batch_size >= all.len() {
            all.shuffle(&mut r);
            return all;
        }
        index::sample(&mut r, all.len(), batch_size)
            .iter()
            .map(|i| all[i])
            .collect()
    }

    /// Replace every robust sample of `class` with `samples`.
    pub fn replace_robust(&mut self, class: usize, samples: Vec<RobustSample>) -> Result<()> {
        if !self.seen_classes.contains(&class) {
            return Err(Error::UnseenClass(class));
        }
        if samples.len() > self.k_clr {
            return Err(Error::InvalidConfig(format!(
                "{} robust samples for class {class} exceed k_clr = {}",
                samples.len(),
                self.k_clr
            )));
        }
        for s in &samples {
            if s.class_id != class {
                return Err(Error::InvalidConfig(format!(
                    "robust sample of class {} offered for class {class}",
                    s.class_id
                )));
            }
            if !self.originals(class).iter().any(|o| o.id == s.target_id) {
                return Err(Error::MissingExemplar(s.target_id));
            }
        }
        self.robust.insert(class, samples);
        Ok(())
    }

    /// Check every structural invariant. Used by tests and after loading.
    pub fn check_invariants(&self) -> Result<()> {
        let classes = self.seen_classes.len();
        let cap = self.budget.capacity(classes);
        if self.original_count() > cap {
            return Err(Error::InvalidConfig(format!(
                "{} originals exceed capacity {cap}",
                self.original_count()
            )));
        }
        for (class, list) in &self.robust {
            if !self.seen_classes.contains(class) {
                return Err(Error::UnseenClass(*class));
            }
            if list.len() > self.k_clr {
                return Err(Error::InvalidConfig(format!(
                    "class {class} holds {} robust samples, k_clr is {}",
                    list.len(),
                    self.k_clr
                )));
            }
            let mut targets = BTreeSet::new();
            for r in list {
                if r.class_id != *class || !self.originals(*class).iter().any(|o| o.id == r.target_id) {
                    return Err(Error::MissingExemplar(r.target_id));
                }
                if !targets.insert(r.target_id) {
                    return Err(Error::InvalidConfig(format!(
                        "two robust samples share target {}",
                        r.target_id
                    )));
                }
            }
        }
        for class in self.originals.keys() {
            if !self.seen_classes.contains(class) {
                return Err(Error::UnseenClass(*class));
            }
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Snapshots: `manifest.txt` + `arrays.bin`

    pub fn save_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut m = String::new();
        let budget = match self.budget {
            Budget::Total(b) => format!("total {b}"),
            Budget::PerClass(k) => format!("per_class {k}"),
        };
        writeln!(m, "budget {budget}").unwrap();
        writeln!(m, "k_clr {}", self.k_clr).unwrap();
        let seen: Vec<String> = self.seen_classes.iter().map(|c| c.to_string()).collect();
        writeln!(m, "seen {}", seen.join(" ")).unwrap();

        let f = fs::File::create(dir.join("arrays.bin"))?;
        let mut rw = RecordWriter::new(BufWriter::new(f), &[])?;
        for (class, list) in &self.originals {
            for s in list {
                writeln!(m, "exemplar id={} label={}", s.id, s.label).unwrap();
                debug_assert_eq!(*class, s.label);
                rw.record(&format!("exemplar.{}", s.id), &s.x)?;
            }
        }
        for list in self.robust.values() {
            for r in list {
                writeln!(
                    m,
                    "robust class={} target={} source={} task={} loss={} seed={}",
                    r.class_id,
                    r.target_id,
                    r.source_id,
                    r.distilled_at_task,
                    r.final_loss,
                    r.seed
                )
                .unwrap();
                rw.record(&format!("robust.{}.{}", r.class_id, r.target_id), &r.x_clr)?;
            }
        }
        rw.finish()?;
        fs::write(dir.join("manifest.txt"), m)?;
        Ok(())
    }

    pub fn load_snapshot(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let text = fs::read_to_string(&manifest_path)?;
        let recs = read_records(fs::File::open(dir.join("arrays.bin"))?)?;
        let mut arrays = recs.arrays.into_iter();

        let mut budget = None;
        let mut k_clr = None;
        let mut mem_seen = Vec::new();
        let mut originals: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
        let mut robust: BTreeMap<usize, Vec<RobustSample>> = BTreeMap::new();

        for (i, line) in text.lines().enumerate() {
            let bad = |msg: String| Error::Parse {
                path: manifest_path.clone(),
                line: i + 1,
                msg,
            };
            let mut words = line.split_whitespace();
            let Some(head) = words.next() else { continue };
            let rest: Vec<&str> = words.collect();
            let kv = |key: &str| -> Result<&str> {
                rest.iter()
                    .find_map(|w| w.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                    .ok_or_else(|| bad(format!("missing {key}=")))
            };
            let num = |s: &str| -> Result<u64> {
                s.parse().map_err(|_| bad(format!("bad number {s:?}")))
            };
            let mut take_array = |name: String| -> Result<Array> {
                match arrays.next() {
                    Some((n, a)) if n == name => Ok(a),
                    Some((n, _)) => Err(bad(format!("expected array {name}, found {n}"))),
                    None => Err(bad(format!("missing array {name}"))),
                }
            };
            match head {
                "budget" => {
                    budget = Some(match rest.as_slice() {
                        ["total", b] => Budget::Total(num(b)? as usize),
                        ["per_class", k] => Budget::PerClass(num(k)? as usize),
                        _ => return Err(bad("bad budget line".into())),
                    })
                }
                "k_clr" => {
                    k_clr = Some(num(rest.first().copied().unwrap_or(""))? as usize);
                }
                "seen" => {
                    mem_seen = rest
                        .iter()
                        .map(|w| num(w).map(|v| v as usize))
                        .collect::<Result<_>>()?;
                }
                "exemplar" => {
                    let id = num(kv("id")?)?;
                    let label = num(kv("label")?)? as usize;
                    let x = take_array(format!("exemplar.{id}"))?;
                    originals.entry(label).or_default().push(Sample { id, x, label });
                }
                "robust" => {
                    let class_id = num(kv("class")?)? as usize;
                    let target_id = num(kv("target")?)?;
                    let final_loss: f64 = kv("loss")?
                        .parse()
                        .map_err(|_| bad("bad loss".into()))?;
                    let x_clr = take_array(format!("robust.{class_id}.{target_id}"))?;
                    robust.entry(class_id).or_default().push(RobustSample {
                        x_clr,
                        class_id,
                        target_id,
                        source_id: num(kv("source")?)?,
                        distilled_at_task: num(kv("task")?)? as usize,
                        final_loss,
                        seed: num(kv("seed")?)?,
                    });
                }
                other => return Err(bad(format!("unknown entry {other:?}"))),
            }
        }
        if arrays.next().is_some() {
            return Err(Error::format("memory snapshot", "unreferenced arrays"));
        }
        let mem = Self {
            budget: budget.ok_or_else(|| Error::format("memory snapshot", "missing budget"))?,
            k_clr: k_clr.ok_or_else(|| Error::format("memory snapshot", "missing k_clr"))?,
            originals,
            robust,
            seen_classes: mem_seen,
        };
        mem.check_invariants()?;
        Ok(mem)
    }
}
