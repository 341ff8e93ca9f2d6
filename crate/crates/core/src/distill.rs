//! Robust-sample distillation: gradient descent on an input so that it
//! matches a target exemplar in input space, in every block's feature space,
//! and in logit space, and re-consolidation of stored robust samples after
//! the model changes.
//!
//! The objective for a target `t` is
//!
//! ```text
//! L(x) = alpha ||x - t||^2 + sum_i beta_i ||f_i(x) - f_i(t)||^2 + gamma ||z(x) - z(t)||^2
//! ```
//!
//! minimized from a source input with momentum SGD on `x` only.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::gradnet::{
    self, grad_wrt_input, ForwardTrace, LossSeed, Network, TraceLoss,
};
use crate::gradnet::backward::{FeatureDistance, InputDistance, LogitDistance};
use crate::memory::RehearsalMemory;
use crate::netpbm;
use crate::protocols::{LabeledDataset, Sample};
use crate::rng::{self, purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Input-space weight.
    pub alpha: f64,
    /// Per-block feature weights; length must equal the block count.
    pub betas: Vec<f64>,
    /// Logit-space weight.
    pub gamma: f64,
    /// Input learning rate.
    pub eta: f64,
    pub momentum: f64,
    pub steps: usize,
    /// Cosine-anneal `eta` to zero over `steps`.
    pub anneal: bool,
}

impl DistillConfig {
    /// Unit weights for a network with `blocks` residual blocks.
    pub fn new(blocks: usize) -> Self {
        Self {
            alpha: 1.0,
            betas: vec![1.0; blocks],
            gamma: 1.0,
            eta: 1e-3,
            momentum: 0.9,
            steps: 2000,
            anneal: true,
        }
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        if self.betas.len() != blocks {
            return Err(Error::InvalidConfig(format!(
                "{} feature weights for {blocks} blocks",
                self.betas.len()
            )));
        }
        let weights = std::iter::once(self.alpha)
            .chain(self.betas.iter().copied())
            .chain(std::iter::once(self.gamma));
        let mut any_positive = false;
        for w in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "distillation weight {w} must be finite and >= 0"
                )));
            }
            any_positive |= w > 0.0;
        }
        if !any_positive {
            return Err(Error::InvalidConfig(
                "at least one distillation weight must be positive".into(),
            ));
        }
        if !(self.eta > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.steps == 0 {
            return Err(Error::InvalidConfig(
                "distillation needs eta > 0, momentum in [0, 1) and steps > 0".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate for step `s` (0-based).
    pub fn lr_at(&self, s: usize) -> f64 {
        if self.anneal {
            gradnet::cosine_lr(self.eta, s, self.steps)
        } else {
            self.eta
        }
    }
}

/// A distilled sample and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustSample {
    pub x_clr: Array,
    pub class_id: usize,
    /// Id of the stored exemplar the sample was distilled toward.
    pub target_id: u64,
    /// Id of the sample the first distillation started from.
    pub source_id: u64,
    pub distilled_at_task: usize,
    pub final_loss: f64,
    pub seed: u64,
}

/// Input-space term.
pub fn loss_input(x: &Array, target: &Array, alpha: f64) -> Result<f64> {
    Ok(alpha * x.sq_dist(target)?)
}

/// Feature-space term over every block output.
pub fn loss_feature(net: &Network, x: &Array, target: &Array, betas: &[f64]) -> Result<f64> {
    if betas.len() != net.n_blocks() {
        return Err(Error::ShapeMismatch {
            context: "feature weights vs block count",
            left: vec![betas.len()],
            right: vec![net.n_blocks()],
        });
    }
    let fx = net.forward_with_features(x)?;
    let ft = net.forward_with_features(target)?;
    let mut total = 0.0;
    for ((a, b), &beta) in fx.features.iter().zip(&ft.features).zip(betas) {
        total += beta * a.sq_dist(b)?;
    }
    Ok(total)
}

/// Logit-space term.
pub fn loss_prediction(net: &Network, x: &Array, target: &Array, gamma: f64) -> Result<f64> {
    let zx = net.logits(x)?;
    let zt = net.logits(target)?;
    Ok(gamma * zx.sq_dist(&zt)?)
}

/// Sum of the three terms.
pub fn total_loss(net: &Network, x: &Array, target: &Array, cfg: &DistillConfig) -> Result<f64> {
    cfg.validate(net.n_blocks())?;
    Ok(loss_input(x, target, cfg.alpha)?
        + loss_feature(net, x, target, &cfg.betas)?
        + loss_prediction(net, x, target, cfg.gamma)?)
}

/// The distillation objective with the target's trace computed once.
pub struct DistillObjective<'a> {
    target: &'a Array,
    target_trace: ForwardTrace,
    cfg: &'a DistillConfig,
}

impl<'a> DistillObjective<'a> {
    pub fn new(net: &Network, target: &'a Array, cfg: &'a DistillConfig) -> Result<Self> {
        cfg.validate(net.n_blocks())?;
        Ok(Self {
            target,
            target_trace: net.forward_with_features(target)?,
            cfg,
        })
    }
}

impl TraceLoss for DistillObjective<'_> {
    fn evaluate(&self, x: &Array, trace: &ForwardTrace) -> Result<LossSeed> {
        let mut seed = InputDistance {
            target: self.target,
            coef: self.cfg.alpha,
        }
        .evaluate(x, trace)?;
        seed.merge(
            FeatureDistance {
                targets: &self.target_trace.features,
                coefs: &self.cfg.betas,
            }
            .evaluate(x, trace)?,
        );
        seed.merge(
            LogitDistance {
                target: &self.target_trace.logits,
                coef: self.cfg.gamma,
            }
            .evaluate(x, trace)?,
        );
        Ok(seed)
    }
}

/// Observer hook called after every step with `(step, x, loss before the step)`.
pub type StepObserver<'a> = &'a mut dyn FnMut(usize, &Array, f64);

/// Run the input optimization from `start` toward `target`. Returns the
/// optimized input and its loss.
pub fn optimize_input(
    net: &Network,
    start: &Array,
    target: &Array,
    cfg: &DistillConfig,
    mut observer: Option<StepObserver<'_>>,
) -> Result<(Array, f64)> {
    net.check_input(start)?;
    net.check_input(target)?;
    let objective = DistillObjective::new(net, target, cfg)?;
    let mut x = start.clone();
    let mut velocity = vec![0.0f32; x.len()];
    for s in 0..cfg.steps {
        let (loss, grad) = grad_wrt_input(net, &x, &objective).map_err(|e| match e {
            Error::NonFinite(_) => Error::DistillDiverged {
                step: s,
                loss: f64::NAN,
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::DistillDiverged { step: s, loss });
        }
        let lr = cfg.lr_at(s) as f32;
        gradnet::sgd_step(
            x.data_mut(),
            grad.data(),
            &mut velocity,
            lr,
            cfg.momentum as f32,
        )
        .map_err(|_| Error::DistillDiverged { step: s, loss })?;
        if let Some(obs) = observer.as_mut() {
            obs(s, &x, loss);
        }
    }
    let trace = net.forward_with_features(&x)?;
    let final_loss = objective.evaluate(&x, &trace)?.value;
    if !final_loss.is_finite() {
        return Err(Error::DistillDiverged {
            step: cfg.steps,
            loss: final_loss,
        });
    }
    Ok((x, final_loss))
}

/// Distill a robust sample for `target` starting from `source`.
pub fn distill_sample(
    net: &Network,
    source: &Sample,
    target: &Sample,
    cfg: &DistillConfig,
    task: usize,
    seed: u64,
) -> Result<RobustSample> {
    distill_sample_observed(net, source, target, cfg, task, seed, None)
}

pub fn distill_sample_observed(
    net: &Network,
    source: &Sample,
    target: &Sample,
    cfg: &DistillConfig,
    task: usize,
    seed: u64,
    observer: Option<StepObserver<'_>>,
) -> Result<RobustSample> {
    let (x_clr, final_loss) = optimize_input(net, &source.x, &target.x, cfg, observer)?;
    Ok(RobustSample {
        x_clr,
        class_id: target.label,
        target_id: target.id,
        source_id: source.id,
        distilled_at_task: task,
        final_loss,
        seed,
    })
}

/// Re-distill `prior` under the current network, starting from its own
/// `x_clr` and aiming at the exemplar it references in `mem`.
pub fn reconsolidate_sample(
    net: &Network,
    prior: &RobustSample,
    mem: &RehearsalMemory,
    cfg: &DistillConfig,
    task: usize,
) -> Result<RobustSample> {
    let target = mem
        .exemplar(prior.target_id)
        .ok_or(Error::MissingExemplar(prior.target_id))?;
    reconsolidate_toward(net, prior, target, cfg, task)
}

/// As [`reconsolidate_sample`], with the target exemplar given directly.
pub fn reconsolidate_toward(
    net: &Network,
    prior: &RobustSample,
    target: &Sample,
    cfg: &DistillConfig,
    task: usize,
) -> Result<RobustSample> {
    if target.id != prior.target_id || target.label != prior.class_id {
        return Err(Error::InvalidConfig(format!(
            "robust sample (class {}, target {}) does not match exemplar (class {}, id {})",
            prior.class_id, prior.target_id, target.label, target.id
        )));
    }
    let (x_clr, final_loss) = optimize_input(net, &prior.x_clr, &target.x, cfg, None)?;
    Ok(RobustSample {
        x_clr,
        class_id: prior.class_id,
        target_id: prior.target_id,
        source_id: prior.source_id,
        distilled_at_task: task.max(prior.distilled_at_task),
        final_loss,
        seed: prior.seed,
    })
}

/// Uniform draw among samples whose label differs from `target_class`.
pub fn pick_source(dataset: &LabeledDataset, target_class: usize, seed: u64) -> Result<&Sample> {
    let pool: Vec<&Sample> = dataset
        .samples
        .iter()
        .filter(|s| s.label != target_class)
        .collect();
    if pool.is_empty() {
        return Err(Error::EmptySourcePool { target_class });
    }
    let mut r = rng::rng_for(seed, &[purpose::SOURCE, target_class as u64]);
    Ok(pool[r.random_range(0..pool.len())])
}

/// Write `x_clr` (clamped to `[0, 1]`) as PGM/PPM plus a `key=value` sidecar.
/// Returns the image path.
pub fn export_robust_sample(sample: &RobustSample, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let rgb = matches!(sample.x_clr.shape(), [3, _, _]);
    let img = dir.join(format!("{stem}.{}", if rgb { "ppm" } else { "pgm" }));
    netpbm::write_image(&sample.x_clr.clamped(0.0, 1.0), &img)?;
    let meta = format!(
        "class_id={}\ntask={}\nfinal_loss={}\nseed={}\ntarget_id={}\nsource_id={}\n",
        sample.class_id,
        sample.distilled_at_task,
        sample.final_loss,
        sample.seed,
        sample.target_id,
        sample.source_id
    );
    fs::write(dir.join(format!("{stem}.meta")), meta)?;
    Ok(img)
}
