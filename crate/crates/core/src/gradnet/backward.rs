//! Reverse-mode gradients through [`Network`].
//!
//! A loss over a forward trace reports its value together with seed
//! gradients on the input, on each block output and on the logits. A single
//! backward sweep turns those seeds into a gradient on the input and,
//! optionally, on every parameter.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::gradnet::network::{ForwardTrace, Network};

/// Loss value plus its partial derivatives w.r.t. the trace's tensors.
/// Empty vectors mean "no direct dependence".
#[derive(Debug, Clone, Default)]
pub struct LossSeed {
    pub value: f64,
    pub d_input: Vec<f64>,
    pub d_features: Vec<Vec<f64>>,
    pub d_logits: Vec<f64>,
}

fn add_into(dst: &mut Vec<f64>, src: Vec<f64>) {
    if dst.is_empty() {
        *dst = src;
    } else if !src.is_empty() {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

impl LossSeed {
    pub fn merge(&mut self, other: LossSeed) {
        self.value += other.value;
        add_into(&mut self.d_input, other.d_input);
        if self.d_features.len() < other.d_features.len() {
            self.d_features.resize(other.d_features.len(), Vec::new());
        }
        for (d, s) in self.d_features.iter_mut().zip(other.d_features) {
            add_into(d, s);
        }
        add_into(&mut self.d_logits, other.d_logits);
    }
}

/// A scalar loss evaluated on an input and its forward trace.
pub trait TraceLoss: Sync {
    fn evaluate(&self, x: &Array, trace: &ForwardTrace) -> Result<LossSeed>;
}

impl<F> TraceLoss for F
where
    F: Fn(&Array, &ForwardTrace) -> Result<LossSeed> + Sync,
{
    fn evaluate(&self, x: &Array, trace: &ForwardTrace) -> Result<LossSeed> {
        self(x, trace)
    }
}

/// `coef * ||a - b||^2` and its gradient w.r.t. `a`.
fn weighted_sq(a: &[f32], b: &[f32], coef: f64) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            value += d * d;
            2.0 * coef * d
        })
        .collect();
    (coef * value, grad)
}

fn same_shape(context: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantLoss(pub f64);

impl TraceLoss for ConstantLoss {
    fn evaluate(&self, _x: &Array, _trace: &ForwardTrace) -> Result<LossSeed> {
        Ok(LossSeed {
            value: self.0,
            ..LossSeed::default()
        })
    }
}

/// `coef * ||x - target||^2` on the input itself.
#[derive(Debug, Clone)]
pub struct InputDistance<'a> {
    pub target: &'a Array,
    pub coef: f64,
}

impl TraceLoss for InputDistance<'_> {
    fn evaluate(&self, x: &Array, _trace: &ForwardTrace) -> Result<LossSeed> {
        same_shape("input distance", x, self.target)?;
        if self.coef == 0.0 {
            return Ok(LossSeed::default());
        }
        let (value, d_input) = weighted_sq(x.data(), self.target.data(), self.coef);
        Ok(LossSeed {
            value,
            d_input,
            ..LossSeed::default()
        })
    }
}

/// `sum_i coefs[i] * ||f_i(x) - targets[i]||^2` over block outputs.
#[derive(Debug, Clone)]
pub struct FeatureDistance<'a> {
    pub targets: &'a [Array],
    pub coefs: &'a [f64],
}

impl TraceLoss for FeatureDistance<'_> {
    fn evaluate(&self, _x: &Array, trace: &ForwardTrace) -> Result<LossSeed> {
        if self.coefs.len() != trace.features.len() || self.targets.len() != trace.features.len()
        {
            return Err(Error::ShapeMismatch {
                context: "feature weights vs block count",
                left: vec![self.coefs.len(), self.targets.len()],
                right: vec![trace.features.len()],
            });
        }
        let mut seed = LossSeed {
            d_features: vec![Vec::new(); trace.features.len()],
            ..LossSeed::default()
        };
        for (i, ((f, t), &c)) in trace
            .features
            .iter()
            .zip(self.targets)
            .zip(self.coefs)
            .enumerate()
        {
            same_shape("feature distance", f, t)?;
            if c == 0.0 {
                continue;
            }
            let (v, g) = weighted_sq(f.data(), t.data(), c);
            seed.value += v;
            seed.d_features[i] = g;
        }
        Ok(seed)
    }
}

/// `coef * ||logits(x) - target||^2`.
#[derive(Debug, Clone)]
pub struct LogitDistance<'a> {
    pub target: &'a Array,
    pub coef: f64,
}

impl TraceLoss for LogitDistance<'_> {
    fn evaluate(&self, _x: &Array, trace: &ForwardTrace) -> Result<LossSeed> {
        same_shape("logit distance", &trace.logits, self.target)?;
        if self.coef == 0.0 {
            return Ok(LossSeed::default());
        }
        let (value, d_logits) = weighted_sq(trace.logits.data(), self.target.data(), self.coef);
        Ok(LossSeed {
            value,
            d_logits,
            ..LossSeed::default()
        })
    }
}

/// Softmax cross-entropy against an integer label.
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropy {
    pub label: usize,
}

/// Returns `(-log softmax(z)[label], softmax(z) - onehot(label))`.
pub fn cross_entropy(logits: &[f32], label: usize) -> (f64, Vec<f64>) {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let exps: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (f64::from(logits[label]) - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / sum - if i == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

impl TraceLoss for CrossEntropy {
    fn evaluate(&self, _x: &Array, trace: &ForwardTrace) -> Result<LossSeed> {
        if self.label >= trace.logits.len() {
            return Err(Error::InvalidConfig(format!(
                "label {} out of range for {} classes",
                self.label,
                trace.logits.len()
            )));
        }
        let (value, d_logits) = cross_entropy(trace.logits.data(), self.label);
        Ok(LossSeed {
            value,
            d_logits,
            ..LossSeed::default()
        })
    }
}

/// Sum of several losses.
pub struct SumLoss<'a>(pub Vec<&'a dyn TraceLoss>);

impl TraceLoss for SumLoss<'_> {
    fn evaluate(&self, x: &Array, trace: &ForwardTrace) -> Result<LossSeed> {
        let mut total = LossSeed::default();
        for part in &self.0 {
            total.merge(part.evaluate(x, trace)?);
        }
        Ok(total)
    }
}

/// Per-parameter gradient arrays, ordered like [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Array>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

struct GradAccum {
    bufs: Vec<Vec<f64>>,
}

impl GradAccum {
    fn new(net: &Network) -> Self {
        Self {
            bufs: net.params().iter().map(|(_, a)| vec![0.0; a.len()]).collect(),
        }
    }

    fn finish(self, net: &Network, scale: f64) -> Result<Gradients> {
        let tensors = self
            .bufs
            .into_iter()
            .zip(net.params())
            .map(|(buf, (name, p))| {
                let data: Vec<f32> = buf.into_iter().map(|g| (g * scale) as f32).collect();
                let arr = Array::new(p.shape().to_vec(), data)?;
                arr.ensure_finite(&format!("gradient of {name}"))?;
                Ok(arr)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { tensors })
    }
}

/// `g += W^T delta`, and if `grads` is set, `dW += delta x^T`, `db += delta`.
fn dense_backward(
    weight: &[f32],
    input: &[f32],
    delta: &[f64],
    grad_in: &mut [f64],
    grads: Option<(&mut [f64], &mut [f64])>,
) {
    let n_in = input.len();
    for (row, &d) in weight.chunks_exact(n_in).zip(delta) {
        if d == 0.0 {
            continue;
        }
        for (g, &w) in grad_in.iter_mut().zip(row) {
            *g += f64::from(w) * d;
        }
    }
    if let Some((dw, db)) = grads {
        for ((dw_row, dbi), &d) in dw.chunks_exact_mut(n_in).zip(db.iter_mut()).zip(delta) {
            *dbi += d;
            if d == 0.0 {
                continue;
            }
            for (g, &x) in dw_row.iter_mut().zip(input) {
                *g += d * f64::from(x);
            }
        }
    }
}

fn relu_mask(pre: &[f32], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(pre) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// One backward sweep. Returns the gradient w.r.t. the flattened input.
fn backprop(
    net: &Network,
    trace: &ForwardTrace,
    seed: &LossSeed,
    mut accum: Option<&mut GradAccum>,
) -> Vec<f64> {
    let w = net.layout().width;
    let n = net.n_blocks();
    // Parameter buffer indices: stem (0,1), block i (2+4i .. 5+4i), head (2+4n, 3+4n).
    let head_w = 2 + 4 * n;

    let mut g_h = vec![0.0; w];
    if !seed.d_logits.is_empty() {
        let grads = accum.as_deref_mut().map(|a| {
            let (l, r) = a.bufs.split_at_mut(head_w + 1);
            (l[head_w].as_mut_slice(), r[0].as_mut_slice())
        });
        let h_n: &[f32] = if n == 0 {
            &trace.stem_out
        } else {
            trace.features[n - 1].data()
        };
        dense_backward(net.head.weight.data(), h_n, &seed.d_logits, &mut g_h, grads);
    }

    for i in (0..n).rev() {
        if let Some(df) = seed.d_features.get(i) {
            for (g, d) in g_h.iter_mut().zip(df) {
                *g += d;
            }
        }
        let block = &net.blocks[i];
        let cache = &trace.blocks[i];
        let h_prev: &[f32] = if i == 0 {
            &trace.stem_out
        } else {
            trace.features[i - 1].data()
        };
        let base = 2 + 4 * i;

        // residual branch: fc2 ∘ relu ∘ fc1
        let mut g_act = vec![0.0; w];
        {
            let grads = accum.as_deref_mut().map(|a| {
                let (l, r) = a.bufs.split_at_mut(base + 3);
                (l[base + 2].as_mut_slice(), r[0].as_mut_slice())
            });
            dense_backward(block.fc2.weight.data(), &cache.act, &g_h, &mut g_act, grads);
        }
        relu_mask(&cache.pre, &mut g_act);
        let mut g_prev = g_h.clone();
        {
            let grads = accum.as_deref_mut().map(|a| {
                let (l, r) = a.bufs.split_at_mut(base + 1);
                (l[base].as_mut_slice(), r[0].as_mut_slice())
            });
            dense_backward(block.fc1.weight.data(), h_prev, &g_act, &mut g_prev, grads);
        }
        g_h = g_prev;
    }

    relu_mask(&trace.stem_pre, &mut g_h);
    let mut g_x = vec![0.0; trace.input.len()];
    {
        let grads = accum.map(|a| {
            let (l, r) = a.bufs.split_at_mut(1);
            (l[0].as_mut_slice(), r[0].as_mut_slice())
        });
        dense_backward(net.stem.weight.data(), &trace.input, &g_h, &mut g_x, grads);
    }
    for (g, d) in g_x.iter_mut().zip(&seed.d_input) {
        *g += d;
    }
    g_x
}

fn checked_value(seed: &LossSeed) -> Result<()> {
    if seed.value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss value {}", seed.value)))
    }
}

/// Gradient of `loss` w.r.t. the input `x`. Returns `(loss value, dL/dx)`.
pub fn grad_wrt_input(net: &Network, x: &Array, loss: &dyn TraceLoss) -> Result<(f64, Array)> {
    let trace = net.forward_with_features(x)?;
    let seed = loss.evaluate(x, &trace)?;
    checked_value(&seed)?;
    let g = backprop(net, &trace, &seed, None);
    let grad = Array::new(
        x.shape().to_vec(),
        g.into_iter().map(|v| v as f32).collect(),
    )?;
    grad.ensure_finite("input gradient")?;
    Ok((seed.value, grad))
}

/// Mean cross-entropy over `batch` and its gradient w.r.t. every parameter.
pub fn grad_wrt_params(net: &Network, batch: &[(&Array, usize)]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut accum = GradAccum::new(net);
    let mut total = 0.0;
    for &(x, label) in batch {
        let trace = net.forward_with_features(x)?;
        let seed = CrossEntropy { label }.evaluate(x, &trace)?;
        checked_value(&seed)?;
        total += seed.value;
        backprop(net, &trace, &seed, Some(&mut accum));
    }
    let scale = 1.0 / batch.len() as f64;
    Ok((total * scale, accum.finish(net, scale)?))
}

/// Gradient of an arbitrary trace loss w.r.t. every parameter for one input.
pub fn grad_wrt_params_for(
    net: &Network,
    x: &Array,
    loss: &dyn TraceLoss,
) -> Result<(f64, Gradients)> {
    let trace = net.forward_with_features(x)?;
    let seed = loss.evaluate(x, &trace)?;
    checked_value(&seed)?;
    let mut accum = GradAccum::new(net);
    backprop(net, &trace, &seed, Some(&mut accum));
    Ok((seed.value, accum.finish(net, 1.0)?))
}
