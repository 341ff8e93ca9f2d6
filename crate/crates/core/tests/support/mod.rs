//! Reference implementations used as oracles by the integration tests.
//! Everything here is plain f64 arithmetic written straight from the
//! network equations, sharing no code with the library's forward or
//! backward passes.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rr_core::gradnet::{Layout, Network};
use rr_core::protocols::Sample;
use rr_core::Array;

/// Parameters copied out of a network as f64 vectors, in canonical order.
#[derive(Clone, Debug)]
pub struct RefNet {
    pub params: Vec<Vec<f64>>,
    pub shapes: Vec<Vec<usize>>,
    pub blocks: usize,
}

/// Output of the reference forward pass.
#[derive(Clone, Debug)]
pub struct RefTrace {
    pub features: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    /// Every rectifier input, in evaluation order.
    pub pre: Vec<f64>,
}

impl RefNet {
    pub fn from_network(net: &Network) -> Self {
        let p = net.params();
        Self {
            params: p
                .iter()
                .map(|(_, a)| a.data().iter().map(|&v| f64::from(v)).collect())
                .collect(),
            shapes: p.iter().map(|(_, a)| a.shape().to_vec()).collect(),
            blocks: net.n_blocks(),
        }
    }

    fn affine(&self, w: usize, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.shapes[w][0], self.shapes[w][1]);
        assert_eq!(cols, x.len());
        let weight = &self.params[w];
        let bias = &self.params[w + 1];
        (0..rows)
            .map(|r| {
                let mut acc = bias[r];
                for c in 0..cols {
                    acc += weight[r * cols + c] * x[c];
                }
                acc
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> RefTrace {
        let mut pre = Vec::new();
        let s = self.affine(0, x);
        pre.extend_from_slice(&s);
        let mut h: Vec<f64> = s.iter().map(|&v| v.max(0.0)).collect();
        let mut features = Vec::new();
        for i in 0..self.blocks {
            let base = 2 + 4 * i;
            let a = self.affine(base, &h);
            pre.extend_from_slice(&a);
            let r: Vec<f64> = a.iter().map(|&v| v.max(0.0)).collect();
            let b = self.affine(base + 2, &r);
            h = h.iter().zip(&b).map(|(u, v)| u + v).collect();
            features.push(h.clone());
        }
        let logits = self.affine(2 + 4 * self.blocks, &h);
        RefTrace {
            features,
            logits,
            pre,
        }
    }

    /// Sign pattern of every rectifier at `x`.
    pub fn pattern(&self, x: &[f64]) -> Vec<bool> {
        self.forward(x).pre.iter().map(|&v| v > 0.0).collect()
    }
}

pub fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Three-space distillation loss in f64.
pub fn ref_distill_loss(
    net: &RefNet,
    x: &[f64],
    target: &[f64],
    alpha: f64,
    betas: &[f64],
    gamma: f64,
) -> f64 {
    let tx = net.forward(x);
    let tt = net.forward(target);
    let mut l = alpha * sq(x, target);
    for (i, b) in betas.iter().enumerate() {
        l += b * sq(&tx.features[i], &tt.features[i]);
    }
    l + gamma * sq(&tx.logits, &tt.logits)
}

pub fn ref_cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn ref_mean_ce(net: &RefNet, batch: &[(Vec<f64>, usize)]) -> f64 {
    batch
        .iter()
        .map(|(x, l)| ref_cross_entropy(&net.forward(x).logits, *l))
        .sum::<f64>()
        / batch.len() as f64
}

pub fn to_f64(a: &Array) -> Vec<f64> {
    a.data().iter().map(|&v| f64::from(v)).collect()
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let up = f(&p);
    p[i] -= 2.0 * h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Largest componentwise relative error, with the denominator floored at
/// `1e-3` times the largest reference magnitude so that near-zero entries
/// are judged on an absolute scale.
pub fn max_rel_err(analytic: &[f64], numeric: &[(usize, f64)]) -> f64 {
    let scale = numeric.iter().map(|(_, n)| n.abs()).fold(0.0, f64::max);
    numeric
        .iter()
        .map(|&(i, n)| {
            let a = analytic[i];
            (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale).max(1e-12)
        })
        .fold(0.0, f64::max)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random small network with nonzero biases.
pub fn random_net(r: &mut ChaCha8Rng) -> Network {
    let d = r.random_range(2..=32);
    let width = r.random_range(2..=12);
    let blocks = r.random_range(1..=3);
    let classes = r.random_range(2..=5);
    let mut net = Network::init_xavier(Layout::new(&[d], width, blocks, classes), r.random())
        .expect("valid layout");
    for p in net.params_mut() {
        if p.shape().len() == 1 {
            for v in p.data_mut() {
                *v = r.random_range(-0.5..0.5);
            }
        }
    }
    net
}

pub fn random_input(r: &mut ChaCha8Rng, d: usize) -> Array {
    Array::from_vec((0..d).map(|_| r.random_range(-1.0f32..1.0)).collect())
}

/// A network whose rectifiers stay active for every input in `[-1, 1]^d`:
/// small weights and large positive biases ahead of each rectifier.
pub fn affine_regime_net(d: usize, width: usize, blocks: usize, classes: usize, seed: u64) -> Network {
    let mut net = Network::init_xavier(Layout::new(&[d], width, blocks, classes), seed).unwrap();
    let scale = 0.5;
    for w in [&mut net.stem.weight, &mut net.head.weight] {
        w.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    net.stem.bias.data_mut().iter_mut().for_each(|v| *v = 4.0);
    for b in &mut net.blocks {
        b.fc1.weight.data_mut().iter_mut().for_each(|v| *v *= 0.05);
        b.fc2.weight.data_mut().iter_mut().for_each(|v| *v *= 0.05);
        b.fc1.bias.data_mut().iter_mut().for_each(|v| *v = 10.0);
    }
    net
}

/// Summary of a batch of finite-difference checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub nets: usize,
    pub input_err: f64,
    pub param_err: f64,
    pub coords: usize,
    pub skipped: usize,
}

const FD_STEP: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-4;

fn draw_off_kink(net: &RefNet, r: &mut ChaCha8Rng, d: usize) -> Option<Array> {
    (0..50)
        .map(|_| random_input(r, d))
        .find(|x| {
            net.forward(&to_f64(x))
                .pre
                .iter()
                .all(|v| v.abs() >= KINK_MARGIN)
        })
}

/// Compare analytic gradients of the distillation loss (w.r.t. the input)
/// and of mean cross-entropy (w.r.t. every parameter) with central
/// differences of the f64 reference, on `n` random networks.
pub fn gradient_oracle_check(n: usize, seed: u64) -> GradCheck {
    use rr_core::distill::{DistillConfig, DistillObjective};
    use rr_core::gradnet::{grad_wrt_input, grad_wrt_params};

    let mut r = rng(seed);
    let mut out = GradCheck::default();
    while out.nets < n {
        let net = random_net(&mut r);
        let reference = RefNet::from_network(&net);
        let d = net.input_shape()[0];
        let (Some(x), Some(t)) = (
            draw_off_kink(&reference, &mut r, d),
            draw_off_kink(&reference, &mut r, d),
        ) else {
            continue;
        };
        out.nets += 1;

        let mut cfg = DistillConfig::new(net.n_blocks());
        cfg.alpha = r.random_range(0.1..2.0);
        cfg.betas = (0..net.n_blocks()).map(|_| r.random_range(0.1..2.0)).collect();
        cfg.gamma = r.random_range(0.1..2.0);
        let objective = DistillObjective::new(&net, &t, &cfg).unwrap();
        let (_, g) = grad_wrt_input(&net, &x, &objective).unwrap();
        let analytic = to_f64(&g);
        let (xf, tf) = (to_f64(&x), to_f64(&t));
        let f = |v: &[f64]| ref_distill_loss(&reference, v, &tf, cfg.alpha, &cfg.betas, cfg.gamma);
        let base = reference.pattern(&xf);
        let mut numeric = Vec::new();
        for i in 0..d {
            let mut up = xf.clone();
            up[i] += FD_STEP;
            let mut down = xf.clone();
            down[i] -= FD_STEP;
            if reference.pattern(&up) != base || reference.pattern(&down) != base {
                out.skipped += 1;
                continue;
            }
            numeric.push((i, central_diff(&f, &xf, i, FD_STEP)));
        }
        out.coords += numeric.len();
        out.input_err = out.input_err.max(max_rel_err(&analytic, &numeric));

        let mut batch: Vec<(Array, usize)> = Vec::new();
        for _ in 0..3 {
            if let Some(v) = draw_off_kink(&reference, &mut r, d) {
                batch.push((v, r.random_range(0..net.classes())));
            }
        }
        if batch.is_empty() {
            continue;
        }
        let refs: Vec<(&Array, usize)> = batch.iter().map(|(v, l)| (v, *l)).collect();
        let (_, grads) = grad_wrt_params(&net, &refs).unwrap();
        let batch64: Vec<(Vec<f64>, usize)> = batch.iter().map(|(v, l)| (to_f64(v), *l)).collect();
        let patterns: Vec<Vec<bool>> = batch64.iter().map(|(v, _)| reference.pattern(v)).collect();
        for (k, tensor) in grads.tensors.iter().enumerate() {
            let analytic = to_f64(tensor);
            let mut numeric = Vec::new();
            for i in 0..analytic.len() {
                let mut up = reference.clone();
                up.params[k][i] += FD_STEP;
                let mut down = reference.clone();
                down.params[k][i] -= FD_STEP;
                let kinked = batch64.iter().zip(&patterns).any(|((v, _), p)| {
                    &up.pattern(v) != p || &down.pattern(v) != p
                });
                if kinked {
                    out.skipped += 1;
                    continue;
                }
                let n = (ref_mean_ce(&up, &batch64) - ref_mean_ce(&down, &batch64)) / (2.0 * FD_STEP);
                numeric.push((i, n));
            }
            out.coords += numeric.len();
            out.param_err = out.param_err.max(max_rel_err(&analytic, &numeric));
        }
    }
    out
}

/// Distillation on networks that stay affine over the whole input box
/// reaches the target: every loss term vanishes only at `x = target`.
pub fn affine_regime_convergence(cases: usize, seed: u64) -> (f64, f64, bool) {
    let mut r = rng(seed);
    let mut worst_ratio = 0.0f64;
    let mut worst_dist = 0.0f64;
    let mut stayed_affine = true;
    for case in 0..cases {
        let d = 4 + (case * 7) % 29;
        let blocks = 1 + case % 3;
        let net = affine_regime_net(d, 8, blocks, 3, seed + case as u64);
        let reference = RefNet::from_network(&net);
        let source = Sample { id: 1, x: random_input(&mut r, d), label: 0 };
        let target = Sample { id: 2, x: random_input(&mut r, d), label: 1 };
        let cfg = rr_core::distill::DistillConfig::new(blocks);
        let initial = rr_core::distill::total_loss(&net, &source.x, &target.x, &cfg).unwrap();
        let mut obs = |_: usize, x: &Array, _: f64| {
            if reference.forward(&to_f64(x)).pre.iter().any(|&v| v <= 0.0) {
                stayed_affine = false;
            }
        };
        let out = rr_core::distill::distill_sample_observed(&net, &source, &target, &cfg, 1, 0, Some(&mut obs)).unwrap();
        worst_ratio = worst_ratio.max(out.final_loss / initial);
        worst_dist = worst_dist.max(sq(&to_f64(&out.x_clr), &to_f64(&target.x)).sqrt());
    }
    (worst_ratio, worst_dist, stayed_affine)
}

/// Table-driven attitude oracle: each class as a (pitch band, roll band)
/// predicate. Returns every class whose predicate holds.
pub fn attitude_matches(p: f64, r: f64, a: f64) -> Vec<u8> {
    let up = |v: f64| v > a;
    let down = |v: f64| v < -a;
    let level = |v: f64| -a <= v && v <= a;
    type Band<'a> = &'a dyn Fn(f64) -> bool;
    let table: [(u8, Band, Band); 9] = [
        (0, &up, &level),
        (1, &down, &level),
        (2, &level, &up),
        (3, &level, &down),
        (4, &up, &up),
        (5, &up, &down),
        (6, &down, &up),
        (7, &down, &down),
        (8, &level, &level),
    ];
    table
        .iter()
        .filter(|(_, fp, fr)| fp(p) && fr(r))
        .map(|(c, _, _)| *c)
        .collect()
}

/// Compare `attitude_class` with the oracle on the grid
/// `{-6, -5.9, ..., 6}^2` at alpha = 3. Returns (points, mismatches).
pub fn attitude_grid_check() -> (usize, usize) {
    let grid: Vec<f64> = (-60..=60).map(|k| k as f64 / 10.0).collect();
    let mut points = 0;
    let mut bad = 0;
    for &p in &grid {
        for &r in &grid {
            points += 1;
            let want = attitude_matches(p, r, 3.0);
            let got = rr_core::protocols::attitude_class(p, r, 3.0).unwrap();
            if want.len() != 1 || want[0] != got {
                bad += 1;
            }
        }
    }
    (points, bad)
}

/// Pearson chi-square p-value of `counts` against a uniform distribution.
pub fn chi_square_uniform_p(counts: &[usize]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

/// Estimate the usefulness of a constructed feature whose population
/// correlation with balanced `±1` labels is exactly `c`:
/// `f = c y + sqrt(1 - c^2) z` with `z ~ N(0, 1)`.
pub fn usefulness_estimate(c: f64, n: usize, seed: u64) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    let labels: Vec<i8> = (0..n).map(|_| if r.random_bool(0.5) { 1 } else { -1 }).collect();
    let inputs: Vec<Array> = labels
        .iter()
        .map(|&y| {
            let z: f64 = StandardNormal.sample(&mut r);
            Array::from_vec(vec![(c * f64::from(y) + (1.0 - c * c).sqrt() * z) as f32])
        })
        .collect();
    let set = rr_core::metrics::BinarySet {
        inputs: inputs.iter().collect(),
        labels,
    };
    rr_core::metrics::usefulness(|x| f64::from(x.data()[0]), &set).unwrap()
}

/// A small, fast stream for pipeline tests.
pub fn tiny_stream(seed: u64) -> (rr_core::TaskSequence, rr_core::DatasetSplits) {
    let data = rr_core::protocols::gen_blobs(&rr_core::protocols::BlobSpec::new(4, 20, 6, 4.0, seed))
        .unwrap();
    let proto = rr_core::protocols::make_split(4, 2, None, seed).unwrap();
    (proto, data)
}

pub fn tiny_config(strategy: rr_core::Strategy) -> rr_core::ExperimentConfig {
    let mut cfg = rr_core::ExperimentConfig::new(strategy);
    cfg.width = 8;
    cfg.blocks = 1;
    cfg.distill = rr_core::DistillConfig::new(1);
    cfg.distill.steps = 40;
    cfg.train.epochs_first = 3;
    cfg.train.epochs_rest = 2;
    cfg.train.batch_size = 8;
    cfg.train.memory_batch_size = 8;
    cfg.budget = rr_core::Budget::Total(8);
    cfg.k_clr = 2;
    cfg
}
