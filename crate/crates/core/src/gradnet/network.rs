//! Dense residual classifier: stem, `n` residual blocks, linear head.
//!
//! ```text
//! h0      = relu(W_s x + b_s)
//! h_i     = h_{i-1} + W_2 relu(W_1 h_{i-1} + b_1) + b_2      (i = 1..n)
//! logits  = W_h h_n + b_h
//! ```
//!
//! Each block output `h_i` is exposed as a feature tensor. Zeroing a block's
//! second layer turns the block into the identity.

use rand::distr::{Distribution, Uniform};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

pub const MAX_BLOCKS: usize = 8;

/// Architecture of a [`Network`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub input_shape: Vec<usize>,
    pub width: usize,
    pub blocks: usize,
    pub classes: usize,
}

impl Layout {
    pub fn new(input_shape: &[usize], width: usize, blocks: usize, classes: usize) -> Self {
        Self {
            input_shape: input_shape.to_vec(),
            width,
            blocks,
            classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "input shape {:?} must have positive extents",
                self.input_shape
            )));
        }
        if self.width == 0 || self.classes == 0 {
            return Err(Error::InvalidConfig(
                "width and class count must be positive".into(),
            ));
        }
        if !(1..=MAX_BLOCKS).contains(&self.blocks) {
            return Err(Error::InvalidConfig(format!(
                "block count {} outside 1..={MAX_BLOCKS}",
                self.blocks
            )));
        }
        Ok(())
    }
}

/// Affine map `y = W x + b` with `W` stored as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array,
    pub bias: Array,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array::zeros(&[outputs, inputs]),
            bias: Array::zeros(&[outputs]),
        }
    }

    fn xavier(inputs: usize, outputs: usize, rng: &mut rng::Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt() as f32;
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite xavier bound");
        let data = (0..inputs * outputs).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Array::new(vec![outputs, inputs], data).expect("consistent dense shape"),
            bias: Array::zeros(&[outputs]),
        }
    }

    #[inline]
    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    #[inline]
    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `W x + b` with `f64` accumulation.
    pub(crate) fn apply(&self, x: &[f32], out: &mut Vec<f32>) {
        let n_in = self.inputs();
        debug_assert_eq!(x.len(), n_in);
        out.clear();
        let w = self.weight.data();
        for (row, &b) in w.chunks_exact(n_in).zip(self.bias.data()) {
            let acc: f64 = row
                .iter()
                .zip(x)
                .map(|(&wi, &xi)| f64::from(wi) * f64::from(xi))
                .sum();
            out.push((acc + f64::from(b)) as f32);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub fc1: Dense,
    pub fc2: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layout: Layout,
    pub stem: Dense,
    pub blocks: Vec<Block>,
    pub head: Dense,
    rng_seed: u64,
}

/// Activations of one residual block.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockCache {
    pub pre: Vec<f32>,
    pub act: Vec<f32>,
}

/// Result of [`Network::forward_with_features`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Block outputs `h_1..h_n`.
    pub features: Vec<Array>,
    pub logits: Array,
    pub(crate) input: Vec<f32>,
    pub(crate) stem_pre: Vec<f32>,
    pub(crate) stem_out: Vec<f32>,
    pub(crate) blocks: Vec<BlockCache>,
}

impl ForwardTrace {
    /// Smallest `|pre-activation|` over every rectifier in the pass.
    pub fn min_abs_preactivation(&self) -> f32 {
        self.stem_pre
            .iter()
            .chain(self.blocks.iter().flat_map(|b| b.pre.iter()))
            .fold(f32::INFINITY, |m, v| m.min(v.abs()))
    }
}

fn relu(v: &[f32]) -> Vec<f32> {
    v.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect()
}

impl Network {
    /// Network with every parameter zero.
    pub fn zeros(layout: Layout) -> Result<Self> {
        layout.validate()?;
        let d = layout.input_dim();
        let w = layout.width;
        Ok(Self {
            stem: Dense::zeros(d, w),
            blocks: (0..layout.blocks)
                .map(|_| Block {
                    fc1: Dense::zeros(w, w),
                    fc2: Dense::zeros(w, w),
                })
                .collect(),
            head: Dense::zeros(w, layout.classes),
            layout,
            rng_seed: 0,
        })
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init_xavier(layout: Layout, seed: u64) -> Result<Self> {
        layout.validate()?;
        let mut rng = rng::rng_for(seed, &[purpose::INIT]);
        let d = layout.input_dim();
        let w = layout.width;
        let stem = Dense::xavier(d, w, &mut rng);
        let blocks = (0..layout.blocks)
            .map(|_| Block {
                fc1: Dense::xavier(w, w, &mut rng),
                fc2: Dense::xavier(w, w, &mut rng),
            })
            .collect();
        let head = Dense::xavier(w, layout.classes, &mut rng);
        Ok(Self {
            layout,
            stem,
            blocks,
            head,
            rng_seed: seed,
        })
    }

    pub(crate) fn from_parts(
        layout: Layout,
        stem: Dense,
        blocks: Vec<Block>,
        head: Dense,
        rng_seed: u64,
    ) -> Result<Self> {
        layout.validate()?;
        let net = Self {
            layout,
            stem,
            blocks,
            head,
            rng_seed,
        };
        net.check_consistency()?;
        Ok(net)
    }

    fn check_consistency(&self) -> Result<()> {
        let d = self.layout.input_dim();
        let w = self.layout.width;
        let mut expected = vec![
            ("stem.weight".to_string(), vec![w, d]),
            ("stem.bias".to_string(), vec![w]),
        ];
        for i in 0..self.layout.blocks {
            for fc in ["fc1", "fc2"] {
                expected.push((format!("blocks.{i}.{fc}.weight"), vec![w, w]));
                expected.push((format!("blocks.{i}.{fc}.bias"), vec![w]));
            }
        }
        expected.push(("head.weight".into(), vec![self.layout.classes, w]));
        expected.push(("head.bias".into(), vec![self.layout.classes]));
        let actual = self.params();
        if actual.len() != expected.len() {
            return Err(Error::format("network", "wrong number of parameter arrays"));
        }
        for ((name, shape), (_, arr)) in expected.iter().zip(&actual) {
            if arr.shape() != shape.as_slice() {
                return Err(Error::format(
                    "network",
                    format!("{name} has shape {:?}, expected {shape:?}", arr.shape()),
                ));
            }
            arr.ensure_finite(name)?;
        }
        Ok(())
    }

    #[inline]
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    #[inline]
    pub fn n_blocks(&self) -> usize {
        self.layout.blocks
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.layout.classes
    }

    #[inline]
    pub fn input_shape(&self) -> &[usize] {
        &self.layout.input_shape
    }

    #[inline]
    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Named parameter arrays in canonical order.
    pub fn params(&self) -> Vec<(String, &Array)> {
        let mut out = vec![
            ("stem.weight".to_string(), &self.stem.weight),
            ("stem.bias".to_string(), &self.stem.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.fc1.weight"), &b.fc1.weight));
            out.push((format!("blocks.{i}.fc1.bias"), &b.fc1.bias));
            out.push((format!("blocks.{i}.fc2.weight"), &b.fc2.weight));
            out.push((format!("blocks.{i}.fc2.bias"), &b.fc2.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable parameter arrays in the same order as [`Network::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        let mut out = vec![&mut self.stem.weight, &mut self.stem.bias];
        for b in &mut self.blocks {
            out.push(&mut b.fc1.weight);
            out.push(&mut b.fc1.bias);
            out.push(&mut b.fc2.weight);
            out.push(&mut b.fc2.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, a)| a.len()).sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, arr) in self.params() {
            for v in arr.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn check_input(&self, x: &Array) -> Result<()> {
        if x.shape() != self.layout.input_shape.as_slice() {
            return Err(Error::InputShape {
                expected: self.layout.input_shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass exposing every block output and the logits.
    pub fn forward_with_features(&self, x: &Array) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut stem_pre = Vec::with_capacity(self.layout.width);
        self.stem.apply(x.data(), &mut stem_pre);
        let stem_out = relu(&stem_pre);

        let mut h = stem_out.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut features = Vec::with_capacity(self.blocks.len());
        let mut residual = Vec::with_capacity(self.layout.width);
        for block in &self.blocks {
            let mut pre = Vec::with_capacity(self.layout.width);
            block.fc1.apply(&h, &mut pre);
            let act = relu(&pre);
            block.fc2.apply(&act, &mut residual);
            for (hi, ri) in h.iter_mut().zip(&residual) {
                *hi += ri;
            }
            features.push(Array::from_vec(h.clone()));
            caches.push(BlockCache { pre, act });
        }
        let mut logits = Vec::with_capacity(self.layout.classes);
        self.head.apply(&h, &mut logits);
        let logits = Array::from_vec(logits);
        logits.ensure_finite("logits")?;

        Ok(ForwardTrace {
            features,
            logits,
            input: x.data().to_vec(),
            stem_pre,
            stem_out,
            blocks: caches,
        })
    }

    pub fn logits(&self, x: &Array) -> Result<Array> {
        Ok(self.forward_with_features(x)?.logits)
    }

    /// Argmax of the logits, ties broken toward the lowest class id.
    pub fn predict(&self, x: &Array) -> Result<usize> {
        Ok(argmax(self.logits(x)?.data()))
    }
}

/// Index of the largest value; the first index wins ties.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Convenience wrapper matching the free-function form used by callers.
pub fn init_xavier(layout: Layout, seed: u64) -> Result<Network> {
    Network::init_xavier(layout, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Layout {
        Layout::new(&[6], 5, 2, 3)
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut net = Network::init_xavier(layout(), 3).unwrap();
        net.head = Dense::zeros(5, 3);
        let x = Array::from_vec(vec![0.5, -1.0, 2.0, 0.1, 0.0, 3.0]);
        let t = net.forward_with_features(&x).unwrap();
        assert!(t.logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(t.features.len(), 2);
        assert_eq!(t.logits.len(), 3);
    }

    #[test]
    fn same_seed_same_network() {
        let a = Network::init_xavier(layout(), 11).unwrap();
        let b = Network::init_xavier(layout(), 11).unwrap();
        let c = Network::init_xavier(layout(), 12).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn biases_are_zero_and_weights_bounded() {
        let net = Network::init_xavier(Layout::new(&[40], 24, 1, 10), 5).unwrap();
        for (name, arr) in net.params() {
            if name.ends_with("bias") {
                assert!(arr.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let s = arr.shape();
                let bound = (6.0 / (s[0] + s[1]) as f64).sqrt() as f32;
                assert!(arr.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_pure() {
        let net = Network::init_xavier(layout(), 9).unwrap();
        let before = net.checksum();
        let x = Array::from_vec(vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]);
        let a = net.forward_with_features(&x).unwrap();
        let b = net.forward_with_features(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.logits.bit_eq(&b.logits));
        assert_eq!(before, net.checksum());
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let mut net = Network::init_xavier(layout(), 4).unwrap();
        for b in &mut net.blocks {
            b.fc2 = Dense::zeros(5, 5);
        }
        let x = Array::from_vec(vec![1.0, -0.5, 0.25, 0.0, 2.0, -1.0]);
        let t = net.forward_with_features(&x).unwrap();
        for f in &t.features {
            assert_eq!(f.data(), t.stem_out.as_slice());
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = Network::init_xavier(layout(), 1).unwrap();
        let err = net.forward_with_features(&Array::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, Error::InputShape { .. }));
    }

    #[test]
    fn invalid_layouts() {
        assert!(Network::init_xavier(Layout::new(&[4], 4, 0, 2), 0).is_err());
        assert!(Network::init_xavier(Layout::new(&[4], 4, 9, 2), 0).is_err());
        assert!(Network::init_xavier(Layout::new(&[4], 0, 1, 2), 0).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
