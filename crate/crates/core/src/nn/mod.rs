//! The differentiable substrate: dense f64 tensors, token embeddings,
//! linear/ReLU layers, multi-head attention blocks with layer normalization
//! and residual connections, label-smoothed cross-entropy, and Adam with a
//! warmup-then-linear-decay schedule.
//!
//! Layers implement explicit forward/backward pairs over `ndarray`
//! matrices; gradients accumulate into a mirror [`ModelParams`] instance so
//! the optimizer, checkpointing, and finite-difference checks can walk all
//! tensors by name.

mod adam;
mod block;
mod checkpoint;
pub(crate) mod layers;
mod loss;
mod positional;

pub use adam::{Adam, AdamCore, LrSchedule};
pub use block::{transformer_backward, transformer_forward, BlockCache, DropoutCtx, ForwardTrace};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointSidecar, CHECKPOINT_VERSION};
pub use layers::{embedding_backward, embedding_forward, LayerNorm, Linear};
pub use loss::{label_smoothed_nll, reconstruction_loss, LossKind};
pub use positional::sinusoidal_pe;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_cnn: usize,
    pub vocab_size: usize,
    pub max_decode_len: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            d: 128,
            n_layers: 1,
            n_heads: 8,
            d_cnn: 64,
            vocab_size,
            max_decode_len: 60,
            label_smoothing: 0.1,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d ({}) must be divisible by n_heads ({})",
                self.d, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
}

/// One transformer block: fused per-head Q/K/V/O projections, two layer
/// norms, and the position-wise feed-forward net.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Every learnable tensor of the tracker (and of the response classifier,
/// which reuses the same layout with a different head width).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Array2<f64>,
    pub bb_proj: Linear,
    pub cnn_proj: Linear,
    pub blocks: Vec<BlockParams>,
    pub state_head: Linear,
    pub f_bb: Linear,
    pub f_cnn: Linear,
}

impl ModelParams {
    /// Glorot-uniform initialization, seeded per tensor name so shared
    /// tensors start identical across ablation variants.
    pub fn init(cfg: &ModelConfig, head_out: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let glorot = |name: &str, rows: usize, cols: usize| -> Array2<f64> {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let mut r = rng::stream(seed, "init", &[rng::derive_seed(0, name, &[])]);
            Array2::from_shape_fn((rows, cols), |_| r.random_range(-limit..limit))
        };
        let linear = |name: &str, rows: usize, cols: usize| Linear {
            w: glorot(name, rows, cols),
            b: ndarray::Array1::zeros(cols),
        };
        let blocks = (0..cfg.n_layers)
            .map(|i| BlockParams {
                wq: linear(&format!("block{i}.wq"), d, d),
                wk: linear(&format!("block{i}.wk"), d, d),
                wv: linear(&format!("block{i}.wv"), d, d),
                wo: linear(&format!("block{i}.wo"), d, d),
                ln1: LayerNorm::identity(d),
                ln2: LayerNorm::identity(d),
                ff1: linear(&format!("block{i}.ff1"), d, 4 * d),
                ff2: linear(&format!("block{i}.ff2"), 4 * d, d),
            })
            .collect();
        Ok(ModelParams {
            embedding: glorot("embedding", cfg.vocab_size, d),
            bb_proj: linear("bb_proj", 4, d),
            cnn_proj: linear("cnn_proj", cfg.d_cnn, d),
            blocks,
            state_head: linear("state_head", d, head_out),
            f_bb: linear("f_bb", d, 4),
            f_cnn: linear("f_cnn", d, cfg.d_cnn),
        })
    }

    /// Same shapes, all zeros; the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let zl = |l: &Linear| Linear {
            w: Array2::zeros(l.w.raw_dim()),
            b: ndarray::Array1::zeros(l.b.raw_dim()),
        };
        ModelParams {
            embedding: Array2::zeros(self.embedding.raw_dim()),
            bb_proj: zl(&self.bb_proj),
            cnn_proj: zl(&self.cnn_proj),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    wq: zl(&b.wq),
                    wk: zl(&b.wk),
                    wv: zl(&b.wv),
                    wo: zl(&b.wo),
                    ln1: LayerNorm {
                        gain: ndarray::Array1::zeros(b.ln1.gain.raw_dim()),
                        bias: ndarray::Array1::zeros(b.ln1.bias.raw_dim()),
                    },
                    ln2: LayerNorm {
                        gain: ndarray::Array1::zeros(b.ln2.gain.raw_dim()),
                        bias: ndarray::Array1::zeros(b.ln2.bias.raw_dim()),
                    },
                    ff1: zl(&b.ff1),
                    ff2: zl(&b.ff2),
                })
                .collect(),
            state_head: zl(&self.state_head),
            f_bb: zl(&self.f_bb),
            f_cnn: zl(&self.f_cnn),
        }
    }

    /// Adds `other` into `self` entry-wise.
    pub fn accumulate(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.flat_mut().into_iter().zip(other.flat()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.flat_mut() {
            for x in t {
                *x *= factor;
            }
        }
    }

    /// All tensors as named flat slices, in a stable order.
    pub fn flat(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        macro_rules! push {
            ($name:expr, $arr:expr) => {
                out.push(($name, $arr.as_slice().expect("contiguous")));
            };
        }
        macro_rules! lin {
            ($name:expr, $l:expr) => {
                push!(format!("{}.w", $name), $l.w);
                push!(format!("{}.b", $name), $l.b);
            };
        }
        push!("embedding".to_string(), self.embedding);
        lin!("bb_proj", self.bb_proj);
        lin!("cnn_proj", self.cnn_proj);
        for (i, b) in self.blocks.iter().enumerate() {
            lin!(format!("block{i}.wq"), b.wq);
            lin!(format!("block{i}.wk"), b.wk);
            lin!(format!("block{i}.wv"), b.wv);
            lin!(format!("block{i}.wo"), b.wo);
            push!(format!("block{i}.ln1.gain"), b.ln1.gain);
            push!(format!("block{i}.ln1.bias"), b.ln1.bias);
            push!(format!("block{i}.ln2.gain"), b.ln2.gain);
            push!(format!("block{i}.ln2.bias"), b.ln2.bias);
            lin!(format!("block{i}.ff1"), b.ff1);
            lin!(format!("block{i}.ff2"), b.ff2);
        }
        lin!("state_head", self.state_head);
        lin!("f_bb", self.f_bb);
        lin!("f_cnn", self.f_cnn);
        out
    }

    /// Mutable variant of [`ModelParams::flat`], same order.
    pub fn flat_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        macro_rules! push {
            ($name:expr, $arr:expr) => {
                out.push(($name, $arr.as_slice_mut().expect("contiguous")));
            };
        }
        macro_rules! lin {
            ($name:expr, $l:expr) => {
                push!(format!("{}.w", $name), $l.w);
                push!(format!("{}.b", $name), $l.b);
            };
        }
        push!("embedding".to_string(), self.embedding);
        lin!("bb_proj", self.bb_proj);
        lin!("cnn_proj", self.cnn_proj);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            lin!(format!("block{i}.wq"), b.wq);
            lin!(format!("block{i}.wk"), b.wk);
            lin!(format!("block{i}.wv"), b.wv);
            lin!(format!("block{i}.wo"), b.wo);
            push!(format!("block{i}.ln1.gain"), b.ln1.gain);
            push!(format!("block{i}.ln1.bias"), b.ln1.bias);
            push!(format!("block{i}.ln2.gain"), b.ln2.gain);
            push!(format!("block{i}.ln2.bias"), b.ln2.bias);
            lin!(format!("block{i}.ff1"), b.ff1);
            lin!(format!("block{i}.ff2"), b.ff2);
        }
        lin!("state_head", self.state_head);
        lin!("f_bb", self.f_bb);
        lin!("f_cnn", self.f_cnn);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.flat().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.flat().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_shared_across_head_widths() {
        let cfg = ModelConfig {
            d: 16,
            n_layers: 2,
            n_heads: 2,
            d_cnn: 8,
            vocab_size: 40,
            max_decode_len: 10,
            label_smoothing: 0.1,
            dropout: 0.0,
        };
        let a = ModelParams::init(&cfg, 40, 7).unwrap();
        let b = ModelParams::init(&cfg, 40, 7).unwrap();
        assert_eq!(a, b);
        // A different head width leaves every shared tensor identical.
        let c = ModelParams::init(&cfg, 17, 7).unwrap();
        assert_eq!(a.embedding, c.embedding);
        assert_eq!(a.blocks[0].wq, c.blocks[0].wq);
        assert_ne!(a.state_head.w.shape(), c.state_head.w.shape());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::new(10);
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg2 = ModelConfig::new(10);
        cfg2.label_smoothing = 1.0;
        assert!(cfg2.validate().is_err());
    }

    #[test]
    fn flat_orders_match() {
        let cfg = ModelConfig {
            d: 8,
            n_layers: 1,
            n_heads: 2,
            d_cnn: 8,
            vocab_size: 12,
            max_decode_len: 5,
            label_smoothing: 0.0,
            dropout: 0.0,
        };
        let mut p = ModelParams::init(&cfg, 12, 0).unwrap();
        let names_a: Vec<String> = p.flat().into_iter().map(|(n, _)| n).collect();
        let names_b: Vec<String> = p.flat_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names_a, names_b);
        assert!(p.num_parameters() > 0);
        assert!(p.all_finite());
    }
}
