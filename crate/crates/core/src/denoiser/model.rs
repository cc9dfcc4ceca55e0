use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::skeleton::{NUM_JOINTS, POSE_DIM};

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width D.
    pub dim: usize,
    /// Number of encoder blocks L.
    pub depth: usize,
    /// Attention heads H.
    pub heads: usize,
    /// Width of the sinusoidal timestep encoding.
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
}

fn default_time_dim() -> usize {
    128
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 96,
            depth: 4,
            heads: 4,
            time_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.depth == 0 || self.heads == 0 {
            return Err(Error::invalid("model dim, depth and heads must be positive"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "model dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::invalid("time_dim must be even and >= 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[in, out]`.
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<T> {
    pub norm1: Norm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: Norm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

/// Network weights, generic over the leaf type so the same layout serves
/// plain tensors, tape variables and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub joint_embed: Linear<T>,
    /// `[17, D]`.
    pub pos_embed: T,
    pub time_mlp1: Linear<T>,
    pub time_mlp2: Linear<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub head: Linear<T>,
}

pub type DenoiserParams = Params<Tensor>;

impl<T> Params<T> {
    /// Visits every leaf in a fixed order with a stable name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        let lin = |n: &str, l: &'a Linear<T>, f: &mut dyn FnMut(String, &'a T)| {
            f(format!("{n}.weight"), &l.weight);
            f(format!("{n}.bias"), &l.bias);
        };
        lin("joint_embed", &self.joint_embed, f);
        f("pos_embed".into(), &self.pos_embed);
        lin("time_mlp1", &self.time_mlp1, f);
        lin("time_mlp2", &self.time_mlp2, f);
        for (i, b) in self.blocks.iter().enumerate() {
            f(format!("blocks.{i}.norm1.gamma"), &b.norm1.gamma);
            f(format!("blocks.{i}.norm1.beta"), &b.norm1.beta);
            lin(&format!("blocks.{i}.qkv"), &b.qkv, f);
            lin(&format!("blocks.{i}.proj"), &b.proj, f);
            f(format!("blocks.{i}.norm2.gamma"), &b.norm2.gamma);
            f(format!("blocks.{i}.norm2.beta"), &b.norm2.beta);
            lin(&format!("blocks.{i}.ff1"), &b.ff1, f);
            lin(&format!("blocks.{i}.ff2"), &b.ff2, f);
        }
        lin("head", &self.head, f);
    }

    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }

    /// Mutable counterpart of [`Params::visit`], same order.
    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
        let lin = |l: &'a mut Linear<T>, f: &mut dyn FnMut(&'a mut T)| {
            let Linear { weight, bias } = l;
            f(weight);
            f(bias);
        };
        lin(&mut self.joint_embed, f);
        f(&mut self.pos_embed);
        lin(&mut self.time_mlp1, f);
        lin(&mut self.time_mlp2, f);
        for b in &mut self.blocks {
            let EncoderBlock {
                norm1,
                qkv,
                proj,
                norm2,
                ff1,
                ff2,
            } = b;
            f(&mut norm1.gamma);
            f(&mut norm1.beta);
            lin(qkv, f);
            lin(proj, f);
            f(&mut norm2.gamma);
            f(&mut norm2.beta);
            lin(ff1, f);
            lin(ff2, f);
        }
        lin(&mut self.head, f);
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut(&mut |t| out.push(t));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Params<U> {
        let lin = |l: &Linear<T>, f: &mut dyn FnMut(&T) -> U| Linear {
            weight: f(&l.weight),
            bias: f(&l.bias),
        };
        let norm = |n: &Norm<T>, f: &mut dyn FnMut(&T) -> U| Norm {
            gamma: f(&n.gamma),
            beta: f(&n.beta),
        };
        Params {
            joint_embed: lin(&self.joint_embed, f),
            pos_embed: f(&self.pos_embed),
            time_mlp1: lin(&self.time_mlp1, f),
            time_mlp2: lin(&self.time_mlp2, f),
            blocks: self
                .blocks
                .iter()
                .map(|b| EncoderBlock {
                    norm1: norm(&b.norm1, f),
                    qkv: lin(&b.qkv, f),
                    proj: lin(&b.proj, f),
                    norm2: norm(&b.norm2, f),
                    ff1: lin(&b.ff1, f),
                    ff2: lin(&b.ff2, f),
                })
                .collect(),
            head: lin(&self.head, f),
        }
    }
}

impl DenoiserParams {
    /// Random initialization: fan-in scaled normal weights, zero biases,
    /// unit norm gains and a small output head so the initial prediction is
    /// close to zero.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut normal = |shape: [usize; 2], std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape[0] * shape[1];
            Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
        };
        let mut linear = |i: usize, o: usize, gain: f64| Linear {
            weight: normal([i, o], gain / (i as f64).sqrt()),
            bias: Tensor::zeros(vec![o]),
        };
        let norm = || Norm {
            gamma: Tensor::full(vec![d], 1.0),
            beta: Tensor::zeros(vec![d]),
        };
        let residual_gain = 1.0 / (2.0 * cfg.depth as f64).sqrt();
        let joint_embed = linear(3, d, 1.0);
        let time_mlp1 = linear(cfg.time_dim, d, 1.0);
        let time_mlp2 = linear(d, d, 1.0);
        let blocks = (0..cfg.depth)
            .map(|_| EncoderBlock {
                norm1: norm(),
                qkv: linear(d, 3 * d, 1.0),
                proj: linear(d, d, residual_gain),
                norm2: norm(),
                ff1: linear(d, 4 * d, 1.0),
                ff2: linear(4 * d, d, residual_gain),
            })
            .collect();
        let head = linear(d, 3, 1e-2);
        let pos_embed = normal([NUM_JOINTS, d], 0.5);
        Ok(Self {
            joint_embed,
            pos_embed,
            time_mlp1,
            time_mlp2,
            blocks,
            head,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|t| t.is_finite())
    }

    /// Places every weight on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Params<Var> {
        self.map(&mut |t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Checks that the tensors match the shapes implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::init(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        let (a, b) = (self.leaves(), expected.leaves());
        if a.len() != b.len() {
            return Err(Error::Format(format!(
                "parameter count {} does not match config ({})",
                a.len(),
                b.len()
            )));
        }
        for ((x, y), name) in a.iter().zip(&b).zip(expected.names()) {
            if x.shape() != y.shape() {
                return Err(Error::Format(format!(
                    "{name}: shape {:?} does not match config {:?}",
                    x.shape(),
                    y.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal encoding of integer timesteps, `[B, dim]`.
pub fn timestep_encoding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let s = step as f64;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((s * f).sin(), (s * f).cos())).unzip();
        data.extend(sin);
        data.extend(cos);
    }
    Tensor::new(vec![t.len(), dim], data).unwrap()
}

fn linear(tape: &mut Tape, x: Var, l: &Linear<Var>) -> Result<Var> {
    let y = tape.matmul(x, l.weight)?;
    tape.add(y, l.bias)
}

fn norm(tape: &mut Tape, x: Var, n: &Norm<Var>) -> Result<Var> {
    let y = tape.layer_norm(x);
    let y = tape.mul(y, n.gamma)?;
    tape.add(y, n.beta)
}

/// Noise prediction on a tape. `x` is `[B, 51]`; returns `[B, 51]`.
pub fn forward(
    tape: &mut Tape,
    p: &Params<Var>,
    cfg: &ModelConfig,
    x: Var,
    t: &[usize],
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != POSE_DIM || shape[0] != t.len() {
        return Err(Error::Shape {
            op: "predict_noise",
            lhs: shape,
            rhs: vec![t.len(), POSE_DIM],
        });
    }
    let (b, d, heads) = (shape[0], cfg.dim, cfg.heads);
    let dh = d / heads;

    // Joint tokens plus spatial position embeddings.
    let tokens = tape.reshape(x, &[b, NUM_JOINTS, 3])?;
    let mut h = linear(tape, tokens, &p.joint_embed)?;
    let joint_ids: Vec<usize> = (0..NUM_JOINTS).collect();
    let pos = tape.embedding(p.pos_embed, &joint_ids)?;
    h = tape.add(h, pos)?;

    // Timestep conditioning added to every token.
    let enc = tape.constant(timestep_encoding(t, cfg.time_dim));
    let te = linear(tape, enc, &p.time_mlp1)?;
    let te = tape.gelu(te);
    let te = linear(tape, te, &p.time_mlp2)?;
    let te = tape.repeat_rows(te, NUM_JOINTS)?;
    h = tape.add(h, te)?;

    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
    let split_heads = |tape: &mut Tape, v: Var| -> Result<Var> {
        let v = tape.reshape(v, &[b, NUM_JOINTS, heads, dh])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        tape.reshape(v, &[b * heads, NUM_JOINTS, dh])
    };
    for blk in &p.blocks {
        let a = norm(tape, h, &blk.norm1)?;
        let qkv = linear(tape, a, &blk.qkv)?;
        let parts = tape.split_last(qkv, &[d, d, d])?;
        let q = split_heads(tape, parts[0])?;
        let k = split_heads(tape, parts[1])?;
        let v = split_heads(tape, parts[2])?;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, inv_sqrt_dh);
        let attn = tape.softmax(scores);
        let ctx = tape.batch_matmul(attn, v, false)?;
        let ctx = tape.reshape(ctx, &[b, heads, NUM_JOINTS, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, NUM_JOINTS, d])?;
        let out = linear(tape, ctx, &blk.proj)?;
        h = tape.add(h, out)?;

        let f = norm(tape, h, &blk.norm2)?;
        let f = linear(tape, f, &blk.ff1)?;
        let f = tape.gelu(f);
        let f = linear(tape, f, &blk.ff2)?;
        h = tape.add(h, f)?;
    }
    let out = linear(tape, h, &p.head)?;
    tape.reshape(out, &[b, POSE_DIM])
}

/// Gradient-free noise prediction for a batch `[B, 51]`.
pub fn predict_noise(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    x_t: &Tensor,
    t: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(x_t.clone());
    let out = forward(&mut tape, &bound, cfg, x, t)?;
    Ok(tape.value(out).clone())
}
