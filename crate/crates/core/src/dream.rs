//! Dilated refinement attention: multi-scale extraction followed by channel
//! and spatial attention fused with an elementwise maximum.
//!
//! Item vectors of length `d` are treated as single-channel maps of shape
//! `(1, d)`, so the usual 3×3 dilated kernels become length-3 kernels along
//! the vector. Batched inputs `(B, 1, d)` run every row through the same
//! weights.
//!
//! The five branches are a 1×1 convolution, three dilated convolutions and a
//! pooled global branch; their outputs are concatenated into
//! `F: (5·C_b, d)`. Channel attention gates `F` with
//! `M_c = σ(W₂·relu(W₁·gap(F)))`, spatial attention with
//! `M_s = σ(k·mean_c(F) + b)`, and the two gated maps are merged with an
//! elementwise max. A 1×1 projection maps the result back to one channel,
//! which is added to the input.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DreamConfig {
    /// Output channels of each of the five branches.
    pub branch_channels: usize,
    /// Bottleneck ratio of the channel-attention MLP.
    pub attention_reduction: usize,
    /// Dilation rates of the three dilated branches.
    pub dilations: Vec<usize>,
    /// Length `d` of the item vectors.
    pub input_length: usize,
}

impl DreamConfig {
    pub fn new(input_length: usize) -> Self {
        DreamConfig {
            branch_channels: 8,
            attention_reduction: 4,
            dilations: vec![6, 12, 18],
            input_length,
        }
    }

    pub const BRANCHES: usize = 5;

    /// Channels of the concatenated map, `5·C_b`.
    pub fn channels(&self) -> usize {
        Self::BRANCHES * self.branch_channels
    }

    pub fn hidden(&self) -> usize {
        self.channels() / self.attention_reduction
    }

    pub fn validate(&self) -> Result<()> {
        if self.branch_channels == 0 || self.attention_reduction == 0 || self.input_length == 0 {
            return Err(Error::Config(format!(
                "branch channels ({}), attention reduction ({}) and input length ({}) must be positive",
                self.branch_channels, self.attention_reduction, self.input_length
            )));
        }
        if !self.channels().is_multiple_of(self.attention_reduction) {
            return Err(Error::Config(format!(
                "5 x {} channels are not divisible by attention reduction {}",
                self.branch_channels, self.attention_reduction
            )));
        }
        if self.dilations.len() != Self::BRANCHES - 2 {
            return Err(Error::Config(format!(
                "expected exactly 3 dilation rates, got {:?}",
                self.dilations
            )));
        }
        if self.dilations[0] == 0 || self.dilations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "dilation rates must be positive and strictly increasing, got {:?}",
                self.dilations
            )));
        }
        Ok(())
    }
}

/// Learnable weights of one refinement module.
#[derive(Clone, Debug, PartialEq)]
pub struct DreamParams {
    /// `(C_b, 1)` 1×1 branch.
    pub k1: Tensor,
    /// `(C_b, 1, 3)` per dilation.
    pub k_dilated: Vec<Tensor>,
    /// `(C_b, 1)` projection of the pooled branch.
    pub k_gap: Tensor,
    /// `(5C_b, 5C_b/ρ)`.
    pub w1: Tensor,
    /// `(5C_b/ρ, 5C_b)`.
    pub w2: Tensor,
    /// `(1, 1)` spatial-attention 1×1 kernel.
    pub k_sp: Tensor,
    /// `(1)` spatial-attention bias.
    pub b_sp: Tensor,
    /// `(1, 5C_b)` output projection.
    pub k_out: Tensor,
}

/// [`DreamParams`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct DreamVars {
    pub k1: Var,
    pub k_dilated: Vec<Var>,
    pub k_gap: Var,
    pub w1: Var,
    pub w2: Var,
    pub k_sp: Var,
    pub b_sp: Var,
    pub k_out: Var,
}

impl DreamVars {
    /// Rebuilds the handles from vars listed in [`DreamParams::named`] order.
    pub fn from_ordered(vars: &[Var]) -> Result<Self> {
        let n = vars.len();
        if n < 8 {
            return Err(Error::dim(format!(
                "refinement module needs at least 8 tensors, got {n}"
            )));
        }
        Ok(DreamVars {
            b_sp: vars[0],
            k1: vars[1],
            k_dilated: vars[2..n - 5].to_vec(),
            k_gap: vars[n - 5],
            k_out: vars[n - 4],
            k_sp: vars[n - 3],
            w1: vars[n - 2],
            w2: vars[n - 1],
        })
    }
}

impl DreamParams {
    /// Xavier-uniform weights and a zero spatial bias.
    pub fn init<R: Rng>(cfg: &DreamConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (cb, c, h) = (cfg.branch_channels, cfg.channels(), cfg.hidden());
        Ok(DreamParams {
            k1: Tensor::xavier_uniform(&[cb, 1], rng)?,
            k_dilated: (0..cfg.dilations.len())
                .map(|_| Tensor::xavier_uniform(&[cb, 1, 3], rng))
                .collect::<Result<_>>()?,
            k_gap: Tensor::xavier_uniform(&[cb, 1], rng)?,
            w1: Tensor::xavier_uniform(&[c, h], rng)?,
            w2: Tensor::xavier_uniform(&[h, c], rng)?,
            k_sp: Tensor::xavier_uniform(&[1, 1], rng)?,
            b_sp: Tensor::zeros(&[1])?,
            k_out: Tensor::xavier_uniform(&[1, c], rng)?,
        })
    }

    /// All-zero weights of the right shapes.
    pub fn zeros(cfg: &DreamConfig) -> Result<Self> {
        cfg.validate()?;
        let (cb, c, h) = (cfg.branch_channels, cfg.channels(), cfg.hidden());
        Ok(DreamParams {
            k1: Tensor::zeros(&[cb, 1])?,
            k_dilated: (0..cfg.dilations.len())
                .map(|_| Tensor::zeros(&[cb, 1, 3]))
                .collect::<Result<_>>()?,
            k_gap: Tensor::zeros(&[cb, 1])?,
            w1: Tensor::zeros(&[c, h])?,
            w2: Tensor::zeros(&[h, c])?,
            k_sp: Tensor::zeros(&[1, 1])?,
            b_sp: Tensor::zeros(&[1])?,
            k_out: Tensor::zeros(&[1, c])?,
        })
    }

    /// Tensors with their local names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("b_sp".to_string(), &self.b_sp), ("k1".to_string(), &self.k1)];
        for (j, k) in self.k_dilated.iter().enumerate() {
            out.push((format!("k_d.{j}"), k));
        }
        out.extend([
            ("k_gap".to_string(), &self.k_gap),
            ("k_out".to_string(), &self.k_out),
            ("k_sp".to_string(), &self.k_sp),
            ("w1".to_string(), &self.w1),
            ("w2".to_string(), &self.w2),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("b_sp".to_string(), &mut self.b_sp), ("k1".to_string(), &mut self.k1)];
        for (j, k) in self.k_dilated.iter_mut().enumerate() {
            out.push((format!("k_d.{j}"), k));
        }
        out.extend([
            ("k_gap".to_string(), &mut self.k_gap),
            ("k_out".to_string(), &mut self.k_out),
            ("k_sp".to_string(), &mut self.k_sp),
            ("w1".to_string(), &mut self.w1),
            ("w2".to_string(), &mut self.w2),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn register(&self, tape: &mut Tape) -> DreamVars {
        DreamVars {
            k1: tape.param(&self.k1),
            k_dilated: self.k_dilated.iter().map(|k| tape.param(k)).collect(),
            k_gap: tape.param(&self.k_gap),
            w1: tape.param(&self.w1),
            w2: tape.param(&self.w2),
            k_sp: tape.param(&self.k_sp),
            b_sp: tape.param(&self.b_sp),
            k_out: tape.param(&self.k_out),
        }
    }

    /// Registers the weights as constants (no gradients), for inference.
    pub fn register_frozen(&self, tape: &mut Tape) -> DreamVars {
        DreamVars {
            k1: tape.constant(self.k1.clone()),
            k_dilated: self.k_dilated.iter().map(|k| tape.constant(k.clone())).collect(),
            k_gap: tape.constant(self.k_gap.clone()),
            w1: tape.constant(self.w1.clone()),
            w2: tape.constant(self.w2.clone()),
            k_sp: tape.constant(self.k_sp.clone()),
            b_sp: tape.constant(self.b_sp.clone()),
            k_out: tape.constant(self.k_out.clone()),
        }
    }
}

/// Five-branch extraction: `(1, d) → (5C_b, d)`, or batched
/// `(B, 1, d) → (B, 5C_b, d)`.
pub fn multi_scale(tape: &mut Tape, x: Var, p: &DreamVars, cfg: &DreamConfig) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if !(shape.len() == 2 || shape.len() == 3) || shape[shape.len() - 2] != 1 {
        return Err(Error::dim(format!(
            "refinement input must be a single-channel map, got {shape:?}"
        )));
    }
    let len = shape[shape.len() - 1];
    let mut branches = Vec::with_capacity(DreamConfig::BRANCHES);
    let b = tape.conv1x1(x, p.k1, None)?;
    branches.push(tape.relu(b)?);
    for (k, &dil) in p.k_dilated.iter().zip(&cfg.dilations) {
        let b = tape.conv1d_dilated(x, *k, dil)?;
        branches.push(tape.relu(b)?);
    }
    let pooled = tape.global_avg_pool(x)?;
    let pooled = tape.conv1x1(pooled, p.k_gap, None)?;
    let b = tape.broadcast_len(pooled, len)?;
    branches.push(tape.relu(b)?);
    tape.concat_channels(&branches)
}

/// Returns `(M_c, F_c)` with `M_c: (C', 1)` and `F_c = F ⊗ M_c`.
pub fn channel_attention(tape: &mut Tape, f: Var, p: &DreamVars) -> Result<(Var, Var)> {
    let z = tape.global_avg_pool(f)?;
    let zshape = tape.shape(z).to_vec();
    let channels = zshape[zshape.len() - 2];
    let rows = tape.value(z).len() / channels;
    let flat = tape.reshape(z, &[rows, channels])?;
    let h = tape.linear(flat, p.w1, None)?;
    let h = tape.relu(h)?;
    let s = tape.linear(h, p.w2, None)?;
    let s = tape.sigmoid(s)?;
    let m_c = tape.reshape(s, &zshape)?;
    let f_c = tape.mul(f, m_c)?;
    Ok((m_c, f_c))
}

/// Returns `(M_s, F_s)` with `M_s: (1, d)` and `F_s = F ⊗ M_s`.
pub fn spatial_attention(tape: &mut Tape, f: Var, p: &DreamVars) -> Result<(Var, Var)> {
    let pooled = tape.mean_channels(f)?;
    let logits = tape.conv1x1(pooled, p.k_sp, Some(p.b_sp))?;
    let m_s = tape.sigmoid(logits)?;
    let f_s = tape.mul(f, m_s)?;
    Ok((m_s, f_s))
}

/// Elementwise maximum of the two attended maps.
pub fn attention_fuse(tape: &mut Tape, f_c: Var, f_s: Var) -> Result<Var> {
    tape.max(f_c, f_s)
}

/// Refines every row of `v: (N, d)`; output is `v` plus the projected
/// attention map, so `k_out = 0` gives back `v` exactly.
pub fn dream_forward(tape: &mut Tape, v: Var, p: &DreamVars, cfg: &DreamConfig) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    if shape.len() != 2 || shape[1] != cfg.input_length {
        return Err(Error::dim(format!(
            "refinement expects (N, {}) input, got {shape:?}",
            cfg.input_length
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let x = tape.reshape(v, &[n, 1, d])?;
    let f = multi_scale(tape, x, p, cfg)?;
    let (_, f_c) = channel_attention(tape, f, p)?;
    let (_, f_s) = spatial_attention(tape, f, p)?;
    let y = attention_fuse(tape, f_c, f_s)?;
    let proj = tape.conv1x1(y, p.k_out, None)?;
    let proj = tape.reshape(proj, &[n, d])?;
    tape.add(v, proj)
}
