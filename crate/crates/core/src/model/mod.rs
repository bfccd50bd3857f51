//! The recommender: modality projections, per-modality refinement, graph
//! smoothing of identity embeddings, additive fusion, inner-product scoring
//! and the joint training objective.

mod checkpoint;
mod forward;
mod graph;

use std::collections::BTreeMap;

use rand::Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{
    bpr_loss, embeddings, encode_items, encode_items_frozen, fuse, reduce_modalities, regularizer, score, total_loss,
    Encoded, ItemFeatures, LossTerms, Triple,
};
pub use graph::{propagate, Graph};

use crate::align::AlignConfig;
use crate::autograd::{Tape, Var};
use crate::dream::{DreamConfig, DreamParams, DreamVars};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shared modality dimension `floor(min(D_V, D_T) / r)`.
///
/// ```
/// assert_eq!(alignrec::model::target_dim(4096, 384, 8).unwrap(), 48);
/// assert!(alignrec::model::target_dim(16, 16, 32).is_err());
/// ```
pub fn target_dim(d_visual: usize, d_text: usize, r: usize) -> Result<usize> {
    if r == 0 {
        return Err(Error::Config(format!(
            "reduction factor must be at least 1 (D_V = {d_visual}, D_T = {d_text}, r = {r})"
        )));
    }
    let d = d_visual.min(d_text) / r;
    if d < 1 {
        return Err(Error::Config(format!(
            "target dimension floor(min({d_visual}, {d_text}) / {r}) is below 1"
        )));
    }
    Ok(d)
}

/// Model and training variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Refinement modules bypassed: encodings are the projected features.
    NoLocalAlign,
    /// Alignment losses switched off.
    NoGlobalAlign,
    TextOnly,
    VisualOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoLocalAlign,
        Variant::NoGlobalAlign,
        Variant::TextOnly,
        Variant::VisualOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLocalAlign => "no-la",
            Variant::NoGlobalAlign => "no-ga",
            Variant::TextOnly => "text-only",
            Variant::VisualOnly => "visual-only",
        }
    }

    pub fn from_name(name: &str) -> Result<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == name).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Usage(format!(
                "unknown variant `{name}`; expected one of {}",
                names.join(", ")
            ))
        })
    }

    pub fn uses_visual(self) -> bool {
        self != Variant::TextOnly
    }

    pub fn uses_text(self) -> bool {
        self != Variant::VisualOnly
    }

    pub fn uses_refinement(self) -> bool {
        self != Variant::NoLocalAlign
    }

    /// Alignment losses need both modalities and are off in `no-ga`.
    pub fn uses_alignment(self) -> bool {
        matches!(self, Variant::Full | Variant::NoLocalAlign)
    }

    /// Hyperparameters with the alignment weights zeroed where the variant
    /// has no alignment term.
    pub fn apply(self, hp: &HyperParams) -> HyperParams {
        let mut hp = hp.clone();
        if !self.uses_alignment() {
            hp.align.lambda_cl = 0.0;
            hp.align.lambda_mmd = 0.0;
        }
        hp
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    pub lambda_reg: f64,
    /// Reduction factor `r` of the modality projections.
    pub reduction: usize,
    /// Width of the identity embeddings.
    pub d_id: usize,
    pub graph_layers: usize,
    pub align: AlignConfig,
    pub branch_channels: usize,
    pub attention_reduction: usize,
    pub dilations: Vec<usize>,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda_reg: 1e-4,
            reduction: 8,
            d_id: 64,
            graph_layers: 2,
            align: AlignConfig::default(),
            branch_channels: 8,
            attention_reduction: 4,
            dilations: vec![6, 12, 18],
        }
    }
}

impl HyperParams {
    pub fn dream_config(&self, d: usize) -> DreamConfig {
        DreamConfig {
            branch_channels: self.branch_channels,
            attention_reduction: self.attention_reduction,
            dilations: self.dilations.clone(),
            input_length: d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_id == 0 {
            return Err(Error::Config("identity embedding width must be positive".into()));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_reg = {} must be non-negative",
                self.lambda_reg
            )));
        }
        if self.reduction == 0 {
            return Err(Error::Config("reduction factor must be at least 1".into()));
        }
        self.align.validate()?;
        self.dream_config(1).validate()
    }
}

/// Every learnable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `(M, d_id)`.
    pub user_emb: Tensor,
    /// `(N, d_id)`.
    pub item_emb: Tensor,
    /// `(D_V, d)`.
    pub w_v: Tensor,
    /// `(D_T, d)`.
    pub w_t: Tensor,
    pub dream_v: DreamParams,
    pub dream_t: DreamParams,
    /// `(d, d_id)`.
    pub g_v: Tensor,
    /// `(d, d_id)`.
    pub g_t: Tensor,
}

/// [`ModelParams`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub user_emb: Var,
    pub item_emb: Var,
    pub w_v: Var,
    pub w_t: Var,
    pub dream_v: DreamVars,
    pub dream_t: DreamVars,
    pub g_v: Var,
    pub g_t: Var,
}

impl ModelParams {
    /// Xavier-uniform initialisation of every matrix.
    pub fn init<R: Rng>(
        users: usize,
        items: usize,
        d_visual: usize,
        d_text: usize,
        hp: &HyperParams,
        rng: &mut R,
    ) -> Result<Self> {
        hp.validate()?;
        let d = target_dim(d_visual, d_text, hp.reduction)?;
        let dc = hp.dream_config(d);
        Ok(ModelParams {
            user_emb: Tensor::xavier_uniform(&[users, hp.d_id], rng)?,
            item_emb: Tensor::xavier_uniform(&[items, hp.d_id], rng)?,
            w_v: Tensor::xavier_uniform(&[d_visual, d], rng)?,
            w_t: Tensor::xavier_uniform(&[d_text, d], rng)?,
            dream_v: DreamParams::init(&dc, rng)?,
            dream_t: DreamParams::init(&dc, rng)?,
            g_v: Tensor::xavier_uniform(&[d, hp.d_id], rng)?,
            g_t: Tensor::xavier_uniform(&[d, hp.d_id], rng)?,
        })
    }

    pub fn users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn items(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn d_visual(&self) -> usize {
        self.w_v.rows()
    }

    pub fn d_text(&self) -> usize {
        self.w_t.rows()
    }

    /// Shared modality dimension `d`.
    pub fn d(&self) -> usize {
        self.w_v.cols()
    }

    pub fn d_id(&self) -> usize {
        self.user_emb.cols()
    }

    /// Configuration of the refinement modules implied by the stored shapes.
    pub fn dream_config(&self, dilations: &[usize]) -> DreamConfig {
        let cb = self.dream_v.k1.rows();
        DreamConfig {
            branch_channels: cb,
            attention_reduction: (5 * cb) / self.dream_v.w1.cols(),
            dilations: dilations.to_vec(),
            input_length: self.d(),
        }
    }

    /// All tensors with global names, sorted by name.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (prefix, dp) in [("dream_t", &self.dream_t), ("dream_v", &self.dream_v)] {
            out.extend(dp.named().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out.extend([
            ("g_t".to_string(), &self.g_t),
            ("g_v".to_string(), &self.g_v),
            ("item_emb".to_string(), &self.item_emb),
            ("user_emb".to_string(), &self.user_emb),
            ("w_t".to_string(), &self.w_t),
            ("w_v".to_string(), &self.w_v),
        ]);
        debug_assert!(out.windows(2).all(|w| w[0].0 < w[1].0));
        out
    }

    /// Same order as [`ModelParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (prefix, dp) in [("dream_t", &mut self.dream_t), ("dream_v", &mut self.dream_v)] {
            out.extend(dp.named_mut().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out.extend([
            ("g_t".to_string(), &mut self.g_t),
            ("g_v".to_string(), &mut self.g_v),
            ("item_emb".to_string(), &mut self.item_emb),
            ("user_emb".to_string(), &mut self.user_emb),
            ("w_t".to_string(), &mut self.w_t),
            ("w_v".to_string(), &mut self.w_v),
        ]);
        out
    }

    /// Owned copies of [`ModelParams::named`], e.g. for gradient checks.
    pub fn named_owned(&self) -> Vec<(String, Tensor)> {
        self.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Rebuilds parameters from named tensors (checkpoint order or any
    /// other), checking that the shapes fit together.
    pub fn from_named(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate parameter `{name}`")));
            }
        }
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
        };
        let dream = |prefix: &str, take: &mut dyn FnMut(&str) -> Result<Tensor>| -> Result<DreamParams> {
            let mut k_dilated = Vec::new();
            for j in 0..3 {
                k_dilated.push(take(&format!("{prefix}.k_d.{j}"))?);
            }
            Ok(DreamParams {
                k1: take(&format!("{prefix}.k1"))?,
                k_dilated,
                k_gap: take(&format!("{prefix}.k_gap"))?,
                w1: take(&format!("{prefix}.w1"))?,
                w2: take(&format!("{prefix}.w2"))?,
                k_sp: take(&format!("{prefix}.k_sp"))?,
                b_sp: take(&format!("{prefix}.b_sp"))?,
                k_out: take(&format!("{prefix}.k_out"))?,
            })
        };
        let params = ModelParams {
            dream_t: dream("dream_t", &mut take)?,
            dream_v: dream("dream_v", &mut take)?,
            g_t: take("g_t")?,
            g_v: take("g_v")?,
            item_emb: take("item_emb")?,
            user_emb: take("user_emb")?,
            w_t: take("w_t")?,
            w_v: take("w_v")?,
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected parameter `{extra}`")));
        }
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.w_v.shape().get(1).copied().unwrap_or(0);
        let d_id = self.user_emb.shape().get(1).copied().unwrap_or(0);
        let expect = |name: &str, t: &Tensor, shape: &[usize]| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
        };
        expect("user_emb", &self.user_emb, &[self.user_emb.shape()[0], d_id])?;
        expect("item_emb", &self.item_emb, &[self.item_emb.shape()[0], d_id])?;
        expect("w_v", &self.w_v, &[self.w_v.shape()[0], d])?;
        expect("w_t", &self.w_t, &[self.w_t.shape()[0], d])?;
        expect("g_v", &self.g_v, &[d, d_id])?;
        expect("g_t", &self.g_t, &[d, d_id])?;
        let cb = self.dream_v.k1.shape()[0];
        let hidden = self.dream_v.w1.shape().get(1).copied().unwrap_or(0);
        for (prefix, dp) in [("dream_t", &self.dream_t), ("dream_v", &self.dream_v)] {
            expect(&format!("{prefix}.k1"), &dp.k1, &[cb, 1])?;
            for (j, k) in dp.k_dilated.iter().enumerate() {
                expect(&format!("{prefix}.k_d.{j}"), k, &[cb, 1, 3])?;
            }
            expect(&format!("{prefix}.k_gap"), &dp.k_gap, &[cb, 1])?;
            expect(&format!("{prefix}.w1"), &dp.w1, &[5 * cb, hidden])?;
            expect(&format!("{prefix}.w2"), &dp.w2, &[hidden, 5 * cb])?;
            expect(&format!("{prefix}.k_sp"), &dp.k_sp, &[1, 1])?;
            expect(&format!("{prefix}.b_sp"), &dp.b_sp, &[1])?;
            expect(&format!("{prefix}.k_out"), &dp.k_out, &[1, 5 * cb])?;
        }
        if hidden == 0 || !(5 * cb).is_multiple_of(hidden) {
            return Err(Error::Format(format!(
                "attention bottleneck width {hidden} does not divide {} channels",
                5 * cb
            )));
        }
        Ok(())
    }

    /// Parameters of the two modality projections, `d·(D_V + D_T)`.
    pub fn projection_param_count(&self) -> usize {
        self.w_v.len() + self.w_t.len()
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every tensor as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let vars: Vec<Var> = self.named().into_iter().map(|(_, t)| tape.param(t)).collect();
        ModelVars::from_ordered(&vars).expect("named() yields a complete layout")
    }

    /// Records every tensor as a constant.
    pub fn register_frozen(&self, tape: &mut Tape) -> ModelVars {
        let vars: Vec<Var> = self
            .named()
            .into_iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect();
        ModelVars::from_ordered(&vars).expect("named() yields a complete layout")
    }
}

impl ModelVars {
    /// Rebuilds the handles from vars listed in [`ModelParams::named`] order.
    pub fn from_ordered(vars: &[Var]) -> Result<Self> {
        let n = vars.len();
        if n < 22 || !(n - 6).is_multiple_of(2) {
            return Err(Error::dim(format!("unexpected parameter count {n}")));
        }
        let per = (n - 6) / 2;
        let rest = &vars[2 * per..];
        Ok(ModelVars {
            dream_t: DreamVars::from_ordered(&vars[..per])?,
            dream_v: DreamVars::from_ordered(&vars[per..2 * per])?,
            g_t: rest[0],
            g_v: rest[1],
            item_emb: rest[2],
            user_emb: rest[3],
            w_t: rest[4],
            w_v: rest[5],
        })
    }
}
