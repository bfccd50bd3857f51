//! Distribution alignment between two modalities: a multi-bandwidth Gaussian
//! kernel MMD and an InfoNCE contrastive term.
//!
//! ```
//! use alignrec::align::{gaussian_kernel, mmd_squared_value, AlignConfig};
//! use alignrec::Tensor;
//!
//! let v = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
//! let t = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
//! let cfg = AlignConfig { bandwidths: vec![1.0], ..AlignConfig::default() };
//! let k = gaussian_kernel(v.data(), t.data(), 1.0).unwrap();
//! let mmd = mmd_squared_value(&v, &t, &cfg).unwrap();
//! assert!((mmd - (2.0 - 2.0 * k)).abs() < 1e-15);
//! ```

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    /// Gaussian kernel bandwidths; the MMD is averaged over them.
    pub bandwidths: Vec<f64>,
    /// InfoNCE temperature.
    pub tau: f64,
    pub lambda_mmd: f64,
    pub lambda_cl: f64,
    /// Average the InfoNCE loss over both anchor directions.
    pub symmetric: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            bandwidths: vec![1.0, 1.5, 2.0],
            tau: 0.2,
            lambda_mmd: 0.15,
            lambda_cl: 0.01,
            symmetric: false,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::Config("at least one kernel bandwidth is required".into()));
        }
        if let Some(s) = self.bandwidths.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("kernel bandwidth {s} must be positive")));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        for (name, v) in [("lambda_mmd", self.lambda_mmd), ("lambda_cl", self.lambda_cl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// `exp(−‖v − t‖² / 2σ²)`.
pub fn gaussian_kernel(v: &[f64], t: &[f64], sigma: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::param(format!("kernel bandwidth {sigma} must be positive")));
    }
    if v.len() != t.len() {
        return Err(Error::dim(format!(
            "kernel inputs have lengths {} and {}",
            v.len(),
            t.len()
        )));
    }
    let d2: f64 = v.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-d2 / (2.0 * sigma * sigma)).exp())
}

fn check_pair(tape: &Tape, v: Var, t: Var, what: &str) -> Result<()> {
    let (sv, st) = (tape.shape(v), tape.shape(t));
    if sv.len() != 2 || st.len() != 2 || sv[1] != st[1] {
        return Err(Error::dim(format!("{what}: shapes {sv:?} and {st:?} are incompatible")));
    }
    if sv[0] != st[0] {
        return Err(Error::dim(format!(
            "{what}: sample counts differ ({} vs {})",
            sv[0], st[0]
        )));
    }
    if sv[0] == 0 {
        return Err(Error::dim(format!("{what}: empty input")));
    }
    Ok(())
}

fn kernel_mean(tape: &mut Tape, a: Var, b: Var, sigma: f64) -> Result<Var> {
    let d2 = tape.sq_dists(a, b)?;
    let scaled = tape.scale(d2, -1.0 / (2.0 * sigma * sigma))?;
    let k = tape.exp(scaled)?;
    tape.mean(k)
}

/// Biased squared MMD between the rows of `v` and `t`, averaged over the
/// configured bandwidths.
pub fn mmd_squared(tape: &mut Tape, v: Var, t: Var, cfg: &AlignConfig) -> Result<Var> {
    check_pair(tape, v, t, "mmd_squared")?;
    cfg.validate()?;
    let mut total: Option<Var> = None;
    for &sigma in &cfg.bandwidths {
        let kvv = kernel_mean(tape, v, v, sigma)?;
        let ktt = kernel_mean(tape, t, t, sigma)?;
        let kvt = kernel_mean(tape, v, t, sigma)?;
        let within = tape.add(kvv, ktt)?;
        let cross = tape.scale(kvt, 2.0)?;
        let term = tape.sub(within, cross)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = total.expect("bandwidths validated non-empty");
    tape.scale(total, 1.0 / cfg.bandwidths.len() as f64)
}

/// Squared MMD for each bandwidth separately, without recording gradients.
pub fn mmd_per_bandwidth(v: &Tensor, t: &Tensor, bandwidths: &[f64]) -> Result<Vec<f64>> {
    bandwidths
        .iter()
        .map(|&s| {
            let cfg = AlignConfig {
                bandwidths: vec![s],
                ..AlignConfig::default()
            };
            mmd_squared_value(v, t, &cfg)
        })
        .collect()
}

/// Value of [`mmd_squared`] on constant inputs.
pub fn mmd_squared_value(v: &Tensor, t: &Tensor, cfg: &AlignConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(v.clone()), tape.constant(t.clone()));
    let out = mmd_squared(&mut tape, a, b, cfg)?;
    tape.scalar(out)
}

fn infonce_directed(tape: &mut Tape, anchors: Var, targets: Var, tau: f64) -> Result<Var> {
    let sim = tape.matmul_nt(anchors, targets)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let lse = tape.logsumexp_rows(logits)?;
    let pos = tape.diag(logits)?;
    let per_row = tape.sub(lse, pos)?;
    tape.mean(per_row)
}

/// InfoNCE with `v` rows as anchors and in-batch `t` rows as candidates,
/// on L2-normalised rows. With `symmetric` the two anchor directions are
/// averaged.
pub fn infonce(tape: &mut Tape, v: Var, t: Var, tau: f64, symmetric: bool) -> Result<Var> {
    check_pair(tape, v, t, "infonce")?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param(format!("temperature {tau} must be positive")));
    }
    let vn = tape.l2_normalize_rows(v)?;
    let tn = tape.l2_normalize_rows(t)?;
    let forward = infonce_directed(tape, vn, tn, tau)?;
    if !symmetric {
        return Ok(forward);
    }
    let backward = infonce_directed(tape, tn, vn, tau)?;
    let both = tape.add(forward, backward)?;
    tape.scale(both, 0.5)
}

/// The two alignment terms, kept separate for reporting.
#[derive(Clone, Copy, Debug)]
pub struct AlignTerms {
    pub mmd: Var,
    pub infonce: Var,
}

pub fn align_terms(tape: &mut Tape, v: Var, t: Var, cfg: &AlignConfig) -> Result<AlignTerms> {
    Ok(AlignTerms {
        mmd: mmd_squared(tape, v, t, cfg)?,
        infonce: infonce(tape, v, t, cfg.tau, cfg.symmetric)?,
    })
}

/// `λ_mmd·MMD² + λ_cl·InfoNCE`.
pub fn align_loss(tape: &mut Tape, v: Var, t: Var, cfg: &AlignConfig) -> Result<Var> {
    let terms = align_terms(tape, v, t, cfg)?;
    let a = tape.scale(terms.mmd, cfg.lambda_mmd)?;
    let b = tape.scale(terms.infonce, cfg.lambda_cl)?;
    tape.add(a, b)
}
