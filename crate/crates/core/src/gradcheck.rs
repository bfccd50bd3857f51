//! Finite-difference verification of tape gradients.

use serde_json::{json, Value};

use crate::autograd::{OpKind, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to rounding are compared absolutely.
    pub abs_floor: f64,
    /// One-sided slopes that disagree by more than this (relative) mark a
    /// kink; such coordinates are excluded.
    pub kink_tol: f64,
    /// Multiple of the expected rounding error of a central difference,
    /// `ε·|f|/h`, below which a discrepancy counts as agreement. The
    /// denominator floor is raised to match.
    pub noise_factor: f64,
    /// Sign-flip the backward rule of this primitive in the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-6,
            tol: 1e-5,
            abs_floor: 1e-6,
            kink_tol: 1e-2,
            noise_factor: 10.0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because the function has a kink there.
    pub excluded: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
    /// Denominator floor actually used.
    pub floor: f64,
    /// Set when a function evaluation failed or was non-finite.
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_err() <= self.tol
    }

    pub fn to_json(&self) -> Value {
        json!({
            "passed": self.passed(),
            "tol": self.tol,
            "floor": self.floor,
            "max_rel_err": self.max_rel_err(),
            "error": self.error,
            "params": self.params.iter().map(|p| json!({
                "name": p.name,
                "max_rel_err": p.max_rel_err,
                "checked": p.checked,
                "excluded": p.excluded,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Compares the tape gradient of `f` against central differences for every
/// coordinate of every named parameter.
///
/// `f` receives a fresh tape and the parameters recorded on it (in the order
/// given) and must return a scalar.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut report = GradCheckReport {
        params: Vec::new(),
        tol: cfg.tol,
        floor: cfg.abs_floor,
        error: None,
    };
    let analytic = match analytic_grads(&f, params, cfg.fault) {
        Ok(g) => g,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };
    let eval = |values: &[(String, Tensor)]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|(_, t)| tape.param(t)).collect();
        let out = f(&mut tape, &vars)?;
        tape.scalar(out)
    };
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let f0 = match eval(&work) {
        Ok(v) => v,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };
    let noise = cfg.noise_factor * f64::EPSILON * f0.abs() / cfg.h;
    let floor = cfg.abs_floor.max(noise / cfg.tol);
    report.floor = floor;
    for (p, grad) in analytic.iter().enumerate() {
        let mut pr = ParamReport {
            name: params[p].0.clone(),
            max_rel_err: 0.0,
            checked: 0,
            excluded: 0,
        };
        for (k, &a) in grad.iter().enumerate() {
            let orig = work[p].1.data()[k];
            work[p].1.data_mut()[k] = orig + cfg.h;
            let plus = eval(&work);
            work[p].1.data_mut()[k] = orig - cfg.h;
            let minus = eval(&work);
            work[p].1.data_mut()[k] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a, b),
                (Err(e), _) | (_, Err(e)) => {
                    report.error = Some(format!("{} [{k}]: {e}", pr.name));
                    report.params.push(pr);
                    return report;
                }
                _ => {
                    report.error = Some(format!("{} [{k}]: non-finite evaluation", pr.name));
                    report.params.push(pr);
                    return report;
                }
            };
            let fwd = (plus - f0) / cfg.h;
            let bwd = (f0 - minus) / cfg.h;
            if (fwd - bwd).abs() > cfg.kink_tol * fwd.abs().max(bwd.abs()).max(1e-4) {
                pr.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            pr.max_rel_err = pr.max_rel_err.max(rel);
            pr.checked += 1;
        }
        report.params.push(pr);
    }
    report
}

fn analytic_grads<F>(f: &F, params: &[(String, Tensor)], fault: Option<OpKind>) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_sign_flip(kind);
    }
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, (_, t))| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn named(name: &str, t: Tensor) -> (String, Tensor) {
        (name.to_string(), t)
    }

    fn linear_composite(tape: &mut Tape, v: &[Var]) -> Result<Var> {
        let y = tape.linear(v[0], v[1], Some(v[2]))?;
        let y = tape.sigmoid(y)?;
        tape.sum_squares(y)
    }

    fn instance() -> Vec<(String, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        vec![
            named("x", Tensor::random_uniform(&[3, 4], &mut rng).unwrap()),
            named("w", Tensor::random_uniform(&[4, 2], &mut rng).unwrap()),
            named("b", Tensor::random_uniform(&[2], &mut rng).unwrap()),
        ]
    }

    #[test]
    fn linear_composite_passes() {
        let report = grad_check(linear_composite, &instance(), &GradCheckConfig::default());
        assert!(report.passed(), "{:?}", report);
        assert_eq!(report.params.len(), 3);
        assert!(report.params.iter().all(|p| p.excluded == 0));
    }

    #[test]
    fn sign_flip_is_caught() {
        let cfg = GradCheckConfig {
            fault: Some(OpKind::Sigmoid),
            ..GradCheckConfig::default()
        };
        let report = grad_check(linear_composite, &instance(), &cfg);
        assert!(!report.passed());
    }

    #[test]
    fn max_tie_coordinates_are_excluded() {
        // a == b elementwise, so every coordinate of either operand sits on
        // the kink of max.
        let f = |tape: &mut Tape, v: &[Var]| {
            let m = tape.max(v[0], v[1])?;
            tape.sum(m)
        };
        let a = Tensor::new(&[3], vec![0.3, -0.7, 1.2]).unwrap();
        let report = grad_check(f, &[named("a", a.clone()), named("b", a)], &GradCheckConfig::default());
        assert_eq!(report.params[0].excluded, 3);
        assert_eq!(report.params[1].excluded, 3);
        assert!(report.passed());
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        let f = |tape: &mut Tape, v: &[Var]| {
            let e = tape.exp(v[0])?;
            tape.sum(e)
        };
        let a = Tensor::new(&[1], vec![709.7]).unwrap();
        let cfg = GradCheckConfig {
            h: 1.0,
            ..GradCheckConfig::default()
        };
        let report = grad_check(f, &[named("a", a)], &cfg);
        assert!(report.error.is_some());
        assert!(!report.passed());
    }
}
