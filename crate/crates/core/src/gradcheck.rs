//! Central finite-difference checks of recorded gradients.

use std::fmt;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which gradients are compared absolutely rather than
/// relatively. Round-off in a central difference of an O(1) loss is about
/// 1e-11, so this keeps tiny gradients from reporting noise as error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub param: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst: usize,
    /// Flat indices whose error exceeded the tolerance.
    pub offending: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.offending.is_empty())
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::GradCheck(self.to_string()))
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            write!(f, "param {}: max rel err {:.3e} at {}", p.param, p.max_rel_err, p.worst)?;
            if !p.offending.is_empty() {
                let shown: Vec<_> = p.offending.iter().take(16).collect();
                write!(f, " (over tol {:.1e} at {shown:?}", self.tol)?;
                if p.offending.len() > shown.len() {
                    write!(f, " and {} more", p.offending.len() - shown.len())?;
                }
                write!(f, ")")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Relative error used by the checker.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `f` against central differences for every
/// element of every tensor in `params`, without failing on tolerance.
pub fn check_gradients<F>(f: F, params: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Dimension("grad_check needs a scalar function".into()));
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let mut work = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, a) in analytic.iter().enumerate() {
        let mut check = ParamCheck { param: pi, max_rel_err: 0.0, worst: 0, offending: Vec::new() };
        for i in 0..a.numel() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + FD_STEP;
            let (t, _, o) = eval(&work)?;
            let up = t.value(o).item();
            work[pi].data_mut()[i] = orig - FD_STEP;
            let (t, _, o) = eval(&work)?;
            let down = t.value(o).item();
            work[pi].data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(a.data()[i], numeric);
            if !(e <= tol) {
                check.offending.push(i);
            }
            if e > check.max_rel_err || e.is_nan() {
                check.max_rel_err = e;
                check.worst = i;
            }
        }
        checks.push(check);
    }
    Ok(GradCheckReport { tol, params: checks })
}

/// Like [`check_gradients`] but fails when any element exceeds `tol`.
pub fn grad_check<F>(f: F, params: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients(f, params, tol)?.into_result()
}
