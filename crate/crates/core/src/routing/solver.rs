//! Capacity distribution from a target effective capacity.
//!
//! Maximizes `Σ c_i/δ^i − β·Σ c_i·ln c_i` over the simplex subject to
//! `Σ c_i·w_i = e_c`, where `w_i = 2^-(E-1-i)` is the relative width of
//! expert `i` (zero-based). The entropy term makes the objective strictly
//! concave and pushes every coordinate off the boundary, so the optimum is
//! the Gibbs form
//!
//! ```text
//! c_i(μ) ∝ exp((a_i + μ·w_i) / β)
//! ```
//!
//! with the multiplier `μ` fixed by the effective-capacity constraint. The
//! constraint residual is strictly increasing in `μ` (its derivative is
//! `Var_c(w)/β`), so a bracketed Newton iteration on one scalar finds it.

use serde::{Deserialize, Serialize};

use super::{min_effective_capacity, CapacityDist};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Entropy weight.
    pub beta: f64,
    /// Geometric decay of the linear preference term.
    pub delta: f64,
    /// Reverse the linear term so the widest expert is preferred.
    #[serde(default)]
    pub flip_linear: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { beta: 10.0, delta: 2.0, flip_linear: false }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.delta > 1.0) || !self.delta.is_finite() {
            return Err(Error::Config(format!("delta must exceed 1, got {}", self.delta)));
        }
        Ok(())
    }

    /// Linear preference weight of each expert.
    pub fn linear_weights(&self, experts: usize) -> Vec<f64> {
        (0..experts)
            .map(|i| {
                let p = if self.flip_linear { experts - 1 - i } else { i };
                self.delta.powi(-(p as i32))
            })
            .collect()
    }
}

/// Relative width `d_i/D` of every expert.
fn widths(experts: usize) -> Vec<f64> {
    (0..experts).map(|i| 1.0 / 2f64.powi((experts - 1 - i) as i32)).collect()
}

/// Objective value of `c`; `0·ln 0` counts as zero.
pub fn capacity_objective(c: &[f64], opts: &SolverOptions) -> f64 {
    let a = opts.linear_weights(c.len());
    c.iter()
        .zip(&a)
        .map(|(&ci, &ai)| ai * ci - if ci > 0.0 { opts.beta * ci * ci.ln() } else { 0.0 })
        .sum()
}

fn gibbs(a: &[f64], w: &[f64], beta: f64, mu: f64) -> Vec<f64> {
    let logits: Vec<f64> = a.iter().zip(w).map(|(ai, wi)| (ai + mu * wi) / beta).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut c: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = c.iter().sum();
    c.iter_mut().for_each(|x| *x /= z);
    c
}

/// Solves for the capacity distribution reaching effective capacity `ec`.
pub fn solve_capacity(ec: f64, experts: usize, opts: &SolverOptions) -> Result<CapacityDist> {
    opts.validate()?;
    if experts == 0 {
        return Err(Error::Config("need at least one expert".into()));
    }
    let lo_ec = min_effective_capacity(experts);
    if !ec.is_finite() || ec < lo_ec - 1e-12 || ec > 1.0 + 1e-12 {
        return Err(Error::Infeasible(format!(
            "effective capacity {ec} outside [{lo_ec}, 1] for {experts} experts"
        )));
    }
    // The two extremes are single feasible points.
    if experts == 1 || ec >= 1.0 - 1e-12 {
        return Ok(CapacityDist::one_hot(experts, experts - 1));
    }
    if ec <= lo_ec + 1e-12 {
        return Ok(CapacityDist::one_hot(experts, 0));
    }

    let a = opts.linear_weights(experts);
    let w = widths(experts);
    let residual = |mu: f64| -> (f64, f64, Vec<f64>) {
        let c = gibbs(&a, &w, opts.beta, mu);
        let mean: f64 = c.iter().zip(&w).map(|(ci, wi)| ci * wi).sum();
        let var: f64 = c.iter().zip(&w).map(|(ci, wi)| ci * (wi - mean).powi(2)).sum();
        (mean - ec, var / opts.beta, c)
    };

    let mut lo = -1.0;
    let mut hi = 1.0;
    while residual(lo).0 > 0.0 {
        lo *= 2.0;
        if lo < -1e15 {
            return Err(Error::Numeric("capacity solver failed to bracket".into()));
        }
    }
    while residual(hi).0 < 0.0 {
        hi *= 2.0;
        if hi > 1e15 {
            return Err(Error::Numeric("capacity solver failed to bracket".into()));
        }
    }

    let mut mu = 0.5 * (lo + hi);
    for _ in 0..500 {
        let (g, dg, _) = residual(mu);
        // stop before moving away from an already converged point
        if g.abs() < 1e-15 {
            break;
        }
        if g > 0.0 {
            hi = mu;
        } else {
            lo = mu;
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()) {
            break;
        }
        let newton = mu - g / dg;
        mu = if dg > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    let (_, _, c) = residual(mu);
    CapacityDist::new(c)
}
