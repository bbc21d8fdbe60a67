//! Token-to-expert routing.
//!
//! Experts are indexed from zero here: expert `0` is the narrowest nested
//! model (width `D/2^(E-1)`) and expert `E-1` is the full model.
//!
//! A single linear-softmax router scores every token once. Expert
//! preferred routing then walks the experts from widest to narrowest, each
//! taking its `floor(c_j·N)` favourite unassigned tokens; anything left over
//! falls to the narrowest expert.

mod solver;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nested::NestedSpec;
use crate::tensor::Tensor;

pub use solver::{capacity_objective, solve_capacity, SolverOptions};

/// Tolerance on `Σc = 1` when validating a capacity distribution.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    /// `D×E`
    pub weight: Tensor,
    /// `E`
    pub bias: Tensor,
}

impl RouterParams {
    pub fn zeros(dim: usize, experts: usize) -> Self {
        Self { weight: Tensor::zeros(&[dim, experts]), bias: Tensor::zeros(&[experts]) }
    }

    pub fn experts(&self) -> usize {
        self.bias.numel()
    }
}

/// Router probabilities for one image, `E×N`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterProbs {
    experts: usize,
    tokens: usize,
    data: Vec<f64>,
}

impl RouterProbs {
    /// Builds from an `E×N` row-major buffer.
    pub fn new(experts: usize, tokens: usize, data: Vec<f64>) -> Result<Self> {
        if experts == 0 || tokens == 0 || data.len() != experts * tokens {
            return Err(dim_err!("router probs {experts}x{tokens} with {} values", data.len()));
        }
        Ok(Self { experts, tokens, data })
    }

    /// Builds from token-major rows (`N×E`), the layout the router emits.
    pub fn from_token_rows(rows: &Tensor) -> Result<Self> {
        let t = rows.transpose();
        Self::new(t.rows(), t.cols(), t.into_data())
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn get(&self, expert: usize, token: usize) -> f64 {
        self.data[expert * self.tokens + token]
    }

    /// Scores of every token for one expert.
    pub fn expert_row(&self, expert: usize) -> &[f64] {
        &self.data[expert * self.tokens..(expert + 1) * self.tokens]
    }

    pub fn expert_row_mut(&mut self, expert: usize) -> &mut [f64] {
        &mut self.data[expert * self.tokens..(expert + 1) * self.tokens]
    }
}

/// Expert index per token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentVec(pub Vec<usize>);

impl AssignmentVec {
    pub fn uniform(expert: usize, tokens: usize) -> Self {
        Self(vec![expert; tokens])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Number of tokens per expert.
    pub fn counts(&self, experts: usize) -> Vec<usize> {
        let mut counts = vec![0; experts];
        for &e in &self.0 {
            counts[e] += 1;
        }
        counts
    }
}

/// Fraction of tokens handled by each expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityDist(Vec<f64>);

impl CapacityDist {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        if c.is_empty() {
            return Err(Error::Routing("empty capacity distribution".into()));
        }
        if c.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Routing(format!("capacities must lie in [0, 1]: {c:?}")));
        }
        let s: f64 = c.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Routing(format!("capacities sum to {s}, not 1")));
        }
        Ok(Self(c))
    }

    pub fn one_hot(experts: usize, expert: usize) -> Self {
        let mut c = vec![0.0; experts];
        c[expert] = 1.0;
        Self(c)
    }

    pub fn uniform(experts: usize) -> Self {
        Self(vec![1.0 / experts as f64; experts])
    }

    pub fn experts(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `Σ c_i·d_i/D`.
    pub fn effective_capacity(&self) -> f64 {
        let e = self.0.len() as i32;
        self.0.iter().enumerate().map(|(i, c)| c / 2f64.powi(e - 1 - i as i32)).sum()
    }

    /// Tokens per expert under expert preferred routing for `n` tokens.
    ///
    /// Experts above the narrowest get `floor(c_j·n)`; the narrowest takes
    /// the remainder.
    pub fn token_counts(&self, n: usize) -> Vec<usize> {
        let mut counts = vec![0; self.0.len()];
        let mut left = n;
        for j in (1..self.0.len()).rev() {
            let k = ((self.0[j] * n as f64).floor() as usize).min(left);
            counts[j] = k;
            left -= k;
        }
        counts[0] = left;
        counts
    }
}

/// `e_c = Σ c_i / 2^(E-1-i)` with zero-based `i`.
pub fn effective_capacity(c: &CapacityDist, spec: &NestedSpec) -> Result<f64> {
    if c.experts() != spec.experts {
        return Err(Error::Routing(format!(
            "capacity has {} experts, model has {}",
            c.experts(),
            spec.experts
        )));
    }
    Ok(c.effective_capacity())
}

/// Smallest reachable effective capacity for `experts` nested experts.
pub fn min_effective_capacity(experts: usize) -> f64 {
    1.0 / 2f64.powi(experts as i32 - 1)
}

/// `softmax(W_r·x + b_r)` for every token row of `x` (`N×D`).
pub fn router_forward(x: &Tensor, params: &RouterParams) -> Result<RouterProbs> {
    let mut logits = x.matmul(&params.weight)?;
    let e = params.experts();
    for row in logits.data_mut().chunks_mut(e) {
        row.iter_mut().zip(params.bias.data()).for_each(|(l, b)| *l += b);
    }
    RouterProbs::from_token_rows(&logits.row_softmax()?)
}

/// Indices of the `k` largest scores among `candidates`; ties go to the
/// lower token index.
fn top_k(scores: &[f64], candidates: &mut [usize], k: usize) -> Vec<usize> {
    candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    candidates[..k].to_vec()
}

/// Expert preferred routing of `n` tokens.
pub fn epr_assign(r: &RouterProbs, c: &CapacityDist, n: usize) -> Result<AssignmentVec> {
    let c = CapacityDist::new(c.0.clone())?;
    if r.experts() != c.experts() || r.tokens() != n {
        return Err(Error::Routing(format!(
            "router probs are {}x{}, expected {}x{n}",
            r.experts(),
            r.tokens(),
            c.experts()
        )));
    }
    let counts = c.token_counts(n);
    let mut assignment = vec![0; n];
    let mut free: Vec<usize> = (0..n).collect();
    for j in (1..c.experts()).rev() {
        if counts[j] == 0 {
            continue;
        }
        let chosen = top_k(r.expert_row(j), &mut free, counts[j]);
        for &t in &chosen {
            assignment[t] = j;
        }
        free.retain(|t| !chosen.contains(t));
    }
    Ok(AssignmentVec(assignment))
}

/// Random routing with the same per-expert counts as [`epr_assign`].
pub fn random_assign(c: &CapacityDist, n: usize, seed: u64) -> Result<AssignmentVec> {
    let c = CapacityDist::new(c.0.clone())?;
    let mut assignment: Vec<usize> = c
        .token_counts(n)
        .iter()
        .enumerate()
        .flat_map(|(j, &k)| std::iter::repeat_n(j, k))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    assignment.shuffle(&mut rng);
    Ok(AssignmentVec(assignment))
}
