//! Multiply-accumulate accounting.
//!
//! Per token and layer, an expert of width `d` costs
//!
//! ```text
//! 3·d·D      Q/K/V in-projections
//! 2·N·D      attention scores and mixing, always at full width
//! D·d        attention out-projection
//! 5·D        LayerNorm (fixed estimate)
//! 8·D·d      FFN in- and out-projections (hidden width 4D)
//! ```
//!
//! The router head adds `N·D·E` once per image when included.

use std::fmt::Write as _;

use crate::nested::NestedSpec;
use crate::routing::{AssignmentVec, CapacityDist};

/// MACs for one token at expert `expert` in one layer with `n` tokens.
pub fn flops_per_token(expert: usize, n: usize, spec: &NestedSpec) -> u64 {
    let dd = spec.dim as u64;
    let d = spec.expert_dim(expert) as u64;
    let n = n as u64;
    3 * d * dd + 2 * n * dd + dd * d + 5 * dd + 8 * dd * d
}

fn router_flops(n: usize, spec: &NestedSpec) -> u64 {
    (n * spec.dim * spec.experts) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    /// `layers × experts` MACs.
    pub per_layer: Vec<Vec<u64>>,
    /// `layers × experts` token counts.
    pub tokens: Vec<Vec<usize>>,
    pub router: u64,
    pub total: u64,
    /// All tokens at full width, no router.
    pub dense: u64,
    pub ratio: f64,
}

impl FlopReport {
    /// `layer,expert,tokens,macs,ratio`; experts and layers are one-based and
    /// the ratio column is relative to the dense cost of that layer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,expert,tokens,macs,ratio\n");
        let layers = self.per_layer.len() as u64;
        let dense_layer = self.dense / layers.max(1);
        for (l, row) in self.per_layer.iter().enumerate() {
            for (e, &m) in row.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{},{:.6}", l + 1, e + 1, self.tokens[l][e], m, m as f64 / dense_layer as f64);
            }
        }
        if self.router > 0 {
            let _ = writeln!(s, "router,all,,{},{:.6}", self.router, self.router as f64 / self.dense as f64);
        }
        let n: usize = self.tokens.first().map_or(0, |t| t.iter().sum());
        let _ = writeln!(s, "total,all,{},{},{:.6}", n, self.total, self.ratio);
        s
    }
}

/// Cost of one image under assignment `m` with the router at layer 1.
pub fn model_flops(m: &AssignmentVec, spec: &NestedSpec, include_router: bool) -> FlopReport {
    model_flops_with_router_layer(m, spec, include_router, 1)
}

/// Like [`model_flops`], but layers before `router_layer` (one-based) run
/// every token at full width.
pub fn model_flops_with_router_layer(
    m: &AssignmentVec,
    spec: &NestedSpec,
    include_router: bool,
    router_layer: usize,
) -> FlopReport {
    let n = m.len();
    let counts = m.counts(spec.experts);
    let mut dense_counts = vec![0; spec.experts];
    dense_counts[spec.experts - 1] = n;
    let tokens: Vec<Vec<usize>> = (0..spec.layers)
        .map(|l| if l + 1 < router_layer { dense_counts.clone() } else { counts.clone() })
        .collect();
    report(tokens, n, spec, include_router)
}

fn report(tokens: Vec<Vec<usize>>, n: usize, spec: &NestedSpec, include_router: bool) -> FlopReport {
    let per_layer: Vec<Vec<u64>> = tokens
        .iter()
        .map(|row| row.iter().enumerate().map(|(e, &k)| k as u64 * flops_per_token(e, n, spec)).collect())
        .collect();
    let router = if include_router { router_flops(n, spec) } else { 0 };
    let total = per_layer.iter().flatten().sum::<u64>() + router;
    let dense = (spec.layers * n) as u64 * flops_per_token(spec.experts - 1, n, spec);
    FlopReport { per_layer, tokens, router, total, dense, ratio: total as f64 / dense as f64 }
}

/// Ratio implied by `c` alone, using the routing token counts for `n` tokens.
pub fn predicted_flop_ratio(c: &CapacityDist, n: usize, spec: &NestedSpec, router_layer: usize) -> f64 {
    let counts = c.token_counts(n);
    let m = AssignmentVec(counts.iter().enumerate().flat_map(|(e, &k)| std::iter::repeat_n(e, k)).collect());
    model_flops_with_router_layer(&m, spec, false, router_layer).ratio
}
