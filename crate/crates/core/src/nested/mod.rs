//! Nested vision transformer.
//!
//! Every projection weight is shared by all experts. Expert `i` reads only
//! the first `d_i` features of a token on the way in and writes only the
//! first `d_i` features on the way out (zero-padded back to `D`), so the
//! parameters of a narrow expert are a prefix of those of any wider one.
//! Attention always mixes tokens at the full width `D` and the FFN hidden
//! layer is always `4D`.

mod model;
mod params;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{dim_err, Error, Result};
use crate::routing::AssignmentVec;
use crate::tensor::Tensor;

pub use model::{
    classify, model_forward, mone_block_forward, nested_ffn, nested_self_attention, patchify,
    tokenize, Forward, Route,
};
pub use params::{BlockParams, BlockVars, ModelParams, ModelVars};

/// Shape of the nested expert family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NestedSpec {
    /// Model width `D`.
    pub dim: usize,
    /// Number of nested experts `E`.
    pub experts: usize,
    /// Attention heads.
    pub heads: usize,
    /// Transformer layers.
    pub layers: usize,
}

impl NestedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.layers == 0 || self.heads == 0 || self.dim == 0 {
            return Err(Error::Config(format!("degenerate nested spec {self:?}")));
        }
        if self.experts > 16 || self.dim % (1 << (self.experts - 1)) != 0 {
            return Err(Error::Config(format!(
                "D={} must be divisible by 2^(E-1) for E={}",
                self.dim, self.experts
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("D={} not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }

    /// Width of expert `i` (zero-based): `D / 2^(E-1-i)`.
    pub fn expert_dim(&self, i: usize) -> usize {
        self.dim >> (self.experts - 1 - i)
    }

    /// All nested widths, narrowest first.
    pub fn dims(&self) -> Vec<usize> {
        (0..self.experts).map(|i| self.expert_dim(i)).collect()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.dim
    }

    fn expert_of_dim(&self, d: usize) -> Option<usize> {
        (0..self.experts).find(|&i| self.expert_dim(i) == d)
    }
}

/// Where the LayerNorm sits relative to each residual branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `x + LN(branch(x))`, the default.
    #[default]
    PostBranch,
    /// Conventional `x + branch(LN(x))`.
    Pre,
}

/// Full model configuration; missing fields take the [`Default`] values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub spec: NestedSpec,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub norm: NormPlacement,
    /// One-based layer whose input features feed the router; earlier layers
    /// run every token at full width.
    pub router_layer: usize,
}

impl Default for ModelConfig {
    /// D=64, E=4, L=4, 4 heads, patch 8 on 32×32 single-channel inputs.
    fn default() -> Self {
        Self {
            spec: NestedSpec { dim: 64, experts: 4, heads: 4, layers: 4 },
            patch: 8,
            height: 32,
            width: 32,
            channels: 1,
            classes: 10,
            norm: NormPlacement::PostBranch,
            router_layer: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "{}x{} image is not divisible into {p}x{p} patches",
                self.height,
                self.width,
                p = self.patch
            )));
        }
        if self.channels == 0 || self.classes == 0 {
            return Err(Error::Config("need at least one channel and one class".into()));
        }
        if self.router_layer == 0 || self.router_layer > self.spec.layers {
            return Err(Error::Config(format!(
                "router layer {} outside 1..={}",
                self.router_layer, self.spec.layers
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }
}

/// Nested width of every token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimVec(Vec<usize>);

impl DimVec {
    /// Checks every entry is one of the widths of `spec`.
    pub fn new(dims: Vec<usize>, spec: &NestedSpec) -> Result<Self> {
        if let Some(&bad) = dims.iter().find(|&&d| spec.expert_of_dim(d).is_none()) {
            return Err(Error::Routing(format!("width {bad} is not one of {:?}", spec.dims())));
        }
        Ok(Self(dims))
    }

    pub fn uniform(expert: usize, tokens: usize, spec: &NestedSpec) -> Self {
        Self(vec![spec.expert_dim(expert); tokens])
    }

    pub fn from_assignment(m: &AssignmentVec, spec: &NestedSpec) -> Result<Self> {
        if let Some(&bad) = m.as_slice().iter().find(|&&e| e >= spec.experts) {
            return Err(Error::Routing(format!("expert {bad} out of range for E={}", spec.experts)));
        }
        Ok(Self(m.as_slice().iter().map(|&e| spec.expert_dim(e)).collect()))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn shared(&self) -> Rc<[usize]> {
        self.0.clone().into()
    }
}

/// First `d` features of `x`.
pub fn extract(x: &[f64], d: usize, spec: &NestedSpec) -> Result<Vec<f64>> {
    if spec.expert_of_dim(d).is_none() || x.len() != spec.dim {
        return Err(Error::Routing(format!("cannot extract width {d} from a {}-vector", x.len())));
    }
    Ok(x[..d].to_vec())
}

/// Zero-pads `x` to the model width.
pub fn pad(x: &[f64], spec: &NestedSpec) -> Result<Vec<f64>> {
    if spec.expert_of_dim(x.len()).is_none() {
        return Err(Error::Routing(format!("width {} is not one of {:?}", x.len(), spec.dims())));
    }
    let mut out = x.to_vec();
    out.resize(spec.dim, 0.0);
    Ok(out)
}

/// Row `j` is `x_j[:d_j] · W[:d_j, :]`.
pub fn sliced_in_projection(x: &Tensor, dvec: &DimVec, w: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let out = tape.sliced_in(xv, wv, dvec.shared())?;
    Ok(tape.value(out).clone())
}

/// Token `j` becomes `h_j · W[:d_j, :]ᵀ`, a vector of length `d_j`.
pub fn sliced_out_projection(h: &Tensor, dvec: &DimVec, w: &Tensor) -> Result<Vec<Vec<f64>>> {
    if h.rows() != dvec.len() {
        return Err(dim_err!("{} tokens but {} widths", h.rows(), dvec.len()));
    }
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let wv = tape.leaf(w.clone());
    let out = tape.sliced_out(hv, wv, dvec.shared())?;
    let padded = tape.value(out);
    Ok(dvec.as_slice().iter().enumerate().map(|(j, &d)| padded.row(j)[..d].to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec2() -> NestedSpec {
        NestedSpec { dim: 2, experts: 2, heads: 1, layers: 1 }
    }

    #[test]
    fn spec_dims() {
        let s = NestedSpec { dim: 64, experts: 4, heads: 4, layers: 4 };
        s.validate().unwrap();
        assert_eq!(s.dims(), vec![8, 16, 32, 64]);
        assert!(NestedSpec { dim: 12, experts: 4, heads: 4, layers: 1 }.validate().is_err());
        assert!(NestedSpec { dim: 64, experts: 4, heads: 3, layers: 1 }.validate().is_err());
    }

    #[test]
    fn extract_and_pad() {
        let s = NestedSpec { dim: 4, experts: 2, heads: 1, layers: 1 };
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(extract(&x, 2, &s).unwrap(), vec![1.0, 2.0]);
        assert_eq!(pad(&[1.0, 2.0], &s).unwrap(), vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(pad(&extract(&x, 4, &s).unwrap(), &s).unwrap(), x.to_vec());
        assert!(matches!(extract(&x, 3, &s), Err(Error::Routing(_))));
    }

    #[test]
    fn sliced_in_example() {
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![5.0, 6.0]]).unwrap();
        let d = DimVec::new(vec![1], &spec2()).unwrap();
        assert_eq!(sliced_in_projection(&x, &d, &w).unwrap().data(), &[5.0, 10.0]);
        let full = DimVec::new(vec![2], &spec2()).unwrap();
        assert_eq!(sliced_in_projection(&x, &full, &w).unwrap(), x.matmul(&w).unwrap());
    }

    #[test]
    fn sliced_out_example() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let h = Tensor::from_rows(&[vec![3.0, 4.0], vec![3.0, 4.0]]).unwrap();
        let d = DimVec::new(vec![1, 2], &spec2()).unwrap();
        assert_eq!(sliced_out_projection(&h, &d, &w).unwrap(), vec![vec![3.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn dimvec_rejects_foreign_width() {
        let s = NestedSpec { dim: 8, experts: 2, heads: 1, layers: 1 };
        assert!(DimVec::new(vec![4, 8], &s).is_ok());
        assert!(matches!(DimVec::new(vec![2], &s), Err(Error::Routing(_))));
        assert!(DimVec::from_assignment(&AssignmentVec(vec![2]), &s).is_err());
    }

    #[test]
    fn model_config_validation() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tokens(), 16);
        let bad = ModelConfig { height: 30, ..c };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig { router_layer: 5, ..c };
        assert!(bad.validate().is_err());
    }
}
