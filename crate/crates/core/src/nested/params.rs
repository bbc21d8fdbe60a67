use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::routing::RouterParams;
use crate::tensor::Tensor;

/// Weights of one nested block. Projections carry no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// `D×D` each.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `D×D`; token `j` is projected with the first `d_j` rows, transposed.
    pub wo: Tensor,
    /// `D×4D`
    pub ff_in: Tensor,
    /// `D×4D`; used transposed like `wo`.
    pub ff_out: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    /// Router gate strength, starts at zero.
    pub alpha: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `(p·p·C)×D`
    pub patch_embed: Tensor,
    /// `N×D`
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub router: RouterParams,
    /// `D×K`
    pub cls_weight: Tensor,
    /// `K`
    pub cls_bias: Tensor,
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

impl BlockParams {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        Self {
            wq: normal(rng, &[dim, dim], s),
            wk: normal(rng, &[dim, dim], s),
            wv: normal(rng, &[dim, dim], s),
            wo: normal(rng, &[dim, dim], s),
            ff_in: normal(rng, &[dim, 4 * dim], s),
            ff_out: normal(rng, &[dim, 4 * dim], 0.5 * s),
            ln1_gamma: Tensor::full(&[dim], 1.0),
            ln1_beta: Tensor::zeros(&[dim]),
            ln2_gamma: Tensor::full(&[dim], 1.0),
            ln2_beta: Tensor::zeros(&[dim]),
            alpha: Tensor::zeros(&[1]),
        }
    }

    fn tensors(&self) -> [&Tensor; 11] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ff_in,
            &self.ff_out,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.alpha,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 11] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ff_in,
            &mut self.ff_out,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.alpha,
        ]
    }

    const NAMES: [&'static str; 11] = [
        "wq", "wk", "wv", "wo", "ff_in", "ff_out", "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
        "alpha",
    ];
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.spec.dim;
        let p = cfg.patch_len();
        Self {
            patch_embed: normal(rng, &[p, d], 1.0 / (p as f64).sqrt()),
            pos_embed: normal(rng, &[cfg.tokens(), d], 0.02),
            blocks: (0..cfg.spec.layers).map(|_| BlockParams::init(d, rng)).collect(),
            router: RouterParams {
                weight: normal(rng, &[d, cfg.spec.experts], 0.02),
                bias: Tensor::zeros(&[cfg.spec.experts]),
            },
            cls_weight: Tensor::zeros(&[d, cfg.classes]),
            cls_bias: Tensor::zeros(&[cfg.classes]),
        }
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_embed".to_string(), &self.patch_embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BlockParams::NAMES.iter().zip(b.tensors()) {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out.push(("router.weight".to_string(), &self.router.weight));
        out.push(("router.bias".to_string(), &self.router.bias));
        out.push(("cls.weight".to_string(), &self.cls_weight));
        out.push(("cls.bias".to_string(), &self.cls_bias));
        out
    }

    /// Same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.patch_embed, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.router.weight);
        out.push(&mut self.router.bias);
        out.push(&mut self.cls_weight);
        out.push(&mut self.cls_bias);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Overwrites every tensor from `values`, which must follow the
    /// [`named_tensors`](Self::named_tensors) order and shapes.
    pub fn assign(&mut self, values: Vec<Tensor>) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != values.len() {
            return Err(dim_err!("expected {} tensors, got {}", slots.len(), values.len()));
        }
        for (slot, v) in slots.iter_mut().zip(&values) {
            if slot.shape() != v.shape() {
                return Err(dim_err!("tensor shape {:?} vs {:?}", v.shape(), slot.shape()));
            }
        }
        for (slot, v) in slots.into_iter().zip(values) {
            *slot = v;
        }
        Ok(())
    }

    /// Records every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let patch_embed = tape.leaf(self.patch_embed.clone());
        let pos_embed = tape.leaf(self.pos_embed.clone());
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let [wq, wk, wv, wo, ff_in, ff_out, ln1_gamma, ln1_beta, ln2_gamma, ln2_beta, alpha] =
                    b.tensors().map(|t| tape.leaf(t.clone()));
                BlockVars { wq, wk, wv, wo, ff_in, ff_out, ln1_gamma, ln1_beta, ln2_gamma, ln2_beta, alpha }
            })
            .collect();
        let router_weight = tape.leaf(self.router.weight.clone());
        let router_bias = tape.leaf(self.router.bias.clone());
        let cls_weight = tape.leaf(self.cls_weight.clone());
        let cls_bias = tape.leaf(self.cls_bias.clone());
        ModelVars { patch_embed, pos_embed, blocks, router_weight, router_bias, cls_weight, cls_bias }
    }
}

/// Tape handles mirroring [`BlockParams`].
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ff_in: Var,
    pub ff_out: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub alpha: Var,
}

/// Tape handles mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub patch_embed: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub router_weight: Var,
    pub router_bias: Var,
    pub cls_weight: Var,
    pub cls_bias: Var,
}

impl ModelVars {
    /// Same order as [`ModelParams::named_tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.patch_embed, self.pos_embed];
        for b in &self.blocks {
            out.extend([
                b.wq, b.wk, b.wv, b.wo, b.ff_in, b.ff_out, b.ln1_gamma, b.ln1_beta, b.ln2_gamma,
                b.ln2_beta, b.alpha,
            ]);
        }
        out.extend([self.router_weight, self.router_bias, self.cls_weight, self.cls_bias]);
        out
    }

    /// Rebuilds handles from a flat list in [`all`](Self::all) order.
    pub fn from_flat(vars: &[Var], layers: usize) -> Result<Self> {
        if vars.len() != 2 + 11 * layers + 4 {
            return Err(dim_err!("{} vars for {layers} layers", vars.len()));
        }
        let blocks = vars[2..2 + 11 * layers]
            .chunks(11)
            .map(|c| BlockVars {
                wq: c[0],
                wk: c[1],
                wv: c[2],
                wo: c[3],
                ff_in: c[4],
                ff_out: c[5],
                ln1_gamma: c[6],
                ln1_beta: c[7],
                ln2_gamma: c[8],
                ln2_beta: c[9],
                alpha: c[10],
            })
            .collect();
        let t = &vars[2 + 11 * layers..];
        Ok(Self {
            patch_embed: vars[0],
            pos_embed: vars[1],
            blocks,
            router_weight: t[0],
            router_bias: t[1],
            cls_weight: t[2],
            cls_bias: t[3],
        })
    }
}
