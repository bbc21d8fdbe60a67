use std::rc::Rc;

use super::{DimVec, ModelConfig, ModelParams, ModelVars, NormPlacement};
use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::nested::params::BlockVars;
use crate::nested::BlockParams;
use crate::routing::{AssignmentVec, RouterProbs};
use crate::tensor::{Tensor, LN_EPS};

/// How tokens are mapped to experts during a forward pass.
pub enum Route<'a> {
    /// Every token runs at expert `i`'s width; router and gate are unused.
    Granularity(usize),
    /// The router scores tokens once and `assign(image, probs)` picks each
    /// image's experts. The chosen probabilities gate every later FFN branch.
    Routed(&'a mut dyn FnMut(usize, &RouterProbs) -> Result<AssignmentVec>),
}

pub struct Forward {
    /// `B×K`
    pub logits: Var,
    /// Per image; empty for [`Route::Granularity`].
    pub assignments: Vec<AssignmentVec>,
    pub router_probs: Vec<RouterProbs>,
}

/// Splits an `H×W×C` row-major image into `N` flattened patches.
pub fn patchify(image: &[f64], cfg: &ModelConfig) -> Result<Vec<f64>> {
    let (h, w, c, p) = (cfg.height, cfg.width, cfg.channels, cfg.patch);
    if image.len() != h * w * c {
        return Err(dim_err!("image has {} values, expected {h}x{w}x{c}", image.len()));
    }
    let mut out = Vec::with_capacity(image.len());
    for gy in 0..h / p {
        for gx in 0..w / p {
            for py in 0..p {
                let start = ((gy * p + py) * w + gx * p) * c;
                out.extend_from_slice(&image[start..start + p * c]);
            }
        }
    }
    Ok(out)
}

fn sa_branch(
    tape: &mut Tape,
    cfg: &ModelConfig,
    b: &BlockVars,
    x: Var,
    dims: &Rc<[usize]>,
    group: usize,
) -> Result<Var> {
    let input = match cfg.norm {
        NormPlacement::PostBranch => x,
        NormPlacement::Pre => tape.layer_norm(x, b.ln1_gamma, b.ln1_beta, LN_EPS)?,
    };
    let q = tape.sliced_in(input, b.wq, dims.clone())?;
    let k = tape.sliced_in(input, b.wk, dims.clone())?;
    let v = tape.sliced_in(input, b.wv, dims.clone())?;
    let a = tape.attention(q, k, v, group, cfg.spec.heads)?;
    let o = tape.sliced_out(a, b.wo, dims.clone())?;
    match cfg.norm {
        NormPlacement::PostBranch => tape.layer_norm(o, b.ln1_gamma, b.ln1_beta, LN_EPS),
        NormPlacement::Pre => Ok(o),
    }
}

fn ffn_branch(tape: &mut Tape, cfg: &ModelConfig, b: &BlockVars, z: Var, dims: &Rc<[usize]>) -> Result<Var> {
    let input = match cfg.norm {
        NormPlacement::PostBranch => z,
        NormPlacement::Pre => tape.layer_norm(z, b.ln2_gamma, b.ln2_beta, LN_EPS)?,
    };
    let h = tape.sliced_in(input, b.ff_in, dims.clone())?;
    let h = tape.gelu(h);
    let f = tape.sliced_out(h, b.ff_out, dims.clone())?;
    match cfg.norm {
        NormPlacement::PostBranch => tape.layer_norm(f, b.ln2_gamma, b.ln2_beta, LN_EPS),
        NormPlacement::Pre => Ok(f),
    }
}

/// `z = x + SA(x)`, `x' = z + gate ⊙ FFN(z)` with `gate = α·r_sel + 1`.
pub(crate) fn block(
    tape: &mut Tape,
    cfg: &ModelConfig,
    b: &BlockVars,
    x: Var,
    dims: &Rc<[usize]>,
    r_sel: Option<Var>,
    group: usize,
) -> Result<Var> {
    let sa = sa_branch(tape, cfg, b, x, dims, group)?;
    let z = tape.add(x, sa)?;
    let mut f = ffn_branch(tape, cfg, b, z, dims)?;
    if let Some(r) = r_sel {
        let g = tape.gate(b.alpha, r)?;
        f = tape.row_scale(f, g)?;
    }
    tape.add(z, f)
}

/// Patch embedding plus positional embedding for a `(B·N)×(p·p·C)` batch.
pub(crate) fn embed(tape: &mut Tape, vars: &ModelVars, patches: Var) -> Result<Var> {
    let x = tape.matmul(patches, vars.patch_embed)?;
    tape.add_tiled(x, vars.pos_embed)
}

pub(crate) fn head(tape: &mut Tape, vars: &ModelVars, x: Var, group: usize) -> Result<Var> {
    let pooled = tape.mean_pool(x, group)?;
    let logits = tape.matmul(pooled, vars.cls_weight)?;
    tape.add_row(logits, vars.cls_bias)
}

impl ModelConfig {
    /// Runs a batch of patchified images (`(B·N)×(p·p·C)`) through the model.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, patches: &Tensor, route: Route<'_>) -> Result<Forward> {
        let n = self.tokens();
        if patches.cols() != self.patch_len() || patches.rows() % n != 0 {
            return Err(dim_err!("patch batch {:?} for {n} tokens of {}", patches.shape(), self.patch_len()));
        }
        let batch = patches.rows() / n;
        let spec = &self.spec;
        let p = tape.leaf(patches.clone());
        let mut x = embed(tape, vars, p)?;

        let mut assignments = Vec::new();
        let mut router_probs = Vec::new();
        match route {
            Route::Granularity(i) => {
                let dims: Rc<[usize]> = vec![spec.expert_dim(i); batch * n].into();
                for b in &vars.blocks {
                    x = block(tape, self, b, x, &dims, None, n)?;
                }
            }
            Route::Routed(assign) => {
                let dense: Rc<[usize]> = vec![spec.dim; batch * n].into();
                let first = self.router_layer - 1;
                for b in &vars.blocks[..first] {
                    x = block(tape, self, b, x, &dense, None, n)?;
                }
                let logits = tape.matmul(x, vars.router_weight)?;
                let logits = tape.add_row(logits, vars.router_bias)?;
                let probs = tape.row_softmax(logits)?;
                let mut flat = Vec::with_capacity(batch * n);
                for img in 0..batch {
                    let rows = Tensor::new(
                        &[n, spec.experts],
                        tape.value(probs).data()[img * n * spec.experts..(img + 1) * n * spec.experts].to_vec(),
                    )?;
                    let r = RouterProbs::from_token_rows(&rows)?;
                    let m = assign(img, &r)?;
                    if m.len() != n || m.as_slice().iter().any(|&e| e >= spec.experts) {
                        return Err(dim_err!("assignment of {} tokens for {n}", m.len()));
                    }
                    flat.extend_from_slice(m.as_slice());
                    assignments.push(m);
                    router_probs.push(r);
                }
                let dims: Rc<[usize]> = flat.iter().map(|&e| spec.expert_dim(e)).collect::<Vec<_>>().into();
                let r_sel = tape.pick(probs, flat)?;
                for b in &vars.blocks[first..] {
                    x = block(tape, self, b, x, &dims, Some(r_sel), n)?;
                }
            }
        }
        let logits = head(tape, vars, x, n)?;
        Ok(Forward { logits, assignments, router_probs })
    }
}

fn single_block(params: &BlockParams, tape: &mut Tape) -> BlockVars {
    BlockVars {
        wq: tape.leaf(params.wq.clone()),
        wk: tape.leaf(params.wk.clone()),
        wv: tape.leaf(params.wv.clone()),
        wo: tape.leaf(params.wo.clone()),
        ff_in: tape.leaf(params.ff_in.clone()),
        ff_out: tape.leaf(params.ff_out.clone()),
        ln1_gamma: tape.leaf(params.ln1_gamma.clone()),
        ln1_beta: tape.leaf(params.ln1_beta.clone()),
        ln2_gamma: tape.leaf(params.ln2_gamma.clone()),
        ln2_beta: tape.leaf(params.ln2_beta.clone()),
        alpha: tape.leaf(params.alpha.clone()),
    }
}

/// Token features `N×D` of one `H×W×C` image.
pub fn tokenize(image: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    cfg.validate()?;
    let patches = patchify(image.data(), cfg)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let p = tape.leaf(Tensor::new(&[cfg.tokens(), cfg.patch_len()], patches)?);
    let x = embed(&mut tape, &vars, p)?;
    Ok(tape.value(x).clone())
}

/// Attention branch output (already padded and normalized) for one token set.
pub fn nested_self_attention(x: &Tensor, dvec: &DimVec, params: &BlockParams, cfg: &ModelConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = single_block(params, &mut tape);
    let xv = tape.leaf(x.clone());
    let out = sa_branch(&mut tape, cfg, &b, xv, &dvec.shared(), x.rows())?;
    Ok(tape.value(out).clone())
}

/// Feed-forward branch output (already padded and normalized).
pub fn nested_ffn(z: &Tensor, dvec: &DimVec, params: &BlockParams, cfg: &ModelConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = single_block(params, &mut tape);
    let zv = tape.leaf(z.clone());
    let out = ffn_branch(&mut tape, cfg, &b, zv, &dvec.shared())?;
    Ok(tape.value(out).clone())
}

/// One routed block; `r_sel[i]` is the router probability of token `i`'s expert.
pub fn mone_block_forward(
    x: &Tensor,
    m: &AssignmentVec,
    r_sel: &[f64],
    params: &BlockParams,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    if r_sel.len() != x.rows() {
        return Err(dim_err!("{} router values for {} tokens", r_sel.len(), x.rows()));
    }
    let dims = DimVec::from_assignment(m, &cfg.spec)?;
    let mut tape = Tape::new();
    let b = single_block(params, &mut tape);
    let xv = tape.leaf(x.clone());
    let r = tape.leaf(Tensor::new(&[r_sel.len(), 1], r_sel.to_vec())?);
    let out = block(&mut tape, cfg, &b, xv, &dims.shared(), Some(r), x.rows())?;
    Ok(tape.value(out).clone())
}

/// Mean-pooled linear classifier over final token features.
pub fn classify(x: &Tensor, params: &ModelParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let w = tape.leaf(params.cls_weight.clone());
    let b = tape.leaf(params.cls_bias.clone());
    let xv = tape.leaf(x.clone());
    let pooled = tape.mean_pool(xv, x.rows())?;
    let logits = tape.matmul(pooled, w)?;
    let logits = tape.add_row(logits, b)?;
    Ok(tape.value(logits).data().to_vec())
}

/// Logits of one image under a fixed assignment; the router still supplies
/// the gate values.
pub fn model_forward(image: &Tensor, params: &ModelParams, cfg: &ModelConfig, m: &AssignmentVec) -> Result<Vec<f64>> {
    cfg.validate()?;
    let patches = Tensor::new(&[cfg.tokens(), cfg.patch_len()], patchify(image.data(), cfg)?)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let mut fixed = |_: usize, _: &RouterProbs| Ok(m.clone());
    let out = cfg.forward(&mut tape, &vars, &patches, Route::Routed(&mut fixed))?;
    Ok(tape.value(out.logits).data().to_vec())
}
