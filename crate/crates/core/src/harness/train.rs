//! Joint nested pretraining and routed fine-tuning.
//!
//! Both loops share one optimizer: momentum SGD with an optional cosine
//! decay, global-norm clipping on the backbone, and a separate learning-rate
//! multiplier for the router head and the per-layer gate strengths `α`.
//! The router only receives gradient through `α·r`, and `α` starts at zero,
//! so at the backbone's learning rate the router barely moves within a
//! desk-scale budget; the multiplier lets it train.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{stream_seed, Checkpoint, CheckpointMeta, Dataset, Stream};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::flops::{model_flops, model_flops_with_router_layer};
use crate::nested::{ModelConfig, ModelParams, ModelVars, Route};
use crate::routing::{epr_assign, solve_capacity, AssignmentVec, CapacityDist, SolverOptions};
use crate::tensor::Tensor;

/// Effective capacity used at each fine-tuning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityMode {
    Fixed(f64),
    /// One value drawn uniformly per step, shared by the whole batch.
    Sampled(Vec<f64>),
}

impl CapacityMode {
    /// `{0.15, 0.25, …, 0.95}`.
    pub fn adaptive() -> Self {
        Self::Sampled((0..9).map(|i| (15 + 10 * i) as f64 / 100.0).collect())
    }

    /// Whether `ec` is a capacity this mode trains at.
    pub fn covers(&self, ec: f64) -> bool {
        let close = |x: f64| (x - ec).abs() < 1e-9;
        match self {
            Self::Fixed(x) => close(*x),
            Self::Sampled(v) => v.iter().any(|&x| close(x)),
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            Self::Fixed(x) => std::slice::from_ref(x),
            Self::Sampled(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `lr·(1 + cos(π·t/T))/2`
    #[default]
    Cosine,
    Constant,
}

impl Schedule {
    fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Self::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
            Self::Constant => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    /// Global gradient-norm bound on everything but the router and gates.
    pub clip_norm: Option<f64>,
    /// Learning-rate multiplier for the router and the gates.
    pub router_lr_scale: f64,
    pub capacity: CapacityMode,
    /// Stretch fine-tuning so its MACs match `epochs` of full-width training.
    pub isoflops: bool,
    pub solver: SolverOptions,
    /// Random translations of up to two pixels (zero fill).
    pub random_crop: bool,
}

impl Default for TrainConfig {
    /// Fine-tuning defaults.
    fn default() -> Self {
        Self {
            lr: 0.02,
            schedule: Schedule::Cosine,
            epochs: 2,
            batch_size: 32,
            seed: 0,
            momentum: 0.9,
            clip_norm: Some(1.0),
            router_lr_scale: 30.0,
            capacity: CapacityMode::Fixed(1.0),
            isoflops: false,
            solver: SolverOptions::default(),
            random_crop: false,
        }
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self { lr: 0.05, epochs: 3, ..Default::default() }
    }

    fn validate(&self, examples: usize) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.router_lr_scale >= 0.0) {
            return Err(Error::Config("router learning-rate scale must be non-negative".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size > examples {
            return Err(Error::Config(format!("batch size {} for {examples} examples", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("need at least one epoch".into()));
        }
        if self.capacity.values().is_empty() {
            return Err(Error::Config("sampled capacity set is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: usize,
    /// Training loss of every step.
    pub losses: Vec<f64>,
    /// Forward MACs over all steps (router included for routed steps).
    pub train_macs: u64,
    /// Forward MACs of the same number of epochs at full width.
    pub dense_macs: u64,
    /// Effective capacity of every routed step.
    pub capacities: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over the last `k` steps.
    pub fn tail_loss(&self, k: usize) -> f64 {
        let t = &self.losses[self.losses.len().saturating_sub(k)..];
        t.iter().sum::<f64>() / t.len().max(1) as f64
    }
}

/// Forward MACs of one image with every token at full width.
pub fn dense_image_macs(cfg: &ModelConfig) -> u64 {
    model_flops(&AssignmentVec::uniform(cfg.spec.experts - 1, cfg.tokens()), &cfg.spec, false).total
}

/// MACs of one routed image; identical for every image at a given `c`.
fn routed_image_macs(cfg: &ModelConfig, c: &CapacityDist) -> u64 {
    let counts = c.token_counts(cfg.tokens());
    let m = AssignmentVec(counts.iter().enumerate().flat_map(|(e, &k)| std::iter::repeat_n(e, k)).collect());
    model_flops_with_router_layer(&m, &cfg.spec, true, cfg.router_layer).total
}

fn is_router_or_gate(name: &str) -> bool {
    name.starts_with("router.") || name.ends_with(".alpha")
}

/// Shifts every image by up to two pixels in each direction.
fn crop_batch(data: &Dataset, idx: &[usize], cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (h, w, c) = (data.height, data.width, data.channels);
    let mut shifted = Dataset { images: Vec::with_capacity(idx.len() * data.image_len()), ..data.subset(&[]) };
    for &i in idx {
        let (dy, dx) = (rng.random_range(-2i64..=2), rng.random_range(-2i64..=2));
        let src = data.image(i);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sy, sx) = (y - dy, x - dx);
                let inside = (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx);
                for ch in 0..c {
                    let v = if inside { src[((sy as usize) * w + sx as usize) * c + ch] } else { 0.0 };
                    shifted.images.push(v);
                }
            }
        }
        shifted.labels.push(data.labels[i]);
    }
    let all: Vec<usize> = (0..idx.len()).collect();
    shifted.patches(&all, cfg)
}

struct Step<'a> {
    tape: &'a mut Tape,
    vars: &'a ModelVars,
    patches: &'a Tensor,
    labels: &'a [usize],
    index: usize,
}

/// Runs `steps` optimizer steps; `objective` builds the loss of one batch
/// and reports its forward MACs.
fn optimize(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    data: &Dataset,
    tc: &TrainConfig,
    steps: usize,
    mut objective: impl FnMut(Step<'_>) -> Result<(Var, u64)>,
) -> Result<TrainLog> {
    let spe = data.len() / tc.batch_size;
    let special: Vec<bool> = params.named_tensors().iter().map(|(n, _)| is_router_or_gate(n)).collect();
    let mut velocity: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(stream_seed(tc.seed, Stream::Sampling));
    let mut crop_rng = ChaCha8Rng::seed_from_u64(stream_seed(tc.seed, Stream::Augment));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();

    for step in 0..steps {
        if step % spe == 0 {
            order.shuffle(&mut order_rng);
        }
        let idx = &order[(step % spe) * tc.batch_size..(step % spe + 1) * tc.batch_size];
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let patches =
            if tc.random_crop { crop_batch(data, idx, cfg, &mut crop_rng)? } else { data.patches(idx, cfg)? };

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let diverged = |e: Error| match e {
            Error::Numeric(m) => Error::Training(format!("diverged at step {step}: {m}")),
            other => other,
        };
        let (loss, macs) =
            objective(Step { tape: &mut tape, vars: &vars, patches: &patches, labels: &labels, index: step })
                .map_err(diverged)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training(format!("loss is {value} at step {step}")));
        }
        let grads = tape.backward(loss).map_err(diverged)?;
        let grads: Vec<Tensor> = vars.all().iter().map(|&v| grads.wrt(v)).collect();

        let scale = match tc.clip_norm {
            Some(max) => {
                let sq: f64 = grads
                    .iter()
                    .zip(&special)
                    .filter(|(_, &s)| !s)
                    .map(|(g, _)| g.data().iter().map(|x| x * x).sum::<f64>())
                    .sum();
                let norm = sq.sqrt();
                if !norm.is_finite() {
                    return Err(Error::Training(format!("gradient norm is {norm} at step {step}")));
                }
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let lr = tc.lr * tc.schedule.factor(step, steps);
        for (((p, g), v), &s) in params.tensors_mut().into_iter().zip(&grads).zip(&mut velocity).zip(&special) {
            let (gs, rate) = if s { (1.0, lr * tc.router_lr_scale) } else { (scale, lr) };
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = tc.momentum * *vi + gs * gi;
                *w -= rate * *vi;
            }
            if !p.is_finite() {
                return Err(Error::Training(format!("non-finite weights after step {step}")));
            }
        }
        log.losses.push(value);
        log.train_macs += macs;
    }
    log.steps = steps;
    log.dense_macs = (tc.epochs * spe * tc.batch_size) as u64 * dense_image_macs(cfg);
    Ok(log)
}

/// Trains fresh nested weights with the summed cross-entropy of every
/// granularity (all tokens at width `d_i`, router and gates unused).
pub fn mat_joint_pretrain(data: &Dataset, cfg: &ModelConfig, tc: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    data.validate()?;
    data.check_model(cfg)?;
    tc.validate(data.len())?;
    let mut params = Checkpoint::init(*cfg, tc.seed).params;
    let n = cfg.tokens();
    let e = cfg.spec.experts;
    let image_macs: u64 = (0..e).map(|i| model_flops(&AssignmentVec::uniform(i, n), &cfg.spec, false).total).sum();
    let steps = tc.epochs * (data.len() / tc.batch_size);

    let log = optimize(&mut params, cfg, data, tc, steps, |s| {
        let mut total: Option<Var> = None;
        for i in 0..e {
            let out = cfg.forward(s.tape, s.vars, s.patches, Route::Granularity(i))?;
            let l = s.tape.cross_entropy(out.logits, s.labels)?;
            total = Some(match total {
                Some(t) => s.tape.add(t, l)?,
                None => l,
            });
        }
        Ok((total.expect("at least one expert"), image_macs * s.labels.len() as u64))
    })?;
    let meta = CheckpointMeta { stage: "pretrain".into(), seed: Some(tc.seed), ..Default::default() };
    Ok((Checkpoint::new(*cfg, params, meta), log))
}

/// Per-step capacities. Without isoflops this is `epochs` worth of steps;
/// with it, steps are added until the routed MACs best match the budget of
/// `epochs` at full width.
fn capacity_schedule(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    spe: usize,
    dists: &HashMap<u64, CapacityDist>,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(tc.seed, Stream::Sampling));
    rng.set_stream(1);
    let values = tc.capacity.values();
    let mut draw = || *values.choose(&mut rng).expect("non-empty");
    let base = tc.epochs * spe;
    if !tc.isoflops {
        return (0..base).map(|_| draw()).collect();
    }
    let budget = (base * tc.batch_size) as u64 * dense_image_macs(cfg);
    let mut out = Vec::new();
    let mut spent = 0u64;
    loop {
        let ec = draw();
        let m = tc.batch_size as u64 * routed_image_macs(cfg, &dists[&ec.to_bits()]);
        if spent + m / 2 > budget {
            break;
        }
        spent += m;
        out.push(ec);
    }
    out
}

/// Fine-tunes `ckpt` with the router active. Every image is routed by
/// expert preferred routing at the step's capacity distribution.
pub fn mone_finetune(ckpt: &Checkpoint, data: &Dataset, tc: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    let cfg = ckpt.config;
    cfg.validate()?;
    data.validate()?;
    data.check_model(&cfg)?;
    tc.validate(data.len())?;
    let experts = cfg.spec.experts;
    let n = cfg.tokens();
    let mut dists = HashMap::new();
    for &ec in tc.capacity.values() {
        dists.insert(ec.to_bits(), solve_capacity(ec, experts, &tc.solver)?);
    }
    let spe = data.len() / tc.batch_size;
    let schedule = capacity_schedule(&cfg, tc, spe, &dists);
    if schedule.is_empty() {
        return Err(Error::Config("FLOP budget is smaller than one routed step".into()));
    }
    let bounds: HashMap<u64, Vec<usize>> = dists.iter().map(|(&k, c)| (k, c.token_counts(n))).collect();

    let mut params = ckpt.params.clone();
    let log = optimize(&mut params, &cfg, data, tc, schedule.len(), |s| {
        let ec = schedule[s.index];
        let c = &dists[&ec.to_bits()];
        let bound = &bounds[&ec.to_bits()];
        let mut assign = |_: usize, r: &crate::routing::RouterProbs| -> Result<AssignmentVec> {
            let m = epr_assign(r, c, n)?;
            let counts = m.counts(experts);
            if let Some(j) = (1..experts).find(|&j| counts[j] > bound[j]) {
                return Err(Error::Routing(format!("expert {j} got {} tokens, bound {}", counts[j], bound[j])));
            }
            Ok(m)
        };
        let out = cfg.forward(s.tape, s.vars, s.patches, Route::Routed(&mut assign))?;
        let macs = out
            .assignments
            .iter()
            .map(|m| model_flops_with_router_layer(m, &cfg.spec, true, cfg.router_layer).total)
            .sum();
        Ok((s.tape.cross_entropy(out.logits, s.labels)?, macs))
    })?;
    let log = TrainLog { capacities: schedule, ..log };
    let meta = CheckpointMeta {
        stage: "finetune".into(),
        seed: Some(tc.seed),
        capacity: Some(tc.capacity.clone()),
        solver: Some(tc.solver),
    };
    Ok((Checkpoint::new(cfg, params, meta), log))
}
