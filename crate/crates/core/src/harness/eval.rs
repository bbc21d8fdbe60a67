//! Accuracy and cost of trained checkpoints.
//!
//! Evaluation shards the dataset over scoped threads (capped by the
//! `MONE_THREADS` environment variable). Every image is routed and scored
//! independently of its batch neighbours, so results do not depend on the
//! thread count.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{mix64, stream_seed, Checkpoint, Dataset, Stream};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::flops::model_flops_with_router_layer;
use crate::nested::Route;
use crate::routing::{epr_assign, random_assign, solve_capacity, AssignmentVec, RouterProbs, SolverOptions};

const EVAL_BATCH: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RouterKind {
    #[default]
    Learned,
    /// Same per-expert counts, tokens shuffled uniformly.
    Random,
}

impl RouterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Learned => "learned",
            Self::Random => "random",
        }
    }
}

impl FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "random" => Ok(Self::Random),
            _ => Err(Error::Config(format!("unknown router kind {s:?} (learned|random)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub ec: f64,
    pub router: RouterKind,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Mean per-image MACs without the router head over the dense cost.
    pub flop_ratio: f64,
    /// Mean per-image MACs including the router head.
    pub macs_per_image: f64,
    /// Share of images whose planted token went to the widest expert.
    pub planted_widest: Option<f64>,
}

/// Evaluation thread count: `MONE_THREADS` if set, else the core count.
pub fn eval_threads() -> usize {
    std::env::var("MONE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Default)]
struct Tally {
    correct: usize,
    macs: u64,
    router_macs: u64,
    dense: u64,
    planted: usize,
}

/// Runs `score` over contiguous shards of `0..len` and sums the tallies.
fn sharded(len: usize, score: impl Fn(usize, usize) -> Result<Tally> + Sync) -> Result<Tally> {
    let threads = eval_threads().min(len.div_ceil(EVAL_BATCH)).max(1);
    let per = len.div_ceil(threads);
    let score = &score;
    let parts: Vec<Result<Tally>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            (0..threads).map(|t| s.spawn(move || score(t * per, ((t + 1) * per).min(len)))).collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut sum = Tally::default();
    for p in parts {
        let p = p?;
        sum.correct += p.correct;
        sum.macs += p.macs;
        sum.router_macs += p.router_macs;
        sum.dense += p.dense;
        sum.planted += p.planted;
    }
    Ok(sum)
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Accuracy and FLOP ratio of `ckpt` routed at effective capacity `ec`.
/// The random router seeds each image from `(seed, image index)`.
pub fn evaluate(
    ckpt: &Checkpoint,
    data: &Dataset,
    ec: f64,
    router: RouterKind,
    seed: u64,
    solver: &SolverOptions,
) -> Result<Metrics> {
    let cfg = &ckpt.config;
    data.validate()?;
    data.check_model(cfg)?;
    let c = solve_capacity(ec, cfg.spec.experts, solver)?;
    let n = cfg.tokens();
    let widest = cfg.spec.experts - 1;
    let router_seed = stream_seed(seed, Stream::RandomRouter);

    let t = sharded(data.len(), |lo, hi| {
        let mut tally = Tally::default();
        for start in (lo..hi).step_by(EVAL_BATCH) {
            let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(hi)).collect();
            let patches = data.patches(&idx, cfg)?;
            let mut tape = Tape::inference();
            let vars = ckpt.params.bind(&mut tape);
            let mut assign = |img: usize, r: &RouterProbs| -> Result<AssignmentVec> {
                match router {
                    RouterKind::Learned => epr_assign(r, &c, n),
                    RouterKind::Random => random_assign(&c, n, mix64(router_seed ^ mix64(idx[img] as u64))),
                }
            };
            let out = cfg.forward(&mut tape, &vars, &patches, Route::Routed(&mut assign))?;
            let k = cfg.classes;
            for (b, row) in tape.value(out.logits).data().chunks(k).enumerate() {
                let i = idx[b];
                tally.correct += usize::from(argmax(row) == data.labels[i]);
                let m = &out.assignments[b];
                let with_router = model_flops_with_router_layer(m, &cfg.spec, true, cfg.router_layer);
                tally.macs += with_router.total - with_router.router;
                tally.router_macs += with_router.router;
                tally.dense += with_router.dense;
                if let Some(p) = &data.planted {
                    tally.planted += usize::from(m.as_slice()[p[i]] == widest);
                }
            }
        }
        Ok(tally)
    })?;

    let total = data.len().max(1) as f64;
    Ok(Metrics {
        ec,
        router,
        correct: t.correct,
        total: data.len(),
        accuracy: t.correct as f64 / total,
        flop_ratio: if t.dense == 0 { 0.0 } else { t.macs as f64 / t.dense as f64 },
        macs_per_image: (t.macs + t.router_macs) as f64 / total,
        planted_widest: data.planted.as_ref().map(|_| t.planted as f64 / total),
    })
}

/// Accuracy of the standalone width-`d_i` submodel (all tokens at expert `i`).
pub fn evaluate_granularity(ckpt: &Checkpoint, data: &Dataset, expert: usize) -> Result<f64> {
    let cfg = &ckpt.config;
    data.validate()?;
    data.check_model(cfg)?;
    if expert >= cfg.spec.experts {
        return Err(Error::Config(format!("expert {expert} outside 0..{}", cfg.spec.experts)));
    }
    let t = sharded(data.len(), |lo, hi| {
        let mut tally = Tally::default();
        for start in (lo..hi).step_by(EVAL_BATCH) {
            let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(hi)).collect();
            let patches = data.patches(&idx, cfg)?;
            let mut tape = Tape::inference();
            let vars = ckpt.params.bind(&mut tape);
            let out = cfg.forward(&mut tape, &vars, &patches, Route::Granularity(expert))?;
            for (b, row) in tape.value(out.logits).data().chunks(cfg.classes).enumerate() {
                tally.correct += usize::from(argmax(row) == data.labels[idx[b]]);
            }
        }
        Ok(tally)
    })?;
    Ok(t.correct as f64 / data.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub metrics: Metrics,
    /// The checkpoint was trained at this capacity.
    pub trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
}

impl Sweep {
    /// One row per capacity: `ec,router,accuracy,flop_ratio,macs_per_image,trained`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("ec,router,accuracy,flop_ratio,macs_per_image,trained\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.1},{}",
                m.ec,
                m.router.as_str(),
                m.accuracy,
                m.flop_ratio,
                m.macs_per_image,
                u8::from(r.trained)
            );
        }
        s
    }
}

/// Evaluates `ckpt` at every capacity in `ecs`, marking the ones it was
/// fine-tuned at.
pub fn capacity_sweep(
    ckpt: &Checkpoint,
    data: &Dataset,
    ecs: &[f64],
    router: RouterKind,
    seed: u64,
    solver: &SolverOptions,
) -> Result<Sweep> {
    let rows = ecs
        .iter()
        .map(|&ec| {
            Ok(SweepRow {
                metrics: evaluate(ckpt, data, ec, router, seed, solver)?,
                trained: ckpt.meta.capacity.as_ref().is_some_and(|c| c.covers(ec)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sweep { rows })
}
