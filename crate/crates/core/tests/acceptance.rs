//! Acceptance suite. Runs every check in order, prints one PASS/FAIL line
//! each and exits non-zero if any failed.
//!
//! The training checks (8–10) train three seeds from scratch plus one
//! adaptive model and take roughly 20 minutes on one core. Set
//! `MONE_SKIP_TRAINING=1` to report them as skipped instead.

use std::process::ExitCode;
use std::time::Instant;

use mone::autograd::Tape;
use mone::flops::{model_flops, model_flops_with_router_layer, predicted_flop_ratio};
use mone::gradcheck::check_gradients;
use mone::harness::{
    evaluate, mat_joint_pretrain, mone_finetune, parse_pgm, route_visualize, synth_planted_patch_with, CapacityMode,
    Checkpoint, Dataset, RouterKind, SynthOptions, TrainConfig,
};
use mone::nested::{
    model_forward, sliced_in_projection, sliced_out_projection, DimVec, ModelConfig, ModelParams, ModelVars,
    NestedSpec, Route,
};
use mone::routing::{
    epr_assign, min_effective_capacity, solve_capacity, AssignmentVec, CapacityDist,
    RouterProbs, SolverOptions,
};
use mone::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

fn effective_capacity_table() -> Outcome {
    // widths 8, 16, 32, 64 of 64
    let rel = [0.125, 0.25, 0.5, 1.0];
    let uniform = CapacityDist::uniform(4).effective_capacity();
    let inv: Vec<f64> = rel.iter().map(|w| 1.0 / w).collect();
    let z: f64 = inv.iter().sum();
    let prop = CapacityDist::new(inv.iter().map(|v| v / z).collect()).unwrap().effective_capacity();
    // exact: (1/8 + 1/4 + 1/2 + 1)/4 = 15/32, and 4 / (8+4+2+1) = 4/15
    let exact = (uniform - 15.0 / 32.0).abs() < 1e-12 && (prop - 4.0 / 15.0).abs() < 1e-12;
    let published = (uniform - 0.47).abs() <= 0.005 && (prop - 0.27).abs() <= 0.005;
    ensure(exact && published, format!("uniform e_c={uniform:.6} (0.47), proportionate e_c={prop:.6} (0.27)"))
}

// ---------------------------------------------------------------- 2

/// Straightforward reference: widest expert first, each takes its
/// `floor(c·n)` highest-scoring free tokens, lowest index on ties.
fn reference_epr(r: &RouterProbs, c: &[f64], n: usize) -> (Vec<usize>, Vec<usize>) {
    let e = c.len();
    let mut counts = vec![0; e];
    let mut left = n;
    for j in (1..e).rev() {
        counts[j] = ((c[j] * n as f64).floor() as usize).min(left);
        left -= counts[j];
    }
    counts[0] = left;
    let mut out = vec![usize::MAX; n];
    for j in (1..e).rev() {
        for _ in 0..counts[j] {
            let mut best: Option<usize> = None;
            for t in 0..n {
                if out[t] != usize::MAX {
                    continue;
                }
                if best.is_none_or(|b| r.get(j, t) > r.get(j, b)) {
                    best = Some(t);
                }
            }
            out[best.unwrap()] = j;
        }
    }
    out.iter_mut().filter(|v| **v == usize::MAX).for_each(|v| *v = 0);
    (out, counts)
}

fn random_simplex(rng: &mut impl Rng, e: usize) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..e)
            .map(|_| if rng.random_bool(0.2) { 0.0 } else { -rng.random::<f64>().max(1e-12).ln() })
            .collect();
        let s: f64 = raw.iter().sum();
        if s > 0.0 {
            return raw.iter().map(|v| v / s).collect();
        }
    }
}

fn epr_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = 1200;
    for case in 0..cases {
        let e = rng.random_range(2..=4);
        let n = rng.random_range(1..=256);
        // coarse scores force plenty of ties
        let levels = if case % 2 == 0 { 4.0 } else { 1e6 };
        let mut data = vec![0.0; e * n];
        for t in 0..n {
            let raw: Vec<f64> = (0..e).map(|_| (rng.random::<f64>() * levels).floor() + 1.0).collect();
            let s: f64 = raw.iter().sum();
            for j in 0..e {
                data[j * n + t] = raw[j] / s;
            }
        }
        let r = RouterProbs::new(e, n, data).unwrap();
        let cv = random_simplex(&mut rng, e);
        let c = CapacityDist::new(cv.clone()).unwrap();
        let m = epr_assign(&r, &c, n).unwrap();
        let (want, counts) = reference_epr(&r, &cv, n);
        if m.as_slice() != want.as_slice() {
            return Err(format!("case {case}: E={e} N={n} differs from reference"));
        }
        if m.counts(e) != counts || counts.iter().sum::<usize>() != n {
            return Err(format!("case {case}: counts {:?} vs {counts:?}", m.counts(e)));
        }
        // greedy priority: a token taken by expert j outranks every token
        // that was still free when j chose
        for j in 1..e {
            for a in (0..n).filter(|&t| m.as_slice()[t] == j) {
                for b in (0..n).filter(|&t| m.as_slice()[t] < j) {
                    let (sa, sb) = (r.get(j, a), r.get(j, b));
                    if sa < sb || (sa == sb && a > b) {
                        return Err(format!("case {case}: token {b} should have beaten {a} for expert {j}"));
                    }
                }
            }
        }
        if epr_assign(&r, &c, n).unwrap() != m {
            return Err(format!("case {case}: not deterministic"));
        }
    }
    Ok(format!("{cases} random instances match the reference exactly"))
}

// ---------------------------------------------------------------- 3

/// `Σ c_i/2^i − 10·Σ c_i·ln c_i`, written out for E=4, β=10, δ=2.
fn objective(c: &[f64; 4]) -> f64 {
    let pref = [1.0, 0.5, 0.25, 0.125];
    (0..4).map(|i| pref[i] * c[i] - if c[i] > 0.0 { 10.0 * c[i] * c[i].ln() } else { 0.0 }).sum()
}

/// Maximizes the objective over `(c_1, c_2)` on a square grid centred at
/// `centre`; `c_0` and `c_3` follow from the two equality constraints.
fn grid_best(ec: f64, centre: (f64, f64), half: f64, step: f64) -> ([f64; 4], f64) {
    let mut best = ([0.0; 4], f64::NEG_INFINITY);
    let k = (half / step).round() as i64;
    for i in -k..=k {
        let c1 = centre.0 + i as f64 * step;
        if !(0.0..=1.0).contains(&c1) {
            continue;
        }
        for j in -k..=k {
            let c2 = centre.1 + j as f64 * step;
            if !(0.0..=1.0 - c1).contains(&c2) {
                continue;
            }
            let s = 1.0 - c1 - c2;
            let c3 = (ec - c1 / 4.0 - c2 / 2.0 - s / 8.0) / (7.0 / 8.0);
            let c0 = s - c3;
            if c0 < 0.0 || c3 < 0.0 {
                continue;
            }
            let c = [c0, c1, c2, c3];
            let v = objective(&c);
            if v > best.1 {
                best = (c, v);
            }
        }
    }
    best
}

fn grid_oracle(ec: f64) -> ([f64; 4], f64) {
    // full slice at 1e-3, then zoom in around the best cell
    let (mut c, mut v) = grid_best(ec, (0.5, 0.5), 0.5, 1e-3);
    let mut step = 1e-3;
    while step > 1e-9 {
        (c, v) = grid_best(ec, (c[1], c[2]), 10.0 * step, step / 10.0);
        step /= 10.0;
    }
    (c, v)
}

fn solver_vs_grid() -> Outcome {
    let o = SolverOptions::default();
    let mut worst_gap: f64 = 0.0;
    let mut worst_con: f64 = 0.0;
    for i in 2..=9 {
        let ec = i as f64 / 10.0;
        let c = solve_capacity(ec, 4, &o).unwrap();
        let s = c.as_slice();
        worst_con = worst_con.max((s.iter().sum::<f64>() - 1.0).abs()).max((c.effective_capacity() - ec).abs());
        if s.iter().any(|&x| x < 0.0) {
            return Err(format!("negative capacity at {ec}: {s:?}"));
        }
        let (_, best) = grid_oracle(ec);
        worst_gap = worst_gap.max((objective(&[s[0], s[1], s[2], s[3]]) - best).abs());
    }
    let lo = solve_capacity(min_effective_capacity(4), 4, &o).unwrap();
    let hi = solve_capacity(1.0, 4, &o).unwrap();
    let vertices = lo.as_slice() == [1.0, 0.0, 0.0, 0.0] && hi.as_slice() == [0.0, 0.0, 0.0, 1.0];
    ensure(
        worst_con <= 1e-8 && worst_gap <= 1e-6 && vertices,
        format!("max constraint residual {worst_con:.1e}, max objective gap {worst_gap:.1e}, one-hot vertices {vertices}"),
    )
}

// ---------------------------------------------------------------- 4

fn slicing_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let e = rng.random_range(1..=4);
        let dim = (1 << (e - 1)) * rng.random_range(1..=8);
        let spec = NestedSpec { dim, experts: e, heads: 1, layers: 1 };
        let n = rng.random_range(1..=16);
        let f = if rng.random_bool(0.5) { dim } else { 4 * dim };
        let dims: Vec<usize> = (0..n).map(|_| spec.expert_dim(rng.random_range(0..e))).collect();
        let dvec = DimVec::new(dims.clone(), &spec).unwrap();
        let w = random_tensor(&mut rng, &[dim, f], 1.0);

        // in: zero the features past d_j, then a plain dense product
        let x = random_tensor(&mut rng, &[n, dim], 1.0);
        let got = sliced_in_projection(&x, &dvec, &w).unwrap();
        for j in 0..n {
            for col in 0..f {
                let dense: f64 = (0..dim).map(|k| if k < dims[j] { x.at(j, k) } else { 0.0 } * w.at(k, col)).sum();
                worst = worst.max((dense - got.at(j, col)).abs());
            }
        }

        // out: zero the weight rows past d_j, dense product with Wᵀ
        let h = random_tensor(&mut rng, &[n, f], 1.0);
        let got = sliced_out_projection(&h, &dvec, &w).unwrap();
        for j in 0..n {
            if got[j].len() != dims[j] {
                return Err(format!("output width {} for d={}", got[j].len(), dims[j]));
            }
            for r in 0..dim {
                let dense: f64 = (0..f).map(|k| h.at(j, k) * if r < dims[j] { w.at(r, k) } else { 0.0 }).sum();
                let sliced = got[j].get(r).copied().unwrap_or(0.0);
                worst = worst.max((dense - sliced).abs());
            }
        }
    }
    ensure(worst < 1e-10, format!("200 instances, max abs error {worst:.1e}"))
}

// ---------------------------------------------------------------- 5

fn layer_norm(v: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-6).sqrt();
    v.iter().zip(g).zip(b).map(|((x, g), b)| (x - mean) * inv * g + b).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `a · B` for row vectors `a` (len `B.rows`).
fn vec_mat(a: &[f64], b: &Tensor) -> Vec<f64> {
    (0..b.cols()).map(|c| a.iter().enumerate().map(|(k, v)| v * b.at(k, c)).sum()).collect()
}

/// `a · Bᵀ` for row vectors `a` (len `B.cols`).
fn vec_mat_t(a: &[f64], b: &Tensor) -> Vec<f64> {
    (0..b.rows()).map(|r| b.row(r).iter().zip(a).map(|(w, v)| w * v).sum()).collect()
}

/// Plain post-LN transformer classifier written independently of the
/// library's kernels.
fn dense_vit(image: &[f64], p: &ModelParams, cfg: &ModelConfig) -> Vec<f64> {
    let (ps, d, heads) = (cfg.patch, cfg.spec.dim, cfg.spec.heads);
    let dh = d / heads;
    let mut x: Vec<Vec<f64>> = Vec::new();
    for gy in 0..cfg.height / ps {
        for gx in 0..cfg.width / ps {
            let mut patch = Vec::new();
            for py in 0..ps {
                for px in 0..ps {
                    patch.push(image[(gy * ps + py) * cfg.width + gx * ps + px]);
                }
            }
            let t = x.len();
            let e = vec_mat(&patch, &p.patch_embed);
            x.push(e.iter().zip(p.pos_embed.row(t)).map(|(a, b)| a + b).collect());
        }
    }
    let n = x.len();
    for b in &p.blocks {
        let q: Vec<_> = x.iter().map(|t| vec_mat(t, &b.wq)).collect();
        let k: Vec<_> = x.iter().map(|t| vec_mat(t, &b.wk)).collect();
        let v: Vec<_> = x.iter().map(|t| vec_mat(t, &b.wv)).collect();
        let mut att = vec![vec![0.0; d]; n];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = ex.iter().sum();
                for c in cols.clone() {
                    att[i][c] = (0..n).map(|j| ex[j] / z * v[j][c]).sum();
                }
            }
        }
        let g1 = (b.ln1_gamma.data(), b.ln1_beta.data());
        let g2 = (b.ln2_gamma.data(), b.ln2_beta.data());
        for i in 0..n {
            let sa = layer_norm(&vec_mat_t(&att[i], &b.wo), g1.0, g1.1);
            let z: Vec<f64> = x[i].iter().zip(&sa).map(|(a, b)| a + b).collect();
            let hidden: Vec<f64> = vec_mat(&z, &b.ff_in).into_iter().map(gelu).collect();
            let f = layer_norm(&vec_mat_t(&hidden, &b.ff_out), g2.0, g2.1);
            x[i] = z.iter().zip(&f).map(|(a, b)| a + b).collect();
        }
    }
    let pooled: Vec<f64> = (0..d).map(|c| x.iter().map(|t| t[c]).sum::<f64>() / n as f64).collect();
    vec_mat(&pooled, &p.cls_weight).iter().zip(p.cls_bias.data()).map(|(a, b)| a + b).collect()
}

fn full_capacity_reduction() -> Outcome {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ModelParams::init(&cfg, &mut rng);
    p.cls_weight = random_tensor(&mut rng, &[cfg.spec.dim, cfg.classes], 0.5);
    p.cls_bias = random_tensor(&mut rng, &[cfg.classes], 0.5);
    for b in &mut p.blocks {
        b.ln1_gamma = random_tensor(&mut rng, &[cfg.spec.dim], 0.5).map(|v| v + 1.0);
        b.ln2_beta = random_tensor(&mut rng, &[cfg.spec.dim], 0.2);
    }
    let image: Vec<f64> = (0..cfg.height * cfg.width).map(|_| rng.random::<f64>()).collect();
    let m = AssignmentVec::uniform(cfg.spec.experts - 1, cfg.tokens());
    let got = model_forward(&Tensor::new(&[cfg.height, cfg.width, 1], image.clone()).unwrap(), &p, &cfg, &m).unwrap();
    let want = dense_vit(&image, &p, &cfg);
    let scale = want.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let err = got.iter().zip(&want).fold(0.0f64, |a, (g, w)| a.max((g - w).abs())) / scale;
    ensure(err <= 1e-6, format!("D=64 L=4 N=16, max relative error {err:.1e}"))
}

// ---------------------------------------------------------------- 6

fn gradients() -> Outcome {
    let cfg = ModelConfig {
        spec: NestedSpec { dim: 16, experts: 4, heads: 2, layers: 2 },
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut p = ModelParams::init(&cfg, &mut rng);
    p.cls_weight = random_tensor(&mut rng, &[16, cfg.classes], 0.5);
    p.cls_bias = random_tensor(&mut rng, &[cfg.classes], 0.5);
    p.router.weight = random_tensor(&mut rng, &[16, 4], 0.5);
    p.router.bias = random_tensor(&mut rng, &[4], 0.5);
    for b in &mut p.blocks {
        b.alpha = Tensor::full(&[1], 0.5);
        b.ln1_gamma = random_tensor(&mut rng, &[cfg.spec.dim], 0.5).map(|v| v + 1.0);
        b.ln1_beta = random_tensor(&mut rng, &[cfg.spec.dim], 0.2);
        b.ln2_gamma = random_tensor(&mut rng, &[cfg.spec.dim], 0.5).map(|v| v + 1.0);
        b.ln2_beta = random_tensor(&mut rng, &[cfg.spec.dim], 0.2);
    }
    let n = cfg.tokens();
    let batch = 2;
    let patches = random_tensor(&mut rng, &[batch * n, cfg.patch_len()], 1.0);
    let labels = [3, 7];
    // a fixed mixed assignment keeps the loss smooth in every parameter
    let fixed = AssignmentVec((0..n).map(|t| (t * 3 + 1) % 4).collect());
    let params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
    let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
    let report = check_gradients(
        |tape: &mut Tape, vars| {
            let v = ModelVars::from_flat(vars, cfg.spec.layers)?;
            let mut route = |_: usize, _: &RouterProbs| Ok(fixed.clone());
            let out = cfg.forward(tape, &v, &patches, Route::Routed(&mut route))?;
            tape.cross_entropy(out.logits, &labels)
        },
        &params,
        1e-4,
    )
    .map_err(|e| e.to_string())?;
    let worst = report.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let total: usize = params.iter().map(|t| t.numel()).sum();
    ensure(
        report.passed(),
        format!("{total} weights, max relative error {:.1e} ({})", worst.max_rel_err, names[worst.param]),
    )
}

// ---------------------------------------------------------------- 7

/// Independent per-token multiply-accumulate count.
fn hand_macs(d: u64, dd: u64, n: u64) -> u64 {
    let qkv = 3 * d * dd;
    let attention = 2 * n * dd;
    let out = dd * d;
    let norm = 5 * dd;
    let ffn = 2 * dd * 4 * d;
    qkv + attention + out + norm + ffn
}

fn flop_accounting() -> Outcome {
    let spec = NestedSpec { dim: 64, experts: 4, heads: 4, layers: 4 };
    let n = 16;
    let o = SolverOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 3..=20 {
        let ec = i as f64 / 20.0;
        let c = solve_capacity(ec, 4, &o).unwrap();
        let data: Vec<f64> = (0..4 * n).map(|_| rng.random::<f64>()).collect();
        let m = epr_assign(&RouterProbs::new(4, n, data).unwrap(), &c, n).unwrap();
        let measured = model_flops(&m, &spec, false);
        if predicted_flop_ratio(&c, n, &spec, 1) != measured.ratio {
            return Err(format!("predicted and measured ratios differ at e_c={ec}"));
        }
        let hand: u64 = 4 * m.as_slice().iter().map(|&e| hand_macs(spec.expert_dim(e) as u64, 64, 16)).sum::<u64>();
        if hand != measured.total {
            return Err(format!("meter says {} MACs, hand count {hand}", measured.total));
        }
    }
    let c = solve_capacity(0.5, 4, &o).unwrap();
    let ratio = predicted_flop_ratio(&c, n, &spec, 1);
    let m = AssignmentVec(c.token_counts(n).iter().enumerate().flat_map(|(e, &k)| vec![e; k]).collect());
    let with_router = model_flops(&m, &spec, true).ratio;
    let later: Vec<f64> =
        (1..=4).map(|l| model_flops_with_router_layer(&m, &spec, true, l).ratio).collect();
    let monotone = later.windows(2).all(|w| w[0] < w[1]);
    ensure(
        (0.40..=0.65).contains(&ratio) && monotone,
        format!("ratio at e_c=0.5 {ratio:.4} ({with_router:.4} with router), router at layers 1-4 {later:.3?}"),
    )
}

// ---------------------------------------------------------------- 8–10

struct SeedRun {
    dense: f64,
    mone06: f64,
    learned03: f64,
    random03: f64,
    planted03: f64,
    tuned03: Checkpoint,
    pretrained: Checkpoint,
    train: Dataset,
    test: Dataset,
}

fn run_seed(seed: u64) -> SeedRun {
    let data = synth_planted_patch_with(&SynthOptions { seed, ..Default::default() }).unwrap();
    let (train, test) = data.split(1000, seed).unwrap();
    let o = SolverOptions::default();
    let (pretrained, _) =
        mat_joint_pretrain(&train, &ModelConfig::default(), &TrainConfig { seed, ..TrainConfig::pretrain() }).unwrap();
    let tune = |ec: f64, isoflops: bool| {
        let tc = TrainConfig { seed, capacity: CapacityMode::Fixed(ec), isoflops, ..Default::default() };
        mone_finetune(&pretrained, &train, &tc).unwrap().0
    };
    let acc = |ck: &Checkpoint, ec: f64, r: RouterKind| evaluate(ck, &test, ec, r, seed, &o).unwrap();
    let dense = acc(&tune(1.0, false), 1.0, RouterKind::Learned).accuracy;
    let mone06 = acc(&tune(0.6, true), 0.6, RouterKind::Learned).accuracy;
    let tuned03 = tune(0.3, true);
    let l = acc(&tuned03, 0.3, RouterKind::Learned);
    let random03 = acc(&tuned03, 0.3, RouterKind::Random).accuracy;
    SeedRun {
        dense,
        mone06,
        learned03: l.accuracy,
        random03,
        planted03: l.planted_widest.unwrap(),
        tuned03,
        pretrained,
        train,
        test,
    }
}

fn desk_training(runs: &[SeedRun]) -> Outcome {
    let dense_ok = runs.iter().all(|r| r.dense >= 0.95);
    let close = runs.iter().all(|r| r.mone06 >= r.dense - 0.02);
    let mean = |f: fn(&SeedRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let (learned, random) = (mean(|r| r.learned03), mean(|r| r.random03));
    let fmt = |f: fn(&SeedRun) -> f64| runs.iter().map(|r| format!("{:.3}", f(r))).collect::<Vec<_>>().join("/");
    ensure(
        dense_ok && close && learned > random,
        format!(
            "dense {}, MoNE@0.6 {}, at e_c=0.3 learned {learned:.4} vs random {random:.4}",
            fmt(|r| r.dense),
            fmt(|r| r.mone06)
        ),
    )
}

fn adaptive(run: &SeedRun) -> Outcome {
    let tc = TrainConfig { seed: 0, epochs: 4, capacity: CapacityMode::adaptive(), ..Default::default() };
    let (ck, _) = mone_finetune(&run.pretrained, &run.train, &tc).unwrap();
    let o = SolverOptions::default();
    let mut learned = Vec::new();
    let mut random = Vec::new();
    for i in 2..=9 {
        let ec = i as f64 / 10.0;
        learned.push(evaluate(&ck, &run.test, ec, RouterKind::Learned, 0, &o).unwrap().accuracy);
        random.push(evaluate(&ck, &run.test, ec, RouterKind::Random, 0, &o).unwrap().accuracy);
    }
    let above = learned.iter().zip(&random).all(|(l, r)| l >= r);
    ensure(
        learned[7] >= learned[0] && above,
        format!("learned {learned:.3?}, random {random:.3?}"),
    )
}

fn routing_visualization(runs: &[SeedRun]) -> Outcome {
    let o = SolverOptions::default();
    let chance = solve_capacity(0.3, 4, &o).unwrap().as_slice()[3];
    let pooled = runs.iter().map(|r| r.planted03).sum::<f64>() / runs.len() as f64;
    let per_seed: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.planted03)).collect();

    let run = &runs[0];
    let mut pgm_ok = true;
    for i in 0..5 {
        for (ec, want) in [(1.0, 1u8), (min_effective_capacity(4), 0u8)] {
            let map = route_visualize(&run.tuned03, run.test.image(i), ec, &o).unwrap();
            let (w, h, maxval, px) = parse_pgm(&map.widest_mask_pgm()).unwrap();
            pgm_ok &= (w, h, maxval) == (4, 4, 1) && px.iter().all(|&v| v == want);
            let (_, _, maxval, px) = parse_pgm(&map.expert_index_pgm()).unwrap();
            pgm_ok &= maxval == 4 && px.iter().all(|&v| (1..=4).contains(&v));
        }
    }
    ensure(
        pooled >= 2.0 * chance && pgm_ok,
        format!(
            "planted token on widest expert {pooled:.3} (seeds {}) vs 2x chance {:.3}; masks at extremes ok: {pgm_ok}",
            per_seed.join("/"),
            2.0 * chance
        ),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, start: Instant, outcome: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        let (tag, msg) = match outcome {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failed += 1;
                ("FAIL", m)
            }
        };
        println!("criterion {id:>2} {tag} [{name}, {secs:.1}s] {msg}");
    };

    let fast: [(&str, fn() -> Outcome); 7] = [
        ("effective capacity", effective_capacity_table),
        ("routing properties", epr_properties),
        ("capacity solver", solver_vs_grid),
        ("slicing", slicing_equivalence),
        ("full capacity", full_capacity_reduction),
        ("gradients", gradients),
        ("flop accounting", flop_accounting),
    ];
    for (i, (name, f)) in fast.into_iter().enumerate() {
        let t = Instant::now();
        report(i + 1, name, t, f());
    }

    if std::env::var_os("MONE_SKIP_TRAINING").is_some_and(|v| v != "0") {
        for id in 8..=10 {
            println!("criterion {id:>2} SKIP (MONE_SKIP_TRAINING)");
        }
        return if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE };
    }
    let t = Instant::now();
    let runs: Vec<SeedRun> = (0..3).map(run_seed).collect();
    report(8, "desk-scale training", t, desk_training(&runs));
    let t = Instant::now();
    report(9, "adaptive capacity", t, adaptive(&runs[0]));
    let t = Instant::now();
    report(10, "routing quality", t, routing_visualization(&runs));

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
