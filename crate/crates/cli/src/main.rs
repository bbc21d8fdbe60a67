//! `mone`: train, evaluate and inspect nested-expert vision transformers.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2
//! for numeric or training failures.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use mone::flops::model_flops_with_router_layer;
use mone::harness::{
    capacity_sweep, evaluate, evaluate_granularity, mat_joint_pretrain, mone_finetune, route_visualize, selftest,
    CapacityMode, Checkpoint, DType, Metrics, RouterKind,
};
use mone::routing::{solve_capacity, AssignmentVec};
use mone::{Error, Result};

use config::{DatasetSource, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "mone", version, about = "Train, evaluate and inspect vision transformers with nested experts and token routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Joint pretraining of every nested granularity; writes pretrain.ckpt.
    Pretrain,
    /// Routed fine-tuning from --checkpoint (fresh weights without it); writes finetune.ckpt.
    Finetune,
    /// Accuracy and FLOP ratio of --checkpoint at --ec.
    Eval,
    /// Evaluation over the capacities in --ecs.
    Sweep,
    /// Capacity distribution for --ec and --experts.
    SolveCapacity,
    /// MAC report of the routing induced by --ec.
    Flops,
    /// Routing masks (PGM) of test image --index under --checkpoint.
    RouteDemo,
    /// Randomized routing, solver and gradient checks.
    Selftest,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum RouterArg {
    Learned,
    Random,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(clap::Args, Debug)]
struct Flags {
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory [default: mone-out].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for data, initialization, batch order and random routing.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Effective capacity in [2^-(E-1), 1] [default: 0.6].
    #[arg(long, global = true, allow_negative_numbers = true)]
    ec: Option<f64>,
    /// Number of nested experts [default: 4].
    #[arg(long, global = true)]
    experts: Option<usize>,
    /// Entropy weight of the capacity solver [default: 10].
    #[arg(long, global = true, allow_negative_numbers = true)]
    beta: Option<f64>,
    /// Preference decay of the capacity solver [default: 2].
    #[arg(long, global = true, allow_negative_numbers = true)]
    delta: Option<f64>,
    /// One-based layer whose input feeds the router [default: 1].
    #[arg(long, global = true)]
    router_layer: Option<usize>,
    /// Router used by eval and sweep [default: learned].
    #[arg(long, global = true)]
    router: Option<RouterArg>,
    /// Fine-tune for the MACs of the same epochs at full width.
    #[arg(long, global = true)]
    isoflops: bool,
    /// Fine-tune with capacities drawn from {0.15, 0.25, ..., 0.95}.
    #[arg(long, global = true)]
    adaptive: bool,
    /// `synth` or `idx:<images>,<labels>[,<test images>,<test labels>]`.
    #[arg(long, global = true, value_name = "SOURCE")]
    dataset: Option<String>,
    /// Checkpoint to fine-tune, evaluate or visualize.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Training epochs of the current stage.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Learning rate of the current stage.
    #[arg(long, global = true, allow_negative_numbers = true)]
    lr: Option<f64>,
    /// Comma-separated capacities for sweep [default: 0.2,0.3,...,0.9].
    #[arg(long, global = true, value_delimiter = ',')]
    ecs: Option<Vec<f64>>,
    /// Test image shown by route-demo [default: 0].
    #[arg(long, global = true)]
    index: Option<usize>,
    /// Checkpoint payload precision.
    #[arg(long, global = true, default_value = "f64")]
    dtype: DTypeArg,
}

fn resolve(cmd: Command, f: &Flags) -> Result<RunConfig> {
    let mut c = match &f.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = f.seed {
        c.seed = s;
        c.pretrain.seed = s;
        c.finetune.seed = s;
    }
    if let Some(ec) = f.ec {
        c.routing.ec = ec;
    }
    if let Some(e) = f.experts {
        c.model.spec.experts = e;
    }
    if let Some(b) = f.beta {
        c.routing.beta = b;
    }
    if let Some(d) = f.delta {
        c.routing.delta = d;
    }
    if let Some(l) = f.router_layer {
        c.model.router_layer = l;
    }
    if let Some(r) = f.router {
        c.routing.router = match r {
            RouterArg::Learned => RouterKind::Learned,
            RouterArg::Random => RouterKind::Random,
        };
    }
    if f.isoflops {
        c.finetune.isoflops = true;
    }
    if f.adaptive {
        if let CapacityMode::Sampled(v) = CapacityMode::adaptive() {
            c.routing.sampled = Some(v);
        }
    }
    if let Some(d) = &f.dataset {
        c.dataset = DatasetSource::parse(d)?;
    }
    let stage = if cmd == Command::Pretrain { &mut c.pretrain } else { &mut c.finetune };
    if let Some(e) = f.epochs {
        stage.epochs = e;
    }
    if let Some(lr) = f.lr {
        stage.lr = lr;
    }
    if let Some(v) = &f.ecs {
        c.routing.sweep = v.clone();
    }
    if let Some(o) = &f.out {
        c.out = o.clone();
    }
    c.finetune.solver = c.routing.solver();
    c.validate()?;
    Ok(c)
}

/// Writes `name` under the output directory next to a config snapshot.
fn emit(c: &RunConfig, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(&c.out)?;
    fs::write(c.out.join("run_config.json"), c.to_json())?;
    let path = c.out.join(name);
    fs::write(&path, bytes)?;
    Ok(path)
}

fn load_checkpoint(f: &Flags, c: &RunConfig) -> Result<Checkpoint> {
    let path = f.checkpoint.as_deref().ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let mut ck = Checkpoint::load(path)?;
    if f.router_layer.is_some() || f.config.is_some() {
        ck.config.router_layer = c.model.router_layer;
        ck.config.validate()?;
    }
    Ok(ck)
}

fn metrics_csv(rows: &[Metrics]) -> String {
    let mut s = String::from("ec,router,accuracy,flop_ratio,macs_per_image,planted_widest\n");
    for m in rows {
        let planted = m.planted_widest.map_or(String::new(), |p| format!("{p:.6}"));
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.1},{planted}",
            m.ec,
            m.router.as_str(),
            m.accuracy,
            m.flop_ratio,
            m.macs_per_image
        );
    }
    s
}

fn dtype(f: &Flags) -> DType {
    match f.dtype {
        DTypeArg::F32 => DType::F32,
        DTypeArg::F64 => DType::F64,
    }
}

fn run(cmd: Command, f: &Flags) -> Result<()> {
    let c = resolve(cmd, f)?;
    let solver = c.routing.solver();
    match cmd {
        Command::Pretrain => {
            let (train, test) = c.dataset.load(&c.model, c.seed)?;
            let (ck, log) = mat_joint_pretrain(&train, &c.model, &c.pretrain)?;
            let path = c.out.join("pretrain.ckpt");
            fs::create_dir_all(&c.out)?;
            ck.save(&path, dtype(f))?;
            let mut csv = String::from("expert,dim,accuracy\n");
            for i in 0..c.model.spec.experts {
                let acc = evaluate_granularity(&ck, &test, i)?;
                let _ = writeln!(csv, "{},{},{acc:.6}", i + 1, c.model.spec.expert_dim(i));
            }
            emit(&c, "pretrain.csv", csv.as_bytes())?;
            emit(&c, "pretrain_loss.csv", loss_csv(&log.losses).as_bytes())?;
            print!("{csv}");
            eprintln!("{} steps, final loss {:.4}, checkpoint {}", log.steps, log.tail_loss(20), path.display());
        }
        Command::Finetune => {
            let (train, test) = c.dataset.load(&c.model, c.seed)?;
            let base = match &f.checkpoint {
                Some(_) => load_checkpoint(f, &c)?,
                None => Checkpoint::init(c.model, c.finetune.seed),
            };
            let mut tc = c.finetune.clone();
            tc.capacity = match &c.routing.sampled {
                Some(v) => CapacityMode::Sampled(v.clone()),
                None => CapacityMode::Fixed(c.routing.ec),
            };
            let (ck, log) = mone_finetune(&base, &train, &tc)?;
            let path = c.out.join("finetune.ckpt");
            fs::create_dir_all(&c.out)?;
            ck.save(&path, dtype(f))?;
            let m = evaluate(&ck, &test, c.routing.ec, c.routing.router, c.seed, &solver)?;
            let csv = metrics_csv(&[m]);
            emit(&c, "finetune.csv", csv.as_bytes())?;
            emit(&c, "finetune_loss.csv", loss_csv(&log.losses).as_bytes())?;
            print!("{csv}");
            eprintln!(
                "{} steps, final loss {:.4}, training MACs {} ({:.4} of full width), checkpoint {}",
                log.steps,
                log.tail_loss(20),
                log.train_macs,
                log.train_macs as f64 / log.dense_macs as f64,
                path.display()
            );
        }
        Command::Eval => {
            let ck = load_checkpoint(f, &c)?;
            let (_, test) = c.dataset.load(&ck.config, c.seed)?;
            let m = evaluate(&ck, &test, c.routing.ec, c.routing.router, c.seed, &solver)?;
            let csv = metrics_csv(&[m]);
            emit(&c, "eval.csv", csv.as_bytes())?;
            print!("{csv}");
        }
        Command::Sweep => {
            let ck = load_checkpoint(f, &c)?;
            let (_, test) = c.dataset.load(&ck.config, c.seed)?;
            let mut ecs = c.routing.sweep.clone();
            if let Some(CapacityMode::Fixed(t)) = &ck.meta.capacity {
                if !ecs.iter().any(|&e| (e - t).abs() < 1e-9) {
                    ecs.push(*t);
                    ecs.sort_by(f64::total_cmp);
                }
            }
            let s = capacity_sweep(&ck, &test, &ecs, c.routing.router, c.seed, &solver)?;
            let csv = s.to_csv();
            emit(&c, "sweep.csv", csv.as_bytes())?;
            print!("{csv}");
        }
        Command::SolveCapacity => {
            let e = c.model.spec.experts;
            let cap = solve_capacity(c.routing.ec, e, &solver)?;
            let head: Vec<String> = (1..=e).map(|i| format!("c_{i}")).chain(["e_c".into()]).collect();
            let vals: Vec<String> =
                cap.as_slice().iter().chain([&cap.effective_capacity()]).map(|v| format!("{v:.12}")).collect();
            let csv = format!("{}\n{}\n", head.join(","), vals.join(","));
            emit(&c, "capacity.csv", csv.as_bytes())?;
            print!("{csv}");
        }
        Command::Flops => {
            let spec = c.model.spec;
            let cap = solve_capacity(c.routing.ec, spec.experts, &solver)?;
            let counts = cap.token_counts(c.model.tokens());
            let m = AssignmentVec(counts.iter().enumerate().flat_map(|(e, &k)| std::iter::repeat_n(e, k)).collect());
            let csv = model_flops_with_router_layer(&m, &spec, true, c.model.router_layer).to_csv();
            emit(&c, "flops.csv", csv.as_bytes())?;
            print!("{csv}");
        }
        Command::RouteDemo => {
            let ck = load_checkpoint(f, &c)?;
            let (_, test) = c.dataset.load(&ck.config, c.seed)?;
            let i = f.index.unwrap_or(0);
            if i >= test.len() {
                return Err(Error::Config(format!("--index {i} outside the {} test images", test.len())));
            }
            let map = route_visualize(&ck, test.image(i), c.routing.ec, &solver)?;
            emit(&c, "route_mask.pgm", &map.widest_mask_pgm())?;
            emit(&c, "route_experts.pgm", &map.expert_index_pgm())?;
            let mut grid = String::new();
            for row in map.assignment.as_slice().chunks(map.cols) {
                let cells: Vec<String> = row.iter().map(|e| (e + 1).to_string()).collect();
                let _ = writeln!(grid, "{}", cells.join(","));
            }
            print!("{grid}");
            if let Some(p) = &test.planted {
                eprintln!("label {}, planted token {}", test.labels[i], p[i]);
            }
        }
        Command::Selftest => {
            let results = selftest::run()?;
            let mut csv = String::from("suite,cases,failures\n");
            for r in &results {
                let _ = writeln!(csv, "{},{},{}", r.name, r.cases, r.failures);
            }
            emit(&c, "selftest.csv", csv.as_bytes())?;
            print!("{csv}");
            if let Some(bad) = results.iter().find(|r| !r.passed()) {
                return Err(Error::Numeric(format!("selftest suite {} failed: {}", bad.name, bad.detail)));
            }
        }
    }
    Ok(())
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l:.8}", i + 1);
    }
    s
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command, &cli.flags) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
