//! Quick randomized self-checks of routing, the capacity solver and the
//! gradients, for sanity-checking a build.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::gradcheck::check_gradients;
use crate::nested::{ModelConfig, ModelParams, ModelVars, NestedSpec, Route};
use crate::routing::{
    capacity_objective, epr_assign, AssignmentVec, min_effective_capacity, solve_capacity, CapacityDist, RouterProbs,
    SolverOptions,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// First failure, if any.
    pub detail: String,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn suite(name: &'static str, cases: usize, mut case: impl FnMut(usize) -> Option<String>) -> SuiteResult {
    let mut r = SuiteResult { name, cases, failures: 0, detail: String::new() };
    for i in 0..cases {
        if let Some(msg) = case(i) {
            if r.failures == 0 {
                r.detail = format!("case {i}: {msg}");
            }
            r.failures += 1;
        }
    }
    r
}

fn random_capacity(rng: &mut impl Rng, experts: usize) -> CapacityDist {
    let mut c: Vec<f64> = (0..experts).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random() }).collect();
    if c.iter().all(|&x| x == 0.0) {
        c[0] = 1.0;
    }
    let s: f64 = c.iter().sum();
    CapacityDist::new(c.iter().map(|x| x / s).collect()).expect("normalized")
}

/// Checks a routing `m` against the count rule and greedy priority.
fn check_epr(r: &RouterProbs, c: &CapacityDist, n: usize, m: &AssignmentVec) -> Option<String> {
    let e = c.experts();
    let mut taken = vec![false; n];
    for j in (1..e).rev() {
        let want = ((c.as_slice()[j] * n as f64).floor() as usize).min(taken.iter().filter(|&&t| !t).count());
        let mine: Vec<usize> = (0..n).filter(|&t| m.as_slice()[t] == j).collect();
        if mine.len() != want {
            return Some(format!("expert {j} got {} tokens, want {want}", mine.len()));
        }
        let row = r.expert_row(j);
        for &t in &mine {
            for u in (0..n).filter(|&u| !taken[u] && m.as_slice()[u] != j) {
                if row[u] > row[t] || (row[u] == row[t] && u < t) {
                    return Some(format!("expert {j} took token {t} over {u}"));
                }
            }
        }
        mine.iter().for_each(|&t| taken[t] = true);
    }
    let rest = (0..n).filter(|&t| m.as_slice()[t] == 0).count();
    (rest != taken.iter().filter(|&&t| !t).count()).then(|| "leftover tokens not at expert 0".into())
}

fn epr_suite(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    suite("epr", cases, |_| {
        let e = rng.random_range(2..=4);
        let n = rng.random_range(1..=256);
        // coarse values force ties
        let levels = rng.random_range(2..=50) as f64;
        let data: Vec<f64> = (0..e * n).map(|_| (rng.random::<f64>() * levels).floor() / levels).collect();
        let r = RouterProbs::new(e, n, data).ok()?;
        let c = random_capacity(&mut rng, e);
        let m = match epr_assign(&r, &c, n) {
            Ok(m) => m,
            Err(err) => return Some(err.to_string()),
        };
        if epr_assign(&r, &c, n).ok().as_ref() != Some(&m) {
            return Some("not deterministic".into());
        }
        check_epr(&r, &c, n, &m)
    })
}

fn solver_suite(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let o = SolverOptions::default();
    suite("solver", cases, |_| {
        let ec = rng.random_range(min_effective_capacity(4)..=1.0);
        let c = match solve_capacity(ec, 4, &o) {
            Ok(c) => c,
            Err(e) => return Some(e.to_string()),
        };
        let cs = c.as_slice();
        if (cs.iter().sum::<f64>() - 1.0).abs() > 1e-8 || (c.effective_capacity() - ec).abs() > 1e-8 {
            return Some(format!("constraints violated at e_c={ec}"));
        }
        // Strict concavity makes any local maximum global: no step along the
        // two directions that keep both constraints may improve the objective.
        let best = capacity_objective(cs, &o);
        for d in [[2.0, -3.0, 1.0, 0.0], [6.0, -7.0, 0.0, 1.0]] {
            for step in [1e-4, -1e-4] {
                let moved: Vec<f64> = cs.iter().zip(d).map(|(x, di)| x + step * di).collect();
                if moved.iter().all(|&x| x >= 0.0) && capacity_objective(&moved, &o) > best + 1e-12 {
                    return Some(format!("not a maximum at e_c={ec}"));
                }
            }
        }
        None
    })
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        spec: NestedSpec { dim: 8, experts: 2, heads: 2, layers: 1 },
        patch: 2,
        height: 4,
        width: 4,
        channels: 1,
        classes: 3,
        ..Default::default()
    }
}

fn gradient_suite(seed: u64) -> Result<SuiteResult> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(&cfg, &mut rng);
    params.blocks.iter_mut().for_each(|b| b.alpha.data_mut()[0] = 0.5);
    params.cls_weight = Tensor::new(&[8, 3], (0..24).map(|_| rng.random_range(-0.5..0.5)).collect())?;
    let patches = Tensor::new(&[8, 4], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let labels = [0, 2];
    let report = check_gradients(
        |tape: &mut Tape, vars: &[Var]| {
            let mv = ModelVars::from_flat(vars, 1)?;
            // fixed half/half split so the routing stays constant under perturbation
            let mut assign = |_: usize, _: &RouterProbs| Ok(AssignmentVec(vec![0, 1, 1, 0]));
            let out = cfg.forward(tape, &mv, &patches, Route::Routed(&mut assign))?;
            tape.cross_entropy(out.logits, &labels)
        },
        &params.tensors().into_iter().cloned().collect::<Vec<_>>(),
        1e-4,
    )?;
    let failures = report.params.iter().filter(|p| !p.offending.is_empty()).count();
    Ok(SuiteResult {
        name: "gradients",
        cases: report.params.len(),
        failures,
        detail: if failures > 0 { format!("max relative error {:.3e}", report.max_rel_err()) } else { String::new() },
    })
}

/// Runs every suite with a fixed seed.
pub fn run() -> Result<Vec<SuiteResult>> {
    Ok(vec![epr_suite(500, 1), solver_suite(200, 2), gradient_suite(3)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run().unwrap() {
            assert!(r.passed(), "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn epr_checker_catches_wrong_assignments() {
        let r = RouterProbs::new(2, 2, vec![0.0, 0.0, 0.2, 0.8]).unwrap();
        let c = CapacityDist::new(vec![0.5, 0.5]).unwrap();
        assert!(check_epr(&r, &c, 2, &AssignmentVec(vec![0, 1])).is_none());
        // token 1 scores higher for expert 1
        assert!(check_epr(&r, &c, 2, &AssignmentVec(vec![1, 0])).is_some());
        assert!(check_epr(&r, &c, 2, &AssignmentVec(vec![1, 1])).is_some());
    }
}
