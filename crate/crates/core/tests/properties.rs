use mone::harness::{Checkpoint, DType};
use mone::nested::{sliced_in_projection, sliced_out_projection, DimVec, ModelConfig, NestedSpec};
use mone::routing::{
    epr_assign, min_effective_capacity, router_forward, solve_capacity, CapacityDist, RouterParams, RouterProbs,
    SolverOptions,
};
use mone::tensor::Tensor;
use proptest::prelude::*;

fn simplex(e: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u32..20, e)
        .prop_filter("not all zero", |v| v.iter().any(|&x| x > 0))
        .prop_map(|v| {
            let s: u32 = v.iter().sum();
            v.iter().map(|&x| x as f64 / s as f64).collect()
        })
}

fn routing_case() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (2usize..=4, 1usize..=64).prop_flat_map(|(e, n)| {
        (Just(e), Just(n), prop::collection::vec(0u8..6, e * n), simplex(e)).prop_map(|(e, n, raw, c)| {
            // columns normalized per token; small integer levels give ties
            let mut r = vec![0.0; e * n];
            for t in 0..n {
                let s: f64 = (0..e).map(|j| raw[j * n + t] as f64 + 1.0).sum();
                for j in 0..e {
                    r[j * n + t] = (raw[j * n + t] as f64 + 1.0) / s;
                }
            }
            (e, n, r, c)
        })
    })
}

proptest! {
    #[test]
    fn routing_partitions_tokens_with_exact_counts((e, n, r, c) in routing_case()) {
        let probs = RouterProbs::new(e, n, r).unwrap();
        let c = CapacityDist::new(c).unwrap();
        let m = epr_assign(&probs, &c, n).unwrap();
        prop_assert_eq!(m.len(), n);
        prop_assert!(m.as_slice().iter().all(|&x| x < e));
        let counts = m.counts(e);
        let mut left = n;
        for j in (1..e).rev() {
            let k = ((c.as_slice()[j] * n as f64).floor() as usize).min(left);
            prop_assert_eq!(counts[j], k);
            left -= k;
        }
        prop_assert_eq!(counts[0], left);
        prop_assert_eq!(epr_assign(&probs, &c, n).unwrap(), m);
    }

    #[test]
    fn wider_experts_take_their_best_free_tokens((e, n, r, c) in routing_case()) {
        let probs = RouterProbs::new(e, n, r).unwrap();
        let m = epr_assign(&probs, &CapacityDist::new(c).unwrap(), n).unwrap();
        let a = m.as_slice();
        for j in 1..e {
            for t in (0..n).filter(|&t| a[t] == j) {
                for u in (0..n).filter(|&u| a[u] < j) {
                    let (st, su) = (probs.get(j, t), probs.get(j, u));
                    prop_assert!(st > su || (st == su && t < u));
                }
            }
        }
    }

    #[test]
    fn router_rows_lie_on_the_simplex(
        x in prop::collection::vec(-5.0f64..5.0, 6 * 8),
        w in prop::collection::vec(-3.0f64..3.0, 8 * 4),
        b in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let params = RouterParams { weight: Tensor::new(&[8, 4], w).unwrap(), bias: Tensor::new(&[4], b).unwrap() };
        let r = router_forward(&Tensor::new(&[6, 8], x).unwrap(), &params).unwrap();
        for t in 0..6 {
            let col: Vec<f64> = (0..4).map(|j| r.get(j, t)).collect();
            prop_assert!(col.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn narrow_tokens_see_only_their_prefix(
        x in prop::collection::vec(-2.0f64..2.0, 3 * 16),
        w in prop::collection::vec(-1.0f64..1.0, 16 * 16),
        noise in prop::collection::vec(-9.0f64..9.0, 3 * 16),
        experts in prop::collection::vec(0usize..3, 3),
    ) {
        let spec = NestedSpec { dim: 16, experts: 3, heads: 1, layers: 1 };
        let dims: Vec<usize> = experts.iter().map(|&e| spec.expert_dim(e)).collect();
        let dvec = DimVec::new(dims.clone(), &spec).unwrap();
        let w = Tensor::new(&[16, 16], w).unwrap();
        // features past each token's width must not matter
        let mut y = x.clone();
        for (t, &d) in dims.iter().enumerate() {
            for k in d..16 {
                y[t * 16 + k] = noise[t * 16 + k];
            }
        }
        let a = sliced_in_projection(&Tensor::new(&[3, 16], x).unwrap(), &dvec, &w).unwrap();
        let b = sliced_in_projection(&Tensor::new(&[3, 16], y).unwrap(), &dvec, &w).unwrap();
        prop_assert_eq!(a, b);
        // a narrow output is the prefix of the full-width output
        let h = Tensor::new(&[3, 16], noise).unwrap();
        let full = sliced_out_projection(&h, &DimVec::uniform(2, 3, &spec), &w).unwrap();
        let narrow = sliced_out_projection(&h, &dvec, &w).unwrap();
        for t in 0..3 {
            prop_assert_eq!(&full[t][..dims[t]], narrow[t].as_slice());
        }
    }

    #[test]
    fn solver_meets_its_constraints(
        e in 2usize..=6,
        t in 0.0f64..=1.0,
        beta in 0.05f64..50.0,
        delta in 1.1f64..4.0,
        flip in any::<bool>(),
    ) {
        let lo = min_effective_capacity(e);
        let ec = lo + t * (1.0 - lo);
        let o = SolverOptions { beta, delta, flip_linear: flip };
        let c = solve_capacity(ec, e, &o).unwrap();
        prop_assert!(c.as_slice().iter().all(|&x| x >= 0.0));
        prop_assert!((c.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-8);
        prop_assert!((c.effective_capacity() - ec).abs() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), experts in 1usize..=3) {
        let cfg = ModelConfig {
            spec: NestedSpec { dim: 8, experts, heads: 2, layers: 2 },
            patch: 4,
            height: 8,
            width: 8,
            classes: 3,
            ..Default::default()
        };
        let ck = Checkpoint::init(cfg, seed);
        prop_assert_eq!(&Checkpoint::from_bytes(&ck.to_bytes(DType::F64).unwrap()).unwrap(), &ck);
    }
}

