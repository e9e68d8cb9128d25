mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use emerg::diffcore::{EwiseOp, Tensor};
use common::stack_violation;
use emerg::graphgen::{build_adjacency_stack, RefineOptions};
use emerg::interactgnn::{run_gnn, GnnWeights};
use emerg::orderoracle::{check_prop1, symbolic_run, Mode, Pattern};

fn matrix(n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |d| Tensor::new(n, n, d).unwrap())
}

/// A random Ā¹ with a valid sparsity budget.
fn bar_and_k() -> impl Strategy<Value = (Tensor, usize)> {
    (2usize..=10).prop_flat_map(|n| (matrix(n), n..=n * n))
}

fn permute(p: &Pattern, perm: &[usize]) -> Pattern {
    let n = p.size();
    let mut cells = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            cells[perm[i] * n + perm[j]] = p.get(i, j);
        }
    }
    Pattern::new(n, cells).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn adjacency_invariants((bar, k) in bar_and_k()) {
        let s = build_adjacency_stack(&bar, &RefineOptions::new(3, k)).unwrap();
        let v = stack_violation(&s);
        prop_assert!(v.is_none(), "{v:?}");
    }

    #[test]
    fn adjacency_is_deterministic((bar, k) in bar_and_k()) {
        let opts = RefineOptions::new(3, k);
        prop_assert_eq!(build_adjacency_stack(&bar, &opts).unwrap(), build_adjacency_stack(&bar, &opts).unwrap());
    }

    #[test]
    fn emerg_orders_hold(features in 1usize..=6, layers in 1usize..=3, density in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Pattern::random_symmetric(features, density, &mut rng);
        let (holds, cx) = check_prop1(features, layers, std::slice::from_ref(&p), Mode::Emerg).unwrap();
        prop_assert!(holds, "{cx:?}");
        let run = symbolic_run(features, layers, &[p], Mode::Emerg).unwrap();
        for m in 0..features {
            let expected: std::collections::BTreeSet<u32> = (1..=layers as u32 + 1).collect();
            prop_assert_eq!(run.history_degrees(m), expected);
        }
    }

    #[test]
    fn degree_sets_follow_relabelling(
        features in 2usize..=5,
        layers in 1usize..=3,
        density in 0.0f64..=1.0,
        seed in any::<u64>(),
        perm in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Pattern::random_symmetric(features, density, &mut rng);
        let mut order: Vec<usize> = (0..features).collect();
        let mut prng = ChaCha8Rng::seed_from_u64(perm);
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut prng);
        for mode in [Mode::Emerg, Mode::Residual] {
            let a = symbolic_run(features, layers, std::slice::from_ref(&p), mode).unwrap();
            let b = symbolic_run(features, layers, &[permute(&p, &order)], mode).unwrap();
            for l in 0..=layers {
                for (m, &to) in order.iter().enumerate() {
                    prop_assert_eq!(a.degrees(l, m), b.degrees(l, to));
                }
            }
        }
    }

    /// Every monomial in node m's state contains x_m, so a zero embedding
    /// keeps the node at zero through all layers.
    #[test]
    fn zero_embedding_silences_its_node(
        (bar, k) in bar_and_k(),
        seed in any::<u64>(),
        pick in any::<prop::sample::Index>(),
    ) {
        let n = bar.rows();
        let s = build_adjacency_stack(&bar, &RefineOptions::new(3, k)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let mut e = Tensor::from_fn(n, d, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let m = pick.index(n);
        for c in 0..d {
            e.set(m, c, 0.0);
        }
        let w = GnnWeights {
            wg: (0..3).map(|_| Tensor::from_fn(d, d, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0))).collect(),
            op: EwiseOp::Product,
        };
        if n <= 8 {
            let patterns: Vec<Pattern> = s.a.iter().map(|a| Pattern::from_matrix(a).unwrap()).collect();
            let run = symbolic_run(n, 3, &patterns, Mode::Emerg).unwrap();
            for l in 0..=3 {
                prop_assert!(run.states[l][m].iter().all(|mono| mono.contains(m)));
            }
        }
        let states = run_gnn(&e, &s, &w).unwrap();
        for l in 0..=3 {
            for c in 0..d {
                prop_assert_eq!(states.layers[l].get(m, c), 0.0);
            }
        }
    }

    /// Layer l is homogeneous of the single degree the oracle reports:
    /// scaling every embedding by c scales h^(l) by c^(l+1).
    #[test]
    fn numeric_degree_matches_oracle(
        (bar, k) in (2usize..=6).prop_flat_map(|n| (matrix(n), n..=n * n)),
        seed in any::<u64>(),
        c in 0.5f64..2.0,
    ) {
        let n = bar.rows();
        let s = build_adjacency_stack(&bar, &RefineOptions::new(3, k)).unwrap();
        let patterns: Vec<Pattern> = s.a.iter().map(|a| Pattern::from_matrix(a).unwrap()).collect();
        let run = symbolic_run(n, 3, &patterns, Mode::Emerg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let e = Tensor::from_fn(n, d, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let w = GnnWeights {
            wg: (0..3).map(|_| Tensor::from_fn(d, d, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0))).collect(),
            op: EwiseOp::Product,
        };
        let base = run_gnn(&e, &s, &w).unwrap();
        let scaled = run_gnn(&e.scale(c), &s, &w).unwrap();
        for l in 0..=3 {
            for m in 0..n {
                let degrees = run.degrees(l, m);
                prop_assert_eq!(degrees.len(), 1);
                let deg = *degrees.iter().next().unwrap() as i32;
                let f = c.powi(deg);
                for j in 0..d {
                    let (x, y) = (base.layers[l].get(m, j), scaled.layers[l].get(m, j));
                    prop_assert!((y - f * x).abs() <= 1e-9 * (1.0 + (f * x).abs()), "layer {l} node {m}: {y} vs {}", f * x);
                }
            }
        }
    }

    #[test]
    fn gnn_is_linear_in_each_weight_layer(
        (bar, k) in (2usize..=6).prop_flat_map(|n| (matrix(n), n..=n * n)),
        seed in any::<u64>(),
        c in -2.0f64..2.0,
    ) {
        // h^(1) = h^(0) ⊙ (A h^(0) W), so it is linear in W.
        let n = bar.rows();
        let s = build_adjacency_stack(&bar, &RefineOptions::new(1, k)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let e = Tensor::from_fn(n, d, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let wg = Tensor::from_fn(d, d, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let one = run_gnn(&e, &s, &GnnWeights { wg: vec![wg.clone()], op: EwiseOp::Product }).unwrap();
        let many = run_gnn(&e, &s, &GnnWeights { wg: vec![wg.scale(c)], op: EwiseOp::Product }).unwrap();
        for (x, y) in one.layers[1].data().iter().zip(many.layers[1].data()) {
            prop_assert!((y - c * x).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}
