mod common;

use common::{fd_grad, fd_hessian, random_deterministic, random_point};
use dice_core::graph::{evaluate, evaluate_unmemoized, Binding, SampleRecord};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BINDINGS: usize = 100;

fn value(case: &common::DetCase, root: dice_core::NodeId, x: &[f64]) -> f64 {
    let b = Binding::new().with(case.theta, x.to_vec());
    evaluate(&case.arena, root, &b, &SampleRecord::new()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn first_derivatives_match_finite_differences(seed in any::<u64>()) {
        let mut case = random_deterministic(seed);
        let grad = case.arena.gradient_vector(case.root, case.theta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
        for _ in 0..BINDINGS {
            let x = random_point(&mut rng, case.dim);
            let fd = fd_grad(&|y| value(&case, case.root, y), &x, 1e-5);
            for (g, f) in grad.iter().zip(&fd) {
                let v = value(&case, *g, &x);
                prop_assert!((v - f).abs() <= 1e-5 * (1.0 + f.abs()), "symbolic {v} fd {f} at {x:?}");
            }
        }
    }

    #[test]
    fn second_derivatives_match_finite_differences(seed in any::<u64>()) {
        let mut case = random_deterministic(seed);
        let hess = case.arena.derivative_tensor(case.root, &[case.theta], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd2);
        for _ in 0..BINDINGS / 4 {
            let x = random_point(&mut rng, case.dim);
            let fd = fd_hessian(&|y| value(&case, case.root, y), &x, 1e-4);
            for (h, f) in hess.iter().zip(&fd) {
                let v = value(&case, *h, &x);
                prop_assert!((v - f).abs() <= 1e-4 * (1.0 + f.abs()), "symbolic {v} fd {f} at {x:?}");
            }
        }
    }

    #[test]
    fn stop_grad_is_forward_identity_and_kills_derivatives(seed in any::<u64>()) {
        let mut case = random_deterministic(seed);
        let frozen = case.arena.stop_grad(case.root);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5);
        let x = random_point(&mut rng, case.dim);
        prop_assert_eq!(value(&case, frozen, &x).to_bits(), value(&case, case.root, &x).to_bits());
        for order in 1..=3 {
            for d in case.arena.derivative_tensor(frozen, &[case.theta], order).unwrap() {
                prop_assert_eq!(value(&case, d, &x), 0.0);
            }
        }
    }

    #[test]
    fn memoized_evaluation_is_bit_identical(seed in any::<u64>()) {
        let mut case = random_deterministic(seed);
        let mut roots = vec![case.root];
        roots.extend(case.arena.derivative_tensor(case.root, &[case.theta], 2).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3);
        let x = random_point(&mut rng, case.dim);
        let b = Binding::new().with(case.theta, x);
        let rec = SampleRecord::new();
        for r in roots {
            let a = evaluate(&case.arena, r, &b, &rec).unwrap();
            let u = evaluate_unmemoized(&case.arena, r, &b, &rec).unwrap();
            prop_assert_eq!(a.to_bits(), u.to_bits());
        }
    }

    #[test]
    fn children_precede_parents(seed in any::<u64>()) {
        let mut case = random_deterministic(seed);
        case.arena.derivative_tensor(case.root, &[case.theta], 2).unwrap();
        for i in 0..case.arena.len() {
            let id = case.arena.node_id(i);
            for c in case.arena.kind(id).unwrap().children() {
                prop_assert!(c.index() < i);
            }
        }
    }
}

#[test]
fn chain_rule_through_magic_box_form() {
    // d/dθ exp(θ − ⊥θ) at 1.7 is exp(0)·1
    let mut a = dice_core::GraphArena::new();
    let p = a.register_param("theta", 1);
    let t = a.param(p, 0);
    let s = a.stop_grad(t);
    let d = a.sub(t, s);
    let e = a.exp(d);
    let g = a.differentiate(e, p, 0).unwrap();
    let b = Binding::new().with(p, vec![1.7]);
    assert_eq!(evaluate(&a, g, &b, &SampleRecord::new()).unwrap(), 1.0);
}
