mod common;

use common::{fd_grad, hvp_max_error};
use dice_core::estimators::dice_objective_over;
use dice_core::ipd::{exact_value, new_ipd, transition, BaselineMode, Horizon, IpdConfig};
use dice_core::lola::{lola_gradient, Learners, LolaConfig};
use dice_core::oracle::enumerate_many;
use dice_core::Binding;
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = [f64; 5]> {
    prop::array::uniform5(-3.0..3.0f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transition_rows_sum_to_one(a in logits(), b in logits()) {
        let (p0, p) = transition(&a, &b);
        prop_assert!((p0.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for row in p {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn enumerated_objective_matches_closed_form(a in logits(), b in logits(), horizon in 1usize..=6) {
        let cfg = IpdConfig { horizon, ..Default::default() };
        let (mut scg, ipd, t1, t2) = new_ipd(&cfg).unwrap();
        let mut roots = Vec::new();
        for agent in 0..2 {
            roots.push(dice_objective_over(&mut scg, &ipd.costs[agent], &Default::default()).unwrap().root);
        }
        let bind = Binding::new().with(t1, a.to_vec()).with(t2, b.to_vec());
        let e = enumerate_many(&scg, &roots, &bind).unwrap().0;
        let v = exact_value(&a, &b, cfg.gamma, Horizon::Finite(horizon), &cfg.payoffs);
        for agent in 0..2 {
            prop_assert!((e[agent] - v[agent]).abs() <= 1e-9, "agent {agent}: {} vs {}", e[agent], v[agent]);
        }
    }
}

#[test]
fn hessian_vector_products_match_explicit_hessian() {
    let err = hvp_max_error();
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn monte_carlo_lookahead_gradient_matches_exact_lookahead() {
    let horizon = 5;
    let theta = [[0.5, -0.3, 0.8, -1.0, 0.2], [-0.4, 0.9, 0.1, 0.6, -0.7]];
    let cfg = LolaConfig {
        ipd: IpdConfig {
            horizon,
            batch: 200_000,
            baseline: BaselineMode::None,
            ..Default::default()
        },
        ..Default::default()
    };
    let (g, pay, h, alpha) = (cfg.ipd.gamma, cfg.ipd.payoffs, Horizon::Finite(horizon), cfg.alpha_inner);
    let arr = |v: &[f64]| -> [f64; 5] { v.try_into().unwrap() };
    let lookahead = |x: &[f64]| {
        let x1 = arr(x);
        let step = fd_grad(&|y| exact_value(&x1, &arr(y), g, h, &pay)[1], &theta[1], 1e-5);
        let x2: Vec<f64> = theta[1].iter().zip(&step).map(|(t, s)| t + alpha * s).collect();
        exact_value(&x1, &arr(&x2), g, h, &pay)[0]
    };
    let exact = fd_grad(&lookahead, &theta[0], 1e-4);
    let naive = fd_grad(&|x| exact_value(&arr(x), &theta[1], g, h, &pay)[0], &theta[0], 1e-4);
    let separation = exact.iter().zip(&naive).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let learners = Learners::new(theta, &cfg.ipd);
    let mc = lola_gradient(&learners, &cfg, 0, 11, |k| 200 + k as u64).unwrap();
    let mut worst_z = 0.0f64;
    for (m, e) in mc.stats.iter().zip(&exact) {
        worst_z = worst_z.max((m.mean - e).abs() / m.std_err);
    }
    let se = mc.stats.iter().map(|s| s.std_err).fold(0.0, f64::max);
    assert!(separation > 10.0 * se, "lookahead and naive gradients are not separable: {separation} vs se {se}");
    assert!(worst_z < 5.0, "max z-score {worst_z}");
}
