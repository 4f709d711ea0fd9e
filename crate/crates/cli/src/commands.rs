use anyhow::{ensure, Result};

use dice_core::experiments::{
    band, baseline_sweep, train_seeds, verify_toy as toy, FidelityProbe, SweepRow, FIDELITY_THETA,
};
use dice_core::ipd::{BaselineMode, IpdConfig};
use dice_core::lola::{LolaConfig, Method};

use crate::report::{Report, Table};

pub const TOY_TOL: f64 = 1e-8;

fn ipd_config(r: &mut Report, cfg: &IpdConfig) {
    r.config("horizon", cfg.horizon);
    r.config("gamma", cfg.gamma);
    r.config("batch", cfg.batch);
    r.config("seed", cfg.seed);
    r.config("baseline.mode", cfg.baseline.to_string());
    r.config("baseline.decay", cfg.baseline_decay);
}

pub fn verify_toy(theta: f64) -> Result<Report> {
    let d = toy(theta)?;
    let mut r = Report::new("verify-toy");
    r.config("theta", theta);
    r.threshold("dice_abs_tol", TOY_TOL);
    r.threshold("sl_d2_expected", -2.0);

    let mut dice = Table::new(&["order", "enumerated", "analytic"]);
    for (k, (e, a)) in d.dice.iter().zip(&d.truth).enumerate() {
        dice.push(vec![k as f64, *e, *a]);
        r.metric(&format!("dice.d{k}"), *e);
    }
    let sl_truth = [1.0 - 4.0 * theta, -2.0];
    let mut sl = Table::new(&["order", "enumerated", "analytic"]);
    for (i, (e, a)) in d.surrogate.iter().zip(&sl_truth).enumerate() {
        sl.push(vec![(i + 1) as f64, *e, *a]);
        r.metric(&format!("sl.d{}", i + 1), *e);
    }
    r.tables.insert("dice".into(), dice);
    r.tables.insert("surrogate".into(), sl);

    let dice_err = d.max_dice_error();
    let sl_err = (d.surrogate[1] + 2.0).abs();
    r.metric("dice.max_abs_error", dice_err);
    r.metric("sl.d2_abs_error", sl_err);
    r.pass = dice_err <= TOY_TOL && sl_err <= TOY_TOL;
    Ok(r)
}

pub fn verify_ipd(cfg: &IpdConfig, samples: usize, min_grad: f64, min_hess: f64) -> Result<Report> {
    ensure!(samples >= 1, "samples must be at least 1");
    let probe = FidelityProbe::new(cfg, FIDELITY_THETA, true)?;
    let f = probe.run(samples, cfg.seed)?;
    let mut r = Report::new("verify-ipd");
    ipd_config(&mut r, cfg);
    r.config("samples", samples);
    r.config("theta1", FIDELITY_THETA[0].to_vec());
    r.config("theta2", FIDELITY_THETA[1].to_vec());
    r.threshold("min_grad_corr", min_grad);
    r.threshold("min_hess_corr", min_hess);

    let mut g = Table::new(&["index", "exact", "mc", "std_err"]);
    for (i, (e, m)) in probe.exact_grad.iter().zip(&f.grad).enumerate() {
        g.push(vec![i as f64, *e, m.mean, m.std_err]);
    }
    let mut h = Table::new(&["row", "col", "exact", "mc", "std_err"]);
    for (i, (e, m)) in probe.exact_hessian.iter().zip(&f.hessian).enumerate() {
        h.push(vec![(i / 10) as f64, (i % 10) as f64, *e, m.mean, m.std_err]);
    }
    r.tables.insert("gradient".into(), g);
    r.tables.insert("hessian".into(), h);

    let mean_se = |s: &[dice_core::stats::EstimateStats]| s.iter().map(|e| e.std_err).sum::<f64>() / s.len() as f64;
    r.metric("grad_corr", f.grad_corr);
    r.metric("hess_corr", f.hess_corr);
    r.metric("grad_mean_std_err", mean_se(&f.grad));
    r.metric("hess_mean_std_err", mean_se(&f.hessian));
    r.pass = f.grad_corr >= min_grad && f.hess_corr >= min_hess;
    Ok(r)
}

/// Mean correlation is nondecreasing in sample size except for at most one
/// drop, which must lie within one standard deviation.
pub fn monotone_enough(rows: &[&SweepRow]) -> bool {
    let mut drops = 0;
    for w in rows.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b.mean < a.mean {
            drops += 1;
            if a.mean - b.mean > a.std.max(b.std) {
                return false;
            }
        }
    }
    drops <= 1
}

pub fn sweep_baseline(cfg: &IpdConfig, modes: &[BaselineMode], sizes: &[usize], seeds: usize) -> Result<Report> {
    ensure!(seeds >= 1, "seeds must be at least 1");
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let rows = baseline_sweep(cfg, modes, &sorted, seeds)?;
    let mut r = Report::new("sweep-baseline");
    ipd_config(&mut r, cfg);
    r.config("sizes", sorted.clone());
    r.config("seeds", seeds);
    r.config("modes", modes.iter().map(|m| m.to_string()).collect::<Vec<_>>());
    r.threshold("max_inversions_per_mode", 1.0);

    let mut t = Table::new(&["mode", "size", "mean_corr", "std_corr"]);
    let mode_index = |m: BaselineMode| match m {
        BaselineMode::None => 0.0,
        BaselineMode::Constant => 1.0,
        BaselineMode::Tabular => 2.0,
    };
    let mut pass = rows.iter().all(|row| row.corrs.iter().all(|c| c.is_finite()));
    for row in &rows {
        t.push(vec![mode_index(row.mode), row.size as f64, row.mean, row.std]);
        r.metric(&format!("{}.{}.mean_corr", row.mode, row.size), row.mean);
        r.metric(&format!("{}.{}.std_corr", row.mode, row.size), row.std);
    }
    for &m in modes {
        let series: Vec<&SweepRow> = rows.iter().filter(|row| row.mode == m).collect();
        pass &= monotone_enough(&series);
    }
    if modes.contains(&BaselineMode::None) && modes.contains(&BaselineMode::Tabular) {
        for &size in &sorted {
            let get = |m| rows.iter().find(|row| row.mode == m && row.size == size);
            if let (Some(none), Some(tab)) = (get(BaselineMode::None), get(BaselineMode::Tabular)) {
                pass &= tab.mean >= none.mean - none.std.max(tab.std);
            }
        }
    }
    r.tables.insert("correlation".into(), t);
    r.pass = pass;
    Ok(r)
}

pub fn train(method: Method, cfg: &LolaConfig, seeds: usize, naive_max: f64, lola_min: f64) -> Result<Report> {
    ensure!(seeds >= 1, "seeds must be at least 1");
    cfg.validate()?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| cfg.ipd.seed + i).collect();
    let traces = train_seeds(method, cfg, &seed_list)?;
    let mut r = Report::new("train");
    ipd_config(&mut r, &cfg.ipd);
    r.config("method", method.to_string());
    r.config("K", cfg.lookahead);
    r.config("alpha_inner", cfg.alpha_inner);
    r.config("alpha_outer", cfg.alpha_outer);
    r.config("epochs", cfg.epochs);
    r.config("clip", cfg.clip);
    r.config("seeds", seed_list.clone());

    let mut cols = vec!["epoch".to_string(), "mean".into(), "lo95".into(), "hi95".into()];
    cols.extend(seed_list.iter().map(|s| format!("seed_{s}")));
    let mut curves = Table {
        columns: cols,
        rows: Vec::new(),
    };
    for (e, (m, lo, hi)) in band(&traces).into_iter().enumerate() {
        let mut row = vec![e as f64, m, lo, hi];
        row.extend(traces.iter().map(|t| t.returns[e]));
        curves.push(row);
    }
    let mut finals = Table::new(&["seed", "final_return"]);
    let final_of = |t: &dice_core::lola::TrainTrace| t.returns.last().copied();
    let mut values = Vec::new();
    for (s, t) in seed_list.iter().zip(&traces) {
        if let Some(v) = final_of(t) {
            finals.push(vec![*s as f64, v]);
            values.push(v);
        }
    }
    r.tables.insert("curves".into(), curves);
    r.tables.insert("final".into(), finals);

    if values.is_empty() {
        r.pass = true;
        return Ok(r);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    r.metric("final_mean", mean);
    r.metric("final_min", values.iter().copied().fold(f64::INFINITY, f64::min));
    r.metric("final_max", values.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    match method {
        Method::Naive => {
            r.threshold("naive_max_final_mean", naive_max);
            r.pass = mean <= naive_max;
        }
        Method::LolaDice => {
            let good = values.iter().filter(|&&v| v >= lola_min).count();
            r.threshold("lola_min_final", lola_min);
            r.threshold("lola_min_seed_fraction", 0.5);
            r.metric("seeds_above_lola_min", good as f64);
            r.pass = 2 * good > values.len();
        }
    }
    Ok(r)
}
