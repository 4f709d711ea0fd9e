//! Reusable experiment drivers shared by the command-line tool and the
//! acceptance tests.

use rayon::prelude::*;

use crate::dists::bernoulli;
use crate::error::{Error, Result};
use crate::estimators::{dice_objective, estimate_nodes, surrogate_derivatives, surrogate_loss};
use crate::graph::{Binding, GraphArena, NodeId, ParamId};
use crate::ipd::{exact_grad_hessian, new_ipd, BaselineMode, BaselineTable, Horizon, IpdConfig, IpdScg};
use crate::lola::{train, LolaConfig, Logits, Method, TrainTrace};
use crate::oracle::enumerate_many;
use crate::scg::Scg;
use crate::stats::{mean_std, pearson, EstimateStats};

/// Highest derivative order reported by [`verify_toy`].
pub const TOY_MAX_ORDER: usize = 3;

/// `x ~ Ber(θ)` with cost `f = x(1−θ) + (1−x)(1+θ)`.
pub fn toy_scg() -> Result<(Scg, ParamId)> {
    let mut arena = GraphArena::new();
    let theta = arena.register_param("theta", 1);
    let mut scg = Scg::new(arena, vec![theta]);
    let t = scg.arena_mut().param(theta, 0);
    let x = bernoulli(&mut scg, t)?;
    let xl = scg.stochastic(x)?.leaf;
    let a = scg.arena_mut();
    let one = a.one();
    let l = a.sub(one, t);
    let r = a.add(one, t);
    let nx = a.sub(one, xl);
    let p = a.mul(xl, l);
    let q = a.mul(nx, r);
    let f = a.add(p, q);
    scg.add_cost(f)?;
    Ok((scg, theta))
}

/// `L(θ) = θ(1−θ) + (1−θ)(1+θ) = 1 + θ − 2θ²` and its derivatives, indexed
/// by order.
pub fn toy_truth(theta: f64) -> [f64; TOY_MAX_ORDER + 1] {
    [1.0 + theta - 2.0 * theta * theta, 1.0 - 4.0 * theta, -4.0, 0.0]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDerivatives {
    pub theta: f64,
    /// Enumerated expectations of the MagicBox derivatives, orders 0..=3.
    pub dice: Vec<f64>,
    /// Enumerated expectations of the repeated surrogate-loss derivatives of
    /// orders 1 and 2.
    pub surrogate: Vec<f64>,
    pub truth: Vec<f64>,
}

impl ToyDerivatives {
    pub fn max_dice_error(&self) -> f64 {
        self.dice
            .iter()
            .zip(&self.truth)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Exact derivatives of the toy objective by enumeration.
pub fn verify_toy(theta: f64) -> Result<ToyDerivatives> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidArgument(format!("theta must lie in (0, 1), got {theta}")));
    }
    let (mut scg, p) = toy_scg()?;
    let dice = dice_objective(&mut scg)?;
    let sl = surrogate_loss(&mut scg)?;
    let mut roots = Vec::new();
    for order in 0..=TOY_MAX_ORDER {
        roots.extend(scg.arena_mut().derivative_tensor(dice.root, &[p], order)?);
    }
    for order in 1..=2 {
        roots.extend(surrogate_derivatives(&mut scg, &sl, &[p], order)?);
    }
    let binding = Binding::new().with(p, vec![theta]);
    let (values, _, _) = enumerate_many(&scg, &roots, &binding)?;
    let (d, s) = values.split_at(TOY_MAX_ORDER + 1);
    Ok(ToyDerivatives {
        theta,
        dice: d.to_vec(),
        surrogate: s.to_vec(),
        truth: toy_truth(theta).to_vec(),
    })
}

/// Fixed policy pair at which estimator fidelity is measured.
pub const FIDELITY_THETA: [Logits; 2] = [[0.5, -0.3, 0.8, -1.0, 0.2], [-0.4, 0.9, 0.1, 0.6, -0.7]];

/// Rollouts per round and rounds used to converge the baseline table.
pub const BASELINE_WARMUP: (usize, usize) = (1000, 20);

/// Monte-Carlo derivative nodes of agent 1's objective at a fixed policy
/// pair, built once and evaluated for any number of seeds.
pub struct FidelityProbe {
    scg: Scg,
    binding: Binding,
    roots: Vec<NodeId>,
    pub exact_grad: Vec<f64>,
    pub exact_hessian: Vec<f64>,
    pub table: BaselineTable,
    with_hessian: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fidelity {
    pub grad: Vec<EstimateStats>,
    pub hessian: Vec<EstimateStats>,
    pub grad_corr: f64,
    /// Zero when the probe was built without Hessian nodes.
    pub hess_corr: f64,
}

fn means(s: &[EstimateStats]) -> Vec<f64> {
    s.iter().map(|e| e.mean).collect()
}

impl FidelityProbe {
    /// Builds the probe; a tabular or constant baseline is first converged
    /// on rollouts under the fixed policies, seeded from `cfg.seed`.
    pub fn new(cfg: &IpdConfig, theta: [Logits; 2], with_hessian: bool) -> Result<Self> {
        cfg.validate()?;
        let (mut scg, ipd, t1, t2) = new_ipd(cfg)?;
        let binding = Binding::new().with(t1, theta[0].to_vec()).with(t2, theta[1].to_vec());
        let mut table = BaselineTable::new(cfg.baseline, cfg.baseline_decay);
        if cfg.baseline != BaselineMode::None {
            let (batch, rounds) = BASELINE_WARMUP;
            table.warm_up(&scg, &ipd, 0, &binding, batch, rounds, cfg.seed)?;
        }
        let roots = fidelity_roots(&mut scg, &ipd, &table, [t1, t2], with_hessian)?;
        let mut x = [0.0; 10];
        x[..5].copy_from_slice(&theta[0]);
        x[5..].copy_from_slice(&theta[1]);
        let [exact, _] = exact_grad_hessian(&x, cfg.gamma, Horizon::Finite(cfg.horizon), &cfg.payoffs);
        Ok(Self {
            scg,
            binding,
            roots,
            exact_grad: exact.grad,
            exact_hessian: exact.hessian,
            table,
            with_hessian,
        })
    }

    pub fn run(&self, samples: usize, seed: u64) -> Result<Fidelity> {
        let est = estimate_nodes(&self.scg, &self.roots, &self.binding, samples, seed)?;
        let (grad, hessian) = est.split_at(10);
        let grad_corr = pearson(&means(grad), &self.exact_grad);
        let hess_corr = if self.with_hessian {
            pearson(&means(hessian), &self.exact_hessian)
        } else {
            0.0
        };
        Ok(Fidelity {
            grad: grad.to_vec(),
            hessian: hessian.to_vec(),
            grad_corr,
            hess_corr,
        })
    }
}

fn fidelity_roots(
    scg: &mut Scg,
    ipd: &IpdScg,
    table: &BaselineTable,
    params: [ParamId; 2],
    with_hessian: bool,
) -> Result<Vec<NodeId>> {
    let obj = ipd.objective(scg, 0, Some(table))?;
    let grad = scg.arena_mut().gradient_over(obj.root, &params)?;
    let mut roots = grad.clone();
    if with_hessian {
        for g in grad {
            roots.extend(scg.arena_mut().gradient_over(g, &params)?);
        }
    }
    Ok(roots)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub mode: BaselineMode,
    pub size: usize,
    pub corrs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Gradient correlation against the exact gradient for every baseline mode
/// and sample size, over `seeds` independent batches.
pub fn baseline_sweep(cfg: &IpdConfig, modes: &[BaselineMode], sizes: &[usize], seeds: usize) -> Result<Vec<SweepRow>> {
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument("sample sizes must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for &mode in modes {
        let probe = FidelityProbe::new(
            &IpdConfig {
                baseline: mode,
                ..cfg.clone()
            },
            FIDELITY_THETA,
            false,
        )?;
        for &size in sizes {
            let corrs = (0..seeds)
                .map(|s| {
                    let seed = crate::ipd::mix_seed(cfg.seed, s as u64, size as u64);
                    probe.run(size, seed).map(|f| f.grad_corr)
                })
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = mean_std(&corrs);
            rows.push(SweepRow {
                mode,
                size,
                corrs,
                mean,
                std,
            });
        }
    }
    Ok(rows)
}

/// One training run per seed; seeds run in parallel.
pub fn train_seeds(method: Method, cfg: &LolaConfig, seeds: &[u64]) -> Result<Vec<TrainTrace>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut c = cfg.clone();
            c.ipd.seed = seed;
            train(method, &c)
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect()
}

/// Per-epoch mean and 95% normal band over runs.
pub fn band(traces: &[TrainTrace]) -> Vec<(f64, f64, f64)> {
    let epochs = traces.iter().map(|t| t.returns.len()).min().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let xs: Vec<f64> = traces.iter().map(|t| t.returns[e]).collect();
            let (m, sd) = mean_std(&xs);
            let half = 1.96 * sd / (xs.len() as f64).sqrt();
            (m, m - half, m + half)
        })
        .collect()
}
