//! Naive policy-gradient learners and LOLA-DiCE on the IPD.
//!
//! A LOLA-DiCE learner imagines `K` policy-gradient steps of its opponent
//! before taking its own step. The imagined steps are graph expressions in
//! the learner's parameters: each one is a [`crate::graph::NodeKind::BatchMean`]
//! of the opponent's MagicBox gradient over a frozen batch of inner rollouts,
//! so the outer gradient flows through them.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::estimators::{estimate_on_batch, surrogate_loss_over};
use crate::graph::{Binding, GraphArena, NodeId, ParamId, SampleBatch, SampleRecord, Tape};
use crate::ipd::{
    exact_value, mix_seed, new_ipd, per_step, BaselineMode, BaselineTable, Horizon, IpdConfig, IpdScg, N_STATES,
};
use crate::scg::Scg;
use crate::stats::EstimateStats;

pub type Logits = [f64; N_STATES];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Naive,
    LolaDice,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "naive" => Ok(Self::Naive),
            "lola-dice" | "lola" => Ok(Self::LolaDice),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Naive => "naive",
            Self::LolaDice => "lola-dice",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LolaConfig {
    pub ipd: IpdConfig,
    /// Number of imagined opponent steps `K`.
    pub lookahead: usize,
    pub alpha_inner: f64,
    pub alpha_outer: f64,
    pub epochs: usize,
    /// Gradients are rescaled so their largest component is at most `clip`.
    pub clip: f64,
    /// Standard deviation of the initial logits.
    pub init_std: f64,
    /// Baseline-table rounds run on the initial policies before training.
    pub warmup: usize,
}

impl Default for LolaConfig {
    fn default() -> Self {
        Self {
            ipd: IpdConfig::default(),
            lookahead: 1,
            alpha_inner: 1.0,
            alpha_outer: 0.3,
            epochs: 200,
            clip: 10.0,
            init_std: 0.1,
            warmup: 10,
        }
    }
}

impl LolaConfig {
    pub fn validate(&self) -> Result<()> {
        self.ipd.validate()?;
        if !(self.alpha_outer >= 0.0 && self.alpha_outer.is_finite()) {
            return Err(Error::Config(format!("alpha_outer must be finite and ≥ 0, got {}", self.alpha_outer)));
        }
        if !(self.alpha_inner >= 0.0 && self.alpha_inner.is_finite()) {
            return Err(Error::Config(format!("alpha_inner must be finite and ≥ 0, got {}", self.alpha_inner)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip must be positive, got {}", self.clip)));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init_std must be finite and ≥ 0, got {}", self.init_std)));
        }
        Ok(())
    }
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    pub initial: [Logits; 2],
    /// Joint average per-step return after each epoch.
    pub returns: Vec<f64>,
    /// Parameters after each epoch.
    pub params: Vec<[Logits; 2]>,
}

/// Learner state carried across epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Learners {
    pub theta: [Logits; 2],
    pub tables: [BaselineTable; 2],
}

impl Learners {
    pub fn new(theta: [Logits; 2], cfg: &IpdConfig) -> Self {
        let table = BaselineTable::new(cfg.baseline, cfg.baseline_decay);
        Self {
            theta,
            tables: [table.clone(), table],
        }
    }

    /// Fits both baseline tables on `rounds` batches under the current
    /// policies.
    pub fn warm_up(&mut self, cfg: &IpdConfig, rounds: usize, seed: u64) -> Result<()> {
        if rounds == 0 || cfg.baseline == BaselineMode::None {
            return Ok(());
        }
        let (scg, ipd, t1, t2) = new_ipd(cfg)?;
        let binding = Binding::new()
            .with(t1, self.theta[0].to_vec())
            .with(t2, self.theta[1].to_vec());
        for (agent, table) in self.tables.iter_mut().enumerate() {
            table.warm_up(&scg, &ipd, agent, &binding, cfg.batch, rounds, seed)?;
        }
        Ok(())
    }
}

/// Gradient estimate for one agent plus the batch it came from.
#[derive(Clone, Debug)]
pub struct AgentGradient {
    pub stats: Vec<EstimateStats>,
    pub batch: SampleBatch,
    pub ipd: IpdScg,
}

impl AgentGradient {
    pub fn mean(&self) -> Logits {
        let mut g = [0.0; N_STATES];
        for (v, s) in g.iter_mut().zip(&self.stats) {
            *v = s.mean;
        }
        g
    }
}

fn check_finite(agent: usize, g: &Logits) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient of agent {} is {g:?}", agent + 1)))
    }
}

fn ascend(theta: &Logits, g: &Logits, lr: f64, clip: f64) -> Logits {
    let norm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if norm > clip { clip / norm } else { 1.0 };
    let mut out = *theta;
    for (t, v) in out.iter_mut().zip(g) {
        *t += lr * scale * v;
    }
    out
}

fn table_ref(t: &BaselineTable) -> Option<&BaselineTable> {
    Some(t)
}

/// Seeds for one epoch.
pub fn outer_seed(seed: u64, epoch: usize) -> u64 {
    mix_seed(seed, epoch as u64, 0)
}

pub fn inner_seed(seed: u64, epoch: usize, learner: usize, step: usize) -> u64 {
    mix_seed(mix_seed(seed, epoch as u64, 1 + learner as u64), step as u64, 0x1a)
}

/// One simultaneous naive step: both agents ascend their own MagicBox
/// objective, estimated on one shared batch drawn with `seed`.
pub fn naive_pg_step(learners: &mut Learners, cfg: &LolaConfig, seed: u64) -> Result<[AgentGradient; 2]> {
    let (mut scg, ipd, t1, t2) = new_ipd(&cfg.ipd)?;
    let binding = Binding::new()
        .with(t1, learners.theta[0].to_vec())
        .with(t2, learners.theta[1].to_vec());
    let batch = ipd.sample(&scg, &binding, cfg.ipd.batch, seed)?;
    let mut roots = Vec::with_capacity(2 * N_STATES);
    for (agent, p) in [t1, t2].into_iter().enumerate() {
        let obj = ipd.objective(&mut scg, agent, table_ref(&learners.tables[agent]))?;
        roots.extend(scg.arena_mut().gradient_vector(obj.root, p)?);
    }
    let stats = estimate_on_batch(scg.arena(), &roots, &binding, &batch)?;
    let grads = [0, 1].map(|agent| AgentGradient {
        stats: stats[agent * N_STATES..(agent + 1) * N_STATES].to_vec(),
        batch: batch.clone(),
        ipd: ipd.clone(),
    });
    for (agent, g) in grads.iter().enumerate() {
        check_finite(agent, &g.mean())?;
    }
    for (agent, g) in grads.iter().enumerate() {
        learners.theta[agent] = ascend(&learners.theta[agent], &g.mean(), cfg.alpha_outer, cfg.clip);
        learners.tables[agent].update(&ipd, agent, &batch)?;
    }
    Ok(grads)
}

/// How the imagined opponent gradient is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerVariant {
    /// MagicBox objective: the imagined step depends on the learner's
    /// parameters through the learner's log-probabilities.
    Dice,
    /// Surrogate loss: sampled returns are constants, so the imagined step
    /// carries no dependence on the learner's parameters.
    Surrogate,
}

/// Graph for one learner's lookahead step.
struct Lookahead {
    scg: Scg,
    params: [ParamId; 2],
    binding: Binding,
    /// Opponent logits after the imagined steps, one chain per variant.
    opponent: Vec<[NodeId; N_STATES]>,
}

fn eval_nodes(arena: &GraphArena, nodes: &[NodeId], binding: &Binding) -> Result<Vec<f64>> {
    let tape = Tape::compile(arena, nodes)?;
    let prepared = tape.prepare(binding)?;
    let mut worker = prepared.worker();
    worker.run_record(&SampleRecord::new())?;
    let mut out = Vec::with_capacity(nodes.len());
    worker.roots_into(&mut out);
    Ok(out)
}

fn agents_logits(learner: usize, own: [NodeId; N_STATES], opp: [NodeId; N_STATES]) -> [[NodeId; N_STATES]; 2] {
    if learner == 0 {
        [own, opp]
    } else {
        [opp, own]
    }
}

fn to_array(v: Vec<NodeId>) -> [NodeId; N_STATES] {
    let mut a = [NodeId::default(); N_STATES];
    a.copy_from_slice(&v);
    a
}

/// Builds the imagined opponent updates for `learner`. Inner rollouts are
/// sampled under the current (numeric) opponent logits of the first variant.
/// The MagicBox variant uses the opponent's baseline table when
/// `inner_baseline` is set.
fn build_lookahead(
    learners: &Learners,
    cfg: &LolaConfig,
    learner: usize,
    variants: &[InnerVariant],
    inner_baseline: bool,
    seeds: impl Fn(usize) -> u64,
) -> Result<Lookahead> {
    let opp = 1 - learner;
    let mut arena = GraphArena::new();
    let t1 = arena.register_param("theta1", N_STATES);
    let t2 = arena.register_param("theta2", N_STATES);
    let psi = arena.register_param("opponent", N_STATES);
    let params = [t1, t2];
    let mut scg = Scg::new(arena, vec![t1, t2, psi]);
    let own = to_array(scg.arena_mut().param_vector(params[learner]));
    let psi_nodes = to_array(scg.arena_mut().param_vector(psi));
    let base = to_array(scg.arena_mut().param_vector(params[opp]));
    let mut binding = Binding::new()
        .with(t1, learners.theta[0].to_vec())
        .with(t2, learners.theta[1].to_vec())
        .with(psi, vec![0.0; N_STATES]);
    let mut chains = vec![base; variants.len()];

    let inner_table = inner_baseline.then_some(&learners.tables[opp]);
    for k in 0..cfg.lookahead {
        if cfg.alpha_inner == 0.0 {
            break;
        }
        let current = eval_nodes(scg.arena(), &chains[0], &binding)?;
        binding.set(psi, current);
        let inner = IpdScg::build(
            &mut scg,
            cfg.ipd.horizon,
            cfg.ipd.gamma,
            cfg.ipd.payoffs,
            agents_logits(learner, own, psi_nodes),
        )?;
        let batch = inner.sample(&scg, &binding, cfg.ipd.batch, seeds(k))?;
        let batch_id = scg.arena_mut().freeze_batch(batch);
        for (v, chain) in variants.iter().zip(chains.iter_mut()) {
            let root = match v {
                InnerVariant::Dice => inner.objective(&mut scg, opp, inner_table)?.root,
                InnerVariant::Surrogate => surrogate_loss_over(&mut scg, &inner.costs[opp])?.root,
            };
            let grad = scg.arena_mut().gradient_vector(root, psi)?;
            let map: HashMap<NodeId, NodeId> = psi_nodes.iter().copied().zip(chain.iter().copied()).collect();
            let mut next = *chain;
            for (s, g) in grad.into_iter().enumerate() {
                let arena = scg.arena_mut();
                let g = arena.substitute(g, &map)?;
                let mean = arena.batch_mean(g, batch_id);
                let step = arena.scale(cfg.alpha_inner, mean);
                next[s] = arena.add(chain[s], step);
            }
            *chain = next;
        }
    }
    binding.set(psi, vec![0.0; N_STATES]);
    Ok(Lookahead {
        scg,
        params,
        binding,
        opponent: chains,
    })
}

/// Outer MagicBox gradient of `learner` after `K` imagined opponent steps,
/// estimated on fresh rollouts under the imagined opponent.
pub fn lola_gradient(
    learners: &Learners,
    cfg: &LolaConfig,
    learner: usize,
    outer: u64,
    inner: impl Fn(usize) -> u64,
) -> Result<AgentGradient> {
    let mut la = build_lookahead(learners, cfg, learner, &[InnerVariant::Dice], true, inner)?;
    let own = to_array(la.scg.arena_mut().param_vector(la.params[learner]));
    let ipd = IpdScg::build(
        &mut la.scg,
        cfg.ipd.horizon,
        cfg.ipd.gamma,
        cfg.ipd.payoffs,
        agents_logits(learner, own, la.opponent[0]),
    )?;
    let batch = ipd.sample(&la.scg, &la.binding, cfg.ipd.batch, outer)?;
    let obj = ipd.objective(&mut la.scg, learner, table_ref(&learners.tables[learner]))?;
    let grad = la.scg.arena_mut().gradient_vector(obj.root, la.params[learner])?;
    let stats = estimate_on_batch(la.scg.arena(), &grad, &la.binding, &batch)?;
    Ok(AgentGradient { stats, batch, ipd })
}

/// One simultaneous LOLA-DiCE step for both agents. Each agent's outer
/// batch is drawn with `outer`, so with `K = 0` or `α_inner = 0` the step is
/// bit-identical to [`naive_pg_step`] with the same seed.
pub fn lola_dice_step(
    learners: &mut Learners,
    cfg: &LolaConfig,
    outer: u64,
    inner: impl Fn(usize, usize) -> u64,
) -> Result<[AgentGradient; 2]> {
    let g0 = lola_gradient(learners, cfg, 0, outer, |k| inner(0, k))?;
    let g1 = lola_gradient(learners, cfg, 1, outer, |k| inner(1, k))?;
    let grads = [g0, g1];
    for (agent, g) in grads.iter().enumerate() {
        check_finite(agent, &g.mean())?;
    }
    for (agent, g) in grads.iter().enumerate() {
        learners.theta[agent] = ascend(&learners.theta[agent], &g.mean(), cfg.alpha_outer, cfg.clip);
        learners.tables[agent].update(&g.ipd, agent, &g.batch)?;
    }
    Ok(grads)
}

/// Outer gradients of one learner with the imagined step built from the
/// MagicBox objective and from the surrogate loss, evaluated on one shared
/// outer batch of `outer_batch` rollouts. Both chains share the inner
/// batches and have identical forward values, so the rollouts are the same.
/// The inner steps carry no baseline; the outer objective uses the
/// learner's table.
#[derive(Clone, Debug, PartialEq)]
pub struct PathwayComparison {
    pub dice: Vec<EstimateStats>,
    pub surrogate: Vec<EstimateStats>,
    /// Component with the largest absolute difference of means.
    pub component: usize,
    pub max_diff: f64,
    /// `sqrt(se_dice² + se_surrogate²)` at that component.
    pub pooled_std_err: f64,
    /// Standard error of the per-rollout difference at that component.
    pub paired_std_err: f64,
}

impl PathwayComparison {
    pub fn ratio(&self) -> f64 {
        self.max_diff / self.pooled_std_err
    }
}

pub fn compare_inner_pathways(
    learners: &Learners,
    cfg: &LolaConfig,
    learner: usize,
    outer_batch: usize,
    outer: u64,
    inner: impl Fn(usize) -> u64,
) -> Result<PathwayComparison> {
    let variants = [InnerVariant::Dice, InnerVariant::Surrogate];
    let mut la = build_lookahead(learners, cfg, learner, &variants, false, inner)?;
    let own = to_array(la.scg.arena_mut().param_vector(la.params[learner]));
    let ipd = IpdScg::build(
        &mut la.scg,
        cfg.ipd.horizon,
        cfg.ipd.gamma,
        cfg.ipd.payoffs,
        agents_logits(learner, own, la.opponent[0]),
    )?;
    let batch = ipd.sample(&la.scg, &la.binding, outer_batch, outer)?;
    let obj = ipd.objective(&mut la.scg, learner, table_ref(&learners.tables[learner]))?;
    // same objective and samples; only the opponent logits are swapped
    let map: HashMap<NodeId, NodeId> = la.opponent[0]
        .iter()
        .copied()
        .zip(la.opponent[1].iter().copied())
        .collect();
    let swapped = la.scg.arena_mut().substitute(obj.root, &map)?;
    let p = la.params[learner];
    let mut roots = la.scg.arena_mut().gradient_vector(obj.root, p)?;
    roots.extend(la.scg.arena_mut().gradient_vector(swapped, p)?);
    for s in 0..N_STATES {
        let d = la.scg.arena_mut().sub(roots[s], roots[N_STATES + s]);
        roots.push(d);
    }
    let stats = estimate_on_batch(la.scg.arena(), &roots, &la.binding, &batch)?;
    let (dice, rest) = stats.split_at(N_STATES);
    let (surrogate, diff) = rest.split_at(N_STATES);
    let (component, max_diff) = dice
        .iter()
        .zip(surrogate)
        .map(|(a, b)| (a.mean - b.mean).abs())
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((0, 0.0));
    let pooled_std_err = dice[component].std_err.hypot(surrogate[component].std_err);
    Ok(PathwayComparison {
        dice: dice.to_vec(),
        surrogate: surrogate.to_vec(),
        component,
        max_diff,
        pooled_std_err,
        paired_std_err: diff[component].std_err,
    })
}

/// Joint average per-step return under the exact value function.
pub fn joint_return(theta: &[Logits; 2], cfg: &IpdConfig) -> f64 {
    let h = Horizon::Finite(cfg.horizon);
    let v = exact_value(&theta[0], &theta[1], cfg.gamma, h, &cfg.payoffs);
    0.5 * (per_step(v[0], cfg.gamma, h) + per_step(v[1], cfg.gamma, h))
}

/// Initial logits drawn from `N(0, init_std²)`.
pub fn initial_params(cfg: &LolaConfig) -> Result<[Logits; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.ipd.seed, u64::MAX, 0));
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut theta = [[0.0; N_STATES]; 2];
    for v in theta.iter_mut().flatten() {
        *v = normal.sample(&mut rng);
    }
    Ok(theta)
}

/// Trains both agents with `method` for `cfg.epochs` epochs.
pub fn train(method: Method, cfg: &LolaConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    let initial = initial_params(cfg)?;
    train_from(method, cfg, initial)
}

pub fn train_from(method: Method, cfg: &LolaConfig, initial: [Logits; 2]) -> Result<TrainTrace> {
    let mut learners = Learners::new(initial, &cfg.ipd);
    learners.warm_up(&cfg.ipd, cfg.warmup, mix_seed(cfg.ipd.seed, u64::MAX, 1))?;
    let mut trace = TrainTrace {
        initial,
        returns: Vec::with_capacity(cfg.epochs),
        params: Vec::with_capacity(cfg.epochs),
    };
    let seed = cfg.ipd.seed;
    for epoch in 0..cfg.epochs {
        let outer = outer_seed(seed, epoch);
        match method {
            Method::Naive => {
                naive_pg_step(&mut learners, cfg, outer)?;
            }
            Method::LolaDice => {
                lola_dice_step(&mut learners, cfg, outer, |agent, k| inner_seed(seed, epoch, agent, k))?;
            }
        }
        trace.returns.push(joint_return(&learners.theta, &cfg.ipd));
        trace.params.push(learners.theta);
    }
    Ok(trace)
}
