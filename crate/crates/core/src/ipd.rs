//! Iterated prisoner's dilemma with memory-1 policies.
//!
//! Outcomes are indexed `CC, CD, DC, DD` with agent 1's action first; a
//! sampled action is 1.0 for cooperate. A memory-1 policy has five
//! cooperate-logits, for the initial state and for each previous outcome
//! seen from the agent's own side. Agent 2 therefore reads `CD` and `DC`
//! swapped.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::dists::sigmoid_bernoulli;
use crate::error::{Error, Result};
use crate::estimators::{dice_objective_over, sample_batch_with_plan, EstimatorObjective};
use crate::graph::{Binding, GraphArena, NodeId, ParamId, SampleBatch, SampleRecord, StochId};
use crate::oracle::{gradient_fd, hessian_fd, DEFAULT_H1, DEFAULT_H2};
use crate::scg::{CostId, Scg};

pub const N_STATES: usize = 5;
pub const N_OUTCOMES: usize = 4;

/// Outcome as seen by the other agent.
pub const fn mirror(outcome: usize) -> usize {
    [0, 2, 1, 3][outcome]
}

/// Outcome index from the two actions (true = cooperate).
pub const fn outcome_of(a1: bool, a2: bool) -> usize {
    match (a1, a2) {
        (true, true) => 0,
        (true, false) => 1,
        (false, true) => 2,
        (false, false) => 3,
    }
}

/// Policy state of `agent` after `outcome` (agent-1 indexing).
pub const fn state_after(agent: usize, outcome: usize) -> usize {
    1 + if agent == 0 { outcome } else { mirror(outcome) }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Payoffs {
    pub r1: [f64; 4],
    pub r2: [f64; 4],
}

impl Default for Payoffs {
    fn default() -> Self {
        Self {
            r1: [-1.0, -3.0, 0.0, -2.0],
            r2: [-1.0, 0.0, -3.0, -2.0],
        }
    }
}

impl Payoffs {
    pub fn agent(&self, agent: usize) -> &[f64; 4] {
        if agent == 0 {
            &self.r1
        } else {
            &self.r2
        }
    }
}

/// Cooperate-logits for states `s0, CC, CD, DC, DD` (own perspective).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IpdPolicy {
    pub logits: [f64; 5],
}

impl IpdPolicy {
    pub const SATURATED: f64 = 20.0;

    pub fn new(logits: [f64; 5]) -> Self {
        Self { logits }
    }

    pub fn always_cooperate() -> Self {
        Self::new([Self::SATURATED; 5])
    }

    pub fn always_defect() -> Self {
        Self::new([-Self::SATURATED; 5])
    }

    /// Cooperate first, then copy the opponent's last move.
    pub fn tit_for_tat() -> Self {
        let (c, d) = (Self::SATURATED, -Self::SATURATED);
        Self::new([c, c, d, c, d])
    }

    pub fn coop_prob(&self, state: usize) -> f64 {
        sigmoid(self.logits[state])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaselineMode {
    None,
    Constant,
    Tabular,
}

impl FromStr for BaselineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "constant" => Ok(Self::Constant),
            "tabular" => Ok(Self::Tabular),
            other => Err(Error::Config(format!("unknown baseline mode `{other}`"))),
        }
    }
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Constant => "constant",
            Self::Tabular => "tabular",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IpdConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub batch: usize,
    pub seed: u64,
    pub baseline: BaselineMode,
    /// EMA decay of the baseline table.
    pub baseline_decay: f64,
    pub payoffs: Payoffs,
}

impl Default for IpdConfig {
    fn default() -> Self {
        Self {
            horizon: 150,
            gamma: 0.96,
            batch: 64,
            seed: 0,
            baseline: BaselineMode::Tabular,
            baseline_decay: 0.9,
            payoffs: Payoffs::default(),
        }
    }
}

impl IpdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config(format!(
                "baseline.decay must lie in [0, 1), got {}",
                self.baseline_decay
            )));
        }
        Ok(())
    }
}

/// An IPD rollout laid out as a stochastic computation graph.
#[derive(Clone, Debug)]
pub struct IpdScg {
    pub horizon: usize,
    pub gamma: f64,
    pub payoffs: Payoffs,
    /// `actions[t] = [a¹_t, a²_t]`.
    pub actions: Vec<[StochId; 2]>,
    /// Outcome indicators per step, agent-1 indexing.
    pub indicators: Vec<[NodeId; 4]>,
    /// `costs[i][t]` holds `γ^t r^i_t`.
    pub costs: [Vec<CostId>; 2],
    probs: Vec<[NodeId; 2]>,
}

/// Builds the rollout graph with each agent's policy logits given as
/// parameter vectors of dimension 5.
pub fn build_ipd_scg(scg: &mut Scg, cfg: &IpdConfig, theta1: ParamId, theta2: ParamId) -> Result<IpdScg> {
    let mut logits = [[NodeId::default(); 5]; 2];
    for (agent, p) in [theta1, theta2].into_iter().enumerate() {
        let dim = scg.arena().param_dim(p)?;
        if dim != N_STATES {
            return Err(Error::DimensionMismatch {
                expected: N_STATES,
                got: dim,
            });
        }
        let nodes = scg.arena_mut().param_vector(p);
        logits[agent].copy_from_slice(&nodes);
    }
    IpdScg::build(scg, cfg.horizon, cfg.gamma, cfg.payoffs, logits)
}

/// Fresh arena with `θ1`, `θ2` registered as Θ and the rollout graph built.
pub fn new_ipd(cfg: &IpdConfig) -> Result<(Scg, IpdScg, ParamId, ParamId)> {
    let mut arena = GraphArena::new();
    let t1 = arena.register_param("theta1", N_STATES);
    let t2 = arena.register_param("theta2", N_STATES);
    let mut scg = Scg::new(arena, vec![t1, t2]);
    let ipd = build_ipd_scg(&mut scg, cfg, t1, t2)?;
    Ok((scg, ipd, t1, t2))
}

impl IpdScg {
    /// Builds the rollout graph with arbitrary logit expressions per agent
    /// and state.
    pub fn build(
        scg: &mut Scg,
        horizon: usize,
        gamma: f64,
        payoffs: Payoffs,
        logits: [[NodeId; 5]; 2],
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        for l in logits.iter().flatten() {
            scg.arena().check_node(*l)?;
        }
        let mut actions = Vec::with_capacity(horizon);
        let mut indicators: Vec<[NodeId; 4]> = Vec::with_capacity(horizon);
        let mut probs = Vec::with_capacity(horizon);
        let mut costs = [Vec::with_capacity(horizon), Vec::with_capacity(horizon)];
        let mut discount = 1.0;
        for _ in 0..horizon {
            let mut step = [StochId(0); 2];
            let mut step_probs = [logits[0][0]; 2];
            let mut leaves = [logits[0][0]; 2];
            for agent in 0..2 {
                let logit = match indicators.last() {
                    None => logits[agent][0],
                    Some(prev) => {
                        let arena = scg.arena_mut();
                        let terms: Vec<NodeId> = (0..N_OUTCOMES)
                            .map(|o| arena.mul(prev[o], logits[agent][state_after(agent, o)]))
                            .collect();
                        arena.sum(terms)
                    }
                };
                let id = sigmoid_bernoulli(scg, logit)?;
                let node = scg.stochastic(id)?;
                step[agent] = id;
                leaves[agent] = node.leaf;
                step_probs[agent] = node.sampler.prob();
            }
            let arena = scg.arena_mut();
            let one = arena.one();
            let (a, b) = (leaves[0], leaves[1]);
            let na = arena.sub(one, a);
            let nb = arena.sub(one, b);
            let ind = [arena.mul(a, b), arena.mul(a, nb), arena.mul(na, b), arena.mul(na, nb)];
            for (agent, agent_costs) in costs.iter_mut().enumerate() {
                let weights = payoffs.agent(agent).map(|r| discount * r);
                let r = scg.arena_mut().dot_const(&weights, &ind);
                agent_costs.push(scg.add_cost(r)?);
            }
            actions.push(step);
            indicators.push(ind);
            probs.push(step_probs);
            discount *= gamma;
        }
        Ok(Self {
            horizon,
            gamma,
            payoffs,
            actions,
            indicators,
            costs,
            probs,
        })
    }

    /// All action nodes in ancestral order.
    pub fn action_ids(&self) -> Vec<StochId> {
        self.actions.iter().flatten().copied().collect()
    }

    /// Ancestral sampling plan covering only this rollout's actions.
    pub fn draw_plan(&self) -> Vec<(StochId, NodeId)> {
        self.actions
            .iter()
            .zip(&self.probs)
            .flat_map(|(a, p)| [(a[0], p[0]), (a[1], p[1])])
            .collect()
    }

    /// Draws `n` rollouts of this graph.
    pub fn sample(&self, scg: &Scg, binding: &Binding, n: usize, seed: u64) -> Result<SampleBatch> {
        sample_batch_with_plan(scg, &self.draw_plan(), binding, n, seed)
    }

    /// Outcome sequence of one sampled rollout.
    pub fn outcomes(&self, record: &SampleRecord) -> Result<Vec<usize>> {
        self.actions
            .iter()
            .map(|[a, b]| {
                let x = record.get(*a).ok_or(Error::MissingSample(*a))?;
                let y = record.get(*b).ok_or(Error::MissingSample(*b))?;
                Ok(outcome_of(x == 1.0, y == 1.0))
            })
            .collect()
    }

    /// Baseline expressions for every action node in agent `agent`'s
    /// objective: `γ^t · V(state_t)`, where the state is read from the
    /// previous step's indicators and so is never influenced by the action
    /// it serves.
    pub fn baselines(&self, scg: &mut Scg, agent: usize, table: &BaselineTable) -> BTreeMap<StochId, NodeId> {
        let mut out = BTreeMap::new();
        if table.mode == BaselineMode::None {
            return out;
        }
        let mut discount = 1.0;
        for t in 0..self.horizon {
            let arena = scg.arena_mut();
            let b = if t == 0 || table.mode == BaselineMode::Constant {
                arena.constant(discount * table.values[0])
            } else {
                let weights: Vec<f64> = (0..N_OUTCOMES)
                    .map(|o| discount * table.values[state_after(agent, o)])
                    .collect();
                arena.dot_const(&weights, &self.indicators[t - 1])
            };
            for &w in &self.actions[t] {
                out.insert(w, b);
            }
            discount *= self.gamma;
        }
        out
    }

    /// MagicBox objective of one agent, with the given baseline table.
    pub fn objective(&self, scg: &mut Scg, agent: usize, table: Option<&BaselineTable>) -> Result<EstimatorObjective> {
        let baselines = match table {
            Some(t) => self.baselines(scg, agent, t),
            None => BTreeMap::new(),
        };
        dice_objective_over(scg, &self.costs[agent], &baselines)
    }

    /// Discounted return of each agent for one rollout.
    pub fn returns(&self, record: &SampleRecord) -> Result<[f64; 2]> {
        let outcomes = self.outcomes(record)?;
        let mut out = [0.0; 2];
        for (agent, v) in out.iter_mut().enumerate() {
            *v = cost_to_go(&outcomes, self.payoffs.agent(agent), self.gamma)[0];
        }
        Ok(out)
    }
}

/// `G_t = Σ_{t'≥t} γ^{t'−t} r_{t'}` for every step.
pub fn cost_to_go(outcomes: &[usize], rewards: &[f64; 4], gamma: f64) -> Vec<f64> {
    let mut g = vec![0.0; outcomes.len()];
    let mut acc = 0.0;
    for t in (0..outcomes.len()).rev() {
        acc = rewards[outcomes[t]] + gamma * acc;
        g[t] = acc;
    }
    g
}

/// Per-state value table used as a baseline, trained by an exponential
/// moving average toward observed discounted cost-to-go.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineTable {
    pub mode: BaselineMode,
    pub decay: f64,
    pub values: [f64; 5],
    seen: [bool; 5],
}

impl BaselineTable {
    pub fn new(mode: BaselineMode, decay: f64) -> Self {
        Self {
            mode,
            decay,
            values: [0.0; 5],
            seen: [false; 5],
        }
    }

    /// Folds one batch of rollouts into the table for `agent`. The first
    /// observation of a state sets its value directly.
    pub fn update(&mut self, ipd: &IpdScg, agent: usize, batch: &SampleBatch) -> Result<()> {
        if self.mode == BaselineMode::None || batch.is_empty() {
            return Ok(());
        }
        let mut sums = [0.0; 5];
        let mut counts = [0usize; 5];
        for rec in &batch.records {
            let outcomes = ipd.outcomes(rec)?;
            let g = cost_to_go(&outcomes, ipd.payoffs.agent(agent), ipd.gamma);
            for t in 0..outcomes.len() {
                let s = match (self.mode, t) {
                    (BaselineMode::Constant, _) | (_, 0) => 0,
                    _ => state_after(agent, outcomes[t - 1]),
                };
                sums[s] += g[t];
                counts[s] += 1;
            }
        }
        for s in 0..N_STATES {
            if counts[s] == 0 {
                continue;
            }
            let mean = sums[s] / counts[s] as f64;
            if self.seen[s] {
                self.values[s] = self.decay * self.values[s] + (1.0 - self.decay) * mean;
            } else {
                self.values[s] = mean;
                self.seen[s] = true;
            }
        }
        if self.mode == BaselineMode::Constant {
            self.values = [self.values[0]; 5];
        }
        Ok(())
    }

    /// Runs `rounds` EMA updates on fresh batches under fixed policies.
    pub fn warm_up(
        &mut self,
        scg: &Scg,
        ipd: &IpdScg,
        agent: usize,
        binding: &Binding,
        batch: usize,
        rounds: usize,
        seed: u64,
    ) -> Result<()> {
        for r in 0..rounds {
            let b = ipd.sample(scg, binding, batch, mix_seed(seed, r as u64, 0xba5e))?;
            self.update(ipd, agent, &b)?;
        }
        Ok(())
    }
}

/// SplitMix64-style mixing of a seed with two stream indices.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Closed-form value

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

/// Initial outcome distribution and outcome transition matrix.
/// `p[o][o']` is the probability of `o'` following `o`.
pub fn transition(theta1: &[f64; 5], theta2: &[f64; 5]) -> ([f64; 4], [[f64; 4]; 4]) {
    let dist = |p1: f64, p2: f64| [p1 * p2, p1 * (1.0 - p2), (1.0 - p1) * p2, (1.0 - p1) * (1.0 - p2)];
    let p0 = dist(sigmoid(theta1[0]), sigmoid(theta2[0]));
    let mut p = [[0.0; 4]; 4];
    for (o, row) in p.iter_mut().enumerate() {
        *row = dist(
            sigmoid(theta1[state_after(0, o)]),
            sigmoid(theta2[state_after(1, o)]),
        );
    }
    (p0, p)
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> [f64; 4] {
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        assert!(a[pivot][col].abs() > 1e-300, "singular system");
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Expected discounted returns `(V1, V2)` of both agents.
pub fn exact_value(theta1: &[f64; 5], theta2: &[f64; 5], gamma: f64, horizon: Horizon, payoffs: &Payoffs) -> [f64; 2] {
    let (p0, p) = transition(theta1, theta2);
    // occupancy[o] = Σ_t γ^t P(outcome_t = o)
    let occupancy = match horizon {
        Horizon::Finite(t_max) => {
            let mut occ = [0.0; 4];
            let mut d = p0;
            let mut discount = 1.0;
            for _ in 0..t_max {
                for o in 0..4 {
                    occ[o] += discount * d[o];
                }
                let mut next = [0.0; 4];
                for (o, row) in p.iter().enumerate() {
                    for (o2, v) in row.iter().enumerate() {
                        next[o2] += d[o] * v;
                    }
                }
                d = next;
                discount *= gamma;
            }
            occ
        }
        Horizon::Infinite => {
            // (I − γPᵀ) x = p0
            let mut a = [[0.0; 4]; 4];
            for (i, row) in a.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if i == j { 1.0 } else { 0.0 } - gamma * p[j][i];
                }
            }
            solve4(a, p0)
        }
    };
    let value = |r: &[f64; 4]| (0..4).map(|o| occupancy[o] * r[o]).sum::<f64>();
    [value(&payoffs.r1), value(&payoffs.r2)]
}

/// Discounted return rescaled to an average per-step reward.
pub fn per_step(value: f64, gamma: f64, horizon: Horizon) -> f64 {
    match horizon {
        Horizon::Finite(t) => value * (1.0 - gamma) / (1.0 - gamma.powi(t as i32)),
        Horizon::Infinite => value * (1.0 - gamma),
    }
}

fn split(x: &[f64]) -> ([f64; 5], [f64; 5]) {
    let mut a = [0.0; 5];
    let mut b = [0.0; 5];
    a.copy_from_slice(&x[..5]);
    b.copy_from_slice(&x[5..10]);
    (a, b)
}

/// Gradient (10) and row-major Hessian (10×10) of one agent's exact value
/// with respect to `θ1 ⊕ θ2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactDerivatives {
    pub grad: Vec<f64>,
    pub hessian: Vec<f64>,
}

/// Finite-difference derivatives of [`exact_value`] for both agents.
pub fn exact_grad_hessian(x: &[f64; 10], gamma: f64, horizon: Horizon, payoffs: &Payoffs) -> [ExactDerivatives; 2] {
    [0, 1].map(|agent| {
        let f = |v: &[f64]| {
            let (a, b) = split(v);
            exact_value(&a, &b, gamma, horizon, payoffs)[agent]
        };
        ExactDerivatives {
            grad: gradient_fd(f, x, DEFAULT_H1),
            hessian: hessian_fd(f, x, DEFAULT_H2),
        }
    })
}
