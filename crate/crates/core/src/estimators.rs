//! Objective constructors and Monte-Carlo estimation.
//!
//! Every constructor returns an [`EstimatorObjective`] whose root is an
//! ordinary graph node; derivatives of any order come from
//! [`GraphArena::derivative_tensor`]. Only the MagicBox objectives give
//! unbiased estimators at every order. The surrogate loss is correct at
//! first order only, and the naive score-function objective is unbiased but
//! ignores causality.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Binding, GraphArena, NodeId, ParamId, SampleBatch, SampleRecord, StochId, Tape};
use crate::scg::{CostId, Scg};
use crate::stats::{EstimateStats, Moments};

/// Trajectories per parallel work unit. Reductions merge chunk moments in
/// index order, so results do not depend on the thread count.
pub const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Dice,
    DiceBaseline,
    SurrogateLoss,
    NaiveSf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EstimatorObjective {
    pub root: NodeId,
    pub kind: EstimatorKind,
}

/// `τ = Σ_{w∈W} log p(w)`, summed in the given order.
fn log_prob_sum(scg: &mut Scg, w: &[StochId]) -> Result<NodeId> {
    let lps = w
        .iter()
        .map(|&s| scg.stochastic(s).map(|n| n.log_prob))
        .collect::<Result<Vec<_>>>()?;
    Ok(scg.arena_mut().sum(lps))
}

/// `☐(W) = exp(τ − ⊥(τ))`; the empty set gives the constant 1.
pub fn magic_box(scg: &mut Scg, w: &[StochId]) -> Result<NodeId> {
    if w.is_empty() {
        return Ok(scg.arena_mut().one());
    }
    let tau = log_prob_sum(scg, w)?;
    let arena = scg.arena_mut();
    let frozen = arena.stop_grad(tau);
    let diff = arena.sub(tau, frozen);
    Ok(arena.exp(diff))
}

fn all_costs(scg: &Scg) -> Result<Vec<CostId>> {
    if scg.costs().is_empty() {
        return Err(Error::InvalidArgument("graph has no cost nodes".into()));
    }
    Ok(scg.costs().iter().map(|c| c.id).collect())
}

/// `Σ_c ☐(W_c)·c` over all cost nodes.
pub fn dice_objective(scg: &mut Scg) -> Result<EstimatorObjective> {
    let costs = all_costs(scg)?;
    dice_objective_over(scg, &costs, &BTreeMap::new())
}

/// `Σ_c ☐(W_c)·c + Σ_w (1 − ☐({w}))·b_w`.
pub fn dice_objective_with_baseline(
    scg: &mut Scg,
    baselines: &BTreeMap<StochId, NodeId>,
) -> Result<EstimatorObjective> {
    let costs = all_costs(scg)?;
    dice_objective_over(scg, &costs, baselines)
}

/// Checks that `b` reads neither `w` nor anything `w` influences.
pub fn validate_baseline(scg: &Scg, w: StochId, b: NodeId) -> Result<()> {
    scg.stochastic(w)?;
    scg.arena().check_node(b)?;
    if scg.influencing_stochastic(b).contains(&w) {
        return Err(Error::InvalidBaseline {
            stoch: w,
            reason: "expression depends on the node's own sample or a sample it influences".into(),
        });
    }
    Ok(())
}

/// MagicBox objective restricted to a subset of the cost nodes, with
/// optional baselines. This is how per-agent objectives are formed.
pub fn dice_objective_over(
    scg: &mut Scg,
    costs: &[CostId],
    baselines: &BTreeMap<StochId, NodeId>,
) -> Result<EstimatorObjective> {
    let mut terms = Vec::with_capacity(costs.len() + baselines.len());
    for &c in costs {
        let expr = scg.cost(c)?.expr;
        let w = scg.stochastic_ancestors(c)?;
        let mb = magic_box(scg, &w)?;
        terms.push(scg.arena_mut().mul(mb, expr));
    }
    for (&w, &b) in baselines {
        validate_baseline(scg, w, b)?;
        let mb = magic_box(scg, &[w])?;
        let arena = scg.arena_mut();
        let one = arena.one();
        let gate = arena.sub(one, mb);
        terms.push(arena.mul(gate, b));
    }
    let root = scg.arena_mut().sum(terms);
    let kind = if baselines.is_empty() {
        EstimatorKind::Dice
    } else {
        EstimatorKind::DiceBaseline
    };
    Ok(EstimatorObjective { root, kind })
}

/// `Σ_w log p(w)·⊥(Σ_{c downstream of w} c) + Σ_c c`.
pub fn surrogate_loss(scg: &mut Scg) -> Result<EstimatorObjective> {
    let costs = all_costs(scg)?;
    surrogate_loss_over(scg, &costs)
}

/// Surrogate loss restricted to a subset of the cost nodes.
pub fn surrogate_loss_over(scg: &mut Scg, costs: &[CostId]) -> Result<EstimatorObjective> {
    let exprs = costs
        .iter()
        .map(|&c| scg.cost(c).map(|n| n.expr))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<StochId> = scg.stochastic_nodes().iter().map(|s| s.id).collect();
    let mut terms = Vec::new();
    for w in ids {
        let downstream: Vec<NodeId> = costs
            .iter()
            .zip(&exprs)
            .filter(|(c, _)| scg.influences(w, **c).unwrap_or(false))
            .map(|(_, &e)| e)
            .collect();
        if downstream.is_empty() {
            continue;
        }
        let lp = scg.stochastic(w)?.log_prob;
        let arena = scg.arena_mut();
        let q = arena.sum(downstream);
        let q_hat = arena.stop_grad(q);
        terms.push(arena.mul(lp, q_hat));
    }
    let arena = scg.arena_mut();
    let direct = arena.sum(exprs);
    let stoch = arena.sum(terms);
    let root = arena.add(stoch, direct);
    Ok(EstimatorObjective {
        root,
        kind: EstimatorKind::SurrogateLoss,
    })
}

/// `SL(r) = Σ_{w ≺ r} log p(w)·⊥(r) + r`: the surrogate loss of a graph with
/// the single cost `r`.
fn surrogate_of_node(scg: &mut Scg, r: NodeId) -> Result<NodeId> {
    let ws = scg.influencing_stochastic(r);
    let lp = log_prob_sum(scg, &ws)?;
    let arena = scg.arena_mut();
    let r_hat = arena.stop_grad(r);
    let t = arena.mul(lp, r_hat);
    Ok(arena.add(t, r))
}

/// Higher-order estimates by repeated application of the surrogate loss:
/// each sampled derivative is treated as a new cost node, a surrogate loss is
/// formed around it, and that surrogate is differentiated once. The result
/// is flattened like [`GraphArena::derivative_tensor`].
///
/// The first level is the gradient of `sl.root` itself. From the second level
/// on, the sampled costs inside the previous estimate have lost their
/// dependence on the parameters, which is the source of the bias.
pub fn surrogate_derivatives(
    scg: &mut Scg,
    sl: &EstimatorObjective,
    params: &[ParamId],
    order: usize,
) -> Result<Vec<NodeId>> {
    if order == 0 {
        return Ok(vec![sl.root]);
    }
    let mut level = scg.arena_mut().gradient_over(sl.root, params)?;
    for _ in 1..order {
        let mut next = Vec::with_capacity(level.len() * params.len());
        for r in level {
            let s = surrogate_of_node(scg, r)?;
            next.extend(scg.arena_mut().gradient_over(s, params)?);
        }
        level = next;
    }
    Ok(level)
}

/// `☐(all Θ-dependent stochastic nodes)·Σ_c c`.
pub fn naive_sf_objective(scg: &mut Scg) -> Result<EstimatorObjective> {
    let costs = all_costs(scg)?;
    naive_sf_over(scg, &costs)
}

pub fn naive_sf_over(scg: &mut Scg, costs: &[CostId]) -> Result<EstimatorObjective> {
    let exprs = costs
        .iter()
        .map(|&c| scg.cost(c).map(|n| n.expr))
        .collect::<Result<Vec<_>>>()?;
    let w = scg.theta_dependent();
    let mb = magic_box(scg, &w)?;
    let arena = scg.arena_mut();
    let total = arena.sum(exprs);
    let root = arena.mul(mb, total);
    Ok(EstimatorObjective {
        root,
        kind: EstimatorKind::NaiveSf,
    })
}

/// Hessian-vector product nodes `∇(vᵀ∇L)` for a single parameter.
pub fn hvp(scg: &mut Scg, obj: &EstimatorObjective, param: ParamId, v: &[f64]) -> Result<Vec<NodeId>> {
    hvp_over(scg.arena_mut(), obj.root, &[param], v)
}

/// Hessian-vector product over the concatenation of several parameters.
/// The full Hessian is never built.
pub fn hvp_over(arena: &mut GraphArena, root: NodeId, params: &[ParamId], v: &[f64]) -> Result<Vec<NodeId>> {
    let grad = arena.gradient_over(root, params)?;
    if grad.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: grad.len(),
            got: v.len(),
        });
    }
    let s = arena.dot_const(v, &grad);
    arena.gradient_over(s, params)
}

/// Per-trajectory rng stream.
pub fn trajectory_rng(master_seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(master_seed ^ index as u64)
}

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(CHUNK))
        .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(n)))
        .collect()
}

fn merge_columns(chunks: Vec<Vec<Moments>>, n_roots: usize) -> Vec<EstimateStats> {
    (0..n_roots)
        .map(|r| {
            let col: Vec<Moments> = chunks.iter().map(|c| c[r]).collect();
            Moments::merge_all(&col).stats()
        })
        .collect()
}

fn chunk_moments(values: &[Vec<f64>]) -> Vec<Moments> {
    values.iter().map(|col| Moments::of(col)).collect()
}

/// Draws `n` ancestral trajectories. Trajectory `i` uses the rng stream
/// seeded with `master_seed ^ i`.
pub fn sample_batch(scg: &Scg, binding: &Binding, n: usize, master_seed: u64) -> Result<SampleBatch> {
    sample_batch_with_plan(scg, &scg.draw_plan(), binding, n, master_seed)
}

/// Like [`sample_batch`], drawing only the stochastic nodes in `plan`
/// (`(node, probability)` pairs in ancestral order).
pub fn sample_batch_with_plan(
    scg: &Scg,
    plan: &[(StochId, NodeId)],
    binding: &Binding,
    n: usize,
    master_seed: u64,
) -> Result<SampleBatch> {
    let tape = Tape::compile_with_draws(scg.arena(), &[], plan)?;
    let prepared = tape.prepare(binding)?;
    let n_stoch = scg.arena().stoch_count();
    let chunks = chunk_ranges(n)
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut worker = prepared.worker();
            (lo..hi)
                .map(|i| {
                    let mut rng = trajectory_rng(master_seed, i);
                    let mut rec = SampleRecord::with_capacity(n_stoch);
                    worker
                        .run_draw(&mut rng, &mut rec)
                        .map_err(|e| trajectory_error(i, e))?;
                    Ok(rec)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleBatch::uniform(chunks.into_iter().flatten().collect()))
}

fn trajectory_error(index: usize, e: Error) -> Error {
    Error::Trajectory {
        index,
        source: Box::new(e),
    }
}

/// Draws `n` trajectories and returns mean and standard error of every root.
/// Deterministic for a fixed seed, whatever the thread count.
pub fn estimate_nodes(
    scg: &Scg,
    roots: &[NodeId],
    binding: &Binding,
    n: usize,
    master_seed: u64,
) -> Result<Vec<EstimateStats>> {
    estimate_nodes_with_plan(scg, &scg.draw_plan(), roots, binding, n, master_seed)
}

/// Like [`estimate_nodes`], drawing only the stochastic nodes in `plan`.
pub fn estimate_nodes_with_plan(
    scg: &Scg,
    plan: &[(StochId, NodeId)],
    roots: &[NodeId],
    binding: &Binding,
    n: usize,
    master_seed: u64,
) -> Result<Vec<EstimateStats>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let tape = Tape::compile_with_draws(scg.arena(), roots, plan)?;
    let prepared = tape.prepare(binding)?;
    let n_stoch = scg.arena().stoch_count();
    let chunks = chunk_ranges(n)
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut worker = prepared.worker();
            let mut cols = vec![Vec::with_capacity(hi - lo); roots.len()];
            for i in lo..hi {
                let mut rng = trajectory_rng(master_seed, i);
                let mut rec = SampleRecord::with_capacity(n_stoch);
                worker
                    .run_draw(&mut rng, &mut rec)
                    .map_err(|e| trajectory_error(i, e))?;
                for (r, col) in cols.iter_mut().enumerate() {
                    col.push(worker.root(r));
                }
            }
            Ok(chunk_moments(&cols))
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_columns(chunks, roots.len()))
}

/// Monte-Carlo estimate of every `order`-th derivative of `obj` with respect
/// to the concatenated `params`, flattened row-major.
pub fn estimate(
    scg: &mut Scg,
    obj: &EstimatorObjective,
    params: &[ParamId],
    order: usize,
    binding: &Binding,
    n: usize,
    master_seed: u64,
) -> Result<Vec<EstimateStats>> {
    let roots = scg.arena_mut().derivative_tensor(obj.root, params, order)?;
    estimate_nodes(scg, &roots, binding, n, master_seed)
}

/// Mean and standard error of every root over the records of `batch`,
/// treating records as equally weighted. Uses the same chunking as
/// [`estimate_nodes`], so a batch drawn with [`sample_batch`] gives
/// bit-identical results to estimating directly with the same seed.
pub fn estimate_on_batch(
    arena: &GraphArena,
    roots: &[NodeId],
    binding: &Binding,
    batch: &SampleBatch,
) -> Result<Vec<EstimateStats>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let tape = Tape::compile(arena, roots)?;
    let prepared = tape.prepare(binding)?;
    let chunks = chunk_ranges(batch.len())
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut worker = prepared.worker();
            let mut cols = vec![Vec::with_capacity(hi - lo); roots.len()];
            for i in lo..hi {
                worker
                    .run_record(&batch.records[i])
                    .map_err(|e| trajectory_error(i, e))?;
                for (r, col) in cols.iter_mut().enumerate() {
                    col.push(worker.root(r));
                }
            }
            Ok(chunk_moments(&cols))
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_columns(chunks, roots.len()))
}

/// Values of every root on every record: `out[i][r]` for record `i`.
pub fn evaluate_on_batch(
    arena: &GraphArena,
    roots: &[NodeId],
    binding: &Binding,
    batch: &SampleBatch,
) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::compile(arena, roots)?;
    let prepared = tape.prepare(binding)?;
    let chunks = chunk_ranges(batch.len())
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut worker = prepared.worker();
            (lo..hi)
                .map(|i| {
                    worker
                        .run_record(&batch.records[i])
                        .map_err(|e| trajectory_error(i, e))?;
                    let mut row = Vec::with_capacity(roots.len());
                    worker.roots_into(&mut row);
                    Ok(row)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::bernoulli;
    use crate::graph::evaluate;

    /// x ~ Ber(θ), f = x(1−θ) + (1−x)(1+θ)
    fn toy() -> (Scg, ParamId, StochId) {
        let mut arena = GraphArena::new();
        let theta = arena.register_param("theta", 1);
        let mut scg = Scg::new(arena, vec![theta]);
        let t = scg.arena_mut().param(theta, 0);
        let x = bernoulli(&mut scg, t).unwrap();
        let xl = scg.stochastic(x).unwrap().leaf;
        let f = {
            let a = scg.arena_mut();
            let one = a.one();
            let l = a.sub(one, t);
            let r = a.add(one, t);
            let nx = a.sub(one, xl);
            let p = a.mul(xl, l);
            let q = a.mul(nx, r);
            a.add(p, q)
        };
        scg.add_cost(f).unwrap();
        (scg, theta, x)
    }

    fn rec(x: StochId, v: f64) -> SampleRecord {
        let mut r = SampleRecord::new();
        r.set(x, v);
        r
    }

    /// Exact expectation for the single-node toy, written out by hand.
    fn expect(scg: &Scg, root: NodeId, x: StochId, b: &Binding, theta: f64) -> f64 {
        let v1 = evaluate(scg.arena(), root, b, &rec(x, 1.0)).unwrap();
        let v0 = evaluate(scg.arena(), root, b, &rec(x, 0.0)).unwrap();
        theta * v1 + (1.0 - theta) * v0
    }

    #[test]
    fn magic_box_values() {
        let (mut scg, theta, x) = toy();
        let mb = magic_box(&mut scg, &[x]).unwrap();
        let d = scg.arena_mut().differentiate(mb, theta, 0).unwrap();
        let b = Binding::new().with(theta, vec![0.3]);
        assert_eq!(evaluate(scg.arena(), mb, &b, &rec(x, 1.0)).unwrap(), 1.0);
        let g = evaluate(scg.arena(), d, &b, &rec(x, 1.0)).unwrap();
        assert!((g - 1.0 / 0.3).abs() < 1e-12);
        let empty = magic_box(&mut scg, &[]).unwrap();
        assert_eq!(scg.arena().constant_value(empty), Some(1.0));
    }

    #[test]
    fn toy_dice_and_sl_by_hand() {
        let (mut scg, theta, x) = toy();
        let dice = dice_objective(&mut scg).unwrap();
        let sl = surrogate_loss(&mut scg).unwrap();
        let dd = scg.arena_mut().derivative_tensor(dice.root, &[theta], 3).unwrap();
        let d1 = scg.arena_mut().derivative_tensor(dice.root, &[theta], 1).unwrap();
        let d2 = scg.arena_mut().derivative_tensor(dice.root, &[theta], 2).unwrap();
        let s2 = surrogate_derivatives(&mut scg, &sl, &[theta], 2).unwrap();
        let s1 = surrogate_derivatives(&mut scg, &sl, &[theta], 1).unwrap();
        for t in [0.2, 0.4, 0.5, 0.8] {
            let b = Binding::new().with(theta, vec![t]);
            assert!((expect(&scg, d1[0], x, &b, t) - (1.0 - 4.0 * t)).abs() < 1e-12);
            assert!((expect(&scg, d2[0], x, &b, t) + 4.0).abs() < 1e-12);
            assert!(expect(&scg, dd[0], x, &b, t).abs() < 1e-12);
            assert!((expect(&scg, s1[0], x, &b, t) - (1.0 - 4.0 * t)).abs() < 1e-12);
            assert!((expect(&scg, s2[0], x, &b, t) + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_keeps_forward_value() {
        let (mut scg, theta, x) = toy();
        let c = scg.arena_mut().constant(0.9);
        let plain = dice_objective(&mut scg).unwrap();
        let with = dice_objective_with_baseline(&mut scg, &BTreeMap::from([(x, c)])).unwrap();
        assert_eq!(with.kind, EstimatorKind::DiceBaseline);
        let b = Binding::new().with(theta, vec![0.35]);
        for v in [0.0, 1.0] {
            let r = rec(x, v);
            assert_eq!(
                evaluate(scg.arena(), plain.root, &b, &r).unwrap(),
                evaluate(scg.arena(), with.root, &b, &r).unwrap()
            );
        }
    }

    #[test]
    fn baseline_on_own_sample_is_rejected() {
        let (mut scg, _, x) = toy();
        let leaf = scg.stochastic(x).unwrap().leaf;
        let err = dice_objective_with_baseline(&mut scg, &BTreeMap::from([(x, leaf)]));
        assert!(matches!(err, Err(Error::InvalidBaseline { .. })));
    }

    #[test]
    fn hvp_dimension_checked() {
        let (mut scg, theta, _) = toy();
        let dice = dice_objective(&mut scg).unwrap();
        assert!(matches!(
            hvp(&mut scg, &dice, theta, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        let zero = hvp(&mut scg, &dice, theta, &[0.0]).unwrap();
        assert_eq!(scg.arena().constant_value(zero[0]), Some(0.0));
    }

    #[test]
    fn estimate_is_reproducible_and_batch_consistent() {
        let (mut scg, theta, _) = toy();
        let dice = dice_objective(&mut scg).unwrap();
        let b = Binding::new().with(theta, vec![0.5]);
        let a = estimate(&mut scg, &dice, &[theta], 1, &b, 1000, 9).unwrap();
        let again = estimate(&mut scg, &dice, &[theta], 1, &b, 1000, 9).unwrap();
        assert_eq!(a, again);
        let batch = sample_batch(&scg, &b, 1000, 9).unwrap();
        let g = scg.arena_mut().gradient_vector(dice.root, theta).unwrap();
        let on_batch = estimate_on_batch(scg.arena(), &g, &b, &batch).unwrap();
        assert_eq!(a, on_batch);
        let rows = evaluate_on_batch(scg.arena(), &g, &b, &batch).unwrap();
        assert_eq!(rows.len(), 1000);
    }

    #[test]
    fn estimate_rejects_zero_samples() {
        let (mut scg, theta, _) = toy();
        let dice = dice_objective(&mut scg).unwrap();
        let b = Binding::new().with(theta, vec![0.5]);
        assert!(estimate(&mut scg, &dice, &[theta], 0, &b, 0, 1).is_err());
    }

    #[test]
    fn trajectory_errors_carry_index() {
        // log(x) fails on the first trajectory that draws x = 0
        let (mut scg, theta, x) = toy();
        let leaf = scg.stochastic(x).unwrap().leaf;
        let bad = scg.arena_mut().log(leaf);
        let b = Binding::new().with(theta, vec![0.5]);
        let batch = sample_batch(&scg, &b, 2000, 3).unwrap();
        let first = batch.records.iter().position(|r| r.get(x) == Some(0.0)).unwrap();
        match estimate_nodes(&scg, &[bad], &b, 2000, 3) {
            Err(Error::Trajectory { index, .. }) => assert_eq!(index, first),
            other => panic!("unexpected {other:?}"),
        }
        // parameter-only failures surface before any trajectory is drawn
        let dice = dice_objective(&mut scg).unwrap();
        let b = Binding::new().with(theta, vec![1.0]);
        assert!(matches!(
            estimate(&mut scg, &dice, &[theta], 1, &b, 10, 3),
            Err(Error::Domain { .. })
        ));
    }
}
