//! Forward evaluation.
//!
//! [`Tape`] is the workhorse: it flattens the nodes reachable from a set of
//! roots into a slot array in topological order. Slots that do not depend on
//! any sample leaf are computed once per binding ([`Tape::prepare`]); only
//! the sample-dependent slots are recomputed per record by a [`Worker`].
//! Memo storage is owned by the worker, so one prepared tape can be shared
//! across threads.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::{GraphArena, NodeId, NodeKind, ParamId, StochId};
use crate::error::{Error, Result};
use crate::stats::weighted_sum;

/// Parameter values, one vector per registered parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Binding {
    values: HashMap<ParamId, Vec<f64>>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, param: ParamId, values: Vec<f64>) -> Self {
        self.values.insert(param, values);
        self
    }

    pub fn set(&mut self, param: ParamId, values: Vec<f64>) {
        self.values.insert(param, values);
    }

    pub fn get(&self, param: ParamId) -> Option<&[f64]> {
        self.values.get(&param).map(Vec::as_slice)
    }

    /// Checks that every registered parameter is bound with the right length.
    pub fn validate(&self, arena: &GraphArena) -> Result<()> {
        for p in arena.params() {
            let expected = arena.param_dim(p)?;
            let got = self.values.get(&p).ok_or(Error::MissingParam(p))?.len();
            if got != expected {
                return Err(Error::BindingLength {
                    param: p,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }
}

/// Realized values of stochastic nodes for one trajectory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleRecord {
    values: Vec<Option<f64>>,
}

impl SampleRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            values: vec![None; n],
        }
    }

    pub fn set(&mut self, stoch: StochId, value: f64) {
        let i = stoch.index();
        if i >= self.values.len() {
            self.values.resize(i + 1, None);
        }
        self.values[i] = Some(value);
    }

    pub fn get(&self, stoch: StochId) -> Option<f64> {
        self.values.get(stoch.index()).copied().flatten()
    }

    pub fn iter(&self) -> impl Iterator<Item = (StochId, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (StochId(i as u32), v)))
    }
}

/// Records plus their weights (1/n for Monte Carlo, probabilities for
/// exhaustive enumeration).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleBatch {
    pub records: Vec<SampleRecord>,
    pub weights: Vec<f64>,
}

impl SampleBatch {
    pub fn uniform(records: Vec<SampleRecord>) -> Self {
        let w = 1.0 / records.len().max(1) as f64;
        let weights = vec![w; records.len()];
        Self { records, weights }
    }

    pub fn weighted(records: Vec<SampleRecord>, weights: Vec<f64>) -> Result<Self> {
        if records.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: records.len(),
                got: weights.len(),
            });
        }
        Ok(Self { records, weights })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Const(f64),
    Param(ParamId, usize),
    Leaf(StochId),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Exp(u32),
    Log(u32),
    Pow(u32, f64),
    Sigmoid(u32),
    Copy(u32),
    Mean { group: u32, body: u32 },
}

#[derive(Clone, Debug)]
struct MeanGroup {
    batch: Arc<SampleBatch>,
    tape: Tape,
}

/// A compiled evaluation plan for a set of roots.
#[derive(Clone, Debug)]
pub struct Tape {
    ops: Vec<Op>,
    ids: Vec<NodeId>,
    roots: Vec<u32>,
    varying: Vec<u32>,
    invariant: Vec<u32>,
    /// Leaf slot -> slot holding its Bernoulli probability, for ancestral draws.
    draw_prob: HashMap<u32, u32>,
    groups: Vec<MeanGroup>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn powf(x: f64, k: f64) -> f64 {
    if k.fract() == 0.0 && k.abs() < i32::MAX as f64 {
        x.powi(k as i32)
    } else {
        x.powf(k)
    }
}

impl Tape {
    /// Compiles the nodes reachable from `roots`.
    pub fn compile(arena: &GraphArena, roots: &[NodeId]) -> Result<Self> {
        Self::compile_with_draws(arena, roots, &[])
    }

    /// Like [`Tape::compile`], and additionally prepares ancestral sampling:
    /// each `(stoch, prob)` pair draws the leaf of `stoch` from a Bernoulli
    /// with probability given by node `prob`. Every such leaf is included in
    /// the tape even if no root reaches it.
    pub fn compile_with_draws(arena: &GraphArena, roots: &[NodeId], draws: &[(StochId, NodeId)]) -> Result<Self> {
        for r in roots {
            arena.check_node(*r)?;
        }
        let mut all_roots: Vec<NodeId> = roots.to_vec();
        let mut leaf_nodes = Vec::with_capacity(draws.len());
        for &(s, p) in draws {
            arena.check_node(p)?;
            let leaf = arena
                .interned
                .get(&super::KeyBox(super::Key(NodeKind::SampleLeaf(s))))
                .map(|&i| arena.node_id(i as usize))
                .ok_or(Error::UnknownStochastic(s))?;
            all_roots.push(p);
            all_roots.push(leaf);
            leaf_nodes.push((leaf, p));
        }
        let order = arena.reachable(&all_roots, false);
        let slot_of: HashMap<usize, u32> = order
            .iter()
            .enumerate()
            .map(|(slot, &i)| (i, slot as u32))
            .collect();
        let s = |id: NodeId| slot_of[&id.index()];

        let mut group_index: HashMap<u32, usize> = HashMap::new();
        let mut group_bodies: Vec<(super::BatchId, Vec<NodeId>)> = Vec::new();
        let mut ops = Vec::with_capacity(order.len());
        let mut ids = Vec::with_capacity(order.len());
        for &i in &order {
            let kind = arena.kind_unchecked(i);
            ids.push(arena.node_id(i));
            let op = match kind {
                NodeKind::Constant(c) => Op::Const(c),
                NodeKind::Param { param, component } => Op::Param(param, component),
                NodeKind::SampleLeaf(st) => Op::Leaf(st),
                NodeKind::Add(a, b) => Op::Add(s(a), s(b)),
                NodeKind::Sub(a, b) => Op::Sub(s(a), s(b)),
                NodeKind::Mul(a, b) => Op::Mul(s(a), s(b)),
                NodeKind::Div(a, b) => Op::Div(s(a), s(b)),
                NodeKind::Neg(a) => Op::Neg(s(a)),
                NodeKind::Exp(a) => Op::Exp(s(a)),
                NodeKind::Log(a) => Op::Log(s(a)),
                NodeKind::Pow(a, k) => Op::Pow(s(a), k),
                NodeKind::Sigmoid(a) => Op::Sigmoid(s(a)),
                NodeKind::StopGrad(a) => Op::Copy(s(a)),
                NodeKind::BatchMean { body, batch } => {
                    let g = *group_index.entry(batch.0).or_insert_with(|| {
                        group_bodies.push((batch, Vec::new()));
                        group_bodies.len() - 1
                    });
                    let bodies = &mut group_bodies[g].1;
                    let pos = match bodies.iter().position(|b| *b == body) {
                        Some(p) => p,
                        None => {
                            bodies.push(body);
                            bodies.len() - 1
                        }
                    };
                    Op::Mean {
                        group: g as u32,
                        body: pos as u32,
                    }
                }
            };
            ops.push(op);
        }

        let mut groups = Vec::with_capacity(group_bodies.len());
        for (batch, bodies) in group_bodies {
            let batch = arena
                .batch(batch)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("unknown batch {}", batch.0)))?;
            groups.push(MeanGroup {
                batch,
                tape: Tape::compile(arena, &bodies)?,
            });
        }

        let mut is_varying = vec![false; ops.len()];
        for (slot, op) in ops.iter().enumerate() {
            is_varying[slot] = match *op {
                Op::Const(_) | Op::Param(..) | Op::Mean { .. } => false,
                Op::Leaf(_) => true,
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    is_varying[a as usize] || is_varying[b as usize]
                }
                Op::Neg(a) | Op::Exp(a) | Op::Log(a) | Op::Pow(a, _) | Op::Sigmoid(a) | Op::Copy(a) => {
                    is_varying[a as usize]
                }
            };
        }
        let (varying, invariant): (Vec<u32>, Vec<u32>) =
            (0..ops.len() as u32).partition(|&i| is_varying[i as usize]);

        let mut draw_prob = HashMap::new();
        for (leaf, p) in leaf_nodes {
            let (ls, ps) = (s(leaf), s(p));
            if ps >= ls {
                return Err(Error::InvalidArgument(format!(
                    "probability node {p:?} does not precede its sample leaf"
                )));
            }
            draw_prob.insert(ls, ps);
        }

        Ok(Self {
            ops,
            ids,
            roots: roots.iter().map(|r| s(*r)).collect(),
            varying,
            invariant,
            draw_prob,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn n_roots(&self) -> usize {
        self.roots.len()
    }

    /// Number of slots recomputed per record.
    pub fn varying_len(&self) -> usize {
        self.varying.len()
    }

    #[inline]
    fn apply(&self, slot: usize, vals: &[f64]) -> Result<f64> {
        let v = |i: u32| vals[i as usize];
        let domain = |what| Error::Domain {
            node: self.ids[slot],
            what,
        };
        Ok(match self.ops[slot] {
            Op::Add(a, b) => v(a) + v(b),
            Op::Sub(a, b) => v(a) - v(b),
            Op::Mul(a, b) => v(a) * v(b),
            Op::Div(a, b) => {
                let d = v(b);
                if d == 0.0 {
                    return Err(domain("division by zero"));
                }
                v(a) / d
            }
            Op::Neg(a) => -v(a),
            Op::Exp(a) => v(a).exp(),
            Op::Log(a) => {
                let x = v(a);
                if !(x > 0.0) {
                    return Err(domain("log of non-positive argument"));
                }
                x.ln()
            }
            Op::Pow(a, k) => powf(v(a), k),
            Op::Sigmoid(a) => sigmoid(v(a)),
            Op::Copy(a) => v(a),
            Op::Const(c) => c,
            Op::Param(..) | Op::Leaf(_) | Op::Mean { .. } => unreachable!("handled by caller"),
        })
    }

    /// Evaluates every sample-independent slot under `binding`, including
    /// batch means.
    pub fn prepare(&self, binding: &Binding) -> Result<Prepared<'_>> {
        let mut group_values = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let prepared = g.tape.prepare(binding)?;
            let mut worker = prepared.worker();
            let n_bodies = g.tape.roots.len();
            let mut per_body: Vec<Vec<f64>> = vec![Vec::with_capacity(g.batch.len()); n_bodies];
            for rec in &g.batch.records {
                worker.run_record(rec)?;
                for (b, col) in per_body.iter_mut().enumerate() {
                    col.push(worker.vals[g.tape.roots[b] as usize]);
                }
            }
            group_values.push(
                per_body
                    .iter()
                    .map(|col| weighted_sum(col, &g.batch.weights))
                    .collect::<Vec<f64>>(),
            );
        }

        let mut base = vec![0.0; self.ops.len()];
        for &slot in &self.invariant {
            let slot = slot as usize;
            base[slot] = match self.ops[slot] {
                Op::Param(p, k) => {
                    let vals = binding.get(p).ok_or(Error::MissingParam(p))?;
                    *vals.get(k).ok_or(Error::BindingLength {
                        param: p,
                        expected: k + 1,
                        got: vals.len(),
                    })?
                }
                Op::Mean { group, body } => group_values[group as usize][body as usize],
                _ => self.apply(slot, &base)?,
            };
        }
        Ok(Prepared { tape: self, base })
    }
}

/// A tape with its sample-independent slots filled in.
#[derive(Clone, Debug)]
pub struct Prepared<'t> {
    tape: &'t Tape,
    base: Vec<f64>,
}

impl<'t> Prepared<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// A worker owns its memo storage; create one per thread.
    pub fn worker(&self) -> Worker<'_, 't> {
        Worker {
            prepared: self,
            vals: self.base.clone(),
        }
    }
}

/// Per-thread evaluation state for one prepared tape.
#[derive(Clone, Debug)]
pub struct Worker<'p, 't> {
    prepared: &'p Prepared<'t>,
    vals: Vec<f64>,
}

impl Worker<'_, '_> {
    /// Evaluates all sample-dependent slots with leaves read from `record`.
    pub fn run_record(&mut self, record: &SampleRecord) -> Result<()> {
        let tape = self.prepared.tape;
        for &slot in &tape.varying {
            let slot = slot as usize;
            self.vals[slot] = match tape.ops[slot] {
                Op::Leaf(s) => record.get(s).ok_or(Error::MissingSample(s))?,
                _ => tape.apply(slot, &self.vals)?,
            };
        }
        Ok(())
    }

    /// Evaluates all sample-dependent slots, drawing each sampled leaf from
    /// its Bernoulli probability in topological (ancestral) order. Leaves
    /// without a draw rule are read from `record`; drawn values are written
    /// back into it.
    pub fn run_draw<R: Rng + ?Sized>(&mut self, rng: &mut R, record: &mut SampleRecord) -> Result<()> {
        let tape = self.prepared.tape;
        for &slot in &tape.varying {
            let s32 = slot;
            let slot = slot as usize;
            self.vals[slot] = match tape.ops[slot] {
                Op::Leaf(s) => match tape.draw_prob.get(&s32) {
                    Some(&p) => {
                        let x = draw_bernoulli(self.vals[p as usize], rng);
                        record.set(s, x);
                        x
                    }
                    None => record.get(s).ok_or(Error::MissingSample(s))?,
                },
                _ => tape.apply(slot, &self.vals)?,
            };
        }
        Ok(())
    }

    pub fn root(&self, i: usize) -> f64 {
        self.vals[self.prepared.tape.roots[i] as usize]
    }

    pub fn roots_into(&self, out: &mut Vec<f64>) {
        out.extend(self.prepared.tape.roots.iter().map(|&s| self.vals[s as usize]));
    }
}

/// Bernoulli draw: 1.0 with probability `p`, else 0.0. Consumes exactly one
/// uniform from `rng`.
pub(crate) fn draw_bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    if u < p {
        1.0
    } else {
        0.0
    }
}

/// Memoized forward evaluation of one root.
pub fn evaluate(arena: &GraphArena, root: NodeId, binding: &Binding, samples: &SampleRecord) -> Result<f64> {
    let tape = Tape::compile(arena, &[root])?;
    let prepared = tape.prepare(binding)?;
    let mut worker = prepared.worker();
    worker.run_record(samples)?;
    Ok(worker.root(0))
}

/// Plain recursive evaluation without memoization. Exponential on heavily
/// shared DAGs; exists as a reference for the memoized paths.
pub fn evaluate_unmemoized(arena: &GraphArena, root: NodeId, binding: &Binding, samples: &SampleRecord) -> Result<f64> {
    arena.check_node(root)?;
    let domain = |what| Error::Domain { node: root, what };
    let ev = |n: NodeId| evaluate_unmemoized(arena, n, binding, samples);
    Ok(match arena.kind_unchecked(root.index()) {
        NodeKind::Constant(c) => c,
        NodeKind::Param { param, component } => {
            let vals = binding.get(param).ok_or(Error::MissingParam(param))?;
            *vals.get(component).ok_or(Error::BindingLength {
                param,
                expected: component + 1,
                got: vals.len(),
            })?
        }
        NodeKind::SampleLeaf(s) => samples.get(s).ok_or(Error::MissingSample(s))?,
        NodeKind::Add(a, b) => ev(a)? + ev(b)?,
        NodeKind::Sub(a, b) => ev(a)? - ev(b)?,
        NodeKind::Mul(a, b) => ev(a)? * ev(b)?,
        NodeKind::Div(a, b) => {
            let (x, y) = (ev(a)?, ev(b)?);
            if y == 0.0 {
                return Err(domain("division by zero"));
            }
            x / y
        }
        NodeKind::Neg(a) => -ev(a)?,
        NodeKind::Exp(a) => ev(a)?.exp(),
        NodeKind::Log(a) => {
            let x = ev(a)?;
            if !(x > 0.0) {
                return Err(domain("log of non-positive argument"));
            }
            x.ln()
        }
        NodeKind::Pow(a, k) => powf(ev(a)?, k),
        NodeKind::Sigmoid(a) => sigmoid(ev(a)?),
        NodeKind::StopGrad(a) => ev(a)?,
        NodeKind::BatchMean { body, batch } => {
            let batch = arena
                .batch(batch)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown batch {}", batch.0)))?;
            let vals = batch
                .records
                .iter()
                .map(|r| evaluate_unmemoized(arena, body, binding, r))
                .collect::<Result<Vec<f64>>>()?;
            weighted_sum(&vals, &batch.weights)
        }
    })
}
