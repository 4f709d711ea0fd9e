//! Immutable scalar expression DAG with symbolic, repeatable differentiation.
//!
//! Every node lives in an append-only [`GraphArena`]. Children always precede
//! their parents, so node ids double as a topological order. Differentiation
//! never rewrites existing nodes: it appends new ones that hold the derivative,
//! and those are themselves differentiable, which is what makes derivatives of
//! any order available from a single objective.
//!
//! Two notions of equality matter here. Two nodes *evaluate to* the same value
//! when [`evaluate`] agrees on them; they are *equal* when every derivative
//! agrees as well. [`NodeKind::StopGrad`] is the operator that separates the
//! two: it is the identity on the forward pass and has zero derivative.

mod eval;

pub use eval::{
    evaluate, evaluate_unmemoized, Binding, Prepared, SampleBatch, SampleRecord, Tape, Worker,
};

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

static NEXT_ARENA: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of one [`GraphArena`]. The default value belongs to no
/// arena and is rejected everywhere.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    arena: u32,
    index: u32,
}

impl NodeId {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Handle to a registered parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    arena: u32,
    index: u32,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Handle to a stochastic node. Allocated by the arena so that sample leaves
/// and sample records agree on numbering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StochId(pub(crate) u32);

impl StochId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Handle to a sample batch frozen into the arena (see [`NodeKind::BatchMean`]).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BatchId(pub(crate) u32);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NodeKind {
    Constant(f64),
    Param { param: ParamId, component: usize },
    SampleLeaf(StochId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    /// Power with a constant real exponent.
    Pow(NodeId, f64),
    Sigmoid(NodeId),
    /// Forward identity, zero derivative.
    StopGrad(NodeId),
    /// Weighted mean of `body` over every record of a frozen sample batch.
    /// Sample leaves inside `body` are bound by the batch, never by the
    /// caller's record, so the node is a deterministic function of the
    /// parameters. Differentiation commutes with the mean.
    BatchMean { body: NodeId, batch: BatchId },
}

impl NodeKind {
    /// Direct children, in operand order.
    pub fn children(&self) -> Children {
        use NodeKind::*;
        match *self {
            Constant(_) | Param { .. } | SampleLeaf(_) => Children::none(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => Children::two(a, b),
            Neg(a) | Exp(a) | Log(a) | Pow(a, _) | Sigmoid(a) | StopGrad(a) => Children::one(a),
            BatchMean { body, .. } => Children::one(body),
        }
    }

    fn map_children(&self, mut f: impl FnMut(NodeId) -> NodeId) -> NodeKind {
        use NodeKind::*;
        match *self {
            k @ (Constant(_) | Param { .. } | SampleLeaf(_)) => k,
            Add(a, b) => Add(f(a), f(b)),
            Sub(a, b) => Sub(f(a), f(b)),
            Mul(a, b) => Mul(f(a), f(b)),
            Div(a, b) => Div(f(a), f(b)),
            Neg(a) => Neg(f(a)),
            Exp(a) => Exp(f(a)),
            Log(a) => Log(f(a)),
            Pow(a, k) => Pow(f(a), k),
            Sigmoid(a) => Sigmoid(f(a)),
            StopGrad(a) => StopGrad(f(a)),
            BatchMean { body, batch } => BatchMean { body: f(body), batch },
        }
    }

    fn label(&self) -> String {
        use NodeKind::*;
        match *self {
            Constant(c) => format!("const {c}"),
            Param { param, component } => format!("param p{}[{component}]", param.index),
            SampleLeaf(s) => format!("sample w{}", s.0),
            Add(..) => "add".into(),
            Sub(..) => "sub".into(),
            Mul(..) => "mul".into(),
            Div(..) => "div".into(),
            Neg(_) => "neg".into(),
            Exp(_) => "exp".into(),
            Log(_) => "log".into(),
            Pow(_, k) => format!("pow {k}"),
            Sigmoid(_) => "sigmoid".into(),
            StopGrad(_) => "stop_grad".into(),
            BatchMean { batch, .. } => format!("batch_mean b{}", batch.0),
        }
    }
}

/// Up to two child ids without allocating.
#[derive(Clone, Copy, Debug)]
pub struct Children {
    ids: [Option<NodeId>; 2],
}

impl Children {
    fn none() -> Self {
        Self { ids: [None, None] }
    }
    fn one(a: NodeId) -> Self {
        Self { ids: [Some(a), None] }
    }
    fn two(a: NodeId, b: NodeId) -> Self {
        Self {
            ids: [Some(a), Some(b)],
        }
    }
}

impl IntoIterator for Children {
    type Item = NodeId;
    type IntoIter = std::iter::Flatten<std::array::IntoIter<Option<NodeId>, 2>>;
    fn into_iter(self) -> Self::IntoIter {
        self.ids.into_iter().flatten()
    }
}

/// Hash-consing key: compares constants bitwise.
#[derive(Clone, Copy)]
struct Key(NodeKind);

impl PartialEq for Key {
    fn eq(&self, other: &Self) -> bool {
        use NodeKind::*;
        match (self.0, other.0) {
            (Constant(a), Constant(b)) => a.to_bits() == b.to_bits(),
            (Pow(a, k), Pow(b, l)) => a == b && k.to_bits() == l.to_bits(),
            (x, y) => x == y,
        }
    }
}

impl Eq for Key {}

impl Hash for Key {
    fn hash<H: Hasher>(&self, state: &mut H) {
        use NodeKind::*;
        std::mem::discriminant(&self.0).hash(state);
        match self.0 {
            Constant(c) => c.to_bits().hash(state),
            Param { param, component } => (param, component).hash(state),
            SampleLeaf(s) => s.hash(state),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => (a, b).hash(state),
            Neg(a) | Exp(a) | Log(a) | Sigmoid(a) | StopGrad(a) => a.hash(state),
            Pow(a, k) => (a, k.to_bits()).hash(state),
            BatchMean { body, batch } => (body, batch).hash(state),
        }
    }
}

#[derive(Clone, Debug)]
struct ParamInfo {
    name: String,
    dim: usize,
}

/// Append-only store of expression nodes, parameters and frozen batches.
#[derive(Clone, Debug)]
pub struct GraphArena {
    id: u32,
    nodes: Vec<NodeKind>,
    interned: HashMap<KeyBox, u32>,
    params: Vec<ParamInfo>,
    n_stoch: u32,
    batches: Vec<Arc<SampleBatch>>,
    derivs: HashMap<(u32, u32, u32), u32>,
}

// `Key` is not Debug-friendly because of the custom Eq; wrap it.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct KeyBox(Key);

impl std::fmt::Debug for KeyBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0 .0.fmt(f)
    }
}

impl Default for GraphArena {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphArena {
    pub fn new() -> Self {
        Self {
            id: NEXT_ARENA.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            interned: HashMap::new(),
            params: Vec::new(),
            n_stoch: 0,
            batches: Vec::new(),
            derivs: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a parameter vector of the given dimension.
    pub fn register_param(&mut self, name: impl Into<String>, dim: usize) -> ParamId {
        self.params.push(ParamInfo {
            name: name.into(),
            dim,
        });
        ParamId {
            arena: self.id,
            index: (self.params.len() - 1) as u32,
        }
    }

    pub fn param_dim(&self, param: ParamId) -> Result<usize> {
        self.check_param(param)?;
        Ok(self.params[param.index()].dim)
    }

    pub fn param_name(&self, param: ParamId) -> Result<&str> {
        self.check_param(param)?;
        Ok(&self.params[param.index()].name)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        let arena = self.id;
        (0..self.params.len() as u32).map(move |index| ParamId { arena, index })
    }

    /// Allocates a fresh stochastic-node handle.
    pub fn fresh_stoch(&mut self) -> StochId {
        self.n_stoch += 1;
        StochId(self.n_stoch - 1)
    }

    pub fn stoch_count(&self) -> usize {
        self.n_stoch as usize
    }

    /// Freezes a batch of sample records into the arena for use by
    /// [`NodeKind::BatchMean`].
    pub fn freeze_batch(&mut self, batch: SampleBatch) -> BatchId {
        self.batches.push(Arc::new(batch));
        BatchId((self.batches.len() - 1) as u32)
    }

    pub fn batch(&self, id: BatchId) -> Option<&Arc<SampleBatch>> {
        self.batches.get(id.0 as usize)
    }

    pub fn kind(&self, id: NodeId) -> Result<NodeKind> {
        self.check_node(id)?;
        Ok(self.nodes[id.index()])
    }

    pub(crate) fn kind_unchecked(&self, index: usize) -> NodeKind {
        self.nodes[index]
    }

    /// Handle for the node at `index`. Not bounds-checked; see
    /// [`GraphArena::check_node`].
    pub fn node_id(&self, index: usize) -> NodeId {
        NodeId {
            arena: self.id,
            index: index as u32,
        }
    }

    pub fn check_node(&self, id: NodeId) -> Result<()> {
        if id.arena != self.id {
            return Err(Error::ForeignNode(id));
        }
        if id.index() >= self.nodes.len() {
            return Err(Error::InvalidNode(id));
        }
        Ok(())
    }

    pub fn check_param(&self, param: ParamId) -> Result<()> {
        if param.arena != self.id || param.index() >= self.params.len() {
            return Err(Error::UnknownParam(param));
        }
        Ok(())
    }

    /// Appends (or finds, via hash-consing) a node of exactly this kind.
    pub fn build(&mut self, kind: NodeKind) -> Result<NodeId> {
        for c in kind.children() {
            self.check_node(c)?;
        }
        match kind {
            NodeKind::Param { param, component } => {
                let dim = self.param_dim(param)?;
                if component >= dim {
                    return Err(Error::ComponentOutOfRange {
                        param,
                        component,
                        dim,
                    });
                }
            }
            NodeKind::SampleLeaf(s) if s.0 >= self.n_stoch => {
                return Err(Error::UnknownStochastic(s));
            }
            NodeKind::BatchMean { batch, .. } if batch.0 as usize >= self.batches.len() => {
                return Err(Error::InvalidArgument(format!("unknown batch {}", batch.0)));
            }
            _ => {}
        }
        Ok(self.intern(kind))
    }

    fn intern(&mut self, kind: NodeKind) -> NodeId {
        let kind = match kind {
            // -0.0 and 0.0 share one node
            NodeKind::Constant(c) if c == 0.0 => NodeKind::Constant(0.0),
            k => k,
        };
        let key = KeyBox(Key(kind));
        if let Some(&index) = self.interned.get(&key) {
            return self.node_id(index as usize);
        }
        debug_assert!(kind.children().into_iter().all(|c| c.index() < self.nodes.len()));
        let index = self.nodes.len() as u32;
        self.nodes.push(kind);
        self.interned.insert(key, index);
        self.node_id(index as usize)
    }

    fn expect_valid(&self, id: NodeId) {
        if let Err(e) = self.check_node(id) {
            panic!("{e}");
        }
    }

    // --- simplifying constructors -------------------------------------
    //
    // These apply only the trivial rewrites x+0, x-0, x*1, x*0, x/1 and
    // negation of constants. They panic on ids from another arena.

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.intern(NodeKind::Constant(value))
    }

    pub fn zero(&mut self) -> NodeId {
        self.constant(0.0)
    }

    pub fn one(&mut self) -> NodeId {
        self.constant(1.0)
    }

    pub fn param(&mut self, param: ParamId, component: usize) -> NodeId {
        self.build(NodeKind::Param { param, component })
            .unwrap_or_else(|e| panic!("{e}"))
    }

    /// One node per component of `param`.
    pub fn param_vector(&mut self, param: ParamId) -> Vec<NodeId> {
        let dim = self.param_dim(param).unwrap_or_else(|e| panic!("{e}"));
        (0..dim).map(|k| self.param(param, k)).collect()
    }

    pub fn sample_leaf(&mut self, stoch: StochId) -> NodeId {
        self.build(NodeKind::SampleLeaf(stoch))
            .unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn constant_value(&self, id: NodeId) -> Option<f64> {
        match self.nodes.get(id.index()) {
            Some(NodeKind::Constant(c)) if id.arena == self.id => Some(*c),
            _ => None,
        }
    }

    fn is_const(&self, id: NodeId, v: f64) -> bool {
        self.constant_value(id) == Some(v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.expect_valid(a);
        self.expect_valid(b);
        if self.is_const(a, 0.0) {
            return b;
        }
        if self.is_const(b, 0.0) {
            return a;
        }
        self.intern(NodeKind::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.expect_valid(a);
        self.expect_valid(b);
        if self.is_const(b, 0.0) {
            return a;
        }
        if self.is_const(a, 0.0) {
            return self.neg(b);
        }
        self.intern(NodeKind::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.expect_valid(a);
        self.expect_valid(b);
        if self.is_const(a, 0.0) || self.is_const(b, 0.0) {
            return self.zero();
        }
        if self.is_const(a, 1.0) {
            return b;
        }
        if self.is_const(b, 1.0) {
            return a;
        }
        self.intern(NodeKind::Mul(a, b))
    }

    pub fn scale(&mut self, k: f64, a: NodeId) -> NodeId {
        let c = self.constant(k);
        self.mul(c, a)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.expect_valid(a);
        self.expect_valid(b);
        if self.is_const(b, 1.0) {
            return a;
        }
        if self.is_const(a, 0.0) && self.constant_value(b).is_some_and(|c| c != 0.0) {
            return self.zero();
        }
        self.intern(NodeKind::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.expect_valid(a);
        if let Some(c) = self.constant_value(a) {
            return self.constant(-c);
        }
        self.intern(NodeKind::Neg(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.expect_valid(a);
        self.intern(NodeKind::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.expect_valid(a);
        self.intern(NodeKind::Log(a))
    }

    pub fn pow(&mut self, a: NodeId, k: f64) -> NodeId {
        self.expect_valid(a);
        if k == 0.0 {
            return self.one();
        }
        if k == 1.0 {
            return a;
        }
        self.intern(NodeKind::Pow(a, k))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.expect_valid(a);
        self.intern(NodeKind::Sigmoid(a))
    }

    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        self.expect_valid(a);
        self.intern(NodeKind::StopGrad(a))
    }

    pub fn batch_mean(&mut self, body: NodeId, batch: BatchId) -> NodeId {
        self.expect_valid(body);
        assert!((batch.0 as usize) < self.batches.len(), "unknown batch");
        if let Some(c) = self.constant_value(body) {
            if c == 0.0 {
                return self.zero();
            }
        }
        self.intern(NodeKind::BatchMean { body, batch })
    }

    /// `log(1 + exp(a))`, composed from primitives.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let e = self.exp(a);
        let one = self.one();
        let s = self.add(one, e);
        self.log(s)
    }

    /// Left fold of `add`; the empty sum is the constant 0.
    pub fn sum(&mut self, terms: impl IntoIterator<Item = NodeId>) -> NodeId {
        let mut acc = self.zero();
        for t in terms {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Inner product of node values with constant weights.
    pub fn dot_const(&mut self, weights: &[f64], nodes: &[NodeId]) -> NodeId {
        assert_eq!(weights.len(), nodes.len());
        let terms: Vec<NodeId> = weights
            .iter()
            .zip(nodes)
            .map(|(&w, &n)| self.scale(w, n))
            .collect();
        self.sum(terms)
    }

    // --- structure queries --------------------------------------------

    /// All nodes reachable from `roots` (roots included), ascending.
    /// `into_bodies` controls whether traversal enters `BatchMean` bodies.
    pub fn reachable(&self, roots: &[NodeId], into_bodies: bool) -> Vec<usize> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack: Vec<usize> = Vec::new();
        for r in roots {
            self.expect_valid(*r);
            if !seen[r.index()] {
                seen[r.index()] = true;
                stack.push(r.index());
            }
        }
        let mut out = Vec::new();
        while let Some(i) = stack.pop() {
            out.push(i);
            let kind = self.nodes[i];
            if !into_bodies && matches!(kind, NodeKind::BatchMean { .. }) {
                continue;
            }
            for c in kind.children() {
                if !seen[c.index()] {
                    seen[c.index()] = true;
                    stack.push(c.index());
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Stochastic nodes whose sample leaves are reachable from `roots`,
    /// not counting leaves bound inside `BatchMean` bodies.
    pub fn sample_leaves(&self, roots: &[NodeId]) -> Vec<StochId> {
        let mut out: Vec<StochId> = self
            .reachable(roots, false)
            .into_iter()
            .filter_map(|i| match self.nodes[i] {
                NodeKind::SampleLeaf(s) => Some(s),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Parameters referenced anywhere under `roots`, including inside
    /// `BatchMean` bodies.
    pub fn params_reached(&self, roots: &[NodeId]) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self
            .reachable(roots, true)
            .into_iter()
            .filter_map(|i| match self.nodes[i] {
                NodeKind::Param { param, .. } => Some(param),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    // --- differentiation ----------------------------------------------

    /// Builds `∂root/∂param[component]` as a new node.
    ///
    /// Derivatives are memoized per `(node, param, component)`, so repeated
    /// calls and shared subgraphs cost nothing extra.
    pub fn differentiate(&mut self, root: NodeId, param: ParamId, component: usize) -> Result<NodeId> {
        self.check_node(root)?;
        let dim = self.param_dim(param)?;
        if component >= dim {
            return Err(Error::ComponentOutOfRange {
                param,
                component,
                dim,
            });
        }
        let key = |i: usize| (i as u32, param.index, component as u32);
        if let Some(&d) = self.derivs.get(&key(root.index())) {
            return Ok(self.node_id(d as usize));
        }

        // Collect nodes lacking a cached derivative; cached nodes stop the walk.
        let mut seen = HashSet::new();
        let mut stack = vec![root.index()];
        seen.insert(root.index());
        let mut todo = Vec::new();
        while let Some(i) = stack.pop() {
            todo.push(i);
            let kind = self.nodes[i];
            if matches!(kind, NodeKind::StopGrad(_)) {
                continue;
            }
            for c in kind.children() {
                let ci = c.index();
                if !self.derivs.contains_key(&key(ci)) && seen.insert(ci) {
                    stack.push(ci);
                }
            }
        }
        todo.sort_unstable();

        for i in todo {
            let d = self.derivative_rule(i, param, component, &key);
            self.derivs.insert(key(i), d.index as u32);
        }
        Ok(self.node_id(self.derivs[&key(root.index())] as usize))
    }

    fn derivative_rule(
        &mut self,
        i: usize,
        param: ParamId,
        component: usize,
        key: &impl Fn(usize) -> (u32, u32, u32),
    ) -> NodeId {
        use NodeKind::*;
        let d = |arena: &Self, c: NodeId| arena.node_id(arena.derivs[&key(c.index())] as usize);
        let this = self.node_id(i);
        match self.nodes[i] {
            Constant(_) | SampleLeaf(_) | StopGrad(_) => self.zero(),
            Param {
                param: p,
                component: k,
            } => {
                if p == param && k == component {
                    self.one()
                } else {
                    self.zero()
                }
            }
            Add(a, b) => {
                let (da, db) = (d(self, a), d(self, b));
                self.add(da, db)
            }
            Sub(a, b) => {
                let (da, db) = (d(self, a), d(self, b));
                self.sub(da, db)
            }
            Mul(a, b) => {
                let (da, db) = (d(self, a), d(self, b));
                let l = self.mul(da, b);
                let r = self.mul(a, db);
                self.add(l, r)
            }
            Div(a, b) => {
                // (a' - (a/b) b') / b
                let (da, db) = (d(self, a), d(self, b));
                let t = self.mul(this, db);
                let num = self.sub(da, t);
                self.div(num, b)
            }
            Neg(a) => {
                let da = d(self, a);
                self.neg(da)
            }
            Exp(a) => {
                let da = d(self, a);
                self.mul(this, da)
            }
            Log(a) => {
                let da = d(self, a);
                self.div(da, a)
            }
            Pow(a, k) => {
                let da = d(self, a);
                if self.is_const(da, 0.0) {
                    return self.zero();
                }
                let p = self.pow(a, k - 1.0);
                let kp = self.scale(k, p);
                self.mul(kp, da)
            }
            Sigmoid(a) => {
                let da = d(self, a);
                if self.is_const(da, 0.0) {
                    return self.zero();
                }
                let one = self.one();
                let comp = self.sub(one, this);
                let s = self.mul(this, comp);
                self.mul(s, da)
            }
            BatchMean { body, batch } => {
                let db = d(self, body);
                self.batch_mean(db, batch)
            }
        }
    }

    /// One derivative node per component of `param`, in component order.
    pub fn gradient_vector(&mut self, root: NodeId, param: ParamId) -> Result<Vec<NodeId>> {
        let dim = self.param_dim(param)?;
        (0..dim)
            .map(|k| self.differentiate(root, param, k))
            .collect()
    }

    /// Gradient with respect to several parameters, concatenated in order.
    pub fn gradient_over(&mut self, root: NodeId, params: &[ParamId]) -> Result<Vec<NodeId>> {
        let mut out = Vec::new();
        for &p in params {
            out.extend(self.gradient_vector(root, p)?);
        }
        Ok(out)
    }

    /// All `order`-th partial derivatives of `root`, flattened row-major over
    /// the concatenated components of `params`. Order 0 yields `[root]`.
    pub fn derivative_tensor(&mut self, root: NodeId, params: &[ParamId], order: usize) -> Result<Vec<NodeId>> {
        let mut level = vec![root];
        for _ in 0..order {
            let mut next = Vec::new();
            for r in level {
                next.extend(self.gradient_over(r, params)?);
            }
            level = next;
        }
        Ok(level)
    }

    /// Rebuilds `root` with every node in `map` replaced by its image.
    /// Nodes not reaching a replaced node are reused unchanged.
    pub fn substitute(&mut self, root: NodeId, map: &HashMap<NodeId, NodeId>) -> Result<NodeId> {
        self.check_node(root)?;
        for (k, v) in map {
            self.check_node(*k)?;
            self.check_node(*v)?;
        }
        let order = self.reachable(&[root], true);
        let mut image: HashMap<usize, NodeId> = HashMap::new();
        for i in order {
            let id = self.node_id(i);
            let new = if let Some(&to) = map.get(&id) {
                to
            } else {
                let kind = self.nodes[i];
                let mapped = kind.map_children(|c| image[&c.index()]);
                if mapped == kind {
                    id
                } else {
                    self.intern(mapped)
                }
            };
            image.insert(i, new);
        }
        Ok(image[&root.index()])
    }

    /// Text dump of the nodes reachable from `roots`: one line per node with
    /// id, kind and children.
    pub fn dump(&self, roots: &[NodeId]) -> String {
        let mut out = String::new();
        for i in self.reachable(roots, true) {
            let kind = self.nodes[i];
            let kids: Vec<String> = kind
                .children()
                .into_iter()
                .map(|c| format!("%{}", c.index()))
                .collect();
            let _ = writeln!(out, "%{i} = {} {}", kind.label(), kids.join(" "));
        }
        out
    }
}
