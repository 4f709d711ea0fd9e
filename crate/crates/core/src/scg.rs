//! Stochastic computation graphs on top of the expression arena.
//!
//! Deterministic nodes are expression nodes; this layer only adds the
//! stochastic nodes (each with a log-probability expression and a sampler)
//! and the cost nodes, and answers influence queries over both.

use std::collections::{BTreeSet, HashMap};
use std::sync::RwLock;

use crate::error::{Error, Result};
use crate::graph::{GraphArena, NodeId, ParamId, StochId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CostId(pub(crate) u32);

impl CostId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// How a stochastic node draws its value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    /// Value 1.0 with the probability held by `prob`, else 0.0.
    Bernoulli { prob: NodeId },
}

impl Sampler {
    pub fn prob(&self) -> NodeId {
        match *self {
            Sampler::Bernoulli { prob } => prob,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StochasticNode {
    pub id: StochId,
    pub leaf: NodeId,
    /// `log p(w | parents; θ)`; contains `leaf`.
    pub log_prob: NodeId,
    pub sampler: Sampler,
    pub parents: Vec<StochId>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostNode {
    pub id: CostId,
    pub expr: NodeId,
}

#[derive(Debug, Default)]
struct Cache {
    ancestors: HashMap<CostId, Vec<StochId>>,
    theta_dependent: Option<Vec<bool>>,
}

/// A stochastic computation graph: the arena plus stochastic and cost nodes,
/// and the set of optimised inputs Θ.
#[derive(Debug)]
pub struct Scg {
    arena: GraphArena,
    stochastic: Vec<StochasticNode>,
    by_id: HashMap<StochId, usize>,
    costs: Vec<CostNode>,
    theta: Vec<ParamId>,
    cache: RwLock<Cache>,
}

impl Scg {
    pub fn new(arena: GraphArena, theta: Vec<ParamId>) -> Self {
        Self {
            arena,
            stochastic: Vec::new(),
            by_id: HashMap::new(),
            costs: Vec::new(),
            theta,
            cache: RwLock::new(Cache::default()),
        }
    }

    pub fn arena(&self) -> &GraphArena {
        &self.arena
    }

    /// Mutable access for building expressions. Appending nodes never
    /// changes the answers of influence queries, so caches stay valid.
    pub fn arena_mut(&mut self) -> &mut GraphArena {
        &mut self.arena
    }

    /// Adds a parameter to Θ.
    pub fn add_theta(&mut self, param: ParamId) -> Result<()> {
        self.arena.check_param(param)?;
        if !self.theta.contains(&param) {
            self.theta.push(param);
            self.invalidate();
        }
        Ok(())
    }

    pub fn theta(&self) -> &[ParamId] {
        &self.theta
    }

    pub fn stochastic_nodes(&self) -> &[StochasticNode] {
        &self.stochastic
    }

    pub fn stochastic(&self, id: StochId) -> Result<&StochasticNode> {
        self.by_id
            .get(&id)
            .map(|&i| &self.stochastic[i])
            .ok_or(Error::UnknownStochastic(id))
    }

    pub fn costs(&self) -> &[CostNode] {
        &self.costs
    }

    pub fn cost(&self, id: CostId) -> Result<&CostNode> {
        self.costs
            .get(id.index())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown cost {}", id.0)))
    }

    fn invalidate(&mut self) {
        *self.cache.get_mut().expect("cache lock poisoned") = Cache::default();
    }

    /// Registers a stochastic node. `leaf` must be the sample leaf of a
    /// freshly allocated id; parents are the stochastic nodes whose leaves
    /// appear in the sampler's probability expression.
    pub fn add_stochastic(&mut self, id: StochId, leaf: NodeId, log_prob: NodeId, sampler: Sampler) -> Result<StochId> {
        self.arena.check_node(leaf)?;
        self.arena.check_node(log_prob)?;
        self.arena.check_node(sampler.prob())?;
        if self.by_id.contains_key(&id) {
            return Err(Error::InvalidArgument(format!("stochastic node {id:?} already registered")));
        }
        let parents = self.arena.sample_leaves(&[sampler.prob()]);
        for p in &parents {
            if !self.by_id.contains_key(p) {
                return Err(Error::UnknownStochastic(*p));
            }
        }
        let allowed: BTreeSet<StochId> = parents.iter().copied().chain([id]).collect();
        if let Some(bad) = self
            .arena
            .sample_leaves(&[log_prob])
            .into_iter()
            .find(|s| !allowed.contains(s))
        {
            return Err(Error::InvalidArgument(format!(
                "log_prob of {id:?} reads {bad:?}, which is neither the node nor a parent"
            )));
        }
        self.by_id.insert(id, self.stochastic.len());
        self.stochastic.push(StochasticNode {
            id,
            leaf,
            log_prob,
            sampler,
            parents,
        });
        self.invalidate();
        Ok(id)
    }

    pub fn add_cost(&mut self, expr: NodeId) -> Result<CostId> {
        self.arena.check_node(expr)?;
        let id = CostId(self.costs.len() as u32);
        self.costs.push(CostNode { id, expr });
        self.invalidate();
        Ok(id)
    }

    /// `(stoch, prob)` pairs for ancestral sampling.
    pub fn draw_plan(&self) -> Vec<(StochId, NodeId)> {
        self.stochastic.iter().map(|s| (s.id, s.sampler.prob())).collect()
    }

    /// Closure of `seeds` under the stochastic parent relation.
    fn close_over_parents(&self, seeds: impl IntoIterator<Item = StochId>) -> BTreeSet<StochId> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<StochId> = seeds.into_iter().collect();
        while let Some(s) = stack.pop() {
            if out.insert(s) {
                if let Some(&i) = self.by_id.get(&s) {
                    stack.extend(self.stochastic[i].parents.iter().copied());
                }
            }
        }
        out
    }

    /// Every stochastic node that influences the value of `expr`: leaves
    /// read directly, and transitively their stochastic parents.
    pub fn influencing_stochastic(&self, expr: NodeId) -> Vec<StochId> {
        self.close_over_parents(self.arena.sample_leaves(&[expr]))
            .into_iter()
            .collect()
    }

    /// `v ≺ c`: a path runs from stochastic node `v` into cost `c`.
    pub fn influences(&self, v: StochId, c: CostId) -> Result<bool> {
        self.stochastic(v)?;
        let expr = self.cost(c)?.expr;
        Ok(self.influencing_stochastic(expr).contains(&v))
    }

    fn theta_dependent_flags(&self) -> Vec<bool> {
        if let Some(flags) = &self.cache.read().expect("cache lock poisoned").theta_dependent {
            return flags.clone();
        }
        // Registration order is ancestral, so parents are decided first.
        let mut flags = vec![false; self.stochastic.len()];
        for (i, s) in self.stochastic.iter().enumerate() {
            let direct = self
                .arena
                .params_reached(&[s.sampler.prob(), s.log_prob])
                .iter()
                .any(|p| self.theta.contains(p));
            flags[i] = direct || s.parents.iter().any(|p| flags[self.by_id[p]]);
        }
        self.cache.write().expect("cache lock poisoned").theta_dependent = Some(flags.clone());
        flags
    }

    /// `θ ≺ w` for some θ in Θ, directly or through stochastic parents.
    pub fn depends_on_theta(&self, w: StochId) -> Result<bool> {
        let i = *self.by_id.get(&w).ok_or(Error::UnknownStochastic(w))?;
        Ok(self.theta_dependent_flags()[i])
    }

    /// All stochastic nodes that depend on Θ, ascending.
    pub fn theta_dependent(&self) -> Vec<StochId> {
        let flags = self.theta_dependent_flags();
        self.stochastic
            .iter()
            .zip(flags)
            .filter_map(|(s, f)| f.then_some(s.id))
            .collect()
    }

    /// `W_c`: stochastic nodes that depend on Θ and influence `expr`,
    /// ascending by id.
    pub fn stochastic_ancestors_of_expr(&self, expr: NodeId) -> Vec<StochId> {
        let flags = self.theta_dependent_flags();
        self.influencing_stochastic(expr)
            .into_iter()
            .filter(|s| self.by_id.get(s).is_some_and(|&i| flags[i]))
            .collect()
    }

    /// `W_c` for a registered cost node. Memoized.
    pub fn stochastic_ancestors(&self, c: CostId) -> Result<Vec<StochId>> {
        if let Some(w) = self.cache.read().expect("cache lock poisoned").ancestors.get(&c) {
            return Ok(w.clone());
        }
        let expr = self.cost(c)?.expr;
        let w = self.stochastic_ancestors_of_expr(expr);
        self.cache
            .write()
            .expect("cache lock poisoned")
            .ancestors
            .insert(c, w.clone());
        Ok(w)
    }

    /// Costs influenced by `w`.
    pub fn downstream_costs(&self, w: StochId) -> Result<Vec<CostId>> {
        self.stochastic(w)?;
        Ok(self
            .costs
            .iter()
            .filter(|c| self.influencing_stochastic(c.expr).contains(&w))
            .map(|c| c.id)
            .collect())
    }

    /// Stochastic nodes influenced by `w` (excluding `w`).
    pub fn stochastic_descendants(&self, w: StochId) -> Result<Vec<StochId>> {
        self.stochastic(w)?;
        Ok(self
            .stochastic
            .iter()
            .filter(|s| s.id != w && self.close_over_parents(s.parents.iter().copied()).contains(&w))
            .map(|s| s.id)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::{bernoulli, sigmoid_bernoulli};

    fn chain() -> (Scg, Vec<StochId>, Vec<CostId>) {
        // θ → a1 → s2 → a2 → r2 (the RL chain), with r1 = a1
        let mut arena = GraphArena::new();
        let theta = arena.register_param("theta", 2);
        let mut scg = Scg::new(arena, vec![theta]);
        let t0 = scg.arena_mut().param(theta, 0);
        let a1 = sigmoid_bernoulli(&mut scg, t0).unwrap();
        let x1 = scg.stochastic(a1).unwrap().leaf;
        let s2 = {
            let ar = scg.arena_mut();
            let half = ar.constant(0.5);
            let p = ar.mul(half, x1);
            let q = ar.constant(0.25);
            ar.add(p, q)
        };
        let s2 = bernoulli(&mut scg, s2).unwrap();
        let xs2 = scg.stochastic(s2).unwrap().leaf;
        let logit2 = {
            let ar = scg.arena_mut();
            let t1 = ar.param(theta, 1);
            ar.add(t1, xs2)
        };
        let a2 = sigmoid_bernoulli(&mut scg, logit2).unwrap();
        let x2 = scg.stochastic(a2).unwrap().leaf;
        let r1 = scg.add_cost(x1).unwrap();
        let r2 = scg.add_cost(x2).unwrap();
        (scg, vec![a1, s2, a2], vec![r1, r2])
    }

    #[test]
    fn chain_influence() {
        let (scg, s, c) = chain();
        assert!(scg.influences(s[0], c[1]).unwrap());
        assert!(scg.influences(s[0], c[0]).unwrap());
        assert!(!scg.influences(s[2], c[0]).unwrap());
        assert_eq!(scg.downstream_costs(s[0]).unwrap(), c);
        assert_eq!(scg.downstream_costs(s[2]).unwrap(), vec![c[1]]);
    }

    #[test]
    fn ancestors_require_theta_dependence() {
        let (scg, s, c) = chain();
        // s2 has a θ-dependent parent, so θ ≺ s2
        assert!(scg.depends_on_theta(s[1]).unwrap());
        assert_eq!(scg.stochastic_ancestors(c[1]).unwrap(), s);
        assert_eq!(scg.stochastic_ancestors(c[0]).unwrap(), vec![s[0]]);
    }

    #[test]
    fn independent_nodes_do_not_influence() {
        let mut arena = GraphArena::new();
        let theta = arena.register_param("theta", 1);
        let mut scg = Scg::new(arena, vec![theta]);
        let p = scg.arena_mut().param(theta, 0);
        let x = bernoulli(&mut scg, p).unwrap();
        let half = scg.arena_mut().constant(0.5);
        let y = bernoulli(&mut scg, half).unwrap();
        let xl = scg.stochastic(x).unwrap().leaf;
        let f = scg.add_cost(xl).unwrap();
        assert!(!scg.influences(y, f).unwrap());
        assert!(scg.downstream_costs(y).unwrap().is_empty());
        let k = scg.arena_mut().constant(3.0);
        let g = scg.add_cost(k).unwrap();
        assert!(scg.stochastic_ancestors(g).unwrap().is_empty());
        // θ does not reach y
        let yl = scg.stochastic(y).unwrap().leaf;
        let xy = scg.arena_mut().mul(xl, yl);
        let h = scg.add_cost(xy).unwrap();
        assert_eq!(scg.stochastic_ancestors(h).unwrap(), vec![x]);
    }

    #[test]
    fn descendants_follow_parent_edges() {
        let (scg, s, _) = chain();
        assert_eq!(scg.stochastic_descendants(s[0]).unwrap(), vec![s[1], s[2]]);
        assert!(scg.stochastic_descendants(s[2]).unwrap().is_empty());
    }

    #[test]
    fn log_prob_may_not_read_foreign_leaves() {
        let mut arena = GraphArena::new();
        let theta = arena.register_param("theta", 1);
        let mut scg = Scg::new(arena, vec![theta]);
        let half = scg.arena_mut().constant(0.5);
        let x = bernoulli(&mut scg, half).unwrap();
        let xl = scg.stochastic(x).unwrap().leaf;
        let ar = scg.arena_mut();
        let id = ar.fresh_stoch();
        let leaf = ar.sample_leaf(id);
        let bogus = ar.add(leaf, xl);
        let err = scg.add_stochastic(id, leaf, bogus, Sampler::Bernoulli { prob: half });
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }
}
