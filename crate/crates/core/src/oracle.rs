//! Ground truth that shares no code path with the estimators: exhaustive
//! enumeration of discrete outcomes and central finite differences.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Binding, NodeId, SampleRecord, Tape};
use crate::scg::Scg;
use crate::stats::pairwise_sum;

/// Largest supported number of Bernoulli nodes (2^24 outcomes).
pub const MAX_ENUMERATED: usize = 24;

const OUTCOME_CHUNK: usize = 4096;

pub const DEFAULT_H1: f64 = 1e-4;
pub const DEFAULT_H2: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnumerationResult {
    pub expectation: f64,
    pub n_outcomes: usize,
    pub total_weight: f64,
}

/// Exact `E[root]` over every joint outcome of the stochastic nodes.
pub fn enumerate_expectation(scg: &Scg, root: NodeId, binding: &Binding) -> Result<EnumerationResult> {
    let (values, n_outcomes, total_weight) = enumerate_many(scg, &[root], binding)?;
    Ok(EnumerationResult {
        expectation: values[0],
        n_outcomes,
        total_weight,
    })
}

/// Exact expectations of several roots in one sweep. Returns the
/// expectations, the outcome count and the total probability mass.
///
/// Outcome weights are products of sampler probabilities `p` or `1 − p`,
/// never of the log-probability expressions the estimators differentiate.
pub fn enumerate_many(scg: &Scg, roots: &[NodeId], binding: &Binding) -> Result<(Vec<f64>, usize, f64)> {
    let nodes = scg.stochastic_nodes();
    let n = nodes.len();
    if n > MAX_ENUMERATED {
        return Err(Error::TooManyOutcomes {
            count: n,
            cap: MAX_ENUMERATED,
        });
    }
    let probs: Vec<NodeId> = nodes.iter().map(|s| s.sampler.prob()).collect();
    let mut all = roots.to_vec();
    all.extend(&probs);
    let tape = Tape::compile(scg.arena(), &all)?;
    let prepared = tape.prepare(binding)?;
    let n_outcomes = 1usize << n;
    let n_stoch = scg.arena().stoch_count();

    let chunks: Vec<usize> = (0..n_outcomes.div_ceil(OUTCOME_CHUNK)).collect();
    let partial = chunks
        .into_par_iter()
        .map(|c| {
            let lo = c * OUTCOME_CHUNK;
            let hi = ((c + 1) * OUTCOME_CHUNK).min(n_outcomes);
            let mut worker = prepared.worker();
            let mut weighted: Vec<Vec<f64>> = vec![Vec::with_capacity(hi - lo); roots.len()];
            let mut weights = Vec::with_capacity(hi - lo);
            let mut rec = SampleRecord::with_capacity(n_stoch);
            for outcome in lo..hi {
                for (bit, s) in nodes.iter().enumerate() {
                    rec.set(s.id, ((outcome >> bit) & 1) as f64);
                }
                worker.run_record(&rec)?;
                let mut w = 1.0;
                for (bit, _) in nodes.iter().enumerate() {
                    let p = worker.root(roots.len() + bit);
                    w *= if (outcome >> bit) & 1 == 1 { p } else { 1.0 - p };
                }
                weights.push(w);
                for (r, col) in weighted.iter_mut().enumerate() {
                    // zero-probability outcomes contribute nothing, even if
                    // the root is infinite there
                    col.push(if w == 0.0 { 0.0 } else { w * worker.root(r) });
                }
            }
            let sums: Vec<f64> = weighted.iter().map(|col| pairwise_sum(col)).collect();
            Ok((sums, pairwise_sum(&weights)))
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let values = (0..roots.len())
        .map(|r| {
            let col: Vec<f64> = partial.iter().map(|(s, _)| s[r]).collect();
            pairwise_sum(&col)
        })
        .collect();
    let weights: Vec<f64> = partial.iter().map(|(_, w)| *w).collect();
    Ok((values, n_outcomes, pairwise_sum(&weights)))
}

/// Central-difference gradient.
pub fn gradient_fd(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Hessian, row-major, symmetrized as `(H + Hᵀ)/2`.
pub fn hessian_fd(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let n = x.len();
    let mut raw = vec![0.0; n * n];
    let mut xp = x.to_vec();
    let mut at = |i: usize, si: f64, j: usize, sj: f64| {
        xp[i] += si * h;
        xp[j] += sj * h;
        let v = f(&xp);
        xp[i] = x[i];
        xp[j] = x[j];
        v
    };
    for i in 0..n {
        for j in 0..n {
            let v = at(i, 1.0, j, 1.0) - at(i, 1.0, j, -1.0) - at(i, -1.0, j, 1.0) + at(i, -1.0, j, -1.0);
            raw[i * n + j] = v / (4.0 * h * h);
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (raw[i * n + j] + raw[j * n + i]);
        }
    }
    out
}

/// Finite differences of order 1 (gradient) or 2 (flattened Hessian).
/// `h = None` selects the default step for the order.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], order: usize, h: Option<f64>) -> Result<Vec<f64>> {
    match order {
        1 => Ok(gradient_fd(f, x, h.unwrap_or(DEFAULT_H1))),
        2 => Ok(hessian_fd(f, x, h.unwrap_or(DEFAULT_H2))),
        _ => Err(Error::InvalidArgument(format!(
            "finite differences support order 1 or 2, got {order}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::bernoulli;
    use crate::graph::GraphArena;

    #[test]
    fn fd_gradient_of_squares() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let g = finite_diff(f, &[1.0, 2.0], 1, None).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn fd_hessian_of_linear_is_zero_and_symmetric() {
        let f = |x: &[f64]| 3.0 * x[0] - 2.0 * x[1] + 0.5 * x[2];
        let h = finite_diff(f, &[0.3, -1.0, 2.0], 2, None).unwrap();
        assert!(h.iter().all(|v| v.abs() < 1e-6));
        let g = |x: &[f64]| x[0] * x[1].exp() + x[2].sin() * x[0];
        let h = hessian_fd(g, &[0.3, -1.0, 2.0], 1e-3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(h[i * 3 + j].to_bits(), h[j * 3 + i].to_bits());
            }
        }
        assert!(finite_diff(g, &[0.0; 3], 3, None).is_err());
    }

    #[test]
    fn constant_root_and_too_many_nodes() {
        let mut arena = GraphArena::new();
        let theta = arena.register_param("theta", 1);
        let mut scg = Scg::new(arena, vec![theta]);
        let p = scg.arena_mut().constant(0.3);
        for _ in 0..3 {
            bernoulli(&mut scg, p).unwrap();
        }
        let c = scg.arena_mut().constant(2.5);
        let b = Binding::new().with(theta, vec![0.0]);
        let r = enumerate_expectation(&scg, c, &b).unwrap();
        assert_eq!(r.n_outcomes, 8);
        assert!((r.expectation - 2.5).abs() < 1e-15);
        assert!((r.total_weight - 1.0).abs() < 1e-15);
        for _ in 0..22 {
            bernoulli(&mut scg, p).unwrap();
        }
        assert!(matches!(
            enumerate_expectation(&scg, c, &b),
            Err(Error::TooManyOutcomes { count: 25, cap: 24 })
        ));
    }

    #[test]
    fn dependent_chain_expectation() {
        // x ~ Ber(0.3), y ~ Ber(0.2 + 0.5x); E[y] = 0.2 + 0.15
        let mut arena = GraphArena::new();
        let theta = arena.register_param("theta", 1);
        let mut scg = Scg::new(arena, vec![theta]);
        let p = scg.arena_mut().constant(0.3);
        let x = bernoulli(&mut scg, p).unwrap();
        let xl = scg.stochastic(x).unwrap().leaf;
        let py = {
            let a = scg.arena_mut();
            let s = a.scale(0.5, xl);
            let c = a.constant(0.2);
            a.add(c, s)
        };
        let y = bernoulli(&mut scg, py).unwrap();
        let yl = scg.stochastic(y).unwrap().leaf;
        let b = Binding::new().with(theta, vec![0.0]);
        let r = enumerate_expectation(&scg, yl, &b).unwrap();
        assert!((r.expectation - 0.35).abs() < 1e-15);
    }
}
