//! Bernoulli stochastic nodes: each builder registers a sampler and a
//! log-probability expression with the graph.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{evaluate, Binding, NodeId, StochId, Tape};
use crate::scg::{Sampler, Scg};

pub use crate::graph::SampleRecord;

/// `x ~ Ber(p)` with `p` given by `prob`.
///
/// `log p(x) = x·log(p) + (1−x)·log(1−p)`. There is no clamping: a value of
/// `p` on the boundary surfaces as a domain error from the `Log` node.
pub fn bernoulli(scg: &mut Scg, prob: NodeId) -> Result<StochId> {
    let arena = scg.arena_mut();
    arena.check_node(prob)?;
    let id = arena.fresh_stoch();
    let x = arena.sample_leaf(id);
    let one = arena.one();
    let log_p = arena.log(prob);
    let q = arena.sub(one, prob);
    let log_q = arena.log(q);
    let not_x = arena.sub(one, x);
    let a = arena.mul(x, log_p);
    let b = arena.mul(not_x, log_q);
    let log_prob = arena.add(a, b);
    scg.add_stochastic(id, x, log_prob, Sampler::Bernoulli { prob })
}

/// `x ~ Ber(σ(z))` for a logit expression `z`.
///
/// `log p(x) = x·z − softplus(z)`, which equals `−softplus(−z)` for `x = 1`
/// and `−softplus(z)` for `x = 0` and never takes the log of a probability.
pub fn sigmoid_bernoulli(scg: &mut Scg, logit: NodeId) -> Result<StochId> {
    let arena = scg.arena_mut();
    arena.check_node(logit)?;
    // the probability node must precede the leaf for ancestral sampling
    let prob = arena.sigmoid(logit);
    let id = arena.fresh_stoch();
    let x = arena.sample_leaf(id);
    let xz = arena.mul(x, logit);
    let sp = arena.softplus(logit);
    let log_prob = arena.sub(xz, sp);
    scg.add_stochastic(id, x, log_prob, Sampler::Bernoulli { prob })
}

/// Draws one value for `stoch`, reading parent values from `record`.
/// Consumes exactly one uniform from `rng`.
pub fn draw<R: Rng + ?Sized>(
    scg: &Scg,
    stoch: StochId,
    binding: &Binding,
    record: &SampleRecord,
    rng: &mut R,
) -> Result<f64> {
    let node = scg.stochastic(stoch)?;
    let prob = node.sampler.prob();
    let p = evaluate(scg.arena(), prob, binding, record)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain {
            node: prob,
            what: "Bernoulli probability outside [0, 1]",
        });
    }
    let u: f64 = rng.gen();
    Ok(if u < p { 1.0 } else { 0.0 })
}

/// Draws every stochastic node of `scg` in ancestral (registration) order.
pub fn sample_ancestral<R: Rng + ?Sized>(scg: &Scg, binding: &Binding, rng: &mut R) -> Result<SampleRecord> {
    let tape = Tape::compile_with_draws(scg.arena(), &[], &scg.draw_plan())?;
    let prepared = tape.prepare(binding)?;
    let mut worker = prepared.worker();
    let mut record = SampleRecord::with_capacity(scg.arena().stoch_count());
    worker.run_draw(rng, &mut record)?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphArena, ParamId};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(p: Option<f64>) -> (Scg, ParamId, StochId) {
        let mut arena = GraphArena::new();
        let theta = arena.register_param("theta", 1);
        let mut scg = Scg::new(arena, vec![theta]);
        let prob = match p {
            Some(v) => scg.arena_mut().constant(v),
            None => scg.arena_mut().param(theta, 0),
        };
        let x = bernoulli(&mut scg, prob).unwrap();
        (scg, theta, x)
    }

    fn record(x: StochId, v: f64) -> SampleRecord {
        let mut r = SampleRecord::new();
        r.set(x, v);
        r
    }

    #[test]
    fn bernoulli_log_prob_values() {
        let (scg, theta, x) = single(Some(0.5));
        let lp = scg.stochastic(x).unwrap().log_prob;
        let b = Binding::new().with(theta, vec![0.0]);
        assert_eq!(evaluate(scg.arena(), lp, &b, &record(x, 1.0)).unwrap(), 0.5f64.ln());

        let (scg, theta, x) = single(None);
        let lp = scg.stochastic(x).unwrap().log_prob;
        let b = Binding::new().with(theta, vec![0.3]);
        let v = evaluate(scg.arena(), lp, &b, &record(x, 0.0)).unwrap();
        assert!((v - 0.7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bernoulli_score_at_one() {
        let (mut scg, theta, x) = single(None);
        let lp = scg.stochastic(x).unwrap().log_prob;
        let d = scg.arena_mut().differentiate(lp, theta, 0).unwrap();
        let b = Binding::new().with(theta, vec![0.3]);
        let v = evaluate(scg.arena(), d, &b, &record(x, 1.0)).unwrap();
        let f = |t: f64| t.ln();
        let fd = (f(0.3 + 1e-6) - f(0.3 - 1e-6)) / 2e-6;
        assert!((v - fd).abs() < 1e-8);
    }

    #[test]
    fn sigmoid_bernoulli_values() {
        let mut arena = GraphArena::new();
        let theta = arena.register_param("z", 1);
        let mut scg = Scg::new(arena, vec![theta]);
        let z = scg.arena_mut().param(theta, 0);
        let x = sigmoid_bernoulli(&mut scg, z).unwrap();
        let lp = scg.stochastic(x).unwrap().log_prob;
        let d = scg.arena_mut().differentiate(lp, theta, 0).unwrap();
        let at = |z: f64| Binding::new().with(theta, vec![z]);
        let one = record(x, 1.0);
        assert!((evaluate(scg.arena(), lp, &at(0.0), &one).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!(evaluate(scg.arena(), lp, &at(20.0), &one).unwrap().abs() < 1e-8);
        assert!((evaluate(scg.arena(), d, &at(0.0), &one).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_probs_normalize() {
        let mut arena = GraphArena::new();
        let theta = arena.register_param("z", 1);
        let mut scg = Scg::new(arena, vec![theta]);
        let z = scg.arena_mut().param(theta, 0);
        let x = sigmoid_bernoulli(&mut scg, z).unwrap();
        let lp = scg.stochastic(x).unwrap().log_prob;
        for zv in [-30.0, -3.0, -0.1, 0.0, 0.7, 5.0, 30.0] {
            let b = Binding::new().with(theta, vec![zv]);
            let total: f64 = [0.0, 1.0]
                .iter()
                .map(|&v| evaluate(scg.arena(), lp, &b, &record(x, v)).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "z={zv}: {total}");
        }
    }

    #[test]
    fn degenerate_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (p, want) in [(1.0 - 1e-12, 1.0), (1e-12, 0.0)] {
            let (scg, theta, x) = single(Some(p));
            let b = Binding::new().with(theta, vec![0.0]);
            for _ in 0..100 {
                assert_eq!(draw(&scg, x, &b, &SampleRecord::new(), &mut rng).unwrap(), want);
            }
        }
    }

    #[test]
    fn fair_coin_mean() {
        let (scg, theta, x) = single(Some(0.5));
        let b = Binding::new().with(theta, vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let total: f64 = (0..n)
            .map(|_| draw(&scg, x, &b, &SampleRecord::new(), &mut rng).unwrap())
            .sum();
        assert!((total / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn ancestral_sampling_matches_single_draws() {
        // two-node chain: y ~ Ber(0.2 + 0.6 x)
        let (mut scg, theta, x) = single(Some(0.4));
        let xl = scg.stochastic(x).unwrap().leaf;
        let py = {
            let ar = scg.arena_mut();
            let s = ar.scale(0.6, xl);
            let c = ar.constant(0.2);
            ar.add(c, s)
        };
        let y = bernoulli(&mut scg, py).unwrap();
        let b = Binding::new().with(theta, vec![0.0]);
        for seed in 0..20 {
            let rec = sample_ancestral(&scg, &b, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut manual = SampleRecord::new();
            let vx = draw(&scg, x, &b, &manual, &mut rng).unwrap();
            manual.set(x, vx);
            let vy = draw(&scg, y, &b, &manual, &mut rng).unwrap();
            manual.set(y, vy);
            assert_eq!(rec, manual);
        }
    }

    #[test]
    fn out_of_range_probability_is_a_domain_error() {
        let (scg, theta, x) = single(Some(1.5));
        let b = Binding::new().with(theta, vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            draw(&scg, x, &b, &SampleRecord::new(), &mut rng),
            Err(Error::Domain { .. })
        ));
    }
}
