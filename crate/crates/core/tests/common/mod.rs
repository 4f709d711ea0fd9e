//! Seeded random corpus shared by the integration tests.
#![allow(dead_code)]

use dice_core::dists::bernoulli;
use dice_core::graph::{Binding, GraphArena, NodeId, ParamId, SampleRecord};
use dice_core::scg::Scg;
use dice_core::StochId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random deterministic expression over `leaves`. Every operator maps
/// `[-1, 1]` into `[-1, 1]`, so values stay bounded at any depth and finite
/// differences remain well conditioned.
pub fn random_expr(a: &mut GraphArena, rng: &mut ChaCha8Rng, leaves: &[NodeId], depth: usize) -> NodeId {
    if depth == 0 || rng.gen_bool(0.2) {
        return if leaves.is_empty() || rng.gen_bool(0.25) {
            a.constant(rng.gen_range(-1.0..1.0))
        } else {
            leaves[rng.gen_range(0..leaves.len())]
        };
    }
    let x = random_expr(a, rng, leaves, depth - 1);
    match rng.gen_range(0..11) {
        0 => {
            let y = random_expr(a, rng, leaves, depth - 1);
            let s = a.add(x, y);
            a.scale(0.5, s)
        }
        1 => {
            let y = random_expr(a, rng, leaves, depth - 1);
            let s = a.sub(x, y);
            a.scale(0.5, s)
        }
        2 => {
            let y = random_expr(a, rng, leaves, depth - 1);
            a.mul(x, y)
        }
        3 => a.neg(x),
        4 => a.sigmoid(x),
        5 => {
            let s = a.softplus(x);
            a.scale(0.75, s)
        }
        6 => {
            let e = a.exp(x);
            a.scale(0.36, e)
        }
        7 => {
            // log(1 + x²)
            let one = a.one();
            let sq = a.mul(x, x);
            let s = a.add(one, sq);
            a.log(s)
        }
        8 => {
            // x / (1 + y²)
            let y = random_expr(a, rng, leaves, depth - 1);
            let one = a.one();
            let sq = a.mul(y, y);
            let d = a.add(one, sq);
            a.div(x, d)
        }
        9 => a.pow(x, 2.0),
        _ => a.pow(x, 3.0),
    }
}

pub struct DetCase {
    pub arena: GraphArena,
    pub theta: ParamId,
    pub root: NodeId,
    pub dim: usize,
}

/// Deterministic expression tree of depth ≤ 8 over a 1-3 dimensional θ.
pub fn random_deterministic(seed: u64) -> DetCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arena = GraphArena::new();
    let dim = rng.gen_range(1..=3);
    let theta = arena.register_param("theta", dim);
    let leaves = arena.param_vector(theta);
    let depth = rng.gen_range(1..=8);
    let root = random_expr(&mut arena, &mut rng, &leaves, depth);
    DetCase {
        arena,
        theta,
        root,
        dim,
    }
}

pub fn random_point(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub struct ScgCase {
    pub scg: Scg,
    pub theta: ParamId,
    pub dim: usize,
    pub point: Vec<f64>,
    pub nodes: Vec<StochId>,
}

impl ScgCase {
    pub fn binding(&self) -> Binding {
        self.binding_at(&self.point)
    }

    pub fn binding_at(&self, x: &[f64]) -> Binding {
        Binding::new().with(self.theta, x.to_vec())
    }

    /// A random full assignment of the stochastic nodes.
    pub fn random_record(&self, rng: &mut ChaCha8Rng) -> SampleRecord {
        let mut rec = SampleRecord::new();
        for &s in &self.nodes {
            rec.set(s, if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        }
        rec
    }
}

/// Random SCG with between 1 and `max_nodes` Bernoulli nodes and 1-4
/// polynomial costs.
///
/// Probabilities are `0.05 + 0.9·σ(e)` for a random expression `e` of θ and
/// earlier samples, or constants; some nodes therefore do not depend on θ.
/// Costs are a constant times a product of up to two sample leaves and
/// optionally a random θ-expression.
pub fn random_scg(seed: u64, max_nodes: usize) -> ScgCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arena = GraphArena::new();
    let dim = rng.gen_range(1..=3);
    let theta = arena.register_param("theta", dim);
    let mut scg = Scg::new(arena, vec![theta]);
    let params = scg.arena_mut().param_vector(theta);
    let n = rng.gen_range(1..=max_nodes);
    let mut nodes = Vec::with_capacity(n);
    let mut sample_leaves: Vec<NodeId> = Vec::new();
    for _ in 0..n {
        let a = scg.arena_mut();
        let prob = if rng.gen_bool(0.2) {
            a.constant(rng.gen_range(0.2..0.8))
        } else {
            let mut pool = Vec::new();
            if rng.gen_bool(0.8) {
                pool.extend(&params);
            }
            for &l in &sample_leaves {
                if rng.gen_bool(0.4) {
                    pool.push(l);
                }
            }
            let e = random_expr(a, &mut rng, &pool, 3);
            let s = a.sigmoid(e);
            let s = a.scale(0.9, s);
            let lo = a.constant(0.05);
            a.add(lo, s)
        };
        let id = bernoulli(&mut scg, prob).expect("bernoulli");
        nodes.push(id);
        sample_leaves.push(scg.stochastic(id).unwrap().leaf);
    }
    let n_costs = rng.gen_range(1..=4);
    for _ in 0..n_costs {
        let a = scg.arena_mut();
        let mut c = a.constant(rng.gen_range(-2.0..2.0));
        for _ in 0..rng.gen_range(0..=2) {
            let l = sample_leaves[rng.gen_range(0..sample_leaves.len())];
            c = a.mul(c, l);
        }
        if rng.gen_bool(0.5) {
            let e = random_expr(a, &mut rng, &params, 2);
            c = a.mul(c, e);
        }
        scg.add_cost(c).expect("cost");
    }
    let point = random_point(&mut rng, dim);
    ScgCase {
        scg,
        theta,
        dim,
        point,
        nodes,
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Central first difference, written separately from the library oracle.
pub fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += h;
            dn[i] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

/// Central second differences, row-major. Diagonal entries use the
/// three-point stencil.
pub fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let n = x.len();
    let at = |d: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, s) in d {
            y[i] += s * h;
        }
        f(&y)
    };
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = if i == j {
                (at(&[(i, 1.0)]) - 2.0 * f(x) + at(&[(i, -1.0)])) / (h * h)
            } else {
                (at(&[(i, 1.0), (j, 1.0)]) - at(&[(i, 1.0), (j, -1.0)]) - at(&[(i, -1.0), (j, 1.0)])
                    + at(&[(i, -1.0), (j, -1.0)]))
                    / (4.0 * h * h)
            };
        }
    }
    out
}

/// Largest gap between enumerated Hessian-vector products and the explicit
/// Hessian applied to the same vector, on the toy and on a two-step IPD.
/// The toy product is also checked against the closed form `−4·v`.
pub fn hvp_max_error() -> f64 {
    use dice_core::estimators::{dice_objective, hvp, hvp_over};
    use dice_core::experiments::toy_scg;
    use dice_core::ipd::{new_ipd, IpdConfig};
    use dice_core::oracle::enumerate_many;

    let mut worst = 0.0f64;
    let (mut scg, theta) = toy_scg().unwrap();
    let obj = dice_objective(&mut scg).unwrap();
    let v = [0.7];
    let hv = hvp(&mut scg, &obj, theta, &v).unwrap();
    let h = scg.arena_mut().derivative_tensor(obj.root, &[theta], 2).unwrap();
    for t in [0.2, 0.5, 0.8] {
        let b = Binding::new().with(theta, vec![t]);
        let e_hv = enumerate_many(&scg, &hv, &b).unwrap().0[0];
        let e_h = enumerate_many(&scg, &h, &b).unwrap().0[0];
        worst = worst.max((e_hv - e_h * v[0]).abs()).max((e_hv + 4.0 * v[0]).abs());
    }

    let cfg = IpdConfig {
        horizon: 2,
        ..Default::default()
    };
    let (mut scg, ipd, t1, t2) = new_ipd(&cfg).unwrap();
    let b = Binding::new()
        .with(t1, vec![0.2, -0.5, 0.9, 0.1, -0.3])
        .with(t2, vec![-0.7, 0.4, 0.0, 0.6, 0.3]);
    let v: Vec<f64> = (0..10).map(|i| ((i * 7 % 10) as f64 - 4.5) / 3.0).collect();
    for agent in 0..2 {
        let obj = ipd.objective(&mut scg, agent, None).unwrap();
        let hv = hvp_over(scg.arena_mut(), obj.root, &[t1, t2], &v).unwrap();
        let h = scg.arena_mut().derivative_tensor(obj.root, &[t1, t2], 2).unwrap();
        let e_hv = enumerate_many(&scg, &hv, &b).unwrap().0;
        let e_h = enumerate_many(&scg, &h, &b).unwrap().0;
        for i in 0..10 {
            let explicit: f64 = (0..10).map(|j| e_h[i * 10 + j] * v[j]).sum();
            worst = worst.max((e_hv[i] - explicit).abs());
        }
    }
    worst
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
