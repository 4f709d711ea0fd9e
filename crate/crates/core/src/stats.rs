//! Deterministic reductions shared by the estimators and the oracles.

/// Pairwise (cascade) summation in index order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// `Σ w_i x_i` with pairwise summation.
pub fn weighted_sum(xs: &[f64], ws: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ws.len());
    let prods: Vec<f64> = xs.iter().zip(ws).map(|(x, w)| x * w).collect();
    pairwise_sum(&prods)
}

/// Mean and standard error of a set of samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimateStats {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

/// Running moments that merge deterministically (Chan et al.).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn empty() -> Self {
        Self {
            n: 0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    /// Two-pass moments of one block.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::empty();
        }
        let n = xs.len();
        let mean = pairwise_sum(xs) / n as f64;
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        Self {
            n,
            mean,
            m2: pairwise_sum(&dev),
        }
    }

    pub fn merge(self, other: Self) -> Self {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.n as f64 / n as f64;
        let m2 = self.m2 + other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64;
        Self { n, mean, m2 }
    }

    /// Merges blocks pairwise in index order.
    pub fn merge_all(blocks: &[Moments]) -> Moments {
        match blocks.len() {
            0 => Moments::empty(),
            1 => blocks[0],
            len => {
                let mid = len / 2;
                Self::merge_all(&blocks[..mid]).merge(Self::merge_all(&blocks[mid..]))
            }
        }
    }

    pub fn stats(&self) -> EstimateStats {
        let var = if self.n > 1 {
            self.m2 / (self.n - 1) as f64
        } else {
            0.0
        };
        EstimateStats {
            mean: self.mean,
            std_err: (var / self.n.max(1) as f64).sqrt(),
            n: self.n,
        }
    }
}

/// Pearson correlation. Returns 0 when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "pearson: length mismatch");
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mx = pairwise_sum(xs) / n;
    let my = pairwise_sum(ys) / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = Moments::of(xs);
    let sd = if m.n > 1 {
        (m.m2 / (m.n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (m.mean, sd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_ints() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(pairwise_sum(&xs), 5050.0);
    }

    #[test]
    fn merged_moments_match_single_block() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.25).collect();
        let whole = Moments::of(&xs);
        let blocks: Vec<Moments> = xs.chunks(64).map(Moments::of).collect();
        let merged = Moments::merge_all(&blocks);
        assert_eq!(merged.n, whole.n);
        assert!((merged.mean - whole.mean).abs() < 1e-12);
        assert!((merged.m2 - whole.m2).abs() < 1e-8 * whole.m2);
    }

    #[test]
    fn pearson_of_affine_map_is_one() {
        let xs = [1.0, 2.0, 5.0, -3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
        assert!((pearson(&xs, &ys) - 1.0).abs() < 1e-12);
        let zs: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &zs) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_sample_has_zero_std_err() {
        let s = Moments::of(&[3.5]).stats();
        assert_eq!(s.mean, 3.5);
        assert_eq!(s.std_err, 0.0);
        assert_eq!(s.n, 1);
    }
}
