//! Diagonal-covariance Gaussian mixtures.

use rand::Rng;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Components with less posterior mass than this keep their mean and
/// variance during an update; only their weight moves.
pub const MIN_COMPONENT_OCCUPANCY: f64 = 1.0;

pub const SPLIT_PERTURBATION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
    consts: Vec<f64>,
    inv_vars: Vec<Vec<f64>>,
}

/// `sum (x - m)^2 * iv` in four interleaved partial sums, which the
/// compiler can vectorize.
#[inline]
fn quad(x: &[f64], m: &[f64], iv: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (xc, mc, ic) = (x.chunks_exact(4), m.chunks_exact(4), iv.chunks_exact(4));
    let mut tail = 0.0;
    for ((a, b), c) in xc.remainder().iter().zip(mc.remainder()).zip(ic.remainder()) {
        let d = a - b;
        tail += d * d * c;
    }
    for ((xs, ms), is) in xc.zip(mc).zip(ic) {
        for l in 0..4 {
            let d = xs[l] - ms[l];
            acc[l] += d * d * is[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl DiagGmm {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || vars.len() != k {
            return Err(Error::InvalidParameter(format!(
                "mixture needs matching non-empty weights/means/variances ({k}/{}/{})",
                means.len(),
                vars.len()
            )));
        }
        let dims = means[0].len();
        if means.iter().chain(&vars).any(|v| v.len() != dims) {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: means.iter().chain(&vars).map(Vec::len).find(|&l| l != dims).unwrap_or(0),
            });
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter(format!("invalid mixture weights {weights:?}")));
        }
        if vars.iter().flatten().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter("variances must be positive and finite".into()));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut g = Self {
            weights,
            means,
            vars,
            consts: Vec::new(),
            inv_vars: Vec::new(),
        };
        g.refresh();
        Ok(g)
    }

    pub fn single(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![var])
    }

    fn refresh(&mut self) {
        self.inv_vars = self.vars.iter().map(|v| v.iter().map(|x| 1.0 / x).collect()).collect();
        self.consts = self
            .weights
            .iter()
            .zip(&self.vars)
            .map(|(w, v)| w.ln() - 0.5 * v.iter().map(|x| LN_2PI + x.ln()).sum::<f64>())
            .collect();
    }

    pub fn dims(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn vars(&self) -> &[Vec<f64>] {
        &self.vars
    }

    /// Per-component `log w_k + log N(x; mu_k, var_k)` into `out`.
    pub fn component_log_likelihoods(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for ((c, m), iv) in self.consts.iter().zip(&self.means).zip(&self.inv_vars) {
            let q = quad(x, m, iv);
            out.push(c - 0.5 * q);
        }
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        if self.weights.len() == 1 {
            let q = quad(x, &self.means[0], &self.inv_vars[0]);
            return self.consts[0] - 0.5 * q;
        }
        // Streaming log-sum-exp over components, without a buffer.
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for ((c, m), iv) in self.consts.iter().zip(&self.means).zip(&self.inv_vars) {
            let q = quad(x, m, iv);
            let v = c - 0.5 * q;
            if v > max {
                sum = sum * (max - v).exp() + 1.0;
                max = v;
            } else if v > f64::NEG_INFINITY {
                sum += (v - max).exp();
            }
        }
        max + sum.ln()
    }

    /// Posteriors over components into `out`; returns the frame log-likelihood.
    pub fn posteriors(&self, x: &[f64], out: &mut Vec<f64>) -> f64 {
        self.component_log_likelihoods(x, out);
        let ll = log_sum_exp(out);
        for v in out.iter_mut() {
            *v = (*v - ll).exp();
        }
        ll
    }

    pub fn total_log_likelihood(&self, frames: &[&[f64]]) -> f64 {
        frames.iter().map(|x| self.log_likelihood(x)).sum()
    }

    /// One EM step on `frames`. Variances are floored per dimension;
    /// components with no posterior mass are dropped. Returns the updated
    /// mixture and the per-component occupancies it was estimated from.
    pub fn em_step(&self, frames: &[&[f64]], floor: &[f64]) -> (DiagGmm, Vec<f64>) {
        let k = self.num_components();
        let d = self.dims();
        let mut occ = vec![0.0; k];
        let mut s1 = vec![vec![0.0; d]; k];
        let mut s2 = vec![vec![0.0; d]; k];
        let mut post = Vec::with_capacity(k);
        for x in frames {
            self.posteriors(x, &mut post);
            for c in 0..k {
                let g = post[c];
                if g == 0.0 {
                    continue;
                }
                occ[c] += g;
                for ((a, b), (xi, mi)) in s1[c].iter_mut().zip(s2[c].iter_mut()).zip(x.iter().zip(&self.means[c])) {
                    let dx = xi - mi;
                    *a += g * dx;
                    *b += g * dx * dx;
                }
            }
        }
        let mut weights = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        let mut vars = Vec::with_capacity(k);
        let mut kept_occ = Vec::with_capacity(k);
        for c in 0..k {
            if occ[c] <= 0.0 {
                continue;
            }
            weights.push(occ[c]);
            kept_occ.push(occ[c]);
            if occ[c] < MIN_COMPONENT_OCCUPANCY {
                means.push(self.means[c].clone());
                vars.push(self.vars[c].clone());
                continue;
            }
            let shift: Vec<f64> = s1[c].iter().map(|s| s / occ[c]).collect();
            means.push(self.means[c].iter().zip(&shift).map(|(m, s)| m + s).collect());
            vars.push(
                s2[c]
                    .iter()
                    .zip(&shift)
                    .zip(floor)
                    .map(|((s, m), f)| (s / occ[c] - m * m).max(*f))
                    .collect(),
            );
        }
        if weights.is_empty() {
            return (self.clone(), vec![0.0; k]);
        }
        let gmm = DiagGmm::new(weights, means, vars).expect("EM update keeps a valid mixture");
        (gmm, kept_occ)
    }

    /// Split component `c` into two at `mean ± 0.1 * stddev * sign`, where
    /// the per-dimension signs come from `rng`; weight is halved.
    pub fn split_component<R: Rng>(&self, c: usize, rng: &mut R) -> DiagGmm {
        let mut weights = self.weights.clone();
        let mut means = self.means.clone();
        let mut vars = self.vars.clone();
        let half = weights[c] / 2.0;
        weights[c] = half;
        let signs: Vec<f64> = (0..self.dims())
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let offset: Vec<f64> = self.vars[c]
            .iter()
            .zip(&signs)
            .map(|(v, s)| SPLIT_PERTURBATION * v.sqrt() * s)
            .collect();
        let base = means[c].clone();
        means[c] = base.iter().zip(&offset).map(|(m, o)| m + o).collect();
        weights.push(half);
        means.push(base.iter().zip(&offset).map(|(m, o)| m - o).collect());
        vars.push(self.vars[c].clone());
        DiagGmm::new(weights, means, vars).expect("split keeps a valid mixture")
    }

    /// Moment-matched single Gaussian.
    pub fn merged(&self) -> DiagGmm {
        let d = self.dims();
        let mut mean = vec![0.0; d];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (a, b) in mean.iter_mut().zip(m) {
                *a += w * b;
            }
        }
        let mut var = vec![0.0; d];
        for ((w, m), v) in self.weights.iter().zip(&self.means).zip(&self.vars) {
            for i in 0..d {
                var[i] += w * (v[i] + (m[i] - mean[i]).powi(2));
            }
        }
        DiagGmm::single(mean, var).expect("merged moments are valid")
    }

    pub(crate) fn raw_parts(&self) -> (&[f64], &[Vec<f64>], &[Vec<f64>]) {
        (&self.weights, &self.means, &self.vars)
    }
}

/// Mean and floored variance of `frames`.
pub fn moments(frames: &[&[f64]], floor: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = frames.len();
    if n == 0 {
        return None;
    }
    let d = frames[0].len();
    let mut mean = vec![0.0; d];
    for x in frames {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for x in frames {
        for ((s, v), m) in var.iter_mut().zip(x.iter()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for (v, f) in var.iter_mut().zip(floor) {
        *v = (*v / n as f64).max(*f);
    }
    Some((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_gaussian_density() {
        let g = DiagGmm::single(vec![0.0, 1.0], vec![1.0, 4.0]).unwrap();
        let want = -LN_2PI - 0.5 * 4f64.ln() - 0.5 * (1.0 + 0.25);
        assert!((g.log_likelihood(&[1.0, 2.0]) - want).abs() < 1e-12);
    }

    #[test]
    fn split_halves_weight() {
        let g = DiagGmm::single(vec![0.0], vec![1.0]).unwrap();
        let s = g.split_component(0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s.weights(), &[0.5, 0.5]);
        let mut m: Vec<f64> = s.means().iter().map(|m| m[0]).collect();
        m.sort_by(f64::total_cmp);
        assert_eq!(m, vec![-0.1, 0.1]);
    }

    #[test]
    fn em_step_increases_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<Vec<f64>> = (0..200)
            .map(|i| vec![if i % 2 == 0 { -2.0 } else { 2.0 } + rng.gen_range(-0.5..0.5)])
            .collect();
        let frames: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let mut g = DiagGmm::single(vec![0.0], vec![1.0]).unwrap().split_component(0, &mut rng);
        let mut prev = g.total_log_likelihood(&frames);
        for _ in 0..10 {
            g = g.em_step(&frames, &[1e-3]).0;
            let ll = g.total_log_likelihood(&frames);
            assert!(ll >= prev - 1e-9);
            prev = ll;
        }
        let sum: f64 = g.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn merged_matches_moments() {
        let g = DiagGmm::new(vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], vec![vec![1.0], vec![1.0]]).unwrap();
        let m = g.merged();
        assert_eq!(m.means()[0], vec![0.0]);
        assert_eq!(m.vars()[0], vec![2.0]);
    }
}
