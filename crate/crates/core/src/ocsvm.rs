//! One-class SVM baseline (nu formulation, RBF kernel).
//!
//! The dual problem
//!
//! ```text
//! min 1/2 a^T K a   s.t.  0 <= a_i <= 1 / (nu N),  sum a_i = 1
//! ```
//!
//! is solved by pairwise updates on the maximal violating pair. The decision
//! function is `sum_i a_i k(x, x_i) - rho`; larger means more typical.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcSvmConfig {
    pub nu: f64,
    /// RBF width; `None` selects `1 / (h * Var(train))`.
    pub gamma: Option<f64>,
    /// Stopping threshold on the maximal KKT violation.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OcSvmConfig {
    fn default() -> Self {
        Self {
            nu: 0.5,
            gamma: None,
            tol: 1e-6,
            max_iter: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcSvmModel {
    dim: usize,
    /// Row-major support vectors (training rows with positive weight).
    support: Vec<f64>,
    alphas: Vec<f64>,
    rho: f64,
    gamma: f64,
    nu: f64,
}

/// Full solver output, including the dual over every training row.
#[derive(Debug, Clone)]
pub struct OcSvmFit {
    pub model: OcSvmModel,
    pub dual: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub violation: f64,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    (-gamma * sq_dist(a, b)).exp()
}

/// `1 / (h * Var)` with the variance taken over every entry of the data.
pub fn default_gamma(data: &[f64], dim: usize) -> f64 {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (dim as f64 * var)
    } else {
        1.0 / dim as f64
    }
}

fn kernel_row(data: &[f64], dim: usize, gamma: f64, i: usize) -> Vec<f64> {
    let xi = &data[i * dim..(i + 1) * dim];
    data.chunks(dim).map(|xj| rbf(gamma, xi, xj)).collect()
}

/// Solves the dual on `rows` training vectors.
pub fn fit(data: &[f64], rows: usize, dim: usize, config: &OcSvmConfig) -> Result<OcSvmFit> {
    if rows < 2 {
        return Err(Error::Data(format!("one-class SVM needs at least 2 training rows, got {rows}")));
    }
    if dim == 0 || data.len() != rows * dim {
        return Err(Error::Shape(format!("{} values do not form {rows} rows of dimension {dim}", data.len())));
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("training data must be finite".into()));
    }
    let nu = config.nu;
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::Config(format!("nu must lie in (0, 1], got {nu}")));
    }
    let gamma = config.gamma.unwrap_or_else(|| default_gamma(data, dim));
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    if !(config.tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {}", config.tol)));
    }

    let n = rows;
    let upper = 1.0 / (nu * n as f64);
    let mut alpha = vec![1.0 / n as f64; n];
    if upper < alpha[0] {
        return Err(Error::Config("box bound below the uniform weight".into()));
    }
    let diag = 1.0;

    // G = K a, built row by row.
    let mut grad: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &data[i * dim..(i + 1) * dim];
            let mut acc = 0.0;
            for (xj, a) in data.chunks(dim).zip(&alpha) {
                acc += a * rbf(gamma, xi, xj);
            }
            acc
        })
        .collect();

    let mut iterations = 0;
    let violation = loop {
        // i: most negative gradient among rows that can grow;
        // j: most positive among rows that can shrink.
        let mut i_best: Option<usize> = None;
        let mut j_best: Option<usize> = None;
        for k in 0..n {
            if alpha[k] < upper && i_best.is_none_or(|i| grad[k] < grad[i]) {
                i_best = Some(k);
            }
            if alpha[k] > 0.0 && j_best.is_none_or(|j| grad[k] > grad[j]) {
                j_best = Some(k);
            }
        }
        let (i, j) = match (i_best, j_best) {
            (Some(i), Some(j)) => (i, j),
            _ => break 0.0,
        };
        let gap = grad[j] - grad[i];
        if gap <= config.tol || i == j {
            break gap.max(0.0);
        }
        if iterations >= config.max_iter {
            return Err(Error::Solver {
                iterations,
                residual: gap,
            });
        }
        iterations += 1;

        let ki = kernel_row(data, dim, gamma, i);
        let kj = kernel_row(data, dim, gamma, j);
        let eta = (diag + diag - 2.0 * ki[j]).max(1e-12);
        let step = (gap / eta).min(upper - alpha[i]).min(alpha[j]);
        alpha[i] += step;
        alpha[j] -= step;
        // Snap bounds so the active-set tests above stay exact.
        if upper - alpha[i] <= 1e-15 * upper {
            alpha[i] = upper;
        }
        if alpha[j] <= 1e-15 * upper {
            alpha[j] = 0.0;
        }
        for ((g, a), b) in grad.iter_mut().zip(&ki).zip(&kj) {
            *g += step * (a - b);
        }
    };

    let rho = {
        let free: Vec<f64> = (0..n)
            .filter(|&k| alpha[k] > 0.0 && alpha[k] < upper)
            .map(|k| grad[k])
            .collect();
        if free.is_empty() {
            let lo = (0..n)
                .filter(|&k| alpha[k] >= upper)
                .map(|k| grad[k])
                .fold(f64::NEG_INFINITY, f64::max);
            let hi = (0..n)
                .filter(|&k| alpha[k] <= 0.0)
                .map(|k| grad[k])
                .fold(f64::INFINITY, f64::min);
            match (lo.is_finite(), hi.is_finite()) {
                (true, true) => 0.5 * (lo + hi),
                (true, false) => lo,
                (false, true) => hi,
                (false, false) => 0.0,
            }
        } else {
            free.iter().sum::<f64>() / free.len() as f64
        }
    };

    let objective = 0.5 * alpha.iter().zip(&grad).map(|(a, g)| a * g).sum::<f64>();
    let mut support = Vec::new();
    let mut weights = Vec::new();
    for (k, &a) in alpha.iter().enumerate() {
        if a > 0.0 {
            support.extend_from_slice(&data[k * dim..(k + 1) * dim]);
            weights.push(a);
        }
    }
    Ok(OcSvmFit {
        model: OcSvmModel {
            dim,
            support,
            alphas: weights,
            rho,
            gamma,
            nu,
        },
        dual: alpha,
        objective,
        iterations,
        violation,
    })
}

impl OcSvmModel {
    pub fn from_parts(dim: usize, support: Vec<f64>, alphas: Vec<f64>, rho: f64, gamma: f64, nu: f64) -> Result<Self> {
        if dim == 0 || support.len() != alphas.len() * dim {
            return Err(Error::Shape("support vectors and weights disagree".into()));
        }
        if !(gamma > 0.0) || !(nu > 0.0 && nu <= 1.0) || !rho.is_finite() {
            return Err(Error::Config("invalid one-class SVM parameters".into()));
        }
        Ok(Self {
            dim,
            support,
            alphas,
            rho,
            gamma,
            nu,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn num_support(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("expected dimension {}, got {}", self.dim, x.len())));
        }
        let mut acc = 0.0;
        for (sv, a) in self.support.chunks(self.dim).zip(&self.alphas) {
            acc += a * rbf(self.gamma, x, sv);
        }
        Ok(acc - self.rho)
    }

    pub fn score_batch(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        if x.len() != rows * self.dim {
            return Err(Error::Shape(format!(
                "{} values do not form {rows} rows of dimension {}",
                x.len(),
                self.dim
            )));
        }
        x.par_chunks(self.dim).map(|r| self.score(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn objective(data: &[f64], dim: usize, gamma: f64, a: &[f64]) -> f64 {
        let mut s = 0.0;
        for (i, xi) in data.chunks(dim).enumerate() {
            for (j, xj) in data.chunks(dim).enumerate() {
                s += a[i] * a[j] * rbf(gamma, xi, xj);
            }
        }
        0.5 * s
    }

    /// Euclidean projection onto `{0 <= a <= c, sum a = 1}` by bisection.
    fn project(v: &[f64], c: f64) -> Vec<f64> {
        let (mut lo, mut hi) = (-1e3, 1e3);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let s: f64 = v.iter().map(|x| (x - mid).clamp(0.0, c)).sum();
            if s > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let l = 0.5 * (lo + hi);
        v.iter().map(|x| (x - l).clamp(0.0, c)).collect()
    }

    fn reference_solve(data: &[f64], dim: usize, gamma: f64, nu: f64) -> f64 {
        let n = data.len() / dim;
        let c = 1.0 / (nu * n as f64);
        let k: Vec<Vec<f64>> = data
            .chunks(dim)
            .map(|xi| data.chunks(dim).map(|xj| rbf(gamma, xi, xj)).collect())
            .collect();
        let mut a = vec![1.0 / n as f64; n];
        for _ in 0..20_000 {
            let g: Vec<f64> = k.iter().map(|row| row.iter().zip(&a).map(|(x, y)| x * y).sum()).collect();
            let v: Vec<f64> = a.iter().zip(&g).map(|(x, y)| x - 0.1 * y).collect();
            a = project(&v, c);
        }
        objective(data, dim, gamma, &a)
    }

    #[test]
    fn identical_pair_splits_weight() {
        for nu in [0.1, 0.5, 1.0] {
            let data = [0.3, -1.0, 0.3, -1.0];
            let fit = fit(&data, 2, 2, &OcSvmConfig { nu, ..Default::default() }).unwrap();
            assert_eq!(fit.dual, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn nu_one_forces_uniform_weights() {
        let mut rng = rng::stream(3, 0);
        let data: Vec<f64> = (0..14).map(|_| rng.random::<f64>()).collect();
        let fit = fit(&data, 7, 2, &OcSvmConfig { nu: 1.0, ..Default::default() }).unwrap();
        assert!(fit.dual.iter().all(|&a| a == 1.0 / 7.0));
    }

    #[test]
    fn matches_projected_gradient_reference() {
        let mut rng = rng::stream(11, 0);
        for _ in 0..5 {
            let data: Vec<f64> = (0..10).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let nu = rng.random_range(0.2..0.9);
            let cfg = OcSvmConfig {
                nu,
                gamma: Some(0.7),
                ..Default::default()
            };
            let fit = fit(&data, 5, 2, &cfg).unwrap();
            let reference = reference_solve(&data, 2, 0.7, nu);
            assert!((fit.objective - reference).abs() < 1e-4, "{} vs {reference}", fit.objective);
            let sum: f64 = fit.dual.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            let c = 1.0 / (nu * 5.0);
            assert!(fit.dual.iter().all(|&a| (-1e-12..=c + 1e-12).contains(&a)));
        }
    }

    #[test]
    fn score_is_kernel_sum_minus_rho() {
        let model = OcSvmModel::from_parts(2, vec![0.0, 0.0, 1.0, 0.0], vec![0.25, 0.75], 0.1, 0.5, 0.5).unwrap();
        let x = [0.5, 1.0];
        let expect = 0.25 * (-0.5f64 * 1.25).exp() + 0.75 * (-0.5f64 * 1.25).exp() - 0.1;
        assert!((model.score(&x).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn kernel_decays_away_from_cluster() {
        let data = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let fit = fit(&data, 3, 2, &OcSvmConfig::default()).unwrap();
        let near = fit.model.score(&[1.0, 1.0]).unwrap();
        let far = fit.model.score(&[11.0, 1.0]).unwrap();
        assert!(near > far);
    }

    #[test]
    fn wide_kernel_gives_constant_score() {
        let data = [0.0, 0.0, 1.0, 2.0, -1.0, 0.5];
        let cfg = OcSvmConfig {
            gamma: Some(1e-14),
            ..Default::default()
        };
        let fit = fit(&data, 3, 2, &cfg).unwrap();
        let expect = 1.0 - fit.model.rho();
        for x in [[0.0, 0.0], [50.0, -3.0]] {
            assert!((fit.model.score(&x).unwrap() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(fit(&[1.0, 2.0], 1, 2, &OcSvmConfig::default()), Err(Error::Data(_))));
        let cfg = OcSvmConfig { nu: 0.0, ..Default::default() };
        assert!(matches!(fit(&[1.0, 2.0, 3.0, 4.0], 2, 2, &cfg), Err(Error::Config(_))));
        let cfg = OcSvmConfig {
            max_iter: 0,
            nu: 0.3,
            gamma: Some(1.0),
            ..Default::default()
        };
        assert!(matches!(fit(&[0.0, 1.0, 5.0, 2.0], 4, 1, &cfg), Err(Error::Solver { .. })));
    }
}
