//! Base distributions at the latent end of a flow.
//!
//! Two kinds are supported: the standard isotropic Gaussian and a resampled
//! Gaussian whose shape is set by a learned acceptance network `a(z)` in
//! (0, 1). Sampling from the latter draws Gaussian proposals and accepts each
//! with probability `a(z)`; after `T - 1` rejections the `T`-th proposal is
//! taken unconditionally. Its density is
//!
//! ```text
//! p(z) = [ (1 - c0) / Z * a(z) + c0 ] * N(z; 0, I),   c0 = (1 - Z)^(T - 1)
//! ```
//!
//! where `Z = E_N[a]` is the acceptance rate. `Z` is tracked as an
//! exponential moving average of Monte-Carlo estimates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, DenseGrads, DenseNet, Tape};
use crate::rng;

pub const Z_FLOOR: f64 = 1e-6;

#[inline]
pub fn ln_2pi() -> f64 {
    std::f64::consts::TAU.ln()
}

/// Log-density of the standard normal in `z.len()` dimensions.
pub fn gaussian_log_prob(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * z.len() as f64 * ln_2pi() - 0.5 * sq
}

/// `n` standard-normal vectors of dimension `h`, row-major.
pub fn gaussian_sample(h: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, rng::GAUSSIAN);
    rng::standard_normal_vec(&mut rng, h * n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    Gaussian,
    Resampling,
}

impl std::fmt::Display for BaseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaseKind::Gaussian => "gaussian",
            BaseKind::Resampling => "resampling",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResamplingConfig {
    /// Maximum number of proposals per sample (`T`).
    pub truncation: usize,
    pub ema_decay: f64,
    /// Monte-Carlo samples per normalizer update.
    pub n_mc: usize,
    /// Monte-Carlo samples for the initial normalizer estimate.
    pub init_samples: usize,
    pub hidden: Vec<usize>,
}

impl Default for ResamplingConfig {
    fn default() -> Self {
        Self {
            truncation: 100,
            ema_decay: 0.95,
            n_mc: 1024,
            init_samples: 4096,
            hidden: vec![94, 94],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBase {
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplingBase {
    dim: usize,
    accept_net: DenseNet,
    truncation: usize,
    z_ema: f64,
    ema_decay: f64,
}

/// Monte-Carlo acceptance estimate over fresh Gaussian draws, with the tape
/// needed to route a normalizer gradient back into the acceptance network.
#[derive(Debug)]
pub struct AcceptanceEstimate {
    pub mean: f64,
    tape: Tape,
}

impl ResamplingBase {
    pub fn new<R: Rng + ?Sized>(dim: usize, config: &ResamplingConfig, rng: &mut R) -> Result<Self> {
        if config.init_samples == 0 {
            return Err(Error::Config("resampling init_samples must be positive".into()));
        }
        let mut dims = vec![dim];
        dims.extend(&config.hidden);
        dims.push(1);
        let accept_net = DenseNet::mlp(&dims, Activation::Tanh, Activation::Sigmoid, false, rng)?;
        let mut base = Self::from_parts(dim, accept_net, config.truncation, 1.0, config.ema_decay)?;
        let eps = rng::standard_normal_vec(rng, dim * config.init_samples);
        let est = base.estimate_acceptance(&eps, config.init_samples)?;
        base.z_ema = est.mean.clamp(Z_FLOOR, 1.0);
        Ok(base)
    }

    pub fn from_parts(dim: usize, accept_net: DenseNet, truncation: usize, z_ema: f64, ema_decay: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("base dimension must be positive".into()));
        }
        if accept_net.input_dim() != dim || accept_net.output_dim() != 1 {
            return Err(Error::Shape(format!(
                "acceptance network maps {}->{}, expected {dim}->1",
                accept_net.input_dim(),
                accept_net.output_dim()
            )));
        }
        if accept_net.layers().last().map(Dense::activation) != Some(Activation::Sigmoid) {
            return Err(Error::Config("acceptance network must end in a sigmoid".into()));
        }
        if truncation == 0 || truncation > i32::MAX as usize {
            return Err(Error::Config(format!("truncation {truncation} out of range")));
        }
        if !(0.0..=1.0).contains(&ema_decay) {
            return Err(Error::Config(format!("ema_decay {ema_decay} outside [0, 1]")));
        }
        if !(z_ema > 0.0 && z_ema <= 1.0) {
            return Err(Error::State(format!("normalizer {z_ema} outside (0, 1]")));
        }
        Ok(Self {
            dim,
            accept_net,
            truncation,
            z_ema,
            ema_decay,
        })
    }

    /// Acceptance fixed at `p` everywhere: a zero-weight network whose output
    /// bias is `logit(p)`. `p = 1` saturates the sigmoid to exactly 1.
    pub fn constant(dim: usize, p: f64, truncation: usize, z_ema: f64, ema_decay: f64) -> Result<Self> {
        let logit = if p >= 1.0 { 40.0 } else { (p / (1.0 - p)).ln() };
        let layer = Dense::new(dim, 1, Activation::Sigmoid, vec![0.0; dim], vec![logit])?;
        Self::from_parts(dim, DenseNet::new(vec![layer])?, truncation, z_ema, ema_decay)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn z_ema(&self) -> f64 {
        self.z_ema
    }

    pub fn set_z_ema(&mut self, z: f64) -> Result<()> {
        if !(z > 0.0 && z <= 1.0) {
            return Err(Error::State(format!("normalizer {z} outside (0, 1]")));
        }
        self.z_ema = z;
        Ok(())
    }

    pub fn ema_decay(&self) -> f64 {
        self.ema_decay
    }

    pub fn accept_net(&self) -> &DenseNet {
        &self.accept_net
    }

    pub fn accept_net_mut(&mut self) -> &mut DenseNet {
        &mut self.accept_net
    }

    pub fn acceptance(&self, z: &[f64]) -> Result<f64> {
        Ok(self.accept_net.eval_batch(z, 1)?[0])
    }

    /// `(c1, c0)` such that `p(z) = (c1 * a(z) + c0) * N(z)`.
    fn mix_coefficients(&self) -> Result<(f64, f64)> {
        let z = self.z_ema;
        if !(z > 0.0) {
            return Err(Error::State(format!("normalizer {z} is not positive")));
        }
        let c0 = (1.0 - z).powi(self.truncation as i32 - 1);
        Ok(((1.0 - c0) / z, c0))
    }

    /// `d(c1)/dZ` and `d(c0)/dZ`.
    fn mix_coefficient_slopes(&self) -> (f64, f64) {
        let z = self.z_ema;
        let t = self.truncation as i32;
        let c0 = (1.0 - z).powi(t - 1);
        let dc0 = if t <= 1 { 0.0 } else { -((t - 1) as f64) * (1.0 - z).powi(t - 2) };
        let dc1 = (-dc0 * z - (1.0 - c0)) / (z * z);
        (dc1, dc0)
    }

    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        Ok(self.log_prob_batch(z, 1)?[0])
    }

    pub fn log_prob_batch(&self, z: &[f64], rows: usize) -> Result<Vec<f64>> {
        let (c1, c0) = self.mix_coefficients()?;
        let alpha = self.accept_net.eval_batch(z, rows)?;
        Ok(z.chunks(self.dim)
            .zip(&alpha)
            .map(|(zr, a)| (c1 * a + c0).ln() + gaussian_log_prob(zr))
            .collect())
    }

    /// Mean acceptance over the given Gaussian draws.
    pub fn estimate_acceptance(&self, eps: &[f64], rows: usize) -> Result<AcceptanceEstimate> {
        if rows == 0 {
            return Err(Error::Usage("acceptance estimate needs at least one sample".into()));
        }
        let tape = self.accept_net.forward_batch(eps, rows)?;
        let mean = tape.output().iter().sum::<f64>() / rows as f64;
        Ok(AcceptanceEstimate { mean, tape })
    }

    /// Folds a fresh acceptance estimate into the moving average.
    pub fn fold_estimate(&mut self, mean: f64) {
        let next = self.ema_decay * self.z_ema + (1.0 - self.ema_decay) * mean;
        self.z_ema = next.clamp(Z_FLOOR, 1.0);
    }

    /// Draws `n_mc` Gaussian samples from `seed` and folds their mean
    /// acceptance into the normalizer. Returns the new value.
    pub fn update_z(&mut self, n_mc: usize, seed: u64) -> Result<f64> {
        let mut rng = rng::stream(seed, rng::MONTE_CARLO);
        let eps = rng::standard_normal_vec(&mut rng, self.dim * n_mc);
        let est = self.estimate_acceptance(&eps, n_mc)?;
        self.fold_estimate(est.mean);
        Ok(self.z_ema)
    }

    /// Truncated rejection sampling. Proposals come from the same stream as
    /// [`gaussian_sample`] with the same seed; accept/reject decisions use a
    /// separate stream.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        let mut proposals = rng::stream(seed, rng::GAUSSIAN);
        let mut decisions = rng::stream(seed, rng::ACCEPT);
        let mut out = Vec::with_capacity(n * self.dim);
        let mut z = vec![0.0; self.dim];
        for _ in 0..n {
            for trial in 1..=self.truncation {
                rng::fill_standard_normal(&mut proposals, &mut z);
                if trial == self.truncation {
                    break;
                }
                let a = self.acceptance(&z)?;
                let u: f64 = decisions.random();
                if u < a {
                    break;
                }
            }
            out.extend_from_slice(&z);
        }
        Ok(out)
    }

    /// Log-density of a batch plus its reverse pass.
    ///
    /// `weights[i]` is the loss cotangent of `log p(z_i)`. Returns the
    /// log-densities and `dL/dz`; acceptance-network gradients are added into
    /// `grads`. With `normalizer`, the gradient of the batch estimate of `Z`
    /// stands in for that of the moving average (whose value is used).
    pub(crate) fn log_prob_backward(
        &self,
        z: &[f64],
        rows: usize,
        weights: &[f64],
        normalizer: Option<&AcceptanceEstimate>,
        grads: &mut DenseGrads,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (c1, c0) = self.mix_coefficients()?;
        let tape = self.accept_net.forward_batch(z, rows)?;
        let alpha = tape.output();
        let mut logp = Vec::with_capacity(rows);
        let mut d_alpha = Vec::with_capacity(rows);
        let mut d_z_norm = 0.0;
        let (dc1, dc0) = self.mix_coefficient_slopes();
        for ((zr, a), w) in z.chunks(self.dim).zip(alpha).zip(weights) {
            let mix = c1 * a + c0;
            logp.push(mix.ln() + gaussian_log_prob(zr));
            d_alpha.push(w * c1 / mix);
            d_z_norm += w * (dc1 * a + dc0) / mix;
        }
        let mut dz = self.accept_net.backward_batch(&tape, &d_alpha, grads)?;
        for ((g, zv), w) in dz
            .chunks_mut(self.dim)
            .zip(z.chunks(self.dim))
            .zip(weights)
        {
            for (gi, zi) in g.iter_mut().zip(zv) {
                *gi -= w * zi;
            }
        }
        if let Some(est) = normalizer {
            let n = est.tape.rows();
            let share = vec![d_z_norm / n as f64; n];
            self.accept_net.backward_batch(&est.tape, &share, grads)?;
        }
        Ok((logp, dz))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseDistribution {
    Gaussian(GaussianBase),
    Resampling(ResamplingBase),
}

impl BaseDistribution {
    pub fn gaussian(dim: usize) -> Self {
        BaseDistribution::Gaussian(GaussianBase { dim })
    }

    pub fn kind(&self) -> BaseKind {
        match self {
            BaseDistribution::Gaussian(_) => BaseKind::Gaussian,
            BaseDistribution::Resampling(_) => BaseKind::Resampling,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            BaseDistribution::Gaussian(g) => g.dim,
            BaseDistribution::Resampling(r) => r.dim,
        }
    }

    pub fn as_resampling(&self) -> Option<&ResamplingBase> {
        match self {
            BaseDistribution::Resampling(r) => Some(r),
            BaseDistribution::Gaussian(_) => None,
        }
    }

    pub fn as_resampling_mut(&mut self) -> Option<&mut ResamplingBase> {
        match self {
            BaseDistribution::Resampling(r) => Some(r),
            BaseDistribution::Gaussian(_) => None,
        }
    }

    pub fn log_prob_batch(&self, z: &[f64], rows: usize) -> Result<Vec<f64>> {
        match self {
            BaseDistribution::Gaussian(g) => Ok(z.chunks(g.dim).take(rows).map(gaussian_log_prob).collect()),
            BaseDistribution::Resampling(r) => r.log_prob_batch(z, rows),
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        match self {
            BaseDistribution::Gaussian(g) => Ok(gaussian_sample(g.dim, n, seed)),
            BaseDistribution::Resampling(r) => r.sample(n, seed),
        }
    }

    pub fn num_params(&self) -> usize {
        self.as_resampling().map_or(0, |r| r.accept_net.num_params())
    }

    pub(crate) fn zero_grads(&self) -> Option<DenseGrads> {
        self.as_resampling().map(|r| r.accept_net.zero_grads())
    }

    pub(crate) fn log_prob_backward(
        &self,
        z: &[f64],
        rows: usize,
        weights: &[f64],
        normalizer: Option<&AcceptanceEstimate>,
        grads: Option<&mut DenseGrads>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        match (self, grads) {
            (BaseDistribution::Gaussian(g), _) => {
                let logp = z.chunks(g.dim).map(gaussian_log_prob).collect();
                let dz = z
                    .chunks(g.dim)
                    .zip(weights)
                    .flat_map(|(zr, w)| zr.iter().map(move |v| -w * v))
                    .collect();
                Ok((logp, dz))
            }
            (BaseDistribution::Resampling(r), Some(grads)) => r.log_prob_backward(z, rows, weights, normalizer, grads),
            (BaseDistribution::Resampling(_), None) => {
                Err(Error::Usage("resampling base needs a gradient buffer".into()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    fn small_config() -> ResamplingConfig {
        ResamplingConfig {
            hidden: vec![8, 8],
            init_samples: 4096,
            ..ResamplingConfig::default()
        }
    }

    #[test]
    fn gaussian_closed_forms() {
        assert_eq!(gaussian_log_prob(&[0.0, 0.0]), -(std::f64::consts::TAU.ln()));
        assert!((gaussian_log_prob(&[0.0, 0.0]) + 1.8378770664).abs() < 1e-10);
        assert!((gaussian_log_prob(&[1.0]) + 1.4189385332).abs() < 1e-10);
    }

    #[test]
    fn gaussian_matches_coordinatewise_product() {
        let z = gaussian_sample(7, 20, 3);
        for zr in z.chunks(7) {
            let pdf: f64 = zr
                .iter()
                .map(|v| (-0.5 * v * v).exp() / std::f64::consts::TAU.sqrt())
                .product();
            assert!((gaussian_log_prob(zr) - pdf.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_sampling_is_seeded() {
        assert_eq!(gaussian_sample(3, 5, 42), gaussian_sample(3, 5, 42));
        assert_ne!(gaussian_sample(3, 1, 42)[0], gaussian_sample(3, 1, 43)[0]);
    }

    #[test]
    fn gaussian_sample_moments() {
        let n = 1_000_000;
        let s = gaussian_sample(1, n, 9);
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn full_acceptance_reduces_to_gaussian() {
        for t in [1, 2, 100] {
            let base = ResamplingBase::constant(3, 1.0, t, 1.0, 0.95).unwrap();
            for z in gaussian_sample(3, 10, 1).chunks(3) {
                assert_eq!(base.log_prob(z).unwrap(), gaussian_log_prob(z));
            }
        }
    }

    #[test]
    fn single_proposal_reduces_to_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut base = ResamplingBase::new(2, &small_config(), &mut rng).unwrap();
        base.set_z_ema(0.37).unwrap();
        base.truncation = 1;
        for z in gaussian_sample(2, 10, 2).chunks(2) {
            assert_eq!(base.log_prob(z).unwrap(), gaussian_log_prob(z));
        }
        let samples = base.sample(50, 8).unwrap();
        assert_eq!(samples, gaussian_sample(2, 50, 8));
    }

    #[test]
    fn two_proposals_hand_formula() {
        // T = 2: p(z) = [a(z) + (1 - Z)] N(z).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut base = ResamplingBase::new(2, &small_config(), &mut rng).unwrap();
        base.truncation = 2;
        let zeta = base.z_ema();
        for z in [[0.0, 0.0], [1.0, -0.5], [-2.0, 0.3]] {
            let a = base.acceptance(&z).unwrap();
            let want = (a + 1.0 - zeta).ln() + gaussian_log_prob(&z);
            assert!((base.log_prob(&z).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn full_acceptance_sampler_is_gaussian_stream() {
        let base = ResamplingBase::constant(3, 1.0, 100, 1.0, 0.95).unwrap();
        assert_eq!(base.sample(40, 17).unwrap(), gaussian_sample(3, 40, 17));
    }

    #[test]
    fn constant_acceptance_update() {
        let mut base = ResamplingBase::constant(2, 0.5, 100, 0.9, 0.0).unwrap();
        assert_eq!(base.update_z(64, 1).unwrap(), 0.5);
        let mut frozen = ResamplingBase::constant(2, 0.5, 100, 0.9, 1.0).unwrap();
        assert_eq!(frozen.update_z(64, 1).unwrap(), 0.9);
    }

    #[test]
    fn repeated_updates_track_monte_carlo_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut base = ResamplingBase::new(2, &small_config(), &mut rng).unwrap();
        // Perturb the starting point so convergence is actually exercised.
        base.set_z_ema(0.99).unwrap();
        for step in 0..400 {
            base.update_z(1024, 1000 + step).unwrap();
        }
        let n = 1_000_000;
        let eps = gaussian_sample(2, n, 77);
        let direct = base.estimate_acceptance(&eps, n).unwrap().mean;
        let rel = (base.z_ema() - direct).abs() / direct;
        assert!(rel < 0.02, "ema {} vs direct {direct}", base.z_ema());
    }

    #[test]
    fn non_positive_normalizer_is_a_state_error() {
        let mut base = ResamplingBase::constant(2, 0.5, 10, 0.5, 0.5).unwrap();
        base.z_ema = 0.0;
        assert!(matches!(base.log_prob(&[0.0, 0.0]), Err(Error::State(_))));
        assert!(base.set_z_ema(-1.0).is_err());
    }
}
