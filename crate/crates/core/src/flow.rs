//! Real-NVP flow: a stack of affine coupling layers over a base distribution.
//!
//! The model maps latent `z` to data `a` through layers `0..L` in order
//! (sampling direction). Densities are evaluated by running the inverse
//! layers `L-1..0` from `a` back to `z`:
//!
//! ```text
//! log q(a) = log p(z) + sum_l log|det d f_l^{-1}|
//! ```

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base::{AcceptanceEstimate, BaseDistribution, BaseKind, ResamplingBase, ResamplingConfig};
use crate::coupling::{half_mask, CouplingGrads, CouplingLayer};
use crate::error::{Error, Result};
use crate::nn::DenseGrads;
use crate::rng;

/// Rows per unit of work when scoring large batches.
const SCORE_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub dim: usize,
    pub num_coupling_layers: usize,
    /// Dense layers per conditioner network.
    pub conditioner_depth: usize,
    pub conditioner_width: usize,
    pub scale_clamp: f64,
    /// Zero the last conditioner layer so each coupling starts as identity.
    pub identity_init: bool,
    pub base_kind: BaseKind,
    pub resampling: ResamplingConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dim: 94,
            num_coupling_layers: 16,
            conditioner_depth: 4,
            conditioner_width: 94,
            scale_clamp: 3.0,
            identity_init: true,
            base_kind: BaseKind::Gaussian,
            resampling: ResamplingConfig::default(),
        }
    }
}

/// Decomposed log-likelihood of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityResult {
    pub total: f64,
    pub base_term: f64,
    pub logdet_term: f64,
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    dim: usize,
    layers: Vec<CouplingLayer>,
    base: BaseDistribution,
}

/// Gradients laid out like [`FlowModel::param_slices_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrads {
    pub layers: Vec<CouplingGrads>,
    pub base: Option<DenseGrads>,
}

impl FlowGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.layers.iter().flat_map(|l| l.slices()).collect();
        if let Some(b) = &self.base {
            v.extend(b.slices());
        }
        v
    }

    pub fn fill_zero(&mut self) {
        self.layers.iter_mut().for_each(CouplingGrads::fill_zero);
        if let Some(b) = &mut self.base {
            b.fill_zero();
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

impl FlowModel {
    pub fn new(config: &FlowConfig, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, rng::INIT);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(config: &FlowConfig, rng: &mut R) -> Result<Self> {
        if config.dim < 2 {
            return Err(Error::Config("flow dimension must be at least 2".into()));
        }
        let layers = (0..config.num_coupling_layers)
            .map(|l| {
                CouplingLayer::with_conditioners(
                    half_mask(config.dim, l),
                    config.conditioner_depth,
                    config.conditioner_width,
                    config.scale_clamp,
                    config.identity_init,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let base = match config.base_kind {
            BaseKind::Gaussian => BaseDistribution::gaussian(config.dim),
            BaseKind::Resampling => {
                BaseDistribution::Resampling(ResamplingBase::new(config.dim, &config.resampling, rng)?)
            }
        };
        Self::from_parts(config.dim, layers, base)
    }

    pub fn from_parts(dim: usize, layers: Vec<CouplingLayer>, base: BaseDistribution) -> Result<Self> {
        if base.dim() != dim {
            return Err(Error::Shape(format!("base has dimension {}, flow {dim}", base.dim())));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.dim() != dim {
                return Err(Error::Shape(format!("layer {l} has dimension {}, flow {dim}", layer.dim())));
            }
        }
        for (l, pair) in layers.windows(2).enumerate() {
            let covered = pair[0].mask().iter().zip(pair[1].mask()).all(|(a, b)| !(*a && *b));
            if !covered {
                return Err(Error::Config(format!(
                    "layers {l} and {} both pass some coordinate through untouched",
                    l + 1
                )));
            }
        }
        Ok(Self { dim, layers, base })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn base(&self) -> &BaseDistribution {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut BaseDistribution {
        &mut self.base
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(CouplingLayer::num_params).sum::<usize>() + self.base.num_params()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.layers.iter().flat_map(|l| l.param_slices()).collect();
        if let Some(r) = self.base.as_resampling() {
            v.extend(r.accept_net().param_slices());
        }
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.layers.iter_mut().flat_map(|l| l.param_slices_mut()).collect();
        if let Some(r) = self.base.as_resampling_mut() {
            v.extend(r.accept_net_mut().param_slices_mut());
        }
        v
    }

    pub fn zero_grads(&self) -> FlowGrads {
        FlowGrads {
            layers: self.layers.iter().map(CouplingLayer::zero_grads).collect(),
            base: self.base.zero_grads(),
        }
    }

    fn check_batch(&self, a: &[f64], rows: usize) -> Result<()> {
        if rows == 0 || a.len() != rows * self.dim {
            return Err(Error::Shape(format!(
                "expected a non-empty batch of {}-dimensional rows, got {} values for {rows} rows",
                self.dim,
                a.len()
            )));
        }
        if let Some(i) = a.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("input row {} is not finite", i / self.dim)));
        }
        Ok(())
    }

    /// Data to latent through the inverse layers; returns `z` and the summed
    /// log-dets per row.
    pub fn inverse_batch(&self, a: &[f64], rows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_batch(a, rows)?;
        let mut u = a.to_vec();
        let mut logdet = vec![0.0; rows];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (next, ld) = layer.inverse_batch(&u, rows).map_err(|e| e.at_layer(l))?;
            for (acc, v) in logdet.iter_mut().zip(&ld) {
                *acc += v;
            }
            u = next;
        }
        Ok((u, logdet))
    }

    /// Latent to data through the layers in order; returns `a` and the summed
    /// forward log-dets per row.
    pub fn forward_batch(&self, z: &[f64], rows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_batch(z, rows)?;
        let mut u = z.to_vec();
        let mut logdet = vec![0.0; rows];
        for (l, layer) in self.layers.iter().enumerate() {
            let (next, ld) = layer.forward_batch(&u, rows).map_err(|e| e.at_layer(l))?;
            for (acc, v) in logdet.iter_mut().zip(&ld) {
                *acc += v;
            }
            u = next;
        }
        Ok((u, logdet))
    }

    fn log_prob_chunk(&self, a: &[f64], rows: usize) -> Result<Vec<LogDensityResult>> {
        let (z, logdet) = self.inverse_batch(a, rows)?;
        let base = self.base.log_prob_batch(&z, rows)?;
        Ok(z.chunks(self.dim)
            .zip(base)
            .zip(logdet)
            .map(|((zr, base_term), logdet_term)| LogDensityResult {
                total: base_term + logdet_term,
                base_term,
                logdet_term,
                latent: zr.to_vec(),
            })
            .collect())
    }

    pub fn log_prob(&self, a: &[f64]) -> Result<LogDensityResult> {
        Ok(self.log_prob_chunk(a, 1)?.pop().expect("one row"))
    }

    /// Scores every row; order is preserved and each row's result is
    /// bit-identical to scoring it alone.
    pub fn log_prob_batch(&self, a: &[f64], rows: usize) -> Result<Vec<LogDensityResult>> {
        self.check_batch(a, rows)?;
        let chunks: Vec<Vec<LogDensityResult>> = a
            .par_chunks(SCORE_CHUNK * self.dim)
            .map(|c| self.log_prob_chunk(c, c.len() / self.dim))
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Mean negative log-likelihood of a batch.
    pub fn nll(&self, a: &[f64], rows: usize) -> Result<f64> {
        let scores = self.log_prob_batch(a, rows)?;
        Ok(-scores.iter().map(|r| r.total).sum::<f64>() / rows as f64)
    }

    /// Mean negative log-likelihood and its exact gradient.
    pub fn nll_grad(&self, a: &[f64], rows: usize, normalizer: Option<&AcceptanceEstimate>) -> Result<(f64, FlowGrads)> {
        let mut grads = self.zero_grads();
        let loss = self.nll_grad_into(a, rows, normalizer, &mut grads)?;
        Ok((loss, grads))
    }

    /// As [`nll_grad`], overwriting a caller-owned gradient buffer.
    ///
    /// [`nll_grad`]: FlowModel::nll_grad
    pub fn nll_grad_into(
        &self,
        a: &[f64],
        rows: usize,
        normalizer: Option<&AcceptanceEstimate>,
        grads: &mut FlowGrads,
    ) -> Result<f64> {
        self.check_batch(a, rows)?;
        if grads.layers.len() != self.layers.len() || grads.base.is_some() != self.base.as_resampling().is_some() {
            return Err(Error::Shape("gradient buffer does not match model".into()));
        }
        grads.fill_zero();

        let mut u = a.to_vec();
        let mut logdet = vec![0.0; rows];
        let mut tapes = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (next, ld, tape) = layer.inverse_taped(&u, rows).map_err(|e| e.at_layer(l))?;
            for (acc, v) in logdet.iter_mut().zip(&ld) {
                *acc += v;
            }
            tapes.push(tape);
            u = next;
        }
        tapes.reverse();

        let weight = -1.0 / rows as f64;
        let weights = vec![weight; rows];
        let (base_lp, mut g) = self
            .base
            .log_prob_backward(&u, rows, &weights, normalizer, grads.base.as_mut())?;

        let mut total = 0.0;
        for (b, ld) in base_lp.iter().zip(&logdet) {
            total += b + ld;
        }
        let loss = -total / rows as f64;
        if !loss.is_finite() {
            let sample = base_lp
                .iter()
                .zip(&logdet)
                .position(|(b, ld)| !(b + ld).is_finite())
                .unwrap_or(0);
            return Err(Error::Training {
                epoch: 0,
                step: 0,
                what: format!("non-finite log-likelihood for batch row {sample}"),
            });
        }

        for (l, (layer, tape)) in self.layers.iter().zip(&tapes).enumerate() {
            g = layer
                .inverse_backward(tape, &g, &weights, &mut grads.layers[l])
                .map_err(|e| e.at_layer(l))?;
        }
        Ok(loss)
    }

    /// Draws `n` samples: base draws pushed through the layers in order.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::Usage("sample count must be at least 1".into()));
        }
        let z = self.base.sample(n, seed)?;
        Ok(self.forward_batch(&z, n)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::{gaussian_log_prob, gaussian_sample};
    use crate::nn::{Activation, Dense, DenseNet};

    fn random_config(dim: usize, layers: usize) -> FlowConfig {
        FlowConfig {
            dim,
            num_coupling_layers: layers,
            conditioner_depth: 3,
            conditioner_width: 8,
            identity_init: false,
            ..FlowConfig::default()
        }
    }

    fn constant_net(n_in: usize, n_out: usize, value: f64) -> DenseNet {
        let layer = Dense::new(n_in, n_out, Activation::Identity, vec![0.0; n_in * n_out], vec![value; n_out]).unwrap();
        DenseNet::new(vec![layer]).unwrap()
    }

    #[test]
    fn identity_model_at_mode() {
        let cfg = FlowConfig {
            dim: 2,
            num_coupling_layers: 4,
            conditioner_width: 6,
            ..FlowConfig::default()
        };
        let model = FlowModel::new(&cfg, 0).unwrap();
        let r = model.log_prob(&[0.0, 0.0]).unwrap();
        assert!((r.total + 1.837877).abs() < 1e-6);
        assert_eq!(r.logdet_term, 0.0);
        assert_eq!(r.total, r.base_term + r.logdet_term);
    }

    #[test]
    fn single_scaling_layer() {
        let clamp = 3.0;
        let raw = clamp * (std::f64::consts::LN_2 / clamp).atanh();
        let layer = CouplingLayer::new(vec![true, false], constant_net(1, 1, raw), constant_net(1, 1, 0.0), clamp).unwrap();
        let model = FlowModel::from_parts(2, vec![layer], BaseDistribution::gaussian(2)).unwrap();
        let a = [0.4, 1.0];
        let r = model.log_prob(&a).unwrap();
        let z = [0.4, 0.5];
        let want = gaussian_log_prob(&z) - std::f64::consts::LN_2;
        assert!((r.total - want).abs() < 1e-12);
        assert!((r.latent[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stack_round_trip() {
        let model = FlowModel::new(&random_config(6, 10), 3).unwrap();
        let z = gaussian_sample(6, 20, 1);
        let (a, fwd) = model.forward_batch(&z, 20).unwrap();
        let (back, inv) = model.inverse_batch(&a, 20).unwrap();
        let err = z.iter().zip(&back).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
        for (f, i) in fwd.iter().zip(&inv) {
            assert!((f + i).abs() < 1e-10);
        }
    }

    #[test]
    fn batch_scoring_equals_single_scoring() {
        let model = FlowModel::new(&random_config(5, 6), 8).unwrap();
        let n = 600;
        let a = gaussian_sample(5, n, 2);
        let batch = model.log_prob_batch(&a, n).unwrap();
        for (r, row) in a.chunks(5).enumerate().step_by(37) {
            assert_eq!(model.log_prob(row).unwrap(), batch[r]);
        }
    }

    #[test]
    fn nll_grad_loss_matches_nll() {
        let model = FlowModel::new(&random_config(4, 4), 5).unwrap();
        let a = gaussian_sample(4, 7, 3);
        let (loss, _) = model.nll_grad(&a, 7, None).unwrap();
        assert!((loss - model.nll(&a, 7).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_sample_gives_same_gradient() {
        let model = FlowModel::new(&random_config(4, 4), 6).unwrap();
        let a = gaussian_sample(4, 1, 9);
        let twice: Vec<f64> = a.iter().chain(&a).copied().collect();
        let (_, g1) = model.nll_grad(&a, 1, None).unwrap();
        let (_, g2) = model.nll_grad(&twice, 2, None).unwrap();
        assert_eq!(g1.to_flat(), g2.to_flat());
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let model = FlowModel::new(&random_config(4, 4), 6).unwrap();
        let a = gaussian_sample(4, 2, 10);
        let (_, g) = model.nll_grad(&a, 2, None).unwrap();
        let (_, g0) = model.nll_grad(&a[..4], 1, None).unwrap();
        let (_, g1) = model.nll_grad(&a[4..], 1, None).unwrap();
        for ((x, y0), y1) in g.to_flat().iter().zip(g0.to_flat()).zip(g1.to_flat()) {
            assert!((x - 0.5 * (y0 + y1)).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_model_samples_are_base_samples() {
        let cfg = FlowConfig {
            dim: 3,
            num_coupling_layers: 2,
            conditioner_width: 4,
            ..FlowConfig::default()
        };
        let model = FlowModel::new(&cfg, 0).unwrap();
        assert_eq!(model.sample(25, 4).unwrap(), gaussian_sample(3, 25, 4));
    }

    #[test]
    fn samples_have_finite_density() {
        let model = FlowModel::new(&random_config(4, 6), 2).unwrap();
        let s = model.sample(1000, 5).unwrap();
        assert!(model.log_prob_batch(&s, 1000).unwrap().iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn rejects_uncovered_mask_pair() {
        let mut rng = rng::stream(0, 0);
        let a = CouplingLayer::with_conditioners(half_mask(4, 0), 2, 4, 3.0, true, &mut rng).unwrap();
        let b = a.clone();
        assert!(FlowModel::from_parts(4, vec![a, b], BaseDistribution::gaussian(4)).is_err());
    }

    #[test]
    fn density_error_names_layer() {
        let model = FlowModel::new(&random_config(4, 3), 1).unwrap();
        let err = model.log_prob(&[0.0, f64::NAN, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        let mut huge = FlowModel::new(&random_config(4, 3), 1).unwrap();
        let (a, _) = huge.forward_batch(&[0.0; 4], 1).unwrap();
        huge.layers_mut()[1].t_net_mut().layers_mut()[2].bias_mut()[0] = f64::INFINITY;
        match huge.log_prob(&a) {
            Err(Error::Density { layer, .. }) => assert_eq!(layer, Some(1)),
            other => panic!("expected density error, got {other:?}"),
        }
    }
}
