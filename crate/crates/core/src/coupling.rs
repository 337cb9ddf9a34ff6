//! Affine coupling layers.
//!
//! A binary mask splits the coordinates into a pass-through part `A`
//! (mask = 1) and a transformed part `B` (mask = 0). In the sampling
//! direction
//!
//! ```text
//! y_A = x_A
//! y_B = x_B * exp(s(x_A)) + t(x_A)
//! ```
//!
//! where `s` is the raw scale network output squashed into
//! `(-clamp, clamp)` by `clamp * tanh(raw / clamp)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, DenseGrads, DenseNet, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    mask: Vec<bool>,
    pass: Vec<usize>,
    transformed: Vec<usize>,
    s_net: DenseNet,
    t_net: DenseNet,
    scale_clamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingGrads {
    pub s: DenseGrads,
    pub t: DenseGrads,
}

impl CouplingGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.s.slices();
        v.extend(self.t.slices());
        v
    }

    pub fn fill_zero(&mut self) {
        self.s.fill_zero();
        self.t.fill_zero();
    }
}

/// What the density-direction reverse pass needs from the forward pass.
#[derive(Debug)]
pub(crate) struct CouplingTape {
    rows: usize,
    s_tape: Tape,
    t_tape: Tape,
    /// `tanh(raw / clamp)` per transformed coordinate.
    squash: Vec<f64>,
    /// Clamped log-scales.
    scale: Vec<f64>,
    /// Transformed part of the output, `x_B`.
    out_b: Vec<f64>,
}

/// Alternating contiguous half masks: even layers pass the first `ceil(h/2)`
/// coordinates through, odd layers the rest.
pub fn half_mask(dim: usize, layer_index: usize) -> Vec<bool> {
    let split = dim.div_ceil(2);
    (0..dim)
        .map(|i| (i < split) == (layer_index % 2 == 0))
        .collect()
}

impl CouplingLayer {
    pub fn new(mask: Vec<bool>, s_net: DenseNet, t_net: DenseNet, scale_clamp: f64) -> Result<Self> {
        let pass: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let transformed: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        if pass.is_empty() || transformed.is_empty() {
            return Err(Error::Config(
                "coupling mask needs at least one pass-through and one transformed coordinate".into(),
            ));
        }
        for (name, net) in [("scale", &s_net), ("shift", &t_net)] {
            if net.input_dim() != pass.len() || net.output_dim() != transformed.len() {
                return Err(Error::Shape(format!(
                    "{name} network maps {}->{}, mask needs {}->{}",
                    net.input_dim(),
                    net.output_dim(),
                    pass.len(),
                    transformed.len()
                )));
            }
        }
        if !(scale_clamp > 0.0 && scale_clamp.is_finite()) {
            return Err(Error::Config(format!("scale clamp must be positive, got {scale_clamp}")));
        }
        Ok(Self {
            mask,
            pass,
            transformed,
            s_net,
            t_net,
            scale_clamp,
        })
    }

    /// Tanh conditioners with `depth` dense layers of `width` hidden units.
    /// With `identity` the final layers start at zero, making the coupling an
    /// identity map.
    pub fn with_conditioners<R: Rng + ?Sized>(
        mask: Vec<bool>,
        depth: usize,
        width: usize,
        scale_clamp: f64,
        identity: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("conditioner depth must be at least 1".into()));
        }
        let n_pass = mask.iter().filter(|m| **m).count();
        let n_trans = mask.len() - n_pass;
        let mut dims = vec![n_pass];
        dims.extend(std::iter::repeat_n(width, depth - 1));
        dims.push(n_trans);
        let s_net = DenseNet::mlp(&dims, Activation::Tanh, Activation::Identity, identity, rng)?;
        let t_net = DenseNet::mlp(&dims, Activation::Tanh, Activation::Identity, identity, rng)?;
        Self::new(mask, s_net, t_net, scale_clamp)
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn scale_clamp(&self) -> f64 {
        self.scale_clamp
    }

    pub fn s_net(&self) -> &DenseNet {
        &self.s_net
    }

    pub fn t_net(&self) -> &DenseNet {
        &self.t_net
    }

    pub fn s_net_mut(&mut self) -> &mut DenseNet {
        &mut self.s_net
    }

    pub fn t_net_mut(&mut self) -> &mut DenseNet {
        &mut self.t_net
    }

    pub fn num_params(&self) -> usize {
        self.s_net.num_params() + self.t_net.num_params()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.s_net.param_slices();
        v.extend(self.t_net.param_slices());
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.s_net.param_slices_mut();
        v.extend(self.t_net.param_slices_mut());
        v
    }

    pub fn zero_grads(&self) -> CouplingGrads {
        CouplingGrads {
            s: self.s_net.zero_grads(),
            t: self.t_net.zero_grads(),
        }
    }

    fn check(&self, u: &[f64], rows: usize) -> Result<()> {
        if u.len() != rows * self.dim() {
            return Err(Error::Shape(format!(
                "coupling layer expects {rows} x {} values, got {}",
                self.dim(),
                u.len()
            )));
        }
        Ok(())
    }

    fn gather_pass(&self, u: &[f64], rows: usize) -> Vec<f64> {
        let h = self.dim();
        let mut out = Vec::with_capacity(rows * self.pass.len());
        for r in 0..rows {
            out.extend(self.pass.iter().map(|&i| u[r * h + i]));
        }
        out
    }

    #[inline]
    fn squash(&self, raw: f64) -> f64 {
        (raw / self.scale_clamp).tanh()
    }

    fn transform(&self, u: &[f64], rows: usize, inverse: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(u, rows)?;
        let cond = self.gather_pass(u, rows);
        let raw = self.s_net.eval_batch(&cond, rows)?;
        let shift = self.t_net.eval_batch(&cond, rows)?;
        let (h, nb) = (self.dim(), self.transformed.len());
        let mut out = u.to_vec();
        let mut logdet = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut sum = 0.0;
            for (k, &i) in self.transformed.iter().enumerate() {
                let s = self.scale_clamp * self.squash(raw[r * nb + k]);
                let t = shift[r * nb + k];
                let v = &mut out[r * h + i];
                *v = if inverse { (*v - t) * (-s).exp() } else { *v * s.exp() + t };
                sum += s;
            }
            logdet.push(if inverse { -sum } else { sum });
        }
        if !out.iter().chain(&logdet).all(|v| v.is_finite()) {
            return Err(Error::Density {
                layer: None,
                what: format!("{} produced a non-finite value", if inverse { "inverse" } else { "forward" }),
            });
        }
        Ok((out, logdet))
    }

    /// Sampling direction over a batch; returns outputs and per-row log-dets.
    pub fn forward_batch(&self, x: &[f64], rows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.transform(x, rows, false)
    }

    /// Density direction over a batch; returns outputs and per-row log-dets.
    pub fn inverse_batch(&self, y: &[f64], rows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.transform(y, rows, true)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (y, ld) = self.forward_batch(x, 1)?;
        Ok((y, ld[0]))
    }

    pub fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (x, ld) = self.inverse_batch(y, 1)?;
        Ok((x, ld[0]))
    }

    /// Density direction, recording what [`inverse_backward`] needs.
    ///
    /// [`inverse_backward`]: CouplingLayer::inverse_backward
    pub(crate) fn inverse_taped(&self, y: &[f64], rows: usize) -> Result<(Vec<f64>, Vec<f64>, CouplingTape)> {
        self.check(y, rows)?;
        let cond = self.gather_pass(y, rows);
        let s_tape = self.s_net.forward_batch(&cond, rows)?;
        let t_tape = self.t_net.forward_batch(&cond, rows)?;
        let (h, nb) = (self.dim(), self.transformed.len());
        let raw = s_tape.output();
        let shift = t_tape.output();
        let mut out = y.to_vec();
        let mut logdet = Vec::with_capacity(rows);
        let mut squash = Vec::with_capacity(rows * nb);
        let mut scale = Vec::with_capacity(rows * nb);
        let mut out_b = Vec::with_capacity(rows * nb);
        for r in 0..rows {
            let mut sum = 0.0;
            for (k, &i) in self.transformed.iter().enumerate() {
                let q = self.squash(raw[r * nb + k]);
                let s = self.scale_clamp * q;
                let v = &mut out[r * h + i];
                *v = (*v - shift[r * nb + k]) * (-s).exp();
                squash.push(q);
                scale.push(s);
                out_b.push(*v);
                sum += s;
            }
            logdet.push(-sum);
        }
        if !out.iter().chain(&logdet).all(|v| v.is_finite()) {
            return Err(Error::Density {
                layer: None,
                what: "inverse produced a non-finite value".into(),
            });
        }
        let tape = CouplingTape {
            rows,
            s_tape,
            t_tape,
            squash,
            scale,
            out_b,
        };
        Ok((out, logdet, tape))
    }

    /// Reverse pass of the density direction. `gx` is the cotangent of the
    /// output and `glogdet[r]` that of row `r`'s log-det. Returns the input
    /// cotangent and adds parameter gradients into `grads`.
    pub(crate) fn inverse_backward(
        &self,
        tape: &CouplingTape,
        gx: &[f64],
        glogdet: &[f64],
        grads: &mut CouplingGrads,
    ) -> Result<Vec<f64>> {
        let rows = tape.rows;
        self.check(gx, rows)?;
        if glogdet.len() != rows {
            return Err(Error::Shape("log-det cotangent length differs from batch".into()));
        }
        let (h, nb) = (self.dim(), self.transformed.len());
        let mut gy = gx.to_vec();
        let mut g_raw = Vec::with_capacity(rows * nb);
        let mut g_shift = Vec::with_capacity(rows * nb);
        for r in 0..rows {
            for (k, &i) in self.transformed.iter().enumerate() {
                let idx = r * nb + k;
                let g = gx[r * h + i];
                let e = (-tape.scale[idx]).exp();
                gy[r * h + i] = g * e;
                g_shift.push(-g * e);
                let g_scale = -g * tape.out_b[idx] - glogdet[r];
                let q = tape.squash[idx];
                g_raw.push(g_scale * (1.0 - q * q));
            }
        }
        let d_from_s = self.s_net.backward_batch(&tape.s_tape, &g_raw, &mut grads.s)?;
        let d_from_t = self.t_net.backward_batch(&tape.t_tape, &g_shift, &mut grads.t)?;
        let na = self.pass.len();
        for r in 0..rows {
            for (k, &i) in self.pass.iter().enumerate() {
                gy[r * h + i] += d_from_s[r * na + k] + d_from_t[r * na + k];
            }
        }
        Ok(gy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_net(n_in: usize, n_out: usize, value: f64) -> DenseNet {
        let layer = Dense::new(n_in, n_out, Activation::Identity, vec![0.0; n_in * n_out], vec![value; n_out]).unwrap();
        DenseNet::new(vec![layer]).unwrap()
    }

    fn random_layer(dim: usize, parity: usize, seed: u64) -> CouplingLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CouplingLayer::with_conditioners(half_mask(dim, parity), 3, 12, 3.0, false, &mut rng).unwrap()
    }

    fn random_points(dim: usize, n: usize, seed: u64) -> Vec<f64> {
        crate::base::gaussian_sample(dim, n, seed)
    }

    #[test]
    fn half_masks_alternate() {
        assert_eq!(half_mask(5, 0), vec![true, true, true, false, false]);
        assert_eq!(half_mask(5, 1), vec![false, false, false, true, true]);
        assert_eq!(half_mask(2, 0), vec![true, false]);
    }

    #[test]
    fn identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = CouplingLayer::with_conditioners(half_mask(6, 1), 4, 10, 3.0, true, &mut rng).unwrap();
        let y = random_points(6, 1, 2);
        let (x, ld) = layer.inverse(&y).unwrap();
        assert_eq!(x, y);
        assert_eq!(ld, 0.0);
        let (fx, fld) = layer.forward(&y).unwrap();
        assert_eq!(fx, y);
        assert_eq!(fld, 0.0);
    }

    #[test]
    fn hand_computed_inverse() {
        let clamp = 3.0;
        let ln2 = std::f64::consts::LN_2;
        let raw = clamp * (ln2 / clamp).atanh();
        let layer = CouplingLayer::new(vec![true, false], constant_net(1, 1, raw), constant_net(1, 1, 1.0), clamp).unwrap();
        let (x, ld) = layer.inverse(&[5.0, 7.0]).unwrap();
        assert_eq!(x[0], 5.0);
        assert!((x[1] - 3.0).abs() < 1e-12);
        assert!((ld + ln2).abs() < 1e-12);
    }

    #[test]
    fn round_trip_and_logdet_antisymmetry() {
        for (dim, parity) in [(2, 0), (5, 1), (16, 0)] {
            let layer = random_layer(dim, parity, dim as u64);
            let xs = random_points(dim, 50, 3);
            for x in xs.chunks(dim) {
                let (y, fwd) = layer.forward(x).unwrap();
                let (back, inv) = layer.inverse(&y).unwrap();
                let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-9, "round trip error {err}");
                assert_eq!(fwd + inv, 0.0);
            }
        }
    }

    #[test]
    fn logdet_matches_numerical_jacobian() {
        let dim = 4;
        let layer = random_layer(dim, 0, 9);
        let eps = 1e-5;
        for y in random_points(dim, 10, 4).chunks(dim) {
            let (_, ld) = layer.inverse(y).unwrap();
            let mut jac = vec![vec![0.0; dim]; dim];
            for j in 0..dim {
                let (mut p, mut m) = (y.to_vec(), y.to_vec());
                p[j] += eps;
                m[j] -= eps;
                let (xp, _) = layer.inverse(&p).unwrap();
                let (xm, _) = layer.inverse(&m).unwrap();
                for i in 0..dim {
                    jac[i][j] = (xp[i] - xm[i]) / (2.0 * eps);
                }
            }
            let numeric = crate::linalg::log_abs_det(jac);
            assert!((ld - numeric).abs() < 1e-4, "{ld} vs {numeric}");
        }
    }

    #[test]
    fn taped_inverse_matches_plain_inverse() {
        let layer = random_layer(7, 1, 5);
        let y = random_points(7, 9, 6);
        let (x, ld) = layer.inverse_batch(&y, 9).unwrap();
        let (xt, ldt, _) = layer.inverse_taped(&y, 9).unwrap();
        assert_eq!(x, xt);
        assert_eq!(ld, ldt);
    }

    #[test]
    fn rejects_degenerate_masks() {
        let s = constant_net(2, 1, 0.0);
        let t = constant_net(2, 1, 0.0);
        assert!(CouplingLayer::new(vec![true, true], s.clone(), t.clone(), 3.0).is_err());
        assert!(matches!(
            CouplingLayer::new(vec![true, false, false], s, t, 3.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn non_finite_input_is_a_density_error() {
        let layer = random_layer(4, 0, 2);
        let err = layer.inverse(&[1.0, 0.0, f64::INFINITY, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Density { .. }));
    }
}
