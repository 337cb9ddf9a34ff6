//! Dense feed-forward networks with a hand-written reverse pass.
//!
//! Everything is row-major `f64`. A batch is a flat slice of `rows * dim`
//! values. Each output element is produced by the same fixed-order kernel
//! regardless of batch size, so evaluating a sample alone or inside a batch
//! gives bit-identical results.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many multiply-adds a layer is evaluated on the calling thread.
const PAR_WORK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fixed-order dot product with four interleaved accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// Four dot products against a shared `x`, each summed exactly as [`dot`].
#[inline(always)]
fn dot4(w: [&[f64]; 4], x: &[f64]) -> [f64; 4] {
    let n = x.len();
    let m = n - n % 4;
    let mut acc = [[0.0f64; 4]; 4];
    let mut i = 0;
    while i < m {
        let xs = &x[i..i + 4];
        for k in 0..4 {
            let ws = &w[k][i..i + 4];
            acc[k][0] += ws[0] * xs[0];
            acc[k][1] += ws[1] * xs[1];
            acc[k][2] += ws[2] * xs[2];
            acc[k][3] += ws[3] * xs[3];
        }
        i += 4;
    }
    let mut out = [0.0; 4];
    for k in 0..4 {
        let mut tail = 0.0;
        for t in m..n {
            tail += w[k][t] * x[t];
        }
        out[k] = ((acc[k][0] + acc[k][1]) + (acc[k][2] + acc[k][3])) + tail;
    }
    out
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Four consecutive [`axpy`] calls fused into one sweep over `y`; each element
/// sees the same sequence of additions.
#[inline]
fn axpy4(alpha: [f64; 4], x: [&[f64]; 4], y: &mut [f64]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for i in 0..n {
        y[i] = (((y[i] + alpha[0] * x0[i]) + alpha[1] * x1[i]) + alpha[2] * x2[i]) + alpha[3] * x3[i];
    }
}

/// One affine layer followed by an elementwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    /// Row-major `[out_dim x in_dim]`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("dense layer dimensions must be positive".into()));
        }
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "dense layer {in_dim}->{out_dim} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if !weights.iter().chain(&bias).all(|v| v.is_finite()) {
            return Err(Error::Domain("dense layer parameters must be finite".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            activation,
            weights,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    #[inline]
    fn forward_row(&self, x: &[f64], y: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: the required CPU feature was detected at runtime.
            return unsafe { self.forward_row_avx(x, y) };
        }
        self.forward_row_generic(x, y)
    }

    /// Same arithmetic as the generic path (no fused multiply-add), compiled
    /// with wider vector registers.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx")]
    unsafe fn forward_row_avx(&self, x: &[f64], y: &mut [f64]) {
        self.forward_row_generic(x, y)
    }

    #[inline(always)]
    fn forward_row_generic(&self, x: &[f64], y: &mut [f64]) {
        let n = self.in_dim;
        let row = |j: usize| &self.weights[j * n..(j + 1) * n];
        let blocked = self.out_dim - self.out_dim % 4;
        for j in (0..blocked).step_by(4) {
            let d = dot4([row(j), row(j + 1), row(j + 2), row(j + 3)], x);
            for k in 0..4 {
                y[j + k] = self.activation.apply(self.bias[j + k] + d[k]);
            }
        }
        for j in blocked..self.out_dim {
            y[j] = self.activation.apply(self.bias[j] + dot(row(j), x));
        }
    }

    fn forward_rows(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.out_dim];
        if rows * self.in_dim * self.out_dim >= PAR_WORK && rows > 1 {
            y.par_chunks_mut(self.out_dim)
                .zip(x.par_chunks(self.in_dim))
                .for_each(|(yr, xr)| self.forward_row(xr, yr));
        } else {
            for (yr, xr) in y.chunks_mut(self.out_dim).zip(x.chunks(self.in_dim)) {
                self.forward_row(xr, yr);
            }
        }
        y
    }

    /// Reverse pass for one layer. `x` is the layer input, `y` its output,
    /// `dy` the cotangent of `y`. Returns the input cotangent and adds the
    /// parameter gradients into `dw`/`db`.
    fn backward_rows(
        &self,
        x: &[f64],
        y: &[f64],
        dy: &[f64],
        rows: usize,
        dw: &mut [f64],
        db: &mut [f64],
    ) -> Vec<f64> {
        let (n_in, n_out) = (self.in_dim, self.out_dim);
        let dz: Vec<f64> = dy
            .iter()
            .zip(y)
            .map(|(g, yv)| g * self.activation.derivative_from_output(*yv))
            .collect();

        let mut dx = vec![0.0; rows * n_in];
        let w_row = |j: usize| &self.weights[j * n_in..(j + 1) * n_in];
        let x_row = |r: usize| &x[r * n_in..(r + 1) * n_in];
        let input_row = |(dxr, dzr): (&mut [f64], &[f64])| {
            let blocked = n_out - n_out % 4;
            for j in (0..blocked).step_by(4) {
                let g = [dzr[j], dzr[j + 1], dzr[j + 2], dzr[j + 3]];
                axpy4(g, [w_row(j), w_row(j + 1), w_row(j + 2), w_row(j + 3)], dxr);
            }
            for j in blocked..n_out {
                axpy(dzr[j], w_row(j), dxr);
            }
        };
        let weight_row = |(j, (dwr, dbj)): (usize, (&mut [f64], &mut f64))| {
            let g = |r: usize| dz[r * n_out + j];
            let blocked = rows - rows % 4;
            for r in (0..blocked).step_by(4) {
                axpy4([g(r), g(r + 1), g(r + 2), g(r + 3)], [x_row(r), x_row(r + 1), x_row(r + 2), x_row(r + 3)], dwr);
            }
            for r in blocked..rows {
                axpy(g(r), x_row(r), dwr);
            }
            for r in 0..rows {
                *dbj += g(r);
            }
        };

        if rows * n_in * n_out >= PAR_WORK {
            dx.par_chunks_mut(n_in)
                .zip(dz.par_chunks(n_out))
                .for_each(input_row);
            dw.par_chunks_mut(n_in)
                .zip(db.par_iter_mut())
                .enumerate()
                .for_each(weight_row);
        } else {
            dx.chunks_mut(n_in).zip(dz.chunks(n_out)).for_each(input_row);
            dw.chunks_mut(n_in)
                .zip(db.iter_mut())
                .enumerate()
                .for_each(weight_row);
        }
        dx
    }
}

/// A stack of [`Dense`] layers with chained dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

/// Activations cached by a forward pass: `acts[0]` is the input and
/// `acts[k + 1]` the output of layer `k`.
#[derive(Debug, Clone)]
pub struct Tape {
    rows: usize,
    dims: Vec<usize>,
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.acts.pop().unwrap_or_default()
    }
}

/// Parameter gradients laid out exactly like the owning [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl DenseGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.bias.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }

    pub fn fill_zero(&mut self) {
        for s in self.slices_mut() {
            s.fill(0.0);
        }
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    k + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Multi-layer perceptron over `dims = [in, hidden.., out]` with Xavier
    /// uniform weights and zero biases. With `zero_final` the last layer's
    /// weights are zero as well, so the network outputs `output(0)` everywhere.
    pub fn mlp<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        zero_final: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid MLP dimensions {dims:?}")));
        }
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for k in 0..n {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let last = k + 1 == n;
            let weights = if last && zero_final {
                vec![0.0; fan_in * fan_out]
            } else {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect()
            };
            let act = if last { output } else { hidden };
            layers.push(Dense::new(fan_in, fan_out, act, weights, vec![0.0; fan_out])?);
        }
        Self::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn zero_grads(&self) -> DenseGrads {
        DenseGrads {
            weights: self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn check_input(&self, x: &[f64], rows: usize) -> Result<()> {
        if x.len() != rows * self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} x {} inputs, got {} values",
                rows,
                self.input_dim(),
                x.len()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("network input is not finite".into()));
        }
        Ok(())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let tape = self.forward_batch(x, 1)?;
        Ok((tape.output().to_vec(), tape))
    }

    pub fn forward_batch(&self, x: &[f64], rows: usize) -> Result<Tape> {
        self.check_input(x, rows)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let next = layer.forward_rows(acts.last().expect("non-empty"), rows);
            acts.push(next);
        }
        Ok(Tape {
            rows,
            dims: self.dims(),
            acts,
        })
    }

    /// Forward pass without recording; same numerics as [`forward_batch`].
    ///
    /// [`forward_batch`]: DenseNet::forward_batch
    pub fn eval_batch(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.check_input(x, rows)?;
        let mut cur = self.layers[0].forward_rows(x, rows);
        for layer in &self.layers[1..] {
            cur = layer.forward_rows(&cur, rows);
        }
        Ok(cur)
    }

    fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    /// Single-sample reverse pass: gradients of `y . dy`.
    pub fn backward(&self, tape: &Tape, dy: &[f64]) -> Result<(Vec<f64>, DenseGrads)> {
        let mut grads = self.zero_grads();
        let dx = self.backward_batch(tape, dy, &mut grads)?;
        Ok((dx, grads))
    }

    /// Batched reverse pass. Parameter gradients are summed over rows and
    /// added into `grads`; the per-row input cotangents are returned.
    pub fn backward_batch(&self, tape: &Tape, dy: &[f64], grads: &mut DenseGrads) -> Result<Vec<f64>> {
        let rows = tape.rows;
        let consistent = tape.dims == self.dims()
            && tape.acts.len() == self.layers.len() + 1
            && tape.acts.iter().zip(&tape.dims).all(|(a, d)| a.len() == rows * d);
        if !consistent {
            return Err(Error::Usage("tape was not produced by this network".into()));
        }
        if dy.len() != rows * self.output_dim() {
            return Err(Error::Shape(format!(
                "output cotangent has {} values, expected {}",
                dy.len(),
                rows * self.output_dim()
            )));
        }
        if grads.weights.len() != self.layers.len() {
            return Err(Error::Shape("gradient buffer does not match network".into()));
        }
        let mut g = dy.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward_rows(
                &tape.acts[k],
                &tape.acts[k + 1],
                &g,
                rows,
                &mut grads.weights[k],
                &mut grads.bias[k],
            );
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(w: Vec<f64>, b: Vec<f64>, n_in: usize, n_out: usize) -> DenseNet {
        DenseNet::new(vec![Dense::new(n_in, n_out, Activation::Identity, w, b).unwrap()]).unwrap()
    }

    /// Straightforward triple-loop forward pass used as an oracle.
    fn naive_forward(net: &DenseNet, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in net.layers() {
            let mut next = vec![0.0; l.out_dim()];
            for (j, nj) in next.iter_mut().enumerate() {
                let mut s = l.bias()[j];
                for i in 0..l.in_dim() {
                    s += l.weights()[j * l.in_dim() + i] * cur[i];
                }
                *nj = match l.activation() {
                    Activation::Identity => s,
                    Activation::Tanh => s.tanh(),
                    Activation::Sigmoid => 1.0 / (1.0 + (-s).exp()),
                };
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        let (y, _) = net.forward(&[1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
    }

    #[test]
    fn hand_computed_affine_map() {
        let net = linear(vec![2.0, 0.0, 0.0, 3.0], vec![1.0, 1.0], 2, 2);
        let (y, _) = net.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(y, vec![3.0, 4.0]);
    }

    #[test]
    fn four_layer_net_matches_naive_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = DenseNet::mlp(&[94, 94, 94, 94, 94], Activation::Tanh, Activation::Identity, false, &mut rng)
            .unwrap();
        let dist = Uniform::new(-1.0, 1.0).unwrap();
        let x: Vec<f64> = (0..94).map(|_| dist.sample(&mut rng)).collect();
        let (y, _) = net.forward(&x).unwrap();
        let want = naive_forward(&net, &x);
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        let net = linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
        assert!(matches!(net.forward(&[1.0, f64::NAN]), Err(Error::Domain(_))));
    }

    #[test]
    fn rejects_unchained_layers() {
        let a = Dense::new(2, 3, Activation::Tanh, vec![0.0; 6], vec![0.0; 3]).unwrap();
        let b = Dense::new(2, 1, Activation::Identity, vec![0.0; 2], vec![0.0]).unwrap();
        assert!(matches!(DenseNet::new(vec![a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_layer_gradients() {
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let net = linear(w.clone(), vec![0.5, -0.5], 3, 2);
        let x = [0.3, -1.2, 2.0];
        let (_, tape) = net.forward(&x).unwrap();
        let (dx, grads) = net.backward(&tape, &[1.0, 0.0]).unwrap();
        assert_eq!(dx, vec![1.0, 2.0, 3.0]);
        assert_eq!(grads.weights[0], vec![0.3, -1.2, 2.0, 0.0, 0.0, 0.0]);
        assert_eq!(grads.bias[0], vec![1.0, 0.0]);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::mlp(&[3, 5, 5, 2], Activation::Tanh, Activation::Sigmoid, false, &mut rng).unwrap();
        let (_, tape) = net.forward(&[0.1, 0.2, -0.3]).unwrap();
        let (dx, grads) = net.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(dx.iter().all(|v| *v == 0.0));
        assert!(grads.slices().iter().all(|s| s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dist = Uniform::new(-1.0, 1.0).unwrap();
        for (dims, out_act) in [
            (vec![3, 6, 6, 2], Activation::Identity),
            (vec![4, 5, 1], Activation::Sigmoid),
            (vec![2, 7, 7, 7, 3], Activation::Tanh),
        ] {
            let net = DenseNet::mlp(&dims, Activation::Tanh, out_act, false, &mut rng).unwrap();
            let x: Vec<f64> = (0..dims[0]).map(|_| dist.sample(&mut rng)).collect();
            let dy: Vec<f64> = (0..*dims.last().unwrap()).map(|_| dist.sample(&mut rng)).collect();
            let loss = |n: &DenseNet, x: &[f64]| dot(&n.forward(x).unwrap().0, &dy);
            let (_, tape) = net.forward(&x).unwrap();
            let (dx, grads) = net.backward(&tape, &dy).unwrap();
            let h = 1e-5;
            let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-6);

            for i in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
                assert!(rel(dx[i], fd) < 1e-4, "dx[{i}]: {} vs {fd}", dx[i]);
            }
            let analytic: Vec<f64> = grads.slices().concat();
            let mut flat_index = 0;
            for s in 0..net.param_slices().len() {
                for e in 0..net.param_slices()[s].len() {
                    let mut p = net.clone();
                    p.param_slices_mut()[s][e] += h;
                    let mut m = net.clone();
                    m.param_slices_mut()[s][e] -= h;
                    let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
                    let a = analytic[flat_index];
                    assert!(rel(a, fd) < 1e-4, "param {flat_index}: {a} vs {fd}");
                    flat_index += 1;
                }
            }
        }
    }

    #[test]
    fn batch_rows_match_single_rows_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DenseNet::mlp(&[16, 94, 94, 16], Activation::Tanh, Activation::Identity, false, &mut rng).unwrap();
        let dist = Uniform::new(-2.0, 2.0).unwrap();
        let x: Vec<f64> = (0..16 * 40).map(|_| dist.sample(&mut rng)).collect();
        let batch = net.eval_batch(&x, 40).unwrap();
        for r in 0..40 {
            let (single, _) = net.forward(&x[r * 16..(r + 1) * 16]).unwrap();
            assert_eq!(&batch[r * 16..(r + 1) * 16], single.as_slice());
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DenseNet::mlp(&[2, 3, 1], Activation::Tanh, Activation::Identity, false, &mut rng).unwrap();
        let b = DenseNet::mlp(&[2, 4, 1], Activation::Tanh, Activation::Identity, false, &mut rng).unwrap();
        let (_, tape) = a.forward(&[0.0, 1.0]).unwrap();
        assert!(matches!(b.backward(&tape, &[1.0]), Err(Error::Usage(_))));
    }
}
