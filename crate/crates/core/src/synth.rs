//! Seeded synthetic benchmark: in-distribution data from a Gaussian mixture,
//! out-of-distribution data from the same mixture with shifted means and
//! optionally inflated covariances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base::ln_2pi;
use crate::data::{make_splits, Label, LabeledDataset, Splits};
use crate::error::{Error, Result};
use crate::linalg::orthonormalize_rows;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub dim: usize,
    pub n_id: usize,
    pub n_ood: usize,
    pub components: usize,
    /// Component means are drawn uniformly from a ball of this radius.
    pub ball_radius: f64,
    /// Per-axis standard deviations are drawn from `[sigma_max / 2, sigma_max]`.
    pub sigma_max: f64,
    /// OOD mean shift in units of `sigma_max`.
    pub shift_sigmas: f64,
    /// OOD standard-deviation multiplier.
    pub inflation: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            n_id: 4500,
            n_ood: 500,
            components: 4,
            ball_radius: 1.0,
            sigma_max: 0.1,
            shift_sigmas: 4.0,
            inflation: 1.0,
            val_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Component {
    mean: Vec<f64>,
    /// Orthonormal rows; local coordinates are `rotation * (x - mean)`.
    rotation: Vec<Vec<f64>>,
    scales: Vec<f64>,
}

impl Component {
    fn sample(&self, rng: &mut ChaCha8Rng, inflation: f64, shift: &[f64]) -> Vec<f64> {
        let eps: Vec<f64> = self
            .scales
            .iter()
            .map(|s| inflation * s * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let mut x: Vec<f64> = self.mean.iter().zip(shift).map(|(m, d)| m + d).collect();
        for (e, row) in eps.iter().zip(&self.rotation) {
            for (xi, r) in x.iter_mut().zip(row) {
                *xi += e * r;
            }
        }
        x
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let mut q = 0.0;
        let mut log_scale = 0.0;
        for (row, s) in self.rotation.iter().zip(&self.scales) {
            let u: f64 = row.iter().zip(&d).map(|(r, v)| r * v).sum::<f64>() / s;
            q += u * u;
            log_scale += s.ln();
        }
        -0.5 * x.len() as f64 * ln_2pi() - log_scale - 0.5 * q
    }
}

/// The in-distribution mixture and its out-of-distribution counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    components: Vec<Component>,
    /// Per-component OOD mean offset.
    shifts: Vec<Vec<f64>>,
    inflation: f64,
}

impl Mixture {
    pub fn new(spec: &SynthSpec, seed: u64) -> Result<Self> {
        validate(spec)?;
        let mut rng = rng::stream(seed, rng::SYNTH);
        Ok(Self::draw(spec, &mut rng))
    }

    fn draw(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let h = spec.dim;
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..h).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let mut components = Vec::with_capacity(spec.components);
        let mut shifts = Vec::with_capacity(spec.components);
        for _ in 0..spec.components {
            let radius = spec.ball_radius * rng.random::<f64>().powf(1.0 / h as f64);
            let mean = unit(rng).into_iter().map(|v| v * radius).collect();
            let mut rotation: Vec<Vec<f64>> = (0..h)
                .map(|_| (0..h).map(|_| rng.sample(rand_distr::StandardNormal)).collect())
                .collect();
            orthonormalize_rows(&mut rotation);
            let scales = (0..h)
                .map(|_| spec.sigma_max * (0.5 + 0.5 * rng.random::<f64>()))
                .collect();
            components.push(Component { mean, rotation, scales });
            let d = spec.shift_sigmas * spec.sigma_max;
            shifts.push(unit(rng).into_iter().map(|v| v * d).collect());
        }
        Self {
            components,
            shifts,
            inflation: spec.inflation,
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// Log-density of the equal-weight in-distribution mixture.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let logs: Vec<f64> = self.components.iter().map(|c| c.log_density(x)).collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logs.iter().map(|l| (l - m).exp()).sum();
        m + (s / logs.len() as f64).ln()
    }

    fn sample(&self, rng: &mut ChaCha8Rng, n: usize, ood: bool) -> Vec<f64> {
        let zero = vec![0.0; self.dim()];
        let mut out = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            let k = rng.random_range(0..self.components.len());
            let x = if ood {
                self.components[k].sample(rng, self.inflation, &self.shifts[k])
            } else {
                self.components[k].sample(rng, 1.0, &zero)
            };
            out.extend(x);
        }
        out
    }
}

fn validate(spec: &SynthSpec) -> Result<()> {
    let bad = |what: &str| Err(Error::Config(format!("synthetic spec: {what}")));
    if spec.dim < 2 {
        return bad("dim must be at least 2");
    }
    if spec.components == 0 {
        return bad("need at least one component");
    }
    if !(spec.ball_radius >= 0.0 && spec.ball_radius.is_finite()) {
        return bad("ball_radius must be finite and non-negative");
    }
    if !(spec.sigma_max > 0.0 && spec.sigma_max.is_finite()) {
        return bad("sigma_max must be positive");
    }
    if !(spec.shift_sigmas >= 0.0 && spec.shift_sigmas.is_finite()) {
        return bad("shift_sigmas must be finite and non-negative");
    }
    if !(spec.inflation > 0.0 && spec.inflation.is_finite()) {
        return bad("inflation must be positive");
    }
    if spec.n_id == 0 || spec.n_ood == 0 {
        return bad("n_id and n_ood must be positive");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBenchmark {
    pub mixture: Mixture,
    /// Every generated row: in-distribution rows first.
    pub all: LabeledDataset,
    pub splits: Splits,
}

/// Generates the labeled data and splits it (train feasible-only, balanced
/// validation and test sets).
pub fn synth_benchmark(spec: &SynthSpec, seed: u64) -> Result<SynthBenchmark> {
    validate(spec)?;
    let mut rng = rng::stream(seed, rng::SYNTH);
    let mixture = Mixture::draw(spec, &mut rng);
    let mut emb = mixture.sample(&mut rng, spec.n_id, false);
    emb.extend(mixture.sample(&mut rng, spec.n_ood, true));
    let n = spec.n_id + spec.n_ood;
    let ids = (0..n)
        .map(|i| if i < spec.n_id { format!("id{i:06}") } else { format!("ood{:06}", i - spec.n_id) })
        .collect();
    let labels = (0..n)
        .map(|i| Some(if i < spec.n_id { Label::Feasible } else { Label::Infeasible }))
        .collect();
    let all = LabeledDataset::new(spec.dim, ids, labels, emb)?;
    let splits = make_splits(&all, spec.val_frac, spec.test_frac, seed)?;
    Ok(SynthBenchmark { mixture, all, splits })
}
