//! Maximum-likelihood training on feasible samples with Adam.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::checkpoint::save_checkpoint;
use crate::data::{Label, LabeledDataset};
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::flow::{FlowConfig, FlowModel};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without improvement before stopping; 0 disables early stopping.
    pub early_stop_patience: usize,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub adam: AdamConfig,
    pub flow: FlowConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-5,
            epochs: 500,
            seed: 0,
            early_stop_patience: 50,
            checkpoint_every: 0,
            checkpoint_dir: None,
            adam: AdamConfig::default(),
            flow: FlowConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.flow.num_coupling_layers < 2 {
            return Err(Error::Config("num_coupling_layers must be at least 2".into()));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::Config("checkpoint_every needs checkpoint_dir".into()));
        }
        Ok(())
    }
}

/// Validation figures of merit of one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    /// Mean log-likelihood of the feasible validation rows.
    pub mean_feasible_ll: f64,
    pub auroc: Option<f64>,
}

impl Validation {
    /// AUROC first when available, mean feasible log-likelihood otherwise
    /// and as tie-break.
    pub fn better_than(&self, other: &Validation) -> bool {
        match (self.auroc, other.auroc) {
            (Some(a), Some(b)) if a != b => a > b,
            _ => self.mean_feasible_ll > other.mean_feasible_ll,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub validation: Option<Validation>,
    /// Excluded from logs that must be reproducible byte for byte.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_train_nll: f64,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the returned model; `None` when no epoch ran or no
    /// validation data was given (the last model is returned).
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub checkpoints: Vec<PathBuf>,
}

pub fn validate_model(model: &FlowModel, val: &LabeledDataset) -> Result<Option<Validation>> {
    let feasible = val.count(Label::Feasible);
    if feasible == 0 {
        return Ok(None);
    }
    let scores = model.log_prob_batch(val.embeddings(), val.len())?;
    let mut sum = 0.0;
    let mut totals = Vec::new();
    let mut labels = Vec::new();
    for (r, l) in scores.iter().zip(val.labels()) {
        if *l == Some(Label::Feasible) {
            sum += r.total;
        }
        if let Some(l) = l {
            totals.push(r.total);
            labels.push(*l == Label::Feasible);
        }
    }
    let auroc = if val.has_both_labels() {
        Some(auroc(&totals, &labels)?)
    } else {
        None
    };
    Ok(Some(Validation {
        mean_feasible_ll: sum / feasible as f64,
        auroc,
    }))
}

fn with_context(e: Error, epoch: usize, step: usize, batch: &[usize]) -> Error {
    match e {
        Error::Training { what, .. } => {
            // Map "batch row k" onto the training-set index.
            let what = match what.rsplit_once("batch row ") {
                Some((head, k)) => match k.parse::<usize>().ok().and_then(|k| batch.get(k)) {
                    Some(idx) => format!("{head}training sample {idx}"),
                    None => format!("{head}batch row {k}"),
                },
                None => what,
            };
            Error::Training { epoch, step, what }
        }
        Error::Density { layer, what } => Error::Training {
            epoch,
            step,
            what: format!(
                "coupling layer {}: {what}",
                layer.map_or("?".to_string(), |l| l.to_string())
            ),
        },
        other => other,
    }
}

/// Trains a flow on `train` (feasible rows only) and selects the best epoch
/// on `val`.
pub fn train(config: &TrainConfig, train: &LabeledDataset, val: &LabeledDataset) -> Result<(FlowModel, TrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if train.dim() != config.flow.dim {
        return Err(Error::Config(format!(
            "training data has dimension {}, flow expects {}",
            train.dim(),
            config.flow.dim
        )));
    }
    if !val.is_empty() && val.dim() != config.flow.dim {
        return Err(Error::Config(format!(
            "validation data has dimension {}, flow expects {}",
            val.dim(),
            config.flow.dim
        )));
    }
    if let Some(i) = train.labels().iter().position(|l| *l == Some(Label::Infeasible)) {
        return Err(Error::Config(format!("training row {:?} is labeled infeasible", train.ids()[i])));
    }

    if let Some(i) = (0..train.len()).find(|&i| !train.row(i).iter().all(|v| v.is_finite())) {
        return Err(Error::Data(format!("training row {:?} has a non-finite value", train.ids()[i])));
    }

    let mut model = FlowModel::new(&config.flow, config.seed)?;
    let n = train.len();
    let dim = train.dim();
    let mut report = TrainReport {
        initial_train_nll: model.nll(train.embeddings(), n)?,
        ..Default::default()
    };
    if config.epochs == 0 {
        return Ok((model, report));
    }

    let mut adam = AdamState::new(model.num_params(), config.adam);
    let mut grads = model.zero_grads();
    let mut shuffle = rng::stream(config.seed, rng::SHUFFLE);
    let mut mc = rng::stream(config.seed, rng::MONTE_CARLO);
    let n_mc = config.flow.resampling.n_mc;
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch = Vec::with_capacity(config.batch_size * dim);
    let mut best: Option<(Validation, FlowModel, usize)> = None;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            step += 1;
            batch.clear();
            for &i in idx {
                batch.extend_from_slice(train.row(i));
            }
            let estimate = match model.base_mut().as_resampling_mut() {
                Some(base) => {
                    let eps = rng::standard_normal_vec(&mut mc, dim * n_mc);
                    let est = base.estimate_acceptance(&eps, n_mc)?;
                    base.fold_estimate(est.mean);
                    Some(est)
                }
                None => None,
            };
            let loss = model
                .nll_grad_into(&batch, idx.len(), estimate.as_ref(), &mut grads)
                .map_err(|e| with_context(e, epoch, step, idx))?;
            loss_sum += loss * idx.len() as f64;
            let g = grads.slices();
            adam.update(&mut model.param_slices_mut(), &g, config.learning_rate)
                .map_err(|e| with_context(e, epoch, step, idx))?;
        }
        let train_nll = loss_sum / n as f64;
        let validation = validate_model(&model, val)?;
        report.history.push(EpochRecord {
            epoch,
            train_nll,
            validation,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: train nll {train_nll:.6}{}",
            validation.map_or(String::new(), |v| format!(
                ", val ll {:.6}{}",
                v.mean_feasible_ll,
                v.auroc.map_or(String::new(), |a| format!(", val auroc {a:.6}"))
            ))
        );

        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            if let Some(dir) = &config.checkpoint_dir {
                let path = dir.join(format!("epoch_{epoch:05}.ckpt"));
                save_checkpoint(&model, &path)?;
                report.checkpoints.push(path);
            }
        }

        if let Some(v) = validation {
            if best.as_ref().is_none_or(|(b, _, _)| v.better_than(b)) {
                best = Some((v, model.clone(), epoch));
            }
            let best_epoch = best.as_ref().map_or(epoch, |b| b.2);
            if config.early_stop_patience > 0 && epoch - best_epoch >= config.early_stop_patience {
                report.stopped_early = epoch < config.epochs;
                break;
            }
        }
    }

    if let Some((_, m, epoch)) = best {
        model = m;
        report.best_epoch = Some(epoch);
    }
    Ok((model, report))
}
