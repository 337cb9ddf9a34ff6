use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use feasflow_core::checkpoint::{self, Checkpoint};
use feasflow_core::eval::{self, EvalSummary};
use feasflow_core::ocsvm;
use feasflow_core::synth::synth_benchmark;
use feasflow_core::{
    train, BaseKind, Error, LabeledDataset, OcSvmConfig, Result, ScoreReport, ScoreRow, SynthSpec,
    TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::manifest::Manifest;
use crate::settings::{self, set};
use crate::{
    BaselineArgs, Cli, Command, EvalArgs, InspectArgs, ScoreArgs, SynthArgs, ThresholdArgs,
    ThresholdSource, TrainArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Score(a) => score(a, cli.seed),
        Command::Threshold(a) => threshold(a, cli.seed),
        Command::Eval(a) => evaluate(a, cli.seed),
        Command::Baseline(a) => baseline(a, cli.seed),
        Command::Inspect(a) => inspect(a, cli.seed),
    }
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("json: {e}")))?;
    write_text(path, &(text + "\n"))
}

fn load_data(path: &Path, manifest: &mut Manifest) -> Result<LabeledDataset> {
    manifest.input(path)?;
    LabeledDataset::load(path).map_err(|e| match e {
        Error::Parse { line, what } => Error::Parse {
            line,
            what: format!("{}: {what}", path.display()),
        },
        other => other,
    })
}

fn load_scores(path: &Path, manifest: &mut Manifest) -> Result<ScoreReport> {
    manifest.input(path)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ScoreReport::read_csv(std::io::BufReader::new(file))
}

#[derive(Debug, Serialize, Deserialize)]
struct ThresholdFile {
    threshold: f64,
    youden_j: f64,
    n_feasible: usize,
    n_infeasible: usize,
}

fn resolve_threshold(src: &ThresholdSource, manifest: &mut Manifest) -> Result<Option<f64>> {
    if let Some(t) = src.threshold {
        return Ok(Some(t));
    }
    let Some(path) = &src.threshold_file else {
        return Ok(None);
    };
    manifest.input(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: ThresholdFile =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(Some(parsed.threshold))
}

fn synth(a: &SynthArgs, seed: Option<u64>) -> Result<()> {
    let (mut spec, _) = settings::load::<SynthSpec>(a.config.as_deref())?;
    set(&mut spec.dim, a.dim);
    set(&mut spec.n_id, a.n_id);
    set(&mut spec.n_ood, a.n_ood);
    set(&mut spec.components, a.components);
    set(&mut spec.ball_radius, a.ball_radius);
    set(&mut spec.sigma_max, a.sigma_max);
    set(&mut spec.shift_sigmas, a.shift_sigmas);
    set(&mut spec.inflation, a.inflation);
    set(&mut spec.val_frac, a.val_frac);
    set(&mut spec.test_frac, a.test_frac);
    let seed = seed.unwrap_or(0);
    let mut manifest = Manifest::new("synth", seed);
    manifest.config(&spec)?;
    if let Some(c) = &a.config {
        manifest.input(c)?;
    }

    let bench = synth_benchmark(&spec, seed)?;
    out_dir(&a.out)?;
    for (name, set) in [
        ("all.csv", &bench.all),
        ("train.csv", &bench.splits.train),
        ("val.csv", &bench.splits.val),
        ("test.csv", &bench.splits.test),
    ] {
        set.save(a.out.join(name))?;
        manifest.output(name);
    }
    write_text(&a.out.join("config.toml"), &settings::to_toml(&spec)?)?;
    manifest.output("config.toml");
    if bench.splits.dropped_infeasible > 0 {
        log::warn!("dropped {} infeasible rows to balance the splits", bench.splits.dropped_infeasible);
    }
    log::info!(
        "train {} / val {} / test {} rows written to {}",
        bench.splits.train.len(),
        bench.splits.val.len(),
        bench.splits.test.len(),
        a.out.display()
    );
    manifest.write(&a.out)
}

fn train_cmd(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let (mut cfg, table) = settings::load::<TrainConfig>(a.config.as_deref())?;
    set(&mut cfg.seed, seed);
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.learning_rate, a.learning_rate);
    set(&mut cfg.early_stop_patience, a.patience);
    set(&mut cfg.checkpoint_every, a.checkpoint_every);
    set(&mut cfg.flow.num_coupling_layers, a.layers);
    set(&mut cfg.flow.conditioner_depth, a.conditioner_depth);
    set(&mut cfg.flow.conditioner_width, a.conditioner_width);
    if let Some(b) = &a.base {
        cfg.flow.base_kind = match b.as_str() {
            "gaussian" => BaseKind::Gaussian,
            "resampling" => BaseKind::Resampling,
            other => return Err(Error::Usage(format!("unknown base {other:?}; expected gaussian or resampling"))),
        };
    }

    let mut manifest = Manifest::new("train", cfg.seed);
    if let Some(c) = &a.config {
        manifest.input(c)?;
    }
    let train_set = load_data(&a.train, &mut manifest)?;
    if !settings::has_key(&table, &["flow", "dim"]) {
        cfg.flow.dim = train_set.dim();
    }
    let val_set = match &a.val {
        Some(p) => load_data(p, &mut manifest)?,
        None => LabeledDataset::new(train_set.dim(), vec![], vec![], vec![])?,
    };
    out_dir(&a.out)?;
    if cfg.checkpoint_every > 0 {
        let dir = a.out.join("checkpoints");
        out_dir(&dir)?;
        cfg.checkpoint_dir = Some(dir);
    }
    manifest.config(&cfg)?;

    let (model, report) = train::train(&cfg, &train_set, &val_set)?;
    checkpoint::save_checkpoint(&model, a.out.join("model.ckpt"))?;
    manifest.output("model.ckpt");

    let mut log = create(&a.out.join("train_log.jsonl"))?;
    for rec in &report.history {
        let line = serde_json::to_string(rec).map_err(|e| Error::Data(format!("json: {e}")))?;
        writeln!(log, "{line}").map_err(|e| Error::io(a.out.join("train_log.jsonl"), e))?;
    }
    log.flush().map_err(|e| Error::io(a.out.join("train_log.jsonl"), e))?;
    manifest.output("train_log.jsonl");

    #[derive(Serialize)]
    struct Summary {
        initial_train_nll: f64,
        final_train_nll: Option<f64>,
        epochs_run: usize,
        best_epoch: Option<usize>,
        stopped_early: bool,
        checkpoints: Vec<String>,
    }
    let names = report
        .checkpoints
        .iter()
        .filter_map(|p| p.file_name().map(|n| format!("checkpoints/{}", n.to_string_lossy())))
        .collect::<Vec<_>>();
    write_json(
        &a.out.join("report.json"),
        &Summary {
            initial_train_nll: report.initial_train_nll,
            final_train_nll: report.history.last().map(|r| r.train_nll),
            epochs_run: report.history.len(),
            best_epoch: report.best_epoch,
            stopped_early: report.stopped_early,
            checkpoints: names.clone(),
        },
    )?;
    manifest.output("report.json");
    for n in names {
        manifest.output(n);
    }
    write_text(&a.out.join("config.toml"), &settings::to_toml(&cfg)?)?;
    manifest.output("config.toml");
    manifest.epoch_seconds(report.history.iter().map(|r| r.seconds).collect());
    manifest.write(&a.out)
}

fn score(a: &ScoreArgs, seed: Option<u64>) -> Result<()> {
    let mut manifest = Manifest::new("score", seed.unwrap_or(0));
    manifest.input(&a.model)?;
    let model = checkpoint::load_any(&a.model)?;
    let data = load_data(&a.data, &mut manifest)?;
    let delta = resolve_threshold(&a.threshold, &mut manifest)?;
    let mut report = match &model {
        Checkpoint::Flow(m) => {
            let mut r = eval::score_dataset(m, &data)?;
            r.model = Some("flow".into());
            r
        }
        Checkpoint::OcSvm(m) => ocsvm_report(m, &data)?,
    };
    if let Some(d) = delta {
        report.apply_threshold(d);
    }
    out_dir(&a.out)?;
    report.write_csv(create(&a.out.join("scores.csv"))?)?;
    manifest.output("scores.csv");
    manifest.config(&serde_json::json!({
        "model": report.model,
        "threshold": delta,
    }))?;
    manifest.write(&a.out)
}

fn ocsvm_report(model: &feasflow_core::OcSvmModel, data: &LabeledDataset) -> Result<ScoreReport> {
    if data.dim() != model.dim() {
        return Err(Error::Shape(format!(
            "data has dimension {}, model expects {}",
            data.dim(),
            model.dim()
        )));
    }
    let scores = model.score_batch(data.embeddings(), data.len())?;
    let rows = scores
        .into_iter()
        .enumerate()
        .map(|(i, total)| ScoreRow {
            id: data.ids()[i].clone(),
            label: data.labels()[i],
            total,
            base_term: None,
            logdet_term: None,
            verdict: None,
        })
        .collect();
    Ok(ScoreReport {
        rows,
        model: Some("ocsvm".into()),
        threshold: None,
    })
}

fn threshold(a: &ThresholdArgs, seed: Option<u64>) -> Result<()> {
    let mut manifest = Manifest::new("threshold", seed.unwrap_or(0));
    let report = load_scores(&a.scores, &mut manifest)?;
    let (s, l) = report.labeled();
    let delta = eval::select_threshold(&s, &l)?;
    let summary = eval::summarize(&s, &l, Some(delta))?;
    out_dir(&a.out)?;
    let file = ThresholdFile {
        threshold: delta,
        youden_j: summary.tpr.unwrap_or(0.0) - summary.fpr.unwrap_or(0.0),
        n_feasible: summary.n_feasible,
        n_infeasible: summary.n_infeasible,
    };
    write_json(&a.out.join("threshold.json"), &file)?;
    manifest.output("threshold.json");
    println!("{delta:e}");
    manifest.write(&a.out)
}

fn evaluate(a: &EvalArgs, seed: Option<u64>) -> Result<()> {
    let mut manifest = Manifest::new("eval", seed.unwrap_or(0));
    let report = load_scores(&a.scores, &mut manifest)?;
    let delta = resolve_threshold(&a.threshold, &mut manifest)?;
    let (s, l) = report.labeled();
    let roc = eval::roc_curve(&s, &l)?;
    let summary: EvalSummary = eval::summarize(&s, &l, delta)?;
    out_dir(&a.out)?;
    write_json(&a.out.join("metrics.json"), &summary)?;
    roc.write_csv(create(&a.out.join("roc.csv"))?)?;
    manifest.output("metrics.json");
    manifest.output("roc.csv");
    manifest.config(&serde_json::json!({ "threshold": delta }))?;
    println!("auroc {:.6}", summary.auroc);
    manifest.write(&a.out)
}

fn baseline(a: &BaselineArgs, seed: Option<u64>) -> Result<()> {
    let (mut cfg, _) = settings::load::<OcSvmConfig>(a.config.as_deref())?;
    set(&mut cfg.nu, a.nu);
    if a.gamma.is_some() {
        cfg.gamma = a.gamma;
    }
    set(&mut cfg.tol, a.tol);
    set(&mut cfg.max_iter, a.max_iter);
    let mut manifest = Manifest::new("baseline", seed.unwrap_or(0));
    if let Some(c) = &a.config {
        manifest.input(c)?;
    }
    let train_set = load_data(&a.train, &mut manifest)?;
    let test_set = load_data(&a.test, &mut manifest)?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if train_set.count(feasflow_core::Label::Infeasible) > 0 {
        return Err(Error::Config("baseline training rows must not be labeled infeasible".into()));
    }
    manifest.config(&cfg)?;

    let fit = ocsvm::fit(train_set.embeddings(), train_set.len(), train_set.dim(), &cfg)?;
    let report = ocsvm_report(&fit.model, &test_set)?;
    out_dir(&a.out)?;
    checkpoint::save_ocsvm(&fit.model, a.out.join("ocsvm.ckpt"))?;
    report.write_csv(create(&a.out.join("scores.csv"))?)?;
    manifest.output("ocsvm.ckpt");
    manifest.output("scores.csv");

    #[derive(Serialize)]
    struct Metrics {
        gamma: f64,
        nu: f64,
        rho: f64,
        support_vectors: usize,
        iterations: usize,
        dual_objective: f64,
        max_violation: f64,
        test: Option<EvalSummary>,
    }
    let (s, l) = report.labeled();
    let test = if l.iter().any(|v| *v) && l.iter().any(|v| !*v) {
        Some(eval::summarize(&s, &l, None)?)
    } else {
        None
    };
    if let Some(t) = &test {
        println!("auroc {:.6}", t.auroc);
    }
    write_json(
        &a.out.join("metrics.json"),
        &Metrics {
            gamma: fit.model.gamma(),
            nu: fit.model.nu(),
            rho: fit.model.rho(),
            support_vectors: fit.model.num_support(),
            iterations: fit.iterations,
            dual_objective: fit.objective,
            max_violation: fit.violation,
            test,
        },
    )?;
    manifest.output("metrics.json");
    manifest.write(&a.out)
}

fn inspect(a: &InspectArgs, seed: Option<u64>) -> Result<()> {
    let mut manifest = Manifest::new("inspect", seed.unwrap_or(0));
    manifest.input(&a.model)?;
    let model = checkpoint::load_checkpoint(&a.model)?;
    let data = load_data(&a.data, &mut manifest)?;
    let latents = eval::export_latents(&model, &data)?;
    out_dir(&a.out)?;
    latents.save(a.out.join("latents.csv"))?;
    manifest.output("latents.csv");
    for (name, set) in [("similarity_input.csv", &data), ("similarity_latent.csv", &latents)] {
        let m = eval::cosine_similarity_matrix(set.embeddings(), set.len(), set.dim())?;
        eval::write_matrix_csv(&m, set.ids(), create(&a.out.join(name))?)?;
        manifest.output(name);
    }
    manifest.write(&a.out)
}
