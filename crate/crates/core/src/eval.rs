//! Scoring, thresholding and ranking metrics.
//!
//! Feasible is the positive class, and a sample is called feasible when its
//! score is at least the threshold.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, Label, LabeledDataset};
use crate::error::{Error, Result};
use crate::flow::FlowModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Feasible,
    Infeasible,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Feasible => "feasible",
            Verdict::Infeasible => "infeasible",
        }
    }
}

/// Infeasible iff `score < delta`.
pub fn classify(score: f64, delta: f64) -> Verdict {
    if score < delta {
        Verdict::Infeasible
    } else {
        Verdict::Feasible
    }
}

pub fn classify_all(scores: &[f64], delta: f64) -> Vec<Verdict> {
    scores.iter().map(|&s| classify(s, delta)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub label: Option<Label>,
    pub total: f64,
    /// Absent for scores without a decomposition (baselines).
    pub base_term: Option<f64>,
    pub logdet_term: Option<f64>,
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
    pub model: Option<String>,
    pub threshold: Option<f64>,
}

impl ScoreReport {
    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.total).collect()
    }

    pub fn labels(&self) -> Option<Vec<bool>> {
        self.rows
            .iter()
            .map(|r| r.label.map(|l| l == Label::Feasible))
            .collect()
    }

    /// Scores and labels of the labeled rows only.
    pub fn labeled(&self) -> (Vec<f64>, Vec<bool>) {
        self.rows
            .iter()
            .filter_map(|r| r.label.map(|l| (r.total, l == Label::Feasible)))
            .unzip()
    }

    pub fn apply_threshold(&mut self, delta: f64) {
        for r in &mut self.rows {
            r.verdict = Some(classify(r.total, delta));
        }
        self.threshold = Some(delta);
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let decomposed = self.rows.iter().all(|r| r.base_term.is_some() && r.logdet_term.is_some());
        let with_verdict = self.rows.iter().any(|r| r.verdict.is_some());
        let mut header = vec!["id", "label", "total"];
        if decomposed {
            header.extend(["base_term", "logdet_term"]);
        }
        if with_verdict {
            header.push("verdict");
        }
        w.write_record(&header).map_err(write_error)?;
        for r in &self.rows {
            let mut rec = vec![r.id.clone(), r.label.map_or("", Label::as_str).to_string(), fmt_f64(r.total)];
            if decomposed {
                rec.push(fmt_f64(r.base_term.unwrap_or_default()));
                rec.push(fmt_f64(r.logdet_term.unwrap_or_default()));
            }
            if with_verdict {
                rec.push(r.verdict.map_or("", Verdict::as_str).to_string());
            }
            w.write_record(&rec).map_err(write_error)?;
        }
        w.flush().map_err(|e| Error::Data(format!("write failed: {e}")))
    }

    /// Reads a score CSV. Requires `id`, `label` and `total` columns; the
    /// decomposition and verdict columns are optional.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().from_reader(input);
        let header = reader.headers().map_err(read_error)?.clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        let (id, label, total) = match (col("id"), col("label"), col("total")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    what: "score file needs id, label and total columns".into(),
                })
            }
        };
        let (base, logdet, verdict) = (col("base_term"), col("logdet_term"), col("verdict"));
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(read_error)?;
            let line = rec.position().map_or(0, |p| p.line());
            let num = |k: usize| -> Result<f64> {
                rec.get(k)
                    .unwrap_or("")
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse {
                        line,
                        what: format!("column {} is not a number", &header[k]),
                    })
            };
            let lab = Label::parse(rec.get(label).unwrap_or("")).ok_or_else(|| Error::Parse {
                line,
                what: format!("unknown label {:?}", rec.get(label).unwrap_or("")),
            })?;
            let v = match verdict.map(|k| rec.get(k).unwrap_or("")) {
                None | Some("") => None,
                Some("feasible") => Some(Verdict::Feasible),
                Some("infeasible") => Some(Verdict::Infeasible),
                Some(other) => {
                    return Err(Error::Parse {
                        line,
                        what: format!("unknown verdict {other:?}"),
                    })
                }
            };
            rows.push(ScoreRow {
                id: rec.get(id).unwrap_or("").to_string(),
                label: lab,
                total: num(total)?,
                base_term: base.map(num).transpose()?,
                logdet_term: logdet.map(num).transpose()?,
                verdict: v,
            });
        }
        Ok(Self {
            rows,
            model: None,
            threshold: None,
        })
    }
}

fn write_error(e: csv::Error) -> Error {
    Error::Data(format!("write failed: {e}"))
}

fn read_error(e: csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(0, |p| p.line()),
        what: e.to_string(),
    }
}

fn check_dim(model: &FlowModel, data: &LabeledDataset) -> Result<()> {
    if data.dim() != model.dim() {
        let id = data.ids().first().cloned().unwrap_or_default();
        return Err(Error::Shape(format!(
            "sample {id:?} has dimension {}, model expects {}",
            data.dim(),
            model.dim()
        )));
    }
    Ok(())
}

/// Decomposed log-likelihood of every row, in input order.
pub fn score_dataset(model: &FlowModel, data: &LabeledDataset) -> Result<ScoreReport> {
    check_dim(model, data)?;
    let scores = model.log_prob_batch(data.embeddings(), data.len())?;
    let rows = scores
        .into_iter()
        .enumerate()
        .map(|(i, r)| ScoreRow {
            id: data.ids()[i].clone(),
            label: data.labels()[i],
            total: r.total,
            base_term: Some(r.base_term),
            logdet_term: Some(r.logdet_term),
            verdict: None,
        })
        .collect();
    Ok(ScoreReport {
        rows,
        model: None,
        threshold: None,
    })
}

/// Latent coordinates of every row, keeping ids and labels.
pub fn export_latents(model: &FlowModel, data: &LabeledDataset) -> Result<LabeledDataset> {
    check_dim(model, data)?;
    let (z, _) = model.inverse_batch(data.embeddings(), data.len())?;
    LabeledDataset::new(data.dim(), data.ids().to_vec(), data.labels().to_vec(), z)
}

fn check_labels(scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {i} is NaN")));
    }
    let pos = labels.iter().filter(|l| **l).count() as u64;
    let neg = labels.len() as u64 - pos;
    Ok((pos, neg))
}

/// Positive/negative counts at or above each distinct score, highest first.
fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(f64, u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out: Vec<(f64, u64, u64)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            out.push((scores[i], tp, fp));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocResult {
    /// Threshold of each point: `+inf`, then distinct scores in decreasing order.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auroc: f64,
}

impl RocResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["threshold", "fpr", "tpr"]).map_err(write_error)?;
        for ((t, f), p) in self.thresholds.iter().zip(&self.fpr).zip(&self.tpr) {
            let t = if t.is_infinite() { "inf".to_string() } else { fmt_f64(*t) };
            w.write_record([t, fmt_f64(*f), fmt_f64(*p)]).map_err(write_error)?;
        }
        w.flush().map_err(|e| Error::Data(format!("write failed: {e}")))
    }
}

/// Empirical ROC curve and its trapezoidal area.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocResult> {
    let (pos, neg) = check_labels(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("ROC needs both feasible and infeasible samples".into()));
    }
    let points = sweep(scores, labels);
    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    // Twice the area in units of 1/(pos*neg), accumulated exactly.
    let mut twice_area: u128 = 0;
    let (mut tp_prev, mut fp_prev) = (0u64, 0u64);
    for &(s, tp, fp) in &points {
        twice_area += (fp - fp_prev) as u128 * (tp + tp_prev) as u128;
        thresholds.push(s);
        fpr.push(fp as f64 / neg as f64);
        tpr.push(tp as f64 / pos as f64);
        tp_prev = tp;
        fp_prev = fp;
    }
    let auroc = twice_area as f64 / (2.0 * pos as f64 * neg as f64);
    Ok(RocResult {
        thresholds,
        fpr,
        tpr,
        auroc,
    })
}

pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(roc_curve(scores, labels)?.auroc)
}

/// Threshold maximizing Youden's J over midpoints of adjacent distinct
/// scores, ties going to the larger threshold. With a single distinct score
/// that score is returned.
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Threshold(
            "threshold selection needs both feasible and infeasible validation samples".into(),
        ));
    }
    let points = sweep(scores, labels);
    if points.len() == 1 {
        return Ok(points[0].0);
    }
    // Candidate between points[k+1] (lower) and points[k] (upper) calls
    // feasible exactly the samples at or above points[k]. J is compared as
    // tp*neg - fp*pos to avoid rounding.
    let mut best: Option<(i128, f64)> = None;
    for k in 0..points.len() - 1 {
        let (hi, tp, fp) = points[k];
        let lo = points[k + 1].0;
        let j = tp as i128 * neg as i128 - fp as i128 * pos as i128;
        let delta = 0.5 * (lo + hi);
        // Scanning from the largest candidate down, keep only strict gains.
        if best.is_none_or(|(bj, _)| j > bj) {
            best = Some((j, delta));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// Cosine similarity of every pair of rows, as a row-major `rows x rows` matrix.
pub fn cosine_similarity_matrix(vectors: &[f64], rows: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || vectors.len() != rows * dim {
        return Err(Error::Shape(format!(
            "{} values do not form {rows} rows of dimension {dim}",
            vectors.len()
        )));
    }
    let norms: Vec<f64> = vectors
        .chunks(dim)
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(index) = norms.iter().position(|n| *n == 0.0) {
        return Err(Error::Similarity { index });
    }
    let mut m = vec![0.0; rows * rows];
    for i in 0..rows {
        let vi = &vectors[i * dim..(i + 1) * dim];
        for j in i..rows {
            let vj = &vectors[j * dim..(j + 1) * dim];
            let d: f64 = vi.iter().zip(vj).map(|(a, b)| a * b).sum();
            let c = d / (norms[i] * norms[j]);
            m[i * rows + j] = c;
            m[j * rows + i] = c;
        }
    }
    Ok(m)
}

pub fn write_matrix_csv<W: Write>(m: &[f64], ids: &[String], out: W) -> Result<()> {
    let n = ids.len();
    if m.len() != n * n {
        return Err(Error::Shape("matrix size does not match id count".into()));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header = vec!["id".to_string()];
    header.extend(ids.iter().cloned());
    w.write_record(&header).map_err(write_error)?;
    for (i, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(m[i * n..(i + 1) * n].iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec).map_err(write_error)?;
    }
    w.flush().map_err(|e| Error::Data(format!("write failed: {e}")))
}

/// Headline numbers of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub n_feasible: usize,
    pub n_infeasible: usize,
    pub auroc: f64,
    pub threshold: Option<f64>,
    pub true_positive: Option<usize>,
    pub false_positive: Option<usize>,
    pub true_negative: Option<usize>,
    pub false_negative: Option<usize>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn summarize(scores: &[f64], labels: &[bool], threshold: Option<f64>) -> Result<EvalSummary> {
    let auroc = auroc(scores, labels)?;
    let n_feasible = labels.iter().filter(|l| **l).count();
    let n_infeasible = labels.len() - n_feasible;
    let mut s = EvalSummary {
        n: labels.len(),
        n_feasible,
        n_infeasible,
        auroc,
        threshold,
        true_positive: None,
        false_positive: None,
        true_negative: None,
        false_negative: None,
        tpr: None,
        fpr: None,
        accuracy: None,
    };
    if let Some(delta) = threshold {
        let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
        for (&sc, &l) in scores.iter().zip(labels) {
            match (classify(sc, delta), l) {
                (Verdict::Feasible, true) => tp += 1,
                (Verdict::Feasible, false) => fp += 1,
                (Verdict::Infeasible, false) => tn += 1,
                (Verdict::Infeasible, true) => fneg += 1,
            }
        }
        s.true_positive = Some(tp);
        s.false_positive = Some(fp);
        s.true_negative = Some(tn);
        s.false_negative = Some(fneg);
        s.tpr = Some(tp as f64 / n_feasible as f64);
        s.fpr = Some(fp as f64 / n_infeasible as f64);
        s.accuracy = Some((tp + tn) as f64 / labels.len() as f64);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn pair_count(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn classify_boundary() {
        assert_eq!(classify(1.5, 1.5), Verdict::Feasible);
        assert_eq!(classify(1.5 - 1e-12, 1.5), Verdict::Infeasible);
        let s = [0.0, 2.0, -1.0];
        assert_eq!(classify_all(&s, 0.5), s.iter().map(|&x| classify(x, 0.5)).collect::<Vec<_>>());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[3.0, 2.0, 1.0, 0.0], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[4.0, 3.0, 2.0, 1.0], &[true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&[1.0, 2.0], &[true, true]), Err(Error::Metric(_))));
    }

    #[test]
    fn auroc_matches_pair_count_with_ties() {
        let mut rng = rng::stream(3, 0);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..200).map(|_| (rng.random::<f64>() * 20.0).round()).collect();
            let labels: Vec<bool> = (0..200).map(|_| rng.random()).collect();
            let a = auroc(&scores, &labels).unwrap();
            assert!((a - pair_count(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn roc_endpoints_and_monotonicity() {
        let r = roc_curve(&[0.3, 0.1, 0.3, 0.9], &[true, false, false, true]).unwrap();
        assert_eq!((r.fpr[0], r.tpr[0]), (0.0, 0.0));
        assert_eq!((*r.fpr.last().unwrap(), *r.tpr.last().unwrap()), (1.0, 1.0));
        assert!(r.fpr.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.tpr.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(select_threshold(&[2.0, 3.0, -1.0, 0.0], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(select_threshold(&[1.0, 1.0, 1.0, 1.0], &[true, false, true, false]).unwrap(), 1.0);
        // Every score shared by one sample of each class: J = 0 at every
        // midpoint, so the largest candidate wins.
        let labels = [true, false, true, false, true, false];
        assert_eq!(select_threshold(&[3.0, 3.0, 2.0, 2.0, 1.0, 1.0], &labels).unwrap(), 2.5);
        assert!(matches!(select_threshold(&[1.0], &[true]), Err(Error::Threshold(_))));
    }

    #[test]
    fn cosine_examples() {
        let m = cosine_similarity_matrix(&[1.0, 0.0, 0.0, 1.0, 2.0, 0.0], 3, 2).unwrap();
        assert_eq!(m[1], 0.0);
        assert!((m[2] - 1.0).abs() < 1e-15);
        assert!((0..3).all(|i| (m[i * 3 + i] - 1.0).abs() < 1e-12));
        match cosine_similarity_matrix(&[1.0, 1.0, 0.0, 0.0], 2, 2) {
            Err(Error::Similarity { index }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cosine_matches_naive_loop() {
        let mut rng = rng::stream(8, 0);
        let v: Vec<f64> = (0..40).map(|_| rng.random::<f64>() - 0.5).collect();
        let m = cosine_similarity_matrix(&v, 8, 5).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let (a, b) = (&v[i * 5..i * 5 + 5], &v[j * 5..j * 5 + 5]);
                let mut d = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for k in 0..5 {
                    d += a[k] * b[k];
                    na += a[k] * a[k];
                    nb += b[k] * b[k];
                }
                assert!((m[i * 8 + j] - d / (na.sqrt() * nb.sqrt())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_csv_round_trip() {
        let report = ScoreReport {
            rows: vec![
                ScoreRow {
                    id: "a".into(),
                    label: Some(Label::Feasible),
                    total: -1.25,
                    base_term: Some(-1.0),
                    logdet_term: Some(-0.25),
                    verdict: Some(Verdict::Feasible),
                },
                ScoreRow {
                    id: "b".into(),
                    label: None,
                    total: 0.1,
                    base_term: Some(0.3),
                    logdet_term: Some(-0.2),
                    verdict: Some(Verdict::Infeasible),
                },
            ],
            ..Default::default()
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(ScoreReport::read_csv(&buf[..]).unwrap(), report);
        let plain = "id,label,total\nx,infeasible,2.5\n";
        let r = ScoreReport::read_csv(plain.as_bytes()).unwrap();
        assert_eq!(r.rows[0].base_term, None);
    }

    #[test]
    fn summary_counts() {
        let s = summarize(&[2.0, 0.5, 1.0, -1.0], &[true, true, false, false], Some(0.75)).unwrap();
        assert_eq!(s.true_positive, Some(1));
        assert_eq!(s.false_negative, Some(1));
        assert_eq!(s.false_positive, Some(1));
        assert_eq!(s.true_negative, Some(1));
        assert_eq!(s.accuracy, Some(0.5));
    }
}
