//! Labeled embedding datasets, file formats, pooling and splits.
//!
//! Embedding CSV: header `id,label,f0,...,f{h-1}`, label one of `feasible`,
//! `infeasible` or empty. Node-feature files hold one block per assembly: a
//! `#assembly <id> [label]` line followed by one row of `h` whitespace- or
//! comma-separated floats per part.

use std::collections::HashSet;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Feasible,
    Infeasible,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Feasible => "feasible",
            Label::Infeasible => "infeasible",
        }
    }

    /// Parses a label cell; the empty string means unlabeled.
    pub fn parse(s: &str) -> Option<Option<Label>> {
        match s.trim() {
            "" => Some(None),
            "feasible" => Some(Some(Label::Feasible)),
            "infeasible" => Some(Some(Label::Infeasible)),
            _ => None,
        }
    }
}

/// Float formatting shared by every text output; round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    ids: Vec<String>,
    labels: Vec<Option<Label>>,
    /// Row-major `N x dim`.
    embeddings: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(dim: usize, ids: Vec<String>, labels: Vec<Option<Label>>, embeddings: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("embedding dimension must be positive".into()));
        }
        if labels.len() != ids.len() || embeddings.len() != ids.len() * dim {
            return Err(Error::Data(format!(
                "{} ids, {} labels and {} values do not describe rows of dimension {dim}",
                ids.len(),
                labels.len(),
                embeddings.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("duplicate id {id:?}")));
            }
        }
        Ok(Self {
            dim,
            ids,
            labels,
            embeddings,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[Option<Label>] {
        &self.labels
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == Some(label)).count()
    }

    pub fn has_both_labels(&self) -> bool {
        self.count(Label::Feasible) > 0 && self.count(Label::Infeasible) > 0
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut emb = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            emb.extend_from_slice(self.row(i));
        }
        Self {
            dim: self.dim,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            embeddings: emb,
        }
    }

    pub fn with_label(&self, label: Label) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == Some(label)).collect();
        self.subset(&idx)
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::Data(format!("cannot join dimensions {} and {}", self.dim, other.dim)));
        }
        let mut ids = self.ids.clone();
        ids.extend(other.ids.iter().cloned());
        let mut labels = self.labels.clone();
        labels.extend(&other.labels);
        let mut emb = self.embeddings.clone();
        emb.extend(&other.embeddings);
        Self::new(self.dim, ids, labels, emb)
    }

    /// `true` for feasible, `false` for infeasible; `None` if any row is unlabeled.
    pub fn binary_labels(&self) -> Option<Vec<bool>> {
        self.labels.iter().map(|l| l.map(|l| l == Label::Feasible)).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((0..self.dim).map(|i| format!("f{i}")));
        w.write_record(&header).map_err(csv_write_error)?;
        for i in 0..self.len() {
            let mut rec = vec![self.ids[i].clone(), self.labels[i].map_or("", Label::as_str).to_string()];
            rec.extend(self.row(i).iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec).map_err(csv_write_error)?;
        }
        w.flush().map_err(|e| Error::Data(format!("write failed: {e}")))?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
        let mut records = reader.records();
        let header = match records.next() {
            Some(r) => r.map_err(csv_read_error)?,
            None => return Err(Error::Parse { line: 1, what: "empty file".into() }),
        };
        if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
            return Err(Error::Parse {
                line: 1,
                what: "header must start with id,label and name at least one feature".into(),
            });
        }
        let dim = header.len() - 2;
        for (k, name) in header.iter().skip(2).enumerate() {
            if name != format!("f{k}") {
                return Err(Error::Parse {
                    line: 1,
                    what: format!("feature column {k} is named {name:?}, expected \"f{k}\""),
                });
            }
        }
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut emb = Vec::new();
        let mut seen = HashSet::new();
        for rec in records {
            let rec = rec.map_err(csv_read_error)?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != dim + 2 {
                return Err(Error::Parse {
                    line,
                    what: format!("expected {} fields, found {}", dim + 2, rec.len()),
                });
            }
            let id = rec[0].to_string();
            if id.is_empty() {
                return Err(Error::Parse { line, what: "empty id".into() });
            }
            if !seen.insert(id.clone()) {
                return Err(Error::Parse { line, what: format!("duplicate id {id:?}") });
            }
            let label = Label::parse(&rec[1]).ok_or_else(|| Error::Parse {
                line,
                what: format!("unknown label {:?}", &rec[1]),
            })?;
            for (k, cell) in rec.iter().skip(2).enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    line,
                    what: format!("f{k} value {cell:?} is not a number"),
                })?;
                emb.push(v);
            }
            ids.push(id);
            labels.push(label);
        }
        Self::new(dim, ids, labels, emb)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

fn csv_read_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse { line, what: e.to_string() }
}

fn csv_write_error(e: csv::Error) -> Error {
    Error::Data(format!("write failed: {e}"))
}

/// Column-wise mean of a `rows x dim` block.
pub fn mean_pool(block: &[f64], rows: usize, dim: usize) -> Result<Vec<f64>> {
    if rows == 0 || dim == 0 {
        return Err(Error::Data("cannot pool an empty block".into()));
    }
    if block.len() != rows * dim {
        return Err(Error::Data(format!("{} values do not form {rows} rows of dimension {dim}", block.len())));
    }
    let mut out = vec![0.0; dim];
    for row in block.chunks(dim) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows as f64);
    Ok(out)
}

/// One assembly's part-node features.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatureBlock {
    pub id: String,
    pub label: Option<Label>,
    pub dim: usize,
    /// Row-major `parts x dim`.
    pub features: Vec<f64>,
}

impl NodeFeatureBlock {
    pub fn parts(&self) -> usize {
        self.features.len() / self.dim.max(1)
    }
}

pub fn read_node_features<R: BufRead>(input: R) -> Result<Vec<NodeFeatureBlock>> {
    let mut blocks: Vec<NodeFeatureBlock> = Vec::new();
    let mut dim: Option<usize> = None;
    for (k, line) in input.lines().enumerate() {
        let line_no = k as u64 + 1;
        let line = line.map_err(|e| Error::Parse { line: line_no, what: e.to_string() })?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if let Some(rest) = text.strip_prefix("#assembly") {
            let mut parts = rest.split_whitespace();
            let id = parts.next().ok_or_else(|| Error::Parse {
                line: line_no,
                what: "assembly line without an id".into(),
            })?;
            let label = match parts.next() {
                None => None,
                Some(tok) => Label::parse(tok).flatten().map(Some).ok_or_else(|| Error::Parse {
                    line: line_no,
                    what: format!("unknown label {tok:?}"),
                })?,
            };
            if let Some(prev) = blocks.last() {
                if prev.features.is_empty() {
                    return Err(Error::Parse {
                        line: line_no,
                        what: format!("assembly {:?} has no part rows", prev.id),
                    });
                }
            }
            blocks.push(NodeFeatureBlock {
                id: id.to_string(),
                label,
                dim: dim.unwrap_or(0),
                features: Vec::new(),
            });
            continue;
        }
        let block = blocks.last_mut().ok_or_else(|| Error::Parse {
            line: line_no,
            what: "feature row before the first #assembly line".into(),
        })?;
        let values = text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    what: format!("{s:?} is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let expected = *dim.get_or_insert(values.len());
        if values.len() != expected || expected == 0 {
            return Err(Error::Parse {
                line: line_no,
                what: format!("expected {expected} values, found {}", values.len()),
            });
        }
        block.dim = expected;
        block.features.extend(values);
    }
    if let Some(last) = blocks.last() {
        if last.features.is_empty() {
            return Err(Error::Data(format!("assembly {:?} has no part rows", last.id)));
        }
    }
    Ok(blocks)
}

/// Mean-pools every block of a node-feature file into one embedding each.
pub fn pool_blocks(blocks: &[NodeFeatureBlock]) -> Result<LabeledDataset> {
    let dim = blocks.first().map(|b| b.dim).ok_or_else(|| Error::Data("no assemblies".into()))?;
    let mut emb = Vec::with_capacity(blocks.len() * dim);
    for b in blocks {
        emb.extend(mean_pool(&b.features, b.parts(), b.dim)?);
    }
    LabeledDataset::new(
        dim,
        blocks.iter().map(|b| b.id.clone()).collect(),
        blocks.iter().map(|b| b.label).collect(),
        emb,
    )
}

pub fn load_node_features(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    pool_blocks(&read_node_features(std::io::BufReader::new(file))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    /// Feasible rows only.
    pub train: LabeledDataset,
    /// Balanced.
    pub val: LabeledDataset,
    /// Balanced.
    pub test: LabeledDataset,
    /// Infeasible rows left over after balancing.
    pub dropped_infeasible: usize,
}

/// Train/validation/test partition. Validation and test sets take
/// `floor(frac * N / 2)` rows of each class; when a class is too small both
/// sets shrink proportionally. Left-over feasible rows form the training set
/// and left-over infeasible rows are dropped.
pub fn make_splits(data: &LabeledDataset, val_frac: f64, test_frac: f64, seed: u64) -> Result<Splits> {
    if !(val_frac > 0.0 && val_frac < 1.0 && test_frac > 0.0 && test_frac < 1.0 && val_frac + test_frac < 1.0) {
        return Err(Error::Split(format!(
            "fractions must lie in (0, 1) and sum below 1, got {val_frac} and {test_frac}"
        )));
    }
    if let Some(i) = data.labels.iter().position(Option::is_none) {
        return Err(Error::Split(format!("row {:?} is unlabeled", data.ids[i])));
    }
    let mut feasible: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == Some(Label::Feasible)).collect();
    let mut infeasible: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == Some(Label::Infeasible)).collect();
    if infeasible.is_empty() || feasible.is_empty() {
        return Err(Error::Split("balanced splits need both feasible and infeasible rows".into()));
    }

    let n = data.len() as f64;
    let mut n_val = (val_frac * n / 2.0).floor() as usize;
    let mut n_test = (test_frac * n / 2.0).floor() as usize;
    // One feasible row must remain for training.
    let cap = infeasible.len().min(feasible.len() - 1);
    if n_val + n_test > cap {
        let want = n_val + n_test;
        n_val = cap * n_val / want;
        n_test = cap * n_test / want;
    }
    if n_val == 0 || n_test == 0 {
        return Err(Error::Split(format!(
            "{} feasible and {} infeasible rows cannot fill non-empty balanced splits",
            feasible.len(),
            infeasible.len()
        )));
    }

    let mut rng = rng::stream(seed, rng::SPLIT);
    feasible.shuffle(&mut rng);
    infeasible.shuffle(&mut rng);

    let pick = |a: &[usize], b: &[usize]| {
        let mut idx: Vec<usize> = a.iter().chain(b).copied().collect();
        idx.sort_unstable();
        data.subset(&idx)
    };
    let val = pick(&feasible[..n_val], &infeasible[..n_val]);
    let test = pick(&feasible[n_val..n_val + n_test], &infeasible[n_val..n_val + n_test]);
    let train = pick(&feasible[n_val + n_test..], &[]);
    let dropped = infeasible.len() - n_val - n_test;
    if dropped > 0 {
        log::info!("dropped {dropped} infeasible rows not needed for balanced splits");
    }
    Ok(Splits {
        train,
        val,
        test,
        dropped_infeasible: dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn labeled(n_f: usize, n_i: usize) -> LabeledDataset {
        let n = n_f + n_i;
        LabeledDataset::new(
            2,
            (0..n).map(|i| format!("r{i}")).collect(),
            (0..n)
                .map(|i| Some(if i < n_f { Label::Feasible } else { Label::Infeasible }))
                .collect(),
            (0..2 * n).map(|v| v as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(mean_pool(&[1.0, 2.0, 3.0], 1, 3).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(mean_pool(&[0.0, 2.0, 2.0, 0.0], 2, 2).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(mean_pool(&[], 0, 2), Err(Error::Data(_))));
    }

    #[test]
    fn pooling_matches_naive_loop() {
        let mut rng = rng::stream(1, 0);
        let (p, h) = (7, 5);
        let block: Vec<f64> = (0..p * h).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let pooled = mean_pool(&block, p, h).unwrap();
        for c in 0..h {
            let mut s = 0.0;
            for r in 0..p {
                s += block[r * h + c];
            }
            assert!((pooled[c] - s / p as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut rng = rng::stream(2, 0);
        let emb: Vec<f64> = (0..12).map(|_| rng.random::<f64>() * 1e3 - 500.0).collect();
        let data = LabeledDataset::new(
            4,
            vec!["a".into(), "b".into(), "c".into()],
            vec![Some(Label::Feasible), None, Some(Label::Infeasible)],
            emb,
        )
        .unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        assert_eq!(LabeledDataset::read_csv(&buf[..]).unwrap(), data);
    }

    #[test]
    fn short_row_names_its_line() {
        let text = "id,label,f0,f1\na,feasible,1,2\nb,feasible,3\n";
        match LabeledDataset::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_cells_are_parse_errors() {
        for text in [
            "id,label,f0\na,maybe,1\n",
            "id,label,f0\na,feasible,x\n",
            "id,label,f0\na,,1\na,,2\n",
        ] {
            assert!(matches!(LabeledDataset::read_csv(text.as_bytes()), Err(Error::Parse { line: 2.., .. })), "{text}");
        }
    }

    #[test]
    fn node_file_pools_blocks() {
        let text = "#assembly a1 feasible\n0 2\n2 0\n#assembly a2\n1, 5\n";
        let data = pool_blocks(&read_node_features(text.as_bytes()).unwrap()).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.row(0), &[1.0, 1.0]);
        assert_eq!(data.row(1), &[1.0, 5.0]);
        assert_eq!(data.labels(), &[Some(Label::Feasible), None]);
        assert!(read_node_features("#assembly a\n#assembly b\n1\n".as_bytes()).is_err());
    }

    #[test]
    fn balanced_split_counts() {
        let s = make_splits(&labeled(100, 100), 0.2, 0.2, 5).unwrap();
        assert_eq!((s.val.count(Label::Feasible), s.val.count(Label::Infeasible)), (20, 20));
        assert_eq!((s.test.count(Label::Feasible), s.test.count(Label::Infeasible)), (20, 20));
        assert_eq!(s.train.len(), 60);
        assert_eq!(s.train.count(Label::Feasible), 60);
        assert_eq!(s.dropped_infeasible, 60);
    }

    #[test]
    fn minority_shortage_shrinks_both_sets() {
        let s = make_splits(&labeled(180, 20), 0.2, 0.2, 5).unwrap();
        assert_eq!(s.val.len(), 20);
        assert_eq!(s.test.len(), 20);
        assert_eq!(s.train.len(), 160);
        assert_eq!(s.dropped_infeasible, 0);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(make_splits(&labeled(10, 0), 0.2, 0.2, 1), Err(Error::Split(_))));
        assert!(matches!(make_splits(&labeled(10, 10), 0.6, 0.6, 1), Err(Error::Split(_))));
    }

    #[test]
    fn splits_are_seeded_and_disjoint() {
        let d = labeled(50, 30);
        let a = make_splits(&d, 0.25, 0.25, 9).unwrap();
        assert_eq!(a, make_splits(&d, 0.25, 0.25, 9).unwrap());
        assert_ne!(a, make_splits(&d, 0.25, 0.25, 10).unwrap());
        let mut all: Vec<&String> = a.train.ids().iter().chain(a.val.ids()).chain(a.test.ids()).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }
}
