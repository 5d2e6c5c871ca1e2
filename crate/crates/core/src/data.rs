//! Datasets: CSV ingestion, label binarization, stratified folds and the
//! synthetic imbalanced benchmark generator.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CascadeError, Result};

/// Dense feature matrix with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<u8>,
    pub feature_names: Vec<String>,
    pub positive_class_note: String,
}

impl Dataset {
    /// `features` is row-major with `n_features` columns.
    pub fn new(features: Vec<f64>, n_features: usize, labels: Vec<u8>) -> Result<Self> {
        if n_features == 0 {
            return Err(CascadeError::Input("dataset needs at least one feature".into()));
        }
        if features.len() != labels.len() * n_features {
            return Err(CascadeError::Input(format!(
                "{} feature values do not fill {} rows of {} columns",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y > 1) {
            return Err(CascadeError::Input(format!("row {i}: label {} is not binary", labels[i])));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(CascadeError::Input(format!("row {}: non-finite feature", i / n_features)));
        }
        Ok(Dataset {
            features,
            n_features,
            labels,
            feature_names: (0..n_features).map(|j| format!("f{j}")).collect(),
            positive_class_note: "label 1".into(),
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_features {
            return Err(CascadeError::Input(format!("{} names for {} features", names.len(), self.n_features)));
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.positive_class_note = note.into();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    #[inline]
    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn positive_count(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    #[cfg(test)]
    pub(crate) fn set(&mut self, row: usize, col: usize, v: f64) {
        self.features[row * self.n_features + col] = v;
    }

    /// Copy of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(rows.len() * self.n_features);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Dataset {
            features,
            n_features: self.n_features,
            labels,
            feature_names: self.feature_names.clone(),
            positive_class_note: self.positive_class_note.clone(),
        }
    }

    /// Seeded random subset of `m` rows (all rows if `m >= len`).
    pub fn random_subset(&self, m: usize, seed: u64) -> Dataset {
        let mut rows: Vec<usize> = (0..self.len()).collect();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        rows.truncate(m);
        rows.sort_unstable();
        self.select(&rows)
    }

    /// Indices of features whose name contains `pattern`.
    pub fn features_matching(&self, pattern: &str) -> Vec<usize> {
        self.feature_names.iter().enumerate().filter(|(_, n)| n.contains(pattern)).map(|(i, _)| i).collect()
    }

    /// Writes a header row of feature names plus `label`; values use the
    /// shortest representation that round-trips.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| CascadeError::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let csv_err = |e: csv::Error| CascadeError::Input(format!("{}: {e}", path.display()));
        let mut header = self.feature_names.clone();
        header.push("label".into());
        w.write_record(&header).map_err(csv_err)?;
        let mut record = Vec::with_capacity(self.n_features + 1);
        for i in 0..self.len() {
            record.clear();
            record.extend(self.row(i).iter().map(|v| v.to_string()));
            record.push(self.labels[i].to_string());
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush().map_err(|e| CascadeError::io(path, e))
    }
}

/// Column selector in a CSV schema: header name or 0-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: ColumnRef,
    /// `None` means every column except the label (and any `ignore_columns`).
    #[serde(default)]
    pub feature_columns: Option<Vec<ColumnRef>>,
    #[serde(default)]
    pub ignore_columns: Vec<ColumnRef>,
    #[serde(default = "yes")]
    pub header: bool,
    /// Categories mapped to label 1. When absent the label column must
    /// already hold `0`/`1`.
    #[serde(default)]
    pub positive_classes: Option<Vec<String>>,
}

fn yes() -> bool {
    true
}

impl CsvSchema {
    pub fn binary(label_column: ColumnRef) -> Self {
        CsvSchema {
            label_column,
            feature_columns: None,
            ignore_columns: Vec::new(),
            header: true,
            positive_classes: None,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CascadeError::Schema(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CascadeError::io(path, e))?;
        Self::from_json_str(&text)
    }
}

fn resolve(col: &ColumnRef, names: Option<&[String]>, width: usize) -> Result<usize> {
    let idx = match col {
        ColumnRef::Index(i) => *i,
        ColumnRef::Name(n) => names
            .ok_or_else(|| CascadeError::Schema(format!("column {n:?} named but file has no header")))?
            .iter()
            .position(|h| h == n)
            .ok_or_else(|| CascadeError::Schema(format!("missing column {n:?}")))?,
    };
    if idx >= width {
        return Err(CascadeError::Schema(format!("column {idx} outside {width} columns")));
    }
    Ok(idx)
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| CascadeError::io(path, e))?;
    load_csv_from_reader(std::io::BufReader::new(file), schema)
}

/// Parses comma-delimited text. Every unparseable or non-finite cell is
/// reported with its 1-based line number.
pub fn load_csv_from_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut records = rdr.records();
    let first = match records.next() {
        None => return Err(CascadeError::Input("empty file".into())),
        Some(r) => r.map_err(|e| CascadeError::Input(e.to_string()))?,
    };
    let width = first.len();
    let (names, mut pending, first_line) = if schema.header {
        (Some(first.iter().map(str::to_owned).collect::<Vec<_>>()), None, 2)
    } else {
        (None, Some(first), 1)
    };

    let label_col = resolve(&schema.label_column, names.as_deref(), width)?;
    let ignored =
        schema.ignore_columns.iter().map(|c| resolve(c, names.as_deref(), width)).collect::<Result<BTreeSet<_>>>()?;
    let feature_cols: Vec<usize> = match &schema.feature_columns {
        Some(cols) => cols.iter().map(|c| resolve(c, names.as_deref(), width)).collect::<Result<_>>()?,
        None => (0..width).filter(|c| *c != label_col && !ignored.contains(c)).collect(),
    };
    if feature_cols.is_empty() {
        return Err(CascadeError::Schema("no feature columns selected".into()));
    }
    if feature_cols.contains(&label_col) {
        return Err(CascadeError::Schema("label column is also a feature column".into()));
    }

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    let mut problems = Vec::new();
    let mut line = first_line;
    let mut next = || -> Option<std::result::Result<csv::StringRecord, csv::Error>> {
        pending.take().map(Ok).or_else(|| records.next())
    };
    while let Some(rec) = next() {
        let rec = rec.map_err(|e| CascadeError::Input(format!("line {line}: {e}")))?;
        if rec.len() == 1 && rec[0].is_empty() {
            line += 1;
            continue;
        }
        if rec.len() != width {
            problems.push(format!("line {line}: expected {width} fields, found {}", rec.len()));
            line += 1;
            continue;
        }
        let start = features.len();
        let mut ok = true;
        for &c in &feature_cols {
            match rec[c].parse::<f64>() {
                Ok(v) if v.is_finite() => features.push(v),
                _ => {
                    problems.push(format!("line {line}: column {c} value {:?} is not a finite number", &rec[c]));
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            raw_labels.push((line, rec[label_col].to_owned()));
        } else {
            features.truncate(start);
        }
        line += 1;
    }
    if !problems.is_empty() {
        let shown: Vec<_> = problems.iter().take(10).cloned().collect();
        let more = problems.len().saturating_sub(shown.len());
        let suffix = if more > 0 { format!(" (and {more} more)") } else { String::new() };
        return Err(CascadeError::Input(format!("{}{suffix}", shown.join("; "))));
    }
    if raw_labels.is_empty() {
        return Err(CascadeError::Input("file has no data rows".into()));
    }

    let (labels, note) = match &schema.positive_classes {
        Some(pos) => {
            let cats: Vec<String> = raw_labels.iter().map(|(_, l)| l.clone()).collect();
            (binarize_labels(&cats, pos)?, format!("positive classes: {}", pos.join(", ")))
        }
        None => {
            let labels = raw_labels
                .iter()
                .map(|(line, l)| match l.as_str() {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(CascadeError::Input(format!("line {line}: label {other:?} is not 0 or 1"))),
                })
                .collect::<Result<Vec<u8>>>()?;
            (labels, "label 1".to_owned())
        }
    };
    let feature_names = match &names {
        Some(n) => feature_cols.iter().map(|&c| n[c].clone()).collect(),
        None => feature_cols.iter().map(|c| format!("col{c}")).collect(),
    };
    Ok(Dataset::new(features, feature_cols.len(), labels)?.with_names(feature_names)?.with_note(note))
}

/// Label 1 iff the category is in `positive`.
pub fn binarize_labels<S: AsRef<str>>(raw: &[S], positive: &[String]) -> Result<Vec<u8>> {
    if positive.is_empty() {
        return Err(CascadeError::Config("positive class set is empty".into()));
    }
    let observed: BTreeSet<&str> = raw.iter().map(|s| s.as_ref()).collect();
    if let Some(unknown) = positive.iter().find(|p| !observed.contains(p.as_str())) {
        return Err(CascadeError::Config(format!("positive class {unknown:?} does not occur in the data")));
    }
    let pos: BTreeSet<&str> = positive.iter().map(String::as_str).collect();
    Ok(raw.iter().map(|s| pos.contains(s.as_ref()) as u8).collect())
}

/// Assignment of every row to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect()
    }
}

/// Shuffles each class with `seed`, then deals positives and negatives
/// round-robin over the folds, negatives continuing where positives stopped.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(CascadeError::Input(format!("need at least 2 folds, got {k}")));
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let smallest = pos.len().min(neg.len());
    if k > smallest {
        return Err(CascadeError::Input(format!("{k} folds but the smaller class has only {smallest} rows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut assignments = vec![0; labels.len()];
    for (j, &i) in pos.iter().chain(&neg).enumerate() {
        assignments[i] = j % k;
    }
    Ok(FoldPlan { k, assignments, seed })
}

/// Parameters of the synthetic imbalanced benchmark.
///
/// Features come in two groups. Along one hidden direction of the cheap
/// group, a `cheap_reject_rate` share of the negatives ("easy" negatives)
/// sits below -0.5 while every positive sits above 0.5. The remaining
/// negatives look like positives there and are only separated along a hidden
/// direction of the expensive group. Off-direction coordinates are standard
/// normal noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub positive_rate: f64,
    pub cheap_dim: usize,
    pub expensive_dim: usize,
    pub cheap_reject_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { n: 3836, positive_rate: 0.05, cheap_dim: 2, expensive_dim: 35, cheap_reject_rate: 0.8, seed: 0 }
    }
}

/// Hidden directions used by [`gen_synthetic`]; exposed so tests can build
/// the separating models directly.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDirections {
    pub cheap: Vec<f64>,
    pub expensive: Vec<f64>,
}

impl SyntheticSpec {
    pub fn cheap_features(&self) -> Vec<usize> {
        (0..self.cheap_dim).collect()
    }

    pub fn expensive_features(&self) -> Vec<usize> {
        (self.cheap_dim..self.cheap_dim + self.expensive_dim).collect()
    }

    pub fn all_features(&self) -> Vec<usize> {
        (0..self.cheap_dim + self.expensive_dim).collect()
    }

    fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| r > 0.0 && r < 1.0;
        if !rate_ok(self.positive_rate) || !rate_ok(self.cheap_reject_rate) {
            return Err(CascadeError::Config("synthetic rates must lie in (0, 1)".into()));
        }
        if self.n == 0 || self.cheap_dim == 0 || self.expensive_dim == 0 {
            return Err(CascadeError::Config("synthetic sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn directions(&self) -> SyntheticDirections {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5EED_D1EC);
        SyntheticDirections {
            cheap: unit_vector(&mut rng, self.cheap_dim),
            expensive: unit_vector(&mut rng, self.expensive_dim),
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Noise orthogonal to `dir` plus `along * dir`.
fn place(rng: &mut ChaCha8Rng, dir: &[f64], along: f64, out: &mut Vec<f64>) {
    let noise: Vec<f64> = (0..dir.len()).map(|_| rng.sample(StandardNormal)).collect();
    let proj: f64 = noise.iter().zip(dir).map(|(a, b)| a * b).sum();
    out.extend(noise.iter().zip(dir).map(|(z, d)| z - proj * d + along * d));
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let dirs = spec.directions();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.cheap_dim + spec.expensive_dim;
    let mut features = Vec::with_capacity(spec.n * width);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let positive = rng.gen::<f64>() < spec.positive_rate;
        let easy = !positive && rng.gen::<f64>() < spec.cheap_reject_rate;
        let cheap_along = if easy { rng.gen_range(-2.5..-0.5) } else { rng.gen_range(0.5..2.5) };
        let expensive_along = if positive {
            rng.gen_range(0.5..2.5)
        } else if easy {
            rng.gen_range(-2.5..2.5)
        } else {
            rng.gen_range(-2.5..-0.5)
        };
        place(&mut rng, &dirs.cheap, cheap_along, &mut features);
        place(&mut rng, &dirs.expensive, expensive_along, &mut features);
        labels.push(positive as u8);
    }
    let names = (0..spec.cheap_dim)
        .map(|j| format!("cheap_{j}"))
        .chain((0..spec.expensive_dim).map(|j| format!("expensive_{j}")))
        .collect();
    Ok(Dataset::new(features, width, labels)?
        .with_names(names)?
        .with_note(format!("synthetic, positive rate {}", spec.positive_rate)))
}
