//! Datasets: loaders, a synthetic generator with known relevant features,
//! standardization, and class balancing.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::csv_io;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Class indices in `[0, names.len())`; `names[c]` is the label text of class `c`.
    Classes { labels: Vec<usize>, names: Vec<String> },
    Real(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N×R` feature matrix.
    pub x: Tensor,
    pub target: Target,
    pub feature_names: Vec<String>,
    /// Ground-truth relevance, when known.
    pub relevant_mask: Option<Vec<bool>>,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.x.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn task(&self) -> Task {
        match self.target {
            Target::Classes { .. } => Task::Classification,
            Target::Real(_) => Task::Regression,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.target {
            Target::Classes { labels, .. } => Some(labels),
            Target::Real(_) => None,
        }
    }

    pub fn n_classes(&self) -> usize {
        match &self.target {
            Target::Classes { names, .. } => names.len(),
            Target::Real(_) => 0,
        }
    }

    /// One-hot `N×C` for classification, `N×1` for regression.
    pub fn target_tensor(&self) -> Result<Tensor> {
        match &self.target {
            Target::Classes { labels, names } => Tensor::one_hot(labels, names.len()),
            Target::Real(values) => Tensor::new(vec![values.len(), 1], values.clone()),
        }
    }

    /// Checks the type invariants.
    pub fn validate(&self) -> Result<()> {
        let (n, r) = (self.n_samples(), self.n_features());
        if !self.x.is_matrix() || n == 0 || r == 0 {
            return Err(Error::contract(format!("dataset needs N ≥ 1 and R ≥ 1, got {:?}", self.x.shape())));
        }
        if self.feature_names.len() != r {
            return Err(Error::contract("one name per feature is required"));
        }
        match &self.target {
            Target::Classes { labels, names } => {
                if labels.len() != n || labels.iter().any(|&l| l >= names.len()) {
                    return Err(Error::contract("class labels do not match the samples"));
                }
            }
            Target::Real(v) => {
                if v.len() != n {
                    return Err(Error::contract("targets do not match the samples"));
                }
            }
        }
        if let Some(mask) = &self.relevant_mask {
            if mask.len() != r || !mask.iter().any(|&m| m) {
                return Err(Error::contract("relevant mask must cover every feature and flag at least one"));
            }
        }
        Ok(())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let target = match &self.target {
            Target::Classes { labels, names } => {
                Target::Classes { labels: rows.iter().map(|&i| labels[i]).collect(), names: names.clone() }
            }
            Target::Real(v) => Target::Real(rows.iter().map(|&i| v[i]).collect()),
        };
        Dataset {
            x: self.x.select_rows(rows),
            target,
            feature_names: self.feature_names.clone(),
            relevant_mask: self.relevant_mask.clone(),
        }
    }

    /// Same dataset with every feature outside `keep` set to zero.
    pub fn with_zeroed_features(&self, keep: &[bool]) -> Dataset {
        Dataset { x: self.x.zero_columns_except(keep), ..self.clone() }
    }
}

/// Reads a comma-separated file whose first row is a header.
pub fn load_dense_csv(path: impl AsRef<Path>, target_column: &str, task: Task) -> Result<Dataset> {
    read_dense_csv(File::open(path)?, target_column, task)
}

pub fn read_dense_csv<R: Read>(reader: R, target_column: &str, task: Task) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::parse(1, format!("no column named {target_column:?}")))?;
    let feature_names: Vec<String> =
        headers.iter().enumerate().filter(|(i, _)| *i != target_idx).map(|(_, h)| h.to_string()).collect();

    let mut data = Vec::new();
    let mut class_of: HashMap<String, usize> = HashMap::new();
    let mut names = Vec::new();
    let mut labels = Vec::new();
    let mut reals = Vec::new();
    let mut rows = 0usize;
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(e, rows as u64 + 2))?;
        let line = record.position().map_or(rows as u64 + 2, |p| p.line());
        for (i, cell) in record.iter().enumerate() {
            if i == target_idx {
                match task {
                    Task::Classification => {
                        let next = names.len();
                        let c = *class_of.entry(cell.to_string()).or_insert_with(|| {
                            names.push(cell.to_string());
                            next
                        });
                        labels.push(c);
                    }
                    Task::Regression => reals.push(parse_number(cell, line)?),
                }
            } else {
                data.push(parse_number(cell, line)?);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::parse(1, "no data rows"));
    }
    let target = match task {
        Task::Classification => Target::Classes { labels, names },
        Task::Regression => Target::Real(reals),
    };
    let x = Tensor::new(vec![rows, feature_names.len()], data)?;
    let ds = Dataset { x, target, feature_names, relevant_mask: None };
    ds.validate()?;
    Ok(ds)
}

fn parse_number(cell: &str, line: u64) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::parse(line, format!("{cell:?} is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("{cell:?} is not finite")));
    }
    Ok(v)
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    match e.kind() {
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            Error::parse(line, format!("row has {len} fields, header has {expected_len}"))
        }
        _ => Error::parse(line, e.to_string()),
    }
}

/// Writes the features followed by a `target_column` column.
pub fn write_dense_csv<W: Write>(ds: &Dataset, w: W, target_column: &str) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = ds.feature_names.clone();
    header.push(target_column.to_string());
    out.write_record(&header).map_err(csv_io)?;
    for i in 0..ds.n_samples() {
        let mut row: Vec<String> = ds.x.row(i).iter().map(|v| v.to_string()).collect();
        row.push(match &ds.target {
            Target::Classes { labels, names } => names[labels[i]].clone(),
            Target::Real(v) => v[i].to_string(),
        });
        out.write_record(&row).map_err(csv_io)?;
    }
    out.flush()?;
    Ok(())
}

/// Line layouts of the feature-selection challenge data files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NipsFormat {
    /// 1-based indices of the nonzero (binary) features.
    SparseBinary,
    /// `index:value` pairs with 1-based indices.
    SparseValued,
    /// Exactly `n_features` whitespace-separated values.
    Dense,
}

pub fn load_nips_sparse(
    data_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    n_features: usize,
    format: NipsFormat,
) -> Result<Dataset> {
    read_nips(BufReader::new(File::open(data_path)?), BufReader::new(File::open(labels_path)?), n_features, format)
}

pub fn read_nips<D: BufRead, L: BufRead>(data: D, labels: L, n_features: usize, format: NipsFormat) -> Result<Dataset> {
    if n_features == 0 {
        return Err(Error::parameter("n_features must be positive"));
    }
    let mut values = Vec::new();
    let mut rows = 0u64;
    for line in data.lines() {
        let line = line?;
        rows += 1;
        let mut row = vec![0.0; n_features];
        match format {
            NipsFormat::SparseBinary => {
                for tok in line.split_whitespace() {
                    row[feature_index(tok, n_features, rows)?] = 1.0;
                }
            }
            NipsFormat::SparseValued => {
                for tok in line.split_whitespace() {
                    let (idx, val) = tok
                        .split_once(':')
                        .ok_or_else(|| Error::parse(rows, format!("expected index:value, got {tok:?}")))?;
                    row[feature_index(idx, n_features, rows)?] = parse_number(val, rows)?;
                }
            }
            NipsFormat::Dense => {
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() != n_features {
                    return Err(Error::parse(rows, format!("expected {n_features} values, got {}", toks.len())));
                }
                for (slot, tok) in row.iter_mut().zip(toks) {
                    *slot = parse_number(tok, rows)?;
                }
            }
        }
        values.extend(row);
    }

    let mut class = Vec::new();
    for (i, line) in labels.lines().enumerate() {
        let line = line?;
        let lineno = i as u64 + 1;
        let v = parse_number(&line, lineno)?;
        class.push(match v {
            v if v == -1.0 => 0,
            v if v == 1.0 => 1,
            _ => return Err(Error::parse(lineno, format!("label {v} is not -1 or +1"))),
        });
    }
    if class.len() as u64 != rows {
        return Err(Error::parse(
            class.len().min(rows as usize) as u64 + 1,
            format!("{rows} data lines but {} labels", class.len()),
        ));
    }
    if rows == 0 {
        return Err(Error::parse(1, "no data rows"));
    }
    let ds = Dataset {
        x: Tensor::new(vec![rows as usize, n_features], values)?,
        target: Target::Classes { labels: class, names: vec!["-1".into(), "+1".into()] },
        feature_names: default_names(n_features),
        relevant_mask: None,
    };
    Ok(ds)
}

fn feature_index(tok: &str, n_features: usize, line: u64) -> Result<usize> {
    let idx: usize = tok.trim().parse().map_err(|_| Error::parse(line, format!("{tok:?} is not a feature index")))?;
    if idx == 0 || idx > n_features {
        return Err(Error::parse(line, format!("feature index {idx} outside 1..={n_features}")));
    }
    Ok(idx - 1)
}

fn default_names(r: usize) -> Vec<String> {
    (0..r).map(|j| format!("f{j}")).collect()
}

/// Standard-normal features with `k` randomly placed relevant ones.
///
/// The relevant features enter a fixed linear form with weights of random
/// sign and magnitude in `[0.5, 1.5)`. Regression targets are that form plus
/// Gaussian noise of standard deviation `noise`; class labels are `1` where
/// the noisy form is positive and `0` elsewhere.
pub fn generate_synthetic(n: usize, r: usize, k: usize, task: Task, noise: f64, seed: u64) -> Result<Dataset> {
    if k == 0 || k > r {
        return Err(Error::parameter(format!("need 1 ≤ k ≤ r, got k = {k}, r = {r}")));
    }
    if n == 0 {
        return Err(Error::parameter("need at least one sample"));
    }
    if !(noise >= 0.0) {
        return Err(Error::parameter("noise must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features: Vec<usize> = (0..r).collect();
    features.shuffle(&mut rng);
    let mut relevant: Vec<usize> = features[..k].to_vec();
    relevant.sort_unstable();
    let weights: Vec<f64> = relevant
        .iter()
        .map(|_| {
            let magnitude = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) { magnitude } else { -magnitude }
        })
        .collect();

    let data: Vec<f64> = (0..n * r).map(|_| rng.sample(StandardNormal)).collect();
    let x = Tensor::new(vec![n, r], data)?;
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let form: f64 = relevant.iter().zip(&weights).map(|(&j, w)| w * row[j]).sum();
        let eps: f64 = rng.sample(StandardNormal);
        scores.push(form + noise * eps);
    }
    let target = match task {
        Task::Classification => Target::Classes {
            labels: scores.iter().map(|&s| usize::from(s > 0.0)).collect(),
            names: vec!["0".into(), "1".into()],
        },
        Task::Regression => Target::Real(scores),
    };
    let mut mask = vec![false; r];
    for &j in &relevant {
        mask[j] = true;
    }
    Ok(Dataset { x, target, feature_names: default_names(r), relevant_mask: Some(mask) })
}

/// Two Gaussian blobs of unit spread centred at `±separation/2` on the diagonal of a 2-D plane.
pub fn two_blobs(n: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::parameter("need at least two samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = separation / (2.0 * 2.0_f64.sqrt());
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let centre = if c == 0 { -offset } else { offset };
        for _ in 0..2 {
            let e: f64 = rng.sample(StandardNormal);
            data.push(centre + e);
        }
        labels.push(c);
    }
    Ok(Dataset {
        x: Tensor::new(vec![n, 2], data)?,
        target: Target::Classes { labels, names: vec!["0".into(), "1".into()] },
        feature_names: default_names(2),
        relevant_mask: Some(vec![true, true]),
    })
}

/// Per-column mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizeStats {
    pub mean: Vec<f64>,
    /// Floored at [`STD_FLOOR`]; a floored column is treated as constant.
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl StandardizeStats {
    pub fn fit(x: &Tensor) -> Self {
        let (n, r) = (x.rows(), x.cols());
        let mut mean = vec![0.0; r];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; r];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n.max(1) as f64).sqrt().max(STD_FLOOR)).collect();
        StandardizeStats { mean, std }
    }

    /// Standardizes `x` with these statistics. Constant columns map to zero.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape(format!("stats cover {} features, data has {}", self.mean.len(), x.cols())));
        }
        let mut out = x.clone();
        let r = self.mean.len();
        for row in out.data_mut().chunks_mut(r) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = if *s <= STD_FLOOR { 0.0 } else { (*v - m) / s };
            }
        }
        Ok(out)
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        Ok(Dataset { x: self.transform(&ds.x)?, ..ds.clone() })
    }
}

pub fn standardize(ds: &Dataset) -> (Dataset, StandardizeStats) {
    let stats = StandardizeStats::fit(&ds.x);
    let x = stats.transform(&ds.x).expect("stats fitted on the same data");
    (Dataset { x, ..ds.clone() }, stats)
}

/// Replicates minority-class samples until every class matches the largest.
///
/// Originals come first; copies follow, cycling through a seeded shuffle of each minority class.
pub fn balance_by_replication(ds: &Dataset, seed: u64) -> Result<Dataset> {
    let Target::Classes { labels, names } = &ds.target else {
        return Err(Error::contract("balancing needs a classification dataset"));
    };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); names.len()];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let largest = members.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<usize> = (0..labels.len()).collect();
    for class in &mut members {
        if class.is_empty() || class.len() == largest {
            continue;
        }
        let need = largest - class.len();
        class.shuffle(&mut rng);
        rows.extend(class.iter().cycle().take(need));
    }
    Ok(ds.select_rows(&rows))
}
