//! Datasets, train/test splits and mini-batching.
//!
//! # Delimited file format
//!
//! Comma-separated text with a header row. Every column except the label
//! column is a numeric feature; the label column (the last one unless
//! [`Schema::label_column`] names another) holds non-negative integer class
//! indices.
//!
//! ```text
//! x0,x1,label
//! 0.5,-1.25,0
//! 2,3.75,1
//! ```

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Half-width of the box blob centers are drawn from.
pub const BLOB_CENTER_BOX: f64 = 2.5;

const SPLIT_STREAM: u64 = 0x5851_f42d_4c95_7f2d;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
}

/// Disjoint, sorted train and test row indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded permutation split; the first `round(n * test_fraction)` rows of
    /// the permutation become the test set.
    pub fn random(n: usize, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(config_err(
                "test_fraction",
                format!("{test_fraction} is outside [0, 1)"),
            ));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM));
        let n_test = (n as f64 * test_fraction).round() as usize;
        let mut test = perm[..n_test].to_vec();
        let mut train = perm[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        Ok(Self { train, test })
    }

    pub fn indices(&self, kind: SplitKind) -> &[usize] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let Some((n, d)) = features.dims2() else {
            return Err(config_err("features", "expected a [N, d] matrix"));
        };
        if labels.len() != n {
            return Err(config_err("labels", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::LabelOutOfRange { index, label, classes });
        }
        let mut seen = vec![false; n];
        for &i in split.train.iter().chain(&split.test) {
            if i >= n || seen[i] {
                return Err(config_err("split", format!("index {i} is out of range or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(config_err("split", "train and test do not cover every row"));
        }
        Ok(Self {
            features,
            labels,
            classes,
            split,
            feature_names: (0..d).map(|j| format!("x{j}")).collect(),
        })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.dim() {
            return Err(config_err(
                "feature_names",
                format!("{} names for {} features", names.len(), self.dim()),
            ));
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Features and labels of one split, in index order.
    pub fn subset(&self, kind: SplitKind) -> (Tensor, Vec<usize>) {
        let idx = self.split.indices(kind);
        (
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Standardizes every feature with the train split's mean and standard
    /// deviation. Constant features are only centered.
    pub fn standardized(&self) -> Self {
        let d = self.dim();
        let train = &self.split.train;
        let count = train.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for &i in train {
            mean.iter_mut().zip(self.features.row(i)).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for &i in train {
            var.iter_mut()
                .zip(self.features.row(i))
                .zip(&mean)
                .for_each(|((v, x), m)| *v += (x - m) * (x - m));
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|v| {
                let sd = (v / count).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let mut features = self.features.clone();
        for row in features.data_mut().chunks_mut(d) {
            for ((x, m), s) in row.iter_mut().zip(&mean).zip(&scale) {
                *x = (*x - m) / s;
            }
        }
        Self {
            features,
            ..self.clone()
        }
    }
}

/// `classes` isotropic Gaussian clusters in `dim` dimensions with an 80/20 split.
///
/// Centers are uniform in `[-BLOB_CENTER_BOX, BLOB_CENTER_BOX]^dim`; points are
/// assigned to clusters round-robin and perturbed with `N(0, spread^2)` noise.
pub fn make_blobs(n: usize, dim: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim < 2 {
        return Err(config_err(
            "make_blobs",
            format!("need dim >= 2 and classes >= 2, got {dim} and {classes}"),
        ));
    }
    if n < classes {
        return Err(config_err(
            "make_blobs",
            format!("{n} points cannot cover {classes} classes"),
        ));
    }
    if !(spread.is_finite() && spread > 0.0) {
        return Err(config_err("spread", format!("{spread} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..classes * dim)
        .map(|_| rng.random_range(-BLOB_CENTER_BOX..BLOB_CENTER_BOX))
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for j in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(centers[c * dim + j] + spread * noise);
        }
    }
    let split = Split::random(n, DEFAULT_TEST_FRACTION, seed)?;
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes, split)
}

/// How to interpret a delimited dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    /// Header name of the label column; the last column when `None`.
    pub label_column: Option<String>,
    /// Declared class count; inferred as `max(label) + 1` when `None`.
    pub classes: Option<usize>,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Schema {
    pub fn new(split_seed: u64) -> Self {
        Self {
            label_column: None,
            classes: None,
            test_fraction: DEFAULT_TEST_FRACTION,
            split_seed,
        }
    }
}

pub fn load_delimited(path: &Path, schema: &Schema) -> Result<Dataset> {
    parse_delimited(File::open(path)?, schema)
}

pub fn parse_delimited<R: Read>(input: R, schema: &Schema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(e, 1))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            message: "need at least one feature column and a label column".into(),
        });
    }
    let label_col = match &schema.label_column {
        Some(name) => header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("no column named `{name}`"),
        })?,
        None => header.len() - 1,
    };

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut line_of_row = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e, 0))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        for (j, field) in record.iter().enumerate() {
            if j == label_col {
                let label: usize = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("label `{field}` is not a non-negative integer"),
                })?;
                if let Some(m) = schema.classes {
                    if label >= m {
                        return Err(Error::Parse {
                            line,
                            message: format!("label {label} is out of range for {m} classes"),
                        });
                    }
                }
                labels.push(label);
            } else {
                let value: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("column `{}`: `{field}` is not a number", header[j]),
                })?;
                if !value.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: format!("column `{}`: non-finite value", header[j]),
                    });
                }
                features.push(value);
            }
        }
        line_of_row.push(line);
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    let classes = schema
        .classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let d = header.len() - 1;
    let split = Split::random(n, schema.test_fraction, schema.split_seed)?;
    let names = header
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label_col)
        .map(|(_, h)| h.clone())
        .collect();
    Dataset::new(Tensor::new(vec![n, d], features)?, labels, classes, split)?.with_feature_names(names)
}

fn csv_err(e: csv::Error, fallback_line: usize) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Writes features and labels in the delimited format, label last.
pub fn save_delimited<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let mut header = dataset.feature_names().to_vec();
    header.push("label".into());
    writer.write_record(&header).map_err(|e| csv_err(e, 1))?;
    for (row, label) in dataset.features().rows().zip(dataset.labels()) {
        let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        fields.push(label.to_string());
        writer.write_record(&fields).map_err(|e| csv_err(e, 0))?;
    }
    writer.flush()?;
    Ok(())
}

/// One mini-batch: row indices into the dataset plus the gathered tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub y: Vec<usize>,
}

/// Shuffles a split with `epoch_seed` and cuts it into batches. The final
/// short batch is kept.
pub fn batches(dataset: &Dataset, kind: SplitKind, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(config_err("batch_size", "must be at least 1"));
    }
    let mut order = dataset.split().indices(kind).to_vec();
    if order.is_empty() {
        return Err(config_err("split", format!("{kind:?} split is empty")));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch {
            indices: chunk.to_vec(),
            x: dataset.features().select_rows(chunk),
            y: chunk.iter().map(|&i| dataset.labels()[i]).collect(),
        })
        .collect())
}
