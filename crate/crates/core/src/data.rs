//! Synthetic data with a known ground truth, CSV ingestion, and partitioning
//! into equal-size client shards.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Model, Sample, Shard};
use crate::vector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dim: usize,
    pub nodes: usize,
    pub samples_per_node: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dataset dim must be at least 1"));
        }
        if self.nodes == 0 {
            return Err(Error::invalid("dataset nodes must be at least 1"));
        }
        if self.samples_per_node == 0 {
            return Err(Error::invalid("dataset samples_per_node must be at least 1"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::invalid("dataset noise_std must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub shards: Vec<Shard>,
    /// Generating model, known only for synthetic data.
    pub w_true: Option<Model>,
}

impl Dataset {
    pub fn samples_per_node(&self) -> usize {
        self.shards.first().map_or(0, Shard::len)
    }

    pub fn dim(&self) -> usize {
        self.shards.first().map_or(0, Shard::dim)
    }
}

/// Draws one dataset from a single common distribution: `x ~ N(0, I)`,
/// `w_true` uniform on the unit sphere, and `y = x·w_true + noise` (or its
/// sign for classification, with ties going to +1).
pub fn generate_synthetic(spec: &DatasetSpec, kind: TaskKind) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut w_true: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = vector::norm_sq(&w_true).sqrt();
    if norm > 0.0 {
        w_true.iter_mut().for_each(|v| *v /= norm);
    } else {
        w_true[0] = 1.0;
    }

    let mut shards = Vec::with_capacity(spec.nodes);
    for node in 0..spec.nodes {
        let mut samples = Vec::with_capacity(spec.samples_per_node);
        for _ in 0..spec.samples_per_node {
            let x: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps: f64 = StandardNormal.sample(&mut rng);
            let signal = vector::dot(&x, &w_true) + spec.noise_std * eps;
            let y = match kind {
                TaskKind::Regression => signal,
                TaskKind::Classification => {
                    if signal >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            samples.push(Sample::new(x, y));
        }
        shards.push(Shard::new(node, samples)?);
    }
    Ok(Dataset {
        shards,
        w_true: Some(Model(w_true)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CsvOptions {
    pub has_header: bool,
}

/// Reads a numeric table. `label_column` is a zero-based column index; every
/// other column becomes a feature, in column order. Rows and columns in error
/// messages are one-based, and rows count data rows only.
pub fn load_csv(path: &Path, label_column: usize, opts: CsvOptions) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let parse_err = |row: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };

    let mut samples = Vec::new();
    let mut width = None;
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| parse_err(row, 0, e.to_string()))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(parse_err(
                row,
                record.len().min(expected) + 1,
                format!("ragged row: {} columns, expected {expected}", record.len()),
            ));
        }
        if label_column >= expected {
            return Err(parse_err(
                row,
                label_column + 1,
                format!("label column {label_column} out of range for {expected} columns"),
            ));
        }
        let mut x = Vec::with_capacity(expected - 1);
        let mut y = 0.0;
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, col + 1, format!("non-numeric cell {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(row, col + 1, format!("non-finite cell {cell:?}")));
            }
            if col == label_column {
                y = v;
            } else {
                x.push(v);
            }
        }
        samples.push(Sample::new(x, y));
    }
    if samples.is_empty() {
        return Err(Error::NoRows {
            path: path.to_path_buf(),
        });
    }
    if samples[0].x.is_empty() {
        return Err(Error::invalid("CSV has no feature columns"));
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub shards: Vec<Shard>,
    /// Samples left over after filling `N·s` slots.
    pub unused: usize,
}

/// Seeded uniform permutation, then `nodes` consecutive blocks of
/// `samples_per_node`.
pub fn partition(
    samples: Vec<Sample>,
    nodes: usize,
    samples_per_node: usize,
    seed: u64,
) -> Result<Partition> {
    if nodes == 0 || samples_per_node == 0 {
        return Err(Error::invalid("partition needs at least one node and one sample per node"));
    }
    let needed = nodes * samples_per_node;
    if samples.len() < needed {
        return Err(Error::InsufficientSamples {
            needed,
            available: samples.len(),
        });
    }
    let unused = samples.len() - needed;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut shards = Vec::with_capacity(nodes);
    for (node, block) in order[..needed].chunks(samples_per_node).enumerate() {
        let shard_samples = block
            .iter()
            .map(|&i| slots[i].take().expect("permutation indices are distinct"))
            .collect();
        shards.push(Shard::new(node, shard_samples)?);
    }
    Ok(Partition { shards, unused })
}
