//! Sparse multi-label dataset ingestion, label statistics, and deterministic
//! batch plans.
//!
//! The on-disk format is the plain-text sparse format used by the public
//! extreme-classification benchmark files: a header line `N D L`, then one
//! line per sample holding a comma-separated label list followed by
//! space-separated `feature:value` pairs. Files may be gzip-compressed.

pub mod synthetic;

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::rng::shuffled_indices;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed header {text:?} (expected three integers \"N D L\")")]
    MalformedHeader { line: usize, text: String },
    #[error("line {line}: invalid number {token:?}")]
    InvalidNumber { line: usize, token: String },
    #[error("line {line}: feature index {index} out of range for D={dim}")]
    FeatureOutOfRange { line: usize, index: u32, dim: usize },
    #[error("line {line}: label {label} out of range for L={labels}")]
    LabelOutOfRange { line: usize, label: u32, labels: usize },
    #[error("line {line}: {detail}")]
    InvalidLine { line: usize, detail: String },
    #[error("header declares {expected} samples but file contains {found}")]
    SampleCountMismatch { expected: usize, found: usize },
    #[error("sample {sample}: feature index {index} out of range for D={dim}")]
    SampleFeatureOutOfRange { sample: usize, index: u32, dim: usize },
    #[error("sample {sample}: label {label} out of range for L={labels}")]
    SampleLabelOutOfRange { sample: usize, label: u32, labels: usize },
    #[error("invalid sparse vector: {0}")]
    InvalidSparseVector(String),
    #[error("empty label distribution")]
    EmptyLabelDistribution,
}

/// Sorted sparse feature vector; zero values are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    indices: Vec<u32>,
    values: Vec<f32>,
}

impl SparseVector {
    pub fn empty() -> Self {
        SparseVector {
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Build from already-sorted parallel arrays; rejects unsorted or
    /// duplicate indices, zero values, and non-finite values.
    pub fn new(indices: Vec<u32>, values: Vec<f32>) -> Result<Self, CorpusError> {
        if indices.len() != values.len() {
            return Err(CorpusError::InvalidSparseVector(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(CorpusError::InvalidSparseVector(format!(
                    "indices not strictly increasing at {}..{}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(v) = values.iter().find(|v| **v == 0.0 || !v.is_finite()) {
            return Err(CorpusError::InvalidSparseVector(format!(
                "value {v} is zero or non-finite"
            )));
        }
        Ok(SparseVector { indices, values })
    }

    /// Build from unordered (index, value) pairs: sorts by index, drops
    /// explicit zeros, rejects duplicates and non-finite values.
    pub fn from_pairs(mut pairs: Vec<(u32, f32)>) -> Result<Self, CorpusError> {
        pairs.retain(|(_, v)| *v != 0.0);
        pairs.sort_by_key(|(i, _)| *i);
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(CorpusError::InvalidSparseVector(format!(
                    "duplicate feature index {}",
                    w[0].0
                )));
            }
        }
        let (indices, values) = pairs.into_iter().unzip();
        SparseVector::new(indices, values)
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Scale to unit Euclidean norm; a zero vector stays zero.
    pub fn l2_normalize(&mut self) {
        let norm = self
            .values
            .iter()
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            for v in &mut self.values {
                *v = (*v as f64 / norm) as f32;
            }
        }
    }
}

/// One training instance: sparse features plus a sorted label-id set.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    features: SparseVector,
    labels: Vec<u32>,
}

impl Sample {
    /// Labels are sorted and deduplicated on construction.
    pub fn new(mut labels: Vec<u32>, features: SparseVector) -> Self {
        labels.sort_unstable();
        labels.dedup();
        Sample { features, labels }
    }

    pub fn features(&self) -> &SparseVector {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

/// An immutable dataset: samples plus the declared feature and label spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_features: usize,
    num_labels: usize,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        num_features: usize,
        num_labels: usize,
    ) -> Result<Self, CorpusError> {
        for (s, sample) in samples.iter().enumerate() {
            if let Some(&i) = sample.features.indices.last() {
                if i as usize >= num_features {
                    return Err(CorpusError::SampleFeatureOutOfRange {
                        sample: s,
                        index: i,
                        dim: num_features,
                    });
                }
            }
            if let Some(&l) = sample.labels.last() {
                if l as usize >= num_labels {
                    return Err(CorpusError::SampleLabelOutOfRange {
                        sample: s,
                        label: l,
                        labels: num_labels,
                    });
                }
            }
        }
        Ok(Dataset {
            samples,
            num_features,
            num_labels,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Parse the sparse repository format from any buffered reader.
    ///
    /// Accepted per-sample line shapes: `l1,l2 i:v i:v`, a trailing comma
    /// after the label list (`l1,l2, i:v`), and an empty label list (line
    /// starts with the feature pairs). Labels are sorted and deduplicated;
    /// explicit zero feature values are dropped.
    pub fn parse(reader: impl BufRead) -> Result<Self, CorpusError> {
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(line) => line?,
            None => {
                return Err(CorpusError::MalformedHeader {
                    line: 1,
                    text: String::new(),
                })
            }
        };
        let fields: Vec<&str> = header.split_whitespace().collect();
        let parsed: Option<Vec<usize>> = fields.iter().map(|f| f.parse().ok()).collect();
        let (n, d, l) = match parsed.as_deref() {
            Some([n, d, l]) => (*n, *d, *l),
            _ => {
                return Err(CorpusError::MalformedHeader {
                    line: 1,
                    text: header,
                })
            }
        };

        let mut samples = Vec::with_capacity(n);
        for (offset, line) in lines.enumerate() {
            let line_no = offset + 2;
            let line = line?;
            if samples.len() == n {
                return Err(CorpusError::SampleCountMismatch {
                    expected: n,
                    found: n + 1,
                });
            }
            samples.push(parse_sample_line(&line, line_no, d, l)?);
        }
        if samples.len() != n {
            return Err(CorpusError::SampleCountMismatch {
                expected: n,
                found: samples.len(),
            });
        }
        Ok(Dataset {
            samples,
            num_features: d,
            num_labels: l,
        })
    }

    /// Open a file, transparently unwrapping gzip when the magic bytes say so.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let mut reader = BufReader::new(File::open(path)?);
        let magic = reader.fill_buf()?;
        let gzipped = magic.len() >= 2 && magic[0] == 0x1f && magic[1] == 0x8b;
        if gzipped {
            Dataset::parse(BufReader::new(MultiGzDecoder::new(reader)))
        } else {
            Dataset::parse(reader)
        }
    }

    /// Serialize back to the repository format. Re-parsing the output yields
    /// an identical dataset (float values print in round-trip form).
    pub fn write(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(
            w,
            "{} {} {}",
            self.samples.len(),
            self.num_features,
            self.num_labels
        )?;
        let mut line = String::new();
        for sample in &self.samples {
            line.clear();
            for (k, label) in sample.labels.iter().enumerate() {
                if k > 0 {
                    line.push(',');
                }
                line.push_str(&label.to_string());
            }
            for (&i, &v) in sample.features.indices.iter().zip(&sample.features.values) {
                line.push(' ');
                line.push_str(&i.to_string());
                line.push(':');
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Write to a file; a `.gz` extension selects gzip compression.
    pub fn save_to_path(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let path = path.as_ref();
        let file = File::create(path)?;
        if path.extension().is_some_and(|e| e == "gz") {
            let mut enc = GzEncoder::new(io::BufWriter::new(file), Compression::default());
            self.write(&mut enc)?;
            enc.finish()?;
            Ok(())
        } else {
            self.write(io::BufWriter::new(file))
        }
    }
}

fn parse_sample_line(
    line: &str,
    line_no: usize,
    num_features: usize,
    num_labels: usize,
) -> Result<Sample, CorpusError> {
    let mut tokens = line.split_whitespace().peekable();
    let mut labels = Vec::new();
    // The label field is the first token unless it is already a
    // feature pair (empty label list) or the line is blank.
    if let Some(first) = tokens.peek() {
        if !first.contains(':') {
            let field = tokens.next().unwrap();
            for part in field.split(',') {
                if part.is_empty() {
                    continue; // tolerate a trailing comma before the features
                }
                let label: u32 = part.parse().map_err(|_| CorpusError::InvalidNumber {
                    line: line_no,
                    token: part.to_string(),
                })?;
                if label as usize >= num_labels {
                    return Err(CorpusError::LabelOutOfRange {
                        line: line_no,
                        label,
                        labels: num_labels,
                    });
                }
                labels.push(label);
            }
        }
    }
    let mut pairs = Vec::new();
    for token in tokens {
        let (idx, val) = token.split_once(':').ok_or_else(|| CorpusError::InvalidLine {
            line: line_no,
            detail: format!("expected feature:value pair, got {token:?}"),
        })?;
        let index: u32 = idx.parse().map_err(|_| CorpusError::InvalidNumber {
            line: line_no,
            token: idx.to_string(),
        })?;
        let value: f32 = val.parse().map_err(|_| CorpusError::InvalidNumber {
            line: line_no,
            token: val.to_string(),
        })?;
        if index as usize >= num_features {
            return Err(CorpusError::FeatureOutOfRange {
                line: line_no,
                index,
                dim: num_features,
            });
        }
        pairs.push((index, value));
    }
    let features = SparseVector::from_pairs(pairs).map_err(|e| CorpusError::InvalidLine {
        line: line_no,
        detail: e.to_string(),
    })?;
    Ok(Sample::new(labels, features))
}

/// Per-label occurrence counts and the descending-frequency ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelStats {
    frequency: Vec<u64>,
    order: Vec<u32>,
    mean_labels_per_sample: f64,
    num_samples: usize,
    zero_label_samples: usize,
}

impl LabelStats {
    pub fn compute(dataset: &Dataset) -> Self {
        assert!(dataset.num_samples() > 0, "dataset is empty");
        let mut frequency = vec![0u64; dataset.num_labels()];
        let mut zero_label_samples = 0;
        for sample in dataset.samples() {
            if sample.labels().is_empty() {
                zero_label_samples += 1;
            }
            for &l in sample.labels() {
                frequency[l as usize] += 1;
            }
        }
        Self::from_parts(frequency, dataset.num_samples(), zero_label_samples)
    }

    /// Build directly from a frequency table (synthetic distributions).
    pub fn from_frequencies(frequency: Vec<u64>, num_samples: usize) -> Self {
        Self::from_parts(frequency, num_samples, 0)
    }

    fn from_parts(frequency: Vec<u64>, num_samples: usize, zero_label_samples: usize) -> Self {
        let mut order: Vec<u32> = (0..frequency.len() as u32).collect();
        // Descending frequency, ties broken by ascending label id.
        order.sort_by(|&a, &b| {
            frequency[b as usize]
                .cmp(&frequency[a as usize])
                .then(a.cmp(&b))
        });
        let total: u64 = frequency.iter().sum();
        LabelStats {
            frequency,
            order,
            mean_labels_per_sample: total as f64 / num_samples.max(1) as f64,
            num_samples,
            zero_label_samples,
        }
    }

    pub fn frequency(&self) -> &[u64] {
        &self.frequency
    }

    pub fn num_labels(&self) -> usize {
        self.frequency.len()
    }

    /// Label ids sorted by descending frequency (ascending id on ties).
    pub fn order(&self) -> &[u32] {
        &self.order
    }

    pub fn mean_labels_per_sample(&self) -> f64 {
        self.mean_labels_per_sample
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn zero_label_samples(&self) -> usize {
        self.zero_label_samples
    }

    pub fn total_assignments(&self) -> u64 {
        self.frequency.iter().sum()
    }

    /// Fraction of all label assignments covered by the most frequent
    /// `ceil(fraction * L)` labels.
    pub fn cumulative_coverage(&self, fraction: f64) -> Result<f64, CorpusError> {
        assert!((0.0..=1.0).contains(&fraction), "fraction must be in [0,1]");
        let total = self.total_assignments();
        if total == 0 {
            return Err(CorpusError::EmptyLabelDistribution);
        }
        // Nudge below the product before the ceiling so that values that are
        // mathematically integral but land a rounding error above one (for
        // example 0.1 * 140) do not get bumped to the next rank.
        let top = ((fraction * self.frequency.len() as f64) - 1e-9).ceil().max(0.0) as usize;
        let top = top.min(self.frequency.len());
        let covered: u64 = self.order[..top]
            .iter()
            .map(|&l| self.frequency[l as usize])
            .sum();
        Ok(covered as f64 / total as f64)
    }

    /// Emit the full coverage curve as `fraction,mass` CSV rows. With
    /// `max_points > 0` the curve is thinned to roughly that many rows
    /// (always keeping the final one).
    pub fn write_coverage_curve(
        &self,
        mut w: impl Write,
        max_points: usize,
    ) -> Result<(), CorpusError> {
        let total = self.total_assignments();
        if total == 0 {
            return Err(CorpusError::EmptyLabelDistribution);
        }
        let l = self.frequency.len();
        let stride = if max_points == 0 { 1 } else { l.div_ceil(max_points).max(1) };
        writeln!(w, "fraction,mass")?;
        let mut cum = 0u64;
        for (rank, &label) in self.order.iter().enumerate() {
            cum += self.frequency[label as usize];
            let k = rank + 1;
            if k % stride == 0 || k == l {
                writeln!(w, "{},{}", k as f64 / l as f64, cum as f64 / total as f64)?;
            }
        }
        Ok(())
    }
}

/// A seeded permutation of sample indices cut into fixed-size blocks.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    permutation: Vec<u32>,
    batch_size: usize,
}

impl BatchPlan {
    pub fn new(num_samples: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size >= 1, "batch size must be at least 1");
        BatchPlan {
            permutation: shuffled_indices(num_samples, seed),
            batch_size,
        }
    }

    pub fn iter(&self) -> std::slice::Chunks<'_, u32> {
        self.permutation.chunks(self.batch_size)
    }

    pub fn num_batches(&self) -> usize {
        self.permutation.len().div_ceil(self.batch_size)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn permutation(&self) -> &[u32] {
        &self.permutation
    }
}

/// Shuffled batch blocks over a dataset's sample indices.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64) -> BatchPlan {
    BatchPlan::new(dataset.num_samples(), batch_size, seed)
}
