//! Ranking metrics, cluster-access probability estimation, and the
//! size/compute cost models with their measured counterparts.
//!
//! The cost model has two layers of fidelity:
//!  - closed-form approximations of the parameter and compute savings
//!    (`size_ratio_formula`, `compute_ratio_formula`) that drop the small
//!    projection and gate terms, and
//!  - exact counts (`params_*`, `flops_*`) built from the same arithmetic
//!    the instrumented kernels perform, so measured FLOP deltas can be
//!    compared against them with equality rather than tolerance.

use std::io::{self, Write};
use std::time::Instant;

use thiserror::Error;

use crate::corpus::{batches, Dataset, LabelStats};
use crate::layer::{AplcLayer, LayerError};
use crate::numerics::{flop_count, Matrix};
use crate::parallel;
use crate::partition::{LabelClusters, PartitionSpec};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{predictions} prediction lists for {truth} truth sets")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("no samples to evaluate")]
    NoSamples,
    #[error("sample {sample}: ranked list has {len} entries, need {k}")]
    PredictionTooShort { sample: usize, len: usize, k: usize },
    #[error(transparent)]
    Layer(#[from] LayerError),
}

/// Mean over samples of |top-k of the ranked list that are true| / k.
pub fn precision_at_k(
    predictions: &[Vec<u32>],
    truth: &[&[u32]],
    k: usize,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if predictions.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            truth: truth.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let mut sum = 0.0;
    for (i, (pred, labels)) in predictions.iter().zip(truth).enumerate() {
        if pred.len() < k {
            return Err(EvalError::PredictionTooShort {
                sample: i,
                len: pred.len(),
                k,
            });
        }
        let hits = pred[..k].iter().filter(|id| labels.contains(id)).count();
        sum += hits as f64 / k as f64;
    }
    Ok(sum / predictions.len() as f64)
}

/// Precision at several cutoffs plus the sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub p_at_k: Vec<(usize, f64)>,
    pub samples: usize,
}

impl MetricsReport {
    pub fn get(&self, k: usize) -> Option<f64> {
        self.p_at_k.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    pub fn write_text(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "samples: {}", self.samples)?;
        for (k, v) in &self.p_at_k {
            writeln!(w, "P@{k:<3} {v:.4}")?;
        }
        Ok(())
    }

    pub fn write_csv(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "k,precision")?;
        for (k, v) in &self.p_at_k {
            writeln!(w, "{k},{v}")?;
        }
        Ok(())
    }
}

pub fn metrics_report(
    predictions: &[Vec<u32>],
    truth: &[&[u32]],
    ks: &[usize],
) -> Result<MetricsReport, EvalError> {
    let mut p_at_k = Vec::with_capacity(ks.len());
    for &k in ks {
        p_at_k.push((k, precision_at_k(predictions, truth, k)?));
    }
    Ok(MetricsReport {
        p_at_k,
        samples: predictions.len(),
    })
}

/// The rank-k list a frequency-prior classifier predicts for every sample:
/// the k globally most frequent labels.
pub fn frequency_prior_topk(stats: &LabelStats, k: usize) -> Vec<u32> {
    stats.order()[..k.min(stats.order().len())].to_vec()
}

/// Per tail cluster, the fraction of samples with at least one positive
/// label inside it.
pub fn cluster_touch_fractions(dataset: &Dataset, clusters: &LabelClusters) -> Vec<f64> {
    let mut counts = vec![0u64; clusters.num_tails()];
    for sample in dataset.samples() {
        let mut seen: Vec<u32> = sample
            .labels()
            .iter()
            .map(|&l| {
                clusters
                    .locate(l)
                    .expect("dataset label within the partitioned label space")
                    .0 as u32
            })
            .filter(|&c| c > 0)
            .collect();
        seen.sort_unstable();
        seen.dedup();
        for c in seen {
            counts[c as usize - 1] += 1;
        }
    }
    let n = dataset.num_samples() as f64;
    counts.iter().map(|&c| c as f64 / n).collect()
}

/// Closed-form probability that a batch of n_b independently drawn samples
/// touches each tail cluster: p_i = 1 - (1 - s_i)^n_b.
pub fn estimate_access_prob(
    dataset: &Dataset,
    clusters: &LabelClusters,
    n_b: usize,
) -> Vec<f64> {
    assert!(n_b >= 1, "batch size must be at least 1");
    cluster_touch_fractions(dataset, clusters)
        .into_iter()
        .map(|s| 1.0 - (1.0 - s).powi(n_b as i32))
        .collect()
}

/// Monte-Carlo counterpart of `estimate_access_prob`: draws samples with
/// replacement (matching the closed form's independence assumption) and
/// reports the fraction of batches that touched each tail.
pub fn monte_carlo_access_prob(
    dataset: &Dataset,
    clusters: &LabelClusters,
    n_b: usize,
    trials: usize,
    seed: u64,
) -> Vec<f64> {
    assert!(n_b >= 1 && trials >= 1);
    let per_sample: Vec<Vec<u32>> = dataset
        .samples()
        .iter()
        .map(|s| {
            let mut tails: Vec<u32> = s
                .labels()
                .iter()
                .map(|&l| clusters.locate(l).expect("label in range").0 as u32)
                .filter(|&c| c > 0)
                .map(|c| c - 1)
                .collect();
            tails.sort_unstable();
            tails.dedup();
            tails
        })
        .collect();
    let k = clusters.num_tails();
    let n = dataset.num_samples() as u64;
    let mut rng = SplitMix64::new(seed);
    let mut hits = vec![0u64; k];
    let mut touched = vec![false; k];
    for _ in 0..trials {
        touched.fill(false);
        for _ in 0..n_b {
            let i = rng.next_below(n) as usize;
            for &t in &per_sample[i] {
                touched[t as usize] = true;
            }
        }
        for (h, &t) in hits.iter_mut().zip(&touched) {
            if t {
                *h += 1;
            }
        }
    }
    hits.into_iter().map(|h| h as f64 / trials as f64).collect()
}

/// One measured benchmark step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepCost {
    pub rows: usize,
    pub clustered_flops: u64,
    pub dense_flops: u64,
    pub clustered_ns: u64,
    pub dense_ns: u64,
    pub accessed_tails: Vec<u32>,
}

/// Measured side of the cost model.
///
/// FLOP totals come from the process-wide instruction counter; they equal
/// the analytic per-batch counts exactly as long as no other thread runs
/// instrumented kernels during the benchmark (the benchmark itself is
/// single-threaded in sequential mode).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredCosts {
    pub steps: Vec<StepCost>,
    /// Row-weighted fraction of evaluated rows whose batch accessed each
    /// tail: sum of rows over accessing batches / total rows.
    pub observed_access_rates: Vec<f64>,
}

impl MeasuredCosts {
    pub fn total_rows(&self) -> u64 {
        self.steps.iter().map(|s| s.rows as u64).sum()
    }

    pub fn total_clustered_flops(&self) -> u64 {
        self.steps.iter().map(|s| s.clustered_flops).sum()
    }

    pub fn total_dense_flops(&self) -> u64 {
        self.steps.iter().map(|s| s.dense_flops).sum()
    }

    pub fn measured_flop_ratio(&self) -> f64 {
        self.total_dense_flops() as f64 / self.total_clustered_flops() as f64
    }

    pub fn median_clustered_ns(&self) -> u64 {
        median(self.steps.iter().map(|s| s.clustered_ns).collect())
    }

    pub fn median_dense_ns(&self) -> u64 {
        median(self.steps.iter().map(|s| s.dense_ns).collect())
    }
}

fn median(mut v: Vec<u64>) -> u64 {
    assert!(!v.is_empty());
    v.sort_unstable();
    v[v.len() / 2]
}

/// Analytic and (optionally) measured size/compute comparison between the
/// clustered output layer and a dense one over the same label set.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModelReport {
    pub batch_size: usize,
    /// Exact parameter count of the clustered layer.
    pub params_clustered: u64,
    /// d * L.
    pub params_dense: u64,
    /// Approximate ratio L / sum_i l_i / q^i (drops projections and gates).
    pub size_ratio_formula: f64,
    /// params_dense / params_clustered.
    pub size_ratio_exact: f64,
    /// Per-tail batch access probabilities used by the compute model.
    pub access_probs: Vec<f64>,
    /// Expected clustered FLOPs per batch under `access_probs`.
    pub flops_clustered_expected: f64,
    /// 2 * N_b * d * L.
    pub flops_dense_per_batch: u64,
    /// Approximate ratio L / (l_h + sum_i p_i l_i / q^i).
    pub compute_ratio_formula: f64,
    /// flops_dense_per_batch / flops_clustered_expected.
    pub compute_ratio_full: f64,
    pub measured: Option<MeasuredCosts>,
}

/// Build the analytic half of the cost report for a partition and batch
/// size. `spec` must be the recipe that produced `clusters` (its decay
/// factor feeds the approximate formulas).
pub fn analytic_ratios(
    clusters: &LabelClusters,
    spec: &PartitionSpec,
    access_probs: &[f64],
    n_b: usize,
) -> CostModelReport {
    assert_eq!(access_probs.len(), clusters.num_tails());
    assert!(n_b >= 1);
    let d = clusters.dim(0) as u64;
    let l = clusters.num_labels() as u64;
    let k = clusters.num_tails();
    let q = spec.decay_factor();

    let mut params_clustered = d * (clusters.head_size() as u64 + k as u64);
    for t in 0..k {
        params_clustered +=
            clusters.dim(t + 1) as u64 * (d + clusters.cluster_size(t + 1) as u64);
    }
    let params_dense = d * l;

    let mut size_denom = 0.0;
    for c in 0..clusters.num_clusters() {
        size_denom += clusters.cluster_size(c) as f64 / q.powi(c as i32);
    }
    let size_ratio_formula = l as f64 / size_denom;
    let size_ratio_exact = params_dense as f64 / params_clustered as f64;

    let head_cols = clusters.head_size() as u64 + k as u64;
    let mut flops_clustered_expected = (2 * n_b as u64 * d * head_cols) as f64;
    for t in 0..k {
        let m = clusters.dim(t + 1) as u64;
        let l_t = clusters.cluster_size(t + 1) as u64;
        flops_clustered_expected += access_probs[t] * (2 * n_b as u64 * m * (d + l_t)) as f64;
    }
    let flops_dense_per_batch = 2 * n_b as u64 * d * l;

    let mut compute_denom = clusters.head_size() as f64;
    for t in 0..k {
        compute_denom +=
            access_probs[t] * clusters.cluster_size(t + 1) as f64 / q.powi((t + 1) as i32);
    }
    let compute_ratio_formula = l as f64 / compute_denom;
    let compute_ratio_full = flops_dense_per_batch as f64 / flops_clustered_expected;

    CostModelReport {
        batch_size: n_b,
        params_clustered,
        params_dense,
        size_ratio_formula,
        size_ratio_exact,
        access_probs: access_probs.to_vec(),
        flops_clustered_expected,
        flops_dense_per_batch,
        compute_ratio_formula,
        compute_ratio_full,
        measured: None,
    }
}

impl CostModelReport {
    pub fn write_csv(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "metric,value")?;
        writeln!(w, "batch_size,{}", self.batch_size)?;
        writeln!(w, "params_clustered,{}", self.params_clustered)?;
        writeln!(w, "params_dense,{}", self.params_dense)?;
        writeln!(w, "size_ratio_formula,{}", self.size_ratio_formula)?;
        writeln!(w, "size_ratio_exact,{}", self.size_ratio_exact)?;
        for (i, p) in self.access_probs.iter().enumerate() {
            writeln!(w, "access_prob_tail_{i},{p}")?;
        }
        writeln!(w, "flops_clustered_expected,{}", self.flops_clustered_expected)?;
        writeln!(w, "flops_dense_per_batch,{}", self.flops_dense_per_batch)?;
        writeln!(w, "compute_ratio_formula,{}", self.compute_ratio_formula)?;
        writeln!(w, "compute_ratio_full,{}", self.compute_ratio_full)?;
        if let Some(m) = &self.measured {
            writeln!(w, "measured_steps,{}", m.steps.len())?;
            writeln!(w, "measured_rows,{}", m.total_rows())?;
            writeln!(w, "measured_flops_clustered,{}", m.total_clustered_flops())?;
            writeln!(w, "measured_flops_dense,{}", m.total_dense_flops())?;
            writeln!(w, "measured_flop_ratio,{}", m.measured_flop_ratio())?;
            writeln!(w, "median_step_ns_clustered,{}", m.median_clustered_ns())?;
            writeln!(w, "median_step_ns_dense,{}", m.median_dense_ns())?;
            for (i, r) in m.observed_access_rates.iter().enumerate() {
                writeln!(w, "observed_access_rate_tail_{i},{r}")?;
            }
        }
        Ok(())
    }

    pub fn write_markdown(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "| quantity | dense | clustered | ratio |")?;
        writeln!(w, "|---|---|---|---|")?;
        writeln!(
            w,
            "| output-layer parameters | {} | {} | {:.3} |",
            self.params_dense, self.params_clustered, self.size_ratio_exact
        )?;
        writeln!(
            w,
            "| expected FLOPs / batch | {} | {:.0} | {:.3} |",
            self.flops_dense_per_batch, self.flops_clustered_expected, self.compute_ratio_full
        )?;
        if let Some(m) = &self.measured {
            writeln!(
                w,
                "| measured FLOPs ({} steps) | {} | {} | {:.3} |",
                m.steps.len(),
                m.total_dense_flops(),
                m.total_clustered_flops(),
                m.measured_flop_ratio()
            )?;
            writeln!(
                w,
                "| median forward wall time (ns) | {} | {} | {:.3} |",
                m.median_dense_ns(),
                m.median_clustered_ns(),
                m.median_dense_ns() as f64 / m.median_clustered_ns() as f64
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchmarkConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Pin to one thread so dense and clustered wall times compare fairly.
    pub sequential: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            batch_size: 64,
            steps: 50,
            seed: 42,
            sequential: true,
        }
    }
}

/// Forward the output layer (clustered vs dense) over matched batches drawn
/// from the dataset's label sets, recording FLOP-counter deltas and wall
/// times per step. Hidden states are seeded noise: the cost of the output
/// layer does not depend on the values, only on the batch's access pattern.
pub fn benchmark(
    dataset: &Dataset,
    layer: &AplcLayer<f32>,
    spec: &PartitionSpec,
    cfg: &BenchmarkConfig,
) -> Result<CostModelReport, EvalError> {
    assert!(cfg.batch_size >= 1 && cfg.steps >= 1);
    let clusters = layer.clusters();
    let probs = estimate_access_prob(dataset, clusters, cfg.batch_size);
    let mut report = analytic_ratios(clusters, spec, &probs, cfg.batch_size);

    let dense = AplcLayer::<f32>::zeros(LabelClusters::single(
        dataset.num_labels(),
        layer.hidden_dim(),
    ));
    let prev_threads = parallel::threads();
    if cfg.sequential {
        parallel::set_threads(1);
    }
    let steps = run_measured_steps(dataset, layer, &dense, cfg);
    if cfg.sequential {
        parallel::set_threads(prev_threads);
    }
    let steps = steps?;

    let total_rows: u64 = steps.iter().map(|s| s.rows as u64).sum();
    let mut observed = vec![0u64; clusters.num_tails()];
    for step in &steps {
        for &t in &step.accessed_tails {
            observed[t as usize] += step.rows as u64;
        }
    }
    let observed_access_rates = observed
        .into_iter()
        .map(|r| r as f64 / total_rows as f64)
        .collect();
    report.measured = Some(MeasuredCosts {
        steps,
        observed_access_rates,
    });
    Ok(report)
}

fn run_measured_steps(
    dataset: &Dataset,
    layer: &AplcLayer<f32>,
    dense: &AplcLayer<f32>,
    cfg: &BenchmarkConfig,
) -> Result<Vec<StepCost>, EvalError> {
    let d = layer.hidden_dim();
    let mut rng = SplitMix64::new(cfg.seed);
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut epoch = 0u64;
    let mut chunks: Vec<Vec<u32>> = batches(dataset, cfg.batch_size, cfg.seed)
        .iter()
        .map(<[u32]>::to_vec)
        .collect();
    let mut cursor = 0usize;
    for _ in 0..cfg.steps {
        if cursor == chunks.len() {
            epoch += 1;
            chunks = batches(dataset, cfg.batch_size, cfg.seed.wrapping_add(epoch))
                .iter()
                .map(<[u32]>::to_vec)
                .collect();
            cursor = 0;
        }
        let idx = &chunks[cursor];
        cursor += 1;
        let rows = idx.len();
        let labels: Vec<&[u32]> = idx
            .iter()
            .map(|&i| dataset.sample(i as usize).labels())
            .collect();
        let access = layer.access_set(&labels);
        let dense_access = dense.access_set(&labels);
        let h = Matrix::from_vec(
            rows,
            d,
            (0..rows * d)
                .map(|_| (rng.next_f64() * 2.0 - 1.0) as f32 * 0.5)
                .collect(),
        );

        let before = flop_count();
        let t0 = Instant::now();
        let _ = layer.forward(&h, &access)?;
        let clustered_ns = t0.elapsed().as_nanos() as u64;
        let mid = flop_count();
        let t1 = Instant::now();
        let _ = dense.forward(&h, &dense_access)?;
        let dense_ns = t1.elapsed().as_nanos() as u64;
        let after = flop_count();

        steps.push(StepCost {
            rows,
            clustered_flops: mid - before,
            dense_flops: after - mid,
            clustered_ns,
            dense_ns,
            accessed_tails: access.batch_tails().to_vec(),
        });
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Sample, SparseVector};

    #[test]
    fn top_hit_gives_full_precision() {
        let predictions = vec![vec![5, 2, 9]];
        let truth: Vec<&[u32]> = vec![&[5, 40]];
        assert_eq!(precision_at_k(&predictions, &truth, 1).unwrap(), 1.0);
    }

    #[test]
    fn three_of_five_hits_give_point_six() {
        let predictions = vec![vec![1, 2, 3, 4, 5]];
        let truth: Vec<&[u32]> = vec![&[1, 3, 5, 99]];
        assert_eq!(precision_at_k(&predictions, &truth, 5).unwrap(), 0.6);
    }

    #[test]
    fn matches_set_intersection_oracle() {
        use std::collections::HashSet;
        let mut rng = SplitMix64::new(31);
        let n = 200;
        let l = 50u64;
        let predictions: Vec<Vec<u32>> = (0..n)
            .map(|_| {
                let mut ids: Vec<u32> = Vec::new();
                while ids.len() < 7 {
                    let c = rng.next_below(l) as u32;
                    if !ids.contains(&c) {
                        ids.push(c);
                    }
                }
                ids
            })
            .collect();
        let truth_owned: Vec<Vec<u32>> = (0..n)
            .map(|_| {
                (0..rng.next_below(6))
                    .map(|_| rng.next_below(l) as u32)
                    .collect()
            })
            .collect();
        let truth: Vec<&[u32]> = truth_owned.iter().map(Vec::as_slice).collect();

        for k in 1..=7 {
            let got = precision_at_k(&predictions, &truth, k).unwrap();
            let mut oracle = 0.0;
            for (pred, labels) in predictions.iter().zip(&truth_owned) {
                let set: HashSet<u32> = labels.iter().copied().collect();
                let hits = pred[..k].iter().filter(|id| set.contains(id)).count();
                oracle += hits as f64 / k as f64;
            }
            oracle /= n as f64;
            assert!((got - oracle).abs() < 1e-12, "k={k}: {got} vs {oracle}");
        }

        // Permutation invariance over samples.
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.swap(3, 91);
        let shuffled_pred: Vec<Vec<u32>> =
            order.iter().map(|&i| predictions[i].clone()).collect();
        let shuffled_truth: Vec<&[u32]> = order.iter().map(|&i| truth[i]).collect();
        let a = precision_at_k(&predictions, &truth, 5).unwrap();
        let b = precision_at_k(&shuffled_pred, &shuffled_truth, 5).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn error_cases() {
        let predictions = vec![vec![1, 2]];
        let truth: Vec<&[u32]> = vec![&[1]];
        assert!(matches!(
            precision_at_k(&predictions, &truth, 0),
            Err(EvalError::ZeroK)
        ));
        assert!(matches!(
            precision_at_k(&predictions, &truth, 3),
            Err(EvalError::PredictionTooShort { sample: 0, len: 2, k: 3 })
        ));
        let too_few: Vec<&[u32]> = vec![];
        assert!(matches!(
            precision_at_k(&predictions, &too_few, 1),
            Err(EvalError::LengthMismatch { .. })
        ));
        let none: Vec<Vec<u32>> = vec![];
        assert!(matches!(
            precision_at_k(&none, &too_few, 1),
            Err(EvalError::NoSamples)
        ));
    }

    #[test]
    fn report_collects_requested_cutoffs() {
        let predictions = vec![vec![1, 2, 3], vec![4, 5, 6]];
        let truth: Vec<&[u32]> = vec![&[1], &[9]];
        let report = metrics_report(&predictions, &truth, &[1, 3]).unwrap();
        assert_eq!(report.samples, 2);
        assert_eq!(report.get(1), Some(0.5));
        assert!((report.get(3).unwrap() - (1.0 / 3.0) / 2.0).abs() < 1e-12);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("k,precision\n"));
        assert_eq!(text.lines().count(), 3);
    }

    fn toy_dataset(touch_tail: usize, total: usize) -> (Dataset, LabelClusters) {
        // Labels 0..3 head, 4..7 tail; `touch_tail` of `total` samples carry
        // a tail positive.
        let samples: Vec<Sample> = (0..total)
            .map(|i| {
                let labels = if i < touch_tail {
                    vec![0, 4 + (i % 4) as u32]
                } else {
                    vec![(i % 4) as u32]
                };
                Sample::new(labels, SparseVector::empty())
            })
            .collect();
        let dataset = Dataset::new(samples, 4, 8).unwrap();
        let clusters = LabelClusters::from_layout(
            vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]],
            vec![4, 2],
        )
        .unwrap();
        (dataset, clusters)
    }

    #[test]
    fn closed_form_access_probability() {
        // Every sample touches the tail: p = 1 exactly.
        let (dataset, clusters) = toy_dataset(12, 12);
        assert_eq!(estimate_access_prob(&dataset, &clusters, 7), vec![1.0]);

        // A quarter touch it, batch of one: p = s = 0.25 exactly.
        let (dataset, clusters) = toy_dataset(3, 12);
        assert_eq!(estimate_access_prob(&dataset, &clusters, 1), vec![0.25]);

        // s = 0.1, n_b = 32: 1 - 0.9^32 ~ 0.9657.
        let (dataset, clusters) = toy_dataset(2, 20);
        let p = estimate_access_prob(&dataset, &clusters, 32)[0];
        assert!((p - 0.9657).abs() < 1e-4, "{p}");
    }

    #[test]
    fn monte_carlo_matches_closed_form() {
        let (dataset, clusters) = toy_dataset(60, 200);
        let closed = estimate_access_prob(&dataset, &clusters, 16);
        let sampled = monte_carlo_access_prob(&dataset, &clusters, 16, 10_000, 7);
        assert!(
            (closed[0] - sampled[0]).abs() < 0.01,
            "{} vs {}",
            closed[0],
            sampled[0]
        );
    }

    #[test]
    fn ratio_formulas_match_textbook_arithmetic() {
        // L=1000 split 500/500, q=2, p=0.5.
        let clusters = LabelClusters::from_layout(
            vec![(0u32..500).collect(), (500u32..1000).collect()],
            vec![16, 8],
        )
        .unwrap();
        let spec = PartitionSpec::new(vec![0.5, 0.5], 2.0, 16).unwrap();
        let report = analytic_ratios(&clusters, &spec, &[0.5], 4);
        // 1000 / (500 + 0.5 * 500 / 2) = 1.6.
        assert_eq!(report.compute_ratio_formula, 1.6);
        // 1000 / (500 + 250) = 4/3.
        assert!((report.size_ratio_formula - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.params_dense, 16 * 1000);
        assert_eq!(report.flops_dense_per_batch, 2 * 4 * 16 * 1000);
    }

    #[test]
    fn degenerate_single_cluster_ratios_are_one() {
        let clusters = LabelClusters::single(64, 8);
        let spec = PartitionSpec::single(8);
        let report = analytic_ratios(&clusters, &spec, &[], 2);
        assert_eq!(report.size_ratio_formula, 1.0);
        assert_eq!(report.compute_ratio_formula, 1.0);
        assert_eq!(report.size_ratio_exact, 1.0);
        assert_eq!(report.compute_ratio_full, 1.0);
    }

    #[test]
    fn cost_csv_schema_is_stable() {
        let clusters = LabelClusters::single(10, 4);
        let spec = PartitionSpec::single(4);
        let report = analytic_ratios(&clusters, &spec, &[], 2);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("metric,value\n"));
        for key in [
            "params_clustered",
            "params_dense",
            "size_ratio_formula",
            "compute_ratio_full",
        ] {
            assert!(text.contains(&format!("\n{key},")), "missing {key}");
        }
    }

    #[test]
    fn frequency_prior_ranks_by_frequency() {
        let (dataset, _) = toy_dataset(3, 12);
        let stats = LabelStats::compute(&dataset);
        let top = frequency_prior_topk(&stats, 2);
        // Label 0 occurs most often (every tail-touching sample plus its
        // share of the round-robin), so it leads the prior.
        assert_eq!(top[0], 0);
        assert_eq!(top.len(), 2);
    }

    #[test]
    fn benchmark_records_requested_steps() {
        let (dataset, clusters) = toy_dataset(6, 40);
        let spec = PartitionSpec::new(vec![0.5, 0.5], 2.0, 4).unwrap();
        let layer = AplcLayer::<f32>::seeded(clusters, 11);
        let cfg = BenchmarkConfig {
            batch_size: 8,
            steps: 3,
            seed: 5,
            sequential: true,
        };
        let report = benchmark(&dataset, &layer, &spec, &cfg).unwrap();
        let measured = report.measured.as_ref().unwrap();
        assert_eq!(measured.steps.len(), 3);
        assert_eq!(measured.total_rows(), 24);
        assert_eq!(measured.observed_access_rates.len(), 1);
        // The counter is process-global, so concurrent tests can only add
        // to a delta; each step must at least account for its own forward.
        for step in &measured.steps {
            let dense_own = 2 * step.rows as u64 * 4 * 8;
            assert!(step.dense_flops >= dense_own);
            assert!(step.clustered_flops >= 2 * step.rows as u64 * 4 * 5);
        }
        let mut md = Vec::new();
        report.write_markdown(&mut md).unwrap();
        assert!(String::from_utf8(md).unwrap().contains("measured FLOPs"));
    }
}
