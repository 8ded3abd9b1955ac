//! Frequency-based label partitioning: a head cluster of the most frequent
//! labels plus tail clusters of progressively rarer labels, each tail with a
//! geometrically shrinking hidden dimension.

use thiserror::Error;

use crate::corpus::LabelStats;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("partition needs at least one cluster proportion")]
    EmptyProportions,
    #[error("cluster proportion {0} is not positive")]
    NonPositiveProportion(f64),
    #[error("cluster proportions sum to {0}, expected 1")]
    ProportionSumMismatch(f64),
    #[error("decay factor {0} is below 1")]
    DecayBelowOne(f64),
    #[error("head dimension must be at least 1")]
    ZeroHeadDim,
    #[error("cannot split {labels} labels into {clusters} clusters")]
    TooFewLabels { labels: usize, clusters: usize },
    #[error("degenerate partition: cluster {cluster} would be empty")]
    DegeneratePartition { cluster: usize },
    #[error("label {label} out of range for {labels} labels")]
    LabelOutOfRange { label: u32, labels: usize },
    #[error("label {label} appears in more than one cluster")]
    DuplicateLabel { label: u32 },
}

/// How to split the label set: K+1 cluster proportions (head first), the
/// hidden-dimension decay factor q, and the head dimension d.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    proportions: Vec<f64>,
    decay_factor: f64,
    head_dim: usize,
}

impl PartitionSpec {
    pub fn new(
        proportions: Vec<f64>,
        decay_factor: f64,
        head_dim: usize,
    ) -> Result<Self, PartitionError> {
        if proportions.is_empty() {
            return Err(PartitionError::EmptyProportions);
        }
        if let Some(&p) = proportions.iter().find(|p| **p <= 0.0) {
            return Err(PartitionError::NonPositiveProportion(p));
        }
        let sum: f64 = proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PartitionError::ProportionSumMismatch(sum));
        }
        if decay_factor < 1.0 {
            return Err(PartitionError::DecayBelowOne(decay_factor));
        }
        if head_dim == 0 {
            return Err(PartitionError::ZeroHeadDim);
        }
        Ok(PartitionSpec {
            proportions,
            decay_factor,
            head_dim,
        })
    }

    /// A single head cluster holding every label (the dense degenerate case).
    pub fn single(head_dim: usize) -> Self {
        PartitionSpec::new(vec![1.0], 1.0, head_dim).expect("trivially valid")
    }

    pub fn proportions(&self) -> &[f64] {
        &self.proportions
    }

    pub fn num_clusters(&self) -> usize {
        self.proportions.len()
    }

    pub fn num_tails(&self) -> usize {
        self.proportions.len() - 1
    }

    pub fn decay_factor(&self) -> f64 {
        self.decay_factor
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn dims(&self) -> Vec<usize> {
        hidden_dims(self.head_dim, self.decay_factor, self.num_tails())
    }
}

/// dims[0] = d; dims[i] = max(1, floor(d / q^i)) for i = 1..=num_tails.
pub fn hidden_dims(head_dim: usize, decay_factor: f64, num_tails: usize) -> Vec<usize> {
    (0..=num_tails)
        .map(|i| {
            // The epsilon keeps exact quotients (768/2 = 384) from flooring
            // one short when q^i picks up rounding noise.
            let raw = (head_dim as f64 / decay_factor.powi(i as i32) + 1e-9).floor();
            (raw as usize).max(1)
        })
        .collect()
}

/// A concrete assignment of every label to exactly one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelClusters {
    clusters: Vec<Vec<u32>>,
    /// Indexed by label id: (cluster index, index within cluster).
    global_to_local: Vec<(u32, u32)>,
    dims: Vec<usize>,
}

impl LabelClusters {
    /// Build from an explicit layout; validates that the clusters form an
    /// exact partition of 0..L-1 where L is the total assigned count.
    pub fn from_layout(
        clusters: Vec<Vec<u32>>,
        dims: Vec<usize>,
    ) -> Result<Self, PartitionError> {
        assert_eq!(clusters.len(), dims.len(), "one hidden dim per cluster");
        let total: usize = clusters.iter().map(Vec::len).sum();
        let mut global_to_local = vec![(u32::MAX, u32::MAX); total];
        for (c, members) in clusters.iter().enumerate() {
            for (local, &label) in members.iter().enumerate() {
                if label as usize >= total {
                    return Err(PartitionError::LabelOutOfRange {
                        label,
                        labels: total,
                    });
                }
                if global_to_local[label as usize].0 != u32::MAX {
                    return Err(PartitionError::DuplicateLabel { label });
                }
                global_to_local[label as usize] = (c as u32, local as u32);
            }
        }
        // Total count matches and there are no duplicates or out-of-range
        // ids, so by pigeonhole every label is assigned.
        Ok(LabelClusters {
            clusters,
            global_to_local,
            dims,
        })
    }

    /// One cluster holding labels 0..L-1 in id order.
    pub fn single(num_labels: usize, head_dim: usize) -> Self {
        let all: Vec<u32> = (0..num_labels as u32).collect();
        LabelClusters::from_layout(vec![all], vec![head_dim]).expect("identity layout is valid")
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn num_tails(&self) -> usize {
        self.clusters.len() - 1
    }

    pub fn num_labels(&self) -> usize {
        self.global_to_local.len()
    }

    pub fn cluster(&self, i: usize) -> &[u32] {
        &self.clusters[i]
    }

    pub fn cluster_size(&self, i: usize) -> usize {
        self.clusters[i].len()
    }

    pub fn head(&self) -> &[u32] {
        &self.clusters[0]
    }

    pub fn head_size(&self) -> usize {
        self.clusters[0].len()
    }

    /// Hidden dimensions per cluster; dims[0] is the head dimension d.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    /// Map a label id to (cluster index, index within the cluster).
    pub fn locate(&self, label: u32) -> Result<(usize, usize), PartitionError> {
        match self.global_to_local.get(label as usize) {
            Some(&(c, l)) => Ok((c as usize, l as usize)),
            None => Err(PartitionError::LabelOutOfRange {
                label,
                labels: self.num_labels(),
            }),
        }
    }
}

/// Assign labels to clusters in descending-frequency order. All clusters but
/// the last take `ceil(p_i * L)` labels; the last absorbs the remainder.
pub fn partition_by_frequency(
    stats: &LabelStats,
    spec: &PartitionSpec,
) -> Result<LabelClusters, PartitionError> {
    let l = stats.num_labels();
    let n_cls = spec.num_clusters();
    if l < n_cls {
        return Err(PartitionError::TooFewLabels {
            labels: l,
            clusters: n_cls,
        });
    }
    let mut sizes = Vec::with_capacity(n_cls);
    let mut assigned = 0usize;
    for (c, &p) in spec.proportions().iter().enumerate() {
        let size = if c + 1 == n_cls {
            // Remainder to the last cluster.
            l.checked_sub(assigned).unwrap_or(0)
        } else {
            // Nudge below the product before the ceiling so that exactly
            // integral proportions (0.5 * 3956) are not bumped up by float
            // noise.
            ((p * l as f64) - 1e-9).ceil().max(0.0) as usize
        };
        if size == 0 || assigned + size > l {
            return Err(PartitionError::DegeneratePartition { cluster: c });
        }
        sizes.push(size);
        assigned += size;
    }
    if assigned != l {
        return Err(PartitionError::DegeneratePartition { cluster: n_cls - 1 });
    }

    let mut clusters = Vec::with_capacity(n_cls);
    let mut cursor = 0usize;
    for &size in &sizes {
        clusters.push(stats.order()[cursor..cursor + size].to_vec());
        cursor += size;
    }
    LabelClusters::from_layout(clusters, spec.dims())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats_from(freqs: &[u64]) -> LabelStats {
        LabelStats::from_frequencies(freqs.to_vec(), 1)
    }

    #[test]
    fn half_split_on_six_labels() {
        let stats = stats_from(&[10, 5, 3, 2, 1, 1]);
        let spec = PartitionSpec::new(vec![0.5, 0.5], 2.0, 4).unwrap();
        let clusters = partition_by_frequency(&stats, &spec).unwrap();
        assert_eq!(clusters.cluster(0), &[0, 1, 2]);
        assert_eq!(clusters.cluster(1), &[3, 4, 5]);
        assert_eq!(clusters.dims(), &[4, 2]);
    }

    #[test]
    fn eurlex_scale_split_sizes() {
        let stats = stats_from(&vec![1; 3_956]);
        let spec = PartitionSpec::new(vec![0.5, 0.5], 2.0, 768).unwrap();
        let clusters = partition_by_frequency(&stats, &spec).unwrap();
        assert_eq!(clusters.cluster_size(0), 1_978);
        assert_eq!(clusters.cluster_size(1), 1_978);
    }

    #[test]
    fn quarter_split_remainder_goes_last() {
        let stats = stats_from(&vec![0; 670_091]);
        let spec = PartitionSpec::new(vec![0.25; 4], 2.0, 512).unwrap();
        let clusters = partition_by_frequency(&stats, &spec).unwrap();
        let sizes: Vec<usize> = (0..4).map(|c| clusters.cluster_size(c)).collect();
        assert_eq!(sizes, vec![167_523, 167_523, 167_523, 167_522]);
    }

    #[test]
    fn ceiling_cut_resists_float_noise() {
        // 0.1 * 140 floats just above 14; the head must still get 14 labels.
        let stats = stats_from(&vec![1; 140]);
        let spec = PartitionSpec::new(vec![0.1, 0.9], 1.0, 4).unwrap();
        let clusters = partition_by_frequency(&stats, &spec).unwrap();
        assert_eq!(clusters.cluster_size(0), 14);
    }

    #[test]
    fn locate_inverts_the_layout() {
        let clusters =
            LabelClusters::from_layout(vec![vec![7, 2, 9], vec![0, 1, 3, 4, 5, 6, 8]], vec![4, 2])
                .unwrap();
        assert_eq!(clusters.locate(9).unwrap(), (0, 2));
        assert_eq!(clusters.locate(3).unwrap(), (1, 2));
        for c in 0..clusters.num_clusters() {
            for (local, &label) in clusters.cluster(c).iter().enumerate() {
                assert_eq!(clusters.locate(label).unwrap(), (c, local));
            }
        }
        assert!(matches!(
            clusters.locate(10),
            Err(PartitionError::LabelOutOfRange { label: 10, .. })
        ));
    }

    #[test]
    fn single_cluster_is_identity() {
        let clusters = LabelClusters::single(5, 8);
        for j in 0..5u32 {
            assert_eq!(clusters.locate(j).unwrap(), (0, j as usize));
        }
        assert_eq!(clusters.dims(), &[8]);
    }

    #[test]
    fn locate_matches_linear_scan_on_random_partition() {
        let stats = stats_from(
            &(0..1_000)
                .map(|i| ((i * 7919 + 13) % 257) as u64)
                .collect::<Vec<_>>(),
        );
        let spec = PartitionSpec::new(vec![0.4, 0.35, 0.25], 2.0, 16).unwrap();
        let clusters = partition_by_frequency(&stats, &spec).unwrap();
        for label in 0..1_000u32 {
            let (c, local) = clusters.locate(label).unwrap();
            // Brute-force scan oracle.
            let mut found = None;
            for cc in 0..clusters.num_clusters() {
                if let Some(pos) = clusters.cluster(cc).iter().position(|&x| x == label) {
                    found = Some((cc, pos));
                }
            }
            assert_eq!(Some((c, local)), found);
        }
    }

    #[test]
    fn hidden_dim_table() {
        assert_eq!(hidden_dims(768, 2.0, 2), vec![768, 384, 192]);
        assert_eq!(hidden_dims(512, 1.0, 3), vec![512, 512, 512, 512]);
        assert_eq!(hidden_dims(4, 2.0, 4), vec![4, 2, 1, 1, 1]);
    }

    #[test]
    fn spec_validation_errors() {
        assert!(matches!(
            PartitionSpec::new(vec![], 2.0, 4),
            Err(PartitionError::EmptyProportions)
        ));
        assert!(matches!(
            PartitionSpec::new(vec![0.5, -0.5, 1.0], 2.0, 4),
            Err(PartitionError::NonPositiveProportion(_))
        ));
        assert!(matches!(
            PartitionSpec::new(vec![0.5, 0.4], 2.0, 4),
            Err(PartitionError::ProportionSumMismatch(_))
        ));
        assert!(matches!(
            PartitionSpec::new(vec![1.0], 0.5, 4),
            Err(PartitionError::DecayBelowOne(_))
        ));
        assert!(matches!(
            PartitionSpec::new(vec![1.0], 2.0, 0),
            Err(PartitionError::ZeroHeadDim)
        ));
    }

    #[test]
    fn degenerate_partitions_are_rejected() {
        let spec3 = PartitionSpec::new(vec![0.4, 0.3, 0.3], 2.0, 4).unwrap();
        assert!(matches!(
            partition_by_frequency(&stats_from(&[1, 2]), &spec3),
            Err(PartitionError::TooFewLabels { labels: 2, clusters: 3 })
        ));
        // ceil(0.99 * 10) = 10 leaves nothing for the second cluster.
        let spec = PartitionSpec::new(vec![0.99, 0.01], 2.0, 4).unwrap();
        assert!(matches!(
            partition_by_frequency(&stats_from(&[1; 10]), &spec),
            Err(PartitionError::DegeneratePartition { .. })
        ));
    }

    #[test]
    fn layout_validation_errors() {
        assert!(matches!(
            LabelClusters::from_layout(vec![vec![0, 1], vec![1]], vec![2, 1]),
            Err(PartitionError::DuplicateLabel { label: 1 })
        ));
        assert!(matches!(
            LabelClusters::from_layout(vec![vec![0, 5]], vec![2]),
            Err(PartitionError::LabelOutOfRange { label: 5, .. })
        ));
    }

    fn arb_spec() -> impl Strategy<Value = PartitionSpec> {
        (1usize..=4, 1usize..=64)
            .prop_flat_map(|(n, d)| {
                (proptest::collection::vec(0.05f64..1.0, n), 1.0f64..4.0, Just(d))
            })
            .prop_map(|(weights, q, d)| {
                let sum: f64 = weights.iter().sum();
                let proportions: Vec<f64> = weights.iter().map(|w| w / sum).collect();
                PartitionSpec::new(proportions, q, d).unwrap()
            })
    }

    proptest! {
        #[test]
        fn partition_is_exhaustive_disjoint_and_monotone(
            freqs in proptest::collection::vec(0u64..1_000, 8..80),
            spec in arb_spec(),
        ) {
            let stats = stats_from(&freqs);
            let clusters = match partition_by_frequency(&stats, &spec) {
                Ok(c) => c,
                // Small label sets can legitimately produce degenerate splits.
                Err(PartitionError::DegeneratePartition { .. })
                | Err(PartitionError::TooFewLabels { .. }) => return Ok(()),
                Err(e) => panic!("unexpected error: {e}"),
            };

            // Exhaustive and disjoint via a coverage bitmap.
            let mut seen = vec![false; freqs.len()];
            for c in 0..clusters.num_clusters() {
                for &label in clusters.cluster(c) {
                    prop_assert!(!seen[label as usize]);
                    seen[label as usize] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));

            // Frequency never increases across a cluster boundary (with the
            // ascending-id tie-break defining the order inside equal runs).
            for c in 0..clusters.num_clusters() - 1 {
                let last = *clusters.cluster(c).last().unwrap();
                let first = clusters.cluster(c + 1)[0];
                let (fa, fb) = (freqs[last as usize], freqs[first as usize]);
                prop_assert!(fa > fb || (fa == fb && last < first));
            }

            // Deterministic re-partition.
            let again = partition_by_frequency(&stats, &spec).unwrap();
            prop_assert_eq!(clusters, again);
        }
    }
}
