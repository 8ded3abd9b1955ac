//! Seeded synthetic datasets with Zipf-distributed labels and
//! label-correlated sparse features.
//!
//! Each label owns a fixed "signature" set of feature ids; a sample's
//! feature vector is the union of the signatures of its labels plus a few
//! weaker noise features, L2-normalized like tf-idf vectors. Signatures
//! depend only on (seed, label id), so train and test splits generated from
//! the same seed describe the same underlying concept space and a model can
//! genuinely generalize between them.

use super::{Dataset, Sample, SparseVector};
use crate::rng::SplitMix64;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub num_features: usize,
    pub num_labels: usize,
    /// Exponent s of the label popularity law p(rank k) proportional to k^-s.
    pub zipf_exponent: f64,
    /// Target mean number of labels per sample (at least 1).
    pub mean_labels: f64,
    /// Signature feature ids owned by each label.
    pub features_per_label: usize,
    /// Additional random low-weight features per sample.
    pub noise_features: usize,
    pub seed: u64,
}

/// Inverse-CDF sampler over ranks 1..=n with weight k^-s, returning 0-based
/// label ids in popularity order (id 0 is the most popular).
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    cumulative: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(n: usize, exponent: f64) -> Self {
        assert!(n > 0, "need at least one label");
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for k in 1..=n {
            acc += (k as f64).powf(-exponent);
            cumulative.push(acc);
        }
        ZipfSampler { cumulative }
    }

    pub fn sample(&self, rng: &mut SplitMix64) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u = rng.next_f64() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }

    /// Probability of rank `k` (0-based).
    pub fn probability(&self, k: usize) -> f64 {
        let total = *self.cumulative.last().unwrap();
        let below = if k == 0 { 0.0 } else { self.cumulative[k - 1] };
        (self.cumulative[k] - below) / total
    }
}

/// Knuth's product-of-uniforms Poisson sampler; fine for the small means
/// used here.
fn poisson(rng: &mut SplitMix64, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let limit = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.next_f64();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

/// The fixed signature of a label: feature ids and strong weights, a pure
/// function of (seed, label).
fn label_signature(cfg: &SyntheticConfig, label: u32) -> Vec<(u32, f32)> {
    let mut rng = SplitMix64::new(cfg.seed ^ (label as u64 + 1).wrapping_mul(GOLDEN));
    let mut ids: Vec<u32> = Vec::with_capacity(cfg.features_per_label);
    while ids.len() < cfg.features_per_label {
        let id = rng.next_below(cfg.num_features as u64) as u32;
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    ids.into_iter()
        .map(|id| (id, (0.5 + rng.next_f64()) as f32))
        .collect()
}

/// Generate one split. Splits with different `split` tags share label
/// signatures (same seed) but draw independent samples.
pub fn generate(cfg: &SyntheticConfig, split: u64) -> Dataset {
    assert!(cfg.num_labels > 0 && cfg.num_features > 0);
    assert!(cfg.features_per_label <= cfg.num_features);
    let zipf = ZipfSampler::new(cfg.num_labels, cfg.zipf_exponent);
    let mut rng = SplitMix64::new(cfg.seed).fork(split.wrapping_add(1));
    let extra_mean = (cfg.mean_labels - 1.0).max(0.0);

    let mut samples = Vec::with_capacity(cfg.num_samples);
    for _ in 0..cfg.num_samples {
        let want = (1 + poisson(&mut rng, extra_mean)).min(cfg.num_labels);
        let mut labels: Vec<u32> = Vec::with_capacity(want);
        while labels.len() < want {
            let l = zipf.sample(&mut rng) as u32;
            if !labels.contains(&l) {
                labels.push(l);
            }
        }

        let mut pairs: Vec<(u32, f32)> = Vec::new();
        for &l in &labels {
            pairs.extend(label_signature(cfg, l));
        }
        for _ in 0..cfg.noise_features {
            let id = rng.next_below(cfg.num_features as u64) as u32;
            pairs.push((id, (0.1 + 0.4 * rng.next_f64()) as f32));
        }
        // Merge duplicate ids by summing (all weights positive, so sums
        // never cancel to zero).
        pairs.sort_by_key(|(i, _)| *i);
        let mut merged: Vec<(u32, f32)> = Vec::with_capacity(pairs.len());
        for (i, v) in pairs {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => merged.push((i, v)),
            }
        }
        let (indices, values) = merged.into_iter().unzip();
        let mut features = SparseVector::new(indices, values).expect("merged pairs are valid");
        features.l2_normalize();
        samples.push(Sample::new(labels, features));
    }
    Dataset::new(samples, cfg.num_features, cfg.num_labels).expect("generator respects bounds")
}

/// Train/test pair mimicking the EURLex-4k corpus shape: 15,539 train and
/// 3,809 test samples, 186,104 features, 3,956 labels, mean 5.3 labels per
/// sample, head-heavy label popularity.
pub fn eurlex_surrogate(seed: u64) -> (Dataset, Dataset) {
    let cfg = SyntheticConfig {
        num_samples: 15_539,
        num_features: 186_104,
        num_labels: 3_956,
        zipf_exponent: 0.8,
        mean_labels: 5.3,
        features_per_label: 8,
        noise_features: 40,
        seed,
    };
    let train = generate(&cfg, 0);
    let test_cfg = SyntheticConfig {
        num_samples: 3_809,
        ..cfg
    };
    let test = generate(&test_cfg, 1);
    (train, test)
}
