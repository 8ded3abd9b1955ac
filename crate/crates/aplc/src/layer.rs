//! The adaptive clustered output layer.
//!
//! Layout: one head weight matrix of shape d x (l_h + K) whose first l_h
//! columns score the head labels and whose last K columns are the tail-gate
//! logits, plus per-tail projection (d x m_t) and classifier (m_t x l_t)
//! matrices with m_t = max(1, floor(d / q^t)). There are no bias terms, so
//! the parameter count is exactly d(l_h + K) + sum m_t (d + l_t).
//!
//! A head label's probability is sigma(z); a tail label's probability is the
//! product sigma(gate) * sigma(z), i.e. "the cluster is relevant" times "the
//! label is relevant within the cluster". Training evaluates the head for
//! every sample and a tail cluster for the whole batch whenever at least one
//! sample in the batch has a positive label inside it, with per-sample
//! masking in the loss.

use thiserror::Error;

use crate::numerics::{
    bce_from_log_prob, log_sigmoid, matmul, matmul_a_bt, matmul_at_b, Matrix, NumericsError,
    Scalar,
};
use crate::partition::LabelClusters;
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("hidden state contains a non-finite value")]
    NonFiniteHiddenState,
    #[error("hidden state has {got} columns, layer expects {want}")]
    HiddenDimMismatch { got: usize, want: usize },
    #[error("forward cache does not match the access set ({detail})")]
    CacheMismatch { detail: String },
    #[error("cannot rank top {k} of {labels} labels")]
    KTooLarge { k: usize, labels: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which clusters each sample of a batch touches, plus the batch union.
///
/// Tail indices are 0-based: tail `t` is label cluster `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccessSet {
    /// Per sample: sorted tail indices with at least one positive label.
    sample_tails: Vec<Vec<u32>>,
    /// Per sample: positives as (cluster index, local index), sorted.
    sample_positives: Vec<Vec<(u32, u32)>>,
    /// Sorted union of the per-sample tails.
    batch_tails: Vec<u32>,
    /// Sum over samples of the labels they are scored on:
    /// l_h plus the sizes of their accessed tails.
    total_terms: u64,
}

impl AccessSet {
    pub fn num_samples(&self) -> usize {
        self.sample_tails.len()
    }

    /// Sorted tail indices accessed by sample `i` (the head is implicit).
    pub fn sample_tails(&self, i: usize) -> &[u32] {
        &self.sample_tails[i]
    }

    pub fn sample_positives(&self, i: usize) -> &[(u32, u32)] {
        &self.sample_positives[i]
    }

    /// Sorted union of tail indices any sample in the batch accesses.
    pub fn batch_tails(&self) -> &[u32] {
        &self.batch_tails
    }

    /// Number of labels sample `i` is scored on (its L_i).
    pub fn label_terms(&self, i: usize, clusters: &LabelClusters) -> u64 {
        let mut terms = clusters.head_size() as u64;
        for &t in &self.sample_tails[i] {
            terms += clusters.cluster_size(t as usize + 1) as u64;
        }
        terms
    }

    /// The loss normalizer: sum of L_i over the batch.
    pub fn total_terms(&self) -> u64 {
        self.total_terms
    }
}

/// Collect, per sample, the head-implicit access set and the batch union.
/// Labels must be valid for the cluster layout.
pub fn build_access_set(batch_labels: &[&[u32]], clusters: &LabelClusters) -> AccessSet {
    let head = clusters.head_size() as u64;
    let mut sample_tails = Vec::with_capacity(batch_labels.len());
    let mut sample_positives = Vec::with_capacity(batch_labels.len());
    let mut batch_tails: Vec<u32> = Vec::new();
    let mut total_terms = 0u64;
    for labels in batch_labels {
        let mut positives: Vec<(u32, u32)> = labels
            .iter()
            .map(|&l| {
                let (c, local) = clusters
                    .locate(l)
                    .expect("batch label within the partitioned label space");
                (c as u32, local as u32)
            })
            .collect();
        positives.sort_unstable();
        let mut tails: Vec<u32> = positives
            .iter()
            .filter(|(c, _)| *c > 0)
            .map(|(c, _)| c - 1)
            .collect();
        tails.dedup();
        total_terms += head;
        for &t in &tails {
            total_terms += clusters.cluster_size(t as usize + 1) as u64;
            if let Err(pos) = batch_tails.binary_search(&t) {
                batch_tails.insert(pos, t);
            }
        }
        sample_tails.push(tails);
        sample_positives.push(positives);
    }
    AccessSet {
        sample_tails,
        sample_positives,
        batch_tails,
        total_terms,
    }
}

/// Forward activations: the public log-probabilities plus the cached
/// intermediates the backward pass reuses.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// N_b x l_h: log sigma of the head label logits.
    head_log_probs: Matrix<T>,
    /// N_b x K: log sigma of every gate logit.
    gate_log_probs: Matrix<T>,
    /// Aligned with the access set's batch tails; each is N_b x l_t holding
    /// the composite log p = log sigma(gate) + log sigma(label logit).
    tail_log_probs: Vec<Matrix<T>>,
    h: Matrix<T>,
    head_logits: Matrix<T>,
    tail_u: Vec<Matrix<T>>,
    tail_z: Vec<Matrix<T>>,
    batch_tails: Vec<u32>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn num_rows(&self) -> usize {
        self.h.rows()
    }

    pub fn head_log_probs(&self) -> &Matrix<T> {
        &self.head_log_probs
    }

    pub fn gate_log_probs(&self) -> &Matrix<T> {
        &self.gate_log_probs
    }

    /// Composite tail log-probabilities for the `pos`-th accessed tail.
    pub fn tail_log_probs(&self, pos: usize) -> &Matrix<T> {
        &self.tail_log_probs[pos]
    }

    pub fn batch_tails(&self) -> &[u32] {
        &self.batch_tails
    }
}

/// Gradient buffers mirroring the layer's weight matrices.
#[derive(Debug, Clone)]
pub struct AplcGradients<T> {
    pub head_weights: Matrix<T>,
    pub tail_projections: Vec<Matrix<T>>,
    pub tail_classifiers: Vec<Matrix<T>>,
}

impl<T: Scalar> AplcGradients<T> {
    pub fn zeros_like(layer: &AplcLayer<T>) -> Self {
        AplcGradients {
            head_weights: Matrix::zeros(layer.head_weights.rows(), layer.head_weights.cols()),
            tail_projections: layer
                .tail_projections
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
            tail_classifiers: layer
                .tail_classifiers
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    fn reset(&mut self) {
        self.head_weights.fill(T::zero());
        for m in &mut self.tail_projections {
            m.fill(T::zero());
        }
        for m in &mut self.tail_classifiers {
            m.fill(T::zero());
        }
    }
}

/// Inference strategy for top-k prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    /// Score every cluster.
    Exact,
    /// Score the head plus, per sample, the given number of tail clusters
    /// with the highest gate probability.
    Pruned(usize),
}

#[derive(Debug, Clone)]
pub struct AplcLayer<T> {
    clusters: LabelClusters,
    /// d x (l_h + K); columns [0, l_h) score head labels, column l_h + t is
    /// the gate logit of tail t.
    head_weights: Matrix<T>,
    /// Tail t: d x m_t.
    tail_projections: Vec<Matrix<T>>,
    /// Tail t: m_t x l_t.
    tail_classifiers: Vec<Matrix<T>>,
    /// When set, the loss adds an explicit BCE term per (sample, gate) with
    /// target 1 iff the sample accesses that tail. Off by default: gates are
    /// ordinarily trained only through the probability product.
    gate_bce: bool,
}

impl<T: Scalar> AplcLayer<T> {
    /// All-zero weights (useful for exact size accounting on huge configs).
    pub fn zeros(clusters: LabelClusters) -> Self {
        let dims = clusters.dims().to_vec();
        let d = dims[0];
        let k = clusters.num_tails();
        let head_weights = Matrix::zeros(d, clusters.head_size() + k);
        let tail_projections = (0..k).map(|t| Matrix::zeros(d, dims[t + 1])).collect();
        let tail_classifiers = (0..k)
            .map(|t| Matrix::zeros(dims[t + 1], clusters.cluster_size(t + 1)))
            .collect();
        AplcLayer {
            clusters,
            head_weights,
            tail_projections,
            tail_classifiers,
            gate_bce: false,
        }
    }

    /// Symmetric-uniform initialized weights, deterministic under the seed.
    pub fn seeded(clusters: LabelClusters, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let dims = clusters.dims().to_vec();
        let d = dims[0];
        let k = clusters.num_tails();
        let head_weights = Matrix::glorot_uniform(d, clusters.head_size() + k, &mut rng);
        let tail_projections = (0..k)
            .map(|t| Matrix::glorot_uniform(d, dims[t + 1], &mut rng))
            .collect();
        let tail_classifiers = (0..k)
            .map(|t| Matrix::glorot_uniform(dims[t + 1], clusters.cluster_size(t + 1), &mut rng))
            .collect();
        AplcLayer {
            clusters,
            head_weights,
            tail_projections,
            tail_classifiers,
            gate_bce: false,
        }
    }

    pub fn with_gate_bce(mut self, on: bool) -> Self {
        self.gate_bce = on;
        self
    }

    pub fn gate_bce(&self) -> bool {
        self.gate_bce
    }

    pub fn clusters(&self) -> &LabelClusters {
        &self.clusters
    }

    pub fn num_tails(&self) -> usize {
        self.tail_projections.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.head_weights.rows()
    }

    pub fn num_labels(&self) -> usize {
        self.clusters.num_labels()
    }

    pub fn head_weights(&self) -> &Matrix<T> {
        &self.head_weights
    }

    pub fn tail_projection(&self, t: usize) -> &Matrix<T> {
        &self.tail_projections[t]
    }

    pub fn tail_classifier(&self, t: usize) -> &Matrix<T> {
        &self.tail_classifiers[t]
    }

    /// All weight matrices in the canonical order
    /// [head, proj_0, clf_0, proj_1, clf_1, ...].
    pub fn matrices(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.head_weights];
        for t in 0..self.num_tails() {
            out.push(&self.tail_projections[t]);
            out.push(&self.tail_classifiers[t]);
        }
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.head_weights];
        for (p, c) in self
            .tail_projections
            .iter_mut()
            .zip(self.tail_classifiers.iter_mut())
        {
            out.push(p);
            out.push(c);
        }
        out
    }

    /// Flatten every weight (canonical matrix order) into one vector.
    /// Mainly for gradient-verification tooling.
    pub fn flat_params(&self) -> Vec<T> {
        self.matrices()
            .iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) {
        let mut cursor = 0;
        for m in self.matrices_mut() {
            let len = m.len();
            m.as_mut_slice().copy_from_slice(&flat[cursor..cursor + len]);
            cursor += len;
        }
        assert_eq!(cursor, flat.len(), "flat parameter length mismatch");
    }

    /// Re-instantiate with another scalar type (f32 training weights to f64
    /// verification weights).
    pub fn cast<U: Scalar>(&self) -> AplcLayer<U> {
        AplcLayer {
            clusters: self.clusters.clone(),
            head_weights: self.head_weights.cast(),
            tail_projections: self.tail_projections.iter().map(Matrix::cast).collect(),
            tail_classifiers: self.tail_classifiers.iter().map(Matrix::cast).collect(),
            gate_bce: self.gate_bce,
        }
    }

    /// Closed-form parameter count: d(l_h + K) + sum over tails of
    /// m_t (d + l_t). Must equal `enumerated_parameter_count`.
    pub fn parameter_count(&self) -> u64 {
        let d = self.hidden_dim() as u64;
        let k = self.num_tails() as u64;
        let l_h = self.clusters.head_size() as u64;
        let mut count = d * (l_h + k);
        for t in 0..self.num_tails() {
            let m_t = self.clusters.dim(t + 1) as u64;
            let l_t = self.clusters.cluster_size(t + 1) as u64;
            count += m_t * (d + l_t);
        }
        count
    }

    /// Stored scalar count, by walking every weight matrix.
    pub fn enumerated_parameter_count(&self) -> u64 {
        self.matrices().iter().map(|m| m.len() as u64).sum()
    }

    /// Analytic matmul FLOPs of one forward pass over a batch of `n_b` rows
    /// under the given access set: the head term plus one projection and one
    /// classifier term per accessed tail. Equals the instrumented counter
    /// delta of `forward` exactly.
    pub fn flops_per_batch(&self, access: &AccessSet, n_b: usize) -> u64 {
        let d = self.hidden_dim() as u64;
        let head_cols = self.head_weights.cols() as u64;
        let mut flops = 2 * n_b as u64 * d * head_cols;
        for &t in access.batch_tails() {
            let m_t = self.clusters.dim(t as usize + 1) as u64;
            let l_t = self.clusters.cluster_size(t as usize + 1) as u64;
            flops += 2 * n_b as u64 * m_t * (d + l_t);
        }
        flops
    }

    pub fn access_set(&self, batch_labels: &[&[u32]]) -> AccessSet {
        build_access_set(batch_labels, &self.clusters)
    }

    /// Score a batch of hidden states against the head and every tail in the
    /// batch access set (whole-batch tail evaluation; masking happens in the
    /// loss).
    pub fn forward(&self, h: &Matrix<T>, access: &AccessSet) -> Result<ForwardPass<T>, LayerError> {
        if h.cols() != self.hidden_dim() {
            return Err(LayerError::HiddenDimMismatch {
                got: h.cols(),
                want: self.hidden_dim(),
            });
        }
        if h.rows() != access.num_samples() {
            return Err(LayerError::CacheMismatch {
                detail: format!(
                    "{} hidden rows vs {} samples",
                    h.rows(),
                    access.num_samples()
                ),
            });
        }
        if !h.is_finite() {
            return Err(LayerError::NonFiniteHiddenState);
        }
        let l_h = self.clusters.head_size();
        let k = self.num_tails();
        let n_b = h.rows();

        let head_logits = matmul(h, &self.head_weights)?;
        let mut head_log_probs = Matrix::zeros(n_b, l_h);
        let mut gate_log_probs = Matrix::zeros(n_b, k);
        for i in 0..n_b {
            for j in 0..l_h {
                head_log_probs.set(i, j, log_sigmoid(head_logits.get(i, j)));
            }
            for t in 0..k {
                gate_log_probs.set(i, t, log_sigmoid(head_logits.get(i, l_h + t)));
            }
        }

        let mut tail_u = Vec::with_capacity(access.batch_tails().len());
        let mut tail_z = Vec::with_capacity(access.batch_tails().len());
        let mut tail_log_probs = Vec::with_capacity(access.batch_tails().len());
        for &t in access.batch_tails() {
            let t = t as usize;
            let u = matmul(h, &self.tail_projections[t])?;
            let z = matmul(&u, &self.tail_classifiers[t])?;
            let mut lp = Matrix::zeros(n_b, z.cols());
            for i in 0..n_b {
                let gate_lp = gate_log_probs.get(i, t);
                for j in 0..z.cols() {
                    lp.set(i, j, gate_lp + log_sigmoid(z.get(i, j)));
                }
            }
            tail_u.push(u);
            tail_z.push(z);
            tail_log_probs.push(lp);
        }

        Ok(ForwardPass {
            head_log_probs,
            gate_log_probs,
            tail_log_probs,
            h: h.clone(),
            head_logits,
            tail_u,
            tail_z,
            batch_tails: access.batch_tails().to_vec(),
        })
    }

    fn check_pass(&self, fwd: &ForwardPass<T>, access: &AccessSet) -> Result<(), LayerError> {
        if fwd.batch_tails != access.batch_tails {
            return Err(LayerError::CacheMismatch {
                detail: format!(
                    "cached tails {:?} vs access tails {:?}",
                    fwd.batch_tails, access.batch_tails
                ),
            });
        }
        if fwd.num_rows() != access.num_samples() {
            return Err(LayerError::CacheMismatch {
                detail: format!(
                    "{} cached rows vs {} samples",
                    fwd.num_rows(),
                    access.num_samples()
                ),
            });
        }
        Ok(())
    }

    /// Mean negative log likelihood over all (sample, scored label) pairs:
    /// the summed BCE terms divided by the total number of scored labels.
    pub fn loss(&self, fwd: &ForwardPass<T>, access: &AccessSet) -> Result<T, LayerError> {
        self.check_pass(fwd, access)?;
        let n_b = access.num_samples();
        if n_b == 0 {
            return Err(LayerError::EmptyBatch);
        }
        let l_h = self.clusters.head_size();
        let mut sum = 0.0f64;
        let mut scratch = ScratchMask::new(&self.clusters);
        for i in 0..n_b {
            scratch.mark(access.sample_positives(i), 0);
            for j in 0..l_h {
                let lp = fwd.head_log_probs.get(i, j).widen();
                sum += bce_from_log_prob(lp, scratch.is_set(j)).map_err(LayerError::Numerics)?;
            }
            scratch.clear(access.sample_positives(i), 0);

            for &t in access.sample_tails(i) {
                let pos = fwd
                    .batch_tails
                    .binary_search(&t)
                    .expect("accessed tail present in batch union");
                let cluster = t as usize + 1;
                let l_t = self.clusters.cluster_size(cluster);
                scratch.mark(access.sample_positives(i), cluster);
                for j in 0..l_t {
                    let lp = fwd.tail_log_probs[pos].get(i, j).widen();
                    sum +=
                        bce_from_log_prob(lp, scratch.is_set(j)).map_err(LayerError::Numerics)?;
                }
                scratch.clear(access.sample_positives(i), cluster);
            }

            if self.gate_bce {
                for t in 0..self.num_tails() {
                    let accessed = access.sample_tails(i).contains(&(t as u32));
                    let lp = fwd.gate_log_probs.get(i, t).widen();
                    sum += bce_from_log_prob(lp, accessed).map_err(LayerError::Numerics)?;
                }
            }
        }
        Ok(T::from_f64(sum / access.total_terms() as f64))
    }

    /// Fill `grads` with dJ/dW for every weight matrix and return dJ/dh.
    /// Tails outside the batch access set receive exactly zero gradient.
    pub fn backward(
        &self,
        fwd: &ForwardPass<T>,
        access: &AccessSet,
        grads: &mut AplcGradients<T>,
    ) -> Result<Matrix<T>, LayerError> {
        self.check_pass(fwd, access)?;
        let n_b = access.num_samples();
        if n_b == 0 {
            return Err(LayerError::EmptyBatch);
        }
        grads.reset();
        let l_h = self.clusters.head_size();
        let k = self.num_tails();
        let inv_m = T::from_f64(1.0 / access.total_terms() as f64);
        let mut scratch = ScratchMask::new(&self.clusters);

        // d(loss)/d(head logits): (sigma(z) - y) / M for label columns;
        // gate columns are filled from the tail sweeps below.
        let mut dz_head = Matrix::zeros(n_b, l_h + k);
        for i in 0..n_b {
            scratch.mark(access.sample_positives(i), 0);
            for j in 0..l_h {
                let s = fwd.head_log_probs.get(i, j).exp();
                let y = if scratch.is_set(j) { T::one() } else { T::zero() };
                dz_head.set(i, j, (s - y) * inv_m);
            }
            scratch.clear(access.sample_positives(i), 0);
        }

        // Tail sweeps. For an accessed (sample, tail) with gate G = sigma(g),
        // label score s_j = sigma(z_j) and composite p_j = G s_j:
        //   e_j = (1 - y_j) p_j / (1 - p_j) - y_j
        //   d(loss)/dz_j = (1 - s_j) e_j / M
        //   d(loss)/dg   = (1 - G) / M * sum_j e_j
        // computed through log-probabilities so both factors stay finite at
        // saturated logits.
        let mut tail_du: Vec<(usize, Matrix<T>)> = Vec::with_capacity(fwd.batch_tails.len());
        for (pos, &t) in fwd.batch_tails.iter().enumerate() {
            let t = t as usize;
            let cluster = t + 1;
            let l_t = self.clusters.cluster_size(cluster);
            let z = &fwd.tail_z[pos];
            let lp = &fwd.tail_log_probs[pos];
            let mut dz = Matrix::zeros(n_b, l_t);
            for i in 0..n_b {
                if !access.sample_tails(i).contains(&(t as u32)) {
                    continue;
                }
                scratch.mark(access.sample_positives(i), cluster);
                let mut e_sum = T::zero();
                let row = dz.row_mut(i);
                for (j, slot) in row.iter_mut().enumerate() {
                    let log_p = lp.get(i, j);
                    let e = if scratch.is_set(j) {
                        -T::one()
                    } else {
                        // p / (1 - p); the clamp guards the fully saturated
                        // case where 1 - p underflows to zero.
                        let one_minus_p = (-log_p.exp_m1()).max(T::min_positive_value());
                        log_p.exp() / one_minus_p
                    };
                    e_sum += e;
                    let one_minus_s = log_sigmoid(-z.get(i, j)).exp();
                    *slot = one_minus_s * e * inv_m;
                }
                scratch.clear(access.sample_positives(i), cluster);
                let one_minus_g = log_sigmoid(-fwd.head_logits.get(i, l_h + t)).exp();
                dz_head.set(i, l_h + t, one_minus_g * e_sum * inv_m);
            }

            grads.tail_classifiers[t] = matmul_at_b(&fwd.tail_u[pos], &dz)?;
            let du = matmul_a_bt(&dz, &self.tail_classifiers[t])?;
            grads.tail_projections[t] = matmul_at_b(&fwd.h, &du)?;
            tail_du.push((t, du));
        }

        // Optional explicit gate supervision (target: did the sample access
        // the tail). Added on top of the product-rule gate gradient.
        if self.gate_bce {
            for i in 0..n_b {
                for t in 0..k {
                    let g = fwd.gate_log_probs.get(i, t).exp();
                    let a = if access.sample_tails(i).contains(&(t as u32)) {
                        T::one()
                    } else {
                        T::zero()
                    };
                    let cur = dz_head.get(i, l_h + t);
                    dz_head.set(i, l_h + t, cur + (g - a) * inv_m);
                }
            }
        }

        grads.head_weights = matmul_at_b(&fwd.h, &dz_head)?;
        let mut dh = matmul_a_bt(&dz_head, &self.head_weights)?;
        for (t, du) in &tail_du {
            dh.add_assign(&matmul_a_bt(du, &self.tail_projections[*t])?)?;
        }
        Ok(dh)
    }

    /// Per-sample top-k (label, probability) pairs, probability descending,
    /// ties broken toward the smaller label id. The pruned mode can return
    /// fewer than k entries if its candidate pool is smaller than k.
    pub fn predict_topk(
        &self,
        h: &Matrix<T>,
        k: usize,
        mode: InferenceMode,
    ) -> Result<Vec<Vec<(u32, T)>>, LayerError> {
        let labels = self.num_labels();
        if k == 0 || k > labels {
            return Err(LayerError::KTooLarge { k, labels });
        }
        if h.cols() != self.hidden_dim() {
            return Err(LayerError::HiddenDimMismatch {
                got: h.cols(),
                want: self.hidden_dim(),
            });
        }
        if !h.is_finite() {
            return Err(LayerError::NonFiniteHiddenState);
        }
        let n_b = h.rows();
        let l_h = self.clusters.head_size();
        let num_tails = self.num_tails();
        let head_logits = matmul(h, &self.head_weights)?;

        let evaluate_all = match mode {
            InferenceMode::Exact => true,
            InferenceMode::Pruned(m) => m >= num_tails,
        };

        if evaluate_all {
            // Batch path: score every tail once for the whole batch.
            let mut tail_probs: Vec<Matrix<T>> = Vec::with_capacity(num_tails);
            for t in 0..num_tails {
                let u = matmul(h, &self.tail_projections[t])?;
                let z = matmul(&u, &self.tail_classifiers[t])?;
                let mut probs = Matrix::zeros(n_b, z.cols());
                for i in 0..n_b {
                    let gate_lp = log_sigmoid(head_logits.get(i, l_h + t));
                    for j in 0..z.cols() {
                        probs.set(i, j, (gate_lp + log_sigmoid(z.get(i, j))).exp());
                    }
                }
                tail_probs.push(probs);
            }
            let mut out = Vec::with_capacity(n_b);
            for i in 0..n_b {
                let mut scored: Vec<(u32, T)> = Vec::with_capacity(labels);
                for (j, &id) in self.clusters.head().iter().enumerate() {
                    scored.push((id, log_sigmoid(head_logits.get(i, j)).exp()));
                }
                for t in 0..num_tails {
                    let probs = &tail_probs[t];
                    for (j, &id) in self.clusters.cluster(t + 1).iter().enumerate() {
                        scored.push((id, probs.get(i, j)));
                    }
                }
                out.push(take_topk(scored, k));
            }
            return Ok(out);
        }

        // Pruned path: per sample, the head plus the m tails with the
        // highest gate probability (gate ties toward the smaller index).
        let InferenceMode::Pruned(m) = mode else {
            unreachable!("exact mode handled above")
        };
        let mut out = Vec::with_capacity(n_b);
        for i in 0..n_b {
            let mut gates: Vec<(usize, T)> = (0..num_tails)
                .map(|t| (t, log_sigmoid(head_logits.get(i, l_h + t))))
                .collect();
            gates.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            gates.truncate(m);
            let row = Matrix::from_vec(1, h.cols(), h.row(i).to_vec());
            let mut scored: Vec<(u32, T)> = Vec::new();
            for (j, &id) in self.clusters.head().iter().enumerate() {
                scored.push((id, log_sigmoid(head_logits.get(i, j)).exp()));
            }
            for &(t, gate_lp) in &gates {
                let u = matmul(&row, &self.tail_projections[t])?;
                let z = matmul(&u, &self.tail_classifiers[t])?;
                for (j, &id) in self.clusters.cluster(t + 1).iter().enumerate() {
                    scored.push((id, (gate_lp + log_sigmoid(z.get(0, j))).exp()));
                }
            }
            out.push(take_topk(scored, k));
        }
        Ok(out)
    }
}

/// Highest-probability `k` entries, probability descending, label id
/// ascending on ties. Returns all entries when fewer than k were scored.
fn take_topk<T: Scalar>(mut scored: Vec<(u32, T)>, k: usize) -> Vec<(u32, T)> {
    let by_rank = |a: &(u32, T), b: &(u32, T)| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    };
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, by_rank);
        scored.truncate(k);
    }
    scored.sort_by(by_rank);
    scored
}

/// Reusable positive-label mask sized for the largest cluster.
struct ScratchMask {
    flags: Vec<bool>,
}

impl ScratchMask {
    fn new(clusters: &LabelClusters) -> Self {
        let max = (0..clusters.num_clusters())
            .map(|c| clusters.cluster_size(c))
            .max()
            .unwrap_or(0);
        ScratchMask {
            flags: vec![false; max],
        }
    }

    fn mark(&mut self, positives: &[(u32, u32)], cluster: usize) {
        for &(c, local) in positives {
            if c as usize == cluster {
                self.flags[local as usize] = true;
            }
        }
    }

    fn clear(&mut self, positives: &[(u32, u32)], cluster: usize) {
        for &(c, local) in positives {
            if c as usize == cluster {
                self.flags[local as usize] = false;
            }
        }
    }

    fn is_set(&self, local: usize) -> bool {
        self.flags[local]
    }
}
