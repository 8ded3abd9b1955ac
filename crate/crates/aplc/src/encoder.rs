//! Sparse-feature encoder producing the hidden state consumed by the
//! clustered output layer.
//!
//! Two trainable maps: a sparse-input linear layer (D x d_e) squashed by
//! tanh, then a fully connected hidden layer (d_e x d_h) with bias:
//!
//! ```text
//! h = tanh(X W_in) W_h + b
//! ```
//!
//! The input map only receives gradient on the feature rows that actually
//! occur in a batch, which pairs with the optimizer's row-sparse update path
//! so untouched vocabulary rows cost nothing per step.

use thiserror::Error;

use crate::corpus::SparseVector;
use crate::layer::AplcLayer;
use crate::numerics::{
    add_flops, matmul, matmul_a_bt, matmul_at_b, sparse_dense_matmul, Matrix, NumericsError,
    Scalar,
};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("gradient does not match the forward cache ({detail})")]
    CacheMismatch { detail: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone)]
pub struct EncoderStack<T> {
    /// D x d_e sparse-input map; no bias so sparse rows stay independent.
    input_weights: Matrix<T>,
    /// d_e x d_h fully connected hidden layer.
    hidden_weights: Matrix<T>,
    /// 1 x d_h bias of the hidden layer.
    bias: Matrix<T>,
}

/// Forward intermediates retained for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    batch: Vec<SparseVector>,
    /// N_b x d_e: tanh(X W_in).
    activations: Matrix<T>,
}

/// Chain-rule gradients; the input map's are row-sparse.
#[derive(Debug, Clone)]
pub struct EncoderGradients<T> {
    /// Sorted unique feature rows that occurred in the batch.
    pub input_rows: Vec<usize>,
    /// One row per entry of `input_rows` (len x d_e).
    pub input: Matrix<T>,
    /// d_e x d_h.
    pub hidden: Matrix<T>,
    /// 1 x d_h.
    pub bias: Matrix<T>,
}

impl<T: Scalar> EncoderStack<T> {
    /// Symmetric-uniform initialized weights, zero bias, deterministic under
    /// the seed.
    pub fn seeded(num_features: usize, embed_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        assert!(num_features >= 1 && embed_dim >= 1 && hidden_dim >= 1);
        let mut rng = SplitMix64::new(seed);
        EncoderStack {
            input_weights: Matrix::glorot_uniform(num_features, embed_dim, &mut rng),
            hidden_weights: Matrix::glorot_uniform(embed_dim, hidden_dim, &mut rng),
            bias: Matrix::zeros(1, hidden_dim),
        }
    }

    pub fn zeros(num_features: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        assert!(num_features >= 1 && embed_dim >= 1 && hidden_dim >= 1);
        EncoderStack {
            input_weights: Matrix::zeros(num_features, embed_dim),
            hidden_weights: Matrix::zeros(embed_dim, hidden_dim),
            bias: Matrix::zeros(1, hidden_dim),
        }
    }

    pub fn from_parts(
        input_weights: Matrix<T>,
        hidden_weights: Matrix<T>,
        bias: Matrix<T>,
    ) -> Self {
        assert_eq!(input_weights.cols(), hidden_weights.rows());
        assert_eq!(bias.rows(), 1);
        assert_eq!(bias.cols(), hidden_weights.cols());
        EncoderStack {
            input_weights,
            hidden_weights,
            bias,
        }
    }

    pub fn num_features(&self) -> usize {
        self.input_weights.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.input_weights.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_weights.cols()
    }

    pub fn input_weights(&self) -> &Matrix<T> {
        &self.input_weights
    }

    pub fn input_weights_mut(&mut self) -> &mut Matrix<T> {
        &mut self.input_weights
    }

    pub fn hidden_weights(&self) -> &Matrix<T> {
        &self.hidden_weights
    }

    pub fn hidden_weights_mut(&mut self) -> &mut Matrix<T> {
        &mut self.hidden_weights
    }

    pub fn bias(&self) -> &Matrix<T> {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut Matrix<T> {
        &mut self.bias
    }

    pub fn parameter_count(&self) -> u64 {
        (self.input_weights.len() + self.hidden_weights.len() + self.bias.len()) as u64
    }

    pub fn cast<U: Scalar>(&self) -> EncoderStack<U> {
        EncoderStack {
            input_weights: self.input_weights.cast(),
            hidden_weights: self.hidden_weights.cast(),
            bias: self.bias.cast(),
        }
    }

    /// h = tanh(X W_in) W_h + b for a batch of sparse rows.
    pub fn encode(
        &self,
        batch: &[SparseVector],
    ) -> Result<(Matrix<T>, EncoderCache<T>), EncoderError> {
        let mut pre = sparse_dense_matmul(batch, &self.input_weights)?;
        pre.map_inplace(|v| v.tanh());
        let activations = pre;
        let mut h = matmul(&activations, &self.hidden_weights)?;
        for i in 0..h.rows() {
            let row = h.row_mut(i);
            for (j, slot) in row.iter_mut().enumerate() {
                *slot += self.bias.get(0, j);
            }
        }
        let cache = EncoderCache {
            batch: batch.to_vec(),
            activations,
        };
        Ok((h, cache))
    }

    /// Chain-rule gradients of every encoder parameter given dJ/dh.
    pub fn backward(
        &self,
        cache: &EncoderCache<T>,
        grad_h: &Matrix<T>,
    ) -> Result<EncoderGradients<T>, EncoderError> {
        if grad_h.rows() != cache.activations.rows() || grad_h.cols() != self.hidden_dim() {
            return Err(EncoderError::CacheMismatch {
                detail: format!(
                    "gradient is {}x{}, cache expects {}x{}",
                    grad_h.rows(),
                    grad_h.cols(),
                    cache.activations.rows(),
                    self.hidden_dim()
                ),
            });
        }

        // Bias: column sums of dJ/dh.
        let mut bias = Matrix::zeros(1, self.hidden_dim());
        for j in 0..self.hidden_dim() {
            let mut sum = T::zero();
            for i in 0..grad_h.rows() {
                sum += grad_h.get(i, j);
            }
            bias.set(0, j, sum);
        }

        // Hidden layer: dW_h = A^T dH; dA = dH W_h^T.
        let hidden = matmul_at_b(&cache.activations, grad_h)?;
        let mut d_act = matmul_a_bt(grad_h, &self.hidden_weights)?;

        // Through tanh: dZ = dA * (1 - A^2).
        for i in 0..d_act.rows() {
            let a_row = cache.activations.row(i);
            for (slot, &a) in d_act.row_mut(i).iter_mut().zip(a_row) {
                *slot *= T::one() - a * a;
            }
        }

        // Input map: dW_in[f,:] = sum over samples of x_if dZ[i,:], only for
        // feature rows present in the batch.
        let mut input_rows: Vec<usize> = cache
            .batch
            .iter()
            .flat_map(|s| s.indices().iter().map(|&f| f as usize))
            .collect();
        input_rows.sort_unstable();
        input_rows.dedup();
        let d_e = self.embed_dim();
        let mut input = Matrix::zeros(input_rows.len(), d_e);
        let mut nnz = 0u64;
        for (i, sample) in cache.batch.iter().enumerate() {
            let dz_row = d_act.row(i);
            for (&f, &v) in sample.indices().iter().zip(sample.values()) {
                let pos = input_rows
                    .binary_search(&(f as usize))
                    .expect("feature present in row union");
                let v = T::from_f64(v as f64);
                for (slot, &dz) in input.row_mut(pos).iter_mut().zip(dz_row) {
                    *slot += v * dz;
                }
                nnz += 1;
            }
        }
        add_flops(2 * nnz * d_e as u64);

        Ok(EncoderGradients {
            input_rows,
            input,
            hidden,
            bias,
        })
    }
}

/// Sizes of the three learning-rate groups: the sparse input map, the fully
/// connected hidden layer (weights plus bias), and the whole output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterGroups {
    pub encoder: u64,
    pub hidden: u64,
    pub aplc: u64,
}

impl ParameterGroups {
    pub fn total(&self) -> u64 {
        self.encoder + self.hidden + self.aplc
    }
}

pub fn parameter_groups<T: Scalar>(
    stack: &EncoderStack<T>,
    layer: &AplcLayer<T>,
) -> ParameterGroups {
    ParameterGroups {
        encoder: stack.input_weights.len() as u64,
        hidden: (stack.hidden_weights.len() + stack.bias.len()) as u64,
        aplc: layer.parameter_count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, max_relative_error};
    use crate::partition::LabelClusters;

    fn sv(pairs: &[(u32, f32)]) -> SparseVector {
        SparseVector::from_pairs(pairs.to_vec()).unwrap()
    }

    fn rand_dense(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = SplitMix64::new(seed);
        let data = (0..rows * cols).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        Matrix::from_vec(rows, cols, data)
    }

    fn rand_batch(n: usize, num_features: usize, seed: u64) -> Vec<SparseVector> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|_| {
                let nnz = 1 + rng.next_below(5) as usize;
                let mut pairs: Vec<(u32, f32)> = Vec::new();
                while pairs.len() < nnz {
                    let f = rng.next_below(num_features as u64) as u32;
                    if pairs.iter().all(|&(g, _)| g != f) {
                        pairs.push((f, (rng.next_f64() * 2.0 - 1.0) as f32));
                    }
                }
                sv(&pairs)
            })
            .collect()
    }

    #[test]
    fn zero_input_gives_bias_row() {
        let mut stack = EncoderStack::<f64>::seeded(5, 3, 4, 1);
        for (j, v) in [0.3, -0.7, 0.1, 2.0].into_iter().enumerate() {
            stack.bias_mut().set(0, j, v);
        }
        let batch = vec![SparseVector::empty(), SparseVector::empty()];
        let (h, _) = stack.encode(&batch).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(h.get(i, j), stack.bias().get(0, j));
            }
        }
    }

    #[test]
    fn one_hot_input_with_identity_hidden_selects_squashed_row() {
        let mut stack = EncoderStack::<f64>::seeded(6, 3, 3, 2);
        *stack.hidden_weights_mut() = Matrix::identity(3);
        stack.bias_mut().fill(0.0);
        let batch = vec![sv(&[(4, 1.0)])];
        let (h, _) = stack.encode(&batch).unwrap();
        for j in 0..3 {
            assert_eq!(h.get(0, j), stack.input_weights().get(4, j).tanh());
        }
    }

    #[test]
    fn random_batch_matches_densified_oracle() {
        let stack = EncoderStack::<f64>::seeded(9, 4, 5, 3);
        let batch = rand_batch(6, 9, 4);
        let (h, _) = stack.encode(&batch).unwrap();

        // Oracle: densify X and run the whole chain with plain loops.
        for (i, sample) in batch.iter().enumerate() {
            let mut x = vec![0.0f64; 9];
            for (&f, &v) in sample.indices().iter().zip(sample.values()) {
                x[f as usize] = v as f64;
            }
            let mut a = vec![0.0f64; 4];
            for (e, item) in a.iter_mut().enumerate() {
                let mut z = 0.0;
                for (f, &xv) in x.iter().enumerate() {
                    z += xv * stack.input_weights().get(f, e);
                }
                *item = z.tanh();
            }
            for j in 0..5 {
                let mut v = stack.bias().get(0, j);
                for (e, &ae) in a.iter().enumerate() {
                    v += ae * stack.hidden_weights().get(e, j);
                }
                assert!((h.get(i, j) - v).abs() < 1e-12, "sample {i} column {j}");
            }
        }
    }

    #[test]
    fn zero_gradient_in_gives_zero_gradients_out() {
        let stack = EncoderStack::<f64>::seeded(7, 3, 4, 5);
        let batch = rand_batch(3, 7, 6);
        let (_, cache) = stack.encode(&batch).unwrap();
        let grads = stack.backward(&cache, &Matrix::zeros(3, 4)).unwrap();
        assert!(grads.input.as_slice().iter().all(|&g| g == 0.0));
        assert!(grads.hidden.as_slice().iter().all(|&g| g == 0.0));
        assert!(grads.bias.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bias_gradient_is_column_sum_of_grad_h() {
        let stack = EncoderStack::<f64>::seeded(7, 3, 4, 7);
        let batch = rand_batch(5, 7, 8);
        let (_, cache) = stack.encode(&batch).unwrap();
        let grad_h = rand_dense(5, 4, 9);
        let grads = stack.backward(&cache, &grad_h).unwrap();
        for j in 0..4 {
            let mut sum = 0.0;
            for i in 0..5 {
                sum += grad_h.get(i, j);
            }
            assert_eq!(grads.bias.get(0, j), sum);
        }
    }

    #[test]
    fn input_gradient_rows_are_batch_feature_union() {
        let stack = EncoderStack::<f64>::seeded(30, 3, 2, 10);
        let batch = vec![sv(&[(17, 0.5), (3, 1.0)]), sv(&[(5, -0.25), (17, 2.0)])];
        let (_, cache) = stack.encode(&batch).unwrap();
        let grads = stack.backward(&cache, &rand_dense(2, 2, 11)).unwrap();
        assert_eq!(grads.input_rows, vec![3, 5, 17]);
        assert_eq!(grads.input.rows(), 3);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Scalar objective: a fixed random linear functional of h, so the
        // functional's coefficient matrix doubles as grad_h.
        let stack = EncoderStack::<f64>::seeded(8, 4, 3, 12);
        let batch = rand_batch(4, 8, 13);
        let c = rand_dense(4, 3, 14);

        let objective = |w_in: &Matrix<f64>, w_h: &Matrix<f64>, b: &Matrix<f64>| {
            let probe = EncoderStack::from_parts(w_in.clone(), w_h.clone(), b.clone());
            let (h, _) = probe.encode(&batch).unwrap();
            let mut sum = 0.0;
            for i in 0..h.rows() {
                for j in 0..h.cols() {
                    sum += c.get(i, j) * h.get(i, j);
                }
            }
            sum
        };

        let (_, cache) = stack.encode(&batch).unwrap();
        let grads = stack.backward(&cache, &c).unwrap();

        // Flatten (W_in, W_h, b) and compare against central differences.
        let mut flat = stack.input_weights().as_slice().to_vec();
        flat.extend_from_slice(stack.hidden_weights().as_slice());
        flat.extend_from_slice(stack.bias().as_slice());
        let n_in = stack.input_weights().len();
        let n_h = stack.hidden_weights().len();
        let f = |p: &[f64]| {
            let w_in = Matrix::from_vec(8, 4, p[..n_in].to_vec());
            let w_h = Matrix::from_vec(4, 3, p[n_in..n_in + n_h].to_vec());
            let b = Matrix::from_vec(1, 3, p[n_in + n_h..].to_vec());
            objective(&w_in, &w_h, &b)
        };
        let numeric = finite_difference_gradient(f, &flat, 1e-4);

        // Scatter the row-sparse input gradient back to dense for comparison.
        let mut analytic = vec![0.0; n_in];
        for (pos, &row) in grads.input_rows.iter().enumerate() {
            for e in 0..4 {
                analytic[row * 4 + e] = grads.input.get(pos, e);
            }
        }
        analytic.extend_from_slice(grads.hidden.as_slice());
        analytic.extend_from_slice(grads.bias.as_slice());
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "encoder gradient mismatch: {err}");
    }

    #[test]
    fn mismatched_gradient_shape_is_rejected() {
        let stack = EncoderStack::<f64>::seeded(7, 3, 4, 20);
        let batch = rand_batch(3, 7, 21);
        let (_, cache) = stack.encode(&batch).unwrap();
        assert!(matches!(
            stack.backward(&cache, &Matrix::zeros(2, 4)),
            Err(EncoderError::CacheMismatch { .. })
        ));
        assert!(matches!(
            stack.backward(&cache, &Matrix::zeros(3, 5)),
            Err(EncoderError::CacheMismatch { .. })
        ));
    }

    #[test]
    fn out_of_range_feature_is_rejected() {
        let stack = EncoderStack::<f64>::seeded(4, 3, 2, 22);
        let batch = vec![sv(&[(9, 1.0)])];
        assert!(matches!(
            stack.encode(&batch),
            Err(EncoderError::Numerics(
                NumericsError::SparseIndexOutOfRange { .. }
            ))
        ));
    }

    #[test]
    fn groups_partition_all_parameters() {
        let stack = EncoderStack::<f64>::seeded(50, 8, 4, 23);
        let cl = LabelClusters::from_layout(
            vec![vec![0, 1, 2], vec![3, 4], vec![5, 6, 7]],
            vec![4, 2, 1],
        )
        .unwrap();
        let layer = AplcLayer::<f64>::zeros(cl);
        let groups = parameter_groups(&stack, &layer);
        assert_eq!(groups.encoder, 50 * 8);
        assert_eq!(groups.hidden, 8 * 4 + 4);
        assert_eq!(groups.aplc, layer.parameter_count());
        assert_eq!(
            groups.total(),
            stack.parameter_count() + layer.parameter_count()
        );
    }
}
