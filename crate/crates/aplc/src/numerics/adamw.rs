//! AdamW with decoupled weight decay and an optional row-sparse update path.
//!
//! The optimizer keeps first/second moment slots per registered parameter
//! group and shares one global step counter across groups, so every group
//! sees the same bias correction no matter how many groups exist. Weight
//! decay is decoupled: parameters shrink by `lr * wd * theta` before the
//! moment-based step is applied.

use super::{Matrix, NumericsError, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Handle returned by [`AdamW::register`]; identifies a parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupId(usize);

#[derive(Debug, Clone)]
struct GroupState<T> {
    name: String,
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    config: AdamWConfig,
    step: u64,
    groups: Vec<GroupState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            groups: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Allocate moment slots for a parameter group of `len` scalars.
    pub fn register(&mut self, name: &str, len: usize) -> GroupId {
        self.groups.push(GroupState {
            name: name.to_string(),
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        });
        GroupId(self.groups.len() - 1)
    }

    /// Advance the shared step counter. Call once per optimizer step, before
    /// updating any group; returns the new (1-based) step.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Per-step scalar factors: (beta1, beta2, 1/bias1, 1/bias2).
    fn factors(&self) -> (f64, f64, f64, f64) {
        let t = self.step.max(1) as i32;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        (b1, b2, 1.0 / (1.0 - b1.powi(t)), 1.0 / (1.0 - b2.powi(t)))
    }

    fn update_slice(
        config: &AdamWConfig,
        factors: (f64, f64, f64, f64),
        name: &str,
        lr: f64,
        params: &mut [T],
        grads: &[T],
        m: &mut [T],
        v: &mut [T],
    ) -> Result<(), NumericsError> {
        let (b1, b2, inv_bc1, inv_bc2) = factors;
        let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
        let (one_m_b1, one_m_b2) = (T::one() - b1, T::one() - b2);
        let (inv_bc1, inv_bc2) = (T::from_f64(inv_bc1), T::from_f64(inv_bc2));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(config.epsilon);
        let decay = T::from_f64(lr * config.weight_decay);
        for i in 0..params.len() {
            let g = grads[i];
            if g.is_nan() {
                return Err(NumericsError::NanGradient {
                    group: name.to_string(),
                });
            }
            let mut p = params[i];
            p -= decay * p;
            let mi = b1 * m[i] + one_m_b1 * g;
            let vi = b2 * v[i] + one_m_b2 * g * g;
            m[i] = mi;
            v[i] = vi;
            let m_hat = mi * inv_bc1;
            let v_hat = vi * inv_bc2;
            params[i] = p - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    /// Full dense update of one group.
    pub fn update(
        &mut self,
        group: GroupId,
        params: &mut Matrix<T>,
        grads: &Matrix<T>,
        lr: f64,
    ) -> Result<(), NumericsError> {
        let factors = self.factors();
        let state = &mut self.groups[group.0];
        assert_eq!(
            params.len(),
            state.m.len(),
            "group {} parameter length changed",
            state.name
        );
        assert_eq!(params.rows(), grads.rows(), "grad shape mismatch");
        assert_eq!(params.cols(), grads.cols(), "grad shape mismatch");
        Self::update_slice(
            &self.config,
            factors,
            &state.name,
            lr,
            params.as_mut_slice(),
            grads.as_slice(),
            &mut state.m,
            &mut state.v,
        )
    }

    /// Update only the listed rows of a matrix-shaped group; `grads` holds one
    /// gradient row per entry of `rows`, in the same order.
    ///
    /// Rows outside the list keep both their parameters and their moment
    /// slots untouched, so the cost of a step scales with the rows a batch
    /// actually activated rather than with the full vocabulary.
    pub fn update_rows(
        &mut self,
        group: GroupId,
        params: &mut Matrix<T>,
        rows: &[usize],
        grads: &Matrix<T>,
        lr: f64,
    ) -> Result<(), NumericsError> {
        let factors = self.factors();
        let state = &mut self.groups[group.0];
        assert_eq!(
            params.len(),
            state.m.len(),
            "group {} parameter length changed",
            state.name
        );
        assert_eq!(rows.len(), grads.rows(), "one gradient row per index");
        assert_eq!(params.cols(), grads.cols(), "grad width mismatch");
        let cols = params.cols();
        for (slot, &r) in rows.iter().enumerate() {
            let span = r * cols..(r + 1) * cols;
            Self::update_slice(
                &self.config,
                factors,
                &state.name,
                lr,
                &mut params.as_mut_slice()[span.clone()],
                grads.row(slot),
                &mut state.m[span.clone()],
                &mut state.v[span],
            )?;
        }
        Ok(())
    }

    /// Moment slots of a group, for checkpointing.
    pub fn state(&self, group: GroupId) -> (&[T], &[T]) {
        let s = &self.groups[group.0];
        (&s.m, &s.v)
    }

    /// Restore a group's moment slots from a checkpoint.
    pub fn load_state(&mut self, group: GroupId, m: Vec<T>, v: Vec<T>) {
        let s = &mut self.groups[group.0];
        assert_eq!(m.len(), s.m.len(), "moment length mismatch on restore");
        assert_eq!(v.len(), s.v.len(), "moment length mismatch on restore");
        s.m = m;
        s.v = v;
    }

    /// Restore the shared step counter from a checkpoint.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }
}
