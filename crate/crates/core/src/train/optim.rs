//! Adagrad for embedding rows, RMSProp for dense tensors, and per-group
//! global-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::params::tensors;
use crate::stack::{Grads, OneTrans};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub dense_lr: f64,
    /// Squared-gradient decay.
    pub dense_decay: f64,
    pub dense_eps: f64,
    /// Initial squared-gradient average.
    pub dense_ms_init: f64,
    pub sparse_lr: f64,
    pub sparse_acc_init: f64,
    pub sparse_eps: f64,
    pub dense_clip: f64,
    pub sparse_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            dense_lr: 0.005,
            dense_decay: 0.99999,
            dense_eps: 1e-8,
            dense_ms_init: 1.0,
            sparse_lr: 0.1,
            sparse_acc_init: 0.1,
            sparse_eps: 1e-8,
            dense_clip: 90.0,
            sparse_clip: 120.0,
        }
    }
}

impl OptimizerConfig {
    /// Faster-adapting constants for runs of a few thousand steps: the
    /// squared-gradient average starts at zero and tracks recent batches.
    pub fn desk_scale() -> Self {
        Self {
            dense_lr: 5e-4,
            dense_decay: 0.99,
            dense_ms_init: 0.0,
            sparse_lr: 0.02,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.dense_lr,
            self.dense_decay,
            self.dense_eps,
            self.dense_ms_init,
            self.sparse_lr,
            self.sparse_acc_init,
            self.sparse_eps,
            self.dense_clip,
            self.sparse_clip,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("optimizer constants must be finite and non-negative"));
        }
        if self.dense_decay > 1.0 {
            return Err(Error::config("optimizer.dense_decay must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `acc += g²; p −= lr·g / (√acc + eps)`.
pub fn adagrad_update<T: Real>(param: &mut [T], grad: &[T], acc: &mut [T], lr: T, eps: T) {
    for ((p, &g), a) in param.iter_mut().zip(grad).zip(acc.iter_mut()) {
        *a += g * g;
        *p -= lr * g / (a.sqrt() + eps);
    }
}

/// `ms = decay·ms + (1 − decay)·g²; p −= lr·g / (√ms + eps)`.
pub fn rmsprop_update<T: Real>(param: &mut [T], grad: &[T], ms: &mut [T], lr: T, decay: T, eps: T) {
    let keep = T::one() - decay;
    for ((p, &g), m) in param.iter_mut().zip(grad).zip(ms.iter_mut()) {
        *m = decay * *m + keep * g * g;
        *p -= lr * g / (m.sqrt() + eps);
    }
}

/// Global-L2 clipping per group. Returns the pre-clip `(dense, sparse)` norms.
pub fn clip_grads<T: Real>(grads: &mut Grads<T>, dense_max: T, sparse_max: T) -> (T, T) {
    let dense = crate::params::sum_sq(&grads.dense).sqrt();
    let sparse = grads.sparse.sum_sq().sqrt();
    if dense > dense_max {
        crate::params::scale(&mut grads.dense, dense_max / dense);
    }
    if sparse > sparse_max {
        grads.sparse.scale(sparse_max / sparse);
    }
    (dense, sparse)
}

/// Optimizer slots: dense squared-gradient averages in visit order and lazily
/// created Adagrad accumulators for touched embedding rows.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Real = f32> {
    pub config: OptimizerConfig,
    pub dense_ms: Vec<Vec<T>>,
    pub sparse_acc: Vec<BTreeMap<usize, Vec<T>>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(model: &OneTrans<T>, config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        let init = T::from_f64_lossy(config.dense_ms_init);
        let dense_ms = tensors(&model.dense).iter().map(|m| vec![init; m.len()]).collect();
        Ok(Self {
            config,
            dense_ms,
            sparse_acc: vec![BTreeMap::new(); model.embeddings.len()],
            step: 0,
        })
    }

    /// Applies one update: RMSProp on dense tensors, Adagrad on the embedding
    /// rows present in `grads.sparse`.
    pub fn apply(&mut self, model: &mut OneTrans<T>, grads: &Grads<T>) {
        let c = &self.config;
        let (lr, decay, eps) = (T::from_f64_lossy(c.dense_lr), T::from_f64_lossy(c.dense_decay), T::from_f64_lossy(c.dense_eps));
        let mut i = 0;
        let ms = &mut self.dense_ms;
        crate::params::zip_mut(&mut model.dense, &grads.dense, |_, p, g| {
            rmsprop_update(p.data_mut(), g.data(), &mut ms[i], lr, decay, eps);
            i += 1;
        });
        let (slr, init, seps) = (T::from_f64_lossy(c.sparse_lr), T::from_f64_lossy(c.sparse_acc_init), T::from_f64_lossy(c.sparse_eps));
        for (t, rows) in grads.sparse.tables.iter().enumerate() {
            let table = model.embeddings.table_mut(t);
            let dim = table.dim();
            for (&row, g) in rows {
                let acc = self.sparse_acc[t].entry(row).or_insert_with(|| vec![init; dim]);
                let p = &mut table.rows.row_mut(row)[..];
                adagrad_update(p, g, acc, slr, seps);
            }
        }
        self.step += 1;
        model.bump_revision();
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::features::{generate_synthetic, SynthConfig};

    #[test]
    fn adagrad_zero_grad_is_a_no_op() {
        let (mut p, mut a) = (vec![0.5f64], vec![0.1]);
        adagrad_update(&mut p, &[0.0], &mut a, 0.1, 1e-8);
        assert_eq!((p[0], a[0]), (0.5, 0.1));
    }

    #[test]
    fn adagrad_scalar_step() {
        let (mut p, mut a) = (vec![0.0f64], vec![0.1]);
        adagrad_update(&mut p, &[1.0], &mut a, 0.1, 1e-8);
        let want = -0.1 / (1.1f64.sqrt() + 1e-8);
        assert!((p[0] - want).abs() < 1e-15);
        assert!((a[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn adagrad_steps_shrink() {
        let (mut p, mut a) = (vec![0.0f64], vec![0.1]);
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let before = p[0];
            adagrad_update(&mut p, &[1.0], &mut a, 0.1, 1e-8);
            let step = (before - p[0]).abs();
            assert!(step < last);
            last = step;
        }
    }

    #[test]
    fn rmsprop_zero_grad_decays_only() {
        let (mut p, mut ms) = (vec![0.5f64], vec![2.0]);
        rmsprop_update(&mut p, &[0.0], &mut ms, 0.005, 0.9, 1e-8);
        assert_eq!(p[0], 0.5);
        assert!((ms[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_matches_scalar_oracle() {
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
        let (mut p, mut ms) = (vec![1.0f64], vec![0.0]);
        let (mut op, mut oms) = (1.0f64, 0.0f64);
        for g in grads {
            rmsprop_update(&mut p, &[g], &mut ms, 0.005, 0.99999, 1e-8);
            oms = 0.99999 * oms + (1.0 - 0.99999) * g * g;
            op -= 0.005 * g / (oms.sqrt() + 1e-8);
        }
        assert!((p[0] - op).abs() <= 1e-10);
    }

    #[test]
    fn rmsprop_without_memory_is_a_sign_step() {
        for g in [3.0f64, -0.25] {
            let (mut p, mut ms) = (vec![0.0], vec![0.0]);
            rmsprop_update(&mut p, &[g], &mut ms, 0.01, 0.0, 1e-8);
            assert!((p[0] + 0.01 * g.signum()).abs() < 1e-8);
        }
    }

    fn grads_with_norm(norm: f64) -> Grads<f64> {
        let model = OneTrans::<f64>::new(ModelConfig::micro(), 1).unwrap();
        let mut g = model.zero_grads();
        g.dense.heads[0].w1.data_mut()[0] = norm * 0.6;
        g.dense.heads[0].w1.data_mut()[1] = norm * 0.8;
        g.sparse.add(0, 1, &[norm, 0.0]);
        g
    }

    #[test]
    fn clipping_thresholds() {
        let mut g = grads_with_norm(45.0);
        clip_grads(&mut g, 90.0, 120.0);
        assert!((crate::params::sum_sq(&g.dense).sqrt() - 45.0).abs() < 1e-9);

        let mut g = grads_with_norm(180.0);
        let (d, s) = clip_grads(&mut g, 90.0, 120.0);
        assert!((d - 180.0).abs() < 1e-9 && (s - 180.0).abs() < 1e-9);
        assert!((crate::params::sum_sq(&g.dense).sqrt() - 90.0).abs() <= 1e-6);
        assert!((g.sparse.sum_sq().sqrt() - 120.0).abs() <= 1e-6);

        let mut g = grads_with_norm(0.0);
        clip_grads(&mut g, 90.0, 120.0);
        assert_eq!(crate::params::sum_sq(&g.dense), 0.0);
    }

    #[test]
    fn updates_route_embeddings_to_adagrad_only() {
        let mut model = OneTrans::<f64>::new(ModelConfig::micro(), 2).unwrap();
        let before = model.clone();
        let mut state = OptimizerState::new(&model, OptimizerConfig::default()).unwrap();
        let r = generate_synthetic(&SynthConfig::small(), 3).unwrap().next().unwrap();
        let mut grads = model.zero_grads();
        let (logits, cache) = model.forward_train(&r, &r.candidates[0]).unwrap();
        let (_, dl) = crate::stack::loss(&logits, &model.config.tasks, 1, 1);
        model.backward(&cache, &dl, &mut grads).unwrap();
        state.apply(&mut model, &grads);
        assert_eq!(model.revision(), 1);
        for (t, (a, b)) in model.embeddings.tables().iter().zip(before.embeddings.tables()).enumerate() {
            for row in 0..a.rows.rows() {
                let touched = grads.sparse.tables[t].contains_key(&row);
                let changed = a.rows.row(row) != b.rows.row(row);
                assert!(!changed || touched);
                assert_eq!(state.sparse_acc[t].contains_key(&row), touched);
            }
        }
        let moved = crate::params::flatten(&model.dense) != crate::params::flatten(&before.dense);
        assert!(moved);
    }
}
