//! Optimizers. Updates are pure functions of (parameters, gradients, state,
//! step): no hidden buffers, no dependence on call history beyond the
//! serialized state, so a checkpointed run resumes bit-identically.

use thiserror::Error;

use crate::model::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter `{name}` at optimizer step {step}")]
    NonFiniteGrad { name: String, step: u64 },
    #[error("optimizer state `{0}` missing from checkpoint")]
    MissingState(String),
    #[error("optimizer state `{name}` holds {got} values, expected {want}")]
    StateSize { name: String, want: usize, got: usize },
}

/// AdamW with decoupled weight decay and per-parameter learning-rate scales
/// (layer-wise decay). Moments are kept in the working precision and are
/// part of the checkpoint.
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    trainable: Vec<usize>,
    lr_scales: Vec<f64>,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(
        set: &ParamSet<T>,
        trainable: Vec<usize>,
        lr_scales: Vec<f64>,
        beta2: f64,
        weight_decay: f64,
    ) -> Self {
        assert_eq!(trainable.len(), lr_scales.len());
        let m = trainable.iter().map(|&i| vec![T::zero(); set.entry(i).data.len()]).collect();
        let v = trainable.iter().map(|&i| vec![T::zero(); set.entry(i).data.len()]).collect();
        AdamW { beta1: 0.9, beta2, eps: 1e-8, weight_decay, trainable, lr_scales, step: 0, m, v }
    }

    /// One update. `grads` is aligned to the full entry list of `set`;
    /// entries without a gradient are treated as zero-gradient (they still
    /// decay).
    pub fn step(
        &mut self,
        set: &mut ParamSet<T>,
        grads: &[Option<Vec<T>>],
        lr: f64,
    ) -> Result<(), OptimError> {
        self.step += 1;
        let t = self.step;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (k, &i) in self.trainable.iter().enumerate() {
            let name = set.entry(i).name.clone();
            if let Some(g) = &grads[i] {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(OptimError::NonFiniteGrad { name, step: t });
                }
            }
            let lr_k = lr * self.lr_scales[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let w = set.data_mut(i);
            for j in 0..w.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j].to_f64());
                let mj = self.beta1 * m[j].to_f64() + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v[j].to_f64() + (1.0 - self.beta2) * g * g;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let update = (mj / bc1) / ((vj / bc2).sqrt() + self.eps)
                    + self.weight_decay * w[j].to_f64();
                w[j] = T::from_f64(w[j].to_f64() - lr_k * update);
            }
        }
        Ok(())
    }

    fn state_names() -> [&'static str; 2] {
        ["m", "v"]
    }
}

/// LARS (layer-wise adaptive rate scaling) with momentum, for the linear
/// probe. The trust ratio rescales each parameter's step to its own norm.
pub struct Lars<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub eps: f64,
    trainable: Vec<usize>,
    step: u64,
    vel: Vec<Vec<T>>,
}

impl<T: Scalar> Lars<T> {
    pub fn new(set: &ParamSet<T>, trainable: Vec<usize>, weight_decay: f64) -> Self {
        let vel = trainable.iter().map(|&i| vec![T::zero(); set.entry(i).data.len()]).collect();
        Lars { momentum: 0.9, weight_decay, eps: 1e-8, trainable, step: 0, vel }
    }

    pub fn step(
        &mut self,
        set: &mut ParamSet<T>,
        grads: &[Option<Vec<T>>],
        lr: f64,
    ) -> Result<(), OptimError> {
        self.step += 1;
        for (k, &i) in self.trainable.iter().enumerate() {
            let name = set.entry(i).name.clone();
            if let Some(g) = &grads[i] {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(OptimError::NonFiniteGrad { name, step: self.step });
                }
            }
            let vel = &mut self.vel[k];
            let w = set.data_mut(i);
            let sq_sum = |xs: &[T]| {
                xs.iter().map(|&x| Scalar::to_f64(x) * Scalar::to_f64(x)).sum::<f64>()
            };
            let w_norm = sq_sum(w).sqrt();
            let g_norm = grads[i].as_ref().map_or(0.0, |g| sq_sum(g).sqrt());
            let trust = if w_norm > 0.0 && g_norm > 0.0 {
                w_norm / (g_norm + self.weight_decay * w_norm + self.eps)
            } else {
                1.0
            };
            for j in 0..w.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j].to_f64())
                    + self.weight_decay * w[j].to_f64();
                let vj = self.momentum * vel[j].to_f64() + lr * trust * g;
                vel[j] = T::from_f64(vj);
                w[j] = T::from_f64(w[j].to_f64() - vj);
            }
        }
        Ok(())
    }
}

/// The optimizer a run uses, with uniform step/state plumbing.
pub enum Optimizer<T> {
    AdamW(AdamW<T>),
    Lars(Lars<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn step(
        &mut self,
        set: &mut ParamSet<T>,
        grads: &[Option<Vec<T>>],
        lr: f64,
    ) -> Result<(), OptimError> {
        match self {
            Optimizer::AdamW(o) => o.step(set, grads, lr),
            Optimizer::Lars(o) => o.step(set, grads, lr),
        }
    }

    pub fn trainable(&self) -> &[usize] {
        match self {
            Optimizer::AdamW(o) => &o.trainable,
            Optimizer::Lars(o) => &o.trainable,
        }
    }

    pub fn step_count(&self) -> u64 {
        match self {
            Optimizer::AdamW(o) => o.step,
            Optimizer::Lars(o) => o.step,
        }
    }

    pub fn set_step_count(&mut self, t: u64) {
        match self {
            Optimizer::AdamW(o) => o.step = t,
            Optimizer::Lars(o) => o.step = t,
        }
    }

    /// Named state arrays for checkpointing, shapes borrowed from `set`.
    pub fn state_arrays(&self, set: &ParamSet<T>) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = Vec::new();
        match self {
            Optimizer::AdamW(o) => {
                let [mn, vn] = AdamW::<T>::state_names();
                for (k, &i) in o.trainable.iter().enumerate() {
                    let e = set.entry(i);
                    out.push((format!("{mn}.{}", e.name), e.shape.clone(), o.m[k].clone()));
                    out.push((format!("{vn}.{}", e.name), e.shape.clone(), o.v[k].clone()));
                }
            }
            Optimizer::Lars(o) => {
                for (k, &i) in o.trainable.iter().enumerate() {
                    let e = set.entry(i);
                    out.push((format!("vel.{}", e.name), e.shape.clone(), o.vel[k].clone()));
                }
            }
        }
        out
    }

    /// Restore state saved by [`Optimizer::state_arrays`].
    pub fn load_state_arrays(
        &mut self,
        set: &ParamSet<T>,
        lookup: &dyn Fn(&str) -> Option<Vec<T>>,
    ) -> Result<(), OptimError> {
        let fetch = |name: String, want: usize| -> Result<Vec<T>, OptimError> {
            let data = lookup(&name).ok_or_else(|| OptimError::MissingState(name.clone()))?;
            if data.len() != want {
                return Err(OptimError::StateSize { name, want, got: data.len() });
            }
            Ok(data)
        };
        match self {
            Optimizer::AdamW(o) => {
                for (k, &i) in o.trainable.iter().enumerate() {
                    let e = set.entry(i);
                    o.m[k] = fetch(format!("m.{}", e.name), e.data.len())?;
                    o.v[k] = fetch(format!("v.{}", e.name), e.data.len())?;
                }
            }
            Optimizer::Lars(o) => {
                for (k, &i) in o.trainable.iter().enumerate() {
                    let e = set.entry(i);
                    o.vel[k] = fetch(format!("vel.{}", e.name), e.data.len())?;
                }
            }
        }
        Ok(())
    }
}
