use serde::{Deserialize, Serialize};

use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

/// Learning rate at `step` (0-based) of `total` steps, with linear warmup.
pub fn learning_rate(kind: SchedulerKind, base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match kind {
        SchedulerKind::Constant => base,
        SchedulerKind::Cosine => {
            let span = total.saturating_sub(warmup).max(1);
            let t = (step.saturating_sub(warmup)).min(span) as f64 / span as f64;
            0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Adam with decoupled weight decay; `Sgd` ignores the moment buffers.
pub struct Optimizer<T> {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, weight_decay: f64, params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| {
            p.tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// Applies one update. Parameters that are frozen or have no gradient
    /// are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.trainable()[id.0] {
                continue;
            }
            let Some(g) = grads[id.0].as_ref() else { continue };
            let p = params.get_mut(id);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - T::of(lr) * gi;
                    }
                }
                OptimizerKind::AdamW => {
                    let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
                    let decay = T::of(1.0 - lr * self.weight_decay);
                    let m = self.m[id.0].data_mut();
                    let v = self.v[id.0].data_mut();
                    for (k, w) in p.data_mut().iter_mut().enumerate() {
                        let gi = g.data()[k];
                        m[k] = b1 * m[k] + (T::one() - b1) * gi;
                        v[k] = b2 * v[k] + (T::one() - b2) * gi * gi;
                        let mhat = m[k].as_f64() / bc1;
                        let vhat = v[k].as_f64() / bc2;
                        *w = *w * decay - T::of(lr * mhat / (vhat.sqrt() + self.eps));
                    }
                }
            }
        }
    }
}
