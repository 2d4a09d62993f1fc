//! Finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::graph::{Graph, Var};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// A scalar function of the parameters with an analytic gradient.
pub trait Objective<T: Scalar> {
    fn value(&self, params: &ParamStore<T>) -> T;
    fn gradient(&self, params: &ParamStore<T>) -> Vec<Option<Tensor<T>>>;
}

/// Objective defined by a closure that records the loss on a fresh graph.
pub struct GraphObjective<F>(pub F);

impl<T, F> Objective<T> for GraphObjective<F>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Var,
{
    fn value(&self, params: &ParamStore<T>) -> T {
        let mut g = Graph::new(params.tensors(), params.trainable());
        let out = (self.0)(&mut g);
        g.value(out).item()
    }

    fn gradient(&self, params: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut g = Graph::new(params.tensors(), params.trainable());
        let out = (self.0)(&mut g);
        g.backward(out).into_param_grads()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor (all of them if smaller).
    pub coords_per_param: usize,
    /// Lower bound on the relative-error denominator.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            coords_per_param: 8,
            abs_floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: Option<String>,
    pub coords_checked: usize,
    /// Largest analytic gradient magnitude seen; zero means nothing was tested.
    pub max_abs_gradient: f64,
}

/// Compares analytic gradients to central differences on sampled coordinates
/// of every trainable parameter.
pub fn grad_check<T: Scalar, O: Objective<T>>(
    objective: &O,
    params: &ParamStore<T>,
    cfg: GradCheckConfig,
) -> GradCheckReport {
    let analytic = objective.gradient(params);
    let mut work = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: None,
        coords_checked: 0,
        max_abs_gradient: 0.0,
    };
    for id in params.ids() {
        if !params.trainable()[id.0] {
            continue;
        }
        let n = params.get(id).len();
        let picks: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            index::sample(&mut rng, n, cfg.coords_per_param).into_vec()
        };
        for i in picks {
            let a = analytic[id.0]
                .as_ref()
                .map(|t| t.data()[i].as_f64())
                .unwrap_or(0.0);
            let numeric = central_difference(objective, &mut work, id, i, cfg.epsilon);
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            report.max_abs_gradient = report.max_abs_gradient.max(a.abs());
            if rel > report.max_relative_error || !rel.is_finite() {
                report.max_relative_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst_param = Some(params.name(id).to_string());
            }
        }
    }
    report
}

fn central_difference<T: Scalar, O: Objective<T>>(
    objective: &O,
    work: &mut ParamStore<T>,
    id: ParamId,
    i: usize,
    eps: f64,
) -> f64 {
    let orig = work.get(id).data()[i];
    work.get_mut(id).data_mut()[i] = orig + T::of(eps);
    let plus = objective.value(work).as_f64();
    work.get_mut(id).data_mut()[i] = orig - T::of(eps);
    let minus = objective.value(work).as_f64();
    work.get_mut(id).data_mut()[i] = orig;
    (plus - minus) / (2.0 * eps)
}
