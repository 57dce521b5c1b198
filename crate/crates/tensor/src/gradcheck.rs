//! Central finite differences as an oracle for analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::element::Element;
use crate::error::{usage_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::Ctx;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::Rng;

/// Denominator floor of [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every element `i` of `at`.
pub fn finite_diff_grad<T: Element>(mut f: impl FnMut(&Tensor<T>) -> T, at: &Tensor<T>, h: f64) -> Tensor<T> {
    let mut x = at.clone();
    let mut out = Tensor::zeros(at.shape());
    let hh = T::of(h);
    for i in 0..at.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + hh;
        let up = f(&x);
        x.data_mut()[i] = orig - hh;
        let down = f(&x);
        x.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (hh + hh);
    }
    out
}

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor and element where the maximum occurred.
    pub worst: String,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub elements_checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, location: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.elements_checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = err;
            self.worst = location();
            self.analytic_at_worst = analytic;
            self.numeric_at_worst = numeric;
        }
    }
}

/// Compares analytic gradients of a scalar function of model parameters and
/// free inputs against central differences, in 64-bit precision.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    /// Elements probed per tensor; smaller tensors are probed exhaustively.
    pub probes_per_tensor: usize,
    pub seed: u64,
    /// Runs the function in training mode (dropout must be zero).
    pub training: bool,
    /// Parameters to probe; all when `None`.
    pub only: Option<Vec<ParamId>>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { h: 1e-5, probes_per_tensor: 12, seed: 0, training: false, only: None }
    }
}

impl GradCheck {
    pub fn run<F>(&self, store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: for<'g, 'a> Fn(&Ctx<'g, 'a, f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
    {
        let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
            let graph = Graph::new();
            let ctx = Ctx::new(&graph, store, self.training, Rng::seed_from_u64(self.seed));
            let vars: Vec<_> = inputs.iter().map(|t| graph.constant(t.clone())).collect();
            let loss = f(&ctx, &vars)?;
            if loss.value().numel() != 1 {
                return Err(usage_err("gradient check needs a scalar function"));
            }
            Ok(loss.value().item())
        };

        // analytic
        let graph = Graph::new();
        let ctx = Ctx::new(&graph, store, self.training, Rng::seed_from_u64(self.seed));
        let vars: Vec<_> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
        let loss = f(&ctx, &vars)?;
        let grads = graph.backward(loss)?;
        let input_grads: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let mut param_grads: Vec<Option<Tensor<f64>>> = vec![None; store.params().len()];
        for (id, g) in grads.param_grads() {
            match &mut param_grads[id.index()] {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        drop(grads);
        drop(ctx);

        let mut rng = Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: String::new(),
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            elements_checked: 0,
        };
        let h = self.h;

        for (k, input) in inputs.iter().enumerate() {
            for i in self.probe_indices(input.numel(), &mut rng) {
                let mut shifted = inputs.to_vec();
                shifted[k].data_mut()[i] += h;
                let up = eval(store, &shifted)?;
                shifted[k].data_mut()[i] -= 2.0 * h;
                let down = eval(store, &shifted)?;
                let numeric = (up - down) / (2.0 * h);
                report.record(|| format!("input{k}[{i}]"), input_grads[k].data()[i], numeric);
            }
        }

        let ids: Vec<ParamId> = match &self.only {
            Some(ids) => ids.clone(),
            None => store.param_ids().collect(),
        };
        for id in ids {
            let numel = store.param(id).value.numel();
            for i in self.probe_indices(numel, &mut rng) {
                let mut shifted = store.clone();
                shifted.value_mut(id).data_mut()[i] += h;
                let up = eval(&shifted, inputs)?;
                shifted.value_mut(id).data_mut()[i] -= 2.0 * h;
                let down = eval(&shifted, inputs)?;
                let numeric = (up - down) / (2.0 * h);
                let analytic = param_grads[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
                report.record(|| format!("{}[{i}]", store.param(id).name), analytic, numeric);
            }
        }
        Ok(report)
    }

    fn probe_indices(&self, numel: usize, rng: &mut Rng) -> Vec<usize> {
        if numel <= self.probes_per_tensor {
            (0..numel).collect()
        } else {
            let mut idx = sample(rng, numel, self.probes_per_tensor).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|x: &Tensor<f64>| x.data()[0] * x.data()[0], &Tensor::scalar(3.0), 1e-5);
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = finite_diff_grad(|_: &Tensor<f64>| 4.2, &Tensor::full(&[3], 1.0), 1e-5);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l1_distance_signs_off_the_kink() {
        let target = [0.5, -1.0, 2.0];
        let at = Tensor::from_vec(&[3], vec![1.0, -2.0, 2.5]).unwrap();
        let g = finite_diff_grad(
            |x: &Tensor<f64>| x.data().iter().zip(&target).map(|(a, b)| (a - b).abs()).sum(),
            &at,
            1e-5,
        );
        for (v, e) in g.data().iter().zip([1.0, -1.0, 1.0]) {
            assert!((v - e).abs() < 1e-8);
        }
    }
}
