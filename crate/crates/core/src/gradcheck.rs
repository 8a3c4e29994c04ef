//! Finite-difference verification of analytic gradients.
//!
//! Non-scalar outputs are reduced to a scalar by a fixed random projection,
//! so every output element contributes to the checked gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-4;

/// Worst disagreement found by a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_error: f64,
    /// Which input or parameter element produced `max_error`.
    pub worst: String,
    /// Number of scalar elements perturbed.
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_error: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, what: impl FnOnce() -> String) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_error || err.is_nan() {
            self.max_error = err;
            self.worst = what();
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn projection(shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn scalarize<'g>(out: Var<'g, f64>, weights: &mut Option<Tensor<f64>>) -> Var<'g, f64> {
    let shape = out.shape();
    let w = weights.get_or_insert_with(|| projection(&shape));
    assert_eq!(w.shape(), &shape[..], "output shape changed between evaluations");
    out.dot_const(w)
}

/// Compares the gradient of `f` with respect to each input against central
/// differences with step `eps`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let mut weights = None;
    let eval = |xs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        scalarize(f(&g, &vars), weights).item()
    };

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let loss = scalarize(f(&g, &vars), &mut weights);
    let grads = loss.backward_all();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut report = GradCheckReport::new();
    let mut xs = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + eps;
            let plus = eval(&xs, &mut weights);
            xs[k].data_mut()[i] = orig - eps;
            let minus = eval(&xs, &mut weights);
            xs[k].data_mut()[i] = orig;
            report.record(a.data()[i], (plus - minus) / (2.0 * eps), || format!("input {k}[{i}]"));
        }
    }
    report
}

/// Like [`grad_check`] but also perturbs every parameter in `store`.
///
/// `train` selects the forward mode handed to `f`.
pub fn grad_check_with_params<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    eps: f64,
    train: bool,
    f: F,
) -> GradCheckReport
where
    F: for<'g> Fn(&mut Ctx<'g, '_, f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let mut weights = None;
    let eval = |store: &mut ParamStore<f64>, xs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = if train {
            f(&mut Ctx::train(&g, store), &vars)
        } else {
            f(&mut Ctx::eval(&g, store), &vars)
        };
        scalarize(out, weights).item()
    };

    // analytic pass
    let (input_grads, param_grads) = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = if train {
            f(&mut Ctx::train(&g, store), &vars)
        } else {
            f(&mut Ctx::eval(&g, store), &vars)
        };
        let grads = scalarize(out, &mut weights).backward_all();
        let ig: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, x)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        (ig, grads.into_params())
    };

    let mut report = GradCheckReport::new();
    let mut xs = inputs.to_vec();
    for (k, a) in input_grads.iter().enumerate() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + eps;
            let plus = eval(store, &xs, &mut weights);
            xs[k].data_mut()[i] = orig - eps;
            let minus = eval(store, &xs, &mut weights);
            xs[k].data_mut()[i] = orig;
            report.record(a.data()[i], (plus - minus) / (2.0 * eps), || format!("input {k}[{i}]"));
        }
    }

    let ids: Vec<_> = store.params().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let len = store.value(id).len();
        let zeros;
        let a = match param_grads.get(&name) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(store.value(id).shape());
                &zeros
            }
        };
        for i in 0..len {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store, &xs, &mut weights);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store, &xs, &mut weights);
            store.value_mut(id).data_mut()[i] = orig;
            report.record(a.data()[i], (plus - minus) / (2.0 * eps), || format!("{name}[{i}]"));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_no_error() {
        let x = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]);
        let r = grad_check(&[x], DEFAULT_EPS, |_, v| v[0]);
        assert_eq!(r.checked, 3);
        assert!(r.max_error < 1e-10, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // an op whose backward is deliberately off by a factor of two
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]);
        let r = grad_check(&[x], DEFAULT_EPS, |g, v| {
            let val = v[0].value().map(|a| 3.0 * a);
            let id = v[0].id();
            g.op(val, &[v[0]], move |gr, sink| sink.add(id, gr.map(|a| 6.0 * a)))
        });
        assert!(r.max_error > 0.1);
        assert!(r.worst.starts_with("input 0"));
    }

    #[test]
    fn product_of_inputs() {
        let a = Tensor::from_f64(&[2, 2], &[0.3, -1.2, 2.0, 0.7]);
        let b = Tensor::from_f64(&[2, 2], &[1.1, 0.4, -0.5, 0.9]);
        let r = grad_check(&[a, b], DEFAULT_EPS, |_, v| v[0].mul(v[1]).matmul(v[1]).sum());
        assert!(r.max_error < 1e-8, "{r:?}");
    }
}
