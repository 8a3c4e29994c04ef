use super::{Builder, Ctx};
use crate::autodiff::Var;
use crate::params::{BufferId, ParamGroup, ParamId};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `(leading, channels, trailing)` for a channel axis at position 1.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "batch_norm needs [N, C, ...], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

/// Per-channel batch statistics: (mean, biased variance).
fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, s) = channel_layout(x.shape());
    let count = T::c((n * s) as f64);
    let d = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            acc += d[(b * c + ch) * s..(b * c + ch + 1) * s].iter().copied().sum::<T>();
        }
        let mu = acc / count;
        let mut sq = T::zero();
        for b in 0..n {
            for &v in &d[(b * c + ch) * s..(b * c + ch + 1) * s] {
                sq += (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = sq / count;
    }
    (mean, var)
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Normalizes with the batch's own per-channel statistics (channel axis 1).
    /// Returns the output plus the batch mean and biased variance.
    pub fn batch_norm_train(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> (Var<'g, T>, Vec<T>, Vec<T>) {
        let x = self.value();
        let (n, c, s) = channel_layout(x.shape());
        let (gv, bv) = (gamma.value(), beta.value());
        assert_eq!(gv.len(), c, "batch_norm: gamma has {} entries for {c} channels", gv.len());
        assert_eq!(bv.len(), c, "batch_norm: beta has {} entries for {c} channels", bv.len());
        let (mean, var) = channel_stats(&x);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::c(eps)).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * s..(b * c + ch + 1) * s;
                for i in range {
                    let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv.data()[ch] * h + bv.data()[ch];
                }
            }
        }
        let (ix, ig, ib) = (self.id, gamma.id, beta.id);
        let shape = x.shape().to_vec();
        let count = T::c((n * s) as f64);
        let y = self.graph.op(Tensor::new(&shape, out), &[self, gamma, beta], move |g, sink| {
            let gd = g.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                        dbeta[ch] += gd[i];
                        dgamma[ch] += gd[i] * xhat[i];
                    }
                }
            }
            if sink.wants(ix) {
                let mut dx = vec![T::zero(); gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let k = gv.data()[ch] * inv_std[ch];
                        let mean_dy = dbeta[ch] / count;
                        let mean_dy_xhat = dgamma[ch] / count;
                        for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                            dx[i] = k * (gd[i] - mean_dy - xhat[i] * mean_dy_xhat);
                        }
                    }
                }
                sink.add(ix, Tensor::new(&shape, dx));
            }
            sink.add(ig, Tensor::new(&[c], dgamma));
            sink.add(ib, Tensor::new(&[c], dbeta));
        });
        (y, mean, var)
    }

    /// Normalizes with fixed statistics (evaluation mode).
    pub fn batch_norm_eval(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Var<'g, T> {
        let x = self.value();
        let (n, c, s) = channel_layout(x.shape());
        let (gv, bv) = (gamma.value(), beta.value());
        assert_eq!(gv.len(), c, "batch_norm: gamma/channel mismatch");
        let mean = running_mean.data().to_vec();
        let inv_std: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + T::c(eps)).sqrt())
            .collect();
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                    out[i] = gv.data()[ch] * (x.data()[i] - mean[ch]) * inv_std[ch] + bv.data()[ch];
                }
            }
        }
        let (ix, ig, ib) = (self.id, gamma.id, beta.id);
        let shape = x.shape().to_vec();
        self.graph.op(Tensor::new(&shape, out), &[self, gamma, beta], move |g, sink| {
            let gd = g.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = vec![T::zero(); gd.len()];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                        let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                        dbeta[ch] += gd[i];
                        dgamma[ch] += gd[i] * h;
                        dx[i] = gd[i] * gv.data()[ch] * inv_std[ch];
                    }
                }
            }
            sink.add(ix, Tensor::new(&shape, dx));
            sink.add(ig, Tensor::new(&[c], dgamma));
            sink.add(ib, Tensor::new(&[c], dbeta));
        })
    }
}

/// Batch normalization over channel axis 1 with learnable affine terms and
/// running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    /// Batches seen in training mode.
    pub steps: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: b.constant(&format!("{name}.gamma"), ParamGroup::Weight, &[channels], 1.0),
            beta: b.constant(&format!("{name}.beta"), ParamGroup::Weight, &[channels], 0.0),
            running_mean: b.buffer(&format!("{name}.running_mean"), &[channels], 0.0),
            running_var: b.buffer(&format!("{name}.running_var"), &[channels], 1.0),
            steps: b.buffer(&format!("{name}.steps"), &[1], 0.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        if cx.is_train() {
            let (y, mean, var) = x.batch_norm_train(gamma, beta, self.eps);
            let shape = x.shape();
            let count = shape[0] * shape[2..].iter().product::<usize>();
            let unbias = if count > 1 {
                T::c(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let m = T::c(self.momentum);
            let store = cx.store_mut();
            for (r, &bm) in store.buffer_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                *r = (T::one() - m) * *r + m * bm;
            }
            for (r, &bv) in store.buffer_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                *r = (T::one() - m) * *r + m * bv * unbias;
            }
            store.buffer_mut(self.steps).data_mut()[0] += T::one();
            y
        } else {
            let store = cx.store();
            if store.buffer(self.steps).item() == T::zero() {
                log::debug!("batch norm evaluated before any training step; using initial statistics");
            }
            let rm = store.buffer(self.running_mean).clone();
            let rv = store.buffer(self.running_var).clone();
            x.batch_norm_eval(gamma, beta, &rm, &rv, self.eps)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bn_fixture(channels: usize) -> (ParamStore<f64>, BatchNorm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bn = BatchNorm::new(&mut Builder::new(&mut store, &mut rng), "bn", channels);
        (store, bn)
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let (mut store, bn) = bn_fixture(2);
        store.value_mut(bn.beta).data_mut().copy_from_slice(&[0.5, -0.25]);
        let g = Graph::new();
        let mut cx = Ctx::train(&g, &mut store);
        let y = bn.forward(&mut cx, g.constant(Tensor::full(&[3, 2, 4], 7.0))).value();
        for b in 0..3 {
            for s in 0..4 {
                assert!((y.at(&[b, 0, s]) - 0.5).abs() < 1e-12);
                assert!((y.at(&[b, 1, s]) + 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let (mut store, bn) = bn_fixture(1);
        let g = Graph::new();
        let mut cx = Ctx::train(&g, &mut store);
        let x = Tensor::from_f64(&[4, 1], &[1.0, 2.0, 3.0, 6.0]);
        let _ = bn.forward(&mut cx, g.constant(x));
        // batch mean 3, unbiased variance 14/3
        assert!((store.buffer(bn.running_mean).item() - 0.3).abs() < 1e-12);
        let want_var = 0.9 + 0.1 * (14.0 / 3.0);
        assert!((store.buffer(bn.running_var).item() - want_var).abs() < 1e-12);
    }

    #[test]
    fn eval_uses_running_stats_only() {
        let (mut store, bn) = bn_fixture(1);
        store.buffer_mut(bn.running_mean).data_mut()[0] = 1.0;
        store.buffer_mut(bn.running_var).data_mut()[0] = 4.0 - BN_EPS;
        let g = Graph::new();
        let mut cx = Ctx::eval(&g, &store);
        let y = bn.forward(&mut cx, g.constant(Tensor::from_f64(&[2, 1], &[3.0, -1.0]))).value();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn standardized_batch_passes_through() {
        let (mut store, bn) = bn_fixture(1);
        let g = Graph::new();
        let mut cx = Ctx::train(&g, &mut store);
        let x = Tensor::from_f64(&[4, 1, 1], &[1.0, -1.0, 1.0, -1.0]);
        let y = bn.forward(&mut cx, g.constant(x.clone())).value();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }
}
