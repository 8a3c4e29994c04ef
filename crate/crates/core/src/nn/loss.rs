use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

impl<'g, T: Scalar> Var<'g, T> {
    /// Mean pixel cross-entropy of `[B, K, H, W]` logits against a sparse
    /// `[B, H, W]` label map where 0 means "ignore" and `1..=K` are classes.
    ///
    /// Fails if no pixel in the batch is labeled.
    pub fn masked_cross_entropy(self, labels: &[u32]) -> Result<Var<'g, T>> {
        let z = self.value();
        let shape = z.shape().to_vec();
        assert_eq!(shape.len(), 4, "masked_cross_entropy expects [B, K, H, W] logits");
        let (b, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        assert_eq!(labels.len(), b * hw, "label map does not match logits");
        let labeled = labels.iter().filter(|&&l| l != 0).count();
        if labeled == 0 {
            return Err(Error::Contract("batch contains no labeled pixel".into()));
        }
        let d = z.data();
        let mut probs = vec![T::zero(); d.len()];
        let mut loss = T::zero();
        for n in 0..b {
            for p in 0..hw {
                let label = labels[n * hw + p] as usize;
                if label == 0 {
                    continue;
                }
                assert!(label <= k, "label {label} exceeds class count {k}");
                let at = |c: usize| (n * k + c) * hw + p;
                let m = (0..k).map(|c| d[at(c)]).fold(T::neg_infinity(), T::max);
                let z_sum: T = (0..k).map(|c| (d[at(c)] - m).exp()).sum();
                let log_z = m + z_sum.ln();
                loss += log_z - d[at(label - 1)];
                for c in 0..k {
                    probs[at(c)] = (d[at(c)] - log_z).exp();
                }
            }
        }
        let count = T::c(labeled as f64);
        let labels = labels.to_vec();
        let id = self.id;
        Ok(self.graph.op(Tensor::scalar(loss / count), &[self], move |g, sink| {
            let scale = g.item() / count;
            let mut dz = vec![T::zero(); probs.len()];
            for n in 0..b {
                for p in 0..hw {
                    let label = labels[n * hw + p] as usize;
                    if label == 0 {
                        continue;
                    }
                    for c in 0..k {
                        let at = (n * k + c) * hw + p;
                        let onehot = if c + 1 == label { T::one() } else { T::zero() };
                        dz[at] = (probs[at] - onehot) * scale;
                    }
                }
            }
            sink.add(id, Tensor::new(&shape, dz));
        }))
    }
}

/// Scalar-by-scalar evaluation of the same loss, for tests.
pub fn masked_cross_entropy_reference(logits: &Tensor<f64>, labels: &[u32]) -> f64 {
    let s = logits.shape();
    let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let label = labels[(n * h + y) * w + x] as usize;
                if label == 0 {
                    continue;
                }
                let z: f64 = (0..k).map(|c| logits.at(&[n, c, y, x]).exp()).sum();
                total += -(logits.at(&[n, label - 1, y, x]).exp() / z).ln();
                count += 1;
            }
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn uniform_logits_give_log_k() {
        let g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let loss = z.masked_cross_entropy(&[1, 0, 3, 4]).unwrap().item();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logit_has_no_loss() {
        let g = Graph::<f64>::new();
        let mut t = Tensor::zeros(&[1, 3, 1, 1]);
        t.data_mut()[1] = 60.0;
        let loss = g.constant(t).masked_cross_entropy(&[2]).unwrap().item();
        assert!(loss < 1e-20);
    }

    #[test]
    fn hand_built_patch_matches_scalar_evaluation() {
        let logits = Tensor::from_f64(
            &[1, 3, 2, 2],
            &[0.2, -1.0, 0.5, 2.0, 1.5, 0.3, -0.7, 0.0, -0.4, 0.9, 1.1, -2.0],
        );
        let labels = [2, 0, 0, 1];
        let g = Graph::<f64>::new();
        let got = g.constant(logits.clone()).masked_cross_entropy(&labels).unwrap().item();
        // pixel (0,0): logits (0.2, 1.5, -0.4), class 2; pixel (1,1): (2.0, 0.0, -2.0), class 1
        let p00 = -(1.5f64.exp() / (0.2f64.exp() + 1.5f64.exp() + (-0.4f64).exp())).ln();
        let p11 = -(2.0f64.exp() / (2.0f64.exp() + 1.0 + (-2.0f64).exp())).ln();
        assert!((got - (p00 + p11) / 2.0).abs() < 1e-14);
        assert!((got - masked_cross_entropy_reference(&logits, &labels)).abs() < 1e-14);
    }

    #[test]
    fn unlabeled_batch_is_rejected() {
        let g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 2, 1, 2]));
        assert!(z.masked_cross_entropy(&[0, 0]).is_err());
    }
}
