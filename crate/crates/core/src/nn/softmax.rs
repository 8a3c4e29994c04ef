use crate::autodiff::Var;
use crate::tensor::{Scalar, Tensor};

/// Max-subtracted softmax of `data` viewed as `[outer, n, inner]` along the middle axis.
pub(crate) fn softmax_slices<T: Scalar>(data: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..n {
                m = m.max(data[at(k)]);
            }
            let mut z = T::zero();
            for k in 0..n {
                let e = (data[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                out[at(k)] /= z;
            }
        }
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "softmax: axis {axis} out of range for {shape:?}");
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Normalized exponentials along `axis`.
    pub fn softmax(self, axis: usize) -> Var<'g, T> {
        let a = self.value();
        let (outer, n, inner) = split_axis(a.shape(), axis);
        let y = std::sync::Arc::new(Tensor::new(a.shape(), softmax_slices(a.data(), outer, n, inner)));
        let ia = self.id;
        let yc = y.clone();
        self.graph.op((*y).clone(), &[self], move |g, sink| {
            let (gd, yd) = (g.data(), yc.data());
            let mut d = vec![T::zero(); gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let mut dot = T::zero();
                    for k in 0..n {
                        dot += gd[at(k)] * yd[at(k)];
                    }
                    for k in 0..n {
                        d[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            sink.add(ia, Tensor::new(g.shape(), d));
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn closed_form_two_way() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2], &[0.0, 3f64.ln()]));
        let y = x.softmax(0).value();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn uniform_and_middle_axis() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 4, 3], 7.0));
        let y = x.softmax(1).value();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn huge_logits_stay_finite() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(&[3], &[1000.0, -1000.0, 999.0]));
        let y = x.softmax(0).value();
        assert!(y.all_finite());
        let s: f32 = y.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}
