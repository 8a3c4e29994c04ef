//! Elementwise, reduction and reshaping operations.

use std::sync::Arc;

use super::graph::{Graph, Var};
use crate::tensor::{strides, Scalar, Tensor};

fn same_shape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>, what: &str) {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa, sb, "{what}: shape mismatch {sa:?} vs {sb:?}");
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        same_shape(&self, &other, "add");
        let (a, b) = (self.value(), other.value());
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let (ia, ib) = (self.id, other.id);
        self.graph
            .op(Tensor::new(a.shape(), out), &[self, other], move |g, sink| {
                sink.add(ia, g.clone());
                sink.add(ib, g.clone());
            })
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        same_shape(&self, &other, "sub");
        let (a, b) = (self.value(), other.value());
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let (ia, ib) = (self.id, other.id);
        self.graph
            .op(Tensor::new(a.shape(), out), &[self, other], move |g, sink| {
                sink.add(ia, g.clone());
                sink.add(ib, g.map(|x| -x));
            })
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        same_shape(&self, &other, "mul");
        let (a, b) = (self.value(), other.value());
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let (ia, ib) = (self.id, other.id);
        self.graph
            .op(Tensor::new(a.shape(), out), &[self, other], move |g, sink| {
                if sink.wants(ia) {
                    let d = g.data().iter().zip(b.data()).map(|(&g, &y)| g * y).collect();
                    sink.add(ia, Tensor::new(g.shape(), d));
                }
                if sink.wants(ib) {
                    let d = g.data().iter().zip(a.data()).map(|(&g, &x)| g * x).collect();
                    sink.add(ib, Tensor::new(g.shape(), d));
                }
            })
    }

    /// Multiplication by a constant.
    pub fn scale(self, c: T) -> Var<'g, T> {
        let a = self.value();
        let ia = self.id;
        self.graph
            .op(a.map(|x| x * c), &[self], move |g, sink| sink.add(ia, g.map(|x| x * c)))
    }

    /// Adds `other`, whose shape must equal the trailing dimensions of
    /// `self`, broadcasting it over the leading ones (biases, position tables).
    pub fn add_trailing(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "add_trailing: {sb:?} is not a suffix of {sa:?}"
        );
        let inner = b.len();
        let mut out = a.data().to_vec();
        for chunk in out.chunks_mut(inner) {
            for (o, &y) in chunk.iter_mut().zip(b.data()) {
                *o += y;
            }
        }
        let (ia, ib) = (self.id, other.id);
        let bshape = sb.to_vec();
        self.graph
            .op(Tensor::new(sa, out), &[self, other], move |g, sink| {
                if sink.wants(ib) {
                    let mut acc = vec![T::zero(); inner];
                    for chunk in g.data().chunks(inner) {
                        for (a, &x) in acc.iter_mut().zip(chunk) {
                            *a += x;
                        }
                    }
                    sink.add(ib, Tensor::new(&bshape, acc));
                }
                sink.add(ia, g.clone());
            })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Var<'g, T> {
        let a = self.value();
        let s: T = a.data().iter().copied().sum();
        let ia = self.id;
        let shape = a.shape().to_vec();
        self.graph
            .op(Tensor::scalar(s), &[self], move |g, sink| {
                sink.add(ia, Tensor::full(&shape, g.item()))
            })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::c(self.value().len() as f64);
        self.sum().scale(T::one() / n)
    }

    /// `sum(self ⊙ weights)` for a constant weight tensor; a cheap way to get
    /// a scalar probe of a non-scalar output.
    pub fn dot_const(self, weights: &Tensor<T>) -> Var<'g, T> {
        let w = self.graph.constant(weights.clone());
        self.mul(w).sum()
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let a = self.value();
        let old = a.shape().to_vec();
        let out = (*a).clone().reshaped(shape);
        let ia = self.id;
        self.graph
            .op(out, &[self], move |g, sink| sink.add(ia, g.clone().reshaped(&old)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Var<'g, T> {
        let a = self.value();
        let out = permute_tensor(&a, axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let ia = self.id;
        self.graph
            .op(out, &[self], move |g, sink| sink.add(ia, permute_tensor(g, &inverse)))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Var<'g, T> {
        let a = self.value();
        let shape = a.shape().to_vec();
        assert!(axis < shape.len(), "mean_axis: axis {axis} out of range for {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let inv = T::one() / T::c(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &a.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for x in &mut out {
            *x *= inv;
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let ia = self.id;
        self.graph
            .op(Tensor::new(&oshape, out), &[self], move |g, sink| {
                let mut d = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        let dst = &mut d[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (x, &s) in dst.iter_mut().zip(src) {
                            *x = s * inv;
                        }
                    }
                }
                sink.add(ia, Tensor::new(&shape, d));
            })
    }

    /// `out[i] = self.flat[indices[i]]`, reshaped to `shape`. The backward
    /// pass scatter-adds, so repeated indices share gradient.
    pub fn gather(self, indices: Arc<Vec<usize>>, shape: &[usize]) -> Var<'g, T> {
        let a = self.value();
        assert_eq!(indices.len(), shape.iter().product::<usize>(), "gather: index count");
        let src = a.data();
        let out: Vec<T> = indices
            .iter()
            .map(|&i| {
                assert!(i < src.len(), "gather: index {i} out of range");
                src[i]
            })
            .collect();
        let ia = self.id;
        let ashape = a.shape().to_vec();
        self.graph
            .op(Tensor::new(shape, out), &[self], move |g, sink| {
                let mut d = Tensor::zeros(&ashape);
                let dd = d.data_mut();
                for (&i, &x) in indices.iter().zip(g.data()) {
                    dd[i] += x;
                }
                sink.add(ia, d);
            })
    }
}

impl<T: Scalar> Graph<T> {
    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|v| v.value()).collect();
        let first = values[0].shape().to_vec();
        assert!(axis < first.len(), "concat: axis {axis} out of range");
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            assert_eq!(s.len(), first.len(), "concat: rank mismatch");
            for (i, (&x, &y)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || x == y, "concat: extent mismatch {s:?} vs {first:?}");
            }
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        self.op(Tensor::new(&shape, out), parts, move |g, sink| {
            let mut offset = 0;
            for ((&id, &w), v) in ids.iter().zip(&widths).zip(&values) {
                if sink.wants(id) {
                    let mut d = Vec::with_capacity(outer * w * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[start..start + w * inner]);
                    }
                    sink.add(id, Tensor::new(v.shape(), d));
                }
                offset += w;
            }
        })
    }

    /// `Σ_j weights[j] · terms[j]` where `weights` is a 1-D node and `None`
    /// terms are identically zero (they still take part in any
    /// normalization that produced `weights`).
    pub fn weighted_sum<'g>(
        &'g self,
        terms: &[Option<Var<'g, T>>],
        weights: Var<'g, T>,
        shape: &[usize],
    ) -> Var<'g, T> {
        let w = weights.value();
        assert_eq!(w.len(), terms.len(), "weighted_sum: one weight per term");
        let n: usize = shape.iter().product();
        let mut out = vec![T::zero(); n];
        let mut vals = Vec::with_capacity(terms.len());
        for (t, &wj) in terms.iter().zip(w.data()) {
            match t {
                Some(v) => {
                    let val = v.value();
                    assert_eq!(val.shape(), shape, "weighted_sum: term shape mismatch");
                    for (o, &x) in out.iter_mut().zip(val.data()) {
                        *o += wj * x;
                    }
                    vals.push(Some((v.id, val)));
                }
                None => vals.push(None),
            }
        }
        let mut inputs: Vec<Var<'g, T>> = terms.iter().flatten().copied().collect();
        inputs.push(weights);
        let wid = weights.id;
        let wshape = w.shape().to_vec();
        let shape = shape.to_vec();
        self.op(Tensor::new(&shape, out), &inputs, move |g, sink| {
            let mut dw = vec![T::zero(); vals.len()];
            for (j, entry) in vals.iter().enumerate() {
                let Some((id, val)) = entry else { continue };
                let wj = w.data()[j];
                if sink.wants(*id) {
                    sink.add(*id, g.map(|x| x * wj));
                }
                dw[j] = g.data().iter().zip(val.data()).map(|(&a, &b)| a * b).sum();
            }
            sink.add(wid, Tensor::new(&wshape, dw));
        })
    }
}

/// Copies `t` with axes reordered.
pub fn permute_tensor<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    assert_eq!(axes.len(), shape.len(), "permute: rank mismatch");
    let mut seen = vec![false; axes.len()];
    for &a in axes {
        assert!(a < axes.len() && !seen[a], "permute: {axes:?} is not a permutation");
        seen[a] = true;
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // stride in the input buffer for each output axis
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let data = t.data();
    for _ in 0..n {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]));
        let loss = w.mul(w).sum();
        let grads = loss.backward_all();
        assert_eq!(grads.wrt(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_use_accumulates() {
        let g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64(&[2], &[1.0, -1.0]));
        let loss = w.add(w).add(w.scale(3.0)).sum();
        let grads = loss.backward_all();
        assert_eq!(grads.wrt(w).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::<f64>::new(&[2, 3, 4], (0..24).map(|x| x as f64).collect());
        let p = permute_tensor(&t, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), t.at(&[1, 2, 3]));
        let back = permute_tensor(&p, &[1, 2, 0]);
        assert_eq!(back, t);
    }

    #[test]
    fn concat_and_split_gradients() {
        let g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_f64(&[1, 1, 2], &[1.0, 2.0]));
        let b = g.leaf(Tensor::from_f64(&[1, 2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1);
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Tensor::from_f64(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let grads = c.dot_const(&w).backward_all();
        assert_eq!(grads.wrt(a).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn detached_loss_gives_empty_map() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::from_f64(&[2], &[1.0, 2.0]));
        assert!(c.sum().backward().is_empty());
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]));
        let _ = w.scale(2.0).backward();
    }

    #[test]
    #[should_panic(expected = "already consumed")]
    fn graph_is_single_use() {
        let g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64(&[1], &[1.0]));
        let l = w.mul(w).sum();
        let _ = l.backward();
        let _ = l.backward();
    }
}
