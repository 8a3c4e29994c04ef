use crate::autodiff::Var;
use crate::tensor::{gemm, Scalar, Tensor};

impl<'g, T: Scalar> Var<'g, T> {
    /// Batched matrix product `[…, M, K] × […, K, N] → […, M, N]`.
    ///
    /// Leading dimensions must be equal, or `other` may be a plain `[K, N]`
    /// matrix shared by every batch element (a linear layer).
    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank ≥ 2, got {sa:?} × {sb:?}");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, k2, "matmul: inner dimensions differ ({sa:?} × {sb:?})");
        let shared_rhs = sb.len() == 2;
        if !shared_rhs {
            assert_eq!(
                sa[..sa.len() - 2],
                sb[..sb.len() - 2],
                "matmul: leading dimensions differ ({sa:?} × {sb:?})"
            );
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        if shared_rhs {
            // one big product: [batch·M, K] × [K, N]
            gemm(batch * m, k, n, a.data(), false, b.data(), false, &mut out, false);
        } else {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..],
                    false,
                    &b.data()[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        let (ia, ib) = (self.id, other.id);
        self.graph
            .op(Tensor::new(&out_shape, out), &[self, other], move |g, sink| {
                let gd = g.data();
                if sink.wants(ia) {
                    let mut da = vec![T::zero(); a.len()];
                    if shared_rhs {
                        gemm(batch * m, n, k, gd, false, b.data(), true, &mut da, false);
                    } else {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &gd[i * m * n..],
                                false,
                                &b.data()[i * k * n..],
                                true,
                                &mut da[i * m * k..],
                                false,
                            );
                        }
                    }
                    sink.add(ia, Tensor::new(a.shape(), da));
                }
                if sink.wants(ib) {
                    let mut db = vec![T::zero(); b.len()];
                    if shared_rhs {
                        gemm(k, batch * m, n, a.data(), true, gd, false, &mut db, false);
                    } else {
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &a.data()[i * m * k..],
                                true,
                                &gd[i * m * n..],
                                false,
                                &mut db[i * k * n..],
                                false,
                            );
                        }
                    }
                    sink.add(ib, Tensor::new(b.shape(), db));
                }
            })
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn identity_and_scalar_products() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(i.matmul(a).value().data(), a.value().data());
        let x = g.constant(Tensor::from_f64(&[1, 1], &[3.0]));
        let y = g.constant(Tensor::from_f64(&[1, 1], &[-2.5]));
        assert_eq!(x.matmul(y).item(), -7.5);
    }

    #[test]
    fn batched_matches_triple_loop() {
        let g = Graph::<f64>::new();
        let av: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let bv: Vec<f64> = (0..16).map(|i| ((i * 5 % 9) as f64) * 0.25).collect();
        let a = g.constant(Tensor::from_f64(&[2, 3, 4], &av));
        let b = g.constant(Tensor::from_f64(&[2, 4, 2], &bv));
        let c = a.matmul(b).value();
        for bt in 0..2 {
            for i in 0..3 {
                for j in 0..2 {
                    let want: f64 = (0..4).map(|p| av[bt * 12 + i * 4 + p] * bv[bt * 8 + p * 2 + j]).sum();
                    assert_eq!(c.at(&[bt, i, j]), want);
                }
            }
        }
    }

    #[test]
    #[should_panic(expected = "inner dimensions differ")]
    fn mismatch_is_a_contract_violation() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        let _ = a.matmul(b);
    }
}
