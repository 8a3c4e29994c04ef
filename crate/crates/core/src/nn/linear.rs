use super::{Builder, Ctx};
use crate::autodiff::Var;
use crate::params::{ParamGroup, ParamId};
use crate::tensor::Scalar;

/// Affine map over the last axis: `[…, in] → […, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// Stored `[in, out]` so the forward pass is a plain right-multiplication.
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, in_features: usize, out_features: usize, bias: bool) -> Self {
        let weight = b.kaiming_uniform(&format!("{name}.weight"), &[in_features, out_features], in_features);
        let bias = bias.then(|| b.constant(&format!("{name}.bias"), ParamGroup::Weight, &[out_features], 0.0));
        Linear {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let shape = x.shape();
        assert_eq!(
            *shape.last().expect("non-empty shape"),
            self.in_features,
            "linear: expected {} input features, got shape {shape:?}",
            self.in_features
        );
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let w = cx.param(self.weight);
        let mut y = x.reshape(&[rows, self.in_features]).matmul(w);
        if let Some(b) = self.bias {
            y = y.add_trailing(cx.param(b));
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(self.out_features);
        y.reshape(&out_shape)
    }
}
