use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Hardswish,
}

impl Activation {
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Hardswish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
        }
    }
}

fn hardswish<T: Scalar>(x: T) -> T {
    let three = T::c(3.0);
    let six = T::c(6.0);
    x * (x + three).max(T::zero()).min(six) / six
}

fn hardswish_grad<T: Scalar>(x: T) -> T {
    let three = T::c(3.0);
    if x < -three {
        T::zero()
    } else if x <= three {
        (x + x + three) / T::c(6.0)
    } else {
        T::one()
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn activation(self, kind: Activation) -> Var<'g, T> {
        match kind {
            Activation::LeakyRelu { slope } => self.leaky_relu(slope),
            Activation::Hardswish => self.hardswish(),
        }
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let s = T::c(slope);
        let a = self.value();
        let out = a.map(|x| if x >= T::zero() { x } else { s * x });
        let ia = self.id;
        self.graph.op(out, &[self], move |g, sink| {
            let d = g
                .data()
                .iter()
                .zip(a.data())
                .map(|(&g, &x)| if x >= T::zero() { g } else { g * s })
                .collect();
            sink.add(ia, Tensor::new(g.shape(), d));
        })
    }

    pub fn hardswish(self) -> Var<'g, T> {
        let a = self.value();
        let out = a.map(hardswish);
        let ia = self.id;
        self.graph.op(out, &[self], move |g, sink| {
            let d = g
                .data()
                .iter()
                .zip(a.data())
                .map(|(&g, &x)| g * hardswish_grad(x))
                .collect();
            sink.add(ia, Tensor::new(g.shape(), d));
        })
    }
}
