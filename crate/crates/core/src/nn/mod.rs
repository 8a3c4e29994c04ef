//! Neural-network primitives: convolutions, batch normalization,
//! activations, softmax, batched matrix products, and the layer modules
//! built from them.
//!
//! Functional forms live on [`Var`] (`x.conv3d(w, &spec)`, `x.softmax(1)`);
//! the structs here own parameter handles and wire those functions together.

mod activation;
mod conv;
mod linear;
mod loss;
mod matmul;
mod norm;
mod softmax;

pub use activation::Activation;
pub use conv::{conv3d_reference, Conv3d, Conv3dSpec, SepConv3d};
pub use linear::Linear;
pub use loss::masked_cross_entropy_reference;
pub use norm::{BatchNorm, BN_EPS, BN_MOMENTUM};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{BufferId, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// LeakyReLU negative slope used throughout.
pub const LEAKY_SLOPE: f64 = 0.01;

enum StoreRef<'s, T> {
    Shared(&'s ParamStore<T>),
    Exclusive(&'s mut ParamStore<T>),
}

/// Everything a module needs during one forward pass.
pub struct Ctx<'g, 's, T: Scalar> {
    pub graph: &'g Graph<T>,
    store: StoreRef<'s, T>,
    train: bool,
}

impl<'g, 's, T: Scalar> Ctx<'g, 's, T> {
    /// Training mode: batch statistics, running-stat updates.
    pub fn train(graph: &'g Graph<T>, store: &'s mut ParamStore<T>) -> Self {
        Ctx {
            graph,
            store: StoreRef::Exclusive(store),
            train: true,
        }
    }

    /// Evaluation mode: running statistics only, store is read-only.
    pub fn eval(graph: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Ctx {
            graph,
            store: StoreRef::Shared(store),
            train: false,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        match &self.store {
            StoreRef::Shared(s) => s,
            StoreRef::Exclusive(s) => s,
        }
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore<T> {
        match &mut self.store {
            StoreRef::Exclusive(s) => s,
            StoreRef::Shared(_) => panic!("training-mode forward needs exclusive access to the parameter store"),
        }
    }

    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        self.graph.param(self.store(), id)
    }
}

/// Allocates and initializes parameters in a store.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder { store, rng }
    }

    /// Uniform(−b, b) with b = sqrt(6 / fan_in).
    pub fn kaiming_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::c(self.rng.random_range(-bound..bound)))
            .collect();
        self.store.add(name, ParamGroup::Weight, Tensor::new(shape, data))
    }

    pub fn constant(&mut self, name: &str, group: ParamGroup, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, group, Tensor::full(shape, T::c(value)))
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> BufferId {
        self.store.add_buffer(name, Tensor::full(shape, T::c(value)))
    }
}
