//! The supernet: shared backbone plus one [`SuperLayer`] per layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::derivation::{ArchSnapshot, CellArch, LayerArch, NetShape};
use crate::error::{Error, Result};
use crate::network::{Backbone, Model};
use crate::nn::{Builder, Ctx};
use crate::params::{ParamGroup, ParamStore};
use crate::search_space::{CellKind, SearchSpace, SuperCell, SuperLayer, MENU_LEN};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct SuperNet {
    pub space: SearchSpace,
    pub backbone: Backbone,
    pub layers: Vec<SuperLayer>,
}

/// Parameter totals of a freshly built network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub weight: usize,
    pub arch: usize,
}

impl SuperNet {
    /// Deterministic in `shape`, `space` and `seed`.
    pub fn build<T: Scalar>(shape: &NetShape, space: SearchSpace, seed: u64) -> Result<(SuperNet, ParamStore<T>)> {
        shape.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let backbone = Backbone::new(&mut b, shape);
        let layers = (0..shape.layers)
            .map(|l| SuperLayer::new(&mut b, &format!("layers.{l}"), space, shape.nodes, shape.width))
            .collect();
        let net = SuperNet {
            space,
            backbone,
            layers,
        };
        let r = net.param_report(&store);
        log::info!("supernet: {} weight parameters, {} architecture parameters", r.weight, r.arch);
        Ok((net, store))
    }

    pub fn param_report<T: Scalar>(&self, store: &ParamStore<T>) -> ParamReport {
        ParamReport {
            weight: store.count(ParamGroup::Weight),
            arch: store.count(ParamGroup::Arch),
        }
    }

    /// Current architecture logits.
    pub fn arch_snapshot<T: Scalar>(&self, store: &ParamStore<T>) -> ArchSnapshot {
        ArchSnapshot {
            shape: self.backbone.shape,
            normalized: false,
            layers: self
                .layers
                .iter()
                .map(|l| LayerArch {
                    alpha: store.value(l.alpha).item().f64(),
                    beta: store.value(l.beta).item().f64(),
                    spa: l.spa.as_ref().map(|c| c.omegas(store)),
                    spe: l.spe.as_ref().map(|c| c.omegas(store)),
                })
                .collect(),
        }
    }

    /// Overwrites the architecture logits from a snapshot of logits.
    pub fn load_arch<T: Scalar>(&self, store: &mut ParamStore<T>, snap: &ArchSnapshot) -> Result<()> {
        if snap.normalized {
            return Err(Error::Contract("cannot load softmax weights as logits".into()));
        }
        if snap.shape != self.backbone.shape || snap.layers.len() != self.layers.len() {
            return Err(Error::Contract("snapshot shape does not match the supernet".into()));
        }
        for (layer, arch) in self.layers.iter().zip(&snap.layers) {
            store.set(layer.alpha, Tensor::from_f64(&[1], &[arch.alpha]));
            store.set(layer.beta, Tensor::from_f64(&[1], &[arch.beta]));
            for kind in [CellKind::Spa, CellKind::Spe] {
                match (layer.cell(kind), arch.cell(kind)) {
                    (Some(cell), Some(a)) => load_cell(store, cell, a)?,
                    (None, None) => {}
                    _ => return Err(Error::Contract(format!("snapshot and supernet disagree on {kind} cells"))),
                }
            }
        }
        Ok(())
    }
}

fn load_cell<T: Scalar>(store: &mut ParamStore<T>, cell: &SuperCell, arch: &CellArch) -> Result<()> {
    if arch.len() != cell.edges.len() {
        return Err(Error::Contract("snapshot node count does not match".into()));
    }
    for (node, a) in cell.edges.iter().zip(arch) {
        if a.len() != node.len() {
            return Err(Error::Contract("snapshot edge count does not match".into()));
        }
        for (edge, w) in node.iter().zip(a) {
            if w.len() != MENU_LEN {
                return Err(Error::Contract("snapshot edge has the wrong number of candidates".into()));
            }
            store.set(edge.omega, Tensor::from_f64(&[MENU_LEN], w));
        }
    }
    Ok(())
}

impl Model for SuperNet {
    fn shape(&self) -> &NetShape {
        &self.backbone.shape
    }

    fn logits<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.backbone.encode(cx, x, |cx, l, a, b| self.layers[l].forward(cx, a, b));
        let f = self.backbone.pool(h);
        self.backbone.classify(cx, f)
    }
}
