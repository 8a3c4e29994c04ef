//! The hybrid search space: two candidate menus, mixed edges, supercells and
//! super-layers.
//!
//! A space-dominated cell (`spa`) offers spatial `1×k×k` convolutions, a
//! spectrum-dominated cell (`spe`) offers spectral `k×1×1` convolutions, and
//! both share the factorized `1×3×3 → k×1×1` candidates, the identity and the
//! zero op.
//!
//! Note on `econ_5-1`: it is built with a `5×1×1` kernel, following the
//! `_3`/`_5` naming of every other pair. A `3×1×1` kernel would make it a
//! duplicate of `econ_3-1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::nn::{BatchNorm, Builder, Conv3d, Conv3dSpec, Ctx, SepConv3d, LEAKY_SLOPE};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Scalar;

/// Number of candidates on every mixed edge.
pub const MENU_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpName {
    #[serde(rename = "acon_3-1")]
    Acon3,
    #[serde(rename = "acon_5-1")]
    Acon5,
    #[serde(rename = "asep_3-1")]
    Asep3,
    #[serde(rename = "asep_5-1")]
    Asep5,
    #[serde(rename = "econ_3-1")]
    Econ3,
    #[serde(rename = "econ_5-1")]
    Econ5,
    #[serde(rename = "esep_3-1")]
    Esep3,
    #[serde(rename = "esep_5-1")]
    Esep5,
    #[serde(rename = "con_3-3")]
    Con33,
    #[serde(rename = "con_3-5")]
    Con35,
    #[serde(rename = "skip_connection")]
    Skip,
    #[serde(rename = "discarding")]
    Discarding,
}

/// How a candidate is classified in genotype statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpFamily {
    Spatial2d,
    Spectral2d,
    ThreeD,
    Skip,
    Zero,
}

/// One stage of a candidate's pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    LeakyRelu,
    Conv([usize; 3]),
    Sep([usize; 3]),
    BatchNorm,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Primitive::LeakyRelu => write!(f, "LReLU"),
            Primitive::Conv([d, h, w]) => write!(f, "Conv({d}x{h}x{w})"),
            Primitive::Sep([d, h, w]) => write!(f, "Sep({d}x{h}x{w})"),
            Primitive::BatchNorm => write!(f, "BN"),
        }
    }
}

impl OpName {
    pub const ALL: [OpName; 12] = [
        OpName::Acon3,
        OpName::Acon5,
        OpName::Asep3,
        OpName::Asep5,
        OpName::Econ3,
        OpName::Econ5,
        OpName::Esep3,
        OpName::Esep5,
        OpName::Con33,
        OpName::Con35,
        OpName::Skip,
        OpName::Discarding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpName::Acon3 => "acon_3-1",
            OpName::Acon5 => "acon_5-1",
            OpName::Asep3 => "asep_3-1",
            OpName::Asep5 => "asep_5-1",
            OpName::Econ3 => "econ_3-1",
            OpName::Econ5 => "econ_5-1",
            OpName::Esep3 => "esep_3-1",
            OpName::Esep5 => "esep_5-1",
            OpName::Con33 => "con_3-3",
            OpName::Con35 => "con_3-5",
            OpName::Skip => "skip_connection",
            OpName::Discarding => "discarding",
        }
    }

    pub fn family(self) -> OpFamily {
        match self {
            OpName::Acon3 | OpName::Acon5 | OpName::Asep3 | OpName::Asep5 => OpFamily::Spatial2d,
            OpName::Econ3 | OpName::Econ5 | OpName::Esep3 | OpName::Esep5 => OpFamily::Spectral2d,
            OpName::Con33 | OpName::Con35 => OpFamily::ThreeD,
            OpName::Skip => OpFamily::Skip,
            OpName::Discarding => OpFamily::Zero,
        }
    }

    /// The primitive sequence; empty for the identity and zero ops.
    pub fn pipeline(self) -> Vec<Primitive> {
        use Primitive::*;
        let body = match self {
            OpName::Acon3 => vec![Conv([1, 3, 3])],
            OpName::Acon5 => vec![Conv([1, 5, 5])],
            OpName::Asep3 => vec![Sep([1, 3, 3])],
            OpName::Asep5 => vec![Sep([1, 5, 5])],
            OpName::Econ3 => vec![Conv([3, 1, 1])],
            OpName::Econ5 => vec![Conv([5, 1, 1])],
            OpName::Esep3 => vec![Sep([3, 1, 1])],
            OpName::Esep5 => vec![Sep([5, 1, 1])],
            OpName::Con33 => vec![Conv([1, 3, 3]), Conv([3, 1, 1])],
            OpName::Con35 => vec![Conv([1, 3, 3]), Conv([5, 1, 1])],
            OpName::Skip | OpName::Discarding => return Vec::new(),
        };
        let mut p = vec![LeakyRelu];
        p.extend(body);
        p.push(BatchNorm);
        p
    }

    pub fn is_discarding(self) -> bool {
        self == OpName::Discarding
    }
}

impl fmt::Display for OpName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpName::ALL
            .iter()
            .copied()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| format!("unknown candidate operation {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Spa,
    Spe,
}

impl CellKind {
    pub fn menu(self) -> &'static [OpName; MENU_LEN] {
        const SPA: [OpName; MENU_LEN] = [
            OpName::Acon3,
            OpName::Acon5,
            OpName::Asep3,
            OpName::Asep5,
            OpName::Con33,
            OpName::Con35,
            OpName::Skip,
            OpName::Discarding,
        ];
        const SPE: [OpName; MENU_LEN] = [
            OpName::Econ3,
            OpName::Econ5,
            OpName::Esep3,
            OpName::Esep5,
            OpName::Con33,
            OpName::Con35,
            OpName::Skip,
            OpName::Discarding,
        ];
        match self {
            CellKind::Spa => &SPA,
            CellKind::Spe => &SPE,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Spa => "spa",
            CellKind::Spe => "spe",
        }
    }

    /// Position of `op` in this kind's menu.
    pub fn index_of(self, op: OpName) -> Option<usize> {
        self.menu().iter().position(|&o| o == op)
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which cell kinds each super-layer offers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchSpace {
    #[default]
    Hybrid,
    SpatialOnly,
    SpectralOnly,
}

impl SearchSpace {
    pub fn kinds(self) -> &'static [CellKind] {
        match self {
            SearchSpace::Hybrid => &[CellKind::Spa, CellKind::Spe],
            SearchSpace::SpatialOnly => &[CellKind::Spa],
            SearchSpace::SpectralOnly => &[CellKind::Spe],
        }
    }
}

impl FromStr for SearchSpace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hybrid" => Ok(SearchSpace::Hybrid),
            "spatial_only" | "spatial-only" => Ok(SearchSpace::SpatialOnly),
            "spectral_only" | "spectral-only" => Ok(SearchSpace::SpectralOnly),
            _ => Err(format!("unknown search space {s:?} (hybrid, spatial-only, spectral-only)")),
        }
    }
}

#[derive(Clone, Debug)]
enum Body {
    Conv(Conv3d),
    Sep(SepConv3d),
    Factorized(Conv3d, Conv3d),
    Identity,
    Zero,
}

/// An instantiated candidate operation with its own parameters.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub name: OpName,
    body: Body,
    bn: Option<BatchNorm>,
}

impl Candidate {
    /// Builds `name` with `channels` in and out. Parameters are registered
    /// under `{prefix}.{name}`.
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, prefix: &str, name: OpName, channels: usize) -> Self {
        let p = format!("{prefix}.{name}");
        let conv = |b: &mut Builder<'_, T>, tag: &str, k: [usize; 3]| {
            Conv3d::new(b, &format!("{p}.{tag}"), Conv3dSpec::same(channels, channels, k))
        };
        let kernels: Vec<_> = name
            .pipeline()
            .into_iter()
            .filter_map(|s| match s {
                Primitive::Conv(k) | Primitive::Sep(k) => Some(k),
                _ => None,
            })
            .collect();
        let body = match name {
            OpName::Skip => Body::Identity,
            OpName::Discarding => Body::Zero,
            OpName::Asep3 | OpName::Asep5 | OpName::Esep3 | OpName::Esep5 => Body::Sep(SepConv3d::new(
                b,
                &format!("{p}.sep"),
                Conv3dSpec::same(channels, channels, kernels[0]).separable(),
            )),
            OpName::Con33 | OpName::Con35 => {
                Body::Factorized(conv(b, "conv_a", kernels[0]), conv(b, "conv_b", kernels[1]))
            }
            _ => Body::Conv(conv(b, "conv", kernels[0])),
        };
        let bn = matches!(body, Body::Conv(_) | Body::Sep(_) | Body::Factorized(..))
            .then(|| BatchNorm::new(b, &format!("{p}.bn"), channels));
        Candidate { name, body, bn }
    }

    /// `None` stands for the zero op so callers can skip the work.
    pub fn forward<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, x: Var<'g, T>) -> Option<Var<'g, T>> {
        let y = match &self.body {
            Body::Zero => return None,
            Body::Identity => return Some(x),
            Body::Conv(c) => c.forward(cx, x.leaky_relu(LEAKY_SLOPE)),
            Body::Sep(s) => s.forward(cx, x.leaky_relu(LEAKY_SLOPE)),
            Body::Factorized(a, b) => {
                let h = a.forward(cx, x.leaky_relu(LEAKY_SLOPE));
                b.forward(cx, h)
            }
        };
        Some(self.bn.as_ref().expect("parametric candidate has BN").forward(cx, y))
    }

    /// Like [`Candidate::forward`] but materializes the zero op.
    pub fn forward_dense<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.forward(cx, x).unwrap_or_else(|| cx.graph.zeros(&x.shape()))
    }
}

/// A weighted sum of every candidate of one menu, weighted by `softmax(ω)`.
#[derive(Clone, Debug)]
pub struct MixedEdge {
    pub kind: CellKind,
    pub ops: Vec<Candidate>,
    pub omega: ParamId,
}

impl MixedEdge {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, prefix: &str, kind: CellKind, channels: usize) -> Self {
        let ops = kind
            .menu()
            .iter()
            .map(|&op| Candidate::build(b, prefix, op, channels))
            .collect();
        let omega = b.constant(&format!("{prefix}.omega"), ParamGroup::Arch, &[MENU_LEN], 0.0);
        MixedEdge { kind, ops, omega }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = cx.param(self.omega).softmax(0);
        let terms: Vec<_> = self.ops.iter().map(|op| op.forward(cx, x)).collect();
        cx.graph.weighted_sum(&terms, w, &x.shape())
    }
}

/// A cell of `nodes` nodes; node `i` sums one mixed edge from each of the
/// two cell inputs and each earlier node. The output concatenates all node
/// outputs along channels.
#[derive(Clone, Debug)]
pub struct SuperCell {
    pub kind: CellKind,
    pub channels: usize,
    /// `edges[i][j]`: edge into node `i` from input `j` (0, 1 = cell inputs,
    /// `2 + k` = node `k`).
    pub edges: Vec<Vec<MixedEdge>>,
}

/// Sums node inputs; shared with the compact cell.
pub(crate) fn sum_terms<'g, T: Scalar>(cx: &Ctx<'g, '_, T>, terms: Vec<Option<Var<'g, T>>>, shape: &[usize]) -> Var<'g, T> {
    terms
        .into_iter()
        .flatten()
        .reduce(|a, b| a.add(b))
        .unwrap_or_else(|| cx.graph.zeros(shape))
}

impl SuperCell {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, prefix: &str, kind: CellKind, nodes: usize, channels: usize) -> Self {
        assert!(nodes >= 1, "a cell needs at least one node");
        let edges = (0..nodes)
            .map(|i| {
                (0..i + 2)
                    .map(|j| MixedEdge::new(b, &format!("{prefix}.node{i}.edge{j}"), kind, channels))
                    .collect()
            })
            .collect();
        SuperCell {
            kind,
            channels,
            edges,
        }
    }

    pub fn nodes(&self) -> usize {
        self.edges.len()
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, in1: Var<'g, T>, in2: Var<'g, T>) -> Var<'g, T> {
        let shape = in1.shape();
        assert_eq!(shape, in2.shape(), "cell inputs must have identical shapes");
        assert_eq!(shape[1], self.channels, "cell expects {} channels", self.channels);
        let mut states = vec![in1, in2];
        for node in &self.edges {
            let terms = node
                .iter()
                .zip(&states)
                .map(|(e, &s)| Some(e.forward(cx, s)))
                .collect();
            let out = sum_terms(cx, terms, &shape);
            states.push(out);
        }
        cx.graph.concat(&states[2..], 1)
    }

    /// Raw ω logits as `[node][input][candidate]`.
    pub fn omegas<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<Vec<Vec<f64>>> {
        self.edges
            .iter()
            .map(|node| {
                node.iter()
                    .map(|e| store.value(e.omega).data().iter().map(|x| x.f64()).collect())
                    .collect()
            })
            .collect()
    }
}

/// One layer of the supernet: up to two supercells fused by
/// `softmax(α, β)`.
#[derive(Clone, Debug)]
pub struct SuperLayer {
    pub spa: Option<SuperCell>,
    pub spe: Option<SuperCell>,
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl SuperLayer {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, prefix: &str, space: SearchSpace, nodes: usize, channels: usize) -> Self {
        let kinds = space.kinds();
        let spa = kinds
            .contains(&CellKind::Spa)
            .then(|| SuperCell::new(b, &format!("{prefix}.spa"), CellKind::Spa, nodes, channels));
        let spe = kinds
            .contains(&CellKind::Spe)
            .then(|| SuperCell::new(b, &format!("{prefix}.spe"), CellKind::Spe, nodes, channels));
        let alpha = b.constant(&format!("{prefix}.alpha"), ParamGroup::Arch, &[1], 0.0);
        let beta = b.constant(&format!("{prefix}.beta"), ParamGroup::Arch, &[1], 0.0);
        SuperLayer { spa, spe, alpha, beta }
    }

    pub fn cell(&self, kind: CellKind) -> Option<&SuperCell> {
        match kind {
            CellKind::Spa => self.spa.as_ref(),
            CellKind::Spe => self.spe.as_ref(),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
        match (&self.spa, &self.spe) {
            (Some(spa), Some(spe)) => {
                let w = cx
                    .graph
                    .concat(&[cx.param(self.alpha), cx.param(self.beta)], 0)
                    .softmax(0);
                let s = spa.forward(cx, a, b);
                let e = spe.forward(cx, a, b);
                let shape = s.shape();
                cx.graph.weighted_sum(&[Some(s), Some(e)], w, &shape)
            }
            (Some(only), None) | (None, Some(only)) => only.forward(cx, a, b),
            (None, None) => unreachable!("a layer has at least one cell"),
        }
    }
}

/// Menu description for documentation dumps.
pub fn menu_json() -> serde_json::Value {
    let cells: Vec<_> = [CellKind::Spa, CellKind::Spe]
        .iter()
        .map(|&kind| {
            let ops: Vec<_> = kind
                .menu()
                .iter()
                .map(|&op| {
                    let pipeline: Vec<String> = op.pipeline().iter().map(|p| p.to_string()).collect();
                    let function = match op {
                        OpName::Skip => "f(x)=x".to_string(),
                        OpName::Discarding => "f(x)=0".to_string(),
                        _ => pipeline.join("-"),
                    };
                    serde_json::json!({
                        "name": op.as_str(),
                        "family": op.family(),
                        "pipeline": pipeline,
                        "function": function,
                    })
                })
                .collect();
            serde_json::json!({ "cell": kind.as_str(), "ops": ops })
        })
        .collect();
    serde_json::json!({ "menu_len": MENU_LEN, "cells": cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn param_count(store: &ParamStore<f64>, prefix: &str) -> usize {
        store
            .params()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(_, p)| p.tensor.len())
            .sum()
    }

    #[test]
    fn names_round_trip() {
        for op in OpName::ALL {
            assert_eq!(op.as_str().parse::<OpName>().unwrap(), op);
            let json = serde_json::to_string(&op).unwrap();
            assert_eq!(json, format!("\"{}\"", op.as_str()));
        }
        assert!("conv_7".parse::<OpName>().is_err());
    }

    #[test]
    fn both_menus_have_eight_candidates_ending_in_skip_and_zero() {
        for kind in [CellKind::Spa, CellKind::Spe] {
            let m = kind.menu();
            assert_eq!(m.len(), MENU_LEN);
            assert_eq!(m[6], OpName::Skip);
            assert_eq!(m[7], OpName::Discarding);
            for op in &m[..6] {
                let p = op.pipeline();
                assert_eq!(p.first(), Some(&Primitive::LeakyRelu));
                assert_eq!(p.last(), Some(&Primitive::BatchNorm));
            }
        }
        assert_eq!(OpName::Econ5.pipeline()[1], Primitive::Conv([5, 1, 1]));
        assert_eq!(OpName::Con35.pipeline()[1..3], [Primitive::Conv([1, 3, 3]), Primitive::Conv([5, 1, 1])]);
    }

    #[test]
    fn factorized_candidate_parameter_count() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        Candidate::build(&mut b, "e", OpName::Con35, 4);
        assert_eq!(param_count(&store, "e.con_3-5"), 4 * 4 * 9 + 4 * 4 * 5 + 2 * 4);
    }

    #[test]
    fn identity_and_zero_candidates() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let skip = Candidate::build(&mut b, "e", OpName::Skip, 8);
        let zero = Candidate::build(&mut b, "e", OpName::Discarding, 8);
        assert!(store.is_empty());
        let g = Graph::new();
        let x = random(&[1, 8, 2, 3, 3], 1);
        let mut cx = Ctx::eval(&g, &store);
        let xv = g.constant(x.clone());
        assert_eq!(*skip.forward(&mut cx, xv).unwrap().value(), x);
        assert!(zero.forward_dense(&mut cx, xv).value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_omega_selects_skip() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let edge = MixedEdge::new(&mut Builder::new(&mut store, &mut rng), "e", CellKind::Spa, 2);
        let mut logits = vec![-20.0; MENU_LEN];
        logits[6] = 20.0;
        store.set(edge.omega, Tensor::from_f64(&[MENU_LEN], &logits));
        let x = random(&[2, 2, 3, 4, 4], 2);
        let g = Graph::new();
        let y = edge.forward(&mut Ctx::train(&g, &mut store), g.constant(x.clone())).value();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn mixed_edge_matches_direct_summation() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let edge = MixedEdge::new(&mut Builder::new(&mut store, &mut rng), "e", CellKind::Spe, 2);
        let omega = random(&[MENU_LEN], 4);
        store.set(edge.omega, omega.clone());
        let x = random(&[2, 2, 5, 3, 3], 5);
        let g = Graph::new();
        let y = edge.forward(&mut Ctx::eval(&g, &store), g.constant(x.clone())).value();

        let m = omega.data().iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = omega.data().iter().map(|v| (v - m).exp()).sum();
        let mut want = Tensor::zeros(x.shape());
        for (op, &w) in edge.ops.iter().zip(omega.data()) {
            let g2 = Graph::new();
            let o = op.forward_dense(&mut Ctx::eval(&g2, &store), g2.constant(x.clone())).value();
            for (acc, v) in want.data_mut().iter_mut().zip(o.data()) {
                *acc += (w - m).exp() / z * v;
            }
        }
        assert!(y.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn cell_output_concatenates_nodes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = SuperCell::new(&mut Builder::new(&mut store, &mut rng), "c", CellKind::Spa, 3, 2);
        assert_eq!(cell.edges.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 3, 4]);
        let g = Graph::new();
        let a = g.constant(random(&[1, 2, 3, 4, 4], 1));
        let b = g.constant(random(&[1, 2, 3, 4, 4], 2));
        let y = cell.forward(&mut Ctx::train(&g, &mut store), a, b);
        assert_eq!(y.shape(), vec![1, 6, 3, 4, 4]);
    }

    #[test]
    fn single_node_with_skip_edges_sums_inputs() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = SuperCell::new(&mut Builder::new(&mut store, &mut rng), "c", CellKind::Spe, 1, 2);
        let mut logits = vec![-40.0; MENU_LEN];
        logits[6] = 40.0;
        for e in &cell.edges[0] {
            store.set(e.omega, Tensor::from_f64(&[MENU_LEN], &logits));
        }
        let (a, b) = (random(&[1, 2, 2, 3, 3], 1), random(&[1, 2, 2, 3, 3], 2));
        let g = Graph::new();
        let y = cell
            .forward(&mut Ctx::train(&g, &mut store), g.constant(a.clone()), g.constant(b.clone()))
            .value();
        let want = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect());
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn equal_fusion_logits_average_the_cells() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = SuperLayer::new(&mut Builder::new(&mut store, &mut rng), "l", SearchSpace::Hybrid, 2, 2);
        let (a, b) = (random(&[1, 2, 3, 3, 3], 1), random(&[1, 2, 3, 3, 3], 2));
        // which: 0 = fused layer, 1 = spa cell, 2 = spe cell
        let run = |store: &ParamStore<f64>, which: usize| -> Tensor<f64> {
            let g = Graph::new();
            let mut cx = Ctx::eval(&g, store);
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            let out = match which {
                0 => layer.forward(&mut cx, x, y),
                1 => layer.spa.as_ref().unwrap().forward(&mut cx, x, y),
                _ => layer.spe.as_ref().unwrap().forward(&mut cx, x, y),
            };
            (*out.value()).clone()
        };
        let (fused, spa, spe) = (run(&store, 0), run(&store, 1), run(&store, 2));
        let want = Tensor::new(spa.shape(), spa.data().iter().zip(spe.data()).map(|(p, q)| 0.5 * (p + q)).collect());
        assert!(fused.max_abs_diff(&want) < 1e-12);

        store.set(layer.alpha, Tensor::scalar(20.0).reshaped(&[1]));
        store.set(layer.beta, Tensor::scalar(-20.0).reshaped(&[1]));
        let fused = run(&store, 0);
        assert!(fused.max_abs_diff(&spa) < 1e-6 * (1.0 + spe.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))));
    }

    #[test]
    fn menu_dump_lists_both_cells() {
        let v = menu_json();
        assert_eq!(v["cells"][0]["cell"], "spa");
        assert_eq!(v["cells"][1]["ops"][1]["pipeline"][1], "Conv(5x1x1)");
        assert_eq!(v["cells"][0]["ops"][6]["function"], "f(x)=x");
    }
}
