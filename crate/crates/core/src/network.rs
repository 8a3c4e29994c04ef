//! Pieces shared by the supernet and the compact network, and the compact
//! network itself.
//!
//! Data flow for an input patch `(B, 1, bands, H, W)`:
//!
//! 1. stem: `Conv(3×1×1, spectral stride 2)`, BN, LeakyReLU to `width`
//!    channels;
//! 2. layer `l` reads `h[l-1]` and `h[l-2]` (the stem output stands in for
//!    missing predecessors), projects each with LeakyReLU, a `1×1×1` conv and
//!    BN to `width` channels at half the previous layer's spectral depth, and
//!    runs its cell;
//! 3. head: mean over the spectral axis, optional attention blocks, then a
//!    per-pixel linear classifier to `(B, classes, H, W)`.
//!
//! Spatial extents are preserved throughout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::derivation::{Genotype, NetShape};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Builder, Conv3d, Conv3dSpec, Ctx, Linear, LEAKY_SLOPE};
use crate::params::{ParamGroup, ParamStore};
use crate::search_space::{sum_terms, Candidate, CellKind};
use crate::tensor::Scalar;
use crate::transformer::{TransformerBlock, TransformerConfig};

/// Anything that maps input patches to per-pixel class logits.
pub trait Model {
    fn shape(&self) -> &NetShape;

    /// `(B, 1, bands, H, W) → (B, classes, H, W)`.
    fn logits<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T>;

    /// The only spatial patch size the model accepts, if it has one.
    fn fixed_grid(&self) -> Option<(usize, usize)> {
        None
    }
}

/// Spectral depth after the stem and after each layer.
pub fn spectral_depths(bands: usize, layers: usize) -> (usize, Vec<usize>) {
    let stem = bands.div_ceil(2);
    let mut d = stem;
    let per_layer = (0..layers)
        .map(|_| {
            d = d.div_ceil(2);
            d
        })
        .collect();
    (stem, per_layer)
}

#[derive(Clone, Debug)]
pub struct Stem {
    conv: Conv3d,
    bn: BatchNorm,
}

impl Stem {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, width: usize) -> Self {
        let spec = Conv3dSpec::same(1, width, [3, 1, 1]).with_stride([2, 1, 1]);
        Stem {
            conv: Conv3d::new(b, "stem.conv", spec),
            bn: BatchNorm::new(b, "stem.bn", width),
        }
    }

    fn forward<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = self.conv.forward(cx, x);
        self.bn.forward(cx, y).leaky_relu(LEAKY_SLOPE)
    }
}

/// LeakyReLU, strided `1×1×1` conv, BN.
#[derive(Clone, Debug)]
pub struct InputProjection {
    conv: Conv3d,
    bn: BatchNorm,
}

impl InputProjection {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let spec = Conv3dSpec::same(cin, cout, [1, 1, 1]).with_stride([stride, 1, 1]);
        InputProjection {
            conv: Conv3d::new(b, &format!("{name}.conv"), spec),
            bn: BatchNorm::new(b, &format!("{name}.bn"), cout),
        }
    }

    fn forward<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = self.conv.forward(cx, x.leaky_relu(LEAKY_SLOPE));
        self.bn.forward(cx, y)
    }
}

/// Stem, per-layer input projections and classifier: everything except the
/// cells and the attention blocks.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub shape: NetShape,
    stem: Stem,
    projections: Vec<[InputProjection; 2]>,
    classifier: Linear,
}

impl Backbone {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, shape: &NetShape) -> Self {
        let (w, cc) = (shape.width, shape.cell_channels());
        let stem = Stem::new(b, w);
        let projections = (0..shape.layers)
            .map(|l| {
                // sources: h[l-1] and h[l-2]; index -1 is the stem
                let src = |back: usize| l as isize - back as isize;
                let proj = |b: &mut Builder<'_, T>, k: usize, back: usize| {
                    let s = src(back).max(-1);
                    let cin = if s < 0 { w } else { cc };
                    let stride = 1usize << (l as isize - s) as u32;
                    InputProjection::new(b, &format!("layers.{l}.pre{k}"), cin, w, stride)
                };
                [proj(b, 0, 1), proj(b, 1, 2)]
            })
            .collect();
        let classifier = Linear::new(b, "head.classifier", cc, shape.classes, true);
        Backbone {
            shape: *shape,
            stem,
            projections,
            classifier,
        }
    }

    /// Runs stem and layers; `cell(cx, l, a, b)` computes layer `l` from its
    /// two projected inputs. Returns the last layer output.
    pub fn encode<'g, T: Scalar>(
        &self,
        cx: &mut Ctx<'g, '_, T>,
        x: Var<'g, T>,
        mut cell: impl FnMut(&mut Ctx<'g, '_, T>, usize, Var<'g, T>, Var<'g, T>) -> Var<'g, T>,
    ) -> Var<'g, T> {
        let s = x.shape();
        assert!(
            s.len() == 5 && s[1] == 1 && s[2] == self.shape.bands,
            "expected input (B, 1, {}, H, W), got {s:?}",
            self.shape.bands
        );
        let stem = self.stem.forward(cx, x);
        let mut outputs: Vec<Var<'g, T>> = Vec::with_capacity(self.shape.layers);
        for (l, [p0, p1]) in self.projections.iter().enumerate() {
            let prev = |back: usize| if l >= back { outputs[l - back] } else { stem };
            let a = p0.forward(cx, prev(1));
            let b = p1.forward(cx, prev(2));
            let h = cell(cx, l, a, b);
            outputs.push(h);
        }
        *outputs.last().expect("at least one layer")
    }

    /// Spectral mean of the encoder output: `(B, C, D, H, W) → (B, C, H, W)`.
    pub fn pool<'g, T: Scalar>(&self, h: Var<'g, T>) -> Var<'g, T> {
        h.mean_axis(2)
    }

    /// Per-pixel classifier: `(B, C, H, W) → (B, classes, H, W)`.
    pub fn classify<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, f: Var<'g, T>) -> Var<'g, T> {
        let y = self.classifier.forward(cx, f.permute(&[0, 2, 3, 1]));
        y.permute(&[0, 3, 1, 2])
    }
}

/// A cell with fixed topology: each node sums two chosen operations.
#[derive(Clone, Debug)]
pub struct CompactCell {
    pub kind: CellKind,
    /// `nodes[i]`: `(input index, operation)` pairs.
    pub nodes: Vec<Vec<(usize, Candidate)>>,
}

impl CompactCell {
    pub fn forward<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, in1: Var<'g, T>, in2: Var<'g, T>) -> Var<'g, T> {
        let shape = in1.shape();
        assert_eq!(shape, in2.shape(), "cell inputs must have identical shapes");
        let mut states = vec![in1, in2];
        for node in &self.nodes {
            let terms = node.iter().map(|(j, op)| op.forward(cx, states[*j])).collect();
            let out = sum_terms(cx, terms, &shape);
            states.push(out);
        }
        cx.graph.concat(&states[2..], 1)
    }
}

/// The network described by a genotype, with optional attention blocks
/// before the classifier.
#[derive(Clone, Debug)]
pub struct CompactNet {
    pub genotype: Genotype,
    pub backbone: Backbone,
    pub cells: Vec<CompactCell>,
    pub blocks: Vec<TransformerBlock>,
    pub grid: Option<(usize, usize)>,
}

impl CompactNet {
    /// Builds the network with fresh weights. `grid` is the spatial patch
    /// size the attention blocks are fixed to; it is ignored when
    /// `transformer.blocks == 0`.
    pub fn build<T: Scalar>(
        genotype: &Genotype,
        transformer: &TransformerConfig,
        grid: (usize, usize),
        seed: u64,
    ) -> Result<(CompactNet, ParamStore<T>)> {
        genotype.validate()?;
        let shape = genotype.shape;
        if transformer.blocks > 0 {
            let c = shape.cell_channels();
            if transformer.heads == 0 || c % transformer.heads != 0 {
                return Err(Error::config(
                    "transformer.heads",
                    format!("{c} feature channels (nodes × width) are not divisible by {} heads", transformer.heads),
                ));
            }
            if transformer.mlp_ratio == 0 {
                return Err(Error::config("transformer.mlp_ratio", "must be positive"));
            }
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let backbone = Backbone::new(&mut b, &shape);
        let cells = genotype
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| CompactCell {
                kind: layer.cell,
                nodes: layer
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(i, edges)| {
                        edges
                            .iter()
                            .map(|e| {
                                let prefix = format!("layers.{l}.{}.node{i}.edge{}", layer.cell, e.input);
                                (e.input, Candidate::build(&mut b, &prefix, e.op, shape.width))
                            })
                            .collect()
                    })
                    .collect(),
            })
            .collect();
        let blocks = (0..transformer.blocks)
            .map(|k| TransformerBlock::new(&mut b, &format!("transformer.{k}"), shape.cell_channels(), transformer, grid))
            .collect();
        let net = CompactNet {
            genotype: genotype.clone(),
            backbone,
            cells,
            blocks,
            grid: (transformer.blocks > 0).then_some(grid),
        };
        log::info!(
            "compact network: {} weight parameters, {} attention blocks",
            store.count(ParamGroup::Weight),
            transformer.blocks
        );
        Ok((net, store))
    }

    /// Logits plus the attention weights of every block.
    pub fn logits_with_attention<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, x: Var<'g, T>) -> (Var<'g, T>, Vec<Var<'g, T>>) {
        let h = self.backbone.encode(cx, x, |cx, l, a, b| self.cells[l].forward(cx, a, b));
        let mut f = self.backbone.pool(h);
        let mut maps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, w) = block.forward_with_weights(cx, f);
            f = y;
            maps.push(w);
        }
        (self.backbone.classify(cx, f), maps)
    }
}

impl Model for CompactNet {
    fn shape(&self) -> &NetShape {
        &self.backbone.shape
    }

    fn logits<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.logits_with_attention(cx, x).0
    }

    fn fixed_grid(&self) -> Option<(usize, usize)> {
        self.grid
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depths_halve_and_clamp_at_one() {
        assert_eq!(spectral_depths(16, 4), (8, vec![4, 2, 1, 1]));
        assert_eq!(spectral_depths(103, 3), (52, vec![26, 13, 7]));
        assert_eq!(spectral_depths(1, 2), (1, vec![1, 1]));
    }

    #[test]
    fn projection_strides_reach_each_layer_depth() {
        // ceil(ceil(d/2)/2) == ceil(d/4) for every depth the stem can produce
        for d in 1..200usize {
            assert_eq!(d.div_ceil(2).div_ceil(2), d.div_ceil(4));
        }
    }
}
