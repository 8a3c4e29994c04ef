//! The attention block grafted onto the compact network.
//!
//! Features `(B, C, H, W)` are flattened row-major into `N = H·W` tokens.
//! Each head attends with `softmax(QKᵀ/√d_k + B)` where `B` is a learned
//! bias looked up by the absolute coordinate offsets `(|Δy|, |Δx|)` between
//! query and key pixel, so it is invariant to translation and reflection.
//! The content term `QKᵀ` appears once; the positional term contributes only
//! the bias table.
//!
//! The block output is `MLP₂(hswish(MLP₁(hswish(BN(attn)) + tokens)))`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::nn::{BatchNorm, Builder, Ctx, Linear};
use crate::params::{ParamGroup, ParamId};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of stacked blocks; 0 disables the graft.
    pub blocks: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            heads: 4,
            mlp_ratio: 2,
            blocks: 1,
        }
    }
}

/// `(B, C, H, W) → (B, H·W, C)`, token `y·W + x` holding pixel `(y, x)`.
pub fn flatten_tokens<'g, T: Scalar>(f: Var<'g, T>) -> Var<'g, T> {
    let s = f.shape();
    assert_eq!(s.len(), 4, "flatten_tokens expects (B, C, H, W), got {s:?}");
    f.permute(&[0, 2, 3, 1]).reshape(&[s[0], s[2] * s[3], s[1]])
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens<'g, T: Scalar>(t: Var<'g, T>, grid: (usize, usize)) -> Var<'g, T> {
    let s = t.shape();
    assert_eq!(s.len(), 3, "unflatten_tokens expects (B, N, C), got {s:?}");
    assert_eq!(s[1], grid.0 * grid.1, "token count {} does not match grid {grid:?}", s[1]);
    t.reshape(&[s[0], grid.0, grid.1, s[2]]).permute(&[0, 3, 1, 2])
}

/// Flat indices into a `(heads, H, W)` bias table giving, for every head,
/// query and key token, the entry at `(|Δy|, |Δx|)`.
pub fn bias_indices(heads: usize, grid: (usize, usize)) -> Vec<usize> {
    let (h, w) = grid;
    let n = h * w;
    let mut idx = Vec::with_capacity(heads * n * n);
    for head in 0..heads {
        for q in 0..n {
            let (qy, qx) = (q / w, q % w);
            for k in 0..n {
                let (ky, kx) = (k / w, k % w);
                idx.push((head * h + qy.abs_diff(ky)) * w + qx.abs_diff(kx));
            }
        }
    }
    idx
}

/// Multi-head attention on already projected `(B, N, C)` queries, keys and
/// values. Returns the `(B, N, C)` output and the `(B, heads, N, N)`
/// attention weights.
pub fn attend<'g, T: Scalar>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    bias: Var<'g, T>,
    bias_index: &Arc<Vec<usize>>,
    heads: usize,
) -> (Var<'g, T>, Var<'g, T>) {
    let s = q.shape();
    let (b, n, c) = (s[0], s[1], s[2]);
    assert!(heads > 0 && c % heads == 0, "{c} channels do not split into {heads} heads");
    let d = c / heads;
    let split = |x: Var<'g, T>| x.reshape(&[b, n, heads, d]).permute(&[0, 2, 1, 3]).reshape(&[b * heads, n, d]);
    let (qh, kh, vh) = (split(q), split(k), split(v));
    let scores = qh
        .matmul(kh.permute(&[0, 2, 1]))
        .scale(T::c(1.0 / (d as f64).sqrt()));
    let bias = bias.gather(Arc::clone(bias_index), &[heads * n * n]);
    let scores = scores.reshape(&[b, heads * n * n]).add_trailing(bias).reshape(&[b * heads, n, n]);
    let attn = scores.softmax(2);
    let out = attn
        .matmul(vh)
        .reshape(&[b, heads, n, d])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, n, c]);
    (out, attn.reshape(&[b, heads, n, n]))
}

/// Linear projection followed by batch normalization over token channels.
#[derive(Clone, Debug)]
struct Projection {
    linear: Linear,
    bn: BatchNorm,
}

impl Projection {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        Projection {
            linear: Linear::new(b, name, channels, channels, false),
            bn: BatchNorm::new(b, &format!("{name}_bn"), channels),
        }
    }

    fn forward<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, tokens: Var<'g, T>) -> Var<'g, T> {
        let s = tokens.shape();
        let y = self.linear.forward(cx, tokens).reshape(&[s[0] * s[1], s[2]]);
        self.bn.forward(cx, y).reshape(&s)
    }
}

/// Multi-head self-attention over a fixed token grid.
#[derive(Clone, Debug)]
pub struct Attention {
    pub channels: usize,
    pub heads: usize,
    pub grid: (usize, usize),
    q: Projection,
    k: Projection,
    v: Projection,
    /// `(heads, H, W)` bias table.
    pub rpb: ParamId,
    index: Arc<Vec<usize>>,
}

impl Attention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize, heads: usize, grid: (usize, usize)) -> Self {
        assert!(
            heads > 0 && channels % heads == 0,
            "{channels} channels do not split into {heads} heads"
        );
        Attention {
            channels,
            heads,
            grid,
            q: Projection::new(b, &format!("{name}.q"), channels),
            k: Projection::new(b, &format!("{name}.k"), channels),
            v: Projection::new(b, &format!("{name}.v"), channels),
            rpb: b.constant(&format!("{name}.rpb"), ParamGroup::Weight, &[heads, grid.0, grid.1], 0.0),
            index: Arc::new(bias_indices(heads, grid)),
        }
    }

    fn check_grid(&self, tokens: &[usize]) {
        assert_eq!(
            tokens[1],
            self.grid.0 * self.grid.1,
            "attention was built for a {:?} grid ({} tokens) but got {} tokens",
            self.grid,
            self.grid.0 * self.grid.1,
            tokens[1]
        );
    }

    /// Output tokens and post-softmax weights `(B, heads, N, N)`.
    pub fn forward_with_weights<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, tokens: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        self.check_grid(&tokens.shape());
        let q = self.q.forward(cx, tokens);
        let k = self.k.forward(cx, tokens);
        let v = self.v.forward(cx, tokens);
        let bias = cx.param(self.rpb);
        attend(q, k, v, bias, &self.index, self.heads)
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, tokens: Var<'g, T>) -> Var<'g, T> {
        self.forward_with_weights(cx, tokens).0
    }
}

/// Attention, normalization, residual and the two-layer MLP.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn: Attention,
    bn: BatchNorm,
    mlp1: Linear,
    mlp2: Linear,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        cfg: &TransformerConfig,
        grid: (usize, usize),
    ) -> Self {
        let hidden = cfg.mlp_ratio * channels;
        TransformerBlock {
            attn: Attention::new(b, &format!("{name}.attn"), channels, cfg.heads, grid),
            bn: BatchNorm::new(b, &format!("{name}.bn"), channels),
            mlp1: Linear::new(b, &format!("{name}.mlp1"), channels, hidden, true),
            mlp2: Linear::new(b, &format!("{name}.mlp2"), hidden, channels, true),
        }
    }

    /// `(B, C, H, W) → (B, C, H, W)` plus the attention weights.
    pub fn forward_with_weights<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, f: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let s = f.shape();
        let grid = (s[2], s[3]);
        let tokens = flatten_tokens(f);
        let (a, weights) = self.attn.forward_with_weights(cx, tokens);
        let ts = tokens.shape();
        let y = self
            .bn
            .forward(cx, a.reshape(&[ts[0] * ts[1], ts[2]]))
            .hardswish()
            .reshape(&ts)
            .add(tokens);
        let y = self.mlp1.forward(cx, y).hardswish();
        let y = self.mlp2.forward(cx, y);
        (unflatten_tokens(y, grid), weights)
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &mut Ctx<'g, '_, T>, f: Var<'g, T>) -> Var<'g, T> {
        self.forward_with_weights(cx, f).0
    }
}

/// Dense-loop evaluation of [`attend`] for tests.
pub fn attend_reference(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    table: &Tensor<f64>,
    grid: (usize, usize),
    heads: usize,
) -> (Tensor<f64>, Tensor<f64>) {
    let s = q.shape();
    let (b, n, c) = (s[0], s[1], s[2]);
    let d = c / heads;
    let mut out = Tensor::zeros(&[b, n, c]);
    let mut weights = Tensor::zeros(&[b, heads, n, n]);
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..n {
                let mut row = vec![0.0; n];
                for (j, r) in row.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for e in 0..d {
                        dot += q.at(&[bi, i, h * d + e]) * k.at(&[bi, j, h * d + e]);
                    }
                    let dy = (i / grid.1).abs_diff(j / grid.1);
                    let dx = (i % grid.1).abs_diff(j % grid.1);
                    *r = dot / (d as f64).sqrt() + table.at(&[h, dy, dx]);
                }
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = row.iter().map(|r| (r - m).exp()).sum();
                for j in 0..n {
                    let a = (row[j] - m).exp() / z;
                    let at = weights.offset(&[bi, h, i, j]);
                    weights.data_mut()[at] = a;
                    for e in 0..d {
                        let o = out.offset(&[bi, i, h * d + e]);
                        out.data_mut()[o] += a * v.at(&[bi, j, h * d + e]);
                    }
                }
            }
        }
    }
    (out, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn flatten_is_row_major_and_invertible() {
        let f = random(&[2, 3, 2, 3], 1);
        let g = Graph::new();
        let t = flatten_tokens(g.constant(f.clone()));
        assert_eq!(t.shape(), vec![2, 6, 3]);
        // pixel (y=1, x=0) on a 3-wide grid is token 3
        assert_eq!(t.value().at(&[1, 3, 2]), f.at(&[1, 2, 1, 0]));
        assert_eq!(*unflatten_tokens(t, (2, 3)).value(), f);
    }

    #[test]
    fn bias_lookup_is_translation_invariant() {
        let (h, w) = (4, 4);
        let idx = bias_indices(2, (h, w));
        let n = h * w;
        for head in 0..2 {
            for p in 0..n {
                for q in 0..n {
                    for (ty, tx) in [(1i64, 0i64), (0, 1), (-1, 2), (2, -1)] {
                        let shift = |t: usize| {
                            let (y, x) = ((t / w) as i64 + ty, (t % w) as i64 + tx);
                            ((0..h as i64).contains(&y) && (0..w as i64).contains(&x)).then(|| y as usize * w + x as usize)
                        };
                        if let (Some(p2), Some(q2)) = (shift(p), shift(q)) {
                            assert_eq!(idx[(head * n + p) * n + q], idx[(head * n + p2) * n + q2]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn attend_matches_loops() {
        let (grid, heads) = ((2, 3), 2);
        let n = 6;
        let (q, k, v) = (random(&[2, n, 4], 1), random(&[2, n, 4], 2), random(&[2, n, 4], 3));
        let table = random(&[heads, 2, 3], 4);
        let g = Graph::new();
        let idx = Arc::new(bias_indices(heads, grid));
        let (out, w) = attend(
            g.constant(q.clone()),
            g.constant(k.clone()),
            g.constant(v.clone()),
            g.constant(table.clone()),
            &idx,
            heads,
        );
        let (want_out, want_w) = attend_reference(&q, &k, &v, &table, grid, heads);
        assert!(out.value().max_abs_diff(&want_out) < 1e-12);
        assert!(w.value().max_abs_diff(&want_w) < 1e-12);
    }

    #[test]
    fn single_token_returns_its_value() {
        let g = Graph::new();
        let v = random(&[1, 1, 4], 3);
        let idx = Arc::new(bias_indices(2, (1, 1)));
        let (out, _) = attend(
            g.constant(random(&[1, 1, 4], 1)),
            g.constant(random(&[1, 1, 4], 2)),
            g.constant(v.clone()),
            g.zeros(&[2, 1, 1]),
            &idx,
            2,
        );
        assert!(out.value().max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn block_preserves_shape_and_zero_mlp_gives_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = TransformerConfig::default();
        let block = TransformerBlock::new(&mut Builder::new(&mut store, &mut rng), "t", 8, &cfg, (3, 2));
        let f = random(&[2, 8, 3, 2], 5);
        let g = Graph::new();
        let y = block.forward(&mut Ctx::train(&g, &mut store), g.constant(f.clone()));
        assert_eq!(y.shape(), f.shape());

        let ids: Vec<_> = store
            .params()
            .filter(|(_, p)| p.name.contains("mlp"))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let g = Graph::new();
        let y = block.forward(&mut Ctx::train(&g, &mut store), g.constant(f));
        assert!(y.value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    #[should_panic(expected = "grid")]
    fn grid_mismatch_is_a_contract_violation() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let attn = Attention::new(&mut Builder::new(&mut store, &mut rng), "a", 4, 2, (2, 2));
        let g = Graph::new();
        let _ = attn.forward(&mut Ctx::eval(&g, &store), g.constant(random(&[1, 9, 4], 1)));
    }
}
