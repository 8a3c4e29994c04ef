use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::HsiCube;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    /// Square window side; must equal the attention grid when one is fixed.
    pub window: usize,
    /// Stride `window / 2` with averaging when set, `window` otherwise.
    pub overlap: bool,
    /// Windows evaluated per forward pass.
    pub batch: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            window: 32,
            overlap: true,
            batch: 8,
        }
    }
}

impl InferConfig {
    pub fn stride(&self) -> usize {
        if self.overlap {
            (self.window / 2).max(1)
        } else {
            self.window
        }
    }
}

/// Dense prediction over a whole cube.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// `(classes, height, width)` averaged probabilities.
    pub probs: Vec<f64>,
    /// Row-major argmax in `1..=classes` (ties go to the lower class).
    pub class_map: Vec<u32>,
}

impl Prediction {
    pub fn prob(&self, class: usize, row: usize, col: usize) -> f64 {
        self.probs[(class * self.height + row) * self.width + col]
    }
}

/// Window start offsets along one axis: multiples of `stride`, plus a final
/// window clamped to the far edge.
pub fn window_origins(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    assert!(window > 0 && window <= extent, "window {window} does not fit extent {extent}");
    assert!(stride > 0, "stride must be positive");
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + window <= extent).collect();
    if out.last() != Some(&(extent - window)) {
        out.push(extent - window);
    }
    out
}

/// How many windows cover each pixel.
pub fn coverage_counts(height: usize, width: usize, window: usize, stride: usize) -> Vec<u32> {
    let mut cov = vec![0u32; height * width];
    for &r0 in &window_origins(height, window, stride) {
        for &c0 in &window_origins(width, window, stride) {
            for r in r0..r0 + window {
                for c in c0..c0 + window {
                    cov[r * width + c] += 1;
                }
            }
        }
    }
    cov
}

/// Tiles the image, asks `tiles` for the `(classes, window, window)`
/// probabilities of each batch of window origins, and averages per pixel.
/// Probabilities are summed first and divided once at the end.
pub fn overlap_average(
    height: usize,
    width: usize,
    classes: usize,
    window: usize,
    stride: usize,
    batch: usize,
    mut tiles: impl FnMut(&[(usize, usize)]) -> Result<Vec<Vec<f64>>>,
) -> Result<Prediction> {
    if window == 0 || window > height || window > width {
        return Err(Error::Contract(format!(
            "window {window} does not fit the {height} × {width} image"
        )));
    }
    let origins: Vec<(usize, usize)> = window_origins(height, window, stride)
        .into_iter()
        .flat_map(|r| window_origins(width, window, stride).into_iter().map(move |c| (r, c)))
        .collect();
    let hw = height * width;
    let mut sum = vec![0f64; classes * hw];
    let ww = window * window;
    for chunk in origins.chunks(batch.max(1)) {
        let probs = tiles(chunk)?;
        assert_eq!(probs.len(), chunk.len(), "one probability tile per window");
        for (&(r0, c0), p) in chunk.iter().zip(&probs) {
            assert_eq!(p.len(), classes * ww, "probability tile has the wrong size");
            for k in 0..classes {
                for r in 0..window {
                    for c in 0..window {
                        sum[k * hw + (r0 + r) * width + c0 + c] += p[k * ww + r * window + c];
                    }
                }
            }
        }
    }
    let cov = coverage_counts(height, width, window, stride);
    for k in 0..classes {
        for (s, &n) in sum[k * hw..(k + 1) * hw].iter_mut().zip(&cov) {
            *s /= n as f64;
        }
    }
    let class_map = (0..hw)
        .map(|i| {
            let mut best = 0;
            for k in 1..classes {
                if sum[k * hw + i] > sum[best * hw + i] {
                    best = k;
                }
            }
            best as u32 + 1
        })
        .collect();
    Ok(Prediction {
        height,
        width,
        classes,
        probs: sum,
        class_map,
    })
}

/// Sliding-window inference of a model over the cube in eval mode.
pub fn infer<M: Model, T: Scalar>(model: &M, store: &ParamStore<T>, cube: &HsiCube, cfg: &InferConfig) -> Result<Prediction> {
    let w = cfg.window;
    if let Some(grid) = model.fixed_grid() {
        if grid != (w, w) {
            return Err(Error::Contract(format!(
                "window {w} does not match the attention grid {} × {}",
                grid.0, grid.1
            )));
        }
    }
    if cube.bands != model.shape().bands {
        return Err(Error::Contract(format!(
            "cube has {} bands, the model expects {}",
            cube.bands,
            model.shape().bands
        )));
    }
    let classes = model.shape().classes;
    let ww = w * w;
    overlap_average(cube.height, cube.width, classes, w, cfg.stride(), cfg.batch, |origins| {
        let n = origins.len();
        let mut x = Vec::with_capacity(n * cube.bands * ww);
        for &(r0, c0) in origins {
            for b in 0..cube.bands {
                for r in r0..r0 + w {
                    for c in c0..c0 + w {
                        x.push(T::c(cube.at(b, r, c) as f64));
                    }
                }
            }
        }
        let g = Graph::new();
        let mut cx = Ctx::eval(&g, store);
        let input = g.constant(Tensor::new(&[n, 1, cube.bands, w, w], x));
        let probs = model.logits(&mut cx, input).softmax(1).value();
        if !probs.all_finite() {
            return Err(Error::Contract("model produced non-finite probabilities".into()));
        }
        let per = classes * ww;
        Ok(probs.data().chunks(per).map(|t| t.iter().map(|v| v.f64()).collect()).collect())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origins_clamp_the_last_window() {
        assert_eq!(window_origins(64, 32, 16), vec![0, 16, 32]);
        assert_eq!(window_origins(40, 32, 16), vec![0, 8]);
        assert_eq!(window_origins(32, 32, 16), vec![0]);
        assert_eq!(window_origins(10, 4, 4), vec![0, 4, 6]);
    }

    #[test]
    fn two_window_average() {
        let p = overlap_average(2, 3, 2, 2, 1, 4, |o| {
            Ok(o.iter()
                .map(|&(_, c0)| {
                    let (a, b) = if c0 == 0 { (0.8, 0.2) } else { (0.4, 0.6) };
                    [vec![a; 4], vec![b; 4]].concat()
                })
                .collect())
        })
        .unwrap();
        assert!((p.prob(0, 0, 1) - 0.6).abs() < 1e-12);
        assert!((p.prob(1, 0, 1) - 0.4).abs() < 1e-12);
        assert_eq!(p.class_map[1], 1);
        assert_eq!(p.class_map[2], 2);
    }

    #[test]
    fn oversized_window_is_rejected() {
        assert!(overlap_average(4, 4, 2, 5, 2, 1, |_| unreachable!()).is_err());
    }
}
