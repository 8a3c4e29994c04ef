use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::split::{Pixel, SampleSplit};
use crate::data::HsiCube;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A joint flip/rotation of a square patch. Flips apply first, then `rot`
/// quarter turns, each mapping `(r, c)` to `(c, P − 1 − r)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub flip_rows: bool,
    pub flip_cols: bool,
    pub rot: u8,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip_rows: false,
        flip_cols: false,
        rot: 0,
    };

    /// Destination of source position `(r, c)` in a `p × p` patch.
    pub fn apply(self, r: usize, c: usize, p: usize) -> (usize, usize) {
        let mut r = if self.flip_rows { p - 1 - r } else { r };
        let mut c = if self.flip_cols { p - 1 - c } else { c };
        for _ in 0..self.rot % 4 {
            (r, c) = (c, p - 1 - r);
        }
        (r, c)
    }

    pub fn random(rng: &mut impl Rng) -> Transform {
        Transform {
            flip_rows: rng.random(),
            flip_cols: rng.random(),
            rot: rng.random_range(0..4),
        }
    }
}

/// One training batch: `x` is `(B, 1, bands, P, P)`, `labels` is the sparse
/// `(B, P, P)` map with 0 = ignore.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub labels: Vec<u32>,
}

impl<T> Batch<T> {
    pub fn labeled(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// Cuts the `patch × patch` window at `(row0, col0)` out of the cube and the
/// sparse label map, applying `t` to both. Returns band-sequential values
/// and the row-major label patch.
pub fn crop(
    cube: &HsiCube,
    labels: &[u32],
    row0: usize,
    col0: usize,
    patch: usize,
    t: Transform,
) -> (Vec<f32>, Vec<u32>) {
    assert!(
        row0 + patch <= cube.height && col0 + patch <= cube.width,
        "patch at ({row0}, {col0}) of size {patch} leaves the {} × {} cube",
        cube.height,
        cube.width
    );
    assert_eq!(labels.len(), cube.height * cube.width, "label map does not match the cube");
    let pp = patch * patch;
    let mut data = vec![0f32; cube.bands * pp];
    let mut out = vec![0u32; pp];
    for r in 0..patch {
        for c in 0..patch {
            let (dr, dc) = t.apply(r, c, patch);
            let dst = dr * patch + dc;
            out[dst] = labels[(row0 + r) * cube.width + col0 + c];
            for b in 0..cube.bands {
                data[b * pp + dst] = cube.at(b, row0 + r, col0 + c);
            }
        }
    }
    (data, out)
}

/// Random patches around the pixels of one split set. Each patch is placed
/// uniformly among the windows that contain a uniformly drawn pixel of the
/// set, so every patch carries at least one label.
#[derive(Clone, Debug)]
pub struct PatchSampler<'a> {
    cube: &'a HsiCube,
    labels: Vec<u32>,
    anchors: Vec<Pixel>,
    patch: usize,
    batch: usize,
    augment: bool,
    rng: ChaCha8Rng,
}

impl<'a> PatchSampler<'a> {
    pub fn new(cube: &'a HsiCube, pixels: &[Pixel], patch: usize, batch: usize, augment: bool, seed: u64) -> Result<Self> {
        if patch == 0 || patch > cube.height.min(cube.width) {
            return Err(Error::config(
                "patch",
                format!("{patch} does not fit the {} × {} cube", cube.height, cube.width),
            ));
        }
        if batch == 0 {
            return Err(Error::config("batch", "must be positive"));
        }
        if pixels.is_empty() {
            return Err(Error::Contract("cannot sample patches from an empty pixel set".into()));
        }
        Ok(PatchSampler {
            cube,
            labels: SampleSplit::label_map(pixels, cube.height, cube.width),
            anchors: pixels.to_vec(),
            patch,
            batch,
            augment,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn next_batch<T: Scalar>(&mut self) -> Batch<T> {
        let (p, bands) = (self.patch, self.cube.bands);
        let mut x = Vec::with_capacity(self.batch * bands * p * p);
        let mut labels = Vec::with_capacity(self.batch * p * p);
        for _ in 0..self.batch {
            let a = self.anchors[self.rng.random_range(0..self.anchors.len())];
            let row0 = self.rng.random_range(a.row.saturating_sub(p - 1)..=a.row.min(self.cube.height - p));
            let col0 = self.rng.random_range(a.col.saturating_sub(p - 1)..=a.col.min(self.cube.width - p));
            let t = if self.augment {
                Transform::random(&mut self.rng)
            } else {
                Transform::IDENTITY
            };
            let (d, l) = crop(self.cube, &self.labels, row0, col0, p, t);
            x.extend(d.into_iter().map(|v| T::c(v as f64)));
            labels.extend(l);
        }
        Batch {
            x: Tensor::new(&[self.batch, 1, bands, p, p], x),
            labels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, Layout, SynthSpec};

    fn cube() -> HsiCube {
        synth_generate(&SynthSpec {
            bands: 3,
            height: 10,
            width: 12,
            classes: 3,
            layout: Layout::Voronoi { seeds: 5 },
            noise_std: 0.1,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn quarter_turn_moves_r_c_to_c_p_minus_1_minus_r() {
        let t = Transform {
            rot: 1,
            ..Transform::IDENTITY
        };
        assert_eq!(t.apply(0, 1, 4), (1, 3));
        assert_eq!(t.apply(2, 0, 4), (0, 1));
        let full = Transform { rot: 4, ..t };
        assert_eq!(full.apply(2, 3, 5), (2, 3));
    }

    #[test]
    fn rotated_crop_moves_labels_accordingly() {
        let c = cube();
        let mut labels = vec![0; c.height * c.width];
        labels[2 * c.width + 3] = 2; // patch-local (1, 2) for origin (1, 1)
        let t = Transform {
            rot: 1,
            ..Transform::IDENTITY
        };
        let (d, l) = crop(&c, &labels, 1, 1, 4, t);
        assert_eq!(l[2 * 4 + 2], 2);
        assert_eq!(l.iter().filter(|&&x| x != 0).count(), 1);
        assert_eq!(d[2 * 4 + 2], c.at(0, 2, 3));
    }

    #[test]
    fn unaugmented_fixed_crops_are_identical() {
        let c = cube();
        let a = crop(&c, &c.labels, 3, 2, 5, Transform::IDENTITY);
        let b = crop(&c, &c.labels, 3, 2, 5, Transform::IDENTITY);
        assert_eq!(a, b);
    }

    #[test]
    fn every_patch_carries_a_label() {
        let c = cube();
        let pixels = [Pixel { row: 9, col: 0, label: c.label(9, 0) }];
        let mut s = PatchSampler::new(&c, &pixels, 4, 3, true, 1).unwrap();
        for _ in 0..20 {
            let b = s.next_batch::<f64>();
            assert_eq!(b.x.shape(), &[3, 1, 3, 4, 4]);
            for n in 0..3 {
                assert_eq!(b.labels[n * 16..(n + 1) * 16].iter().filter(|&&l| l != 0).count(), 1);
            }
        }
    }

    #[test]
    fn oversized_patch_is_a_config_error() {
        let c = cube();
        assert!(PatchSampler::new(&c, &[], 11, 1, false, 0).unwrap_err().is_usage());
    }
}
