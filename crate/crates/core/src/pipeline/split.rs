use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labeled pixel; `label` is in `1..=classes`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
    pub label: u32,
}

/// Disjoint train/val/test pixel sets, each sorted in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSplit {
    pub seed: u64,
    pub train: Vec<Pixel>,
    pub val: Vec<Pixel>,
    pub test: Vec<Pixel>,
}

impl SampleSplit {
    /// Sparse `height × width` map holding only the given pixels.
    pub fn label_map(pixels: &[Pixel], height: usize, width: usize) -> Vec<u32> {
        let mut map = vec![0; height * width];
        for p in pixels {
            map[p.row * width + p.col] = p.label;
        }
        map
    }

    /// Per-class counts of a pixel set, index 0 holding class 1.
    pub fn class_counts(pixels: &[Pixel], classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for p in pixels {
            counts[p.label as usize - 1] += 1;
        }
        counts
    }
}

/// Draws `n_train` then `n_val` pixels per class uniformly without
/// replacement; all other labeled pixels form the test set. A class with
/// too few pixels contributes what it has (train first) and logs a warning.
pub fn sample_split(
    labels: &[u32],
    width: usize,
    classes: usize,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<SampleSplit> {
    assert!(width > 0 && labels.len() % width == 0, "label map is not a whole number of rows");
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let slot = by_class
            .get_mut(l as usize - 1)
            .ok_or_else(|| Error::Contract(format!("label {l} at pixel {i} exceeds {classes} classes")))?;
        slot.push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (c, mut pixels) in by_class.into_iter().enumerate() {
        if pixels.is_empty() {
            return Err(Error::Contract(format!("class {} has no labeled pixels", c + 1)));
        }
        if pixels.len() < n_train + n_val {
            log::warn!(
                "class {} has {} labeled pixels, fewer than {} requested; taking all available",
                c + 1,
                pixels.len(),
                n_train + n_val
            );
        }
        pixels.shuffle(&mut rng);
        let t = n_train.min(pixels.len());
        let v = n_val.min(pixels.len() - t);
        let px = |i: usize| Pixel {
            row: i / width,
            col: i % width,
            label: c as u32 + 1,
        };
        train.extend(pixels[..t].iter().map(|&i| px(i)));
        val.extend(pixels[t..t + v].iter().map(|&i| px(i)));
        test.extend(pixels[t + v..].iter().map(|&i| px(i)));
    }
    for set in [&mut train, &mut val, &mut test] {
        set.sort();
    }
    Ok(SampleSplit { seed, train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn blocks(classes: usize, per_class: usize) -> Vec<u32> {
        (0..classes * per_class).map(|i| (i / per_class) as u32 + 1).collect()
    }

    #[test]
    fn counts_and_disjointness() {
        let labels = blocks(3, 50);
        let s = sample_split(&labels, 10, 3, 20, 10, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 30, 60));
        let all: HashSet<_> = s.train.iter().chain(&s.val).chain(&s.test).map(|p| (p.row, p.col)).collect();
        assert_eq!(all.len(), 150);
        assert_eq!(SampleSplit::class_counts(&s.train, 3), vec![20; 3]);
    }

    #[test]
    fn short_class_takes_all_available() {
        let mut labels = blocks(2, 40);
        labels.truncate(45);
        let s = sample_split(&labels, 5, 2, 20, 10, 0).unwrap();
        assert_eq!(SampleSplit::class_counts(&s.train, 2), vec![20, 5]);
        assert_eq!(SampleSplit::class_counts(&s.val, 2), vec![10, 0]);
    }

    #[test]
    fn empty_class_is_rejected() {
        assert!(sample_split(&[1, 1, 0, 0], 2, 2, 1, 0, 0).is_err());
    }

    #[test]
    fn same_seed_same_split() {
        let labels = blocks(4, 30);
        assert_eq!(
            sample_split(&labels, 12, 4, 5, 5, 9).unwrap(),
            sample_split(&labels, 12, 4, 5, 5, 9).unwrap()
        );
    }
}
