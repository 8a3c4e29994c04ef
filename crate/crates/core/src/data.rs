//! Hyperspectral cube container, synthetic cube generation, per-band
//! normalization and class-map image export.
//!
//! A cube directory holds:
//!
//! - `header.json`: `{"version": 1, "bands", "height", "width",
//!   "dtype": "f32le", "layout": "band-sequential", "class_names": [...],
//!   "normalization": null | {"mean": [...], "std": [...]}}`
//! - `cube.bin`: `bands·height·width` little-endian f32 values, element
//!   `(band, row, col)` at index `(band·height + row)·width + col`;
//! - `labels.bin` (optional): `height·width` little-endian i32 labels, 0 for
//!   unlabeled pixels and `1..=classes` otherwise.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const HEADER_VERSION: u32 = 1;
const STD_FLOOR: f64 = 1e-8;

/// Per-band statistics removed by [`HsiCube::normalize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    bands: usize,
    height: usize,
    width: usize,
    dtype: String,
    layout: String,
    class_names: Vec<String>,
    #[serde(default)]
    normalization: Option<Normalization>,
}

/// A hyperspectral cube with its sparse label map.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// Band-sequential values.
    pub data: Vec<f32>,
    /// Row-major labels, 0 = unlabeled.
    pub labels: Vec<u32>,
    pub class_names: Vec<String>,
    pub normalization: Option<Normalization>,
}

impl HsiCube {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn at(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[(band * self.height + row) * self.width + col]
    }

    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Checks the container invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("invalid cube: {m}")));
        if self.bands == 0 || self.height == 0 || self.width == 0 {
            return bad("extents must be positive".into());
        }
        if self.data.len() != self.bands * self.height * self.width {
            return bad(format!("{} values for {} × {} × {}", self.data.len(), self.bands, self.height, self.width));
        }
        if self.labels.len() != self.height * self.width {
            return bad(format!("{} labels for {} × {} pixels", self.labels.len(), self.height, self.width));
        }
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            return bad(format!("non-finite value at index {i}"));
        }
        let k = self.num_classes() as u32;
        if let Some(i) = self.labels.iter().position(|&l| l > k) {
            return bad(format!("label {} at pixel {i} exceeds {k} classes", self.labels[i]));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = Header {
            version: HEADER_VERSION,
            bands: self.bands,
            height: self.height,
            width: self.width,
            dtype: "f32le".into(),
            layout: "band-sequential".into(),
            class_names: self.class_names.clone(),
            normalization: self.normalization.clone(),
        };
        let mut json = serde_json::to_string_pretty(&header).expect("header serializes");
        json.push('\n');
        write_atomic(&dir.join("header.json"), json.as_bytes())?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        write_atomic(&dir.join("cube.bin"), &bytes)?;
        let mut bytes = Vec::with_capacity(self.labels.len() * 4);
        for &l in &self.labels {
            bytes.extend_from_slice(&(l as i32).to_le_bytes());
        }
        write_atomic(&dir.join("labels.bin"), &bytes)
    }

    /// Loads a cube directory. A missing `labels.bin` yields an all-zero map.
    pub fn load(dir: &Path) -> Result<HsiCube> {
        let hpath = dir.join("header.json");
        let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: hpath.clone(),
            source,
        })?;
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != HEADER_VERSION as u64 {
            return Err(Error::SchemaVersion {
                what: "cube header",
                found: version as u32,
                supported: HEADER_VERSION,
            });
        }
        let h: Header = serde_json::from_value(value).map_err(|source| Error::Json {
            path: hpath.clone(),
            source,
        })?;
        if h.dtype != "f32le" {
            return Err(Error::format(&hpath, format!("unknown dtype {:?} (expected \"f32le\")", h.dtype)));
        }
        if h.layout != "band-sequential" {
            return Err(Error::format(&hpath, format!("unknown layout {:?} (expected \"band-sequential\")", h.layout)));
        }
        if h.bands == 0 || h.height == 0 || h.width == 0 {
            return Err(Error::format(&hpath, "bands, height and width must be positive"));
        }
        let cpath = dir.join("cube.bin");
        let bytes = fs::read(&cpath).map_err(|e| Error::io(&cpath, e))?;
        let want = 4 * h.bands * h.height * h.width;
        if bytes.len() != want {
            return Err(Error::format(
                &cpath,
                format!(
                    "expected {want} bytes (4 × {} bands × {} × {}), found {}; data ends at byte offset {}",
                    h.bands,
                    h.height,
                    h.width,
                    bytes.len(),
                    bytes.len()
                ),
            ));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::format(&cpath, format!("non-finite value at byte offset {}", 4 * i)));
        }
        let lpath = dir.join("labels.bin");
        let labels = match fs::read(&lpath) {
            Ok(bytes) => {
                let want = 4 * h.height * h.width;
                if bytes.len() != want {
                    return Err(Error::format(
                        &lpath,
                        format!("expected {want} bytes (4 × {} × {}), found {}", h.height, h.width, bytes.len()),
                    ));
                }
                let k = h.class_names.len() as i32;
                bytes
                    .chunks_exact(4)
                    .enumerate()
                    .map(|(i, c)| {
                        let l = i32::from_le_bytes(c.try_into().expect("4 bytes"));
                        if !(0..=k).contains(&l) {
                            Err(Error::format(
                                &lpath,
                                format!("label {l} at byte offset {} outside 0..={k}", 4 * i),
                            ))
                        } else {
                            Ok(l as u32)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => vec![0; h.height * h.width],
            Err(e) => return Err(Error::io(&lpath, e)),
        };
        Ok(HsiCube {
            bands: h.bands,
            height: h.height,
            width: h.width,
            data,
            labels,
            class_names: h.class_names,
            normalization: h.normalization,
        })
    }

    /// Per-band zero mean and unit standard deviation (floored at 1e-8).
    /// Fails if the cube is already normalized.
    pub fn normalize(&mut self) -> Result<()> {
        if self.normalization.is_some() {
            return Err(Error::Contract("cube is already normalized".into()));
        }
        let n = self.height * self.width;
        let mut mean = Vec::with_capacity(self.bands);
        let mut std = Vec::with_capacity(self.bands);
        for band in self.data.chunks_exact_mut(n) {
            let m = band.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
            let v = band.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n as f64;
            let s = v.sqrt().max(STD_FLOOR);
            for x in band.iter_mut() {
                *x = ((*x as f64 - m) / s) as f32;
            }
            mean.push(m);
            std.push(s);
        }
        self.normalization = Some(Normalization { mean, std });
        Ok(())
    }

    /// Undoes [`HsiCube::normalize`].
    pub fn denormalize(&mut self) -> Result<()> {
        let Some(norm) = self.normalization.take() else {
            return Err(Error::Contract("cube is not normalized".into()));
        };
        let n = self.height * self.width;
        for ((band, m), s) in self.data.chunks_exact_mut(n).zip(&norm.mean).zip(&norm.std) {
            for x in band.iter_mut() {
                *x = (*x as f64 * s + m) as f32;
            }
        }
        Ok(())
    }

    /// The spectrum of one pixel.
    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.bands).map(|b| self.at(b, row, col)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layout {
    /// Square blocks of `size` pixels, one class each.
    Blocks { size: usize },
    /// Nearest-seed regions around `seeds` random points.
    Voronoi { seeds: usize },
}

/// One Gaussian bump `amplitude · exp(−(b − center)² / (2·sigma²))` over the
/// band index `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub layout: Layout,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("bands", self.bands),
            ("height", self.height),
            ("width", self.width),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(Error::config(f, "must be positive"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std", "must be finite and non-negative"));
        }
        match self.layout {
            Layout::Blocks { size } => {
                if size == 0 {
                    return Err(Error::config("layout.size", "must be positive"));
                }
                let blocks = self.height.div_ceil(size) * self.width.div_ceil(size);
                if blocks < self.classes {
                    return Err(Error::config(
                        "layout.size",
                        format!("{blocks} blocks cannot hold {} classes", self.classes),
                    ));
                }
            }
            Layout::Voronoi { seeds } => {
                if seeds < self.classes || seeds > self.height * self.width {
                    return Err(Error::config(
                        "layout.seeds",
                        format!("need between {} and {} seeds", self.classes, self.height * self.width),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Spectral signature parameters of every class: a main bump centered
    /// in the class's own slice of the band axis plus a weaker secondary
    /// bump anywhere.
    pub fn signatures(&self) -> Vec<Vec<Bump>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5157_4e41_5455_5245);
        let slice = self.bands as f64 / self.classes as f64;
        (0..self.classes)
            .map(|c| {
                vec![
                    Bump {
                        center: (c as f64 + 0.5) * slice,
                        sigma: (0.5 * slice).max(0.75) * rng.random_range(0.8..1.2),
                        amplitude: rng.random_range(0.8..1.2),
                    },
                    Bump {
                        center: rng.random_range(0.0..self.bands as f64),
                        sigma: (0.5 * slice).max(0.75) * rng.random_range(0.8..1.5),
                        amplitude: rng.random_range(0.2..0.4),
                    },
                ]
            })
            .collect()
    }
}

fn evaluate(bumps: &[Bump], band: usize) -> f64 {
    bumps
        .iter()
        .map(|b| b.amplitude * (-(band as f64 - b.center).powi(2) / (2.0 * b.sigma * b.sigma)).exp())
        .sum()
}

/// Generates a fully labeled synthetic cube. Every class occurs at least
/// once.
pub fn synth_generate(spec: &SynthSpec) -> Result<HsiCube> {
    spec.validate()?;
    let (h, w, k) = (spec.height, spec.width, spec.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = vec![0u32; h * w];
    match spec.layout {
        Layout::Blocks { size } => {
            let (rows, cols) = (h.div_ceil(size), w.div_ceil(size));
            let mut assign: Vec<u32> = (1..=k as u32).collect();
            assign.extend((k..rows * cols).map(|_| rng.random_range(1..=k as u32)));
            assign.shuffle(&mut rng);
            for y in 0..h {
                for x in 0..w {
                    labels[y * w + x] = assign[(y / size) * cols + x / size];
                }
            }
        }
        Layout::Voronoi { seeds } => {
            let mut pixels: Vec<usize> = (0..h * w).collect();
            pixels.shuffle(&mut rng);
            let points: Vec<(usize, u32)> = pixels[..seeds]
                .iter()
                .enumerate()
                .map(|(i, &p)| (p, if i < k { i as u32 + 1 } else { rng.random_range(1..=k as u32) }))
                .collect();
            for y in 0..h {
                for x in 0..w {
                    // distinct seed pixels, so each seed is its own nearest seed
                    let (_, class) = points
                        .iter()
                        .map(|&(p, c)| ((p / w).abs_diff(y).pow(2) + (p % w).abs_diff(x).pow(2), c))
                        .min_by_key(|&(d, _)| d)
                        .expect("at least one seed");
                    labels[y * w + x] = class;
                }
            }
        }
    }
    let sigs: Vec<Vec<f64>> = spec
        .signatures()
        .iter()
        .map(|bumps| (0..spec.bands).map(|b| evaluate(bumps, b)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config("noise_std", e.to_string()))?;
    let mut data = vec![0f32; spec.bands * h * w];
    // pixel-major draw order keeps each pixel's noise independent of band count
    for p in 0..h * w {
        let sig = &sigs[labels[p] as usize - 1];
        for (b, &s) in sig.iter().enumerate() {
            let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data[b * h * w + p] = (s + eps) as f32;
        }
    }
    Ok(HsiCube {
        bands: spec.bands,
        height: h,
        width: w,
        data,
        labels,
        class_names: (1..=k).map(|c| format!("class_{c}")).collect(),
        normalization: None,
    })
}

/// Default class-map colors; entry 0 (unlabeled) is black.
pub const PALETTE: [[u8; 3]; 17] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

/// Encodes a row-major class map as a binary PPM.
pub fn encode_ppm(map: &[u32], height: usize, width: usize, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    if map.len() != height * width {
        return Err(Error::Contract(format!("class map has {} entries for {height} × {width}", map.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &c in map {
        let rgb = palette
            .get(c as usize)
            .ok_or_else(|| Error::Contract(format!("class {c} has no palette color ({} colors)", palette.len())))?;
        out.extend_from_slice(rgb);
    }
    Ok(out)
}

pub fn export_classmap(map: &[u32], height: usize, width: usize, palette: &[[u8; 3]], path: &Path) -> Result<()> {
    write_atomic(path, &encode_ppm(map, height, width, palette)?)
}

/// Parses a binary PPM with maxval 255: `(width, height, rgb bytes)`.
pub fn parse_ppm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, format!("truncated PPM header at byte {pos}")));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace before the raster
    if fields[0] != "P6" {
        return Err(Error::format(path, format!("not a binary PPM (magic {:?})", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad PPM number {s:?}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::format(path, format!("unsupported maxval {max}")));
    }
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != 3 * w * h {
        return Err(Error::format(
            path,
            format!("expected {} raster bytes after byte {pos}, found {}", 3 * w * h, raster.len()),
        ));
    }
    Ok((w, h, raster.to_vec()))
}

/// Maps colors back to class indices; unknown colors are an error.
pub fn classmap_from_rgb(rgb: &[u8], palette: &[[u8; 3]]) -> Result<Vec<u32>> {
    rgb.chunks_exact(3)
        .enumerate()
        .map(|(i, px)| {
            palette
                .iter()
                .position(|c| c == px)
                .map(|c| c as u32)
                .ok_or_else(|| Error::Contract(format!("pixel {i} has color {px:?} outside the palette")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> SynthSpec {
        SynthSpec {
            bands: 16,
            height: 20,
            width: 24,
            classes: 4,
            layout: Layout::Blocks { size: 8 },
            noise_std: noise,
            seed: 7,
        }
    }

    #[test]
    fn noiseless_classes_share_one_spectrum() {
        let cube = synth_generate(&spec(0.0)).unwrap();
        for class in 1..=4u32 {
            let pixels: Vec<_> = (0..cube.height * cube.width).filter(|&p| cube.labels[p] == class).collect();
            assert!(!pixels.is_empty());
            let first = cube.spectrum(pixels[0] / cube.width, pixels[0] % cube.width);
            for &p in &pixels {
                assert_eq!(cube.spectrum(p / cube.width, p % cube.width), first);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_covers_all_classes() {
        for layout in [Layout::Blocks { size: 16 }, Layout::Voronoi { seeds: 6 }] {
            let s = SynthSpec {
                layout,
                ..spec(0.05)
            };
            let a = synth_generate(&s).unwrap();
            assert_eq!(a, synth_generate(&s).unwrap());
            for c in 1..=4 {
                assert!(a.labels.contains(&c));
            }
        }
    }

    #[test]
    fn normalization_round_trip_and_double_normalization() {
        let mut cube = synth_generate(&spec(0.05)).unwrap();
        let orig = cube.clone();
        cube.normalize().unwrap();
        let n = cube.height * cube.width;
        for band in cube.data.chunks(n) {
            let m: f64 = band.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
            assert!(m.abs() < 1e-6);
        }
        assert!(cube.normalize().is_err());
        cube.denormalize().unwrap();
        for (a, b) in cube.data.iter().zip(&orig.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_band_normalizes_to_zero() {
        let mut cube = HsiCube {
            bands: 1,
            height: 2,
            width: 2,
            data: vec![3.0; 4],
            labels: vec![0; 4],
            class_names: vec![],
            normalization: None,
        };
        cube.normalize().unwrap();
        assert!(cube.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ppm_of_a_single_pixel() {
        let bytes = encode_ppm(&[1], 1, 1, &PALETTE).unwrap();
        assert_eq!(&bytes[..11], b"P6\n1 1\n255\n");
        assert_eq!(&bytes[11..], &PALETTE[1]);
        let (w, h, rgb) = parse_ppm(Path::new("m.ppm"), &bytes).unwrap();
        assert_eq!((w, h), (1, 1));
        assert_eq!(classmap_from_rgb(&rgb, &PALETTE).unwrap(), vec![1]);
        assert!(encode_ppm(&[40], 1, 1, &PALETTE).is_err());
    }
}
