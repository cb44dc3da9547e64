//! Appearance features: per-landmark HOG blocks for the linear regressors and
//! shape-indexed pixel differences for the ferns.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{BoundingBox, Landmarks2D};
use crate::error::{Error, Result};

/// Row-major grayscale image with intensities in `[0, 1]`. Pixel `(x, y)` has
/// its center at integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub const MIN_SIDE: usize = 16;

    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width < Self::MIN_SIDE || height < Self::MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "image {width}x{height} is smaller than {0}x{0}",
                Self::MIN_SIDE
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel intensity {bad} outside [0, 1]")));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Image::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Intensity at integer coordinates, clamped to the nearest edge pixel.
    pub fn at_clamped(&self, x: i64, y: i64) -> f64 {
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        self.pixels[y * self.width + x]
    }

    /// Bilinear intensity; points outside the image are clamped onto it first.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, (self.width - 1) as f64) };
        let y = if y.is_nan() { 0.0 } else { y.clamp(0.0, (self.height - 1) as f64) };
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as i64, y0 as i64);
        let a = self.at_clamped(xi, yi);
        let b = self.at_clamped(xi + 1, yi);
        let c = self.at_clamped(xi, yi + 1);
        let d = self.at_clamped(xi + 1, yi + 1);
        (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HogConfig {
    /// Patch side as a fraction of `sqrt(bbox area)`.
    pub patch_scale: f64,
    /// Lower bound on the patch side in pixels.
    pub min_patch: f64,
    /// Cells per patch side.
    pub cells: usize,
    pub orientation_bins: usize,
    pub epsilon: f64,
}

impl Default for HogConfig {
    fn default() -> Self {
        HogConfig {
            patch_scale: 0.2,
            min_patch: 16.0,
            cells: 2,
            orientation_bins: 8,
            epsilon: 1e-6,
        }
    }
}

/// Descriptor length per landmark.
pub const HOG_BLOCK: usize = 32;

impl HogConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells * self.cells * self.orientation_bins != HOG_BLOCK {
            return Err(Error::InvalidInput(format!(
                "HOG block must have {HOG_BLOCK} entries, got {}x{}x{}",
                self.cells, self.cells, self.orientation_bins
            )));
        }
        if !(self.patch_scale > 0.0 && self.min_patch >= 1.0 && self.epsilon > 0.0) {
            return Err(Error::InvalidInput("HOG patch scale, minimum side and epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Concatenated per-landmark HOG blocks, `32 * N` entries.
pub fn hog_descriptor(
    img: &Image,
    u: &Landmarks2D,
    bbox: &BoundingBox,
    cfg: &HogConfig,
) -> Result<DVector<f64>> {
    bbox.validate()?;
    cfg.validate()?;
    let side = (cfg.patch_scale * bbox.size()).max(cfg.min_patch);
    let mut out = DVector::zeros(HOG_BLOCK * u.ncols());
    for j in 0..u.ncols() {
        let block = hog_block(img, u[(0, j)], u[(1, j)], side, cfg);
        out.rows_mut(HOG_BLOCK * j, HOG_BLOCK).copy_from_slice(&block);
    }
    Ok(out)
}

fn hog_block(img: &Image, cx: f64, cy: f64, side: f64, cfg: &HogConfig) -> [f64; HOG_BLOCK] {
    let n = side.round().max(1.0) as i64;
    let x0 = sanitize(cx - side / 2.0).round() as i64;
    let y0 = sanitize(cy - side / 2.0).round() as i64;
    let cells = cfg.cells as i64;
    let bins = cfg.orientation_bins;
    let bin_width = PI / bins as f64;

    let mut hist = [0.0; HOG_BLOCK];
    for py in 0..n {
        for px in 0..n {
            let (x, y) = (x0 + px, y0 + py);
            let gx = img.at_clamped(x + 1, y) - img.at_clamped(x - 1, y);
            let gy = img.at_clamped(x, y + 1) - img.at_clamped(x, y - 1);
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let theta = gy.atan2(gx).rem_euclid(PI);
            let pos = theta / bin_width;
            let lo_f = pos.floor();
            let frac = pos - lo_f;
            let lo = (lo_f as usize) % bins;
            let hi = (lo + 1) % bins;
            let cell = ((py * cells / n) * cells + px * cells / n) as usize;
            hist[cell * bins + lo] += mag * (1.0 - frac);
            hist[cell * bins + hi] += mag * frac;
        }
    }
    let norm = (hist.iter().map(|v| v * v).sum::<f64>() + cfg.epsilon * cfg.epsilon).sqrt();
    hist.iter_mut().for_each(|v| *v /= norm);
    hist
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v.clamp(-1e9, 1e9)
    } else {
        0.0
    }
}

/// Pixel difference between two points placed relative to an anchor landmark.
/// Offsets are in units of `sqrt(bbox area)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeIndexedFeature {
    pub anchor: usize,
    pub offset_a: [f64; 2],
    pub offset_b: [f64; 2],
    pub threshold: f64,
}

pub fn sample_feature(
    img: &Image,
    u: &Landmarks2D,
    bbox: &BoundingBox,
    f: &ShapeIndexedFeature,
) -> f64 {
    let scale = bbox.size();
    let (ax, ay) = (u[(0, f.anchor)], u[(1, f.anchor)]);
    let a = img.bilinear(ax + f.offset_a[0] * scale, ay + f.offset_a[1] * scale);
    let b = img.bilinear(ax + f.offset_b[0] * scale, ay + f.offset_b[1] * scale);
    a - b
}

/// Unit vector drawn uniformly from the sphere in `dim` dimensions.
pub fn random_direction<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    loop {
        let d = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = d.norm();
        if norm > 1e-12 {
            return d / norm;
        }
    }
}

const ZERO_VARIANCE: f64 = 1e-24;

/// Greedy correlation-based selection. `values` is samples x candidates and
/// `targets` samples x D. Each pick projects the targets onto a fresh random
/// unit direction and takes the candidate with the largest absolute Pearson
/// correlation (lowest index on ties). Already picked and zero-variance
/// candidates are skipped; once every usable candidate is taken, picks may
/// repeat.
pub fn select_features<R: Rng + ?Sized>(
    values: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if values.nrows() != targets.nrows() {
        return Err(Error::Dimension(format!(
            "{} feature rows but {} target rows",
            values.nrows(),
            targets.nrows()
        )));
    }
    let centered: Vec<DVector<f64>> = (0..values.ncols())
        .into_par_iter()
        .map(|c| {
            let col = values.column(c);
            col.add_scalar(-col.mean())
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|c| c.norm_squared()).collect();
    let usable: Vec<usize> = (0..values.ncols()).filter(|&c| norms[c] > ZERO_VARIANCE).collect();
    if usable.is_empty() {
        return Err(Error::DegenerateConfiguration(
            "every candidate feature has zero variance".into(),
        ));
    }

    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let dir = random_direction(rng, targets.ncols());
        let y = targets * dir;
        let y = y.add_scalar(-y.mean());
        let y_norm = y.norm();
        let pool: Vec<usize> = {
            let fresh: Vec<usize> = usable.iter().copied().filter(|c| !picked.contains(c)).collect();
            if fresh.is_empty() { usable.clone() } else { fresh }
        };
        let scores: Vec<f64> = pool
            .par_iter()
            .map(|&c| {
                if y_norm == 0.0 {
                    0.0
                } else {
                    (centered[c].dot(&y) / (norms[c].sqrt() * y_norm)).abs()
                }
            })
            .collect();
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        picked.push(pool[best]);
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bbox() -> BoundingBox {
        BoundingBox::new(10.0, 10.0, 100.0, 100.0).unwrap()
    }

    fn noise_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..w * h).map(|_| rng.random::<f64>()).collect();
        Image::new(w, h, px).unwrap()
    }

    #[test]
    fn image_validation() {
        assert!(Image::new(15, 20, vec![0.0; 300]).is_err());
        assert!(Image::new(16, 16, vec![0.0; 10]).is_err());
        assert!(Image::new(16, 16, vec![1.5; 256]).is_err());
        assert!(Image::new(16, 16, vec![0.5; 256]).is_ok());
    }

    #[test]
    fn bilinear_interpolates_and_clamps() {
        let img = Image::from_fn(20, 20, |x, y| (x + 2 * y) as f64 / 60.0).unwrap();
        assert!((img.bilinear(3.5, 4.25) - (3.5 + 8.5) / 60.0).abs() < 1e-12);
        assert_eq!(img.bilinear(-5.0, 0.0), img.at_clamped(0, 0));
        assert_eq!(img.bilinear(100.0, 100.0), img.at_clamped(19, 19));
    }

    #[test]
    fn hog_constant_image_is_zero() {
        let img = Image::new(64, 64, vec![0.4; 64 * 64]).unwrap();
        let u = Landmarks2D::from_column_slice(&[32.0, 32.0, 5.0, 60.0]);
        let d = hog_descriptor(&img, &u, &bbox(), &HogConfig::default()).unwrap();
        assert_eq!(d.len(), 64);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hog_length_is_32n() {
        let img = noise_image(1, 64, 64);
        let u = Landmarks2D::from_fn(21, |r, c| 10.0 + (c * 2 + r) as f64);
        let d = hog_descriptor(&img, &u, &bbox(), &HogConfig::default()).unwrap();
        assert_eq!(d.len(), 672);
    }

    #[test]
    fn hog_vertical_edge_energy_in_horizontal_gradient_bins() {
        let img = Image::from_fn(64, 64, |x, _| if x < 32 { 0.1 } else { 0.9 }).unwrap();
        let u = Landmarks2D::from_column_slice(&[32.0, 30.0]);
        let d = hog_descriptor(&img, &u, &bbox(), &HogConfig::default()).unwrap();
        // Independent oracle: gradient direction is exactly horizontal, so an
        // unsigned histogram puts it in the bin centred on 0 rad (index 0 of
        // each cell).
        let total: f64 = d.iter().map(|v| v * v).sum();
        let horizontal: f64 = (0..4).map(|cell| d[cell * 8].powi(2)).sum();
        assert!(total > 0.0);
        assert!(horizontal / total >= 0.9, "fraction {}", horizontal / total);
    }

    #[test]
    fn hog_blocks_are_unit_bounded_and_offset_invariant() {
        let img = Image::from_fn(48, 48, |x, y| 0.1 + 0.5 * ((x * 7 + y * 13) % 17) as f64 / 17.0).unwrap();
        let shifted = Image::new(48, 48, img.pixels().iter().map(|v| v + 0.3).collect()).unwrap();
        let u = Landmarks2D::from_column_slice(&[20.0, 20.0, 2.0, 46.0, -10.0, 70.0]);
        let cfg = HogConfig::default();
        let a = hog_descriptor(&img, &u, &bbox(), &cfg).unwrap();
        let b = hog_descriptor(&shifted, &u, &bbox(), &cfg).unwrap();
        assert!((&a - &b).amax() < 1e-10);
        for j in 0..3 {
            assert!(a.rows(32 * j, 32).norm() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn hog_rejects_bad_config() {
        let img = noise_image(2, 32, 32);
        let u = Landmarks2D::from_column_slice(&[10.0, 10.0]);
        let cfg = HogConfig { orientation_bins: 9, ..HogConfig::default() };
        assert!(hog_descriptor(&img, &u, &bbox(), &cfg).is_err());
    }

    #[test]
    fn sample_feature_examples() {
        let u = Landmarks2D::from_column_slice(&[30.0, 30.0]);
        let b = bbox();
        let same = ShapeIndexedFeature { anchor: 0, offset_a: [0.1, 0.05], offset_b: [0.1, 0.05], threshold: 0.0 };
        assert_eq!(sample_feature(&noise_image(3, 64, 64), &u, &b, &same), 0.0);

        let constant = Image::new(64, 64, vec![0.7; 4096]).unwrap();
        let f = ShapeIndexedFeature { anchor: 0, offset_a: [0.1, -0.05], offset_b: [-0.12, 0.02], threshold: 0.0 };
        assert_eq!(sample_feature(&constant, &u, &b, &f), 0.0);

        let w = 64.0;
        let ramp = Image::from_fn(64, 64, |x, _| x as f64 / w).unwrap();
        let expected = (f.offset_a[0] - f.offset_b[0]) * b.size() / w;
        assert!((sample_feature(&ramp, &u, &b, &f) - expected).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn sample_feature_is_antisymmetric(
            ax in -0.15f64..0.15, ay in -0.15f64..0.15,
            bx in -0.15f64..0.15, by in -0.15f64..0.15,
            seed in 0u64..50,
        ) {
            let img = noise_image(seed, 32, 32);
            let u = Landmarks2D::from_column_slice(&[16.0, 14.0]);
            let b = BoundingBox::new(0.0, 0.0, 30.0, 30.0).unwrap();
            let f = ShapeIndexedFeature { anchor: 0, offset_a: [ax, ay], offset_b: [bx, by], threshold: 0.0 };
            let g = ShapeIndexedFeature { offset_a: f.offset_b, offset_b: f.offset_a, ..f };
            prop_assert_eq!(sample_feature(&img, &u, &b, &f), -sample_feature(&img, &u, &b, &g));
        }
    }

    #[test]
    fn select_picks_exact_copy_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 40;
        let targets = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        let mut values = DMatrix::from_fn(n, 6, |_, _| rng.random::<f64>());
        values.set_column(3, &targets.column(0));
        let picked = select_features(&values, &targets, 1, &mut rng).unwrap();
        assert_eq!(picked, vec![3]);
    }

    #[test]
    fn select_skips_zero_variance_and_errors_when_all_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let targets = DMatrix::from_fn(10, 2, |_, _| rng.random::<f64>());
        let mut values = DMatrix::from_element(10, 3, 0.5);
        assert!(select_features(&values, &targets, 1, &mut rng).is_err());
        values.set_column(2, &DVector::from_fn(10, |i, _| i as f64));
        let picked = select_features(&values, &targets, 2, &mut rng).unwrap();
        assert_eq!(picked, vec![2, 2]);
    }

    #[test]
    fn select_matches_exhaustive_scan() {
        let mut data_rng = ChaCha8Rng::seed_from_u64(6);
        let n = 60;
        let values = DMatrix::from_fn(n, 50, |_, _| data_rng.random::<f64>() - 0.5);
        let targets = DMatrix::from_fn(n, 4, |_, _| data_rng.random::<f64>());

        let picked = select_features(&values, &targets, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();

        // Oracle: replay the same directions and scan every column with a
        // textbook Pearson formula.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut expected: Vec<usize> = Vec::new();
        for _ in 0..5 {
            let dir = random_direction(&mut rng, 4);
            let y: Vec<f64> = (0..n).map(|i| (0..4).map(|d| targets[(i, d)] * dir[d]).sum()).collect();
            let mut best = None;
            let mut best_score = -1.0;
            for c in 0..50 {
                if expected.contains(&c) {
                    continue;
                }
                let x: Vec<f64> = (0..n).map(|i| values[(i, c)]).collect();
                let mx = x.iter().sum::<f64>() / n as f64;
                let my = y.iter().sum::<f64>() / n as f64;
                let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    sxy += (x[i] - mx) * (y[i] - my);
                    sxx += (x[i] - mx).powi(2);
                    syy += (y[i] - my).powi(2);
                }
                let r = (sxy / (sxx * syy).sqrt()).abs();
                if r > best_score {
                    best_score = r;
                    best = Some(c);
                }
            }
            expected.push(best.unwrap());
        }
        assert_eq!(picked, expected);
    }
}
