//! Synthetic faces with exact ground truth: a landmark layout on an
//! ellipsoid, smooth deformation bases, random poses and procedurally
//! rendered images whose local texture identifies each landmark.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3xX, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{
    compose, project, visibility, BoundingBox, PoseParams, ProjectionMatrix, VisibilityMode,
    VisibilityVector,
};
use crate::error::{Error, Result};
use crate::features::Image;
use crate::gt_fit::Annotation;
use crate::shape_model::{homogenize, DeformableModel, LandmarkScan, Shape3D, ShapeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_train: usize,
    pub num_test: usize,
    /// Number of 3D scans emitted for model building.
    pub num_scans: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub num_landmarks: usize,
    pub num_bases: usize,
    /// Radians, `[lo, hi]`.
    pub yaw_range: [f64; 2],
    pub pitch_range: [f64; 2],
    pub roll_range: [f64; 2],
    /// Pixels per model unit.
    pub scale_range: [f64; 2],
    /// Maximum offset of the face center from the image center, pixels.
    pub center_jitter: f64,
    /// Per-basis coefficient standard deviation; `None` uses `0.5 * 0.85^i`.
    pub shape_std: Option<Vec<f64>>,
    pub noise_std: f64,
    pub bbox_translation_fraction: f64,
    pub bbox_scale_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_train: 500,
            num_test: 100,
            num_scans: 60,
            image_width: 128,
            image_height: 128,
            num_landmarks: 21,
            num_bases: 10,
            yaw_range: [-PI / 2.0, PI / 2.0],
            pitch_range: [-20f64.to_radians(), 20f64.to_radians()],
            roll_range: [-15f64.to_radians(), 15f64.to_radians()],
            scale_range: [28.0, 36.0],
            center_jitter: 4.0,
            shape_std: None,
            noise_std: 0.5,
            bbox_translation_fraction: 0.05,
            bbox_scale_fraction: 0.10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn num_images(&self) -> usize {
        self.num_train + self.num_test
    }

    pub fn shape_std(&self) -> Vec<f64> {
        match &self.shape_std {
            Some(v) => v.clone(),
            None => (0..self.num_bases).map(|i| 0.5 * 0.85f64.powi(i as i32)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.num_landmarks < 6 {
            return bad(format!("layout needs at least 6 landmarks, got {}", self.num_landmarks));
        }
        let max_bases = 3 * self.num_landmarks - 12;
        if self.num_bases > max_bases {
            return bad(format!(
                "{} landmarks support at most {max_bases} non-rigid bases, got {}",
                self.num_landmarks, self.num_bases
            ));
        }
        if self.num_scans <= self.num_bases {
            return bad(format!(
                "need more scans ({}) than bases ({})",
                self.num_scans, self.num_bases
            ));
        }
        if self.image_width < Image::MIN_SIDE || self.image_height < Image::MIN_SIDE {
            return bad("image must be at least 16x16".into());
        }
        for (name, r) in [
            ("yaw_range", self.yaw_range),
            ("pitch_range", self.pitch_range),
            ("roll_range", self.roll_range),
            ("scale_range", self.scale_range),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return bad(format!("{name} must satisfy lo <= hi"));
            }
        }
        if self.scale_range[0] <= 0.0 {
            return bad("scale_range must be positive".into());
        }
        if self.pitch_range[0].abs().max(self.pitch_range[1].abs()) >= PI / 2.0 {
            return bad("pitch_range must stay inside (-pi/2, pi/2)".into());
        }
        let std = self.shape_std();
        if std.len() != self.num_bases || std.iter().any(|s| !(*s >= 0.0)) {
            return bad(format!("shape_std needs {} nonnegative entries", self.num_bases));
        }
        for (name, v) in [
            ("center_jitter", self.center_jitter),
            ("noise_std", self.noise_std),
            ("bbox_translation_fraction", self.bbox_translation_fraction),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be nonnegative"));
            }
        }
        if !(0.0..1.0).contains(&self.bbox_scale_fraction) {
            return bad("bbox_scale_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub annotation: Annotation,
    pub true_m: ProjectionMatrix,
    pub true_p: ShapeParams,
    pub true_vis_soft: VisibilityVector,
}

const AXES: [f64; 3] = [1.0, 1.3, 0.9];

/// Front-surface landmarks given by image-plane position; `None` in z means
/// the point lies on the visible side of the ellipsoid.
const TEMPLATE: [(f64, f64, Option<f64>); 21] = [
    (0.0, 0.0, None),       // nose apex
    (-0.55, -0.3, None),    // outer eye corners
    (0.55, -0.3, None),
    (-0.2, -0.3, None),     // inner eye corners
    (0.2, -0.3, None),
    (-0.32, 0.5, None),     // mouth corners
    (0.32, 0.5, None),
    (0.0, 1.0, None),       // chin
    (-0.62, -0.58, None),   // brow outer
    (0.62, -0.58, None),
    (-0.38, -0.65, None),   // brow center
    (0.38, -0.65, None),
    (-0.14, -0.58, None),   // brow inner
    (0.14, -0.58, None),
    (-0.375, -0.3, None),   // eye centers
    (0.375, -0.3, None),
    (-0.16, 0.18, None),    // nostrils
    (0.16, 0.18, None),
    (0.0, 0.52, None),      // mouth center
    (-1.0, 0.05, Some(-0.15)), // ears; x is solved on the surface
    (1.0, 0.05, Some(-0.15)),
];

fn surface_point(x: f64, y: f64, z: Option<f64>) -> Vector3<f64> {
    let [a, b, c] = AXES;
    match z {
        None => {
            let r = 1.0 - (x / a).powi(2) - (y / b).powi(2);
            Vector3::new(x, y, c * r.max(0.0).sqrt())
        }
        Some(z) => {
            let r = 1.0 - (y / b).powi(2) - (z / c).powi(2);
            Vector3::new(x.signum() * a * r.max(0.0).sqrt(), y, z)
        }
    }
}

fn surface_normal(p: &Vector3<f64>) -> Vector3<f64> {
    let [a, b, c] = AXES;
    Vector3::new(p.x / (a * a), p.y / (b * b), p.z / (c * c)).normalize()
}

/// Canonical landmark positions and normals. The first 21 follow the
/// template; further landmarks are mirrored jaw pairs and, for an odd
/// remainder, a forehead point.
pub fn layout(n: usize) -> Result<(Matrix3xX<f64>, Matrix3xX<f64>)> {
    if n < 6 {
        return Err(Error::InvalidInput(format!(
            "layout template needs at least 6 landmarks, got {n}"
        )));
    }
    let mut pts: Vec<Vector3<f64>> = TEMPLATE
        .iter()
        .take(n)
        .map(|&(x, y, z)| surface_point(x, y, z))
        .collect();
    let extra = n.saturating_sub(TEMPLATE.len());
    let pairs = extra / 2;
    for k in 0..pairs {
        let y = 0.25 + 0.7 * (k as f64 + 0.5) / pairs as f64;
        let x = 0.85 * (1.0 - (y / AXES[1]).powi(2)).sqrt();
        pts.push(surface_point(-x, y, None));
        pts.push(surface_point(x, y, None));
    }
    if extra % 2 == 1 {
        pts.push(surface_point(0.0, -0.95, None));
    }

    let normals = Matrix3xX::from_columns(&pts.iter().map(surface_normal).collect::<Vec<_>>());
    let mut points = Matrix3xX::from_columns(&pts);
    // Center y and z; x is centered by construction when every pair is complete.
    let mut centroid = points.column_sum() / n as f64;
    let split_pair = TEMPLATE_PAIRS.iter().any(|&(l, r)| l < n && r >= n);
    if !split_pair {
        centroid.x = 0.0;
    }
    for mut col in points.column_iter_mut() {
        col -= centroid;
    }
    Ok((points, normals))
}

const TEMPLATE_PAIRS: [(usize, usize); 9] = [
    (1, 2),
    (3, 4),
    (5, 6),
    (8, 9),
    (10, 11),
    (12, 13),
    (14, 15),
    (16, 17),
    (19, 20),
];

/// Indices of mirrored pairs `(left, right)` present in an `n`-landmark layout.
pub fn mirror_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> =
        TEMPLATE_PAIRS.into_iter().filter(|&(_, r)| r < n).collect();
    let jaw = n.saturating_sub(TEMPLATE.len()) / 2;
    pairs.extend((0..jaw).map(|k| (TEMPLATE.len() + 2 * k, TEMPLATE.len() + 2 * k + 1)));
    pairs
}

/// Orthonormal basis of the 12-dimensional affine deformation space
/// `{L * S0 + t 1^T}` flattened column-major.
fn affine_span(points: &Matrix3xX<f64>) -> DMatrix<f64> {
    let n = points.ncols();
    let mut span = DMatrix::zeros(3 * n, 12);
    for c in 0..3 {
        for f in 0..4 {
            for j in 0..n {
                let v = if f < 3 { points[(f, j)] } else { 1.0 };
                span[(3 * j + c, 4 * c + f)] = v;
            }
        }
    }
    span.qr().q()
}

fn smooth_field(rng: &mut ChaCha8Rng, points: &Matrix3xX<f64>) -> DVector<f64> {
    let n = points.ncols();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut field = DVector::zeros(3 * n);
    for _ in 0..6 {
        let center = points.column(rng.random_range(0..n)).into_owned();
        let coef = Vector3::from_fn(|_, _| normal.sample(rng));
        let width = rng.random_range(0.35..0.8);
        for j in 0..n {
            let d2 = (points.column(j) - center).norm_squared();
            let w = (-d2 / (2.0 * width * width)).exp();
            for c in 0..3 {
                field[3 * j + c] += w * coef[c];
            }
        }
    }
    field
}

fn orthogonalize(v: &mut DVector<f64>, against: &[DVector<f64>]) {
    for _ in 0..2 {
        for q in against {
            let d = q.dot(v);
            v.axpy(-d, q, 1.0);
        }
    }
}

/// Generative model and scans. Bases are orthonormal, orthogonal to every
/// affine deformation of the mean (so rigid pose and shape never trade off),
/// and have zero homogeneous row.
pub fn make_base_model(cfg: &SynthConfig) -> Result<(DeformableModel, Vec<LandmarkScan>)> {
    cfg.validate()?;
    let n = cfg.num_landmarks;
    let (points, normals) = layout(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);

    let affine = affine_span(&points);
    let mut basis: Vec<DVector<f64>> = affine.column_iter().map(|c| c.into_owned()).collect();
    let mut shape_bases = Vec::with_capacity(cfg.num_bases);
    while shape_bases.len() < cfg.num_bases {
        let mut v = smooth_field(&mut rng, &points);
        let before = v.norm();
        orthogonalize(&mut v, &basis);
        let after = v.norm();
        if after < 1e-3 * before.max(1e-12) {
            continue;
        }
        v /= after;
        basis.push(v.clone());
        let m = Matrix3xX::from_column_slice(v.as_slice());
        shape_bases.push(homogenize(&m, 0.0));
    }
    let model = DeformableModel::new(homogenize(&points, 1.0), shape_bases, normals.clone())?;

    let std = cfg.shape_std();
    let mut coeffs: Vec<Vec<f64>> = (0..cfg.num_scans)
        .map(|_| {
            std.iter()
                .map(|&s| s * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        })
        .collect();
    for i in 0..cfg.num_bases {
        let mean = coeffs.iter().map(|c| c[i]).sum::<f64>() / cfg.num_scans as f64;
        coeffs.iter_mut().for_each(|c| c[i] -= mean);
    }
    let scans = coeffs
        .into_iter()
        .map(|c| {
            let shape = model.instantiate(&ShapeParams::from_vec(c))?;
            let shift = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
            let mut pts = shape.fixed_rows::<3>(0).into_owned();
            for mut col in pts.column_iter_mut() {
                col += shift;
            }
            LandmarkScan::new(pts, Some(normals.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((model, scans))
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * rng.random::<f64>()
}

/// Random shift of up to `translation_fraction` of each side and a common
/// scale factor in `1 +- scale_fraction`, about the box center.
pub fn perturb_bbox<R: Rng + ?Sized>(
    b: &BoundingBox,
    translation_fraction: f64,
    scale_fraction: f64,
    rng: &mut R,
) -> BoundingBox {
    let dx = (2.0 * rng.random::<f64>() - 1.0) * translation_fraction * b.width;
    let dy = (2.0 * rng.random::<f64>() - 1.0) * translation_fraction * b.height;
    let k = 1.0 + (2.0 * rng.random::<f64>() - 1.0) * scale_fraction;
    BoundingBox {
        x: b.x + dx + (1.0 - k) * b.width / 2.0,
        y: b.y + dy + (1.0 - k) * b.height / 2.0,
        width: k * b.width,
        height: k * b.height,
    }
}

/// Per-sample generator seeded by `(seed, index)`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// `num_train + num_test` samples; the first `num_train` form the training split.
pub fn generate(model: &DeformableModel, cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    if model.num_landmarks() != cfg.num_landmarks || model.num_bases() != cfg.num_bases {
        return Err(Error::Dimension(format!(
            "model has {} landmarks and {} bases, config asks for {} and {}",
            model.num_landmarks(),
            model.num_bases(),
            cfg.num_landmarks,
            cfg.num_bases
        )));
    }
    (0..cfg.num_images())
        .into_par_iter()
        .map(|i| generate_one(model, cfg, i))
        .collect()
}

pub fn generate_one(model: &DeformableModel, cfg: &SynthConfig, index: usize) -> Result<SynthSample> {
    let mut rng = sample_rng(cfg.seed, index);
    let std = cfg.shape_std();
    let p = ShapeParams::from_vec(
        std.iter()
            .map(|&s| s * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect(),
    );
    let yaw = uniform(&mut rng, cfg.yaw_range);
    let pitch = uniform(&mut rng, cfg.pitch_range);
    let roll = uniform(&mut rng, cfg.roll_range);
    let scale = uniform(&mut rng, cfg.scale_range);
    let jitter = [-cfg.center_jitter, cfg.center_jitter];
    let tx = cfg.image_width as f64 / 2.0 + uniform(&mut rng, jitter);
    let ty = cfg.image_height as f64 / 2.0 + uniform(&mut rng, jitter);
    let m = compose(&PoseParams::new(scale, yaw, pitch, roll, tx, ty))?;

    let shape = model.instantiate(&p)?;
    let u = project(&m, &shape);
    let soft = visibility(&m, model.normals(), VisibilityMode::Soft)?;
    let hard = soft.harden();

    let image = render(&mut rng, cfg, &m, &u, model, &soft, scale, roll)?;

    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("valid std");
    let mut ann = u.clone();
    for j in 0..ann.ncols() {
        if hard.is_visible(j) {
            if cfg.noise_std > 0.0 {
                ann[(0, j)] += noise.sample(&mut rng);
                ann[(1, j)] += noise.sample(&mut rng);
            }
        } else {
            ann[(0, j)] = f64::NAN;
            ann[(1, j)] = f64::NAN;
        }
    }
    let tight = BoundingBox::enclosing(&u)?;
    let bbox = perturb_bbox(
        &tight,
        cfg.bbox_translation_fraction,
        cfg.bbox_scale_fraction,
        &mut rng,
    );
    Ok(SynthSample {
        image,
        annotation: Annotation::new(ann, hard, bbox)?,
        true_m: m,
        true_p: p,
        true_vis_soft: soft,
    })
}

/// Appearance attached to a landmark identity.
struct Texture {
    wavelength: f64,
    orientation: f64,
    phase: f64,
    amplitude: f64,
}

fn texture(j: usize, scale: f64) -> Texture {
    let golden = 0.618_033_988_749_894_9;
    let a = (j as f64 * golden).fract();
    let b = (j as f64 * 0.414_213_562_373_095 + 0.2).fract();
    Texture {
        wavelength: (0.14 + 0.14 * a) * scale,
        orientation: PI * b,
        phase: if j % 2 == 0 { 0.0 } else { PI / 2.0 },
        amplitude: if j % 3 == 0 { -0.28 } else { 0.28 },
    }
}

#[allow(clippy::too_many_arguments)]
fn render(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    m: &ProjectionMatrix,
    u: &crate::camera::Landmarks2D,
    model: &DeformableModel,
    soft: &VisibilityVector,
    scale: f64,
    roll: f64,
) -> Result<Image> {
    let (w, h) = (cfg.image_width, cfg.image_height);
    let gx = rng.random_range(-1.0..1.0);
    let gy = rng.random_range(-1.0..1.0);
    let base = rng.random_range(0.35..0.55);
    let mut px: Vec<f64> = (0..h)
        .flat_map(|y| {
            (0..w).map(move |x| {
                base + 0.12 * (gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5))
            })
        })
        .collect();

    let rot = [m.rotation_row(0), m.rotation_row(1)];
    let sigma = 0.09 * scale;
    for j in 0..u.ncols() {
        let weight = soft.values[j].clamp(0.0, 1.0);
        if soft.values[j] < 0.0 || weight == 0.0 {
            continue;
        }
        let t = texture(j, scale);
        let n = model.normals().column(j);
        // Blob is squashed along the image direction of its surface normal.
        let mut dir = [rot[0].dot(&n), rot[1].dot(&n)];
        let dn = dir[0].hypot(dir[1]);
        if dn > 1e-9 {
            dir = [dir[0] / dn, dir[1] / dn];
        } else {
            dir = [1.0, 0.0];
        }
        let s_along = sigma * weight.max(0.25);
        let theta = t.orientation + roll;
        let (ct, st) = (theta.cos(), theta.sin());
        let (cx, cy) = (u[(0, j)], u[(1, j)]);
        let reach = 3.0 * sigma;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil().max(0.0) as usize).min(w - 1);
        let y1 = ((cy + reach).ceil().max(0.0) as usize).min(h - 1);
        if cx + reach < 0.0 || cy + reach < 0.0 {
            continue;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let a = dx * dir[0] + dy * dir[1];
                let b = -dx * dir[1] + dy * dir[0];
                let env = (-(a * a) / (2.0 * s_along * s_along) - (b * b) / (2.0 * sigma * sigma)).exp();
                let wave = (2.0 * PI * (dx * ct + dy * st) / t.wavelength + t.phase).cos();
                px[y * w + x] += t.amplitude * weight * env * (0.5 + wave);
            }
        }
    }
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Image::new(w, h, px)
}

/// Homogeneous ground-truth shape of a sample.
pub fn true_shape(model: &DeformableModel, sample: &SynthSample) -> Result<Shape3D> {
    model.instantiate(&sample.true_p)
}
