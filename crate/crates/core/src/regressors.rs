//! Per-layer regressors: visibility-masked ridge regression on HOG features and
//! occlusion-weighted random ferns on shape-indexed pixel differences.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{BoundingBox, Landmarks2D, VisibilityVector};
use crate::error::{Error, Result};
use crate::features::{sample_feature, select_features, Image, ShapeIndexedFeature, HOG_BLOCK};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegressor {
    /// `32N x D`; predictions are `theta^T (mask .* x)`.
    pub theta: DMatrix<f64>,
    pub lambda: f64,
}

/// Features with the blocks of invisible landmarks zeroed.
pub fn masked(x: &DVector<f64>, vis: &VisibilityVector) -> Result<DVector<f64>> {
    if x.len() != HOG_BLOCK * vis.len() {
        return Err(Error::Dimension(format!(
            "{} features for {} landmarks",
            x.len(),
            vis.len()
        )));
    }
    let mut out = x.clone();
    for j in 0..vis.len() {
        if !vis.is_visible(j) {
            out.rows_mut(HOG_BLOCK * j, HOG_BLOCK).fill(0.0);
        }
    }
    Ok(out)
}

/// Ridge regression without intercept on masked features. `lambda = 0` gives
/// the minimum-norm least-squares solution.
pub fn train_linear(
    features: &[DVector<f64>],
    vis: &[VisibilityVector],
    targets: &DMatrix<f64>,
    lambda: f64,
) -> Result<LinearRegressor> {
    let n = features.len();
    if n == 0 {
        return Err(Error::TooFewSamples { needed: 1, found: 0 });
    }
    if vis.len() != n || targets.nrows() != n {
        return Err(Error::Dimension(format!(
            "{n} feature vectors, {} visibility vectors, {} target rows",
            vis.len(),
            targets.nrows()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("ridge weight {lambda} must be finite and nonnegative")));
    }
    let dim = features[0].len();
    let rows = features
        .par_iter()
        .zip(vis.par_iter())
        .map(|(x, v)| {
            if x.len() != dim {
                return Err(Error::Dimension(format!("feature length {} vs {dim}", x.len())));
            }
            masked(x, v)
        })
        .collect::<Result<Vec<_>>>()?;
    let x = DMatrix::from_fn(n, dim, |i, j| rows[i][j]);

    let theta = if lambda == 0.0 {
        let svd = x.clone().svd(true, true);
        let tol = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE) * n.max(dim) as f64;
        svd.solve(targets, tol)
            .map_err(|e| Error::Singular(e.to_string()))?
    } else if n >= dim {
        let mut gram = x.tr_mul(&x);
        for i in 0..dim {
            gram[(i, i)] += lambda;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Singular("regularized normal matrix not positive definite".into()))?;
        chol.solve(&x.tr_mul(targets))
    } else {
        let mut gram = &x * x.transpose();
        for i in 0..n {
            gram[(i, i)] += lambda;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Singular("regularized kernel matrix not positive definite".into()))?;
        x.tr_mul(&chol.solve(targets))
    };
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("ridge solution has non-finite entries".into()));
    }
    Ok(LinearRegressor { theta, lambda })
}

pub fn apply_linear(r: &LinearRegressor, x: &DVector<f64>, vis: &VisibilityVector) -> Result<DVector<f64>> {
    if x.len() != r.theta.nrows() {
        return Err(Error::Dimension(format!(
            "regressor expects {} features, got {}",
            r.theta.nrows(),
            x.len()
        )));
    }
    Ok(r.theta.tr_mul(&masked(x, vis)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FernConfig {
    pub depth: usize,
    pub candidates_per_zone: usize,
    /// Offset radius in bbox-normalized units.
    pub offset_radius: f64,
    /// Bin output shrinkage.
    pub beta: f64,
    /// Threshold sampling range as percentiles of the training values.
    pub threshold_percentiles: [f64; 2],
    pub zones_selected: usize,
}

pub const GRID: usize = 3;
pub const NUM_ZONES: usize = GRID * GRID;

impl Default for FernConfig {
    fn default() -> Self {
        FernConfig {
            depth: 5,
            candidates_per_zone: 400,
            offset_radius: 0.15,
            beta: 5.0,
            threshold_percentiles: [5.0, 95.0],
            zones_selected: 3,
        }
    }
}

impl FernConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.threshold_percentiles;
        let ok = (1..=16).contains(&self.depth)
            && self.candidates_per_zone >= 1
            && self.offset_radius > 0.0
            && self.beta >= 0.0
            && (0.0..=100.0).contains(&lo)
            && (lo..=100.0).contains(&hi)
            && (1..=NUM_ZONES).contains(&self.zones_selected);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid fern configuration {self:?}")))
        }
    }

    pub fn num_bins(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fern {
    /// Bit `b` of the bin index is set when feature `b` exceeds its threshold.
    pub features: Vec<ShapeIndexedFeature>,
    pub bin_outputs: Vec<DVector<f64>>,
}

impl Fern {
    pub fn output_dim(&self) -> usize {
        self.bin_outputs.first().map_or(0, |v| v.len())
    }

    pub fn bin_from_values(&self, values: &[f64]) -> usize {
        self.features
            .iter()
            .zip(values)
            .enumerate()
            .fold(0, |acc, (b, (f, &v))| if v > f.threshold { acc | (1 << b) } else { acc })
    }

    pub fn bin_index(&self, img: &Image, u: &Landmarks2D, bbox: &BoundingBox) -> usize {
        let values: Vec<f64> = self.features.iter().map(|f| sample_feature(img, u, bbox, f)).collect();
        self.bin_from_values(&values)
    }

    pub fn lookup(&self, img: &Image, u: &Landmarks2D, bbox: &BoundingBox) -> &DVector<f64> {
        &self.bin_outputs[self.bin_index(img, u, bbox)]
    }

    /// Bin outputs `sum(targets in bin) / (count + beta)` for features whose
    /// thresholds are already set. `values` is samples x depth.
    pub fn fit_outputs(
        features: Vec<ShapeIndexedFeature>,
        values: &DMatrix<f64>,
        targets: &DMatrix<f64>,
        beta: f64,
    ) -> Result<Fern> {
        if values.nrows() != targets.nrows() || values.ncols() != features.len() {
            return Err(Error::Dimension(format!(
                "fern values {}x{}, targets {} rows, {} features",
                values.nrows(),
                values.ncols(),
                targets.nrows(),
                features.len()
            )));
        }
        let d = targets.ncols();
        let mut fern = Fern {
            bin_outputs: vec![DVector::zeros(d); 1 << features.len()],
            features,
        };
        let mut counts = vec![0usize; fern.bin_outputs.len()];
        for i in 0..values.nrows() {
            let row: Vec<f64> = values.row(i).iter().copied().collect();
            let bin = fern.bin_from_values(&row);
            counts[bin] += 1;
            fern.bin_outputs[bin] += targets.row(i).transpose();
        }
        for (out, &c) in fern.bin_outputs.iter_mut().zip(&counts) {
            if c > 0 {
                *out /= c as f64 + beta;
            }
        }
        Ok(fern)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FernLayer {
    pub zones: Vec<usize>,
    pub ferns: Vec<Fern>,
    pub zone_weights: Vec<f64>,
    /// Occlusion of all nine zones measured on the training set.
    pub zone_occlusion: Vec<f64>,
}

/// Current state of one training face as seen by a fern layer.
#[derive(Debug, Clone, Copy)]
pub struct FernSample<'a> {
    pub image: &'a Image,
    pub landmarks: &'a Landmarks2D,
    pub bbox: &'a BoundingBox,
    /// Soft visibility.
    pub vis: &'a VisibilityVector,
}

/// Zone of each landmark on the 3x3 grid over the landmarks' bounding box,
/// numbered row-major from the top left.
pub fn zone_assignments(u: &Landmarks2D) -> Vec<usize> {
    let finite = |v: f64| if v.is_finite() { Some(v) } else { None };
    let xs: Vec<f64> = u.row(0).iter().copied().filter_map(finite).collect();
    let ys: Vec<f64> = u.row(1).iter().copied().filter_map(finite).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi - lo)
    };
    let (x0, w) = range(&xs);
    let (y0, h) = range(&ys);
    let cell = |v: f64, lo: f64, extent: f64| {
        if !(extent > 0.0) || !v.is_finite() {
            GRID / 2
        } else {
            (((v - lo) / extent * GRID as f64).floor().max(0.0) as usize).min(GRID - 1)
        }
    };
    (0..u.ncols())
        .map(|j| cell(u[(1, j)], y0, h) * GRID + cell(u[(0, j)], x0, w))
        .collect()
}

/// `1 - mean clamp(v, 0, 1)` over every (image, landmark) falling in each
/// zone; zones nobody falls in get 1.
pub fn zone_occlusion(assignments: &[Vec<usize>], vis: &[&VisibilityVector]) -> Vec<f64> {
    let mut sum = [0.0; NUM_ZONES];
    let mut count = [0usize; NUM_ZONES];
    for (zones, v) in assignments.iter().zip(vis) {
        for (j, &z) in zones.iter().enumerate() {
            sum[z] += v.values[j].clamp(0.0, 1.0);
            count[z] += 1;
        }
    }
    (0..NUM_ZONES)
        .map(|z| if count[z] == 0 { 1.0 } else { 1.0 - sum[z] / count[z] as f64 })
        .collect()
}

/// The `k` least occluded zones, ties broken by ascending index.
pub fn select_zones(occlusion: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..occlusion.len()).collect();
    order.sort_by(|&a, &b| occlusion[a].total_cmp(&occlusion[b]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Weights proportional to `max(0, 1 - occ)`, uniform when all vanish.
pub fn zone_weights(occlusion: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = occlusion.iter().map(|o| (1.0 - o).max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / occlusion.len() as f64; occlusion.len()]
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn random_offset(rng: &mut ChaCha8Rng, radius: f64) -> [f64; 2] {
    let r = radius * rng.random::<f64>().sqrt();
    let phi = 2.0 * PI * rng.random::<f64>();
    [r * phi.cos(), r * phi.sin()]
}

pub fn train_fern_layer(
    samples: &[FernSample<'_>],
    targets: &DMatrix<f64>,
    cfg: &FernConfig,
    seed: u64,
) -> Result<FernLayer> {
    cfg.validate()?;
    let n = samples.len();
    let min = cfg.num_bins();
    if n < min {
        return Err(Error::TooFewSamples { needed: min, found: n });
    }
    if targets.nrows() != n {
        return Err(Error::Dimension(format!("{n} samples but {} target rows", targets.nrows())));
    }
    let num_landmarks = samples[0].landmarks.ncols();
    if samples
        .iter()
        .any(|s| s.landmarks.ncols() != num_landmarks || s.vis.len() != num_landmarks)
    {
        return Err(Error::Dimension("inconsistent landmark counts across fern samples".into()));
    }

    let assignments: Vec<Vec<usize>> = samples.par_iter().map(|s| zone_assignments(s.landmarks)).collect();
    let vis: Vec<&VisibilityVector> = samples.iter().map(|s| s.vis).collect();
    let occlusion = zone_occlusion(&assignments, &vis);
    if occlusion.iter().all(|&o| o >= 1.0) {
        return Err(Error::InvalidInput("every zone is fully occluded across the training set".into()));
    }
    let zones = select_zones(&occlusion, cfg.zones_selected);
    let selected_occ: Vec<f64> = zones.iter().map(|&z| occlusion[z]).collect();

    let ferns = zones
        .iter()
        .map(|&z| {
            let anchors: Vec<usize> = (0..num_landmarks)
                .filter(|&j| assignments.iter().any(|a| a[j] == z))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(z as u64);
            train_zone_fern(samples, targets, &anchors, cfg, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(FernLayer {
        zones,
        ferns,
        zone_weights: zone_weights(&selected_occ),
        zone_occlusion: occlusion,
    })
}

fn train_zone_fern(
    samples: &[FernSample<'_>],
    targets: &DMatrix<f64>,
    anchors: &[usize],
    cfg: &FernConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Fern> {
    let d = targets.ncols();
    if anchors.is_empty() {
        let idle = ShapeIndexedFeature { anchor: 0, offset_a: [0.0; 2], offset_b: [0.0; 2], threshold: 0.0 };
        return Ok(Fern {
            features: vec![idle; cfg.depth],
            bin_outputs: vec![DVector::zeros(d); cfg.num_bins()],
        });
    }
    let candidates: Vec<ShapeIndexedFeature> = (0..cfg.candidates_per_zone)
        .map(|_| ShapeIndexedFeature {
            anchor: anchors[rng.random_range(0..anchors.len())],
            offset_a: random_offset(rng, cfg.offset_radius),
            offset_b: random_offset(rng, cfg.offset_radius),
            threshold: 0.0,
        })
        .collect();
    let rows: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| {
            candidates
                .iter()
                .map(|f| sample_feature(s.image, s.landmarks, s.bbox, f))
                .collect()
        })
        .collect();
    let values = DMatrix::from_fn(samples.len(), candidates.len(), |i, c| rows[i][c]);

    let picked = match select_features(&values, targets, cfg.depth, rng) {
        Ok(p) => p,
        // Blank texture in this zone: nothing to split on.
        Err(Error::DegenerateConfiguration(_)) => {
            let f = ShapeIndexedFeature { threshold: f64::INFINITY, ..candidates[0] };
            let cols = DMatrix::zeros(samples.len(), cfg.depth);
            return Fern::fit_outputs(vec![f; cfg.depth], &cols, targets, cfg.beta);
        }
        Err(e) => return Err(e),
    };
    let [lo_q, hi_q] = cfg.threshold_percentiles;
    let features: Vec<ShapeIndexedFeature> = picked
        .iter()
        .map(|&c| {
            let mut col: Vec<f64> = values.column(c).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            let lo = percentile(&col, lo_q);
            let hi = percentile(&col, hi_q);
            ShapeIndexedFeature {
                threshold: lo + (hi - lo) * rng.random::<f64>(),
                ..candidates[c]
            }
        })
        .collect();
    let chosen = DMatrix::from_fn(samples.len(), cfg.depth, |i, b| values[(i, picked[b])]);
    Fern::fit_outputs(features, &chosen, targets, cfg.beta)
}

pub fn apply_fern_layer(layer: &FernLayer, img: &Image, u: &Landmarks2D, bbox: &BoundingBox) -> DVector<f64> {
    let d = layer.ferns.first().map_or(0, |f| f.output_dim());
    layer
        .ferns
        .iter()
        .zip(&layer.zone_weights)
        .fold(DVector::zeros(d), |acc, (f, &w)| acc + f.lookup(img, u, bbox) * w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::VisibilityMode;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| r.random::<f64>() - 0.5)
    }

    fn hard(values: Vec<f64>) -> VisibilityVector {
        VisibilityVector { values, mode: VisibilityMode::Hard }
    }

    fn linear_data(seed: u64, n: usize, landmarks: usize, d: usize) -> (Vec<DVector<f64>>, Vec<VisibilityVector>, DMatrix<f64>) {
        let mut r = rng(seed);
        let feats = (0..n).map(|_| DVector::from_fn(32 * landmarks, |_, _| r.random::<f64>())).collect();
        let vis = (0..n)
            .map(|_| hard((0..landmarks).map(|_| if r.random_bool(0.8) { 1.0 } else { 0.0 }).collect()))
            .collect();
        let targets = random_matrix(&mut r, n, d);
        (feats, vis, targets)
    }

    #[test]
    fn zero_targets_give_zero_theta() {
        let (f, v, _) = linear_data(1, 20, 2, 3);
        let r = train_linear(&f, &v, &DMatrix::zeros(20, 3), 120.0).unwrap();
        assert!(r.theta.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn unregularized_matches_normal_equations() {
        let (f, _, y) = linear_data(2, 200, 2, 4);
        let v: Vec<_> = (0..200).map(|_| hard(vec![1.0, 1.0])).collect();
        let r = train_linear(&f, &v, &y, 0.0).unwrap();
        let x = DMatrix::from_fn(200, 64, |i, j| f[i][j]);
        let oracle = (x.transpose() * &x).lu().solve(&(x.transpose() * &y)).unwrap();
        let rel = (&r.theta - &oracle).norm() / oracle.norm();
        assert!(rel < 1e-8, "relative difference {rel}");
    }

    #[test]
    fn primal_and_dual_ridge_agree() {
        let (f, v, y) = linear_data(3, 40, 2, 3);
        let dual = train_linear(&f, &v, &y, 2.0).unwrap();
        let x = DMatrix::from_fn(40, 64, |i, j| masked(&f[i], &v[i]).unwrap()[j]);
        let mut gram = x.transpose() * &x;
        for i in 0..64 {
            gram[(i, i)] += 2.0;
        }
        let primal = gram.cholesky().unwrap().solve(&(x.transpose() * &y));
        assert!((&dual.theta - primal).amax() < 1e-10);
    }

    #[test]
    fn invisible_landmark_features_do_not_matter() {
        let (mut f, mut v, y) = linear_data(4, 30, 3, 2);
        for vis in v.iter_mut() {
            vis.values[1] = 0.0;
        }
        let a = train_linear(&f, &v, &y, 1.0).unwrap();
        let mut r = rng(5);
        for x in f.iter_mut() {
            for k in 32..64 {
                x[k] += 10.0 * r.random::<f64>();
            }
        }
        let b = train_linear(&f, &v, &y, 1.0).unwrap();
        assert_eq!(a.theta, b.theta);
        let residual = |reg: &LinearRegressor| -> f64 {
            (0..30).map(|i| (apply_linear(reg, &f[i], &v[i]).unwrap() - y.row(i).transpose()).norm_squared()).sum()
        };
        assert_eq!(residual(&a), residual(&b));
    }

    #[test]
    fn ridge_norm_shrinks_with_lambda() {
        let (f, v, y) = linear_data(6, 50, 2, 3);
        let mut prev = f64::INFINITY;
        for lambda in [1e-3, 0.1, 1.0, 10.0, 120.0, 1e4] {
            let norm = train_linear(&f, &v, &y, lambda).unwrap().theta.norm();
            assert!(norm <= prev + 1e-9);
            prev = norm;
        }
    }

    #[test]
    fn train_linear_rejects_mismatch() {
        let (f, v, y) = linear_data(7, 10, 2, 3);
        assert!(train_linear(&f[..9], &v, &y, 1.0).is_err());
        assert!(train_linear(&[], &[], &DMatrix::zeros(0, 3), 1.0).is_err());
    }

    #[test]
    fn apply_linear_examples() {
        let mut r = rng(8);
        let reg = LinearRegressor { theta: random_matrix(&mut r, 96, 4), lambda: 1.0 };
        let x = DVector::from_fn(96, |_, _| r.random::<f64>());
        assert!(apply_linear(&reg, &x, &hard(vec![0.0; 3])).unwrap().iter().all(|&v| v == 0.0));

        let full = apply_linear(&reg, &x, &hard(vec![1.0; 3])).unwrap();
        for d in 0..4 {
            let naive: f64 = (0..96).map(|k| reg.theta[(k, d)] * x[k]).sum();
            assert!((full[d] - naive).abs() < 1e-12);
        }

        let mut zeroed = x.clone();
        zeroed.rows_mut(32, 32).fill(0.0);
        let a = apply_linear(&reg, &x, &hard(vec![1.0, 0.0, 1.0])).unwrap();
        let b = apply_linear(&reg, &zeroed, &hard(vec![1.0; 3])).unwrap();
        assert_eq!(a, b);
        assert!(apply_linear(&reg, &DVector::zeros(64), &hard(vec![1.0; 2])).is_err());
    }

    fn feature(threshold: f64) -> ShapeIndexedFeature {
        ShapeIndexedFeature { anchor: 0, offset_a: [0.0; 2], offset_b: [0.0; 2], threshold }
    }

    #[test]
    fn fern_outputs_are_bin_means_without_shrinkage() {
        let mut r = rng(9);
        let n = 300;
        let values = random_matrix(&mut r, n, 5);
        let targets = random_matrix(&mut r, n, 3);
        let features: Vec<_> = (0..5).map(|b| feature(0.1 * b as f64 - 0.2)).collect();
        let fern = Fern::fit_outputs(features.clone(), &values, &targets, 0.0).unwrap();

        // Hand partition: assemble each sample's bin bit by bit.
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); 32];
        for i in 0..n {
            let mut bin = 0;
            for b in 0..5 {
                if values[(i, b)] > features[b].threshold {
                    bin += 1 << b;
                }
            }
            members[bin].push(i);
        }
        for (bin, idx) in members.iter().enumerate() {
            for d in 0..3 {
                let expected = if idx.is_empty() {
                    0.0
                } else {
                    idx.iter().map(|&i| targets[(i, d)]).sum::<f64>() / idx.len() as f64
                };
                assert_eq!(fern.bin_outputs[bin][d], expected);
            }
        }

        // Variance decomposition: bin means never fit worse than the global mean.
        let global = targets.row_mean();
        let (mut bin_res, mut global_res) = (0.0, 0.0);
        for i in 0..n {
            let row: Vec<f64> = values.row(i).iter().copied().collect();
            let pred = &fern.bin_outputs[fern.bin_from_values(&row)];
            bin_res += (targets.row(i).transpose() - pred).norm_squared();
            global_res += (targets.row(i) - &global).norm_squared();
        }
        assert!(bin_res <= global_res);
    }

    #[test]
    fn empty_bins_output_zero() {
        let values = DMatrix::from_element(40, 5, -1.0);
        let targets = DMatrix::from_element(40, 2, 3.0);
        let fern = Fern::fit_outputs(vec![feature(0.0); 5], &values, &targets, 5.0).unwrap();
        assert!((fern.bin_outputs[0][0] - 120.0 / 45.0).abs() < 1e-12);
        assert!(fern.bin_outputs[1..].iter().all(|o| o.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zone_weight_examples() {
        let w = zone_weights(&[0.0, 0.5, 0.5]);
        assert_eq!(w, vec![0.5, 0.25, 0.25]);
        assert_eq!(zone_weights(&[1.0, 1.0, 1.0]), vec![1.0 / 3.0; 3]);
    }

    proptest! {
        #[test]
        fn selected_zones_are_the_smallest(occ in proptest::collection::vec(0.0f64..=1.0, 9)) {
            let sel = select_zones(&occ, 3);
            let mut sorted = occ.clone();
            sorted.sort_by(f64::total_cmp);
            let picked: Vec<f64> = sel.iter().map(|&z| occ[z]).collect();
            prop_assert_eq!(picked, sorted[..3].to_vec());
            prop_assert!(sel[0] != sel[1] && sel[1] != sel[2] && sel[0] != sel[2]);
        }
    }

    #[test]
    fn zone_assignment_grid() {
        let u = Landmarks2D::from_column_slice(&[0.0, 0.0, 90.0, 0.0, 45.0, 45.0, 0.0, 90.0, 90.0, 90.0, 59.0, 31.0]);
        assert_eq!(zone_assignments(&u), vec![0, 2, 4, 6, 8, 4]);
    }

    #[test]
    fn occlusion_in_unit_interval() {
        let u = Landmarks2D::from_column_slice(&[0.0, 0.0, 90.0, 0.0, 45.0, 45.0]);
        let a = vec![zone_assignments(&u)];
        let v = VisibilityVector { values: vec![-0.4, 0.5, 1.7], mode: VisibilityMode::Soft };
        let occ = zone_occlusion(&a, &[&v]);
        assert_eq!(occ[0], 1.0);
        assert_eq!(occ[2], 0.5);
        assert_eq!(occ[7], 0.0);
        assert_eq!(occ[4], 1.0);
        assert!(occ.iter().all(|o| (0.0..=1.0).contains(o)));
    }

    struct Fixture {
        images: Vec<Image>,
        landmarks: Vec<Landmarks2D>,
        bbox: BoundingBox,
        vis: Vec<VisibilityVector>,
        targets: DMatrix<f64>,
    }

    fn fixture(n: usize, seed: u64) -> Fixture {
        let mut r = rng(seed);
        let images = (0..n)
            .map(|_| {
                let px = (0..48 * 48).map(|_| r.random::<f64>()).collect();
                Image::new(48, 48, px).unwrap()
            })
            .collect();
        let landmarks = (0..n)
            .map(|_| Landmarks2D::from_fn(6, |_, _| 8.0 + 32.0 * r.random::<f64>()))
            .collect();
        let vis = (0..n)
            .map(|_| VisibilityVector { values: (0..6).map(|_| r.random::<f64>() * 1.4 - 0.2).collect(), mode: VisibilityMode::Soft })
            .collect();
        // Integer targets keep every bin sum exact under reordering.
        let targets = DMatrix::from_fn(n, 2, |_, _| r.random_range(-4..=4) as f64);
        Fixture { images, landmarks, bbox: BoundingBox::new(4.0, 4.0, 40.0, 40.0).unwrap(), vis, targets }
    }

    fn samples<'a>(fx: &'a Fixture, order: &[usize]) -> Vec<FernSample<'a>> {
        order
            .iter()
            .map(|&i| FernSample { image: &fx.images[i], landmarks: &fx.landmarks[i], bbox: &fx.bbox, vis: &fx.vis[i] })
            .collect()
    }

    #[test]
    fn fern_layer_structure_and_manual_lookup() {
        let fx = fixture(60, 10);
        let order: Vec<usize> = (0..60).collect();
        let cfg = FernConfig { candidates_per_zone: 60, ..FernConfig::default() };
        let layer = train_fern_layer(&samples(&fx, &order), &fx.targets, &cfg, 3).unwrap();
        assert_eq!(layer.zones.len(), 3);
        assert_eq!(layer.ferns.len(), 3);
        assert!((layer.zone_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(layer.zones, select_zones(&layer.zone_occlusion, 3));

        for i in 0..5 {
            let (img, u) = (&fx.images[i], &fx.landmarks[i]);
            let mut expected = DVector::zeros(2);
            for (fern, &w) in layer.ferns.iter().zip(&layer.zone_weights) {
                let mut bin = 0;
                for (b, f) in fern.features.iter().enumerate() {
                    let scale = (fx.bbox.width * fx.bbox.height).sqrt();
                    let (ax, ay) = (u[(0, f.anchor)], u[(1, f.anchor)]);
                    let a = img.bilinear(ax + f.offset_a[0] * scale, ay + f.offset_a[1] * scale);
                    let c = img.bilinear(ax + f.offset_b[0] * scale, ay + f.offset_b[1] * scale);
                    if a - c > f.threshold {
                        bin |= 1 << b;
                    }
                }
                expected += &fern.bin_outputs[bin] * w;
            }
            assert_eq!(apply_fern_layer(&layer, img, u, &fx.bbox), expected);
        }
    }

    #[test]
    fn fern_layer_ignores_sample_order_and_is_seeded() {
        let fx = fixture(48, 11);
        let cfg = FernConfig { candidates_per_zone: 40, ..FernConfig::default() };
        let forward: Vec<usize> = (0..48).collect();
        let mut shuffled = forward.clone();
        shuffled.reverse();
        shuffled.swap(3, 17);
        let targets_shuffled = DMatrix::from_fn(48, 2, |i, d| fx.targets[(shuffled[i], d)]);
        let a = train_fern_layer(&samples(&fx, &forward), &fx.targets, &cfg, 21).unwrap();
        let b = train_fern_layer(&samples(&fx, &shuffled), &targets_shuffled, &cfg, 21).unwrap();
        assert_eq!(a.zones, b.zones);
        assert_eq!(a.ferns, b.ferns);
        for (x, y) in a.zone_weights.iter().zip(&b.zone_weights) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = train_fern_layer(&samples(&fx, &forward), &fx.targets, &cfg, 22).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fern_layer_examples() {
        let fx = fixture(48, 12);
        let order: Vec<usize> = (0..48).collect();
        let s = samples(&fx, &order);
        let cfg = FernConfig { candidates_per_zone: 20, ..FernConfig::default() };
        assert!(matches!(
            train_fern_layer(&s[..31], &fx.targets.rows(0, 31).into_owned(), &cfg, 0),
            Err(Error::TooFewSamples { needed: 32, found: 31 })
        ));

        let mut layer = train_fern_layer(&s, &fx.targets, &cfg, 0).unwrap();
        for f in layer.ferns.iter_mut() {
            f.bin_outputs.iter_mut().for_each(|o| o.fill(0.0));
        }
        assert!(apply_fern_layer(&layer, &fx.images[0], &fx.landmarks[0], &fx.bbox).iter().all(|&v| v == 0.0));

        let layer = train_fern_layer(&s, &fx.targets, &cfg, 0).unwrap();
        let mut solo = layer.clone();
        solo.zone_weights = vec![0.0, 1.0, 0.0];
        let got = apply_fern_layer(&solo, &fx.images[0], &fx.landmarks[0], &fx.bbox);
        assert_eq!(&got, layer.ferns[1].lookup(&fx.images[0], &fx.landmarks[0], &fx.bbox));

        let blind: Vec<VisibilityVector> = (0..48)
            .map(|_| VisibilityVector { values: vec![-1.0; 6], mode: VisibilityMode::Soft })
            .collect();
        let blind_samples: Vec<FernSample<'_>> = s
            .iter()
            .zip(&blind)
            .map(|(x, v)| FernSample { vis: v, ..*x })
            .collect();
        assert!(train_fern_layer(&blind_samples, &fx.targets, &cfg, 0).is_err());
    }
}
