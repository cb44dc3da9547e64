//! Cascaded coupled regression: each layer first refines the projection
//! matrix, refreshes visibility from the new pose, then refines the shape
//! coefficients.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{
    init_from_bbox, project, renormalize, visibility, BoundingBox, Landmarks2D, ProjectionMatrix,
    VisibilityMode, VisibilityVector,
};
use crate::error::{Error, Result};
use crate::eval::{nme, EvalRecord};
use crate::features::{hog_descriptor, HogConfig, Image};
use crate::gt_fit::Annotation;
use crate::regressors::{
    apply_fern_layer, apply_linear, train_fern_layer, train_linear, FernConfig, FernLayer, FernSample,
    LinearRegressor,
};
use crate::shape_model::{DeformableModel, Shape3D, ShapeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    Linear,
    Fern,
}

impl RegressorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegressorKind::Linear => "linear",
            RegressorKind::Fern => "fern",
        }
    }
}

impl std::str::FromStr for RegressorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(RegressorKind::Linear),
            "fern" => Ok(RegressorKind::Fern),
            other => Err(Error::InvalidInput(format!("unknown regressor kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub kind: RegressorKind,
    pub layers: usize,
    /// Ridge weight of the linear regressors.
    pub lambda: f64,
    pub seed: u64,
    pub hog: HogConfig,
    pub fern: FernConfig,
}

impl TrainConfig {
    pub fn linear() -> Self {
        TrainConfig {
            kind: RegressorKind::Linear,
            layers: 10,
            lambda: 120.0,
            seed: 0,
            hog: HogConfig::default(),
            fern: FernConfig::default(),
        }
    }

    pub fn fern() -> Self {
        TrainConfig {
            kind: RegressorKind::Fern,
            layers: 150,
            ..TrainConfig::linear()
        }
    }

    pub fn for_kind(kind: RegressorKind) -> Self {
        match kind {
            RegressorKind::Linear => TrainConfig::linear(),
            RegressorKind::Fern => TrainConfig::fern(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidInput("cascade needs at least one layer".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("ridge weight {} must be nonnegative", self.lambda)));
        }
        self.hog.validate()?;
        self.fern.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Regressor {
    Linear(LinearRegressor),
    Fern(FernLayer),
}

/// `r1` predicts the 8 entries of the projection update, `r2` the shape update.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeLayer {
    pub r1: Regressor,
    pub r2: Regressor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub kind: RegressorKind,
    pub mean_m: ProjectionMatrix,
    pub hog: HogConfig,
    pub layers: Vec<CascadeLayer>,
    /// Fingerprint of the deformable model the cascade was trained with.
    pub model_fingerprint: String,
    pub model: DeformableModel,
}

/// Working estimate of one face.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub m: ProjectionMatrix,
    pub p: ShapeParams,
    /// Soft visibility from `m`, or all ones before the first layer.
    pub vis: VisibilityVector,
}

impl Snapshot {
    pub fn hard_vis(&self) -> VisibilityVector {
        self.vis.harden()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub landmarks2d: Landmarks2D,
    pub shape3d: Shape3D,
    pub m: ProjectionMatrix,
    pub p: ShapeParams,
    pub vis: VisibilityVector,
    /// Initialization followed by the state after each layer, when requested.
    pub per_layer_trace: Option<Vec<Snapshot>>,
}

/// A training face with its fitted ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image: Image,
    pub annotation: Annotation,
    pub m: ProjectionMatrix,
    pub p: ShapeParams,
}

/// Progress after a layer; `layer` 0 is the initialization.
#[derive(Debug)]
pub struct LayerProgress<'a> {
    pub layer: usize,
    pub mean_nme: f64,
    pub states: &'a [Snapshot],
}

pub fn current_landmarks(m: &ProjectionMatrix, p: &ShapeParams, model: &DeformableModel) -> Result<Landmarks2D> {
    Ok(project(m, &model.instantiate(p)?))
}

fn flatten_m(m: &ProjectionMatrix) -> [f64; 8] {
    m.to_row_major()
}

/// Entrywise mean of the matrices, renormalized.
pub fn mean_projection(ms: &[ProjectionMatrix]) -> Result<ProjectionMatrix> {
    if ms.is_empty() {
        return Err(Error::InvalidInput("no projection matrices to average".into()));
    }
    let sum = ms.iter().fold(nalgebra::Matrix2x4::zeros(), |acc, m| acc + m.0);
    renormalize(&ProjectionMatrix(sum / ms.len() as f64))
}

/// Initial state: the mean projection fitted to the box, zero shape and every
/// landmark visible.
pub fn initial_state(
    mean_m: &ProjectionMatrix,
    model: &DeformableModel,
    bbox: &BoundingBox,
) -> Result<Snapshot> {
    Ok(Snapshot {
        m: init_from_bbox(mean_m, model, bbox)?,
        p: ShapeParams::zeros(model.num_bases()),
        vis: VisibilityVector::all_visible(model.num_landmarks(), VisibilityMode::Soft),
    })
}

fn layer_seed(seed: u64, layer: usize, slot: u64) -> u64 {
    // splitmix64 over (seed, layer, slot).
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(2 * layer as u64 + slot + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mean_train_nme(samples: &[TrainingSample], states: &[Snapshot], model: &DeformableModel) -> Result<f64> {
    let records = samples
        .par_iter()
        .zip(states.par_iter())
        .map(|(s, st)| {
            Ok(EvalRecord {
                estimated: current_landmarks(&st.m, &st.p, model)?,
                truth: s.annotation.landmarks.clone(),
                vis: s.annotation.vis.clone(),
                d: s.annotation.bbox.size(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    nme(&records)
}

struct Stage<'a> {
    samples: &'a [TrainingSample],
    model: &'a DeformableModel,
    cfg: &'a TrainConfig,
}

impl Stage<'_> {
    fn landmarks(&self, states: &[Snapshot]) -> Result<Vec<Landmarks2D>> {
        states
            .par_iter()
            .map(|s| current_landmarks(&s.m, &s.p, self.model))
            .collect()
    }

    /// Fits one regressor on `targets` given the current states.
    fn fit(&self, states: &[Snapshot], targets: &DMatrix<f64>, seed: u64) -> Result<Regressor> {
        let u = self.landmarks(states)?;
        match self.cfg.kind {
            RegressorKind::Linear => {
                let feats = self
                    .samples
                    .par_iter()
                    .zip(u.par_iter())
                    .map(|(s, u)| hog_descriptor(&s.image, u, &s.annotation.bbox, &self.cfg.hog))
                    .collect::<Result<Vec<_>>>()?;
                let vis: Vec<VisibilityVector> = states.iter().map(Snapshot::hard_vis).collect();
                Ok(Regressor::Linear(train_linear(&feats, &vis, targets, self.cfg.lambda)?))
            }
            RegressorKind::Fern => {
                let fs: Vec<FernSample<'_>> = self
                    .samples
                    .iter()
                    .zip(&u)
                    .zip(states)
                    .map(|((s, u), st)| FernSample {
                        image: &s.image,
                        landmarks: u,
                        bbox: &s.annotation.bbox,
                        vis: &st.vis,
                    })
                    .collect();
                Ok(Regressor::Fern(train_fern_layer(&fs, targets, &self.cfg.fern, seed)?))
            }
        }
    }
}

impl Regressor {
    pub fn predict(
        &self,
        img: &Image,
        u: &Landmarks2D,
        bbox: &BoundingBox,
        vis: &VisibilityVector,
        hog: &HogConfig,
    ) -> Result<DVector<f64>> {
        match self {
            Regressor::Linear(r) => apply_linear(r, &hog_descriptor(img, u, bbox, hog)?, &vis.harden()),
            Regressor::Fern(layer) => Ok(apply_fern_layer(layer, img, u, bbox)),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Regressor::Linear(r) => r.theta.ncols(),
            Regressor::Fern(l) => l.ferns.first().map_or(0, |f| f.output_dim()),
        }
    }
}

fn apply_r1(
    r1: &Regressor,
    state: &Snapshot,
    img: &Image,
    bbox: &BoundingBox,
    model: &DeformableModel,
    hog: &HogConfig,
) -> Result<Snapshot> {
    let u = current_landmarks(&state.m, &state.p, model)?;
    let delta = r1.predict(img, &u, bbox, &state.vis, hog)?;
    let mut m = state.m.0;
    for (k, v) in delta.iter().enumerate() {
        m[(k / 4, k % 4)] += v;
    }
    let m = renormalize(&ProjectionMatrix(m))?;
    let vis = visibility(&m, model.normals(), VisibilityMode::Soft)?;
    Ok(Snapshot { m, p: state.p.clone(), vis })
}

fn apply_r2(
    r2: &Regressor,
    state: &Snapshot,
    img: &Image,
    bbox: &BoundingBox,
    model: &DeformableModel,
    hog: &HogConfig,
) -> Result<Snapshot> {
    let u = current_landmarks(&state.m, &state.p, model)?;
    let delta = r2.predict(img, &u, bbox, &state.vis, hog)?;
    Ok(Snapshot {
        m: state.m,
        p: ShapeParams(&state.p.0 + delta),
        vis: state.vis.clone(),
    })
}

pub fn train(samples: &[TrainingSample], model: &DeformableModel, cfg: &TrainConfig) -> Result<CascadeModel> {
    train_with_progress(samples, model, cfg, |_| {})
}

/// [`train`], reporting the mean training NME after initialization and after
/// every layer.
pub fn train_with_progress(
    samples: &[TrainingSample],
    model: &DeformableModel,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&LayerProgress<'_>),
) -> Result<CascadeModel> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: samples.len() });
    }
    for s in samples {
        if s.annotation.num_landmarks() != model.num_landmarks() || s.p.len() != model.num_bases() {
            return Err(Error::Dimension(format!(
                "training sample with {} landmarks and {} shape parameters, model has {} and {}",
                s.annotation.num_landmarks(),
                s.p.len(),
                model.num_landmarks(),
                model.num_bases()
            )));
        }
    }
    let truth_ms: Vec<ProjectionMatrix> = samples.iter().map(|s| s.m).collect();
    let mean_m = mean_projection(&truth_ms)?;
    let stage = Stage { samples, model, cfg };

    let mut states = samples
        .par_iter()
        .map(|s| initial_state(&mean_m, model, &s.annotation.bbox))
        .collect::<Result<Vec<_>>>()?;
    progress(&LayerProgress {
        layer: 0,
        mean_nme: mean_train_nme(samples, &states, model)?,
        states: &states,
    });

    let mut layers = Vec::with_capacity(cfg.layers);
    for k in 1..=cfg.layers {
        let mut run = || -> Result<CascadeLayer> {
            let dm = DMatrix::from_fn(samples.len(), 8, |i, c| {
                flatten_m(&samples[i].m)[c] - flatten_m(&states[i].m)[c]
            });
            let r1 = stage.fit(&states, &dm, layer_seed(cfg.seed, k, 0))?;
            let next = samples
                .par_iter()
                .zip(states.par_iter())
                .map(|(s, st)| apply_r1(&r1, st, &s.image, &s.annotation.bbox, model, &cfg.hog))
                .collect::<Result<Vec<_>>>()?;
            states = next;

            let dp = DMatrix::from_fn(samples.len(), model.num_bases(), |i, c| {
                samples[i].p.0[c] - states[i].p.0[c]
            });
            let r2 = stage.fit(&states, &dp, layer_seed(cfg.seed, k, 1))?;
            let next = samples
                .par_iter()
                .zip(states.par_iter())
                .map(|(s, st)| apply_r2(&r2, st, &s.image, &s.annotation.bbox, model, &cfg.hog))
                .collect::<Result<Vec<_>>>()?;
            states = next;
            Ok(CascadeLayer { r1, r2 })
        };
        layers.push(run().map_err(|e| e.at_layer(k))?);
        progress(&LayerProgress {
            layer: k,
            mean_nme: mean_train_nme(samples, &states, model)?,
            states: &states,
        });
    }

    Ok(CascadeModel {
        kind: cfg.kind,
        mean_m,
        hog: cfg.hog,
        layers,
        model_fingerprint: model.fingerprint(),
        model: model.clone(),
    })
}

/// Runs the cascade from the box initialization.
pub fn align(
    cm: &CascadeModel,
    img: &Image,
    bbox: &BoundingBox,
    model: &DeformableModel,
    trace: bool,
) -> Result<AlignmentResult> {
    let found = model.fingerprint();
    if found != cm.model_fingerprint {
        return Err(Error::ModelMismatch {
            expected: cm.model_fingerprint.clone(),
            found,
        });
    }
    bbox.validate()?;
    let mut state = initial_state(&cm.mean_m, model, bbox)?;
    let mut snapshots = trace.then(|| vec![state.clone()]);
    for (k, layer) in cm.layers.iter().enumerate() {
        let step = || -> Result<Snapshot> {
            let mid = apply_r1(&layer.r1, &state, img, bbox, model, &cm.hog)?;
            apply_r2(&layer.r2, &mid, img, bbox, model, &cm.hog)
        };
        state = step().map_err(|e| e.at_layer(k + 1))?;
        if let Some(s) = snapshots.as_mut() {
            s.push(state.clone());
        }
    }
    let shape3d = model.instantiate(&state.p)?;
    Ok(AlignmentResult {
        landmarks2d: project(&state.m, &shape3d),
        shape3d,
        m: state.m,
        p: state.p,
        vis: state.vis.harden(),
        per_layer_trace: snapshots,
    })
}

impl CascadeModel {
    /// [`align`] against the embedded deformable model.
    pub fn align(&self, img: &Image, bbox: &BoundingBox, trace: bool) -> Result<AlignmentResult> {
        align(self, img, bbox, &self.model, trace)
    }
}
