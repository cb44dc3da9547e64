//! On-disk formats: versioned JSON model documents, dataset CSVs, grayscale
//! images and 3D scan collections.
//!
//! Model documents carry `format_version`, `kind`, `dimensions` and `payload`.
//! Numeric arrays are written row-major with 17 significant digits, which
//! reproduces every binary64 value exactly on load.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use nalgebra::{DMatrix, DVector, Matrix3xX};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::camera::{BoundingBox, Landmarks2D, ProjectionMatrix, VisibilityMode, VisibilityVector};
use crate::cascade::{CascadeLayer, CascadeModel, Regressor, RegressorKind, Snapshot};
use crate::error::{Error, Result};
use crate::features::{HogConfig, Image, ShapeIndexedFeature, HOG_BLOCK};
use crate::gt_fit::Annotation;
use crate::regressors::{Fern, FernLayer, LinearRegressor};
use crate::shape_model::{DeformableModel, LandmarkScan, Shape3D, ShapeParams};
use crate::synth::{SynthConfig, SynthSample};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFORMABLE_KIND: &str = "deformable_model";
pub const CASCADE_KIND: &str = "cascade_model";

// ---------------------------------------------------------------------------
// Numeric arrays

fn format_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "\"nan\"".into()
    } else if v > 0.0 {
        "\"inf\"".into()
    } else {
        "\"-inf\"".into()
    }
}

/// A numeric array kept on a single line. Non-finite values are written as
/// the strings `"nan"`, `"inf"` and `"-inf"`.
#[derive(Debug, Clone, PartialEq)]
struct Row(Vec<f64>);

impl Serialize for Row {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let body: Vec<String> = self.0.iter().map(|&v| format_number(v)).collect();
        let raw = RawValue::from_string(format!("[{}]", body.join(", ")))
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Num {
    Finite(f64),
    Special(String),
}

impl<'de> Deserialize<'de> for Row {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let nums = Vec::<Num>::deserialize(d)?;
        nums.into_iter()
            .map(|n| match n {
                Num::Finite(v) => Ok(v),
                Num::Special(s) => match s.as_str() {
                    "nan" => Ok(f64::NAN),
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    other => Err(serde::de::Error::custom(format!("not a number: {other:?}"))),
                },
            })
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map(Row)
    }
}

fn row_major(rows: usize, cols: usize, at: impl Fn(usize, usize) -> f64) -> Row {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(at(r, c));
        }
    }
    Row(out)
}

fn expect_len(what: &str, row: &Row, len: usize) -> Result<()> {
    if row.0.len() != len {
        return Err(Error::Dimension(format!(
            "{what} has {} values, expected {len}",
            row.0.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Document envelope

#[derive(Serialize)]
struct DocumentOut<'a, D, P> {
    format_version: u32,
    kind: &'a str,
    dimensions: D,
    payload: P,
}

#[derive(Deserialize)]
struct DocumentIn<'a> {
    format_version: u32,
    kind: String,
    #[serde(borrow)]
    dimensions: &'a RawValue,
    #[serde(borrow)]
    payload: &'a RawValue,
}

fn malformed(e: serde_json::Error) -> Error {
    Error::Malformed(e.to_string())
}

fn to_document<D: Serialize, P: Serialize>(kind: &str, dimensions: D, payload: P) -> Result<String> {
    let doc = DocumentOut {
        format_version: FORMAT_VERSION,
        kind,
        dimensions,
        payload,
    };
    let mut text = serde_json::to_string_pretty(&doc).map_err(malformed)?;
    text.push('\n');
    Ok(text)
}

fn from_document<D: DeserializeOwned, P: DeserializeOwned>(text: &str, kind: &str) -> Result<(D, P)> {
    let doc: DocumentIn = serde_json::from_str(text).map_err(malformed)?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: doc.format_version,
        });
    }
    if doc.kind != kind {
        return Err(Error::Malformed(format!(
            "document kind is {:?}, expected {kind:?}",
            doc.kind
        )));
    }
    let dims = serde_json::from_str(doc.dimensions.get()).map_err(malformed)?;
    let payload = serde_json::from_str(doc.payload.get()).map_err(malformed)?;
    Ok((dims, payload))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Deformable model

#[derive(Debug, Serialize, Deserialize)]
struct ModelDims {
    num_landmarks: usize,
    num_bases: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelPayload {
    /// 4 x N.
    mean_shape: Row,
    /// Each 4 x N.
    bases: Vec<Row>,
    /// 3 x N.
    normals: Row,
}

fn model_dims(model: &DeformableModel) -> ModelDims {
    ModelDims {
        num_landmarks: model.num_landmarks(),
        num_bases: model.num_bases(),
    }
}

fn model_payload(model: &DeformableModel) -> ModelPayload {
    let n = model.num_landmarks();
    let shape_row = |s: &Shape3D| row_major(4, n, |r, c| s[(r, c)]);
    ModelPayload {
        mean_shape: shape_row(model.mean_shape()),
        bases: model.bases().iter().map(shape_row).collect(),
        normals: row_major(3, n, |r, c| model.normals()[(r, c)]),
    }
}

fn model_from_payload(dims: &ModelDims, payload: ModelPayload) -> Result<DeformableModel> {
    let n = dims.num_landmarks;
    expect_len("mean_shape", &payload.mean_shape, 4 * n)?;
    expect_len("normals", &payload.normals, 3 * n)?;
    if payload.bases.len() != dims.num_bases {
        return Err(Error::Dimension(format!(
            "{} bases stored, dimensions declare {}",
            payload.bases.len(),
            dims.num_bases
        )));
    }
    let shape = |row: &Row| Shape3D::from_row_slice(&row.0);
    let bases = payload
        .bases
        .iter()
        .map(|b| {
            expect_len("basis", b, 4 * n)?;
            Ok(shape(b))
        })
        .collect::<Result<Vec<_>>>()?;
    DeformableModel::new(
        shape(&payload.mean_shape),
        bases,
        Matrix3xX::from_row_slice(&payload.normals.0),
    )
}

pub fn deformable_model_to_string(model: &DeformableModel) -> Result<String> {
    to_document(DEFORMABLE_KIND, model_dims(model), model_payload(model))
}

pub fn deformable_model_from_str(text: &str) -> Result<DeformableModel> {
    let (dims, payload): (ModelDims, ModelPayload) = from_document(text, DEFORMABLE_KIND)?;
    model_from_payload(&dims, payload)
}

pub fn save_deformable_model(path: &Path, model: &DeformableModel) -> Result<()> {
    write_text(path, &deformable_model_to_string(model)?)
}

pub fn load_deformable_model(path: &Path) -> Result<DeformableModel> {
    deformable_model_from_str(&read_text(path)?)
}

// ---------------------------------------------------------------------------
// Cascade model

#[derive(Debug, Serialize, Deserialize)]
struct CascadeDims {
    num_landmarks: usize,
    num_bases: usize,
    num_layers: usize,
    feature_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CascadePayload {
    regressor: RegressorKind,
    /// 2 x 4.
    mean_m: Row,
    hog: HogConfig,
    model_fingerprint: String,
    model: ModelPayload,
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDoc {
    r1: RegressorDoc,
    r2: RegressorDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RegressorDoc {
    Linear {
        lambda: Row,
        rows: usize,
        cols: usize,
        theta: Row,
    },
    Fern {
        zones: Vec<usize>,
        zone_weights: Row,
        zone_occlusion: Row,
        ferns: Vec<FernDoc>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct FernDoc {
    anchors: Vec<usize>,
    /// Per feature: `[ax, ay, bx, by]`.
    offsets: Vec<Row>,
    thresholds: Row,
    /// One row per bin.
    bin_outputs: Vec<Row>,
}

fn regressor_doc(r: &Regressor) -> RegressorDoc {
    match r {
        Regressor::Linear(l) => RegressorDoc::Linear {
            lambda: Row(vec![l.lambda]),
            rows: l.theta.nrows(),
            cols: l.theta.ncols(),
            theta: row_major(l.theta.nrows(), l.theta.ncols(), |r, c| l.theta[(r, c)]),
        },
        Regressor::Fern(layer) => RegressorDoc::Fern {
            zones: layer.zones.clone(),
            zone_weights: Row(layer.zone_weights.clone()),
            zone_occlusion: Row(layer.zone_occlusion.clone()),
            ferns: layer
                .ferns
                .iter()
                .map(|f| FernDoc {
                    anchors: f.features.iter().map(|x| x.anchor).collect(),
                    offsets: f
                        .features
                        .iter()
                        .map(|x| Row(vec![x.offset_a[0], x.offset_a[1], x.offset_b[0], x.offset_b[1]]))
                        .collect(),
                    thresholds: Row(f.features.iter().map(|x| x.threshold).collect()),
                    bin_outputs: f.bin_outputs.iter().map(|v| Row(v.as_slice().to_vec())).collect(),
                })
                .collect(),
        },
    }
}

fn regressor_from_doc(doc: RegressorDoc, output_dim: usize, n: usize) -> Result<Regressor> {
    match doc {
        RegressorDoc::Linear {
            lambda,
            rows,
            cols,
            theta,
        } => {
            expect_len("lambda", &lambda, 1)?;
            if rows != HOG_BLOCK * n || cols != output_dim {
                return Err(Error::Dimension(format!(
                    "linear regressor is {rows}x{cols}, expected {}x{output_dim}",
                    HOG_BLOCK * n
                )));
            }
            expect_len("theta", &theta, rows * cols)?;
            Ok(Regressor::Linear(LinearRegressor {
                theta: DMatrix::from_row_slice(rows, cols, &theta.0),
                lambda: lambda.0[0],
            }))
        }
        RegressorDoc::Fern {
            zones,
            zone_weights,
            zone_occlusion,
            ferns,
        } => {
            if zone_weights.0.len() != zones.len() || ferns.len() != zones.len() {
                return Err(Error::Dimension(format!(
                    "fern layer with {} zones, {} weights and {} ferns",
                    zones.len(),
                    zone_weights.0.len(),
                    ferns.len()
                )));
            }
            let ferns = ferns
                .into_iter()
                .map(|f| fern_from_doc(f, output_dim, n))
                .collect::<Result<Vec<_>>>()?;
            Ok(Regressor::Fern(FernLayer {
                zones,
                ferns,
                zone_weights: zone_weights.0,
                zone_occlusion: zone_occlusion.0,
            }))
        }
    }
}

fn fern_from_doc(doc: FernDoc, output_dim: usize, n: usize) -> Result<Fern> {
    let depth = doc.anchors.len();
    if doc.offsets.len() != depth || doc.thresholds.0.len() != depth {
        return Err(Error::Dimension(format!(
            "fern with {depth} anchors, {} offsets and {} thresholds",
            doc.offsets.len(),
            doc.thresholds.0.len()
        )));
    }
    if doc.bin_outputs.len() != 1 << depth {
        return Err(Error::Dimension(format!(
            "depth-{depth} fern stores {} bins",
            doc.bin_outputs.len()
        )));
    }
    let mut features = Vec::with_capacity(depth);
    for ((&anchor, off), &threshold) in doc.anchors.iter().zip(&doc.offsets).zip(&doc.thresholds.0) {
        if anchor >= n {
            return Err(Error::Dimension(format!("fern anchor {anchor} out of {n} landmarks")));
        }
        expect_len("fern offset", off, 4)?;
        features.push(ShapeIndexedFeature {
            anchor,
            offset_a: [off.0[0], off.0[1]],
            offset_b: [off.0[2], off.0[3]],
            threshold,
        });
    }
    let bin_outputs = doc
        .bin_outputs
        .iter()
        .map(|b| {
            expect_len("fern bin", b, output_dim)?;
            Ok(DVector::from_column_slice(&b.0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Fern {
        features,
        bin_outputs,
    })
}

pub fn cascade_to_string(cm: &CascadeModel) -> Result<String> {
    let n = cm.model.num_landmarks();
    let dims = CascadeDims {
        num_landmarks: n,
        num_bases: cm.model.num_bases(),
        num_layers: cm.layers.len(),
        feature_dim: HOG_BLOCK * n,
    };
    let payload = CascadePayload {
        regressor: cm.kind,
        mean_m: Row(cm.mean_m.to_row_major().to_vec()),
        hog: cm.hog,
        model_fingerprint: cm.model_fingerprint.clone(),
        model: model_payload(&cm.model),
        layers: cm
            .layers
            .iter()
            .map(|l| LayerDoc {
                r1: regressor_doc(&l.r1),
                r2: regressor_doc(&l.r2),
            })
            .collect(),
    };
    to_document(CASCADE_KIND, dims, payload)
}

pub fn cascade_from_str(text: &str) -> Result<CascadeModel> {
    let (dims, payload): (CascadeDims, CascadePayload) = from_document(text, CASCADE_KIND)?;
    let n = dims.num_landmarks;
    if dims.feature_dim != HOG_BLOCK * n {
        return Err(Error::Dimension(format!(
            "feature_dim {} for {n} landmarks",
            dims.feature_dim
        )));
    }
    if payload.layers.len() != dims.num_layers {
        return Err(Error::Dimension(format!(
            "{} layers stored, dimensions declare {}",
            payload.layers.len(),
            dims.num_layers
        )));
    }
    let model = model_from_payload(
        &ModelDims {
            num_landmarks: n,
            num_bases: dims.num_bases,
        },
        payload.model,
    )?;
    let found = model.fingerprint();
    if found != payload.model_fingerprint {
        return Err(Error::ModelMismatch {
            expected: payload.model_fingerprint,
            found,
        });
    }
    expect_len("mean_m", &payload.mean_m, 8)?;
    let mut mean = [0.0; 8];
    mean.copy_from_slice(&payload.mean_m.0);
    payload.hog.validate()?;
    let layers = payload
        .layers
        .into_iter()
        .enumerate()
        .map(|(k, l)| {
            let r1 = regressor_from_doc(l.r1, 8, n).map_err(|e| e.at_layer(k + 1))?;
            let r2 = regressor_from_doc(l.r2, dims.num_bases, n).map_err(|e| e.at_layer(k + 1))?;
            let kind_ok = |r: &Regressor| {
                matches!(
                    (r, payload.regressor),
                    (Regressor::Linear(_), RegressorKind::Linear) | (Regressor::Fern(_), RegressorKind::Fern)
                )
            };
            if !kind_ok(&r1) || !kind_ok(&r2) {
                return Err(Error::Malformed(format!(
                    "layer {} mixes regressor types in a {} cascade",
                    k + 1,
                    payload.regressor.as_str()
                )));
            }
            Ok(CascadeLayer { r1, r2 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CascadeModel {
        kind: payload.regressor,
        mean_m: ProjectionMatrix::from_row_major(&mean),
        hog: payload.hog,
        layers,
        model_fingerprint: found,
        model,
    })
}

pub fn save_cascade(path: &Path, cm: &CascadeModel) -> Result<()> {
    write_text(path, &cascade_to_string(cm)?)
}

pub fn load_cascade(path: &Path) -> Result<CascadeModel> {
    cascade_from_str(&read_text(path)?)
}

// ---------------------------------------------------------------------------
// Images

/// Loads any supported image as grayscale with intensities in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let pixels = gray.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Image::new(w as usize, h as usize, pixels).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes an 8-bit binary PGM.
pub fn save_pgm(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    encoder
        .write_image(&bytes, img.width() as u32, img.height() as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

// ---------------------------------------------------------------------------
// CSV helpers

fn fmt_csv(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        // Shortest representation that parses back to the same value.
        format!("{v}")
    }
}

fn dataset_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::UnequalLengths {
            pos,
            expected_len,
            len,
        } => dataset_err(
            path,
            format!(
                "line {}: {len} fields, header has {expected_len}",
                pos.as_ref().map_or(0, |p| p.line())
            ),
        ),
        _ => dataset_err(path, e.to_string()),
    }
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| dataset_err(path, e.to_string()))?;
    w.write_record(header).map_err(|e| dataset_err(path, e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| dataset_err(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_field(path: &Path, line: u64, name: &str, text: &str) -> Result<f64> {
    text.parse::<f64>()
        .map_err(|_| dataset_err(path, format!("line {line}: {name} = {text:?} is not numeric")))
}

/// Checks that the header after `fixed` leading columns repeats `groups`
/// (e.g. `["u", "v", "vis"]`) with 1-based suffixes, returning the count.
fn indexed_columns(path: &Path, header: &csv::StringRecord, fixed: &[&str], groups: &[&str]) -> Result<usize> {
    for (i, name) in fixed.iter().enumerate() {
        if header.get(i) != Some(name) {
            return Err(dataset_err(
                path,
                format!("header column {} must be {name:?}", i + 1),
            ));
        }
    }
    let rest = header.len().saturating_sub(fixed.len());
    if header.len() < fixed.len() || rest % groups.len() != 0 {
        return Err(dataset_err(path, "header has an incomplete column group"));
    }
    let count = rest / groups.len();
    for k in 0..count {
        for (g, prefix) in groups.iter().enumerate() {
            let expected = format!("{prefix}{}", k + 1);
            let found = &header[fixed.len() + k * groups.len() + g];
            if found != expected {
                return Err(dataset_err(
                    path,
                    format!("header column {found:?}, expected {expected:?}"),
                ));
            }
        }
    }
    Ok(count)
}

fn m_header() -> Vec<String> {
    ["m11", "m12", "m13", "m14", "m21", "m22", "m23", "m24"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn landmark_header(n: usize) -> Vec<String> {
    (1..=n)
        .flat_map(|j| [format!("u{j}"), format!("v{j}"), format!("vis{j}")])
        .collect()
}

fn landmark_fields(u: &Landmarks2D, vis: &VisibilityVector) -> Vec<String> {
    (0..u.ncols())
        .flat_map(|j| {
            let visible = vis.is_visible(j);
            let coord = |v: f64| if visible { fmt_csv(v) } else { "nan".to_string() };
            [coord(u[(0, j)]), coord(u[(1, j)]), if visible { "1" } else { "0" }.to_string()]
        })
        .collect()
}

/// Parses `u, v, vis` triples; `vis` must be 0 or 1 and visible landmarks
/// need finite coordinates.
fn parse_landmarks(path: &Path, line: u64, fields: &[&str]) -> Result<(Landmarks2D, VisibilityVector)> {
    let n = fields.len() / 3;
    let mut u = Landmarks2D::zeros(n);
    let mut vis = Vec::with_capacity(n);
    for j in 0..n {
        let x = parse_field(path, line, &format!("u{}", j + 1), fields[3 * j])?;
        let y = parse_field(path, line, &format!("v{}", j + 1), fields[3 * j + 1])?;
        let v = match fields[3 * j + 2] {
            "0" => 0.0,
            "1" => 1.0,
            other => {
                return Err(dataset_err(
                    path,
                    format!("line {line}: vis{} = {other:?} must be 0 or 1", j + 1),
                ))
            }
        };
        if v == 1.0 && !(x.is_finite() && y.is_finite()) {
            return Err(dataset_err(
                path,
                format!("line {line}: visible landmark {} has coordinates ({x}, {y})", j + 1),
            ));
        }
        u[(0, j)] = x;
        u[(1, j)] = y;
        vis.push(v);
    }
    Ok((
        u,
        VisibilityVector {
            values: vis,
            mode: VisibilityMode::Hard,
        },
    ))
}

fn parse_m(path: &Path, line: u64, fields: &[&str]) -> Result<ProjectionMatrix> {
    let mut m = [0.0; 8];
    for (k, (slot, name)) in m.iter_mut().zip(m_header()).enumerate() {
        *slot = parse_field(path, line, &name, fields[k])?;
        if !slot.is_finite() {
            return Err(dataset_err(path, format!("line {line}: {name} is not finite")));
        }
    }
    Ok(ProjectionMatrix::from_row_major(&m))
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub m: ProjectionMatrix,
    pub p: ShapeParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    /// Path as written in the annotation file, relative to the dataset root.
    pub image_path: String,
    pub annotation: Annotation,
    pub ground_truth: Option<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory that image paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn num_landmarks(&self) -> usize {
        self.entries.first().map_or(0, |e| e.annotation.num_landmarks())
    }

    pub fn image_file(&self, entry: &DatasetEntry) -> PathBuf {
        self.root.join(&entry.image_path)
    }

    pub fn load_image(&self, entry: &DatasetEntry) -> Result<Image> {
        load_image(&self.image_file(entry))
    }

    /// Attaches ground truth by image path. Every entry must be covered and
    /// every row must name an entry.
    pub fn attach_ground_truth(&mut self, gt: BTreeMap<String, GroundTruth>, path: &Path) -> Result<()> {
        let known: HashSet<&str> = self.entries.iter().map(|e| e.image_path.as_str()).collect();
        if let Some(extra) = gt.keys().find(|k| !known.contains(k.as_str())) {
            return Err(dataset_err(path, format!("ground truth for unknown image {extra:?}")));
        }
        let mut gt = gt;
        for e in &mut self.entries {
            let g = gt
                .remove(&e.image_path)
                .ok_or_else(|| dataset_err(path, format!("no ground truth for {:?}", e.image_path)))?;
            e.ground_truth = Some(g);
        }
        Ok(())
    }
}

fn annotation_header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = ["image_path", "bx", "by", "bw", "bh"].iter().map(|s| s.to_string()).collect();
    h.extend(landmark_header(n));
    h
}

/// Reads an annotation CSV. Image paths resolve against the CSV's directory
/// and must exist.
pub fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let n = indexed_columns(path, &header, &["image_path", "bx", "by", "bw", "bh"], &["u", "v", "vis"])?;
    if n == 0 {
        return Err(dataset_err(path, "header declares no landmarks"));
    }
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let fields: Vec<&str> = rec.iter().collect();
        let image_path = fields[0].to_string();
        if !seen.insert(image_path.clone()) {
            return Err(dataset_err(path, format!("line {line}: duplicate image {image_path:?}")));
        }
        let mut b = [0.0; 4];
        for (k, name) in ["bx", "by", "bw", "bh"].iter().enumerate() {
            b[k] = parse_field(path, line, name, fields[1 + k])?;
        }
        let bbox = BoundingBox::new(b[0], b[1], b[2], b[3])
            .map_err(|e| dataset_err(path, format!("line {line}: {e}")))?;
        let (u, vis) = parse_landmarks(path, line, &fields[5..])?;
        let annotation =
            Annotation::new(u, vis, bbox).map_err(|e| dataset_err(path, format!("line {line}: {e}")))?;
        if !root.join(&image_path).is_file() {
            return Err(dataset_err(path, format!("line {line}: missing image {image_path:?}")));
        }
        entries.push(DatasetEntry {
            image_path,
            annotation,
            ground_truth: None,
        });
    }
    Ok(DatasetManifest { root, entries })
}

pub fn save_annotations(path: &Path, entries: &[(String, Annotation)]) -> Result<()> {
    let n = entries.first().map_or(0, |(_, a)| a.num_landmarks());
    let rows = entries
        .iter()
        .map(|(name, a)| {
            if a.num_landmarks() != n {
                return Err(Error::Dimension("annotations disagree on landmark count".into()));
            }
            let b = &a.bbox;
            let mut r = vec![name.clone(), fmt_csv(b.x), fmt_csv(b.y), fmt_csv(b.width), fmt_csv(b.height)];
            r.extend(landmark_fields(&a.landmarks, &a.vis));
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(path, &annotation_header(n), &rows)
}

/// Ground-truth CSV: `image_path, m11..m24, p1..pNs`.
pub fn save_ground_truth(path: &Path, rows: &[(String, GroundTruth)]) -> Result<()> {
    let ns = rows.first().map_or(0, |(_, g)| g.p.len());
    let mut header = vec!["image_path".to_string()];
    header.extend(m_header());
    header.extend((1..=ns).map(|k| format!("p{k}")));
    let body = rows
        .iter()
        .map(|(name, g)| {
            if g.p.len() != ns {
                return Err(Error::Dimension("ground-truth rows disagree on basis count".into()));
            }
            let mut r = vec![name.clone()];
            r.extend(g.m.to_row_major().iter().map(|&v| fmt_csv(v)));
            r.extend(g.p.as_slice().iter().map(|&v| fmt_csv(v)));
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(path, &header, &body)
}

pub fn load_ground_truth(path: &Path) -> Result<BTreeMap<String, GroundTruth>> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let mut fixed = vec!["image_path".to_string()];
    fixed.extend(m_header());
    let fixed_refs: Vec<&str> = fixed.iter().map(String::as_str).collect();
    let ns = indexed_columns(path, &header, &fixed_refs, &["p"])?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let fields: Vec<&str> = rec.iter().collect();
        let m = parse_m(path, line, &fields[1..9])?;
        let p = (0..ns)
            .map(|k| parse_field(path, line, &format!("p{}", k + 1), fields[9 + k]))
            .collect::<Result<Vec<_>>>()?;
        if out
            .insert(fields[0].to_string(), GroundTruth { m, p: ShapeParams::from_vec(p) })
            .is_some()
        {
            return Err(dataset_err(path, format!("line {line}: duplicate image {:?}", fields[0])));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Predictions and traces

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_path: String,
    pub m: ProjectionMatrix,
    pub landmarks: Landmarks2D,
    /// Hard visibility of the final estimate.
    pub vis: VisibilityVector,
}

/// Predictions CSV: `image_path, m11..m24, u1, v1, vis1, ...`. Coordinates of
/// landmarks predicted invisible are written as well, since the estimate
/// exists for every landmark.
pub fn save_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let n = preds.first().map_or(0, |p| p.landmarks.ncols());
    let mut header = vec!["image_path".to_string()];
    header.extend(m_header());
    header.extend(landmark_header(n));
    let rows = preds
        .iter()
        .map(|p| {
            if p.landmarks.ncols() != n {
                return Err(Error::Dimension("predictions disagree on landmark count".into()));
            }
            let mut r = vec![p.image_path.clone()];
            r.extend(p.m.to_row_major().iter().map(|&v| fmt_csv(v)));
            for j in 0..n {
                r.push(fmt_csv(p.landmarks[(0, j)]));
                r.push(fmt_csv(p.landmarks[(1, j)]));
                r.push(if p.vis.is_visible(j) { "1" } else { "0" }.to_string());
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(path, &header, &rows)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let mut fixed = vec!["image_path".to_string()];
    fixed.extend(m_header());
    let fixed_refs: Vec<&str> = fixed.iter().map(String::as_str).collect();
    let n = indexed_columns(path, &header, &fixed_refs, &["u", "v", "vis"])?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let fields: Vec<&str> = rec.iter().collect();
        let m = parse_m(path, line, &fields[1..9])?;
        let mut landmarks = Landmarks2D::zeros(n);
        let mut vis = Vec::with_capacity(n);
        for j in 0..n {
            let base = 9 + 3 * j;
            landmarks[(0, j)] = parse_field(path, line, &format!("u{}", j + 1), fields[base])?;
            landmarks[(1, j)] = parse_field(path, line, &format!("v{}", j + 1), fields[base + 1])?;
            if !(landmarks[(0, j)].is_finite() && landmarks[(1, j)].is_finite()) {
                return Err(dataset_err(path, format!("line {line}: landmark {} is not finite", j + 1)));
            }
            vis.push(match fields[base + 2] {
                "0" => 0.0,
                "1" => 1.0,
                other => {
                    return Err(dataset_err(
                        path,
                        format!("line {line}: vis{} = {other:?} must be 0 or 1", j + 1),
                    ))
                }
            });
        }
        out.push(Prediction {
            image_path: fields[0].to_string(),
            m,
            landmarks,
            vis: VisibilityVector {
                values: vis,
                mode: VisibilityMode::Hard,
            },
        });
    }
    Ok(out)
}

/// Per-layer trace: `layer, m11..m24, p1..pNs, v1..vN` with soft visibility.
pub fn save_trace(path: &Path, trace: &[Snapshot]) -> Result<()> {
    let ns = trace.first().map_or(0, |s| s.p.len());
    let n = trace.first().map_or(0, |s| s.vis.len());
    let mut header = vec!["layer".to_string()];
    header.extend(m_header());
    header.extend((1..=ns).map(|k| format!("p{k}")));
    header.extend((1..=n).map(|j| format!("v{j}")));
    let rows: Vec<Vec<String>> = trace
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut r = vec![k.to_string()];
            r.extend(s.m.to_row_major().iter().map(|&v| fmt_csv(v)));
            r.extend(s.p.as_slice().iter().map(|&v| fmt_csv(v)));
            r.extend(s.vis.values.iter().map(|&v| fmt_csv(v)));
            r
        })
        .collect();
    write_csv(path, &header, &rows)
}

// ---------------------------------------------------------------------------
// Scans

/// Reads a scan manifest: one scan CSV per line, relative to the manifest.
/// Blank lines and lines starting with `#` are skipped.
pub fn load_scans(manifest: &Path) -> Result<Vec<LandmarkScan>> {
    let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    read_text(manifest)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| load_scan(&root.join(l)))
        .collect()
}

/// Scan CSV with columns `x,y,z` or `x,y,z,nx,ny,nz`.
pub fn load_scan(path: &Path) -> Result<LandmarkScan> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let names: Vec<&str> = header.iter().collect();
    let with_normals = match names.as_slice() {
        ["x", "y", "z"] => false,
        ["x", "y", "z", "nx", "ny", "nz"] => true,
        _ => return Err(dataset_err(path, "scan header must be x,y,z[,nx,ny,nz]")),
    };
    let mut pts = Vec::new();
    let mut normals = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        for (k, text) in rec.iter().enumerate() {
            let v = parse_field(path, line, names[k], text)?;
            if !v.is_finite() {
                return Err(dataset_err(path, format!("line {line}: {} is not finite", names[k])));
            }
            if k < 3 {
                pts.push(v);
            } else {
                normals.push(v);
            }
        }
    }
    let points = Matrix3xX::from_column_slice(&pts);
    let normals = with_normals.then(|| Matrix3xX::from_column_slice(&normals));
    LandmarkScan::new(points, normals).map_err(|e| dataset_err(path, e.to_string()))
}

pub fn save_scan(path: &Path, scan: &LandmarkScan) -> Result<()> {
    let mut header: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    if scan.normals.is_some() {
        header.extend(["nx", "ny", "nz"].iter().map(|s| s.to_string()));
    }
    let rows: Vec<Vec<String>> = (0..scan.num_landmarks())
        .map(|j| {
            let mut r: Vec<String> = scan.points.column(j).iter().map(|&v| fmt_csv(v)).collect();
            if let Some(n) = &scan.normals {
                r.extend(n.column(j).iter().map(|&v| fmt_csv(v)));
            }
            r
        })
        .collect();
    write_csv(path, &header, &rows)
}

// ---------------------------------------------------------------------------
// Synthetic dataset layout

/// Writes a synthetic dataset:
///
/// ```text
/// config.json             effective generator configuration
/// generator_model.json    deformable model the samples were drawn from
/// scans/manifest.txt      scan list for build-model
/// train/annotations.csv   plus train/truth.csv and train/images/*.pgm
/// test/annotations.csv    plus test/truth.csv and test/images/*.pgm
/// ```
///
/// `truth.csv` holds the exact generating `(M, p)` in the generator model's
/// basis.
pub fn write_synth_dataset(
    dir: &Path,
    cfg: &SynthConfig,
    model: &DeformableModel,
    scans: &[LandmarkScan],
    samples: &[SynthSample],
) -> Result<()> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(dir)?;
    let cfg_text = serde_json::to_string_pretty(cfg).map_err(malformed)? + "\n";
    write_text(&dir.join("config.json"), &cfg_text)?;
    save_deformable_model(&dir.join("generator_model.json"), model)?;

    let scan_dir = dir.join("scans");
    mkdir(&scan_dir)?;
    let mut manifest = String::new();
    for (i, scan) in scans.iter().enumerate() {
        let name = format!("scan_{i:04}.csv");
        save_scan(&scan_dir.join(&name), scan)?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    write_text(&scan_dir.join("manifest.txt"), &manifest)?;

    let splits = [("train", 0..cfg.num_train), ("test", cfg.num_train..cfg.num_images())];
    for (split, range) in splits {
        let split_dir = dir.join(split);
        mkdir(&split_dir.join("images"))?;
        let mut annotations = Vec::new();
        let mut truth = Vec::new();
        for i in range {
            let s = &samples[i];
            let name = format!("images/{i:06}.pgm");
            save_pgm(&split_dir.join(&name), &s.image)?;
            annotations.push((name.clone(), s.annotation.clone()));
            truth.push((
                name,
                GroundTruth {
                    m: s.true_m,
                    p: s.true_p.clone(),
                },
            ));
        }
        save_annotations(&split_dir.join("annotations.csv"), &annotations)?;
        save_ground_truth(&split_dir.join("truth.csv"), &truth)?;
    }
    Ok(())
}
