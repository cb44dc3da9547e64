//! 3D deformable landmark model: generalized Procrustes alignment of labeled
//! scans, PCA shape bases, instantiation, and mean surface normals.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, Matrix4xX, SymmetricEigen};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::similarity::{centered, fit_similarity};

/// Homogeneous 4×N landmark matrix; the last row is all ones.
pub type Shape3D = Matrix4xX<f64>;

const NORMAL_TOL: f64 = 1e-9;
const ORTHONORMAL_TOL: f64 = 1e-8;
const GPA_MAX_PASSES: usize = 10;
const GPA_TOL: f64 = 1e-10;

/// One labeled 3D scan: landmark positions and, optionally, unit surface normals.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkScan {
    pub points: Matrix3xX<f64>,
    pub normals: Option<Matrix3xX<f64>>,
}

impl LandmarkScan {
    pub fn new(points: Matrix3xX<f64>, normals: Option<Matrix3xX<f64>>) -> Result<Self> {
        if let Some(n) = &normals {
            if n.ncols() != points.ncols() {
                return Err(Error::Dimension(format!(
                    "{} points but {} normals",
                    points.ncols(),
                    n.ncols()
                )));
            }
            check_unit_columns(n, "scan normal")?;
        }
        Ok(LandmarkScan { points, normals })
    }

    pub fn num_landmarks(&self) -> usize {
        self.points.ncols()
    }
}

fn check_unit_columns(m: &Matrix3xX<f64>, what: &str) -> Result<()> {
    for (j, col) in m.column_iter().enumerate() {
        let norm = col.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > NORMAL_TOL {
            return Err(Error::InvalidInput(format!(
                "{what} {j} has norm {norm}, expected unit length"
            )));
        }
    }
    Ok(())
}

/// Coefficients `p` of the shape bases.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams(pub DVector<f64>);

impl ShapeParams {
    pub fn zeros(n: usize) -> Self {
        ShapeParams(DVector::zeros(n))
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        ShapeParams(DVector::from_vec(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Mean shape, orthonormal deformation bases and mean landmark normals.
///
/// Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformableModel {
    mean_shape: Shape3D,
    bases: Vec<Shape3D>,
    normals: Matrix3xX<f64>,
}

impl DeformableModel {
    /// Validates every model invariant: homogeneous rows, orthonormal bases,
    /// unit normals.
    pub fn new(mean_shape: Shape3D, bases: Vec<Shape3D>, normals: Matrix3xX<f64>) -> Result<Self> {
        let n = mean_shape.ncols();
        if n == 0 {
            return Err(Error::InvalidInput("model has no landmarks".into()));
        }
        if mean_shape.row(3).iter().any(|&w| w != 1.0) {
            return Err(Error::InvalidInput(
                "mean shape homogeneous row must be all ones".into(),
            ));
        }
        if normals.ncols() != n {
            return Err(Error::Dimension(format!(
                "{} normals for {} landmarks",
                normals.ncols(),
                n
            )));
        }
        check_unit_columns(&normals, "model normal")?;
        for (i, b) in bases.iter().enumerate() {
            if b.ncols() != n {
                return Err(Error::Dimension(format!(
                    "basis {i} has {} columns, expected {n}",
                    b.ncols()
                )));
            }
            if b.row(3).iter().any(|&w| w != 0.0) {
                return Err(Error::InvalidInput(format!(
                    "basis {i} homogeneous row must be all zeros"
                )));
            }
        }
        for i in 0..bases.len() {
            for k in i..bases.len() {
                let dot = bases[i].dot(&bases[k]);
                let expected = if i == k { 1.0 } else { 0.0 };
                if (dot - expected).abs() > ORTHONORMAL_TOL {
                    return Err(Error::InvalidInput(format!(
                        "bases {i} and {k} are not orthonormal (dot = {dot})"
                    )));
                }
            }
        }
        Ok(DeformableModel {
            mean_shape,
            bases,
            normals,
        })
    }

    pub fn num_landmarks(&self) -> usize {
        self.mean_shape.ncols()
    }

    pub fn num_bases(&self) -> usize {
        self.bases.len()
    }

    pub fn mean_shape(&self) -> &Shape3D {
        &self.mean_shape
    }

    pub fn bases(&self) -> &[Shape3D] {
        &self.bases
    }

    pub fn normals(&self) -> &Matrix3xX<f64> {
        &self.normals
    }

    /// `S = S0 + sum_i p_i S_i`.
    pub fn instantiate(&self, params: &ShapeParams) -> Result<Shape3D> {
        if params.len() != self.num_bases() {
            return Err(Error::Dimension(format!(
                "{} shape parameters for {} bases",
                params.len(),
                self.num_bases()
            )));
        }
        let mut shape = self.mean_shape.clone();
        for (b, &p) in self.bases.iter().zip(params.0.iter()) {
            shape.zip_apply(b, |s, bv| *s += p * bv);
        }
        // The homogeneous row stays exactly 1 since every basis row is 0.
        Ok(shape)
    }

    /// Orthogonal projection of the 3D part of `shape` onto the bases.
    pub fn project_shape(&self, points: &Matrix3xX<f64>) -> Result<ShapeParams> {
        if points.ncols() != self.num_landmarks() {
            return Err(Error::Dimension(format!(
                "{} points for a {}-landmark model",
                points.ncols(),
                self.num_landmarks()
            )));
        }
        let diff = points - self.mean_shape.fixed_rows::<3>(0);
        let p = self
            .bases
            .iter()
            .map(|b| b.fixed_rows::<3>(0).dot(&diff))
            .collect();
        Ok(ShapeParams::from_vec(p))
    }

    /// SHA-256 over the exact bit patterns of every stored value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_landmarks() as u64).to_le_bytes());
        h.update((self.num_bases() as u64).to_le_bytes());
        let mut feed = |vals: &[f64]| {
            for v in vals {
                h.update(v.to_bits().to_le_bytes());
            }
        };
        feed(self.mean_shape.as_slice());
        for b in &self.bases {
            feed(b.as_slice());
        }
        feed(self.normals.as_slice());
        hex::encode(h.finalize())
    }
}

/// Result of generalized Procrustes analysis over a scan collection.
#[derive(Debug, Clone)]
pub struct AlignedScans {
    /// Aligned, centered landmark sets, in input order.
    pub shapes: Vec<Matrix3xX<f64>>,
    /// Rotation applied to each scan.
    pub rotations: Vec<Matrix3<f64>>,
    /// Converged reference shape.
    pub reference: Matrix3xX<f64>,
    pub passes: usize,
}

/// Removes translation, rotation and scale from every scan against a
/// running mean.
///
/// The reference starts as the mean of the centered inputs. Each scan is
/// aligned by fitting the reference onto the scan and inverting that fit, so a
/// scan that differs from the reference only by an exact similarity maps back
/// onto it with unit scale. The reference is rescaled to its initial centroid
/// size after every pass.
pub fn generalized_procrustes(scans: &[Matrix3xX<f64>]) -> Result<AlignedScans> {
    let first = scans
        .first()
        .ok_or_else(|| Error::InvalidInput("no scans to align".into()))?;
    let n = first.ncols();
    for (index, s) in scans.iter().enumerate() {
        if s.ncols() != n {
            return Err(Error::LandmarkCountMismatch {
                index,
                expected: n,
                found: s.ncols(),
            });
        }
    }
    let centered_scans: Vec<Matrix3xX<f64>> = scans.iter().map(centered).collect();
    let mut reference = mean_of(&centered_scans);
    let size0 = reference.norm();
    if size0 < 1e-300 {
        return Err(Error::DegenerateConfiguration(
            "mean scan has zero extent".into(),
        ));
    }

    let mut passes = 0;
    while passes < GPA_MAX_PASSES {
        passes += 1;
        let aligned = align_all(&centered_scans, &reference)?;
        let shapes: Vec<_> = aligned.into_iter().map(|(s, _)| s).collect();
        let mut next = mean_of(&shapes);
        let size = next.norm();
        if size < 1e-300 {
            return Err(Error::DegenerateConfiguration(
                "Procrustes mean collapsed".into(),
            ));
        }
        next *= size0 / size;
        let change = (&next - &reference).amax();
        reference = next;
        if change < GPA_TOL {
            break;
        }
    }

    let aligned = align_all(&centered_scans, &reference)?;
    let (shapes, rotations) = aligned.into_iter().unzip();
    Ok(AlignedScans {
        shapes,
        rotations,
        reference,
        passes,
    })
}

fn mean_of(shapes: &[Matrix3xX<f64>]) -> Matrix3xX<f64> {
    let mut acc = Matrix3xX::zeros(shapes[0].ncols());
    for s in shapes {
        acc += s;
    }
    acc / shapes.len() as f64
}

fn align_all(
    scans: &[Matrix3xX<f64>],
    reference: &Matrix3xX<f64>,
) -> Result<Vec<(Matrix3xX<f64>, Matrix3<f64>)>> {
    scans
        .par_iter()
        .map(|scan| {
            let fit = fit_similarity(reference, scan)?;
            if fit.scale <= 1e-12 {
                return Err(Error::DegenerateConfiguration(
                    "scan cannot be scaled onto the reference".into(),
                ));
            }
            let inv = fit.inverse();
            Ok((inv.apply(scan), inv.rotation))
        })
        .collect()
}

/// Builds the deformable model: Procrustes alignment, PCA on the flattened
/// 3N-vectors, and rotated-then-averaged surface normals.
pub fn build_model(scans: &[LandmarkScan], num_bases: usize) -> Result<DeformableModel> {
    if scans.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            found: scans.len(),
        });
    }
    let n = scans[0].num_landmarks();
    for (index, s) in scans.iter().enumerate() {
        if s.num_landmarks() != n {
            return Err(Error::LandmarkCountMismatch {
                index,
                expected: n,
                found: s.num_landmarks(),
            });
        }
    }
    if let Some(index) = scans.iter().position(|s| s.normals.is_none()) {
        return Err(Error::MissingNormals(index));
    }
    let max_bases = (scans.len() - 1).min(3 * n);
    if num_bases > max_bases {
        return Err(Error::RankExceeded {
            requested: num_bases,
            available: max_bases,
        });
    }

    let points: Vec<Matrix3xX<f64>> = scans.iter().map(|s| s.points.clone()).collect();
    let aligned = generalized_procrustes(&points)?;
    let mean = mean_of(&aligned.shapes);

    let bases = pca_bases(&aligned.shapes, &mean, num_bases)?;

    let mut normal_sum = Matrix3xX::zeros(n);
    for (scan, rot) in scans.iter().zip(&aligned.rotations) {
        let normals = scan.normals.as_ref().expect("checked above");
        normal_sum += rot * normals;
    }
    let mut normals = normal_sum / scans.len() as f64;
    for (j, mut col) in normals.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm < 1e-6 {
            return Err(Error::DegenerateNormal(j));
        }
        col /= norm;
    }

    DeformableModel::new(homogenize(&mean, 1.0), bases, normals)
}

fn pca_bases(
    shapes: &[Matrix3xX<f64>],
    mean: &Matrix3xX<f64>,
    num_bases: usize,
) -> Result<Vec<Shape3D>> {
    let n = mean.ncols();
    let dim = 3 * n;
    let m = shapes.len();
    let mut data = DMatrix::zeros(m, dim);
    for (r, s) in shapes.iter().enumerate() {
        let d = s - mean;
        data.row_mut(r).copy_from_slice(d.as_slice());
    }
    let cov = (data.transpose() * &data) / (m as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    let floor = (1e-12 * lambda_max).max(1e-18);
    let rank = order
        .iter()
        .take_while(|&&i| eig.eigenvalues[i] > floor)
        .count();
    if num_bases > rank {
        return Err(Error::RankExceeded {
            requested: num_bases,
            available: rank,
        });
    }

    Ok(order[..num_bases]
        .iter()
        .map(|&i| {
            let mut v: DVector<f64> = eig.eigenvectors.column(i).into_owned();
            v /= v.norm();
            // Deterministic sign: largest-magnitude entry positive.
            let pivot = v.iamax();
            if v[pivot] < 0.0 {
                v.neg_mut();
            }
            let pts = Matrix3xX::from_column_slice(v.as_slice());
            homogenize(&pts, 0.0)
        })
        .collect())
}

/// Appends a constant homogeneous row.
pub fn homogenize(points: &Matrix3xX<f64>, w: f64) -> Shape3D {
    let mut out = Shape3D::from_element(points.ncols(), w);
    out.fixed_rows_mut::<3>(0).copy_from(points);
    out
}
