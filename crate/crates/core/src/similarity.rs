//! Closed-form similarity alignment of 3D point sets and projection onto SO(3).

use nalgebra::{Matrix3, Matrix3xX, Vector3};

use crate::error::{Error, Result};

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, points: &Matrix3xX<f64>) -> Matrix3xX<f64> {
        let mut out = (self.rotation * points) * self.scale;
        for mut col in out.column_iter_mut() {
            col += self.translation;
        }
        out
    }

    pub fn inverse(&self) -> Similarity {
        let rt = self.rotation.transpose();
        let inv_scale = 1.0 / self.scale;
        Similarity {
            scale: inv_scale,
            rotation: rt,
            translation: -(rt * self.translation) * inv_scale,
        }
    }
}

pub(crate) fn centroid(points: &Matrix3xX<f64>) -> Vector3<f64> {
    let n = points.ncols().max(1) as f64;
    points.column_sum() / n
}

pub(crate) fn centered(points: &Matrix3xX<f64>) -> Matrix3xX<f64> {
    let c = centroid(points);
    let mut out = points.clone();
    for mut col in out.column_iter_mut() {
        col -= c;
    }
    out
}

/// Least-squares similarity mapping `source` onto `target` (Umeyama's method).
pub fn fit_similarity(source: &Matrix3xX<f64>, target: &Matrix3xX<f64>) -> Result<Similarity> {
    if source.ncols() != target.ncols() {
        return Err(Error::Dimension(format!(
            "similarity fit between {} and {} points",
            source.ncols(),
            target.ncols()
        )));
    }
    let n = source.ncols();
    if n == 0 {
        return Err(Error::DegenerateConfiguration("empty point set".into()));
    }
    let mu_s = centroid(source);
    let mu_t = centroid(target);
    let src = centered(source);
    let tgt = centered(target);

    let var_s = src.norm_squared() / n as f64;
    if var_s < 1e-300 || tgt.norm_squared() < 1e-300 {
        return Err(Error::DegenerateConfiguration(
            "all points coincide; similarity is undefined".into(),
        ));
    }

    let cov = (&tgt * src.transpose()) / n as f64;
    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Singular("SVD of cross-covariance failed".into())),
    };
    let mut d = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let trace_ds = svd.singular_values[0] + svd.singular_values[1]
        + d[(2, 2)] * svd.singular_values[2];
    let scale = trace_ds / var_s;
    let translation = mu_t - rotation * mu_s * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Closest rotation matrix (Frobenius norm) to `m`.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Singular("SVD failed while projecting onto SO(3)".into())),
    };
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Ok(u * d * v_t)
}
