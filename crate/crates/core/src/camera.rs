//! Weak-perspective camera: projection, pose parameterization, bounding-box
//! initialization and surface-normal visibility.
//!
//! Frame convention: x right, y down, z toward the viewer. Rotation is
//! `R = R_y(yaw) * R_x(pitch) * R_z(roll)` and a projection matrix is
//! `M = [s * R(0..2, 0..3) | (tx, ty)]`.

use std::f64::consts::PI;

use nalgebra::{Matrix2x4, Matrix2xX, Matrix3, Matrix3xX, RowVector3, Vector3};

use crate::error::{Error, Result};
use crate::shape_model::{DeformableModel, Shape3D};
use crate::similarity::nearest_rotation;

/// 2×N image landmarks.
pub type Landmarks2D = Matrix2xX<f64>;

const DEGENERATE_ROW: f64 = 1e-9;
const GIMBAL_TOL: f64 = 1e-6;
const BOX_OVERFLOW: f64 = 1.2;

/// A 2×4 weak-perspective projection matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(pub Matrix2x4<f64>);

impl ProjectionMatrix {
    pub fn from_row_major(v: &[f64; 8]) -> Self {
        ProjectionMatrix(Matrix2x4::from_row_slice(v))
    }

    pub fn to_row_major(&self) -> [f64; 8] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(0, 3)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(1, 3)],
        ]
    }

    /// The first three entries of row `r`.
    pub fn rotation_row(&self, r: usize) -> Vector3<f64> {
        Vector3::new(self.0[(r, 0)], self.0[(r, 1)], self.0[(r, 2)])
    }

    pub fn translation(&self) -> (f64, f64) {
        (self.0[(0, 3)], self.0[(1, 3)])
    }

    /// Whether rows are orthogonal with equal positive norms, within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        let m1 = self.rotation_row(0);
        let m2 = self.rotation_row(1);
        let (n1, n2) = (m1.norm(), m2.norm());
        self.0.iter().all(|v| v.is_finite())
            && n1 > 0.0
            && m1.dot(&m2).abs() <= tol
            && (n1 - n2).abs() <= tol
    }

    /// Unit viewing axis `m1/|m1| x m2/|m2|`.
    pub fn view_axis(&self) -> Result<Vector3<f64>> {
        let m1 = self.rotation_row(0);
        let m2 = self.rotation_row(1);
        let (n1, n2) = (m1.norm(), m2.norm());
        if !(n1 > DEGENERATE_ROW && n2 > DEGENERATE_ROW) {
            return Err(Error::DegenerateProjection(format!(
                "row norms {n1:e} and {n2:e}"
            )));
        }
        Ok((m1 / n1).cross(&(m2 / n2)))
    }
}

/// Scale, Euler angles (radians) and image translation (pixels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseParams {
    pub scale: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub tx: f64,
    pub ty: f64,
}

impl PoseParams {
    pub fn new(scale: f64, yaw: f64, pitch: f64, roll: f64, tx: f64, ty: f64) -> Self {
        PoseParams {
            scale,
            yaw,
            pitch,
            roll,
            tx,
            ty,
        }
    }
}

/// Output of [`decompose`]; `gimbal_lock` marks pitch within 1e-6 of ±π/2,
/// where roll is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub pose: PoseParams,
    pub gimbal_lock: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Result<Self> {
        let b = BoundingBox {
            x,
            y,
            width,
            height,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.width, self.height]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.width <= 0.0 || self.height <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "invalid bounding box {:?}",
                self
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.width, self.y + 0.5 * self.height)
    }

    /// `sqrt(width * height)`.
    pub fn size(&self) -> f64 {
        (self.width * self.height).sqrt()
    }

    /// Tight axis-aligned box around the columns of `u`.
    pub fn enclosing(u: &Landmarks2D) -> Result<Self> {
        if u.ncols() == 0 {
            return Err(Error::InvalidInput("no landmarks to enclose".into()));
        }
        let row0 = u.row(0);
        let row1 = u.row(1);
        let (x0, x1) = (row0.min(), row0.max());
        let (y0, y1) = (row1.min(), row1.max());
        Ok(BoundingBox {
            x: x0,
            y: y0,
            width: x1 - x0,
            height: y1 - y0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VisibilityMode {
    Soft,
    Hard,
}

/// Per-landmark visibility; soft values lie in [-1, 1], hard values in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityVector {
    pub values: Vec<f64>,
    pub mode: VisibilityMode,
}

impl VisibilityVector {
    pub fn all_visible(n: usize, mode: VisibilityMode) -> Self {
        VisibilityVector {
            values: vec![1.0; n],
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(1 + sign(v)) / 2` with `sign(0) = +1`.
    pub fn harden(&self) -> VisibilityVector {
        VisibilityVector {
            values: self.values.iter().map(|&v| hard_sign(v)).collect(),
            mode: VisibilityMode::Hard,
        }
    }

    pub fn is_visible(&self, j: usize) -> bool {
        self.values[j] >= 0.0 && (self.mode == VisibilityMode::Soft || self.values[j] > 0.5)
    }

    pub fn count_visible(&self) -> usize {
        (0..self.len()).filter(|&j| self.is_visible(j)).count()
    }
}

fn hard_sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `U = M S`.
pub fn project(m: &ProjectionMatrix, shape: &Shape3D) -> Landmarks2D {
    m.0 * shape
}

pub fn rotation_from_euler(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let (sa, ca) = yaw.sin_cos();
    let (sb, cb) = pitch.sin_cos();
    let (sg, cg) = roll.sin_cos();
    let ry = Matrix3::new(ca, 0.0, sa, 0.0, 1.0, 0.0, -sa, 0.0, ca);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cb, -sb, 0.0, sb, cb);
    let rz = Matrix3::new(cg, -sg, 0.0, sg, cg, 0.0, 0.0, 0.0, 1.0);
    ry * rx * rz
}

pub fn compose(pose: &PoseParams) -> Result<ProjectionMatrix> {
    if !(pose.scale > 0.0) || !pose.scale.is_finite() {
        return Err(Error::InvalidInput(format!(
            "projection scale must be positive, got {}",
            pose.scale
        )));
    }
    let r = rotation_from_euler(pose.yaw, pose.pitch, pose.roll);
    let mut m = Matrix2x4::zeros();
    for row in 0..2 {
        for col in 0..3 {
            m[(row, col)] = pose.scale * r[(row, col)];
        }
    }
    m[(0, 3)] = pose.tx;
    m[(1, 3)] = pose.ty;
    Ok(ProjectionMatrix(m))
}

fn wrap_angle(a: f64) -> f64 {
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Recovers scale, Euler angles and translation; the rotation is the nearest
/// proper rotation to the stacked unit rows.
pub fn decompose(m: &ProjectionMatrix) -> Result<Decomposition> {
    let m1 = m.rotation_row(0);
    let m2 = m.rotation_row(1);
    let (n1, n2) = (m1.norm(), m2.norm());
    if !(n1 > DEGENERATE_ROW && n2 > DEGENERATE_ROW) || !n1.is_finite() || !n2.is_finite() {
        return Err(Error::DegenerateProjection(format!(
            "row norms {n1:e} and {n2:e}"
        )));
    }
    let r1 = m1 / n1;
    let r2 = m2 / n2;
    let r3 = r1.cross(&r2);
    let stacked = Matrix3::from_rows(&[
        RowVector3::from(r1.transpose()),
        RowVector3::from(r2.transpose()),
        RowVector3::from(r3.transpose()),
    ]);
    let r = nearest_rotation(&stacked)?;

    let sin_pitch = (-r[(1, 2)]).clamp(-1.0, 1.0);
    let pitch = sin_pitch.asin();
    let gimbal_lock = (pitch.abs() - PI / 2.0).abs() < GIMBAL_TOL;
    let (yaw, roll) = if gimbal_lock {
        // Only yaw -/+ roll is observable; fold it into yaw.
        (wrap_angle((-r[(2, 0)]).atan2(r[(0, 0)])), 0.0)
    } else {
        (
            wrap_angle(r[(0, 2)].atan2(r[(2, 2)])),
            wrap_angle(r[(1, 0)].atan2(r[(1, 1)])),
        )
    };
    let (tx, ty) = m.translation();
    Ok(Decomposition {
        pose: PoseParams {
            scale: 0.5 * (n1 + n2),
            yaw,
            pitch,
            roll,
            tx,
            ty,
        },
        gimbal_lock,
    })
}

/// Projects an arbitrary 2×4 matrix back onto the weak-perspective family.
pub fn renormalize(m: &ProjectionMatrix) -> Result<ProjectionMatrix> {
    compose(&decompose(m)?.pose)
}

/// Rescales and translates `mean_m` so the projected mean shape fills `b`:
/// the horizontal extent matches the box width and the shape is centered
/// vertically; when that makes the shape more than 20% taller than the box the
/// height is fitted instead.
pub fn init_from_bbox(
    mean_m: &ProjectionMatrix,
    model: &DeformableModel,
    b: &BoundingBox,
) -> Result<ProjectionMatrix> {
    b.validate()?;
    let projected = project(mean_m, model.mean_shape());
    let extent = BoundingBox::enclosing(&projected)?;
    if !(extent.width > 1e-12 && extent.height > 1e-12) {
        return Err(Error::DegenerateConfiguration(format!(
            "projected mean shape has extent {}x{}",
            extent.width, extent.height
        )));
    }
    let mut factor = b.width / extent.width;
    if factor * extent.height > BOX_OVERFLOW * b.height {
        factor = b.height / extent.height;
    }
    let (cx, cy) = extent.center();
    let (bx, by) = b.center();
    let (tx, ty) = mean_m.translation();
    let mut out = mean_m.0;
    for row in 0..2 {
        for col in 0..3 {
            out[(row, col)] *= factor;
        }
    }
    out[(0, 3)] = bx - factor * (cx - tx);
    out[(1, 3)] = by - factor * (cy - ty);
    Ok(ProjectionMatrix(out))
}

/// Soft visibility `N^T (m1/|m1| x m2/|m2|)`, optionally hardened.
pub fn visibility(
    m: &ProjectionMatrix,
    normals: &Matrix3xX<f64>,
    mode: VisibilityMode,
) -> Result<VisibilityVector> {
    let axis = m.view_axis()?;
    let soft = VisibilityVector {
        values: normals.column_iter().map(|n| n.dot(&axis)).collect(),
        mode: VisibilityMode::Soft,
    };
    Ok(match mode {
        VisibilityMode::Soft => soft,
        VisibilityMode::Hard => soft.harden(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape_model::homogenize;
    use nalgebra::{Matrix2x4, Matrix3xX, Vector3};
    use proptest::prelude::*;

    fn identity_m() -> ProjectionMatrix {
        ProjectionMatrix(Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0))
    }

    fn toy_model() -> DeformableModel {
        let pts = Matrix3xX::from_column_slice(&[
            -1.0, -0.6, 0.3, 1.0, -0.6, 0.3, 0.0, 0.0, 0.9, -0.5, 0.7, 0.4, 0.5, 0.7, 0.4, 0.0,
            1.3, 0.2,
        ]);
        let normals = Matrix3xX::from_fn(6, |r, _| if r == 2 { 1.0 } else { 0.0 });
        DeformableModel::new(homogenize(&pts, 1.0), vec![], normals).unwrap()
    }

    #[test]
    fn orthographic_identity_projection() {
        let s = Shape3D::from_column_slice(&[2.0, 3.0, 4.0, 1.0]);
        let u = project(&identity_m(), &s);
        assert_eq!(u[(0, 0)], 2.0);
        assert_eq!(u[(1, 0)], 3.0);
        let doubled = ProjectionMatrix(identity_m().0 * 2.0);
        assert_eq!(project(&doubled, &s), u * 2.0);
    }

    #[test]
    fn project_matches_triple_loop() {
        let m = ProjectionMatrix::from_row_major(&[0.3, -1.2, 0.7, 5.0, 2.1, 0.4, -0.9, -3.0]);
        let s = Shape3D::from_fn(7, |r, c| {
            if r == 3 {
                1.0
            } else {
                ((r * 7 + c) as f64 * 0.37).sin()
            }
        });
        let u = project(&m, &s);
        for r in 0..2 {
            for c in 0..7 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += m.0[(r, k)] * s[(k, c)];
                }
                assert!((u[(r, c)] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compose_examples() {
        let m = compose(&PoseParams::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(m, identity_m());
        let m = compose(&PoseParams::new(2.0, 0.0, 0.0, 0.0, 5.0, 7.0)).unwrap();
        assert_eq!(
            m.to_row_major(),
            [2.0, 0.0, 0.0, 5.0, 0.0, 2.0, 0.0, 7.0]
        );
        assert!(compose(&PoseParams::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)).is_err());
        assert!(compose(&PoseParams::new(-1.0, 0.0, 0.0, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn compose_yaw_matches_explicit_rotation() {
        let a = PI / 6.0;
        let s = 1.7;
        let m = compose(&PoseParams::new(s, a, 0.0, 0.0, 0.0, 0.0)).unwrap();
        // Explicit rotation about the y axis.
        let expected = [
            s * a.cos(),
            0.0,
            s * a.sin(),
            0.0,
            0.0,
            s,
            0.0,
            0.0,
        ];
        for (got, want) in m.to_row_major().iter().zip(expected) {
            assert!((got - want).abs() < 1e-14);
        }
        assert!(m.is_normalized(1e-12));
        assert!((m.rotation_row(0).norm() - s).abs() < 1e-12);
    }

    #[test]
    fn decompose_round_trip() {
        let pose = PoseParams::new(1.5, 0.3, -0.2, 0.1, 4.0, -2.0);
        let d = decompose(&compose(&pose).unwrap()).unwrap();
        assert!(!d.gimbal_lock);
        let p = d.pose;
        for (got, want) in [
            (p.scale, 1.5),
            (p.yaw, 0.3),
            (p.pitch, -0.2),
            (p.roll, 0.1),
            (p.tx, 4.0),
            (p.ty, -2.0),
        ] {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
        let id = decompose(&identity_m()).unwrap().pose;
        assert_eq!((id.yaw, id.pitch, id.roll), (0.0, 0.0, 0.0));
        assert!((id.scale - 1.0).abs() < 1e-15);
        assert_eq!((id.tx, id.ty), (0.0, 0.0));
    }

    #[test]
    fn decompose_flags_gimbal_lock() {
        let pose = PoseParams::new(2.0, 0.4, PI / 2.0, 0.3, 1.0, 1.0);
        let m = compose(&pose).unwrap();
        let d = decompose(&m).unwrap();
        assert!(d.gimbal_lock);
        assert_eq!(d.pose.roll, 0.0);
        let back = compose(&d.pose).unwrap();
        assert!((back.0 - m.0).amax() < 1e-8);
    }

    #[test]
    fn decompose_rejects_degenerate_rows() {
        let m = ProjectionMatrix::from_row_major(&[0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(decompose(&m), Err(Error::DegenerateProjection(_))));
        assert!(visibility(&m, &Matrix3xX::zeros(1), VisibilityMode::Soft).is_err());
    }

    #[test]
    fn perturbed_matrix_projects_to_fixed_point() {
        let m = compose(&PoseParams::new(3.0, 0.5, 0.2, -0.4, 10.0, 20.0)).unwrap();
        let noise = [0.01, -0.02, 0.015, 0.0, -0.01, 0.005, 0.02, 0.0];
        let mut raw = m.to_row_major();
        for (v, n) in raw.iter_mut().zip(noise) {
            *v += n;
        }
        let r1 = renormalize(&ProjectionMatrix::from_row_major(&raw)).unwrap();
        assert!(r1.is_normalized(1e-8));
        let r2 = renormalize(&r1).unwrap();
        assert!((r2.0 - r1.0).amax() < 1e-10);
        let unchanged = renormalize(&m).unwrap();
        assert!((unchanged.0 - m.0).amax() < 1e-10);
    }

    #[test]
    fn bbox_init_examples() {
        let model = toy_model();
        let mean_m = compose(&PoseParams::new(40.0, 0.3, 0.1, 0.05, 60.0, 70.0)).unwrap();
        let tight = BoundingBox::enclosing(&project(&mean_m, model.mean_shape())).unwrap();
        let same = init_from_bbox(&mean_m, &model, &tight).unwrap();
        assert!((same.0 - mean_m.0).amax() < 1e-9);

        let (cx, cy) = tight.center();
        let doubled = BoundingBox::new(
            cx - tight.width,
            cy - tight.height,
            2.0 * tight.width,
            2.0 * tight.height,
        )
        .unwrap();
        let m2 = init_from_bbox(&mean_m, &model, &doubled).unwrap();
        let d0 = decompose(&mean_m).unwrap().pose;
        let d2 = decompose(&m2).unwrap().pose;
        assert!((d2.scale - 2.0 * d0.scale).abs() < 1e-9);
        assert!((d2.yaw - d0.yaw).abs() < 1e-12);
        assert!((d2.pitch - d0.pitch).abs() < 1e-12);
        assert!((d2.roll - d0.roll).abs() < 1e-12);
    }

    #[test]
    fn bbox_init_fits_width_or_height() {
        let model = toy_model();
        let mean_m = compose(&PoseParams::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)).unwrap();
        // Roomy box: width fitted, vertically centered.
        let wide = BoundingBox::new(10.0, 10.0, 200.0, 250.0).unwrap();
        let m = init_from_bbox(&mean_m, &model, &wide).unwrap();
        let e = BoundingBox::enclosing(&project(&m, model.mean_shape())).unwrap();
        assert!((e.x - wide.x).abs() < 1e-9 && (e.width - wide.width).abs() < 1e-9);
        assert!((e.center().1 - wide.center().1).abs() < 1e-9);
        // Short box: the width fit would overflow vertically, so height is fitted.
        let short = BoundingBox::new(0.0, 0.0, 200.0, 100.0).unwrap();
        let m = init_from_bbox(&mean_m, &model, &short).unwrap();
        let e = BoundingBox::enclosing(&project(&m, model.mean_shape())).unwrap();
        assert!((e.height - short.height).abs() < 1e-9);
        assert!((e.center().0 - short.center().0).abs() < 1e-9);
    }

    #[test]
    fn bbox_init_rejects_flat_projection() {
        let model = toy_model();
        let flat = ProjectionMatrix::from_row_major(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert!(init_from_bbox(&flat, &model, &b).is_err());
    }

    #[test]
    fn visibility_examples() {
        let front = Matrix3xX::from_column_slice(&[0.0, 0.0, 1.0, 0.0, 0.0, -1.0]);
        let soft = visibility(&identity_m(), &front, VisibilityMode::Soft).unwrap();
        assert_eq!(soft.values, vec![1.0, -1.0]);
        let hard = visibility(&identity_m(), &front, VisibilityMode::Hard).unwrap();
        assert_eq!(hard.values, vec![1.0, 0.0]);

        let n = Matrix3xX::from_column_slice(&[0.0, 0.0, 1.0]);
        for theta in [0.2, -0.7, 1.3] {
            let m = compose(&PoseParams::new(2.0, theta, 0.0, 0.0, 0.0, 0.0)).unwrap();
            let v = visibility(&m, &n, VisibilityMode::Soft).unwrap();
            assert!((v.values[0] - theta.cos()).abs() < 1e-12);
        }
        for theta in [PI / 2.0, -PI / 2.0] {
            // Build the profile matrix exactly so the grazing value is exactly 0.
            let s = theta.signum();
            let m = ProjectionMatrix::from_row_major(&[0.0, 0.0, s, 0.0, 0.0, 1.0, 0.0, 0.0]);
            let v = visibility(&m, &n, VisibilityMode::Soft).unwrap();
            assert_eq!(v.values[0], 0.0);
            let h = visibility(&m, &n, VisibilityMode::Hard).unwrap();
            assert_eq!(h.values[0], 1.0);
        }
    }

    #[test]
    fn yaw_mirror_swaps_mirrored_normals() {
        let a = Vector3::new(0.4, -0.2, 0.8).normalize();
        let b = Vector3::new(-a.x, a.y, a.z);
        let normals = Matrix3xX::from_columns(&[a, b]);
        let m = compose(&PoseParams::new(1.0, 0.6, 0.15, 0.0, 0.0, 0.0)).unwrap();
        let mm = compose(&PoseParams::new(1.0, -0.6, 0.15, 0.0, 0.0, 0.0)).unwrap();
        let v = visibility(&m, &normals, VisibilityMode::Soft).unwrap();
        let w = visibility(&mm, &normals, VisibilityMode::Soft).unwrap();
        assert!((v.values[0] - w.values[1]).abs() < 1e-10);
        assert!((v.values[1] - w.values[0]).abs() < 1e-10);
    }

    fn angle() -> impl Strategy<Value = f64> {
        -3.0f64..3.0
    }

    proptest! {
        #[test]
        fn soft_visibility_bounded_and_scale_invariant(
            yaw in angle(), pitch in -1.5f64..1.5, roll in angle(),
            s in 0.1f64..50.0, c in 0.01f64..100.0, tx in -100.0f64..100.0,
            nx in -1.0f64..1.0, ny in -1.0f64..1.0, nz in -1.0f64..1.0,
        ) {
            let n = Vector3::new(nx, ny, nz);
            prop_assume!(n.norm() > 1e-3);
            let normals = Matrix3xX::from_columns(&[n.normalize()]);
            let m = compose(&PoseParams::new(s, yaw, pitch, roll, tx, 0.0)).unwrap();
            let v = visibility(&m, &normals, VisibilityMode::Soft).unwrap().values[0];
            prop_assert!(v.abs() <= 1.0 + 1e-12);
            let mut scaled = m.0 * c;
            scaled[(0, 3)] = -tx;
            scaled[(1, 3)] = 3.0;
            let w = visibility(&ProjectionMatrix(scaled), &normals, VisibilityMode::Soft)
                .unwrap().values[0];
            prop_assert!((v - w).abs() < 1e-12);
        }

        #[test]
        fn compose_decompose_round_trip(
            yaw in angle(), pitch in -1.5f64..1.5, roll in angle(),
            s in 0.1f64..50.0, tx in -100.0f64..100.0, ty in -100.0f64..100.0,
        ) {
            let m = compose(&PoseParams::new(s, yaw, pitch, roll, tx, ty)).unwrap();
            prop_assert!(m.is_normalized(1e-8 * s.max(1.0)));
            let back = compose(&decompose(&m).unwrap().pose).unwrap();
            prop_assert!((back.0 - m.0).amax() < 1e-8 * s.max(1.0));
        }

        #[test]
        fn projection_is_affine_in_shapes(
            a in -2.0f64..2.0, seed in 0u32..1000,
        ) {
            let f = |k: usize| ((k as f64 + seed as f64) * 0.731).sin();
            let m = ProjectionMatrix::from_row_major(&[f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7)]);
            let s1 = Shape3D::from_fn(5, |r, c| if r == 3 { 1.0 } else { f(10 + 4 * c + r) });
            let s2 = Shape3D::from_fn(5, |r, c| if r == 3 { 1.0 } else { f(40 + 4 * c + r) });
            let mix = &s1 * a + &s2 * (1.0 - a);
            let lhs = project(&m, &mix);
            let rhs = project(&m, &s1) * a + project(&m, &s2) * (1.0 - a);
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }
    }
}
