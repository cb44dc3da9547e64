//! Ground-truth projection matrix and shape parameters from labeled 2D
//! landmarks, by alternating closed-form least squares on
//! `J(M, p) = ||(M (S0 + sum p_i S_i) - U) .* V||^2`.

use nalgebra::{DMatrix, DVector, Matrix2x4, Matrix3, Rotation3, Vector3, SymmetricEigen};

use std::f64::consts::{FRAC_PI_2, PI};

use crate::camera::{compose, decompose, renormalize, PoseParams, BoundingBox, Landmarks2D, ProjectionMatrix, VisibilityMode, VisibilityVector};
use crate::error::{Error, Result};
use crate::shape_model::{DeformableModel, Shape3D, ShapeParams};

/// Labeled 2D landmarks, binary visibility and face box. Coordinates of
/// invisible landmarks are placeholders (typically NaN) and are never read.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub landmarks: Landmarks2D,
    pub vis: VisibilityVector,
    pub bbox: BoundingBox,
}

impl Annotation {
    pub fn new(landmarks: Landmarks2D, vis: VisibilityVector, bbox: BoundingBox) -> Result<Self> {
        if landmarks.ncols() != vis.len() {
            return Err(Error::Dimension(format!(
                "{} landmarks but {} visibility flags",
                landmarks.ncols(),
                vis.len()
            )));
        }
        if vis.mode != VisibilityMode::Hard || vis.values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput(
                "annotation visibility must be binary".into(),
            ));
        }
        for j in 0..landmarks.ncols() {
            if vis.values[j] == 1.0 && !(landmarks[(0, j)].is_finite() && landmarks[(1, j)].is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "visible landmark {j} has non-finite coordinates"
                )));
            }
        }
        bbox.validate()?;
        Ok(Annotation {
            landmarks,
            vis,
            bbox,
        })
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmarks.ncols()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.num_landmarks())
            .filter(|&j| self.vis.values[j] == 1.0)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Stop once the max-abs change of both M and p falls below this.
    pub tol: f64,
    pub max_iters: usize,
    pub min_visible: usize,
    /// After each alternating sweep, try a damped joint Gauss-Newton
    /// (Levenberg-Marquardt) step on `(M, p)` and keep it only if it lowers `J`.
    pub joint_step: bool,
    /// After renormalization, refine scale, rotation, translation and p on
    /// the weak-perspective family; kept only if it lowers `J`.
    pub refine: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-7,
            max_iters: 200,
            min_visible: 6,
            joint_step: true,
            refine: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Renormalized onto the weak-perspective family after convergence.
    pub m: ProjectionMatrix,
    pub p: ShapeParams,
    /// `J` at the returned `(m, p)`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `J` after every half-step of the raw iteration (M update, p update and,
    /// when accepted, the joint step).
    pub objective_trace: Vec<f64>,
}

fn check_dims(ann: &Annotation, model: &DeformableModel) -> Result<()> {
    if ann.num_landmarks() != model.num_landmarks() {
        return Err(Error::Dimension(format!(
            "annotation has {} landmarks, model has {}",
            ann.num_landmarks(),
            model.num_landmarks()
        )));
    }
    Ok(())
}

/// Squared residual of projected shape against the visible landmarks.
pub fn objective(
    m: &ProjectionMatrix,
    p: &ShapeParams,
    ann: &Annotation,
    model: &DeformableModel,
) -> Result<f64> {
    check_dims(ann, model)?;
    let shape = model.instantiate(p)?;
    Ok(objective_for_shape(m, &shape, ann))
}

fn objective_for_shape(m: &ProjectionMatrix, shape: &Shape3D, ann: &Annotation) -> f64 {
    let projected = m.0 * shape;
    ann.visible_indices()
        .into_iter()
        .map(|j| (projected.column(j) - ann.landmarks.column(j)).norm_squared())
        .sum()
}

/// Least-squares M for a fixed 3D shape; each row is an independent
/// 4-unknown problem over the visible columns. Not renormalized.
pub fn solve_m(ann: &Annotation, shape: &Shape3D) -> Result<ProjectionMatrix> {
    if shape.ncols() != ann.num_landmarks() {
        return Err(Error::Dimension(format!(
            "shape has {} landmarks, annotation {}",
            shape.ncols(),
            ann.num_landmarks()
        )));
    }
    let visible = ann.visible_indices();
    if visible.len() < 4 {
        return Err(Error::TooFewVisible {
            needed: 4,
            found: visible.len(),
        });
    }
    let k = visible.len();
    let a = DMatrix::from_fn(k, 4, |r, c| shape[(c, visible[r])]);
    let b = DMatrix::from_fn(k, 2, |r, c| ann.landmarks[(c, visible[r])]);

    let svd = a.svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if !(s_max > 0.0) || s_min <= 1e-10 * s_max {
        return Err(Error::DegenerateConfiguration(format!(
            "visible 3D landmarks span less than 4 dimensions (singular values {:e}..{:e})",
            s_min, s_max
        )));
    }
    let x = svd
        .solve(&b, 0.0)
        .map_err(|e| Error::Singular(e.to_string()))?;
    let mut m = Matrix2x4::zeros();
    for row in 0..2 {
        for col in 0..4 {
            m[(row, col)] = x[(col, row)];
        }
    }
    Ok(ProjectionMatrix(m))
}

/// Least-squares p for a fixed M via the normal equations. A ridge of
/// `1e-6 * trace(A) / N_s` is added when the normal matrix's condition number
/// exceeds 1e12.
pub fn solve_p(
    ann: &Annotation,
    m: &ProjectionMatrix,
    model: &DeformableModel,
) -> Result<ShapeParams> {
    check_dims(ann, model)?;
    let ns = model.num_bases();
    if ns == 0 {
        return Ok(ShapeParams::zeros(0));
    }
    let visible = ann.visible_indices();
    let rows = 2 * visible.len();
    let mean_proj = m.0 * model.mean_shape();
    let basis_proj: Vec<Landmarks2D> = model.bases().iter().map(|b| m.0 * b).collect();

    let mut design = DMatrix::zeros(rows, ns);
    let mut rhs = DVector::zeros(rows);
    for (r, &j) in visible.iter().enumerate() {
        for axis in 0..2 {
            let row = 2 * r + axis;
            rhs[row] = ann.landmarks[(axis, j)] - mean_proj[(axis, j)];
            for (i, bp) in basis_proj.iter().enumerate() {
                design[(row, i)] = bp[(axis, j)];
            }
        }
    }
    let mut normal = design.transpose() * &design;
    let atb = design.transpose() * rhs;

    let eig = SymmetricEigen::new(normal.clone());
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    let ill_conditioned = !(lmin > 0.0) || lmax / lmin > 1e12;
    if ill_conditioned {
        let eps = 1e-6 * normal.trace() / ns as f64;
        if !(eps > 0.0) {
            return Err(Error::Singular(
                "shape normal matrix is zero; no ridge can be formed".into(),
            ));
        }
        for i in 0..ns {
            normal[(i, i)] += eps;
        }
    }
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Singular("shape normal matrix is not positive definite".into()))?;
    Ok(ShapeParams(chol.solve(&atb)))
}

/// Normal equations `(J^T J, J^T r)` of the residual linearized in all
/// entries of M and p jointly.
fn joint_system(
    ann: &Annotation,
    model: &DeformableModel,
    m: &ProjectionMatrix,
    p: &ShapeParams,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let visible = ann.visible_indices();
    let ns = model.num_bases();
    let shape = model.instantiate(p)?;
    let projected = m.0 * &shape;
    let basis_proj: Vec<Landmarks2D> = model.bases().iter().map(|b| m.0 * b).collect();
    let mut jac = DMatrix::zeros(2 * visible.len(), 8 + ns);
    let mut res = DVector::zeros(2 * visible.len());
    for (r, &j) in visible.iter().enumerate() {
        for axis in 0..2 {
            let row = 2 * r + axis;
            res[row] = ann.landmarks[(axis, j)] - projected[(axis, j)];
            for c in 0..4 {
                jac[(row, 4 * axis + c)] = shape[(c, j)];
            }
            for (i, bp) in basis_proj.iter().enumerate() {
                jac[(row, 8 + i)] = bp[(axis, j)];
            }
        }
    }
    Ok((jac.transpose() * &jac, jac.transpose() * res))
}

/// Levenberg-Marquardt update with damping `mu` relative to the diagonal.
/// `None` when the damped system cannot be factored.
fn damped_step(
    jtj: &DMatrix<f64>,
    jtr: &DVector<f64>,
    mu: f64,
    m: &ProjectionMatrix,
    p: &ShapeParams,
) -> Option<(ProjectionMatrix, ShapeParams)> {
    let floor = 1e-12 * jtj.diagonal().max().max(f64::MIN_POSITIVE);
    let mut a = jtj.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += mu * jtj[(i, i)].max(floor);
    }
    let delta = a.cholesky()?.solve(jtr);
    if !delta.iter().all(|v| v.is_finite()) {
        return None;
    }
    let mut m_new = m.0;
    for axis in 0..2 {
        for c in 0..4 {
            m_new[(axis, c)] += delta[4 * axis + c];
        }
    }
    let p_new = DVector::from_fn(p.len(), |i, _| p.0[i] + delta[8 + i]);
    Some((ProjectionMatrix(m_new), ShapeParams(p_new)))
}

const LM_TRIES: usize = 4;

const REFINE_ITERS: usize = 100;
const REFINE_YAW_STARTS: usize = 7;

/// Levenberg-Marquardt on `(s, R, t, p)` with `M = s [R_1; R_2 | t]`, the
/// rotation updated multiplicatively. Starts from a normalized `m` and
/// returns the best state visited with its `J`.
fn refine_weak_perspective(
    ann: &Annotation,
    model: &DeformableModel,
    m: &ProjectionMatrix,
    p: &ShapeParams,
) -> Result<(ProjectionMatrix, ShapeParams, f64)> {
    let visible = ann.visible_indices();
    let ns = model.num_bases();
    let r1 = m.rotation_row(0).normalize();
    let r2 = m.rotation_row(1).normalize();
    let mut rot = Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r1.cross(&r2).transpose()]);
    let mut scale = 0.5 * (m.rotation_row(0).norm() + m.rotation_row(1).norm());
    let (tx, ty) = m.translation();
    let mut t = [tx, ty];
    let mut p = p.clone();

    let assemble = |scale: f64, rot: &Matrix3<f64>, t: &[f64; 2]| {
        let mut out = Matrix2x4::zeros();
        for row in 0..2 {
            for col in 0..3 {
                out[(row, col)] = scale * rot[(row, col)];
            }
            out[(row, 3)] = t[row];
        }
        ProjectionMatrix(out)
    };
    let mut best_m = assemble(scale, &rot, &t);
    let mut best_j = objective_for_shape(&best_m, &model.instantiate(&p)?, ann);
    let mut mu = 1e-3;
    let unknowns = 7 + ns;

    for _ in 0..REFINE_ITERS {
        if best_j == 0.0 {
            break;
        }
        let shape = model.instantiate(&p)?;
        let mut jac = DMatrix::zeros(2 * visible.len(), unknowns);
        let mut res = DVector::zeros(2 * visible.len());
        for (k, &j) in visible.iter().enumerate() {
            let x = Vector3::new(shape[(0, j)], shape[(1, j)], shape[(2, j)]);
            let rx = rot * x;
            // d(R exp([w]x) x)/dw at w = 0 is -R [x]x.
            let d_rot = -(rot * x.cross_matrix());
            for axis in 0..2 {
                let row = 2 * k + axis;
                res[row] = ann.landmarks[(axis, j)] - (scale * rx[axis] + t[axis]);
                jac[(row, 0)] = rx[axis];
                for c in 0..3 {
                    jac[(row, 1 + c)] = scale * d_rot[(axis, c)];
                }
                jac[(row, 4 + axis)] = 1.0;
                for (i, b) in model.bases().iter().enumerate() {
                    let bj = Vector3::new(b[(0, j)], b[(1, j)], b[(2, j)]);
                    jac[(row, 7 + i)] = scale * rot.row(axis).dot(&bj.transpose());
                }
            }
        }
        // Column 6 is an unused slot kept at zero; drop it from the system.
        let keep: Vec<usize> = (0..unknowns).filter(|&c| c != 6).collect();
        let jac = jac.select_columns(&keep);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;
        let floor = 1e-12 * jtj.diagonal().max().max(f64::MIN_POSITIVE);

        let mut improved = false;
        for _ in 0..8 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += mu * jtj[(i, i)].max(floor);
            }
            let Some(chol) = a.cholesky() else {
                mu *= 4.0;
                continue;
            };
            let delta = chol.solve(&jtr);
            let new_scale = scale + delta[0];
            if !(new_scale > 0.0) || !delta.iter().all(|v| v.is_finite()) {
                mu *= 4.0;
                continue;
            }
            let w = Vector3::new(delta[1], delta[2], delta[3]);
            let new_rot = rot * Rotation3::new(w).matrix();
            let new_t = [t[0] + delta[4], t[1] + delta[5]];
            let new_p = ShapeParams(DVector::from_fn(ns, |i, _| p.0[i] + delta[6 + i]));
            let cand = assemble(new_scale, &new_rot, &new_t);
            let j_new = objective_for_shape(&cand, &model.instantiate(&new_p)?, ann);
            if j_new < best_j {
                let gain = best_j - j_new;
                (scale, rot, t, p) = (new_scale, new_rot, new_t, new_p);
                best_m = cand;
                improved = gain > 1e-15 * best_j;
                best_j = j_new;
                mu = (mu / 3.0).max(1e-12);
                break;
            }
            mu = (mu * 4.0).min(1e12);
        }
        if !improved {
            break;
        }
    }
    Ok((best_m, p, best_j))
}

/// Alternates [`solve_m`] and [`solve_p`] from `p = 0` until both parameter
/// changes drop below `opts.tol`, then renormalizes M once.
pub fn fit(ann: &Annotation, model: &DeformableModel, opts: &FitOptions) -> Result<FitResult> {
    check_dims(ann, model)?;
    let visible = ann.visible_indices().len();
    if visible < opts.min_visible {
        return Err(Error::TooFewVisible {
            needed: opts.min_visible,
            found: visible,
        });
    }
    let mut p = ShapeParams::zeros(model.num_bases());
    let mut m: Option<ProjectionMatrix> = None;
    let mut trace = Vec::with_capacity(2 * opts.max_iters);
    let mut iterations = 0;
    let mut converged = false;
    let mut mu = 1e-3;

    while iterations < opts.max_iters {
        iterations += 1;
        let shape = model.instantiate(&p)?;
        let mut m_next = solve_m(ann, &shape)?;
        trace.push(objective_for_shape(&m_next, &shape, ann));
        let mut p_next = solve_p(ann, &m_next, model)?;
        let mut j_next = objective_for_shape(&m_next, &model.instantiate(&p_next)?, ann);
        trace.push(j_next);
        if opts.joint_step && j_next > 0.0 {
            let (jtj, jtr) = joint_system(ann, model, &m_next, &p_next)?;
            for _ in 0..LM_TRIES {
                let accepted = match damped_step(&jtj, &jtr, mu, &m_next, &p_next) {
                    Some((m_lm, p_lm)) => {
                        let j_lm = objective_for_shape(&m_lm, &model.instantiate(&p_lm)?, ann);
                        (j_lm < j_next).then_some((m_lm, p_lm, j_lm))
                    }
                    None => None,
                };
                if let Some((m_lm, p_lm, j_lm)) = accepted {
                    m_next = m_lm;
                    p_next = p_lm;
                    j_next = j_lm;
                    trace.push(j_next);
                    mu = (mu / 3.0).max(1e-12);
                    break;
                }
                mu = (mu * 4.0).min(1e12);
            }
        }

        let dm = m.map(|prev| (m_next.0 - prev.0).amax()).unwrap_or(f64::INFINITY);
        let dp = if p.is_empty() { 0.0 } else { (&p_next.0 - &p.0).amax() };
        m = Some(m_next);
        p = p_next;
        if dm < opts.tol && dp < opts.tol {
            converged = true;
            break;
        }
    }

    let mut m = renormalize(&m.expect("at least one iteration runs"))?;
    let mut residual = objective(&m, &p, ann, model)?;
    if opts.refine && residual > 0.0 {
        // Profile views with few visible landmarks leave the affine fit in the
        // wrong basin, so the refinement also restarts over a yaw grid.
        let pose = decompose(&m)?.pose;
        let mut starts = vec![(m, p.clone())];
        for k in 0..REFINE_YAW_STARTS {
            let yaw = -FRAC_PI_2 + PI * k as f64 / (REFINE_YAW_STARTS - 1) as f64;
            let start = compose(&PoseParams { yaw, ..pose })?;
            starts.push((start, ShapeParams::zeros(model.num_bases())));
        }
        for (m0, p0) in starts {
            let (m_ref, p_ref, j_ref) = refine_weak_perspective(ann, model, &m0, &p0)?;
            if j_ref < residual {
                m = m_ref;
                p = p_ref;
                residual = j_ref;
            }
        }
    }
    Ok(FitResult {
        m,
        p,
        residual,
        iterations,
        converged,
        objective_trace: trace,
    })
}
