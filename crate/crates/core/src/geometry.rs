//! Rigid transformations in two and three dimensions.
//!
//! A transformation is stored as rotation angles followed by a translation.
//! In 3D the rotation is composed from extrinsic rotations about x, then y,
//! then z: `R = Rz(phi_z) * Ry(phi_y) * Rx(phi_x)`. In 2D a single
//! counterclockwise angle is used.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotation angles (radians) and translation of a rigid transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub dim: usize,
    pub angles: Vec<f64>,
    pub translation: Vec<f64>,
}

/// Number of rotation angles for a given dimension.
pub fn angle_count(dim: usize) -> usize {
    if dim == 2 {
        1
    } else {
        3
    }
}

/// Total number of free parameters (angles + translation).
pub fn param_count(dim: usize) -> usize {
    angle_count(dim) + dim
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "dimension must be 2 or 3, got {dim}"
        )))
    }
}

impl TransformParams {
    pub fn new(dim: usize, angles: Vec<f64>, translation: Vec<f64>) -> Result<Self> {
        let params = TransformParams {
            dim,
            angles,
            translation,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn identity(dim: usize) -> Self {
        TransformParams {
            dim,
            angles: vec![0.0; angle_count(dim)],
            translation: vec![0.0; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.dim)?;
        if self.angles.len() != angle_count(self.dim) {
            return Err(Error::InvalidParameter(format!(
                "{}D transform needs {} angle(s), got {}",
                self.dim,
                angle_count(self.dim),
                self.angles.len()
            )));
        }
        if self.translation.len() != self.dim {
            return Err(Error::InvalidParameter(format!(
                "{}D transform needs a translation of length {}, got {}",
                self.dim,
                self.dim,
                self.translation.len()
            )));
        }
        if self
            .angles
            .iter()
            .chain(self.translation.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter(
                "transform parameters must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Flat parameter vector: angles then translation.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.angles.clone();
        v.extend_from_slice(&self.translation);
        v
    }

    pub fn from_vector(dim: usize, v: &[f64]) -> Result<Self> {
        check_dim(dim)?;
        if v.len() != param_count(dim) {
            return Err(Error::InvalidArgument(format!(
                "{}D transform has {} parameters, got {}",
                dim,
                param_count(dim),
                v.len()
            )));
        }
        let na = angle_count(dim);
        TransformParams::new(dim, v[..na].to_vec(), v[na..].to_vec())
    }

    /// Parameter names in vector order, as used in exported tables.
    pub fn param_names(dim: usize) -> &'static [&'static str] {
        if dim == 2 {
            &["phi", "t_x", "t_y"]
        } else {
            &["phi_x", "phi_y", "phi_z", "t_x", "t_y", "t_z"]
        }
    }
}

/// An ordered set of `n` points stored as the columns of a `dim x n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub points: DMatrix<f64>,
    pub labels: Option<Vec<i64>>,
}

impl PointSet {
    pub fn new(points: DMatrix<f64>, labels: Option<Vec<i64>>) -> Result<Self> {
        check_dim(points.nrows())?;
        if points.ncols() == 0 {
            return Err(Error::InvalidArgument("point set is empty".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "point coordinates must be finite".into(),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != points.ncols() {
                return Err(Error::InvalidArgument(format!(
                    "{} labels for {} points",
                    l.len(),
                    points.ncols()
                )));
            }
        }
        Ok(PointSet { points, labels })
    }

    /// Builds a point set from a list of coordinate rows, one per point.
    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument(format!(
                "every point must have {dim} coordinates"
            )));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        PointSet::new(DMatrix::from_column_slice(dim, rows.len(), &flat), None)
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    /// Coordinates of point `i`.
    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.points.as_slice()[i * d..(i + 1) * d]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.as_slice().chunks_exact(self.dim())
    }

    pub fn centroid(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim())
            .map(|k| self.points.row(k).sum() / n)
            .collect()
    }

    /// Replaces the labels with `0, 1, .., alphabet-1, 0, 1, ..`.
    pub fn with_cyclic_labels(mut self, alphabet: usize) -> Self {
        let alphabet = alphabet.max(1) as i64;
        self.labels = Some((0..self.len() as i64).map(|i| i % alphabet).collect());
        self
    }

    /// Keeps the columns listed in `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointSet {
        let points = self.points.select_columns(indices.iter());
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        PointSet { points, labels }
    }
}

fn axis_rotation(axis: usize, angle: f64) -> DMatrix<f64> {
    let (s, c) = angle.sin_cos();
    let mut m = DMatrix::identity(3, 3);
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    m[(a, a)] = c;
    m[(a, b)] = -s;
    m[(b, a)] = s;
    m[(b, b)] = c;
    m
}

fn axis_rotation_derivative(axis: usize, angle: f64) -> DMatrix<f64> {
    let (s, c) = angle.sin_cos();
    let mut m = DMatrix::zeros(3, 3);
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    m[(a, a)] = -s;
    m[(a, b)] = -c;
    m[(b, a)] = c;
    m[(b, b)] = -s;
    m
}

fn check_angles(angles: &[f64]) -> Result<()> {
    if angles.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidParameter("rotation angle is not finite".into()));
    }
    Ok(())
}

/// The rotation `R` of a transformation.
pub fn rotation_matrix(params: &TransformParams) -> Result<DMatrix<f64>> {
    check_dim(params.dim)?;
    check_angles(&params.angles)?;
    Ok(rotation_with_derivatives(params.dim, &params.angles, false).0)
}

/// Rotation matrix and, if requested, its partial derivative with respect to
/// each angle. Angles are not validated.
pub(crate) fn rotation_with_derivatives(
    dim: usize,
    angles: &[f64],
    derivatives: bool,
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    if dim == 2 {
        let (s, c) = angles[0].sin_cos();
        let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let d = if derivatives {
            vec![DMatrix::from_row_slice(2, 2, &[-s, -c, c, -s])]
        } else {
            Vec::new()
        };
        return (r, d);
    }
    let rx = axis_rotation(0, angles[0]);
    let ry = axis_rotation(1, angles[1]);
    let rz = axis_rotation(2, angles[2]);
    let zy = &rz * &ry;
    let r = &zy * &rx;
    let d = if derivatives {
        vec![
            &zy * axis_rotation_derivative(0, angles[0]),
            &rz * axis_rotation_derivative(1, angles[1]) * &rx,
            axis_rotation_derivative(2, angles[2]) * &ry * &rx,
        ]
    } else {
        Vec::new()
    };
    (r, d)
}

fn check_match(params: &TransformParams, pts: &PointSet) -> Result<()> {
    params.validate()?;
    if params.dim != pts.dim() {
        return Err(Error::InvalidArgument(format!(
            "{}D transform applied to {}D points",
            params.dim,
            pts.dim()
        )));
    }
    Ok(())
}

/// `R x + t` for every point.
pub fn apply_transform(params: &TransformParams, pts: &PointSet) -> Result<PointSet> {
    check_match(params, pts)?;
    let r = rotation_matrix(params)?;
    let t = DVector::from_column_slice(&params.translation);
    let mut out = &r * &pts.points;
    for mut col in out.column_iter_mut() {
        col += &t;
    }
    Ok(PointSet {
        points: out,
        labels: pts.labels.clone(),
    })
}

/// `R^T (y - t)` for every point; the inverse of [`apply_transform`].
pub fn pullback(params: &TransformParams, pts: &PointSet) -> Result<PointSet> {
    check_match(params, pts)?;
    let r = rotation_matrix(params)?;
    let t = DVector::from_column_slice(&params.translation);
    let mut shifted = pts.points.clone();
    for mut col in shifted.column_iter_mut() {
        col -= &t;
    }
    Ok(PointSet {
        points: r.transpose() * shifted,
        labels: pts.labels.clone(),
    })
}

fn wrap_tau(angle: f64) -> f64 {
    let w = angle.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Maps angles into `phi_x, phi_z in [0, 2pi)`, `phi_y in [-pi/2, pi/2]`
/// (2D: `phi in [0, 2pi)`) without changing the rotation.
pub fn canonicalize_params(params: &TransformParams) -> TransformParams {
    let mut out = params.clone();
    if params.dim == 2 {
        out.angles[0] = wrap_tau(params.angles[0]);
        return out;
    }
    let (mut ax, mut ay, mut az) = (params.angles[0], params.angles[1], params.angles[2]);
    if !(-FRAC_PI_2..=FRAC_PI_2).contains(&ay) {
        // wrap to (-pi, pi]
        ay = PI - (PI - ay).rem_euclid(TAU);
        if ay.abs() > FRAC_PI_2 {
            // Rz(c) Ry(b) Rx(a) == Rz(c + pi) Ry(pi - b) Rx(a + pi)
            ax += PI;
            az += PI;
            ay = PI - ay;
            if ay > PI {
                ay -= TAU;
            }
        }
        ay = ay.clamp(-FRAC_PI_2, FRAC_PI_2);
    }
    out.angles = vec![wrap_tau(ax), ay, wrap_tau(az)];
    out
}
