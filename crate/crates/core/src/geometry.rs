//! Points, point sets and rigid transformations.
//!
//! A [`RigidTransform`] maps a view's set-centred frame into the common model
//! frame, `p -> R p + t`. Every constructed transform satisfies
//! `|R^T R - I|_F < 1e-9` and `|det R - 1| < 1e-9`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Tolerance inside which a rotation is accepted as-is.
pub const ROTATION_TOLERANCE: f64 = 1e-9;
/// Drift up to this tolerance is repaired by polar decomposition; beyond it
/// the matrix is rejected.
pub const REPAIR_TOLERANCE: f64 = 1e-6;

/// One view's points, in the view's own frame.
///
/// Point order is fixed for the lifetime of the set so that an index `l`
/// always names the same point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    id: usize,
    points: Vec<Point3>,
}

impl PointSet {
    pub fn new(id: usize, points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        if let Some(index) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinitePoint { index });
        }
        Ok(Self { id, points })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn with_id(mut self, id: usize) -> Self {
        self.id = id;
        self
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn centroid(&self) -> Point3 {
        self.points.iter().sum::<Point3>() / self.points.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates `rotation` against SO(3), repairing small drift.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidTranslation);
        }
        let rotation = validate_rotation(rotation)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Result<Self> {
        Self::new(Matrix3::identity(), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: the result maps `p` to `self(other(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let rotation = self.rotation * other.rotation;
        let translation = self.rotation * other.translation + self.translation;
        // Products of valid rotations drift by a few ulps at most; repair keeps
        // long chains inside tolerance.
        RigidTransform {
            rotation: validate_rotation(rotation).unwrap_or_else(|_| nearest_rotation(&rotation)),
            translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rotation = self.rotation.transpose();
        RigidTransform {
            translation: -(rotation * self.translation),
            rotation,
        }
    }

    /// `|R_a - R_b|_F + |t_a - t_b| / length_scale`.
    pub fn delta(&self, other: &RigidTransform, length_scale: f64) -> f64 {
        (self.rotation - other.rotation).norm()
            + (self.translation - other.translation).norm() / length_scale
    }
}

pub fn apply_transform(transform: &RigidTransform, p: &Point3) -> Point3 {
    transform.apply(p)
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn inverse(transform: &RigidTransform) -> RigidTransform {
    transform.inverse()
}

/// `(|R^T R - I|_F, det R)`.
pub fn rotation_defects(rotation: &Matrix3<f64>) -> (f64, f64) {
    let orthogonality = (rotation.transpose() * rotation - Matrix3::identity()).norm();
    (orthogonality, rotation.determinant())
}

fn validate_rotation(rotation: Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !rotation.iter().all(|c| c.is_finite()) {
        return Err(Error::InvalidRotation {
            orthogonality: f64::NAN,
            det: f64::NAN,
        });
    }
    let (orthogonality, det) = rotation_defects(&rotation);
    let det_err = (det - 1.0).abs();
    if orthogonality < ROTATION_TOLERANCE && det_err < ROTATION_TOLERANCE {
        Ok(rotation)
    } else if orthogonality < REPAIR_TOLERANCE && det_err < REPAIR_TOLERANCE {
        Ok(nearest_rotation(&rotation))
    } else {
        Err(Error::InvalidRotation { orthogonality, det })
    }
}

/// Orthogonal polar factor of `m`, sign-corrected into SO(3).
fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let mut u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    if (u * v_t).determinant() < 0.0 {
        let weakest = svd.singular_values.imin();
        u.column_mut(weakest).neg_mut();
    }
    u * v_t
}
