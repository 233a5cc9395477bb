//! Pinhole cameras, ray generation, depth sampling and plane-induced
//! homographies.
//!
//! Conventions: world-to-camera extrinsics `X_c = R X_w + t`; the camera
//! looks down `+z` with `x` right and `y` down. Continuous pixel
//! coordinates put the centre of pixel `(u, v)` at `(u + 0.5, v + 0.5)`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    intrinsics: Intrinsics,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    width: usize,
    height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

impl Camera {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("camera image must be non-empty"));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(Error::invalid(format!("rotation is not orthonormal (|RtR - I| = {err:e})")));
        }
        Ok(Camera {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`, with `up` roughly opposite the
    /// image `y` axis.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::invalid("look_at: up is parallel to the view direction"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(intrinsics, rotation, translation, width, height)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Continuous pixel coordinates and camera-frame depth of a world point.
    /// `None` for points at or behind the camera plane.
    pub fn project(&self, world: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let p = self.to_camera(world);
        if p.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z))
    }

    /// Ray through the centre of pixel `(u, v)`.
    pub fn ray_for_pixel(&self, u: usize, v: usize, near: f64, far: f64) -> Result<Ray> {
        if u >= self.width {
            return Err(Error::IndexOutOfRange {
                what: "pixel column",
                index: u,
                len: self.width,
            });
        }
        if v >= self.height {
            return Err(Error::IndexOutOfRange {
                what: "pixel row",
                index: v,
                len: self.height,
            });
        }
        if !(0.0 < near && near < far) {
            return Err(Error::invalid(format!("need 0 < near < far, got {near}..{far}")));
        }
        let k = &self.intrinsics;
        let dir_cam = Vector3::new(
            (u as f64 + 0.5 - k.cx) / k.fx,
            (v as f64 + 0.5 - k.cy) / k.fy,
            1.0,
        );
        let direction = (self.rotation.transpose() * dir_cam).normalize();
        Ok(Ray {
            origin: self.center(),
            direction,
            near,
            far,
        })
    }
}

/// `n` depths in `[near, far]`, one per equal-width bin. Without
/// stratification they are the bin midpoints; otherwise uniform within
/// each bin.
pub fn sample_depths<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    n: usize,
    stratified: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid("need at least two samples per ray"));
    }
    if near >= far {
        return Err(Error::invalid(format!("near {near} >= far {far}")));
    }
    let step = (far - near) / n as f64;
    Ok((0..n)
        .map(|i| {
            let offset = if stratified { rng.gen::<f64>() } else { 0.5 };
            near + (i as f64 + offset) * step
        })
        .collect())
}

/// Homography taking reference-view pixels to `camera_k` pixels through
/// the fronto-parallel plane at depth `z` in the reference frame.
///
/// With the relative pose `X_k = R X_ref + t` and the plane `n^T X = z`,
/// `H = K_k (R + t n^T / z) K_ref^-1`.
pub fn homography(camera_k: &Camera, camera_ref: &Camera, z: f64) -> Result<Matrix3<f64>> {
    if !(z > 0.0) {
        return Err(Error::invalid(format!("plane depth must be positive, got {z}")));
    }
    let k_ref_inv = camera_ref
        .intrinsics
        .matrix()
        .try_inverse()
        .ok_or_else(|| Error::invalid("singular reference intrinsics"))?;
    let r = camera_k.rotation * camera_ref.rotation.transpose();
    let t = camera_k.translation - r * camera_ref.translation;
    let n = Vector3::new(0.0, 0.0, 1.0);
    Ok(camera_k.intrinsics.matrix() * (r + t * n.transpose() / z) * k_ref_inv)
}

/// Rotation-only homography of the plane at infinity.
pub fn infinite_homography(camera_k: &Camera, camera_ref: &Camera) -> Result<Matrix3<f64>> {
    let k_ref_inv = camera_ref
        .intrinsics
        .matrix()
        .try_inverse()
        .ok_or_else(|| Error::invalid("singular reference intrinsics"))?;
    let r = camera_k.rotation * camera_ref.rotation.transpose();
    Ok(camera_k.intrinsics.matrix() * r * k_ref_inv)
}

pub fn apply_homography(h: &Matrix3<f64>, u: f64, v: f64) -> (f64, f64) {
    let p = h * Vector3::new(u, v, 1.0);
    (p.x / p.z, p.y / p.z)
}
