//! Pinhole camera model and ray utilities.
//!
//! World frame is right-handed with z up. Camera frame follows the usual
//! pinhole convention: x right, y down, z along the optical axis.
//! Extrinsics are stored world→camera, `x_c = R·x_w + T`.
//!
//! Pixel coordinates put integer values at pixel centers, so the pixel at
//! column `c`, row `r` is `Pixel { u: c, v: r }`.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera-frame depth below which a point counts as behind the camera.
pub const NEAR_EPSILON: f64 = 1e-9;

const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Pixel { u, v }
    }

    /// Pixel center of an integer grid location.
    pub fn at(col: usize, row: usize) -> Self {
        Pixel {
            u: col as f64,
            v: row as f64,
        }
    }

    fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    origin: Vector3<f64>,
    direction: Vector3<f64>,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Ray {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.direction
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Pinhole camera with intrinsics `K` and world→camera extrinsics `(R, T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct Camera {
    k: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    width: usize,
    height: usize,
    k_inv: Matrix3<f64>,
    r_inv: Matrix3<f64>,
}

impl Camera {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let (fx, fy, cx, cy) = (k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]);
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidCamera(
                "intrinsics must be upper triangular with K[2][2] = 1".into(),
            ));
        }
        let gram_err = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if gram_err > ORTHONORMAL_TOLERANCE || (det - 1.0).abs() > ORTHONORMAL_TOLERANCE {
            return Err(Error::InvalidCamera(format!(
                "rotation not orthonormal (|RᵀR−I| = {gram_err:e}, det = {det})"
            )));
        }
        if !t.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidCamera("translation must be finite".into()));
        }
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| Error::InvalidCamera("singular intrinsics".into()))?;
        Ok(Camera {
            k,
            r,
            t,
            width,
            height,
            k_inv,
            r_inv: r.transpose(),
        })
    }

    /// Camera placed at `position` (world), heading `yaw` (radians from +x,
    /// counter-clockwise) and tilted by `pitch` (negative looks down).
    pub fn from_pose(
        intrinsics: Intrinsics,
        position: Vector3<f64>,
        yaw: f64,
        pitch: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let r = look_rotation(yaw, pitch);
        let t = -(r * position);
        Camera::new(intrinsics.matrix(), r, t, width, height)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn k_inv(&self) -> &Matrix3<f64> {
        &self.k_inv
    }

    pub fn r_inv(&self) -> &Matrix3<f64> {
        &self.r_inv
    }

    /// Optical axis in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.r.row(2).transpose()
    }

    /// Un-normalized world direction `R⁻¹K⁻¹·[u, v, 1]ᵀ`; its camera-frame
    /// z component is 1, so `center + z·dir` is the point at depth `z`.
    pub fn ray_direction(&self, px: Pixel) -> Vector3<f64> {
        self.r_inv * (self.k_inv * px.homogeneous())
    }

    pub fn to_camera_frame(&self, point_w: &Vector3<f64>) -> Vector3<f64> {
        self.r * point_w + self.t
    }

    /// Builds a camera with the same pose and a resampled image size.
    pub fn with_resolution(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let mut k = self.k;
        k[(0, 0)] *= sx;
        k[(0, 1)] *= sx;
        k[(0, 2)] *= sx;
        k[(1, 1)] *= sy;
        k[(1, 2)] *= sy;
        Camera::new(k, self.r, self.t, width, height)
    }

    pub fn contains(&self, px: Pixel) -> bool {
        px.u >= -0.5
            && px.v >= -0.5
            && px.u < self.width as f64 - 0.5
            && px.v < self.height as f64 - 0.5
    }
}

/// Focal lengths and principal point, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square pixels, principal point at the image center, horizontal field
    /// of view `fov_h` in radians.
    pub fn from_fov(fov_h: f64, width: usize, height: usize) -> Self {
        let fx = (width as f64 / 2.0) / (fov_h / 2.0).tan();
        Intrinsics {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// World→camera rotation whose rows are the camera's right, down and forward
/// axes.
pub fn look_rotation(yaw: f64, pitch: f64) -> Matrix3<f64> {
    let forward = Vector3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin());
    let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
    let down = forward.cross(&right);
    Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
}

/// Projects a world point, returning the pixel and its optical-axis depth.
pub fn project(point_w: &Vector3<f64>, cam: &Camera) -> Result<(Pixel, f64)> {
    let pc = cam.to_camera_frame(point_w);
    let z_c = pc.z;
    if z_c <= NEAR_EPSILON {
        return Err(Error::PointBehindCamera { z_c });
    }
    let img = cam.k * pc;
    Ok((Pixel::new(img.x / z_c, img.y / z_c), z_c))
}

/// World point at optical-axis depth `z` along the ray through `px`:
/// `R⁻¹(K⁻¹·P̄·z − T)`.
pub fn backproject(px: Pixel, z: f64, cam: &Camera) -> Result<Vector3<f64>> {
    if !(z > 0.0) {
        return Err(Error::NonPositiveDepth(z));
    }
    Ok(cam.r_inv * (cam.k_inv * px.homogeneous() * z - cam.t))
}

pub fn camera_center_world(cam: &Camera) -> Vector3<f64> {
    cam.r_inv * (-cam.t)
}

pub fn pixel_ray(px: Pixel, cam: &Camera) -> Ray {
    Ray::new(camera_center_world(cam), cam.ray_direction(px))
}

/// Intersection with the horizontal plane `z = plane_z` at positive `t`.
pub fn intersect_ray_plane(ray: &Ray, plane_z: f64) -> Option<(Vector3<f64>, f64)> {
    let dz = ray.direction.z;
    if dz.abs() < 1e-15 {
        return None;
    }
    let t = (plane_z - ray.origin.z) / dz;
    if !(t > 0.0) || !t.is_finite() {
        return None;
    }
    let mut point = ray.at(t);
    point.z = plane_z;
    Some((point, t))
}

/// Box with dimensions `size = (length, width, height)` aligned with its own
/// frame, which is rotated by `yaw` about world z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Vector3<f64>,
    pub size: Vector3<f64>,
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxHit {
    pub point: Vector3<f64>,
    pub t: f64,
    pub normal: Vector3<f64>,
}

impl OrientedBox {
    fn local_rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), -self.yaw)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let local = self.local_rotation() * (p - self.center);
        let half = self.size / 2.0;
        (0..3).all(|i| local[i].abs() <= half[i])
    }

    /// Radius of the footprint's circumscribed circle.
    pub fn footprint_radius(&self) -> f64 {
        0.5 * self.size.x.hypot(self.size.y)
    }
}

/// Nearest positive-`t` hit of `ray` with `bx` by the slab method in the
/// box frame.
pub fn intersect_ray_box(ray: &Ray, bx: &OrientedBox) -> Option<BoxHit> {
    let rot = bx.local_rotation();
    let o = rot * (ray.origin - bx.center);
    let d = rot * ray.direction;
    let half = bx.size / 2.0;

    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut far_axis = 0;
    for axis in 0..3 {
        let (oa, da, ha) = (o[axis], d[axis], half[axis]);
        if da.abs() < 1e-15 {
            if oa.abs() > ha {
                return None;
            }
            continue;
        }
        let mut t0 = (-ha - oa) / da;
        let mut t1 = (ha - oa) / da;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = axis;
        }
        if t1 < t_far {
            t_far = t1;
            far_axis = axis;
        }
        if t_near > t_far {
            return None;
        }
    }
    if t_far <= 0.0 {
        return None;
    }
    let (t, axis, sign) = if t_near > 0.0 {
        (t_near, near_axis, -d[near_axis].signum())
    } else {
        (t_far, far_axis, d[far_axis].signum())
    };
    let mut local_normal = Vector3::zeros();
    local_normal[axis] = sign;
    Some(BoxHit {
        point: ray.at(t),
        t,
        normal: rot.inverse() * local_normal,
    })
}

/// Text form of a camera: row-major `K`, row-major `R`, `T`, image size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub k: [f64; 9],
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: usize,
    pub height: usize,
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = m[(i, j)];
        }
    }
    out
}

impl From<Camera> for CameraRecord {
    fn from(cam: Camera) -> Self {
        CameraRecord {
            k: row_major(&cam.k),
            r: row_major(&cam.r),
            t: [cam.t.x, cam.t.y, cam.t.z],
            width: cam.width,
            height: cam.height,
        }
    }
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;

    fn try_from(rec: CameraRecord) -> Result<Self> {
        Camera::new(
            Matrix3::from_row_slice(&rec.k),
            Matrix3::from_row_slice(&rec.r),
            Vector3::from(rec.t),
            rec.width,
            rec.height,
        )
    }
}
