//! Cameras, rays and the small amount of linear algebra shared by every stage.
//!
//! Conventions: right-handed world, cameras look down −z in camera space,
//! OpenGL clip space with NDC z ∈ [−1, 1]. Matrices are stored row-major when
//! serialized (`[f64; 16]`), which matches nalgebra's `from_row_slice`.

use nalgebra::{Matrix4, Vector3, Vector4};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat4 = Matrix4<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("singular {which} matrix")]
    SingularMatrix { which: &'static str },
    #[error("invalid image size {width}x{height}")]
    InvalidSize { width: u32, height: u32 },
}

/// A pinhole (or orthographic) camera described by OpenGL-style view and
/// projection matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    view: Mat4,
    proj: Mat4,
    width: u32,
    height: u32,
    view_inv: Mat4,
    proj_inv: Mat4,
    view_proj: Mat4,
    view_proj_inv: Mat4,
}

/// Reciprocal condition estimate below which a matrix is treated as singular.
const MIN_RCOND: f64 = 1e-12;

fn checked_inverse(m: &Mat4, which: &'static str) -> Result<Mat4, GeometryError> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::SingularMatrix { which });
    }
    let inv = m
        .try_inverse()
        .ok_or(GeometryError::SingularMatrix { which })?;
    // 1-norm condition estimate; cheap and adequate for 4x4 matrices.
    let norm1 = |a: &Mat4| {
        (0..4)
            .map(|c| (0..4).map(|r| a[(r, c)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let rcond = 1.0 / (norm1(m) * norm1(&inv));
    if !rcond.is_finite() || rcond < MIN_RCOND {
        return Err(GeometryError::SingularMatrix { which });
    }
    Ok(inv)
}

impl Camera {
    pub fn new(view: Mat4, proj: Mat4, width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidSize { width, height });
        }
        let view_inv = checked_inverse(&view, "view")?;
        let proj_inv = checked_inverse(&proj, "projection")?;
        let view_proj = proj * view;
        let view_proj_inv = view_inv * proj_inv;
        Ok(Self {
            view,
            proj,
            width,
            height,
            view_inv,
            proj_inv,
            view_proj,
            view_proj_inv,
        })
    }

    /// Builds a camera from row-major 16-element arrays.
    pub fn from_row_major(
        view: &[f64; 16],
        proj: &[f64; 16],
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        Self::new(
            Mat4::from_row_slice(view),
            Mat4::from_row_slice(proj),
            width,
            height,
        )
    }

    /// Perspective camera at `eye` aimed at `target`.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fovy_deg: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let view = look_at_matrix(eye, target, up);
        let aspect = width as f64 / height.max(1) as f64;
        let proj = perspective_matrix(fovy_deg.to_radians(), aspect, 0.05, 20.0);
        Self::new(view, proj, width, height)
    }

    pub fn view(&self) -> &Mat4 {
        &self.view
    }

    pub fn proj(&self) -> &Mat4 {
        &self.proj
    }

    pub fn view_proj(&self) -> &Mat4 {
        &self.view_proj
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn view_row_major(&self) -> [f64; 16] {
        row_major(&self.view)
    }

    pub fn proj_row_major(&self) -> [f64; 16] {
        row_major(&self.proj)
    }

    /// Same pose and projection at a different resolution.
    pub fn with_size(&self, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(self.view, self.proj, width, height)
    }

    /// True when the projection has no perspective divide (orthographic/affine).
    pub fn is_affine(&self) -> bool {
        let r = self.proj.row(3);
        r[0] == 0.0 && r[1] == 0.0 && r[2] == 0.0
    }

    /// World-space camera center `V⁻¹·[0,0,0,1]`.
    pub fn center(&self) -> Vec3 {
        let c = self.view_inv * Vector4::new(0.0, 0.0, 0.0, 1.0);
        c.xyz() / c.w
    }

    /// World-space viewing direction (camera −z axis).
    pub fn forward(&self) -> Vec3 {
        (self.view_inv * Vector4::new(0.0, 0.0, -1.0, 0.0))
            .xyz()
            .normalize()
    }

    /// NDC location of the center of pixel (px, py); row 0 is the top row.
    pub fn pixel_to_ndc(&self, px: f64, py: f64) -> PixelCoord {
        PixelCoord::new(
            (px + 0.5) / self.width as f64 * 2.0 - 1.0,
            1.0 - (py + 0.5) / self.height as f64 * 2.0,
        )
    }

    /// Continuous pixel coordinates (pixel centers at +0.5) of an NDC point.
    pub fn ndc_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x + 1.0) * 0.5 * self.width as f64,
            (1.0 - y) * 0.5 * self.height as f64,
        )
    }

    /// Projects a world point to NDC; `None` when it lies on or behind the
    /// camera plane.
    pub fn project(&self, p: &Vec3) -> Option<Vector3<f64>> {
        let c = self.view_proj * Vector4::new(p.x, p.y, p.z, 1.0);
        if c.w <= 1e-12 {
            return None;
        }
        Some(c.xyz() / c.w)
    }

    /// Distance along the viewing axis (positive in front of the camera).
    pub fn view_depth(&self, p: &Vec3) -> f64 {
        -(self.view * Vector4::new(p.x, p.y, p.z, 1.0)).z
    }

    fn unproject(&self, u: &PixelCoord, ndc_z: f64) -> Vec3 {
        let h = self.view_proj_inv * Vector4::new(u.x, u.y, ndc_z, 1.0);
        h.xyz() / h.w
    }

    /// Primary ray through a projection-plane location.
    ///
    /// Perspective cameras emit from the camera center towards the unprojected
    /// point on the NDC z = 0 plane. Affine projections emit parallel rays along
    /// the camera axis from the camera-space z = 0 plane.
    pub fn ray_from_pixel(&self, u: &PixelCoord) -> Ray {
        if self.is_affine() {
            let a = self.proj_inv * Vector4::new(u.x, u.y, 0.0, 1.0);
            let b = self.proj_inv * Vector4::new(0.0, 0.0, 1.0, 0.0);
            let s = if b.z.abs() > 0.0 { -a.z / b.z } else { 0.0 };
            let q = a + b * s;
            let origin = (self.view_inv * Vector4::new(q.x / q.w, q.y / q.w, 0.0, 1.0)).xyz();
            return Ray::new(origin, self.forward());
        }
        let origin = self.center();
        let target = self.unproject(u, 0.0);
        Ray::new(origin, target - origin)
    }

    /// Ray through the center of integer pixel (px, py).
    pub fn pixel_ray(&self, px: u32, py: u32) -> Ray {
        self.ray_from_pixel(&self.pixel_to_ndc(px as f64, py as f64))
    }
}

fn row_major(m: &Mat4) -> [f64; 16] {
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            out[r * 4 + c] = m[(r, c)];
        }
    }
    out
}

/// Right-handed look-at view matrix (world → camera).
pub fn look_at_matrix(eye: Vec3, target: Vec3, up: Vec3) -> Mat4 {
    let f = (target - eye).normalize();
    let mut up = up.normalize();
    if f.cross(&up).norm() < 1e-6 {
        up = if f.x.abs() < 0.9 { Vec3::x() } else { Vec3::z() };
    }
    let s = f.cross(&up).normalize();
    let u = s.cross(&f);
    Mat4::new(
        s.x,
        s.y,
        s.z,
        -s.dot(&eye),
        u.x,
        u.y,
        u.z,
        -u.dot(&eye),
        -f.x,
        -f.y,
        -f.z,
        f.dot(&eye),
        0.0,
        0.0,
        0.0,
        1.0,
    )
}

/// OpenGL perspective projection.
pub fn perspective_matrix(fovy: f64, aspect: f64, near: f64, far: f64) -> Mat4 {
    let f = 1.0 / (fovy * 0.5).tan();
    let nf = 1.0 / (near - far);
    Mat4::new(
        f / aspect,
        0.0,
        0.0,
        0.0,
        0.0,
        f,
        0.0,
        0.0,
        0.0,
        0.0,
        (far + near) * nf,
        2.0 * far * near * nf,
        0.0,
        0.0,
        -1.0,
        0.0,
    )
}

/// Location on the projection plane, in NDC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
    pub pixel: Option<(u32, u32)>,
}

impl PixelCoord {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, pixel: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    /// Normalizes `dir`.
    pub fn new(origin: Vec3, dir: Vec3) -> Self {
        Self {
            origin,
            dir: dir.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Entry/exit parameters of a ray against a centered sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub near: f64,
    pub far: f64,
}

/// Intersects `ray` with the origin-centered sphere of `radius`; `None` on a
/// miss. Parameters may be negative when the origin is inside or past the
/// sphere.
pub fn intersect_unit_sphere(ray: &Ray, radius: f64) -> Option<Interval> {
    debug_assert!(radius > 0.0);
    let b = ray.origin.dot(&ray.dir);
    let c = ray.origin.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some(Interval {
        near: -b - s,
        far: -b + s,
    })
}

/// Point on a ray closest to the world origin.
pub fn closest_approach(ray: &Ray) -> f64 {
    -ray.origin.dot(&ray.dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_camera_looks_down_negative_z() {
        let cam = Camera::new(Mat4::identity(), Mat4::identity(), 4, 4).unwrap();
        let ray = cam.ray_from_pixel(&PixelCoord::new(0.0, 0.0));
        assert_relative_eq!(ray.origin, Vec3::zeros(), epsilon = 1e-12);
        assert_relative_eq!(ray.dir, Vec3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
    }

    #[test]
    fn centered_camera_on_axis() {
        let cam = Camera::look_at(
            Vec3::new(0.0, 0.0, 3.0),
            Vec3::zeros(),
            Vec3::y(),
            40.0,
            64,
            64,
        )
        .unwrap();
        let ray = cam.ray_from_pixel(&PixelCoord::new(0.0, 0.0));
        assert_relative_eq!(ray.origin, Vec3::new(0.0, 0.0, 3.0), epsilon = 1e-12);
        assert_relative_eq!(ray.dir, Vec3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
    }

    #[test]
    fn sphere_intersections() {
        let r = Ray::new(Vec3::new(0.0, 0.0, 2.0), Vec3::new(0.0, 0.0, -1.0));
        let i = intersect_unit_sphere(&r, 1.0).unwrap();
        assert_relative_eq!(i.near, 1.0);
        assert_relative_eq!(i.far, 3.0);

        let miss = Ray::new(Vec3::new(0.0, 2.0, 0.0), Vec3::new(0.0, 0.0, -1.0));
        assert!(intersect_unit_sphere(&miss, 1.0).is_none());

        let tangent = Ray::new(Vec3::new(1.0, 0.0, 2.0), Vec3::new(0.0, 0.0, -1.0));
        let i = intersect_unit_sphere(&tangent, 1.0).unwrap();
        assert_eq!(i.near, 2.0);
        assert_eq!(i.far, 2.0);
    }

    #[test]
    fn singular_view_is_rejected() {
        let mut v = Mat4::identity();
        v[(2, 2)] = 0.0;
        assert_eq!(
            Camera::new(v, Mat4::identity(), 2, 2),
            Err(GeometryError::SingularMatrix { which: "view" })
        );
    }

    #[test]
    fn row_major_round_trip() {
        let cam = Camera::look_at(
            Vec3::new(0.3, 1.0, 2.5),
            Vec3::zeros(),
            Vec3::y(),
            35.0,
            32,
            24,
        )
        .unwrap();
        let back =
            Camera::from_row_major(&cam.view_row_major(), &cam.proj_row_major(), 32, 24).unwrap();
        assert_eq!(back.view(), cam.view());
        assert_eq!(back.proj(), cam.proj());
    }
}
