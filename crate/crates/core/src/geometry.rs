//! Pinhole cameras, ray generation and projection.
//!
//! Camera space is right-handed with `+x` right, `+y` down and `+z` forward.
//! Poses are camera-to-world rigid transforms. Pixel `(col, row)` has its
//! center at `(col + 0.5, row + 0.5)`.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use thiserror::Error;

/// Maximum tolerated deviation of `RᵀR` from the identity.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pose: Matrix4<f64>,
    fov_y_deg: f64,
    width: usize,
    height: usize,
    near: f64,
    far: f64,
}

impl Camera {
    pub fn new(
        pose: Matrix4<f64>,
        fov_y_deg: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self, GeometryError> {
        validate_pose(&pose)?;
        if !(fov_y_deg > 0.0 && fov_y_deg < 180.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "fov_y must lie in (0, 180) degrees, got {fov_y_deg}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if !(near >= 0.0 && near < far && far.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "need 0 <= near < far, got near={near} far={far}"
            )));
        }
        Ok(Self {
            pose,
            fov_y_deg,
            width,
            height,
            near,
            far,
        })
    }

    /// Builds a pose from a row-major 16-element array.
    pub fn from_row_major(
        pose: &[f64; 16],
        fov_y_deg: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self, GeometryError> {
        Self::new(
            Matrix4::from_row_slice(pose),
            fov_y_deg,
            width,
            height,
            near,
            far,
        )
    }

    /// Camera at `eye` looking at `target`. `up` is the world direction that
    /// should appear upward in the image (i.e. along camera `-y`).
    pub fn look_at(
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
        fov_y_deg: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| {
            GeometryError::InvalidPose("eye and target coincide".to_string())
        })?;
        let right = forward.cross(&up).try_normalize(1e-12).ok_or_else(|| {
            GeometryError::InvalidPose("up vector parallel to viewing direction".to_string())
        })?;
        let down = forward.cross(&right);
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        pose.fixed_view_mut::<3, 1>(0, 1).copy_from(&down);
        pose.fixed_view_mut::<3, 1>(0, 2).copy_from(&forward);
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye.coords);
        Self::new(pose, fov_y_deg, width, height, near, far)
    }

    pub fn pose(&self) -> &Matrix4<f64> {
        &self.pose
    }

    pub fn pose_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.pose[(r, c)];
            }
        }
        out
    }

    pub fn fov_y_deg(&self) -> f64 {
        self.fov_y_deg
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn near(&self) -> f64 {
        self.near
    }

    pub fn far(&self) -> f64 {
        self.far
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn position(&self) -> Point3<f64> {
        Point3::from(self.pose.fixed_view::<3, 1>(0, 3).into_owned())
    }

    /// Viewing direction in world space (camera `+z`).
    pub fn forward(&self) -> Vector3<f64> {
        self.pose.fixed_view::<3, 1>(0, 2).into_owned()
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y_deg.to_radians()).tan()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (0.5 * self.width as f64, 0.5 * self.height as f64)
    }

    /// Same pose and field of view at a different resolution.
    pub fn with_resolution(&self, width: usize, height: usize) -> Result<Self, GeometryError> {
        Self::new(self.pose, self.fov_y_deg, width, height, self.near, self.far)
    }

    /// Same camera with another depth range.
    pub fn with_depth_range(&self, near: f64, far: f64) -> Result<Self, GeometryError> {
        Self::new(self.pose, self.fov_y_deg, self.width, self.height, near, far)
    }

    /// Applies a rigid world transform to the pose.
    pub fn transformed(&self, transform: &Matrix4<f64>) -> Result<Self, GeometryError> {
        Self::new(
            transform * self.pose,
            self.fov_y_deg,
            self.width,
            self.height,
            self.near,
            self.far,
        )
    }

    pub fn world_to_camera(&self, point: &Point3<f64>) -> Point3<f64> {
        let rotation = self.rotation();
        Point3::from(rotation.transpose() * (point - self.position()))
    }

    pub fn camera_to_world(&self, point: &Point3<f64>) -> Point3<f64> {
        self.position() + self.rotation() * point.coords
    }

    /// Unnormalized camera-space direction through continuous pixel
    /// coordinates `(u, v)`, scaled to unit `z`.
    pub fn pixel_direction_camera(&self, u: f64, v: f64) -> Vector3<f64> {
        let f = self.focal();
        let (cx, cy) = self.principal_point();
        Vector3::new((u - cx) / f, (v - cy) / f, 1.0)
    }

    /// World point at continuous pixel `(u, v)` and camera-space depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        let cam = self.pixel_direction_camera(u, v) * depth;
        self.camera_to_world(&Point3::from(cam))
    }

    /// Ray through the center of pixel `(col, row)`.
    pub fn ray(&self, col: usize, row: usize) -> Ray {
        let dir_cam = self.pixel_direction_camera(col as f64 + 0.5, row as f64 + 0.5);
        let norm = dir_cam.norm();
        let direction = self.rotation() * (dir_cam / norm);
        // Unit-z direction has arclength `norm` per unit depth.
        Ray {
            origin: self.position(),
            direction: direction.normalize(),
            t_near: self.near * norm,
            t_far: self.far * norm,
        }
    }
}

fn validate_pose(pose: &Matrix4<f64>) -> Result<(), GeometryError> {
    if pose.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::InvalidPose("non-finite entry".to_string()));
    }
    let bottom = [pose[(3, 0)], pose[(3, 1)], pose[(3, 2)], pose[(3, 3)]];
    if bottom != [0.0, 0.0, 0.0, 1.0] {
        return Err(GeometryError::InvalidPose(format!(
            "last row must be [0, 0, 0, 1], got {bottom:?}"
        )));
    }
    let rotation = pose.fixed_view::<3, 3>(0, 0);
    let gram = rotation.transpose() * rotation - Matrix3::identity();
    let deviation = gram.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if deviation >= ORTHONORMAL_TOLERANCE {
        return Err(GeometryError::InvalidPose(format!(
            "rotation block not orthonormal (deviation {deviation:e})"
        )));
    }
    if rotation.determinant() <= 0.0 {
        return Err(GeometryError::InvalidPose(
            "rotation block is a reflection".to_string(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Point3<f64> {
        self.origin + self.direction * t
    }
}

/// Row-major grid of rays, one per pixel center.
#[derive(Debug, Clone)]
pub struct RayGrid {
    pub width: usize,
    pub height: usize,
    pub rays: Vec<Ray>,
}

impl RayGrid {
    pub fn get(&self, col: usize, row: usize) -> &Ray {
        &self.rays[row * self.width + col]
    }
}

pub fn camera_rays(camera: &Camera) -> RayGrid {
    let (width, height) = (camera.width(), camera.height());
    let rays = (0..height)
        .flat_map(|row| (0..width).map(move |col| (col, row)))
        .map(|(col, row)| camera.ray(col, row))
        .collect();
    RayGrid {
        width,
        height,
        rays,
    }
}

/// Continuous pixel coordinates plus camera-space depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    /// Points at or behind the image plane have no valid pixel coordinates.
    pub fn is_behind(&self) -> bool {
        !(self.depth > 0.0)
    }

    pub fn in_image(&self, camera: &Camera) -> bool {
        !self.is_behind()
            && self.u >= 0.0
            && self.u <= camera.width() as f64
            && self.v >= 0.0
            && self.v <= camera.height() as f64
    }
}

pub fn project(point: &Point3<f64>, camera: &Camera) -> Projection {
    let p = camera.world_to_camera(point);
    let depth = p.z;
    if !(depth > 0.0) {
        return Projection {
            u: f64::NAN,
            v: f64::NAN,
            depth,
        };
    }
    let f = camera.focal();
    let (cx, cy) = camera.principal_point();
    Projection {
        u: cx + f * p.x / depth,
        v: cy + f * p.y / depth,
        depth,
    }
}

/// Per-pixel camera-space depth of the nearest positive hit among the planes
/// `x = 0`, `y = 0` and `z = 0`, clamped to `[near, far]`. Pixels whose rays
/// hit no plane read `far`.
pub fn coordinate_plane_depth(camera: &Camera) -> Vec<f64> {
    let grid = camera_rays(camera);
    let forward = camera.forward();
    grid.rays
        .iter()
        .map(|ray| {
            let hit = (0..3)
                .filter_map(|axis| {
                    let d = ray.direction[axis];
                    if d == 0.0 {
                        return None;
                    }
                    let t = -ray.origin[axis] / d;
                    (t > 0.0).then_some(t)
                })
                .fold(f64::INFINITY, f64::min);
            if hit.is_finite() {
                let depth = hit * ray.direction.dot(&forward);
                depth.clamp(camera.near(), camera.far())
            } else {
                camera.far()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn identity_camera(fov: f64, w: usize, h: usize) -> Camera {
        Camera::new(Matrix4::identity(), fov, w, h, 0.5, 10.0).unwrap()
    }

    #[test]
    fn center_pixel_looks_down_optical_axis() {
        let cam = identity_camera(60.0, 3, 3);
        let ray = cam.ray(1, 1);
        assert_abs_diff_eq!(ray.direction, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn ninety_degree_two_by_two_directions() {
        let cam = identity_camera(90.0, 2, 2);
        let grid = camera_rays(&cam);
        let expected = |x: f64, y: f64| Vector3::new(x, y, 1.0).normalize();
        assert_abs_diff_eq!(grid.get(0, 0).direction, expected(-0.5, -0.5), epsilon = 1e-12);
        assert_abs_diff_eq!(grid.get(1, 0).direction, expected(0.5, -0.5), epsilon = 1e-12);
        assert_abs_diff_eq!(grid.get(0, 1).direction, expected(-0.5, 0.5), epsilon = 1e-12);
        assert_abs_diff_eq!(grid.get(1, 1).direction, expected(0.5, 0.5), epsilon = 1e-12);
    }

    #[test]
    fn ray_bounds_are_constant_depth_planes() {
        let cam = identity_camera(90.0, 8, 8);
        for ray in camera_rays(&cam).rays {
            assert!((ray.direction.norm() - 1.0).abs() < 1e-9);
            assert_abs_diff_eq!(ray.at(ray.t_near).z, 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(ray.at(ray.t_far).z, 10.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_closed_forms() {
        let cam = identity_camera(90.0, 128, 128);
        let p = project(&Point3::new(0.0, 0.0, 3.0), &cam);
        assert_eq!((p.u, p.v, p.depth), (64.0, 64.0, 3.0));
        let p = project(&Point3::new(1.0, 0.0, 1.0), &cam);
        assert_abs_diff_eq!(p.u, 128.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.v, 64.0, epsilon = 1e-12);
        assert_eq!(p.depth, 1.0);
        assert!(project(&Point3::new(0.0, 0.0, -1.0), &cam).is_behind());
        assert!(project(&Point3::new(0.0, 0.0, 0.0), &cam).is_behind());
    }

    #[test]
    fn rejects_bad_cameras() {
        let mut skew = Matrix4::identity();
        skew[(0, 1)] = 0.1;
        assert!(matches!(
            Camera::new(skew, 60.0, 4, 4, 0.1, 1.0),
            Err(GeometryError::InvalidPose(_))
        ));
        let mut mirror = Matrix4::identity();
        mirror[(0, 0)] = -1.0;
        assert!(Camera::new(mirror, 60.0, 4, 4, 0.1, 1.0).is_err());
        assert!(Camera::new(Matrix4::identity(), 180.0, 4, 4, 0.1, 1.0).is_err());
        assert!(Camera::new(Matrix4::identity(), 60.0, 0, 4, 0.1, 1.0).is_err());
        assert!(Camera::new(Matrix4::identity(), 60.0, 4, 4, 1.0, 1.0).is_err());
        assert!(Camera::new(Matrix4::identity(), 60.0, 4, 4, -0.1, 1.0).is_err());
    }

    #[test]
    fn look_at_matches_identity_convention() {
        let cam = Camera::look_at(
            Point3::origin(),
            Point3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, -1.0, 0.0),
            60.0,
            4,
            4,
            0.1,
            1.0,
        )
        .unwrap();
        assert_abs_diff_eq!(*cam.pose(), Matrix4::identity(), epsilon = 1e-15);
    }

    #[test]
    fn plane_depth_closed_forms() {
        let pose = Matrix4::new_translation(&Vector3::new(0.0, 0.0, -2.0));
        let cam = Camera::new(pose, 60.0, 3, 3, 0.1, 10.0).unwrap();
        let depth = coordinate_plane_depth(&cam);
        assert_abs_diff_eq!(depth[4], 2.0, epsilon = 1e-12);

        let cam = Camera::look_at(
            Point3::new(1.0, 1.0, 1.0),
            Point3::origin(),
            Vector3::new(0.0, 0.0, 1.0),
            60.0,
            3,
            3,
            0.1,
            10.0,
        )
        .unwrap();
        let depth = coordinate_plane_depth(&cam);
        assert_abs_diff_eq!(depth[4], 3.0_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn plane_depth_sentinel_without_hits() {
        // Camera at (1, 1, 1) looking along +z moves away from every plane.
        let pose = Matrix4::new_translation(&Vector3::new(1.0, 1.0, 1.0));
        let cam = Camera::new(pose, 1.0, 1, 1, 0.1, 7.0).unwrap();
        assert_eq!(coordinate_plane_depth(&cam), vec![7.0]);
    }

    #[test]
    fn plane_depth_clamps_to_near() {
        let pose = Matrix4::new_translation(&Vector3::new(0.0, 0.0, -0.05));
        let cam = Camera::new(pose, 1.0, 1, 1, 0.1, 7.0).unwrap();
        assert_eq!(coordinate_plane_depth(&cam), vec![0.1]);
    }
}
