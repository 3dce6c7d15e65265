//! Verification substrate: analytic scenes, the synthetic encoder,
//! augmentations, metrics, file formats and the oracle cross-checks.

pub mod augment;
pub mod encode;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod scene;

use nalgebra::{Point3, Vector3};

use crate::geometry::{Camera, GeometryError};
use crate::image::Image;

/// A posed RGB image with values in `[−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub camera: Camera,
}

/// Cameras on a horizontal circle of `radius` around `center`, starting on
/// the `−z` side and sweeping through `angles_deg` (azimuth, degrees). World
/// `−y` is up.
pub fn orbit(
    center: Point3<f64>,
    radius: f64,
    elevation_deg: f64,
    angles_deg: &[f64],
    fov_y_deg: f64,
    resolution: usize,
    near: f64,
    far: f64,
) -> Result<Vec<Camera>, GeometryError> {
    let elev = elevation_deg.to_radians();
    angles_deg
        .iter()
        .map(|a| {
            let az = a.to_radians();
            let offset = Vector3::new(az.sin() * elev.cos(), -elev.sin(), -az.cos() * elev.cos()) * radius;
            Camera::look_at(
                center + offset,
                center,
                Vector3::new(0.0, -1.0, 0.0),
                fov_y_deg,
                resolution,
                resolution,
                near,
                far,
            )
        })
        .collect()
}

/// Angle in degrees between the viewing directions of two cameras.
pub fn angular_distance_deg(a: &Camera, b: &Camera) -> f64 {
    a.forward().dot(&b.forward()).clamp(-1.0, 1.0).acos().to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orbit_cameras_look_at_center() {
        let cams = orbit(Point3::origin(), 2.0, 10.0, &[0.0, 45.0, 90.0], 40.0, 8, 1.0, 3.0).unwrap();
        for cam in &cams {
            assert!((cam.position().coords.norm() - 2.0).abs() < 1e-12);
            let to_center = (-cam.position().coords).normalize();
            assert!((cam.forward() - to_center).norm() < 1e-12);
        }
        assert!((angular_distance_deg(&cams[0], &cams[1]) - 44.29).abs() < 0.5);
    }
}
