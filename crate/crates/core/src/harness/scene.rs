//! Procedural scenes with analytic density and feature fields, and their
//! brute-force ground-truth renders.

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{DecodedPoint, FeatureField};
use crate::geometry::Camera;
use crate::image::Image;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("scene needs at least one primitive")]
    Empty,
    #[error("scene needs at least 3 channels, got {0}")]
    TooFewChannels(usize),
    #[error("primitive {index}: {reason}")]
    Primitive { index: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Shape {
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        match self {
            Shape::Box { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
            Shape::Sphere { center, radius } => {
                let d2: f64 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum();
                d2 <= radius * radius
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub density: f64,
    pub color: [f64; 3],
    /// Auxiliary feature channels after the color; missing entries are zero.
    #[serde(default)]
    pub extra: Vec<f64>,
}

/// Union of constant-density primitives over an empty background.
///
/// Where primitives overlap, densities add and features are density-weighted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyScene {
    channels: usize,
    primitives: Vec<Primitive>,
}

impl ToyScene {
    pub fn new(channels: usize, primitives: Vec<Primitive>) -> Result<Self, SceneError> {
        let scene = Self {
            channels,
            primitives,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.channels < 3 {
            return Err(SceneError::TooFewChannels(self.channels));
        }
        if self.primitives.is_empty() {
            return Err(SceneError::Empty);
        }
        for (index, p) in self.primitives.iter().enumerate() {
            let fail = |reason: &str| SceneError::Primitive {
                index,
                reason: reason.to_string(),
            };
            if !(p.density >= 0.0 && p.density.is_finite()) {
                return Err(fail("density must be finite and nonnegative"));
            }
            if p.color.iter().any(|c| !(-1.0..=1.0).contains(c)) {
                return Err(fail("color outside [-1, 1]"));
            }
            if p.extra.len() > self.channels - 3 || p.extra.iter().any(|v| !v.is_finite()) {
                return Err(fail("extra channels exceed the scene channel count"));
            }
            match &p.shape {
                Shape::Box { min, max } if (0..3).any(|i| !(min[i] <= max[i])) => {
                    return Err(fail("box min exceeds max"))
                }
                Shape::Sphere { radius, .. } if !(*radius > 0.0) => return Err(fail("sphere radius must be positive")),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    fn feature_of(&self, p: &Primitive) -> impl Iterator<Item = f64> + '_ {
        let extra = p.extra.clone();
        p.color
            .into_iter()
            .chain(extra)
            .chain(std::iter::repeat(0.0))
            .take(self.channels)
    }

    /// Reference default scene: a colored sphere resting in front of a
    /// translucent backdrop slab, centered two units in front of the origin.
    pub fn demo(channels: usize) -> Self {
        let prim = |shape, density, color| Primitive {
            shape,
            density,
            color,
            extra: vec![],
        };
        Self::new(
            channels,
            vec![
                prim(
                    Shape::Sphere {
                        center: [0.0, 0.05, 0.0],
                        radius: 0.35,
                    },
                    6.0,
                    [0.8, 0.2, -0.4],
                ),
                prim(
                    Shape::Box {
                        min: [-0.25, -0.45, -0.2],
                        max: [0.3, -0.2, 0.25],
                    },
                    4.0,
                    [-0.3, 0.6, 0.5],
                ),
                prim(
                    Shape::Box {
                        min: [-0.9, -0.9, 0.45],
                        max: [0.9, 0.9, 0.6],
                    },
                    2.0,
                    [0.1, -0.5, 0.7],
                ),
            ],
        )
        .expect("demo scene is valid")
    }
}

/// Density and density-weighted feature at `point`.
pub fn scene_field(scene: &ToyScene, point: &Point3<f64>) -> DecodedPoint {
    let mut tau = 0.0;
    let mut feature = vec![0.0; scene.channels];
    for prim in scene.primitives.iter().filter(|p| p.shape.contains(point)) {
        tau += prim.density;
        for (acc, v) in feature.iter_mut().zip(scene.feature_of(prim)) {
            *acc += prim.density * v;
        }
    }
    if tau > 0.0 {
        feature.iter_mut().for_each(|v| *v /= tau);
    } else {
        feature.iter_mut().for_each(|v| *v = 0.0);
    }
    DecodedPoint { tau, feature }
}

impl FeatureField for ToyScene {
    fn channels(&self) -> usize {
        self.channels
    }

    fn query(&self, point: &Point3<f64>) -> DecodedPoint {
        scene_field(self, point)
    }
}

/// RGB render in `[−1, 1]` (premultiplied against a zero background) and
/// accumulated opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image: Image,
    pub alpha: Image,
}

/// Midpoint-rule quadrature with `n_fine` equal bins between the camera's
/// near and far depth planes, using full bin widths and exponentials of the
/// cumulative optical depth.
pub fn render_ground_truth(scene: &ToyScene, camera: &Camera, n_fine: usize) -> GroundTruth {
    assert!(n_fine >= 1, "n_fine must be at least 1");
    let (w, h) = (camera.width(), camera.height());
    let pixels: Vec<([f64; 3], f64)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let ray = camera.ray(i % w, i / w);
            let bin = (ray.t_far - ray.t_near) / n_fine as f64;
            let mut optical_depth = 0.0_f64;
            let mut rgb = [0.0; 3];
            for k in 0..n_fine {
                let t = ray.t_near + (k as f64 + 0.5) * bin;
                let sample = scene_field(scene, &ray.at(t));
                if sample.tau == 0.0 {
                    continue;
                }
                let enter = (-optical_depth).exp();
                optical_depth += sample.tau * bin;
                let weight = enter - (-optical_depth).exp();
                for (acc, v) in rgb.iter_mut().zip(&sample.feature) {
                    *acc += weight * v;
                }
            }
            (rgb, 1.0 - (-optical_depth).exp())
        })
        .collect();
    let image = Image::from_fn(3, h, w, |c, y, x| pixels[y * w + x].0[c]);
    let alpha = Image::from_fn(1, h, w, |_, y, x| pixels[y * w + x].1);
    GroundTruth { image, alpha }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Vector3};

    fn single(shape: Shape, density: f64, color: [f64; 3]) -> Primitive {
        Primitive {
            shape,
            density,
            color,
            extra: vec![],
        }
    }

    #[test]
    fn field_inside_outside_and_overlap() {
        let red = single(Shape::Box { min: [0.0; 3], max: [1.0; 3] }, 1.0, [1.0, 0.0, 0.0]);
        let blue = single(Shape::Box { min: [0.5; 3], max: [1.5; 3] }, 3.0, [0.0, 0.0, 1.0]);
        let scene = ToyScene::new(4, vec![red, blue]).unwrap();
        let inside = scene_field(&scene, &Point3::new(0.2, 0.2, 0.2));
        assert_eq!(inside, DecodedPoint { tau: 1.0, feature: vec![1.0, 0.0, 0.0, 0.0] });
        let outside = scene_field(&scene, &Point3::new(-1.0, 0.0, 0.0));
        assert_eq!(outside, DecodedPoint { tau: 0.0, feature: vec![0.0; 4] });
        let both = scene_field(&scene, &Point3::new(0.75, 0.75, 0.75));
        assert_eq!(both.tau, 4.0);
        assert_eq!(both.feature, vec![0.25, 0.0, 0.75, 0.0]);
    }

    #[test]
    fn validation() {
        let ok = single(Shape::Sphere { center: [0.0; 3], radius: 1.0 }, 1.0, [0.0; 3]);
        assert_eq!(ToyScene::new(3, vec![]), Err(SceneError::Empty));
        assert!(ToyScene::new(2, vec![ok.clone()]).is_err());
        let mut neg = ok.clone();
        neg.density = -1.0;
        assert!(ToyScene::new(3, vec![neg]).is_err());
        let mut bright = ok.clone();
        bright.color = [1.5, 0.0, 0.0];
        assert!(ToyScene::new(3, vec![bright]).is_err());
        let mut extra = ok;
        extra.extra = vec![1.0];
        assert!(ToyScene::new(3, vec![extra.clone()]).is_err());
        assert!(ToyScene::new(4, vec![extra]).is_ok());
    }

    #[test]
    fn scene_json_round_trip() {
        let scene = ToyScene::demo(16);
        let text = serde_json::to_string(&scene).unwrap();
        assert_eq!(serde_json::from_str::<ToyScene>(&text).unwrap(), scene);
        assert!(serde_json::from_str::<ToyScene>(r#"{"channels":3,"primitives":[],"bogus":1}"#).is_err());
    }

    #[test]
    fn empty_frustum_renders_black() {
        let scene = ToyScene::demo(16);
        let pose = Matrix4::new_translation(&Vector3::new(0.0, 0.0, 5.0));
        let cam = Camera::new(pose, 40.0, 8, 8, 0.5, 4.0).unwrap();
        let gt = render_ground_truth(&scene, &cam, 512);
        assert!(gt.image.data().iter().all(|&v| v == 0.0));
        assert!(gt.alpha.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn opaque_slab_matches_analytic_alpha() {
        let slab = single(Shape::Box { min: [-5.0, -5.0, 1.5], max: [5.0, 5.0, 2.0] }, 3.0, [0.5, 0.5, 0.5]);
        let scene = ToyScene::new(3, vec![slab]).unwrap();
        let cam = Camera::new(Matrix4::identity(), 30.0, 6, 6, 1.0, 3.0).unwrap();
        let gt = render_ground_truth(&scene, &cam, 4096);
        for y in 0..6 {
            for x in 0..6 {
                let stretch = cam.pixel_direction_camera(x as f64 + 0.5, y as f64 + 0.5).norm();
                let expected = 1.0 - (-3.0 * 0.5 * stretch).exp();
                assert!((gt.alpha.get(0, y, x) - expected).abs() < 1e-4);
                assert!((gt.image.get(1, y, x) - 0.5 * expected).abs() < 1e-4);
            }
        }
    }
}
