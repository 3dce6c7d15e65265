//! Denoiser interface and closed-form reference denoisers.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::geometry::Camera;
use crate::harness::scene::{render_ground_truth, ToyScene};
use crate::image::{Image, ShapeMismatch};
use crate::renderer::FeatureImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenoiseError {
    #[error("conditional denoiser called without a feature image")]
    MissingConditioning,
    #[error("denoiser needs a target camera")]
    MissingCamera,
    #[error("feature image has {0} channels, need at least 3")]
    TooFewChannels(usize),
    #[error(transparent)]
    Shape(#[from] ShapeMismatch),
    #[error("{0}")]
    Other(String),
}

/// Conditioning handed to a single denoiser evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CondInput<'a> {
    pub feature: Option<&'a FeatureImage>,
    pub camera: Option<&'a Camera>,
}

impl<'a> CondInput<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn feature(feature: &'a FeatureImage) -> Self {
        Self {
            feature: Some(feature),
            camera: Some(&feature.target_camera),
        }
    }

    pub fn camera(camera: &'a Camera) -> Self {
        Self {
            feature: None,
            camera: Some(camera),
        }
    }
}

/// Estimates the clean image from `y` observed at noise level `sigma`.
pub trait Denoiser {
    fn denoise(&self, y: &Image, sigma: f64, cond: &CondInput<'_>) -> Result<Image, DenoiseError>;
}

impl<F> Denoiser for F
where
    F: Fn(&Image, f64, &CondInput<'_>) -> Result<Image, DenoiseError>,
{
    fn denoise(&self, y: &Image, sigma: f64, cond: &CondInput<'_>) -> Result<Image, DenoiseError> {
        self(y, sigma, cond)
    }
}

/// Exact posterior mean for data `x ~ N(μ, s²I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub mu: Image,
    pub s: f64,
}

impl GaussianOracle {
    pub fn new(mu: Image, s: f64) -> Self {
        assert!(s > 0.0, "standard deviation must be positive");
        Self { mu, s }
    }
}

pub fn gaussian_oracle_denoise(oracle: &GaussianOracle, y: &Image, sigma: f64) -> Result<Image, DenoiseError> {
    let s2 = oracle.s * oracle.s;
    let shrink = s2 / (s2 + sigma * sigma);
    Ok(oracle.mu.zip_map(y, |m, v| m + shrink * (v - m))?)
}

impl Denoiser for GaussianOracle {
    fn denoise(&self, y: &Image, sigma: f64, _: &CondInput<'_>) -> Result<Image, DenoiseError> {
        gaussian_oracle_denoise(self, y, sigma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub mean: Image,
    pub std: f64,
    pub weight: f64,
}

/// Mixture of isotropic Gaussians over whole images.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOracle {
    components: Vec<MixtureComponent>,
}

impl MixtureOracle {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self, DenoiseError> {
        let first = components
            .first()
            .ok_or_else(|| DenoiseError::Other("mixture needs at least one component".into()))?;
        for c in &components {
            c.mean.check_same_shape(&first.mean)?;
            if !(c.std > 0.0 && c.weight > 0.0) {
                return Err(DenoiseError::Other("component std and weight must be positive".into()));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DenoiseError::Other(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { components })
    }

    /// Two equally weighted components at `±offset` around `center`.
    pub fn symmetric(center: &Image, offset: f64, std: f64) -> Self {
        let comp = |sign: f64| MixtureComponent {
            mean: center.map(|v| v + sign * offset),
            std,
            weight: 0.5,
        };
        Self::new(vec![comp(1.0), comp(-1.0)]).expect("valid by construction")
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Posterior component probabilities given `y` at noise level `sigma`.
    pub fn responsibilities(&self, y: &Image, sigma: f64) -> Result<Vec<f64>, DenoiseError> {
        let n = y.len() as f64;
        let mut logs = Vec::with_capacity(self.components.len());
        for c in &self.components {
            c.mean.check_same_shape(y)?;
            let var = c.std * c.std + sigma * sigma;
            let sq: f64 = y.data().iter().zip(c.mean.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            logs.push(c.weight.ln() - 0.5 * sq / var - 0.5 * n * (2.0 * std::f64::consts::PI * var).ln());
        }
        let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|l| (l - peak).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }
}

pub fn mixture_oracle_denoise(oracle: &MixtureOracle, y: &Image, sigma: f64) -> Result<Image, DenoiseError> {
    if let [only] = oracle.components.as_slice() {
        return gaussian_oracle_denoise(&GaussianOracle { mu: only.mean.clone(), s: only.std }, y, sigma);
    }
    let resp = oracle.responsibilities(y, sigma)?;
    let mut out = Image::zeros(y.channels(), y.height(), y.width());
    for (c, r) in oracle.components.iter().zip(resp) {
        let s2 = c.std * c.std;
        let shrink = s2 / (s2 + sigma * sigma);
        for ((o, m), v) in out.data_mut().iter_mut().zip(c.mean.data()).zip(y.data()) {
            *o += r * (m + shrink * (v - m));
        }
    }
    Ok(out)
}

impl Denoiser for MixtureOracle {
    fn denoise(&self, y: &Image, sigma: f64, _: &CondInput<'_>) -> Result<Image, DenoiseError> {
        mixture_oracle_denoise(self, y, sigma)
    }
}

fn camera_key(camera: &Camera) -> Vec<u64> {
    let mut key: Vec<u64> = camera.pose_row_major().iter().map(|v| v.to_bits()).collect();
    key.extend([
        camera.fov_y_deg().to_bits(),
        camera.near().to_bits(),
        camera.far().to_bits(),
        camera.width() as u64,
        camera.height() as u64,
    ]);
    key
}

/// Returns the ground-truth render of a toy scene for the target camera,
/// regardless of the noisy input.
#[derive(Debug)]
pub struct IdealSceneDenoiser {
    scene: ToyScene,
    n_fine: usize,
    cache: Mutex<HashMap<Vec<u64>, Arc<Image>>>,
}

impl IdealSceneDenoiser {
    pub fn new(scene: ToyScene, n_fine: usize) -> Self {
        Self {
            scene,
            n_fine,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn scene(&self) -> &ToyScene {
        &self.scene
    }

    pub fn target(&self, camera: &Camera) -> Arc<Image> {
        let key = camera_key(camera);
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return hit.clone();
        }
        let render = Arc::new(render_ground_truth(&self.scene, camera, self.n_fine).image);
        self.cache.lock().unwrap().entry(key).or_insert(render).clone()
    }
}

impl Denoiser for IdealSceneDenoiser {
    fn denoise(&self, y: &Image, _sigma: f64, cond: &CondInput<'_>) -> Result<Image, DenoiseError> {
        let camera = cond.camera.ok_or(DenoiseError::MissingCamera)?;
        let target = self.target(camera);
        target.check_same_shape(y)?;
        Ok((*target).clone())
    }
}

/// Conditional stand-in: blends the first three feature channels with the
/// noisy input according to the noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureReadoutDenoiser {
    pub s0: f64,
}

impl Default for FeatureReadoutDenoiser {
    fn default() -> Self {
        Self { s0: 0.5 }
    }
}

pub fn feature_readout_denoise(
    y: &Image,
    feature: Option<&FeatureImage>,
    sigma: f64,
    s0: f64,
) -> Result<Image, DenoiseError> {
    let feature = feature.ok_or(DenoiseError::MissingConditioning)?;
    let f = &feature.data;
    if f.channels() < 3 {
        return Err(DenoiseError::TooFewChannels(f.channels()));
    }
    let readout = f.leading_channels(3).map(|v| v.clamp(-1.0, 1.0));
    let s2 = s0 * s0;
    let total = sigma * sigma + s2;
    let (wf, wy) = (sigma * sigma / total, s2 / total);
    Ok(readout.zip_map(y, |x, v| x * wf + v * wy)?)
}

impl Denoiser for FeatureReadoutDenoiser {
    fn denoise(&self, y: &Image, sigma: f64, cond: &CondInput<'_>) -> Result<Image, DenoiseError> {
        feature_readout_denoise(y, cond.feature, sigma, self.s0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scene::{Primitive, Shape};
    use nalgebra::Matrix4;
    use proptest::prelude::*;

    fn img(values: &[f64]) -> Image {
        Image::from_vec(1, 1, values.len(), values.to_vec())
    }

    #[test]
    fn gaussian_closed_forms() {
        let oracle = GaussianOracle::new(img(&[0.0]), 1.0);
        assert_eq!(gaussian_oracle_denoise(&oracle, &img(&[2.0]), 1.0).unwrap(), img(&[1.0]));
        let y = img(&[0.3, -4.0, 9.0]);
        let oracle = GaussianOracle::new(img(&[0.1, 0.2, 0.3]), 0.7);
        assert_eq!(gaussian_oracle_denoise(&oracle, &y, 0.0).unwrap(), y);
        let far = gaussian_oracle_denoise(&oracle, &y, 1e6).unwrap();
        let bound = 0.49 / 1e12 * 8.7;
        assert!(far.max_abs_diff(&oracle.mu).unwrap() < bound);
    }

    #[test]
    fn single_component_mixture_is_gaussian() {
        let mu = img(&[0.2, -0.4]);
        let mix = MixtureOracle::new(vec![MixtureComponent { mean: mu.clone(), std: 0.3, weight: 1.0 }]).unwrap();
        let g = GaussianOracle::new(mu, 0.3);
        let y = img(&[1.1, 0.7]);
        for sigma in [0.0, 0.01, 1.0, 80.0] {
            assert_eq!(
                mixture_oracle_denoise(&mix, &y, sigma).unwrap(),
                gaussian_oracle_denoise(&g, &y, sigma).unwrap()
            );
        }
    }

    #[test]
    fn symmetric_mixture_at_origin() {
        let mix = MixtureOracle::symmetric(&img(&[0.0, 0.0]), 0.6, 0.05);
        for sigma in [0.01, 0.5, 80.0] {
            let out = mixture_oracle_denoise(&mix, &img(&[0.0, 0.0]), sigma).unwrap();
            assert!(out.data().iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn mixture_validation() {
        let c = |w: f64| MixtureComponent { mean: img(&[0.0]), std: 1.0, weight: w };
        assert!(MixtureOracle::new(vec![]).is_err());
        assert!(MixtureOracle::new(vec![c(0.5), c(0.4)]).is_err());
        assert!(MixtureOracle::new(vec![c(0.5), c(0.5)]).is_ok());
    }

    #[test]
    fn mixture_large_sigma_tends_to_global_mean() {
        let mix = MixtureOracle::new(vec![
            MixtureComponent { mean: img(&[1.0, 0.0]), std: 0.2, weight: 0.25 },
            MixtureComponent { mean: img(&[-1.0, 2.0]), std: 0.4, weight: 0.75 },
        ])
        .unwrap();
        let out = mixture_oracle_denoise(&mix, &img(&[3.0, -5.0]), 1e6).unwrap();
        assert!((out.data()[0] - (0.25 - 0.75)).abs() < 1e-4);
        assert!((out.data()[1] - 1.5).abs() < 1e-4);
    }

    #[test]
    fn readout_limits_and_errors() {
        let cam = Camera::new(Matrix4::identity(), 40.0, 2, 1, 0.5, 2.0).unwrap();
        let data = Image::from_fn(4, 1, 2, |c, _, x| 0.1 * c as f64 - 0.2 * x as f64);
        let f = FeatureImage { alpha: Image::filled(1, 1, 2, 1.0), data: data.clone(), target_camera: cam };
        let y = Image::filled(3, 1, 2, 0.9);
        assert_eq!(feature_readout_denoise(&y, Some(&f), 0.0, 0.5).unwrap(), y);
        let far = feature_readout_denoise(&y, Some(&f), 1e8, 0.5).unwrap();
        assert!(far.max_abs_diff(&data.leading_channels(3)).unwrap() < 1e-12);
        assert_eq!(feature_readout_denoise(&y, None, 1.0, 0.5), Err(DenoiseError::MissingConditioning));
    }

    #[test]
    fn ideal_scene_ignores_input_and_caches() {
        let scene = ToyScene::new(
            4,
            vec![Primitive {
                shape: Shape::Sphere { center: [0.0, 0.0, 2.0], radius: 0.5 },
                density: 5.0,
                color: [0.5, -0.5, 0.25],
                extra: vec![],
            }],
        )
        .unwrap();
        let cam = Camera::new(Matrix4::identity(), 40.0, 6, 6, 1.0, 3.0).unwrap();
        let den = IdealSceneDenoiser::new(scene.clone(), 256);
        let a = den.denoise(&Image::zeros(3, 6, 6), 80.0, &CondInput::camera(&cam)).unwrap();
        let b = den.denoise(&Image::filled(3, 6, 6, 7.0), 0.1, &CondInput::camera(&cam)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, render_ground_truth(&scene, &cam, 256).image);
        assert_eq!(den.cache.lock().unwrap().len(), 1);
        assert_eq!(den.denoise(&a, 1.0, &CondInput::none()), Err(DenoiseError::MissingCamera));
    }

    proptest! {
        #[test]
        fn responsibilities_normalized(y0 in -3.0f64..3.0, y1 in -3.0f64..3.0, sigma in 0.0f64..10.0) {
            let mix = MixtureOracle::new(vec![
                MixtureComponent { mean: img(&[0.5, 0.1]), std: 0.1, weight: 0.2 },
                MixtureComponent { mean: img(&[-0.5, 0.3]), std: 0.3, weight: 0.5 },
                MixtureComponent { mean: img(&[0.0, -0.9]), std: 0.05, weight: 0.3 },
            ]).unwrap();
            let r = mix.responsibilities(&img(&[y0, y1]), sigma).unwrap();
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn gaussian_oracle_is_contractive(y in -5.0f64..5.0, h in 1e-4f64..0.1, sigma in 0.0f64..5.0) {
            let oracle = GaussianOracle::new(img(&[0.2]), 0.4);
            let a = gaussian_oracle_denoise(&oracle, &img(&[y]), sigma).unwrap().data()[0];
            let b = gaussian_oracle_denoise(&oracle, &img(&[y + h]), sigma).unwrap().data()[0];
            let lip = 0.16 / (0.16 + sigma * sigma);
            prop_assert!((b - a).abs() <= lip * h * (1.0 + 1e-9) + 1e-15);
        }
    }
}
