//! Volume rendering of a feature field into a target view.

use rand::Rng as _;
use rayon::prelude::*;

use crate::field::FeatureField;
use crate::geometry::{Camera, Ray};
use crate::image::Image;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    #[default]
    Stratified,
    Midpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub n_depth_samples: usize,
    pub sampling: SamplingMode,
    pub half_resolution: bool,
    pub rng_seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_depth_samples: 64,
            sampling: SamplingMode::Stratified,
            half_resolution: true,
            rng_seed: 0,
        }
    }
}

/// Rendered `c × H × W` features plus accumulated opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub data: Image,
    pub alpha: Image,
    pub target_camera: Camera,
}

impl FeatureImage {
    pub fn channels(&self) -> usize {
        self.data.channels()
    }
}

/// `n` ascending depths in `[t_near, t_far]`, one per equal-width bin.
pub fn sample_depths(ray: &Ray, n: usize, mode: SamplingMode, rng: &mut rng::Rng) -> Vec<f64> {
    let width = (ray.t_far - ray.t_near) / n as f64;
    (0..n)
        .map(|i| {
            let offset = match mode {
                SamplingMode::Midpoint => 0.5,
                SamplingMode::Stratified => rng.random::<f64>(),
            };
            ray.t_near + (i as f64 + offset) * width
        })
        .collect()
}

/// Segment lengths for samples `depths` on a ray ending at `t_far`.
pub fn segment_lengths(depths: &[f64], t_far: f64) -> Vec<f64> {
    depths
        .iter()
        .enumerate()
        .map(|(i, &t)| depths.get(i + 1).copied().unwrap_or(t_far) - t)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub feature: Vec<f64>,
    pub alpha: f64,
}

/// Emission-absorption quadrature: `αᵢ = 1 − exp(−τᵢδᵢ)`, `Tᵢ = Π_{j<i}(1 − αⱼ)`.
pub fn composite(taus: &[f64], features: &[Vec<f64>], deltas: &[f64]) -> Composite {
    let channels = features.first().map_or(0, Vec::len);
    let mut feature = vec![0.0; channels];
    let mut transmittance = 1.0;
    let mut alpha = 0.0;
    for ((tau, f), delta) in taus.iter().zip(features).zip(deltas) {
        let a = -(-tau * delta).exp_m1();
        let weight = transmittance * a;
        feature.iter_mut().zip(f).for_each(|(acc, v)| *acc += weight * v);
        alpha += weight;
        transmittance *= 1.0 - a;
    }
    Composite { feature, alpha }
}

pub type CompositeFn = fn(&[f64], &[Vec<f64>], &[f64]) -> Composite;

fn render_ray(field: &dyn FeatureField, ray: &Ray, config: &RenderConfig, pixel: u64, compose: CompositeFn) -> Composite {
    let mut rng = rng::stream(config.rng_seed, Purpose::DepthSamples, pixel);
    let depths = sample_depths(ray, config.n_depth_samples, config.sampling, &mut rng);
    let deltas = segment_lengths(&depths, ray.t_far);
    let (taus, features): (Vec<f64>, Vec<Vec<f64>>) = depths
        .iter()
        .map(|&t| {
            let p = field.query(&ray.at(t));
            (p.tau, p.feature)
        })
        .unzip();
    compose(&taus, &features, &deltas)
}

/// Renders `field` from `target`, at half resolution followed by bilinear
/// upsampling when configured. Each pixel draws from its own depth stream, so
/// results do not depend on evaluation order.
pub fn render_feature_image(field: &dyn FeatureField, target: &Camera, config: &RenderConfig) -> FeatureImage {
    render_feature_image_with(field, target, config, composite)
}

pub fn render_feature_image_with(
    field: &dyn FeatureField,
    target: &Camera,
    config: &RenderConfig,
    compose: CompositeFn,
) -> FeatureImage {
    assert!(config.n_depth_samples >= 1, "need at least one depth sample");
    let (width, height) = (target.width(), target.height());
    let ray_camera = if config.half_resolution {
        target
            .with_resolution(width.div_ceil(2), height.div_ceil(2))
            .expect("halved camera stays valid")
    } else {
        target.clone()
    };
    let (rw, rh) = (ray_camera.width(), ray_camera.height());
    let c = field.channels();
    let pixels: Vec<Composite> = (0..rw * rh)
        .into_par_iter()
        .map(|i| {
            let ray = ray_camera.ray(i % rw, i / rw);
            render_ray(field, &ray, config, i as u64, compose)
        })
        .collect();
    let mut data = Image::zeros(c, rh, rw);
    let mut alpha = Image::zeros(1, rh, rw);
    for (i, px) in pixels.iter().enumerate() {
        let (x, y) = (i % rw, i / rw);
        for (ch, v) in px.feature.iter().enumerate() {
            data.set(ch, y, x, *v);
        }
        alpha.set(0, y, x, px.alpha);
    }
    if config.half_resolution {
        data = crop(&bilinear_upsample(&data), height, width);
        alpha = crop(&bilinear_upsample(&alpha), height, width);
    }
    FeatureImage {
        data,
        alpha,
        target_camera: target.clone(),
    }
}

fn crop(image: &Image, height: usize, width: usize) -> Image {
    if image.height() == height && image.width() == width {
        return image.clone();
    }
    Image::from_fn(image.channels(), height, width, |c, y, x| image.get(c, y, x))
}

/// 2× bilinear upsampling with half-pixel alignment and edge clamping.
pub fn bilinear_upsample(image: &Image) -> Image {
    let (c, h, w) = image.shape();
    let axis = |out: usize, n: usize| {
        let src = ((out as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let xs: Vec<_> = (0..2 * w).map(|x| axis(x, w)).collect();
    let ys: Vec<_> = (0..2 * h).map(|y| axis(y, h)).collect();
    Image::from_fn(c, 2 * h, 2 * w, |ch, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = lerp(image.get(ch, y0, x0), image.get(ch, y0, x1), fx);
        let bottom = lerp(image.get(ch, y1, x0), image.get(ch, y1, x1), fx);
        lerp(top, bottom, fy)
    })
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if a == b {
        a
    } else {
        a + (b - a) * t
    }
}
