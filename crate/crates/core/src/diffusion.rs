//! Noise schedules, the deterministic second-order sampler, guidance and the
//! training-side noise utilities.

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::denoisers::{CondInput, DenoiseError, Denoiser};
use crate::geometry::Camera;
use crate::image::{Image, ShapeMismatch};
use crate::renderer::FeatureImage;
use crate::rng::Rng;

pub const DEFAULT_STEPS: usize = 25;
pub const SIGMA_MAX: f64 = 80.0;
pub const SIGMA_MIN: f64 = 0.002;
pub const RHO: f64 = 7.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("need at least one step")]
    NoSteps,
    #[error("need 0 < sigma_min < sigma_max, got sigma_min={min} sigma_max={max}")]
    Range { min: f64, max: f64 },
    #[error("rho must be positive, got {0}")]
    Rho(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("denoiser failed at step {step}: {source}")]
pub struct SampleError {
    pub step: usize,
    #[source]
    pub source: DenoiseError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    sigma_max: f64,
    sigma_min: f64,
    rho: f64,
}

impl NoiseSchedule {
    /// `N + 1` levels; the last is always zero.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(DEFAULT_STEPS, SIGMA_MAX, SIGMA_MIN, RHO).expect("default schedule is valid")
    }
}

/// `σᵢ = (σ_max^{1/ρ} + i/(N−1)·(σ_min^{1/ρ} − σ_max^{1/ρ}))^ρ` for `i < N`,
/// then `σ_N = 0`. The first and last nonzero levels are pinned to
/// `sigma_max` and `sigma_min` so they survive the power round trip exactly.
pub fn build_schedule(steps: usize, sigma_max: f64, sigma_min: f64, rho: f64) -> Result<NoiseSchedule, ScheduleError> {
    if steps == 0 {
        return Err(ScheduleError::NoSteps);
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(ScheduleError::Range {
            min: sigma_min,
            max: sigma_max,
        });
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(ScheduleError::Rho(rho));
    }
    let (hi, lo) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
    let mut sigmas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                return sigma_max;
            }
            let frac = i as f64 / (steps - 1) as f64;
            (hi + frac * (lo - hi)).powf(rho)
        })
        .collect();
    sigmas[0] = sigma_max;
    if steps > 1 {
        sigmas[steps - 1] = sigma_min;
    }
    sigmas.push(0.0);
    Ok(NoiseSchedule {
        sigmas,
        sigma_max,
        sigma_min,
        rho,
    })
}

/// Guidance strength: `0` is plain conditional sampling, `−1` unconditional.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GuidanceConfig {
    pub g: f64,
}

/// `(1 + g)·cond − g·uncond`
pub fn guided_denoise(cond: &Image, uncond: &Image, g: f64) -> Result<Image, ShapeMismatch> {
    cond.zip_map(uncond, |c, u| (1.0 + g) * c - g * u)
}

/// Conditioning for a full sampling run.
///
/// `null_feature` replaces the feature image for unconditional evaluations;
/// it is only consulted when guidance is nonzero.
#[derive(Debug, Clone, Copy, Default)]
pub struct Conditioning<'a> {
    pub feature: Option<&'a FeatureImage>,
    pub null_feature: Option<&'a FeatureImage>,
    pub camera: Option<&'a Camera>,
}

impl<'a> Conditioning<'a> {
    fn conditional(&self) -> CondInput<'a> {
        CondInput {
            feature: self.feature,
            camera: self.camera.or(self.feature.map(|f| &f.target_camera)),
        }
    }

    fn unconditional(&self) -> CondInput<'a> {
        CondInput {
            feature: self.null_feature,
            camera: self.camera.or(self.feature.map(|f| &f.target_camera)),
        }
    }
}

/// Denoiser output with classifier-free guidance applied. Evaluations whose
/// coefficient is zero are skipped.
pub fn guided_eval(
    denoiser: &dyn Denoiser,
    y: &Image,
    sigma: f64,
    cond: &Conditioning<'_>,
    guidance: GuidanceConfig,
) -> Result<Image, DenoiseError> {
    let g = guidance.g;
    if g == 0.0 {
        return denoiser.denoise(y, sigma, &cond.conditional());
    }
    let uncond = denoiser.denoise(y, sigma, &cond.unconditional())?;
    if g == -1.0 {
        return Ok(uncond);
    }
    let conditional = denoiser.denoise(y, sigma, &cond.conditional())?;
    Ok(guided_denoise(&conditional, &uncond, g)?)
}

/// `N(0, σ²I)` image drawn from `rng`.
pub fn gaussian_image(shape: (usize, usize, usize), sigma: f64, rng: &mut Rng) -> Image {
    let (c, h, w) = shape;
    let data = (0..c * h * w)
        .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Image::from_vec(c, h, w, data)
}

/// Deterministic Heun integration of the probability-flow ODE from `y0` at
/// `σ₀` down to zero. `denoise(step, y, σ)` supplies the (guided) estimate.
pub fn heun_integrate<F>(y0: Image, schedule: &NoiseSchedule, mut denoise: F) -> Result<Image, SampleError>
where
    F: FnMut(usize, &Image, f64) -> Result<Image, DenoiseError>,
{
    let sigmas = schedule.sigmas();
    let mut y = y0;
    for step in 0..schedule.steps() {
        let (s_cur, s_next) = (sigmas[step], sigmas[step + 1]);
        let at_step = |source| SampleError { step, source };
        let d_cur = slope(&y, &denoise(step, &y, s_cur).map_err(at_step)?, s_cur).map_err(at_step)?;
        let h = s_next - s_cur;
        let euler = y.zip_map(&d_cur, |v, d| v + h * d).map_err(|e| at_step(e.into()))?;
        if s_next > 0.0 {
            let denoised = denoise(step, &euler, s_next).map_err(at_step)?;
            let d_next = slope(&euler, &denoised, s_next).map_err(at_step)?;
            let mut next = y.clone();
            for ((v, a), b) in next.data_mut().iter_mut().zip(d_cur.data()).zip(d_next.data()) {
                *v += h * 0.5 * (a + b);
            }
            y = next;
        } else {
            y = euler;
        }
    }
    Ok(y)
}

fn slope(y: &Image, denoised: &Image, sigma: f64) -> Result<Image, DenoiseError> {
    Ok(y.zip_map(denoised, |v, d| (v - d) / sigma)?)
}

/// Draws `y₀ ~ N(0, σ₀²I)` and integrates with the guided denoiser.
pub fn heun_sample(
    denoiser: &dyn Denoiser,
    cond: &Conditioning<'_>,
    shape: (usize, usize, usize),
    schedule: &NoiseSchedule,
    guidance: GuidanceConfig,
    rng: &mut Rng,
) -> Result<Image, SampleError> {
    let y0 = gaussian_image(shape, schedule.sigmas()[0], rng);
    heun_integrate(y0, schedule, |_, y, sigma| guided_eval(denoiser, y, sigma, cond, guidance))
}

/// Single denoiser evaluation from pure noise at `sigma_start` (or from the
/// zero image when `deterministic`).
pub fn one_step_inference(
    denoiser: &dyn Denoiser,
    cond: &Conditioning<'_>,
    shape: (usize, usize, usize),
    sigma_start: f64,
    rng: &mut Rng,
    deterministic: bool,
) -> Result<Image, SampleError> {
    assert!(sigma_start > 0.0, "sigma_start must be positive");
    let y0 = if deterministic {
        Image::zeros(shape.0, shape.1, shape.2)
    } else {
        gaussian_image(shape, sigma_start, rng)
    };
    denoiser
        .denoise(&y0, sigma_start, &cond.conditional())
        .map_err(|source| SampleError { step: 0, source })
}

/// Log-normal training noise levels: `ln σ ~ N(P_mean, P_std²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingNoiseSampler {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for TrainingNoiseSampler {
    fn default() -> Self {
        Self {
            p_mean: -1.0,
            p_std: 1.4,
        }
    }
}

pub fn sample_training_sigma(sampler: &TrainingNoiseSampler, rng: &mut Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (sampler.p_mean + sampler.p_std * z).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LossWeighting {
    /// Plain squared error.
    #[default]
    Uniform,
    /// `λ(σ) = (σ² + σ_data²)/(σ·σ_data)²`.
    Edm { sigma_data: f64 },
}

/// Mean squared error of the denoiser on `target` corrupted by `N(0, σ²I)`.
pub fn denoising_loss(
    denoiser: &dyn Denoiser,
    target: &Image,
    cond: &CondInput<'_>,
    sigma: f64,
    weighting: LossWeighting,
    rng: &mut Rng,
) -> Result<f64, DenoiseError> {
    let noise = gaussian_image(target.shape(), sigma, rng);
    let noisy = target.zip_map(&noise, |a, b| a + b)?;
    let denoised = denoiser.denoise(&noisy, sigma, cond)?;
    denoised.check_same_shape(target)?;
    let mse = denoised
        .data()
        .iter()
        .zip(target.data())
        .map(|(d, t)| (d - t) * (d - t))
        .sum::<f64>()
        / target.len() as f64;
    Ok(match weighting {
        LossWeighting::Uniform => mse,
        LossWeighting::Edm { sigma_data } => {
            let sd2 = sigma_data * sigma_data;
            mse * (sigma * sigma + sd2) / (sigma * sigma * sd2)
        }
    })
}
