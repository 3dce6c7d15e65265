//! Brute-force cross-checks run by `oracle-check`.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::denoisers::{gaussian_oracle_denoise, GaussianOracle};
use crate::diffusion::{build_schedule, gaussian_image, guided_denoise, heun_integrate, DEFAULT_STEPS, RHO, SIGMA_MAX, SIGMA_MIN};
use crate::field::{decoder_jacobian, DecoderMlp};
use crate::geometry::Camera;
use crate::harness::scene::{render_ground_truth, Primitive, Shape, ToyScene};
use crate::image::Image;
use crate::renderer::{composite, render_feature_image_with, Composite, CompositeFn, RenderConfig, SamplingMode};
use crate::rng::{self, Purpose};

/// Deliberate defects used to confirm that checks isolate faults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Compositing weights are not attenuated by transmittance.
    RendererUnnormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub id: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn check(id: &str, measured: f64, tolerance: f64, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        id: id.to_string(),
        passed: measured.is_finite() && measured < tolerance,
        measured,
        tolerance,
        detail: detail.into(),
    }
}

/// Every alpha counts fully, with no transmittance attenuation.
fn unnormalized_composite(taus: &[f64], features: &[Vec<f64>], deltas: &[f64]) -> Composite {
    let c = features.first().map_or(0, Vec::len);
    let mut feature = vec![0.0; c];
    let mut alpha = 0.0;
    for ((tau, f), delta) in taus.iter().zip(features).zip(deltas) {
        let a = 1.0 - (-tau * delta).exp();
        alpha += a;
        feature.iter_mut().zip(f).for_each(|(acc, v)| *acc += a * v);
    }
    Composite { feature, alpha }
}

/// Soft-edged scene used for quadrature comparisons: nested spheres
/// approximate a smooth radial falloff.
pub fn smooth_scene(channels: usize) -> ToyScene {
    let shells = [(0.45, 0.6, [0.6, -0.2, 0.1]), (0.3, 0.9, [0.2, 0.5, -0.3]), (0.15, 1.2, [-0.4, 0.1, 0.6])];
    let primitives = shells
        .iter()
        .map(|&(radius, density, color)| Primitive {
            shape: Shape::Sphere {
                center: [0.0, 0.0, 0.0],
                radius,
            },
            density,
            color,
            extra: vec![],
        })
        .collect();
    ToyScene::new(channels, primitives).expect("valid scene")
}

fn oracle_camera(resolution: usize) -> Camera {
    Camera::look_at(
        Point3::new(0.4, -0.3, -2.0),
        Point3::origin(),
        Vector3::new(0.0, -1.0, 0.0),
        35.0,
        resolution,
        resolution,
        1.0,
        3.0,
    )
    .expect("valid camera")
}

fn renderer_check(fault: Option<Fault>) -> CheckResult {
    let scene = smooth_scene(3);
    let camera = oracle_camera(32);
    let config = RenderConfig {
        n_depth_samples: 64,
        sampling: SamplingMode::Stratified,
        half_resolution: false,
        rng_seed: 11,
    };
    let compose: CompositeFn = match fault {
        Some(Fault::RendererUnnormalized) => unnormalized_composite,
        None => composite,
    };
    let rendered = render_feature_image_with(&scene, &camera, &config, compose);
    let truth = render_ground_truth(&scene, &camera, 4096);
    let worst = (0..3)
        .map(|c| {
            let (a, b) = (rendered.data.channel(c), truth.image.channel(c));
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
        })
        .fold(0.0, f64::max);
    check(
        "renderer_vs_quadrature",
        worst,
        1e-2,
        "worst per-channel mean abs error, 64 stratified vs 4096 midpoint samples",
    )
}

fn slab_check() -> CheckResult {
    let tau = 3.0;
    let scene = ToyScene::new(
        3,
        vec![Primitive {
            shape: Shape::Box {
                min: [-10.0, -10.0, 1.5],
                max: [10.0, 10.0, 2.0],
            },
            density: tau,
            color: [0.5, 0.5, 0.5],
            extra: vec![],
        }],
    )
    .expect("valid scene");
    let camera = Camera::new(nalgebra::Matrix4::identity(), 40.0, 9, 9, 1.0, 3.0).expect("valid camera");
    let truth = render_ground_truth(&scene, &camera, 4096);
    let mut worst: f64 = 0.0;
    for row in 0..9 {
        for col in 0..9 {
            let stretch = camera.pixel_direction_camera(col as f64 + 0.5, row as f64 + 0.5).norm();
            let expected = 1.0 - (-tau * 0.5 * stretch).exp();
            worst = worst.max((truth.alpha.get(0, row, col) - expected).abs());
        }
    }
    check("slab_alpha", worst, 1e-4, "max |alpha - (1 - exp(-tau L))| over a homogeneous slab")
}

fn sampler_check() -> Vec<CheckResult> {
    let (mu, s) = (0.3, 0.2);
    let n = 4000;
    let target = GaussianOracle::new(Image::filled(1, 1, n, mu), s);
    let schedule = build_schedule(DEFAULT_STEPS, SIGMA_MAX, SIGMA_MIN, RHO).expect("valid schedule");
    let y0 = gaussian_image((1, 1, n), SIGMA_MAX, &mut rng::stream(5, Purpose::InitialNoise, 0));
    let out = heun_integrate(y0, &schedule, |_, y, sigma| gaussian_oracle_denoise(&target, y, sigma)).expect("oracle sampling");
    let data = out.data();
    let mean = data.iter().sum::<f64>() / n as f64;
    let std = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    vec![
        check("sampler_mean", (mean - mu).abs(), 4.0 * s / (n as f64).sqrt(), format!("{n} Heun samples, mean {mean:.5}")),
        check("sampler_std", (std - s).abs() / s, 0.05, format!("relative std error, std {std:.5}")),
    ]
}

fn jacobian_check() -> CheckResult {
    let channels = 8;
    let mlp = DecoderMlp::random(channels, 16, 3);
    let mut rng = rng::stream(3, Purpose::Misc, 1);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let w: Vec<f64> = gaussian_image((channels, 1, 1), 1.0, &mut rng).into_vec();
        let analytic = decoder_jacobian(&mlp, &w).expect("shape");
        for j in 0..channels {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[j] += h;
            minus[j] -= h;
            let fp = mlp.raw_output(&plus).expect("shape");
            let fm = mlp.raw_output(&minus).expect("shape");
            for i in 0..=channels {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let a = analytic[i * channels + j];
                worst = worst.max((fd - a).abs() / a.abs().max(1.0));
            }
        }
    }
    check("decoder_jacobian", worst, 1e-4, "max relative error of the raw-output Jacobian against central differences")
}

fn schedule_check() -> CheckResult {
    let s = build_schedule(DEFAULT_STEPS, SIGMA_MAX, SIGMA_MIN, RHO).expect("valid schedule");
    let sig = s.sigmas();
    let err = ((sig[0] - SIGMA_MAX) / SIGMA_MAX)
        .abs()
        .max(((sig[DEFAULT_STEPS - 1] - SIGMA_MIN) / SIGMA_MIN).abs())
        .max(sig[DEFAULT_STEPS].abs());
    check("schedule_endpoints", err, 1e-12, "relative endpoint error")
}

fn guidance_check() -> CheckResult {
    let cond = Image::from_fn(3, 4, 4, |c, y, x| (c + 2 * y + 3 * x) as f64 * 0.01 - 0.2);
    let uncond = cond.map(|v| 0.5 - v * 0.7);
    let at_zero = guided_denoise(&cond, &uncond, 0.0).expect("shape");
    let at_minus_one = guided_denoise(&cond, &uncond, -1.0).expect("shape");
    let err = at_zero.max_abs_diff(&cond).expect("shape").max(at_minus_one.max_abs_diff(&uncond).expect("shape"));
    CheckResult {
        passed: err == 0.0,
        ..check("guidance_anchors", err, f64::MIN_POSITIVE, "g = 0 and g = -1 must be bit-exact")
    }
}

/// Runs every cross-check, optionally with a fault injected.
pub fn run_checks(fault: Option<Fault>) -> OracleReport {
    let mut checks = vec![renderer_check(fault), slab_check()];
    checks.extend(sampler_check());
    checks.push(jacobian_check());
    checks.push(schedule_check());
    checks.push(guidance_check());
    OracleReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}
