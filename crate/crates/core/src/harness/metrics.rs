//! Image quality metrics and sample-diversity statistics.

use serde::Serialize;
use thiserror::Error;

use crate::image::{Image, ShapeMismatch};

pub const PSNR_CAP_DB: f64 = 120.0;
pub const DEFAULT_DATA_RANGE: f64 = 2.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Shape(#[from] ShapeMismatch),
    #[error("image {height}x{width} smaller than the {window}x{window} SSIM window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("need at least one bin")]
    NoBins,
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image, data_range: f64) -> Result<f64, MetricError> {
    a.check_same_shape(b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Separable valid-mode filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| kernel[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| kernel[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5), averaged
/// over all valid window positions and channels.
pub fn ssim(a: &Image, b: &Image, data_range: f64) -> Result<f64, MetricError> {
    a.check_same_shape(b)?;
    let (channels, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let kernel = gaussian_window();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for c in 0..channels {
        let (x, y) = (a.channel(c), b.channel(c));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(x, h, w, &kernel);
        let my = filter_valid(y, h, w, &kernel);
        let sxx = filter_valid(&xx, h, w, &kernel);
        let syy = filter_valid(&yy, h, w, &kernel);
        let sxy = filter_valid(&xy, h, w, &kernel);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / channels as f64)
}

/// Per-pixel unbiased standard deviation across samples, averaged over
/// channels into a `1 × H × W` map.
pub fn pixel_std_map(samples: &[Image]) -> Result<Image, MetricError> {
    let variance = pixel_variance(samples)?;
    let (c, h, w) = variance.shape();
    Ok(Image::from_fn(1, h, w, |_, y, x| {
        ((0..c).map(|ch| variance.get(ch, y, x)).sum::<f64>() / c as f64).sqrt()
    }))
}

/// Per-element unbiased variance across samples.
pub fn pixel_variance(samples: &[Image]) -> Result<Image, MetricError> {
    if samples.len() < 2 {
        return Err(MetricError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let first = &samples[0];
    for s in &samples[1..] {
        first.check_same_shape(s)?;
    }
    // Shifted by the first sample so identical samples give exactly zero.
    let k = samples.len() as f64;
    let (c, h, w) = first.shape();
    let mut sum = vec![0.0; first.len()];
    let mut sum_sq = vec![0.0; first.len()];
    for s in &samples[1..] {
        for (i, (v, v0)) in s.data().iter().zip(first.data()).enumerate() {
            let d = v - v0;
            sum[i] += d;
            sum_sq[i] += d * d;
        }
    }
    let var: Vec<f64> = sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, sq)| ((sq - s * s / k) / (k - 1.0)).max(0.0))
        .collect();
    Ok(Image::from_vec(c, h, w, var))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_variance: f64,
    pub std_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MovingPoint {
    pub distance: f64,
    pub mean_variance: f64,
    pub std_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    pub bins: Vec<DistanceBin>,
    pub moving_average: Vec<MovingPoint>,
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Mean pixel variance of each sample group, binned by distance into
/// `n_bins` equal-width bins, plus a centered moving average of `window`
/// groups over the distance-sorted sequence.
pub fn variance_vs_distance(
    groups: &[(f64, Vec<Image>)],
    n_bins: usize,
    window: usize,
) -> Result<VarianceReport, MetricError> {
    if n_bins == 0 {
        return Err(MetricError::NoBins);
    }
    let mut points = Vec::with_capacity(groups.len());
    for (distance, samples) in groups {
        points.push((*distance, pixel_variance(samples)?.mean()));
    }
    if points.is_empty() {
        return Err(MetricError::TooFewSamples { needed: 1, got: 0 });
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (lo, hi) = (points[0].0, points[points.len() - 1].0);
    let width = if hi > lo { (hi - lo) / n_bins as f64 } else { 1.0 };
    let mut members = vec![Vec::new(); n_bins];
    for &(d, v) in &points {
        let idx = (((d - lo) / width) as usize).min(n_bins - 1);
        members[idx].push(v);
    }
    let bins = members
        .iter()
        .enumerate()
        .map(|(i, vals)| {
            let (mean_variance, std_variance) = if vals.is_empty() { (f64::NAN, f64::NAN) } else { mean_and_std(vals) };
            DistanceBin {
                lower: lo + i as f64 * width,
                upper: lo + (i + 1) as f64 * width,
                count: vals.len(),
                mean_variance,
                std_variance,
            }
        })
        .collect();
    let half = window.max(1) / 2;
    let moving_average = (0..points.len())
        .map(|i| {
            let start = i.saturating_sub(half);
            let end = (i + half + 1).min(points.len());
            let vals: Vec<f64> = points[start..end].iter().map(|p| p.1).collect();
            let (mean_variance, std_variance) = mean_and_std(&vals);
            MovingPoint {
                distance: points[i].0,
                mean_variance,
                std_variance,
            }
        })
        .collect();
    Ok(VarianceReport { bins, moving_average })
}
