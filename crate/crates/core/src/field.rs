//! Frustum-aligned feature volumes, multi-view aggregation and the density /
//! feature decoder.

use nalgebra::Point3;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{project, Camera};
use crate::rng::{self, Purpose};

pub const DEFAULT_CHANNELS: usize = 16;
pub const DEFAULT_DEPTH_SLICES: usize = 64;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("no conditioning views")]
    NoConditioningViews,
    #[error("channel count mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("volume buffer holds {actual} values, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("softmax-weighted aggregation needs at least two channels (features + logit)")]
    MissingLogit,
    #[error("invalid layer shapes: {0}")]
    LayerShape(String),
}

/// Latent grid over a source camera frustum, stored `c × d × h × w`.
///
/// Depth slices are uniform in camera-space depth over `[near, far]` with
/// slice `k` centered at `near + (k + 0.5)·(far − near)/d`; rows and columns
/// follow the camera's pixel centers.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    camera: Camera,
    channels: usize,
    depth_slices: usize,
    data: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(
        camera: Camera,
        channels: usize,
        depth_slices: usize,
        data: Vec<f64>,
    ) -> Result<Self, FieldError> {
        let expected = channels * depth_slices * camera.height() * camera.width();
        if data.len() != expected || channels == 0 || depth_slices == 0 {
            return Err(FieldError::BufferLength {
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite("feature volume"));
        }
        Ok(Self {
            camera,
            channels,
            depth_slices,
            data,
        })
    }

    /// Fills the volume by evaluating `f` at every voxel center.
    pub fn from_fn(
        camera: Camera,
        channels: usize,
        depth_slices: usize,
        mut f: impl FnMut(Point3<f64>) -> Vec<f64>,
    ) -> Result<Self, FieldError> {
        let (h, w) = (camera.height(), camera.width());
        let mut data = vec![0.0; channels * depth_slices * h * w];
        let plane = depth_slices * h * w;
        for k in 0..depth_slices {
            for row in 0..h {
                for col in 0..w {
                    let center = voxel_center(&camera, depth_slices, k, row, col);
                    let values = f(center);
                    if values.len() != channels {
                        return Err(FieldError::ChannelMismatch {
                            expected: channels,
                            actual: values.len(),
                        });
                    }
                    let offset = (k * h + row) * w + col;
                    for (c, v) in values.into_iter().enumerate() {
                        data[c * plane + offset] = v;
                    }
                }
            }
        }
        Self::new(camera, channels, depth_slices, data)
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn depth_slices(&self) -> usize {
        self.depth_slices
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `[c, d, h, w]`
    pub fn dims(&self) -> [usize; 4] {
        [
            self.channels,
            self.depth_slices,
            self.camera.height(),
            self.camera.width(),
        ]
    }

    #[inline]
    fn offset(&self, channel: usize, k: usize, row: usize, col: usize) -> usize {
        ((channel * self.depth_slices + k) * self.camera.height() + row) * self.camera.width() + col
    }

    pub fn voxel(&self, k: usize, row: usize, col: usize) -> Vec<f64> {
        (0..self.channels)
            .map(|c| self.data[self.offset(c, k, row, col)])
            .collect()
    }

    pub fn voxel_center(&self, k: usize, row: usize, col: usize) -> Point3<f64> {
        voxel_center(&self.camera, self.depth_slices, k, row, col)
    }

    /// Mutable access for tests and tools that edit single voxels.
    pub fn set(&mut self, channel: usize, k: usize, row: usize, col: usize, value: f64) {
        let i = self.offset(channel, k, row, col);
        self.data[i] = value;
    }
}

fn voxel_center(camera: &Camera, depth_slices: usize, k: usize, row: usize, col: usize) -> Point3<f64> {
    let slice = (camera.far() - camera.near()) / depth_slices as f64;
    let depth = camera.near() + (k as f64 + 0.5) * slice;
    camera.unproject(col as f64 + 0.5, row as f64 + 0.5, depth)
}

/// Linear interpolation stencil along one axis with clamp-to-edge.
#[inline]
fn stencil(coord: f64, n: usize) -> (usize, usize, f64) {
    let x = coord.clamp(0.0, (n - 1) as f64);
    let i0 = (x.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, x - i0 as f64)
}

/// Trilinear sample of `volume` at a world point; zero outside the frustum.
pub fn sample_volume(volume: &FeatureVolume, point: &Point3<f64>) -> Vec<f64> {
    let mut out = vec![0.0; volume.channels];
    sample_volume_into(volume, point, &mut out);
    out
}

fn sample_volume_into(volume: &FeatureVolume, point: &Point3<f64>, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let cam = &volume.camera;
    let p = project(point, cam);
    if !p.in_image(cam) || p.depth < cam.near() || p.depth > cam.far() {
        return;
    }
    let (h, w, d) = (cam.height(), cam.width(), volume.depth_slices);
    let z = (p.depth - cam.near()) / (cam.far() - cam.near()) * d as f64 - 0.5;
    let (x0, x1, fx) = stencil(p.u - 0.5, w);
    let (y0, y1, fy) = stencil(p.v - 0.5, h);
    let (z0, z1, fz) = stencil(z, d);
    let corners = [
        (z0, y0, x0, (1.0 - fz) * (1.0 - fy) * (1.0 - fx)),
        (z0, y0, x1, (1.0 - fz) * (1.0 - fy) * fx),
        (z0, y1, x0, (1.0 - fz) * fy * (1.0 - fx)),
        (z0, y1, x1, (1.0 - fz) * fy * fx),
        (z1, y0, x0, fz * (1.0 - fy) * (1.0 - fx)),
        (z1, y0, x1, fz * (1.0 - fy) * fx),
        (z1, y1, x0, fz * fy * (1.0 - fx)),
        (z1, y1, x1, fz * fy * fx),
    ];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for &(k, row, col, weight) in &corners {
            if weight != 0.0 {
                acc += weight * volume.data[volume.offset(c, k, row, col)];
            }
        }
        *slot = acc;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregationMode {
    #[default]
    Mean,
    Max,
    /// The last channel of every volume is a logit; the remaining channels are
    /// averaged with softmax weights over views.
    SoftmaxWeighted,
}

impl AggregationMode {
    /// Feature width produced from volumes with `volume_channels` channels.
    pub fn output_channels(self, volume_channels: usize) -> usize {
        match self {
            AggregationMode::SoftmaxWeighted => volume_channels.saturating_sub(1),
            _ => volume_channels,
        }
    }
}

fn check_volumes(volumes: &[FeatureVolume], mode: AggregationMode) -> Result<usize, FieldError> {
    let first = volumes.first().ok_or(FieldError::NoConditioningViews)?;
    let c = first.channels;
    if let Some(v) = volumes.iter().find(|v| v.channels != c) {
        return Err(FieldError::ChannelMismatch {
            expected: c,
            actual: v.channels,
        });
    }
    if mode == AggregationMode::SoftmaxWeighted && c < 2 {
        return Err(FieldError::MissingLogit);
    }
    Ok(c)
}

/// Combines per-view samples at `point`. Reductions run in list order.
pub fn aggregate(
    volumes: &[FeatureVolume],
    point: &Point3<f64>,
    mode: AggregationMode,
) -> Result<Vec<f64>, FieldError> {
    check_volumes(volumes, mode)?;
    let samples: Vec<Vec<f64>> = volumes.iter().map(|v| sample_volume(v, point)).collect();
    Ok(reduce_samples(&samples, mode))
}

fn reduce_samples(samples: &[Vec<f64>], mode: AggregationMode) -> Vec<f64> {
    let n = samples.len();
    match mode {
        AggregationMode::Mean => {
            let mut acc = samples[0].clone();
            for s in &samples[1..] {
                acc.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            }
            if n > 1 {
                let scale = 1.0 / n as f64;
                acc.iter_mut().for_each(|a| *a *= scale);
            }
            acc
        }
        AggregationMode::Max => {
            let mut acc = samples[0].clone();
            for s in &samples[1..] {
                acc.iter_mut().zip(s).for_each(|(a, &b)| *a = a.max(b));
            }
            acc
        }
        AggregationMode::SoftmaxWeighted => {
            let c = samples[0].len() - 1;
            let peak = samples
                .iter()
                .map(|s| s[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = samples.iter().map(|s| (s[c] - peak).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut acc = vec![0.0; c];
            for (s, w) in samples.iter().zip(&weights) {
                let w = w / total;
                acc.iter_mut().zip(&s[..c]).for_each(|(a, b)| *a += w * b);
            }
            acc
        }
    }
}

/// Fully connected layer, weights stored row-major `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self, FieldError> {
        if weights.len() != inputs * outputs || bias.len() != outputs {
            return Err(FieldError::LayerShape(format!(
                "{outputs}x{inputs} layer given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite("decoder parameters"));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    #[inline]
    pub fn weight(&self, out: usize, input: usize) -> f64 {
        self.weights[out * self.inputs + input]
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            *slot = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// Density and feature at a point in space.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPoint {
    pub tau: f64,
    pub feature: Vec<f64>,
}

/// Three-layer ReLU MLP `c → hidden → hidden → 1 + c` whose input is also
/// added to the feature part of the output.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderMlp {
    layers: [Dense; 3],
}

impl DecoderMlp {
    pub fn new(first: Dense, second: Dense, third: Dense) -> Result<Self, FieldError> {
        let c = first.inputs;
        let ok = second.inputs == first.outputs
            && third.inputs == second.outputs
            && third.outputs == c + 1;
        if !ok {
            return Err(FieldError::LayerShape(format!(
                "layers {}→{}, {}→{}, {}→{} do not chain as c→h→h→c+1",
                first.inputs, first.outputs, second.inputs, second.outputs, third.inputs, third.outputs
            )));
        }
        Ok(Self {
            layers: [first, second, third],
        })
    }

    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            layers: [
                Dense::zeros(channels, hidden),
                Dense::zeros(hidden, hidden),
                Dense::zeros(hidden, channels + 1),
            ],
        }
    }

    /// He-initialized weights and small biases drawn from a seeded stream.
    pub fn random(channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::Misc, 0);
        let mut layer = |inputs: usize, outputs: usize| {
            let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).unwrap();
            let weights = (0..inputs * outputs).map(|_| normal.sample(&mut rng)).collect();
            let bias = (0..outputs).map(|_| rng.random_range(-0.1..0.1)).collect();
            Dense {
                inputs,
                outputs,
                weights,
                bias,
            }
        };
        let first = layer(channels, hidden);
        let second = layer(hidden, hidden);
        let third = layer(hidden, channels + 1);
        Self {
            layers: [first, second, third],
        }
    }

    pub fn channels(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].outputs
    }

    pub fn layers(&self) -> &[Dense; 3] {
        &self.layers
    }

    fn check_input(&self, w: &[f64]) -> Result<(), FieldError> {
        if w.len() != self.channels() {
            return Err(FieldError::ChannelMismatch {
                expected: self.channels(),
                actual: w.len(),
            });
        }
        Ok(())
    }

    /// Network output before the skip connection and density activation,
    /// along with both hidden pre-activations.
    fn forward(&self, w: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let [l1, l2, l3] = &self.layers;
        let mut pre1 = vec![0.0; l1.outputs];
        l1.apply(w, &mut pre1);
        let act1: Vec<f64> = pre1.iter().map(|v| v.max(0.0)).collect();
        let mut pre2 = vec![0.0; l2.outputs];
        l2.apply(&act1, &mut pre2);
        let act2: Vec<f64> = pre2.iter().map(|v| v.max(0.0)).collect();
        let mut raw = vec![0.0; l3.outputs];
        l3.apply(&act2, &mut raw);
        (raw, pre1, pre2)
    }

    pub fn raw_output(&self, w: &[f64]) -> Result<Vec<f64>, FieldError> {
        self.check_input(w)?;
        Ok(self.forward(w).0)
    }
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    // ln(eʸ − 1) = y + ln(1 − e⁻ʸ)
    y + (-(-y).exp_m1()).ln()
}

pub fn decode(mlp: &DecoderMlp, w: &[f64]) -> Result<DecodedPoint, FieldError> {
    let raw = mlp.raw_output(w)?;
    let tau = softplus(raw[0]);
    let feature = raw[1..].iter().zip(w).map(|(r, x)| r + x).collect();
    Ok(DecodedPoint { tau, feature })
}

/// Row-major `(1 + c) × c` Jacobian of the raw network output.
///
/// ReLU derivatives are taken as 0 at the kink.
pub fn decoder_jacobian(mlp: &DecoderMlp, w: &[f64]) -> Result<Vec<f64>, FieldError> {
    mlp.check_input(w)?;
    let (_, pre1, pre2) = mlp.forward(w);
    let [l1, l2, l3] = &mlp.layers;
    let c = l1.inputs;
    // d act1 / d w : hidden × c
    let mut j1 = vec![0.0; l1.outputs * c];
    for h in 0..l1.outputs {
        if pre1[h] > 0.0 {
            for i in 0..c {
                j1[h * c + i] = l1.weight(h, i);
            }
        }
    }
    let mut j2 = vec![0.0; l2.outputs * c];
    for h in 0..l2.outputs {
        if pre2[h] > 0.0 {
            for k in 0..l2.inputs {
                let wk = l2.weight(h, k);
                if wk != 0.0 {
                    for i in 0..c {
                        j2[h * c + i] += wk * j1[k * c + i];
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; l3.outputs * c];
    for o in 0..l3.outputs {
        for k in 0..l3.inputs {
            let wk = l3.weight(o, k);
            if wk != 0.0 {
                for i in 0..c {
                    out[o * c + i] += wk * j2[k * c + i];
                }
            }
        }
    }
    Ok(out)
}

/// Anything that can be queried for density and feature in world space.
pub trait FeatureField: Sync {
    fn channels(&self) -> usize;
    fn query(&self, point: &Point3<f64>) -> DecodedPoint;
}

/// Feature field defined by a set of conditioning volumes and a decoder.
#[derive(Debug, Clone)]
pub struct VolumeField {
    volumes: Vec<FeatureVolume>,
    mlp: DecoderMlp,
    mode: AggregationMode,
}

impl VolumeField {
    pub fn new(volumes: Vec<FeatureVolume>, mlp: DecoderMlp, mode: AggregationMode) -> Result<Self, FieldError> {
        let c = check_volumes(&volumes, mode)?;
        let expected = mode.output_channels(c);
        if expected != mlp.channels() {
            return Err(FieldError::ChannelMismatch {
                expected: mlp.channels(),
                actual: expected,
            });
        }
        Ok(Self { volumes, mlp, mode })
    }

    pub fn volumes(&self) -> &[FeatureVolume] {
        &self.volumes
    }

    pub fn mlp(&self) -> &DecoderMlp {
        &self.mlp
    }

    pub fn mode(&self) -> AggregationMode {
        self.mode
    }
}

impl FeatureField for VolumeField {
    fn channels(&self) -> usize {
        self.mlp.channels()
    }

    fn query(&self, point: &Point3<f64>) -> DecodedPoint {
        let samples: Vec<Vec<f64>> = self.volumes.iter().map(|v| sample_volume(v, point)).collect();
        let w = reduce_samples(&samples, self.mode);
        decode(&self.mlp, &w).expect("channel counts validated at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Vector3};
    use proptest::prelude::*;

    fn camera() -> Camera {
        Camera::new(Matrix4::identity(), 60.0, 5, 4, 1.0, 3.0).unwrap()
    }

    fn ramp_volume(channels: usize, depth: usize, seed: f64) -> FeatureVolume {
        let cam = camera();
        let n = channels * depth * cam.height() * cam.width();
        let data = (0..n).map(|i| ((i as f64 + seed) * 0.731).sin()).collect();
        FeatureVolume::new(cam, channels, depth, data).unwrap()
    }

    #[test]
    fn voxel_centers_are_interpolation_nodes() {
        let vol = ramp_volume(3, 6, 0.0);
        for k in 0..6 {
            for row in 0..4 {
                for col in 0..5 {
                    let got = sample_volume(&vol, &vol.voxel_center(k, row, col));
                    for (a, b) in got.iter().zip(vol.voxel(k, row, col)) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn depth_midpoint_averages_neighbors() {
        let vol = ramp_volume(2, 6, 1.0);
        let a = vol.voxel_center(2, 1, 3);
        let b = vol.voxel_center(3, 1, 3);
        let mid = Point3::from((a.coords + b.coords) * 0.5);
        let got = sample_volume(&vol, &mid);
        let (va, vb) = (vol.voxel(2, 1, 3), vol.voxel(3, 1, 3));
        for c in 0..2 {
            assert!((got[c] - 0.5 * (va[c] + vb[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn outside_frustum_is_zero() {
        let vol = ramp_volume(2, 4, 0.0);
        assert_eq!(sample_volume(&vol, &Point3::new(0.0, 0.0, -2.0)), vec![0.0, 0.0]);
        assert_eq!(sample_volume(&vol, &Point3::new(0.0, 0.0, 0.5)), vec![0.0, 0.0]);
        assert_eq!(sample_volume(&vol, &Point3::new(0.0, 0.0, 3.5)), vec![0.0, 0.0]);
        assert_eq!(sample_volume(&vol, &Point3::new(50.0, 0.0, 2.0)), vec![0.0, 0.0]);
    }

    #[test]
    fn sampling_only_touches_enclosing_cell() {
        let mut vol = ramp_volume(1, 6, 0.0);
        let a = vol.voxel_center(2, 1, 1);
        let b = vol.voxel_center(3, 2, 2);
        let p = Point3::from(a.coords * 0.3 + b.coords * 0.7);
        let before = sample_volume(&vol, &p);
        vol.set(0, 4, 1, 1, 100.0);
        vol.set(0, 2, 3, 2, -100.0);
        vol.set(0, 0, 0, 0, 100.0);
        assert_eq!(sample_volume(&vol, &p), before);
        vol.set(0, 3, 2, 2, 100.0);
        assert_ne!(sample_volume(&vol, &p), before);
    }

    #[test]
    fn aggregation_modes() {
        let cam = camera();
        let e = |c: usize| {
            FeatureVolume::from_fn(cam.clone(), 3, 2, move |_| {
                let mut v = vec![0.0; 3];
                v[c] = 1.0;
                v
            })
            .unwrap()
        };
        let p = cam.unproject(2.5, 2.0, 2.0);
        let volumes = vec![e(0), e(1)];
        assert_eq!(aggregate(&volumes, &p, AggregationMode::Mean).unwrap(), vec![0.5, 0.5, 0.0]);
        assert_eq!(aggregate(&volumes, &p, AggregationMode::Max).unwrap(), vec![1.0, 1.0, 0.0]);
        // Equal (zero) logits in channel 2.
        let soft = aggregate(&volumes, &p, AggregationMode::SoftmaxWeighted).unwrap();
        assert!((soft[0] - 0.5).abs() < 1e-15 && (soft[1] - 0.5).abs() < 1e-15);
        assert_eq!(aggregate(&[], &p, AggregationMode::Mean), Err(FieldError::NoConditioningViews));
    }

    #[test]
    fn single_view_aggregation_is_sampling() {
        let vol = ramp_volume(4, 5, 2.0);
        let p = vol.camera().unproject(1.3, 2.9, 1.77);
        let single = sample_volume(&vol, &p);
        let vols = [vol];
        for mode in [AggregationMode::Mean, AggregationMode::Max] {
            assert_eq!(aggregate(&vols, &p, mode).unwrap(), single);
        }
        let soft = aggregate(&vols, &p, AggregationMode::SoftmaxWeighted).unwrap();
        assert_eq!(soft, single[..3].to_vec());
    }

    #[test]
    fn decoder_zero_weights_is_pure_skip() {
        let mlp = DecoderMlp::zeros(16, 64);
        let w: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.7).collect();
        let out = decode(&mlp, &w).unwrap();
        assert_eq!(out.feature, w);
        assert!((out.tau - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(decoder_jacobian(&mlp, &w).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn density_tail_is_transparent() {
        let mut third = Dense::zeros(64, 17);
        third.bias[0] = -40.0;
        let mlp = DecoderMlp::new(Dense::zeros(16, 64), Dense::zeros(64, 64), third).unwrap();
        let tau = decode(&mlp, &[0.0; 16]).unwrap().tau;
        assert!(tau > 0.0 && tau < 1e-17);
    }

    #[test]
    fn decoder_rejects_bad_parameters() {
        let mut w = vec![0.0; 16 * 64];
        w[3] = f64::NAN;
        assert_eq!(Dense::new(16, 64, w, vec![0.0; 64]), Err(FieldError::NonFinite("decoder parameters")));
        assert!(DecoderMlp::new(Dense::zeros(16, 64), Dense::zeros(64, 64), Dense::zeros(64, 16)).is_err());
        assert!(decode(&DecoderMlp::zeros(16, 64), &[0.0; 15]).is_err());
    }

    #[test]
    fn jacobian_of_linear_regime_is_weight_product() {
        // Large positive biases keep every hidden unit active.
        let base = DecoderMlp::random(4, 8, 11);
        let [l1, l2, l3] = base.layers().clone();
        let l1 = Dense::new(4, 8, l1.weights.clone(), vec![50.0; 8]).unwrap();
        let l2 = Dense::new(8, 8, l2.weights.clone(), vec![500.0; 8]).unwrap();
        let mlp = DecoderMlp::new(l1.clone(), l2.clone(), l3.clone()).unwrap();
        let jac = decoder_jacobian(&mlp, &[0.1, -0.2, 0.3, 0.05]).unwrap();
        for o in 0..5 {
            for i in 0..4 {
                let mut expected = 0.0;
                for a in 0..8 {
                    for b in 0..8 {
                        expected += l3.weight(o, a) * l2.weight(a, b) * l1.weight(b, i);
                    }
                }
                assert!((jac[o * 4 + i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for &y in &[1e-8, 1e-3, 0.5, 1.0, 7.0, 40.0] {
            let x = softplus_inverse(y);
            assert!((softplus(x) - y).abs() <= 1e-12 * y.max(1e-3), "{y}");
        }
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
    }

    #[test]
    fn volume_field_checks_channels() {
        let vol = ramp_volume(4, 2, 0.0);
        let mlp = DecoderMlp::zeros(4, 8);
        assert!(VolumeField::new(vec![vol.clone()], mlp.clone(), AggregationMode::Mean).is_ok());
        assert!(VolumeField::new(vec![vol.clone()], mlp, AggregationMode::SoftmaxWeighted).is_err());
        assert!(VolumeField::new(vec![vol], DecoderMlp::zeros(3, 8), AggregationMode::SoftmaxWeighted).is_ok());
        assert_eq!(
            VolumeField::new(vec![], DecoderMlp::zeros(3, 8), AggregationMode::Mean).unwrap_err(),
            FieldError::NoConditioningViews
        );
    }

    proptest! {
        #[test]
        fn tau_nonnegative_and_skip_exact(seed in 0u64..500, scale in 0.1f64..5.0) {
            let mlp = DecoderMlp::random(16, 64, seed);
            let w: Vec<f64> = (0..16).map(|i| scale * ((i as f64 + seed as f64) * 1.37).sin()).collect();
            let out = decode(&mlp, &w).unwrap();
            let raw = mlp.raw_output(&w).unwrap();
            prop_assert!(out.tau >= 0.0);
            for i in 0..16 {
                prop_assert_eq!(out.feature[i], raw[i + 1] + w[i]);
            }
        }

        #[test]
        fn aggregation_is_permutation_invariant(rot in 0usize..3, y in 1.0f64..3.0, x in -0.4f64..0.4) {
            let mut volumes: Vec<_> = (0..3).map(|i| ramp_volume(3, 5, i as f64 * 3.1)).collect();
            let p = Point3::from(Vector3::new(x, 0.1, y));
            let reference: Vec<_> = [AggregationMode::Mean, AggregationMode::Max, AggregationMode::SoftmaxWeighted]
                .iter().map(|&m| aggregate(&volumes, &p, m).unwrap()).collect();
            volumes.rotate_left(rot);
            volumes.swap(0, 2);
            for (m, expected) in [AggregationMode::Mean, AggregationMode::Max, AggregationMode::SoftmaxWeighted].iter().zip(&reference) {
                let got = aggregate(&volumes, &p, *m).unwrap();
                for (a, b) in got.iter().zip(expected) {
                    if *m == AggregationMode::Max {
                        prop_assert_eq!(a, b);
                    } else {
                        prop_assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
