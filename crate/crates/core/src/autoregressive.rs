//! Conditioning-frame selection and autoregressive sequence generation.
//!
//! Each generated frame renders its feature image exactly once and reuses it
//! for every denoising step; only stochastic conditioning re-renders, and then
//! once per distinct drawn frame.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoisers::Denoiser;
use crate::diffusion::{
    build_schedule, gaussian_image, guided_eval, heun_integrate, Conditioning, GuidanceConfig,
    NoiseSchedule, SampleError, ScheduleError,
};
use crate::field::{AggregationMode, DecoderMlp, FeatureVolume, FieldError, VolumeField};
use crate::geometry::Camera;
use crate::harness::augment::null_feature;
use crate::harness::encode::{synthetic_decoder, synthetic_encode};
use crate::harness::scene::ToyScene;
use crate::harness::Frame;
use crate::image::Image;
use crate::renderer::{render_feature_image, FeatureImage, RenderConfig};
use crate::rng::{self, Purpose};

/// Reference to a frame available for conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameRef {
    Input(usize),
    Generated(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant")]
pub enum ConditioningPolicy {
    InputsOnly,
    PreviousOnly,
    Baseline { k_random: usize },
    LongRange { window: usize, k_random: usize, stride: usize },
    TwoPass { window: usize, k_random: usize },
    Stochastic { steps: usize },
}

impl ConditioningPolicy {
    pub fn baseline() -> Self {
        Self::Baseline { k_random: 5 }
    }

    pub fn long_range() -> Self {
        Self::LongRange {
            window: 20,
            k_random: 5,
            stride: 15,
        }
    }

    pub fn two_pass() -> Self {
        Self::TwoPass { window: 4, k_random: 5 }
    }

    pub fn stochastic() -> Self {
        Self::Stochastic { steps: 256 }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let ok = match *self {
            Self::Baseline { k_random } => k_random > 0,
            Self::LongRange { window, k_random, stride } => window > 0 && k_random > 0 && stride > 0,
            Self::TwoPass { window, k_random } => window > 0 && k_random > 0,
            Self::Stochastic { steps } => steps > 0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(PipelineError::Policy(format!("{self:?} needs positive parameters")))
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no input frames")]
    NoInputs,
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("frame {frame}: {source}")]
    Field {
        frame: usize,
        #[source]
        source: FieldError,
    },
    #[error("frame {frame}: {source}")]
    Sample {
        frame: usize,
        #[source]
        source: SampleError,
    },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Frames visible to the policy while generating the next frame.
#[derive(Debug, Clone)]
pub struct SequenceState {
    inputs: Vec<Frame>,
    generated: Vec<Frame>,
}

impl SequenceState {
    pub fn new(inputs: Vec<Frame>) -> Result<Self, PipelineError> {
        if inputs.is_empty() {
            return Err(PipelineError::NoInputs);
        }
        Ok(Self {
            inputs,
            generated: Vec::new(),
        })
    }

    /// Index of the frame about to be generated.
    pub fn step(&self) -> usize {
        self.generated.len()
    }

    pub fn inputs(&self) -> &[Frame] {
        &self.inputs
    }

    pub fn generated(&self) -> &[Frame] {
        &self.generated
    }

    pub fn push(&mut self, frame: Frame) {
        self.generated.push(frame);
    }

    pub fn frame(&self, r: FrameRef) -> &Frame {
        match r {
            FrameRef::Input(i) => &self.inputs[i],
            FrameRef::Generated(i) => &self.generated[i],
        }
    }

    /// Every frame, inputs first.
    pub fn all_refs(&self) -> Vec<FrameRef> {
        (0..self.inputs.len())
            .map(FrameRef::Input)
            .chain((0..self.generated.len()).map(FrameRef::Generated))
            .collect()
    }
}

fn input_refs(state: &SequenceState) -> Vec<FrameRef> {
    (0..state.inputs.len()).map(FrameRef::Input).collect()
}

/// Up to `k` distinct indices drawn uniformly from `pool`, in draw order.
fn draw_without_replacement(pool: std::ops::Range<usize>, k: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let n = pool.len();
    if n <= k {
        return pool.collect();
    }
    index::sample(rng, n, k).into_iter().map(|i| pool.start + i).collect()
}

fn dedup(refs: Vec<FrameRef>) -> Vec<FrameRef> {
    let mut seen = std::collections::HashSet::new();
    refs.into_iter().filter(|r| seen.insert(*r)).collect()
}

/// Frames to condition the next frame on. Only frames generated before the
/// current step are ever referenced.
pub fn select_conditioning(policy: &ConditioningPolicy, state: &SequenceState, rng: &mut rng::Rng) -> Vec<FrameRef> {
    let step = state.step();
    let mut refs = input_refs(state);
    if step == 0 {
        return refs;
    }
    let last = step - 1;
    match *policy {
        ConditioningPolicy::InputsOnly => {}
        ConditioningPolicy::PreviousOnly => refs = vec![FrameRef::Generated(last)],
        ConditioningPolicy::Baseline { k_random } | ConditioningPolicy::TwoPass { k_random, .. } => {
            refs.push(FrameRef::Generated(last));
            refs.extend(draw_without_replacement(0..last, k_random, rng).into_iter().map(FrameRef::Generated));
        }
        ConditioningPolicy::LongRange { window, k_random, stride } => {
            refs.push(FrameRef::Generated(last));
            let start = last.saturating_sub(window - 1);
            refs.extend(draw_without_replacement(start..last, k_random, rng).into_iter().map(FrameRef::Generated));
            refs.extend((0..step).step_by(stride).map(FrameRef::Generated));
        }
        ConditioningPolicy::Stochastic { .. } => refs = state.all_refs(),
    }
    dedup(refs)
}

/// First-pass frames nearest to `index` by trajectory position, ties toward
/// earlier frames.
pub fn second_pass_conditioning(index: usize, len: usize, window: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by_key(|&j| (j.abs_diff(index), j));
    order.truncate(window);
    order.sort_unstable();
    order
}

/// Produces a feature volume from a posed frame.
pub trait Encoder: Sync {
    fn encode(&self, frame: &Frame) -> Result<FeatureVolume, FieldError>;
}

/// Encodes the analytic scene on the frame camera's frustum.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    pub scene: ToyScene,
    pub channels: usize,
    pub depth_slices: usize,
    pub logit_channel: bool,
}

impl SyntheticEncoder {
    pub fn new(scene: ToyScene, depth_slices: usize) -> Self {
        Self {
            channels: scene.channels(),
            scene,
            depth_slices,
            logit_channel: false,
        }
    }

    pub fn decoder(&self) -> DecoderMlp {
        synthetic_decoder(self.channels)
    }
}

impl Encoder for SyntheticEncoder {
    fn encode(&self, frame: &Frame) -> Result<FeatureVolume, FieldError> {
        synthetic_encode(&self.scene, &frame.camera, self.channels, self.depth_slices, self.logit_channel)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub guidance: GuidanceConfig,
    /// Replace the Heun loop with a single denoiser call.
    pub one_step: bool,
    /// One-step inference from the zero image instead of noise.
    pub deterministic_start: bool,
    pub seed: u64,
}

/// Encoder, decoder, renderer and denoiser wired together.
pub struct Pipeline {
    pub encoder: Box<dyn Encoder>,
    pub decoder: DecoderMlp,
    pub mode: AggregationMode,
    pub denoiser: Box<dyn Denoiser>,
    pub render: RenderConfig,
    pub sampler: SamplerConfig,
    renders: AtomicUsize,
}

/// Stream index for frame `frame` of pass `pass`.
fn frame_stream(pass: usize, frame: usize) -> u64 {
    ((pass as u64) << 32) | frame as u64
}

impl Pipeline {
    pub fn new(
        encoder: Box<dyn Encoder>,
        decoder: DecoderMlp,
        mode: AggregationMode,
        denoiser: Box<dyn Denoiser>,
        render: RenderConfig,
        sampler: SamplerConfig,
    ) -> Self {
        Self {
            encoder,
            decoder,
            mode,
            denoiser,
            render,
            sampler,
            renders: AtomicUsize::new(0),
        }
    }

    /// Feature images rendered so far.
    pub fn render_count(&self) -> usize {
        self.renders.load(Ordering::Relaxed)
    }

    fn render_config(&self, pass: usize, frame: usize) -> RenderConfig {
        RenderConfig {
            rng_seed: self
                .render
                .rng_seed
                .wrapping_add(frame_stream(pass, frame).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            ..self.render.clone()
        }
    }

    /// Renders the feature image for `target` from the given volumes.
    pub fn render_features(
        &self,
        volumes: Vec<FeatureVolume>,
        target: &Camera,
        pass: usize,
        frame: usize,
    ) -> Result<FeatureImage, PipelineError> {
        let field = VolumeField::new(volumes, self.decoder.clone(), self.mode)
            .map_err(|source| PipelineError::Field { frame, source })?;
        self.renders.fetch_add(1, Ordering::Relaxed);
        Ok(render_feature_image(&field, target, &self.render_config(pass, frame)))
    }

    /// Null conditioning paired with `feature` for frame `frame` of pass
    /// `pass`; it is what unconditional evaluations see.
    pub fn null_conditioning(&self, feature: &FeatureImage, pass: usize, frame: usize) -> FeatureImage {
        null_feature(
            feature,
            &mut rng::stream(self.sampler.seed, Purpose::NullConditioning, frame_stream(pass, frame)),
        )
    }

    fn null_feature(&self, feature: &FeatureImage, pass: usize, frame: usize) -> Option<FeatureImage> {
        (self.sampler.guidance.g != 0.0).then(|| self.null_conditioning(feature, pass, frame))
    }

    /// Samples one image for `target` from a precomputed feature image.
    pub fn sample_with_features(
        &self,
        feature: &FeatureImage,
        target: &Camera,
        pass: usize,
        frame: usize,
    ) -> Result<Image, PipelineError> {
        let null = self.null_feature(feature, pass, frame);
        let cond = Conditioning {
            feature: Some(feature),
            null_feature: null.as_ref(),
            camera: Some(target),
        };
        let shape = (3, target.height(), target.width());
        let mut noise = rng::stream(self.sampler.seed, Purpose::InitialNoise, frame_stream(pass, frame));
        let schedule = &self.sampler.schedule;
        let result = if self.sampler.one_step {
            // Same start as one-step inference, with guidance applied to the single evaluation.
            let sigma = schedule.sigma_max();
            let y0 = if self.sampler.deterministic_start {
                Image::zeros(shape.0, shape.1, shape.2)
            } else {
                gaussian_image(shape, sigma, &mut noise)
            };
            guided_eval(self.denoiser.as_ref(), &y0, sigma, &cond, self.sampler.guidance)
                .map_err(|source| SampleError { step: 0, source })
        } else {
            let y0 = gaussian_image(shape, schedule.sigmas()[0], &mut noise);
            heun_integrate(y0, schedule, |_, y, sigma| {
                guided_eval(self.denoiser.as_ref(), y, sigma, &cond, self.sampler.guidance)
            })
        };
        result.map_err(|source| PipelineError::Sample { frame, source })
    }

    /// Encodes the referenced frames and renders their feature image once.
    pub fn conditioning_feature(
        &self,
        refs: &[FrameRef],
        state: &SequenceState,
        cache: &mut VolumeCache,
        target: &Camera,
        pass: usize,
        frame: usize,
    ) -> Result<FeatureImage, PipelineError> {
        let volumes = refs
            .iter()
            .map(|r| cache.get(self.encoder.as_ref(), state, *r).map_err(|source| PipelineError::Field { frame, source }))
            .collect::<Result<Vec<_>, _>>()?;
        self.render_features(volumes, target, pass, frame)
    }

    /// Encodes the referenced frames, renders once and samples.
    pub fn sample_frame(
        &self,
        refs: &[FrameRef],
        state: &SequenceState,
        cache: &mut VolumeCache,
        target: &Camera,
        pass: usize,
        frame: usize,
    ) -> Result<Image, PipelineError> {
        let feature = self.conditioning_feature(refs, state, cache, target, pass, frame)?;
        self.sample_with_features(&feature, target, pass, frame)
    }
}

/// Encoded volumes keyed by frame, valid for one sequence pass.
#[derive(Debug, Default)]
pub struct VolumeCache {
    volumes: HashMap<FrameRef, FeatureVolume>,
}

impl VolumeCache {
    pub fn get(&mut self, encoder: &dyn Encoder, state: &SequenceState, r: FrameRef) -> Result<FeatureVolume, FieldError> {
        if let Some(v) = self.volumes.get(&r) {
            return Ok(v.clone());
        }
        let v = encoder.encode(state.frame(r))?;
        self.volumes.insert(r, v.clone());
        Ok(v)
    }
}

/// Heun sampling where every step conditions on one frame drawn uniformly
/// from all inputs and generated frames. Both evaluations inside a step share
/// the drawn frame.
pub fn stochastic_conditioning_sample(
    pipeline: &Pipeline,
    target: &Camera,
    state: &SequenceState,
    steps: usize,
    frame: usize,
) -> Result<Image, PipelineError> {
    let base = &pipeline.sampler.schedule;
    let schedule = build_schedule(steps, base.sigma_max(), base.sigma_min(), base.rho())?;
    let pool = state.all_refs();
    let mut draws = rng::stream(pipeline.sampler.seed, Purpose::StochasticView, frame as u64);
    let mut cache = VolumeCache::default();
    let mut features: HashMap<FrameRef, (FeatureImage, Option<FeatureImage>)> = HashMap::new();
    let mut current: Option<(usize, FrameRef)> = None;
    let shape = (3, target.height(), target.width());
    let mut noise = rng::stream(pipeline.sampler.seed, Purpose::InitialNoise, frame_stream(0, frame));
    let y0 = gaussian_image(shape, schedule.sigmas()[0], &mut noise);
    let mut failure = None;
    let result = heun_integrate(y0, &schedule, |step, y, sigma| {
        let chosen = match current {
            Some((s, r)) if s == step => r,
            _ => {
                let r = pool[draws.random_range(0..pool.len())];
                current = Some((step, r));
                r
            }
        };
        if !features.contains_key(&chosen) {
            let rendered = cache
                .get(pipeline.encoder.as_ref(), state, chosen)
                .map_err(|source| PipelineError::Field { frame, source })
                .and_then(|v| pipeline.render_features(vec![v], target, 0, frame));
            match rendered {
                Ok(f) => {
                    let null = pipeline.null_feature(&f, 0, frame);
                    features.insert(chosen, (f, null));
                }
                Err(e) => {
                    failure = Some(e);
                    return Err(crate::denoisers::DenoiseError::Other("conditioning render failed".into()));
                }
            }
        }
        let (feature, null) = &features[&chosen];
        let cond = Conditioning {
            feature: Some(feature),
            null_feature: null.as_ref(),
            camera: Some(target),
        };
        guided_eval(pipeline.denoiser.as_ref(), y, sigma, &cond, pipeline.sampler.guidance)
    });
    if let Some(e) = failure {
        return Err(e);
    }
    result.map_err(|source| PipelineError::Sample { frame, source })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassRecord {
    /// Conditioning frames per generated frame. In a second pass,
    /// `Generated(j)` refers to first-pass frame `j`.
    pub conditioning: Vec<Vec<FrameRef>>,
}

#[derive(Debug, Clone)]
pub struct SequenceOutput {
    pub frames: Vec<Frame>,
    pub passes: Vec<PassRecord>,
}

/// Generates one frame per trajectory camera, in order.
pub fn generate_sequence(
    pipeline: &Pipeline,
    inputs: Vec<Frame>,
    trajectory: &[Camera],
    policy: &ConditioningPolicy,
) -> Result<SequenceOutput, PipelineError> {
    policy.validate()?;
    if trajectory.is_empty() {
        return Err(PipelineError::EmptyTrajectory);
    }
    let mut state = SequenceState::new(inputs)?;
    let mut cache = VolumeCache::default();
    let mut record = PassRecord {
        conditioning: Vec::with_capacity(trajectory.len()),
    };
    for (i, target) in trajectory.iter().enumerate() {
        let mut draws = rng::stream(pipeline.sampler.seed, Purpose::PolicyDraw, i as u64);
        let refs = select_conditioning(policy, &state, &mut draws);
        let image = match *policy {
            ConditioningPolicy::Stochastic { steps } => stochastic_conditioning_sample(pipeline, target, &state, steps, i)?,
            _ => pipeline.sample_frame(&refs, &state, &mut cache, target, 0, i)?,
        };
        record.conditioning.push(refs);
        state.push(Frame {
            image,
            camera: target.clone(),
        });
    }
    let mut passes = vec![record];
    let mut frames = state.generated;
    if let ConditioningPolicy::TwoPass { window, .. } = *policy {
        let first = SequenceState {
            inputs: state.inputs,
            generated: frames,
        };
        let mut cache = VolumeCache::default();
        let mut second = Vec::with_capacity(trajectory.len());
        let mut record = PassRecord {
            conditioning: Vec::with_capacity(trajectory.len()),
        };
        for (i, target) in trajectory.iter().enumerate() {
            let refs: Vec<FrameRef> = second_pass_conditioning(i, trajectory.len(), window)
                .into_iter()
                .map(FrameRef::Generated)
                .collect();
            let image = pipeline.sample_frame(&refs, &first, &mut cache, target, 1, i)?;
            record.conditioning.push(refs);
            second.push(Frame {
                image,
                camera: target.clone(),
            });
        }
        passes.push(record);
        frames = second;
    }
    Ok(SequenceOutput { frames, passes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Camera;
    use nalgebra::Matrix4;

    fn dummy_frame() -> Frame {
        Frame {
            image: Image::zeros(3, 1, 1),
            camera: Camera::new(Matrix4::identity(), 40.0, 1, 1, 0.5, 1.0).unwrap(),
        }
    }

    fn state_at(inputs: usize, step: usize) -> SequenceState {
        let mut s = SequenceState::new(vec![dummy_frame(); inputs]).unwrap();
        for _ in 0..step {
            s.push(dummy_frame());
        }
        s
    }

    fn draws(seed: u64, step: usize) -> rng::Rng {
        rng::stream(seed, Purpose::PolicyDraw, step as u64)
    }

    #[test]
    fn first_step_uses_inputs_only() {
        let state = state_at(2, 0);
        for policy in [
            ConditioningPolicy::InputsOnly,
            ConditioningPolicy::PreviousOnly,
            ConditioningPolicy::baseline(),
            ConditioningPolicy::long_range(),
            ConditioningPolicy::two_pass(),
            ConditioningPolicy::stochastic(),
        ] {
            assert_eq!(
                select_conditioning(&policy, &state, &mut draws(0, 0)),
                vec![FrameRef::Input(0), FrameRef::Input(1)]
            );
        }
    }

    #[test]
    fn previous_only_and_inputs_only() {
        let state = state_at(1, 4);
        assert_eq!(
            select_conditioning(&ConditioningPolicy::PreviousOnly, &state, &mut draws(0, 4)),
            vec![FrameRef::Generated(3)]
        );
        assert_eq!(
            select_conditioning(&ConditioningPolicy::InputsOnly, &state, &mut draws(0, 4)),
            vec![FrameRef::Input(0)]
        );
    }

    #[test]
    fn baseline_small_history_takes_everything() {
        let state = state_at(1, 4);
        let mut refs = select_conditioning(&ConditioningPolicy::baseline(), &state, &mut draws(3, 4));
        assert_eq!(refs[..2], [FrameRef::Input(0), FrameRef::Generated(3)]);
        refs[2..].sort();
        assert_eq!(refs[2..], [FrameRef::Generated(0), FrameRef::Generated(1), FrameRef::Generated(2)]);
    }

    #[test]
    fn long_range_stride_and_window() {
        let state = state_at(1, 40);
        let refs = select_conditioning(&ConditioningPolicy::long_range(), &state, &mut draws(1, 40));
        for idx in [0, 15, 30, 39] {
            assert!(refs.contains(&FrameRef::Generated(idx)));
        }
        let random: Vec<usize> = refs
            .iter()
            .filter_map(|r| match r {
                FrameRef::Generated(i) if ![0, 15, 30, 39].contains(i) => Some(*i),
                _ => None,
            })
            .collect();
        assert!(random.iter().all(|&i| (20..39).contains(&i)));
    }

    #[test]
    fn second_pass_window() {
        assert_eq!(second_pass_conditioning(0, 10, 4), vec![0, 1, 2, 3]);
        assert_eq!(second_pass_conditioning(5, 10, 4), vec![3, 4, 5, 6]);
        assert_eq!(second_pass_conditioning(9, 10, 4), vec![6, 7, 8, 9]);
        assert_eq!(second_pass_conditioning(1, 2, 4), vec![0, 1]);
    }

    #[test]
    fn policy_validation() {
        assert!(ConditioningPolicy::Baseline { k_random: 0 }.validate().is_err());
        assert!(ConditioningPolicy::Stochastic { steps: 0 }.validate().is_err());
        assert!(ConditioningPolicy::long_range().validate().is_ok());
    }
}
