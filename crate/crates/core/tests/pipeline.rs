use nalgebra::Point3;
use nvs_core::autoregressive::{
    generate_sequence, ConditioningPolicy, FrameRef, Pipeline, SamplerConfig, SyntheticEncoder,
};
use nvs_core::denoisers::{FeatureReadoutDenoiser, IdealSceneDenoiser};
use nvs_core::diffusion::{build_schedule, RHO, SIGMA_MAX, SIGMA_MIN};
use nvs_core::field::AggregationMode;
use nvs_core::geometry::Camera;
use nvs_core::harness::metrics::psnr;
use nvs_core::harness::scene::{render_ground_truth, ToyScene};
use nvs_core::harness::{angular_distance_deg, orbit, Frame};
use nvs_core::renderer::RenderConfig;

const RES: usize = 32;

fn cameras(angles: &[f64]) -> Vec<Camera> {
    orbit(Point3::origin(), 2.0, 10.0, angles, 40.0, RES, 1.0, 3.0).unwrap()
}

fn input_frames(scene: &ToyScene, cams: &[Camera]) -> Vec<Frame> {
    cams.iter()
        .map(|c| Frame {
            image: render_ground_truth(scene, c, 1024).image,
            camera: c.clone(),
        })
        .collect()
}

fn pipeline(scene: &ToyScene, ideal: bool, steps: usize, seed: u64) -> Pipeline {
    let encoder = SyntheticEncoder::new(scene.clone(), 32);
    let decoder = encoder.decoder();
    let denoiser: Box<dyn nvs_core::Denoiser> = if ideal {
        Box::new(IdealSceneDenoiser::new(scene.clone(), 1024))
    } else {
        Box::new(FeatureReadoutDenoiser::default())
    };
    Pipeline::new(
        Box::new(encoder),
        decoder,
        AggregationMode::Mean,
        denoiser,
        RenderConfig::default(),
        SamplerConfig {
            schedule: build_schedule(steps, SIGMA_MAX, SIGMA_MIN, RHO).unwrap(),
            one_step: !ideal,
            deterministic_start: !ideal,
            seed,
            ..SamplerConfig::default()
        },
    )
}

#[test]
fn ideal_denoiser_reproduces_ground_truth_under_every_policy() {
    let scene = ToyScene::demo(16);
    let inputs = input_frames(&scene, &cameras(&[0.0]));
    let trajectory = cameras(&[10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0]);
    let truth: Vec<_> = trajectory.iter().map(|c| render_ground_truth(&scene, c, 1024).image).collect();
    for policy in [
        ConditioningPolicy::InputsOnly,
        ConditioningPolicy::PreviousOnly,
        ConditioningPolicy::baseline(),
        ConditioningPolicy::long_range(),
        ConditioningPolicy::two_pass(),
        ConditioningPolicy::Stochastic { steps: 12 },
    ] {
        let pipe = pipeline(&scene, true, 12, 3);
        let out = generate_sequence(&pipe, inputs.clone(), &trajectory, &policy).unwrap();
        assert_eq!(out.frames.len(), trajectory.len());
        for (frame, gt) in out.frames.iter().zip(&truth) {
            assert!(frame.image.max_abs_diff(gt).unwrap() < 1e-3, "{policy:?}");
        }
    }
}

#[test]
fn sequences_are_deterministic_per_seed() {
    let scene = ToyScene::demo(16);
    let inputs = input_frames(&scene, &cameras(&[0.0, 30.0]));
    let trajectory = cameras(&[5.0, 10.0, 15.0, 20.0, 25.0, 35.0, 40.0, 45.0]);
    let run = |seed| {
        let pipe = pipeline(&scene, false, 8, seed);
        generate_sequence(&pipe, inputs.clone(), &trajectory, &ConditioningPolicy::baseline()).unwrap()
    };
    let (a, b) = (run(4), run(4));
    assert_eq!(a.passes, b.passes);
    for (x, y) in a.frames.iter().zip(&b.frames) {
        assert_eq!(x.image, y.image);
    }
    let c = run(5);
    assert_ne!(a.passes, c.passes);
}

#[test]
fn baseline_conditioning_sizes_follow_rule() {
    let scene = ToyScene::demo(16);
    let inputs = input_frames(&scene, &cameras(&[0.0]));
    let angles: Vec<f64> = (1..=9).map(|i| i as f64 * 5.0).collect();
    let trajectory = cameras(&angles);
    let pipe = pipeline(&scene, false, 4, 1);
    let out = generate_sequence(&pipe, inputs, &trajectory, &ConditioningPolicy::baseline()).unwrap();
    for (step, refs) in out.passes[0].conditioning.iter().enumerate() {
        assert_eq!(refs.len(), 1 + step.min(6), "step {step}");
        assert!(refs.iter().all(|r| match r {
            FrameRef::Generated(i) => *i < step,
            FrameRef::Input(i) => *i == 0,
        }));
    }
    assert_eq!(pipe.render_count(), trajectory.len());
}

#[test]
fn feature_readout_quality_falls_with_angular_distance() {
    let scene = ToyScene::demo(16);
    let input_cam = cameras(&[0.0]);
    let inputs = input_frames(&scene, &input_cam);
    let angles: Vec<f64> = (0..=12).map(|i| i as f64 * 7.5).collect();
    let trajectory = cameras(&angles);
    let pipe = pipeline(&scene, false, 1, 0);
    let out = generate_sequence(&pipe, inputs, &trajectory, &ConditioningPolicy::InputsOnly).unwrap();
    let scores: Vec<(f64, f64)> = out
        .frames
        .iter()
        .map(|f| {
            let gt = render_ground_truth(&scene, &f.camera, 4096).image;
            (angular_distance_deg(&f.camera, &input_cam[0]), psnr(&f.image, &gt, 2.0).unwrap())
        })
        .collect();
    println!("{scores:?}");
    for &(d, p) in &scores {
        if d <= 15.0 {
            assert!(p >= 25.0, "{d}: {p}");
        }
    }
    let bin_mean = |lo: f64, hi: f64| {
        let v: Vec<f64> = scores.iter().filter(|s| s.0 >= lo && s.0 < hi).map(|s| s.1).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let bins = [bin_mean(0.0, 30.0), bin_mean(30.0, 60.0), bin_mean(60.0, 91.0)];
    println!("{bins:?}");
    assert!(bins[0] > bins[1] && bins[1] > bins[2]);
}
