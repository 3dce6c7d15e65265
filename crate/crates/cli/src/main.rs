use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use nvs_core::autoregressive::{
    generate_sequence, ConditioningPolicy, FrameRef, Pipeline, PipelineError, SamplerConfig, SequenceState,
    SyntheticEncoder, VolumeCache,
};
use nvs_core::denoisers::{FeatureReadoutDenoiser, IdealSceneDenoiser};
use nvs_core::diffusion::{build_schedule, GuidanceConfig, RHO, SIGMA_MAX, SIGMA_MIN};
use nvs_core::field::AggregationMode;
use nvs_core::geometry::Camera;
use nvs_core::harness::io::{save_tensor, write_png, ManifestError, SceneManifest, Tensor};
use nvs_core::harness::metrics::{psnr, ssim, DEFAULT_DATA_RANGE};
use nvs_core::harness::oracle::{run_checks, Fault};
use nvs_core::harness::scene::{render_ground_truth, ToyScene};
use nvs_core::harness::{angular_distance_deg, orbit, Frame};
use nvs_core::image::Image;
use nvs_core::renderer::RenderConfig;
use nvs_core::Denoiser;

mod config;

use config::ConfigFlags;

/// Samples used for ground-truth renders and the ideal-scene denoiser.
const GROUND_TRUTH_SAMPLES: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unreadable inputs or invalid parameters (exit 2).
    #[error("{0}")]
    Usage(String),
    /// Failures while running the pipeline or writing outputs (exit 1).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Parser)]
#[command(name = "nvs", version, about = "Geometry-aware diffusion view synthesis on analytic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Print the noise levels of the sampling schedule, one per line.
    Schedule(ScheduleArgs),
    /// Sample one target view.
    Sample {
        #[command(flatten)]
        args: SampleArgs,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Generate a sequence of views autoregressively.
    Sequence {
        #[command(flatten)]
        args: SequenceArgs,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Run the brute-force cross-checks and print a JSON report.
    OracleCheck {
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Write a demo scene, input manifest and trajectory to a directory.
    Init {
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Image resolution of the written cameras.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    RendererUnnormalized,
}

#[derive(Debug, Clone, Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long, default_value_t = SIGMA_MAX)]
    sigma_max: f64,
    #[arg(long, default_value_t = SIGMA_MIN)]
    sigma_min: f64,
    #[arg(long, default_value_t = RHO)]
    rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum DenoiserArg {
    /// Returns the ground-truth render of the scene.
    IdealScene,
    /// Blends the rendered feature colors with the noisy input.
    FeatureReadout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum PolicyArg {
    InputsOnly,
    PreviousOnly,
    Baseline,
    LongRange,
    TwoPass,
    Stochastic,
}

/// Options shared by `sample` and `sequence`.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct CommonArgs {
    /// Scene JSON; the built-in demo scene when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Input manifest; one rendered view of the scene when omitted.
    #[arg(long)]
    inputs: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "feature-readout")]
    denoiser: DenoiserArg,
    /// Guidance strength; 0 is conditional, -1 unconditional.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Single denoiser evaluation instead of the full sampler.
    #[arg(long)]
    one_step: bool,
    /// Depth slices per feature volume.
    #[arg(long, default_value_t = 64)]
    depth_slices: usize,
    /// Depth samples per rendered ray.
    #[arg(long, default_value_t = 64)]
    depth_samples: usize,
    /// Resolution of generated default cameras.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct SampleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: CommonArgs,
    /// Target manifest; a view 20 degrees from the input when omitted.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Frame of the target manifest to sample.
    #[arg(long, default_value_t = 0)]
    target_index: usize,
    #[arg(long, default_value_t = 25)]
    steps: usize,
    /// Condition on null features only, without guidance.
    #[arg(long)]
    unconditional: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct SequenceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: CommonArgs,
    /// Trajectory manifest; ten views 10 degrees apart when omitted.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "baseline")]
    policy: PolicyArg,
    /// Sampler steps; 25, or 256 for stochastic conditioning.
    #[arg(long)]
    steps: Option<usize>,
}

fn default_cameras(angles: &[f64], resolution: usize) -> Result<Vec<Camera>, CliError> {
    orbit(Point3::origin(), 2.0, 10.0, angles, 40.0, resolution, 1.0, 3.0).map_err(usage)
}

fn load_scene(path: Option<&Path>) -> Result<ToyScene, CliError> {
    let Some(path) = path else {
        return Ok(ToyScene::demo(16));
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let scene: ToyScene = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    scene.validate().map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(scene)
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn manifest_error(path: &Path, e: ManifestError) -> CliError {
    usage(format!("{}: {e}", path.display()))
}

fn load_inputs(common: &CommonArgs, scene: &ToyScene) -> Result<Vec<Frame>, CliError> {
    match &common.inputs {
        Some(path) => {
            let manifest = SceneManifest::load(path).map_err(|e| manifest_error(path, e))?;
            manifest.frames(base_dir(path)).map_err(|e| manifest_error(path, e))
        }
        None => Ok(default_cameras(&[0.0], common.resolution)?
            .into_iter()
            .map(|camera| Frame {
                image: render_ground_truth(scene, &camera, GROUND_TRUTH_SAMPLES).image,
                camera,
            })
            .collect()),
    }
}

fn load_cameras(path: Option<&Path>, default_angles: &[f64], resolution: usize) -> Result<Vec<Camera>, CliError> {
    match path {
        Some(path) => {
            let manifest = SceneManifest::load(path).map_err(|e| manifest_error(path, e))?;
            manifest.cameras(base_dir(path)).map_err(|e| manifest_error(path, e))
        }
        None => default_cameras(default_angles, resolution),
    }
}

fn build_pipeline(common: &CommonArgs, scene: &ToyScene, steps: usize, guidance: f64) -> Result<Pipeline, CliError> {
    if common.depth_slices < 2 || common.depth_samples == 0 {
        return Err(usage("--depth-slices must be at least 2 and --depth-samples positive"));
    }
    if !guidance.is_finite() {
        return Err(usage("--guidance must be finite"));
    }
    let schedule = build_schedule(steps, SIGMA_MAX, SIGMA_MIN, RHO).map_err(usage)?;
    let encoder = SyntheticEncoder::new(scene.clone(), common.depth_slices);
    let decoder = encoder.decoder();
    let denoiser: Box<dyn Denoiser> = match common.denoiser {
        DenoiserArg::IdealScene => Box::new(IdealSceneDenoiser::new(scene.clone(), GROUND_TRUTH_SAMPLES)),
        DenoiserArg::FeatureReadout => Box::new(FeatureReadoutDenoiser::default()),
    };
    Ok(Pipeline::new(
        Box::new(encoder),
        decoder,
        AggregationMode::Mean,
        denoiser,
        RenderConfig {
            n_depth_samples: common.depth_samples,
            rng_seed: common.seed,
            ..RenderConfig::default()
        },
        SamplerConfig {
            schedule,
            guidance: GuidanceConfig { g: guidance },
            one_step: common.one_step,
            deterministic_start: false,
            seed: common.seed,
        },
    ))
}

#[derive(Debug, Serialize)]
struct Quality {
    psnr_db: f64,
    /// Absent when the image is smaller than the SSIM window.
    ssim: Option<f64>,
    max_abs_error: f64,
}

fn quality(image: &Image, truth: &Image) -> Result<Quality, CliError> {
    Ok(Quality {
        psnr_db: psnr(image, truth, DEFAULT_DATA_RANGE).map_err(runtime)?,
        ssim: ssim(image, truth, DEFAULT_DATA_RANGE).ok(),
        max_abs_error: image.max_abs_diff(truth).map_err(runtime)?,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_frame(dir: &Path, stem: &str, image: &Image) -> Result<(), CliError> {
    write_png(&dir.join(format!("{stem}.png")), image).map_err(runtime)?;
    save_tensor(&dir.join(format!("{stem}.nvt")), &Tensor::from(image)).map_err(runtime)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn pipeline_error(e: PipelineError) -> CliError {
    runtime(e)
}

#[derive(Debug, Serialize)]
struct SampleStats {
    denoiser: DenoiserArg,
    seed: u64,
    steps: usize,
    guidance: f64,
    one_step: bool,
    unconditional: bool,
    conditioning_frames: usize,
    #[serde(flatten)]
    quality: Quality,
}

fn cmd_sample(args: &SampleArgs) -> Result<(), CliError> {
    let common = &args.common;
    let scene = load_scene(common.scene.as_deref())?;
    let inputs = load_inputs(common, &scene)?;
    let targets = load_cameras(args.target.as_deref(), &[20.0], common.resolution)?;
    let target = targets
        .get(args.target_index)
        .ok_or_else(|| usage(format!("--target-index {} out of range ({} frames)", args.target_index, targets.len())))?
        .clone();
    let guidance = if args.unconditional { 0.0 } else { common.guidance };
    let pipeline = build_pipeline(common, &scene, args.steps, guidance)?;
    let refs: Vec<FrameRef> = (0..inputs.len()).map(FrameRef::Input).collect();
    let state = SequenceState::new(inputs).map_err(pipeline_error)?;
    let feature = pipeline
        .conditioning_feature(&refs, &state, &mut VolumeCache::default(), &target, 0, 0)
        .map_err(pipeline_error)?;
    let conditioning = if args.unconditional {
        pipeline.null_conditioning(&feature, 0, 0)
    } else {
        feature.clone()
    };
    let image = pipeline
        .sample_with_features(&conditioning, &target, 0, 0)
        .map_err(pipeline_error)?;
    let truth = render_ground_truth(&scene, &target, GROUND_TRUTH_SAMPLES).image;
    create_dir(&common.out)?;
    write_frame(&common.out, "frame", &image)?;
    save_tensor(&common.out.join("feature.nvt"), &Tensor::from(&feature.data)).map_err(runtime)?;
    let stats = SampleStats {
        denoiser: common.denoiser,
        seed: common.seed,
        steps: args.steps,
        guidance,
        one_step: common.one_step,
        unconditional: args.unconditional,
        conditioning_frames: refs.len(),
        quality: quality(&image, &truth)?,
    };
    write_json(&common.out.join("stats.json"), &stats)?;
    println!(
        "wrote {} (PSNR {:.2} dB)",
        common.out.join("frame.png").display(),
        stats.quality.psnr_db
    );
    Ok(())
}

fn policy(arg: PolicyArg, steps: usize) -> ConditioningPolicy {
    match arg {
        PolicyArg::InputsOnly => ConditioningPolicy::InputsOnly,
        PolicyArg::PreviousOnly => ConditioningPolicy::PreviousOnly,
        PolicyArg::Baseline => ConditioningPolicy::baseline(),
        PolicyArg::LongRange => ConditioningPolicy::long_range(),
        PolicyArg::TwoPass => ConditioningPolicy::two_pass(),
        PolicyArg::Stochastic => ConditioningPolicy::Stochastic { steps },
    }
}

#[derive(Debug, Serialize)]
struct FrameMetrics {
    index: usize,
    /// Angle to the nearest input view, degrees.
    input_distance_deg: f64,
    #[serde(flatten)]
    quality: Quality,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    policy: ConditioningPolicy,
    denoiser: DenoiserArg,
    steps: usize,
    guidance: f64,
    seed: u64,
    one_step: bool,
    feature_renders: usize,
    /// Conditioning frames per pass, per generated frame. In a second pass
    /// `generated` indices refer to first-pass frames.
    conditioning: Vec<Vec<Vec<FrameRef>>>,
}

fn cmd_sequence(args: &SequenceArgs) -> Result<(), CliError> {
    let common = &args.common;
    let steps = args.steps.unwrap_or(match args.policy {
        PolicyArg::Stochastic => 256,
        _ => 25,
    });
    let scene = load_scene(common.scene.as_deref())?;
    let inputs = load_inputs(common, &scene)?;
    let angles: Vec<f64> = (1..=10).map(|i| 10.0 * i as f64).collect();
    let trajectory = load_cameras(args.trajectory.as_deref(), &angles, common.resolution)?;
    let pipeline = build_pipeline(common, &scene, steps, common.guidance)?;
    let input_cameras: Vec<Camera> = inputs.iter().map(|f| f.camera.clone()).collect();
    let policy = policy(args.policy, steps);
    let output = generate_sequence(&pipeline, inputs, &trajectory, &policy).map_err(pipeline_error)?;
    create_dir(&common.out)?;
    let mut metrics = Vec::with_capacity(output.frames.len());
    let mut names = Vec::with_capacity(output.frames.len());
    for (index, frame) in output.frames.iter().enumerate() {
        let stem = format!("frame_{index:03}");
        write_frame(&common.out, &stem, &frame.image)?;
        names.push(format!("{stem}.png"));
        let truth = render_ground_truth(&scene, &frame.camera, GROUND_TRUTH_SAMPLES).image;
        let input_distance_deg = input_cameras
            .iter()
            .map(|c| angular_distance_deg(c, &frame.camera))
            .fold(f64::INFINITY, f64::min);
        metrics.push(FrameMetrics {
            index,
            input_distance_deg,
            quality: quality(&frame.image, &truth)?,
        });
    }
    write_json(&common.out.join("metrics.json"), &metrics)?;
    SceneManifest::from_cameras(&trajectory, Some(&names))
        .save(&common.out.join("frames.json"))
        .map_err(runtime)?;
    let manifest = RunManifest {
        policy,
        denoiser: common.denoiser,
        steps,
        guidance: common.guidance,
        seed: common.seed,
        one_step: common.one_step,
        feature_renders: pipeline.render_count(),
        conditioning: output.passes.into_iter().map(|p| p.conditioning).collect(),
    };
    write_json(&common.out.join("run_manifest.json"), &manifest)?;
    println!("wrote {} frames to {}", output.frames.len(), common.out.display());
    Ok(())
}

fn cmd_schedule(args: &ScheduleArgs) -> Result<(), CliError> {
    let schedule = build_schedule(args.steps, args.sigma_max, args.sigma_min, args.rho).map_err(usage)?;
    let mut out = io::stdout().lock();
    for sigma in schedule.sigmas() {
        match writeln!(out, "{sigma}") {
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => return Ok(()),
            other => other.map_err(runtime)?,
        }
    }
    Ok(())
}

fn cmd_oracle_check(fault: Option<FaultArg>) -> Result<(), CliError> {
    let report = run_checks(fault.map(|f| match f {
        FaultArg::RendererUnnormalized => Fault::RendererUnnormalized,
    }));
    println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
    let failed: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}: measured {:e}, tolerance {:e}", c.id, c.measured, c.tolerance))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("failed checks:\n  {}", failed.join("\n  "))))
    }
}

fn cmd_init(out: &Path, resolution: usize) -> Result<(), CliError> {
    if resolution == 0 {
        return Err(usage("--resolution must be positive"));
    }
    create_dir(out)?;
    let scene = ToyScene::demo(16);
    write_json(&out.join("scene.json"), &scene)?;
    let inputs = default_cameras(&[0.0], resolution)?;
    write_png(
        &out.join("input_000.png"),
        &render_ground_truth(&scene, &inputs[0], GROUND_TRUTH_SAMPLES).image,
    )
    .map_err(runtime)?;
    SceneManifest::from_cameras(&inputs, Some(&["input_000.png".to_string()]))
        .save(&out.join("inputs.json"))
        .map_err(runtime)?;
    SceneManifest::from_cameras(&default_cameras(&[20.0], resolution)?, None)
        .save(&out.join("target.json"))
        .map_err(runtime)?;
    let angles: Vec<f64> = (1..=10).map(|i| 10.0 * i as f64).collect();
    SceneManifest::from_cameras(&default_cameras(&angles, resolution)?, None)
        .save(&out.join("trajectory.json"))
        .map_err(runtime)?;
    println!("wrote scene.json, inputs.json, target.json and trajectory.json to {}", out.display());
    Ok(())
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("NVS_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("NVS_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(runtime)
}

fn run() -> Result<(), CliError> {
    let matches = Cli::command().get_matches();
    let cli = Cli::from_arg_matches(&matches).map_err(usage)?;
    configure_threads()?;
    let sub = matches.subcommand().map(|(_, m)| m);
    match cli.command {
        Commands::Schedule(args) => cmd_schedule(&args),
        Commands::Sample { args, config } => cmd_sample(&config::resolve(args, &config, sub.expect("subcommand"))?),
        Commands::Sequence { args, config } => {
            cmd_sequence(&config::resolve(args, &config, sub.expect("subcommand"))?)
        }
        Commands::OracleCheck { inject_fault } => cmd_oracle_check(inject_fault),
        Commands::Init { out, resolution } => cmd_init(&out, resolution),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
