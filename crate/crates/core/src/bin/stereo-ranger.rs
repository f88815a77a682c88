use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stereo_ranger::dense::{bm_disparity, sgm_disparity};
use stereo_ranger::geometry::StereoCalibration;
use stereo_ranger::kv::KvFile;
use stereo_ranger::pipeline::{evaluate, run_pipeline, write_results, DepthMethod, InputSource, PipelineConfig, RunDir};
use stereo_ranger::synth::{traffic_scene, write_run, Scene, SceneConfig};
use stereo_ranger::{Error, Result};

#[derive(Parser)]
#[command(name = "stereo-ranger", version, about = "Object-centric stereo ranging pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic run directory
    Synth(SynthArgs),
    /// Execute the pipeline on a run directory or a scene file
    Run(RunArgs),
    /// Score pipeline output against synthetic truth
    Eval(EvalArgs),
    /// Write a dense disparity map of one frame as 16-bit PGM
    DumpDisparity(DumpArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output run directory
    #[arg(long)]
    out: PathBuf,
    /// Scene file; without it a random traffic scene is generated
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 8)]
    objects: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1280)]
    width: usize,
    #[arg(long, default_value_t = 720)]
    height: usize,
    #[arg(long, default_value_t = 2000.0)]
    focal: f64,
    #[arg(long, default_value_t = 0.3)]
    baseline: f64,
    /// Injected disparity bias, px
    #[arg(long)]
    bias: Option<f64>,
    /// Injected vertical offset of the right image, px
    #[arg(long)]
    vertical_offset: Option<i32>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    radar_sigma: Option<f64>,
    #[arg(long)]
    ego_speed: Option<f64>,
}

#[derive(Args)]
struct PipelineFlags {
    /// Config file (`key = value`); flags given on the command line win
    #[arg(long)]
    config: Option<PathBuf>,
    /// STEREO_BM, STEREO_SGM or TEMPLATE_MATCHER
    #[arg(long)]
    method: Option<DepthMethod>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    auto_rect: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    radar_refiner: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    object_refiner: Option<bool>,
    /// Worker threads (0 = all cores)
    #[arg(long)]
    workers: Option<usize>,
}

impl PipelineFlags {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_kv(&KvFile::load(path)?)?;
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(v) = self.auto_rect {
            cfg.auto_rect = v;
        }
        if let Some(v) = self.radar_refiner {
            cfg.radar_refiner = v;
        }
        if let Some(v) = self.object_refiner {
            cfg.object_refiner = v;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Run directory written by `synth`
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    input: Option<PathBuf>,
    /// Render frames from a scene file instead of reading a directory
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Output directory for depth, track and refiner records
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Pipeline output directory
    #[arg(long)]
    run: PathBuf,
    /// Synthetic run directory holding truth.txt
    #[arg(long)]
    truth: PathBuf,
    /// Where to write metrics.tsv and convergence.tsv (default: --run)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut scene = match &a.scene {
        Some(p) => Scene::load(p)?,
        None => {
            let calib = StereoCalibration::new(a.focal, a.baseline, a.width as f64 / 2.0, a.height as f64 / 2.0, 1.5)?;
            let mut cfg = SceneConfig::new(calib, a.width, a.height);
            cfg.seed = a.seed;
            cfg.ego_speed = 20.0;
            cfg.radar_sigma = 0.2;
            traffic_scene(cfg, a.objects, (15.0, 250.0), a.seed)
        }
    };
    let c = &mut scene.config;
    if let Some(v) = a.bias {
        c.disparity_bias = v;
    }
    if let Some(v) = a.vertical_offset {
        c.vertical_offset = v;
    }
    if let Some(v) = a.noise {
        c.noise_sigma = v;
    }
    if let Some(v) = a.radar_sigma {
        c.radar_sigma = v;
    }
    if let Some(v) = a.ego_speed {
        c.ego_speed = v;
    }
    write_run(&scene, &a.out, a.frames)?;
    println!("wrote {} frames of {} objects to {}", a.frames, scene.objects.len(), a.out.display());
    Ok(())
}

fn run(a: &RunArgs) -> Result<()> {
    let cfg = a.pipeline.config()?;
    let source = match (&a.input, &a.scene) {
        (Some(dir), _) => InputSource::Directory(RunDir::open(dir)?),
        (None, Some(scene)) => InputSource::Synthetic { scene: Scene::load(scene)?, frames: a.frames },
        (None, None) => return Err(Error::Input("need --input or --scene".into())),
    };
    let results = run_pipeline(&cfg, &source)?;
    write_results(&a.out, &results)?;
    let depths: usize = results.iter().map(|r| r.depths.len()).sum();
    let tracks: usize = results.iter().map(|r| r.tracks.len()).sum();
    println!(
        "{} frames, {depths} depth records, {tracks} track records ({}) -> {}",
        results.len(),
        cfg.method,
        a.out.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let report = evaluate(&a.run, &a.truth)?;
    print!("{}", report.text());
    let out = a.out.as_ref().unwrap_or(&a.run);
    std::fs::create_dir_all(out).map_err(|e| Error::Input(format!("{}: {e}", out.display())))?;
    for (name, text) in [("metrics.tsv", report.metrics_tsv()), ("convergence.tsv", report.convergence_tsv())] {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn dump_disparity(a: &DumpArgs) -> Result<()> {
    let cfg = a.pipeline.config()?;
    let dir = RunDir::open(&a.input)?;
    let input = dir.load(a.frame, 0.1)?;
    let map = match cfg.method {
        DepthMethod::StereoSgm => sgm_disparity(&input.left, &input.right, &cfg.sgm)?,
        _ => bm_disparity(&input.left, &input.right, &cfg.bm)?,
    };
    map.write_pgm16(&a.out)?;
    println!("{} valid of {} pixels -> {}", map.valid_count(), map.width() * map.height(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::DumpDisparity(a) => dump_disparity(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
