//! Generates a synthetic run directory with calibration errors, runs the
//! three depth back-ends over it and prints the evaluation summary.

use stereo_ranger::geometry::StereoCalibration;
use stereo_ranger::pipeline::{evaluate, run_pipeline, write_results, DepthMethod, InputSource, PipelineConfig, RunDir};
use stereo_ranger::synth::{traffic_scene, write_run, SceneConfig};

fn main() -> stereo_ranger::Result<()> {
    let root = std::env::temp_dir().join(format!("stereo-ranger-demo-{}", std::process::id()));
    let calib = StereoCalibration::new(1400.0, 0.3, 480.0, 270.0, 1.5)?;
    let mut cfg = SceneConfig::new(calib, 960, 540);
    cfg.ego_speed = 20.0;
    cfg.noise_sigma = 1.0;
    cfg.radar_sigma = 0.2;
    cfg.disparity_bias = 0.5;
    cfg.vertical_offset = 1;
    let scene = traffic_scene(cfg, 8, (15.0, 150.0), 11);
    let run_dir = root.join("input");
    write_run(&scene, &run_dir, 10)?;

    for method in [DepthMethod::StereoBm, DepthMethod::StereoSgm, DepthMethod::TemplateMatcher] {
        let cfg = PipelineConfig {
            method,
            auto_rect: true,
            radar_refiner: method != DepthMethod::TemplateMatcher,
            object_refiner: method == DepthMethod::TemplateMatcher,
            ..Default::default()
        };
        let results = run_pipeline(&cfg, &InputSource::Directory(RunDir::open(&run_dir)?))?;
        let out = root.join(method.to_string());
        write_results(&out, &results)?;
        println!("== {method}");
        print!("{}", evaluate(&out, &run_dir)?.text());
    }
    println!("outputs in {}", root.display());
    Ok(())
}
