//! Dense block matching and semi-global matching baselines against the
//! rendered disparity truth. Writes both maps as 16-bit PGM to the
//! directory given as the first argument (default: current directory).

use std::path::PathBuf;

use stereo_ranger::dense::{bm_disparity, sgm_disparity, BmParams, SgmParams};
use stereo_ranger::geometry::StereoCalibration;
use stereo_ranger::image::DisparityMap;
use stereo_ranger::synth::{render_stereo_pair, traffic_scene, SceneConfig, TruthMap};

fn score(name: &str, map: &DisparityMap, truth: &TruthMap) {
    let errs: Vec<f64> = map.iter_valid().map(|(x, y, d)| (d - truth.disparity_at(x, y)).abs()).collect();
    let bad = errs.iter().filter(|&&e| e > 1.0).count();
    let mean = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
    println!(
        "{name}: {:.1}% of pixels valid, mean |err| {mean:.3} px, {:.1}% above 1 px",
        100.0 * map.valid_count() as f64 / (map.width() * map.height()) as f64,
        100.0 * bad as f64 / errs.len().max(1) as f64
    );
}

fn main() -> stereo_ranger::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| ".".into()));
    let (w, h) = (640, 360);
    let calib = StereoCalibration::new(1000.0, 0.3, 320.0, 180.0, 1.5)?;
    let mut cfg = SceneConfig::new(calib, w, h);
    cfg.background_disparity = 4.0;
    let scene = traffic_scene(cfg, 6, (8.0, 60.0), 3);
    let frame = render_stereo_pair(&scene, 0)?;

    let bm = bm_disparity(&frame.left, &frame.right, &BmParams { num_disparities: 64, ..Default::default() })?;
    let sgm = sgm_disparity(&frame.left, &frame.right, &SgmParams { num_disparities: 64, ..Default::default() })?;
    score("block matching", &bm, &frame.truth);
    score("semi-global", &sgm, &frame.truth);
    bm.write_pgm16(out.join("bm.pgm"))?;
    sgm.write_pgm16(out.join("sgm.pgm"))?;
    Ok(())
}
