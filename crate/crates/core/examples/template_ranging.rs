//! Sparse Census template matching on a synthetic traffic frame, compared
//! with the rendered ground truth.

use stereo_ranger::geometry::{depth_from_disparity, StereoCalibration};
use stereo_ranger::synth::{ground_truth_detections, render_stereo_pair, traffic_scene, SceneConfig};
use stereo_ranger::template::{estimate_object_disparities, plan_blocks, CensusCache, RangerConfig};

fn main() -> stereo_ranger::Result<()> {
    let (w, h) = (1280, 720);
    let calib = StereoCalibration::new(2000.0, 0.3, 640.0, 360.0, 1.5)?;
    let mut cfg = SceneConfig::new(calib.clone(), w, h);
    cfg.noise_sigma = 1.0;
    let scene = traffic_scene(cfg, 10, (12.0, 220.0), 7);
    let frame = render_stereo_pair(&scene, 0)?;
    let dets = ground_truth_detections(&scene)?;

    let ranger = RangerConfig::default();
    let (_, blocks) = plan_blocks(&dets, &ranger, (w, h));
    let points: usize = blocks.iter().map(|b| b.points.len()).sum();
    println!("{} blocks, {points} query points ({:.2}% of pixels)", blocks.len(), 100.0 * points as f64 / (w * h) as f64);

    let results = estimate_object_disparities(&frame.left, &frame.right, &dets, &ranger, &mut CensusCache::new(), 0)?;
    println!("{:>3} {:>6} {:>9} {:>9} {:>8} {:>8}", "id", "kind", "d est", "d true", "Z est", "Z true");
    for r in &results {
        let truth = frame.objects.iter().find(|o| o.id == r.det_id).unwrap();
        let z_true = depth_from_disparity(truth.disparity, &calib)?;
        if r.valid {
            let z = depth_from_disparity(r.disparity, &calib)?;
            println!("{:>3} {:>6?} {:>9.3} {:>9.3} {:>8.2} {:>8.2}", r.det_id, r.kind, r.disparity, truth.disparity, z, z_true);
        } else {
            println!("{:>3} {:>6?} {:>9} {:>9.3} {:>8} {:>8.2}", r.det_id, r.kind, "-", truth.disparity, "-", z_true);
        }
    }
    Ok(())
}
