//! Association and Kalman tracking through the full pipeline on a
//! rendered sequence; prints the confirmed tracks of the last frame next
//! to the true relative positions.

use stereo_ranger::geometry::StereoCalibration;
use stereo_ranger::pipeline::{run_pipeline, DepthMethod, InputSource, PipelineConfig};
use stereo_ranger::synth::{traffic_scene, SceneConfig};
use stereo_ranger::tracking::associate;

fn main() -> stereo_ranger::Result<()> {
    // a small association problem: rows are tracks, columns detections
    let scores = vec![vec![Some(1.6), Some(0.2), None], vec![Some(1.5), None, Some(0.9)]];
    let a = associate(&scores);
    println!("pairs {:?}, unmatched tracks {:?}, new detections {:?}", a.pairs, a.unmatched_rows, a.unmatched_cols);

    let calib = StereoCalibration::new(1400.0, 0.3, 480.0, 270.0, 1.5)?;
    let mut cfg = SceneConfig::new(calib, 960, 540);
    cfg.ego_speed = 20.0;
    cfg.noise_sigma = 1.0;
    let scene = traffic_scene(cfg, 6, (15.0, 90.0), 5);
    let frames = 20;
    let pipe = PipelineConfig { method: DepthMethod::TemplateMatcher, ..Default::default() };
    let results = run_pipeline(&pipe, &InputSource::Synthetic { scene: scene.clone(), frames })?;

    let mut end = scene.clone();
    for _ in 1..frames {
        end.advance(0.1);
    }
    let last = results.last().unwrap();
    println!("frame {}: {} confirmed tracks", last.frame, last.tracks.len());
    for t in &last.tracks {
        let nearest = end
            .objects
            .iter()
            .min_by(|a, b| {
                let da = (a.position.x - t.x_rel).hypot(a.position.y - t.y_rel);
                let db = (b.position.x - t.x_rel).hypot(b.position.y - t.y_rel);
                da.total_cmp(&db)
            })
            .unwrap();
        println!(
            "track {:>2}: x {:6.2} y {:5.2} v_x {:5.2} ({:?}, speed valid {})  truth x {:6.2} y {:5.2} v_x {:5.2}",
            t.track_id, t.x_rel, t.y_rel, t.v_x, t.depth_source, t.valid_speed, nearest.position.x, nearest.position.y,
            nearest.velocity.x
        );
    }
    Ok(())
}
