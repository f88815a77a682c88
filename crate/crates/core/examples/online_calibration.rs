//! The three online refiners on injected calibration errors: vertical
//! offset search, radar disparity voting and the object-level refiner.

use stereo_ranger::calib_refine::{
    auto_rect_search, radar_refine_step, refine_object_offset, ObjRefinerState, RadarDetection, RectOffsetState, Roi,
    StereoObservation, VoteState,
};
use stereo_ranger::dense::BmParams;
use stereo_ranger::geometry::StereoCalibration;
use stereo_ranger::image::DisparityMap;
use stereo_ranger::synth::{ground_truth_detections, render_stereo_pair, traffic_scene, SceneConfig};
use stereo_ranger::template::{estimate_object_disparities, CensusCache, RangerConfig};

fn main() -> stereo_ranger::Result<()> {
    let (w, h) = (960, 540);
    let calib = StereoCalibration::new(2000.0, 0.3, 480.0, 270.0, 1.5)?;

    // vertical misalignment
    let bm = BmParams { num_disparities: 32, block_size: 9, ..Default::default() };
    let roi = Roi { x: 192, y: 162, width: 576, height: 216 };
    let mut filter = RectOffsetState::new(5, 1);
    for delta in [2, 2, 2, 2, 2, 2] {
        let mut cfg = SceneConfig::new(calib.clone(), w, h);
        cfg.background_disparity = 3.0;
        cfg.vertical_offset = delta;
        let frame = render_stereo_pair(&traffic_scene(cfg, 6, (15.0, 80.0), 1), 0)?;
        let (raw, counts) = auto_rect_search(&frame.left, &frame.right, roi, (-4, 4), &bm)?;
        let best = counts.iter().map(|c| c.1).max().unwrap_or(0);
        println!("injected δ {delta}: search {raw} ({best} valid pixels), filtered {}", filter.filter_offset(raw));
    }

    // disparity bias seen by radar voting and by the object refiner
    let bias = 0.75;
    let mut cfg = SceneConfig::new(calib.clone(), w, h);
    cfg.disparity_bias = bias;
    cfg.background_disparity = 0.5;
    let scene = traffic_scene(cfg, 8, (15.0, 80.0), 2);
    let frame = render_stereo_pair(&scene, 0)?;
    let radar: Vec<RadarDetection> =
        scene.objects.iter().map(|o| RadarDetection { position: o.position, extent: o.size }).collect();

    let mut biased = DisparityMap::new(w, h, 0);
    for y in 0..h {
        for x in 0..w {
            biased.set(x, y, Some(frame.truth.disparity_at(x, y) + bias));
        }
    }
    let mut votes = VoteState::new(4, 0.3);
    for k in 1..=20 {
        let applied = radar_refine_step(&biased, &radar, &mut votes, &calib);
        if k % 5 == 0 {
            println!("radar voting, frame {k}: offset {applied:+.4} (injected bias {bias:+})");
        }
    }

    let dets = ground_truth_detections(&scene)?;
    let res = estimate_object_disparities(&frame.left, &frame.right, &dets, &RangerConfig::default(), &mut CensusCache::new(), 0)?;
    let obs: Vec<StereoObservation> = dets
        .iter()
        .zip(&res)
        .filter(|(_, r)| r.valid)
        .map(|(d, r)| StereoObservation { u: d.cx * w as f64, v: d.cy * h as f64, d: r.disparity })
        .collect();
    let mut state = ObjRefinerState::default();
    for k in 1..=20 {
        let applied = refine_object_offset(&obs, &radar, &mut state, &calib)?;
        if k % 5 == 0 {
            println!("object refiner, frame {k}: offset {applied:+.4}");
        }
    }
    Ok(())
}
