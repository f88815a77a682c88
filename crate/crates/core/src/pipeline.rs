//! Frame pipeline binding the matchers, refiners, monocular cues, tracker
//! and depth fusion, plus run-directory I/O and evaluation against truth.
//!
//! Per frame, detection ingest, the primary depth method, the vertical
//! rectification search and the monocular cues run concurrently and join
//! before the refiners; closest-point selection, fusion and tracking follow
//! sequentially.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;

use crate::calib_refine::{
    auto_rect_search, radar_refine_step, refine_object_offset, ObjRefinerState, RadarDetection, RectOffsetState, Roi,
    StereoObservation, VoteState,
};
use crate::dense::{bm_disparity, sgm_disparity, BmParams, SgmParams};
use crate::error::{Error, Result};
use crate::geometry::{
    ground_point_depth, size_based_depth, stereo_estimate, CovarianceConfig, DepthEstimate, DepthSource,
    StereoCalibration,
};
use crate::image::{DisparityMap, GrayImage};
use crate::kv::KvFile;
use crate::records::{self, field, fields, RefinerLog, TruthRecord};
use crate::synth::{self, Scene};
use crate::template::{
    estimate_object_disparities, plan_blocks, select_objects, CensusCache, Detection, ObjectClass, ObjectDisparity,
    RangerConfig,
};
use crate::tracking::{fuse_depth, DepthCandidates, EgoMotion, Observation, TrackRecord, Tracker, TrackerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthMethod {
    StereoBm,
    StereoSgm,
    TemplateMatcher,
}

impl fmt::Display for DepthMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DepthMethod::StereoBm => "STEREO_BM",
            DepthMethod::StereoSgm => "STEREO_SGM",
            DepthMethod::TemplateMatcher => "TEMPLATE_MATCHER",
        })
    }
}

impl FromStr for DepthMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "STEREO_BM" | "BM" => Ok(DepthMethod::StereoBm),
            "STEREO_SGM" | "SGM" => Ok(DepthMethod::StereoSgm),
            "TEMPLATE_MATCHER" | "TM" => Ok(DepthMethod::TemplateMatcher),
            _ => Err(Error::Parameter(format!("unknown depth method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub method: DepthMethod,
    pub bm: BmParams,
    pub sgm: SgmParams,
    pub ranger: RangerConfig,
    pub tracker: TrackerConfig,
    pub covariance: CovarianceConfig,
    pub auto_rect: bool,
    /// Vertical offsets searched are `-rect_range..=rect_range`.
    pub rect_range: i32,
    pub rect_window: usize,
    pub rect_max_step: i32,
    /// Normalized `(x0, y0, x1, y1)` search region.
    pub rect_roi: (f64, f64, f64, f64),
    pub radar_refiner: bool,
    pub radar_k: usize,
    pub radar_lambda: f64,
    pub object_refiner: bool,
    pub obj_refiner: ObjRefinerState,
    /// Disparity variance of stereo estimates, px².
    pub disparity_variance: f64,
    pub width_priors: Vec<(ObjectClass, f64)>,
    /// Minimum valid pixels for a dense box median.
    pub min_box_pixels: usize,
    pub feature_dim: usize,
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            method: DepthMethod::TemplateMatcher,
            bm: BmParams::default(),
            sgm: SgmParams::default(),
            ranger: RangerConfig::default(),
            tracker: TrackerConfig::default(),
            covariance: CovarianceConfig::default(),
            auto_rect: false,
            rect_range: 3,
            rect_window: 5,
            rect_max_step: 1,
            rect_roi: (0.2, 0.3, 0.8, 0.7),
            radar_refiner: false,
            radar_k: 4,
            radar_lambda: 0.3,
            object_refiner: false,
            obj_refiner: ObjRefinerState::default(),
            disparity_variance: 0.0625,
            width_priors: vec![
                (ObjectClass::Car, 1.9),
                (ObjectClass::Truck, 2.5),
                (ObjectClass::Pedestrian, 0.6),
                (ObjectClass::Cyclist, 0.7),
                (ObjectClass::Other, 1.8),
            ],
            min_box_pixels: 8,
            feature_dim: 16,
            workers: 0,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "method",
    "workers",
    "auto_rect",
    "radar_refiner",
    "object_refiner",
    "rect.range",
    "rect.window",
    "rect.max_step",
    "radar.k",
    "radar.lambda",
    "obj.rate_limit",
    "obj.r_max",
    "bm.num_disparities",
    "bm.block_size",
    "bm.texture_threshold",
    "bm.uniqueness_ratio",
    "bm.downscale",
    "sgm.num_disparities",
    "sgm.p1",
    "sgm.p2",
    "ranger.min_side_px",
    "ranger.close_scale",
    "ranger.gap_threshold",
    "ranger.verify_threshold",
    "ranger.max_objects",
    "tracker.gate_px",
    "tracker.gate_m",
    "tracker.fusion_ratio",
    "tracker.speed_ratio",
    "sigma_d2",
    "width.car",
    "width.truck",
    "width.pedestrian",
    "width.cyclist",
    "width.other",
];

fn flag_value(kv: &KvFile, key: &str) -> Result<Option<bool>> {
    match kv.raw(key) {
        None => Ok(None),
        Some("1" | "true" | "on") => Ok(Some(true)),
        Some("0" | "false" | "off") => Ok(Some(false)),
        Some(v) => Err(Error::Parameter(format!("`{key}` must be a boolean, got `{v}`"))),
    }
}

impl PipelineConfig {
    /// Overrides fields present in a `key = value` config file.
    pub fn apply_kv(&mut self, kv: &KvFile) -> Result<()> {
        kv.check_keys(CONFIG_KEYS)?;
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        if let Some(m) = kv.raw("method") {
            self.method = m.parse()?;
        }
        for (field, key) in [
            (&mut self.auto_rect, "auto_rect"),
            (&mut self.radar_refiner, "radar_refiner"),
            (&mut self.object_refiner, "object_refiner"),
        ] {
            if let Some(v) = flag_value(kv, key)? {
                *field = v;
            }
        }
        set!(self.workers, "workers");
        set!(self.rect_range, "rect.range");
        set!(self.rect_window, "rect.window");
        set!(self.rect_max_step, "rect.max_step");
        set!(self.radar_k, "radar.k");
        set!(self.radar_lambda, "radar.lambda");
        set!(self.obj_refiner.rate_limit, "obj.rate_limit");
        set!(self.obj_refiner.r_max, "obj.r_max");
        set!(self.bm.num_disparities, "bm.num_disparities");
        set!(self.bm.block_size, "bm.block_size");
        set!(self.bm.texture_threshold, "bm.texture_threshold");
        set!(self.bm.uniqueness_ratio, "bm.uniqueness_ratio");
        set!(self.bm.downscale, "bm.downscale");
        set!(self.sgm.num_disparities, "sgm.num_disparities");
        set!(self.sgm.p1, "sgm.p1");
        set!(self.sgm.p2, "sgm.p2");
        set!(self.ranger.min_side_px, "ranger.min_side_px");
        set!(self.ranger.close_scale, "ranger.close_scale");
        set!(self.ranger.gap_threshold, "ranger.gap_threshold");
        set!(self.ranger.verify_threshold, "ranger.verify_threshold");
        set!(self.ranger.max_objects, "ranger.max_objects");
        set!(self.tracker.gate_px, "tracker.gate_px");
        set!(self.tracker.gate_m, "tracker.gate_m");
        set!(self.tracker.fusion_ratio, "tracker.fusion_ratio");
        set!(self.tracker.speed_ratio, "tracker.speed_ratio");
        set!(self.disparity_variance, "sigma_d2");
        for class in ObjectClass::ALL {
            if let Some(w) = kv.get::<f64>(&format!("width.{class}"))? {
                self.set_width_prior(class, w);
            }
        }
        Ok(())
    }

    pub fn set_width_prior(&mut self, class: ObjectClass, width: f64) {
        match self.width_priors.iter_mut().find(|(c, _)| *c == class) {
            Some(entry) => entry.1 = width,
            None => self.width_priors.push((class, width)),
        }
    }

    pub fn width_prior(&self, class: ObjectClass) -> Option<f64> {
        self.width_priors.iter().find(|(c, _)| *c == class).map(|&(_, w)| w)
    }

    pub fn validate(&self) -> Result<()> {
        self.ranger.validate()?;
        match self.method {
            DepthMethod::StereoBm => self.bm.validate()?,
            DepthMethod::StereoSgm => self.sgm.validate()?,
            DepthMethod::TemplateMatcher => {}
        }
        if self.auto_rect {
            self.bm.validate()?;
        }
        let (x0, y0, x1, y1) = self.rect_roi;
        let roi_ok = (0.0..1.0).contains(&x0) && (0.0..1.0).contains(&y0) && x1 > x0 && y1 > y0 && x1 <= 1.0 && y1 <= 1.0;
        if !roi_ok || self.rect_range < 0 || self.rect_max_step < 0 {
            return Err(Error::Parameter("invalid auto-rectification settings".into()));
        }
        if !(self.radar_lambda > 0.0 && self.radar_lambda <= 1.0) || self.radar_k == 0 {
            return Err(Error::Parameter("radar refiner needs k ≥ 1 and 0 < λ ≤ 1".into()));
        }
        if self.feature_dim == 0 || !(self.disparity_variance >= 0.0) {
            return Err(Error::Parameter("feature_dim must be positive, sigma_d2 non-negative".into()));
        }
        Ok(())
    }
}

/// Everything the pipeline consumes for one frame.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub frame: u64,
    pub t: f64,
    pub ego: EgoMotion,
    pub left: GrayImage,
    pub right: GrayImage,
    pub detections: Vec<Detection>,
    pub radar: Vec<RadarDetection>,
}

/// A run directory as written by `synth::write_run`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
    pub calib: StereoCalibration,
    pub frames: Vec<u64>,
    detections: BTreeMap<u64, Vec<Detection>>,
    radar: BTreeMap<u64, Vec<RadarDetection>>,
    ego: BTreeMap<u64, (f64, EgoMotion)>,
}

fn parse_ego(text: &str, path: &Path) -> Result<BTreeMap<u64, (f64, EgoMotion)>> {
    let mut out = BTreeMap::new();
    for rec in fields(text, path, 4) {
        let (line, f) = rec?;
        let frame = field(f[0], path, line, "frame id")?;
        let t = field(f[1], path, line, "time")?;
        let speed = field(f[2], path, line, "speed")?;
        let yaw_rate = field(f[3], path, line, "yaw rate")?;
        out.insert(frame, (t, EgoMotion { speed, yaw_rate }));
    }
    Ok(out)
}

impl RunDir {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let calib = StereoCalibration::load(root.join("calib.txt"))?;
        let optional = |name: &str| -> Result<Option<(PathBuf, String)>> {
            let p = root.join(name);
            if p.exists() {
                Ok(Some((p.clone(), records::read_text(&p)?)))
            } else {
                Ok(None)
            }
        };
        let detections = match optional("detections.txt")? {
            Some((p, t)) => records::parse_detections(&t, &p)?,
            None => BTreeMap::new(),
        };
        let radar = match optional("radar.txt")? {
            Some((p, t)) => records::parse_radar(&t, &p)?,
            None => BTreeMap::new(),
        };
        let ego = match optional("ego.txt")? {
            Some((p, t)) => parse_ego(&t, &p)?,
            None => BTreeMap::new(),
        };
        let frame_dir = root.join("frames");
        let mut frames = Vec::new();
        if frame_dir.exists() {
            for entry in fs::read_dir(&frame_dir).map_err(|e| Error::io(&frame_dir, e))? {
                let entry = entry.map_err(|e| Error::io(&frame_dir, e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if let Some(id) = name.strip_prefix("left_").and_then(|s| s.strip_suffix(".pgm")) {
                    frames.push(id.parse().map_err(|_| Error::Input(format!("bad frame file name `{name}`")))?);
                }
            }
        }
        frames.sort_unstable();
        Ok(RunDir { root, calib, frames, detections, radar, ego })
    }

    pub fn left_path(&self, frame: u64) -> PathBuf {
        self.root.join("frames").join(format!("left_{frame:06}.pgm"))
    }

    pub fn right_path(&self, frame: u64) -> PathBuf {
        self.root.join("frames").join(format!("right_{frame:06}.pgm"))
    }

    pub fn load(&self, frame: u64, dt: f64) -> Result<FrameInput> {
        let image = |p: PathBuf, which: &str| {
            if !p.exists() {
                return Err(Error::Frame { frame, msg: format!("missing {which} image {}", p.display()) });
            }
            GrayImage::read_pgm(&p).map_err(|e| Error::Frame { frame, msg: e.to_string() })
        };
        let left = image(self.left_path(frame), "left")?;
        let right = image(self.right_path(frame), "right")?;
        let (t, ego) = self.ego.get(&frame).copied().unwrap_or((frame as f64 * dt, EgoMotion::default()));
        Ok(FrameInput {
            frame,
            t,
            ego,
            left,
            right,
            detections: self.detections.get(&frame).cloned().unwrap_or_default(),
            radar: self.radar.get(&frame).cloned().unwrap_or_default(),
        })
    }
}

/// Where frames come from.
#[derive(Debug, Clone)]
pub enum InputSource {
    Directory(RunDir),
    /// Rendered on the fly, identical to what `write_run` stores.
    Synthetic { scene: Scene, frames: usize },
}

impl InputSource {
    pub fn calib(&self) -> &StereoCalibration {
        match self {
            InputSource::Directory(d) => &d.calib,
            InputSource::Synthetic { scene, .. } => &scene.config.calib,
        }
    }

    /// Calls `f` with every frame in order.
    pub fn for_each(&self, mut f: impl FnMut(FrameInput) -> Result<()>) -> Result<()> {
        match self {
            InputSource::Directory(d) => {
                for &frame in &d.frames {
                    f(d.load(frame, 0.1)?)?;
                }
            }
            InputSource::Synthetic { scene, frames } => {
                let mut scene = scene.clone();
                let dt = scene.config.frame_dt;
                for frame in 0..*frames as u64 {
                    let rendered = synth::render_stereo_pair(&scene, frame)?;
                    f(FrameInput {
                        frame,
                        t: frame as f64 * dt,
                        ego: EgoMotion { speed: scene.config.ego_speed, yaw_rate: 0.0 },
                        left: rendered.left,
                        right: rendered.right,
                        detections: synth::ground_truth_detections(&scene)?,
                        radar: synth::simulate_radar(&scene, frame)?,
                    })?;
                    scene.advance(dt);
                }
            }
        }
        Ok(())
    }
}

/// Per-object output: the refined disparity and the three closest-point
/// candidates with the fused choice.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRecord {
    pub frame: u64,
    pub det_id: u64,
    pub class: ObjectClass,
    pub disparity: f64,
    pub valid: bool,
    pub clp_by_stereo: Option<Vector3<f64>>,
    pub clp_by_gpt: Option<Vector3<f64>>,
    pub clp_by_size: Option<Vector3<f64>>,
    pub source: Option<DepthSource>,
    /// Camera-frame depth of the fused estimate.
    pub depth: Option<f64>,
}

fn fmt_point(p: &Option<Vector3<f64>>) -> String {
    match p {
        Some(p) => format!("{},{},{}", p.x, p.y, p.z),
        None => "-".into(),
    }
}

impl fmt::Display for DepthRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {} {} {} {} {}",
            self.frame,
            self.det_id,
            self.class,
            self.disparity,
            u8::from(self.valid),
            fmt_point(&self.clp_by_stereo),
            fmt_point(&self.clp_by_gpt),
            fmt_point(&self.clp_by_size),
            self.source.map_or("-".to_string(), |s| s.to_string()),
            self.depth.map_or("-".to_string(), |d| d.to_string()),
        )
    }
}

/// `frame det_id class disparity valid stereo gpt size source depth`, where
/// points are `x,y,z` and absent values are `-`.
pub fn parse_depth_records(text: &str, path: &Path) -> Result<BTreeMap<u64, Vec<DepthRecord>>> {
    let mut out: BTreeMap<u64, Vec<DepthRecord>> = BTreeMap::new();
    for rec in fields(text, path, 10) {
        let (line, f) = rec?;
        let point = |s: &str| -> Result<Option<Vector3<f64>>> {
            if s == "-" {
                return Ok(None);
            }
            let v: Vec<f64> = s.split(',').map(|c| field(c, path, line, "coordinate")).collect::<Result<_>>()?;
            match v[..] {
                [x, y, z] => Ok(Some(Vector3::new(x, y, z))),
                _ => Err(Error::parse(path, line, format!("bad point `{s}`"))),
            }
        };
        let r = DepthRecord {
            frame: field(f[0], path, line, "frame id")?,
            det_id: field(f[1], path, line, "detection id")?,
            class: f[2].parse().map_err(|_| Error::parse(path, line, format!("bad class `{}`", f[2])))?,
            disparity: field(f[3], path, line, "disparity")?,
            valid: match f[4] {
                "1" => true,
                "0" => false,
                v => return Err(Error::parse(path, line, format!("bad flag `{v}`"))),
            },
            clp_by_stereo: point(f[5])?,
            clp_by_gpt: point(f[6])?,
            clp_by_size: point(f[7])?,
            source: match f[8] {
                "-" => None,
                s => Some(s.parse().map_err(|e: Error| Error::parse(path, line, e.to_string()))?),
            },
            depth: match f[9] {
                "-" => None,
                s => Some(field(s, path, line, "depth")?),
            },
        };
        out.entry(r.frame).or_default().push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame: u64,
    pub depths: Vec<DepthRecord>,
    pub tracks: Vec<TrackRecord>,
    pub refiner: RefinerLog,
    /// Query points sampled by the template matcher (0 for dense methods).
    pub query_points: usize,
}

/// Stateful per-sequence pipeline; frames must be fed in order.
#[derive(Debug)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub calib: StereoCalibration,
    cache: CensusCache,
    rect: RectOffsetState,
    vote: VoteState,
    obj: ObjRefinerState,
    tracker: Option<Tracker>,
}

enum Primary {
    Objects(Vec<ObjectDisparity>, usize),
    Dense(DisparityMap),
}

/// Image whose row `y` shows row `y - delta` of `img` (edges replicated).
pub fn shift_rows(img: &GrayImage, delta: i32) -> Result<GrayImage> {
    if delta == 0 {
        return Ok(img.clone());
    }
    img.crop_clamped(0, -(delta as isize), img.width(), img.height())
}

/// Lower median of the valid map values whose pixel centers lie in `det`.
pub fn box_median(map: &DisparityMap, det: &Detection, min_pixels: usize) -> Option<f64> {
    let (w, h) = (map.width(), map.height());
    let (x0, y0, x1, y1) = det.pixel_box(w, h);
    let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(w as f64) as usize);
    let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().min(h as f64) as usize);
    let mut vals: Vec<f64> = ys
        .flat_map(|y| xs.clone().map(move |x| (x, y)))
        .filter(|&(x, y)| det.contains_pixel(x as i32, y as i32, w, h))
        .filter_map(|(x, y)| map.get(x, y))
        .collect();
    if vals.len() < min_pixels.max(1) {
        return None;
    }
    vals.sort_by(f64::total_cmp);
    Some(vals[(vals.len() - 1) / 2])
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, calib: StereoCalibration) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline {
            cache: CensusCache::new(),
            rect: RectOffsetState::new(cfg.rect_window, cfg.rect_max_step),
            vote: VoteState::new(cfg.radar_k, cfg.radar_lambda),
            obj: cfg.obj_refiner.clone(),
            tracker: None,
            cfg,
            calib,
        })
    }

    pub fn process(&mut self, input: &FrameInput) -> Result<FrameResult> {
        let frame = input.frame;
        let dims = (input.left.width(), input.left.height());
        if dims != (input.right.width(), input.right.height()) {
            return Err(Error::Frame { frame, msg: "left and right images differ in size".into() });
        }
        let in_frame = |e: Error| match e {
            e @ Error::Frame { .. } => e,
            e => Error::Frame { frame, msg: e.to_string() },
        };
        let cfg = &self.cfg;
        let calib = &self.calib;
        let rect_delta = if cfg.auto_rect { self.rect.current } else { 0 };

        // (a) ingest and (b)-(d) concurrent stages
        let dets = select_objects(&input.detections, &cfg.ranger);
        let cache = &mut self.cache;
        let ((primary, raw_rect), mono) = rayon::join(
            || {
                rayon::join(
                    || -> Result<Primary> {
                        let left = shift_rows(&input.left, rect_delta)?;
                        match cfg.method {
                            DepthMethod::TemplateMatcher => {
                                let (_, blocks) = plan_blocks(&dets, &cfg.ranger, dims);
                                let points = blocks.iter().map(|b| b.points.len()).sum();
                                let objs = estimate_object_disparities(&left, &input.right, &dets, &cfg.ranger, cache, frame)?;
                                Ok(Primary::Objects(objs, points))
                            }
                            DepthMethod::StereoBm => Ok(Primary::Dense(bm_disparity(&left, &input.right, &cfg.bm)?)),
                            DepthMethod::StereoSgm => Ok(Primary::Dense(sgm_disparity(&left, &input.right, &cfg.sgm)?)),
                        }
                    },
                    || -> Result<Option<i32>> {
                        if !cfg.auto_rect {
                            return Ok(None);
                        }
                        let (x0, y0, x1, y1) = cfg.rect_roi;
                        let (w, h) = (dims.0 as f64, dims.1 as f64);
                        let roi = Roi {
                            x: (x0 * w) as usize,
                            y: (y0 * h) as usize,
                            width: ((x1 - x0) * w) as usize,
                            height: ((y1 - y0) * h) as usize,
                        };
                        let range = (-cfg.rect_range, cfg.rect_range);
                        Ok(Some(auto_rect_search(&input.left, &input.right, roi, range, &cfg.bm)?.0))
                    },
                )
            },
            || {
                dets.iter()
                    .map(|d| {
                        let gpt = ground_point_depth(d, calib, dims, &cfg.covariance).ok();
                        let size = cfg
                            .width_prior(d.class)
                            .and_then(|w| size_based_depth(d, w, calib, dims, &cfg.covariance).ok())
                            .filter(|e| e.valid);
                        (gpt, size)
                    })
                    .collect::<Vec<_>>()
            },
        );
        let primary = primary.map_err(in_frame)?;
        let raw_rect = raw_rect.map_err(in_frame)?;

        // refiners
        if let Some(raw) = raw_rect {
            self.rect.filter_offset(raw);
        }
        let mut log = RefinerLog { rect_delta, radar_offset: 0.0, obj_offset: 0.0 };
        let (disparities, query_points): (Vec<Option<f64>>, usize) = match primary {
            Primary::Dense(map) => {
                if self.cfg.radar_refiner {
                    log.radar_offset = radar_refine_step(&map, &input.radar, &mut self.vote, calib);
                }
                let off = log.radar_offset;
                let d = dets.iter().map(|d| box_median(&map, d, self.cfg.min_box_pixels).map(|v| v + off)).collect();
                (d, 0)
            }
            Primary::Objects(objs, points) => {
                if self.cfg.object_refiner {
                    let obs: Vec<StereoObservation> = dets
                        .iter()
                        .zip(&objs)
                        .filter(|(_, o)| o.valid && o.disparity > 0.0)
                        .map(|(d, o)| StereoObservation { u: d.cx * dims.0 as f64, v: d.cy * dims.1 as f64, d: o.disparity })
                        .collect();
                    log.obj_offset = refine_object_offset(&obs, &input.radar, &mut self.obj, calib).map_err(in_frame)?;
                }
                let off = log.obj_offset;
                (objs.iter().map(|o| o.valid.then_some(o.disparity + off)).collect(), points)
            }
        };

        // closest points, fusion, tracking
        let mut depths = Vec::with_capacity(dets.len());
        let mut observations = Vec::new();
        for ((det, d), (gpt, size)) in dets.iter().zip(&disparities).zip(mono) {
            let (u, v) = (det.cx * dims.0 as f64, det.cy * dims.1 as f64);
            let stereo: Option<DepthEstimate> = d
                .filter(|&d| d > 0.0)
                .and_then(|d| stereo_estimate(u, v, d, self.cfg.disparity_variance, calib, &self.cfg.covariance).ok());
            let cands = DepthCandidates { stereo, gpt, size };
            let fused = fuse_depth(&cands, self.cfg.tracker.fusion_ratio).ok();
            depths.push(DepthRecord {
                frame,
                det_id: det.id,
                class: det.class,
                disparity: d.unwrap_or(0.0),
                valid: d.is_some(),
                clp_by_stereo: cands.stereo.as_ref().map(|e| e.point_imu),
                clp_by_gpt: cands.gpt.as_ref().map(|e| e.point_imu),
                clp_by_size: cands.size.as_ref().map(|e| e.point_imu),
                source: fused.as_ref().map(|e| e.source),
                depth: fused.as_ref().map(|e| e.depth),
            });
            if let Some(fused) = fused {
                let mono = cands.gpt.as_ref().or(cands.size.as_ref());
                observations.push(Observation {
                    det: *det,
                    feature: synth::identity_feature(det.id, self.cfg.feature_dim),
                    width_m: Some(det.w * dims.0 as f64 * fused.depth / calib.f),
                    x_stereo: cands.stereo.as_ref().map(|e| e.point_imu.x),
                    x_mono: mono.map(|e| e.point_imu.x),
                    depth: fused,
                });
            }
        }
        let tracker = self
            .tracker
            .get_or_insert_with(|| Tracker::new(self.cfg.tracker.clone(), calib.clone(), dims));
        let tracks = tracker.step(frame, input.t, input.ego, &observations)?;
        Ok(FrameResult { frame, depths, tracks, refiner: log, query_points })
    }
}

/// Runs every frame of `source` in order on a pool of `cfg.workers` threads.
pub fn run_pipeline(cfg: &PipelineConfig, source: &InputSource) -> Result<Vec<FrameResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut pipeline = Pipeline::new(cfg.clone(), source.calib().clone())?;
        let mut out = Vec::new();
        source.for_each(|input| {
            out.push(pipeline.process(&input)?);
            Ok(())
        })?;
        Ok(out)
    })
}

/// Writes `depth.txt`, `tracks.txt` and `refiner.txt` into `dir`.
pub fn write_results(dir: impl AsRef<Path>, results: &[FrameResult]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (mut depth, mut tracks, mut refiner) = (String::new(), String::new(), String::new());
    for r in results {
        for d in &r.depths {
            depth += &format!("{d}\n");
        }
        for t in &r.tracks {
            tracks += &format!("{t}\n");
        }
        refiner += &records::format_refiner_log(r.frame, &r.refiner);
    }
    for (name, text) in [("depth.txt", depth), ("tracks.txt", tracks), ("refiner.txt", refiner)] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Range buckets of the evaluation, by true depth in meters.
pub const BUCKETS: [(f64, Option<f64>); 4] = [(0.0, Some(50.0)), (50.0, Some(100.0)), (100.0, Some(200.0)), (200.0, None)];

#[derive(Debug, Clone, PartialEq)]
pub struct BucketMetrics {
    pub count: usize,
    /// Over valid records; `None` when no record is valid.
    pub disparity_mae: Option<f64>,
    /// Over records with a fused depth.
    pub depth_rel_error: Option<f64>,
    pub valid_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub frame: u64,
    pub log: RefinerLog,
    /// Errors against the injected offset and bias, when known.
    pub rect_error: Option<f64>,
    pub radar_error: Option<f64>,
    pub obj_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// One entry per bucket of `BUCKETS`; `None` marks an empty bucket.
    pub buckets: Vec<Option<BucketMetrics>>,
    pub convergence: Vec<ConvergenceRow>,
}

pub fn bucket_label(b: (f64, Option<f64>)) -> String {
    match b.1 {
        Some(hi) => format!("{}-{}m", b.0, hi),
        None => format!("{}m+", b.0),
    }
}

/// Per-bucket metrics of depth records against truth matched on
/// `(frame, det_id == obj_id)`.
pub fn evaluate_records(
    depths: &BTreeMap<u64, Vec<DepthRecord>>,
    truth: &BTreeMap<u64, Vec<TruthRecord>>,
) -> Result<Vec<Option<BucketMetrics>>> {
    #[derive(Default)]
    struct Acc {
        n: usize,
        valid: usize,
        d_err: f64,
        z_n: usize,
        z_err: f64,
    }
    let mut acc: Vec<Acc> = (0..BUCKETS.len()).map(|_| Acc::default()).collect();
    for (frame, recs) in depths {
        let Some(truths) = truth.get(frame) else {
            return Err(Error::IdMismatch(format!("frame {frame} has no truth records")));
        };
        for r in recs {
            let Some(t) = truths.iter().find(|t| t.id == r.det_id) else {
                return Err(Error::IdMismatch(format!("frame {frame}: detection {} has no truth object", r.det_id)));
            };
            let b = BUCKETS
                .iter()
                .position(|&(lo, hi)| t.depth >= lo && hi.is_none_or(|hi| t.depth < hi))
                .unwrap_or(0);
            let a = &mut acc[b];
            a.n += 1;
            if r.valid {
                a.valid += 1;
                a.d_err += (r.disparity - t.disparity).abs();
            }
            if let Some(z) = r.depth {
                a.z_n += 1;
                a.z_err += (z - t.depth).abs() / t.depth;
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|a| {
            (a.n > 0).then(|| BucketMetrics {
                count: a.n,
                disparity_mae: (a.valid > 0).then(|| a.d_err / a.valid as f64),
                depth_rel_error: (a.z_n > 0).then(|| a.z_err / a.z_n as f64),
                valid_rate: a.valid as f64 / a.n as f64,
            })
        })
        .collect())
}

/// Scores a pipeline output directory against a synthetic run directory.
pub fn evaluate(run_dir: impl AsRef<Path>, truth_dir: impl AsRef<Path>) -> Result<EvalReport> {
    let (run_dir, truth_dir) = (run_dir.as_ref(), truth_dir.as_ref());
    let dp = run_dir.join("depth.txt");
    let depths = parse_depth_records(&records::read_text(&dp)?, &dp)?;
    let tp = truth_dir.join("truth.txt");
    let truth = records::parse_truth(&records::read_text(&tp)?, &tp)?;
    let buckets = evaluate_records(&depths, &truth)?;

    let scene_path = truth_dir.join("scene.txt");
    let scene = if scene_path.exists() { Some(Scene::load(&scene_path)?) } else { None };
    let rp = run_dir.join("refiner.txt");
    let logs = if rp.exists() { records::parse_refiner_log(&records::read_text(&rp)?, &rp)? } else { BTreeMap::new() };
    let convergence = logs
        .into_iter()
        .map(|(frame, log)| {
            let cfg = scene.as_ref().map(|s| &s.config);
            ConvergenceRow {
                frame,
                log,
                rect_error: cfg.map(|c| f64::from(log.rect_delta - c.vertical_offset)),
                radar_error: cfg.map(|c| log.radar_offset + c.disparity_bias),
                obj_error: cfg.map(|c| log.obj_offset + c.disparity_bias),
            }
        })
        .collect();
    Ok(EvalReport { buckets, convergence })
}

fn opt(v: Option<f64>) -> String {
    v.map_or("NA".into(), |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn text(&self) -> String {
        let mut s = String::from("range bucket metrics\n");
        for (b, m) in BUCKETS.iter().zip(&self.buckets) {
            let label = bucket_label(*b);
            match m {
                Some(m) => {
                    s += &format!(
                        "  {label:>10}: n={} disparity_mae={} depth_rel_error={} valid_rate={:.4}\n",
                        m.count,
                        opt(m.disparity_mae),
                        opt(m.depth_rel_error),
                        m.valid_rate
                    )
                }
                None => s += &format!("  {label:>10}: absent\n"),
            }
        }
        if let Some(last) = self.convergence.last() {
            s += &format!(
                "refiners after frame {}: rect_delta={} radar_offset={:.4} obj_offset={:.4}\n",
                last.frame, last.log.rect_delta, last.log.radar_offset, last.log.obj_offset
            );
        }
        s
    }

    /// Bucket table; empty buckets are omitted.
    pub fn metrics_tsv(&self) -> String {
        let mut s = String::from("bucket\tcount\tdisparity_mae\tdepth_rel_error\tvalid_rate\n");
        for (b, m) in BUCKETS.iter().zip(&self.buckets) {
            if let Some(m) = m {
                s += &format!(
                    "{}\t{}\t{}\t{}\t{:.6}\n",
                    bucket_label(*b),
                    m.count,
                    opt(m.disparity_mae),
                    opt(m.depth_rel_error),
                    m.valid_rate
                );
            }
        }
        s
    }

    pub fn convergence_tsv(&self) -> String {
        let mut s = String::from("frame\trect_delta\tradar_offset\tobj_offset\trect_error\tradar_error\tobj_error\n");
        for r in &self.convergence {
            s += &format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.frame,
                r.log.rect_delta,
                r.log.radar_offset,
                r.log.obj_offset,
                opt(r.rect_error),
                opt(r.radar_error),
                opt(r.obj_error)
            );
        }
        s
    }
}
