//! Synthetic rectified stereo scenes with exact ground truth.
//!
//! Objects are fronto-parallel textured rectangles. The left image samples
//! each surface texture at pixel centers; the right image shows the same
//! surface shifted by the object's disparity (plus an optional injected
//! bias), linearly interpolated between left-grid samples. Objects are drawn
//! far to near, so nearer objects occlude farther ones in both views.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::calib_refine::RadarDetection;
use crate::error::{Error, Result};
use crate::geometry::{imu_to_cam, StereoCalibration};
use crate::image::GrayImage;
use crate::kv::KvFile;
use crate::template::{Detection, ObjectClass};

/// Normalized sub-rectangle of an object face, `(x0, y0, x1, y1)` in
/// `[0, 1]`, through which the scene behind is visible.
pub type Window = (f64, f64, f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: u64,
    pub class: ObjectClass,
    /// Center of the visible face, vehicle frame (x forward, y left, z up).
    pub position: Vector3<f64>,
    /// Width, height and length in meters.
    pub size: Vector3<f64>,
    pub texture_seed: u64,
    /// Absolute velocity in vehicle axes, m/s.
    pub velocity: Vector3<f64>,
    /// Disparity change per pixel across the face (0 for fronto-parallel).
    pub ramp: f64,
    pub windows: Vec<Window>,
}

impl SceneObject {
    /// An object standing on the ground at longitudinal distance `x`.
    pub fn on_ground(id: u64, class: ObjectClass, x: f64, y: f64, width: f64, height: f64) -> Self {
        SceneObject {
            id,
            class,
            position: Vector3::new(x, y, height / 2.0),
            size: Vector3::new(width, height, 4.0),
            texture_seed: id.wrapping_mul(0x9E37_79B9).wrapping_add(17),
            velocity: Vector3::zeros(),
            ramp: 0.0,
            windows: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub calib: StereoCalibration,
    pub width: usize,
    pub height: usize,
    pub background_seed: u64,
    pub background_disparity: f64,
    /// Integer vertical offset of the right image in pixels.
    pub vertical_offset: i32,
    /// Added to every rendered disparity; not part of the ground truth.
    pub disparity_bias: f64,
    pub gain: f64,
    pub bias: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub radar_sigma: f64,
    pub seed: u64,
    /// Value-noise lattice spacing in pixels.
    pub texture_cell: f64,
    /// Intensity range of texture lattice values.
    pub texture_range: (f64, f64),
    pub ego_speed: f64,
    pub frame_dt: f64,
}

impl SceneConfig {
    pub fn new(calib: StereoCalibration, width: usize, height: usize) -> Self {
        SceneConfig {
            calib,
            width,
            height,
            background_seed: 1,
            background_disparity: 0.5,
            vertical_offset: 0,
            disparity_bias: 0.0,
            gain: 1.0,
            bias: 0.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            radar_sigma: 0.0,
            seed: 0,
            texture_cell: 4.0,
            texture_range: (20.0, 235.0),
            ego_speed: 0.0,
            frame_dt: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Parameter("scene dimensions must be positive".into()));
        }
        if !(self.gamma > 0.0) || !(self.texture_cell > 0.0) || self.noise_sigma < 0.0 || self.radar_sigma < 0.0 {
            return Err(Error::Parameter("need gamma > 0, texture_cell > 0, non-negative noise".into()));
        }
        if !(self.background_disparity > 0.0) || !(self.frame_dt > 0.0) {
            return Err(Error::Parameter("background disparity and frame_dt must be positive".into()));
        }
        Ok(())
    }

    /// Radiometric map of the right camera applied to an intensity.
    pub fn radiometric(&self, v: f64) -> f64 {
        (self.gain * (v / 255.0).powf(self.gamma) * 255.0 + self.bias).clamp(0.0, 255.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub objects: Vec<SceneObject>,
}

/// Per-object ground truth of one rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTruth {
    pub id: u64,
    pub class: ObjectClass,
    /// Geometric disparity at the face center (no injected bias).
    pub disparity: f64,
    pub depth: f64,
    pub position: Vector3<f64>,
    /// Left-image pixel rectangle `(x0, y0, x1, y1)` before clipping.
    pub pixel_box: (f64, f64, f64, f64),
}

/// Per-pixel ground truth of the left view.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthMap {
    pub width: usize,
    pub height: usize,
    pub disparity: Vec<f64>,
    /// Visible object at each pixel; `None` for background.
    pub owner: Vec<Option<u64>>,
}

impl TruthMap {
    pub fn disparity_at(&self, x: usize, y: usize) -> f64 {
        self.disparity[y * self.width + x]
    }

    pub fn owner_at(&self, x: usize, y: usize) -> Option<u64> {
        self.owner[y * self.width + x]
    }
}

#[derive(Debug, Clone)]
pub struct StereoFrame {
    pub left: GrayImage,
    pub right: GrayImage,
    pub objects: Vec<ObjectTruth>,
    pub truth: TruthMap,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Bilinear value noise; lattice values are a pure function of
/// `(seed, ix, iy)`.
fn value_noise(seed: u64, x: f64, y: f64, cell: f64, range: (f64, f64)) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (ix, iy) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - ix, gy - iy);
    let lattice = |i: i64, j: i64| {
        let h = splitmix(seed ^ splitmix((i as u64).wrapping_mul(0x1656_67B1) ^ (j as u64).wrapping_mul(0x27D4_EB2F)));
        range.0 + (range.1 - range.0) * ((h >> 11) as f64 / (1u64 << 53) as f64)
    };
    let (i, j) = (ix as i64, iy as i64);
    let top = lattice(i, j) * (1.0 - fx) + lattice(i + 1, j) * fx;
    let bot = lattice(i, j + 1) * (1.0 - fx) + lattice(i + 1, j + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Projected face of an object in the left view.
#[derive(Debug, Clone)]
struct Face {
    id: u64,
    seed: u64,
    depth: f64,
    /// Left-image pixel-edge coordinates.
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    /// Disparity at the face center and its slope per pixel.
    d0: f64,
    ramp: f64,
    center: f64,
    windows: Vec<Window>,
}

impl Face {
    fn disparity_at(&self, px: f64) -> f64 {
        self.d0 + self.ramp * (px - self.center)
    }

    /// Left-view continuous x for a right-view continuous x.
    fn left_x(&self, rx: f64, bias: f64) -> f64 {
        (rx + self.d0 + bias - self.ramp * self.center) / (1.0 - self.ramp)
    }

    fn covers(&self, px: f64, py: f64) -> bool {
        if px < self.x0 || px >= self.x1 || py < self.y0 || py >= self.y1 {
            return false;
        }
        let (u, v) = ((px - self.x0) / (self.x1 - self.x0), (py - self.y0) / (self.y1 - self.y0));
        !self.windows.iter().any(|&(a, b, c, d)| u >= a && u < c && v >= b && v < d)
    }
}

impl Scene {
    pub fn new(config: SceneConfig, objects: Vec<SceneObject>) -> Self {
        Scene { config, objects }
    }

    fn faces(&self) -> Result<Vec<Face>> {
        let c = &self.config.calib;
        let mut faces = Vec::with_capacity(self.objects.len());
        for o in &self.objects {
            let p = imu_to_cam(&o.position, c);
            if !(p.z > 0.0) || !(o.size.x > 0.0 && o.size.y > 0.0) {
                return Err(Error::Input(format!("object {} has degenerate geometry (Z = {})", o.id, p.z)));
            }
            if o.ramp.abs() >= 0.5 {
                return Err(Error::Input(format!("object {}: disparity ramp {} too steep", o.id, o.ramp)));
            }
            let (hw, hh) = (o.size.x / 2.0, o.size.y / 2.0);
            let x0 = c.cx + c.f * (p.x - hw) / p.z;
            let x1 = c.cx + c.f * (p.x + hw) / p.z;
            let y0 = c.cy + c.f * (p.y - hh) / p.z;
            let y1 = c.cy + c.f * (p.y + hh) / p.z;
            faces.push(Face {
                id: o.id,
                seed: o.texture_seed,
                depth: p.z,
                x0,
                y0,
                x1,
                y1,
                d0: c.f * c.b / p.z,
                ramp: o.ramp,
                center: 0.5 * (x0 + x1),
                windows: o.windows.clone(),
            });
        }
        // painter's order: far first, ties by id
        faces.sort_by(|a, b| b.depth.total_cmp(&a.depth).then(a.id.cmp(&b.id)));
        Ok(faces)
    }

    /// Moves every object by its velocity relative to the ego vehicle.
    pub fn advance(&mut self, dt: f64) {
        let ego = Vector3::new(self.config.ego_speed, 0.0, 0.0);
        for o in &mut self.objects {
            o.position += (o.velocity - ego) * dt;
        }
    }
}

fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Texture value seen by the left camera at continuous position `(px, py)`
/// on the surface of `face` (or the background when `face` is `None`).
fn surface_value(cfg: &SceneConfig, face: Option<&Face>, px: f64, py: f64) -> f64 {
    match face {
        Some(f) => value_noise(f.seed, px - f.x0, py - f.y0, cfg.texture_cell, cfg.texture_range),
        None => value_noise(cfg.background_seed, px, py, cfg.texture_cell, cfg.texture_range),
    }
}

/// Right-view value: linear interpolation between the two left-grid
/// samples around left position `lx`.
fn interpolated(cfg: &SceneConfig, face: Option<&Face>, lx: f64, py: f64) -> f64 {
    let q = lx - 0.5;
    let i = q.floor();
    let a = q - i;
    let v0 = surface_value(cfg, face, i + 0.5, py);
    if a == 0.0 {
        return v0;
    }
    let v1 = surface_value(cfg, face, i + 1.5, py);
    (1.0 - a) * v0 + a * v1
}

/// Renders frame `frame` of the scene (the frame index only seeds noise).
pub fn render_stereo_pair(scene: &Scene, frame: u64) -> Result<StereoFrame> {
    let cfg = &scene.config;
    cfg.validate()?;
    let faces = scene.faces()?;
    let (w, h) = (cfg.width, cfg.height);
    let bias = cfg.disparity_bias;

    let mut left = vec![0f64; w * h];
    let mut disparity = vec![cfg.background_disparity; w * h];
    let mut owner = vec![None; w * h];
    for y in 0..h {
        let py = y as f64 + 0.5;
        for x in 0..w {
            let px = x as f64 + 0.5;
            let top = faces.iter().rev().find(|f| f.covers(px, py));
            left[y * w + x] = surface_value(cfg, top, px, py);
            if let Some(f) = top {
                disparity[y * w + x] = f.disparity_at(px);
                owner[y * w + x] = Some(f.id);
            }
        }
    }

    // right view, rendered at scene row y - offset
    let mut right = vec![0f64; w * h];
    for y in 0..h {
        let py = (y as i64 - cfg.vertical_offset as i64) as f64 + 0.5;
        for x in 0..w {
            let rx = x as f64 + 0.5;
            let top = faces.iter().rev().find(|f| f.covers(f.left_x(rx, bias), py));
            right[y * w + x] = match top {
                Some(f) => interpolated(cfg, Some(f), f.left_x(rx, bias), py),
                None => interpolated(cfg, None, rx + cfg.background_disparity + bias, py),
            };
        }
    }

    let mut left: Vec<u8> = left.into_iter().map(quantize).collect();
    let mut right: Vec<u8> = right.into_iter().map(|v| quantize(cfg.radiometric(quantize(v) as f64))).collect();
    if cfg.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(frame)));
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
        for v in left.iter_mut().chain(right.iter_mut()) {
            *v = quantize(*v as f64 + normal.sample(&mut rng));
        }
    }

    let c = &cfg.calib;
    let objects = scene
        .objects
        .iter()
        .map(|o| {
            let f = faces.iter().find(|f| f.id == o.id).expect("one face per object");
            ObjectTruth {
                id: o.id,
                class: o.class,
                disparity: f.d0,
                depth: c.f * c.b / f.d0,
                position: o.position,
                pixel_box: (f.x0, f.y0, f.x1, f.y1),
            }
        })
        .collect();

    Ok(StereoFrame {
        left: GrayImage::new(w, h, left)?,
        right: GrayImage::new(w, h, right)?,
        objects,
        truth: TruthMap { width: w, height: h, disparity, owner },
    })
}

/// One radar return per object: noisy position, exact extent.
pub fn simulate_radar(scene: &Scene, frame: u64) -> Result<Vec<RadarDetection>> {
    let cfg = &scene.config;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x52_4144_4152) ^ splitmix(frame));
    let normal = Normal::new(0.0, cfg.radar_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok(scene
        .objects
        .iter()
        .map(|o| {
            let noise = Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
            RadarDetection { position: o.position + noise, extent: o.size }
        })
        .collect())
}

/// Projected face boxes clipped to the image; objects behind the camera or
/// entirely outside the view are skipped. Ids are the object ids.
pub fn ground_truth_detections(scene: &Scene) -> Result<Vec<Detection>> {
    let cfg = &scene.config;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut out = Vec::new();
    for o in &scene.objects {
        let p = imu_to_cam(&o.position, &cfg.calib);
        if p.z <= 0.0 {
            continue;
        }
        let c = &cfg.calib;
        let x0 = ((c.cx + c.f * (p.x - o.size.x / 2.0) / p.z) / w).clamp(0.0, 1.0);
        let x1 = ((c.cx + c.f * (p.x + o.size.x / 2.0) / p.z) / w).clamp(0.0, 1.0);
        let y0 = ((c.cy + c.f * (p.y - o.size.y / 2.0) / p.z) / h).clamp(0.0, 1.0);
        let y1 = ((c.cy + c.f * (p.y + o.size.y / 2.0) / p.z) / h).clamp(0.0, 1.0);
        if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
            continue;
        }
        out.push(Detection::new(o.id, o.class, 0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)?);
    }
    Ok(out)
}

/// Typical `(width, height, length)` of a class in meters.
pub fn class_size(class: ObjectClass) -> (f64, f64, f64) {
    match class {
        ObjectClass::Car => (1.9, 1.5, 4.5),
        ObjectClass::Truck => (2.5, 3.5, 12.0),
        ObjectClass::Pedestrian => (0.6, 1.7, 0.5),
        ObjectClass::Cyclist => (0.7, 1.7, 1.8),
        ObjectClass::Other => (1.8, 1.8, 3.0),
    }
}

/// Random traffic of up to `n` objects with ranges in `range` meters.
/// Image positions are drawn uniformly and candidates whose box overlaps
/// an already placed box by more than 20% of either area are redrawn, so
/// most faces stay visible. Velocities are ego speed ± 3 m/s.
pub fn traffic_scene(config: SceneConfig, n: usize, range: (f64, f64), seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x7A_FF1C));
    let (w, h) = (config.width as f64, config.height as f64);
    let c = config.calib.clone();
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut boxes: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut attempts = 0;
    while objects.len() < n && attempts < 200 * n.max(1) {
        attempts += 1;
        let class = match rng.random_range(0..10) {
            0..=5 => ObjectClass::Car,
            6 | 7 => ObjectClass::Truck,
            8 => ObjectClass::Pedestrian,
            _ => ObjectClass::Cyclist,
        };
        let (ow, oh, ol) = class_size(class);
        let x = rng.random_range(range.0..range.1);
        let u = rng.random_range(0.05 * w..0.95 * w);
        let y = (c.cx - u) * x / c.f;
        let half = 0.5 * c.f * ow / x;
        let bottom = c.cy + c.f * c.camera_height / x;
        let b = (u - half, bottom - c.f * oh / x, u + half, bottom);
        if b.0 < 0.0 || b.2 > w || b.1 < 0.0 || b.3 > h {
            continue;
        }
        let area = |r: &(f64, f64, f64, f64)| (r.2 - r.0) * (r.3 - r.1);
        let clash = boxes.iter().any(|o| {
            let iw = (b.2.min(o.2) - b.0.max(o.0)).max(0.0);
            let ih = (b.3.min(o.3) - b.1.max(o.1)).max(0.0);
            iw * ih > 0.2 * area(&b).min(area(o))
        });
        if clash {
            continue;
        }
        boxes.push(b);
        let id = objects.len() as u64 + 1;
        let mut o = SceneObject::on_ground(id, class, x, y, ow, oh);
        o.size.z = ol;
        o.texture_seed = splitmix(seed ^ id);
        o.velocity = Vector3::new(config.ego_speed + rng.random_range(-3.0..3.0), 0.0, 0.0);
        objects.push(o);
    }
    Scene::new(config, objects)
}

/// Fixed random unit vector standing in for an appearance embedding of
/// ground-truth identity `id`.
pub fn identity_feature(id: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(id ^ 0xFEA7));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

const SCENE_KEYS: &[&str] = &[
    "f",
    "b",
    "cx",
    "cy",
    "h_cam",
    "width",
    "height",
    "background_seed",
    "background_disparity",
    "vertical_offset",
    "disparity_bias",
    "gain",
    "bias",
    "gamma",
    "noise_sigma",
    "radar_sigma",
    "seed",
    "texture_cell",
    "texture_lo",
    "texture_hi",
    "ego_speed",
    "frame_dt",
];

impl Scene {
    /// Scene file: calibration and scene keys, plus one
    /// `object.<id> = class x y z width height length vx vy seed` per object.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        for k in kv.keys() {
            if !SCENE_KEYS.contains(&k) && !k.starts_with("object.") {
                return Err(Error::Input(format!("unknown scene key `{k}`")));
            }
        }
        let calib = StereoCalibration::new(kv.require("f")?, kv.require("b")?, kv.require("cx")?, kv.require("cy")?, kv.require("h_cam")?)?;
        let mut cfg = SceneConfig::new(calib, kv.require("width")?, kv.require("height")?);
        macro_rules! opt {
            ($field:expr, $key:literal) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        opt!(cfg.background_seed, "background_seed");
        opt!(cfg.background_disparity, "background_disparity");
        opt!(cfg.vertical_offset, "vertical_offset");
        opt!(cfg.disparity_bias, "disparity_bias");
        opt!(cfg.gain, "gain");
        opt!(cfg.bias, "bias");
        opt!(cfg.gamma, "gamma");
        opt!(cfg.noise_sigma, "noise_sigma");
        opt!(cfg.radar_sigma, "radar_sigma");
        opt!(cfg.seed, "seed");
        opt!(cfg.texture_cell, "texture_cell");
        opt!(cfg.texture_range.0, "texture_lo");
        opt!(cfg.texture_range.1, "texture_hi");
        opt!(cfg.ego_speed, "ego_speed");
        opt!(cfg.frame_dt, "frame_dt");
        cfg.validate()?;

        let mut objects = Vec::new();
        for key in kv.keys().filter(|k| k.starts_with("object.")) {
            let id: u64 = key["object.".len()..]
                .parse()
                .map_err(|_| Error::Input(format!("bad object key `{key}`")))?;
            let raw = kv.raw(key).unwrap_or_default();
            let fields: Vec<&str> = raw.split_whitespace().collect();
            if fields.len() != 10 {
                return Err(Error::Input(format!("`{key}` needs: class x y z width height length vx vy seed")));
            }
            let class: ObjectClass = fields[0].parse()?;
            let nums: std::result::Result<Vec<f64>, _> = fields[1..9].iter().map(|s| s.parse::<f64>()).collect();
            let nums = nums.map_err(|_| Error::Input(format!("`{key}`: bad number")))?;
            let seed: u64 = fields[9].parse().map_err(|_| Error::Input(format!("`{key}`: bad seed")))?;
            objects.push(SceneObject {
                id,
                class,
                position: Vector3::new(nums[0], nums[1], nums[2]),
                size: Vector3::new(nums[3], nums[4], nums[5]),
                texture_seed: seed,
                velocity: Vector3::new(nums[6], nums[7], 0.0),
                ramp: 0.0,
                windows: Vec::new(),
            });
        }
        objects.sort_by_key(|o| o.id);
        Ok(Scene { config: cfg, objects })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text, "<scene>")?)
    }

    pub fn to_kv_string(&self) -> String {
        let c = &self.config;
        let k = &c.calib;
        let mut s = format!(
            "f = {}\nb = {}\ncx = {}\ncy = {}\nh_cam = {}\nwidth = {}\nheight = {}\n",
            k.f, k.b, k.cx, k.cy, k.camera_height, c.width, c.height
        );
        s += &format!(
            "background_seed = {}\nbackground_disparity = {}\nvertical_offset = {}\ndisparity_bias = {}\n",
            c.background_seed, c.background_disparity, c.vertical_offset, c.disparity_bias
        );
        s += &format!(
            "gain = {}\nbias = {}\ngamma = {}\nnoise_sigma = {}\nradar_sigma = {}\nseed = {}\n",
            c.gain, c.bias, c.gamma, c.noise_sigma, c.radar_sigma, c.seed
        );
        s += &format!(
            "texture_cell = {}\ntexture_lo = {}\ntexture_hi = {}\nego_speed = {}\nframe_dt = {}\n",
            c.texture_cell, c.texture_range.0, c.texture_range.1, c.ego_speed, c.frame_dt
        );
        for o in &self.objects {
            let (p, z, v) = (&o.position, &o.size, &o.velocity);
            s += &format!(
                "object.{} = {} {} {} {} {} {} {} {} {} {}\n",
                o.id, o.class, p.x, p.y, p.z, z.x, z.y, z.z, v.x, v.y, o.texture_seed
            );
        }
        s
    }
}

/// Writes `frames` consecutive frames into `dir`: stereo PGMs, the
/// calibration, ground-truth detections, radar returns, per-object truth
/// and ego motion.
pub fn write_run(scene: &Scene, dir: impl AsRef<Path>, frames: usize) -> Result<()> {
    use crate::records;

    let dir = dir.as_ref();
    let frame_dir = dir.join("frames");
    fs::create_dir_all(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("scene.txt", &scene.to_kv_string())?;
    write("calib.txt", &scene.config.calib.to_kv_string())?;

    let mut scene = scene.clone();
    let (mut dets, mut radar, mut truth, mut ego) = (String::new(), String::new(), String::new(), String::new());
    for frame in 0..frames as u64 {
        let out = render_stereo_pair(&scene, frame)?;
        out.left.write_pgm(frame_dir.join(format!("left_{frame:06}.pgm")))?;
        out.right.write_pgm(frame_dir.join(format!("right_{frame:06}.pgm")))?;
        for d in ground_truth_detections(&scene)? {
            dets += &records::format_detection(frame, &d);
        }
        for r in simulate_radar(&scene, frame)? {
            radar += &records::format_radar(frame, &r);
        }
        for o in &out.objects {
            truth += &records::format_truth(frame, o);
        }
        ego += &format!("{} {} {} 0\n", frame, frame as f64 * scene.config.frame_dt, scene.config.ego_speed);
        scene.advance(scene.config.frame_dt);
    }
    write("detections.txt", &dets)?;
    write("radar.txt", &radar)?;
    write("truth.txt", &truth)?;
    write("ego.txt", &ego)?;
    Ok(())
}
