//! Object-centric Census template matching: detections are split into FAR
//! objects (one block at full resolution) and CLOSE objects (a grid of
//! blocks on a downscaled Census image whose verified disparities are
//! robustly aggregated).

use std::fmt;
use std::str::FromStr;

use crate::census::{census_transform, match_batch, CensusImage, ObjectKind, QueryBlock};
use crate::error::{Error, Result};
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectClass {
    Car,
    Truck,
    Pedestrian,
    Cyclist,
    Other,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 5] =
        [ObjectClass::Car, ObjectClass::Truck, ObjectClass::Pedestrian, ObjectClass::Cyclist, ObjectClass::Other];
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
            ObjectClass::Other => "other",
        })
    }
}

impl FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectClass::ALL
            .into_iter()
            .find(|c| c.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Input(format!("unknown object class `{s}`")))
    }
}

/// Detection box in normalized image coordinates (center and size).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub id: u64,
    pub class: ObjectClass,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

const BOX_EPS: f64 = 1e-9;

impl Detection {
    pub fn new(id: u64, class: ObjectClass, cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let d = Detection { id, class, cx, cy, w, h };
        let (x0, y0, x1, y1) = d.corners();
        let inside = |a: f64| (-BOX_EPS..=1.0 + BOX_EPS).contains(&a);
        if !(w > 0.0 && h > 0.0) || ![x0, y0, x1, y1].into_iter().all(inside) {
            return Err(Error::Input(format!("detection {id}: box ({cx}, {cy}, {w}, {h}) is not inside [0,1]")));
        }
        Ok(d)
    }

    /// Normalized `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h)
    }

    /// Box edges in pixels.
    pub fn pixel_box(&self, width: usize, height: usize) -> (f64, f64, f64, f64) {
        let (x0, y0, x1, y1) = self.corners();
        let (w, h) = (width as f64, height as f64);
        (x0 * w, y0 * h, x1 * w, y1 * h)
    }

    pub fn bottom(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &Detection) -> f64 {
        let (a0, a1, a2, a3) = self.corners();
        let (b0, b1, b2, b3) = other.corners();
        let iw = (a2.min(b2) - a0.max(b0)).max(0.0);
        let ih = (a3.min(b3) - a1.max(b1)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &Detection) -> f64 {
        let inter = self.intersection_area(other);
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Whether the pixel `(x, y)` (full resolution) has its center in the box.
    pub fn contains_pixel(&self, x: i32, y: i32, width: usize, height: usize) -> bool {
        let (x0, y0, x1, y1) = self.pixel_box(width, height);
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        px >= x0 && px < x1 && py >= y0 && py < y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectDisparity {
    pub det_id: u64,
    /// Full-resolution pixels.
    pub disparity: f64,
    pub kind: ObjectKind,
    pub n_blocks_used: usize,
    pub valid: bool,
}

impl ObjectDisparity {
    fn invalid(det_id: u64, kind: ObjectKind) -> Self {
        ObjectDisparity { det_id, disparity: 0.0, kind, n_blocks_used: 0, valid: false }
    }
}

/// Normalized region used to prefer objects in front of the vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontalCrop {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl FrontalCrop {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangerConfig {
    /// FAR iff the longer box side is below this many pixels.
    pub min_side_px: f64,
    /// Downscale factor of the Census image used for CLOSE objects.
    pub close_scale: usize,
    pub far_side_points: usize,
    pub far_max_points: usize,
    /// Grid points per side inside each CLOSE sub-block.
    pub close_side_points: usize,
    /// Aggregation gap threshold, full-resolution pixels.
    pub gap_threshold: f64,
    pub min_segment_blocks: usize,
    /// Forward-backward acceptance threshold, pixels at the matching scale.
    pub verify_threshold: f64,
    pub max_objects: usize,
    pub frontal_crop: FrontalCrop,
    pub dx_max_far: i32,
    /// Full-resolution search range for CLOSE objects.
    pub dx_max_close: i32,
    pub dy_range: (i32, i32),
    pub min_block_points: usize,
    /// Points closer than this to the box edge are not sampled (FAR boxes).
    pub far_inset_px: f64,
}

impl Default for RangerConfig {
    fn default() -> Self {
        RangerConfig {
            min_side_px: 48.0,
            close_scale: 2,
            far_side_points: 8,
            far_max_points: 64,
            close_side_points: 6,
            gap_threshold: 1.0,
            min_segment_blocks: 3,
            verify_threshold: 2.0,
            max_objects: 64,
            frontal_crop: FrontalCrop { x0: 0.3, y0: 0.0, x1: 0.7, y1: 1.0 },
            dx_max_far: 32,
            dx_max_close: 128,
            dy_range: (-1, 1),
            min_block_points: 4,
            far_inset_px: 2.0,
        }
    }
}

impl RangerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.min_side_px > 0.0
            && self.close_scale >= 1
            && self.far_side_points > 0
            && self.far_max_points > 0
            && self.close_side_points > 0
            && self.gap_threshold > 0.0
            && self.min_segment_blocks >= 1
            && self.verify_threshold > 0.0
            && self.dx_max_far > 0
            && self.dx_max_close > 0
            && self.min_block_points > 0
            && self.far_inset_px >= 0.0;
        if !positive || self.dy_range.0 > self.dy_range.1 {
            return Err(Error::Parameter(format!("invalid ranger config: {self:?}")));
        }
        Ok(())
    }
}

pub fn classify_far_close(det: &Detection, width: usize, height: usize, min_side_px: f64) -> ObjectKind {
    let side = (det.w * width as f64).max(det.h * height as f64);
    if side < min_side_px {
        ObjectKind::Far
    } else {
        ObjectKind::Close
    }
}

/// `B_j` occludes `B_i` when the boxes overlap with positive area and `B_j`
/// reaches lower in the image. Returns occluder indices per detection.
pub fn find_occluders(dets: &[Detection]) -> Vec<Vec<usize>> {
    dets.iter()
        .enumerate()
        .map(|(i, di)| {
            dets.iter()
                .enumerate()
                .filter(|&(j, dj)| j != i && dj.bottom() > di.bottom() && di.intersection_area(dj) > 0.0)
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

/// Frontal detections by area (largest first), then the rest by bottom edge
/// (lowest, i.e. nearest, first), truncated to `max_objects`.
pub fn select_objects(dets: &[Detection], cfg: &RangerConfig) -> Vec<Detection> {
    let (mut frontal, mut rest): (Vec<Detection>, Vec<Detection>) =
        dets.iter().partition(|d| cfg.frontal_crop.contains(d.cx, d.cy));
    frontal.sort_by(|a, b| b.area().total_cmp(&a.area()).then(a.id.cmp(&b.id)));
    rest.sort_by(|a, b| b.bottom().total_cmp(&a.bottom()).then(a.id.cmp(&b.id)));
    frontal.into_iter().chain(rest).take(cfg.max_objects).collect()
}

/// `n` sample positions at cell centers across `[lo, hi)`.
fn grid_positions(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = i32> {
    let step = (hi - lo) / n as f64;
    (0..n).map(move |i| (lo + (i as f64 + 0.5) * step).floor() as i32)
}

fn grid_points(x0: f64, y0: f64, x1: f64, y1: f64, nx: usize, ny: usize) -> Vec<(i32, i32)> {
    let mut pts: Vec<(i32, i32)> = grid_positions(y0, y1, ny)
        .flat_map(|y| grid_positions(x0, x1, nx).map(move |x| (x, y)))
        .collect();
    pts.sort_unstable_by_key(|&(x, y)| (y, x));
    pts.dedup();
    pts
}

/// Query blocks for one detection. FAR blocks are in full-resolution
/// coordinates; CLOSE blocks in the coordinates of the Census image
/// downscaled by `cfg.close_scale`.
pub fn sample_query_points(
    det: &Detection,
    kind: ObjectKind,
    occluders: &[Detection],
    cfg: &RangerConfig,
    dims: (usize, usize),
) -> Vec<QueryBlock> {
    let (width, height) = dims;
    let occluded = |x: i32, y: i32| occluders.iter().any(|o| o.contains_pixel(x, y, width, height));
    let (bx0, by0, bx1, by1) = det.pixel_box(width, height);
    let mut blocks = Vec::new();
    match kind {
        ObjectKind::Far => {
            let inset = |a: f64, b: f64| {
                if b - a > 2.0 * cfg.far_inset_px + 1.0 {
                    (a + cfg.far_inset_px, b - cfg.far_inset_px)
                } else {
                    (a, b)
                }
            };
            let (x0, x1) = inset(bx0, bx1);
            let (y0, y1) = inset(by0, by1);
            let mut n = cfg.far_side_points;
            while n > 1 && n * n > cfg.far_max_points {
                n -= 1;
            }
            let pts: Vec<(i32, i32)> =
                grid_points(x0, y0, x1, y1, n, n).into_iter().filter(|&(x, y)| !occluded(x, y)).collect();
            if pts.len() >= cfg.min_block_points {
                blocks.push(QueryBlock {
                    points: pts,
                    dx_range: (0, cfg.dx_max_far),
                    dy_range: cfg.dy_range,
                    owner: 0,
                    kind,
                });
            }
        }
        ObjectKind::Close => {
            let s = cfg.close_scale as f64;
            let cell = cfg.min_side_px / 2.0;
            let m = (((bx1 - bx0) / cell).round() as usize).max(2);
            let n = (((by1 - by0) / cell).round() as usize).max(2);
            let dx_max = (cfg.dx_max_close as f64 / s).ceil() as i32;
            let (cw, ch) = ((bx1 - bx0) / m as f64, (by1 - by0) / n as f64);
            for j in 0..n {
                for i in 0..m {
                    let (x0, y0) = (bx0 + i as f64 * cw, by0 + j as f64 * ch);
                    let k = cfg.close_side_points;
                    let pts: Vec<(i32, i32)> = grid_points(x0 / s, y0 / s, (x0 + cw) / s, (y0 + ch) / s, k, k)
                        .into_iter()
                        .filter(|&(x, y)| {
                            let (fx, fy) = ((x as f64 * s) as i32, (y as f64 * s) as i32);
                            !occluded(fx, fy)
                        })
                        .collect();
                    if pts.len() >= cfg.min_block_points {
                        blocks.push(QueryBlock {
                            points: pts,
                            dx_range: (0, dx_max),
                            dy_range: cfg.dy_range,
                            owner: 0,
                            kind,
                        });
                    }
                }
            }
        }
    }
    blocks
}

/// Longest run of sorted values whose successive gaps are below `gap`;
/// on equal length the run with larger values wins. Returns the run.
fn longest_run(sorted: &[f64], gap: f64) -> &[f64] {
    let mut best = (0, 0);
    let mut start = 0;
    for i in 0..sorted.len() {
        if i > 0 && sorted[i] - sorted[i - 1] >= gap {
            start = i;
        }
        // `>=` lets a later (larger-disparity) run of equal length win
        if i + 1 - start >= best.1 - best.0 {
            best = (start, i + 1);
        }
    }
    &sorted[best.0..best.1]
}

fn aggregate_with_count(values: &[f64], gap: f64, min_blocks: usize) -> Option<(f64, usize)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let run = longest_run(&sorted, gap);
    (!run.is_empty() && run.len() >= min_blocks).then(|| (run[run.len() / 2], run.len()))
}

/// Lower median of the longest chain of block disparities with gaps below
/// `gap`, or `None` if that chain has fewer than `min_blocks` members.
pub fn aggregate_close_disparities(values: &[f64], gap: f64, min_blocks: usize) -> Option<f64> {
    aggregate_with_count(values, gap, min_blocks).map(|(v, _)| v)
}

/// Census images of one stereo frame at full and CLOSE resolution.
#[derive(Debug, Clone)]
pub struct CensusPair {
    pub left: CensusImage,
    pub right: CensusImage,
    pub left_scaled: CensusImage,
    pub right_scaled: CensusImage,
}

impl CensusPair {
    pub fn compute(left: &GrayImage, right: &GrayImage, scale: usize) -> Result<Self> {
        if left.width() != right.width() || left.height() != right.height() {
            return Err(Error::Input("stereo images differ in size".into()));
        }
        let (w, h) = (left.width(), left.height());
        let (sw, sh) = ((w / scale).max(1), (h / scale).max(1));
        let ((l, r), (ls, rs)) = rayon::join(
            || rayon::join(|| census_transform(left, w, h), || census_transform(right, w, h)),
            || rayon::join(|| census_transform(left, sw, sh), || census_transform(right, sw, sh)),
        );
        Ok(CensusPair { left: l?, right: r?, left_scaled: ls?, right_scaled: rs? })
    }

    /// Full-resolution pixels per scaled pixel along x.
    pub fn close_factor(&self) -> f64 {
        1.0 / self.left_scaled.scale()
    }
}

/// Holds the Census images of the current frame so several consumers can
/// share one transform per frame.
#[derive(Debug, Default)]
pub struct CensusCache {
    frame: Option<(u64, usize)>,
    pair: Option<CensusPair>,
}

impl CensusCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_compute(&mut self, frame: u64, left: &GrayImage, right: &GrayImage, scale: usize) -> Result<&CensusPair> {
        if self.frame != Some((frame, scale)) || self.pair.is_none() {
            self.pair = Some(CensusPair::compute(left, right, scale)?);
            self.frame = Some((frame, scale));
        }
        Ok(self.pair.as_ref().expect("filled above"))
    }
}

/// Blocks for every detection with owners set to the detection index.
pub fn plan_blocks(dets: &[Detection], cfg: &RangerConfig, dims: (usize, usize)) -> (Vec<ObjectKind>, Vec<QueryBlock>) {
    let occ = find_occluders(dets);
    let mut kinds = Vec::with_capacity(dets.len());
    let mut blocks = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        let kind = classify_far_close(d, dims.0, dims.1, cfg.min_side_px);
        kinds.push(kind);
        let occluders: Vec<Detection> = occ[i].iter().map(|&j| dets[j]).collect();
        blocks.extend(
            sample_query_points(d, kind, &occluders, cfg, dims)
                .into_iter()
                .map(|b| b.with_owner(i, kind)),
        );
    }
    (kinds, blocks)
}

/// Object disparities for `dets` (same order) from a precomputed Census pair.
pub fn estimate_with_census(
    census: &CensusPair,
    dets: &[Detection],
    cfg: &RangerConfig,
) -> Result<Vec<ObjectDisparity>> {
    cfg.validate()?;
    let dims = (census.left.width(), census.left.height());
    let (kinds, blocks) = plan_blocks(dets, cfg, dims);
    let (far, close): (Vec<QueryBlock>, Vec<QueryBlock>) = blocks.into_iter().partition(|b| b.kind == ObjectKind::Far);
    let (far_res, close_res) = rayon::join(
        || match_batch(&far, &census.left, &census.right, cfg.verify_threshold),
        || match_batch(&close, &census.left_scaled, &census.right_scaled, cfg.verify_threshold),
    );

    let mut per_object: Vec<Vec<f64>> = vec![Vec::new(); dets.len()];
    let factor = census.close_factor();
    for (block, res) in far.iter().zip(far_res).chain(close.iter().zip(close_res)) {
        match res {
            Ok(m) if m.verified => {
                let d = match block.kind {
                    ObjectKind::Far => m.dx_subpix,
                    ObjectKind::Close => m.dx_subpix * factor,
                };
                per_object[block.owner].push(d);
            }
            Ok(_) | Err(Error::NoMatch) => {}
            Err(e) => return Err(e),
        }
    }

    Ok(dets
        .iter()
        .zip(kinds)
        .zip(per_object)
        .map(|((det, kind), vals)| match kind {
            ObjectKind::Far => match vals.first() {
                Some(&d) => ObjectDisparity { det_id: det.id, disparity: d, kind, n_blocks_used: 1, valid: true },
                None => ObjectDisparity::invalid(det.id, kind),
            },
            ObjectKind::Close => match aggregate_with_count(&vals, cfg.gap_threshold, cfg.min_segment_blocks) {
                Some((d, n)) => ObjectDisparity { det_id: det.id, disparity: d, kind, n_blocks_used: n, valid: true },
                None => ObjectDisparity::invalid(det.id, kind),
            },
        })
        .collect())
}

/// Template-match disparities for one frame. Census images come from (and
/// are stored in) `cache`.
pub fn estimate_object_disparities(
    left: &GrayImage,
    right: &GrayImage,
    dets: &[Detection],
    cfg: &RangerConfig,
    cache: &mut CensusCache,
    frame: u64,
) -> Result<Vec<ObjectDisparity>> {
    if dets.is_empty() {
        return Ok(Vec::new());
    }
    let census = cache.get_or_compute(frame, left, right, cfg.close_scale)?;
    estimate_with_census(census, dets, cfg)
}
