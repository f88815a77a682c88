//! Online calibration refiners: vertical rectification offset search,
//! radar disparity-offset voting for dense maps, and the object-level
//! radar/stereo offset refiner for template-match results.

use std::collections::VecDeque;

use nalgebra::{Vector3, Vector4};
use rayon::prelude::*;

use crate::dense::{bm_disparity, BmParams};
use crate::error::{Error, Result};
use crate::geometry::{cam_to_imu, imu_to_cam, reproject, StereoCalibration};
use crate::image::{DisparityMap, GrayImage, SUBPIXEL_LEVELS};

const LEVELS: usize = SUBPIXEL_LEVELS as usize;

/// Radar return in the vehicle frame. `extent` is (width along y, height
/// along z, length along x) in meters, centered on `position`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarDetection {
    pub position: Vector3<f64>,
    pub extent: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Picks the better of two `(offset, score)` candidates: higher score, then
/// smaller |offset|, then the negative offset.
fn prefer<T: PartialOrd + Copy>(a: (f64, T), b: (f64, T)) -> (f64, T) {
    let key = |(o, _): (f64, T)| (o.abs(), o);
    if b.1 > a.1 || (b.1 == a.1 && key(b) < key(a)) {
        b
    } else {
        a
    }
}

/// Number of valid BM pixels above `d_min` for every vertical offset of the
/// left image, and the offset maximizing it.
pub fn auto_rect_search(
    left: &GrayImage,
    right: &GrayImage,
    roi: Roi,
    delta_range: (i32, i32),
    bm: &BmParams,
) -> Result<(i32, Vec<(i32, usize)>)> {
    if roi.width == 0 || roi.height == 0 {
        return Err(Error::Empty("auto-rectification ROI"));
    }
    if roi.x + roi.width > left.width() || roi.y + roi.height > left.height() {
        return Err(Error::Input(format!("ROI {roi:?} exceeds the image")));
    }
    if left.width() != right.width() || left.height() != right.height() {
        return Err(Error::Input("stereo images differ in size".into()));
    }
    if delta_range.0 > delta_range.1 {
        return Err(Error::Parameter(format!("empty offset range {delta_range:?}")));
    }
    let r = right.crop_clamped(roi.x as isize, roi.y as isize, roi.width, roi.height)?;
    let counts: Vec<(i32, usize)> = (delta_range.0..=delta_range.1)
        .into_par_iter()
        .map(|delta| {
            // shifting the left image down by delta: row y shows row y - delta
            let l = left.crop_clamped(roi.x as isize, roi.y as isize - delta as isize, roi.width, roi.height)?;
            let map = bm_disparity(&l, &r, bm)?;
            let n = map.iter_valid().filter(|&(_, _, d)| d > bm.min_disparity as f64).count();
            Ok((delta, n))
        })
        .collect::<Result<_>>()?;
    let best = counts
        .iter()
        .map(|&(d, n)| (d as f64, n))
        .reduce(prefer)
        .map(|(d, _)| d as i32)
        .expect("non-empty range");
    Ok((best, counts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectOffsetState {
    /// Number of raw estimates in the median window.
    pub window: usize,
    pub max_step: i32,
    pub history: VecDeque<i32>,
    pub current: i32,
}

impl RectOffsetState {
    pub fn new(window: usize, max_step: i32) -> Self {
        RectOffsetState { window: window.max(1), max_step, history: VecDeque::new(), current: 0 }
    }

    /// Pushes a raw estimate and returns the rate-limited window median.
    pub fn filter_offset(&mut self, raw: i32) -> i32 {
        self.history.push_back(raw);
        while self.history.len() > self.window {
            self.history.pop_front();
        }
        let mut sorted: Vec<i32> = self.history.iter().copied().collect();
        sorted.sort_unstable();
        let median = sorted[(sorted.len() - 1) / 2];
        self.current += (median - self.current).clamp(-self.max_step, self.max_step);
        self.current
    }
}

/// Projects a vehicle-frame point to `(u, v, d)` through the inverse
/// extrinsic and `Q⁻¹`.
pub fn project_radar_to_disparity(p: &Vector3<f64>, calib: &StereoCalibration) -> Result<(f64, f64, f64)> {
    let c = imu_to_cam(p, calib);
    if !(c.z > 0.0) {
        return Err(Error::BehindCamera(c.z));
    }
    let q_inv = calib
        .q()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("reprojection matrix is singular".into()))?;
    let h = q_inv * Vector4::new(c.x, c.y, c.z, 1.0);
    if h.w == 0.0 {
        return Err(Error::DegenerateReprojection);
    }
    Ok((h.x / h.w, h.y / h.w, h.z / h.w))
}

/// Image rectangle `(x0, y0, x1, y1)` (inclusive-exclusive, clipped) covered
/// by the projected corners of a radar extent. Corners behind the camera
/// are ignored.
pub fn radar_box(r: &RadarDetection, calib: &StereoCalibration, dims: (usize, usize)) -> Option<(usize, usize, usize, usize)> {
    let half = Vector3::new(r.extent.z, r.extent.x, r.extent.y) * 0.5;
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for i in 0..8 {
        let s = Vector3::new(
            if i & 1 == 0 { -1.0 } else { 1.0 },
            if i & 2 == 0 { -1.0 } else { 1.0 },
            if i & 4 == 0 { -1.0 } else { 1.0 },
        );
        let corner = r.position + half.component_mul(&s);
        if let Ok((u, v, _)) = project_radar_to_disparity(&corner, calib) {
            lo = (lo.0.min(u), lo.1.min(v));
            hi = (hi.0.max(u), hi.1.max(v));
        }
    }
    if !lo.0.is_finite() {
        return None;
    }
    let clip = |a: f64, n: usize| a.clamp(0.0, n as f64) as usize;
    let (x0, x1) = (clip(lo.0.floor(), dims.0), clip(hi.0.ceil(), dims.0));
    let (y0, y1) = (clip(lo.1.floor(), dims.1), clip(hi.1.ceil(), dims.1));
    (x1 > x0 && y1 > y0).then_some((x0, y0, x1, y1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteState {
    /// Half-range of the histogram in pixels.
    pub k: usize,
    pub lambda: f64,
    /// Gaussian smoothing sigma in bins.
    pub sigma_bins: f64,
    pub memory: Vec<f64>,
    /// Smoothed offset before clamping.
    pub offset: f64,
    pub max_offset: f64,
}

impl VoteState {
    pub fn new(k: usize, lambda: f64) -> Self {
        VoteState {
            k,
            lambda,
            sigma_bins: LEVELS as f64,
            memory: vec![0.0; 2 * k * LEVELS + 1],
            offset: 0.0,
            max_offset: 3.0,
        }
    }

    pub fn applied(&self) -> f64 {
        self.offset.clamp(-self.max_offset, self.max_offset)
    }

    fn bin_offset(&self, bin: usize) -> f64 {
        (bin as f64 - (self.k * LEVELS) as f64) / LEVELS as f64
    }
}

fn gaussian_smooth(v: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return v.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let n = v.len() as isize;
    (0..n)
        .map(|i| {
            (-radius..=radius)
                .filter(|&k| (0..n).contains(&(i + k)))
                .map(|k| v[(i + k) as usize] * kernel[(k + radius) as usize])
                .sum()
        })
        .collect()
}

/// Offset `d_radar − D(p)` of minimum magnitude among valid pixels of the
/// detection's box; ties toward the negative offset.
fn closest_offset(map: &DisparityMap, r: &RadarDetection, calib: &StereoCalibration) -> Option<f64> {
    let (_, _, d_radar) = project_radar_to_disparity(&r.position, calib).ok()?;
    let (x0, y0, x1, y1) = radar_box(r, calib, (map.width(), map.height()))?;
    let mut best: Option<f64> = None;
    for y in y0..y1 {
        for x in x0..x1 {
            if let Some(d) = map.get(x, y) {
                let o = d_radar - d;
                best = match best {
                    Some(b) if (b.abs(), b) <= (o.abs(), o) => Some(b),
                    _ => Some(o),
                };
            }
        }
    }
    best
}

/// One frame of radar voting. Returns the offset to add to every valid
/// pixel of `map`; the map itself is not modified.
pub fn radar_refine_step(
    map: &DisparityMap,
    radar: &[RadarDetection],
    state: &mut VoteState,
    calib: &StereoCalibration,
) -> f64 {
    let levels = SUBPIXEL_LEVELS as f64;
    let mut votes = vec![0.0; state.memory.len()];
    let mut any = false;
    for r in radar {
        let Some(o) = closest_offset(map, r, calib) else { continue };
        if o.abs() > state.k as f64 {
            continue;
        }
        let bin = (o * levels).round() as isize + (state.k * LEVELS) as isize;
        votes[bin as usize] += 1.0;
        any = true;
    }
    if !any {
        return state.applied();
    }
    let smooth = gaussian_smooth(&votes, state.sigma_bins);
    let total: f64 = smooth.iter().sum();
    let lambda = state.lambda;
    for (m, v) in state.memory.iter_mut().zip(&smooth) {
        *m = (1.0 - lambda) * *m + lambda * v / total;
    }
    let best = (0..state.memory.len())
        .map(|i| (state.bin_offset(i), state.memory[i]))
        .reduce(prefer)
        .map(|(o, _)| o)
        .unwrap_or(0.0);
    state.offset = (1.0 - lambda) * state.offset + lambda * best;
    state.applied()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjRefinerState {
    pub prev_offset: f64,
    /// Score bonus for re-selecting the previous offset.
    pub beta: f64,
    /// Association range in meters.
    pub r_max: f64,
    pub prior_weight: f64,
    /// Inlier band around the coarse estimate, pixels.
    pub inlier_band: f64,
    /// Maximum offset change per frame, pixels.
    pub rate_limit: f64,
    pub candidates: Vec<f64>,
}

impl Default for ObjRefinerState {
    fn default() -> Self {
        ObjRefinerState {
            prev_offset: 0.0,
            beta: 0.5,
            r_max: 10.0,
            prior_weight: 1.0,
            inlier_band: 0.25,
            rate_limit: 0.25,
            candidates: (-8..=8).map(|i| i as f64 * 0.25).collect(),
        }
    }
}

/// Stereo object observation: image position and disparity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoObservation {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseResult {
    pub offset: f64,
    pub score: f64,
    /// Matched `(stereo index, radar index)` pairs at the chosen offset.
    pub pairs: Vec<(usize, usize)>,
}

/// Greedy one-to-one association of each stereo point with its nearest
/// radar point within `r_max`, accepted in order of increasing distance.
pub fn greedy_pairs(stereo: &[Vector3<f64>], radar: &[Vector3<f64>], r_max: f64) -> Vec<(usize, usize, f64)> {
    let mut cands: Vec<(usize, usize, f64)> = stereo
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            radar
                .iter()
                .enumerate()
                .map(|(j, r)| (j, (s - r).norm()))
                .filter(|&(_, dist)| dist < r_max)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(j, dist)| (i, j, dist))
        })
        .collect();
    cands.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    let mut used = vec![false; radar.len()];
    let mut out = Vec::new();
    for (i, j, dist) in cands {
        if !used[j] {
            used[j] = true;
            out.push((i, j, dist));
        }
    }
    out
}

/// Stage 1: score every candidate offset by association quality with the
/// radar points (plus the consistency bonus) and keep the best.
pub fn object_refiner_coarse(
    stereo: &[StereoObservation],
    radar: &[Vector3<f64>],
    state: &ObjRefinerState,
    calib: &StereoCalibration,
) -> Result<CoarseResult> {
    if state.candidates.is_empty() {
        return Err(Error::Parameter("object refiner needs candidate offsets".into()));
    }
    let mut best: Option<CoarseResult> = None;
    for &delta in &state.candidates {
        let pts: Vec<(usize, Vector3<f64>)> = stereo
            .iter()
            .enumerate()
            .filter_map(|(i, s)| reproject(s.u, s.v, s.d + delta, calib).ok().map(|p| (i, cam_to_imu(&p, calib))))
            .collect();
        let coords: Vec<Vector3<f64>> = pts.iter().map(|p| p.1).collect();
        let pairs = greedy_pairs(&coords, radar, state.r_max);
        let mut score: f64 = pairs.iter().map(|&(_, _, dist)| (1.0 - dist / state.r_max).max(0.0)).sum();
        if (delta - state.prev_offset).abs() < 1e-9 {
            score += state.beta;
        }
        let cand = CoarseResult { offset: delta, score, pairs: pairs.iter().map(|&(i, j, _)| (pts[i].0, j)).collect() };
        best = Some(match best {
            None => cand,
            Some(b) => {
                let key = |c: &CoarseResult| (c.offset.abs(), c.offset);
                if cand.score > b.score || (cand.score == b.score && key(&cand) < key(&b)) {
                    cand
                } else {
                    b
                }
            }
        });
    }
    Ok(best.expect("non-empty candidates"))
}

/// Stage 2: inlier mean of per-pair offsets with a prior toward the previous
/// offset, then rate-limited. Updates `state.prev_offset` and returns
/// `(refined, applied)`.
pub fn object_refiner_iterate(pairs: &[(f64, f64)], coarse: f64, state: &mut ObjRefinerState) -> (f64, f64) {
    let prev = state.prev_offset;
    let (mut sum, mut n) = (0.0, 0.0);
    for &(d_stereo, d_radar) in pairs {
        let delta = d_radar - d_stereo;
        if (delta - coarse).abs() < state.inlier_band {
            sum += delta;
            n += 1.0;
        }
    }
    let denom = n + state.prior_weight;
    let refined = if denom > 0.0 { (sum + state.prior_weight * prev) / denom } else { prev };
    let applied = prev + (refined - prev).clamp(-state.rate_limit, state.rate_limit);
    state.prev_offset = applied;
    (refined, applied)
}

/// Both stages for one frame. Returns the applied offset.
pub fn refine_object_offset(
    stereo: &[StereoObservation],
    radar: &[RadarDetection],
    state: &mut ObjRefinerState,
    calib: &StereoCalibration,
) -> Result<f64> {
    let radar_pts: Vec<Vector3<f64>> = radar.iter().map(|r| r.position).collect();
    let coarse = object_refiner_coarse(stereo, &radar_pts, state, calib)?;
    let pairs: Vec<(f64, f64)> = coarse
        .pairs
        .iter()
        .filter_map(|&(i, j)| {
            project_radar_to_disparity(&radar_pts[j], calib).ok().map(|(_, _, d)| (stereo[i].d, d))
        })
        .collect();
    Ok(object_refiner_iterate(&pairs, coarse.offset, state).1)
}
