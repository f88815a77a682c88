//! Detection-to-track association, Kalman state estimation in the vehicle
//! frame, robust geometry estimation, speed estimation and depth fusion.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{DepthEstimate, DepthSource, StereoCalibration};
use crate::template::Detection;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeedStatus {
    Reliable,
    Unreliable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub iou_weight: f64,
    pub cosine_weight: f64,
    /// Maximum image distance between predicted and detected box centers.
    pub gate_px: f64,
    /// Maximum longitudinal separation between track and detection.
    pub gate_m: f64,
    /// White-acceleration spectral density, (m/s²)².
    pub accel_psd: f64,
    pub confirm_hits: u32,
    pub max_misses: u32,
    /// Frames of history used for speed estimation.
    pub speed_window: usize,
    /// Relative agreement required between stereo and mono ranges.
    pub speed_ratio: f64,
    pub huber_delta: f64,
    pub irls_iterations: usize,
    /// Stereo is rejected when it differs from mono by more than this ratio.
    pub fusion_ratio: f64,
    /// Floor on the position measurement variance, m².
    pub min_meas_var: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            iou_weight: 1.0,
            cosine_weight: 1.0,
            gate_px: 150.0,
            gate_m: 15.0,
            accel_psd: 4.0,
            confirm_hits: 3,
            max_misses: 5,
            speed_window: 10,
            speed_ratio: 0.3,
            huber_delta: 0.1,
            irls_iterations: 50,
            fusion_ratio: 0.5,
            min_meas_var: 0.01,
        }
    }
}

/// One range sample of a track: time, stereo and mono longitudinal range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeSample {
    pub t: f64,
    pub x_fused: f64,
    pub x_stereo: Option<f64>,
    pub x_mono: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: u64,
    /// `[x_rel, y_rel, v_x, v_y]` in the vehicle frame; velocity is relative.
    pub state: Vector4<f64>,
    pub cov: Matrix4<f64>,
    pub last_box: Detection,
    /// Box expected in the next frame, moved by the predicted motion.
    pub predicted_box: Detection,
    pub feature: Vec<f64>,
    pub width_samples: VecDeque<f64>,
    pub width: Option<f64>,
    pub width_weights: Vec<f64>,
    pub age: u32,
    pub hits: u32,
    pub misses: u32,
    pub confirmed: bool,
    pub history: VecDeque<RangeSample>,
    pub speed_status: SpeedStatus,
    pub depth_source: DepthSource,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|a| a / n).collect()
    } else {
        v.to_vec()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl Tracklet {
    pub fn new(id: u64, det: Detection, feature: &[f64], x: f64, y: f64, pos_var: f64) -> Self {
        Tracklet {
            id,
            state: Vector4::new(x, y, 0.0, 0.0),
            cov: Matrix4::from_diagonal(&Vector4::new(pos_var, pos_var, 100.0, 100.0)),
            last_box: det,
            predicted_box: det,
            feature: normalized(feature),
            width_samples: VecDeque::new(),
            width: None,
            width_weights: Vec::new(),
            age: 0,
            hits: 1,
            misses: 0,
            confirmed: false,
            history: VecDeque::new(),
            speed_status: SpeedStatus::Unreliable,
            depth_source: DepthSource::Size,
        }
    }
}

/// Detection side of the association: box, appearance and measured range.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub det: Detection,
    pub feature: Vec<f64>,
    pub depth: DepthEstimate,
    pub x_stereo: Option<f64>,
    pub x_mono: Option<f64>,
    /// Metric width implied by the box and the fused depth.
    pub width_m: Option<f64>,
}

/// Association score, or `None` when a gate rejects the pair.
pub fn association_cost(
    det: &Detection,
    feature: &[f64],
    x_rel: Option<f64>,
    track: &Tracklet,
    dims: (usize, usize),
    cfg: &TrackerConfig,
) -> Option<f64> {
    let iou = det.iou(&track.predicted_box);
    if iou <= 0.0 {
        return None;
    }
    let (w, h) = (dims.0 as f64, dims.1 as f64);
    let du = (det.cx - track.predicted_box.cx) * w;
    let dv = (det.cy - track.predicted_box.cy) * h;
    if du.hypot(dv) > cfg.gate_px {
        return None;
    }
    if let Some(x) = x_rel {
        if (x - track.state[0]).abs() > cfg.gate_m {
            return None;
        }
    }
    Some(cfg.iou_weight * iou + cfg.cosine_weight * cosine(feature, &track.feature))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// `(row, column)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

/// Minimum-cost perfect assignment on a square matrix (O(n³), shortest
/// augmenting paths with potentials). Returns the column of every row.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "square matrix required");
    // 1-based arrays; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            col_of[owner[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Maximum-total-score partial matching over the allowed (`Some`) entries.
/// Entries with non-positive score never improve the total and are treated
/// as rejected.
pub fn associate(scores: &[Vec<Option<f64>>]) -> Assignment {
    let rows = scores.len();
    let cols = scores.first().map_or(0, Vec::len);
    let n = rows + cols;
    let allowed = |i: usize, j: usize| -> Option<f64> {
        if i < rows && j < cols {
            scores[i][j].filter(|&s| s > 0.0)
        } else {
            None
        }
    };
    // padding rows/columns make every entity free to stay unmatched at cost 0
    let cost = DMatrix::from_fn(n, n, |i, j| allowed(i, j).map_or(0.0, |s| -s));
    let col_of = if n == 0 { Vec::new() } else { hungarian(&cost) };
    let mut out = Assignment::default();
    let mut col_used = vec![false; cols];
    for i in 0..rows {
        let j = col_of[i];
        if allowed(i, j).is_some() {
            out.pairs.push((i, j));
            col_used[j] = true;
        } else {
            out.unmatched_rows.push(i);
        }
    }
    out.unmatched_cols = (0..cols).filter(|&j| !col_used[j]).collect();
    out
}

/// Ego motion over one prediction interval.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EgoMotion {
    pub speed: f64,
    pub yaw_rate: f64,
}

/// Constant-relative-velocity prediction followed by the frame rotation
/// caused by the ego vehicle yawing by `yaw_rate·dt`.
pub fn kf_predict(track: &mut Tracklet, dt: f64, ego: EgoMotion, cfg: &TrackerConfig) -> Result<()> {
    if !(dt >= 0.0) {
        return Err(Error::Parameter(format!("negative prediction interval {dt}")));
    }
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    let psi = ego.yaw_rate * dt;
    let (s, c) = psi.sin_cos();
    // rotation by -psi on both position and velocity
    let rot2 = Matrix2::new(c, s, -s, c);
    let mut r = Matrix4::zeros();
    r.fixed_view_mut::<2, 2>(0, 0).copy_from(&rot2);
    r.fixed_view_mut::<2, 2>(2, 2).copy_from(&rot2);
    let g = r * f;
    let q = cfg.accel_psd;
    let (dt2, dt3) = (dt * dt, dt * dt * dt);
    let mut qm = Matrix4::zeros();
    for k in 0..2 {
        qm[(k, k)] = q * dt3 / 3.0;
        qm[(k, k + 2)] = q * dt2 / 2.0;
        qm[(k + 2, k)] = q * dt2 / 2.0;
        qm[(k + 2, k + 2)] = q * dt;
    }
    let qm = r * qm * r.transpose();
    track.state = g * track.state;
    let p = g * track.cov * g.transpose() + qm;
    track.cov = (p + p.transpose()) * 0.5;
    Ok(())
}

/// Linear update with `H = I` (position and velocity) or the position
/// selector. Joseph form keeps the covariance PSD.
pub fn kf_update(track: &mut Tracklet, z: &[f64], with_speed: bool, r_meas: &DMatrix<f64>) -> Result<()> {
    let m = if with_speed { 4 } else { 2 };
    if z.len() != m || r_meas.nrows() != m || r_meas.ncols() != m {
        return Err(Error::Parameter(format!("measurement must have dimension {m}")));
    }
    let h = DMatrix::from_fn(m, 4, |i, j| if i == j { 1.0 } else { 0.0 });
    let p = DMatrix::from_column_slice(4, 4, track.cov.as_slice());
    let x = DVector::from_column_slice(track.state.as_slice());
    let s = &h * &p * h.transpose() + r_meas;
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("innovation covariance is not positive definite".into()))?;
    let k = &p * h.transpose() * chol.inverse();
    let innov = DVector::from_column_slice(z) - &h * &x;
    let x_new = &x + &k * innov;
    let i_kh = DMatrix::identity(4, 4) - &k * &h;
    let p_new = &i_kh * &p * i_kh.transpose() + &k * r_meas * k.transpose();
    let p_sym = (&p_new + p_new.transpose()) * 0.5;
    track.state = Vector4::from_column_slice(x_new.as_slice());
    track.cov = Matrix4::from_column_slice(p_sym.as_slice());
    Ok(())
}

fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Huber location estimate by IRLS, started at the median. Returns the
/// estimate and the final weights.
pub fn irls_estimate(values: &[f64], iterations: usize, delta: f64) -> Result<(f64, Vec<f64>)> {
    if values.is_empty() {
        return Err(Error::Empty("IRLS measurements"));
    }
    let weight = |r: f64| if r.abs() <= delta { 1.0 } else { delta / r.abs() };
    let mut mu = median(values);
    for _ in 0..iterations {
        let (num, den) = values.iter().fold((0.0, 0.0), |(n, d), &v| {
            let w = weight(v - mu);
            (n + w * v, d + w)
        });
        let next = num / den;
        let done = (next - mu).abs() < 1e-6;
        mu = next;
        if done {
            break;
        }
    }
    Ok((mu, values.iter().map(|&v| weight(v - mu)).collect()))
}

/// Absolute longitudinal object speed from the window endpoints of
/// `(t, x_rel)` history.
pub fn estimate_speed(history: &[(f64, f64)], v_ego: f64) -> Result<f64> {
    if history.len() < 2 {
        return Err(Error::Input("speed estimation needs at least two samples".into()));
    }
    let (t0, x0) = history[0];
    let (t1, x1) = history[history.len() - 1];
    let dt = t1 - t0;
    if dt == 0.0 {
        return Err(Error::Numeric("zero time span in speed window".into()));
    }
    Ok(v_ego + (x1 - x0) / dt)
}

/// Reliable when at least two samples carry both a stereo and a mono range
/// and every such pair agrees within `ratio` of the mono range.
pub fn speed_status(samples: &[RangeSample], ratio: f64) -> SpeedStatus {
    let both: Vec<(f64, f64)> = samples.iter().filter_map(|s| Some((s.x_stereo?, s.x_mono?))).collect();
    let agree = both.iter().all(|&(s, m)| m > 0.0 && ((s - m) / m).abs() <= ratio);
    if both.len() >= 2 && agree {
        SpeedStatus::Reliable
    } else {
        SpeedStatus::Unreliable
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DepthCandidates {
    pub stereo: Option<DepthEstimate>,
    pub gpt: Option<DepthEstimate>,
    pub size: Option<DepthEstimate>,
}

/// Stereo when present and consistent with the monocular range (ground
/// point, else size), otherwise ground point, otherwise size.
pub fn fuse_depth(c: &DepthCandidates, ratio: f64) -> Result<DepthEstimate> {
    let usable = |e: &Option<DepthEstimate>| e.as_ref().filter(|e| e.valid && e.depth > 0.0).cloned();
    let (stereo, gpt, size) = (usable(&c.stereo), usable(&c.gpt), usable(&c.size));
    let mono = gpt.as_ref().or(size.as_ref());
    if let Some(s) = stereo {
        let sane = match mono {
            Some(m) => ((s.depth - m.depth) / m.depth).abs() <= ratio,
            None => true,
        };
        if sane {
            return Ok(s);
        }
    }
    gpt.or(size).ok_or(Error::Empty("depth candidates"))
}

/// Per-frame output of a confirmed track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub frame: u64,
    pub track_id: u64,
    pub x_rel: f64,
    pub y_rel: f64,
    /// Absolute longitudinal speed.
    pub v_x: f64,
    pub v_y: f64,
    pub depth_source: DepthSource,
    pub valid_speed: bool,
}

impl fmt::Display for TrackRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {} {} {}",
            self.frame,
            self.track_id,
            self.x_rel,
            self.y_rel,
            self.v_x,
            self.v_y,
            self.depth_source,
            u8::from(self.valid_speed)
        )
    }
}

/// Stateful multi-object tracker; one `step` per frame.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    pub calib: StereoCalibration,
    pub dims: (usize, usize),
    pub tracks: Vec<Tracklet>,
    next_id: u64,
    last_t: Option<f64>,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, calib: StereoCalibration, dims: (usize, usize)) -> Self {
        Tracker { cfg, calib, dims, tracks: Vec::new(), next_id: 1, last_t: None }
    }

    /// Image position of the ground contact below vehicle-frame `(x, y)`.
    fn image_point(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        (x > 0.0).then(|| {
            let c = &self.calib;
            (c.cx - c.f * y / x, c.cy + c.f * c.camera_height / x)
        })
    }

    fn predict_box(&self, track: &mut Tracklet, before: (f64, f64)) {
        let moved = self.image_point(before.0, before.1).zip(self.image_point(track.state[0], track.state[1]));
        let mut b = track.last_box;
        if let Some(((u0, v0), (u1, v1))) = moved {
            b.cx += (u1 - u0) / self.dims.0 as f64;
            b.cy += (v1 - v0) / self.dims.1 as f64;
        }
        track.predicted_box = b;
    }

    pub fn step(&mut self, frame: u64, t: f64, ego: EgoMotion, obs: &[Observation]) -> Result<Vec<TrackRecord>> {
        let dt = self.last_t.map_or(0.0, |t0| t - t0);
        if dt < 0.0 {
            return Err(Error::Frame { frame, msg: format!("time went backwards ({dt} s)") });
        }
        self.last_t = Some(t);
        let mut tracks = std::mem::take(&mut self.tracks);
        for tr in &mut tracks {
            let before = (tr.state[0], tr.state[1]);
            kf_predict(tr, dt, ego, &self.cfg)?;
            self.predict_box(tr, before);
            tr.age += 1;
        }

        let scores: Vec<Vec<Option<f64>>> = obs
            .iter()
            .map(|o| {
                let x = o.depth.point_imu.x;
                tracks
                    .iter()
                    .map(|tr| association_cost(&o.det, &o.feature, Some(x), tr, self.dims, &self.cfg))
                    .collect()
            })
            .collect();
        let assignment = associate(&scores);

        let mut matched = vec![false; tracks.len()];
        for &(i, j) in &assignment.pairs {
            matched[j] = true;
            self.update_track(&mut tracks[j], &obs[i], t, ego)?;
        }
        for (j, tr) in tracks.iter_mut().enumerate() {
            if !matched[j] {
                tr.misses += 1;
            }
        }
        tracks.retain(|tr| tr.misses < self.cfg.max_misses && (tr.confirmed || tr.misses == 0));
        for &i in &assignment.unmatched_rows {
            let o = &obs[i];
            let p = o.depth.point_imu;
            let var = o.depth.cov_imu[(0, 0)].max(self.cfg.min_meas_var);
            let mut tr = Tracklet::new(self.next_id, o.det, &o.feature, p.x, p.y, var);
            self.next_id += 1;
            tr.depth_source = o.depth.source;
            tr.history.push_back(RangeSample { t, x_fused: p.x, x_stereo: o.x_stereo, x_mono: o.x_mono });
            tr.confirmed = tr.hits >= self.cfg.confirm_hits;
            tracks.push(tr);
        }
        self.tracks = tracks;

        Ok(self
            .tracks
            .iter()
            .filter(|tr| tr.confirmed && tr.misses == 0)
            .map(|tr| TrackRecord {
                frame,
                track_id: tr.id,
                x_rel: tr.state[0],
                y_rel: tr.state[1],
                v_x: ego.speed + tr.state[2],
                v_y: tr.state[3],
                depth_source: tr.depth_source,
                valid_speed: tr.speed_status == SpeedStatus::Reliable,
            })
            .collect())
    }

    fn update_track(&self, tr: &mut Tracklet, o: &Observation, t: f64, ego: EgoMotion) -> Result<()> {
        let p = o.depth.point_imu;
        tr.history.push_back(RangeSample { t, x_fused: p.x, x_stereo: o.x_stereo, x_mono: o.x_mono });
        while tr.history.len() > self.cfg.speed_window {
            tr.history.pop_front();
        }
        let samples: Vec<RangeSample> = tr.history.iter().copied().collect();
        tr.speed_status = speed_status(&samples, self.cfg.speed_ratio);

        let floor = self.cfg.min_meas_var;
        let rx = o.depth.cov_imu[(0, 0)].max(floor);
        let ry = o.depth.cov_imu[(1, 1)].max(floor);
        let series: Vec<(f64, f64)> = samples.iter().map(|s| (s.t, s.x_fused)).collect();
        if tr.speed_status == SpeedStatus::Reliable {
            let v_abs = estimate_speed(&series, ego.speed)?;
            let span = series[series.len() - 1].0 - series[0].0;
            let rv = 2.0 * rx / (span * span);
            let r = DMatrix::from_diagonal(&DVector::from_vec(vec![rx, ry, rv, rv]));
            kf_update(tr, &[p.x, p.y, v_abs - ego.speed, tr.state[3]], true, &r)?;
        } else {
            let r = DMatrix::from_diagonal(&DVector::from_vec(vec![rx, ry]));
            kf_update(tr, &[p.x, p.y], false, &r)?;
        }

        if let Some(w) = o.width_m {
            tr.width_samples.push_back(w);
            while tr.width_samples.len() > 4 * self.cfg.speed_window {
                tr.width_samples.pop_front();
            }
            let ws: Vec<f64> = tr.width_samples.iter().copied().collect();
            let (est, weights) = irls_estimate(&ws, self.cfg.irls_iterations, self.cfg.huber_delta)?;
            tr.width = Some(est);
            tr.width_weights = weights;
        }
        tr.last_box = o.det;
        tr.feature = normalized(&o.feature);
        tr.depth_source = o.depth.source;
        tr.hits += 1;
        tr.misses = 0;
        if tr.hits >= self.cfg.confirm_hits {
            tr.confirmed = true;
        }
        Ok(())
    }
}
