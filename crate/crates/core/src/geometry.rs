//! Stereo calibration, disparity/depth conversion, reprojection, covariance
//! propagation and the two monocular depth cues.
//!
//! Camera frame: x right, y down, z forward. Vehicle (IMU) frame: x forward,
//! y left, z up. `R` and `t` map camera points into the vehicle frame.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::template::Detection;

#[derive(Debug, Clone, PartialEq)]
pub struct StereoCalibration {
    /// Focal length in pixels.
    pub f: f64,
    /// Baseline in meters.
    pub b: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera height above the (flat) ground in meters.
    pub camera_height: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    q: Matrix4<f64>,
}

/// Camera z → vehicle x, camera x → vehicle −y, camera y → vehicle −z.
pub fn default_cam_to_vehicle() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
        return Err(Error::Parameter("extrinsic rotation must be orthonormal with det +1".into()));
    }
    Ok(())
}

impl StereoCalibration {
    /// Rectified rig with the default forward-looking extrinsic; the vehicle
    /// origin sits on the ground below the camera.
    pub fn new(f: f64, b: f64, cx: f64, cy: f64, camera_height: f64) -> Result<Self> {
        Self::with_extrinsic(
            f,
            b,
            cx,
            cy,
            camera_height,
            default_cam_to_vehicle(),
            Vector3::new(0.0, 0.0, camera_height),
        )
    }

    pub fn with_extrinsic(
        f: f64,
        b: f64,
        cx: f64,
        cy: f64,
        camera_height: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if !(f > 0.0 && b > 0.0) {
            return Err(Error::Parameter(format!("need f > 0 and b > 0, got f={f} b={b}")));
        }
        check_rotation(&rotation)?;
        Ok(StereoCalibration {
            f,
            b,
            cx,
            cy,
            camera_height,
            rotation,
            translation,
            q: canonical_q(f, b, cx, cy),
        })
    }

    pub fn q(&self) -> &Matrix4<f64> {
        &self.q
    }

    /// Replaces the reprojection matrix, e.g. with one from an external
    /// rectification tool.
    pub fn set_q(&mut self, q: Matrix4<f64>) {
        self.q = q;
    }

    pub fn parse(text: &str, origin: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text, origin)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.check_keys(&["f", "b", "cx", "cy", "h_cam", "R", "t"])?;
        let h: f64 = kv.require("h_cam")?;
        let r = match kv.get_vec("R", 9)? {
            Some(v) => Matrix3::from_row_slice(&v),
            None => default_cam_to_vehicle(),
        };
        let t = match kv.get_vec("t", 3)? {
            Some(v) => Vector3::from_column_slice(&v),
            None => Vector3::new(0.0, 0.0, h),
        };
        Self::with_extrinsic(kv.require("f")?, kv.require("b")?, kv.require("cx")?, kv.require("cy")?, h, r, t)
    }

    pub fn to_kv_string(&self) -> String {
        let r = &self.rotation;
        let t = &self.translation;
        format!(
            "f = {}\nb = {}\ncx = {}\ncy = {}\nh_cam = {}\nR = {} {} {} {} {} {} {} {} {}\nt = {} {} {}\n",
            self.f,
            self.b,
            self.cx,
            self.cy,
            self.camera_height,
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z
        )
    }
}

/// Reprojection matrix of a rectified pair with equal principal points.
pub fn canonical_q(f: f64, b: f64, cx: f64, cy: f64) -> Matrix4<f64> {
    Matrix4::new(
        1.0, 0.0, 0.0, -cx, //
        0.0, 1.0, 0.0, -cy, //
        0.0, 0.0, 0.0, f, //
        0.0, 0.0, 1.0 / b, 0.0,
    )
}

pub fn depth_from_disparity(d: f64, calib: &StereoCalibration) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::InvalidDisparity(d));
    }
    Ok(calib.f * calib.b / d)
}

pub fn disparity_from_depth(z: f64, calib: &StereoCalibration) -> Result<f64> {
    if !(z > 0.0) {
        return Err(Error::BehindCamera(z));
    }
    Ok(calib.f * calib.b / z)
}

/// Camera-frame point for pixel `(u, v)` at disparity `d`, through `Q`.
pub fn reproject(u: f64, v: f64, d: f64, calib: &StereoCalibration) -> Result<Vector3<f64>> {
    if !(d > 0.0) {
        return Err(Error::InvalidDisparity(d));
    }
    let h = calib.q * Vector4::new(u, v, d, 1.0);
    if h.w == 0.0 || !h.w.is_finite() {
        return Err(Error::DegenerateReprojection);
    }
    Ok(Vector3::new(h.x / h.w, h.y / h.w, h.z / h.w))
}

/// Pinhole projection to `(u, v, d)`; inverse of [`reproject`] for the
/// canonical `Q`.
pub fn project(p_cam: &Vector3<f64>, calib: &StereoCalibration) -> Result<(f64, f64, f64)> {
    let z = p_cam.z;
    if !(z > 0.0) {
        return Err(Error::BehindCamera(z));
    }
    Ok((
        calib.cx + calib.f * p_cam.x / z,
        calib.cy + calib.f * p_cam.y / z,
        calib.f * calib.b / z,
    ))
}

pub fn cam_to_imu(p_cam: &Vector3<f64>, calib: &StereoCalibration) -> Vector3<f64> {
    calib.rotation * p_cam + calib.translation
}

pub fn imu_to_cam(p_imu: &Vector3<f64>, calib: &StereoCalibration) -> Vector3<f64> {
    calib.rotation.transpose() * (p_imu - calib.translation)
}

/// First-order depth variance from disparity variance: `Z⁴/(f²b²)·σ_d²`.
pub fn depth_variance(z: f64, sigma_d2: f64, calib: &StereoCalibration) -> f64 {
    let fb = calib.f * calib.b;
    z.powi(4) / (fb * fb) * sigma_d2
}

/// Disparity variance for dense maps from the spread of samples in a box.
pub fn dynamic_disparity_variance(
    near: &[f64],
    all: &[f64],
    sigma_obs2: f64,
    gamma: f64,
    sigma_sys2: f64,
) -> Result<f64> {
    if near.is_empty() {
        return Err(Error::Empty("near disparity samples"));
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let spread = if all.is_empty() { 0.0 } else { mean(near) - mean(all) };
    Ok(sigma_obs2 / near.len() as f64 + gamma * spread * spread + sigma_sys2)
}

/// `R·diag(σx², σy², σZ²)·Rᵀ`.
pub fn rotate_covariance(r: &Matrix3<f64>, sx2: f64, sy2: f64, sz2: f64) -> Matrix3<f64> {
    let c = r * Matrix3::from_diagonal(&Vector3::new(sx2, sy2, sz2)) * r.transpose();
    // exact symmetry regardless of rounding in the products
    (c + c.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DepthSource {
    Stereo,
    Gpt,
    Size,
}

impl fmt::Display for DepthSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DepthSource::Stereo => "STEREO",
            DepthSource::Gpt => "GPT",
            DepthSource::Size => "SIZE",
        })
    }
}

impl std::str::FromStr for DepthSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "STEREO" => Ok(DepthSource::Stereo),
            "GPT" => Ok(DepthSource::Gpt),
            "SIZE" => Ok(DepthSource::Size),
            _ => Err(Error::Input(format!("unknown depth source `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthEstimate {
    pub point_imu: Vector3<f64>,
    pub cov_imu: Matrix3<f64>,
    pub source: DepthSource,
    /// Stereo disparity in pixels; `None` for monocular cues.
    pub disparity: Option<f64>,
    /// Camera-frame depth.
    pub depth: f64,
    pub valid: bool,
}

/// Lateral variances are not derived from disparity; monocular cues get a
/// depth standard deviation proportional to depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceConfig {
    pub sigma_x2: f64,
    pub sigma_y2: f64,
    pub mono_relative_sigma: f64,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        CovarianceConfig { sigma_x2: 0.25, sigma_y2: 0.25, mono_relative_sigma: 0.1 }
    }
}

/// Full stereo estimate for pixel `(u, v)` at disparity `d`.
pub fn stereo_estimate(
    u: f64,
    v: f64,
    d: f64,
    sigma_d2: f64,
    calib: &StereoCalibration,
    cov: &CovarianceConfig,
) -> Result<DepthEstimate> {
    let p = reproject(u, v, d, calib)?;
    let sz2 = depth_variance(p.z, sigma_d2, calib);
    Ok(DepthEstimate {
        point_imu: cam_to_imu(&p, calib),
        cov_imu: rotate_covariance(&calib.rotation, cov.sigma_x2, cov.sigma_y2, sz2),
        source: DepthSource::Stereo,
        disparity: Some(d),
        depth: p.z,
        valid: true,
    })
}

fn mono_estimate(u: f64, v: f64, z: f64, source: DepthSource, calib: &StereoCalibration, cov: &CovarianceConfig) -> DepthEstimate {
    let p = Vector3::new((u - calib.cx) * z / calib.f, (v - calib.cy) * z / calib.f, z);
    let sz = cov.mono_relative_sigma * z;
    DepthEstimate {
        point_imu: cam_to_imu(&p, calib),
        cov_imu: rotate_covariance(&calib.rotation, cov.sigma_x2, cov.sigma_y2, sz * sz),
        source,
        disparity: None,
        depth: z,
        valid: z > 0.0,
    }
}

/// Flat-ground intersection of the ray through the box's bottom-center.
pub fn ground_point_depth(
    det: &Detection,
    calib: &StereoCalibration,
    dims: (usize, usize),
    cov: &CovarianceConfig,
) -> Result<DepthEstimate> {
    let (x0, _, x1, y1) = det.pixel_box(dims.0, dims.1);
    let v_bottom = y1;
    if v_bottom <= calib.cy {
        return Err(Error::NoGroundIntersection { v_bottom, horizon: calib.cy });
    }
    let z = calib.camera_height * calib.f / (v_bottom - calib.cy);
    Ok(mono_estimate(0.5 * (x0 + x1), v_bottom, z, DepthSource::Gpt, calib, cov))
}

/// Depth from apparent width against a class width prior.
pub fn size_based_depth(
    det: &Detection,
    width_prior: f64,
    calib: &StereoCalibration,
    dims: (usize, usize),
    cov: &CovarianceConfig,
) -> Result<DepthEstimate> {
    let w_px = det.w * dims.0 as f64;
    if !(w_px > 0.0) {
        return Err(Error::Input(format!("detection {} has zero pixel width", det.id)));
    }
    let z = calib.f * width_prior / w_px;
    let (x0, y0, x1, y1) = det.pixel_box(dims.0, dims.1);
    Ok(mono_estimate(0.5 * (x0 + x1), 0.5 * (y0 + y1), z, DepthSource::Size, calib, cov))
}
