//! Depth, vehicle-frame position and covariance of a stereo measurement as
//! range grows, for two baselines.

use stereo_ranger::geometry::{disparity_from_depth, stereo_estimate, CovarianceConfig, StereoCalibration};

fn main() -> stereo_ranger::Result<()> {
    let cov = CovarianceConfig::default();
    let sigma_d = 0.25;
    for b in [0.3, 0.12] {
        let calib = StereoCalibration::new(2000.0, b, 960.0, 600.0, 1.5)?;
        println!("baseline {b} m");
        println!("{:>6} {:>8} {:>24} {:>8}", "Z", "d px", "position (x, y, z)", "σ_x m");
        for z in [10.0, 25.0, 50.0, 100.0, 200.0, 300.0] {
            let d = disparity_from_depth(z, &calib)?;
            // a point 40 px right of and below the principal point
            let e = stereo_estimate(1000.0, 640.0, d, sigma_d * sigma_d, &calib, &cov)?;
            let p = e.point_imu;
            println!(
                "{z:>6.0} {d:>8.3} {:>24} {:>8.2}",
                format!("({:.1}, {:.2}, {:.2})", p.x, p.y, p.z),
                e.cov_imu[(0, 0)].sqrt()
            );
        }
    }
    Ok(())
}
