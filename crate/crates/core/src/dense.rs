//! Dense disparity baselines: SAD block matching and 4-path semi-global
//! matching over Census costs.
//!
//! Both matchers use the convention of [`crate::census`]: left pixel `x`
//! matches right pixel `x - d`.

use rayon::prelude::*;

use crate::census::{census_transform, hamming_cost};
use crate::error::{Error, Result};
use crate::image::{downscale, upscale_disparity, DisparityMap, GrayImage};

#[derive(Debug, Clone, PartialEq)]
pub struct BmParams {
    pub num_disparities: usize,
    /// Odd window side, at least 3.
    pub block_size: usize,
    pub min_disparity: i32,
    /// Minimum sum of |horizontal gradient| over the window.
    pub texture_threshold: u32,
    /// Percent margin the best SAD must win by.
    pub uniqueness_ratio: u32,
    pub downscale: usize,
}

impl Default for BmParams {
    fn default() -> Self {
        Self {
            num_disparities: 64,
            block_size: 9,
            min_disparity: 0,
            texture_threshold: 100,
            uniqueness_ratio: 10,
            downscale: 1,
        }
    }
}

impl BmParams {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 3 || self.block_size.is_multiple_of(2) {
            return Err(Error::Parameter(format!("block size must be odd and >= 3, got {}", self.block_size)));
        }
        if self.num_disparities == 0 {
            return Err(Error::Parameter("num_disparities must be >= 1".into()));
        }
        if self.downscale == 0 {
            return Err(Error::Parameter("downscale must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_pair(left: &GrayImage, right: &GrayImage) -> Result<()> {
    if left.width() != right.width() || left.height() != right.height() {
        return Err(Error::Input(format!(
            "stereo pair dimension mismatch: {}x{} vs {}x{}",
            left.width(),
            left.height(),
            right.width(),
            right.height()
        )));
    }
    Ok(())
}

/// SAD block matching. With `downscale > 1` the search runs on block-mean
/// reduced images over the proportionally reduced range and the map is
/// upscaled back, disparities multiplied by the factor.
pub fn bm_disparity(left: &GrayImage, right: &GrayImage, p: &BmParams) -> Result<DisparityMap> {
    check_pair(left, right)?;
    p.validate()?;
    if p.downscale == 1 {
        return Ok(bm_full(left, right, p));
    }
    let s = p.downscale;
    let (l, r) = (downscale(left, s)?, downscale(right, s)?);
    let d_lo = p.min_disparity.div_euclid(s as i32);
    let d_hi = (p.min_disparity + p.num_disparities as i32 + s as i32 - 1).div_euclid(s as i32);
    let scaled = BmParams {
        num_disparities: (d_hi - d_lo).max(1) as usize,
        min_disparity: d_lo,
        downscale: 1,
        ..p.clone()
    };
    let up = upscale_disparity(&bm_full(&l, &r, &scaled), s)?;
    let hi = (p.min_disparity + p.num_disparities as i32) * 16;
    let mut out = DisparityMap::new(left.width(), left.height(), p.min_disparity);
    for (x, y, d) in up.iter_valid() {
        if ((d * 16.0) as i32) < hi {
            out.set(x, y, Some(d));
        }
    }
    Ok(out)
}

fn bm_full(left: &GrayImage, right: &GrayImage, p: &BmParams) -> DisparityMap {
    let (w, h) = (left.width(), left.height());
    let r = p.block_size / 2;
    let nd = p.num_disparities;
    let d_max = p.min_disparity + nd as i32 - 1;
    let mut map = DisparityMap::new(w, h, p.min_disparity);
    if h < p.block_size || w < p.block_size {
        return map;
    }
    let x_lo = (r as i32 + d_max.max(0)) as usize;
    let x_hi = w as i32 - r as i32 - 1 + p.min_disparity.min(0);
    if x_hi < x_lo as i32 {
        return map;
    }
    let x_hi = x_hi as usize;

    // |horizontal gradient| of the left image, zero in the last column
    let grad: Vec<u32> = (0..h)
        .flat_map(|y| {
            let row = left.row(y);
            (0..w).map(move |x| if x + 1 < w { row[x + 1].abs_diff(row[x]) as u32 } else { 0 })
        })
        .collect();

    let rows: Vec<(usize, Vec<Option<f64>>)> = (r..h - r)
        .into_par_iter()
        .map(|y| {
            let mut col = vec![0u32; w * nd];
            let mut gcol = vec![0u32; w];
            for yy in y - r..=y + r {
                let lrow = left.row(yy);
                let rrow = right.row(yy);
                for x in 0..w {
                    gcol[x] += grad[yy * w + x];
                    for k in 0..nd {
                        let xr = x as i32 - (p.min_disparity + k as i32);
                        if xr >= 0 && (xr as usize) < w {
                            col[x * nd + k] += lrow[x].abs_diff(rrow[xr as usize]) as u32;
                        }
                    }
                }
            }
            let mut out = vec![None; w];
            let mut sad = vec![0u32; nd];
            for x in x_lo..=x_hi {
                let texture: u32 = gcol[x - r..=x + r].iter().sum();
                if texture < p.texture_threshold {
                    continue;
                }
                sad.iter_mut().for_each(|v| *v = 0);
                for xx in x - r..=x + r {
                    for k in 0..nd {
                        sad[k] += col[xx * nd + k];
                    }
                }
                out[x] = select_disparity(&sad, p.uniqueness_ratio).map(|k| k + p.min_disparity as f64);
            }
            (y, out)
        })
        .collect();
    for (y, row) in rows {
        for (x, d) in row.into_iter().enumerate() {
            if d.is_some() {
                map.set(x, y, d);
            }
        }
    }
    map
}

/// Winner-take-all with a uniqueness test against candidates more than one
/// step from the winner, followed by parabolic refinement. Returns the
/// fractional index into `costs`.
fn select_disparity(costs: &[u32], uniqueness_ratio: u32) -> Option<f64> {
    let (best_k, &best) = costs.iter().enumerate().min_by_key(|&(k, &c)| (c, k))?;
    let second = costs
        .iter()
        .enumerate()
        .filter(|(k, _)| k.abs_diff(best_k) > 1)
        .map(|(_, &c)| c)
        .min();
    if let Some(second) = second {
        if best as u64 * (100 + uniqueness_ratio as u64) >= second as u64 * 100 {
            return None;
        }
    }
    Some(best_k as f64 + subpixel(costs, best_k))
}

fn subpixel(costs: &[u32], k: usize) -> f64 {
    if k == 0 || k + 1 >= costs.len() {
        return 0.0;
    }
    let (m, c, p) = (costs[k - 1] as f64, costs[k] as f64, costs[k + 1] as f64);
    crate::census::parabola_offset(m, c, p).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgmParams {
    pub num_disparities: usize,
    pub min_disparity: i32,
    pub p1: u32,
    pub p2: u32,
}

impl Default for SgmParams {
    fn default() -> Self {
        Self { num_disparities: 64, min_disparity: 0, p1: 3, p2: 20 }
    }
}

impl SgmParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_disparities == 0 {
            return Err(Error::Parameter("num_disparities must be >= 1".into()));
        }
        if self.p1 > self.p2 {
            return Err(Error::Parameter(format!("need P1 <= P2, got {} > {}", self.p1, self.p2)));
        }
        if 4 * (UNDEFINED_COST as u64 + self.p2 as u64) > u32::MAX as u64 {
            return Err(Error::Parameter("P2 too large for the aggregation accumulator".into()));
        }
        Ok(())
    }
}

/// Aggregation paths. Each is a single orientation scanned in raster order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// left to right
    East,
    /// top to bottom
    South,
    /// top-left to bottom-right
    SouthEast,
    /// top-right to bottom-left
    SouthWest,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::East, Direction::South, Direction::SouthEast, Direction::SouthWest];

    /// Offset of the predecessor `p - r`.
    fn predecessor(self) -> (i32, i32) {
        match self {
            Direction::East => (-1, 0),
            Direction::South => (0, -1),
            Direction::SouthEast => (-1, -1),
            Direction::SouthWest => (1, -1),
        }
    }
}

/// Cost assigned where either descriptor is undefined.
pub const UNDEFINED_COST: u16 = 25;

/// Per-pixel matching cost `C(p, d)` for `d = min_disparity + k`.
#[derive(Debug, Clone)]
pub struct CostVolume {
    width: usize,
    height: usize,
    ndisp: usize,
    min_disparity: i32,
    costs: Vec<u16>,
    defined: Vec<bool>,
}

impl CostVolume {
    /// Fully defined volume from explicit costs, indexed `(y * w + x) * nd + k`.
    pub fn from_costs(width: usize, height: usize, ndisp: usize, min_disparity: i32, costs: Vec<u16>) -> Result<Self> {
        if costs.len() != width * height * ndisp || ndisp == 0 {
            return Err(Error::Input("cost buffer does not match volume dimensions".into()));
        }
        let defined = vec![true; costs.len()];
        Ok(Self { width, height, ndisp, min_disparity, costs, defined })
    }

    /// Census Hamming costs of a rectified pair.
    pub fn census(left: &GrayImage, right: &GrayImage, ndisp: usize, min_disparity: i32) -> Result<Self> {
        check_pair(left, right)?;
        let (w, h) = (left.width(), left.height());
        let cl = census_transform(left, w, h)?;
        let cr = census_transform(right, w, h)?;
        let mut costs = vec![UNDEFINED_COST; w * h * ndisp];
        let mut defined = vec![false; w * h * ndisp];
        costs
            .par_chunks_mut(w * ndisp)
            .zip(defined.par_chunks_mut(w * ndisp))
            .enumerate()
            .for_each(|(y, (crow, drow))| {
                for x in 0..w {
                    let a = cl.code(x as i32, y as i32);
                    if a == 0 {
                        continue;
                    }
                    for k in 0..ndisp {
                        let b = cr.code(x as i32 - (min_disparity + k as i32), y as i32);
                        if b != 0 {
                            crow[x * ndisp + k] = hamming_cost(a, b) as u16;
                            drow[x * ndisp + k] = true;
                        }
                    }
                }
            });
        Ok(Self { width: w, height: h, ndisp, min_disparity, costs, defined })
    }

    #[inline]
    pub fn cost(&self, x: usize, y: usize, k: usize) -> u16 {
        self.costs[(y * self.width + x) * self.ndisp + k]
    }

    #[inline]
    fn slice(&self, x: usize, y: usize) -> &[u16] {
        let i = (y * self.width + x) * self.ndisp;
        &self.costs[i..i + self.ndisp]
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ndisp(&self) -> usize {
        self.ndisp
    }
}

/// One step of the path recurrence:
/// `L(p,d) = C(p,d) + min(L'(d), L'(d±1) + P1, min L' + P2) - min L'`.
#[inline]
fn path_step(cost: &[u16], prev: Option<&[u32]>, p1: u32, p2: u32, out: &mut [u32]) {
    let Some(prev) = prev else {
        for (o, &c) in out.iter_mut().zip(cost) {
            *o = c as u32;
        }
        return;
    };
    let nd = cost.len();
    let min_prev = *prev.iter().min().unwrap();
    for d in 0..nd {
        let mut best = prev[d].min(min_prev + p2);
        if d > 0 {
            best = best.min(prev[d - 1] + p1);
        }
        if d + 1 < nd {
            best = best.min(prev[d + 1] + p1);
        }
        out[d] = cost[d] as u32 + best - min_prev;
    }
}

/// Path costs `L_r` along one direction for the whole volume.
pub fn path_costs(cv: &CostVolume, dir: Direction, p1: u32, p2: u32) -> Vec<u32> {
    let (w, h, nd) = (cv.width, cv.height, cv.ndisp);
    let (px, py) = dir.predecessor();
    let mut l = vec![0u32; w * h * nd];
    for y in 0..h {
        for x in 0..w {
            let (qx, qy) = (x as i32 + px, y as i32 + py);
            let i = (y * w + x) * nd;
            let (done, rest) = l.split_at_mut(i);
            let prev = (qx >= 0 && qy >= 0 && (qx as usize) < w).then(|| {
                let j = (qy as usize * w + qx as usize) * nd;
                &done[j..j + nd]
            });
            path_step(cv.slice(x, y), prev, p1, p2, &mut rest[..nd]);
        }
    }
    l
}

/// Aggregates all four paths in one raster sweep and selects the winner
/// per pixel. Returns fractional disparities (`None` where undefined).
pub fn sgm_select(cv: &CostVolume, p1: u32, p2: u32) -> Vec<Option<f64>> {
    let (w, h, nd) = (cv.width, cv.height, cv.ndisp);
    let mut out = vec![None; w * h];
    // previous and current rows for the three vertical-ish paths
    let mut prev_rows = [vec![0u32; w * nd], vec![0u32; w * nd], vec![0u32; w * nd]];
    let mut cur_rows = [vec![0u32; w * nd], vec![0u32; w * nd], vec![0u32; w * nd]];
    let mut east_prev = vec![0u32; nd];
    let mut east_cur = vec![0u32; nd];
    let mut total = vec![0u32; nd];
    let vertical = [Direction::South, Direction::SouthEast, Direction::SouthWest];
    for y in 0..h {
        for x in 0..w {
            let cost = cv.slice(x, y);
            path_step(cost, (x > 0).then_some(&east_prev[..]), p1, p2, &mut east_cur);
            total.copy_from_slice(&east_cur);
            for (slot, dir) in vertical.iter().enumerate() {
                let (px, _) = dir.predecessor();
                let qx = x as i32 + px;
                let prev = (y > 0 && qx >= 0 && (qx as usize) < w)
                    .then(|| &prev_rows[slot][qx as usize * nd..(qx as usize + 1) * nd]);
                let dst = &mut cur_rows[slot][x * nd..(x + 1) * nd];
                path_step(cost, prev, p1, p2, dst);
                for (t, &v) in total.iter_mut().zip(dst.iter()) {
                    *t += v;
                }
            }
            std::mem::swap(&mut east_prev, &mut east_cur);

            let base = (y * w + x) * nd;
            let (k, _) = total.iter().enumerate().min_by_key(|&(k, &c)| (c, k)).unwrap();
            if cv.defined[base + k] {
                let off = if k > 0 && k + 1 < nd {
                    crate::census::parabola_offset(total[k - 1] as f64, total[k] as f64, total[k + 1] as f64)
                        .unwrap_or(0.0)
                } else {
                    0.0
                };
                out[y * w + x] = Some(cv.min_disparity as f64 + k as f64 + off);
            }
        }
        std::mem::swap(&mut prev_rows, &mut cur_rows);
    }
    out
}

/// Semi-global matching over Census Hamming costs with four paths.
pub fn sgm_disparity(left: &GrayImage, right: &GrayImage, p: &SgmParams) -> Result<DisparityMap> {
    check_pair(left, right)?;
    p.validate()?;
    let cv = CostVolume::census(left, right, p.num_disparities, p.min_disparity)?;
    let sel = sgm_select(&cv, p.p1, p.p2);
    let mut map = DisparityMap::new(left.width(), left.height(), p.min_disparity);
    for (i, d) in sel.into_iter().enumerate() {
        if d.is_some() {
            map.set(i % left.width(), i / left.width(), d);
        }
    }
    Ok(map)
}
