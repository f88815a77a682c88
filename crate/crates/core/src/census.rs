//! Census transform and sparse Census block matching.
//!
//! Descriptors use a 5x5 window. The first bit shifted in is a sentinel `1`,
//! followed by 25 comparison bits `[I(neighbour) > I(center)]` in row-major
//! window order (top row first, left to right), so the first comparison ends
//! up as the most significant bit below the sentinel. A descriptor of `0`
//! marks a pixel whose window leaves the image.
//!
//! Block matching uses the rectified-stereo convention: a left pixel `(x, y)`
//! at offset `(dx, dy)` is compared with the right pixel `(x - dx, y + dy)`,
//! so `dx` is the disparity and is non-negative for points in front of the
//! rig.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Half-width of the Census window in both axes.
pub const CENSUS_SPAN: usize = 2;

/// Bit set in every defined descriptor (bit 25).
pub const SENTINEL_BIT: u32 = 1 << 25;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CensusImage {
    width: usize,
    height: usize,
    source_width: usize,
    source_height: usize,
    codes: Vec<u32>,
}

impl CensusImage {
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    /// Ratio of census dims to source dims along x.
    pub fn scale(&self) -> f64 {
        self.width as f64 / self.source_width as f64
    }

    /// Descriptor at `(x, y)`; `0` (undefined) outside the image.
    #[inline]
    pub fn code(&self, x: i32, y: i32) -> u32 {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            0
        } else {
            self.codes[y as usize * self.width + x as usize]
        }
    }

    /// Raw dump: little-endian `u32` width and height, then the codes.
    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::with_capacity(8 + self.codes.len() * 4);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for c in &self.codes {
            out.extend_from_slice(&c.to_le_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_raw(path: impl AsRef<Path>) -> Result<CensusImage> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 {
            return Err(Error::parse(path, 1, "missing census header"));
        }
        let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + w * h * 4 {
            return Err(Error::parse(path, 1, "census payload size does not match header"));
        }
        let codes = bytes[8..]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(CensusImage { width: w, height: h, source_width: w, source_height: h, codes })
    }
}

/// Census transform of `img` sampled on an `out_w` x `out_h` grid.
///
/// Output pixel `(x, y)` reads the source at `round(x * src / out)`; window
/// neighbours are mapped the same way, so a reduced-resolution descriptor is
/// the full descriptor of the nearest-neighbour resampled image.
pub fn census_transform(img: &GrayImage, out_w: usize, out_h: usize) -> Result<CensusImage> {
    if out_w == 0 || out_h == 0 || out_w > img.width() || out_h > img.height() {
        return Err(Error::Parameter(format!(
            "census dims {out_w}x{out_h} must be within source dims {}x{}",
            img.width(),
            img.height()
        )));
    }
    let sampled;
    let src = if out_w == img.width() && out_h == img.height() {
        img
    } else {
        let xs = resample_index(out_w, img.width());
        let ys = resample_index(out_h, img.height());
        sampled = GrayImage::from_fn(out_w, out_h, |x, y| img.get(xs[x], ys[y]))?;
        &sampled
    };
    let codes = census_same_size(src);
    Ok(CensusImage {
        width: out_w,
        height: out_h,
        source_width: img.width(),
        source_height: img.height(),
        codes,
    })
}

fn resample_index(out: usize, src: usize) -> Vec<usize> {
    let ratio = src as f64 / out as f64;
    (0..out)
        .map(|o| ((o as f64 * ratio).round() as usize).min(src - 1))
        .collect()
}

fn census_same_size(img: &GrayImage) -> Vec<u32> {
    let (w, h) = (img.width(), img.height());
    let s = CENSUS_SPAN;
    let mut codes = vec![0u32; w * h];
    if w <= 2 * s || h <= 2 * s {
        return codes;
    }
    let inner = w - 2 * s;
    let n_cmp = (2 * s + 1) * (2 * s + 1);
    codes
        .par_chunks_mut(w)
        .enumerate()
        .filter(|(y, _)| *y >= s && *y + s < h)
        .for_each_init(
            || vec![vec![0u8; inner]; 4],
            |planes, (y, out_row)| {
                let center = &img.row(y)[s..s + inner];
                for p in planes.iter_mut() {
                    p.fill(0);
                }
                // Row-major window order; comparison k lands on bit n_cmp-1-k.
                // Bits are gathered in byte planes so the inner loop runs on
                // u8 lanes, then packed once.
                let mut k = 0;
                for wy in y - s..=y + s {
                    let row = img.row(wy);
                    for wx in 0..=2 * s {
                        let bit = n_cmp - 1 - k;
                        let (plane, shift) = (&mut planes[bit / 8], bit % 8);
                        for ((c, &v), &m) in plane.iter_mut().zip(&row[wx..wx + inner]).zip(center) {
                            *c |= ((v > m) as u8) << shift;
                        }
                        k += 1;
                    }
                }
                let sentinel = 1u32 << n_cmp;
                let (p0, p1, p2, p3) = (&planes[0], &planes[1], &planes[2], &planes[3]);
                for (i, c) in out_row[s..s + inner].iter_mut().enumerate() {
                    *c = sentinel | (p3[i] as u32) << 24 | (p2[i] as u32) << 16 | (p1[i] as u32) << 8 | p0[i] as u32;
                }
            },
        );
    codes
}

/// Matching cost between two descriptors: popcount of their XOR.
#[inline]
pub fn hamming_cost(a: u32, b: u32) -> u32 {
    (a ^ b).count_ones()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectKind {
    Far,
    Close,
}

impl std::fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ObjectKind::Far => "FAR",
            ObjectKind::Close => "CLOSE",
        })
    }
}

/// Query points sharing one disparity hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBlock {
    pub points: Vec<(i32, i32)>,
    pub dx_range: (i32, i32),
    pub dy_range: (i32, i32),
    pub owner: usize,
    pub kind: ObjectKind,
}

impl QueryBlock {
    pub fn new(points: Vec<(i32, i32)>, dx_range: (i32, i32), dy_range: (i32, i32)) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("query block points"));
        }
        if dx_range.0 > dx_range.1 || dy_range.0 > dy_range.1 {
            return Err(Error::Parameter(format!("empty search range dx {dx_range:?} dy {dy_range:?}")));
        }
        Ok(Self { points, dx_range, dy_range, owner: 0, kind: ObjectKind::Far })
    }

    pub fn with_owner(mut self, owner: usize, kind: ObjectKind) -> Self {
        self.owner = owner;
        self.kind = kind;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub dx_int: i32,
    pub dy_int: i32,
    pub dx_subpix: f64,
    /// Hamming sum normalised by the contributing point count.
    pub cost: f64,
    pub cost_minus: Option<f64>,
    pub cost_plus: Option<f64>,
    pub valid_points: usize,
    pub verified: bool,
    /// Backward residual `dx_v`, when the backward search succeeded.
    pub dx_verify: Option<i32>,
}

/// Parabola vertex correction for costs at `dx* - 1`, `dx*`, `dx* + 1`.
/// Returns `None` when the denominator is not positive.
pub fn parabola_offset(s_minus: f64, s0: f64, s_plus: f64) -> Option<f64> {
    let denom = 2.0 * (s_plus + s_minus - 2.0 * s0);
    (denom > 0.0).then(|| -(s_plus - s_minus) / denom)
}

/// Normalised cost table over a rectangular offset range.
struct CostTable {
    dx0: i32,
    dy0: i32,
    nx: usize,
    costs: Vec<Option<(f64, usize)>>,
}

impl CostTable {
    fn get(&self, dx: i32, dy: i32) -> Option<(f64, usize)> {
        let ix = dx - self.dx0;
        let iy = dy - self.dy0;
        if ix < 0 || iy < 0 || ix as usize >= self.nx {
            return None;
        }
        self.costs.get(iy as usize * self.nx + ix as usize).copied().flatten()
    }
}

/// Evaluates the matching cost of `points` (already resolved to descriptors
/// in `src`) against `dst` sampled at `(x + sign * dx, y + dy)`.
fn cost_table(
    points: &[(i32, i32)],
    src: &CensusImage,
    dst: &CensusImage,
    sign: i32,
    dx_range: (i32, i32),
    dy_range: (i32, i32),
) -> CostTable {
    let query: Vec<(i32, i32, u32)> = points
        .iter()
        .map(|&(x, y)| (x, y, src.code(x, y)))
        .filter(|&(_, _, c)| c != 0)
        .collect();
    let nx = (dx_range.1 - dx_range.0 + 1) as usize;
    let ny = (dy_range.1 - dy_range.0 + 1) as usize;
    let mut sums = vec![0u32; nx * ny];
    let mut counts = vec![0u32; nx * ny];
    for (iy, dy) in (dy_range.0..=dy_range.1).enumerate() {
        let base = iy * nx;
        for &(x, y, c) in &query {
            let yy = y + dy;
            if yy < 0 || yy as usize >= dst.height {
                continue;
            }
            let row = &dst.codes[yy as usize * dst.width..(yy as usize + 1) * dst.width];
            for (ix, dx) in (dx_range.0..=dx_range.1).enumerate() {
                let xx = x + sign * dx;
                if xx < 0 || xx as usize >= dst.width {
                    continue;
                }
                let r = row[xx as usize];
                if r == 0 {
                    continue;
                }
                sums[base + ix] += hamming_cost(c, r);
                counts[base + ix] += 1;
            }
        }
    }
    let costs = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| (n > 0).then(|| (s as f64 / n as f64, n as usize)))
        .collect();
    CostTable { dx0: dx_range.0, dy0: dy_range.0, nx, costs }
}

/// Argmin over the table; ties prefer smaller `|dx|`, then smaller `|dy|`,
/// then negative `dy`.
fn best_offset(t: &CostTable, dx_range: (i32, i32), dy_range: (i32, i32)) -> Option<(i32, i32, f64, usize)> {
    let mut best: Option<(i32, i32, f64, usize)> = None;
    for dy in dy_range.0..=dy_range.1 {
        for dx in dx_range.0..=dx_range.1 {
            let Some((c, n)) = t.get(dx, dy) else { continue };
            let better = match best {
                None => true,
                Some((bdx, bdy, bc, _)) => {
                    (c, dx.abs(), dy.abs(), dy) < (bc, bdx.abs(), bdy.abs(), bdy)
                }
            };
            if better {
                best = Some((dx, dy, c, n));
            }
        }
    }
    best
}

/// Exhaustive Census block match with parabolic sub-pixel refinement.
pub fn block_match(block: &QueryBlock, left: &CensusImage, right: &CensusImage) -> Result<MatchResult> {
    let table = cost_table(&block.points, left, right, -1, block.dx_range, block.dy_range);
    let (dx, dy, cost, n) = best_offset(&table, block.dx_range, block.dy_range).ok_or(Error::NoMatch)?;
    let cost_minus = table.get(dx - 1, dy).map(|c| c.0);
    let cost_plus = table.get(dx + 1, dy).map(|c| c.0);
    let dx_subpix = match (cost_minus, cost_plus) {
        (Some(m), Some(p)) => parabola_offset(m, cost, p).map_or(dx as f64, |o| dx as f64 + o),
        _ => dx as f64,
    };
    Ok(MatchResult {
        dx_int: dx,
        dy_int: dy,
        dx_subpix,
        cost,
        cost_minus,
        cost_plus,
        valid_points: n,
        verified: false,
        dx_verify: None,
    })
}

/// Forward match followed by a right-to-left search from the matched
/// positions. The match is verified when the backward residual satisfies
/// `|dx_v| < tau_v`.
pub fn forward_backward_match(
    block: &QueryBlock,
    left: &CensusImage,
    right: &CensusImage,
    tau_v: f64,
) -> Result<MatchResult> {
    let mut fwd = block_match(block, left, right)?;
    let moved: Vec<(i32, i32)> = block
        .points
        .iter()
        .map(|&(x, y)| (x - fwd.dx_int, y + fwd.dy_int))
        .collect();
    let dy_back = (-block.dy_range.1, -block.dy_range.0);
    let table = cost_table(&moved, right, left, 1, block.dx_range, dy_back);
    if let Some((e, _, _, _)) = best_offset(&table, block.dx_range, dy_back) {
        let dx_v = e - fwd.dx_int;
        fwd.dx_verify = Some(dx_v);
        fwd.verified = (dx_v.abs() as f64) < tau_v;
    }
    Ok(fwd)
}

/// Forward-backward matches every block. Results keep the input order.
pub fn match_batch(
    blocks: &[QueryBlock],
    left: &CensusImage,
    right: &CensusImage,
    tau_v: f64,
) -> Vec<Result<MatchResult>> {
    blocks
        .par_iter()
        .map(|b| forward_backward_match(b, left, right, tau_v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FIG2: [[u8; 5]; 5] = [
        [48, 72, 35, 91, 63],
        [85, 57, 44, 68, 29],
        [61, 93, 55, 37, 76],
        [42, 66, 81, 50, 88],
        [73, 38, 59, 94, 46],
    ];

    fn noise_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| rng.random()).unwrap()
    }

    fn shifted_left(img: &GrayImage, shift: usize) -> GrayImage {
        // right(x) = left(x + shift): content moves left by `shift`
        GrayImage::from_fn(img.width(), img.height(), |x, y| img.get((x + shift).min(img.width() - 1), y)).unwrap()
    }

    #[test]
    fn figure_patch_descriptor() {
        let img = GrayImage::from_fn(5, 5, |x, y| FIG2[y][x]).unwrap();
        let c = census_transform(&img, 5, 5).unwrap();
        let code = c.code(2, 2);
        assert_eq!(format!("{code:026b}"), "10101111010110010110110110");
        assert_ne!(code & SENTINEL_BIT, 0);
        // window leaves the image everywhere else
        assert_eq!(c.codes().iter().filter(|&&v| v != 0).count(), 1);
    }

    #[test]
    fn constant_image_is_sentinel_only() {
        let img = GrayImage::filled(9, 7, 120).unwrap();
        let c = census_transform(&img, 9, 7).unwrap();
        for y in 2..5 {
            for x in 2..7 {
                assert_eq!(c.code(x, y), SENTINEL_BIT);
            }
        }
        assert_eq!(c.code(1, 3), 0);
    }

    #[test]
    fn increasing_map_preserves_descriptors() {
        let img = noise_image(20, 15, 3).map(|v| v / 2);
        let mapped = img.map(|v| (2 * v as u16 + 3).min(255) as u8);
        assert_eq!(
            census_transform(&img, 20, 15).unwrap(),
            census_transform(&mapped, 20, 15).unwrap()
        );
    }

    #[test]
    fn scaled_census_matches_resampled_image() {
        let img = noise_image(40, 30, 5);
        let c = census_transform(&img, 20, 15).unwrap();
        let half = GrayImage::from_fn(20, 15, |x, y| img.get(2 * x, 2 * y)).unwrap();
        let direct = census_transform(&half, 20, 15).unwrap();
        assert_eq!(c.codes(), direct.codes());
        assert!((c.scale() - 0.5).abs() < 1e-12);
        assert!(census_transform(&img, 41, 30).is_err());
    }

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming_cost(0xdead, 0xdead), 0);
        assert_eq!(hamming_cost(0b11, 0b00), 2);
        // 10110 ^ 01101 = 11011
        assert_eq!(hamming_cost(0b10110, 0b01101), 4);
    }

    #[test]
    fn parabola_examples() {
        assert_eq!(parabola_offset(10.0, 4.0, 10.0), Some(0.0));
        assert_eq!(5.0 + parabola_offset(10.0, 4.0, 6.0).unwrap(), 5.25);
        assert_eq!(parabola_offset(4.0, 4.0, 4.0), None);
    }

    fn grid_points(x0: i32, y0: i32, n: i32, step: i32) -> Vec<(i32, i32)> {
        (0..n).flat_map(|j| (0..n).map(move |i| (x0 + i * step, y0 + j * step))).collect()
    }

    #[test]
    fn integer_shift_self_match() {
        let left = noise_image(80, 40, 11);
        let right = shifted_left(&left, 7);
        let (cl, cr) = (census_transform(&left, 80, 40).unwrap(), census_transform(&right, 80, 40).unwrap());
        let block = QueryBlock::new(grid_points(30, 10, 6, 3), (0, 16), (0, 0)).unwrap();
        let m = block_match(&block, &cl, &cr).unwrap();
        assert_eq!((m.dx_int, m.cost), (7, 0.0));
        // neighbour costs of a random texture are not symmetric, so the
        // parabola only gets close to the integer shift
        assert!((m.dx_subpix - 7.0).abs() < 0.1, "{}", m.dx_subpix);

        let fb = forward_backward_match(&block, &cl, &cr, 1.0).unwrap();
        assert!(fb.verified);
        assert_eq!(fb.dx_verify, Some(0));
        let strict = forward_backward_match(&block, &cl, &cr, 0.0).unwrap();
        assert!(!strict.verified);
        assert_eq!(strict.dx_int, 7);
    }

    #[test]
    fn no_contributing_points_is_an_error() {
        let img = GrayImage::filled(10, 10, 0).unwrap();
        let c = census_transform(&img, 10, 10).unwrap();
        let block = QueryBlock::new(vec![(0, 0), (1, 1)], (0, 3), (0, 0)).unwrap();
        assert!(matches!(block_match(&block, &c, &c), Err(Error::NoMatch)));
    }

    #[test]
    fn boundary_argmin_skips_subpixel() {
        let left = noise_image(60, 30, 2);
        let right = shifted_left(&left, 4);
        let (cl, cr) = (census_transform(&left, 60, 30).unwrap(), census_transform(&right, 60, 30).unwrap());
        let block = QueryBlock::new(grid_points(30, 8, 5, 3), (0, 4), (0, 0)).unwrap();
        let m = block_match(&block, &cl, &cr).unwrap();
        assert_eq!(m.dx_int, 4);
        assert_eq!(m.cost_plus, None);
        assert_eq!(m.dx_subpix, 4.0);
    }

    #[test]
    fn census_dump_roundtrip() {
        let c = census_transform(&noise_image(12, 9, 1), 12, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        c.write_raw(&p).unwrap();
        let back = CensusImage::read_raw(&p).unwrap();
        assert_eq!(back.codes(), c.codes());
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 8 + 12 * 9 * 4);
    }

    /// Per-point double loop written straight from the cost definition.
    fn naive_match(points: &[(i32, i32)], l: &CensusImage, r: &CensusImage, dxr: (i32, i32), dyr: (i32, i32)) -> Option<(i32, i32, f64)> {
        let mut best: Option<(f64, i32, i32, i32, i32)> = None;
        for dy in dyr.0..=dyr.1 {
            for dx in dxr.0..=dxr.1 {
                let mut sum = 0u32;
                let mut n = 0u32;
                for &(x, y) in points {
                    let a = l.code(x, y);
                    let b = r.code(x - dx, y + dy);
                    if a == 0 || b == 0 {
                        continue;
                    }
                    sum += (a ^ b).count_ones();
                    n += 1;
                }
                if n == 0 {
                    continue;
                }
                let key = (sum as f64 / n as f64, dx.abs(), dy.abs(), dy, dx);
                if best.is_none_or(|b| (key.0, key.1, key.2, key.3) < (b.0, b.1, b.2, b.3)) {
                    best = Some(key);
                }
            }
        }
        best.map(|b| (b.4, b.3, b.0))
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(a in 0u32..(1 << 26), b in 0u32..(1 << 26), c in 0u32..(1 << 26)) {
            prop_assert_eq!(hamming_cost(a, b), hamming_cost(b, a));
            prop_assert_eq!(hamming_cost(a, b) == 0, a == b);
            prop_assert!(hamming_cost(a, c) <= hamming_cost(a, b) + hamming_cost(b, c));
        }

        #[test]
        fn block_match_equals_scalar_reference(seed in 0u64..10_000, npts in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let left = noise_image(40, 24, seed);
            let right = noise_image(40, 24, seed + 1);
            let (cl, cr) = (census_transform(&left, 40, 24).unwrap(), census_transform(&right, 40, 24).unwrap());
            let points: Vec<(i32, i32)> = (0..npts).map(|_| (rng.random_range(0..40), rng.random_range(0..24))).collect();
            let dx0 = rng.random_range(-3..3);
            let dxr = (dx0, dx0 + rng.random_range(0..10));
            let dy0 = rng.random_range(-2..1);
            let dyr = (dy0, dy0 + rng.random_range(0..3));
            let block = QueryBlock::new(points.clone(), dxr, dyr).unwrap();
            match (block_match(&block, &cl, &cr), naive_match(&points, &cl, &cr, dxr, dyr)) {
                (Ok(m), Some((dx, dy, c))) => {
                    prop_assert_eq!((m.dx_int, m.dy_int), (dx, dy));
                    prop_assert_eq!(m.cost, c);
                }
                (Err(Error::NoMatch), None) => {}
                (a, b) => prop_assert!(false, "disagreement {:?} vs {:?}", a, b),
            }
        }

        #[test]
        fn subpixel_correction_is_bounded(s0 in 0.0f64..10.0, a in 0.0f64..10.0, b in 0.0f64..10.0) {
            let (m, p) = (s0 + a, s0 + b);
            if let Some(o) = parabola_offset(m, s0, p) {
                prop_assert!(o.abs() <= 0.5 + 1e-12);
            }
        }

        #[test]
        fn census_is_invariant_to_increasing_maps(seed in 0u64..1000, lut_seed in 0u64..1000) {
            let img = noise_image(16, 12, seed).map(|v| v / 2);
            let mut rng = ChaCha8Rng::seed_from_u64(lut_seed);
            let mut lut: Vec<u8> = rand::seq::index::sample(&mut rng, 256, 128).into_iter().map(|v| v as u8).collect();
            lut.sort_unstable();
            let mapped = img.map(|v| lut[v as usize]);
            prop_assert_eq!(census_transform(&img, 16, 12).unwrap(), census_transform(&mapped, 16, 12).unwrap());
        }
    }
}
