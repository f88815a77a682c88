//! Image containers shared by every matcher.
//!
//! [`GrayImage`] is a plain row-major 8-bit buffer. [`DisparityMap`] stores
//! disparities in 16-bit fixed point with [`SUBPIXEL_LEVELS`] levels per
//! pixel and a reserved raw value marking invalid pixels.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Fixed-point sub-pixel levels per disparity pixel.
pub const SUBPIXEL_LEVELS: i32 = 16;

/// Raw value reserved for invalid disparity pixels.
pub const INVALID_DISPARITY: i16 = i16::MIN;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!("image dimensions must be positive, got {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "buffer holds {} bytes, {width}x{height} needs {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[u8] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    /// Applies `f` to every intensity.
    pub fn map(&self, f: impl Fn(u8) -> u8) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies a `w`x`h` window whose top-left corner is (`x0`, `y0`). Rows
    /// and columns outside the source are clamped to the nearest edge.
    pub fn crop_clamped(&self, x0: isize, y0: isize, w: usize, h: usize) -> Result<GrayImage> {
        let (sw, sh) = (self.width as isize, self.height as isize);
        GrayImage::from_fn(w, h, |x, y| {
            let sx = (x0 + x as isize).clamp(0, sw - 1) as usize;
            let sy = (y0 + y as isize).clamp(0, sh - 1) as usize;
            self.get(sx, sy)
        })
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, h, maxval, offset) = parse_pgm_header(&bytes).map_err(|m| Error::parse(path, 1, m))?;
        if maxval > 255 {
            return Err(Error::parse(path, 1, format!("expected 8-bit PGM, maxval is {maxval}")));
        }
        let pixels = bytes
            .get(offset..offset + w * h)
            .ok_or_else(|| Error::parse(path, 1, "truncated pixel data"))?;
        GrayImage::new(w, h, pixels.to_vec())
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Interleaved 8-bit image with an arbitrary channel count.
#[derive(Debug, Clone)]
pub struct InterleavedImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// BT.601 luma: round(0.299 R + 0.587 G + 0.114 B).
pub fn to_gray(img: &InterleavedImage) -> Result<GrayImage> {
    if img.channels != 3 {
        return Err(Error::Input(format!("expected 3 channels, got {}", img.channels)));
    }
    if img.data.len() != img.width * img.height * 3 {
        return Err(Error::Input("interleaved buffer size does not match dimensions".into()));
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| {
            let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage::new(img.width, img.height, data)
}

/// Block-mean downscale by an integer factor. Output dims are `floor(in / s)`.
pub fn downscale(img: &GrayImage, s: usize) -> Result<GrayImage> {
    if s < 1 {
        return Err(Error::Parameter("downscale factor must be >= 1".into()));
    }
    if s == 1 {
        return Ok(img.clone());
    }
    let (w, h) = (img.width / s, img.height / s);
    if w == 0 || h == 0 {
        return Err(Error::Parameter(format!(
            "factor {s} leaves no pixels of a {}x{} image",
            img.width, img.height
        )));
    }
    let area = (s * s) as u32;
    GrayImage::from_fn(w, h, |x, y| {
        let mut sum = 0u32;
        for yy in y * s..(y + 1) * s {
            sum += img.row(yy)[x * s..(x + 1) * s].iter().map(|&v| v as u32).sum::<u32>();
        }
        ((sum + area / 2) / area) as u8
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    min_disparity: i32,
    raw: Vec<i16>,
}

impl DisparityMap {
    /// All-invalid map.
    pub fn new(width: usize, height: usize, min_disparity: i32) -> Self {
        Self {
            width,
            height,
            min_disparity,
            raw: vec![INVALID_DISPARITY; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, min_disparity: i32, raw: Vec<i16>) -> Result<Self> {
        if raw.len() != width * height {
            return Err(Error::Input("raw disparity buffer does not match dimensions".into()));
        }
        Ok(Self { width, height, min_disparity, raw })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn min_disparity(&self) -> i32 {
        self.min_disparity
    }

    #[inline]
    pub fn raw(&self) -> &[i16] {
        &self.raw
    }

    #[inline]
    pub fn raw_at(&self, x: usize, y: usize) -> i16 {
        self.raw[y * self.width + x]
    }

    /// Disparity in pixels, `None` for invalid pixels.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let r = self.raw_at(x, y);
        (r != INVALID_DISPARITY).then(|| r as f64 / SUBPIXEL_LEVELS as f64)
    }

    /// Stores `d` rounded to the nearest 1/16 px. Values that do not fit the
    /// raw range or fall below the minimum disparity are stored invalid.
    pub fn set(&mut self, x: usize, y: usize, d: Option<f64>) {
        let idx = y * self.width + x;
        self.raw[idx] = match d {
            Some(d) => self.encode(d),
            None => INVALID_DISPARITY,
        };
    }

    fn encode(&self, d: f64) -> i16 {
        let r = (d * SUBPIXEL_LEVELS as f64).round();
        let lo = (self.min_disparity * SUBPIXEL_LEVELS) as f64;
        if !r.is_finite() || r < lo || r > i16::MAX as f64 || r <= INVALID_DISPARITY as f64 {
            INVALID_DISPARITY
        } else {
            r as i16
        }
    }

    pub fn valid_count(&self) -> usize {
        self.raw.iter().filter(|&&r| r != INVALID_DISPARITY).count()
    }

    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.raw.iter().enumerate().filter_map(move |(i, &r)| {
            (r != INVALID_DISPARITY).then(|| (i % self.width, i / self.width, r as f64 / SUBPIXEL_LEVELS as f64))
        })
    }

    /// Adds `offset` px to every valid pixel, re-masking values that leave
    /// the representable range.
    pub fn offset_by(&self, offset: f64) -> DisparityMap {
        let delta = (offset * SUBPIXEL_LEVELS as f64).round() as i32;
        let lo = self.min_disparity * SUBPIXEL_LEVELS;
        let raw = self
            .raw
            .iter()
            .map(|&r| {
                if r == INVALID_DISPARITY {
                    return r;
                }
                let v = r as i32 + delta;
                if v < lo || v > i16::MAX as i32 || v <= INVALID_DISPARITY as i32 {
                    INVALID_DISPARITY
                } else {
                    v as i16
                }
            })
            .collect();
        DisparityMap { raw, ..self.clone() }
    }

    /// 16-bit P5 dump with raw values offset by +32768, so the invalid
    /// sentinel encodes as 0.
    pub fn write_pgm16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        out.reserve(self.raw.len() * 2);
        for &r in &self.raw {
            let v = (r as i32 + 32768) as u16;
            out.extend_from_slice(&v.to_be_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm16(path: impl AsRef<Path>, min_disparity: i32) -> Result<DisparityMap> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, h, maxval, offset) = parse_pgm_header(&bytes).map_err(|m| Error::parse(path, 1, m))?;
        if maxval != 65535 {
            return Err(Error::parse(path, 1, format!("expected maxval 65535, got {maxval}")));
        }
        let body = bytes
            .get(offset..offset + w * h * 2)
            .ok_or_else(|| Error::parse(path, 1, "truncated pixel data"))?;
        let raw = body
            .chunks_exact(2)
            .map(|b| (u16::from_be_bytes([b[0], b[1]]) as i32 - 32768) as i16)
            .collect();
        DisparityMap::from_raw(w, h, min_disparity, raw)
    }
}

/// Nearest-neighbour spatial upscale by `s`, multiplying every valid
/// disparity by `s`.
pub fn upscale_disparity(map: &DisparityMap, s: usize) -> Result<DisparityMap> {
    if s < 1 {
        return Err(Error::Parameter("upscale factor must be >= 1".into()));
    }
    if s == 1 {
        return Ok(map.clone());
    }
    let (w, h) = (map.width * s, map.height * s);
    let floor = map.min_disparity * SUBPIXEL_LEVELS * s as i32;
    let mut raw = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let r = map.raw_at(x / s, y / s);
            raw.push(if r == INVALID_DISPARITY {
                r
            } else {
                let v = r as i32 * s as i32;
                if v > i16::MAX as i32 || v <= INVALID_DISPARITY as i32 || v < floor {
                    INVALID_DISPARITY
                } else {
                    v as i16
                }
            });
        }
    }
    DisparityMap::from_raw(w, h, map.min_disparity * s as i32, raw)
}

fn parse_pgm_header(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, usize), String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("unsupported magic {:?}, expected P5", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    // exactly one whitespace byte separates the header from the raster
    Ok((w, h, maxval, pos + 1))
}
