//! Line-delimited text records exchanged between the generator, the
//! pipeline and the evaluator. Fields are whitespace separated; `#` lines
//! and blank lines are skipped.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;

use crate::calib_refine::RadarDetection;
use crate::census::ObjectKind;
use crate::error::{Error, Result};
use crate::synth::ObjectTruth;
use crate::template::{Detection, ObjectClass, ObjectDisparity};

/// Splits `text` into records of exactly `n` fields, keyed by line number.
pub fn fields<'a>(text: &'a str, path: &'a Path, n: usize) -> impl Iterator<Item = Result<(usize, Vec<&'a str>)>> + 'a {
    text.lines().enumerate().filter_map(move |(i, line)| {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != n {
            return Some(Err(Error::parse(path, i + 1, format!("expected {n} fields, found {}", f.len()))));
        }
        Some(Ok((i + 1, f)))
    })
}

pub fn field<T: FromStr>(f: &str, path: &Path, line: usize, what: &str) -> Result<T> {
    f.parse().map_err(|_| Error::parse(path, line, format!("bad {what} `{f}`")))
}

fn flag(f: &str, path: &Path, line: usize) -> Result<bool> {
    match f {
        "1" => Ok(true),
        "0" => Ok(false),
        _ => Err(Error::parse(path, line, format!("bad flag `{f}`"))),
    }
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn format_detection(frame: u64, d: &Detection) -> String {
    format!("{} {} {} {} {} {} {}\n", frame, d.id, d.class, d.cx, d.cy, d.w, d.h)
}

/// `frame_id det_id class cx cy w h`, grouped by frame.
pub fn parse_detections(text: &str, path: &Path) -> Result<BTreeMap<u64, Vec<Detection>>> {
    let mut out: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for rec in fields(text, path, 7) {
        let (line, f) = rec?;
        let frame = field(f[0], path, line, "frame id")?;
        let id = field(f[1], path, line, "detection id")?;
        let class: ObjectClass = f[2].parse().map_err(|_| Error::parse(path, line, format!("bad class `{}`", f[2])))?;
        let nums: Vec<f64> = f[3..].iter().map(|s| field(s, path, line, "box value")).collect::<Result<_>>()?;
        let det = Detection::new(id, class, nums[0], nums[1], nums[2], nums[3])
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
        out.entry(frame).or_default().push(det);
    }
    Ok(out)
}

pub fn format_radar(frame: u64, r: &RadarDetection) -> String {
    let (p, e) = (&r.position, &r.extent);
    format!("{} {} {} {} {} {} {}\n", frame, p.x, p.y, p.z, e.x, e.y, e.z)
}

/// `frame_id x y z ex ey ez`, grouped by frame.
pub fn parse_radar(text: &str, path: &Path) -> Result<BTreeMap<u64, Vec<RadarDetection>>> {
    let mut out: BTreeMap<u64, Vec<RadarDetection>> = BTreeMap::new();
    for rec in fields(text, path, 7) {
        let (line, f) = rec?;
        let frame = field(f[0], path, line, "frame id")?;
        let v: Vec<f64> = f[1..].iter().map(|s| field(s, path, line, "coordinate")).collect::<Result<_>>()?;
        out.entry(frame).or_default().push(RadarDetection {
            position: Vector3::new(v[0], v[1], v[2]),
            extent: Vector3::new(v[3], v[4], v[5]),
        });
    }
    Ok(out)
}

/// Ground truth of one object in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRecord {
    pub id: u64,
    pub class: ObjectClass,
    pub position: Vector3<f64>,
    pub disparity: f64,
    pub depth: f64,
}

pub fn format_truth(frame: u64, o: &ObjectTruth) -> String {
    let p = &o.position;
    format!("{} {} {} {} {} {} {} {}\n", frame, o.id, o.class, p.x, p.y, p.z, o.disparity, o.depth)
}

/// `frame_id obj_id class x y z disparity depth`, grouped by frame.
pub fn parse_truth(text: &str, path: &Path) -> Result<BTreeMap<u64, Vec<TruthRecord>>> {
    let mut out: BTreeMap<u64, Vec<TruthRecord>> = BTreeMap::new();
    for rec in fields(text, path, 8) {
        let (line, f) = rec?;
        let frame = field(f[0], path, line, "frame id")?;
        let class: ObjectClass = f[2].parse().map_err(|_| Error::parse(path, line, format!("bad class `{}`", f[2])))?;
        let v: Vec<f64> = f[3..].iter().map(|s| field(s, path, line, "value")).collect::<Result<_>>()?;
        out.entry(frame).or_default().push(TruthRecord {
            id: field(f[1], path, line, "object id")?,
            class,
            position: Vector3::new(v[0], v[1], v[2]),
            disparity: v[3],
            depth: v[4],
        });
    }
    Ok(out)
}

pub fn format_object_disparity(frame: u64, o: &ObjectDisparity) -> String {
    format!("{} {} {} {} {} {}\n", frame, o.det_id, o.kind, o.disparity, u8::from(o.valid), o.n_blocks_used)
}

/// `frame_id det_id kind disparity valid n_blocks`, grouped by frame.
pub fn parse_object_disparities(text: &str, path: &Path) -> Result<BTreeMap<u64, Vec<ObjectDisparity>>> {
    let mut out: BTreeMap<u64, Vec<ObjectDisparity>> = BTreeMap::new();
    for rec in fields(text, path, 6) {
        let (line, f) = rec?;
        let kind = match f[2] {
            "FAR" => ObjectKind::Far,
            "CLOSE" => ObjectKind::Close,
            k => return Err(Error::parse(path, line, format!("bad kind `{k}`"))),
        };
        out.entry(field(f[0], path, line, "frame id")?).or_default().push(ObjectDisparity {
            det_id: field(f[1], path, line, "detection id")?,
            kind,
            disparity: field(f[3], path, line, "disparity")?,
            valid: flag(f[4], path, line)?,
            n_blocks_used: field(f[5], path, line, "block count")?,
        });
    }
    Ok(out)
}

/// Calibration state applied in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinerLog {
    pub rect_delta: i32,
    pub radar_offset: f64,
    pub obj_offset: f64,
}

pub fn format_refiner_log(frame: u64, r: &RefinerLog) -> String {
    format!("{} {} {} {}\n", frame, r.rect_delta, r.radar_offset, r.obj_offset)
}

/// `frame_id rect_delta radar_offset obj_offset`.
pub fn parse_refiner_log(text: &str, path: &Path) -> Result<BTreeMap<u64, RefinerLog>> {
    let mut out = BTreeMap::new();
    for rec in fields(text, path, 4) {
        let (line, f) = rec?;
        out.insert(
            field(f[0], path, line, "frame id")?,
            RefinerLog {
                rect_delta: field(f[1], path, line, "rect delta")?,
                radar_offset: field(f[2], path, line, "radar offset")?,
                obj_offset: field(f[3], path, line, "object offset")?,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_lines() {
        let d = Detection::new(4, ObjectClass::Truck, 0.5, 0.25, 0.1, 0.2).unwrap();
        let text = format!("# header\n{}\n{}", format_detection(7, &d), format_detection(9, &d));
        let parsed = parse_detections(&text, Path::new("dets.txt")).unwrap();
        assert_eq!(parsed[&7], vec![d]);
        assert_eq!(parsed.keys().copied().collect::<Vec<_>>(), vec![7, 9]);
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let err = parse_detections("1 2 car 0.5 0.5 0.1\n", Path::new("d.txt")).unwrap_err();
        assert_eq!(err.to_string(), "d.txt:1: expected 7 fields, found 6");
        let err = parse_detections("\n1 2 boat 0.5 0.5 0.1 0.1\n", Path::new("d.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_object_disparities("0 1 FAR 3.0 yes 1\n", Path::new("o.txt")).unwrap_err();
        assert!(err.to_string().contains("bad flag"));
    }

    #[test]
    fn object_disparity_lines() {
        let o = ObjectDisparity { det_id: 3, disparity: 2.9375, kind: ObjectKind::Close, n_blocks_used: 12, valid: true };
        let line = format_object_disparity(5, &o);
        assert_eq!(line, "5 3 CLOSE 2.9375 1 12\n");
        assert_eq!(parse_object_disparities(&line, Path::new("o")).unwrap()[&5], vec![o]);
    }
}
