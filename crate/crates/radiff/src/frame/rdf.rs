//! RDF frame file: UTF-8 text, one record per line, 6 significant digits.
//!
//! ```text
//! #RDF v1
//! meta frame_id=<u64> timestamp_us=<u64>
//! ego vx=<f> vy=<f> yawrate=<f>
//! pt <x> <y> <z> <doppler> <rcs>
//! lpt <x> <y> <z>
//! box <cx> <cy> <cz> <l> <w> <h> <yaw> <vx> <vy> <class_id>
//! ```
//!
//! Unknown line tags are an error. Only valid (non-padding) radar points are
//! written.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Box3D, Frame, RadarPoint, RadarPointCloud, MAX_CLASS_ID};

fn f(v: f64) -> String {
    format!("{v:.5e}")
}

pub fn frame_to_string(frame: &Frame) -> String {
    let mut out = String::new();
    out.push_str("#RDF v1\n");
    let _ = writeln!(
        out,
        "meta frame_id={} timestamp_us={}",
        frame.frame_id, frame.timestamp_us
    );
    let _ = writeln!(
        out,
        "ego vx={} vy={} yawrate={}",
        f(frame.ego_vx),
        f(frame.ego_vy),
        f(frame.ego_yaw_rate)
    );
    for p in frame.radar.valid_points() {
        let _ = writeln!(
            out,
            "pt {} {} {} {} {}",
            f(p.x),
            f(p.y),
            f(p.z),
            f(p.doppler),
            f(p.rcs)
        );
    }
    for p in &frame.lidar {
        let _ = writeln!(out, "lpt {} {} {}", f(p[0]), f(p[1]), f(p[2]));
    }
    for b in &frame.boxes {
        let _ = writeln!(
            out,
            "box {} {} {} {} {} {} {} {} {} {}",
            f(b.cx),
            f(b.cy),
            f(b.cz),
            f(b.l),
            f(b.w),
            f(b.h),
            f(b.yaw),
            f(b.vx),
            f(b.vy),
            b.class_id
        );
    }
    out
}

pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    std::fs::write(path, frame_to_string(frame))?;
    Ok(())
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(line, format!("bad float '{tok}'")))
}

fn parse_kv<'a>(tok: &'a str, key: &str, line: usize) -> Result<&'a str> {
    tok.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| parse_err(line, format!("expected {key}=<value>, got '{tok}'")))
}

pub fn frame_from_string(text: &str) -> Result<Frame> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "#RDF v1")) => {}
        Some((_, other)) => return Err(parse_err(1, format!("bad header '{other}'"))),
        None => return Err(parse_err(1, "empty file")),
    }
    let mut frame = Frame::default();
    let mut points = Vec::new();
    let mut saw_meta = false;
    for (i, raw) in lines {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let tag = toks.next().unwrap();
        let rest: Vec<&str> = toks.collect();
        match tag {
            "meta" => {
                if rest.len() != 2 {
                    return Err(parse_err(lineno, "meta needs frame_id and timestamp_us"));
                }
                frame.frame_id = parse_kv(rest[0], "frame_id", lineno)?
                    .parse()
                    .map_err(|_| parse_err(lineno, "bad frame_id"))?;
                frame.timestamp_us = parse_kv(rest[1], "timestamp_us", lineno)?
                    .parse()
                    .map_err(|_| parse_err(lineno, "bad timestamp_us"))?;
                saw_meta = true;
            }
            "ego" => {
                if rest.len() != 3 {
                    return Err(parse_err(lineno, "ego needs vx, vy, yawrate"));
                }
                frame.ego_vx = parse_f64(parse_kv(rest[0], "vx", lineno)?, lineno)?;
                frame.ego_vy = parse_f64(parse_kv(rest[1], "vy", lineno)?, lineno)?;
                frame.ego_yaw_rate = parse_f64(parse_kv(rest[2], "yawrate", lineno)?, lineno)?;
            }
            "pt" => {
                if rest.len() != 5 {
                    return Err(parse_err(lineno, format!("pt needs 5 fields, got {}", rest.len())));
                }
                let v: Vec<f64> = rest
                    .iter()
                    .map(|t| parse_f64(t, lineno))
                    .collect::<Result<_>>()?;
                points.push(RadarPoint { x: v[0], y: v[1], z: v[2], doppler: v[3], rcs: v[4] });
            }
            "lpt" => {
                if rest.len() != 3 {
                    return Err(parse_err(lineno, format!("lpt needs 3 fields, got {}", rest.len())));
                }
                let v: Vec<f64> = rest
                    .iter()
                    .map(|t| parse_f64(t, lineno))
                    .collect::<Result<_>>()?;
                frame.lidar.push([v[0], v[1], v[2]]);
            }
            "box" => {
                if rest.len() != 10 {
                    return Err(parse_err(lineno, format!("box needs 10 fields, got {}", rest.len())));
                }
                let v: Vec<f64> = rest[..9]
                    .iter()
                    .map(|t| parse_f64(t, lineno))
                    .collect::<Result<_>>()?;
                let class_id: u32 = rest[9]
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad class id '{}'", rest[9])))?;
                if class_id == 0 || class_id > MAX_CLASS_ID {
                    return Err(parse_err(lineno, format!("unknown class id {class_id}")));
                }
                frame.boxes.push(Box3D {
                    cx: v[0], cy: v[1], cz: v[2],
                    l: v[3], w: v[4], h: v[5],
                    yaw: v[6], vx: v[7], vy: v[8],
                    class_id,
                });
            }
            other => return Err(parse_err(lineno, format!("unknown line tag '{other}'"))),
        }
    }
    if !saw_meta {
        return Err(parse_err(1, "missing meta line"));
    }
    frame.radar = RadarPointCloud::from_points(points);
    Ok(frame)
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let text = std::fs::read_to_string(path)?;
    frame_from_string(&text)
}
