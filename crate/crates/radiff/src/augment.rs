//! GT-Sampling database and insertion, Doppler-aware global augmentations,
//! azimuth-sector mixing for sparse foregrounds, and fg/bg fusion.
//!
//! The collision predicate is strict: any positive BEV overlap between two
//! oriented boxes rejects an insertion. Overlap is computed exactly via a
//! separating-axis pre-check plus convex polygon clipping.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::{split_fg_bg, Box3D, Frame, RadarPoint, RadarPointCloud};

/// Minimum radar returns a database entry must carry.
pub const MIN_ENTRY_POINTS: usize = 5;

/// One stored annotated object: its box (world pose) and its radar points in
/// box-local coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GtEntry {
    pub bbox: Box3D,
    /// Points in box-local coordinates; doppler/rcs unchanged.
    pub points: Vec<RadarPoint>,
    pub source_frame: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GtDatabase {
    pub entries: Vec<GtEntry>,
}

impl GtDatabase {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn by_class(&self, class_id: u32) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| (e.bbox.class_id == class_id).then_some(i))
            .collect()
    }
}

/// Collect foreground points per box across frames, expressed box-locally;
/// entries with fewer than [`MIN_ENTRY_POINTS`] points are dropped.
pub fn build_gt_database(frames: &[Frame]) -> GtDatabase {
    let mut entries = Vec::new();
    for frame in frames {
        for bbox in &frame.boxes {
            let points: Vec<RadarPoint> = frame
                .radar
                .valid_points()
                .filter(|p| bbox.contains(p.pos()))
                .map(|p| {
                    let local = bbox.to_local(p.pos());
                    RadarPoint {
                        x: local[0],
                        y: local[1],
                        z: local[2],
                        doppler: p.doppler,
                        rcs: p.rcs,
                    }
                })
                .collect();
            if points.len() >= MIN_ENTRY_POINTS {
                entries.push(GtEntry { bbox: *bbox, points, source_frame: frame.frame_id });
            }
        }
    }
    GtDatabase { entries }
}

fn entry_world_points(entry: &GtEntry) -> Vec<RadarPoint> {
    entry
        .points
        .iter()
        .map(|p| {
            let w = entry.bbox.to_world(p.pos());
            RadarPoint { x: w[0], y: w[1], z: w[2], doppler: p.doppler, rcs: p.rcs }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// BEV overlap

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        a += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    a.abs() / 2.0
}

/// Clip `subject` against the half-plane to the left of edge (a, b).
fn clip_edge(subject: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
    let intersect = |p: [f64; 2], q: [f64; 2]| -> [f64; 2] {
        let dx = q[0] - p[0];
        let dy = q[1] - p[1];
        let ex = b[0] - a[0];
        let ey = b[1] - a[1];
        let denom = ex * dy - ey * dx;
        let t = (ex * (a[1] - p[1]) - ey * (a[0] - p[0])) / denom;
        [p[0] + t * dx, p[1] + t * dy]
    };
    let mut out = Vec::new();
    for i in 0..subject.len() {
        let cur = subject[i];
        let prev = subject[(i + subject.len() - 1) % subject.len()];
        match (inside(cur), inside(prev)) {
            (true, true) => out.push(cur),
            (true, false) => {
                out.push(intersect(prev, cur));
                out.push(cur);
            }
            (false, true) => out.push(intersect(prev, cur)),
            (false, false) => {}
        }
    }
    out
}

fn sat_disjoint(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> bool {
    for rect in [a, b] {
        for i in 0..2 {
            let edge = [rect[i + 1][0] - rect[i][0], rect[i + 1][1] - rect[i][1]];
            let axis = [-edge[1], edge[0]];
            let project = |poly: &[[f64; 2]; 4]| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for p in poly {
                    let d = p[0] * axis[0] + p[1] * axis[1];
                    lo = lo.min(d);
                    hi = hi.max(d);
                }
                (lo, hi)
            };
            let (alo, ahi) = project(a);
            let (blo, bhi) = project(b);
            if ahi < blo || bhi < alo {
                return true;
            }
        }
    }
    false
}

/// Exact intersection area of the yaw-rotated BEV rectangles of two boxes.
pub fn bev_overlap(a: &Box3D, b: &Box3D) -> f64 {
    let ca = a.bev_corners();
    let cb = b.bev_corners();
    if sat_disjoint(&ca, &cb) {
        return 0.0;
    }
    let mut poly: Vec<[f64; 2]> = ca.to_vec();
    for i in 0..4 {
        let j = (i + 1) % 4;
        poly = clip_edge(&poly, cb[i], cb[j]);
        if poly.is_empty() {
            return 0.0;
        }
    }
    polygon_area(&poly)
}

// ---------------------------------------------------------------------------
// GT-sampling insertion

/// Insert database entries at their stored world poses, skipping any whose
/// BEV footprint overlaps an existing or already-inserted box. If a class
/// has fewer entries than requested, as many as available are used and a
/// warning is recorded.
pub fn gt_sample_insert(
    frame: &Frame,
    db: &GtDatabase,
    per_class: &BTreeMap<u32, usize>,
    seed: u64,
) -> (Frame, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = frame.clone();
    let mut warnings = Vec::new();
    let mut radar = out.radar.compact();
    for (&class_id, &count) in per_class {
        let mut candidates = db.by_class(class_id);
        if candidates.len() < count {
            warnings.push(format!(
                "class {class_id}: requested {count} entries, database has {}",
                candidates.len()
            ));
        }
        candidates.shuffle(&mut rng);
        let mut inserted = 0;
        for idx in candidates {
            if inserted >= count {
                break;
            }
            let entry = &db.entries[idx];
            let collides = out
                .boxes
                .iter()
                .any(|existing| bev_overlap(existing, &entry.bbox) > 0.0);
            if collides {
                continue;
            }
            out.boxes.push(entry.bbox);
            radar.points.extend(entry_world_points(entry));
            radar.mask.extend(std::iter::repeat(true).take(entry.points.len()));
            inserted += 1;
        }
        if inserted < count.min(db.by_class(class_id).len()) {
            warnings.push(format!(
                "class {class_id}: only {inserted} of {count} requested insertions were collision-free"
            ));
        }
    }
    out.radar = radar;
    (out, warnings)
}

// ---------------------------------------------------------------------------
// Global augmentations

/// Mirror the frame across the x axis. Doppler is a radial scalar and is
/// invariant under reflection.
pub fn global_flip_y(frame: &Frame) -> Frame {
    let mut out = frame.clone();
    for (p, _) in out.radar.points.iter_mut().zip(&out.radar.mask) {
        p.y = -p.y;
    }
    for p in &mut out.lidar {
        p[1] = -p[1];
    }
    for b in &mut out.boxes {
        b.cy = -b.cy;
        b.yaw = Box3D::wrap_yaw(-b.yaw);
        b.vy = -b.vy;
    }
    out.ego_vy = -out.ego_vy;
    out.ego_yaw_rate = -out.ego_yaw_rate;
    out
}

fn nudge(v: f64, steps: i64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    let mut b = v.to_bits() as i64;
    if v > 0.0 {
        b += steps;
    } else {
        b -= steps;
    }
    f64::from_bits(b as u64)
}

/// Rotate (x, y) by the angle with sine `s` and cosine `c`, then search a
/// +-3 ulp neighborhood of the rescaled result for coordinates whose
/// `hypot` equals the original range bit-for-bit. Plain matrix rotation
/// drifts the rounded range by an ulp in a sizeable fraction of cases; the
/// neighborhood always contains an exact representative in practice.
fn rot2_range_exact(x: f64, y: f64, s: f64, c: f64) -> (f64, f64) {
    let r = x.hypot(y);
    let (x0, y0) = (c * x - s * y, s * x + c * y);
    if r == 0.0 {
        return (x0, y0);
    }
    let rn = x0.hypot(y0);
    let k = if rn > 0.0 { r / rn } else { 1.0 };
    let (x1, y1) = (x0 * k, y0 * k);
    let mut offsets: Vec<(i64, i64)> = (-3..=3)
        .flat_map(|i| (-3..=3).map(move |j| (i, j)))
        .collect();
    offsets.sort_by_key(|(i, j)| i.abs() + j.abs());
    for (i, j) in offsets {
        let (xa, ya) = (nudge(x1, i), nudge(y1, j));
        if xa.hypot(ya) == r {
            return (xa, ya);
        }
    }
    (x1, y1)
}

/// Rotate the frame about the sensor origin. Point ranges and Doppler
/// scalars are preserved exactly; box velocity vectors co-rotate.
pub fn global_rotate(frame: &Frame, theta: f64) -> Frame {
    let (s, c) = theta.sin_cos();
    let rot2 = |x: f64, y: f64| (c * x - s * y, s * x + c * y);
    let mut out = frame.clone();
    for p in &mut out.radar.points {
        let (x, y) = rot2_range_exact(p.x, p.y, s, c);
        p.x = x;
        p.y = y;
    }
    for p in &mut out.lidar {
        let (x, y) = rot2(p[0], p[1]);
        p[0] = x;
        p[1] = y;
    }
    for b in &mut out.boxes {
        let (cx, cy) = rot2(b.cx, b.cy);
        b.cx = cx;
        b.cy = cy;
        b.yaw = Box3D::wrap_yaw(b.yaw + theta);
        let (vx, vy) = rot2(b.vx, b.vy);
        b.vx = vx;
        b.vy = vy;
    }
    let (evx, evy) = rot2(out.ego_vx, out.ego_vy);
    out.ego_vx = evx;
    out.ego_vy = evy;
    out
}

/// Uniform spatial scaling. Doppler and velocities are deliberately left
/// untouched (matching common detector-training practice, at the cost of
/// physical consistency; see report metadata).
pub fn global_scale(frame: &Frame, s: f64) -> Frame {
    let mut out = frame.clone();
    for p in &mut out.radar.points {
        p.x *= s;
        p.y *= s;
        p.z *= s;
    }
    for p in &mut out.lidar {
        for v in p.iter_mut() {
            *v *= s;
        }
    }
    for b in &mut out.boxes {
        b.cx *= s;
        b.cy *= s;
        b.cz *= s;
        b.l *= s;
        b.w *= s;
        b.h *= s;
    }
    out
}

// ---------------------------------------------------------------------------
// PolarMix-style sector filling

/// Swap in annotated content from the database by azimuth sector until the
/// frame's foreground point count reaches `target_fg_points` or all sectors
/// are exhausted. The BEV collision check applies as in GT-sampling.
pub fn polar_mix_fill(
    frame: &Frame,
    db: &GtDatabase,
    target_fg_points: usize,
    seed: u64,
) -> Frame {
    const SECTORS: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = frame.clone();
    let (fg, _) = split_fg_bg(&out.radar, &out.boxes);
    let mut fg_count = fg.valid_count();
    if fg_count >= target_fg_points || db.is_empty() {
        return out;
    }
    let sector_of = |x: f64, y: f64| -> usize {
        let az = y.atan2(x); // (-pi, pi]
        (((az + PI) / (2.0 * PI) * SECTORS as f64) as usize).min(SECTORS - 1)
    };
    let mut sector_order: Vec<usize> = (0..SECTORS).collect();
    sector_order.shuffle(&mut rng);
    let mut radar = out.radar.compact();
    for sector in sector_order {
        if fg_count >= target_fg_points {
            break;
        }
        let mut in_sector: Vec<usize> = db
            .entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| (sector_of(e.bbox.cx, e.bbox.cy) == sector).then_some(i))
            .collect();
        in_sector.shuffle(&mut rng);
        for idx in in_sector {
            if fg_count >= target_fg_points {
                break;
            }
            let entry = &db.entries[idx];
            let collides = out
                .boxes
                .iter()
                .any(|existing| bev_overlap(existing, &entry.bbox) > 0.0);
            if collides {
                continue;
            }
            out.boxes.push(entry.bbox);
            radar.points.extend(entry_world_points(entry));
            radar.mask.extend(std::iter::repeat(true).take(entry.points.len()));
            fg_count += entry.points.len();
        }
    }
    out.radar = radar;
    out
}

// ---------------------------------------------------------------------------
// Fusion

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Foreground,
    Background,
}

/// Fused cloud with in-memory provenance flags. RDF output is flag-free.
#[derive(Debug, Clone)]
pub struct FusedCloud {
    pub cloud: RadarPointCloud,
    pub provenance: Vec<Provenance>,
}

/// Concatenate foreground and background clouds (same coordinate frame).
pub fn fuse(fg: &RadarPointCloud, bg: &RadarPointCloud) -> FusedCloud {
    let mut points = Vec::new();
    let mut provenance = Vec::new();
    for p in fg.valid_points() {
        points.push(*p);
        provenance.push(Provenance::Foreground);
    }
    for p in bg.valid_points() {
        points.push(*p);
        provenance.push(Provenance::Background);
    }
    FusedCloud { cloud: RadarPointCloud::from_points(points), provenance }
}

// ---------------------------------------------------------------------------
// Database persistence: one RDF-like file per entry plus an index

pub fn save_gt_database(db: &GtDatabase, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = String::from("#RDFDB v1\n");
    for (i, entry) in db.entries.iter().enumerate() {
        let name = format!("entry_{i:06}.rdfe");
        let mut text = String::from("#RDFE v1\n");
        let _ = writeln!(text, "src frame_id={}", entry.source_frame);
        let b = &entry.bbox;
        let _ = writeln!(
            text,
            "box {:.5e} {:.5e} {:.5e} {:.5e} {:.5e} {:.5e} {:.5e} {:.5e} {:.5e} {}",
            b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, b.vx, b.vy, b.class_id
        );
        for p in &entry.points {
            let _ = writeln!(
                text,
                "pt {:.5e} {:.5e} {:.5e} {:.5e} {:.5e}",
                p.x, p.y, p.z, p.doppler, p.rcs
            );
        }
        std::fs::write(dir.join(&name), text)?;
        let _ = writeln!(index, "{name}");
    }
    std::fs::write(dir.join("index.txt"), index)?;
    Ok(())
}

pub fn load_gt_database(dir: &Path) -> Result<GtDatabase> {
    let index = std::fs::read_to_string(dir.join("index.txt"))?;
    let mut lines = index.lines();
    if lines.next() != Some("#RDFDB v1") {
        return Err(Error::Parse { line: 1, msg: "bad database index header".into() });
    }
    let mut entries = Vec::new();
    for name in lines.filter(|l| !l.trim().is_empty()) {
        let text = std::fs::read_to_string(dir.join(name))?;
        entries.push(parse_entry(&text)?);
    }
    Ok(GtDatabase { entries })
}

fn parse_entry(text: &str) -> Result<GtEntry> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some("#RDFE v1") {
        return Err(Error::Parse { line: 1, msg: "bad entry header".into() });
    }
    let mut source_frame = 0u64;
    let mut bbox: Option<Box3D> = None;
    let mut points = Vec::new();
    for (i, raw) in lines {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: &str| Error::Parse { line: lineno, msg: msg.to_string() };
        match toks[0] {
            "src" => {
                source_frame = toks
                    .get(1)
                    .and_then(|t| t.strip_prefix("frame_id="))
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err("bad src line"))?;
            }
            "box" => {
                if toks.len() != 11 {
                    return Err(err("box needs 10 fields"));
                }
                let v: Vec<f64> = toks[1..10]
                    .iter()
                    .map(|t| t.parse::<f64>().map_err(|_| err("bad float")))
                    .collect::<Result<_>>()?;
                let class_id = toks[10].parse::<u32>().map_err(|_| err("bad class id"))?;
                bbox = Some(Box3D {
                    cx: v[0], cy: v[1], cz: v[2],
                    l: v[3], w: v[4], h: v[5],
                    yaw: v[6], vx: v[7], vy: v[8],
                    class_id,
                });
            }
            "pt" => {
                if toks.len() != 6 {
                    return Err(err("pt needs 5 fields"));
                }
                let v: Vec<f64> = toks[1..6]
                    .iter()
                    .map(|t| t.parse::<f64>().map_err(|_| err("bad float")))
                    .collect::<Result<_>>()?;
                points.push(RadarPoint { x: v[0], y: v[1], z: v[2], doppler: v[3], rcs: v[4] });
            }
            other => return Err(err(&format!("unknown tag '{other}'"))),
        }
    }
    Ok(GtEntry {
        bbox: bbox.ok_or(Error::Parse { line: 1, msg: "entry missing box".into() })?,
        points,
        source_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::synth::{synth_scene, SynthProfile};

    fn boxed(cx: f64, cy: f64, l: f64, w: f64, yaw: f64) -> Box3D {
        Box3D { cx, cy, cz: 0.0, l, w, h: 1.5, yaw, vx: 0.0, vy: 0.0, class_id: 1 }
    }

    #[test]
    fn overlap_identical_boxes_is_lw() {
        let b = boxed(3.0, 2.0, 4.0, 2.0, 0.4);
        assert!((bev_overlap(&b, &b) - 8.0).abs() < 1e-9);
    }

    #[test]
    fn overlap_distant_boxes_zero() {
        let a = boxed(0.0, 0.0, 4.0, 2.0, 0.3);
        let b = boxed(100.0, 0.0, 4.0, 2.0, -1.0);
        assert_eq!(bev_overlap(&a, &b), 0.0);
    }

    #[test]
    fn overlap_offset_squares() {
        // axis-aligned 2x2 squares offset by (1, 0): intersection 1x2 = 2
        let a = boxed(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = boxed(1.0, 0.0, 2.0, 2.0, 0.0);
        assert!((bev_overlap(&a, &b) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn database_drops_small_entries() {
        let mut frame = Frame::default();
        let big = boxed(5.0, 0.0, 4.0, 2.0, 0.0);
        let small = boxed(-5.0, 0.0, 4.0, 2.0, 0.0);
        frame.boxes = vec![big, small];
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push(RadarPoint { x: 5.0 + 0.05 * i as f64, ..Default::default() });
        }
        for i in 0..4 {
            pts.push(RadarPoint { x: -5.0 + 0.05 * i as f64, ..Default::default() });
        }
        frame.radar = RadarPointCloud::from_points(pts);
        let db = build_gt_database(&[frame]);
        assert_eq!(db.len(), 1);
        assert_eq!(db.entries[0].points.len(), 10);
    }

    #[test]
    fn database_points_round_trip_to_world() {
        let p = SynthProfile::toy();
        let frames: Vec<Frame> = (0..20).map(|s| synth_scene(s, &p)).collect();
        let db = build_gt_database(&frames);
        assert!(!db.is_empty());
        for entry in &db.entries {
            let frame = frames.iter().find(|f| f.frame_id == entry.source_frame).unwrap();
            for lp in &entry.points {
                let w = entry.bbox.to_world(lp.pos());
                let found = frame.radar.valid_points().any(|orig| {
                    (orig.x - w[0]).abs() < 1e-10
                        && (orig.y - w[1]).abs() < 1e-10
                        && (orig.z - w[2]).abs() < 1e-10
                });
                assert!(found, "local->world round trip did not match an original point");
            }
        }
    }

    #[test]
    fn insert_identical_pose_rejected() {
        let p = SynthProfile::toy();
        let frames: Vec<Frame> = (0..30).map(|s| synth_scene(s, &p)).collect();
        let db = build_gt_database(&frames);
        let frame = frames
            .iter()
            .find(|f| f.boxes.iter().any(|b| db.entries.iter().any(|e| e.bbox == *b)))
            .expect("some frame shares a box with the db");
        let n_before = frame.boxes.len();
        // request every class; entries identical in pose to existing boxes
        // must be rejected by the self-overlap check
        let mut per_class = BTreeMap::new();
        for c in 1..=3u32 {
            per_class.insert(c, db.by_class(c).len());
        }
        let (augmented, _) = gt_sample_insert(frame, &db, &per_class, 9);
        for i in 0..augmented.boxes.len() {
            for j in (i + 1)..augmented.boxes.len() {
                assert_eq!(
                    bev_overlap(&augmented.boxes[i], &augmented.boxes[j]),
                    0.0,
                    "inserted boxes overlap"
                );
            }
        }
        assert!(augmented.boxes.len() >= n_before);
    }

    #[test]
    fn insert_into_empty_frame() {
        let a = GtEntry {
            bbox: boxed(2.0, 2.0, 1.0, 1.0, 0.0),
            points: vec![RadarPoint::default(); 5],
            source_frame: 0,
        };
        let b = GtEntry {
            bbox: boxed(8.0, -3.0, 1.0, 1.0, 0.4),
            points: vec![RadarPoint::default(); 5],
            source_frame: 0,
        };
        let c = GtEntry {
            bbox: boxed(15.0, 5.0, 1.0, 1.0, -0.2),
            points: vec![RadarPoint::default(); 5],
            source_frame: 0,
        };
        let db = GtDatabase { entries: vec![a, b, c] };
        let frame = Frame::default();
        let mut per_class = BTreeMap::new();
        per_class.insert(1, 3);
        let (out, warnings) = gt_sample_insert(&frame, &db, &per_class, 3);
        assert_eq!(out.boxes.len(), 3, "warnings: {warnings:?}");
        assert_eq!(out.radar.valid_count(), 15);
    }

    #[test]
    fn flip_is_involution() {
        let f = synth_scene(17, &SynthProfile::toy());
        let twice = global_flip_y(&global_flip_y(&f));
        assert_eq!(twice, f);
    }

    #[test]
    fn rotate_zero_is_identity() {
        let f = synth_scene(5, &SynthProfile::toy());
        let r = global_rotate(&f, 0.0);
        assert_eq!(r, f);
    }

    #[test]
    fn rotate_quarter_turn() {
        let mut f = Frame::default();
        f.radar = RadarPointCloud::from_points(vec![RadarPoint {
            x: 1.0, y: 0.0, z: 0.0, doppler: 3.0, rcs: 1.0,
        }]);
        f.boxes = vec![Box3D { vx: 2.0, vy: 0.0, ..boxed(1.0, 0.0, 1.0, 1.0, 0.0) }];
        let r = global_rotate(&f, std::f64::consts::FRAC_PI_2);
        let p = r.radar.points[0];
        assert!(p.x.abs() < 1e-12 && (p.y - 1.0).abs() < 1e-12);
        assert_eq!(p.doppler, 3.0);
        let b = r.boxes[0];
        assert!(b.vx.abs() < 1e-12 && (b.vy - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rotate_preserves_range_and_doppler() {
        let f = synth_scene(23, &SynthProfile::toy());
        let r = global_rotate(&f, 0.37);
        for (orig, rot) in f.radar.points.iter().zip(&r.radar.points) {
            let range_o = (orig.x * orig.x + orig.y * orig.y).sqrt();
            let range_r = (rot.x * rot.x + rot.y * rot.y).sqrt();
            assert!((range_o - range_r).abs() < 1e-12);
            assert_eq!(orig.doppler, rot.doppler);
        }
    }

    #[test]
    fn fuse_counts_add_and_split_back() {
        let f = synth_scene(31, &SynthProfile::toy());
        let (fg, bg) = split_fg_bg(&f.radar, &f.boxes);
        let fused = fuse(&fg, &bg);
        assert_eq!(fused.cloud.valid_count(), fg.valid_count() + bg.valid_count());
        let (fg2, bg2) = split_fg_bg(&fused.cloud, &f.boxes);
        assert_eq!(fg2.valid_count(), fg.valid_count());
        assert_eq!(bg2.valid_count(), bg.valid_count());
        let empty = RadarPointCloud::default();
        let only_bg = fuse(&empty, &bg);
        assert_eq!(only_bg.cloud.valid_count(), bg.valid_count());
    }

    #[test]
    fn polar_mix_reaches_target_or_exhausts() {
        let p = SynthProfile::toy();
        let frames: Vec<Frame> = (0..40).map(|s| synth_scene(s, &p)).collect();
        let db = build_gt_database(&frames);
        let sparse = synth_scene(1000, &p);
        let target = 200;
        let filled = polar_mix_fill(&sparse, &db, target, 7);
        let (fg, _) = split_fg_bg(&filled.radar, &filled.boxes);
        let (fg0, _) = split_fg_bg(&sparse.radar, &sparse.boxes);
        assert!(fg.valid_count() >= fg0.valid_count());
        for i in 0..filled.boxes.len() {
            for j in (i + 1)..filled.boxes.len() {
                assert_eq!(bev_overlap(&filled.boxes[i], &filled.boxes[j]), 0.0);
            }
        }
        // a frame already at target is untouched
        let at_target = polar_mix_fill(&filled, &db, 1, 7);
        assert_eq!(at_target, filled);
    }

    #[test]
    fn database_persistence_round_trip() {
        let p = SynthProfile::toy();
        let frames: Vec<Frame> = (0..10).map(|s| synth_scene(s, &p)).collect();
        let db = build_gt_database(&frames);
        let dir = tempfile::tempdir().unwrap();
        save_gt_database(&db, dir.path()).unwrap();
        let loaded = load_gt_database(dir.path()).unwrap();
        assert_eq!(loaded.len(), db.len());
        for (a, b) in db.entries.iter().zip(&loaded.entries) {
            assert_eq!(a.source_frame, b.source_frame);
            assert_eq!(a.bbox.class_id, b.bbox.class_id);
            assert!((a.bbox.cx - b.bbox.cx).abs() < 1e-4);
            assert_eq!(a.points.len(), b.points.len());
        }
    }
}
