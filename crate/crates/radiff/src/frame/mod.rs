//! Radar frame data model: point clouds, boxes, the RDF interchange format,
//! sweep aggregation, Doppler compensation, normalization and fg/bg
//! splitting.
//!
//! Doppler sign convention (fixed project-wide): positive = receding from
//! the sensor. Stored Doppler values are always ego-motion compensated.

mod rdf;
pub mod synth;

pub use rdf::{load_frame, save_frame};

use crate::error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Largest class id the interchange format accepts.
pub const MAX_CLASS_ID: u32 = 16;

/// One radar return: position in meters, compensated Doppler in m/s,
/// RCS in dBsm.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub doppler: f64,
    pub rcs: f64,
}

impl RadarPoint {
    pub fn pos(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Ordered point set with a validity mask; `mask[i] == false` marks padding.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RadarPointCloud {
    pub points: Vec<RadarPoint>,
    pub mask: Vec<bool>,
}

impl RadarPointCloud {
    pub fn from_points(points: Vec<RadarPoint>) -> Self {
        let mask = vec![true; points.len()];
        RadarPointCloud { points, mask }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn valid_points(&self) -> impl Iterator<Item = &RadarPoint> {
        self.points
            .iter()
            .zip(&self.mask)
            .filter_map(|(p, m)| m.then_some(p))
    }

    /// Drop padding slots.
    pub fn compact(&self) -> RadarPointCloud {
        RadarPointCloud::from_points(self.valid_points().cloned().collect())
    }
}

/// Oriented 3D bounding box with planar velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub class_id: u32,
}

impl Box3D {
    /// Wrap an angle to (-pi, pi].
    pub fn wrap_yaw(yaw: f64) -> f64 {
        let mut y = yaw.rem_euclid(2.0 * std::f64::consts::PI);
        if y > std::f64::consts::PI {
            y -= 2.0 * std::f64::consts::PI;
        }
        y
    }

    /// Point membership: rotate into the box frame by -yaw about the center
    /// and compare against half-sizes per axis (boundary inclusive).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        let dz = p[2] - self.cz;
        let (s, c) = (-self.yaw).sin_cos();
        let lx = c * dx - s * dy;
        let ly = s * dx + c * dy;
        lx.abs() <= self.l / 2.0 && ly.abs() <= self.w / 2.0 && dz.abs() <= self.h / 2.0
    }

    /// World -> box-local coordinates.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        let (s, c) = (-self.yaw).sin_cos();
        [c * dx - s * dy, s * dx + c * dy, p[2] - self.cz]
    }

    /// Box-local -> world coordinates.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.cx + c * p[0] - s * p[1],
            self.cy + s * p[0] + c * p[1],
            self.cz + p[2],
        ]
    }

    /// BEV corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let mut out = [[0.0; 2]; 4];
        for (i, (lx, ly)) in [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .into_iter()
            .enumerate()
        {
            out[i] = [self.cx + c * lx - s * ly, self.cy + s * lx + c * ly];
        }
        out
    }
}

/// One annotated radar frame with its LiDAR scan and ego state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    pub frame_id: u64,
    pub timestamp_us: u64,
    pub ego_vx: f64,
    pub ego_vy: f64,
    pub ego_yaw_rate: f64,
    pub radar: RadarPointCloud,
    pub lidar: Vec<[f64; 3]>,
    pub boxes: Vec<Box3D>,
}

/// Active spatial range, per dataset profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeSpec {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
}

impl RangeSpec {
    pub fn vod() -> Self {
        RangeSpec { x: [0.0, 51.2], y: [-25.6, 25.6], z: [-3.0, 2.0] }
    }

    pub fn truckscenes() -> Self {
        RangeSpec { x: [-75.0, 75.0], y: [-75.0, 75.0], z: [-2.5, 4.5] }
    }

    pub fn toy() -> Self {
        RangeSpec { x: [0.0, 20.0], y: [-10.0, 10.0], z: [-2.0, 2.0] }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p[0] >= self.x[0]
            && p[0] <= self.x[1]
            && p[1] >= self.y[0]
            && p[1] <= self.y[1]
            && p[2] >= self.z[0]
            && p[2] <= self.z[1]
    }
}

/// Normalization intervals for the two feature channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureRanges {
    pub doppler: [f64; 2],
    pub rcs: [f64; 2],
}

impl Default for FeatureRanges {
    fn default() -> Self {
        FeatureRanges { doppler: [-30.0, 30.0], rcs: [-40.0, 20.0] }
    }
}

/// Planar rigid transform taking one sweep's coordinates into the reference
/// frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2 {
    pub tx: f64,
    pub ty: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn identity() -> Self {
        Pose2 { tx: 0.0, ty: 0.0, yaw: 0.0 }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.tx + c * p[0] - s * p[1],
            self.ty + s * p[0] + c * p[1],
            p[2],
        ]
    }
}

/// Aggregation output; `truncated` flags that fewer sweeps were available
/// than requested.
#[derive(Debug, Clone)]
pub struct AggregatedSweeps {
    pub cloud: RadarPointCloud,
    pub truncated: bool,
}

/// Union of the latest `k` sweeps, each mapped into the last frame's
/// coordinate system. Compensated Doppler values carry over unchanged.
/// `frames` is ordered oldest to newest; `poses[i]` maps `frames[i]` into
/// the newest frame.
pub fn aggregate_sweeps(frames: &[Frame], k: usize, poses: &[Pose2]) -> Result<AggregatedSweeps> {
    if k == 0 {
        return Err(Error::invalid("aggregate_sweeps requires k >= 1"));
    }
    if frames.is_empty() {
        return Err(Error::invalid("aggregate_sweeps requires at least one frame"));
    }
    if poses.len() != frames.len() {
        return Err(Error::invalid(format!(
            "got {} poses for {} frames",
            poses.len(),
            frames.len()
        )));
    }
    let truncated = k > frames.len();
    let take = k.min(frames.len());
    let start = frames.len() - take;
    let mut points = Vec::new();
    for (frame, pose) in frames[start..].iter().zip(&poses[start..]) {
        for p in frame.radar.valid_points() {
            let pos = pose.apply(p.pos());
            points.push(RadarPoint {
                x: pos[0],
                y: pos[1],
                z: pos[2],
                doppler: p.doppler,
                rcs: p.rcs,
            });
        }
    }
    Ok(AggregatedSweeps { cloud: RadarPointCloud::from_points(points), truncated })
}

/// Ego-motion compensation: add back the ego velocity's radial component so
/// the stored value is the reflector's true radial velocity
/// (positive = receding).
pub fn compensate_doppler(raw_doppler: f64, point_pos: [f64; 3], ego_velocity: [f64; 2]) -> Result<f64> {
    let norm = (point_pos[0] * point_pos[0]
        + point_pos[1] * point_pos[1]
        + point_pos[2] * point_pos[2])
        .sqrt();
    if norm < 1e-6 {
        return Err(Error::invalid("point at sensor origin: ray undefined"));
    }
    let radial = (ego_velocity[0] * point_pos[0] + ego_velocity[1] * point_pos[1]) / norm;
    Ok(raw_doppler + radial)
}

fn norm_channel(v: f64, range: [f64; 2]) -> f64 {
    2.0 * (v - range[0]) / (range[1] - range[0]) - 1.0
}

fn denorm_channel(v: f64, range: [f64; 2]) -> f64 {
    range[0] + (v + 1.0) * (range[1] - range[0]) / 2.0
}

fn check_ranges(spec: &RangeSpec, feat: &FeatureRanges) -> Result<()> {
    for (name, r) in [
        ("x", spec.x),
        ("y", spec.y),
        ("z", spec.z),
        ("doppler", feat.doppler),
        ("rcs", feat.rcs),
    ] {
        if r[1] <= r[0] {
            return Err(Error::invalid(format!("degenerate {name} interval [{}, {}]", r[0], r[1])));
        }
    }
    Ok(())
}

/// Affine map of every channel onto [-1, 1]. Padding slots stay zeroed.
pub fn normalize(pc: &RadarPointCloud, spec: &RangeSpec, feat: &FeatureRanges) -> Result<RadarPointCloud> {
    check_ranges(spec, feat)?;
    let points = pc
        .points
        .iter()
        .zip(&pc.mask)
        .map(|(p, m)| {
            if !m {
                return RadarPoint::default();
            }
            RadarPoint {
                x: norm_channel(p.x, spec.x),
                y: norm_channel(p.y, spec.y),
                z: norm_channel(p.z, spec.z),
                doppler: norm_channel(p.doppler, feat.doppler),
                rcs: norm_channel(p.rcs, feat.rcs),
            }
        })
        .collect();
    Ok(RadarPointCloud { points, mask: pc.mask.clone() })
}

/// Inverse of [`normalize`].
pub fn denormalize(pc: &RadarPointCloud, spec: &RangeSpec, feat: &FeatureRanges) -> Result<RadarPointCloud> {
    check_ranges(spec, feat)?;
    let points = pc
        .points
        .iter()
        .zip(&pc.mask)
        .map(|(p, m)| {
            if !m {
                return RadarPoint::default();
            }
            RadarPoint {
                x: denorm_channel(p.x, spec.x),
                y: denorm_channel(p.y, spec.y),
                z: denorm_channel(p.z, spec.z),
                doppler: denorm_channel(p.doppler, feat.doppler),
                rcs: denorm_channel(p.rcs, feat.rcs),
            }
        })
        .collect();
    Ok(RadarPointCloud { points, mask: pc.mask.clone() })
}

/// Pad with masked zero slots or take a seeded uniform random subset so the
/// result has exactly `target_n` slots. Valid points are preserved verbatim
/// and keep their relative order.
pub fn pad_or_downsample(pc: &RadarPointCloud, target_n: usize, seed: u64) -> RadarPointCloud {
    let valid: Vec<RadarPoint> = pc.valid_points().cloned().collect();
    if valid.len() > target_n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, valid.len(), target_n).into_vec();
        idx.sort_unstable();
        let points: Vec<RadarPoint> = idx.into_iter().map(|i| valid[i]).collect();
        RadarPointCloud::from_points(points)
    } else {
        let mut points = valid;
        let mut mask = vec![true; points.len()];
        points.resize(target_n, RadarPoint::default());
        mask.resize(target_n, false);
        RadarPointCloud { points, mask }
    }
}

/// Partition valid points into (foreground, background) by box membership.
pub fn split_fg_bg(pc: &RadarPointCloud, boxes: &[Box3D]) -> (RadarPointCloud, RadarPointCloud) {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for p in pc.valid_points() {
        if boxes.iter().any(|b| b.contains(p.pos())) {
            fg.push(*p);
        } else {
            bg.push(*p);
        }
    }
    (
        RadarPointCloud::from_points(fg),
        RadarPointCloud::from_points(bg),
    )
}

/// Box velocity from a track of centers: central differences in the
/// interior, one-sided differences at the ends. A single observation yields
/// (0, 0) with `flagged = true`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackVelocities {
    pub velocities: Vec<[f64; 2]>,
    pub flagged: bool,
}

pub fn derive_box_velocity(centers: &[[f64; 2]], timestamps_us: &[u64]) -> Result<TrackVelocities> {
    if centers.len() != timestamps_us.len() {
        return Err(Error::invalid("centers and timestamps length mismatch"));
    }
    if centers.is_empty() {
        return Err(Error::invalid("empty track"));
    }
    if centers.len() == 1 {
        return Ok(TrackVelocities { velocities: vec![[0.0, 0.0]], flagged: true });
    }
    let t: Vec<f64> = timestamps_us.iter().map(|us| *us as f64 * 1e-6).collect();
    let n = centers.len();
    let mut velocities = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = if i == 0 {
            (0, 1)
        } else if i == n - 1 {
            (n - 2, n - 1)
        } else {
            (i - 1, i + 1)
        };
        let dt = t[b] - t[a];
        if dt <= 0.0 {
            return Err(Error::invalid("timestamps not strictly increasing"));
        }
        velocities.push([
            (centers[b][0] - centers[a][0]) / dt,
            (centers[b][1] - centers[a][1]) / dt,
        ]);
    }
    Ok(TrackVelocities { velocities, flagged: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensate_static_point_ahead() {
        // static world point: raw doppler is -|v_ego| (approaching),
        // compensation restores 0.
        let v = compensate_doppler(-5.0, [10.0, 0.0, 0.0], [5.0, 0.0]).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn compensate_at_rest_is_identity() {
        let v = compensate_doppler(-3.25, [4.0, 2.0, 0.5], [0.0, 0.0]).unwrap();
        assert_eq!(v, -3.25);
    }

    #[test]
    fn compensate_orthogonal_ray_unchanged() {
        let v = compensate_doppler(1.5, [0.0, 10.0, 0.0], [5.0, 0.0]).unwrap();
        assert_eq!(v, 1.5);
    }

    #[test]
    fn compensate_origin_point_errors() {
        assert!(compensate_doppler(0.0, [0.0, 0.0, 0.0], [1.0, 0.0]).is_err());
    }

    #[test]
    fn compensate_inverse_under_flipped_ego() {
        let pos = [7.0, -3.0, 1.0];
        let ego = [4.5, 1.25];
        let comp = compensate_doppler(-2.0, pos, ego).unwrap();
        let back = compensate_doppler(comp, pos, [-ego[0], -ego[1]]).unwrap();
        assert!((back - -2.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_maps_endpoints() {
        let spec = RangeSpec::vod();
        let feat = FeatureRanges::default();
        let pc = RadarPointCloud::from_points(vec![
            RadarPoint { x: 51.2, y: 25.6, z: 2.0, doppler: 30.0, rcs: 20.0 },
            RadarPoint { x: 25.6, y: 0.0, z: -0.5, doppler: 0.0, rcs: -10.0 },
        ]);
        let n = normalize(&pc, &spec, &feat).unwrap();
        let p0 = n.points[0];
        assert_eq!([p0.x, p0.y, p0.z, p0.doppler, p0.rcs], [1.0; 5]);
        let p1 = n.points[1];
        for v in [p1.x, p1.y, p1.z, p1.doppler, p1.rcs] {
            assert!(v.abs() < 1e-12, "midpoint should map to 0, got {v}");
        }
    }

    #[test]
    fn degenerate_interval_errors() {
        let mut spec = RangeSpec::toy();
        spec.x = [5.0, 5.0];
        let pc = RadarPointCloud::from_points(vec![]);
        assert!(normalize(&pc, &spec, &FeatureRanges::default()).is_err());
    }

    #[test]
    fn pad_and_downsample_shapes() {
        let pts: Vec<RadarPoint> = (0..3)
            .map(|i| RadarPoint { x: i as f64, ..Default::default() })
            .collect();
        let pc = RadarPointCloud::from_points(pts);
        let padded = pad_or_downsample(&pc, 5, 1);
        assert_eq!(padded.len(), 5);
        assert_eq!(padded.valid_count(), 3);
        let same = pad_or_downsample(&pc, 3, 1);
        assert_eq!(same, pc);
    }

    #[test]
    fn downsample_is_seed_deterministic() {
        let pts: Vec<RadarPoint> = (0..100)
            .map(|i| RadarPoint { x: i as f64, ..Default::default() })
            .collect();
        let pc = RadarPointCloud::from_points(pts);
        let a = pad_or_downsample(&pc, 50, 42);
        let b = pad_or_downsample(&pc, 50, 42);
        assert_eq!(a, b);
        assert_eq!(a.valid_count(), 50);
    }

    #[test]
    fn split_partitions_exactly() {
        let b = Box3D {
            cx: 5.0, cy: 0.0, cz: 0.0,
            l: 4.0, w: 2.0, h: 2.0,
            yaw: 0.0, vx: 0.0, vy: 0.0, class_id: 1,
        };
        let pc = RadarPointCloud::from_points(vec![
            RadarPoint { x: 5.0, y: 0.0, z: 0.0, ..Default::default() },
            RadarPoint { x: 5.0 + 2.0 + 0.01, y: 0.0, z: 0.0, ..Default::default() },
            RadarPoint { x: -3.0, y: 4.0, z: 0.0, ..Default::default() },
        ]);
        let (fg, bg) = split_fg_bg(&pc, &[b]);
        assert_eq!(fg.len(), 1);
        assert_eq!(bg.len(), 2);
        assert_eq!(fg.len() + bg.len(), pc.valid_count());
    }

    #[test]
    fn no_boxes_all_background() {
        let pc = RadarPointCloud::from_points(vec![RadarPoint::default(); 4]);
        let (fg, bg) = split_fg_bg(&pc, &[]);
        assert!(fg.is_empty());
        assert_eq!(bg.len(), 4);
    }

    #[test]
    fn aggregate_identity_on_single_sweep() {
        let f = synth::synth_scene(3, &synth::SynthProfile::toy());
        let out = aggregate_sweeps(std::slice::from_ref(&f), 1, &[Pose2::identity()]).unwrap();
        assert!(!out.truncated);
        assert_eq!(out.cloud.valid_count(), f.radar.valid_count());
    }

    #[test]
    fn aggregate_stationary_doubles_points() {
        let f = synth::synth_scene(3, &synth::SynthProfile::toy());
        let frames = vec![f.clone(), f.clone()];
        let poses = vec![Pose2::identity(), Pose2::identity()];
        let out = aggregate_sweeps(&frames, 2, &poses).unwrap();
        assert_eq!(out.cloud.valid_count(), 2 * f.radar.valid_count());
        // identical transforms leave coordinates unchanged
        assert_eq!(out.cloud.points[0], f.radar.compact().points[0]);
    }

    #[test]
    fn aggregate_shifts_older_sweep() {
        // ego advanced 1 m in +x between sweeps: older sweep's points move
        // -1 m in x in the new frame.
        let mut f0 = Frame::default();
        f0.radar = RadarPointCloud::from_points(vec![RadarPoint { x: 10.0, ..Default::default() }]);
        let mut f1 = Frame::default();
        f1.frame_id = 1;
        f1.timestamp_us = 100_000;
        let poses = vec![Pose2 { tx: -1.0, ty: 0.0, yaw: 0.0 }, Pose2::identity()];
        let out = aggregate_sweeps(&[f0, f1], 2, &poses).unwrap();
        assert!((out.cloud.points[0].x - 9.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_flags_truncation() {
        let f = synth::synth_scene(5, &synth::SynthProfile::toy());
        let out = aggregate_sweeps(std::slice::from_ref(&f), 4, &[Pose2::identity()]).unwrap();
        assert!(out.truncated);
    }

    #[test]
    fn velocity_central_difference() {
        let centers = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let ts = [0, 100_000, 200_000];
        let v = derive_box_velocity(&centers, &ts).unwrap();
        assert!((v.velocities[1][0] - 10.0).abs() < 1e-9);
        assert!(!v.flagged);
    }

    #[test]
    fn velocity_stationary_track() {
        let centers = [[3.0, 4.0], [3.0, 4.0], [3.0, 4.0]];
        let ts = [0, 100_000, 200_000];
        let v = derive_box_velocity(&centers, &ts).unwrap();
        for vel in v.velocities {
            assert_eq!(vel, [0.0, 0.0]);
        }
    }

    #[test]
    fn velocity_two_frame_forward_difference() {
        let centers = [[0.0, 0.0], [0.5, -0.5]];
        let ts = [0, 100_000];
        let v = derive_box_velocity(&centers, &ts).unwrap();
        assert!((v.velocities[0][0] - 5.0).abs() < 1e-9);
        assert!((v.velocities[0][1] + 5.0).abs() < 1e-9);
        assert_eq!(v.velocities[0], v.velocities[1]);
    }

    #[test]
    fn velocity_single_observation_flagged() {
        let v = derive_box_velocity(&[[1.0, 2.0]], &[0]).unwrap();
        assert_eq!(v.velocities, vec![[0.0, 0.0]]);
        assert!(v.flagged);
    }

    #[test]
    fn yaw_wrapping() {
        let pi = std::f64::consts::PI;
        assert!((Box3D::wrap_yaw(pi) - pi).abs() < 1e-12);
        assert!((Box3D::wrap_yaw(-pi) - pi).abs() < 1e-12);
        assert!((Box3D::wrap_yaw(3.0 * pi) - pi).abs() < 1e-12);
        assert!((Box3D::wrap_yaw(0.5) - 0.5).abs() < 1e-12);
    }
}
