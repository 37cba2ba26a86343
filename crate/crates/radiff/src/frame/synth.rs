//! Procedural scene generator: places boxes with class-dependent motion and
//! reflectivity, emits surface radar returns whose noiseless Doppler is the
//! exact radial projection of the box velocity, and builds a background of
//! walls and ground (LiDAR) with correlated radar clutter. Serves as both
//! training data and verification oracle.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::{Box3D, FeatureRanges, Frame, RadarPoint, RadarPointCloud, RangeSpec};

#[derive(Debug, Clone)]
pub struct ClassSpec {
    pub id: u32,
    pub name: &'static str,
    /// Mean (l, w, h) in meters.
    pub size: [f64; 3],
    /// Relative size jitter (uniform +-).
    pub size_jitter: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
    pub stationary_prob: f64,
    pub rcs_mean: f64,
    pub rcs_std: f64,
}

#[derive(Debug, Clone)]
pub struct SynthProfile {
    pub name: &'static str,
    pub range: RangeSpec,
    pub feat: FeatureRanges,
    pub classes: Vec<ClassSpec>,
    pub max_boxes: usize,
    /// Poisson mean of radar returns per box.
    pub points_per_box: f64,
    /// Std of the additive Doppler measurement noise (m/s).
    pub doppler_noise: f64,
    pub wall_count: usize,
    /// LiDAR sampling step along walls and the ground grid (m).
    pub lidar_step: f64,
    /// Radar clutter returns scattered over the ground.
    pub ground_clutter: usize,
    /// Radar clutter returns per wall.
    pub wall_clutter: usize,
    pub ego_speed_max: f64,
}

fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            id: 1,
            name: "car",
            size: [4.0, 1.8, 1.5],
            size_jitter: 0.1,
            speed_mean: 8.0,
            speed_std: 3.0,
            stationary_prob: 0.3,
            rcs_mean: 10.0,
            rcs_std: 4.0,
        },
        ClassSpec {
            id: 2,
            name: "cyclist",
            size: [1.8, 0.6, 1.7],
            size_jitter: 0.1,
            speed_mean: 4.0,
            speed_std: 1.5,
            stationary_prob: 0.1,
            rcs_mean: 0.0,
            rcs_std: 4.0,
        },
        ClassSpec {
            id: 3,
            name: "pedestrian",
            size: [0.6, 0.6, 1.7],
            size_jitter: 0.15,
            speed_mean: 1.3,
            speed_std: 0.4,
            stationary_prob: 0.2,
            rcs_mean: -8.0,
            rcs_std: 4.0,
        },
    ]
}

impl SynthProfile {
    pub fn toy() -> Self {
        SynthProfile {
            name: "toy",
            range: RangeSpec::toy(),
            feat: FeatureRanges::default(),
            classes: default_classes(),
            max_boxes: 4,
            points_per_box: 24.0,
            doppler_noise: 0.25,
            wall_count: 2,
            lidar_step: 0.5,
            ground_clutter: 24,
            wall_clutter: 32,
            ego_speed_max: 5.0,
        }
    }

    pub fn vod() -> Self {
        SynthProfile {
            name: "vod",
            range: RangeSpec::vod(),
            feat: FeatureRanges::default(),
            classes: default_classes(),
            max_boxes: 8,
            points_per_box: 32.0,
            doppler_noise: 0.25,
            wall_count: 4,
            lidar_step: 0.8,
            ground_clutter: 80,
            wall_clutter: 48,
            ego_speed_max: 10.0,
        }
    }

    pub fn truckscenes() -> Self {
        SynthProfile {
            name: "truckscenes",
            range: RangeSpec::truckscenes(),
            feat: FeatureRanges::default(),
            classes: default_classes(),
            max_boxes: 8,
            points_per_box: 32.0,
            doppler_noise: 0.25,
            wall_count: 6,
            lidar_step: 1.5,
            ground_clutter: 120,
            wall_clutter: 64,
            ego_speed_max: 20.0,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "vod" => Some(Self::vod()),
            "truckscenes" => Some(Self::truckscenes()),
            _ => None,
        }
    }

    pub fn class(&self, id: u32) -> &ClassSpec {
        self.classes
            .iter()
            .find(|c| c.id == id)
            .expect("unknown class id")
    }
}

fn bev_radius(b: &Box3D) -> f64 {
    0.5 * (b.l * b.l + b.w * b.w).sqrt()
}

/// Uniform sample on the surface of the box, in world coordinates.
/// Faces are chosen proportionally to their area.
pub fn sample_surface_point<R: Rng>(rng: &mut R, b: &Box3D) -> [f64; 3] {
    let (hl, hw, hh) = (b.l / 2.0, b.w / 2.0, b.h / 2.0);
    let areas = [
        b.w * b.h, // +x
        b.w * b.h, // -x
        b.l * b.h, // +y
        b.l * b.h, // -y
        b.l * b.w, // +z
        b.l * b.w, // -z
    ];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 5;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let u = rng.gen_range(-1.0..1.0);
    let v = rng.gen_range(-1.0..1.0);
    // pull just inside the face so box membership survives the rotation
    // round trip
    let (hl, hw, hh) = (hl - 1e-6, hw - 1e-6, hh - 1e-6);
    let local = match face {
        0 => [hl, u * hw, v * hh],
        1 => [-hl, u * hw, v * hh],
        2 => [u * hl, hw, v * hh],
        3 => [u * hl, -hw, v * hh],
        4 => [u * hl, v * hw, hh],
        _ => [u * hl, v * hw, -hh],
    };
    b.to_world(local)
}

/// Noiseless Doppler of a point on an object moving with planar velocity
/// (vx, vy): the radial projection onto the sensor->point ray.
pub fn projected_doppler(pos: [f64; 3], vx: f64, vy: f64) -> f64 {
    let norm = (pos[0] * pos[0] + pos[1] * pos[1] + pos[2] * pos[2]).sqrt();
    if norm < 1e-9 {
        return 0.0;
    }
    (vx * pos[0] + vy * pos[1]) / norm
}

/// Radar returns for one box: Poisson-distributed surface samples with
/// projected Doppler plus N(0, doppler_noise) and class-dependent RCS.
pub fn sample_box_points<R: Rng>(rng: &mut R, b: &Box3D, profile: &SynthProfile) -> Vec<RadarPoint> {
    let n = Poisson::new(profile.points_per_box).unwrap().sample(rng) as usize;
    sample_box_points_n(rng, b, profile, n.max(1))
}

/// Same as [`sample_box_points`] with an explicit count.
pub fn sample_box_points_n<R: Rng>(
    rng: &mut R,
    b: &Box3D,
    profile: &SynthProfile,
    count: usize,
) -> Vec<RadarPoint> {
    let class = profile.class(b.class_id);
    let noise = Normal::new(0.0, profile.doppler_noise).unwrap();
    let rcs_dist = Normal::new(class.rcs_mean, class.rcs_std).unwrap();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let pos = sample_surface_point(rng, b);
        if !profile.range.contains(pos) {
            continue;
        }
        out.push(RadarPoint {
            x: pos[0],
            y: pos[1],
            z: pos[2],
            doppler: projected_doppler(pos, b.vx, b.vy) + noise.sample(rng),
            rcs: rcs_dist.sample(rng),
        });
    }
    out
}

fn sample_box<R: Rng>(rng: &mut R, profile: &SynthProfile) -> Box3D {
    let class = &profile.classes[rng.gen_range(0..profile.classes.len())];
    let j = |rng: &mut R, m: f64| m * (1.0 + class.size_jitter * rng.gen_range(-1.0..1.0));
    let l = j(rng, class.size[0]);
    let w = j(rng, class.size[1]);
    let h = (j(rng, class.size[2])).min(profile.range.z[1] - profile.range.z[0]);
    let margin = 0.5 * (l * l + w * w).sqrt();
    let r = &profile.range;
    let cx = rng.gen_range(r.x[0] + margin..r.x[1] - margin);
    let cy = rng.gen_range(r.y[0] + margin..r.y[1] - margin);
    let cz = r.z[0] + h / 2.0 + 0.05;
    let yaw = Box3D::wrap_yaw(rng.gen_range(-PI..PI));
    let speed = if rng.gen_bool(class.stationary_prob) {
        0.0
    } else {
        Normal::new(class.speed_mean, class.speed_std)
            .unwrap()
            .sample(rng)
            .abs()
    };
    Box3D {
        cx,
        cy,
        cz,
        l,
        w,
        h,
        yaw,
        vx: speed * yaw.cos(),
        vy: speed * yaw.sin(),
        class_id: class.id,
    }
}

struct Wall {
    start: [f64; 2],
    dir: [f64; 2],
    len: f64,
    height: f64,
}

fn sample_wall<R: Rng>(rng: &mut R, range: &RangeSpec) -> Wall {
    let x0 = rng.gen_range(range.x[0]..range.x[1]);
    let y0 = rng.gen_range(range.y[0]..range.y[1]);
    let angle = rng.gen_range(-PI..PI);
    let len = rng.gen_range(0.25..0.6) * (range.x[1] - range.x[0]);
    Wall {
        start: [x0, y0],
        dir: [angle.cos(), angle.sin()],
        len,
        height: rng.gen_range(1.5_f64..3.0).min(range.z[1] - range.z[0]),
    }
}

/// Generate one fully-synthetic frame. Deterministic per (seed, profile).
pub fn synth_scene(seed: u64, profile: &SynthProfile) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &profile.range;

    // boxes, rejecting conservative BEV-circle overlap against accepted ones
    let want = rng.gen_range(0..=profile.max_boxes);
    let mut boxes: Vec<Box3D> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < want && attempts < 200 {
        attempts += 1;
        let cand = sample_box(&mut rng, profile);
        let clear = boxes.iter().all(|b| {
            let dx = b.cx - cand.cx;
            let dy = b.cy - cand.cy;
            (dx * dx + dy * dy).sqrt() > bev_radius(b) + bev_radius(&cand) + 0.1
        });
        if clear {
            boxes.push(cand);
        }
    }

    let mut radar = Vec::new();
    for b in &boxes {
        radar.extend(sample_box_points(&mut rng, b, profile));
    }

    // background structure: walls plus ground plane
    let mut lidar = Vec::new();
    let ground_z = r.z[0] + 0.05;
    let walls: Vec<Wall> = (0..profile.wall_count)
        .map(|_| sample_wall(&mut rng, r))
        .collect();
    for wall in &walls {
        let steps = (wall.len / profile.lidar_step).ceil() as usize;
        let zsteps = (wall.height / profile.lidar_step).ceil() as usize;
        for i in 0..=steps {
            let t = i as f64 * profile.lidar_step;
            let x = wall.start[0] + wall.dir[0] * t;
            let y = wall.start[1] + wall.dir[1] * t;
            for zi in 0..=zsteps {
                let z = r.z[0] + 0.1 + zi as f64 * profile.lidar_step;
                if r.contains([x, y, z]) {
                    lidar.push([x, y, z]);
                }
            }
        }
    }
    // sparse ground grid
    let gstep = profile.lidar_step * 4.0;
    let mut gx = r.x[0] + gstep / 2.0;
    while gx < r.x[1] {
        let mut gy = r.y[0] + gstep / 2.0;
        while gy < r.y[1] {
            lidar.push([gx, gy, ground_z]);
            gy += gstep;
        }
        gx += gstep;
    }

    // radar clutter: concentrated along the walls, plus scattered ground
    // returns; background is static so Doppler stays near zero.
    let clutter_noise = Normal::new(0.0, 0.1).unwrap();
    let wall_rcs = Normal::new(5.0, 3.0).unwrap();
    let ground_rcs = Normal::new(-5.0, 5.0).unwrap();
    for wall in &walls {
        for _ in 0..profile.wall_clutter {
            let t = rng.gen_range(0.0..wall.len);
            let jx = rng.gen_range(-0.3..0.3);
            let jy = rng.gen_range(-0.3..0.3);
            let pos = [
                wall.start[0] + wall.dir[0] * t + jx,
                wall.start[1] + wall.dir[1] * t + jy,
                rng.gen_range(r.z[0] + 0.1..r.z[0] + 0.1 + wall.height.max(0.2)),
            ];
            if !r.contains(pos) {
                continue;
            }
            radar.push(RadarPoint {
                x: pos[0],
                y: pos[1],
                z: pos[2],
                doppler: clutter_noise.sample(&mut rng),
                rcs: wall_rcs.sample(&mut rng),
            });
        }
    }
    for _ in 0..profile.ground_clutter {
        let pos = [
            rng.gen_range(r.x[0]..r.x[1]),
            rng.gen_range(r.y[0]..r.y[1]),
            rng.gen_range(r.z[0]..r.z[0] + 0.5),
        ];
        radar.push(RadarPoint {
            x: pos[0],
            y: pos[1],
            z: pos[2],
            doppler: clutter_noise.sample(&mut rng),
            rcs: ground_rcs.sample(&mut rng),
        });
    }

    Frame {
        frame_id: seed,
        timestamp_us: seed.wrapping_mul(100_000),
        ego_vx: rng.gen_range(0.0..profile.ego_speed_max),
        ego_vy: 0.0,
        ego_yaw_rate: 0.0,
        radar: RadarPointCloud::from_points(radar),
        lidar,
        boxes,
    }
}
