//! Condition encoders for the denoiser: an object-layout encoder over 3D
//! bounding boxes and a pillarized LiDAR encoder. Each produces a global
//! embedding plus a token sequence for cross-attention.

use std::f64::consts::PI;

use rand::seq::index::sample as index_sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::{Box3D, RangeSpec};
use crate::num::{
    attention_init, embedding_init, embedding_lookup, mlp, mlp_init, AttentionInit, Ctx, Params,
    Tensor, Tx,
};

// ---------------------------------------------------------------------------
// Layout encoder

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutConfig {
    /// Fixed set size, including the global object at index 0.
    pub n: usize,
    /// Number of semantic classes C; ids 1..=C. 0 is the global object,
    /// C+1 is padding.
    pub n_classes: u32,
    pub size_max: f64,
    pub v_max: f64,
    /// Token width.
    pub width: usize,
    pub heads: usize,
    pub fusion_layers: usize,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            n: 16,
            n_classes: 3,
            size_max: 25.0,
            v_max: 30.0,
            width: 128,
            heads: 4,
            fusion_layers: 2,
        }
    }
}

/// One layout element: a normalized 9-vector and a class id in [0, C+1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutObject {
    pub b: [f64; 9],
    pub c: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutSet {
    pub objects: Vec<LayoutObject>,
}

/// Map a box to [0,1]^9: center affinely per axis over `spec`, sizes over
/// (0, size_max], yaw over (-pi, pi], velocities over [-v_max, v_max].
pub fn normalize_box(b: &Box3D, spec: &RangeSpec, cfg: &LayoutConfig) -> Result<[f64; 9]> {
    let unit = |v: f64, lo: f64, hi: f64| (v - lo) / (hi - lo);
    if b.cx < spec.x[0] || b.cx > spec.x[1]
        || b.cy < spec.y[0] || b.cy > spec.y[1]
        || b.cz < spec.z[0] || b.cz > spec.z[1]
    {
        return Err(Error::invalid(format!(
            "box center ({}, {}, {}) outside range spec",
            b.cx, b.cy, b.cz
        )));
    }
    Ok([
        unit(b.cx, spec.x[0], spec.x[1]),
        unit(b.cy, spec.y[0], spec.y[1]),
        unit(b.cz, spec.z[0], spec.z[1]),
        b.l / cfg.size_max,
        b.w / cfg.size_max,
        b.h / cfg.size_max,
        (b.yaw + PI) / (2.0 * PI),
        unit(b.vx, -cfg.v_max, cfg.v_max),
        unit(b.vy, -cfg.v_max, cfg.v_max),
    ])
}

pub fn denormalize_box(b: &[f64; 9], class_id: u32, spec: &RangeSpec, cfg: &LayoutConfig) -> Box3D {
    let affine = |u: f64, lo: f64, hi: f64| lo + u * (hi - lo);
    Box3D {
        cx: affine(b[0], spec.x[0], spec.x[1]),
        cy: affine(b[1], spec.y[0], spec.y[1]),
        cz: affine(b[2], spec.z[0], spec.z[1]),
        l: b[3] * cfg.size_max,
        w: b[4] * cfg.size_max,
        h: b[5] * cfg.size_max,
        yaw: b[6] * 2.0 * PI - PI,
        vx: affine(b[7], -cfg.v_max, cfg.v_max),
        vy: affine(b[8], -cfg.v_max, cfg.v_max),
        class_id,
    }
}

fn global_object() -> LayoutObject {
    // The full-range box: centered, spanning the whole normalized extent.
    LayoutObject { b: [0.5, 0.5, 0.5, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5], c: 0 }
}

/// Assemble the fixed-size layout set: global object, the frame's boxes,
/// then padding up to `cfg.n` elements. Frames with more than n-1 boxes are
/// reduced to a seeded random subset, reported in the returned warnings.
pub fn build_layout_set(
    boxes: &[Box3D],
    spec: &RangeSpec,
    cfg: &LayoutConfig,
    seed: u64,
) -> Result<(LayoutSet, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut chosen: Vec<&Box3D> = boxes.iter().collect();
    if chosen.len() > cfg.n - 1 {
        warnings.push(format!(
            "frame has {} boxes, layout set holds {}; using a random subset",
            boxes.len(),
            cfg.n - 1
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        chosen.shuffle(&mut rng);
        chosen.truncate(cfg.n - 1);
    }
    let mut objects = vec![global_object()];
    for b in chosen {
        objects.push(LayoutObject { b: normalize_box(b, spec, cfg)?, c: b.class_id });
    }
    let padding = LayoutObject { b: [0.0; 9], c: cfg.n_classes + 1 };
    objects.resize(cfg.n, padding);
    Ok((LayoutSet { objects }, warnings))
}

pub fn layout_encoder_init<R: Rng>(params: &mut Params, rng: &mut R, prefix: &str, cfg: &LayoutConfig) {
    let w = cfg.width;
    mlp_init(params, rng, &format!("{prefix}.box"), &[9, w, w]);
    // ids 0..=C+1 -> C+2 rows
    embedding_init(params, rng, &format!("{prefix}.cls"), cfg.n_classes as usize + 2, w);
    for l in 0..cfg.fusion_layers {
        attention_init(
            params,
            rng,
            &format!("{prefix}.fuse{l}"),
            &AttentionInit { width: w, kv_width: w, heads: cfg.heads },
        );
        mlp_init(params, rng, &format!("{prefix}.ff{l}"), &[w, w, w]);
    }
}

/// Differentiable layout encoding: returns (global 1xw, tokens nxw). Box and
/// class embeddings are summed per object, then fused with self-attention;
/// token 0 carries the global scene embedding. No positional encodings, so
/// the map is equivariant to permutations of the non-global objects.
pub fn encode_layout_tx(ctx: &Ctx, prefix: &str, set: &LayoutSet, cfg: &LayoutConfig) -> (Tx, Tx) {
    let n = set.objects.len();
    let mut raw = Vec::with_capacity(n * 9);
    let mut ids = Vec::with_capacity(n);
    for o in &set.objects {
        raw.extend_from_slice(&o.b);
        ids.push(o.c as usize);
    }
    let x = ctx.constant(&Tensor::new(vec![n, 9], raw));
    let box_emb = mlp(ctx, &format!("{prefix}.box"), 2, &x);
    let cls_emb = embedding_lookup(ctx, &format!("{prefix}.cls"), &ids);
    let mut h = box_emb.add(&cls_emb);
    for l in 0..cfg.fusion_layers {
        let a = crate::num::attention(ctx, &format!("{prefix}.fuse{l}"), &h, &h, cfg.heads);
        h = h.add(&a);
        let f = mlp(ctx, &format!("{prefix}.ff{l}"), 2, &h);
        h = h.add(&f);
    }
    let global = h.slice_rows(0, 1);
    (global, h)
}

/// Frozen-parameter convenience wrapper returning plain tensors.
pub fn encode_layout(params: &Params, prefix: &str, set: &LayoutSet, cfg: &LayoutConfig) -> (Tensor, Tensor) {
    let ctx = Ctx::new(params);
    let (g, t) = encode_layout_tx(&ctx, prefix, set, cfg);
    (g.value(), t.value())
}

// ---------------------------------------------------------------------------
// Pillar encoder

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PillarConfig {
    /// BEV cell size in meters.
    pub g: f64,
    /// Max points kept per pillar.
    pub p_max: usize,
    /// Max pillar tokens.
    pub k_max: usize,
    pub width: usize,
}

impl Default for PillarConfig {
    fn default() -> Self {
        PillarConfig { g: 0.8, p_max: 16, k_max: 256, width: 128 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pillar {
    pub ix: usize,
    pub iy: usize,
    /// BEV cell center in world coordinates.
    pub center: [f64; 2],
    /// Per-point features (x, y, z, dx, dy) with offsets to the cell center.
    pub points: Vec<[f64; 5]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PillarGrid {
    pub nx: usize,
    pub ny: usize,
    pub g: f64,
    /// Nonempty cells only, in row-major (iy, ix) order.
    pub pillars: Vec<Pillar>,
}

/// Bucket LiDAR points into BEV pillars over `spec`. Cells use half-open
/// intervals [lower, upper); points outside the spec (any axis) are dropped.
/// Cells over `p_max` points keep a seeded random subset.
pub fn pillarize(lidar: &[[f64; 3]], spec: &RangeSpec, cfg: &PillarConfig, seed: u64) -> PillarGrid {
    assert!(cfg.g > 0.0, "pillar cell size must be positive, got {}", cfg.g);
    let nx = ((spec.x[1] - spec.x[0]) / cfg.g).ceil() as usize;
    let ny = ((spec.y[1] - spec.y[0]) / cfg.g).ceil() as usize;
    let mut cells: std::collections::BTreeMap<(usize, usize), Vec<[f64; 3]>> =
        std::collections::BTreeMap::new();
    for p in lidar {
        if p[0] < spec.x[0] || p[0] >= spec.x[1]
            || p[1] < spec.y[0] || p[1] >= spec.y[1]
            || p[2] < spec.z[0] || p[2] >= spec.z[1]
        {
            continue;
        }
        let ix = (((p[0] - spec.x[0]) / cfg.g) as usize).min(nx - 1);
        let iy = (((p[1] - spec.y[0]) / cfg.g) as usize).min(ny - 1);
        cells.entry((iy, ix)).or_default().push(*p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pillars = Vec::with_capacity(cells.len());
    for ((iy, ix), mut pts) in cells {
        if pts.len() > cfg.p_max {
            let mut keep: Vec<usize> = index_sample(&mut rng, pts.len(), cfg.p_max).into_vec();
            keep.sort_unstable();
            pts = keep.into_iter().map(|i| pts[i]).collect();
        }
        let center = [
            spec.x[0] + (ix as f64 + 0.5) * cfg.g,
            spec.y[0] + (iy as f64 + 0.5) * cfg.g,
        ];
        let points = pts
            .iter()
            .map(|p| [p[0], p[1], p[2], p[0] - center[0], p[1] - center[1]])
            .collect();
        pillars.push(Pillar { ix, iy, center, points });
    }
    PillarGrid { nx, ny, g: cfg.g, pillars }
}

pub fn pillar_encoder_init<R: Rng>(params: &mut Params, rng: &mut R, prefix: &str, cfg: &PillarConfig) {
    mlp_init(params, rng, &format!("{prefix}.point"), &[5, cfg.width, cfg.width]);
}

/// 2D sinusoidal positional encoding of a BEV position, `w` dims split
/// evenly between the x and y coordinates.
fn posenc_2d(x: f64, y: f64, w: usize) -> Vec<f64> {
    assert!(w % 4 == 0, "positional encoding width {w} must be divisible by 4");
    let half = w / 2;
    let quarter = w / 4;
    let mut out = vec![0.0; w];
    for i in 0..quarter {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
        out[2 * i] = (x * freq).sin();
        out[2 * i + 1] = (x * freq).cos();
        out[half + 2 * i] = (y * freq).sin();
        out[half + 2 * i + 1] = (y * freq).cos();
    }
    out
}

/// Greedy farthest-point selection over pillar centers; deterministic (the
/// seed pillar is the one farthest from the sensor origin).
fn farthest_pillar_subset(pillars: &[Pillar], k: usize) -> Vec<usize> {
    if pillars.len() <= k {
        return (0..pillars.len()).collect();
    }
    let d2 = |a: [f64; 2], b: [f64; 2]| {
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        dx * dx + dy * dy
    };
    let first = (0..pillars.len())
        .max_by(|&a, &b| {
            d2(pillars[a].center, [0.0, 0.0])
                .total_cmp(&d2(pillars[b].center, [0.0, 0.0]))
        })
        .unwrap();
    let mut chosen = vec![first];
    let mut min_d2: Vec<f64> = pillars.iter().map(|p| d2(p.center, pillars[first].center)).collect();
    while chosen.len() < k {
        let next = (0..pillars.len())
            .max_by(|&a, &b| min_d2[a].total_cmp(&min_d2[b]))
            .unwrap();
        chosen.push(next);
        for (i, p) in pillars.iter().enumerate() {
            min_d2[i] = min_d2[i].min(d2(p.center, pillars[next].center));
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Differentiable pillar encoding: per-pillar shared MLP + max-pool, token
/// cap by farthest-in-BEV selection, sinusoidal positional encodings added,
/// global embedding = mean of tokens. Returns None for an empty grid (the
/// sampler then takes the unconditional path).
pub fn encode_pillars_tx(
    ctx: &Ctx,
    prefix: &str,
    grid: &PillarGrid,
    cfg: &PillarConfig,
) -> Option<(Tx, Tx)> {
    if grid.pillars.is_empty() {
        return None;
    }
    let keep = farthest_pillar_subset(&grid.pillars, cfg.k_max);
    let mut tokens: Option<Tx> = None;
    let mut pe = Vec::with_capacity(keep.len() * cfg.width);
    for &i in &keep {
        let pillar = &grid.pillars[i];
        let mut raw = Vec::with_capacity(pillar.points.len() * 5);
        for f in &pillar.points {
            raw.extend_from_slice(f);
        }
        let x = ctx.constant(&Tensor::new(vec![pillar.points.len(), 5], raw));
        let feat = mlp(ctx, &format!("{prefix}.point"), 2, &x).max_over_rows();
        tokens = Some(match tokens {
            Some(acc) => acc.concat_rows(&feat),
            None => feat,
        });
        pe.extend(posenc_2d(pillar.center[0], pillar.center[1], cfg.width));
    }
    let tokens = tokens
        .unwrap()
        .add(&ctx.constant(&Tensor::new(vec![keep.len(), cfg.width], pe)));
    let global = tokens.mean_rows();
    Some((global, tokens))
}

/// Frozen-parameter wrapper; empty grids yield zero tensors (0 tokens).
pub fn encode_pillars(
    params: &Params,
    prefix: &str,
    grid: &PillarGrid,
    cfg: &PillarConfig,
) -> (Tensor, Tensor) {
    let ctx = Ctx::new(params);
    match encode_pillars_tx(&ctx, prefix, grid, cfg) {
        Some((g, t)) => (g.value(), t.value()),
        None => (Tensor::zeros(&[1, cfg.width]), Tensor::zeros(&[0, cfg.width])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::RangeSpec;

    fn toy_box(cx: f64, cy: f64, class_id: u32) -> Box3D {
        Box3D { cx, cy, cz: 0.0, l: 4.0, w: 2.0, h: 1.5, yaw: 0.3, vx: 1.0, vy: -2.0, class_id }
    }

    #[test]
    fn normalize_center_box_gives_midpoints() {
        let spec = RangeSpec::toy();
        let cfg = LayoutConfig::default();
        let b = Box3D {
            cx: 10.0, cy: 0.0, cz: 0.0,
            l: 4.0, w: 2.0, h: 1.5,
            yaw: 0.0, vx: 0.0, vy: 0.0,
            class_id: 1,
        };
        let v = normalize_box(&b, &spec, &cfg).unwrap();
        for idx in [0, 1, 2, 6, 7, 8] {
            assert!((v[idx] - 0.5).abs() < 1e-12, "component {idx} = {}", v[idx]);
        }
        let pi_yaw = Box3D { yaw: PI, ..b };
        let v = normalize_box(&pi_yaw, &spec, &cfg).unwrap();
        assert!((v[6] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_round_trip() {
        let spec = RangeSpec::toy();
        let cfg = LayoutConfig::default();
        let b = toy_box(7.3, -4.1, 2);
        let v = normalize_box(&b, &spec, &cfg).unwrap();
        let back = denormalize_box(&v, b.class_id, &spec, &cfg);
        assert!((back.cx - b.cx).abs() < 1e-12);
        assert!((back.yaw - b.yaw).abs() < 1e-12);
        assert!((back.vy - b.vy).abs() < 1e-12);
        assert!((back.l - b.l).abs() < 1e-12);
    }

    #[test]
    fn normalize_out_of_range_errors() {
        let spec = RangeSpec::toy();
        let cfg = LayoutConfig::default();
        assert!(normalize_box(&toy_box(999.0, 0.0, 1), &spec, &cfg).is_err());
    }

    #[test]
    fn layout_set_zero_boxes() {
        let spec = RangeSpec::toy();
        let cfg = LayoutConfig { n: 8, n_classes: 3, ..Default::default() };
        let (set, warnings) = build_layout_set(&[], &spec, &cfg, 0).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(set.objects.len(), 8);
        assert_eq!(set.objects[0].c, 0);
        assert_eq!(set.objects[0].b[3..6], [1.0, 1.0, 1.0]);
        for o in &set.objects[1..] {
            assert_eq!(o.c, 4);
            assert_eq!(o.b, [0.0; 9]);
        }
    }

    #[test]
    fn layout_set_one_box_and_overflow() {
        let spec = RangeSpec::toy();
        let cfg = LayoutConfig { n: 4, ..Default::default() };
        let (set, w) = build_layout_set(&[toy_box(5.0, 1.0, 1)], &spec, &cfg, 0).unwrap();
        assert!(w.is_empty());
        assert_eq!(set.objects[1].c, 1);
        assert_eq!(set.objects[2].c, cfg.n_classes + 1);

        let many: Vec<Box3D> = (0..6).map(|i| toy_box(2.0 + i as f64, 0.0, 1)).collect();
        let (set, w) = build_layout_set(&many, &spec, &cfg, 0).unwrap();
        assert_eq!(set.objects.len(), 4);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn layout_encoding_swap_equivariance() {
        let spec = RangeSpec::toy();
        let cfg = LayoutConfig { n: 6, width: 16, heads: 2, ..Default::default() };
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        layout_encoder_init(&mut params, &mut rng, "lay", &cfg);
        let boxes = [toy_box(3.0, 1.0, 1), toy_box(9.0, -2.0, 2), toy_box(14.0, 4.0, 3)];
        let (set, _) = build_layout_set(&boxes, &spec, &cfg, 0).unwrap();
        let mut swapped = set.clone();
        swapped.objects.swap(1, 3);
        let (g1, t1) = encode_layout(&params, "lay", &set, &cfg);
        let (g2, t2) = encode_layout(&params, "lay", &swapped, &cfg);
        for k in 0..cfg.width {
            assert!((g1.data[k] - g2.data[k]).abs() < 1e-10);
            // token rows 1 and 3 swap, row 2 unchanged
            assert!((t1.data[cfg.width + k] - t2.data[3 * cfg.width + k]).abs() < 1e-10);
            assert!((t1.data[2 * cfg.width + k] - t2.data[2 * cfg.width + k]).abs() < 1e-10);
        }
    }

    #[test]
    fn layout_all_padding_finite() {
        let spec = RangeSpec::toy();
        let cfg = LayoutConfig { n: 5, width: 16, heads: 2, ..Default::default() };
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        layout_encoder_init(&mut params, &mut rng, "lay", &cfg);
        let (set, _) = build_layout_set(&[], &spec, &cfg, 0).unwrap();
        let (g, t) = encode_layout(&params, "lay", &set, &cfg);
        assert!(g.is_finite() && t.is_finite());
    }

    #[test]
    fn pillarize_single_point_and_boundary() {
        let spec = RangeSpec::toy();
        let cfg = PillarConfig { g: 1.0, ..Default::default() };
        let grid = pillarize(&[[5.3, 2.7, 0.0]], &spec, &cfg, 0);
        assert_eq!(grid.pillars.len(), 1);
        assert_eq!(grid.pillars[0].points.len(), 1);
        // cell boundary: x = 6.0 belongs to the upper cell via [lower, upper)
        let grid = pillarize(&[[6.0, 0.0, 0.0]], &spec, &cfg, 0);
        assert_eq!(grid.pillars[0].ix, 6);
        // half-cell center offsets
        let p = &grid.pillars[0].points[0];
        assert!((p[3] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn pillarize_drops_out_of_range_and_caps() {
        let spec = RangeSpec::toy();
        let cfg = PillarConfig { g: 1.0, p_max: 4, ..Default::default() };
        let mut pts = vec![[-1.0, 0.0, 0.0], [5.0, 0.0, 99.0]]; // both out of range
        for i in 0..10 {
            pts.push([5.1 + 0.01 * i as f64, 0.5, 0.0]);
        }
        let grid = pillarize(&pts, &spec, &cfg, 0);
        assert_eq!(grid.pillars.len(), 1);
        assert_eq!(grid.pillars[0].points.len(), 4);
        let total: usize = grid.pillars.iter().map(|p| p.points.len()).sum();
        assert!(total <= pts.len());
    }

    #[test]
    fn pillar_features_idempotent_under_duplication() {
        let spec = RangeSpec::toy();
        let cfg = PillarConfig { g: 1.0, p_max: 32, width: 16, ..Default::default() };
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        pillar_encoder_init(&mut params, &mut rng, "pil", &cfg);
        let pts = vec![[5.2, 0.3, 0.1], [5.7, 0.8, -0.2]];
        let doubled: Vec<[f64; 3]> = pts.iter().chain(pts.iter()).copied().collect();
        let g1 = pillarize(&pts, &spec, &cfg, 0);
        let g2 = pillarize(&doubled, &spec, &cfg, 0);
        let (gl1, t1) = encode_pillars(&params, "pil", &g1, &cfg);
        let (gl2, t2) = encode_pillars(&params, "pil", &g2, &cfg);
        assert_eq!(t1.shape, t2.shape);
        for (a, b) in t1.data.iter().zip(&t2.data) {
            assert!((a - b).abs() < 1e-12, "max-pool should ignore duplicates");
        }
        for (a, b) in gl1.data.iter().zip(&gl2.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_scene_gives_zero_tokens() {
        let spec = RangeSpec::toy();
        let cfg = PillarConfig { width: 16, ..Default::default() };
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        pillar_encoder_init(&mut params, &mut rng, "pil", &cfg);
        let grid = pillarize(&[], &spec, &cfg, 0);
        let (g, t) = encode_pillars(&params, "pil", &grid, &cfg);
        assert_eq!(t.shape, vec![0, 16]);
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_count_capped_at_k_max() {
        let spec = RangeSpec::toy();
        let cfg = PillarConfig { g: 1.0, k_max: 5, width: 16, ..Default::default() };
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        pillar_encoder_init(&mut params, &mut rng, "pil", &cfg);
        let pts: Vec<[f64; 3]> = (0..19)
            .map(|i| [0.5 + i as f64, (i % 10) as f64 - 5.0 + 0.5, 0.0])
            .collect();
        let grid = pillarize(&pts, &spec, &cfg, 0);
        assert!(grid.pillars.len() > 5);
        let (_, t) = encode_pillars(&params, "pil", &grid, &cfg);
        assert_eq!(t.rows(), 5);
    }
}
