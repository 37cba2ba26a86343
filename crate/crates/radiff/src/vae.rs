//! Density-preserving point VAE: set downsampling with collapse bookkeeping
//! on the encoder side, predicted per-point upsampling on the decoder side,
//! and the combined reconstruction / density / cardinality / KL objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::frame::RadarPoint;
pub use crate::metrics::chamfer;
use crate::num::{
    linear, linear_init, mlp, mlp_init, AdamConfig, Ctx, LrSchedule, Optimizer, Params, Tensor,
    Tx,
};

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    /// Fixed padded input size N.
    pub n_points: usize,
    /// Downsampling factor per encoder stage.
    pub factors: Vec<usize>,
    /// Embedding width.
    pub d: usize,
    /// Latent channels per token.
    pub d_z: usize,
    pub lambda_reg: f64,
    pub lambda_den: f64,
    pub lambda_card: f64,
    pub lambda_d: f64,
    pub lambda_c: f64,
    pub lambda_f: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            n_points: 128,
            factors: vec![4, 4],
            d: 64,
            d_z: 4,
            lambda_reg: 1e-5,
            lambda_den: 1e-4,
            lambda_card: 5e-7,
            lambda_d: 50.0,
            lambda_c: 0.1,
            lambda_f: 0.05,
        }
    }
}

impl VaeConfig {
    pub fn stages(&self) -> usize {
        self.factors.len()
    }

    pub fn latent_tokens(&self) -> usize {
        self.factors.iter().fold(self.n_points, |n, f| n / f)
    }

    /// Upsampling cap for the stage with downsampling factor f.
    pub fn u_max(&self, stage: usize) -> usize {
        2 * self.factors[stage]
    }
}

// ---------------------------------------------------------------------------
// Farthest point sampling

/// Partition bookkeeping of one downsampling step: which input points were
/// kept, and per kept point the set C(p) of discarded points collapsed into
/// it (each discarded point goes to its nearest kept point).
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedAssignment {
    pub kept: Vec<usize>,
    pub collapsed: Vec<Vec<usize>>,
}

fn d2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling from an explicit start index.
pub fn fps_downsample_from(
    points: &[[f64; 3]],
    count: usize,
    start: usize,
) -> Result<CollapsedAssignment> {
    let n = points.len();
    if count > n {
        return Err(Error::invalid(format!("fps: requested {count} of {n} points")));
    }
    if count == 0 || n == 0 {
        return Err(Error::invalid("fps needs at least one point kept"));
    }
    let mut kept = vec![start];
    let mut min_d2: Vec<f64> = points.iter().map(|&p| d2(p, points[start])).collect();
    while kept.len() < count {
        let next = (0..n).max_by(|&a, &b| min_d2[a].total_cmp(&min_d2[b])).unwrap();
        kept.push(next);
        for i in 0..n {
            min_d2[i] = min_d2[i].min(d2(points[i], points[next]));
        }
    }
    let mut collapsed = vec![Vec::new(); count];
    for i in 0..n {
        if kept.contains(&i) {
            continue;
        }
        let owner = (0..count)
            .min_by(|&a, &b| d2(points[i], points[kept[a]]).total_cmp(&d2(points[i], points[kept[b]])))
            .unwrap();
        collapsed[owner].push(i);
    }
    Ok(CollapsedAssignment { kept, collapsed })
}

/// Seeded FPS: the start index is drawn from the seed.
pub fn fps_downsample(points: &[[f64; 3]], count: usize, seed: u64) -> Result<CollapsedAssignment> {
    if points.is_empty() {
        return Err(Error::invalid("fps on empty point set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..points.len());
    fps_downsample_from(points, count, start)
}

// ---------------------------------------------------------------------------
// Parameter initialization

pub fn vae_init<R: Rng>(params: &mut Params, rng: &mut R, prefix: &str, cfg: &VaeConfig) {
    let d = cfg.d;
    mlp_init(params, rng, &format!("{prefix}.infeat"), &[5, d, d]);
    for s in 0..cfg.stages() {
        mlp_init(params, rng, &format!("{prefix}.s{s}.den"), &[1, d, d]);
        mlp_init(params, rng, &format!("{prefix}.s{s}.loc"), &[3, d, d]);
        linear_init(params, rng, &format!("{prefix}.s{s}.locscore"), d, 1);
        params.insert(format!("{prefix}.s{s}.locnull"), Tensor::randn(rng, &[1, d], 0.02));
        linear_init(params, rng, &format!("{prefix}.s{s}.ancq"), d, d);
        linear_init(params, rng, &format!("{prefix}.s{s}.anck"), d, d);
        linear_init(params, rng, &format!("{prefix}.s{s}.ancv"), d, d);
        linear_init(params, rng, &format!("{prefix}.s{s}.anckpos"), 3, d);
        linear_init(params, rng, &format!("{prefix}.s{s}.ancvpos"), 3, d);
        linear_init(params, rng, &format!("{prefix}.s{s}.anco"), d, d);
        mlp_init(params, rng, &format!("{prefix}.s{s}.fuse"), &[3 * d, d, d]);
    }
    mlp_init(params, rng, &format!("{prefix}.head"), &[d, d, 2 * cfg.d_z]);
    // decoder
    mlp_init(params, rng, &format!("{prefix}.dec.point"), &[cfg.d_z, d, d]);
    mlp_init(params, rng, &format!("{prefix}.dec.coords"), &[d, d, 3]);
    mlp_init(params, rng, &format!("{prefix}.dec.feat"), &[cfg.d_z, d, d]);
    for s in 0..cfg.stages() {
        // decoder stage s undoes encoder stage (S-1-s)
        let u = cfg.u_max(cfg.stages() - 1 - s);
        linear_init(params, rng, &format!("{prefix}.dec.s{s}.k"), d, 1);
        linear_init(params, rng, &format!("{prefix}.dec.s{s}.off"), d, 3 * u);
        mlp_init(params, rng, &format!("{prefix}.dec.s{s}.cf"), &[d + 3, d, d]);
    }
    mlp_init(params, rng, &format!("{prefix}.dec.seg"), &[d, d, 2]);
}

// ---------------------------------------------------------------------------
// Encoder building blocks

/// Density embedding of collapse counts u, scaled by the stage cap.
pub fn density_embedding(ctx: &Ctx, prefix: &str, counts: &[usize], u_max: usize) -> Tx {
    let col: Vec<f64> = counts.iter().map(|&u| u as f64 / u_max as f64).collect();
    let x = ctx.constant(&Tensor::new(vec![counts.len(), 1], col));
    mlp(ctx, prefix, 2, &x)
}

/// Permutation-invariant embedding of each kept point's collapse set from
/// member offsets alone. `offsets` is one row per collapsed point (relative
/// to its kept point), `seg` its kept-point index; kept points with empty
/// sets receive the learned null token.
pub fn local_position_embedding(
    ctx: &Ctx,
    prefix: &str,
    offsets: &Tensor,
    seg: &[usize],
    n_kept: usize,
) -> Tx {
    let null = ctx.p(&format!("{prefix}.locnull"));
    let mut empty_sel = vec![1.0; n_kept];
    for &s in seg {
        empty_sel[s] = 0.0;
    }
    let null_rows = ctx
        .constant(&Tensor::new(vec![n_kept, 1], empty_sel))
        .matmul(&null);
    if offsets.rows() == 0 {
        return null_rows;
    }
    let h = mlp(ctx, &format!("{prefix}.loc"), 2, &ctx.constant(offsets));
    let scores = linear(ctx, &format!("{prefix}.locscore"), &h);
    let w = scores.segment_softmax(seg, n_kept);
    let ones = ctx.constant(&Tensor::full(&[1, h.cols()], 1.0));
    let pooled = h.mul(&w.matmul(&ones)).segment_sum(seg, n_kept);
    pooled.add(&null_rows)
}

/// Attention aggregation of C(p) ∪ {p} features into each kept point, with
/// relative-position encodings added to keys and values. `member_rows` are
/// indices into `feats`, `member_relpos` the member-to-kept offsets, `seg`
/// the kept-point index per member; every kept point must appear (it is its
/// own member with zero offset).
#[allow(clippy::too_many_arguments)]
pub fn ancestor_embedding(
    ctx: &Ctx,
    prefix: &str,
    feats: &Tx,
    kept: &[usize],
    member_rows: &[usize],
    member_relpos: &Tensor,
    seg: &[usize],
) -> Tx {
    let d = feats.cols();
    let q = linear(ctx, &format!("{prefix}.ancq"), &feats.gather_rows(kept));
    let member_feats = feats.gather_rows(member_rows);
    let relpos = ctx.constant(member_relpos);
    let k = linear(ctx, &format!("{prefix}.anck"), &member_feats)
        .add(&linear(ctx, &format!("{prefix}.anckpos"), &relpos));
    let v = linear(ctx, &format!("{prefix}.ancv"), &member_feats)
        .add(&linear(ctx, &format!("{prefix}.ancvpos"), &relpos));
    let q_per_member = q.gather_rows(seg);
    let ones_d1 = ctx.constant(&Tensor::full(&[d, 1], 1.0));
    let scores = q_per_member.mul(&k).matmul(&ones_d1).scale(1.0 / (d as f64).sqrt());
    let w = scores.segment_softmax(seg, kept.len());
    let ones_1d = ctx.constant(&Tensor::full(&[1, d], 1.0));
    let pooled = v.mul(&w.matmul(&ones_1d)).segment_sum(seg, kept.len());
    linear(ctx, &format!("{prefix}.anco"), &pooled)
}

// ---------------------------------------------------------------------------
// Encode

/// Per-stage bookkeeping kept for the density/cardinality losses and the
/// intermediate reconstruction targets.
#[derive(Debug, Clone)]
pub struct EncodeStageRecord {
    pub input_positions: Vec<[f64; 3]>,
    pub kept_positions: Vec<[f64; 3]>,
    /// |C(p)| per kept point.
    pub counts: Vec<usize>,
    /// Mean offset norm of C(p); 0 for empty sets.
    pub mean_dists: Vec<f64>,
}

pub struct EncodeResult {
    pub mu: Tx,
    pub logvar: Tx,
    pub z: Tx,
    pub stages: Vec<EncodeStageRecord>,
}

/// Encode a set of (normalized) radar points into M latent tokens. Only the
/// provided points participate; padding must be stripped by the caller.
pub fn encode(
    ctx: &Ctx,
    prefix: &str,
    points: &[RadarPoint],
    cfg: &VaeConfig,
    seed: u64,
) -> Result<EncodeResult> {
    if points.is_empty() {
        return Err(Error::invalid("encode on empty point cloud"));
    }
    let mut pos: Vec<[f64; 3]> = points.iter().map(|p| p.pos()).collect();
    let raw: Vec<f64> = points
        .iter()
        .flat_map(|p| [p.x, p.y, p.z, p.doppler, p.rcs])
        .collect();
    let mut feats = mlp(
        ctx,
        &format!("{prefix}.infeat"),
        2,
        &ctx.constant(&Tensor::new(vec![points.len(), 5], raw)),
    );
    let mut stages = Vec::with_capacity(cfg.stages());
    for s in 0..cfg.stages() {
        let n = pos.len();
        let count = n / cfg.factors[s];
        if count == 0 {
            return Err(Error::invalid(format!(
                "encoder stage {s}: {n} points cannot downsample by {}",
                cfg.factors[s]
            )));
        }
        let assign = fps_downsample(&pos, count, seed.wrapping_add(s as u64))?;
        // flattened collapse-set rows
        let mut seg = Vec::new();
        let mut off_rows = Vec::new();
        let mut member_rows = Vec::new();
        let mut member_seg = Vec::new();
        let mut member_rel = Vec::new();
        let mut counts = Vec::with_capacity(count);
        let mut mean_dists = Vec::with_capacity(count);
        for (i, set) in assign.collapsed.iter().enumerate() {
            let kp = pos[assign.kept[i]];
            let mut dist_sum = 0.0;
            for &j in set {
                let rel = [pos[j][0] - kp[0], pos[j][1] - kp[1], pos[j][2] - kp[2]];
                off_rows.extend_from_slice(&rel);
                seg.push(i);
                member_rows.push(j);
                member_seg.push(i);
                member_rel.extend_from_slice(&rel);
                dist_sum += d2(pos[j], kp).sqrt();
            }
            // the kept point is a member of its own attention set
            member_rows.push(assign.kept[i]);
            member_seg.push(i);
            member_rel.extend_from_slice(&[0.0, 0.0, 0.0]);
            counts.push(set.len());
            mean_dists.push(if set.is_empty() { 0.0 } else { dist_sum / set.len() as f64 });
        }
        let sp = format!("{prefix}.s{s}");
        let den = density_embedding(ctx, &format!("{sp}.den"), &counts, cfg.u_max(s));
        let loc = local_position_embedding(
            ctx,
            &sp,
            &Tensor::new(vec![seg.len(), 3], off_rows),
            &seg,
            count,
        );
        let anc = ancestor_embedding(
            ctx,
            &sp,
            &feats,
            &assign.kept,
            &member_rows,
            &Tensor::new(vec![member_seg.len(), 3], member_rel),
            &member_seg,
        );
        feats = mlp(ctx, &format!("{sp}.fuse"), 2, &den.concat_cols(&loc).concat_cols(&anc));
        if !feats.value().is_finite() {
            return Err(Error::NonFinite(format!("encoder stage {s}")));
        }
        let kept_positions: Vec<[f64; 3]> = assign.kept.iter().map(|&i| pos[i]).collect();
        stages.push(EncodeStageRecord {
            input_positions: pos.clone(),
            kept_positions: kept_positions.clone(),
            counts,
            mean_dists,
        });
        pos = kept_positions;
    }
    let head = mlp(ctx, &format!("{prefix}.head"), 2, &feats);
    let mu = head.slice_cols(0, cfg.d_z);
    let logvar = head.slice_cols(cfg.d_z, 2 * cfg.d_z);
    let m = mu.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let eps: Vec<f64> = (0..m * cfg.d_z).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z = reparameterize_tx(ctx, &mu, &logvar, &Tensor::new(vec![m, cfg.d_z], eps));
    Ok(EncodeResult { mu, logvar, z, stages })
}

pub fn reparameterize_tx(ctx: &Ctx, mu: &Tx, logvar: &Tx, eps: &Tensor) -> Tx {
    mu.add(&logvar.scale(0.5).exp().mul(&ctx.constant(eps)))
}

/// z = mu + sigma ⊙ eps on plain tensors.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Tensor {
    let data = mu
        .data
        .iter()
        .zip(&logvar.data)
        .zip(&eps.data)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Tensor::new(mu.shape.clone(), data)
}

// ---------------------------------------------------------------------------
// Decode

/// Point-wise network with a max-pooled global context producing latent
/// coordinates, plus an MLP producing the initial decoder features.
pub fn latent_to_structured(ctx: &Ctx, prefix: &str, z: &Tx, _cfg: &VaeConfig) -> (Tx, Tx) {
    let h = mlp(ctx, &format!("{prefix}.dec.point"), 2, z);
    let global = h.max_over_rows();
    let coords = mlp(ctx, &format!("{prefix}.dec.coords"), 2, &h.add_row(&global));
    let feats = mlp(ctx, &format!("{prefix}.dec.feat"), 2, z);
    (coords, feats)
}

#[derive(Clone)]
pub struct DecodeStageRecord {
    pub parent_positions: Vec<[f64; 3]>,
    /// |C̃(p̃)| per parent: children beyond the first.
    pub counts: Vec<usize>,
    /// Mean offset norm of the non-self children; 0 when k = 1.
    pub mean_dists: Vec<f64>,
    /// Continuous upsampling factor (n x 1), pre-rounding — the
    /// differentiable surrogate for the density count term.
    pub k_cont: Tx,
    /// Offsets of non-self children (rows align with `parent_of_nonself`).
    pub offsets_nonself: Option<Tx>,
    pub parent_of_nonself: Vec<usize>,
}

pub struct DecodeResult {
    pub coords: Tx,
    /// Two feature channels (doppler, rcs) squashed to [-1, 1].
    pub feats: Tx,
    /// Latent-level coordinates before any upsampling.
    pub structured_coords: Tx,
    pub stages: Vec<DecodeStageRecord>,
    /// Intermediate coordinate sets after each upsampling stage, the last
    /// being `coords` itself.
    pub stage_coords: Vec<Tx>,
}

/// Decode latent tokens into a point set: per stage each point predicts an
/// upsampling count k in [1, U_max] (rounded from a softplus scalar) and
/// emits k children at learned offset slots; a segmentation head recovers
/// the two feature channels.
pub fn decode(ctx: &Ctx, prefix: &str, z: &Tx, cfg: &VaeConfig) -> Result<DecodeResult> {
    let (mut coords, mut feats) = latent_to_structured(ctx, prefix, z, cfg);
    let structured_coords = coords.clone();
    let n_stages = cfg.stages();
    let mut stages = Vec::with_capacity(n_stages);
    let mut stage_coords = Vec::with_capacity(n_stages);
    for s in 0..n_stages {
        let u_max = cfg.u_max(n_stages - 1 - s);
        let sp = format!("{prefix}.dec.s{s}");
        let n = coords.rows();
        let k_cont = linear(ctx, &format!("{sp}.k"), &feats).softplus().add_const(1.0);
        let k: Vec<usize> = k_cont
            .value()
            .data
            .iter()
            .map(|&v| (v.round() as usize).clamp(1, u_max))
            .collect();
        let offs = linear(ctx, &format!("{sp}.off"), &feats);
        let mut new_coords: Option<Tx> = None;
        let mut new_feats: Option<Tx> = None;
        let mut nonself: Option<Tx> = None;
        let mut parent_of_nonself = Vec::new();
        for slot in 0..u_max {
            let parents: Vec<usize> = (0..n).filter(|&i| k[i] > slot).collect();
            if parents.is_empty() {
                continue;
            }
            let off_slot = offs.slice_cols(3 * slot, 3 * slot + 3).gather_rows(&parents);
            let child_coords = coords.gather_rows(&parents).add(&off_slot);
            let child_in = feats.gather_rows(&parents).concat_cols(&off_slot);
            let child_feats = mlp(ctx, &format!("{sp}.cf"), 2, &child_in);
            new_coords = Some(match new_coords {
                Some(acc) => acc.concat_rows(&child_coords),
                None => child_coords,
            });
            new_feats = Some(match new_feats {
                Some(acc) => acc.concat_rows(&child_feats),
                None => child_feats,
            });
            if slot > 0 {
                nonself = Some(match nonself {
                    Some(acc) => acc.concat_rows(&off_slot),
                    None => off_slot,
                });
                parent_of_nonself.extend_from_slice(&parents);
            }
        }
        let parent_positions: Vec<[f64; 3]> = {
            let c = coords.value();
            (0..n).map(|i| [c.data[3 * i], c.data[3 * i + 1], c.data[3 * i + 2]]).collect()
        };
        let mut mean_dists = vec![0.0; n];
        if let Some(ns) = &nonself {
            let v = ns.value();
            let mut sums = vec![0.0; n];
            for (row, &p) in parent_of_nonself.iter().enumerate() {
                let o = &v.data[3 * row..3 * row + 3];
                sums[p] += (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
            }
            for i in 0..n {
                if k[i] > 1 {
                    mean_dists[i] = sums[i] / (k[i] - 1) as f64;
                }
            }
        }
        stages.push(DecodeStageRecord {
            parent_positions,
            counts: k.iter().map(|&v| v - 1).collect(),
            mean_dists,
            k_cont,
            offsets_nonself: nonself,
            parent_of_nonself,
        });
        coords = new_coords.unwrap();
        feats = new_feats.unwrap();
        stage_coords.push(coords.clone());
        if !coords.value().is_finite() {
            return Err(Error::NonFinite(format!("decoder stage {s}")));
        }
    }
    let feats2 = mlp(ctx, &format!("{prefix}.dec.seg"), 2, &feats).tanh();
    Ok(DecodeResult { coords, feats: feats2, structured_coords, stages, stage_coords })
}

// ---------------------------------------------------------------------------
// Loss terms (pure reference forms)

/// Nearest-neighbor index of each `from` point within `to`.
fn nearest_indices(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<usize> {
    from.iter()
        .map(|&p| {
            (0..to.len())
                .min_by(|&a, &b| d2(p, to[a]).total_cmp(&d2(p, to[b])))
                .unwrap()
        })
        .collect()
}

/// Feature loss: each reconstructed point is assigned its nearest ground
/// truth point; mean over reconstructed points of the squared feature gap.
pub fn feature_loss(
    real_pos: &[[f64; 3]],
    real_feat: &[[f64; 2]],
    gen_pos: &[[f64; 3]],
    gen_feat: &[[f64; 2]],
) -> Result<f64> {
    if real_pos.is_empty() || gen_pos.is_empty() {
        return Err(Error::invalid("feature_loss on empty point set"));
    }
    let idx = nearest_indices(gen_pos, real_pos);
    let total: f64 = idx
        .iter()
        .zip(gen_feat)
        .map(|(&i, g)| {
            let r = real_feat[i];
            (r[0] - g[0]).powi(2) + (r[1] - g[1]).powi(2)
        })
        .sum();
    Ok(total / gen_pos.len() as f64)
}

/// Density loss over index-paired stage records: per stage the mean over
/// points of |count gap| + lambda_d * |mean-distance gap|, summed across
/// stages.
pub fn density_loss(
    enc: &[Vec<(usize, f64)>],
    dec: &[Vec<(usize, f64)>],
    lambda_d: f64,
) -> Result<f64> {
    if enc.len() != dec.len() {
        return Err(Error::invalid(format!(
            "density_loss stage mismatch: {} vs {}",
            enc.len(),
            dec.len()
        )));
    }
    let mut total = 0.0;
    for (e, g) in enc.iter().zip(dec) {
        if e.len() != g.len() {
            return Err(Error::invalid(format!(
                "density_loss point mismatch: {} vs {}",
                e.len(),
                g.len()
            )));
        }
        let stage: f64 = e
            .iter()
            .zip(g)
            .map(|(&(ue, de), &(ug, dg))| {
                (ue as f64 - ug as f64).abs() + lambda_d * (de - dg).abs()
            })
            .sum();
        total += stage / e.len() as f64;
    }
    Ok(total)
}

/// Sum over stages of the absolute point-count gap.
pub fn cardinality_loss(enc_counts: &[usize], dec_counts: &[usize]) -> f64 {
    enc_counts
        .iter()
        .zip(dec_counts)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum()
}

/// KL divergence to the standard normal, averaged over tokens:
/// (1/M) * 1/2 * sum(mu^2 + sigma^2 - 1 - log sigma^2).
pub fn kl_regularizer(mu: &Tensor, logvar: &Tensor) -> f64 {
    assert_eq!(mu.shape, logvar.shape, "kl shapes {:?} vs {:?}", mu.shape, logvar.shape);
    let m = mu.rows() as f64;
    let sum: f64 = mu
        .data
        .iter()
        .zip(&logvar.data)
        .map(|(u, lv)| u * u + lv.exp() - 1.0 - lv)
        .sum();
    0.5 * sum / m
}

// ---------------------------------------------------------------------------
// Differentiable assembled objective

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct VaeLossBreakdown {
    pub total: f64,
    pub cd: f64,
    pub cd_intermediate: f64,
    pub feature: f64,
    pub density: f64,
    pub cardinality: f64,
    pub kl: f64,
}

impl VaeLossBreakdown {
    /// The weighted recombination; equals `total` by construction.
    pub fn recombine(&self, cfg: &VaeConfig) -> f64 {
        self.cd
            + cfg.lambda_c * self.cd_intermediate
            + cfg.lambda_f * self.feature
            + cfg.lambda_den * self.density
            + cfg.lambda_card * self.cardinality
            + cfg.lambda_reg * self.kl
    }
}

/// Differentiable squared Chamfer between a variable point set and a fixed
/// target, with nearest assignments computed from current forward values.
pub fn chamfer_tx(ctx: &Ctx, pred: &Tx, target: &[[f64; 3]]) -> Tx {
    let pv = pred.value();
    let pred_pos: Vec<[f64; 3]> = (0..pred.rows())
        .map(|i| [pv.data[3 * i], pv.data[3 * i + 1], pv.data[3 * i + 2]])
        .collect();
    let fwd = nearest_indices(&pred_pos, target); // pred -> target
    let rev = nearest_indices(target, &pred_pos); // target -> pred
    let tgt_raw: Vec<f64> = target.iter().flat_map(|p| *p).collect();
    let tgt = ctx.constant(&Tensor::new(vec![target.len(), 3], tgt_raw.clone()));
    let tgt_fwd = ctx.constant(&Tensor::new(
        vec![fwd.len(), 3],
        fwd.iter().flat_map(|&i| target[i]).collect(),
    ));
    let a = pred.sub(&tgt_fwd).square().sum_all().scale(1.0 / pred.rows() as f64);
    let b = pred
        .gather_rows(&rev)
        .sub(&tgt)
        .square()
        .sum_all()
        .scale(1.0 / target.len() as f64);
    a.add(&b)
}

/// Build the full VAE objective for one cloud inside the caller's graph.
/// Returns the scalar loss node plus the per-term breakdown.
pub fn vae_loss_tx(
    ctx: &Ctx,
    prefix: &str,
    points: &[RadarPoint],
    cfg: &VaeConfig,
    seed: u64,
) -> Result<(Tx, VaeLossBreakdown)> {
    let enc = encode(ctx, prefix, points, cfg, seed)?;
    let dec = decode(ctx, prefix, &enc.z, cfg)?;
    let n_stages = cfg.stages();

    // final reconstruction CD against the input positions
    let input_pos: Vec<[f64; 3]> = points.iter().map(|p| p.pos()).collect();
    let cd = chamfer_tx(ctx, &dec.coords, &input_pos);

    // intermediate CDs: the latent-level structured coords and every decoder
    // stage but the last, each against the encoder stage of matching size
    let mut cd_int: Option<Tx> = None;
    let mut push_cd = |term: Tx| {
        cd_int = Some(match cd_int.take() {
            Some(acc) => acc.add(&term),
            None => term,
        });
    };
    push_cd(chamfer_tx(
        ctx,
        &dec.structured_coords,
        &enc.stages[n_stages - 1].kept_positions,
    ));
    for s in 0..n_stages.saturating_sub(1) {
        // decoder stage s output matches encoder stage (S-2-s) kept cloud
        push_cd(chamfer_tx(
            ctx,
            &dec.stage_coords[s],
            &enc.stages[n_stages - 2 - s].kept_positions,
        ));
    }
    let cd_int = cd_int.unwrap();

    // feature loss with nearest-ground-truth assignment
    let cv = dec.coords.value();
    let gen_pos: Vec<[f64; 3]> = (0..dec.coords.rows())
        .map(|i| [cv.data[3 * i], cv.data[3 * i + 1], cv.data[3 * i + 2]])
        .collect();
    let assign = nearest_indices(&gen_pos, &input_pos);
    let real_feat_rows: Vec<f64> = assign
        .iter()
        .flat_map(|&i| [points[i].doppler, points[i].rcs])
        .collect();
    let feat_target = ctx.constant(&Tensor::new(vec![assign.len(), 2], real_feat_rows));
    let feat = dec
        .feats
        .sub(&feat_target)
        .square()
        .sum_all()
        .scale(1.0 / gen_pos.len() as f64);

    // density loss: decoder stage s pairs with encoder stage (S-1-s); each
    // decoder parent is matched to its nearest encoder kept point. The count
    // term trains through the continuous pre-rounding factor.
    let mut den: Option<Tx> = None;
    let mut den_pure = 0.0;
    for s in 0..n_stages {
        let e = &enc.stages[n_stages - 1 - s];
        let dstage = &dec.stages[s];
        let pair = nearest_indices(&dstage.parent_positions, &e.kept_positions);
        let n = dstage.parent_positions.len();
        let target_counts: Vec<f64> = pair.iter().map(|&i| (e.counts[i] + 1) as f64).collect();
        let count_term = dstage
            .k_cont
            .sub(&ctx.constant(&Tensor::new(vec![n, 1], target_counts)))
            .abs()
            .mean_all();
        let target_dists: Vec<f64> = pair.iter().map(|&i| e.mean_dists[i]).collect();
        let dist_term = match &dstage.offsets_nonself {
            Some(offs) => {
                let norms = offs
                    .square()
                    .matmul(&ctx.constant(&Tensor::full(&[3, 1], 1.0)))
                    .add_const(1e-12)
                    .sqrt();
                let sums = norms.segment_sum(&dstage.parent_of_nonself, n);
                let inv: Vec<f64> = dstage
                    .counts
                    .iter()
                    .map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 })
                    .collect();
                sums.scale_rows(&inv)
                    .sub(&ctx.constant(&Tensor::new(vec![n, 1], target_dists.clone())))
                    .abs()
                    .mean_all()
            }
            None => ctx.constant(&Tensor::new(
                vec![1, 1],
                vec![target_dists.iter().map(|d| d.abs()).sum::<f64>() / n as f64],
            )),
        };
        let stage_term = count_term.add(&dist_term.scale(cfg.lambda_d));
        den_pure += stage_term.scalar_value();
        den = Some(match den {
            Some(acc) => acc.add(&stage_term),
            None => stage_term,
        });
    }
    let den = den.unwrap();

    // cardinality: integer counts, constant w.r.t. parameters
    let enc_counts: Vec<usize> = enc
        .stages
        .iter()
        .rev()
        .map(|st| st.input_positions.len())
        .collect();
    let dec_counts: Vec<usize> = dec.stage_coords.iter().map(|c| c.rows()).collect();
    let card = cardinality_loss(&enc_counts, &dec_counts);

    // KL to the standard normal
    let m = enc.mu.rows() as f64;
    let kl = enc
        .mu
        .square()
        .add(&enc.logvar.exp())
        .add_const(-1.0)
        .sub(&enc.logvar)
        .sum_all()
        .scale(0.5 / m);

    let total = cd
        .add(&cd_int.scale(cfg.lambda_c))
        .add(&feat.scale(cfg.lambda_f))
        .add(&den.scale(cfg.lambda_den))
        .add(&kl.scale(cfg.lambda_reg))
        .add_const(cfg.lambda_card * card);

    let breakdown = VaeLossBreakdown {
        total: total.scalar_value(),
        cd: cd.scalar_value(),
        cd_intermediate: cd_int.scalar_value(),
        feature: feat.scalar_value(),
        density: den_pure,
        cardinality: card,
        kl: kl.scalar_value(),
    };
    Ok((total, breakdown))
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig { epochs: 300, batch_size: 16, lr: 1e-3, step_size: 45, gamma: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct VaeTrainStats {
    /// Epoch-averaged total loss.
    pub loss_history: Vec<f64>,
    /// Epoch-averaged final-reconstruction CD.
    pub cd_history: Vec<f64>,
    /// Epoch-averaged feature-reconstruction loss.
    pub feature_history: Vec<f64>,
    pub diverged_at: Option<usize>,
}

/// Train the VAE with Adam under a step-decay schedule. Each dataset item
/// is a slice of valid (normalized) points. On a non-finite loss the
/// parameters roll back to the last clean epoch.
pub fn train_vae(
    params: &mut Params,
    prefix: &str,
    dataset: &[Vec<RadarPoint>],
    cfg: &VaeConfig,
    tcfg: &VaeTrainConfig,
    seed: u64,
) -> Result<VaeTrainStats> {
    if dataset.is_empty() {
        return Err(Error::invalid("train_vae needs a nonempty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = LrSchedule::StepDecay {
        base_lr: tcfg.lr,
        step_size: tcfg.step_size,
        gamma: tcfg.gamma,
    };
    let mut opt = Optimizer::new(AdamConfig::default());
    let mut loss_history = Vec::with_capacity(tcfg.epochs);
    let mut cd_history = Vec::with_capacity(tcfg.epochs);
    let mut feature_history = Vec::with_capacity(tcfg.epochs);
    let mut last_good = params.clone();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..tcfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let lr = schedule.value(epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_cd = 0.0;
        let mut epoch_feat = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let ctx = Ctx::new(params);
            let mut batch_loss: Option<Tx> = None;
            for &i in chunk {
                let item_seed = seed
                    .wrapping_mul(0x100000001b3)
                    .wrapping_add((epoch * dataset.len() + i) as u64);
                let (loss, bd) = vae_loss_tx(&ctx, prefix, &dataset[i], cfg, item_seed)?;
                epoch_cd += bd.cd;
                epoch_feat += bd.feature;
                batch_loss = Some(match batch_loss {
                    Some(acc) => acc.add(&loss),
                    None => loss,
                });
            }
            let batch_loss = batch_loss.unwrap().scale(1.0 / chunk.len() as f64);
            let loss_val = batch_loss.scalar_value();
            if !loss_val.is_finite() {
                *params = last_good;
                return Ok(VaeTrainStats {
                    loss_history,
                    cd_history,
                    feature_history,
                    diverged_at: Some(epoch),
                });
            }
            let grads = ctx.grads(&batch_loss)?;
            drop(ctx);
            opt.step(params, &grads, lr)?;
            epoch_loss += loss_val * chunk.len() as f64;
            seen += chunk.len();
        }
        loss_history.push(epoch_loss / seen as f64);
        cd_history.push(epoch_cd / seen as f64);
        feature_history.push(epoch_feat / seen as f64);
        last_good = params.clone();
    }
    Ok(VaeTrainStats { loss_history, cd_history, feature_history, diverged_at: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> VaeConfig {
        VaeConfig { n_points: 16, factors: vec![2, 2], d: 8, d_z: 2, ..Default::default() }
    }

    fn cloud(n: usize, seed: u64) -> Vec<RadarPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| RadarPoint {
                x: rng.gen_range(-1.0..1.0),
                y: rng.gen_range(-1.0..1.0),
                z: rng.gen_range(-1.0..1.0),
                doppler: rng.gen_range(-1.0..1.0),
                rcs: rng.gen_range(-1.0..1.0),
            })
            .collect()
    }

    #[test]
    fn fps_identity_when_count_equals_n() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let a = fps_downsample_from(&pts, 3, 1).unwrap();
        assert_eq!(a.kept.len(), 3);
        assert!(a.collapsed.iter().all(|c| c.is_empty()));
    }

    #[test]
    fn fps_collinear_greedy_trace() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let a = fps_downsample_from(&pts, 2, 0).unwrap();
        assert_eq!(a.kept, vec![0, 3]);
        // 1 collapses into 0, 2 into 3
        assert_eq!(a.collapsed[0], vec![1]);
        assert_eq!(a.collapsed[1], vec![2]);
    }

    #[test]
    fn fps_partition_property() {
        let pts: Vec<[f64; 3]> = cloud(40, 3).iter().map(|p| p.pos()).collect();
        for count in [1usize, 7, 20, 39] {
            let a = fps_downsample(&pts, count, 5).unwrap();
            let total: usize = a.collapsed.iter().map(|c| c.len()).sum();
            assert_eq!(total, 40 - count);
        }
        assert!(fps_downsample(&pts, 41, 0).is_err());
    }

    #[test]
    fn reparameterize_sigma_zero_limit() {
        let mu = Tensor::new(vec![1, 2], vec![0.3, -0.7]);
        let logvar = Tensor::full(&[1, 2], -1e9);
        let eps = Tensor::full(&[1, 2], 5.0);
        let z = reparameterize(&mu, &logvar, &eps);
        assert!((z.data[0] - 0.3).abs() < 1e-12);
        assert!((z.data[1] + 0.7).abs() < 1e-12);
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let cfg = tiny_cfg();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        vae_init(&mut params, &mut rng, "vae", &cfg);
        let pts = cloud(16, 1);
        let ctx = Ctx::new(&params);
        let enc = encode(&ctx, "vae", &pts, &cfg, 7).unwrap();
        assert_eq!(enc.mu.rows(), cfg.latent_tokens());
        assert_eq!(enc.mu.cols(), cfg.d_z);
        assert_eq!(enc.z.rows(), 4);
        let ctx2 = Ctx::new(&params);
        let enc2 = encode(&ctx2, "vae", &pts, &cfg, 7).unwrap();
        assert_eq!(enc.z.value().data, enc2.z.value().data);
    }

    #[test]
    fn local_embedding_permutation_and_translation_invariant() {
        let cfg = tiny_cfg();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        vae_init(&mut params, &mut rng, "vae", &cfg);
        let ctx = Ctx::new(&params);
        let offs = Tensor::new(vec![3, 3], vec![0.1, 0.0, 0.0, 0.0, 0.2, 0.0, -0.1, 0.0, 0.3]);
        let perm = Tensor::new(vec![3, 3], vec![0.0, 0.2, 0.0, -0.1, 0.0, 0.3, 0.1, 0.0, 0.0]);
        let a = local_position_embedding(&ctx, "vae.s0", &offs, &[0, 0, 0], 2).value();
        let b = local_position_embedding(&ctx, "vae.s0", &perm, &[0, 0, 0], 2).value();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
        // kept point 1 has an empty set: its row equals the null token
        let null = params.get("vae.s0.locnull");
        for k in 0..cfg.d {
            assert!((a.data[cfg.d + k] - null.data[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn ancestor_empty_set_is_value_transform_of_self() {
        let cfg = tiny_cfg();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        vae_init(&mut params, &mut rng, "vae", &cfg);
        let ctx = Ctx::new(&params);
        let feats = ctx.constant(&Tensor::randn(&mut rng, &[3, cfg.d], 1.0));
        // kept point 0 with only itself as member
        let rel = Tensor::zeros(&[1, 3]);
        let out = ancestor_embedding(&ctx, "vae.s0", &feats, &[0], &[0], &rel, &[0]).value();
        // expected: anco(ancv(f0) + ancvpos(0)) since softmax over one member is 1
        let v = linear(&ctx, "vae.s0.ancv", &feats.gather_rows(&[0]))
            .add(&linear(&ctx, "vae.s0.ancvpos", &ctx.constant(&rel)));
        let expect = linear(&ctx, "vae.s0.anco", &v).value();
        for (a, b) in out.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn latent_to_structured_equivariant() {
        let cfg = tiny_cfg();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        vae_init(&mut params, &mut rng, "vae", &cfg);
        let ctx = Ctx::new(&params);
        let z = Tensor::randn(&mut rng, &[4, cfg.d_z], 1.0);
        let mut zp = z.clone();
        for k in 0..cfg.d_z {
            zp.data.swap(k, 3 * cfg.d_z + k);
        }
        let (c1, f1) = latent_to_structured(&ctx, "vae", &ctx.constant(&z), &cfg);
        let (c2, f2) = latent_to_structured(&ctx, "vae", &ctx.constant(&zp), &cfg);
        let (c1, f1, c2, f2) = (c1.value(), f1.value(), c2.value(), f2.value());
        for k in 0..3 {
            assert!((c1.data[k] - c2.data[3 * 3 + k]).abs() < 1e-12);
        }
        for k in 0..cfg.d {
            assert!((f1.data[k] - f2.data[3 * cfg.d + k]).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_k_one_preserves_count_and_cap_bounds() {
        let cfg = tiny_cfg();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        vae_init(&mut params, &mut rng, "vae", &cfg);
        // force k = 1 everywhere: large negative bias into the softplus
        for s in 0..cfg.stages() {
            let b = params.get_mut(&format!("vae.dec.s{s}.k.b"));
            b.data[0] = -30.0;
            let w = params.get_mut(&format!("vae.dec.s{s}.k.w"));
            for v in &mut w.data {
                *v = 0.0;
            }
        }
        let ctx = Ctx::new(&params);
        let z = ctx.constant(&Tensor::randn(&mut rng, &[4, cfg.d_z], 1.0));
        let dec = decode(&ctx, "vae", &z, &cfg).unwrap();
        assert_eq!(dec.coords.rows(), 4, "k=1 must preserve the count per stage");
        // cap arithmetic on an unconstrained decoder
        let mut params2 = Params::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(6);
        vae_init(&mut params2, &mut rng2, "vae", &cfg);
        let ctx2 = Ctx::new(&params2);
        let z2 = ctx2.constant(&Tensor::randn(&mut rng2, &[4, cfg.d_z], 1.0));
        let dec2 = decode(&ctx2, "vae", &z2, &cfg).unwrap();
        let cap: usize = 4 * cfg.factors.iter().map(|f| 2 * f).product::<usize>();
        assert!(dec2.coords.rows() <= cap);
        // features squashed
        for v in &dec2.feats.value().data {
            assert!(*v >= -1.0 && *v <= 1.0);
        }
    }

    #[test]
    fn feature_loss_examples() {
        let pos = [[0.0, 0.0, 0.0]];
        let real = [[0.5, 0.5]];
        let gen = [[0.2, 0.1]];
        // diff (0.3, 0.4) -> 0.25
        let v = feature_loss(&pos, &real, &pos, &gen).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
        assert!((feature_loss(&pos, &real, &pos, &real).unwrap()).abs() < 1e-15);
        assert!(feature_loss(&[], &[], &pos, &gen).is_err());
    }

    #[test]
    fn density_loss_examples() {
        // exact match -> 0
        let e = vec![vec![(3, 0.2)]];
        assert_eq!(density_loss(&e, &e, 50.0).unwrap(), 0.0);
        // count 3 vs 2, equal mean distances, one point -> 1
        let g = vec![vec![(2, 0.2)]];
        assert!((density_loss(&e, &g, 50.0).unwrap() - 1.0).abs() < 1e-12);
        // stage mismatch errors
        assert!(density_loss(&e, &[], 50.0).is_err());
    }

    #[test]
    fn cardinality_loss_examples() {
        assert_eq!(cardinality_loss(&[100, 25], &[100, 25]), 0.0);
        assert_eq!(cardinality_loss(&[100, 25], &[90, 25]), 10.0);
    }

    #[test]
    fn kl_examples() {
        let zero = Tensor::zeros(&[1, 1]);
        assert_eq!(kl_regularizer(&zero, &zero), 0.0);
        let mu = Tensor::new(vec![1, 1], vec![1.0]);
        assert!((kl_regularizer(&mu, &zero) - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = Tensor::randn(&mut rng, &[4, 3], 1.0);
        let lv = Tensor::randn(&mut rng, &[4, 3], 1.0);
        assert!(kl_regularizer(&m, &lv) >= 0.0);
    }

    #[test]
    fn loss_breakdown_recombines_to_total() {
        let cfg = tiny_cfg();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        vae_init(&mut params, &mut rng, "vae", &cfg);
        let pts = cloud(16, 10);
        let ctx = Ctx::new(&params);
        let (loss, bd) = vae_loss_tx(&ctx, "vae", &pts, &cfg, 11).unwrap();
        assert!((bd.total - loss.scalar_value()).abs() < 1e-12);
        assert!((bd.recombine(&cfg) - bd.total).abs() < 1e-9);
        assert!(bd.cd >= 0.0 && bd.kl >= 0.0 && bd.feature >= 0.0);
    }

    #[test]
    fn train_vae_runs_and_is_deterministic() {
        let cfg = tiny_cfg();
        let tcfg = VaeTrainConfig { epochs: 2, batch_size: 4, ..Default::default() };
        let dataset: Vec<Vec<RadarPoint>> = (0..8).map(|i| cloud(16, 100 + i)).collect();
        let run = |seed| {
            let mut params = Params::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            vae_init(&mut params, &mut rng, "vae", &cfg);
            let stats = train_vae(&mut params, "vae", &dataset, &cfg, &tcfg, seed).unwrap();
            (params.checksum(), stats)
        };
        let (c1, s1) = run(42);
        let (c2, s2) = run(42);
        assert_eq!(c1, c2);
        assert_eq!(s1.loss_history, s2.loss_history);
        assert_eq!(s1.loss_history.len(), 2);
        assert!(s1.diverged_at.is_none());
    }
}
