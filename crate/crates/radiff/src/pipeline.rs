//! End-to-end command implementations behind the CLI: dataset synthesis,
//! two-stage training for the foreground and background tasks, conditional
//! generation, fusion, augmentation, and evaluation.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::{build_gt_database, bev_overlap, gt_sample_insert};
use crate::checkpoint;
use crate::cond::{
    build_layout_set, encode_layout_tx, encode_pillars_tx, layout_encoder_init,
    pillar_encoder_init, pillarize, LayoutSet, PillarGrid,
};
use crate::config::RunConfig;
use crate::diffusion::{denoiser_init, make_schedule, sample, train_ldm};
use crate::error::{Error, Result};
use crate::frame::synth::{synth_scene, SynthProfile};
use crate::frame::{
    denormalize, load_frame, normalize, pad_or_downsample, save_frame, split_fg_bg, Frame,
    RadarPoint, RadarPointCloud,
};
use crate::metrics::{evaluate, frame_path, EvalConfig};
use crate::num::{Ctx, Params, Tensor};
use crate::vae::{decode, encode, train_vae, vae_init};

pub const GENERATOR_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Fg,
    Bg,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fg" => Ok(Task::Fg),
            "bg" => Ok(Task::Bg),
            other => Err(Error::invalid(format!("unknown task '{other}', expected fg|bg"))),
        }
    }
}

fn profile_of(cfg: &RunConfig) -> Result<SynthProfile> {
    SynthProfile::by_name(&cfg.data.profile)
        .ok_or_else(|| Error::config(format!("unknown profile '{}'", cfg.data.profile)))
}

/// Load every `frame_NNNNNN.rdf` in a directory, ordered by id.
pub fn load_frames(dir: &Path) -> Result<Vec<Frame>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name
            .strip_prefix("frame_")
            .and_then(|s| s.strip_suffix(".rdf"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    ids.iter().map(|&id| load_frame(&frame_path(dir, id))).collect()
}

/// Resize a point list to exactly `n` points: seeded subset when long,
/// seeded resampling with replacement when short.
fn fix_count(points: &[RadarPoint], n: usize, seed: u64) -> Vec<RadarPoint> {
    if points.len() >= n {
        let cloud = RadarPointCloud::from_points(points.to_vec());
        return pad_or_downsample(&cloud, n, seed).points;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = points.to_vec();
    while out.len() < n {
        out.push(points[rng.gen_range(0..points.len())]);
    }
    out
}

fn ensure_output_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(Error::invalid(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )));
        }
    } else {
        std::fs::create_dir_all(out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    generator_version: &'a str,
    command: &'a str,
    profile: &'a str,
    frames: usize,
    seed: u64,
}

fn write_manifest(dir: &Path, command: &str, profile: &str, frames: usize, seed: u64) -> Result<()> {
    let m = Manifest { generator_version: GENERATOR_VERSION, command, profile, frames, seed };
    let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

pub fn cmd_synth(out: &Path, frames: usize, seed: u64, profile: &str, force: bool) -> Result<()> {
    let p = SynthProfile::by_name(profile)
        .ok_or_else(|| Error::invalid(format!("unknown profile '{profile}'")))?;
    ensure_output_dir(out, force)?;
    for i in 0..frames {
        let mut frame = synth_scene(seed.wrapping_add(i as u64), &p);
        frame.frame_id = i as u64;
        frame.timestamp_us = (i as u64) * 100_000;
        save_frame(&frame, &frame_path(out, i as u64))?;
    }
    write_manifest(out, "synth", profile, frames, seed)
}

// ---------------------------------------------------------------------------
// shared preprocessing

/// Per-frame training item: normalized fixed-size point set plus the raw
/// conditioning inputs for the task.
pub struct TrainItem {
    pub points: Vec<RadarPoint>,
    pub boxes: Vec<crate::frame::Box3D>,
    pub lidar: Vec<[f64; 3]>,
}

/// Split each frame by the task, normalize, and resize to the configured N.
/// Frames whose task-side cloud is empty are skipped.
pub fn prepare_items(frames: &[Frame], task: Task, cfg: &RunConfig) -> Result<Vec<TrainItem>> {
    let profile = profile_of(cfg)?;
    if task == Task::Fg && frames.iter().all(|f| f.boxes.is_empty()) {
        return Err(Error::invalid("fg task requires frames with bounding boxes"));
    }
    let mut items = Vec::new();
    for (i, frame) in frames.iter().enumerate() {
        let (fg, bg) = split_fg_bg(&frame.radar, &frame.boxes);
        let side = match task {
            Task::Fg => fg,
            Task::Bg => bg,
        };
        if side.valid_count() == 0 {
            continue;
        }
        let normed = normalize(&side, &profile.range, &profile.feat)?;
        let points = fix_count(
            &normed.valid_points().cloned().collect::<Vec<_>>(),
            cfg.data.n_points,
            0xF1C0 + i as u64,
        );
        items.push(TrainItem { points, boxes: frame.boxes.clone(), lidar: frame.lidar.clone() });
    }
    if items.is_empty() {
        return Err(Error::invalid("no usable frames for this task"));
    }
    Ok(items)
}

#[derive(Serialize)]
struct History<'a> {
    loss: &'a [f64],
    diverged_at: Option<usize>,
}

fn write_history(out: &Path, loss: &[f64], diverged_at: Option<usize>) -> Result<()> {
    let mut name = out.as_os_str().to_owned();
    name.push(".history.json");
    let path = std::path::PathBuf::from(name);
    let json = serde_json::to_string_pretty(&History { loss, diverged_at })
        .expect("history serializes");
    std::fs::write(path, json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train-vae

pub fn cmd_train_vae(
    task: Task,
    data: &Path,
    cfg: &RunConfig,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let frames = load_frames(data)?;
    let items = prepare_items(&frames, task, cfg)?;
    let dataset: Vec<Vec<RadarPoint>> = items.into_iter().map(|i| i.points).collect();
    let vcfg = cfg.vae_config();
    let tcfg = cfg.vae_train_config(task == Task::Fg);
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vae_init(&mut params, &mut rng, "vae", &vcfg);
    let stats = train_vae(&mut params, "vae", &dataset, &vcfg, &tcfg, seed)?;
    checkpoint::save(&params, out)?;
    write_history(out, &stats.loss_history, stats.diverged_at)?;
    if let Some(epoch) = stats.diverged_at {
        return Err(Error::Diverged {
            step: epoch,
            msg: "vae training diverged; last good checkpoint written".into(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train-ldm

enum Conditions {
    Layout(Vec<LayoutSet>),
    Pillars(Vec<PillarGrid>),
}

pub fn cmd_train_ldm(
    task: Task,
    data: &Path,
    cfg: &RunConfig,
    vae_ckpt: &Path,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let frames = load_frames(data)?;
    let items = prepare_items(&frames, task, cfg)?;
    let profile = profile_of(cfg)?;
    let vcfg = cfg.vae_config();
    let vae_params = checkpoint::load(vae_ckpt)?;
    let vae_checksum = vae_params.checksum();

    // encode the dataset with the frozen VAE
    let mut latents = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let ctx = Ctx::new(&vae_params);
        let enc = encode(&ctx, "vae", &item.points, &vcfg, seed.wrapping_add(i as u64))?;
        latents.push(enc.z.value());
    }

    let lcfg = cfg.layout_config();
    let pcfg = cfg.pillar_config();
    let conds = match task {
        Task::Fg => Conditions::Layout(
            items
                .iter()
                .enumerate()
                .map(|(i, it)| {
                    build_layout_set(&it.boxes, &profile.range, &lcfg, seed ^ i as u64)
                        .map(|(set, _)| set)
                })
                .collect::<Result<_>>()?,
        ),
        Task::Bg => Conditions::Pillars(
            items
                .iter()
                .enumerate()
                .map(|(i, it)| pillarize(&it.lidar, &profile.range, &pcfg, seed ^ i as u64))
                .collect(),
        ),
    };

    let dcfg = cfg.denoiser_config();
    let tcfg = cfg.ldm_train_config(task == Task::Fg);
    let sched = make_schedule(cfg.diffusion.beta_0, cfg.diffusion.beta_t, cfg.diffusion.steps)?;
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    denoiser_init(&mut params, &mut rng, "eps", &dcfg);
    match task {
        Task::Fg => layout_encoder_init(&mut params, &mut rng, "lay", &lcfg),
        Task::Bg => pillar_encoder_init(&mut params, &mut rng, "pil", &pcfg),
    }
    let cond_fn = |ctx: &Ctx, i: usize| -> Result<Option<(crate::num::Tx, crate::num::Tx)>> {
        match &conds {
            Conditions::Layout(sets) => Ok(Some(encode_layout_tx(ctx, "lay", &sets[i], &lcfg))),
            Conditions::Pillars(grids) => Ok(encode_pillars_tx(ctx, "pil", &grids[i], &pcfg)),
        }
    };
    let stats = train_ldm(&mut params, "eps", &latents, &cond_fn, &sched, &dcfg, &tcfg, seed)?;
    assert_eq!(vae_params.checksum(), vae_checksum, "frozen VAE must not change");
    checkpoint::save(&params, out)?;
    write_history(out, &stats.loss_history, stats.diverged_at)?;
    if let Some(epoch) = stats.diverged_at {
        return Err(Error::Diverged {
            step: epoch,
            msg: "ldm training diverged; last good checkpoint written".into(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// generate

#[allow(clippy::too_many_arguments)]
pub fn cmd_generate(
    task: Task,
    ldm_ckpt: &Path,
    vae_ckpt: &Path,
    cond_dir: &Path,
    steps: usize,
    seed: u64,
    out: &Path,
    cfg: &RunConfig,
    force: bool,
) -> Result<()> {
    let profile = profile_of(cfg)?;
    let ldm_params = checkpoint::load(ldm_ckpt)?;
    let vae_params = checkpoint::load(vae_ckpt)?;
    let cond_frames = load_frames(cond_dir)?;
    if task == Task::Fg && cond_frames.iter().all(|f| f.boxes.is_empty()) {
        return Err(Error::invalid("fg generation requires condition frames with boxes"));
    }
    ensure_output_dir(out, force)?;
    let vcfg = cfg.vae_config();
    let dcfg = cfg.denoiser_config();
    let lcfg = cfg.layout_config();
    let pcfg = cfg.pillar_config();
    let sched = make_schedule(cfg.diffusion.beta_0, cfg.diffusion.beta_t, steps)?;
    let m = vcfg.latent_tokens();
    for (i, cframe) in cond_frames.iter().enumerate() {
        let cond_tensors: Option<(Tensor, Tensor)> = match task {
            Task::Fg => {
                let (set, _) = build_layout_set(&cframe.boxes, &profile.range, &lcfg, seed)?;
                let (g, t) = crate::cond::encode_layout(&ldm_params, "lay", &set, &lcfg);
                Some((g, t))
            }
            Task::Bg => {
                let grid = pillarize(&cframe.lidar, &profile.range, &pcfg, seed ^ i as u64);
                if grid.pillars.is_empty() {
                    None
                } else {
                    let (g, t) = crate::cond::encode_pillars(&ldm_params, "pil", &grid, &pcfg);
                    Some((g, t))
                }
            }
        };
        let cond_ref = cond_tensors.as_ref().map(|(g, t)| (g, t));
        let z = sample(
            &ldm_params,
            "eps",
            cond_ref,
            (m, vcfg.d_z),
            &sched,
            &dcfg,
            seed.wrapping_add(i as u64),
        )?;
        let ctx = Ctx::new(&vae_params);
        let dec = decode(&ctx, "vae", &ctx.constant(&z), &vcfg)?;
        let coords = dec.coords.value();
        let feats = dec.feats.value();
        let points: Vec<RadarPoint> = (0..coords.rows())
            .map(|r| RadarPoint {
                x: coords.data[3 * r].clamp(-1.0, 1.0),
                y: coords.data[3 * r + 1].clamp(-1.0, 1.0),
                z: coords.data[3 * r + 2].clamp(-1.0, 1.0),
                doppler: feats.data[2 * r].clamp(-1.0, 1.0),
                rcs: feats.data[2 * r + 1].clamp(-1.0, 1.0),
            })
            .collect();
        let points = fix_count(&points, cfg.data.n_points, seed.wrapping_add(i as u64));
        let normed = RadarPointCloud::from_points(points);
        let radar = denormalize(&normed, &profile.range, &profile.feat)?;
        let out_frame = Frame {
            frame_id: cframe.frame_id,
            timestamp_us: cframe.timestamp_us,
            ego_vx: 0.0,
            ego_vy: 0.0,
            ego_yaw_rate: 0.0,
            radar,
            lidar: Vec::new(),
            boxes: if task == Task::Fg { cframe.boxes.clone() } else { Vec::new() },
        };
        save_frame(&out_frame, &frame_path(out, cframe.frame_id))?;
    }
    write_manifest(out, "generate", profile.name, cond_frames.len(), seed)
}

// ---------------------------------------------------------------------------
// fuse / augment / eval

pub fn cmd_fuse(fg_dir: &Path, bg_dir: &Path, out: &Path, force: bool) -> Result<()> {
    let fg = load_frames(fg_dir)?;
    let bg = load_frames(bg_dir)?;
    let fg_ids: Vec<u64> = fg.iter().map(|f| f.frame_id).collect();
    let bg_ids: Vec<u64> = bg.iter().map(|f| f.frame_id).collect();
    if fg_ids != bg_ids {
        return Err(Error::invalid(format!(
            "frame id mismatch between {} and {}",
            fg_dir.display(),
            bg_dir.display()
        )));
    }
    ensure_output_dir(out, force)?;
    for (f, b) in fg.iter().zip(&bg) {
        let fused = crate::augment::fuse(&f.radar, &b.radar);
        let mut frame = f.clone();
        frame.radar = fused.cloud;
        save_frame(&frame, &frame_path(out, frame.frame_id))?;
    }
    write_manifest(out, "fuse", "-", fg.len(), 0)
}

pub fn cmd_augment(data: &Path, out: &Path, seed: u64, cfg: &RunConfig, force: bool) -> Result<()> {
    let frames = load_frames(data)?;
    let db = build_gt_database(&frames);
    ensure_output_dir(out, force)?;
    let mut per_class = BTreeMap::new();
    for c in 1..=cfg.layout.n_classes {
        per_class.insert(c, cfg.augment.insert_per_class);
    }
    for (i, frame) in frames.iter().enumerate() {
        let (augmented, _warnings) = gt_sample_insert(frame, &db, &per_class, seed ^ i as u64);
        for a in 0..augmented.boxes.len() {
            for b in (a + 1)..augmented.boxes.len() {
                debug_assert_eq!(bev_overlap(&augmented.boxes[a], &augmented.boxes[b]), 0.0);
            }
        }
        save_frame(&augmented, &frame_path(out, frame.frame_id))?;
    }
    write_manifest(out, "augment", "-", frames.len(), seed)
}

pub fn cmd_eval(real: &Path, generated: &Path, out_json: &Path, cfg: &RunConfig) -> Result<()> {
    let profile = profile_of(cfg)?;
    let ecfg = EvalConfig {
        range: profile.range,
        jsd_nx: cfg.metrics.jsd_nx,
        jsd_ny: cfg.metrics.jsd_ny,
    };
    let report = evaluate(real, generated, &ecfg)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out_json, &json)?;
    println!("{json}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_writes_deterministic_tree() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        cmd_synth(dir1.path(), 4, 9, "toy", false).unwrap();
        cmd_synth(dir2.path(), 4, 9, "toy", false).unwrap();
        for i in 0..4u64 {
            let a = std::fs::read(frame_path(dir1.path(), i)).unwrap();
            let b = std::fs::read(frame_path(dir2.path(), i)).unwrap();
            assert_eq!(a, b, "frame {i} differs between same-seed runs");
        }
        // refuse to overwrite without force
        assert!(cmd_synth(dir1.path(), 1, 0, "toy", false).is_err());
        cmd_synth(dir1.path(), 1, 0, "toy", true).unwrap();
    }

    #[test]
    fn synth_zero_frames_manifest_only() {
        let dir = tempfile::tempdir().unwrap();
        cmd_synth(dir.path(), 0, 1, "toy", false).unwrap();
        let names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["manifest.json"]);
    }

    #[test]
    fn prepare_items_fg_requires_boxes() {
        let mut frame = synth_scene(3, &SynthProfile::toy());
        frame.boxes.clear();
        let cfg = RunConfig::default();
        assert!(prepare_items(&[frame], Task::Fg, &cfg).is_err());
    }

    #[test]
    fn fix_count_exact() {
        let pts: Vec<RadarPoint> = (0..10)
            .map(|i| RadarPoint { x: i as f64, ..Default::default() })
            .collect();
        assert_eq!(fix_count(&pts, 4, 0).len(), 4);
        assert_eq!(fix_count(&pts, 10, 0).len(), 10);
        assert_eq!(fix_count(&pts, 25, 0).len(), 25);
    }

    #[test]
    fn fuse_rejects_id_mismatch() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        cmd_synth(a.path(), 2, 0, "toy", true).unwrap();
        cmd_synth(b.path(), 3, 0, "toy", true).unwrap();
        assert!(cmd_fuse(a.path(), b.path(), out.path(), true).is_err());
    }
}
