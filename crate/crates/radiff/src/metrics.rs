//! Generation-quality metrics: Chamfer distance, feature fidelity
//! (Doppler / RCS), Jensen-Shannon divergence over BEV occupancy, and
//! minimum matching distance. All values are reported in metric units; the
//! conventional 1e4 display scale for MMD is applied at formatting time
//! only.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::frame::{load_frame, RadarPointCloud, RangeSpec};

/// Symmetric squared-distance Chamfer: mean-over-A of squared nearest
/// distance into B plus the mirrored term.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer requires nonempty point sets"));
    }
    let one_way = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
        let total: f64 = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| dist2(p, q))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / from.len() as f64
    };
    Ok(one_way(a, b) + one_way(b, a))
}

fn dist2(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    let dz = p[2] - q[2];
    dx * dx + dy * dy + dz * dz
}

pub fn positions(pc: &RadarPointCloud) -> Vec<[f64; 3]> {
    pc.valid_points().map(|p| p.pos()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureChannel {
    Doppler,
    Rcs,
}

/// Directional feature fidelity: each generated point is matched to its
/// nearest real point by 3D position, then the mean absolute difference of
/// the chosen channel is taken over generated points.
pub fn cd_feature(
    real: &RadarPointCloud,
    generated: &RadarPointCloud,
    channel: FeatureChannel,
) -> Result<f64> {
    let real_pts: Vec<_> = real.valid_points().collect();
    let gen_pts: Vec<_> = generated.valid_points().collect();
    if real_pts.is_empty() || gen_pts.is_empty() {
        return Err(Error::invalid("cd_feature requires nonempty clouds"));
    }
    let chan = |p: &crate::frame::RadarPoint| match channel {
        FeatureChannel::Doppler => p.doppler,
        FeatureChannel::Rcs => p.rcs,
    };
    let mut total = 0.0;
    for g in &gen_pts {
        let gp = g.pos();
        let nearest = real_pts
            .iter()
            .min_by(|a, b| {
                dist2(&a.pos(), &gp)
                    .partial_cmp(&dist2(&b.pos(), &gp))
                    .unwrap()
            })
            .unwrap();
        total += (chan(g) - chan(nearest)).abs();
    }
    Ok(total / gen_pts.len() as f64)
}

/// BEV occupancy grid for the JSD metric.
#[derive(Debug, Clone, Copy)]
pub struct BevGrid {
    pub range: RangeSpec,
    pub nx: usize,
    pub ny: usize,
}

impl BevGrid {
    pub fn new(range: RangeSpec, nx: usize, ny: usize) -> Self {
        BevGrid { range, nx, ny }
    }

    fn cell(&self, x: f64, y: f64) -> Option<usize> {
        let fx = (x - self.range.x[0]) / (self.range.x[1] - self.range.x[0]);
        let fy = (y - self.range.y[0]) / (self.range.y[1] - self.range.y[0]);
        if !(0.0..=1.0).contains(&fx) || !(0.0..=1.0).contains(&fy) {
            return None;
        }
        let ix = ((fx * self.nx as f64) as usize).min(self.nx - 1);
        let iy = ((fy * self.ny as f64) as usize).min(self.ny - 1);
        Some(iy * self.nx + ix)
    }

    fn histogram(&self, clouds: &[&RadarPointCloud]) -> Vec<f64> {
        let mut h = vec![0.0; self.nx * self.ny];
        let mut total = 0.0;
        for pc in clouds {
            for p in pc.valid_points() {
                if let Some(c) = self.cell(p.x, p.y) {
                    h[c] += 1.0;
                    total += 1.0;
                }
            }
        }
        if total > 0.0 {
            for v in &mut h {
                *v /= total;
            }
        }
        h
    }
}

/// Jensen-Shannon divergence (base-2 logs, so the value lies in [0, 1])
/// between the normalized BEV occupancy histograms of the two collections.
pub fn jsd_bev(
    real: &[&RadarPointCloud],
    generated: &[&RadarPointCloud],
    grid: &BevGrid,
) -> Result<f64> {
    let n_real: usize = real.iter().map(|c| c.valid_count()).sum();
    let n_gen: usize = generated.iter().map(|c| c.valid_count()).sum();
    if n_real == 0 || n_gen == 0 {
        return Err(Error::invalid("jsd_bev requires nonempty point collections"));
    }
    let p = grid.histogram(real);
    let q = grid.histogram(generated);
    let mut jsd = 0.0;
    for (pi, qi) in p.iter().zip(&q) {
        let mi = 0.5 * (pi + qi);
        // 0 log 0 = 0 convention
        if *pi > 0.0 {
            jsd += 0.5 * pi * (pi / mi).log2();
        }
        if *qi > 0.0 {
            jsd += 0.5 * qi * (qi / mi).log2();
        }
    }
    Ok(jsd.clamp(0.0, 1.0))
}

/// Minimum matching distance: for each real cloud, the minimum Chamfer
/// distance to any generated cloud, averaged over real clouds.
pub fn mmd(real: &[&RadarPointCloud], generated: &[&RadarPointCloud]) -> Result<f64> {
    if real.is_empty() || generated.is_empty() {
        return Err(Error::invalid("mmd requires nonempty collections"));
    }
    let gen_pos: Vec<Vec<[f64; 3]>> = generated.iter().map(|c| positions(c)).collect();
    let mut total = 0.0;
    for r in real {
        let rp = positions(r);
        let best = gen_pos
            .iter()
            .map(|g| chamfer(&rp, g))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    Ok(total / real.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricConfigEcho {
    pub jsd_grid: [usize; 2],
    pub jsd_log_base: u32,
    pub mmd_display_scale: f64,
    pub units: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub cd: f64,
    pub cd_doppler: f64,
    pub cd_rcs: f64,
    pub jsd: f64,
    pub mmd: f64,
    pub mmd_display: f64,
    pub real_frames: usize,
    pub generated_frames: usize,
    pub config: MetricConfigEcho,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub range: RangeSpec,
    pub jsd_nx: usize,
    pub jsd_ny: usize,
}

impl EvalConfig {
    pub fn new(range: RangeSpec) -> Self {
        EvalConfig { range, jsd_nx: 100, jsd_ny: 100 }
    }
}

fn rdf_ids(dir: &Path) -> Result<BTreeSet<u64>> {
    let mut ids = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".rdf") {
            if let Some(num) = stem.strip_prefix("frame_") {
                if let Ok(id) = num.parse::<u64>() {
                    ids.insert(id);
                }
            }
        }
    }
    Ok(ids)
}

pub fn frame_path(dir: &Path, id: u64) -> std::path::PathBuf {
    dir.join(format!("frame_{id:06}.rdf"))
}

/// Evaluate all five metrics over the intersection of frame ids found in
/// the two directories.
pub fn evaluate(real_dir: &Path, generated_dir: &Path, cfg: &EvalConfig) -> Result<MetricReport> {
    let real_ids = rdf_ids(real_dir)?;
    let gen_ids = rdf_ids(generated_dir)?;
    let common: Vec<u64> = real_ids.intersection(&gen_ids).cloned().collect();
    let mut warnings = Vec::new();
    if common.is_empty() {
        return Err(Error::invalid("no common frame ids between directories"));
    }
    if common.len() != real_ids.len() || common.len() != gen_ids.len() {
        warnings.push(format!(
            "frame id mismatch: {} real, {} generated, {} common; evaluating the intersection",
            real_ids.len(),
            gen_ids.len(),
            common.len()
        ));
    }
    let mut real_clouds = Vec::new();
    let mut gen_clouds = Vec::new();
    for id in &common {
        real_clouds.push(load_frame(&frame_path(real_dir, *id))?.radar);
        gen_clouds.push(load_frame(&frame_path(generated_dir, *id))?.radar);
    }
    let real_refs: Vec<&RadarPointCloud> = real_clouds.iter().collect();
    let gen_refs: Vec<&RadarPointCloud> = gen_clouds.iter().collect();

    let mut cd_sum = 0.0;
    let mut dop_sum = 0.0;
    let mut rcs_sum = 0.0;
    let mut paired = 0usize;
    for (r, g) in real_clouds.iter().zip(&gen_clouds) {
        if r.valid_count() == 0 || g.valid_count() == 0 {
            warnings.push("skipping empty cloud in per-frame metrics".to_string());
            continue;
        }
        cd_sum += chamfer(&positions(r), &positions(g))?;
        dop_sum += cd_feature(r, g, FeatureChannel::Doppler)?;
        rcs_sum += cd_feature(r, g, FeatureChannel::Rcs)?;
        paired += 1;
    }
    if paired == 0 {
        return Err(Error::invalid("no nonempty frame pairs to evaluate"));
    }
    let grid = BevGrid::new(cfg.range, cfg.jsd_nx, cfg.jsd_ny);
    let jsd = jsd_bev(&real_refs, &gen_refs, &grid)?;
    let nonempty_real: Vec<&RadarPointCloud> = real_refs
        .iter()
        .filter(|c| c.valid_count() > 0)
        .cloned()
        .collect();
    let nonempty_gen: Vec<&RadarPointCloud> = gen_refs
        .iter()
        .filter(|c| c.valid_count() > 0)
        .cloned()
        .collect();
    let mmd_val = mmd(&nonempty_real, &nonempty_gen)?;
    Ok(MetricReport {
        cd: cd_sum / paired as f64,
        cd_doppler: dop_sum / paired as f64,
        cd_rcs: rcs_sum / paired as f64,
        jsd,
        mmd: mmd_val,
        mmd_display: mmd_val * 1e4,
        real_frames: real_clouds.len(),
        generated_frames: gen_clouds.len(),
        config: MetricConfigEcho {
            jsd_grid: [cfg.jsd_nx, cfg.jsd_ny],
            jsd_log_base: 2,
            mmd_display_scale: 1e4,
            units: "metric (meters, m/s, dBsm)",
        },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::RadarPoint;

    fn cloud(pts: &[[f64; 5]]) -> RadarPointCloud {
        RadarPointCloud::from_points(
            pts.iter()
                .map(|p| RadarPoint { x: p[0], y: p[1], z: p[2], doppler: p[3], rcs: p[4] })
                .collect(),
        )
    }

    #[test]
    fn chamfer_identical_is_zero() {
        let a = vec![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_single_point_pair() {
        let a = vec![[0.0, 0.0, 0.0]];
        let b = vec![[1.0, 0.0, 0.0]];
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn chamfer_symmetric() {
        let a = vec![[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]];
        let b = vec![[2.0, 0.0, 1.0]];
        assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
    }

    #[test]
    fn chamfer_empty_errors() {
        assert!(chamfer(&[], &[[0.0; 3]]).is_err());
    }

    #[test]
    fn cd_feature_direct_case() {
        let real = cloud(&[[0.0, 0.0, 0.0, 1.0, 5.0]]);
        let gen = cloud(&[[0.1, 0.0, 0.0, 1.5, 5.0]]);
        assert!((cd_feature(&real, &gen, FeatureChannel::Doppler).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(cd_feature(&real, &gen, FeatureChannel::Rcs).unwrap(), 0.0);
    }

    #[test]
    fn cd_feature_is_directional() {
        // two generated points share one nearest real point; swapping the
        // arguments changes which side is averaged over.
        let real = cloud(&[
            [0.0, 0.0, 0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0, 4.0, 0.0],
        ]);
        let gen = cloud(&[
            [0.1, 0.0, 0.0, 1.0, 0.0],
            [0.2, 0.0, 0.0, 3.0, 0.0],
        ]);
        let fwd = cd_feature(&real, &gen, FeatureChannel::Doppler).unwrap();
        let rev = cd_feature(&gen, &real, FeatureChannel::Doppler).unwrap();
        assert!((fwd - 2.0).abs() < 1e-12);
        assert!((rev - 2.0).abs() > 0.1, "expected asymmetry, both sides {fwd}");
    }

    #[test]
    fn jsd_identical_zero_disjoint_one() {
        let grid = BevGrid::new(RangeSpec::toy(), 10, 10);
        let a = cloud(&[[1.0, 0.0, 0.0, 0.0, 0.0], [5.0, 5.0, 0.0, 0.0, 0.0]]);
        let b = cloud(&[[15.0, -5.0, 0.0, 0.0, 0.0]]);
        assert_eq!(jsd_bev(&[&a], &[&a], &grid).unwrap(), 0.0);
        assert!((jsd_bev(&[&a], &[&b], &grid).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jsd_hand_case_4x4() {
        // real: both points in one cell; generated: half in the same cell,
        // half in another. p = (1, 0), q = (0.5, 0.5).
        let grid = BevGrid::new(RangeSpec::toy(), 4, 4);
        let real = cloud(&[
            [1.0, -9.0, 0.0, 0.0, 0.0],
            [1.2, -9.2, 0.0, 0.0, 0.0],
        ]);
        let gen = cloud(&[
            [1.0, -9.0, 0.0, 0.0, 0.0],
            [19.0, 9.0, 0.0, 0.0, 0.0],
        ]);
        // JSD = 0.5*1*log2(1/0.75) + 0.5*(0.5*log2(0.5/0.75) + 0.5*log2(0.5/0.25))
        let expect = 0.5 * (1.0_f64 / 0.75).log2()
            + 0.5 * (0.5 * (0.5_f64 / 0.75).log2() + 0.5 * (0.5_f64 / 0.25).log2());
        let got = jsd_bev(&[&real], &[&gen], &grid).unwrap();
        assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");
    }

    #[test]
    fn mmd_contained_collection_is_zero() {
        let a = cloud(&[[1.0, 1.0, 0.0, 0.0, 0.0]]);
        let b = cloud(&[[5.0, -2.0, 1.0, 0.0, 0.0]]);
        let gens = [&a, &b];
        assert_eq!(mmd(&[&a, &b], &gens).unwrap(), 0.0);
    }

    #[test]
    fn mmd_single_pair_equals_cd() {
        let a = cloud(&[[0.0, 0.0, 0.0, 0.0, 0.0]]);
        let b = cloud(&[[2.0, 0.0, 0.0, 0.0, 0.0]]);
        let want = chamfer(&positions(&a), &positions(&b)).unwrap();
        assert_eq!(mmd(&[&a], &[&b]).unwrap(), want);
    }
}
