//! Plain-text run configuration: `key = value` pairs under `[section]`
//! headers, strict about unknown keys, with a canonical echo that is
//! byte-stable under re-parsing.

use crate::cond::{LayoutConfig, PillarConfig};
use crate::diffusion::{DenoiserConfig, LdmTrainConfig};
use crate::error::{Error, Result};
use crate::vae::{VaeConfig, VaeTrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub profile: String,
    pub n_points: usize,
    pub sweeps: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { profile: "toy".into(), n_points: 128, sweeps: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeSection {
    pub epochs: usize,
    pub batch_size_fg: usize,
    pub batch_size_bg: usize,
    pub lr: f64,
    pub optimizer: String,
    pub scheduler: String,
    pub step_size: usize,
    pub gamma: f64,
    pub lambda_reg: f64,
    pub lambda_den: f64,
    pub lambda_card: f64,
    pub lambda_d: f64,
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub d_z: usize,
    pub d: usize,
    pub factors: Vec<usize>,
}

impl Default for VaeSection {
    fn default() -> Self {
        VaeSection {
            epochs: 300,
            batch_size_fg: 128,
            batch_size_bg: 32,
            lr: 1e-3,
            optimizer: "adam".into(),
            scheduler: "steplr".into(),
            step_size: 45,
            gamma: 0.5,
            lambda_reg: 1e-5,
            lambda_den: 1e-4,
            lambda_card: 5e-7,
            lambda_d: 50.0,
            lambda_c: 0.1,
            lambda_f: 0.05,
            d_z: 4,
            d: 64,
            factors: vec![4, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSection {
    pub epochs: usize,
    pub batch_size_fg: usize,
    pub batch_size_bg: usize,
    pub lr: f64,
    pub optimizer: String,
    pub weight_decay: f64,
    pub scheduler: String,
    pub beta_0: f64,
    pub beta_t: f64,
    pub schedule: String,
    pub steps: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            epochs: 1000,
            batch_size_fg: 128,
            batch_size_bg: 16,
            lr: 1e-4,
            optimizer: "adamw".into(),
            weight_decay: 1e-6,
            scheduler: "onecycle".into(),
            beta_0: 1e-4,
            beta_t: 0.02,
            schedule: "linear".into(),
            steps: 1000,
            width: 128,
            blocks: 4,
            heads: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutSection {
    pub n: usize,
    pub n_classes: u32,
    pub size_max: f64,
    pub v_max: f64,
    pub width: usize,
    pub heads: usize,
    pub fusion_layers: usize,
}

impl Default for LayoutSection {
    fn default() -> Self {
        let c = LayoutConfig::default();
        LayoutSection {
            n: c.n,
            n_classes: c.n_classes,
            size_max: c.size_max,
            v_max: c.v_max,
            width: c.width,
            heads: c.heads,
            fusion_layers: c.fusion_layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PillarsSection {
    pub g: f64,
    pub p_max: usize,
    pub k_max: usize,
    pub width: usize,
}

impl Default for PillarsSection {
    fn default() -> Self {
        let c = PillarConfig::default();
        PillarsSection { g: c.g, p_max: c.p_max, k_max: c.k_max, width: c.width }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSection {
    pub jsd_nx: usize,
    pub jsd_ny: usize,
    pub jsd_log_base: f64,
    pub mmd_display_scale: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { jsd_nx: 100, jsd_ny: 100, jsd_log_base: 2.0, mmd_display_scale: 1e4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSection {
    pub min_entry_points: usize,
    pub insert_per_class: usize,
    pub polar_target: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection { min_entry_points: 5, insert_per_class: 2, polar_target: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub vae: VaeSection,
    pub diffusion: DiffusionSection,
    pub layout: LayoutSection,
    pub pillars: PillarsSection,
    pub metrics: MetricsSection,
    pub augment: AugmentSection,
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip form keeps canonicalization idempotent
    format!("{v}")
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        s.push_str("[data]\n");
        s.push_str(&format!("profile = {}\n", d.profile));
        s.push_str(&format!("n_points = {}\n", d.n_points));
        s.push_str(&format!("sweeps = {}\n", d.sweeps));
        let v = &self.vae;
        s.push_str("\n[vae]\n");
        s.push_str(&format!("epochs = {}\n", v.epochs));
        s.push_str(&format!("batch_size_fg = {}\n", v.batch_size_fg));
        s.push_str(&format!("batch_size_bg = {}\n", v.batch_size_bg));
        s.push_str(&format!("lr = {}\n", fmt_f64(v.lr)));
        s.push_str(&format!("optimizer = {}\n", v.optimizer));
        s.push_str(&format!("scheduler = {}\n", v.scheduler));
        s.push_str(&format!("step_size = {}\n", v.step_size));
        s.push_str(&format!("gamma = {}\n", fmt_f64(v.gamma)));
        s.push_str(&format!("lambda_reg = {}\n", fmt_f64(v.lambda_reg)));
        s.push_str(&format!("lambda_den = {}\n", fmt_f64(v.lambda_den)));
        s.push_str(&format!("lambda_card = {}\n", fmt_f64(v.lambda_card)));
        s.push_str(&format!("lambda_d = {}\n", fmt_f64(v.lambda_d)));
        s.push_str(&format!("lambda_c = {}\n", fmt_f64(v.lambda_c)));
        s.push_str(&format!("lambda_f = {}\n", fmt_f64(v.lambda_f)));
        s.push_str(&format!("d_z = {}\n", v.d_z));
        s.push_str(&format!("d = {}\n", v.d));
        s.push_str(&format!("factors = {}\n", fmt_list(&v.factors)));
        let f = &self.diffusion;
        s.push_str("\n[diffusion]\n");
        s.push_str(&format!("epochs = {}\n", f.epochs));
        s.push_str(&format!("batch_size_fg = {}\n", f.batch_size_fg));
        s.push_str(&format!("batch_size_bg = {}\n", f.batch_size_bg));
        s.push_str(&format!("lr = {}\n", fmt_f64(f.lr)));
        s.push_str(&format!("optimizer = {}\n", f.optimizer));
        s.push_str(&format!("weight_decay = {}\n", fmt_f64(f.weight_decay)));
        s.push_str(&format!("scheduler = {}\n", f.scheduler));
        s.push_str(&format!("beta_0 = {}\n", fmt_f64(f.beta_0)));
        s.push_str(&format!("beta_t = {}\n", fmt_f64(f.beta_t)));
        s.push_str(&format!("schedule = {}\n", f.schedule));
        s.push_str(&format!("steps = {}\n", f.steps));
        s.push_str(&format!("width = {}\n", f.width));
        s.push_str(&format!("blocks = {}\n", f.blocks));
        s.push_str(&format!("heads = {}\n", f.heads));
        let l = &self.layout;
        s.push_str("\n[layout]\n");
        s.push_str(&format!("n = {}\n", l.n));
        s.push_str(&format!("n_classes = {}\n", l.n_classes));
        s.push_str(&format!("size_max = {}\n", fmt_f64(l.size_max)));
        s.push_str(&format!("v_max = {}\n", fmt_f64(l.v_max)));
        s.push_str(&format!("width = {}\n", l.width));
        s.push_str(&format!("heads = {}\n", l.heads));
        s.push_str(&format!("fusion_layers = {}\n", l.fusion_layers));
        let p = &self.pillars;
        s.push_str("\n[pillars]\n");
        s.push_str(&format!("g = {}\n", fmt_f64(p.g)));
        s.push_str(&format!("p_max = {}\n", p.p_max));
        s.push_str(&format!("k_max = {}\n", p.k_max));
        s.push_str(&format!("width = {}\n", p.width));
        let m = &self.metrics;
        s.push_str("\n[metrics]\n");
        s.push_str(&format!("jsd_nx = {}\n", m.jsd_nx));
        s.push_str(&format!("jsd_ny = {}\n", m.jsd_ny));
        s.push_str(&format!("jsd_log_base = {}\n", fmt_f64(m.jsd_log_base)));
        s.push_str(&format!("mmd_display_scale = {}\n", fmt_f64(m.mmd_display_scale)));
        let a = &self.augment;
        s.push_str("\n[augment]\n");
        s.push_str(&format!("min_entry_points = {}\n", a.min_entry_points));
        s.push_str(&format!("insert_per_class = {}\n", a.insert_per_class));
        s.push_str(&format!("polar_target = {}\n", a.polar_target));
        s
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                match section.as_str() {
                    "data" | "vae" | "diffusion" | "layout" | "pillars" | "metrics"
                    | "augment" => {}
                    other => {
                        return Err(Error::Config(format!(
                            "line {lineno}: unknown section [{other}]"
                        )))
                    }
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {lineno}: expected `key = value`, got '{line}'"))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(&section, key, value).map_err(|e| {
                Error::Config(format!("line {lineno}: {e}"))
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        fn us(v: &str) -> std::result::Result<usize, String> {
            v.parse().map_err(|_| format!("bad integer '{v}'"))
        }
        fn fl(v: &str) -> std::result::Result<f64, String> {
            v.parse().map_err(|_| format!("bad float '{v}'"))
        }
        fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
            v.split(',').map(|t| us(t.trim())).collect()
        }
        match (section, key) {
            ("data", "profile") => self.data.profile = value.to_string(),
            ("data", "n_points") => self.data.n_points = us(value)?,
            ("data", "sweeps") => self.data.sweeps = us(value)?,
            ("vae", "epochs") => self.vae.epochs = us(value)?,
            ("vae", "batch_size_fg") => self.vae.batch_size_fg = us(value)?,
            ("vae", "batch_size_bg") => self.vae.batch_size_bg = us(value)?,
            ("vae", "lr") => self.vae.lr = fl(value)?,
            ("vae", "optimizer") => self.vae.optimizer = value.to_string(),
            ("vae", "scheduler") => self.vae.scheduler = value.to_string(),
            ("vae", "step_size") => self.vae.step_size = us(value)?,
            ("vae", "gamma") => self.vae.gamma = fl(value)?,
            ("vae", "lambda_reg") => self.vae.lambda_reg = fl(value)?,
            ("vae", "lambda_den") => self.vae.lambda_den = fl(value)?,
            ("vae", "lambda_card") => self.vae.lambda_card = fl(value)?,
            ("vae", "lambda_d") => self.vae.lambda_d = fl(value)?,
            ("vae", "lambda_c") => self.vae.lambda_c = fl(value)?,
            ("vae", "lambda_f") => self.vae.lambda_f = fl(value)?,
            ("vae", "d_z") => self.vae.d_z = us(value)?,
            ("vae", "d") => self.vae.d = us(value)?,
            ("vae", "factors") => self.vae.factors = list(value)?,
            ("diffusion", "epochs") => self.diffusion.epochs = us(value)?,
            ("diffusion", "batch_size_fg") => self.diffusion.batch_size_fg = us(value)?,
            ("diffusion", "batch_size_bg") => self.diffusion.batch_size_bg = us(value)?,
            ("diffusion", "lr") => self.diffusion.lr = fl(value)?,
            ("diffusion", "optimizer") => self.diffusion.optimizer = value.to_string(),
            ("diffusion", "weight_decay") => self.diffusion.weight_decay = fl(value)?,
            ("diffusion", "scheduler") => self.diffusion.scheduler = value.to_string(),
            ("diffusion", "beta_0") => self.diffusion.beta_0 = fl(value)?,
            ("diffusion", "beta_t") => self.diffusion.beta_t = fl(value)?,
            ("diffusion", "schedule") => self.diffusion.schedule = value.to_string(),
            ("diffusion", "steps") => self.diffusion.steps = us(value)?,
            ("diffusion", "width") => self.diffusion.width = us(value)?,
            ("diffusion", "blocks") => self.diffusion.blocks = us(value)?,
            ("diffusion", "heads") => self.diffusion.heads = us(value)?,
            ("layout", "n") => self.layout.n = us(value)?,
            ("layout", "n_classes") => {
                self.layout.n_classes = us(value)? as u32;
            }
            ("layout", "size_max") => self.layout.size_max = fl(value)?,
            ("layout", "v_max") => self.layout.v_max = fl(value)?,
            ("layout", "width") => self.layout.width = us(value)?,
            ("layout", "heads") => self.layout.heads = us(value)?,
            ("layout", "fusion_layers") => self.layout.fusion_layers = us(value)?,
            ("pillars", "g") => self.pillars.g = fl(value)?,
            ("pillars", "p_max") => self.pillars.p_max = us(value)?,
            ("pillars", "k_max") => self.pillars.k_max = us(value)?,
            ("pillars", "width") => self.pillars.width = us(value)?,
            ("metrics", "jsd_nx") => self.metrics.jsd_nx = us(value)?,
            ("metrics", "jsd_ny") => self.metrics.jsd_ny = us(value)?,
            ("metrics", "jsd_log_base") => self.metrics.jsd_log_base = fl(value)?,
            ("metrics", "mmd_display_scale") => self.metrics.mmd_display_scale = fl(value)?,
            ("augment", "min_entry_points") => self.augment.min_entry_points = us(value)?,
            ("augment", "insert_per_class") => self.augment.insert_per_class = us(value)?,
            ("augment", "polar_target") => self.augment.polar_target = us(value)?,
            ("", k) => return Err(format!("key '{k}' outside any section")),
            (s, k) => return Err(format!("unknown key '{k}' in section [{s}]")),
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Typed views consumed by the modules

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            n_points: self.data.n_points,
            factors: self.vae.factors.clone(),
            d: self.vae.d,
            d_z: self.vae.d_z,
            lambda_reg: self.vae.lambda_reg,
            lambda_den: self.vae.lambda_den,
            lambda_card: self.vae.lambda_card,
            lambda_d: self.vae.lambda_d,
            lambda_c: self.vae.lambda_c,
            lambda_f: self.vae.lambda_f,
        }
    }

    pub fn vae_train_config(&self, task_fg: bool) -> VaeTrainConfig {
        VaeTrainConfig {
            epochs: self.vae.epochs,
            batch_size: if task_fg { self.vae.batch_size_fg } else { self.vae.batch_size_bg },
            lr: self.vae.lr,
            step_size: self.vae.step_size,
            gamma: self.vae.gamma,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            width: self.diffusion.width,
            blocks: self.diffusion.blocks,
            heads: self.diffusion.heads,
            cond_width: self.layout.width,
            d_z: self.vae.d_z,
        }
    }

    pub fn ldm_train_config(&self, task_fg: bool) -> LdmTrainConfig {
        LdmTrainConfig {
            epochs: self.diffusion.epochs,
            batch_size: if task_fg {
                self.diffusion.batch_size_fg
            } else {
                self.diffusion.batch_size_bg
            },
            max_lr: self.diffusion.lr,
            weight_decay: self.diffusion.weight_decay,
        }
    }

    pub fn layout_config(&self) -> LayoutConfig {
        LayoutConfig {
            n: self.layout.n,
            n_classes: self.layout.n_classes,
            size_max: self.layout.size_max,
            v_max: self.layout.v_max,
            width: self.layout.width,
            heads: self.layout.heads,
            fusion_layers: self.layout.fusion_layers,
        }
    }

    pub fn pillar_config(&self) -> PillarConfig {
        PillarConfig {
            g: self.pillars.g,
            p_max: self.pillars.p_max,
            k_max: self.pillars.k_max,
            width: self.pillars.width,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_echo_is_idempotent() {
        let cfg = RunConfig::default();
        let s1 = cfg.to_canonical_string();
        let parsed = RunConfig::parse(&s1).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.to_canonical_string(), s1);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let text = "[vae]\nepochs = 12\nlr = 0.01\n\n[pillars]\ng = 1.25\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.vae.epochs, 12);
        assert_eq!(cfg.vae.lr, 0.01);
        assert_eq!(cfg.pillars.g, 1.25);
        assert!(RunConfig::parse("[vae]\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("[nosuch]\n").is_err());
        assert!(RunConfig::parse("orphan = 1\n").is_err());
        assert!(RunConfig::parse("[vae]\nnot a pair\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# top comment\n\n[data]\n# inner\nprofile = vod\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.data.profile, "vod");
    }

    #[test]
    fn factors_list_parses() {
        let cfg = RunConfig::parse("[vae]\nfactors = 2, 4, 2\n").unwrap();
        assert_eq!(cfg.vae.factors, vec![2, 4, 2]);
    }
}
