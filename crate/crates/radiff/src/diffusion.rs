//! DDPM forward/reverse processes over latent token sets, the training
//! objective, and a full-attention token denoiser with cross-attention
//! conditioning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::num::{
    attention, attention_init, layer_norm, layer_norm_init, linear, linear_init, mlp, mlp_init,
    AdamConfig, AttentionInit, Ctx, LrSchedule, Optimizer, Params, Tensor, Tx,
};

pub const DEFAULT_BETA_0: f64 = 1e-4;
pub const DEFAULT_BETA_T: f64 = 2e-2;
pub const DEFAULT_T: usize = 1000;

/// Linear noise schedule tables, indexed by t-1 for t in 1..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }
    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }
}

pub fn make_schedule(beta_0: f64, beta_t: f64, t_max: usize) -> Result<DiffusionSchedule> {
    if !(0.0 < beta_0 && beta_0 < beta_t && beta_t < 1.0) {
        return Err(Error::invalid(format!(
            "noise schedule needs 0 < beta_0 < beta_T < 1, got ({beta_0}, {beta_t})"
        )));
    }
    if t_max < 2 {
        return Err(Error::invalid(format!("schedule needs T >= 2, got {t_max}")));
    }
    let mut beta = Vec::with_capacity(t_max);
    let mut alpha = Vec::with_capacity(t_max);
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for t in 1..=t_max {
        // lerp form keeps both endpoints exact
        let f = (t - 1) as f64 / (t_max - 1) as f64;
        let b = beta_0 * (1.0 - f) + beta_t * f;
        let a = 1.0 - b;
        prod *= a;
        beta.push(b);
        alpha.push(a);
        alpha_bar.push(prod);
    }
    Ok(DiffusionSchedule { t_max, beta, alpha, alpha_bar })
}

fn check_t(t: usize, sched: &DiffusionSchedule) -> Result<()> {
    if t < 1 || t > sched.t_max {
        return Err(Error::invalid(format!("timestep {t} outside [1, {}]", sched.t_max)));
    }
    Ok(())
}

/// Forward process: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    check_t(t, sched)?;
    assert_eq!(z0.shape, eps.shape, "q_sample shapes {:?} vs {:?}", z0.shape, eps.shape);
    let ab = sched.alpha_bar_at(t);
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data.iter().zip(&eps.data).map(|(a, e)| s0 * a + s1 * e).collect();
    Ok(Tensor::new(z0.shape.clone(), data))
}

/// Reverse-step mean: mu = (z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t).
pub fn p_mean(z_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    check_t(t, sched)?;
    assert_eq!(z_t.shape, eps_hat.shape, "p_mean shapes {:?} vs {:?}", z_t.shape, eps_hat.shape);
    let b = sched.beta_at(t);
    let coef = b / (1.0 - sched.alpha_bar_at(t)).sqrt();
    let inv_sqrt_a = 1.0 / sched.alpha_at(t).sqrt();
    let data = z_t
        .data
        .iter()
        .zip(&eps_hat.data)
        .map(|(z, e)| (z - coef * e) * inv_sqrt_a)
        .collect();
    Ok(Tensor::new(z_t.shape.clone(), data))
}

/// One reverse step: z_{t-1} = mu + sqrt(beta_t) xi with xi ~ N(0, I),
/// except at t = 1 where no noise is added.
pub fn p_sample_step<R: Rng>(
    z_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let mut mu = p_mean(z_t, t, eps_hat, sched)?;
    if t > 1 {
        let sigma = sched.beta_at(t).sqrt();
        for v in &mut mu.data {
            let xi: f64 = StandardNormal.sample(rng);
            *v += sigma * xi;
        }
    }
    Ok(mu)
}

// ---------------------------------------------------------------------------
// Denoiser

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub cond_width: usize,
    pub d_z: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { width: 128, blocks: 4, heads: 4, cond_width: 128, d_z: 4 }
    }
}

pub fn denoiser_init<R: Rng>(params: &mut Params, rng: &mut R, prefix: &str, cfg: &DenoiserConfig) {
    let w = cfg.width;
    linear_init(params, rng, &format!("{prefix}.lift"), cfg.d_z, w);
    mlp_init(params, rng, &format!("{prefix}.time"), &[w, w, w]);
    linear_init(params, rng, &format!("{prefix}.gcond"), cfg.cond_width, w);
    for b in 0..cfg.blocks {
        layer_norm_init(params, &format!("{prefix}.b{b}.ln1"), w);
        attention_init(
            params,
            rng,
            &format!("{prefix}.b{b}.self"),
            &AttentionInit { width: w, kv_width: w, heads: cfg.heads },
        );
        layer_norm_init(params, &format!("{prefix}.b{b}.ln2"), w);
        attention_init(
            params,
            rng,
            &format!("{prefix}.b{b}.cross"),
            &AttentionInit { width: w, kv_width: cfg.cond_width, heads: cfg.heads },
        );
        layer_norm_init(params, &format!("{prefix}.b{b}.ln3"), w);
        mlp_init(params, rng, &format!("{prefix}.b{b}.ff"), &[w, w, w]);
    }
    layer_norm_init(params, &format!("{prefix}.out_ln"), w);
    linear_init(params, rng, &format!("{prefix}.head"), w, cfg.d_z);
}

fn timestep_embedding(t: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; w];
    for i in 0..w / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / w as f64);
        data[2 * i] = (t as f64 * freq).sin();
        data[2 * i + 1] = (t as f64 * freq).cos();
    }
    Tensor::new(vec![1, w], data)
}

/// The denoiser eps_theta. `cond` carries (global embedding 1 x cond_width,
/// tokens K x cond_width); with no condition tokens the cross-attention
/// stage is skipped (unconditional mode).
pub fn denoise_tx(
    ctx: &Ctx,
    prefix: &str,
    z_t: &Tx,
    t: usize,
    cond: Option<(&Tx, &Tx)>,
    cfg: &DenoiserConfig,
) -> Result<Tx> {
    if let Some((g, tok)) = cond {
        if g.cols() != cfg.cond_width || tok.cols() != cfg.cond_width {
            return Err(Error::invalid(format!(
                "condition width {} / {} does not match denoiser cond_width {}",
                g.cols(),
                tok.cols(),
                cfg.cond_width
            )));
        }
    }
    let mut h = linear(ctx, &format!("{prefix}.lift"), z_t);
    let temb = ctx.constant(&timestep_embedding(t, cfg.width));
    let mut shift = mlp(ctx, &format!("{prefix}.time"), 2, &temb);
    if let Some((g, _)) = cond {
        shift = shift.add(&linear(ctx, &format!("{prefix}.gcond"), g));
    }
    h = h.add_row(&shift);
    for b in 0..cfg.blocks {
        let n1 = layer_norm(ctx, &format!("{prefix}.b{b}.ln1"), &h);
        h = h.add(&attention(ctx, &format!("{prefix}.b{b}.self"), &n1, &n1, cfg.heads));
        if let Some((_, tok)) = cond {
            if tok.rows() > 0 {
                let n2 = layer_norm(ctx, &format!("{prefix}.b{b}.ln2"), &h);
                h = h.add(&attention(ctx, &format!("{prefix}.b{b}.cross"), &n2, tok, cfg.heads));
            }
        }
        let n3 = layer_norm(ctx, &format!("{prefix}.b{b}.ln3"), &h);
        h = h.add(&mlp(ctx, &format!("{prefix}.b{b}.ff"), 2, &n3));
    }
    let out = layer_norm(ctx, &format!("{prefix}.out_ln"), &h);
    Ok(linear(ctx, &format!("{prefix}.head"), &out))
}

/// Frozen-parameter convenience wrapper.
pub fn denoise(
    params: &Params,
    prefix: &str,
    z_t: &Tensor,
    t: usize,
    cond: Option<(&Tensor, &Tensor)>,
    cfg: &DenoiserConfig,
) -> Result<Tensor> {
    let ctx = Ctx::new(params);
    let z = ctx.constant(z_t);
    let cond_tx = cond.map(|(g, tok)| (ctx.constant(g), ctx.constant(tok)));
    let out = denoise_tx(&ctx, prefix, &z, t, cond_tx.as_ref().map(|(g, t)| (g, t)), cfg)?;
    Ok(out.value())
}

// ---------------------------------------------------------------------------
// Training objective

/// Training loss for one batch: per element draw t uniformly and noise the
/// latent, then take the per-element mean squared error between true and
/// predicted noise, averaged over the batch. `eps_model` predicts the noise
/// inside the caller's graph so condition-encoder gradients flow too.
pub fn ldm_loss<R: Rng>(
    ctx: &Ctx,
    batch: &[Tensor],
    eps_model: &mut dyn FnMut(&Ctx, &Tx, usize, usize) -> Result<Tx>,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Tx> {
    if batch.is_empty() {
        return Err(Error::invalid("ldm_loss needs a nonempty batch"));
    }
    let mut total: Option<Tx> = None;
    for (i, z0) in batch.iter().enumerate() {
        let t = rng.gen_range(1..=sched.t_max);
        let eps_data: Vec<f64> = (0..z0.numel()).map(|_| StandardNormal.sample(rng)).collect();
        let eps = Tensor::new(z0.shape.clone(), eps_data);
        let z_t = q_sample(z0, t, &eps, sched)?;
        let eps_hat = eps_model(ctx, &ctx.constant(&z_t), t, i)?;
        let diff = eps_hat.sub(&ctx.constant(&eps));
        let mse = diff.square().mean_all();
        total = Some(match total {
            Some(acc) => acc.add(&mse),
            None => mse,
        });
    }
    Ok(total.unwrap().scale(1.0 / batch.len() as f64))
}

// ---------------------------------------------------------------------------
// Sampling

/// Full reverse chain from z_T ~ N(0, I). `cond` as in [`denoise_tx`].
/// Aborts with the step index if any intermediate becomes non-finite.
pub fn sample(
    params: &Params,
    prefix: &str,
    cond: Option<(&Tensor, &Tensor)>,
    shape: (usize, usize),
    sched: &DiffusionSchedule,
    cfg: &DenoiserConfig,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..shape.0 * shape.1).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut z = Tensor::new(vec![shape.0, shape.1], data);
    for t in (1..=sched.t_max).rev() {
        let eps_hat = denoise(params, prefix, &z, t, cond, cfg)?;
        z = p_sample_step(&z, t, &eps_hat, sched, &mut rng)?;
        if !z.is_finite() {
            return Err(Error::Diverged {
                step: t,
                msg: "non-finite latent during reverse sampling".into(),
            });
        }
    }
    Ok(z)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
}

impl Default for LdmTrainConfig {
    fn default() -> Self {
        LdmTrainConfig { epochs: 1000, batch_size: 16, max_lr: 1e-4, weight_decay: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct LdmTrainStats {
    /// Mean loss per epoch.
    pub loss_history: Vec<f64>,
    /// Set when training aborted on a non-finite loss; parameters are
    /// rolled back to the last epoch that finished cleanly.
    pub diverged_at: Option<usize>,
}

/// Train the denoiser (and any condition-encoder parameters living in the
/// same store) with AdamW under a one-cycle schedule. `cond_fn` encodes the
/// condition for dataset item `i` inside the given graph; return None for
/// the unconditional path.
pub fn train_ldm(
    params: &mut Params,
    prefix: &str,
    latents: &[Tensor],
    cond_fn: &dyn Fn(&Ctx, usize) -> Result<Option<(Tx, Tx)>>,
    sched: &DiffusionSchedule,
    dcfg: &DenoiserConfig,
    tcfg: &LdmTrainConfig,
    seed: u64,
) -> Result<LdmTrainStats> {
    if latents.is_empty() {
        return Err(Error::invalid("train_ldm needs a nonempty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps_per_epoch = latents.len().div_ceil(tcfg.batch_size);
    let schedule = LrSchedule::OneCycle {
        max_lr: tcfg.max_lr,
        total_steps: (tcfg.epochs * steps_per_epoch).max(2),
    };
    let mut opt = Optimizer::new(AdamConfig {
        weight_decay: tcfg.weight_decay,
        ..AdamConfig::default()
    });
    let mut loss_history = Vec::with_capacity(tcfg.epochs);
    let mut last_good = params.clone();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..latents.len()).collect();
    for epoch in 0..tcfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let ctx = Ctx::new(params);
            let batch: Vec<Tensor> = chunk.iter().map(|&i| latents[i].clone()).collect();
            let conds: Vec<Option<(Tx, Tx)>> = chunk
                .iter()
                .map(|&i| cond_fn(&ctx, i))
                .collect::<Result<_>>()?;
            let mut model = |c: &Ctx, z_t: &Tx, t: usize, j: usize| {
                let cond = conds[j].as_ref().map(|(g, tok)| (g, tok));
                denoise_tx(c, prefix, z_t, t, cond, dcfg)
            };
            let loss = ldm_loss(&ctx, &batch, &mut model, sched, &mut rng)?;
            let loss_val = loss.scalar_value();
            if !loss_val.is_finite() {
                *params = last_good;
                return Ok(LdmTrainStats { loss_history, diverged_at: Some(epoch) });
            }
            let grads = ctx.grads(&loss)?;
            drop(ctx);
            opt.step(params, &grads, schedule.value(step))?;
            step += 1;
            epoch_loss += loss_val;
            batches += 1;
        }
        loss_history.push(epoch_loss / batches as f64);
        last_good = params.clone();
    }
    Ok(LdmTrainStats { loss_history, diverged_at: None })
}
