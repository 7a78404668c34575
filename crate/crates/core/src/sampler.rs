//! Deterministic DDIM sampling and inversion with classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Denoiser;
use crate::error::{ensure, Error, Result};
use crate::motion_embedding::{build_edit_conditionings, FrameConditionings};
use crate::pseudo_flow::MotionMasks;
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor;
use crate::trainer::TrainedModel;
use crate::video::{latent_to_frames, VideoFrames};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub guidance_scale: f64,
    pub eta: f64,
    pub seed: u64,
    /// Start editing from the DDIM-inverted source instead of seeded noise.
    pub invert_source: bool,
    /// Keep source latents outside the motion masks at every step.
    pub mask_blend: bool,
    /// Vary the unconditional embedding per frame through the motion word.
    pub vary_uncond: bool,
    /// Clamp predicted clean latents to the data range `[-1, 1]` while sampling.
    pub clip_x0: bool,
    /// Invert with the same guided noise predictor used for sampling.
    pub guided_inversion: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 50,
            guidance_scale: 7.5,
            eta: 0.0,
            seed: 0,
            invert_source: true,
            mask_blend: false,
            vary_uncond: false,
            clip_x0: false,
            guided_inversion: true,
        }
    }
}

impl SamplerConfig {
    pub fn violations(&self, schedule_steps: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.ddim_steps == 0 || self.ddim_steps > schedule_steps {
            v.push(format!(
                "ddim_steps {} outside [1, {schedule_steps}]",
                self.ddim_steps
            ));
        }
        if !(self.guidance_scale >= 0.0) {
            v.push(format!("guidance_scale {} must be >= 0", self.guidance_scale));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            v.push(format!("eta {} outside [0, 1]", self.eta));
        }
        v
    }

    pub fn validate(&self, schedule_steps: usize) -> Result<()> {
        let v = self.violations(schedule_steps);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

/// Sampling timesteps, strictly decreasing: `k·T/steps + 1` for
/// `k = steps−1, …, 0`.
pub fn timesteps(schedule_steps: usize, ddim_steps: usize) -> Vec<usize> {
    (0..ddim_steps)
        .rev()
        .map(|k| k * schedule_steps / ddim_steps + 1)
        .collect()
}

/// `(z_t − √(1−ᾱ_t)·ε) / √ᾱ_t`.
pub fn predict_x0(z_t: &Tensor, noise_pred: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z_t.zip_map(noise_pred, |z, e| (z - b * e) / a)
}

/// One DDIM update from `t` to `t_prev`. `noise` is required when `eta > 0`.
pub fn ddim_step(
    z_t: &Tensor,
    noise_pred: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &DiffusionSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    ddim_step_clipped(z_t, noise_pred, t, t_prev, schedule, eta, noise, false)
}

/// [`ddim_step`] with optional clamping of the predicted clean latent.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step_clipped(
    z_t: &Tensor,
    noise_pred: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &DiffusionSchedule,
    eta: f64,
    noise: Option<&Tensor>,
    clip_x0: bool,
) -> Result<Tensor> {
    ensure!(t > t_prev, Contract, "DDIM step needs t > t_prev, got {t} -> {t_prev}");
    schedule.check_timestep(t)?;
    let a_t = schedule.alpha_bar(t);
    let a_p = schedule.alpha_bar(t_prev);
    let mut x0 = predict_x0(z_t, noise_pred, a_t)?;
    if clip_x0 {
        x0 = x0.map(|x| x.clamp(-1.0, 1.0));
    }
    let sigma = eta * ((1.0 - a_p) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_p).sqrt();
    let dir = (1.0 - a_p - sigma * sigma).max(0.0).sqrt();
    let mut out = x0.zip_map(noise_pred, |x, e| a_p.sqrt() * x + dir * e)?;
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| Error::Contract("eta > 0 needs a noise sample".into()))?;
        out.add_assign_scaled(noise, sigma);
    }
    Ok(out)
}

/// `u + s·(c − u)`.
pub fn combine_guidance(uncond: &Tensor, cond: &Tensor, scale: f64) -> Result<Tensor> {
    uncond.zip_map(cond, |u, c| u + scale * (c - u))
}

pub fn guided_noise(
    denoiser: &dyn Denoiser,
    z_t: &Tensor,
    t: usize,
    cond: &FrameConditionings,
    uncond: &FrameConditionings,
    scale: f64,
) -> Result<Tensor> {
    ensure!(scale >= 0.0, Contract, "guidance scale must be >= 0, got {scale}");
    let (c, _) = denoiser.denoise(z_t, t, cond, false)?;
    let (u, _) = denoiser.denoise(z_t, t, uncond, false)?;
    combine_guidance(&u, &c, scale)
}

/// Result of a DDIM inversion.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub z_t: Tensor,
    /// Latents at `0` and each inversion timestep, ascending.
    pub trajectory: Vec<(usize, Tensor)>,
}

impl Inversion {
    pub fn at(&self, t: usize) -> Option<&Tensor> {
        self.trajectory.iter().find(|(s, _)| *s == t).map(|(_, z)| z)
    }
}

/// Reverse DDIM (eta = 0) under conditional noise predictions. The noise at
/// each transition is evaluated at the target timestep, so the first step out
/// of the clean latent is well defined.
pub fn ddim_invert(
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    z0: &Tensor,
    cond: &FrameConditionings,
    steps: usize,
) -> Result<Inversion> {
    ddim_invert_with(schedule, z0, steps, |z, t| Ok(denoiser.denoise(z, t, cond, false)?.0))
}

/// Reverse DDIM driven by an arbitrary noise predictor `eps(z, t)`.
pub fn ddim_invert_with(
    schedule: &DiffusionSchedule,
    z0: &Tensor,
    steps: usize,
    mut eps: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Inversion> {
    let mut ts = timesteps(schedule.steps(), steps);
    ts.reverse();
    let mut z = z0.clone();
    let mut trajectory = vec![(0, z.clone())];
    let mut prev = 0;
    for &t in &ts {
        let e = eps(&z, t)?;
        let x0 = predict_x0(&z, &e, schedule.alpha_bar(prev))?;
        let a_t = schedule.alpha_bar(t);
        z = x0.zip_map(&e, |x, e| a_t.sqrt() * x + (1.0 - a_t).sqrt() * e)?;
        trajectory.push((t, z.clone()));
        prev = t;
    }
    Ok(Inversion { z_t: z, trajectory })
}

/// Inversion of `z0` matching how `config` samples: guided by `uncond` at
/// the configured scale when `guided_inversion` is set, otherwise under
/// `cond` alone.
pub fn invert_for_sampling(
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    z0: &Tensor,
    cond: &FrameConditionings,
    uncond: &FrameConditionings,
    config: &SamplerConfig,
) -> Result<Inversion> {
    if config.guided_inversion && config.guidance_scale != 1.0 {
        let s = config.guidance_scale;
        ddim_invert_with(schedule, z0, config.ddim_steps, |z, t| {
            guided_noise(denoiser, z, t, cond, uncond, s)
        })
    } else {
        ddim_invert(denoiser, schedule, z0, cond, config.ddim_steps)
    }
}

/// Latent blend target: source latents and per-frame masks on the latent
/// grid (frame 0 reuses the first mask).
pub struct Blend<'a> {
    pub source: &'a Inversion,
    pub masks: &'a MotionMasks,
}

fn blend_in_place(z: &mut Tensor, source: &Tensor, masks: &MotionMasks) -> Result<()> {
    let s = z.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (mh, mw) = masks.grid();
    let near = crate::losses::nearest_index((mh, mw), (h, w));
    ensure!(masks.frames() + 1 == n, Contract, "masks do not match the frame count");
    let data = z.data_mut();
    for f in 0..n {
        let m = masks.frame(f.max(1));
        for ch in 0..c {
            for (px, &src) in near.iter().enumerate() {
                let idx = (f * c + ch) * h * w + px;
                data[idx] = m[src] * data[idx] + (1.0 - m[src]) * source.data()[idx];
            }
        }
    }
    Ok(())
}

/// DDIM sampling from `z_start` at the first timestep down to a clean latent.
pub fn sample(
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    z_start: &Tensor,
    cond: &FrameConditionings,
    uncond: &FrameConditionings,
    config: &SamplerConfig,
    blend: Option<Blend<'_>>,
) -> Result<Tensor> {
    config.validate(schedule.steps())?;
    let ts = timesteps(schedule.steps(), config.ddim_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_dd1d);
    let mut z = z_start.clone();
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let eps = guided_noise(denoiser, &z, t, cond, uncond, config.guidance_scale)?;
        let noise = (config.eta > 0.0).then(|| Tensor::randn(z.shape(), 1.0, &mut rng));
        z = ddim_step_clipped(&z, &eps, t, t_prev, schedule, config.eta, noise.as_ref(), config.clip_x0)?;
        if let Some(b) = &blend {
            let src = b
                .source
                .at(t_prev)
                .ok_or_else(|| Error::Contract(format!("no source latent at t={t_prev}")))?;
            blend_in_place(&mut z, src, b.masks)?;
        }
    }
    Ok(z)
}

/// Seeded standard-normal start latent.
pub fn seeded_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Edit the source video: invert it under the training conditionings (or
/// start from seeded noise), then denoise under the edit prompt with the
/// learned motion word.
pub fn edit_video(
    model: &TrainedModel,
    source: &VideoFrames,
    edit_prompt: &str,
    config: &SamplerConfig,
    masks: Option<&MotionMasks>,
) -> Result<VideoFrames> {
    config.validate(model.schedule.steps())?;
    let prompt = model.encoder.vocab.tokenize(edit_prompt)?;
    let bb = &model.backbone.config;
    let latent = source.to_latent(bb.height, bb.width)?;
    let n = latent.frames();
    let cond = build_edit_conditionings(&prompt, &model.motion, Some(&model.protagonist), &model.encoder, n)?;
    let uncond = model.unconditional(n, config.vary_uncond)?;
    let inversion = if config.invert_source || config.mask_blend {
        let src = model.training_conditionings(n)?;
        Some(invert_for_sampling(&model.backbone, &model.schedule, &latent.data, &src, &uncond, config)?)
    } else {
        None
    };
    let start = match (&inversion, config.invert_source) {
        (Some(inv), true) => inv.z_t.clone(),
        _ => seeded_noise(latent.data.shape(), config.seed),
    };
    let blend = if config.mask_blend {
        let masks = masks.ok_or_else(|| {
            Error::Dependency("mask blending needs motion masks (run extract-masks)".into())
        })?;
        Some(Blend {
            source: inversion.as_ref().expect("inverted for blending"),
            masks,
        })
    } else {
        None
    };
    let z = sample(&model.backbone, &model.schedule, &start, &cond, &uncond, config, blend)?;
    Ok(latent_to_frames(&z, source.height(), source.width())?.clamp())
}
