//! Image-model pretraining on the shapes world and the two-stage inversion:
//! stage 1 registers the protagonist word on frames treated as images,
//! stage 2 inflates the model and learns the motion word on the video.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::backbone::{Backbone, BackboneConfig};
use crate::checkpoint::{Container, CKPT_VERSION, WORDS_VERSION};
use crate::error::{ensure, Error, Result};
use crate::fixtures::ShapeWorld;
use crate::losses::{cross_attention_loss_graph, ldm_loss_graph, total_loss, CaScaling, LossReport};
use crate::motion_embedding::{
    build_frame_conditionings, conditionings_on_graph, FrameConditionings, GammaConfig,
    MotionVars, MotionWordParams, ProtagonistEmbedding, PseudoWords, MOTION_PREFIX,
    PROTAGONIST_NAME,
};
use crate::params::{hex, AdamW, ParamStore};
use crate::pseudo_flow::{masks_from_video, CacheStatus, MaskConfig, MotionMasks};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor;
use crate::text::{TextEncoder, TextEncoderConfig, TokenizedPrompt, Vocab};
use crate::sampler::{invert_for_sampling, sample, SamplerConfig};
use crate::video::{latent_to_frames, LatentVideo, VideoFrames};

/// Deterministic per-step generator derived from `(seed, stage, step)`.
pub fn step_rng(seed: u64, stage: u8, step: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([stage]);
    h.update((step as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub stage: u8,
    pub step: usize,
    #[serde(flatten)]
    pub report: LossReport,
    /// Stage-2 step trained on the empty prompt (no regularizer).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub uncond: bool,
}

// ---- pretraining ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of captions replaced by the empty prompt.
    pub caption_dropout: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 6,
            lr: 2e-3,
            caption_dropout: 0.1,
            seed: 0,
        }
    }
}

/// Cosine decay from `lr` to `lr / 10`.
fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    let p = step as f64 / total.max(1) as f64;
    lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Train the image-mode backbone as a text-to-image model on the shapes
/// world. `progress` receives `(step, loss)`.
pub fn pretrain_image_model(
    config: &BackboneConfig,
    encoder: &TextEncoder,
    schedule: &DiffusionSchedule,
    pre: &PretrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<Backbone> {
    ensure!(!config.video, Config, "pretraining needs an image-mode backbone");
    let mut model = Backbone::new(config.clone())?;
    let world = ShapeWorld::default();
    let empty = encoder.vocab.tokenize("")?;
    let mut opt = AdamW::new(0.0);
    let mut cache: BTreeMap<String, Tensor> = BTreeMap::new();
    for step in 0..pre.steps {
        let mut rng = step_rng(pre.seed, 0, step);
        let mut images = Vec::with_capacity(pre.batch);
        let mut conds = Vec::with_capacity(pre.batch);
        let mut ts = Vec::with_capacity(pre.batch);
        for _ in 0..pre.batch {
            let (img, caption) = world.sample(&mut rng);
            images.push(img);
            let caption = if rng.random::<f64>() < pre.caption_dropout {
                String::new()
            } else {
                caption
            };
            let enc = match cache.get(&caption) {
                Some(e) => e.clone(),
                None => {
                    let p = if caption.is_empty() {
                        empty.clone()
                    } else {
                        encoder.vocab.tokenize(&caption)?
                    };
                    let e = encoder.encode_prompts(&[&p]).outer(0);
                    cache.insert(caption, e.clone());
                    e
                }
            };
            conds.push(enc);
            ts.push(rng.random_range(1..=schedule.steps()));
        }
        let frames = crate::video::VideoFrames::new(Tensor::stack(&images)?)?;
        let z0 = frames.to_latent(config.height, config.width)?;
        let noise = Tensor::randn(z0.data.shape(), 1.0, &mut rng);
        let zt = noisy_per_frame(schedule, &z0.data, &noise, &ts)?;
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, |_| true);
        let z = g.constant(zt);
        let c = g.constant(Tensor::stack(&conds)?);
        let out = model.forward(&mut g, &b, z, &ts, c);
        let target = g.constant(noise);
        let loss = ldm_loss_graph(&mut g, out.noise_pred, target);
        let value = g.value(loss).item();
        let mut grads = g.backward(loss);
        let grads = b.collect(&mut grads);
        let lr = cosine_lr(pre.lr, step, pre.steps);
        opt.step(&mut model.params, &grads, |_| lr)?;
        progress(step, value);
    }
    Ok(model)
}

/// Noise each frame to its own timestep.
pub fn noisy_per_frame(
    schedule: &DiffusionSchedule,
    z0: &Tensor,
    noise: &Tensor,
    ts: &[usize],
) -> Result<Tensor> {
    let n = z0.shape()[0];
    ensure!(ts.len() == n, Contract, "need one timestep per frame");
    let per = z0.len() / n;
    let mut out = Vec::with_capacity(z0.len());
    for (f, &t) in ts.iter().enumerate() {
        schedule.check_timestep(t)?;
        let ab = schedule.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (x, e) = (&z0.data()[f * per..(f + 1) * per], &noise.data()[f * per..(f + 1) * per]);
        out.extend(x.iter().zip(e).map(|(x, e)| a * x + s * e));
    }
    Tensor::new(z0.shape(), out)
}

pub fn pretrain_key(config: &BackboneConfig, encoder: &TextEncoder, pre: &PretrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).unwrap_or_default());
    h.update(serde_json::to_vec(&encoder.config).unwrap_or_default());
    h.update(serde_json::to_vec(&encoder.vocab).unwrap_or_default());
    h.update(serde_json::to_vec(pre).unwrap_or_default());
    hex(&h.finalize())[..16].to_string()
}

pub fn save_backbone(model: &Backbone, path: &Path) -> Result<()> {
    let meta = serde_json::json!({ "backbone": model.config });
    Container::new(CKPT_VERSION, model.params.clone().into_map(), meta).save(path)
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let c = Container::load(path, CKPT_VERSION)?;
    let config: BackboneConfig = serde_json::from_value(
        c.meta
            .get("backbone")
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("{}: no backbone config", path.display())))?,
    )?;
    let params: BTreeMap<String, Tensor> = c
        .tensors
        .into_iter()
        .filter(|(k, _)| !k.starts_with("adam.") && !k.starts_with(MOTION_PREFIX) && k != PROTAGONIST_NAME && k != "masks")
        .collect();
    let reference = Backbone::new(config.clone())?;
    for name in reference.params.names() {
        ensure!(params.contains_key(name), Checkpoint, "{}: missing `{name}`", path.display());
    }
    Ok(Backbone {
        config,
        params: ParamStore::from_map(params),
    })
}

/// Load the pretrained image model from `dir`, training and storing it on a
/// miss. The file name carries a digest of every input to pretraining.
pub fn pretrained_image_model(
    dir: &Path,
    config: &BackboneConfig,
    encoder: &TextEncoder,
    schedule: &DiffusionSchedule,
    pre: &PretrainConfig,
    progress: impl FnMut(usize, f64),
) -> Result<(Backbone, PathBuf)> {
    let path = dir.join(format!("toy-t2i-{}.ckpt", pretrain_key(config, encoder, pre)));
    if path.exists() {
        return Ok((load_backbone(&path)?, path));
    }
    let model = pretrain_image_model(config, encoder, schedule, pre, progress)?;
    save_backbone(&model, &path)?;
    Ok((model, path))
}

// ---- two-stage training ---------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Stage-2 steps of plain reconstruction before masks are computed.
    pub warmup_steps: usize,
    /// Frames per stage-1 step.
    pub stage1_batch: usize,
    pub lr_protagonist: f64,
    pub lr_motion: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub lambda_attn: f64,
    /// Compute masks and the cross-attention term at all.
    pub use_masks: bool,
    pub masks: MaskConfig,
    /// Backbone parameters trained in stage 2: names containing any entry.
    pub trainable: Vec<String>,
    pub two_layer_motion: bool,
    pub gamma: GammaConfig,
    /// Fixed `(t, noise)` draws used to compare losses before and after.
    pub probes: usize,
    /// Probability of a stage-2 step on the empty prompt, which keeps the
    /// unconditional branch of guidance on the source video.
    pub uncond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 250,
            stage2_steps: 250,
            warmup_steps: 50,
            stage1_batch: 4,
            lr_protagonist: 1e-3,
            lr_motion: 1e-3,
            lr_backbone: 1e-4,
            weight_decay: 1e-2,
            seed: 0,
            lambda_attn: 0.1,
            use_masks: true,
            masks: MaskConfig::default(),
            trainable: vec![".ta.".into(), ".st.q".into()],
            two_layer_motion: false,
            gamma: GammaConfig::default(),
            probes: 16,
            uncond_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, steps) in [("stage1_steps", self.stage1_steps), ("stage2_steps", self.stage2_steps)] {
            if steps == 0 {
                v.push(format!("{name} must be > 0"));
            }
        }
        if self.warmup_steps >= self.stage2_steps && self.use_masks {
            v.push(format!(
                "warmup_steps {} must be below stage2_steps {}",
                self.warmup_steps, self.stage2_steps
            ));
        }
        if self.stage1_batch == 0 {
            v.push("stage1_batch must be > 0".into());
        }
        for (name, lr) in [
            ("lr_protagonist", self.lr_protagonist),
            ("lr_motion", self.lr_motion),
            ("lr_backbone", self.lr_backbone),
        ] {
            if !(lr > 0.0) {
                v.push(format!("{name} must be > 0, got {lr}"));
            }
        }
        if !(self.lambda_attn >= 0.0) {
            v.push(format!("lambda_attn must be >= 0, got {}", self.lambda_attn));
        }
        if !(self.masks.quantile > 0.0 && self.masks.quantile < 1.0) {
            v.push(format!("mask quantile {} outside (0, 1)", self.masks.quantile));
        }
        if self.masks.t_probe.is_empty() {
            v.push("mask t_probe must be nonempty".into());
        }
        if !(0.0..1.0).contains(&self.uncond_dropout) {
            v.push(format!("uncond_dropout {} outside [0, 1)", self.uncond_dropout));
        }
        if self.gamma.dim % 2 != 0 {
            v.push(format!("gamma dim {} must be even", self.gamma.dim));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    fn lr_of(&self, name: &str) -> f64 {
        if name == PROTAGONIST_NAME {
            self.lr_protagonist
        } else if name.starts_with(MOTION_PREFIX) {
            self.lr_motion
        } else {
            self.lr_backbone
        }
    }

    pub fn is_trainable_backbone(&self, name: &str) -> bool {
        self.trainable.iter().any(|p| name.contains(p.as_str()))
    }
}

/// Resumable optimization state of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: u8,
    /// Completed steps.
    pub step: usize,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub masks: Option<MotionMasks>,
    pub log: Vec<LogLine>,
}

impl TrainState {
    pub fn to_container(&self, meta: serde_json::Value) -> Result<Container> {
        let mut tensors = self.params.clone().into_map();
        tensors.extend(self.optimizer.state_tensors());
        if let Some(m) = &self.masks {
            tensors.insert("masks".into(), m.masks.clone());
        }
        let meta = serde_json::json!({
            "stage": self.stage,
            "step": self.step,
            "weight_decay": self.optimizer.weight_decay,
            "mask_meta": self.masks.as_ref().map(|m| &m.meta),
            "log": self.log,
            "extra": meta,
        });
        Ok(Container::new(CKPT_VERSION, tensors, meta))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let field = |k: &str| {
            c.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint meta lacks `{k}`")))
        };
        let stage: u8 = serde_json::from_value(field("stage")?)?;
        let step: usize = serde_json::from_value(field("step")?)?;
        let wd: f64 = serde_json::from_value(field("weight_decay")?)?;
        let log: Vec<LogLine> = serde_json::from_value(field("log")?)?;
        let mask_meta: Option<crate::pseudo_flow::MaskMeta> =
            serde_json::from_value(field("mask_meta")?)?;
        let mut params = BTreeMap::new();
        let mut adam = BTreeMap::new();
        let mut masks = None;
        for (k, t) in &c.tensors {
            if k.starts_with("adam.") {
                adam.insert(k.clone(), t.clone());
            } else if k == "masks" {
                masks = Some(t.clone());
            } else {
                params.insert(k.clone(), t.clone());
            }
        }
        let masks = match (masks, mask_meta) {
            (Some(masks), Some(meta)) => Some(MotionMasks { masks, meta }),
            (None, None) => None,
            _ => return Err(Error::Checkpoint("mask tensor and metadata disagree".into())),
        };
        Ok(Self {
            stage,
            step,
            params: ParamStore::from_map(params),
            optimizer: AdamW::from_state_tensors(wd, &adam),
            masks,
            log,
        })
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.to_container(meta)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, CKPT_VERSION)?)
    }
}

/// Frozen pieces shared by both stages.
pub struct Context<'a> {
    pub encoder: &'a TextEncoder,
    pub schedule: &'a DiffusionSchedule,
    pub latent: &'a LatentVideo,
}

/// Fixed probe draws: `(timesteps per frame, noise)`.
fn probe_set(seed: u64, stage: u8, count: usize, shape: &[usize], per_frame_t: bool, steps: usize) -> Vec<(Vec<usize>, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9b0b_e000 + stage as u64));
    (0..count)
        .map(|_| {
            let ts = if per_frame_t {
                (0..shape[0]).map(|_| rng.random_range(1..=steps)).collect()
            } else {
                vec![rng.random_range(1..=steps)]
            };
            (ts, Tensor::randn(shape, 1.0, &mut rng))
        })
        .collect()
}

fn expand_ts(ts: &[usize], n: usize) -> Vec<usize> {
    if ts.len() == n {
        ts.to_vec()
    } else {
        vec![ts[0]; n]
    }
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub protagonist: ProtagonistEmbedding,
    pub state: TrainState,
    /// Mean LDM loss over the probe set at the initial and final `v_pro`.
    pub probe_initial: f64,
    pub probe_final: f64,
}

/// Frame indices and timesteps drawn for stage-1 step `step`.
fn stage1_draw(cfg: &TrainConfig, step: usize, n: usize, steps: usize, shape: &[usize]) -> (Vec<usize>, Vec<usize>, Tensor) {
    let mut rng = step_rng(cfg.seed, 1, step);
    let frames: Vec<usize> = (0..cfg.stage1_batch).map(|_| rng.random_range(0..n)).collect();
    let ts: Vec<usize> = (0..cfg.stage1_batch).map(|_| rng.random_range(1..=steps)).collect();
    let mut s = shape.to_vec();
    s[0] = cfg.stage1_batch;
    let noise = Tensor::randn(&s, 1.0, &mut rng);
    (frames, ts, noise)
}

fn stage1_loss(
    image: &Backbone,
    ctx: &Context<'_>,
    prompt: &TokenizedPrompt,
    v_pro: &Tensor,
    z0: &Tensor,
    ts: &[usize],
    noise: &Tensor,
    train: bool,
) -> Result<(f64, Option<Tensor>)> {
    let n = z0.shape()[0];
    let mut g = Graph::new();
    let v = g.leaf(v_pro.clone(), train);
    let cond = conditionings_on_graph(
        &mut g,
        prompt,
        PseudoWords {
            motion: None,
            protagonist: Some(v),
        },
        ctx.encoder,
        n,
    )?;
    let b = image.params.bind(&mut g, |_| false);
    let zt = noisy_per_frame(ctx.schedule, z0, noise, &expand_ts(ts, n))?;
    let z = g.constant(zt);
    let out = image.forward(&mut g, &b, z, ts, cond);
    let target = g.constant(noise.clone());
    let loss = ldm_loss_graph(&mut g, out.noise_pred, target);
    let value = g.value(loss).item();
    let grad = train.then(|| {
        let mut grads = g.backward(loss);
        grads.take(v).expect("v_pro gradient")
    });
    Ok((value, grad))
}

/// Stage 1: optimize `v_pro` alone with the LDM loss on frames as images.
/// Passing a `resume` state continues from its step.
pub fn train_stage1(
    image: &Backbone,
    ctx: &Context<'_>,
    prompt: &TokenizedPrompt,
    v_pro_init: &Tensor,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    mut sink: impl FnMut(&LogLine),
) -> Result<Stage1Output> {
    cfg.validate()?;
    ensure!(!image.config.video, Contract, "stage 1 runs the image-mode model");
    ensure!(
        prompt.protagonist_slot.is_some(),
        Prompt,
        "stage-1 prompt `{}` has no ⟨pro⟩ slot",
        prompt.text
    );
    let z0 = &ctx.latent.data;
    let n = z0.shape()[0];
    let mut state = match resume {
        Some(s) => {
            ensure!(s.stage == 1, Checkpoint, "resume state is from stage {}", s.stage);
            s
        }
        None => {
            let mut params = ParamStore::new();
            params.insert(PROTAGONIST_NAME, v_pro_init.clone());
            TrainState {
                stage: 1,
                step: 0,
                params,
                optimizer: AdamW::new(cfg.weight_decay),
                masks: None,
                log: Vec::new(),
            }
        }
    };
    while state.step < cfg.stage1_steps {
        let (frames, ts, noise) = stage1_draw(cfg, state.step, n, ctx.schedule.steps(), z0.shape());
        let batch = Tensor::stack(&frames.iter().map(|&f| z0.outer(f)).collect::<Vec<_>>())?;
        let v = state.params.get(PROTAGONIST_NAME).unwrap().clone();
        let (loss, grad) = stage1_loss(image, ctx, prompt, &v, &batch, &ts, &noise, true)?;
        let mut grads = BTreeMap::new();
        grads.insert(PROTAGONIST_NAME.to_string(), grad.unwrap());
        state.optimizer.step(&mut state.params, &grads, |n| cfg.lr_of(n))?;
        let line = LogLine {
            stage: 1,
            step: state.step,
            report: total_loss(loss, 0.0, 0.0)?,
            uncond: false,
        };
        sink(&line);
        state.log.push(line);
        state.step += 1;
    }
    let probes = probe_set(cfg.seed, 1, cfg.probes, z0.shape(), true, ctx.schedule.steps());
    let probe_mean = |v: &Tensor| -> Result<f64> {
        let mut s = 0.0;
        for (ts, noise) in &probes {
            s += stage1_loss(image, ctx, prompt, v, z0, ts, noise, false)?.0;
        }
        Ok(s / probes.len().max(1) as f64)
    };
    let v_final = state.params.get(PROTAGONIST_NAME).unwrap().clone();
    Ok(Stage1Output {
        protagonist: ProtagonistEmbedding::new(v_final.clone())?,
        probe_initial: probe_mean(v_pro_init)?,
        probe_final: probe_mean(&v_final)?,
        state,
    })
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub backbone: Backbone,
    pub motion: MotionWordParams,
    pub state: TrainState,
    pub masks: Option<MotionMasks>,
    /// Number of times masks were computed and written to the cache.
    pub mask_cache_writes: usize,
    pub probe_initial: LossReport,
    pub probe_final: LossReport,
}

/// Stage-2 inputs that stay fixed across steps.
pub struct Stage2Inputs<'a> {
    pub prompt: &'a TokenizedPrompt,
    pub protagonist: &'a ProtagonistEmbedding,
    /// Inflated video backbone at the start of stage 2.
    pub backbone: &'a Backbone,
    pub motion_init: &'a MotionWordParams,
    /// Directory for the mask cache; `None` keeps masks in memory.
    pub mask_cache: Option<&'a Path>,
}

fn split_store(store: &ParamStore, config: &BackboneConfig, gamma: GammaConfig) -> Result<(Backbone, MotionWordParams)> {
    let mut bb = BTreeMap::new();
    for (k, t) in store.iter() {
        if !k.starts_with(MOTION_PREFIX) && k != PROTAGONIST_NAME {
            bb.insert(k.clone(), t.clone());
        }
    }
    Ok((
        Backbone {
            config: config.clone(),
            params: ParamStore::from_map(bb),
        },
        MotionWordParams::from_store(store, gamma)?,
    ))
}

/// Loss of one stage-2 draw; returns the report and, when training,
/// gradients for the trainable names.
#[allow(clippy::too_many_arguments)]
fn stage2_loss(
    structure: &Backbone,
    store: &ParamStore,
    motion_shape: &MotionWordParams,
    ctx: &Context<'_>,
    inputs: &Stage2Inputs<'_>,
    cfg: &TrainConfig,
    masks: Option<&MotionMasks>,
    t: usize,
    noise: &Tensor,
    train: bool,
    uncond: bool,
) -> Result<(LossReport, BTreeMap<String, Tensor>)> {
    let z0 = &ctx.latent.data;
    let n = z0.shape()[0];
    let mut g = Graph::new();
    let b = store.bind(&mut g, |name| {
        train
            && (name.starts_with(MOTION_PREFIX)
                || (name != PROTAGONIST_NAME && cfg.is_trainable_backbone(name)))
    });
    let mvars = MotionVars::from_bindings(&b);
    let empty;
    let (prompt, words) = if uncond {
        empty = ctx.encoder.vocab.tokenize("")?;
        (&empty, PseudoWords { motion: None, protagonist: None })
    } else {
        (
            inputs.prompt,
            PseudoWords {
                motion: Some((motion_shape, mvars)),
                protagonist: Some(b.get(PROTAGONIST_NAME)),
            },
        )
    };
    let cond = conditionings_on_graph(&mut g, prompt, words, ctx.encoder, n)?;
    let zt = ctx.schedule.add_noise(z0, noise, t)?;
    let z = g.constant(zt);
    let out = structure.forward(&mut g, &b, z, &[t], cond);
    let target = g.constant(noise.clone());
    let ldm = ldm_loss_graph(&mut g, out.noise_pred, target);
    let mut objective = ldm;
    let mut attn_value = 0.0;
    let mut lambda = 0.0;
    if let Some(m) = masks.filter(|_| !uncond) {
        let slot = inputs.prompt.motion_slot.expect("checked motion slot");
        let grids = structure
            .config
            .blocks()
            .into_iter()
            .map(|blk| (blk.id, blk.grid))
            .collect();
        let attn = cross_attention_loss_graph(
            &mut g,
            &out.cross_probs,
            &grids,
            &structure.config.mask_blocks,
            slot,
            m,
            CaScaling::MaxNorm,
        )?;
        attn_value = g.value(attn).item();
        lambda = cfg.lambda_attn;
        if lambda > 0.0 {
            let weighted = g.scale(attn, lambda);
            objective = g.add(ldm, weighted);
        }
    }
    let report = total_loss(g.value(ldm).item(), attn_value, lambda)?;
    let grads = if train {
        let mut grads = g.backward(objective);
        b.collect(&mut grads)
    } else {
        BTreeMap::new()
    };
    Ok((report, grads))
}

fn stage2_draw(cfg: &TrainConfig, step: usize, steps: usize, shape: &[usize]) -> (usize, Tensor, bool) {
    let mut rng = step_rng(cfg.seed, 2, step);
    let t = rng.random_range(1..=steps);
    let noise = Tensor::randn(shape, 1.0, &mut rng);
    let uncond = cfg.uncond_dropout > 0.0 && rng.random::<f64>() < cfg.uncond_dropout;
    (t, noise, uncond)
}

/// Stage 2: learn the motion word and the selected backbone layers on the
/// video under the LDM loss plus the cross-attention regularizer. Masks are
/// computed once, after `warmup_steps` reconstruction steps.
pub fn train_stage2(
    ctx: &Context<'_>,
    inputs: &Stage2Inputs<'_>,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    mut sink: impl FnMut(&LogLine),
) -> Result<Stage2Output> {
    cfg.validate()?;
    ensure!(inputs.backbone.config.video, Contract, "stage 2 needs the inflated video model");
    ensure!(
        inputs.prompt.motion_slot.is_some(),
        Prompt,
        "stage-2 prompt `{}` has no ⟨mot⟩ slot",
        inputs.prompt.text
    );
    ensure!(
        inputs.prompt.protagonist_slot.is_some(),
        Prompt,
        "stage-2 prompt `{}` has no ⟨pro⟩ slot",
        inputs.prompt.text
    );
    let z0 = &ctx.latent.data;
    let structure = inputs.backbone;
    let mut initial = inputs.backbone.params.clone();
    for (k, t) in inputs.motion_init.to_store().iter() {
        initial.insert(k.clone(), t.clone());
    }
    initial.insert(PROTAGONIST_NAME, inputs.protagonist.v_pro.clone());
    let mut state = match resume {
        Some(s) => {
            ensure!(s.stage == 2, Checkpoint, "resume state is from stage {}", s.stage);
            s
        }
        None => TrainState {
            stage: 2,
            step: 0,
            params: initial.clone(),
            optimizer: AdamW::new(cfg.weight_decay),
            masks: None,
            log: Vec::new(),
        },
    };
    let mut cache_writes = 0;
    while state.step < cfg.stage2_steps {
        if cfg.use_masks && state.step >= cfg.warmup_steps && state.masks.is_none() {
            let (bb, motion) = split_store(&state.params, &structure.config, cfg.gamma)?;
            let cond = build_frame_conditionings(
                inputs.prompt,
                Some(&motion),
                Some(inputs.protagonist),
                ctx.encoder,
                ctx.latent.frames(),
            )?;
            let (masks, status) =
                masks_from_video(&bb, ctx.schedule, ctx.latent, &cond, &cfg.masks, inputs.mask_cache)?;
            if status != CacheStatus::Hit {
                cache_writes += 1;
            }
            state.masks = Some(masks);
        }
        let (t, noise, uncond) = stage2_draw(cfg, state.step, ctx.schedule.steps(), z0.shape());
        let (report, grads) = stage2_loss(
            structure,
            &state.params,
            inputs.motion_init,
            ctx,
            inputs,
            cfg,
            state.masks.as_ref(),
            t,
            &noise,
            true,
            uncond,
        )?;
        state.optimizer.step(&mut state.params, &grads, |n| cfg.lr_of(n))?;
        let line = LogLine {
            stage: 2,
            step: state.step,
            report,
            uncond,
        };
        sink(&line);
        state.log.push(line);
        state.step += 1;
    }
    let probes = probe_set(cfg.seed, 2, cfg.probes, z0.shape(), false, ctx.schedule.steps());
    let probe_mean = |store: &ParamStore| -> Result<LossReport> {
        let (mut l, mut a) = (0.0, 0.0);
        let mut lambda = 0.0;
        for (ts, noise) in &probes {
            let (r, _) = stage2_loss(
                structure,
                store,
                inputs.motion_init,
                ctx,
                inputs,
                cfg,
                state.masks.as_ref(),
                ts[0],
                noise,
                false,
                false,
            )?;
            l += r.ldm;
            a += r.attn;
            lambda = r.lambda_attn;
        }
        let k = probes.len().max(1) as f64;
        total_loss(l / k, a / k, lambda)
    };
    let probe_initial = probe_mean(&initial)?;
    let probe_final = probe_mean(&state.params)?;
    let (backbone, motion) = split_store(&state.params, &structure.config, cfg.gamma)?;
    Ok(Stage2Output {
        backbone,
        motion,
        masks: state.masks.clone(),
        state,
        mask_cache_writes: cache_writes,
        probe_initial,
        probe_final,
    })
}

// ---- trained bundle -------------------------------------------------------

/// Prompts used across the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompts {
    pub source: String,
    pub stage1: String,
    pub stage2: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Self {
            source: "a photo of a red square sliding".into(),
            stage1: "a photo of <pro>".into(),
            stage2: "a photo of <pro> <mot>".into(),
        }
    }
}

/// Everything needed to reconstruct or edit after stage 2.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub backbone: Backbone,
    pub motion: MotionWordParams,
    pub protagonist: ProtagonistEmbedding,
    pub encoder: TextEncoder,
    pub schedule: DiffusionSchedule,
    pub prompts: Prompts,
}

impl TrainedModel {
    /// Unconditional conditionings: the empty prompt, or with
    /// `vary_per_frame` the lone motion word.
    pub fn unconditional(&self, n: usize, vary_per_frame: bool) -> Result<FrameConditionings> {
        if vary_per_frame {
            let p = self.encoder.vocab.tokenize("<mot>")?;
            build_frame_conditionings(&p, Some(&self.motion), None, &self.encoder, n)
        } else {
            let p = self.encoder.vocab.tokenize("")?;
            Ok(FrameConditionings::repeated(&self.encoder.encode_prompts(&[&p]).outer(0), n))
        }
    }

    /// Stage-2 training conditionings.
    pub fn training_conditionings(&self, n: usize) -> Result<FrameConditionings> {
        let p = self.encoder.vocab.tokenize(&self.prompts.stage2)?;
        build_frame_conditionings(&p, Some(&self.motion), Some(&self.protagonist), &self.encoder, n)
    }
}

/// What a stage-2 checkpoint records besides tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub backbone: BackboneConfig,
    pub gamma: GammaConfig,
    pub prompts: Prompts,
    pub encoder: TextEncoderConfig,
    pub vocab: Vocab,
}

impl TrainedModel {
    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            backbone: self.backbone.config.clone(),
            gamma: self.motion.gamma,
            prompts: self.prompts.clone(),
            encoder: self.encoder.config,
            vocab: self.encoder.vocab.clone(),
        }
    }

    /// Rebuild from stage-2 parameters (backbone ∪ `mot.*` ∪ `pro.v`).
    pub fn from_state(state: &TrainState, meta: &ModelMeta) -> Result<Self> {
        ensure!(state.stage == 2, Checkpoint, "expected a stage-2 state, got stage {}", state.stage);
        let (backbone, motion) = split_store(&state.params, &meta.backbone, meta.gamma)?;
        let v_pro = state
            .params
            .get(PROTAGONIST_NAME)
            .ok_or_else(|| Error::Checkpoint(format!("stage-2 state lacks `{PROTAGONIST_NAME}`")))?;
        Ok(Self {
            backbone,
            motion,
            protagonist: ProtagonistEmbedding::new(v_pro.clone())?,
            encoder: TextEncoder::new(meta.vocab.clone(), meta.encoder),
            schedule: DiffusionSchedule::default(),
            prompts: meta.prompts.clone(),
        })
    }

    /// Load from a stage-2 checkpoint written by [`TrainState::save`] with a
    /// [`ModelMeta`] as extra metadata.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Dependency(format!(
                "stage-2 checkpoint {} not found (run train-stage2 first)",
                path.display()
            )));
        }
        let c = Container::load(path, CKPT_VERSION)?;
        let state = TrainState::from_container(&c)?;
        let meta: ModelMeta = serde_json::from_value(
            c.meta
                .get("extra")
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("{}: no model metadata", path.display())))?,
        )?;
        Self::from_state(&state, &meta)
    }
}

/// Sample the training prompt from the DDIM-inverted source.
pub fn reconstruct(model: &TrainedModel, source: &VideoFrames, config: &SamplerConfig) -> Result<VideoFrames> {
    config.validate(model.schedule.steps())?;
    let bb = &model.backbone.config;
    let latent = source.to_latent(bb.height, bb.width)?;
    let n = latent.frames();
    let cond = model.training_conditionings(n)?;
    let uncond = model.unconditional(n, config.vary_uncond)?;
    let inv = invert_for_sampling(&model.backbone, &model.schedule, &latent.data, &cond, &uncond, config)?;
    let z = sample(&model.backbone, &model.schedule, &inv.z_t, &cond, &uncond, config, None)?;
    Ok(latent_to_frames(&z, source.height(), source.width())?.clamp())
}

/// Pseudo-word bundle: motion parameters, `v_pro`, γ config and prompts.
pub fn save_words(path: &Path, motion: &MotionWordParams, pro: &ProtagonistEmbedding, prompts: &Prompts) -> Result<()> {
    let mut t = motion.to_store().into_map();
    t.insert(PROTAGONIST_NAME.into(), pro.v_pro.clone());
    let meta = serde_json::json!({ "gamma": motion.gamma, "prompts": prompts });
    Container::new(WORDS_VERSION, t, meta).save(path)
}

pub fn load_words(path: &Path) -> Result<(MotionWordParams, ProtagonistEmbedding, Prompts)> {
    let c = Container::load(path, WORDS_VERSION)?;
    let gamma: GammaConfig = serde_json::from_value(
        c.meta.get("gamma").cloned().ok_or_else(|| Error::Checkpoint("words bundle lacks gamma".into()))?,
    )?;
    let prompts: Prompts = serde_json::from_value(
        c.meta.get("prompts").cloned().ok_or_else(|| Error::Checkpoint("words bundle lacks prompts".into()))?,
    )?;
    let store = ParamStore::from_map(c.tensors.clone());
    let motion = MotionWordParams::from_store(&store, gamma)?;
    let pro = ProtagonistEmbedding::new(c.tensor(PROTAGONIST_NAME)?.clone())?;
    Ok((motion, pro, prompts))
}
