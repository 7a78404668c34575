//! Flat key-value run configuration (TOML) and its views onto the module
//! configs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::motion_embedding::GammaConfig;
use crate::pseudo_flow::{Combiner, FlowConfig, KeyFramePolicy, MaskConfig};
use crate::sampler::SamplerConfig;
use crate::text::{TextEncoderConfig, Vocab};
use crate::trainer::{PretrainConfig, Prompts, TrainConfig};

/// Every setting of a run. Relative paths resolve against `base_dir`,
/// which is the directory of the loaded file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_dir: String,
    /// Directory of `frame_%04d.png`; empty selects the built-in
    /// moving-square video.
    pub video_dir: String,
    pub frame_height: usize,
    pub frame_width: usize,
    pub source_prompt: String,
    pub stage1_prompt: String,
    pub stage2_prompt: String,
    pub edit_prompts: Vec<String>,
    /// Word whose embedding initializes `v_pro`.
    pub protagonist_init: String,
    /// Source motion word, used as `v_b`.
    pub motion_word: String,
    pub seed: u64,

    /// Pretrained image checkpoint; empty looks up the model cache.
    pub pretrained_ckpt: String,
    /// Where pretrained image models are cached; empty uses `<run_dir>/../cache`.
    pub model_cache_dir: String,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub caption_dropout: f64,
    /// Seeds backbone initialization and pretraining, independent of `seed`
    /// so that runs with different seeds share one pretrained model.
    pub pretrain_seed: u64,

    pub latent_height: usize,
    pub latent_width: usize,
    pub widths: Vec<usize>,
    pub heads: usize,
    pub time_dim: usize,
    pub ff_mult: usize,
    pub conv: bool,
    pub pos_embed: bool,
    pub mask_blocks: Vec<usize>,

    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub warmup_steps: usize,
    pub stage1_batch: usize,
    pub lr_protagonist: f64,
    pub lr_motion: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub lambda_attn: f64,
    pub use_masks: bool,
    pub trainable: Vec<String>,
    pub two_layer_motion: bool,
    pub gamma_dim: usize,
    pub gamma_base: f64,
    pub probes: usize,
    pub uncond_dropout: f64,

    pub mask_quantile: f64,
    pub mask_floor: f64,
    pub mask_smooth_radius: usize,
    pub key_frame_policy: KeyFramePolicy,
    pub combiner: Combiner,
    pub flow_normalize: bool,
    pub t_probe: Vec<usize>,
    pub mask_noise_seed: u64,

    pub ddim_steps: usize,
    pub guidance_scale: f64,
    pub eta: f64,
    pub invert_source: bool,
    pub mask_blend: bool,
    pub vary_uncond: bool,
    pub clip_x0: bool,
    pub guided_inversion: bool,

    /// Latent change below which eval treats a pixel as static.
    pub eval_static_tolerance: f64,

    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        let tc = TrainConfig::default();
        let sc = SamplerConfig::default();
        let pc = PretrainConfig::default();
        let prompts = Prompts::default();
        Self {
            run_dir: "runs/moving-square".into(),
            video_dir: String::new(),
            frame_height: 32,
            frame_width: 32,
            source_prompt: prompts.source,
            stage1_prompt: prompts.stage1,
            stage2_prompt: prompts.stage2,
            edit_prompts: vec![
                "a photo of a blue circle <mot>".into(),
                "a photo of a green diamond <mot>".into(),
            ],
            protagonist_init: "object".into(),
            motion_word: "sliding".into(),
            seed: 0,
            pretrained_ckpt: String::new(),
            model_cache_dir: String::new(),
            pretrain_steps: pc.steps,
            pretrain_batch: pc.batch,
            pretrain_lr: pc.lr,
            caption_dropout: pc.caption_dropout,
            pretrain_seed: pc.seed,
            latent_height: bb.height,
            latent_width: bb.width,
            widths: bb.widths,
            heads: bb.heads,
            time_dim: bb.time_dim,
            ff_mult: bb.ff_mult,
            conv: bb.conv,
            pos_embed: bb.pos_embed,
            mask_blocks: bb.mask_blocks,
            stage1_steps: tc.stage1_steps,
            stage2_steps: tc.stage2_steps,
            warmup_steps: tc.warmup_steps,
            stage1_batch: tc.stage1_batch,
            lr_protagonist: tc.lr_protagonist,
            lr_motion: tc.lr_motion,
            lr_backbone: tc.lr_backbone,
            weight_decay: tc.weight_decay,
            lambda_attn: tc.lambda_attn,
            use_masks: tc.use_masks,
            trainable: tc.trainable,
            two_layer_motion: tc.two_layer_motion,
            gamma_dim: tc.gamma.dim,
            gamma_base: tc.gamma.base,
            probes: tc.probes,
            uncond_dropout: tc.uncond_dropout,
            mask_quantile: tc.masks.quantile,
            mask_floor: tc.masks.floor,
            mask_smooth_radius: tc.masks.smooth_radius,
            key_frame_policy: tc.masks.flow.key_frame_policy,
            combiner: tc.masks.flow.combiner,
            flow_normalize: tc.masks.flow.normalize,
            t_probe: tc.masks.t_probe,
            mask_noise_seed: tc.masks.noise_seed,
            ddim_steps: sc.ddim_steps,
            guidance_scale: sc.guidance_scale,
            eta: sc.eta,
            invert_source: sc.invert_source,
            mask_blend: sc.mask_blend,
            vary_uncond: sc.vary_uncond,
            clip_x0: sc.clip_x0,
            guided_inversion: sc.guided_inversion,
            eval_static_tolerance: 0.1,
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Ok(cfg)
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Run directory; `SAVEKIT_RUN_DIR` takes precedence.
    pub fn run_dir(&self) -> PathBuf {
        match std::env::var_os("SAVEKIT_RUN_DIR") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.resolve(&self.run_dir),
        }
    }

    pub fn model_cache_dir(&self) -> PathBuf {
        if self.model_cache_dir.is_empty() {
            self.run_dir().join("..").join("cache")
        } else {
            self.resolve(&self.model_cache_dir)
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::default()
    }

    pub fn encoder_config(&self) -> TextEncoderConfig {
        TextEncoderConfig::default()
    }

    /// Image-mode backbone.
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            height: self.latent_height,
            width: self.latent_width,
            widths: self.widths.clone(),
            heads: self.heads,
            text_dim: self.encoder_config().dim,
            time_dim: self.time_dim,
            ff_mult: self.ff_mult,
            conv: self.conv,
            pos_embed: self.pos_embed,
            video: false,
            mask_blocks: self.mask_blocks.clone(),
            seed: self.pretrain_seed,
            ..BackboneConfig::default()
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch: self.pretrain_batch,
            lr: self.pretrain_lr,
            caption_dropout: self.caption_dropout,
            seed: self.pretrain_seed,
        }
    }

    pub fn masks(&self) -> MaskConfig {
        MaskConfig {
            quantile: self.mask_quantile,
            floor: self.mask_floor,
            smooth_radius: self.mask_smooth_radius,
            flow: FlowConfig {
                key_frame_policy: self.key_frame_policy,
                combiner: self.combiner,
                normalize: self.flow_normalize,
            },
            t_probe: self.t_probe.clone(),
            noise_seed: self.mask_noise_seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            stage1_steps: self.stage1_steps,
            stage2_steps: self.stage2_steps,
            warmup_steps: self.warmup_steps,
            stage1_batch: self.stage1_batch,
            lr_protagonist: self.lr_protagonist,
            lr_motion: self.lr_motion,
            lr_backbone: self.lr_backbone,
            weight_decay: self.weight_decay,
            seed: self.seed,
            lambda_attn: self.lambda_attn,
            use_masks: self.use_masks,
            masks: self.masks(),
            trainable: self.trainable.clone(),
            two_layer_motion: self.two_layer_motion,
            gamma: GammaConfig {
                dim: self.gamma_dim,
                base: self.gamma_base,
            },
            probes: self.probes,
            uncond_dropout: self.uncond_dropout,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            ddim_steps: self.ddim_steps,
            guidance_scale: self.guidance_scale,
            eta: self.eta,
            seed: self.seed,
            invert_source: self.invert_source,
            mask_blend: self.mask_blend,
            vary_uncond: self.vary_uncond,
            clip_x0: self.clip_x0,
            guided_inversion: self.guided_inversion,
        }
    }

    pub fn prompts(&self) -> Prompts {
        Prompts {
            source: self.source_prompt.clone(),
            stage1: self.stage1_prompt.clone(),
            stage2: self.stage2_prompt.clone(),
        }
    }

    /// All problems at once: module invariants, prompt slots and paths.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Err(Error::Validation(bb)) = self.backbone().validate() {
            v.extend(bb);
        }
        v.extend(self.train().violations());
        v.extend(self.sampler().violations(self.backbone().timesteps));
        if self.pretrain_steps == 0 || self.pretrain_batch == 0 {
            v.push("pretrain_steps and pretrain_batch must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.caption_dropout) {
            v.push(format!("caption_dropout {} outside [0, 1]", self.caption_dropout));
        }
        if self.frame_height < self.latent_height || self.frame_width < self.latent_width {
            v.push("frames must be at least as large as the latent grid".into());
        }
        let timesteps = self.backbone().timesteps;
        for &t in &self.t_probe {
            if !(1..=timesteps).contains(&t) {
                v.push(format!("t_probe {t} outside [1, {timesteps}]"));
            }
        }
        let vocab = self.vocab();
        let mut check_prompt = |name: &str, text: &str, pro: bool, mot: bool| match vocab.tokenize(text) {
            Err(e) => v.push(format!("{name}: {e}")),
            Ok(p) => {
                if pro && p.protagonist_slot.is_none() {
                    v.push(format!("{name} `{text}` needs a ⟨pro⟩ slot"));
                }
                if mot && p.motion_slot.is_none() {
                    v.push(format!("{name} `{text}` needs a ⟨mot⟩ slot"));
                }
            }
        };
        check_prompt("source_prompt", &self.source_prompt, false, false);
        check_prompt("stage1_prompt", &self.stage1_prompt, true, false);
        check_prompt("stage2_prompt", &self.stage2_prompt, true, true);
        for (k, e) in self.edit_prompts.iter().enumerate() {
            check_prompt(&format!("edit_prompts[{k}]"), e, false, true);
        }
        for (name, word) in [("protagonist_init", &self.protagonist_init), ("motion_word", &self.motion_word)] {
            if vocab.id(word).is_none() {
                v.push(format!("{name} `{word}` is not in the vocabulary"));
            }
        }
        for (name, path) in [("video_dir", &self.video_dir), ("pretrained_ckpt", &self.pretrained_ckpt)] {
            if !path.is_empty() && !self.resolve(path).exists() {
                v.push(format!("{name} {} does not exist", self.resolve(path).display()));
            }
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
}
