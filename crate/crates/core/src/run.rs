//! A run directory and the pipeline steps that read and write it.
//!
//! Layout: `config.toml`, `stage1.ckpt`, `stage2.ckpt`, `words.bin`,
//! `masks/`, `log.jsonl`, `reconstruct/`, `edits/<slug>/`, `eval.csv`,
//! `attention/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Denoiser};
use crate::checkpoint::write_atomic;
use crate::config::RunConfig;
use crate::error::{ensure, Error, Result};
use crate::eval::{
    evaluate_pair, named_shares, token_attention_share, MetricReport, PixelEmbedder,
    PseudoFlowEstimator,
};
use crate::fixtures::MovingShape;
use crate::motion_embedding::{
    build_edit_conditionings, build_frame_conditionings, MotionWordParams, ProtagonistEmbedding,
};
use crate::pseudo_flow::{masks_from_video, CacheStatus, MotionMasks};
use crate::sampler::edit_video;
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor;
use crate::text::TextEncoder;
use crate::trainer::{
    load_backbone, pretrain_key, pretrained_image_model, reconstruct, save_words, train_stage1,
    train_stage2, Context, LogLine, Stage1Output, Stage2Inputs, Stage2Output,
    TrainState, TrainedModel,
};
use crate::video::{ingest, write_frames, write_png_gray, LatentVideo, VideoFrames};

/// Directory searched for shipped pretrained image models before the cache.
pub const BUNDLED_MODELS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub encoder: TextEncoder,
    pub schedule: DiffusionSchedule,
}

/// Sidecar written next to every sampled video.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputMeta {
    pub prompt: String,
    pub seed: u64,
    pub config: crate::sampler::SamplerConfig,
}

/// Filesystem-friendly name of a prompt.
pub fn slug(prompt: &str) -> String {
    prompt
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

impl Run {
    /// Validate the configuration and bind it to its run directory.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.run_dir();
        let encoder = TextEncoder::new(config.vocab(), config.encoder_config());
        Ok(Self {
            config,
            dir,
            encoder,
            schedule: DiffusionSchedule::default(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Echo the effective configuration into the run directory.
    pub fn write_config(&self) -> Result<()> {
        write_atomic(&self.path("config.toml"), self.config.to_toml()?.as_bytes())
    }

    pub fn source_video(&self) -> Result<VideoFrames> {
        let c = &self.config;
        if c.video_dir.is_empty() {
            MovingShape {
                height: c.frame_height,
                width: c.frame_width,
                ..Default::default()
            }
            .render()
        } else {
            ingest(&c.resolve(&c.video_dir), c.frame_height, c.frame_width)
        }
    }

    pub fn latent(&self, video: &VideoFrames) -> Result<LatentVideo> {
        video.to_latent(self.config.latent_height, self.config.latent_width)
    }

    /// The pretrained image model: an explicit checkpoint, a bundled one
    /// matching the configuration, or a cached (possibly fresh) pretraining.
    pub fn image_model(&self, progress: impl FnMut(usize, f64)) -> Result<Backbone> {
        let cfg = self.config.backbone();
        if !self.config.pretrained_ckpt.is_empty() {
            let model = load_backbone(&self.config.resolve(&self.config.pretrained_ckpt))?;
            ensure!(
                model.config == cfg,
                Config,
                "pretrained_ckpt was trained with a different backbone configuration"
            );
            return Ok(model);
        }
        let pre = self.config.pretrain();
        let key = pretrain_key(&cfg, &self.encoder, &pre);
        let bundled = Path::new(BUNDLED_MODELS).join(format!("toy-t2i-{key}.ckpt"));
        if bundled.exists() {
            return load_backbone(&bundled);
        }
        let (model, _) = pretrained_image_model(
            &self.config.model_cache_dir(),
            &cfg,
            &self.encoder,
            &self.schedule,
            &pre,
            progress,
        )?;
        Ok(model)
    }

    /// Replace this stage's lines in `log.jsonl`, keeping the other stage's.
    fn write_log(&self, stage: u8, lines: &[LogLine]) -> Result<()> {
        let path = self.path("log.jsonl");
        let mut out = String::new();
        if let Ok(text) = fs::read_to_string(&path) {
            for line in text.lines() {
                let keep = serde_json::from_str::<LogLine>(line).map_or(false, |l| l.stage != stage);
                if keep {
                    out.push_str(line);
                    out.push('\n');
                }
            }
        }
        for l in lines {
            out.push_str(&serde_json::to_string(l)?);
            out.push('\n');
        }
        write_atomic(&path, out.as_bytes())
    }

    fn load_state(&self, name: &str, stage: u8) -> Result<TrainState> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::Dependency(format!(
                "{} not found (run train-stage{stage} first)",
                path.display()
            )));
        }
        TrainState::load(&path)
    }

    /// Stage 1; with `resume`, continue from `stage1.ckpt`.
    pub fn train_stage1(&self, resume: bool, sink: impl FnMut(&LogLine)) -> Result<Stage1Output> {
        let video = self.source_video()?;
        let latent = self.latent(&video)?;
        let image = self.image_model(|_, _| {})?;
        let ctx = Context {
            encoder: &self.encoder,
            schedule: &self.schedule,
            latent: &latent,
        };
        let prompt = self.encoder.vocab.tokenize(&self.config.stage1_prompt)?;
        let init = self.encoder.word_embedding(&self.config.protagonist_init)?;
        let state = resume.then(|| self.load_state("stage1.ckpt", 1)).transpose()?;
        let out = train_stage1(&image, &ctx, &prompt, &init, &self.config.train(), state, sink)?;
        self.write_config()?;
        out.state
            .save(&self.path("stage1.ckpt"), serde_json::json!({ "prompts": self.config.prompts() }))?;
        self.write_log(1, &out.state.log)?;
        Ok(out)
    }

    pub fn protagonist(&self) -> Result<ProtagonistEmbedding> {
        let state = self.load_state("stage1.ckpt", 1)?;
        let v = state
            .params
            .get(crate::motion_embedding::PROTAGONIST_NAME)
            .ok_or_else(|| Error::Checkpoint("stage1.ckpt lacks the protagonist word".into()))?;
        ProtagonistEmbedding::new(v.clone())
    }

    /// Stage 2 from the stage-1 word; with `resume`, continue from
    /// `stage2.ckpt`.
    pub fn train_stage2(&self, resume: bool, sink: impl FnMut(&LogLine)) -> Result<Stage2Output> {
        let protagonist = self.protagonist()?;
        let video = self.source_video()?;
        let latent = self.latent(&video)?;
        let image = self.image_model(|_, _| {})?;
        let backbone = Backbone::inflate_from_image_model(&image, self.config.seed)?;
        let tc = self.config.train();
        let motion = MotionWordParams::init(
            self.encoder.word_embedding(&self.config.motion_word)?,
            tc.gamma,
            tc.two_layer_motion,
            self.config.seed,
        )?;
        let prompt = self.encoder.vocab.tokenize(&self.config.stage2_prompt)?;
        let masks_dir = self.path("masks");
        let inputs = Stage2Inputs {
            prompt: &prompt,
            protagonist: &protagonist,
            backbone: &backbone,
            motion_init: &motion,
            mask_cache: Some(&masks_dir),
        };
        let ctx = Context {
            encoder: &self.encoder,
            schedule: &self.schedule,
            latent: &latent,
        };
        let state = resume.then(|| self.load_state("stage2.ckpt", 2)).transpose()?;
        fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
        let out = train_stage2(&ctx, &inputs, &tc, state, sink)?;
        let model = TrainedModel {
            backbone: out.backbone.clone(),
            motion: out.motion.clone(),
            protagonist: protagonist.clone(),
            encoder: self.encoder.clone(),
            schedule: self.schedule.clone(),
            prompts: self.config.prompts(),
        };
        self.write_config()?;
        out.state
            .save(&self.path("stage2.ckpt"), serde_json::to_value(model.meta())?)?;
        save_words(&self.path("words.bin"), &out.motion, &protagonist, &model.prompts)?;
        if let Some(m) = &out.masks {
            m.export(&masks_dir)?;
        }
        self.write_log(2, &out.state.log)?;
        Ok(out)
    }

    pub fn trained_model(&self) -> Result<TrainedModel> {
        TrainedModel::load(&self.path("stage2.ckpt"))
    }

    /// Masks from the trained model under the training prompt, cached in
    /// `masks/` and exported as PNGs.
    pub fn extract_masks(&self) -> Result<(MotionMasks, CacheStatus)> {
        let model = self.trained_model()?;
        let latent = self.latent(&self.source_video()?)?;
        let cond = model.training_conditionings(latent.frames())?;
        let dir = self.path("masks");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (masks, status) = masks_from_video(
            &model.backbone,
            &model.schedule,
            &latent,
            &cond,
            &self.config.masks(),
            Some(&dir),
        )?;
        masks.export(&dir)?;
        Ok((masks, status))
    }

    fn write_output(&self, dir: &Path, frames: &VideoFrames, prompt: &str) -> Result<()> {
        write_frames(dir, frames)?;
        write_json(
            &dir.join("meta.json"),
            &OutputMeta {
                prompt: prompt.to_string(),
                seed: self.config.seed,
                config: self.config.sampler(),
            },
        )
    }

    pub fn reconstruct(&self) -> Result<VideoFrames> {
        let model = self.trained_model()?;
        let frames = reconstruct(&model, &self.source_video()?, &self.config.sampler())?;
        self.write_output(&self.path("reconstruct"), &frames, &model.prompts.stage2)?;
        Ok(frames)
    }

    /// Edit with each prompt (the configured ones when `prompts` is empty).
    pub fn edit(&self, prompts: &[String]) -> Result<Vec<(PathBuf, VideoFrames)>> {
        let model = self.trained_model()?;
        let source = self.source_video()?;
        let sc = self.config.sampler();
        let masks = if sc.mask_blend {
            Some(self.extract_masks()?.0)
        } else {
            None
        };
        let prompts = if prompts.is_empty() {
            &self.config.edit_prompts[..]
        } else {
            prompts
        };
        let mut out = Vec::new();
        for p in prompts {
            let frames = edit_video(&model, &source, p, &sc, masks.as_ref())?;
            let dir = self.path("edits").join(slug(p));
            self.write_output(&dir, &frames, p)?;
            out.push((dir, frames));
        }
        Ok(out)
    }

    /// Token shares of the trained model's cross-attention on `video` under
    /// `prompt`, averaged over the probe timesteps.
    pub fn attention_shares(
        &self,
        model: &TrainedModel,
        video: &VideoFrames,
        prompt: &str,
    ) -> Result<(Vec<(String, f64)>, Vec<Tensor>)> {
        let latent = self.latent(video)?;
        let n = latent.frames();
        let tokens = self.encoder.vocab.tokenize(prompt)?;
        let cond = if tokens.motion_slot.is_some() {
            build_edit_conditionings(&tokens, &model.motion, Some(&model.protagonist), &self.encoder, n)?
        } else if tokens.protagonist_slot.is_some() {
            build_frame_conditionings(&tokens, None, Some(&model.protagonist), &self.encoder, n)?
        } else {
            build_frame_conditionings(&tokens, None, None, &self.encoder, n)?
        };
        let mc = self.config.masks();
        let noise = crate::sampler::seeded_noise(latent.data.shape(), mc.noise_seed);
        let mut shares = vec![0.0; tokens.len()];
        let mut heat: Option<Vec<Tensor>> = None;
        for &t in &mc.t_probe {
            let zt = self.schedule.add_noise(&latent.data, &noise, t)?;
            let (_, rec) = model.backbone.denoise(&zt, t, &cond, true)?;
            let rec = rec.expect("recording requested");
            for (s, x) in shares.iter_mut().zip(token_attention_share(&rec, &tokens)?) {
                *s += x / mc.t_probe.len() as f64;
            }
            if let Some(slot) = tokens.motion_slot {
                let maps = motion_heatmaps(&rec, &model.backbone.config.mask_blocks, slot, n)?;
                heat = Some(match heat {
                    None => maps,
                    Some(prev) => prev
                        .iter()
                        .zip(&maps)
                        .map(|(a, b)| a.zip_map(b, |x, y| x + y))
                        .collect::<Result<_>>()?,
                });
            }
        }
        let heat = heat
            .unwrap_or_default()
            .into_iter()
            .map(|m| m.map(|x| x / mc.t_probe.len() as f64))
            .collect();
        Ok((named_shares(&shares, &tokens, &self.encoder.vocab), heat))
    }

    /// Token shares and motion-word heatmaps on the source under the
    /// training prompt, written to `attention/`.
    pub fn inspect_attn(&self) -> Result<Vec<(String, f64)>> {
        let model = self.trained_model()?;
        let video = self.source_video()?;
        let (shares, heat) = self.attention_shares(&model, &video, &model.prompts.stage2)?;
        let dir = self.path("attention");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, m) in heat.iter().enumerate() {
            let (h, w) = (m.shape()[0], m.shape()[1]);
            let max = m.data().iter().cloned().fold(0.0, f64::max).max(1e-12);
            let scaled: Vec<f64> = m.data().iter().map(|x| x / max).collect();
            write_png_gray(&dir.join(format!("mot_{:04}.png", i + 1)), h, w, &scaled)?;
        }
        let doc = serde_json::json!({
            "prompt": model.prompts.stage2,
            "t_probe": self.config.t_probe,
            "shares": shares.iter().map(|(t, s)| serde_json::json!({"token": t, "share": s})).collect::<Vec<_>>(),
        });
        write_json(&dir.join("shares.json"), &doc)?;
        Ok(shares)
    }

    /// Score source/edited pairs. Without `pairs`, every `edits/<slug>` is
    /// compared with the source; otherwise each subdirectory of `pairs`
    /// must hold `source/` and `edited/`. Writes `metrics.json` per pair and
    /// an aggregate `eval.csv`.
    pub fn eval(&self, pairs: Option<&Path>) -> Result<Vec<(String, MetricReport)>> {
        let model = self.trained_model()?;
        let (h, w) = (self.config.frame_height, self.config.frame_width);
        let mut jobs: Vec<(String, PathBuf, VideoFrames, VideoFrames)> = Vec::new();
        let root = match pairs {
            Some(p) => p.to_path_buf(),
            None => self.path("edits"),
        };
        let mut names: Vec<PathBuf> = fs::read_dir(&root)
            .map_err(|e| Error::io(&root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        names.sort();
        ensure!(!names.is_empty(), Dependency, "no pairs to evaluate under {}", root.display());
        let run_source = if pairs.is_none() {
            Some(self.source_video()?)
        } else {
            None
        };
        for dir in names {
            let name = dir.file_name().unwrap().to_string_lossy().to_string();
            let (source, edited) = match &run_source {
                Some(s) => (s.clone(), ingest(&dir, h, w)?),
                None => (ingest(&dir.join("source"), h, w)?, ingest(&dir.join("edited"), h, w)?),
            };
            jobs.push((name, dir, source, edited));
        }
        let uncond = model.unconditional(jobs[0].2.frames(), false)?;
        let estimator = PseudoFlowEstimator {
            denoiser: &model.backbone,
            schedule: &model.schedule,
            cond: &uncond,
            config: self.config.masks(),
            static_tolerance: Some(self.config.eval_static_tolerance),
        };
        let embedder = PixelEmbedder::default();
        let grid = (self.config.latent_height, self.config.latent_width);
        let mut reports = Vec::new();
        let mut csv = String::from("pair,flow_similarity,frame_consistency,motion_share\n");
        for (name, dir, source, edited) in jobs {
            ensure!(
                source.frames() == uncond.frames() && edited.frames() == source.frames(),
                Contract,
                "pair `{name}` has mismatched frame counts"
            );
            let mut report = evaluate_pair(&source, &edited, &estimator, &embedder, grid)?;
            let meta = fs::read_to_string(dir.join("meta.json"))
                .ok()
                .and_then(|t| serde_json::from_str::<OutputMeta>(&t).ok());
            if let Some(meta) = meta {
                let (shares, _) = self.attention_shares(&model, &edited, &meta.prompt)?;
                report.attention_shares = shares.into_iter().collect();
            }
            let motion_share = report
                .attention_shares
                .get(crate::text::MOT)
                .map_or(String::new(), |s| format!("{s:.6}"));
            csv.push_str(&format!(
                "{name},{:.6},{:.6},{motion_share}\n",
                report.flow_similarity, report.frame_consistency
            ));
            write_json(&dir.join("metrics.json"), &report)?;
            reports.push((name, report));
        }
        let csv_path = match pairs {
            Some(p) => p.join("eval.csv"),
            None => self.path("eval.csv"),
        };
        write_atomic(&csv_path, csv.as_bytes())?;
        Ok(reports)
    }
}

/// Motion-slot cross-attention per frame, averaged over heads and blocks and
/// resampled to the finest block grid: one `[h, w]` map per frame.
pub fn motion_heatmaps(
    rec: &crate::backbone::AttentionRecord,
    blocks: &[usize],
    slot: usize,
    n: usize,
) -> Result<Vec<Tensor>> {
    let grid = blocks
        .iter()
        .filter_map(|b| rec.grid(*b))
        .max_by_key(|g| g.0 * g.1)
        .ok_or_else(|| Error::Contract("no grids for the requested blocks".into()))?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = vec![0.0; grid.0 * grid.1];
        for &b in blocks {
            let t = rec
                .cross_attn
                .get(&(b, i))
                .ok_or_else(|| Error::Contract(format!("no cross-attention for block {b}, frame {i}")))?;
            let s = t.shape();
            let (heads, p, l) = (s[0], s[1], s[2]);
            let near = crate::losses::nearest_index(rec.grid(b).unwrap(), grid);
            for (k, &src) in near.iter().enumerate() {
                for h in 0..heads {
                    acc[k] += t.data()[(h * p + src) * l + slot] / (heads * blocks.len()) as f64;
                }
            }
        }
        out.push(Tensor::new(&[grid.0, grid.1], acc)?);
    }
    Ok(out)
}
