//! Miniature inflated video denoiser.
//!
//! A two-level U-shaped network over latent tokens `[N, h·w, D]`. Each block
//! runs, in order: a 3×3 residual convolution with timestep injection,
//! spatio-temporal self-attention (ST-Attn), cross-attention to the frame's
//! own conditioning sequence, temporal self-attention (T-Attn, video mode
//! only) and a feed-forward layer.
//!
//! ST-Attn lets the queries of frame `i` attend to the keys of frames
//! `{0, i−1}` (deduplicated, so frames 0 and 1 attend to frame 0 only). In
//! image mode the key set is the frame itself. T-Attn mixes the `N` tokens of
//! one latent pixel and never touches other pixels.
//!
//! Block ids run encoder → bottleneck → decoder: with two levels, block 0 is
//! the fine encoder block, block 1 the coarse bottleneck and block 2 the fine
//! decoder block.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, GATHER_ZERO};
use crate::error::{ensure, Error, Result};
use crate::motion_embedding::{positional_encode, FrameConditionings};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel width per resolution level, finest first.
    pub widths: Vec<usize>,
    pub heads: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub timesteps: usize,
    /// Hidden multiplier of the feed-forward layer; 0 disables it.
    pub ff_mult: usize,
    pub conv: bool,
    /// Add a fixed 2D sinusoidal position table to the input tokens.
    pub pos_embed: bool,
    /// Temporal layers present (video model) or absent (image model).
    pub video: bool,
    /// Decoder-side blocks whose ST-Attn maps feed the motion masks.
    pub mask_blocks: Vec<usize>,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 16,
            width: 16,
            widths: vec![32, 64],
            heads: 4,
            text_dim: 32,
            time_dim: 32,
            timesteps: 1000,
            ff_mult: 2,
            conv: true,
            pos_embed: true,
            video: false,
            mask_blocks: vec![2],
            seed: 0,
        }
    }
}

/// Where a block sits in the U-shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockSide {
    Encoder,
    Bottleneck,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockInfo {
    pub id: usize,
    pub level: usize,
    pub side: BlockSide,
    pub grid: (usize, usize),
    pub width: usize,
}

impl BackboneConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn block_count(&self) -> usize {
        2 * self.levels() - 1
    }

    pub fn grid_at(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    pub fn blocks(&self) -> Vec<BlockInfo> {
        let l = self.levels();
        let mut out = Vec::with_capacity(self.block_count());
        for level in 0..l - 1 {
            out.push((level, BlockSide::Encoder));
        }
        out.push((l - 1, BlockSide::Bottleneck));
        for level in (0..l - 1).rev() {
            out.push((level, BlockSide::Decoder));
        }
        out.into_iter()
            .enumerate()
            .map(|(id, (level, side))| BlockInfo {
                id,
                level,
                side,
                grid: self.grid_at(level),
                width: self.widths[level],
            })
            .collect()
    }

    pub fn block(&self, id: usize) -> Option<BlockInfo> {
        self.blocks().into_iter().find(|b| b.id == id)
    }

    pub fn decoder_blocks(&self) -> Vec<usize> {
        self.blocks()
            .into_iter()
            .filter(|b| b.side == BlockSide::Decoder)
            .map(|b| b.id)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.widths.is_empty() {
            errs.push("at least one resolution level is required".to_string());
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            errs.push("latent dimensions must be positive".to_string());
        }
        let div = 1usize << self.widths.len().saturating_sub(1);
        if self.height % div != 0 || self.width % div != 0 {
            errs.push(format!(
                "latent grid {}x{} not divisible by {div}",
                self.height, self.width
            ));
        }
        if self.heads == 0 || self.widths.iter().any(|w| w % self.heads != 0) {
            errs.push(format!(
                "widths {:?} must be divisible by heads {}",
                self.widths, self.heads
            ));
        }
        if self.time_dim % 2 != 0 {
            errs.push("time_dim must be even".to_string());
        }
        if self.timesteps == 0 {
            errs.push("timesteps must be positive".to_string());
        }
        if !self.widths.is_empty() {
            let dec = self.decoder_blocks();
            if self.mask_blocks.is_empty() {
                errs.push("mask_blocks must be nonempty".to_string());
            }
            for b in &self.mask_blocks {
                if !dec.contains(b) {
                    errs.push(format!("mask block {b} is not a decoder block (have {dec:?})"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

/// Attention maps captured during one forward pass.
///
/// ST-Attn entries are keyed `(block, query_frame, key_frame)` with shape
/// `[heads, h·w, h·w]`; when a frame attends to two key frames, each slice is
/// renormalized so its rows are the distribution over that key frame alone.
/// Cross-attention entries are keyed `(block, frame)` with shape
/// `[heads, h·w, L]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionRecord {
    pub st_attn: BTreeMap<(usize, usize, usize), Tensor>,
    pub cross_attn: BTreeMap<(usize, usize), Tensor>,
    pub grids: BTreeMap<usize, (usize, usize)>,
    pub frames: usize,
}

impl AttentionRecord {
    pub fn grid(&self, block: usize) -> Option<(usize, usize)> {
        self.grids.get(&block).copied()
    }
}

/// Graph handles produced by a forward pass.
pub struct ForwardOutput {
    /// `[N, c, h, w]`
    pub noise_pred: Var,
    /// Cross-attention probabilities per block, `[N, heads, h·w, L]`.
    pub cross_probs: BTreeMap<usize, Var>,
    /// ST-Attn probabilities per block: `(query frames, key frames per
    /// query, probs [G, heads, h·w, |keys|·h·w])` per key-set group.
    pub st_probs: BTreeMap<usize, Vec<StGroup>>,
}

pub struct StGroup {
    pub frames: Vec<usize>,
    pub keys: Vec<Vec<usize>>,
    pub probs: Var,
}

/// ST-Attn key frames for query frame `i` in video mode.
pub fn st_key_frames(i: usize) -> Vec<usize> {
    if i <= 1 {
        vec![0]
    } else {
        vec![0, i - 1]
    }
}

pub fn is_temporal_param(name: &str) -> bool {
    name.contains(".ta.")
}

/// A noise-prediction network usable by the sampler and mask extraction.
pub trait Denoiser {
    fn config(&self) -> &BackboneConfig;

    /// Stable digest of the weights, used as a cache key.
    fn fingerprint(&self) -> String;

    fn denoise(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &FrameConditionings,
        record_attention: bool,
    ) -> Result<(Tensor, Option<AttentionRecord>)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let c = config.channels;
        let d0 = config.widths[0];
        let td = config.time_dim;
        p.insert("time.w1", linear_init(&mut rng, td, d0));
        p.insert("time.b1", Tensor::zeros(&[d0]));
        p.insert("time.w2", linear_init(&mut rng, d0, d0));
        p.insert("time.b2", Tensor::zeros(&[d0]));
        p.insert("in.w", linear_init(&mut rng, c, d0));
        p.insert("in.b", Tensor::zeros(&[d0]));
        for level in 0..config.levels() - 1 {
            let (a, b) = (config.widths[level], config.widths[level + 1]);
            p.insert(format!("down{level}.w"), linear_init(&mut rng, 4 * a, b));
            p.insert(format!("down{level}.b"), Tensor::zeros(&[b]));
            p.insert(format!("up{level}.w"), linear_init(&mut rng, b, 4 * a));
            p.insert(format!("up{level}.b"), Tensor::zeros(&[4 * a]));
        }
        for blk in config.blocks() {
            let d = blk.width;
            let pre = format!("b{}", blk.id);
            if config.conv {
                p.insert(format!("{pre}.res.conv.w"), linear_init(&mut rng, 9 * d, d));
                p.insert(format!("{pre}.res.conv.b"), Tensor::zeros(&[d]));
            }
            p.insert(format!("{pre}.res.temb.w"), linear_init(&mut rng, d0, d));
            p.insert(format!("{pre}.res.temb.b"), Tensor::zeros(&[d]));
            for w in ["q", "k", "v", "o"] {
                p.insert(format!("{pre}.st.{w}"), linear_init(&mut rng, d, d));
            }
            p.insert(format!("{pre}.st.ob"), Tensor::zeros(&[d]));
            p.insert(format!("{pre}.ca.q"), linear_init(&mut rng, d, d));
            p.insert(format!("{pre}.ca.k"), linear_init(&mut rng, config.text_dim, d));
            p.insert(format!("{pre}.ca.v"), linear_init(&mut rng, config.text_dim, d));
            p.insert(format!("{pre}.ca.o"), linear_init(&mut rng, d, d));
            p.insert(format!("{pre}.ca.ob"), Tensor::zeros(&[d]));
            if config.ff_mult > 0 {
                let h = config.ff_mult * d;
                p.insert(format!("{pre}.ff.w1"), linear_init(&mut rng, d, h));
                p.insert(format!("{pre}.ff.b1"), Tensor::zeros(&[h]));
                p.insert(format!("{pre}.ff.w2"), linear_init(&mut rng, h, d));
                p.insert(format!("{pre}.ff.b2"), Tensor::zeros(&[d]));
            }
        }
        p.insert("out.w", Tensor::randn(&[d0, c], 0.02, &mut rng));
        p.insert("out.b", Tensor::zeros(&[c]));
        let mut backbone = Self { config, params: p };
        if backbone.config.video {
            backbone.add_temporal_layers(&mut rng);
        }
        Ok(backbone)
    }

    /// Temporal attention with random q/k/v and zero output projection, so
    /// the new residual branch starts as the identity.
    fn add_temporal_layers(&mut self, rng: &mut ChaCha8Rng) {
        for blk in self.config.blocks() {
            let d = blk.width;
            let pre = format!("b{}", blk.id);
            for w in ["q", "k", "v"] {
                self.params
                    .insert(format!("{pre}.ta.{w}"), linear_init(rng, d, d));
            }
            self.params
                .insert(format!("{pre}.ta.o"), Tensor::zeros(&[d, d]));
            self.params
                .insert(format!("{pre}.ta.ob"), Tensor::zeros(&[d]));
        }
    }

    /// Build a video backbone whose spatial layers are copied from an image
    /// model and whose temporal layers start as identity residuals.
    pub fn inflate_from_image_model(image: &Backbone, seed: u64) -> Result<Backbone> {
        let mut cfg = image.config.clone();
        cfg.video = true;
        Self::inflate_into(image, cfg, seed)
    }

    /// Inflate into an explicit video configuration; every spatial parameter
    /// of the target must exist in the image model with the same shape.
    pub fn inflate_into(image: &Backbone, mut config: BackboneConfig, seed: u64) -> Result<Backbone> {
        config.video = true;
        let mut video = Backbone::new(BackboneConfig {
            seed,
            ..config
        })?;
        let spatial: Vec<String> = video
            .params
            .names()
            .filter(|n| !is_temporal_param(n))
            .cloned()
            .collect();
        for name in spatial {
            let target = video.params.get(&name).unwrap();
            let src = image.params.get(&name).ok_or_else(|| Error::Inflation {
                layer: name.clone(),
                reason: "missing from the image model".into(),
            })?;
            if src.shape() != target.shape() {
                return Err(Error::Inflation {
                    layer: name.clone(),
                    reason: format!("shape {:?} vs expected {:?}", src.shape(), target.shape()),
                });
            }
            video.params.insert(name, src.clone());
        }
        Ok(video)
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn check_inputs(&self, z: &Tensor, t: &[usize], cond: &Tensor) -> Result<()> {
        let c = &self.config;
        ensure!(
            z.shape().len() == 4 && z.shape()[1..] == [c.channels, c.height, c.width],
            Contract,
            "latent shape {:?} != [N, {}, {}, {}]",
            z.shape(),
            c.channels,
            c.height,
            c.width
        );
        let n = z.shape()[0];
        ensure!(n >= 1, Contract, "latent needs at least one frame");
        ensure!(z.is_finite(), Contract, "latent contains non-finite values");
        ensure!(
            cond.shape().len() == 3 && cond.shape()[0] == n,
            Contract,
            "conditioning shape {:?} needs {n} per-frame sequences",
            cond.shape()
        );
        ensure!(
            cond.shape()[2] == c.text_dim,
            Contract,
            "conditioning dim {} != backbone text dim {}",
            cond.shape()[2],
            c.text_dim
        );
        ensure!(
            t.len() == 1 || t.len() == n,
            Contract,
            "need one timestep or one per frame"
        );
        for &ti in t {
            ensure!(
                (1..=c.timesteps).contains(&ti),
                Domain,
                "timestep {ti} outside [1, {}]",
                c.timesteps
            );
        }
        Ok(())
    }

    /// Graph-level forward. `timesteps` holds one value or one per frame;
    /// `record_st` lists the blocks whose ST-Attn probabilities are kept.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bindings,
        z: Var,
        timesteps: &[usize],
        cond: Var,
    ) -> ForwardOutput {
        let cfg = &self.config;
        let zs = g.shape(z).to_vec();
        let (n, c, h, w) = (zs[0], zs[1], zs[2], zs[3]);
        let p = h * w;
        let heads = cfg.heads;

        // time embedding [N, D0]
        let ts: Vec<usize> = if timesteps.len() == 1 {
            vec![timesteps[0]; n]
        } else {
            timesteps.to_vec()
        };
        let sin: Vec<f64> = ts
            .iter()
            .flat_map(|&t| positional_encode(t, cfg.time_dim, 10000.0).unwrap())
            .collect();
        let sin = g.constant(Tensor::from_parts(vec![n, cfg.time_dim], sin));
        let e = g.matmul(sin, b.get("time.w1"));
        let e = g.add_row(e, b.get("time.b1"));
        let e = g.silu(e);
        let e = g.matmul(e, b.get("time.w2"));
        let temb = g.add_row(e, b.get("time.b2"));
        let temb = g.silu(temb);

        // [N, c, h, w] -> [N, P, c]
        let x = g.gather(z, nchw_to_tokens(n, c, p), &[n, p, c]);
        let x = g.matmul(x, b.get("in.w"));
        let mut x = g.add_row(x, b.get("in.b"));
        if cfg.pos_embed {
            let d0 = cfg.widths[0];
            let table = position_table(h, w, d0);
            let pos = g.constant(table);
            let pos = g.gather(pos, broadcast_rows(n, p * d0), &[n, p, d0]);
            x = g.add(x, pos);
        }

        let mut out = ForwardOutput {
            noise_pred: x,
            cross_probs: BTreeMap::new(),
            st_probs: BTreeMap::new(),
        };
        let mut skips = Vec::new();
        for blk in cfg.blocks() {
            let (bh, bw) = blk.grid;
            if blk.side == BlockSide::Decoder {
                let level = blk.level;
                let y = g.matmul(x, b.get(&format!("up{level}.w")));
                let y = g.add_row(y, b.get(&format!("up{level}.b")));
                let y = g.gather(
                    y,
                    depth_to_space(n, bh / 2, bw / 2, blk.width),
                    &[n, bh * bw, blk.width],
                );
                let skip = skips.pop().expect("encoder skip");
                x = g.add(y, skip);
            }
            x = self.block(g, b, blk, x, temb, cond, n, heads, &mut out);
            if blk.side == BlockSide::Encoder {
                skips.push(x);
                let level = blk.level;
                let y = g.gather(
                    x,
                    space_to_depth(n, bh, bw, blk.width),
                    &[n, (bh / 2) * (bw / 2), 4 * blk.width],
                );
                let y = g.matmul(y, b.get(&format!("down{level}.w")));
                x = g.add_row(y, b.get(&format!("down{level}.b")));
            }
        }
        let y = g.layer_norm(x, LN_EPS);
        let y = g.matmul(y, b.get("out.w"));
        let y = g.add_row(y, b.get("out.b"));
        out.noise_pred = g.gather(y, tokens_to_nchw(n, c, p), &[n, c, h, w]);
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph,
        b: &Bindings,
        blk: BlockInfo,
        mut x: Var,
        temb: Var,
        cond: Var,
        n: usize,
        heads: usize,
        out: &mut ForwardOutput,
    ) -> Var {
        let cfg = &self.config;
        let pre = format!("b{}", blk.id);
        let (h, w) = blk.grid;
        let p = h * w;
        let d = blk.width;
        let param = |name: &str| b.get(&format!("{pre}.{name}"));

        // residual conv + time
        let hh = g.layer_norm(x, LN_EPS);
        let hh = g.silu(hh);
        let mut r = if cfg.conv {
            let cols = g.gather(hh, im2col3x3(n, h, w, d), &[n, p, 9 * d]);
            let y = g.matmul(cols, param("res.conv.w"));
            g.add_row(y, param("res.conv.b"))
        } else {
            hh
        };
        let te = g.matmul(temb, param("res.temb.w"));
        let te = g.add_row(te, param("res.temb.b"));
        let te = g.gather(te, broadcast_frames(n, p, d), &[n, p, d]);
        r = g.add(r, te);
        x = g.add(x, r);

        // ST-Attn
        let hh = g.layer_norm(x, LN_EPS);
        let q = g.matmul(hh, param("st.q"));
        let k = g.matmul(hh, param("st.k"));
        let v = g.matmul(hh, param("st.v"));
        let (a, groups) = if cfg.video {
            self.st_attention_video(g, q, k, v, n, p, d, heads)
        } else {
            let probs = g.attn_probs(q, k, heads);
            let a = g.attn_apply(probs, v);
            let frames: Vec<usize> = (0..n).collect();
            let keys = frames.iter().map(|&i| vec![i]).collect();
            (a, vec![StGroup { frames, keys, probs }])
        };
        out.st_probs.insert(blk.id, groups);
        let a = g.matmul(a, param("st.o"));
        let a = g.add_row(a, param("st.ob"));
        x = g.add(x, a);

        // cross-attention: frame i attends to its own sequence
        let hh = g.layer_norm(x, LN_EPS);
        let q = g.matmul(hh, param("ca.q"));
        let k = g.matmul(cond, param("ca.k"));
        let v = g.matmul(cond, param("ca.v"));
        let probs = g.attn_probs(q, k, heads);
        out.cross_probs.insert(blk.id, probs);
        let a = g.attn_apply(probs, v);
        let a = g.matmul(a, param("ca.o"));
        let a = g.add_row(a, param("ca.ob"));
        x = g.add(x, a);

        // T-Attn
        if cfg.video {
            let hh = g.layer_norm(x, LN_EPS);
            let a = temporal_attention_core(
                g,
                hh,
                param("ta.q"),
                param("ta.k"),
                param("ta.v"),
                heads,
            );
            let a = g.matmul(a, param("ta.o"));
            let a = g.add_row(a, param("ta.ob"));
            x = g.add(x, a);
        }

        if cfg.ff_mult > 0 {
            let hh = g.layer_norm(x, LN_EPS);
            let y = g.matmul(hh, param("ff.w1"));
            let y = g.add_row(y, param("ff.b1"));
            let y = g.silu(y);
            let y = g.matmul(y, param("ff.w2"));
            let y = g.add_row(y, param("ff.b2"));
            x = g.add(x, y);
        }
        x
    }

    #[allow(clippy::too_many_arguments)]
    fn st_attention_video(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        n: usize,
        p: usize,
        d: usize,
        heads: usize,
    ) -> (Var, Vec<StGroup>) {
        // frames sharing a key-set size are batched; groups stay in frame order
        let single: Vec<usize> = (0..n.min(2)).collect();
        let double: Vec<usize> = (2..n).collect();
        let mut outs = Vec::new();
        let mut groups = Vec::new();
        for frames in [single, double] {
            if frames.is_empty() {
                continue;
            }
            let keys: Vec<Vec<usize>> = frames.iter().map(|&i| st_key_frames(i)).collect();
            let nk = keys[0].len();
            let gq = g.gather(q, frame_rows(&frames, p, d), &[frames.len(), p, d]);
            let key_rows: Vec<usize> = keys.iter().flatten().copied().collect();
            let kidx = frame_rows(&key_rows, p, d);
            let gk = g.gather(k, kidx.clone(), &[frames.len(), nk * p, d]);
            let gv = g.gather(v, kidx, &[frames.len(), nk * p, d]);
            let probs = g.attn_probs(gq, gk, heads);
            outs.push(g.attn_apply(probs, gv));
            groups.push(StGroup {
                frames,
                keys,
                probs,
            });
        }
        let a = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs)
        };
        (a, groups)
    }

    /// Value-level forward with optional attention capture.
    pub fn denoise_batch(
        &self,
        z_t: &Tensor,
        timesteps: &[usize],
        cond: &Tensor,
        record_attention: bool,
    ) -> Result<(Tensor, Option<AttentionRecord>)> {
        self.check_inputs(z_t, timesteps, cond)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, |_| false);
        let z = g.constant(z_t.clone());
        let c = g.constant(cond.clone());
        let out = self.forward(&mut g, &b, z, timesteps, c);
        let record = record_attention.then(|| self.record(&g, &out, z_t.shape()[0]));
        Ok((g.value(out.noise_pred).clone(), record))
    }

    /// Copy attention maps out of a finished forward pass.
    pub fn record(&self, g: &Graph, out: &ForwardOutput, n: usize) -> AttentionRecord {
        let mut rec = AttentionRecord {
            frames: n,
            ..Default::default()
        };
        for blk in self.config.blocks() {
            rec.grids.insert(blk.id, blk.grid);
        }
        for (&blk, &probs) in &out.cross_probs {
            let v = g.value(probs);
            for i in 0..n {
                rec.cross_attn.insert((blk, i), v.outer(i));
            }
        }
        for &blk in &self.config.mask_blocks {
            let Some(groups) = out.st_probs.get(&blk) else {
                continue;
            };
            for grp in groups {
                let v = g.value(grp.probs);
                let s = v.shape();
                let (heads, pq, lk) = (s[1], s[2], s[3]);
                for (gi, (&i, keys)) in grp.frames.iter().zip(&grp.keys).enumerate() {
                    let frame = v.outer(gi);
                    let pk = lk / keys.len();
                    for (slot, &j) in keys.iter().enumerate() {
                        let mut data = Vec::with_capacity(heads * pq * pk);
                        for row in frame.data().chunks(lk) {
                            let part = &row[slot * pk..(slot + 1) * pk];
                            let total: f64 = part.iter().sum();
                            data.extend(part.iter().map(|x| x / total));
                        }
                        rec.st_attn
                            .insert((blk, i, j), Tensor::from_parts(vec![heads, pq, pk], data));
                    }
                }
            }
        }
        rec
    }
}

impl Denoiser for Backbone {
    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn fingerprint(&self) -> String {
        self.params.hash()
    }

    fn denoise(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &FrameConditionings,
        record_attention: bool,
    ) -> Result<(Tensor, Option<AttentionRecord>)> {
        self.denoise_batch(z_t, &[t], &cond.embeddings, record_attention)
    }
}

/// Attention over the frame axis of each pixel: `x: [N, P, D]` → `[N, P, D]`
/// (projections q/k/v applied, no output projection).
pub fn temporal_attention_core(
    g: &mut Graph,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    heads: usize,
) -> Var {
    let s = g.shape(x).to_vec();
    let (n, p, d) = (s[0], s[1], s[2]);
    let xt = g.gather(x, swap01(n, p, d), &[p, n, d]);
    let q = g.matmul(xt, wq);
    let k = g.matmul(xt, wk);
    let v = g.matmul(xt, wv);
    let probs = g.attn_probs(q, k, heads);
    let a = g.attn_apply(probs, v);
    g.gather(a, swap01(p, n, d), &[n, p, d])
}

/// Projection weights for [`temporal_self_attention`].
#[derive(Clone, Debug)]
pub struct TemporalProjections {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub heads: usize,
}

/// Per-pixel temporal self-attention on features `[N, D, h, w]`.
pub fn temporal_self_attention(features: &Tensor, proj: &TemporalProjections) -> Result<Tensor> {
    ensure!(
        features.shape().len() == 4,
        Contract,
        "features must be [N, D, h, w], got {:?}",
        features.shape()
    );
    let s = features.shape();
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    for m in [&proj.q, &proj.k, &proj.v] {
        ensure!(m.shape() == [d, d], Contract, "projection must be [{d}, {d}]");
    }
    ensure!(d % proj.heads == 0, Contract, "width {d} not divisible by heads");
    let p = h * w;
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let x = g.gather(x, nchw_to_tokens(n, d, p), &[n, p, d]);
    let (q, k, v) = (
        g.constant(proj.q.clone()),
        g.constant(proj.k.clone()),
        g.constant(proj.v.clone()),
    );
    let y = temporal_attention_core(&mut g, x, q, k, v, proj.heads);
    let y = g.gather(y, tokens_to_nchw(n, d, p), &[n, d, h, w]);
    Ok(g.value(y).clone())
}

/// `[h·w, d]` table: the first half of the channels encodes the row, the
/// second half the column, as interleaved sin/cos at geometric frequencies.
pub fn position_table(h: usize, w: usize, d: usize) -> Tensor {
    let half = (d / 2).max(1);
    let mut data = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..d {
                let (pos, m) = if ch < half {
                    (r as f64, ch)
                } else {
                    (c as f64, ch - half)
                };
                let freq = 100f64.powf(-((2 * (m / 2)) as f64) / half as f64);
                data.push(if m % 2 == 0 {
                    (pos * freq).sin()
                } else {
                    (pos * freq).cos()
                });
            }
        }
    }
    Tensor::from_parts(vec![h * w, d], data)
}

// ---- index builders -------------------------------------------------------

/// Repeat a flat block of `len` values `n` times.
fn broadcast_rows(n: usize, len: usize) -> Rc<[u32]> {
    (0..n).flat_map(|_| 0..len as u32).collect()
}

fn nchw_to_tokens(n: usize, c: usize, p: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(n * p * c);
    for f in 0..n {
        for px in 0..p {
            for ch in 0..c {
                idx.push(((f * c + ch) * p + px) as u32);
            }
        }
    }
    idx.into()
}

fn tokens_to_nchw(n: usize, c: usize, p: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(n * p * c);
    for f in 0..n {
        for ch in 0..c {
            for px in 0..p {
                idx.push(((f * p + px) * c + ch) as u32);
            }
        }
    }
    idx.into()
}

/// `[a, b, d]` → `[b, a, d]`.
fn swap01(a: usize, b: usize, d: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(a * b * d);
    for j in 0..b {
        for i in 0..a {
            for ch in 0..d {
                idx.push(((i * b + j) * d + ch) as u32);
            }
        }
    }
    idx.into()
}

fn frame_rows(frames: &[usize], p: usize, d: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(frames.len() * p * d);
    for &f in frames {
        let base = f * p * d;
        idx.extend((0..p * d).map(|i| (base + i) as u32));
    }
    idx.into()
}

fn broadcast_frames(n: usize, p: usize, d: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(n * p * d);
    for f in 0..n {
        for _ in 0..p {
            idx.extend((0..d).map(|ch| (f * d + ch) as u32));
        }
    }
    idx.into()
}

/// 3×3 neighbourhood columns with zero padding: `[N, P, 9·D]`, ordered
/// (dy, dx, channel).
fn im2col3x3(n: usize, h: usize, w: usize, d: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(n * h * w * 9 * d);
    for f in 0..n {
        for r in 0..h {
            for c in 0..w {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (rr, cc) = (r as i64 + dy, c as i64 + dx);
                        let inside = rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64;
                        for ch in 0..d {
                            idx.push(if inside {
                                (((f * h + rr as usize) * w + cc as usize) * d + ch) as u32
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// 2×2 patches to channels: `[N, h·w, D]` → `[N, (h/2)·(w/2), 4·D]`.
fn space_to_depth(n: usize, h: usize, w: usize, d: usize) -> Rc<[u32]> {
    let (h2, w2) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(n * h * w * d);
    for f in 0..n {
        for r in 0..h2 {
            for c in 0..w2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let px = (2 * r + dy) * w + 2 * c + dx;
                        idx.extend((0..d).map(|ch| ((f * h * w + px) * d + ch) as u32));
                    }
                }
            }
        }
    }
    idx.into()
}

/// Inverse layout of [`space_to_depth`]: `[N, h2·w2, 4·D]` → `[N, 4·h2·w2, D]`.
fn depth_to_space(n: usize, h2: usize, w2: usize, d: usize) -> Rc<[u32]> {
    let (h, w) = (2 * h2, 2 * w2);
    let mut idx = Vec::with_capacity(n * h * w * d);
    for f in 0..n {
        for r in 0..h {
            for c in 0..w {
                let (pr, pc) = (r / 2, c / 2);
                let sub = (r % 2) * 2 + (c % 2);
                let src_tok = f * h2 * w2 + pr * w2 + pc;
                idx.extend((0..d).map(|ch| ((src_tok * 4 + sub) * d + ch) as u32));
            }
        }
    }
    idx.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(video: bool) -> BackboneConfig {
        BackboneConfig {
            channels: 1,
            height: 2,
            width: 2,
            widths: vec![2, 2],
            heads: 1,
            text_dim: 2,
            time_dim: 2,
            timesteps: 1000,
            ff_mult: 1,
            conv: true,
            pos_embed: true,
            video,
            mask_blocks: vec![2],
            seed: 3,
        }
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        // zero-initialized projections would hide their gradients
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            let t = store.get(&n).unwrap();
            let r = Tensor::randn(t.shape(), 0.5, &mut rng);
            store.insert(n, r);
        }
    }

    #[test]
    fn tiny_video_model_gradient_check() {
        let mut model = Backbone::new(tiny(true)).unwrap();
        randomize(&mut model.params, 11);
        assert!(model.param_count() <= 1000, "{}", model.param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::randn(&[3, 1, 2, 2], 1.0, &mut rng);
        let cond = Tensor::randn(&[3, 4, 2], 1.0, &mut rng);
        let probe = Tensor::randn(&[3, 1, 2, 2], 1.0, &mut rng);
        let loss_of = |store: &ParamStore, grad: bool| {
            let mut g = Graph::new();
            let b = store.bind(&mut g, |_| grad);
            let zv = g.constant(z.clone());
            let cv = g.constant(cond.clone());
            let out = model.forward(&mut g, &b, zv, &[400], cv);
            let w = g.constant(probe.clone());
            let y = g.mul(out.noise_pred, w);
            let l = g.sum(y);
            let value = g.value(l).item();
            let grads = grad.then(|| {
                let mut gr = g.backward(l);
                b.collect(&mut gr)
            });
            (value, grads)
        };
        let analytic = loss_of(&model.params, true).1.unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (name, t) in model.params.iter() {
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut s = model.params.clone();
                    s.get_mut(name).unwrap().data_mut()[i] += delta;
                    loss_of(&s, false).0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[name].data()[i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn inflation_copies_spatial_layers_and_zeroes_temporal_output() {
        let image = Backbone::new(BackboneConfig::default()).unwrap();
        let video = Backbone::inflate_from_image_model(&image, 9).unwrap();
        for (name, t) in image.params.iter() {
            assert_eq!(video.params.get(name), Some(t), "{name}");
        }
        let temporal: Vec<&String> = video.params.names().filter(|n| is_temporal_param(n)).collect();
        assert_eq!(temporal.len(), 5 * video.config.blocks().len());
        for blk in video.config.blocks() {
            let o = video.params.get(&format!("b{}.ta.o", blk.id)).unwrap();
            assert!(o.data().iter().all(|&x| x == 0.0));
        }
        let mut broken = image.clone();
        let mut map = broken.params.into_map();
        map.remove("b1.st.k");
        broken.params = ParamStore::from_map(map);
        match Backbone::inflate_from_image_model(&broken, 9) {
            Err(Error::Inflation { layer, .. }) => assert_eq!(layer, "b1.st.k"),
            other => panic!("expected inflation error, got {other:?}"),
        }
    }

    #[test]
    fn fresh_inflation_matches_image_model_on_repeated_frames() {
        // keys {0, i−1} of identical frames give the same attention average
        // as the frame itself, and T-Attn starts as the identity residual
        let mut cfg = BackboneConfig::default();
        cfg.widths = vec![8, 16];
        cfg.heads = 2;
        let image = Backbone::new(cfg).unwrap();
        let video = Backbone::inflate_from_image_model(&image, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = Tensor::randn(&[3, 16, 16], 1.0, &mut rng);
        let seq = Tensor::randn(&[8, 32], 1.0, &mut rng);
        let z = Tensor::stack(&[frame.clone(), frame.clone(), frame.clone(), frame]).unwrap();
        let cond = Tensor::stack(&[seq.clone(), seq.clone(), seq.clone(), seq]).unwrap();
        let (a, _) = image.denoise_batch(&z, &[300], &cond, false).unwrap();
        let (b, _) = video.denoise_batch(&z, &[300], &cond, false).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn first_frame_ignores_later_frames() {
        let mut video = Backbone::new(BackboneConfig {
            widths: vec![8, 16],
            heads: 2,
            video: true,
            ..Default::default()
        })
        .unwrap();
        randomize(&mut video.params, 4);
        // with T-Attn switched off, frame 0 only sees itself
        for blk in video.config.blocks() {
            video.params.insert(format!("b{}.ta.o", blk.id), Tensor::zeros(&[blk.width, blk.width]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Tensor::randn(&[3, 3, 16, 16], 1.0, &mut rng);
        let cond = Tensor::randn(&[3, 8, 32], 1.0, &mut rng);
        let (a, _) = video.denoise_batch(&z, &[500], &cond, false).unwrap();
        let mut z2 = z.clone();
        z2.data_mut()[2 * 768..].iter_mut().for_each(|x| *x = -*x);
        let (b, _) = video.denoise_batch(&z2, &[500], &cond, false).unwrap();
        assert_eq!(a.outer(0), b.outer(0));
        assert_ne!(a.outer(2), b.outer(2));
    }

    #[test]
    fn temporal_attention_is_per_pixel_and_matches_manual_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, d, h, w) = (3, 2, 2, 2);
        let x = Tensor::randn(&[n, d, h, w], 1.0, &mut rng);
        let proj = TemporalProjections {
            q: Tensor::randn(&[d, d], 1.0, &mut rng),
            k: Tensor::randn(&[d, d], 1.0, &mut rng),
            v: Tensor::randn(&[d, d], 1.0, &mut rng),
            heads: 1,
        };
        let y = temporal_self_attention(&x, &proj).unwrap();
        let at = |t: &Tensor, f: usize, c: usize, px: usize| t.data()[(f * d + c) * h * w + px];
        let mat = |m: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..d).map(|j| (0..d).map(|i| v[i] * m.data()[i * d + j]).sum()).collect()
        };
        for px in 0..h * w {
            let feats: Vec<Vec<f64>> = (0..n).map(|f| (0..d).map(|c| at(&x, f, c, px)).collect()).collect();
            let q: Vec<Vec<f64>> = feats.iter().map(|v| mat(&proj.q, v)).collect();
            let k: Vec<Vec<f64>> = feats.iter().map(|v| mat(&proj.k, v)).collect();
            let v: Vec<Vec<f64>> = feats.iter().map(|v| mat(&proj.v, v)).collect();
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..d {
                    let want: f64 = (0..n).map(|j| e[j] / z * v[j][c]).sum();
                    assert!((at(&y, i, c, px) - want).abs() < 1e-12);
                }
            }
        }
        // perturbing one pixel leaves every other pixel's output unchanged
        let mut x2 = x.clone();
        for f in 0..n {
            for c in 0..d {
                x2.data_mut()[(f * d + c) * h * w] += 1.0;
            }
        }
        let y2 = temporal_self_attention(&x2, &proj).unwrap();
        for f in 0..n {
            for c in 0..d {
                for px in 1..h * w {
                    assert_eq!(at(&y, f, c, px), at(&y2, f, c, px));
                }
            }
        }
    }
}
