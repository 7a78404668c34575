//! Flow similarity, frame consistency and token attention shares.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionRecord, Denoiser};
use crate::error::{ensure, Result};
use crate::motion_embedding::FrameConditionings;
use crate::pseudo_flow::{flow_from_video, DisplacementField, MaskConfig};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor;
use crate::text::{TokenizedPrompt, Vocab};
use crate::video::{resize, LatentVideo, VideoFrames};

const COS_EPS: f64 = 1e-12;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < COS_EPS || nb < COS_EPS {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean over frames of the cosine between flattened flow fields; a zero
/// field scores 0 against anything.
pub fn flow_similarity(a: &DisplacementField, b: &DisplacementField) -> Result<f64> {
    ensure!(
        a.grid == b.grid && a.frames == b.frames,
        Contract,
        "flow fields differ: grid {:?}/{:?}, frames {}/{}",
        a.grid,
        b.grid,
        a.frames,
        b.frames
    );
    ensure!(a.frames > 0, Contract, "empty flow fields");
    let (va, vb) = (a.flow_vectors(), b.flow_vectors());
    Ok(flow_vector_similarity(&va, &vb, a.pixels()))
}

/// [`flow_similarity`] on raw `(dy, dx)` vectors, `pixels` per frame.
pub fn flow_vector_similarity(a: &[[f64; 2]], b: &[[f64; 2]], pixels: usize) -> f64 {
    let frames = a.len() / pixels;
    let mut total = 0.0;
    for f in 0..frames {
        let fa: Vec<f64> = a[f * pixels..(f + 1) * pixels].iter().flatten().copied().collect();
        let fb: Vec<f64> = b[f * pixels..(f + 1) * pixels].iter().flatten().copied().collect();
        total += cosine(&fa, &fb);
    }
    total / frames as f64
}

/// Maps a frame `[3, H, W]` in `[0, 1]` to a unit vector.
pub trait FrameEmbedder {
    fn embed(&self, frame: &Tensor) -> Result<Vec<f64>>;
}

/// Toy embedder: block-average to `side × side`, center at 0.5, normalize.
#[derive(Clone, Copy, Debug)]
pub struct PixelEmbedder {
    pub side: usize,
}

impl Default for PixelEmbedder {
    fn default() -> Self {
        Self { side: 8 }
    }
}

impl FrameEmbedder for PixelEmbedder {
    fn embed(&self, frame: &Tensor) -> Result<Vec<f64>> {
        let s = frame.shape();
        ensure!(s.len() == 3, Contract, "frame must be [C, H, W], got {s:?}");
        let batched = frame.clone().reshape(&[1, s[0], s[1], s[2]])?;
        let small = resize(&batched, self.side, self.side)?;
        let v: Vec<f64> = small.data().iter().map(|x| x - 0.5).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(if n < COS_EPS {
            v
        } else {
            v.iter().map(|x| x / n).collect()
        })
    }
}

/// Mean cosine similarity of consecutive frame embeddings.
pub fn frame_consistency(frames: &VideoFrames, embedder: &dyn FrameEmbedder) -> Result<f64> {
    let n = frames.frames();
    ensure!(n >= 2, Contract, "frame consistency needs at least 2 frames, got {n}");
    let emb: Vec<Vec<f64>> = (0..n)
        .map(|i| embedder.embed(&frames.frame(i)))
        .collect::<Result<_>>()?;
    Ok(emb.windows(2).map(|w| cosine(&w[0], &w[1])).sum::<f64>() / (n - 1) as f64)
}

/// Share of cross-attention mass per prompt position (pads excluded),
/// summed over pixels, frames, heads and layers.
pub fn token_attention_share(record: &AttentionRecord, prompt: &TokenizedPrompt) -> Result<Vec<f64>> {
    ensure!(!record.cross_attn.is_empty(), Contract, "record has no cross-attention");
    let active: Vec<usize> = (0..prompt.ids.len()).filter(|&k| prompt.ids[k] != 0).collect();
    ensure!(!active.is_empty(), Contract, "prompt has no tokens");
    let mut mass = vec![0.0; prompt.ids.len()];
    for t in record.cross_attn.values() {
        let l = *t.shape().last().unwrap();
        ensure!(l == prompt.ids.len(), Contract, "record has {l} tokens, prompt {}", prompt.ids.len());
        for row in t.data().chunks(l) {
            for (m, x) in mass.iter_mut().zip(row) {
                *m += x;
            }
        }
    }
    let total: f64 = active.iter().map(|&k| mass[k]).sum();
    Ok((0..prompt.ids.len())
        .map(|k| if prompt.ids[k] != 0 { mass[k] / total } else { 0.0 })
        .collect())
}

/// Shares keyed by token text, in prompt order.
pub fn named_shares(shares: &[f64], prompt: &TokenizedPrompt, vocab: &Vocab) -> Vec<(String, f64)> {
    prompt
        .ids
        .iter()
        .zip(shares)
        .filter(|(id, _)| **id != 0)
        .map(|(id, s)| (vocab.word(*id).to_string(), *s))
        .collect()
}

/// Source of flow fields for a latent video.
pub trait FlowEstimator {
    fn flow(&self, video: &LatentVideo) -> Result<DisplacementField>;
}

/// Pseudo flow read off a denoiser's ST-Attn maps under fixed conditioning.
pub struct PseudoFlowEstimator<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a DiffusionSchedule,
    pub cond: &'a FrameConditionings,
    pub config: MaskConfig,
    /// Pixels whose latent moves less than this (max over channels) from
    /// the first frame get zero flow.
    pub static_tolerance: Option<f64>,
}

impl FlowEstimator for PseudoFlowEstimator<'_> {
    fn flow(&self, video: &LatentVideo) -> Result<DisplacementField> {
        let mut field = flow_from_video(self.denoiser, self.schedule, video, self.cond, &self.config)?;
        if let Some(tol) = self.static_tolerance {
            zero_static_flow(&mut field, video, tol)?;
        }
        Ok(field)
    }
}

/// Point every static pixel's flow at itself. A pixel is static in frame `i`
/// when no latent channel differs from frame 0 by `tol` or more.
pub fn zero_static_flow(field: &mut DisplacementField, video: &LatentVideo, tol: f64) -> Result<()> {
    let s = video.data.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    ensure!(field.frames + 1 == n, Contract, "flow has {} frames for a {n}-frame video", field.frames);
    let (gh, gw) = field.grid;
    let near = crate::losses::nearest_index((h, w), (gh, gw));
    let d = video.data.data();
    let at = |f: usize, ch: usize, px: usize| d[(f * c + ch) * h * w + px];
    for f in 1..n {
        for (k, &px) in near.iter().enumerate() {
            if (0..c).all(|ch| (at(f, ch, px) - at(0, ch, px)).abs() < tol) {
                let idx = (f - 1) * gh * gw + k;
                field.argmax_locs[idx] = [k / gw, k % gw];
                field.distances[idx] = 0.0;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub flow_similarity: f64,
    pub frame_consistency: f64,
    /// Token text → share; empty when no attention record was taken.
    pub attention_shares: BTreeMap<String, f64>,
}

pub fn evaluate_pair(
    source: &VideoFrames,
    edited: &VideoFrames,
    estimator: &dyn FlowEstimator,
    embedder: &dyn FrameEmbedder,
    latent_grid: (usize, usize),
) -> Result<MetricReport> {
    let fa = estimator.flow(&source.to_latent(latent_grid.0, latent_grid.1)?)?;
    let fb = estimator.flow(&edited.to_latent(latent_grid.0, latent_grid.1)?)?;
    Ok(MetricReport {
        flow_similarity: flow_similarity(&fa, &fb)?,
        frame_consistency: frame_consistency(edited, embedder)?,
        attention_shares: BTreeMap::new(),
    })
}
