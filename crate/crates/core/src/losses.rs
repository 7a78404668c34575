//! Denoising loss, the motion-aware cross-attention regularizer and their
//! weighted sum.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::AttentionRecord;
use crate::error::{ensure, Result};
use crate::pseudo_flow::MotionMasks;
use crate::tensor::Tensor;

/// Guard added to the per-frame maximum before normalizing.
pub const MAX_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ldm: f64,
    pub attn: f64,
    pub total: f64,
    pub lambda_attn: f64,
}

impl LossReport {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn total_loss(ldm: f64, attn: f64, lambda_attn: f64) -> Result<LossReport> {
    ensure!(
        lambda_attn >= 0.0,
        Config,
        "lambda_attn must be nonnegative, got {lambda_attn}"
    );
    Ok(LossReport {
        ldm,
        attn,
        total: ldm + lambda_attn * attn,
        lambda_attn,
    })
}

/// Mean squared error over all elements.
pub fn ldm_loss(noise_pred: &Tensor, noise_true: &Tensor) -> Result<f64> {
    ensure!(
        noise_pred.shape() == noise_true.shape(),
        Contract,
        "prediction shape {:?} != target shape {:?}",
        noise_pred.shape(),
        noise_true.shape()
    );
    let s: f64 = noise_pred
        .data()
        .iter()
        .zip(noise_true.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / noise_pred.len() as f64)
}

pub fn ldm_loss_graph(g: &mut Graph, noise_pred: Var, noise_true: Var) -> Var {
    let d = g.sub(noise_pred, noise_true);
    let sq = g.square(d);
    g.mean(sq)
}

/// How the motion-slot attention column is scaled before comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CaScaling {
    /// Divide each frame's map by its maximum (plus a small guard).
    #[default]
    MaxNorm,
    /// Use the head/layer-averaged column as is.
    Raw,
}

/// Nearest-neighbour source cell of each target cell when resampling a
/// `from` grid onto a `to` grid.
pub fn nearest_index(from: (usize, usize), to: (usize, usize)) -> Vec<usize> {
    let mut idx = Vec::with_capacity(to.0 * to.1);
    for r in 0..to.0 {
        for c in 0..to.1 {
            idx.push((r * from.0 / to.0) * from.1 + c * from.1 / to.1);
        }
    }
    idx
}

fn check_slot_and_masks(
    motion_slot: usize,
    tokens: usize,
    masks: &MotionMasks,
    frames: usize,
) -> Result<()> {
    ensure!(
        motion_slot < tokens,
        Contract,
        "motion slot {motion_slot} out of range for {tokens} tokens"
    );
    ensure!(
        masks.frames() + 1 == frames,
        Contract,
        "masks cover {} frames; the regularizer needs exactly frames 2..{frames} (the first frame carries no mask)",
        masks.frames()
    );
    Ok(())
}

/// Cross-attention regularizer on the graph. `cross_probs` maps block id to
/// `[N, heads, h·w, L]`; `grids` gives each block's `(h, w)`.
pub fn cross_attention_loss_graph(
    g: &mut Graph,
    cross_probs: &BTreeMap<usize, Var>,
    grids: &BTreeMap<usize, (usize, usize)>,
    layer_set: &[usize],
    motion_slot: usize,
    masks: &MotionMasks,
    scaling: CaScaling,
) -> Result<Var> {
    ensure!(!layer_set.is_empty(), Contract, "empty layer set");
    let mgrid = masks.grid();
    let mp = mgrid.0 * mgrid.1;
    let mut columns = Vec::with_capacity(layer_set.len());
    let mut frames = 0;
    for &b in layer_set {
        let probs = *cross_probs
            .get(&b)
            .ok_or_else(|| crate::Error::Contract(format!("no cross-attention for block {b}")))?;
        let grid = *grids
            .get(&b)
            .ok_or_else(|| crate::Error::Contract(format!("no grid for block {b}")))?;
        let s = g.shape(probs).to_vec();
        let (n, heads, p, l) = (s[0], s[1], s[2], s[3]);
        ensure!(p == grid.0 * grid.1, Contract, "block {b} pixel count mismatch");
        check_slot_and_masks(motion_slot, l, masks, n)?;
        frames = n;
        let near = nearest_index(grid, mgrid);
        let mut idx = Vec::with_capacity((n - 1) * heads * mp);
        for i in 1..n {
            for h in 0..heads {
                for &src in &near {
                    idx.push((((i * heads + h) * p + src) * l + motion_slot) as u32);
                }
            }
        }
        let idx: Rc<[u32]> = idx.into();
        let col = g.gather(probs, idx, &[1, n - 1, heads, mp]);
        columns.push(col);
    }
    let stacked = if columns.len() == 1 {
        columns[0]
    } else {
        g.concat(&columns)
    };
    let over_layers = g.mean_axis(stacked, 0);
    let ca = g.mean_axis(over_layers, 1);
    let ca = match scaling {
        CaScaling::MaxNorm => g.max_norm_rows(ca, MAX_NORM_EPS),
        CaScaling::Raw => ca,
    };
    let target = g.constant(masks.masks.clone().reshape(&[frames - 1, mp])?);
    let d = g.sub(ca, target);
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Value-level regularizer over a recorded pass.
pub fn cross_attention_loss(
    record: &AttentionRecord,
    motion_slot: usize,
    masks: &MotionMasks,
    layer_set: &[usize],
) -> Result<f64> {
    cross_attention_loss_scaled(record, motion_slot, masks, layer_set, CaScaling::MaxNorm)
}

pub fn cross_attention_loss_scaled(
    record: &AttentionRecord,
    motion_slot: usize,
    masks: &MotionMasks,
    layer_set: &[usize],
    scaling: CaScaling,
) -> Result<f64> {
    ensure!(!layer_set.is_empty(), Contract, "empty layer set");
    let n = record.frames;
    let mut g = Graph::new();
    let mut probs = BTreeMap::new();
    for &b in layer_set {
        let mut frames = Vec::with_capacity(n);
        for i in 0..n {
            let t = record.cross_attn.get(&(b, i)).ok_or_else(|| {
                crate::Error::Contract(format!("no cross-attention for block {b}, frame {i}"))
            })?;
            frames.push(t.clone());
        }
        probs.insert(b, g.constant(Tensor::stack(&frames)?));
    }
    let loss = cross_attention_loss_graph(
        &mut g,
        &probs,
        &record.grids,
        layer_set,
        motion_slot,
        masks,
        scaling,
    )?;
    Ok(g.value(loss).item())
}
