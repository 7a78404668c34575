//! Pseudo optical flow from ST-Attn maps and the motion masks built on it.
//!
//! Frame indices are zero-based: frame 0 is the first frame, and masks cover
//! frames `1..N`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{st_key_frames, AttentionRecord, Denoiser};
use crate::checkpoint::{write_atomic, Container, CKPT_VERSION};
use crate::error::{ensure, Error, Result};
use crate::motion_embedding::FrameConditionings;
use crate::params::hex;
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor;
use crate::video::{write_png_gray, LatentVideo};

/// Which key frames feed the correspondence search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyFramePolicy {
    /// Frame 0 only.
    #[default]
    FirstOnly,
    /// Frame 0 and the preceding frame.
    FirstAndPreceding,
}

/// How distances against two key frames merge into one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    #[default]
    Max,
    Mean,
}

/// Head- and block-averaged ST-Attn maps for frames `1..N`.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedAttention {
    pub grid: (usize, usize),
    pub frames: usize,
    /// `maps[i - 1]` lists `(key frame, [h·w, h·w] map)` for query frame `i`.
    pub maps: Vec<Vec<(usize, Tensor)>>,
}

impl AggregatedAttention {
    pub fn key_frames(policy: KeyFramePolicy, i: usize) -> Vec<usize> {
        match policy {
            KeyFramePolicy::FirstOnly => vec![0],
            KeyFramePolicy::FirstAndPreceding => st_key_frames(i),
        }
    }

    /// Element-wise mean of several aggregates over identical layouts, rows
    /// renormalized.
    pub fn mean(items: &[AggregatedAttention]) -> Result<AggregatedAttention> {
        ensure!(!items.is_empty(), Aggregation, "nothing to average");
        let first = &items[0];
        let mut out = first.clone();
        for other in &items[1..] {
            ensure!(
                other.grid == first.grid && other.frames == first.frames,
                Aggregation,
                "aggregates disagree on grid or frame count"
            );
            for (acc, maps) in out.maps.iter_mut().zip(&other.maps) {
                for ((j, a), (k, b)) in acc.iter_mut().zip(maps) {
                    ensure!(j == k, Aggregation, "aggregates disagree on key frames");
                    a.add_assign_scaled(b, 1.0);
                }
            }
        }
        let p = first.grid.0 * first.grid.1;
        for maps in &mut out.maps {
            for (_, m) in maps.iter_mut() {
                renormalize_rows(m.data_mut(), p);
            }
        }
        Ok(out)
    }
}

fn renormalize_rows(data: &mut [f64], width: usize) {
    for row in data.chunks_mut(width) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
}

/// Mean over heads and the listed blocks of the recorded ST-Attn maps.
pub fn aggregate_attention(
    record: &AttentionRecord,
    mask_blocks: &[usize],
    policy: KeyFramePolicy,
) -> Result<AggregatedAttention> {
    ensure!(!mask_blocks.is_empty(), Aggregation, "no mask blocks listed");
    let n = record.frames;
    ensure!(n >= 2, Aggregation, "need at least two frames, record has {n}");
    let grid = record
        .grid(mask_blocks[0])
        .ok_or_else(|| Error::Aggregation(format!("block {} not in record", mask_blocks[0])))?;
    for &b in mask_blocks {
        let g = record
            .grid(b)
            .ok_or_else(|| Error::Aggregation(format!("block {b} not in record")))?;
        ensure!(
            g == grid,
            Aggregation,
            "block {b} has grid {g:?}, block {} has {grid:?}",
            mask_blocks[0]
        );
    }
    let p = grid.0 * grid.1;
    let mut maps = Vec::with_capacity(n - 1);
    for i in 1..n {
        let mut per_key = Vec::new();
        for j in AggregatedAttention::key_frames(policy, i) {
            let mut acc = vec![0.0; p * p];
            let mut count = 0usize;
            for &b in mask_blocks {
                let t = record.st_attn.get(&(b, i, j)).ok_or_else(|| {
                    Error::Aggregation(format!(
                        "missing ST-Attn for block {b}, frame {i}, key frame {j}"
                    ))
                })?;
                ensure!(
                    t.shape().len() == 3 && t.shape()[1..] == [p, p],
                    Aggregation,
                    "block {b} frame {i}: map shape {:?} does not match grid {grid:?}",
                    t.shape()
                );
                for head in t.data().chunks(p * p) {
                    acc.iter_mut().zip(head).for_each(|(a, x)| *a += x);
                    count += 1;
                }
            }
            acc.iter_mut().for_each(|a| *a /= count as f64);
            renormalize_rows(&mut acc, p);
            per_key.push((j, Tensor::from_parts(vec![p, p], acc)));
        }
        maps.push(per_key);
    }
    Ok(AggregatedAttention {
        grid,
        frames: n,
        maps,
    })
}

/// Per-pixel argmax correspondences and displacement lengths for frames
/// `1..N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    pub grid: (usize, usize),
    /// `N − 1`.
    pub frames: usize,
    /// `[(N−1)·h·w]` (row, col) of the best-matching key pixel in frame 0.
    pub argmax_locs: Vec<[usize; 2]>,
    /// `[(N−1)·h·w]` displacement lengths.
    pub distances: Vec<f64>,
    pub normalized: bool,
}

impl DisplacementField {
    pub fn pixels(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn frame_distances(&self, f: usize) -> &[f64] {
        let p = self.pixels();
        &self.distances[f * p..(f + 1) * p]
    }

    /// Displacement vectors `(argmax − query)` in grid cells, `[(N−1)·h·w]`.
    pub fn flow_vectors(&self) -> Vec<[f64; 2]> {
        let (_, w) = self.grid;
        let p = self.pixels();
        self.argmax_locs
            .iter()
            .enumerate()
            .map(|(idx, loc)| {
                let k = idx % p;
                let (r, c) = (k / w, k % w);
                [loc[0] as f64 - r as f64, loc[1] as f64 - c as f64]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub key_frame_policy: KeyFramePolicy,
    pub combiner: Combiner,
    /// Divide distances by the grid diagonal.
    pub normalize: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            key_frame_policy: KeyFramePolicy::FirstOnly,
            combiner: Combiner::Max,
            normalize: true,
        }
    }
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

pub fn compute_pseudo_flow(agg: &AggregatedAttention, config: &FlowConfig) -> DisplacementField {
    let (h, w) = agg.grid;
    let p = h * w;
    let scale = if config.normalize {
        ((h * h + w * w) as f64).sqrt()
    } else {
        1.0
    };
    let mut argmax_locs = Vec::with_capacity(agg.maps.len() * p);
    let mut distances = Vec::with_capacity(agg.maps.len() * p);
    for per_key in &agg.maps {
        for k in 0..p {
            let (r, c) = ((k / w) as f64, (k % w) as f64);
            let mut combined: Option<f64> = None;
            for (slot, (_, map)) in per_key.iter().enumerate() {
                let best = argmax(&map.data()[k * p..(k + 1) * p]);
                let (br, bc) = (best / w, best % w);
                if slot == 0 {
                    argmax_locs.push([br, bc]);
                }
                let d = ((br as f64 - r).powi(2) + (bc as f64 - c).powi(2)).sqrt() / scale;
                combined = Some(match (combined, config.combiner) {
                    (None, _) => d,
                    (Some(a), Combiner::Max) => a.max(d),
                    (Some(a), Combiner::Mean) => a + d,
                });
            }
            let mut d = combined.unwrap_or(0.0);
            if config.combiner == Combiner::Mean && !per_key.is_empty() {
                d /= per_key.len() as f64;
            }
            distances.push(d);
        }
    }
    DisplacementField {
        grid: agg.grid,
        frames: agg.maps.len(),
        argmax_locs,
        distances,
        normalized: config.normalize,
    }
}

/// Thresholding rule for turning distances into masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub quantile: f64,
    /// Minimum distance, in the field's units.
    pub floor: f64,
    /// Box-blur radius; 0 keeps masks binary.
    pub smooth_radius: usize,
    pub flow: FlowConfig,
    /// Timesteps at which ST-Attn maps are probed and averaged.
    pub t_probe: Vec<usize>,
    pub noise_seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            quantile: 0.75,
            floor: 0.05,
            smooth_radius: 0,
            flow: FlowConfig::default(),
            t_probe: vec![500],
            noise_seed: 0,
        }
    }
}

/// `M^i` for frames `1..N`, entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionMasks {
    /// `[N − 1, h, w]`
    pub masks: Tensor,
    pub meta: MaskMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskMeta {
    pub quantile: f64,
    pub floor: f64,
    pub smooth_radius: usize,
    pub normalized: bool,
    /// Per-frame thresholds actually applied, `None` for constant fields.
    pub thresholds: Vec<Option<f64>>,
}

impl MotionMasks {
    /// Number of masked frames (`N − 1`).
    pub fn frames(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.masks.shape()[1], self.masks.shape()[2])
    }

    /// Mask of video frame `i ≥ 1`.
    pub fn frame(&self, i: usize) -> &[f64] {
        let (h, w) = self.grid();
        &self.masks.data()[(i - 1) * h * w..i * h * w]
    }

    pub fn density(&self) -> f64 {
        self.masks.mean()
    }

    /// `mask_0002.png`, … (video frame numbering from 0001) and `masks.json`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (h, w) = self.grid();
        for i in 1..=self.frames() {
            write_png_gray(&dir.join(format!("mask_{:04}.png", i + 1)), h, w, self.frame(i))?;
        }
        let sidecar = serde_json::json!({
            "first_frame": 2,
            "frames": self.frames(),
            "grid": [h, w],
            "threshold": self.meta,
        });
        write_atomic(&dir.join("masks.json"), serde_json::to_string_pretty(&sidecar)?.as_bytes())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut t = BTreeMap::new();
        t.insert("masks".to_string(), self.masks.clone());
        Ok(Container::new(CKPT_VERSION, t, serde_json::to_value(&self.meta)?))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let masks = c.tensor("masks")?.clone();
        ensure!(masks.shape().len() == 3, Checkpoint, "masks must be [N-1, h, w]");
        Ok(Self {
            masks,
            meta: serde_json::from_value(c.meta.clone())?,
        })
    }
}

/// Nearest-rank quantile: the sorted value at index `⌊q·(n−1)⌋`.
pub fn quantile_lower(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[((q * (v.len() - 1) as f64).floor() as usize).min(v.len() - 1)]
}

pub fn extract_motion_masks(
    field: &DisplacementField,
    quantile: f64,
    floor: f64,
    smooth_radius: usize,
) -> Result<MotionMasks> {
    ensure!(
        quantile > 0.0 && quantile < 1.0,
        Config,
        "mask quantile {quantile} outside (0, 1)"
    );
    let (h, w) = field.grid;
    let p = h * w;
    let mut data = Vec::with_capacity(field.frames * p);
    let mut thresholds = Vec::with_capacity(field.frames);
    for f in 0..field.frames {
        let d = field.frame_distances(f);
        let constant = d.iter().all(|&x| x == d[0]);
        if constant {
            data.extend(std::iter::repeat_n(0.0, p));
            thresholds.push(None);
            continue;
        }
        let thr = quantile_lower(d, quantile).max(floor);
        thresholds.push(Some(thr));
        let mask: Vec<f64> = d.iter().map(|&x| if x >= thr { 1.0 } else { 0.0 }).collect();
        data.extend(if smooth_radius > 0 {
            box_blur(&mask, h, w, smooth_radius)
        } else {
            mask
        });
    }
    Ok(MotionMasks {
        masks: Tensor::from_parts(vec![field.frames, h, w], data),
        meta: MaskMeta {
            quantile,
            floor,
            smooth_radius,
            normalized: field.normalized,
            thresholds,
        },
    })
}

/// Mean over the in-bounds `(2r+1)²` window, clamped to `[0, 1]`.
fn box_blur(x: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let r = r as isize;
    let mut out = vec![0.0; h * w];
    for row in 0..h as isize {
        for col in 0..w as isize {
            let (mut s, mut n) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (y, x2) = (row + dy, col + dx);
                    if y >= 0 && x2 >= 0 && y < h as isize && x2 < w as isize {
                        s += x[(y as usize) * w + x2 as usize];
                        n += 1.0;
                    }
                }
            }
            out[row as usize * w + col as usize] = (s / n).clamp(0.0, 1.0);
        }
    }
    out
}

/// Intersection over union of a mask (cells ≥ 0.5) and a boolean region.
/// Two empty sets score 1.
pub fn mask_iou(mask: &[f64], truth: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&m, &t) in mask.iter().zip(truth) {
        let m = m >= 0.5;
        inter += (m && t) as usize;
        union += (m || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Noise the clean latent to each probe timestep with one shared seeded
/// draw, record ST-Attn, and average the aggregates.
pub fn probe_attention(
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    z0: &LatentVideo,
    cond: &FrameConditionings,
    config: &MaskConfig,
) -> Result<AggregatedAttention> {
    ensure!(!config.t_probe.is_empty(), Config, "t_probe must be nonempty");
    let mut rng = ChaCha8Rng::seed_from_u64(config.noise_seed);
    let noise = Tensor::randn(z0.data.shape(), 1.0, &mut rng);
    let mut aggs = Vec::with_capacity(config.t_probe.len());
    for &t in &config.t_probe {
        let zt = schedule.add_noise(&z0.data, &noise, t)?;
        let (_, record) = denoiser.denoise(&zt, t, cond, true)?;
        let record = record.expect("recording requested");
        aggs.push(aggregate_attention(
            &record,
            &denoiser.config().mask_blocks,
            config.flow.key_frame_policy,
        )?);
    }
    AggregatedAttention::mean(&aggs)
}

pub fn flow_from_video(
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    z0: &LatentVideo,
    cond: &FrameConditionings,
    config: &MaskConfig,
) -> Result<DisplacementField> {
    let agg = probe_attention(denoiser, schedule, z0, cond, config)?;
    Ok(compute_pseudo_flow(&agg, &config.flow))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Miss,
    Disabled,
}

/// Cache file for a (video, conditioning, model, config) combination.
pub fn mask_cache_path(
    dir: &Path,
    denoiser: &dyn Denoiser,
    z0: &LatentVideo,
    cond: &FrameConditionings,
    config: &MaskConfig,
) -> Result<PathBuf> {
    let mut video = Sha256::new();
    video.update(z0.data.to_le_bytes());
    let mut cfg = Sha256::new();
    cfg.update(serde_json::to_vec(config)?);
    cfg.update(serde_json::to_vec(&denoiser.config().mask_blocks)?);
    cfg.update(denoiser.fingerprint().as_bytes());
    cfg.update(cond.embeddings.to_le_bytes());
    let v = hex(&video.finalize());
    let c = hex(&cfg.finalize());
    Ok(dir.join(format!("cache-{}-{}.ckpt", &v[..16], &c[..16])))
}

/// Masks for a clean latent video, optionally cached under `cache_dir`.
pub fn masks_from_video(
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    z0: &LatentVideo,
    cond: &FrameConditionings,
    config: &MaskConfig,
    cache_dir: Option<&Path>,
) -> Result<(MotionMasks, CacheStatus)> {
    let cache = cache_dir
        .map(|d| mask_cache_path(d, denoiser, z0, cond, config))
        .transpose()?;
    if let Some(path) = &cache {
        if path.exists() {
            let c = Container::load(path, CKPT_VERSION)?;
            return Ok((MotionMasks::from_container(&c)?, CacheStatus::Hit));
        }
    }
    let field = flow_from_video(denoiser, schedule, z0, cond, config)?;
    let masks = extract_motion_masks(&field, config.quantile, config.floor, config.smooth_radius)?;
    match cache {
        Some(path) => {
            masks.to_container()?.save(&path)?;
            Ok((masks, CacheStatus::Miss))
        }
        None => Ok((masks, CacheStatus::Disabled)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn record_from(maps: &[(usize, usize, usize, Tensor)], grid: (usize, usize), n: usize) -> AttentionRecord {
        let mut rec = AttentionRecord {
            frames: n,
            ..Default::default()
        };
        for (b, i, j, t) in maps {
            rec.st_attn.insert((*b, *i, *j), t.clone());
            rec.grids.insert(*b, grid);
        }
        rec
    }

    #[test]
    fn hand_set_two_block_mean() {
        // 2×2 grid, one head per block, frame 1 against frame 0
        let a = Tensor::new(
            &[1, 4, 4],
            vec![
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.5, 0.5, 0.0, 0.0, //
                0.25, 0.25, 0.25, 0.25,
            ],
        )
        .unwrap();
        let b = Tensor::new(
            &[1, 4, 4],
            vec![
                0.0, 1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.25, 0.25, 0.25, 0.25,
            ],
        )
        .unwrap();
        let rec = record_from(&[(2, 1, 0, a), (3, 1, 0, b)], (2, 2), 2);
        let agg = aggregate_attention(&rec, &[2, 3], KeyFramePolicy::FirstOnly).unwrap();
        let want = [
            0.5, 0.5, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.25, 0.25, 0.5, 0.0, //
            0.25, 0.25, 0.25, 0.25,
        ];
        assert_eq!(agg.maps[0][0].1.data(), &want);
    }

    #[test]
    fn missing_entries_are_named() {
        let rec = record_from(&[(2, 1, 0, Tensor::full(&[1, 4, 4], 0.25))], (2, 2), 3);
        let err = aggregate_attention(&rec, &[2], KeyFramePolicy::FirstOnly).unwrap_err();
        assert!(err.to_string().contains("frame 2"), "{err}");
    }

    #[test]
    fn peaked_attention_gives_raw_distance() {
        let (h, w) = (8, 8);
        let p = h * w;
        let mut m = vec![0.0; p * p];
        for k in 0..p {
            let (r, c) = (k / w, k % w);
            let target = if k == 3 * w + 2 { 3 * w + 4 } else { r * w + c };
            m[k * p + target] = 1.0;
        }
        let agg = AggregatedAttention {
            grid: (h, w),
            frames: 2,
            maps: vec![vec![(0, Tensor::new(&[p, p], m).unwrap())]],
        };
        let raw = FlowConfig {
            normalize: false,
            ..Default::default()
        };
        let f = compute_pseudo_flow(&agg, &raw);
        assert_eq!(f.distances[3 * w + 2], 2.0);
        assert_eq!(f.distances.iter().filter(|&&d| d != 0.0).count(), 1);
        assert_eq!(f.flow_vectors()[3 * w + 2], [0.0, 2.0]);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4, 0.0]), 1);
        assert_eq!(argmax(&[0.25; 4]), 0);
    }

    #[test]
    fn single_outlier_is_the_only_masked_pixel() {
        let mut d = vec![0.0; 16];
        d[5] = 5.0;
        let field = DisplacementField {
            grid: (4, 4),
            frames: 1,
            argmax_locs: vec![[0, 0]; 16],
            distances: d,
            normalized: false,
        };
        let m = extract_motion_masks(&field, 0.75, 1.0, 0).unwrap();
        let marked: Vec<usize> = (0..16).filter(|&k| m.masks.data()[k] == 1.0).collect();
        assert_eq!(marked, vec![5]);
    }

    #[test]
    fn constant_field_gives_empty_masks() {
        let field = DisplacementField {
            grid: (3, 3),
            frames: 2,
            argmax_locs: vec![[0, 0]; 18],
            distances: vec![0.7; 18],
            normalized: true,
        };
        let m = extract_motion_masks(&field, 0.5, 0.0, 1).unwrap();
        assert_eq!(m.density(), 0.0);
        assert_eq!(m.meta.thresholds, vec![None, None]);
    }

    #[test]
    fn smoothing_stays_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d: Vec<f64> = (0..2 * 36).map(|_| rng.random::<f64>()).collect();
        let field = DisplacementField {
            grid: (6, 6),
            frames: 2,
            argmax_locs: vec![[0, 0]; 72],
            distances: d,
            normalized: true,
        };
        let m = extract_motion_masks(&field, 0.75, 0.0, 1).unwrap();
        assert!(m.masks.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(m.masks.data().iter().any(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn quantile_bounds_checked() {
        let field = DisplacementField {
            grid: (1, 2),
            frames: 1,
            argmax_locs: vec![[0, 0]; 2],
            distances: vec![0.0, 1.0],
            normalized: false,
        };
        assert!(matches!(extract_motion_masks(&field, 1.0, 0.0, 0), Err(Error::Config(_))));
        assert!(matches!(extract_motion_masks(&field, 0.0, 0.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn export_writes_pngs_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let masks = MotionMasks {
            masks: Tensor::new(&[2, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap(),
            meta: MaskMeta {
                quantile: 0.75,
                floor: 0.05,
                smooth_radius: 0,
                normalized: true,
                thresholds: vec![Some(0.1), Some(0.2)],
            },
        };
        masks.export(dir.path()).unwrap();
        assert!(dir.path().join("mask_0002.png").exists());
        assert!(dir.path().join("mask_0003.png").exists());
        let (h, w, px) = crate::video::read_png_rgb(&dir.path().join("mask_0003.png")).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(&px[..4], &[0.0, 1.0, 1.0, 0.0]);
        let back = MotionMasks::from_container(&masks.to_container().unwrap()).unwrap();
        assert_eq!(back, masks);
    }
}
