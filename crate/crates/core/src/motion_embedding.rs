//! The temporally expanded motion word and the protagonist pseudo-word.
//!
//! Frame `i` (zero-based) receives its own motion embedding
//! `v_mot(i) = W_mot · (v_b ⊕ γ(i))`, so the learnable parameter count does
//! not depend on the number of frames. The per-frame embedding replaces the
//! motion slot of the prompt before the text encoder runs, which yields one
//! conditioning sequence per frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;
use crate::text::{row_gather_index, TextEncoder, TokenizedPrompt};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaConfig {
    pub dim: usize,
    pub base: f64,
}

impl Default for GammaConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            base: 10000.0,
        }
    }
}

/// Interleaved `[sin(i/b^(2m/d)), cos(i/b^(2m/d))]` for `m = 0..d/2`.
pub fn positional_encode(i: usize, dim: usize, base: f64) -> Result<Vec<f64>> {
    ensure!(dim % 2 == 0, Config, "positional encoding dim {dim} must be even");
    let mut out = Vec::with_capacity(dim);
    for m in 0..dim / 2 {
        let angle = i as f64 / base.powf(2.0 * m as f64 / dim as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// Learnable state of the motion word.
///
/// The map over `v_b ⊕ γ(i)` is stored as two row blocks (`w_base` acting on
/// `v_b`, `w_gamma` acting on `γ(i)`) plus a bias, which is the same affine
/// map as a single `[d + d_γ] → [d]` matrix. `extra` holds the optional
/// second affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionWordParams {
    pub v_b: Tensor,
    pub w_base: Tensor,
    pub w_gamma: Tensor,
    pub bias: Tensor,
    pub extra: Option<(Tensor, Tensor)>,
    pub gamma: GammaConfig,
}

pub const MOTION_PREFIX: &str = "mot.";
pub const PROTAGONIST_NAME: &str = "pro.v";

impl MotionWordParams {
    /// Start at the source motion word: `w_base ≈ I` (σ = 1e-4 noise),
    /// `w_gamma = 0`, zero bias.
    pub fn init(v_b: Tensor, gamma: GammaConfig, two_layer: bool, seed: u64) -> Result<Self> {
        positional_encode(0, gamma.dim, gamma.base)?;
        let d = v_b.len();
        let v_b = v_b.reshape(&[d])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w_base = Tensor::randn(&[d, d], 1e-4, &mut rng);
        for i in 0..d {
            w_base.data_mut()[i * d + i] += 1.0;
        }
        let extra = two_layer.then(|| {
            let mut w = Tensor::randn(&[d, d], 1e-4, &mut rng);
            for i in 0..d {
                w.data_mut()[i * d + i] += 1.0;
            }
            (w, Tensor::zeros(&[d]))
        });
        Ok(Self {
            v_b,
            w_base,
            w_gamma: Tensor::zeros(&[gamma.dim, d]),
            bias: Tensor::zeros(&[d]),
            extra,
            gamma,
        })
    }

    pub fn dim(&self) -> usize {
        self.v_b.len()
    }

    pub fn param_count(&self) -> usize {
        self.v_b.len()
            + self.w_base.len()
            + self.w_gamma.len()
            + self.bias.len()
            + self.extra.as_ref().map_or(0, |(w, b)| w.len() + b.len())
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(format!("{MOTION_PREFIX}v_b"), self.v_b.clone());
        s.insert(format!("{MOTION_PREFIX}w_base"), self.w_base.clone());
        s.insert(format!("{MOTION_PREFIX}w_gamma"), self.w_gamma.clone());
        s.insert(format!("{MOTION_PREFIX}bias"), self.bias.clone());
        if let Some((w, b)) = &self.extra {
            s.insert(format!("{MOTION_PREFIX}w2"), w.clone());
            s.insert(format!("{MOTION_PREFIX}b2"), b.clone());
        }
        s
    }

    pub fn from_store(store: &ParamStore, gamma: GammaConfig) -> Result<Self> {
        let get = |n: &str| {
            store
                .get(&format!("{MOTION_PREFIX}{n}"))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing motion parameter `{n}`")))
        };
        let extra = match (get("w2"), get("b2")) {
            (Ok(w), Ok(b)) => Some((w, b)),
            _ => None,
        };
        Ok(Self {
            v_b: get("v_b")?,
            w_base: get("w_base")?,
            w_gamma: get("w_gamma")?,
            bias: get("bias")?,
            extra,
            gamma,
        })
    }

    /// Write values back from a store holding `mot.*` entries.
    pub fn update_from(&mut self, store: &ParamStore) -> Result<()> {
        *self = Self::from_store(store, self.gamma)?;
        Ok(())
    }

    /// `[n, d_γ]` matrix of γ(0..n).
    pub fn gamma_table(&self, n: usize) -> Tensor {
        let data = (0..n)
            .flat_map(|i| positional_encode(i, self.gamma.dim, self.gamma.base).unwrap())
            .collect();
        Tensor::from_parts(vec![n, self.gamma.dim], data)
    }

    /// `v_mot` for frames `0..n` as a `[n, d]` node.
    pub fn expand_on_graph(&self, g: &mut Graph, vars: &MotionVars, n: usize) -> Var {
        let d = self.dim();
        let gam = g.constant(self.gamma_table(n));
        let gpart = g.matmul(gam, vars.w_gamma);
        let vb = g.reshape(vars.v_b, &[1, d]);
        let bpart = g.matmul(vb, vars.w_base);
        let bpart = g.reshape(bpart, &[d]);
        let shift = g.add(bpart, vars.bias);
        let out = g.add_row(gpart, shift);
        match vars.extra {
            Some((w2, b2)) => {
                let y = g.matmul(out, w2);
                g.add_row(y, b2)
            }
            None => out,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MotionVars {
        MotionVars {
            v_b: g.leaf(self.v_b.clone(), trainable),
            w_base: g.leaf(self.w_base.clone(), trainable),
            w_gamma: g.leaf(self.w_gamma.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
            extra: self
                .extra
                .as_ref()
                .map(|(w, b)| (g.leaf(w.clone(), trainable), g.leaf(b.clone(), trainable))),
        }
    }
}

/// Graph handles of the motion-word parameters.
#[derive(Clone, Copy, Debug)]
pub struct MotionVars {
    pub v_b: Var,
    pub w_base: Var,
    pub w_gamma: Var,
    pub bias: Var,
    pub extra: Option<(Var, Var)>,
}

impl MotionVars {
    pub fn from_bindings(b: &Bindings) -> Self {
        let get = |n: &str| b.get(&format!("{MOTION_PREFIX}{n}"));
        Self {
            v_b: get("v_b"),
            w_base: get("w_base"),
            w_gamma: get("w_gamma"),
            bias: get("bias"),
            extra: b
                .try_get(&format!("{MOTION_PREFIX}w2"))
                .zip(b.try_get(&format!("{MOTION_PREFIX}b2"))),
        }
    }
}

/// `v_mot` for a single zero-based frame index.
pub fn expand_motion_embedding(params: &MotionWordParams, frame: usize) -> Tensor {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let all = params.expand_on_graph(&mut g, &vars, frame + 1);
    g.value(all).outer(frame)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtagonistEmbedding {
    pub v_pro: Tensor,
}

impl ProtagonistEmbedding {
    pub fn new(v_pro: Tensor) -> Result<Self> {
        ensure!(v_pro.is_finite(), Contract, "protagonist embedding must be finite");
        let d = v_pro.len();
        Ok(Self {
            v_pro: v_pro.reshape(&[d])?,
        })
    }
}

/// One encoded conditioning sequence per frame: `[N, L, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameConditionings {
    pub embeddings: Tensor,
}

impl FrameConditionings {
    pub fn frames(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn frame(&self, i: usize) -> Tensor {
        self.embeddings.outer(i)
    }

    /// Repeat a single `[L, d]` sequence for `n` frames.
    pub fn repeated(seq: &Tensor, n: usize) -> Self {
        let items = vec![seq.clone(); n];
        Self {
            embeddings: Tensor::stack(&items).expect("equal shapes"),
        }
    }
}

/// Pseudo-word sources for [`conditionings_on_graph`].
#[derive(Clone, Copy, Default)]
pub struct PseudoWords<'a> {
    pub motion: Option<(&'a MotionWordParams, MotionVars)>,
    pub protagonist: Option<Var>,
}

/// Build the `[n, L, d]` encoder inputs with slots substituted, then encode.
pub fn conditionings_on_graph(
    g: &mut Graph,
    prompt: &TokenizedPrompt,
    words: PseudoWords<'_>,
    encoder: &TextEncoder,
    n: usize,
) -> Result<Var> {
    ensure!(n >= 1, Contract, "need at least one frame");
    if words.motion.is_some() {
        ensure!(
            prompt.motion_slot.is_some(),
            Prompt,
            "motion word supplied but prompt `{}` has no ⟨mot⟩ slot",
            prompt.text
        );
    }
    if words.protagonist.is_some() {
        ensure!(
            prompt.protagonist_slot.is_some(),
            Prompt,
            "protagonist word supplied but prompt `{}` has no ⟨pro⟩ slot",
            prompt.text
        );
    }
    let d = encoder.dim();
    let l = prompt.len();
    let base = g.constant(encoder.token_embeddings(prompt));
    let mut sources = vec![base];
    let mut mot_offset = None;
    let mut pro_offset = None;
    let mut rows = l;
    if let Some((params, vars)) = words.motion {
        ensure!(
            params.dim() == d,
            Contract,
            "motion word dim {} != encoder dim {d}",
            params.dim()
        );
        sources.push(params.expand_on_graph(g, &vars, n));
        mot_offset = Some(rows);
        rows += n;
    }
    if let Some(v) = words.protagonist {
        ensure!(g.value(v).len() == d, Contract, "protagonist dim != encoder dim {d}");
        sources.push(g.reshape(v, &[1, d]));
        pro_offset = Some(rows);
    }
    let src = g.concat(&sources);
    let mut index_rows = Vec::with_capacity(n * l);
    for i in 0..n {
        for pos in 0..l {
            let row = if Some(pos) == prompt.motion_slot && mot_offset.is_some() {
                mot_offset.unwrap() + i
            } else if Some(pos) == prompt.protagonist_slot && pro_offset.is_some() {
                pro_offset.unwrap()
            } else {
                pos
            };
            index_rows.push(Some(row));
        }
    }
    let inputs = g.gather(src, row_gather_index(&index_rows, d), &[n, l, d]);
    Ok(encoder.encode(g, inputs))
}

/// Per-frame conditionings for a prompt with optional pseudo-words.
pub fn build_frame_conditionings(
    prompt: &TokenizedPrompt,
    motion: Option<&MotionWordParams>,
    pro: Option<&ProtagonistEmbedding>,
    encoder: &TextEncoder,
    n: usize,
) -> Result<FrameConditionings> {
    let mut g = Graph::new();
    let motion = motion.map(|m| (m, m.bind(&mut g, false)));
    let protagonist = pro.map(|p| g.constant(p.v_pro.clone()));
    let out = conditionings_on_graph(
        &mut g,
        prompt,
        PseudoWords {
            motion,
            protagonist,
        },
        encoder,
        n,
    )?;
    Ok(FrameConditionings {
        embeddings: g.value(out).clone(),
    })
}

/// Conditionings for an edit prompt: learned motion word, plain-text
/// protagonist (or the learned one when the prompt keeps ⟨pro⟩).
pub fn build_edit_conditionings(
    edit_prompt: &TokenizedPrompt,
    motion: &MotionWordParams,
    protagonist: Option<&ProtagonistEmbedding>,
    encoder: &TextEncoder,
    n: usize,
) -> Result<FrameConditionings> {
    ensure!(
        edit_prompt.motion_slot.is_some(),
        Prompt,
        "edit prompt `{}` has no ⟨mot⟩ slot",
        edit_prompt.text
    );
    let pro = protagonist.filter(|_| edit_prompt.protagonist_slot.is_some());
    build_frame_conditionings(edit_prompt, Some(motion), pro, encoder, n)
}

/// Encoder inputs `[n, L, d]` (before the encoder) for inspection: which
/// vectors each frame's sequence starts from.
pub fn encoder_inputs(
    prompt: &TokenizedPrompt,
    motion: Option<&MotionWordParams>,
    pro: Option<&ProtagonistEmbedding>,
    encoder: &TextEncoder,
    n: usize,
) -> Tensor {
    let base = encoder.token_embeddings(prompt);
    let d = encoder.dim();
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let mut seq = base.clone();
        if let (Some(m), Some(slot)) = (motion, prompt.motion_slot) {
            let v = expand_motion_embedding(m, i);
            seq.data_mut()[slot * d..(slot + 1) * d].copy_from_slice(v.data());
        }
        if let (Some(p), Some(slot)) = (pro, prompt.protagonist_slot) {
            seq.data_mut()[slot * d..(slot + 1) * d].copy_from_slice(p.v_pro.data());
        }
        frames.push(seq);
    }
    Tensor::stack(&frames).expect("equal shapes")
}
