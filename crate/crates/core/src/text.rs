//! Vocabulary, prompt tokenization and the frozen toy text encoder.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, GATHER_ZERO};
use crate::error::{ensure, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const PAD: &str = "<pad>";
pub const PRO: &str = "<pro>";
pub const MOT: &str = "<mot>";

const WORDS: &[&str] = &[
    PAD, PRO, MOT, "a", "an", "photo", "of", "the", "in", "on", "garden", "red", "green", "blue",
    "yellow", "white", "square", "circle", "diamond", "object", "sliding", "jumping", "moving",
    "roaring", "doing", "cat", "dog", "raccoon", "pikachu",
];

/// Fixed word list; ids are positions in the list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    context_len: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            words: WORDS.iter().map(|w| w.to_string()).collect(),
            context_len: 8,
        }
    }
}

/// Prompt ids padded to the context length, with the positions of the
/// pseudo-word slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPrompt {
    pub text: String,
    pub ids: Vec<u32>,
    pub motion_slot: Option<usize>,
    pub protagonist_slot: Option<usize>,
}

impl TokenizedPrompt {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    /// Split on whitespace, lowercase, and map `⟨mot⟩`/`<mot>` and
    /// `⟨pro⟩`/`<pro>` to their slots.
    pub fn tokenize(&self, text: &str) -> Result<TokenizedPrompt> {
        let mut ids = Vec::new();
        let mut motion_slot = None;
        let mut protagonist_slot = None;
        for raw in text.split_whitespace() {
            let word = raw.to_lowercase().replace(['⟨', '⟩'], "");
            let word = match word.as_str() {
                "mot" | "<mot>" => MOT.to_string(),
                "pro" | "<pro>" => PRO.to_string(),
                w => w.trim_matches(|c: char| !c.is_alphanumeric()).to_string(),
            };
            if word.is_empty() {
                continue;
            }
            let id = self.id(&word).ok_or_else(|| {
                crate::Error::Prompt(format!("unknown word `{raw}` in prompt `{text}`"))
            })?;
            let slot = match word.as_str() {
                MOT => Some(&mut motion_slot),
                PRO => Some(&mut protagonist_slot),
                _ => None,
            };
            if let Some(slot) = slot {
                ensure!(slot.is_none(), Prompt, "slot `{word}` appears twice in `{text}`");
                *slot = Some(ids.len());
            }
            ids.push(id);
        }
        ensure!(
            ids.len() <= self.context_len,
            Prompt,
            "prompt `{text}` has {} tokens, context holds {}",
            ids.len(),
            self.context_len
        );
        ids.resize(self.context_len, 0);
        Ok(TokenizedPrompt {
            text: text.to_string(),
            ids,
            motion_slot,
            protagonist_slot,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            layers: 2,
            seed: 7,
        }
    }
}

/// Bidirectional self-attention encoder with seeded random weights.
///
/// It is never trained; it only has to be a deterministic contextual map
/// from token embeddings to conditioning sequences.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub vocab: Vocab,
    params: ParamStore,
}

impl TextEncoder {
    pub fn new(vocab: Vocab, config: TextEncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let mut params = ParamStore::new();
        params.insert("token", Tensor::randn(&[vocab.len(), d], 1.0, &mut rng));
        params.insert(
            "position",
            Tensor::randn(&[vocab.context_len(), d], 0.3, &mut rng),
        );
        let s = 1.0 / (d as f64).sqrt();
        for l in 0..config.layers {
            for w in ["q", "k", "v", "o"] {
                params.insert(format!("l{l}.{w}"), Tensor::randn(&[d, d], s, &mut rng));
            }
            params.insert(format!("l{l}.ff1"), Tensor::randn(&[d, 2 * d], s, &mut rng));
            params.insert(
                format!("l{l}.ff2"),
                Tensor::randn(&[2 * d, d], s / 2f64.sqrt(), &mut rng),
            );
        }
        Self {
            config,
            vocab,
            params,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn context_len(&self) -> usize {
        self.vocab.context_len()
    }

    /// Raw (pre-encoder) embedding of a single vocabulary word.
    pub fn word_embedding(&self, word: &str) -> Result<Tensor> {
        let id = self
            .vocab
            .id(word)
            .ok_or_else(|| crate::Error::Prompt(format!("unknown word `{word}`")))?;
        Ok(self.params.get("token").unwrap().outer(id as usize))
    }

    /// Input embeddings `[L, d]` of a prompt before slot substitution.
    pub fn token_embeddings(&self, prompt: &TokenizedPrompt) -> Tensor {
        let table = self.params.get("token").unwrap();
        let d = self.dim();
        let data = prompt
            .ids
            .iter()
            .flat_map(|&id| table.outer(id as usize).into_data())
            .collect();
        Tensor::from_parts(vec![prompt.ids.len(), d], data)
    }

    /// Encode `[B, L, d]` input embeddings; weights enter as constants so
    /// gradients reach the inputs only.
    pub fn encode(&self, g: &mut Graph, inputs: Var) -> Var {
        let shape = g.shape(inputs).to_vec();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let pos = g.constant(self.params.get("position").unwrap().clone());
        let idx: Rc<[u32]> = (0..b * l * d).map(|i| (i % (l * d)) as u32).collect();
        let pos = g.gather(pos, idx, &[b, l, d]);
        let mut x = g.add(inputs, pos);
        for layer in 0..self.config.layers {
            let w = |name: &str| self.params.get(&format!("l{layer}.{name}")).unwrap().clone();
            let (wq, wk, wv, wo) = (
                g.constant(w("q")),
                g.constant(w("k")),
                g.constant(w("v")),
                g.constant(w("o")),
            );
            let h = g.layer_norm(x, 1e-5);
            let q = g.matmul(h, wq);
            let k = g.matmul(h, wk);
            let v = g.matmul(h, wv);
            let p = g.attn_probs(q, k, self.config.heads);
            let a = g.attn_apply(p, v);
            let a = g.matmul(a, wo);
            x = g.add(x, a);
            let (f1, f2) = (g.constant(w("ff1")), g.constant(w("ff2")));
            let h = g.layer_norm(x, 1e-5);
            let h = g.matmul(h, f1);
            let h = g.silu(h);
            let h = g.matmul(h, f2);
            x = g.add(x, h);
        }
        g.layer_norm(x, 1e-5)
    }

    /// Encode plain prompts without pseudo-word substitution.
    pub fn encode_prompts(&self, prompts: &[&TokenizedPrompt]) -> Tensor {
        let mut g = Graph::new();
        let rows: Vec<Tensor> = prompts.iter().map(|p| self.token_embeddings(p)).collect();
        let x = g.constant(Tensor::stack(&rows).expect("equal context lengths"));
        let y = self.encode(&mut g, x);
        g.value(y).clone()
    }
}

/// Index helper: rows of width `d` gathered from a row-major source.
pub(crate) fn row_gather_index(rows: &[Option<usize>], d: usize) -> Rc<[u32]> {
    rows.iter()
        .flat_map(|r| {
            (0..d).map(move |c| match r {
                Some(r) => (r * d + c) as u32,
                None => GATHER_ZERO,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_finds_slots_and_pads() {
        let v = Vocab::default();
        let p = v.tokenize("a ⟨pro⟩ ⟨mot⟩ in the garden").unwrap();
        assert_eq!(p.ids.len(), v.context_len());
        assert_eq!(p.protagonist_slot, Some(1));
        assert_eq!(p.motion_slot, Some(2));
        assert_eq!(p.ids[6], 0);
        let q = v.tokenize("Pikachu <mot>").unwrap();
        assert_eq!(q.motion_slot, Some(1));
        assert_eq!(q.protagonist_slot, None);
    }

    #[test]
    fn tokenize_rejects_unknown_long_and_duplicate() {
        let v = Vocab::default();
        assert!(v.tokenize("a zebra").is_err());
        assert!(v.tokenize("a a a a a a a a a").is_err());
        assert!(v.tokenize("<mot> <mot>").is_err());
    }

    #[test]
    fn encoder_is_deterministic_and_contextual() {
        let v = Vocab::default();
        let enc = TextEncoder::new(v.clone(), TextEncoderConfig::default());
        let a = v.tokenize("a red square").unwrap();
        let b = v.tokenize("a blue square").unwrap();
        let ea = enc.encode_prompts(&[&a]);
        assert_eq!(ea, enc.encode_prompts(&[&a]));
        let eb = enc.encode_prompts(&[&b]);
        // bidirectional mixing: position 0 ("a") sees the color word
        let d = enc.dim();
        assert_ne!(&ea.data()[..d], &eb.data()[..d]);
    }
}
