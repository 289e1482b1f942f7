//! Semantic expert: patch tokens for the rendered observation plus
//! embedded instruction tokens from a small closed vocabulary.

use crate::config::ModelConfig;
use crate::error::{Result, TrimotError};
use crate::graph::{Graph, Real, Var};
use crate::mot::positional_encoding;
use crate::params::ParamSet;
use ndarray::{Array2, Array3};
use std::collections::BTreeMap;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

/// Bijective token-string to id mapping with dense ids from 0 and fixed
/// special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    to_id: BTreeMap<String, u32>,
    words: Vec<String>,
}

impl Vocabulary {
    pub fn new(words: &[&str]) -> Self {
        let mut all = vec!["<pad>".to_string(), "<bos>".to_string(), "<eos>".to_string()];
        all.extend(words.iter().map(|w| w.to_string()));
        assert!(all.len() <= 256, "vocabulary capped at 256 tokens");
        let mut to_id = BTreeMap::new();
        for (i, w) in all.iter().enumerate() {
            let prev = to_id.insert(w.clone(), i as u32);
            assert!(prev.is_none(), "duplicate vocabulary word {w}");
        }
        Vocabulary { to_id, words: all }
    }

    /// The simulator's closed template grammar.
    pub fn grammar() -> Self {
        Vocabulary::new(&[
            "pick", "put", "stack", "the", "taller", "on", "plate", "block", "cylinder", "red",
            "green", "blue", "yellow", "purple", "orange",
        ])
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.to_id.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }

    pub fn to_map(&self) -> BTreeMap<String, u32> {
        self.to_id.clone()
    }

    pub fn from_map(map: &BTreeMap<String, u32>) -> Result<Self> {
        let mut words = vec![String::new(); map.len()];
        for (w, &id) in map {
            let slot = words
                .get_mut(id as usize)
                .ok_or_else(|| TrimotError::Config(format!("vocabulary ids not dense: {id}")))?;
            if !slot.is_empty() {
                return Err(TrimotError::Config(format!(
                    "vocabulary id {id} assigned twice"
                )));
            }
            *slot = w.clone();
        }
        Ok(Vocabulary {
            to_id: map.clone(),
            words,
        })
    }
}

/// BOS + word tokens + EOS, padded with PAD to `max_len`.
pub fn tokenize_instruction(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<u32>> {
    let mut ids = vec![BOS];
    for word in text.split_whitespace() {
        let id = vocab
            .id(word)
            .ok_or_else(|| TrimotError::Tokenize(format!("out-of-vocabulary word: {word}")))?;
        ids.push(id);
    }
    ids.push(EOS);
    if ids.len() > max_len {
        return Err(TrimotError::Tokenize(format!(
            "instruction needs {} tokens, budget is {max_len}",
            ids.len()
        )));
    }
    ids.resize(max_len, PAD);
    Ok(ids)
}

/// Flattens an H×W×3 image into patch rows (raster order), scaled to [0,1].
pub fn image_patches<T: Real>(image: &Array3<u8>, cfg: &ModelConfig) -> Result<Array2<T>> {
    let (h, w, c) = image.dim();
    if c != 3 || h != cfg.image_size || w != cfg.image_size {
        return Err(TrimotError::Shape(format!(
            "expected {0}×{0}×3 image, got {h}×{w}×{c}",
            cfg.image_size
        )));
    }
    patches_from_channels(&image.mapv(|v| T::from_f64(v as f64 / 255.0)), cfg)
}

/// Same patch layout for an already-scaled float image (used for the
/// ground-truth-depth input ablation).
pub fn patches_from_channels<T: Real>(image: &Array3<T>, cfg: &ModelConfig) -> Result<Array2<T>> {
    let (h, w, c) = image.dim();
    let p = cfg.patch;
    if c != 3 || h % p != 0 || w % p != 0 {
        return Err(TrimotError::Shape(format!(
            "image {h}×{w}×{c} not divisible into {p}×{p}×3 patches"
        )));
    }
    let side = h / p;
    let mut out = Array2::zeros((side * (w / p), p * p * 3));
    for pr in 0..side {
        for pc in 0..w / p {
            let row = pr * (w / p) + pc;
            let mut k = 0;
            for i in 0..p {
                for j in 0..p {
                    for ch in 0..3 {
                        out[(row, k)] = image[(pr * p + i, pc * p + j, ch)];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Builds the semantic stream: projected patch tokens followed by embedded
/// instruction tokens, with sinusoidal positions added.
pub fn embed_semantic<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    patches: &Array2<T>,
    instruction: &[u32],
) -> Result<Var> {
    if patches.dim() != (cfg.n_patches(), cfg.patch * cfg.patch * 3) {
        return Err(TrimotError::Shape(format!(
            "patch matrix {:?} does not match config", patches.dim()
        )));
    }
    if instruction.len() != cfg.text_len {
        return Err(TrimotError::Shape(format!(
            "instruction length {} != text budget {}",
            instruction.len(),
            cfg.text_len
        )));
    }
    let px = g.constant(patches.clone());
    let w = g.param(params, "sem.embed.patch.w");
    let b = g.param(params, "sem.embed.patch.b");
    let proj = g.matmul(px, w);
    let patch_tokens = g.add_row(proj, b);

    let table = g.param(params, "sem.embed.tok.w");
    let ids: Vec<usize> = instruction.iter().map(|&i| i as usize).collect();
    let text_tokens = g.gather_rows(table, ids);

    let tokens = g.concat_rows(&[patch_tokens, text_tokens]);
    let pos = g.constant(positional_encoding(cfg.n_semantic(), cfg.sem_width)?);
    Ok(g.add(tokens, pos))
}
