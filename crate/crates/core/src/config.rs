//! Model and run configuration, serialized as JSON.

use crate::error::{Result, TrimotError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    /// Semantic and depth streams attend only to themselves; action attends
    /// to everything.
    Isolated,
    /// Semantic and depth streams additionally attend to each other.
    VlmDepthBidir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    DepthPretrain,
    VlaTrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthInit {
    Pretrained,
    Random,
}

/// What the depth expert's encoder consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthInput {
    /// The RGB observation (monocular prediction; ablation v). Mismatched
    /// with the depth-map pretraining input, and heights are invisible in
    /// RGB under the top-down camera.
    Rgb,
    /// The sensed depth map replicated to 3 channels (default: the
    /// simulator stands in for an RGB-D platform).
    GtDepth,
}

/// Architecture hyperparameters shared by all stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared transformer depth L.
    pub layers: usize,
    /// Shared head count H.
    pub heads: usize,
    /// Shared per-head width d_h.
    pub head_dim: usize,
    pub sem_width: usize,
    pub sem_mlp: usize,
    pub depth_width: usize,
    pub depth_mlp: usize,
    pub act_width: usize,
    pub act_mlp: usize,
    /// Square render size in pixels.
    pub image_size: usize,
    /// Patch side in pixels.
    pub patch: usize,
    /// Instruction token budget T_l.
    pub text_len: usize,
    pub vocab_size: usize,
    /// Self-attention layers in the depth encoder (before the shared stack).
    pub depth_enc_layers: usize,
    /// Action chunk length k.
    pub chunk_len: usize,
    pub action_dim: usize,
    pub proprio_dim: usize,
    /// False gives the no-depth-expert baseline (semantic + action only).
    pub include_depth: bool,
}

impl ModelConfig {
    /// Desk-scale default: trains on CPU in minutes while exercising
    /// unequal expert widths.
    pub fn desk_default() -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            head_dim: 16,
            sem_width: 128,
            sem_mlp: 256,
            depth_width: 96,
            depth_mlp: 192,
            act_width: 64,
            act_mlp: 128,
            image_size: 64,
            patch: 8,
            text_len: 8,
            vocab_size: crate::semantic::Vocabulary::grammar().len(),
            depth_enc_layers: 2,
            chunk_len: 8,
            action_dim: 4,
            proprio_dim: 4,
            include_depth: true,
        }
    }

    /// Tiny configuration for gradient checks (L=2, widths ≤ 16).
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            head_dim: 4,
            sem_width: 16,
            sem_mlp: 16,
            depth_width: 12,
            depth_mlp: 12,
            act_width: 8,
            act_mlp: 8,
            image_size: 16,
            patch: 8,
            text_len: 4,
            vocab_size: crate::semantic::Vocabulary::grammar().len(),
            depth_enc_layers: 1,
            chunk_len: 2,
            action_dim: 4,
            proprio_dim: 4,
            include_depth: true,
        }
    }

    /// Compact configuration: full 64×64 observations but narrow experts,
    /// for fast end-to-end runs on small CPU budgets.
    pub fn compact() -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            head_dim: 8,
            sem_width: 32,
            sem_mlp: 64,
            depth_width: 24,
            depth_mlp: 48,
            act_width: 16,
            act_mlp: 32,
            depth_enc_layers: 1,
            ..Self::desk_default()
        }
    }

    /// Small configuration: between `compact` and `desk_default`. Enough
    /// attention capacity (L=3, H=4) to localize objects from patches while
    /// still training in minutes on one CPU core.
    pub fn small() -> Self {
        ModelConfig {
            layers: 3,
            heads: 4,
            head_dim: 8,
            sem_width: 48,
            sem_mlp: 96,
            depth_width: 32,
            depth_mlp: 64,
            act_width: 24,
            act_mlp: 48,
            depth_enc_layers: 1,
            ..Self::desk_default()
        }
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Semantic stream length n_s = patches + instruction budget.
    pub fn n_semantic(&self) -> usize {
        self.n_patches() + self.text_len
    }

    /// Depth stream length n_d.
    pub fn n_depth(&self) -> usize {
        self.n_patches()
    }

    /// Action stream length n_a = proprio token + k action tokens.
    pub fn n_action(&self) -> usize {
        self.chunk_len + 1
    }

    pub fn attn_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("sem_width", self.sem_width),
            ("sem_mlp", self.sem_mlp),
            ("depth_width", self.depth_width),
            ("depth_mlp", self.depth_mlp),
            ("act_width", self.act_width),
            ("act_mlp", self.act_mlp),
            ("image_size", self.image_size),
            ("patch", self.patch),
            ("text_len", self.text_len),
            ("vocab_size", self.vocab_size),
            ("chunk_len", self.chunk_len),
            ("action_dim", self.action_dim),
            ("proprio_dim", self.proprio_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrimotError::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch != 0 {
            return Err(TrimotError::Config(format!(
                "image_size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        for (name, w) in [
            ("sem_width", self.sem_width),
            ("depth_width", self.depth_width),
            ("act_width", self.act_width),
        ] {
            if w % 2 != 0 {
                return Err(TrimotError::Config(format!(
                    "{name} must be even for sinusoidal positions"
                )));
            }
        }
        Ok(())
    }
}

fn default_lambda() -> f64 {
    0.5
}

fn default_sample_steps() -> usize {
    10
}

fn default_exec_horizon() -> usize {
    1
}

/// One training/evaluation run, serialized verbatim into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// λ of the scale-invariant log loss.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub mask_mode: MaskMode,
    pub depth_init: DepthInit,
    pub depth_loss_on: bool,
    pub depth_frozen: bool,
    pub depth_input: DepthInput,
    pub seed: u64,
    /// Action chunk length, duplicated from the model for the CLI surface.
    pub k: usize,
    /// Euler integration steps S at sampling time.
    #[serde(default = "default_sample_steps", alias = "s")]
    pub sample_steps: usize,
    /// Receding-horizon execution: number of leading chunk actions executed
    /// before replanning (1 = replan every step, k = execute full chunks).
    #[serde(default = "default_exec_horizon")]
    pub exec_horizon: usize,
    pub model: ModelConfig,
    /// Closed instruction vocabulary, token string to id.
    pub vocab: BTreeMap<String, u32>,
}

impl RunConfig {
    pub fn vla_default(seed: u64) -> Self {
        let model = ModelConfig::desk_default();
        RunConfig {
            stage: Stage::VlaTrain,
            steps: 10_000,
            batch_size: 64,
            lr_init: 3e-4,
            lr_min: 3e-5,
            warmup_steps: 200,
            weight_decay: 1e-4,
            lambda: 0.5,
            mask_mode: MaskMode::Isolated,
            depth_init: DepthInit::Pretrained,
            depth_loss_on: true,
            depth_frozen: false,
            depth_input: DepthInput::GtDepth,
            seed,
            k: model.chunk_len,
            sample_steps: 10,
            exec_horizon: 1,
            model,
            vocab: crate::semantic::Vocabulary::grammar().to_map(),
        }
    }

    pub fn depth_pretrain_default(seed: u64) -> Self {
        let mut cfg = Self::vla_default(seed);
        cfg.stage = Stage::DepthPretrain;
        cfg.steps = 3_000;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(TrimotError::Config(
                "steps and batch_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrimotError::Config(format!(
                "lambda must lie in [0,1], got {}",
                self.lambda
            )));
        }
        if self.warmup_steps > self.steps {
            return Err(TrimotError::Config(
                "warmup_steps must not exceed steps".into(),
            ));
        }
        if self.lr_init < self.lr_min {
            return Err(TrimotError::Config("lr_init must be >= lr_min".into()));
        }
        if self.k != self.model.chunk_len {
            return Err(TrimotError::Config(format!(
                "k {} does not match model chunk_len {}",
                self.k, self.model.chunk_len
            )));
        }
        if self.sample_steps == 0 {
            return Err(TrimotError::Config("sample_steps must be >= 1".into()));
        }
        if self.exec_horizon == 0 || self.exec_horizon > self.k {
            return Err(TrimotError::Config(
                "exec_horizon must be in 1..=k".into(),
            ));
        }
        if self.stage != Stage::DepthPretrain && !self.model.include_depth {
            // baseline has no depth stream; depth-specific switches must be
            // off (depth_input is simply unused in that case)
            if self.depth_loss_on || self.depth_frozen {
                return Err(TrimotError::Config(
                    "depth switches require include_depth=true".into(),
                ));
            }
        }
        Ok(())
    }

    /// Stable hash of the serialized config, used to key reports.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization");
        // FNV-1a, enough to key report rows
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}
