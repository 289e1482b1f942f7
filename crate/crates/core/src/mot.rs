//! Mixture-of-transformers backbone: three token streams of different
//! widths exchanging information only through a shared per-layer attention
//! with block-wise masking.

use crate::config::{MaskMode, ModelConfig};
use crate::error::{Result, TrimotError};
use crate::graph::{Graph, Real, Var};
use crate::params::ParamSet;
use ndarray::Array2;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExpertName {
    Semantic,
    Depth,
    Action,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertSpec {
    pub name: ExpertName,
    pub hidden_width: usize,
    pub mlp_width: usize,
}

impl ExpertSpec {
    pub fn new(name: ExpertName, hidden_width: usize, mlp_width: usize) -> Result<Self> {
        if hidden_width == 0 || mlp_width == 0 {
            return Err(TrimotError::Config(format!(
                "expert {name:?} widths must be positive"
            )));
        }
        Ok(ExpertSpec {
            name,
            hidden_width,
            mlp_width,
        })
    }
}

/// Which streams are materialized; depth pretraining runs depth alone and
/// the no-depth baseline drops the depth stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSet {
    pub semantic: bool,
    pub depth: bool,
    pub action: bool,
}

impl StreamSet {
    pub fn full() -> Self {
        StreamSet {
            semantic: true,
            depth: true,
            action: true,
        }
    }

    pub fn depth_only() -> Self {
        StreamSet {
            semantic: false,
            depth: true,
            action: false,
        }
    }

    pub fn no_depth() -> Self {
        StreamSet {
            semantic: true,
            depth: false,
            action: true,
        }
    }

    pub fn for_model(cfg: &ModelConfig) -> Self {
        if cfg.include_depth {
            StreamSet::full()
        } else {
            StreamSet::no_depth()
        }
    }
}

/// Token-count bookkeeping across the concatenated token axis, in fixed
/// stream order (semantic, depth, action).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamLayout {
    pub lengths: [usize; 3],
    pub offsets: [usize; 3],
    pub total: usize,
}

/// The spec'd constructor: all three streams present.
pub fn build_stream_layout(n_s: usize, n_d: usize, n_a: usize) -> Result<StreamLayout> {
    if n_s == 0 || n_d == 0 || n_a == 0 {
        return Err(TrimotError::Config(format!(
            "stream token counts must be positive, got ({n_s}, {n_d}, {n_a})"
        )));
    }
    Ok(StreamLayout::with_optional(n_s, n_d, n_a))
}

impl StreamLayout {
    /// Internal constructor permitting absent (zero-length) streams.
    pub fn with_optional(n_s: usize, n_d: usize, n_a: usize) -> Self {
        let lengths = [n_s, n_d, n_a];
        let offsets = [0, n_s, n_s + n_d];
        StreamLayout {
            lengths,
            offsets,
            total: n_s + n_d + n_a,
        }
    }

    pub fn for_model(cfg: &ModelConfig, streams: StreamSet) -> Self {
        StreamLayout::with_optional(
            if streams.semantic { cfg.n_semantic() } else { 0 },
            if streams.depth { cfg.n_depth() } else { 0 },
            if streams.action { cfg.n_action() } else { 0 },
        )
    }

    fn block(&self, e: usize) -> std::ops::Range<usize> {
        self.offsets[e]..self.offsets[e] + self.lengths[e]
    }
}

/// Per-layer attention visibility matrix at stream granularity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    pub allow: Array2<bool>,
    pub mode: MaskMode,
}

pub fn build_block_mask(layout: &StreamLayout, mode: MaskMode) -> BlockMask {
    let n = layout.total;
    let mut allow = Array2::from_elem((n, n), false);
    let sem = layout.block(0);
    let dep = layout.block(1);
    let act = layout.block(2);
    for q in sem.clone() {
        for k in sem.clone() {
            allow[(q, k)] = true;
        }
        if mode == MaskMode::VlmDepthBidir {
            for k in dep.clone() {
                allow[(q, k)] = true;
            }
        }
    }
    for q in dep.clone() {
        for k in dep.clone() {
            allow[(q, k)] = true;
        }
        if mode == MaskMode::VlmDepthBidir {
            for k in sem.clone() {
                allow[(q, k)] = true;
            }
        }
    }
    for q in act {
        for k in 0..n {
            allow[(q, k)] = true;
        }
    }
    BlockMask { allow, mode }
}

/// Deterministic sinusoidal position table with values in [−1, 1].
pub fn positional_encoding<T: Real>(length: usize, width: usize) -> Result<Array2<T>> {
    if length == 0 || width == 0 {
        return Err(TrimotError::Config(
            "positional encoding length and width must be positive".into(),
        ));
    }
    if width % 2 != 0 {
        return Err(TrimotError::Config(format!(
            "positional encoding width must be even, got {width}"
        )));
    }
    let mut table = Array2::zeros((length, width));
    for pos in 0..length {
        for i in 0..width / 2 {
            let rate = 1.0 / 10_000f64.powf(2.0 * i as f64 / width as f64);
            let angle = pos as f64 * rate;
            table[(pos, 2 * i)] = T::from_f64(angle.sin());
            table[(pos, 2 * i + 1)] = T::from_f64(angle.cos());
        }
    }
    Ok(table)
}

/// Per-stream inputs to a shared attention layer; entries are `None` for
/// absent streams.
pub type Streams = [Option<Var>; 3];

fn stream_prefix(e: usize) -> &'static str {
    ["sem", "depth", "act"][e]
}

/// One transformer block: pre-norm shared attention with block masking,
/// then a per-stream pre-norm MLP, residual connections on both.
///
/// `prefixes[e]` locates the stream's layer weights, e.g. `sem.l0`.
pub fn shared_attention_layer<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    layout: &StreamLayout,
    mask: &Arc<Array2<bool>>,
    prefixes: &[String; 3],
    streams: &Streams,
) -> Streams {
    let dh = cfg.head_dim;
    let heads = cfg.heads;

    // shared-width Q/K/V, concatenated in layout order
    let mut qs = Vec::new();
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    let mut normed = [None, None, None];
    for e in 0..3 {
        let Some(x) = streams[e] else { continue };
        debug_assert_eq!(g.value(x).nrows(), layout.lengths[e], "stream {e} length");
        let p = &prefixes[e];
        let gain = g.param(params, &format!("{p}.norm1.gain"));
        let n = g.rms_norm(x, gain);
        normed[e] = Some(n);
        let wq = g.param(params, &format!("{p}.attn.wq"));
        let wk = g.param(params, &format!("{p}.attn.wk"));
        let wv = g.param(params, &format!("{p}.attn.wv"));
        qs.push(g.matmul(n, wq));
        ks.push(g.matmul(n, wk));
        vs.push(g.matmul(n, wv));
    }
    let q_all = g.concat_rows(&qs);
    let k_all = g.concat_rows(&ks);
    let v_all = g.concat_rows(&vs);

    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q_all, h * dh, dh);
        let kh = g.slice_cols(k_all, h * dh, dh);
        let vh = g.slice_cols(v_all, h * dh, dh);
        let scores = g.matmul_nt(qh, kh);
        let scaled = g.scale(scores, scale);
        let probs = g.softmax_masked(scaled, Arc::clone(mask));
        head_ctx.push(g.matmul(probs, vh));
    }
    let ctx = g.concat_cols(&head_ctx);

    let mut out: Streams = [None, None, None];
    let mut row = 0;
    for e in 0..3 {
        let Some(x) = streams[e] else { continue };
        let n_e = layout.lengths[e];
        let p = &prefixes[e];
        let ctx_e = g.slice_rows(ctx, row, n_e);
        row += n_e;
        let wo = g.param(params, &format!("{p}.attn.wo"));
        let attn = g.matmul(ctx_e, wo);
        let h1 = g.add(x, attn);

        let gain2 = g.param(params, &format!("{p}.norm2.gain"));
        let n2 = g.rms_norm(h1, gain2);
        let w1 = g.param(params, &format!("{p}.mlp.w1"));
        let w2 = g.param(params, &format!("{p}.mlp.w2"));
        let hidden = g.matmul(n2, w1);
        let act = g.silu(hidden);
        let m = g.matmul(act, w2);
        out[e] = Some(g.add(h1, m));
    }
    out
}

/// Runs the L shared layers; returns the final per-stream hidden states and
/// the depth stream's features after every layer.
pub fn mot_forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    layout: &StreamLayout,
    mask: &Arc<Array2<bool>>,
    inputs: Streams,
) -> (Streams, Vec<Var>) {
    let mut streams = inputs;
    let mut depth_features = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        let prefixes = [
            format!("{}.l{layer}", stream_prefix(0)),
            format!("{}.l{layer}", stream_prefix(1)),
            format!("{}.l{layer}", stream_prefix(2)),
        ];
        streams = shared_attention_layer(g, params, cfg, layout, mask, &prefixes, &streams);
        if let Some(d) = streams[1] {
            depth_features.push(d);
        }
    }
    (streams, depth_features)
}

/// Full enumeration of parameter blocks for a model variant, in a stable
/// order; this ordering defines the flat vector layout everywhere.
pub fn param_shapes(cfg: &ModelConfig, streams: StreamSet) -> Vec<(String, usize, usize)> {
    let hd = cfg.attn_width();
    let mut shapes: Vec<(String, usize, usize)> = Vec::new();
    let patch_in = cfg.patch * cfg.patch * 3;

    let layer_blocks = |prefix: String, width: usize, mlp: usize, out: &mut Vec<_>| {
        out.push((format!("{prefix}.norm1.gain"), 1, width));
        out.push((format!("{prefix}.attn.wq"), width, hd));
        out.push((format!("{prefix}.attn.wk"), width, hd));
        out.push((format!("{prefix}.attn.wv"), width, hd));
        out.push((format!("{prefix}.attn.wo"), hd, width));
        out.push((format!("{prefix}.norm2.gain"), 1, width));
        out.push((format!("{prefix}.mlp.w1"), width, mlp));
        out.push((format!("{prefix}.mlp.w2"), mlp, width));
    };

    if streams.semantic {
        shapes.push(("sem.embed.patch.w".into(), patch_in, cfg.sem_width));
        shapes.push(("sem.embed.patch.b".into(), 1, cfg.sem_width));
        shapes.push(("sem.embed.tok.w".into(), cfg.vocab_size, cfg.sem_width));
        for i in 0..cfg.layers {
            layer_blocks(format!("sem.l{i}"), cfg.sem_width, cfg.sem_mlp, &mut shapes);
        }
    }
    if streams.depth {
        shapes.push(("depth.embed.patch.w".into(), patch_in, cfg.depth_width));
        shapes.push(("depth.embed.patch.b".into(), 1, cfg.depth_width));
        for i in 0..cfg.depth_enc_layers {
            layer_blocks(
                format!("depth.enc.l{i}"),
                cfg.depth_width,
                cfg.depth_mlp,
                &mut shapes,
            );
        }
        for i in 0..cfg.layers {
            layer_blocks(
                format!("depth.l{i}"),
                cfg.depth_width,
                cfg.depth_mlp,
                &mut shapes,
            );
        }
        shapes.push(("depth.head.w".into(), cfg.depth_width, cfg.patch * cfg.patch));
        shapes.push(("depth.head.b".into(), 1, cfg.patch * cfg.patch));
    }
    if streams.action {
        shapes.push(("act.embed.proprio.w".into(), cfg.proprio_dim, cfg.act_width));
        shapes.push(("act.embed.proprio.b".into(), 1, cfg.act_width));
        shapes.push(("act.embed.step.w".into(), cfg.action_dim, cfg.act_width));
        shapes.push(("act.fuse1.w".into(), 2 * cfg.act_width, cfg.act_width));
        shapes.push(("act.fuse1.b".into(), 1, cfg.act_width));
        shapes.push(("act.fuse2.w".into(), cfg.act_width, cfg.act_width));
        shapes.push(("act.fuse2.b".into(), 1, cfg.act_width));
        for i in 0..cfg.layers {
            layer_blocks(format!("act.l{i}"), cfg.act_width, cfg.act_mlp, &mut shapes);
        }
        shapes.push(("act.readout.w".into(), cfg.act_width, cfg.action_dim));
        shapes.push(("act.readout.b".into(), 1, cfg.action_dim));
    }
    shapes
}

/// Builds and initializes a parameter set for a model variant.
pub fn build_params<T: Real>(cfg: &ModelConfig, streams: StreamSet, seed: u64) -> ParamSet<T> {
    let mut params = ParamSet::from_shapes(&param_shapes(cfg, streams));
    params.init(seed);
    params
}
