//! Forward-only policy evaluation. The semantic and depth streams never
//! attend to the action stream, so their per-layer keys/values are computed
//! once per observation and reused across Euler sampler steps; only the
//! small action stream is re-run per step. A unit test pins this path to
//! the tape-based forward bit for bit at f64.

use crate::action::{flow_time_embedding, sample_actions_with, ActionChunk};
use crate::config::{MaskMode, ModelConfig};
use crate::depth::{assemble_depth_map, DepthMap};
use crate::error::{Result, TrimotError};
use crate::graph::Real;
use crate::mot::positional_encoding;
use crate::params::ParamSet;
use ndarray::{s, Array2};
use rand::Rng;

fn rms_norm_fwd<T: Real>(x: &Array2<T>, gain: &Array2<T>) -> Array2<T> {
    let w = x.ncols();
    let eps = T::from_f64(1e-6);
    let wf = T::from_f64(w as f64);
    let mut out = Array2::zeros(x.dim());
    for (i, row) in x.outer_iter().enumerate() {
        let mut ss = T::zero();
        for &v in row {
            ss = ss + v * v;
        }
        let inv = T::one() / (ss / wf + eps).sqrt();
        for j in 0..w {
            out[(i, j)] = row[j] * inv * gain[(0, j)];
        }
    }
    out
}

fn silu_fwd<T: Real>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|x| x / (T::one() + (-x).exp()))
}

fn add_row<T: Real>(x: &Array2<T>, bias: &Array2<T>) -> Array2<T> {
    x + bias
}

/// Multi-head attention for queries `q` against keys/values `k`/`v`,
/// with an optional per-(query,key) mask.
fn attention<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    mask: Option<&Array2<bool>>,
    heads: usize,
    dh: usize,
) -> Array2<T> {
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = Array2::zeros((q.nrows(), heads * dh));
    for h in 0..heads {
        let qh = q.slice(s![.., h * dh..(h + 1) * dh]);
        let kh = k.slice(s![.., h * dh..(h + 1) * dh]);
        let vh = v.slice(s![.., h * dh..(h + 1) * dh]);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|x| x * scale);
        for (i, mut row) in scores.outer_iter_mut().enumerate() {
            let mut max = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if mask.map_or(true, |m| m[(i, j)]) && x > max {
                    max = x;
                }
            }
            let mut sum = T::zero();
            for (j, x) in row.iter_mut().enumerate() {
                if mask.map_or(true, |m| m[(i, j)]) {
                    *x = (*x - max).exp();
                    sum = sum + *x;
                } else {
                    *x = T::zero();
                }
            }
            let inv = T::one() / sum;
            for x in row.iter_mut() {
                *x = *x * inv;
            }
        }
        let ctx = scores.dot(&vh);
        out.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ctx);
    }
    out
}

/// Per-layer cached context keys/values plus the final depth hidden state.
pub struct ContextCache<T> {
    pub keys: Vec<Array2<T>>,
    pub values: Vec<Array2<T>>,
    pub depth_final: Option<Array2<T>>,
}

pub struct PolicyModel<'a, T: Real> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamSet<T>,
    pub mask_mode: MaskMode,
}

impl<'a, T: Real> PolicyModel<'a, T> {
    fn layer_mlp(&self, x: &Array2<T>, prefix: &str) -> Array2<T> {
        let p = self.params;
        let n2 = rms_norm_fwd(x, &p.to_array(&format!("{prefix}.norm2.gain")));
        let h = silu_fwd(&n2.dot(&p.view(&format!("{prefix}.mlp.w1"))));
        x + &h.dot(&p.view(&format!("{prefix}.mlp.w2")))
    }

    /// Embeds the observation streams and runs the shared stack over the
    /// context (semantic and, when present, depth), caching per-layer K/V.
    pub fn build_context(
        &self,
        sem_patches: &Array2<T>,
        tokens: &[u32],
        depth_patches: Option<&Array2<T>>,
    ) -> Result<ContextCache<T>> {
        let cfg = self.cfg;
        let p = self.params;
        if tokens.len() != cfg.text_len {
            return Err(TrimotError::Shape(format!(
                "instruction length {} != budget {}",
                tokens.len(),
                cfg.text_len
            )));
        }
        // semantic embedding
        let proj = sem_patches.dot(&p.view("sem.embed.patch.w"));
        let patch_tokens = add_row(&proj, &p.to_array("sem.embed.patch.b"));
        let table = p.view("sem.embed.tok.w");
        let mut text_tokens = Array2::zeros((cfg.text_len, cfg.sem_width));
        for (i, &id) in tokens.iter().enumerate() {
            text_tokens.row_mut(i).assign(&table.row(id as usize));
        }
        let mut sem = ndarray::concatenate(
            ndarray::Axis(0),
            &[patch_tokens.view(), text_tokens.view()],
        )
        .unwrap();
        sem += &positional_encoding::<T>(cfg.n_semantic(), cfg.sem_width)?;

        // depth embedding + encoder
        let mut depth = match depth_patches {
            Some(px) => {
                let proj = px.dot(&p.view("depth.embed.patch.w"));
                let mut d = add_row(&proj, &p.to_array("depth.embed.patch.b"));
                d += &positional_encoding::<T>(cfg.n_depth(), cfg.depth_width)?;
                for i in 0..cfg.depth_enc_layers {
                    let prefix = format!("depth.enc.l{i}");
                    let n = rms_norm_fwd(&d, &p.to_array(&format!("{prefix}.norm1.gain")));
                    let q = n.dot(&p.view(&format!("{prefix}.attn.wq")));
                    let k = n.dot(&p.view(&format!("{prefix}.attn.wk")));
                    let v = n.dot(&p.view(&format!("{prefix}.attn.wv")));
                    let ctx = attention(&q, &k, &v, None, cfg.heads, cfg.head_dim);
                    let d1 = &d + &ctx.dot(&p.view(&format!("{prefix}.attn.wo")));
                    d = self.layer_mlp(&d1, &prefix);
                }
                Some(d)
            }
            None => None,
        };

        let n_s = cfg.n_semantic();
        let n_d = depth.as_ref().map_or(0, |_| cfg.n_depth());
        let total = n_s + n_d;
        // context visibility among semantic/depth streams
        let mut ctx_mask = Array2::from_elem((total, total), false);
        for q in 0..n_s {
            for k in 0..n_s {
                ctx_mask[(q, k)] = true;
            }
        }
        for q in n_s..total {
            for k in n_s..total {
                ctx_mask[(q, k)] = true;
            }
        }
        if self.mask_mode == MaskMode::VlmDepthBidir {
            ctx_mask.fill(true);
        }

        let mut keys = Vec::with_capacity(cfg.layers);
        let mut values = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let sp = format!("sem.l{layer}");
            let dp = format!("depth.l{layer}");
            let sem_n = rms_norm_fwd(&sem, &p.to_array(&format!("{sp}.norm1.gain")));
            let mut q_rows = vec![sem_n.dot(&p.view(&format!("{sp}.attn.wq")))];
            let mut k_rows = vec![sem_n.dot(&p.view(&format!("{sp}.attn.wk")))];
            let mut v_rows = vec![sem_n.dot(&p.view(&format!("{sp}.attn.wv")))];
            let dep_n = depth.as_ref().map(|d| {
                let n = rms_norm_fwd(d, &p.to_array(&format!("{dp}.norm1.gain")));
                q_rows.push(n.dot(&p.view(&format!("{dp}.attn.wq"))));
                k_rows.push(n.dot(&p.view(&format!("{dp}.attn.wk"))));
                v_rows.push(n.dot(&p.view(&format!("{dp}.attn.wv"))));
                n
            });
            let _ = dep_n;
            let q_all = concat_rows(&q_rows);
            let k_all = concat_rows(&k_rows);
            let v_all = concat_rows(&v_rows);
            let ctx = attention(&q_all, &k_all, &v_all, Some(&ctx_mask), cfg.heads, cfg.head_dim);

            let sem_ctx = ctx.slice(s![0..n_s, ..]).to_owned();
            let sem1 = &sem + &sem_ctx.dot(&p.view(&format!("{sp}.attn.wo")));
            sem = self.layer_mlp(&sem1, &sp);
            if let Some(d) = depth.as_mut() {
                let d_ctx = ctx.slice(s![n_s..total, ..]).to_owned();
                let d1 = &*d + &d_ctx.dot(&p.view(&format!("{dp}.attn.wo")));
                *d = self.layer_mlp(&d1, &dp);
            }
            keys.push(k_all);
            values.push(v_all);
        }

        Ok(ContextCache {
            keys,
            values,
            depth_final: depth,
        })
    }

    /// Runs the action stream against a cached context, returning the
    /// predicted flow v (k × d_a).
    pub fn action_forward(
        &self,
        cache: &ContextCache<T>,
        a_tau: &ActionChunk<T>,
        tau: f64,
        proprio: &[T],
    ) -> Result<Array2<T>> {
        let cfg = self.cfg;
        let p = self.params;
        if a_tau.dim() != (cfg.chunk_len, cfg.action_dim) {
            return Err(TrimotError::Shape("noisy chunk shape mismatch".into()));
        }
        let s_row = Array2::from_shape_vec((1, proprio.len()), proprio.to_vec())
            .map_err(|_| TrimotError::Shape("bad proprio".into()))?;
        let proprio_tok = add_row(
            &s_row.dot(&p.view("act.embed.proprio.w")),
            &p.to_array("act.embed.proprio.b"),
        );
        let a_emb = a_tau.dot(&p.view("act.embed.step.w"));
        let t_row = flow_time_embedding::<T>(tau, cfg.act_width);
        let mut fused_in = Array2::zeros((cfg.chunk_len, 2 * cfg.act_width));
        fused_in.slice_mut(s![.., 0..cfg.act_width]).assign(&a_emb);
        for mut r in fused_in
            .slice_mut(s![.., cfg.act_width..2 * cfg.act_width])
            .outer_iter_mut()
        {
            r.assign(&t_row.row(0));
        }
        let h = silu_fwd(&add_row(&fused_in.dot(&p.view("act.fuse1.w")), &p.to_array("act.fuse1.b")));
        let step_tokens = add_row(&h.dot(&p.view("act.fuse2.w")), &p.to_array("act.fuse2.b"));
        let mut act = concat_rows(&[proprio_tok, step_tokens]);
        act += &positional_encoding::<T>(cfg.n_action(), cfg.act_width)?;

        for layer in 0..cfg.layers {
            let ap = format!("act.l{layer}");
            let n = rms_norm_fwd(&act, &p.to_array(&format!("{ap}.norm1.gain")));
            let q = n.dot(&p.view(&format!("{ap}.attn.wq")));
            let k_a = n.dot(&p.view(&format!("{ap}.attn.wk")));
            let v_a = n.dot(&p.view(&format!("{ap}.attn.wv")));
            let k_all = concat_rows(&[cache.keys[layer].clone(), k_a]);
            let v_all = concat_rows(&[cache.values[layer].clone(), v_a]);
            // action queries attend to every key
            let ctx = attention(&q, &k_all, &v_all, None, cfg.heads, cfg.head_dim);
            let a1 = &act + &ctx.dot(&p.view(&format!("{ap}.attn.wo")));
            act = self.layer_mlp(&a1, &ap);
        }
        let readout = act.slice(s![1..cfg.n_action(), ..]).dot(&p.view("act.readout.w"));
        Ok(add_row(&readout, &p.to_array("act.readout.b")))
    }

    /// Predicted depth map from the cached context, when the depth stream
    /// is present.
    pub fn predict_depth(&self, cache: &ContextCache<T>) -> Option<DepthMap<T>> {
        cache.depth_final.as_ref().map(|d| {
            let log_depth = add_row(
                &d.dot(&self.params.view("depth.head.w")),
                &self.params.to_array("depth.head.b"),
            );
            assemble_depth_map(&log_depth, self.cfg)
        })
    }

    /// Euler-samples an action chunk conditioned on the cached context.
    pub fn sample_chunk<R: Rng + ?Sized>(
        &self,
        cache: &ContextCache<T>,
        proprio: &[T],
        steps: usize,
        rng: &mut R,
    ) -> Result<ActionChunk<T>> {
        sample_actions_with(
            |a, tau| self.action_forward(cache, a, tau, proprio),
            self.cfg.chunk_len,
            self.cfg.action_dim,
            steps,
            rng,
        )
    }
}

fn concat_rows<T: Real>(parts: &[Array2<T>]) -> Array2<T> {
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("concat rows")
}
