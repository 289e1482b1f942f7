//! Action expert: flow-matching interpolants and targets, action-stream
//! token construction, the flow readout and loss, normalization, and the
//! Euler sampler.

use crate::config::ModelConfig;
use crate::error::{Result, TrimotError};
use crate::graph::{Graph, Real, Var};
use crate::mot::positional_encoding;
use crate::params::ParamSet;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// k × d_a chunk of actions, normalized to [−1, 1] per dimension.
pub type ActionChunk<T> = Array2<T>;

/// Per-dimension (min, max) over a recorded dataset; dimensions with
/// max == min are flagged and map to 0 under normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl DimStats {
    pub fn dims(&self) -> usize {
        self.min.len()
    }

    pub fn degenerate(&self, d: usize) -> bool {
        self.max[d] == self.min[d]
    }
}

/// τA + (1−τ)ε, elementwise.
pub fn interpolate<T: Real>(
    actions: &ActionChunk<T>,
    eps: &ActionChunk<T>,
    tau: f64,
) -> Result<ActionChunk<T>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(TrimotError::Domain(format!("tau {tau} outside [0,1]")));
    }
    if actions.dim() != eps.dim() {
        return Err(TrimotError::Shape("action/noise shape mismatch".into()));
    }
    let t = T::from_f64(tau);
    let one_minus = T::from_f64(1.0 - tau);
    Ok(actions.mapv(|a| a * t) + &eps.mapv(|e| e * one_minus))
}

/// Target flow u = A − ε, the τ-derivative of the linear interpolation path.
pub fn target_flow<T: Real>(
    actions: &ActionChunk<T>,
    eps: &ActionChunk<T>,
) -> Result<ActionChunk<T>> {
    if actions.dim() != eps.dim() {
        return Err(TrimotError::Shape("action/noise shape mismatch".into()));
    }
    Ok(actions - eps)
}

/// Mean squared error over all entries.
pub fn flow_loss<T: Real>(v: &ActionChunk<T>, u: &ActionChunk<T>) -> Result<f64> {
    if v.dim() != u.dim() {
        return Err(TrimotError::Shape("flow shape mismatch".into()));
    }
    let n = v.len() as f64;
    let mut s = 0.0;
    for (a, b) in v.iter().zip(u.iter()) {
        let d = a.as_f64() - b.as_f64();
        s += d * d;
    }
    Ok(s / n)
}

/// Sinusoidal embedding of the flow time τ ∈ [0,1].
pub fn flow_time_embedding<T: Real>(tau: f64, width: usize) -> Array2<T> {
    let mut out = Array2::zeros((1, width));
    for i in 0..width / 2 {
        let rate = 1.0 / 10_000f64.powf(2.0 * i as f64 / width as f64);
        let angle = 100.0 * tau * rate;
        out[(0, 2 * i)] = T::from_f64(angle.sin());
        out[(0, 2 * i + 1)] = T::from_f64(angle.cos());
    }
    out
}

/// Builds the n_a = k+1 action-stream tokens: a proprio prefix token, then
/// one token per noisy action step fused with the τ embedding through a
/// two-layer MLP. Positions are added per stream.
pub fn action_suffix_tokens<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    a_tau: &ActionChunk<T>,
    tau: f64,
    proprio: &[T],
) -> Result<Var> {
    if a_tau.dim() != (cfg.chunk_len, cfg.action_dim) {
        return Err(TrimotError::Shape(format!(
            "noisy chunk {:?}, expected {}×{}",
            a_tau.dim(),
            cfg.chunk_len,
            cfg.action_dim
        )));
    }
    if proprio.len() != cfg.proprio_dim {
        return Err(TrimotError::Shape(format!(
            "proprio length {} != {}",
            proprio.len(),
            cfg.proprio_dim
        )));
    }
    let s = g.constant(Array2::from_shape_vec((1, proprio.len()), proprio.to_vec()).unwrap());
    let wp = g.param(params, "act.embed.proprio.w");
    let bp = g.param(params, "act.embed.proprio.b");
    let sp = g.matmul(s, wp);
    let proprio_tok = g.add_row(sp, bp);

    let a = g.constant(a_tau.clone());
    let ws = g.param(params, "act.embed.step.w");
    let a_emb = g.matmul(a, ws);
    let t_row = flow_time_embedding::<T>(tau, cfg.act_width);
    let mut t_rows = Array2::zeros((cfg.chunk_len, cfg.act_width));
    for mut r in t_rows.outer_iter_mut() {
        r.assign(&t_row.row(0));
    }
    let t_node = g.constant(t_rows);
    let fused_in = g.concat_cols(&[a_emb, t_node]);
    let w1 = g.param(params, "act.fuse1.w");
    let b1 = g.param(params, "act.fuse1.b");
    let h = g.matmul(fused_in, w1);
    let h = g.add_row(h, b1);
    let h = g.silu(h);
    let w2 = g.param(params, "act.fuse2.w");
    let b2 = g.param(params, "act.fuse2.b");
    let h = g.matmul(h, w2);
    let step_tokens = g.add_row(h, b2);

    let tokens = g.concat_rows(&[proprio_tok, step_tokens]);
    let pos = g.constant(positional_encoding(cfg.n_action(), cfg.act_width)?);
    Ok(g.add(tokens, pos))
}

/// Linear head over the k action tokens (proprio token excluded).
pub fn flow_readout<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    final_action_tokens: Var,
) -> Var {
    let steps = g.slice_rows(final_action_tokens, 1, cfg.chunk_len);
    let w = g.param(params, "act.readout.w");
    let b = g.param(params, "act.readout.b");
    let proj = g.matmul(steps, w);
    g.add_row(proj, b)
}

/// Weighted mean-squared-error node; `weights` zeroes padded steps and the
/// mean is taken over the surviving entries.
pub fn flow_loss_node<T: Real>(
    g: &mut Graph<T>,
    v: Var,
    u: &ActionChunk<T>,
    weights: Option<&Array2<T>>,
) -> Result<Var> {
    let dim = g.value(v).dim();
    if u.dim() != dim {
        return Err(TrimotError::Shape("flow target shape mismatch".into()));
    }
    let u_node = g.constant(u.clone());
    let diff = g.sub(v, u_node);
    let (sq, count) = match weights {
        Some(w) => {
            if w.dim() != dim {
                return Err(TrimotError::Shape("flow weight shape mismatch".into()));
            }
            let count = w.iter().filter(|x| **x != T::zero()).count();
            if count == 0 {
                return Err(TrimotError::Eval("flow loss with all steps padded".into()));
            }
            let wd = g.mul_const(diff, Arc::new(w.clone()));
            (g.mul(wd, diff), count)
        }
        None => (g.mul(diff, diff), dim.0 * dim.1),
    };
    let total = g.sum(sq);
    Ok(g.scale(total, T::from_f64(1.0 / count as f64)))
}

/// Euler integration of a velocity field from τ=0 (noise) to τ=1 (data):
/// A⁰ = ε, A ← A + (1/S)·v(A, i/S), final chunk clamped to [−1, 1].
pub fn sample_actions_with<T, F, R>(
    velocity: F,
    k: usize,
    action_dim: usize,
    steps: usize,
    rng: &mut R,
) -> Result<ActionChunk<T>>
where
    T: Real,
    F: Fn(&ActionChunk<T>, f64) -> Result<ActionChunk<T>>,
    R: Rng + ?Sized,
{
    if steps == 0 {
        return Err(TrimotError::Config("sampler needs at least one step".into()));
    }
    let mut a: ActionChunk<T> =
        Array2::from_shape_fn((k, action_dim), |_| T::standard_normal(rng));
    let h = T::from_f64(1.0 / steps as f64);
    for i in 0..steps {
        let tau = i as f64 / steps as f64;
        let v = velocity(&a, tau)?;
        a = a + &v.mapv(|x| x * h);
    }
    Ok(a.mapv(|x| x.max(-T::one()).min(T::one())))
}

/// Affine map from raw per-dimension ranges to [−1, 1], applied row-wise to
/// a k × d matrix.
pub fn normalize<T: Real>(raw: &Array2<T>, stats: &DimStats) -> Result<Array2<T>> {
    check_dims(raw, stats)?;
    Ok(Array2::from_shape_fn(raw.dim(), |(i, j)| {
        if stats.degenerate(j) {
            T::zero()
        } else {
            let x = raw[(i, j)].as_f64();
            T::from_f64(2.0 * (x - stats.min[j]) / (stats.max[j] - stats.min[j]) - 1.0)
        }
    }))
}

pub fn denormalize<T: Real>(norm: &Array2<T>, stats: &DimStats) -> Result<Array2<T>> {
    check_dims(norm, stats)?;
    Ok(Array2::from_shape_fn(norm.dim(), |(i, j)| {
        if stats.degenerate(j) {
            T::from_f64(stats.min[j])
        } else {
            let x = norm[(i, j)].as_f64();
            T::from_f64(stats.min[j] + (x + 1.0) / 2.0 * (stats.max[j] - stats.min[j]))
        }
    }))
}

fn check_dims<T: Real>(m: &Array2<T>, stats: &DimStats) -> Result<()> {
    if m.ncols() != stats.dims() || stats.min.len() != stats.max.len() {
        return Err(TrimotError::Shape(format!(
            "matrix with {} columns against stats of {} dims",
            m.ncols(),
            stats.dims()
        )));
    }
    Ok(())
}
