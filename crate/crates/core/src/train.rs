//! Optimization loop (decoupled-weight-decay adaptive updates with a
//! cosine schedule), staged training (depth pretrain, VLA train, finetune),
//! checkpointing, evaluation rollouts, and the ablation matrix.

use crate::action::{interpolate, normalize, target_flow};
use crate::config::{DepthInit, DepthInput, MaskMode, RunConfig, Stage};
use crate::data::{DataSet, NormStats, TrainingSample};
use crate::depth::{depth_encode, depth_head, si_log_loss_node, DepthMap};
use crate::error::{Result, TrimotError};
use crate::graph::{Graph, Real};
use crate::infer::PolicyModel;
use crate::mot::{build_block_mask, build_params, mot_forward, StreamLayout, StreamSet};
use crate::params::ParamSet;
use crate::semantic::{embed_semantic, image_patches, patches_from_channels, Vocabulary};
use crate::sim::{self, Suite, CAMERA_HEIGHT};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup from 0 to lr_init, then cosine decay to lr_min.
pub fn cosine_lr(step: usize, cfg: &RunConfig) -> f64 {
    debug_assert!(step <= cfg.steps);
    if step < cfg.warmup_steps {
        return cfg.lr_init * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps - cfg.warmup_steps;
    if span == 0 {
        return cfg.lr_min;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One AdamW step with decoupled weight decay; frozen slices receive zero
/// update. Aborts on non-finite gradients, naming the parameter block.
pub fn update_step(
    params: &mut ParamSet<f32>,
    grads: &[f32],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    frozen: Option<&[bool]>,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(TrimotError::Shape(format!(
            "gradient length {} != parameter count {}",
            grads.len(),
            params.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrimotError::Numeric(format!(
            "non-finite gradient in parameter block {}",
            params.block_of(i)
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for i in 0..grads.len() {
        if frozen.map_or(false, |f| f[i]) {
            continue;
        }
        let g = grads[i] as f64;
        let m = BETA1 * state.m[i] as f64 + (1.0 - BETA1) * g;
        let v = BETA2 * state.v[i] as f64 + (1.0 - BETA2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        let p = params.data[i] as f64;
        let update = lr * m_hat / (v_hat.sqrt() + ADAM_EPS) + lr * weight_decay * p;
        params.data[i] = (p - update) as f32;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss_flow: Option<f64>,
    pub loss_si: Option<f64>,
    pub loss_total: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub params: Vec<f32>,
    pub opt: OptimizerState,
    pub norm_stats: NormStats,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: RunConfig,
    step: usize,
    opt_step: u64,
    norm_stats: NormStats,
    param_len: usize,
}

impl Checkpoint {
    /// Binary format: one compact JSON header line, then little-endian f32
    /// blobs for parameters and both optimizer moments. The training RNG is
    /// derived from (seed, step), so (config, step) is the full RNG state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            step: self.step,
            opt_step: self.opt.step,
            norm_stats: self.norm_stats.clone(),
            param_len: self.params.len(),
        };
        let mut out = serde_json::to_string(&header)?.into_bytes();
        out.push(b'\n');
        for blob in [&self.params, &self.opt.m, &self.opt.v] {
            for v in blob.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out).map_err(|e| TrimotError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| TrimotError::io(path.display().to_string(), e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| TrimotError::Data("checkpoint missing header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        let body = &bytes[nl + 1..];
        if body.len() != header.param_len * 4 * 3 {
            return Err(TrimotError::Data(format!(
                "checkpoint body length {} inconsistent with {} parameters",
                body.len(),
                header.param_len
            )));
        }
        let read_f32 = |off: usize| -> Vec<f32> {
            body[off * 4..(off + header.param_len) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        };
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            params: read_f32(0),
            opt: OptimizerState {
                m: read_f32(header.param_len),
                v: read_f32(2 * header.param_len),
                step: header.opt_step,
            },
            norm_stats: header.norm_stats,
        })
    }

    pub fn param_set(&self) -> Result<ParamSet<f32>> {
        let streams = model_streams(&self.config);
        let set: ParamSet<f32> = ParamSet::from_shapes(&crate::mot::param_shapes(
            &self.config.model,
            streams,
        ));
        set.unflatten(&self.params)
    }
}

fn model_streams(cfg: &RunConfig) -> StreamSet {
    match cfg.stage {
        Stage::DepthPretrain => StreamSet::depth_only(),
        _ => StreamSet::for_model(&cfg.model),
    }
}

fn mix_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed.wrapping_add(i.wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Replicates a ground-truth depth map into three channels on [0,1] for the
/// depth-input ablation.
pub fn depth_to_channels<T: Real>(depth: &Array2<f64>) -> Array3<T> {
    let (h, w) = depth.dim();
    let mut out = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let v = ((CAMERA_HEIGHT - depth[(i, j)]) / 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                out[(i, j, c)] = T::from_f64(v);
            }
        }
    }
    out
}

fn depth_input_patches(
    cfg: &RunConfig,
    rgb: &Array3<u8>,
    depth_gt: &Array2<f64>,
) -> Result<Array2<f32>> {
    match cfg.depth_input {
        DepthInput::Rgb => image_patches(rgb, &cfg.model),
        DepthInput::GtDepth => {
            patches_from_channels(&depth_to_channels::<f32>(depth_gt), &cfg.model)
        }
    }
}

/// Per-sample VLA losses on the tape; shared between training and the
/// gradient-check tests.
pub struct SampleLoss<T: Real> {
    pub graph: Graph<T>,
    pub flow: Option<crate::graph::Var>,
    pub si: Option<crate::graph::Var>,
    pub total: crate::graph::Var,
}

#[allow(clippy::too_many_arguments)]
pub fn vla_sample_loss<T: Real>(
    cfg: &RunConfig,
    params: &ParamSet<T>,
    sem_patches: &Array2<T>,
    dep_patches: Option<&Array2<T>>,
    tokens: &[u32],
    proprio: &[T],
    a_tau: &Array2<T>,
    tau: f64,
    flow_target: &Array2<T>,
    flow_weights: Option<&Array2<T>>,
    depth_gt: Option<&DepthMap<T>>,
) -> Result<SampleLoss<T>> {
    let model = &cfg.model;
    let streams = if dep_patches.is_some() {
        StreamSet::full()
    } else {
        StreamSet::no_depth()
    };
    let layout = StreamLayout::for_model(model, streams);
    let mask = Arc::new(build_block_mask(&layout, cfg.mask_mode).allow);

    let mut g = Graph::new();
    let sem = embed_semantic(&mut g, params, model, sem_patches, tokens)?;
    let dep = match dep_patches {
        Some(px) => Some(depth_encode(&mut g, params, model, px)?),
        None => None,
    };
    let act = crate::action::action_suffix_tokens(&mut g, params, model, a_tau, tau, proprio)?;
    let (finals, _) = mot_forward(&mut g, params, model, &layout, &mask, [Some(sem), dep, Some(act)]);

    let v = crate::action::flow_readout(&mut g, params, model, finals[2].expect("action stream"));
    let flow = crate::action::flow_loss_node(&mut g, v, flow_target, flow_weights)?;

    let si = match (depth_gt, finals[1]) {
        (Some(gt), Some(dfinal)) => {
            let pred_log = depth_head(&mut g, params, dfinal);
            Some(si_log_loss_node(&mut g, pred_log, gt, model, cfg.lambda)?)
        }
        _ => None,
    };
    let total = match si {
        Some(s) => g.add(s, flow),
        None => flow,
    };
    Ok(SampleLoss {
        graph: g,
        flow: Some(flow),
        si,
        total,
    })
}

/// Depth-pretrain loss: the depth stream runs standalone through the
/// shared stack, optimizing L_si only.
pub fn depth_sample_loss<T: Real>(
    cfg: &RunConfig,
    params: &ParamSet<T>,
    dep_patches: &Array2<T>,
    depth_gt: &DepthMap<T>,
) -> Result<SampleLoss<T>> {
    let model = &cfg.model;
    let layout = StreamLayout::with_optional(0, model.n_depth(), 0);
    let mask = Arc::new(build_block_mask(&layout, MaskMode::Isolated).allow);
    let mut g = Graph::new();
    let dep = depth_encode(&mut g, params, model, dep_patches)?;
    let (finals, _) = mot_forward(&mut g, params, model, &layout, &mask, [None, Some(dep), None]);
    let pred_log = depth_head(&mut g, params, finals[1].expect("depth stream"));
    let si = si_log_loss_node(&mut g, pred_log, depth_gt, model, cfg.lambda)?;
    Ok(SampleLoss {
        graph: g,
        flow: None,
        si: Some(si),
        total: si,
    })
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<LogEntry>,
    /// Number of times L_si was evaluated during the run.
    pub si_eval_count: u64,
}

fn to_depth_map(depth_gt: &Array2<f64>) -> DepthMap<f32> {
    DepthMap::all_valid(depth_gt.mapv(|v| v as f32))
}

struct DivergenceGuard {
    initial: Option<f64>,
    consecutive: usize,
}

impl DivergenceGuard {
    fn new() -> Self {
        DivergenceGuard {
            initial: None,
            consecutive: 0,
        }
    }

    fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(TrimotError::Numeric(format!(
                "non-finite loss {loss} at step {step}"
            )));
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > 10.0 * initial {
            self.consecutive += 1;
        } else {
            self.consecutive = 0;
        }
        if self.consecutive >= 100 {
            return Err(TrimotError::Numeric(format!(
                "divergence: loss {loss} above 10x initial {initial} for 100 consecutive steps (step {step})"
            )));
        }
        Ok(())
    }
}

/// Pretrains the depth expert alone on monocular depth prediction.
pub fn train_depth_pretrain(cfg: &RunConfig, data: &DataSet) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.stage = Stage::DepthPretrain;
    cfg.validate()?;
    let mut params: ParamSet<f32> =
        build_params(&cfg.model, StreamSet::depth_only(), mix_seed(cfg.seed, 0xC0FFEE));
    let mut opt = OptimizerState::new(params.len());
    let mut logs = Vec::new();
    let mut guard = DivergenceGuard::new();
    let mut si_count = 0u64;
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, step as u64));
        let mut grad = vec![0.0f32; params.len()];
        let mut loss_sum = 0.0f64;
        for _ in 0..cfg.batch_size {
            let i = rng.gen_range(0..data.len());
            let sample = data.sample(i, cfg.k, &Vocabulary::grammar(), cfg.model.text_len)?;
            let patches = depth_input_patches(&cfg, &sample.rgb, &sample.depth_gt)?;
            let gt = to_depth_map(&sample.depth_gt);
            let loss = depth_sample_loss(&cfg, &params, &patches, &gt)?;
            si_count += 1;
            loss_sum += loss.graph.scalar_value(loss.total).as_f64();
            let grads = loss.graph.backward(loss.total);
            loss.graph.param_grads(&grads, &mut grad);
        }
        let scale = 1.0 / cfg.batch_size as f32;
        grad.iter_mut().for_each(|g| *g *= scale);
        let loss_avg = loss_sum / cfg.batch_size as f64;
        guard.check(step, loss_avg)?;
        let lr = cosine_lr(step, &cfg);
        update_step(&mut params, &grad, &mut opt, lr, cfg.weight_decay, None)?;
        if step % 50 == 0 || step + 1 == cfg.steps {
            logs.push(LogEntry {
                step,
                lr,
                loss_flow: None,
                loss_si: Some(loss_avg),
                loss_total: loss_avg,
            });
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg,
            step: 0,
            params: params.data,
            opt,
            norm_stats: data.stats.clone(),
        },
        logs,
        si_eval_count: si_count,
    })
}

/// Held-out L_si of a depth-pretrain checkpoint over fresh sim scenes.
pub fn eval_depth_pretrain(ckpt: &Checkpoint, suites: &[Suite], n_scenes: usize, seed: u64) -> Result<f64> {
    let params = ckpt.param_set()?;
    let cfg = &ckpt.config;
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..n_scenes {
        let suite = suites[i % suites.len()];
        let (scene, task) = sim::generate_scene(mix_seed(seed, i as u64), suite);
        let obs = sim::render(&scene, &task.instruction);
        let patches = depth_input_patches(cfg, &obs.rgb, &obs.depth_gt)?;
        let gt = to_depth_map(&obs.depth_gt);
        let loss = depth_sample_loss(cfg, &params, &patches, &gt)?;
        total += loss.graph.scalar_value(loss.total).as_f64();
        n += 1;
    }
    Ok(total / n as f64)
}

/// Joint VLA training on the combined loss, resumable from a checkpoint of
/// the same config.
pub fn train_vla(
    cfg: &RunConfig,
    data: &DataSet,
    init: Option<&Checkpoint>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    train_vla_until(cfg, data, init, resume, cfg.steps)
}

/// Trains up to `stop_step` of a `cfg.steps`-step schedule and snapshots
/// there; resuming from the snapshot reproduces the full run bit-for-bit.
pub fn train_vla_until(
    cfg: &RunConfig,
    data: &DataSet,
    init: Option<&Checkpoint>,
    resume: Option<&Checkpoint>,
    stop_step: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage == Stage::DepthPretrain {
        return Err(TrimotError::Config(
            "train_vla expects a VLA or finetune stage".into(),
        ));
    }
    let streams = StreamSet::for_model(&cfg.model);
    let vocab = Vocabulary::from_map(&cfg.vocab)?;
    let mut params: ParamSet<f32> = build_params(&cfg.model, streams, mix_seed(cfg.seed, 0xABCD));
    let mut opt = OptimizerState::new(params.len());
    let mut start_step = 0usize;

    if let Some(r) = resume {
        if r.config != *cfg {
            return Err(TrimotError::Config(
                "resume checkpoint config differs from run config".into(),
            ));
        }
        params = params.unflatten(&r.params)?;
        opt = r.opt.clone();
        start_step = r.step;
    } else if cfg.model.include_depth && cfg.depth_init == DepthInit::Pretrained {
        let init = init.ok_or_else(|| {
            TrimotError::Config("depth_init=PRETRAINED requires an init checkpoint".into())
        })?;
        if init.config.stage != Stage::DepthPretrain {
            return Err(TrimotError::Config(
                "init checkpoint is not a depth-pretrain checkpoint".into(),
            ));
        }
        let pre = init.param_set()?;
        let copied = params.copy_matching(&pre);
        if copied == 0 {
            return Err(TrimotError::Config(
                "no depth blocks matched the pretrain checkpoint".into(),
            ));
        }
    } else if let Some(init) = init {
        // finetune path: continue from full-model weights with a fresh optimizer
        let prev = init.param_set()?;
        let copied = params.copy_matching(&prev);
        if copied == 0 {
            return Err(TrimotError::Config(
                "init checkpoint shares no parameter blocks".into(),
            ));
        }
    }

    let frozen = if cfg.depth_frozen {
        Some(params.prefix_mask(&["depth."]))
    } else {
        None
    };

    let stop = stop_step.min(cfg.steps);
    let mut logs = Vec::new();
    let mut guard = DivergenceGuard::new();
    let mut si_count = 0u64;
    for step in start_step..stop {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, step as u64));
        let mut grad = vec![0.0f32; params.len()];
        let (mut flow_sum, mut si_sum) = (0.0f64, 0.0f64);
        for _ in 0..cfg.batch_size {
            let i = rng.gen_range(0..data.len());
            let sample = data.sample(i, cfg.k, &vocab, cfg.model.text_len)?;
            let tau = rng.gen::<f64>();
            let actions = sample.actions.mapv(|v| v as f32);
            let eps: Array2<f32> =
                Array2::from_shape_fn(actions.dim(), |_| f32::standard_normal(&mut rng));
            let a_tau = interpolate(&actions, &eps, tau)?;
            let u = target_flow(&actions, &eps)?;
            let weights = pad_weights(&sample, cfg.k, cfg.model.action_dim);
            let proprio: Vec<f32> = sample.proprio.iter().map(|&p| p as f32).collect();
            let sem_patches = image_patches::<f32>(&sample.rgb, &cfg.model)?;
            let dep_patches = if cfg.model.include_depth {
                Some(depth_input_patches(cfg, &sample.rgb, &sample.depth_gt)?)
            } else {
                None
            };
            let gt = if cfg.depth_loss_on && cfg.model.include_depth {
                Some(to_depth_map(&sample.depth_gt))
            } else {
                None
            };
            let loss = vla_sample_loss(
                cfg,
                &params,
                &sem_patches,
                dep_patches.as_ref(),
                &sample.tokens,
                &proprio,
                &a_tau,
                tau,
                &u,
                Some(&weights),
                gt.as_ref(),
            )?;
            flow_sum += loss.graph.scalar_value(loss.flow.unwrap()).as_f64();
            if let Some(si) = loss.si {
                si_sum += loss.graph.scalar_value(si).as_f64();
                si_count += 1;
            }
            let grads = loss.graph.backward(loss.total);
            loss.graph.param_grads(&grads, &mut grad);
        }
        let scale = 1.0 / cfg.batch_size as f32;
        grad.iter_mut().for_each(|g| *g *= scale);
        let flow_avg = flow_sum / cfg.batch_size as f64;
        let si_avg = si_sum / cfg.batch_size as f64;
        let total = flow_avg + si_avg;
        guard.check(step, total)?;
        let lr = cosine_lr(step, cfg);
        update_step(&mut params, &grad, &mut opt, lr, cfg.weight_decay, frozen.as_deref())?;
        if step % 50 == 0 || step + 1 == stop {
            logs.push(LogEntry {
                step,
                lr,
                loss_flow: Some(flow_avg),
                loss_si: if cfg.depth_loss_on && cfg.model.include_depth {
                    Some(si_avg)
                } else {
                    None
                },
                loss_total: total,
            });
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            step: stop,
            params: params.data,
            opt,
            norm_stats: data.stats.clone(),
        },
        logs,
        si_eval_count: si_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub suite: Suite,
    pub n_episodes: usize,
    pub success_rate: f64,
    pub mean_progress: f64,
    pub per_substep: Vec<f64>,
}

/// Closed-loop evaluation: chunks are executed fully before re-planning;
/// deterministic in (checkpoint, seed).
pub fn evaluate_policy(
    ckpt: &Checkpoint,
    suite: Suite,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalMetrics> {
    let cfg = &ckpt.config;
    let params = ckpt.param_set()?;
    let vocab = Vocabulary::from_map(&cfg.vocab)?;
    let model = PolicyModel {
        cfg: &cfg.model,
        params: &params,
        mask_mode: cfg.mask_mode,
    };
    let stats = &ckpt.norm_stats;
    let mut successes = 0usize;
    let mut progress_sum = 0.0;
    let mut substep_counts: Vec<usize> = Vec::new();
    for ep in 0..n_episodes {
        let ep_seed = mix_seed(seed, ep as u64);
        let (scene, task) = sim::generate_scene(ep_seed, suite);
        if substep_counts.is_empty() {
            substep_counts = vec![0; task.substeps.len()];
        }
        let mut chunk_idx = 0u64;
        let record = sim::rollout(
            &scene,
            &task,
            |obs| {
                let tokens =
                    crate::semantic::tokenize_instruction(&obs.instruction, &vocab, cfg.model.text_len)?;
                let sem_patches = image_patches::<f32>(&obs.rgb, &cfg.model)?;
                let dep_patches = if cfg.model.include_depth {
                    Some(depth_input_patches(cfg, &obs.rgb, &obs.depth_gt)?)
                } else {
                    None
                };
                let cache = model.build_context(&sem_patches, &tokens, dep_patches.as_ref())?;
                let p_row = Array2::from_shape_vec((1, 4), obs.proprio.to_vec()).unwrap();
                let p_norm = normalize(&p_row.mapv(|v| v as f32), &stats.proprio)?;
                let proprio: Vec<f32> = p_norm.row(0).to_vec();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(ep_seed ^ 0x5EED, chunk_idx));
                chunk_idx += 1;
                let chunk = model.sample_chunk(&cache, &proprio, cfg.sample_steps, &mut rng)?;
                let raw = crate::action::denormalize(&chunk, &stats.action)?;
                Ok(raw
                    .outer_iter()
                    .take(cfg.exec_horizon)
                    .map(|r| [r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64])
                    .collect())
            },
            sim::EPISODE_CAP,
        )?;
        let (score, ever) = sim::score_progress(&record, &task);
        if score.success {
            successes += 1;
        }
        progress_sum += score.progress;
        for (i, e) in ever.iter().enumerate() {
            if *e {
                substep_counts[i] += 1;
            }
        }
    }
    Ok(EvalMetrics {
        suite,
        n_episodes,
        success_rate: successes as f64 / n_episodes as f64,
        mean_progress: progress_sum / n_episodes as f64,
        per_substep: substep_counts
            .iter()
            .map(|&c| c as f64 / n_episodes as f64)
            .collect(),
    })
}

/// The scripted expert wrapped as a policy, for calibration.
pub fn evaluate_expert(suite: Suite, n_episodes: usize, seed: u64) -> Result<EvalMetrics> {
    let mut successes = 0usize;
    let mut progress_sum = 0.0;
    let mut per_substep: Vec<usize> = Vec::new();
    for ep in 0..n_episodes {
        let ep_seed = mix_seed(seed, ep as u64);
        let (scene, task) = sim::generate_scene(ep_seed, suite);
        if per_substep.is_empty() {
            per_substep = vec![0; task.substeps.len()];
        }
        let record = sim::rollout_expert(&scene, &task, sim::EPISODE_CAP)?;
        let (score, ever) = sim::score_progress(&record, &task);
        if score.success {
            successes += 1;
        }
        progress_sum += score.progress;
        for (i, e) in ever.iter().enumerate() {
            if *e {
                per_substep[i] += 1;
            }
        }
    }
    Ok(EvalMetrics {
        suite,
        n_episodes,
        success_rate: successes as f64 / n_episodes as f64,
        mean_progress: progress_sum / n_episodes as f64,
        per_substep: per_substep
            .iter()
            .map(|&c| c as f64 / n_episodes as f64)
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationTag {
    Full,
    I,
    II,
    III,
    IV,
    V,
}

impl AblationTag {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(AblationTag::Full),
            "i" => Ok(AblationTag::I),
            "ii" => Ok(AblationTag::II),
            "iii" => Ok(AblationTag::III),
            "iv" => Ok(AblationTag::IV),
            "v" => Ok(AblationTag::V),
            other => Err(TrimotError::Config(format!("unknown ablation tag {other}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationTag::Full => "full",
            AblationTag::I => "i",
            AblationTag::II => "ii",
            AblationTag::III => "iii",
            AblationTag::IV => "iv",
            AblationTag::V => "v",
        }
    }
}

/// Applies exactly one deviation from the full configuration.
pub fn ablation_config(tag: AblationTag, base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    match tag {
        AblationTag::Full => {}
        AblationTag::I => cfg.depth_init = DepthInit::Random,
        AblationTag::II => cfg.depth_loss_on = false,
        AblationTag::III => cfg.depth_frozen = true,
        AblationTag::IV => cfg.mask_mode = MaskMode::VlmDepthBidir,
        AblationTag::V => cfg.depth_input = DepthInput::Rgb,
    }
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub config_hash: String,
    pub metrics: Vec<EvalMetrics>,
    pub average_success: f64,
}

impl RunReport {
    pub fn new(label: impl Into<String>, cfg: &RunConfig, metrics: Vec<EvalMetrics>) -> Self {
        let average_success =
            metrics.iter().map(|m| m.success_rate).sum::<f64>() / metrics.len().max(1) as f64;
        RunReport {
            label: label.into(),
            config_hash: cfg.config_hash(),
            metrics,
            average_success,
        }
    }
}

/// Markdown table over several reports, one row per run, one column per
/// suite plus the average.
pub fn markdown_table(reports: &[RunReport]) -> String {
    let mut suites: Vec<Suite> = Vec::new();
    for r in reports {
        for m in &r.metrics {
            if !suites.contains(&m.suite) {
                suites.push(m.suite);
            }
        }
    }
    let mut out = String::from("| run |");
    for s in &suites {
        out.push_str(&format!(" {} |", s.name()));
    }
    out.push_str(" average |\n|---|");
    for _ in &suites {
        out.push_str("---|");
    }
    out.push_str("---|\n");
    for r in reports {
        out.push_str(&format!("| {} |", r.label));
        for s in &suites {
            match r.metrics.iter().find(|m| m.suite == *s) {
                Some(m) => out.push_str(&format!(" {:.1}% |", m.success_rate * 100.0)),
                None => out.push_str(" - |"),
            }
        }
        out.push_str(&format!(" {:.1}% |\n", r.average_success * 100.0));
    }
    out
}

fn pad_weights(sample: &TrainingSample, k: usize, action_dim: usize) -> Array2<f32> {
    let mut w = Array2::ones((k, action_dim));
    for i in k - sample.pad_count..k {
        for d in 0..action_dim {
            w[(i, d)] = 0.0;
        }
    }
    w
}
