//! Scratch diagnostic (run with --ignored); not part of the suite.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trimot::semantic::{image_patches, tokenize_instruction, Vocabulary};
use trimot::sim;
use trimot::train::Checkpoint;
use trimot::PolicyModel;

fn mix_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed.wrapping_add(i.wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn depth_patches(cfg: &trimot::RunConfig, obs: &sim::Observation) -> Option<Array2<f32>> {
    if !cfg.model.include_depth {
        return None;
    }
    match cfg.depth_input {
        trimot::DepthInput::Rgb => Some(image_patches(&obs.rgb, &cfg.model).unwrap()),
        trimot::DepthInput::GtDepth => Some(
            trimot::semantic::patches_from_channels(
                &trimot::train::depth_to_channels::<f32>(&obs.depth_gt),
                &cfg.model,
            )
            .unwrap(),
        ),
    }
}

fn first_action(
    model: &PolicyModel<f32>,
    cfg: &trimot::RunConfig,
    stats: &trimot::data::NormStats,
    vocab: &Vocabulary,
    obs: &sim::Observation,
    noise_seed: u64,
) -> [f64; 4] {
    let tokens = tokenize_instruction(&obs.instruction, vocab, cfg.model.text_len).unwrap();
    let sem = image_patches::<f32>(&obs.rgb, &cfg.model).unwrap();
    let dep = depth_patches(cfg, obs);
    let cache = model.build_context(&sem, &tokens, dep.as_ref()).unwrap();
    let p_row = Array2::from_shape_vec((1, 4), obs.proprio.to_vec()).unwrap();
    let p_norm = trimot::action::normalize(&p_row.mapv(|v| v as f32), &stats.proprio).unwrap();
    let proprio: Vec<f32> = p_norm.row(0).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let chunk = model
        .sample_chunk(&cache, &proprio, cfg.sample_steps, &mut rng)
        .unwrap();
    let raw = trimot::action::denormalize(&chunk, &stats.action).unwrap();
    [raw[(0, 0)] as f64, raw[(0, 1)] as f64, raw[(0, 2)] as f64, raw[(0, 3)] as f64]
}

#[test]
#[ignore]
fn first_action_stats() {
    let ckpt = Checkpoint::load(std::path::Path::new("/tmp/pilot/vla8.ckpt")).unwrap();
    let cfg = &ckpt.config;
    let params = ckpt.param_set().unwrap();
    let model = PolicyModel { cfg: &cfg.model, params: &params, mask_mode: cfg.mask_mode };
    let vocab = Vocabulary::from_map(&cfg.vocab).unwrap();
    let stats = &ckpt.norm_stats;

    // fresh scenes, initial observation: direction accuracy + noise spread
    let (mut sgn_x, mut sgn_y, mut n_x, mut n_y) = (0usize, 0usize, 0usize, 0usize);
    let mut spread = 0.0f64;
    let mut mean_abs = [0.0f64; 4];
    let n = 40;
    for ep in 0..n {
        let (scene, task) = sim::generate_scene(mix_seed(900, ep), sim::Suite::Pick);
        let obs = sim::render(&scene, &task.instruction);
        let exp = sim::expert_action(&scene, &task);
        let a = first_action(&model, cfg, stats, &vocab, &obs, 1000 + ep);
        // noise spread: same obs, 4 noise seeds, stddev of dx
        let mut xs = Vec::new();
        for s in 0..4 {
            xs.push(first_action(&model, cfg, stats, &vocab, &obs, 2000 + s)[0]);
        }
        let m = xs.iter().sum::<f64>() / 4.0;
        spread += (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0).sqrt();
        for d in 0..4 {
            mean_abs[d] += (a[d] - exp[d]).abs();
        }
        if exp[0].abs() > 0.02 {
            n_x += 1;
            if a[0].signum() == exp[0].signum() && a[0].abs() > 0.005 {
                sgn_x += 1;
            }
        }
        if exp[1].abs() > 0.02 {
            n_y += 1;
            if a[1].signum() == exp[1].signum() && a[1].abs() > 0.005 {
                sgn_y += 1;
            }
        }
    }
    eprintln!(
        "fresh scenes t=0: |err| dx {:.3} dy {:.3} dz {:.3} grip {:.3}; dir-correct x {}/{} y {}/{}; noise σ(dx) {:.4}",
        mean_abs[0] / n as f64, mean_abs[1] / n as f64, mean_abs[2] / n as f64, mean_abs[3] / n as f64,
        sgn_x, n_x, sgn_y, n_y, spread / n as f64
    );

    // along expert trajectories (on-distribution states): first-action error
    let mut err = [0.0f64; 4];
    let (mut sx, mut nx) = (0, 0);
    let mut count = 0usize;
    for ep in 0..10 {
        let (scene, task) = sim::generate_scene(mix_seed(100, ep), sim::Suite::Pick);
        let rec = sim::rollout_expert(&scene, &task, sim::EPISODE_CAP).unwrap();
        for (t, s) in rec.scenes.iter().enumerate().take(rec.actions.len()) {
            let obs = sim::render(s, &task.instruction);
            let exp = rec.actions[t];
            let a = first_action(&model, cfg, stats, &vocab, &obs, 31 * t as u64 + ep);
            for d in 0..4 {
                err[d] += (a[d] - exp[d]).abs();
            }
            if exp[0].abs() > 0.02 {
                nx += 1;
                if a[0].signum() == exp[0].signum() && a[0].abs() > 0.005 {
                    sx += 1;
                }
            }
            count += 1;
        }
    }
    eprintln!(
        "train trajectories: |err| dx {:.3} dy {:.3} dz {:.3} grip {:.3} over {} states; dir-correct x {}/{}",
        err[0] / count as f64, err[1] / count as f64, err[2] / count as f64, err[3] / count as f64,
        count, sx, nx
    );
}

#[test]
#[ignore]
fn bc_probe() {
    use trimot::mot::{build_params, StreamSet};
    use trimot::train::{update_step, vla_sample_loss, OptimizerState};

    let ckpt = Checkpoint::load(std::path::Path::new("/tmp/pilot/vla8.ckpt")).unwrap();
    let mut cfg = ckpt.config.clone();
    cfg.depth_loss_on = false;
    let vocab = Vocabulary::from_map(&cfg.vocab).unwrap();
    let data = trimot::data::DataSet::load(&[std::path::PathBuf::from("/tmp/pilot/data8")]).unwrap();
    let stats = data.stats.clone();

    let mut params = build_params::<f32>(&cfg.model, StreamSet::full(), 7);
    let mut opt = OptimizerState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let zeros = Array2::<f32>::zeros((cfg.k, cfg.model.action_dim));
    let steps = 2000usize;
    let batch = 8usize;
    for step in 0..steps {
        let mut grad = vec![0.0f32; params.len()];
        let mut loss_sum = 0.0;
        for _ in 0..batch {
            let idx = rand::Rng::gen_range(&mut rng, 0..data.len());
            let s = data.sample(idx, cfg.k, &vocab, cfg.model.text_len).unwrap();
            let sem = image_patches::<f32>(&s.rgb, &cfg.model).unwrap();
            let dep = trimot::semantic::patches_from_channels(
                &trimot::train::depth_to_channels::<f32>(&s.depth_gt),
                &cfg.model,
            )
            .unwrap();
            let proprio: Vec<f32> = s.proprio.iter().map(|&p| p as f32).collect();
            let actions = s.actions.mapv(|v| v as f32);
            let loss = vla_sample_loss(
                &cfg, &params, &sem, Some(&dep), &s.tokens, &proprio,
                &zeros, 0.0, &actions, None, None,
            )
            .unwrap();
            loss_sum += loss.graph.scalar_value(loss.total) as f64;
            let grads = loss.graph.backward(loss.total);
            loss.graph.param_grads(&grads, &mut grad);
        }
        grad.iter_mut().for_each(|g| *g /= batch as f32);
        let lr = if step < 100 {
            1e-3 * step as f64 / 100.0
        } else {
            1e-5 + 0.5 * (1e-3 - 1e-5) * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos())
        };
        update_step(&mut params, &grad, &mut opt, lr, 1e-4, None).unwrap();
        if step % 200 == 0 {
            eprintln!("step {step} bc loss {:.4}", loss_sum / batch as f64);
        }
    }

    // direction accuracy of the BC prediction v(0, τ=0) on fresh scenes
    let model = PolicyModel { cfg: &cfg.model, params: &params, mask_mode: cfg.mask_mode };
    let (mut sgn_x, mut sgn_y, mut n_x, mut n_y) = (0usize, 0usize, 0usize, 0usize);
    for ep in 0..40u64 {
        let (scene, task) = sim::generate_scene(mix_seed(900, ep), sim::Suite::Pick);
        let obs = sim::render(&scene, &task.instruction);
        let exp = sim::expert_action(&scene, &task);
        let tokens = tokenize_instruction(&obs.instruction, &vocab, cfg.model.text_len).unwrap();
        let sem = image_patches::<f32>(&obs.rgb, &cfg.model).unwrap();
        let dep = depth_patches(&cfg, &obs);
        let cache = model.build_context(&sem, &tokens, dep.as_ref()).unwrap();
        let p_row = Array2::from_shape_vec((1, 4), obs.proprio.to_vec()).unwrap();
        let p_norm = trimot::action::normalize(&p_row.mapv(|v| v as f32), &stats.proprio).unwrap();
        let proprio: Vec<f32> = p_norm.row(0).to_vec();
        let pred = model.action_forward(&cache, &zeros, 0.0, &proprio).unwrap();
        let raw = trimot::action::denormalize(&pred, &stats.action).unwrap();
        let (ax, ay) = (raw[(0, 0)] as f64, raw[(0, 1)] as f64);
        if exp[0].abs() > 0.02 {
            n_x += 1;
            if ax.signum() == exp[0].signum() && ax.abs() > 0.005 {
                sgn_x += 1;
            }
        }
        if exp[1].abs() > 0.02 {
            n_y += 1;
            if ay.signum() == exp[1].signum() && ay.abs() > 0.005 {
                sgn_y += 1;
            }
        }
    }
    eprintln!("BC probe fresh scenes: dir-correct x {sgn_x}/{n_x} y {sgn_y}/{n_y}");
}

// Same loop as bc_probe but with genuine flow-matching draws; knobs via env:
// FLOW_STEPS, FLOW_BATCH, TAU_MAX (truncate tau draw), NEPS (draws per sample).
#[test]
#[ignore]
fn flow_probe() {
    use trimot::action::{interpolate, target_flow};
    use trimot::graph::Real as _;
    use trimot::mot::{build_params, StreamSet};
    use trimot::train::{update_step, vla_sample_loss, OptimizerState};

    let steps: usize = std::env::var("FLOW_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(2000);
    let batch: usize = std::env::var("FLOW_BATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(8);
    let tau_max: f64 = std::env::var("TAU_MAX").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);

    let ckpt = Checkpoint::load(std::path::Path::new("/tmp/pilot/vla8.ckpt")).unwrap();
    let mut cfg = ckpt.config.clone();
    cfg.depth_loss_on = false;
    let vocab = Vocabulary::from_map(&cfg.vocab).unwrap();
    let data = trimot::data::DataSet::load(&[std::path::PathBuf::from("/tmp/pilot/data8")]).unwrap();
    let stats = data.stats.clone();

    let mut params = build_params::<f32>(&cfg.model, StreamSet::full(), 7);
    let mut opt = OptimizerState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for step in 0..steps {
        let mut grad = vec![0.0f32; params.len()];
        let mut loss_sum = 0.0;
        for _ in 0..batch {
            let idx = rand::Rng::gen_range(&mut rng, 0..data.len());
            let s = data.sample(idx, cfg.k, &vocab, cfg.model.text_len).unwrap();
            let sem = image_patches::<f32>(&s.rgb, &cfg.model).unwrap();
            let dep = trimot::semantic::patches_from_channels(
                &trimot::train::depth_to_channels::<f32>(&s.depth_gt),
                &cfg.model,
            )
            .unwrap();
            let proprio: Vec<f32> = s.proprio.iter().map(|&p| p as f32).collect();
            let actions = s.actions.mapv(|v| v as f32);
            let tau = rand::Rng::gen_range(&mut rng, 0.0..tau_max);
            let eps: Array2<f32> = Array2::from_shape_fn(
                (cfg.k, cfg.model.action_dim),
                |_| f32::standard_normal(&mut rng),
            );
            let a_tau = interpolate(&actions, &eps, tau).unwrap();
            let u = target_flow(&actions, &eps).unwrap();
            let loss = vla_sample_loss(
                &cfg, &params, &sem, Some(&dep), &s.tokens, &proprio,
                &a_tau, tau, &u, None, None,
            )
            .unwrap();
            loss_sum += loss.graph.scalar_value(loss.total) as f64;
            let grads = loss.graph.backward(loss.total);
            loss.graph.param_grads(&grads, &mut grad);
        }
        grad.iter_mut().for_each(|g| *g /= batch as f32);
        let lr = if step < 100 {
            1e-3 * step as f64 / 100.0
        } else {
            1e-5 + 0.5 * (1e-3 - 1e-5) * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos())
        };
        update_step(&mut params, &grad, &mut opt, lr, 1e-4, None).unwrap();
        if step % 400 == 0 {
            eprintln!("step {step} flow loss {:.4}", loss_sum / batch as f64);
        }
    }

    // direction accuracy of the fully sampled first action on fresh scenes
    let model = PolicyModel { cfg: &cfg.model, params: &params, mask_mode: cfg.mask_mode };
    let (mut sgn_x, mut sgn_y, mut n_x, mut n_y) = (0usize, 0usize, 0usize, 0usize);
    for ep in 0..40u64 {
        let (scene, task) = sim::generate_scene(mix_seed(900, ep), sim::Suite::Pick);
        let obs = sim::render(&scene, &task.instruction);
        let exp = sim::expert_action(&scene, &task);
        let tokens = tokenize_instruction(&obs.instruction, &vocab, cfg.model.text_len).unwrap();
        let sem = image_patches::<f32>(&obs.rgb, &cfg.model).unwrap();
        let dep = depth_patches(&cfg, &obs);
        let cache = model.build_context(&sem, &tokens, dep.as_ref()).unwrap();
        let p_row = Array2::from_shape_vec((1, 4), obs.proprio.to_vec()).unwrap();
        let p_norm = trimot::action::normalize(&p_row.mapv(|v| v as f32), &stats.proprio).unwrap();
        let proprio: Vec<f32> = p_norm.row(0).to_vec();
        let mut srng = ChaCha8Rng::seed_from_u64(1000 + ep);
        let chunk = model.sample_chunk(&cache, &proprio, cfg.sample_steps, &mut srng).unwrap();
        let raw = trimot::action::denormalize(&chunk, &stats.action).unwrap();
        let (ax, ay) = (raw[(0, 0)] as f64, raw[(0, 1)] as f64);
        if exp[0].abs() > 0.02 {
            n_x += 1;
            if ax.signum() == exp[0].signum() && ax.abs() > 0.005 {
                sgn_x += 1;
            }
        }
        if exp[1].abs() > 0.02 {
            n_y += 1;
            if ay.signum() == exp[1].signum() && ay.abs() > 0.005 {
                sgn_y += 1;
            }
        }
    }
    eprintln!("flow probe ({steps}x{batch}, tau_max {tau_max}): dir-correct x {sgn_x}/{n_x} y {sgn_y}/{n_y}");
}
