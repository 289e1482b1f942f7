//! Command-line driver: dataset generation, depth pretraining, VLA
//! training, evaluation, ablations, and depth-map export.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical abort,
//! 1 any other failure.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use trimot::config::{DepthInit, RunConfig, Stage};
use trimot::data::{record_dataset, DataSet};
use trimot::error::TrimotError;
use trimot::sim::Suite;
use trimot::train::{
    self, ablation_config, evaluate_policy, AblationTag, Checkpoint, EvalMetrics, RunReport,
};

#[derive(Parser)]
#[command(name = "trimot", about = "Three-expert depth-aware manipulation policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert demonstrations into a shard directory.
    GenData(GenDataArgs),
    /// Pretrain the depth expert alone on monocular depth prediction.
    PretrainDepth(PretrainArgs),
    /// Train the full policy (VLA or finetune stage).
    Train(TrainArgs),
    /// Evaluate a checkpoint closed-loop on one suite.
    Eval(EvalArgs),
    /// Train and evaluate one ablation tag across all suites.
    Ablate(AblateArgs),
    /// Export predicted and ground-truth depth maps for one episode as PGM.
    RenderDepth(RenderDepthArgs),
    /// Write a default RunConfig JSON to edit by hand.
    InitConfig(InitConfigArgs),
}

#[derive(Args)]
struct InitConfigArgs {
    /// One of: vla, depth-pretrain, vla-compact, depth-pretrain-compact,
    /// vla-small, depth-pretrain-small.
    #[arg(long, default_value = "vla")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    /// Suite name (PICK, PLACE, STACK, TALLER_PICK); repeatable.
    #[arg(long, required = true)]
    suite: Vec<String>,
    /// Episode count per listed suite (one value, or one per suite).
    #[arg(long, required = true)]
    episodes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON file mirroring RunConfig field names.
    #[arg(long)]
    config: PathBuf,
    /// Shard directory; repeatable.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Initialization checkpoint (depth pretrain, or full weights for finetune).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    suite: String,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON output path (omit to print metrics only).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// One of: full, i, ii, iii, iv, v.
    #[arg(long)]
    tag: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Depth-pretrain checkpoint for PRETRAINED depth init.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 50)]
    eval_episodes: usize,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
}

#[derive(Args)]
struct RenderDepthArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Episode seed; also names the output files.
    #[arg(long)]
    episode: u64,
    #[arg(long)]
    suite: Option<String>,
    /// Output directory for `<episode>_<t>_{pred,gt}.pgm`.
    #[arg(long)]
    out: PathBuf,
    /// Write 8-bit PGMs instead of 16-bit.
    #[arg(long, default_value_t = false)]
    eight_bit: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                TrimotError::Config(_) | TrimotError::Tokenize(_) => ExitCode::from(2),
                TrimotError::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn read_config(path: &Path) -> Result<RunConfig, TrimotError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TrimotError::io(path.display().to_string(), e))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| TrimotError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), TrimotError> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| TrimotError::io(path.display().to_string(), e))
}

fn load_init(path: &Option<PathBuf>) -> Result<Option<Checkpoint>, TrimotError> {
    path.as_ref().map(|p| Checkpoint::load(p)).transpose()
}

fn run(cli: Cli) -> Result<(), TrimotError> {
    match cli.command {
        Command::GenData(a) => {
            if a.episodes.len() != 1 && a.episodes.len() != a.suite.len() {
                return Err(TrimotError::Config(
                    "--episodes must appear once or once per --suite".into(),
                ));
            }
            let mut mix = Vec::new();
            for (i, s) in a.suite.iter().enumerate() {
                let n = a.episodes[if a.episodes.len() == 1 { 0 } else { i }];
                mix.push((Suite::parse(s)?, n));
            }
            std::fs::create_dir_all(&a.out)
                .map_err(|e| TrimotError::io(a.out.display().to_string(), e))?;
            let manifest = record_dataset(&mix, a.seed, &a.out)?;
            let steps: usize = manifest.episodes.iter().map(|e| e.length).sum();
            println!(
                "wrote {} episodes ({} steps) to {}",
                manifest.episodes.len(),
                steps,
                a.out.display()
            );
            Ok(())
        }
        Command::PretrainDepth(a) => {
            let mut cfg = read_config(&a.config)?;
            cfg.stage = Stage::DepthPretrain;
            let data = DataSet::load(&a.data)?;
            let out = train::train_depth_pretrain(&cfg, &data)?;
            out.checkpoint.save(&a.out)?;
            write_json(&a.out.with_extension("log.json"), &out.logs)?;
            if let Some(l) = out.logs.last() {
                println!("final depth loss {:.4}; checkpoint {}", l.loss_total, a.out.display());
            }
            Ok(())
        }
        Command::Train(a) => {
            let cfg = read_config(&a.config)?;
            if cfg.stage == Stage::DepthPretrain {
                return Err(TrimotError::Config(
                    "use pretrain-depth for the DEPTH_PRETRAIN stage".into(),
                ));
            }
            let data = DataSet::load(&a.data)?;
            let init = load_init(&a.init)?;
            if cfg.model.include_depth
                && cfg.depth_init == DepthInit::Pretrained
                && init.is_none()
            {
                return Err(TrimotError::Config(
                    "depth_init PRETRAINED requires --init".into(),
                ));
            }
            let out = train::train_vla(&cfg, &data, init.as_ref(), None)?;
            out.checkpoint.save(&a.out)?;
            write_json(&a.out.with_extension("log.json"), &out.logs)?;
            if let Some(l) = out.logs.last() {
                println!(
                    "final loss {:.4} (flow {:.4}); checkpoint {}",
                    l.loss_total,
                    l.loss_flow.unwrap_or(f64::NAN),
                    a.out.display()
                );
            }
            Ok(())
        }
        Command::Eval(a) => {
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let suite = Suite::parse(&a.suite)?;
            let metrics = evaluate_policy(&ckpt, suite, a.episodes, a.seed)?;
            if let Some(path) = &a.report {
                let report = RunReport::new("eval", &ckpt.config, vec![metrics.clone()]);
                write_json(path, &report)?;
            }
            println!(
                "{}: success {:.1}% progress {:.1}% over {} episodes",
                suite.name(),
                metrics.success_rate * 100.0,
                metrics.mean_progress * 100.0,
                metrics.n_episodes
            );
            Ok(())
        }
        Command::Ablate(a) => {
            let tag = AblationTag::parse(&a.tag)?;
            let base = read_config(&a.config)?;
            let cfg = ablation_config(tag, &base);
            let data = DataSet::load(&a.data)?;
            let init = load_init(&a.init)?;
            if cfg.model.include_depth
                && cfg.depth_init == DepthInit::Pretrained
                && init.is_none()
            {
                return Err(TrimotError::Config(
                    "this ablation needs a depth-pretrain checkpoint via --init".into(),
                ));
            }
            let out = train::train_vla(&cfg, &data, init.as_ref(), None)?;
            let mut metrics: Vec<EvalMetrics> = Vec::new();
            for suite in [Suite::Pick, Suite::Stack, Suite::TallerPick] {
                metrics.push(evaluate_policy(&out.checkpoint, suite, a.eval_episodes, a.eval_seed)?);
            }
            let report = RunReport::new(tag.label(), &cfg, metrics);
            write_json(&a.report, &report)?;
            println!("{}", train::markdown_table(std::slice::from_ref(&report)));
            Ok(())
        }
        Command::RenderDepth(a) => {
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let suite = match &a.suite {
                Some(s) => Suite::parse(s)?,
                None => Suite::Pick,
            };
            std::fs::create_dir_all(&a.out)
                .map_err(|e| TrimotError::io(a.out.display().to_string(), e))?;
            let n = render_depth_episode(&ckpt, suite, a.episode, &a.out, a.eight_bit)?;
            println!("wrote {n} depth pairs to {}", a.out.display());
            Ok(())
        }
        Command::InitConfig(a) => {
            let mut cfg = match a.preset.as_str() {
                "vla" => RunConfig::vla_default(a.seed),
                "depth-pretrain" => RunConfig::depth_pretrain_default(a.seed),
                "vla-compact" | "depth-pretrain-compact" | "vla-small"
                | "depth-pretrain-small" => {
                    let mut c = if a.preset.starts_with("vla") {
                        RunConfig::vla_default(a.seed)
                    } else {
                        RunConfig::depth_pretrain_default(a.seed)
                    };
                    c.model = if a.preset.ends_with("small") {
                        trimot::ModelConfig::small()
                    } else {
                        trimot::ModelConfig::compact()
                    };
                    c.k = c.model.chunk_len;
                    c
                }
                other => {
                    return Err(TrimotError::Config(format!("unknown preset {other}")));
                }
            };
            cfg.seed = a.seed;
            write_json(&a.out, &cfg)?;
            println!("wrote {} preset to {}", a.preset, a.out.display());
            Ok(())
        }
    }
}

/// Rolls the policy through one episode, exporting predicted and GT depth
/// at every re-planning step as `<episode>_<t>_{pred,gt}.pgm`.
fn render_depth_episode(
    ckpt: &Checkpoint,
    suite: Suite,
    episode: u64,
    out: &Path,
    eight_bit: bool,
) -> Result<usize, TrimotError> {
    use trimot::depth::{write_pgm16, write_pgm8, DepthMap};
    use trimot::semantic::{image_patches, tokenize_instruction, Vocabulary};

    if !ckpt.config.model.include_depth {
        return Err(TrimotError::Config(
            "checkpoint has no depth expert to render from".into(),
        ));
    }
    let params = ckpt.param_set()?;
    let cfg = &ckpt.config;
    let vocab = Vocabulary::from_map(&cfg.vocab)?;
    let model = trimot::PolicyModel {
        cfg: &cfg.model,
        params: &params,
        mask_mode: cfg.mask_mode,
    };
    let (scene0, task) = trimot::sim::generate_scene(episode, suite);
    let mut scene = scene0;
    let mut written = 0usize;
    let mut t = 0usize;
    while t < trimot::sim::EPISODE_CAP {
        let obs = trimot::sim::render(&scene, &task.instruction);
        let tokens = tokenize_instruction(&obs.instruction, &vocab, cfg.model.text_len)?;
        let sem = image_patches::<f32>(&obs.rgb, &cfg.model)?;
        let dep = match cfg.depth_input {
            trimot::DepthInput::Rgb => sem.clone(),
            trimot::DepthInput::GtDepth => trimot::semantic::patches_from_channels(
                &train::depth_to_channels::<f32>(&obs.depth_gt),
                &cfg.model,
            )?,
        };
        let cache = model.build_context(&sem, &tokens, Some(&dep))?;
        let pred = model
            .predict_depth(&cache)
            .ok_or_else(|| TrimotError::Eval("depth stream absent".into()))?;
        let gt = DepthMap::all_valid(obs.depth_gt.mapv(|v| v as f32));
        let write = if eight_bit { write_pgm8::<f32> } else { write_pgm16::<f32> };
        write(&out.join(format!("{episode}_{t}_pred.pgm")), &pred)?;
        write(&out.join(format!("{episode}_{t}_gt.pgm")), &gt)?;
        written += 1;
        // advance one chunk with the scripted expert to vary the viewpoint
        for _ in 0..cfg.k {
            let a = trimot::sim::expert_action(&scene, &task);
            scene = trimot::sim::step(&scene, a);
            t += 1;
        }
        let (score, _) = trimot::sim::score_progress(
            &trimot::sim::EpisodeRecord {
                scenes: vec![scene.clone()],
                actions: vec![],
                substeps_ever: vec![],
            },
            &task,
        );
        if score.success {
            break;
        }
    }
    Ok(written)
}
