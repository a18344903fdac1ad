use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hpdt_core::checkpoint::ModelCheckpoint;
use hpdt_core::data::{load_dataset, save_dataset, TaskBundle};
use hpdt_core::envs::{collect_meta_dataset, CollectConfig, Family};
use hpdt_core::evaluator::{evaluation_report, export_global_token_projection, format_report, EvalConfig};
use hpdt_core::experiments::{
    check_suite_coverage, format_runs, format_summary, run_seeds, run_suite, summarize, ExperimentConfig, Suite,
};
use hpdt_core::model::{Mode, ModelConfig, ModelParams};
use hpdt_core::trainer::{write_metrics_csv, EvalHook, Trainer};

#[derive(Parser, Debug)]
#[command(name = "hpdt", version, about = "Hierarchical prompt decision transformer experiments")]
struct Cli {
    /// Master seed; every other seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, metrics and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    /// Use the task counts and training length of the original study.
    #[arg(long, global = true, conflicts_with = "desk_scale")]
    paper_scale: bool,
    /// Use the small model and short schedule that trains in minutes on a laptop CPU.
    #[arg(long, global = true)]
    desk_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset root; files live under `<data-dir>/<family>/`.
    #[arg(long, env = "HPDT_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Environment family (pointdir, pointvel, pointdyn, pointgoal).
    #[arg(long)]
    family: Option<Family>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect train/test datasets with scripted experts.
    GenerateData {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// full, wo-g, wo-a, wo-t, wo-ga or pdt.
        #[arg(long)]
        mode: Option<Mode>,
        /// Validate the configuration and print parameter counts without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint on the held-out tasks.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Retrieval neighbor count; repeat for a sweep.
        #[arg(long = "k")]
        k: Vec<usize>,
        /// Demonstration segment length; repeat for a sweep.
        #[arg(long = "m-prime")]
        m_prime: Vec<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        target_rtg: Option<f64>,
        /// Also export 2D projections of the held-out global tokens.
        #[arg(long)]
        project_tokens: bool,
    },
    /// Run a canned experiment suite.
    Repro {
        /// pointdir-ablation, pointvel-ablation, robustness or baseline-compare.
        suite: Suite,
    },
}

struct Ctx {
    exp: ExperimentConfig,
    force: bool,
}

impl Ctx {
    fn out(&self) -> &Path {
        &self.exp.output_dir
    }

    fn data_dir(&self, args: &DataArgs) -> PathBuf {
        args.data_dir.clone().unwrap_or_else(|| self.out().join("data"))
    }

    fn family(&self, args: &DataArgs) -> Family {
        args.family.unwrap_or(self.exp.data.family)
    }

    fn guard(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            bail!(hpdt_core::HpdtError::AlreadyExists(path.to_path_buf()));
        }
        Ok(())
    }

    fn write(&self, path: &Path, contents: &str) -> Result<()> {
        self.guard(path)?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
    }

    /// Resolved config and version, written next to every set of outputs.
    fn write_manifest(&self, dir: &Path, command: &str, extra: serde_json::Value) -> Result<()> {
        let manifest = serde_json::json!({
            "version": hpdt_core::version_string(),
            "command": command,
            "config": self.exp,
            "details": extra,
        });
        self.write(&dir.join("run_manifest.json"), &serde_json::to_string_pretty(&manifest)?)
    }
}

fn resolve(cli: &Cli) -> Result<Ctx> {
    let mut exp = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if cli.paper_scale {
        exp = exp.paper_scale();
    }
    if cli.desk_scale {
        exp = exp.desk_scale();
    }
    if let Some(s) = cli.seed {
        exp.seed = s;
    }
    if let Some(o) = &cli.out {
        exp.output_dir = o.clone();
    }
    exp.validate()?;
    Ok(Ctx { exp, force: cli.force })
}

fn dataset_paths(dir: &Path, family: Family) -> (PathBuf, PathBuf, PathBuf) {
    let base = dir.join(family.name());
    (base.join("train.jsonl"), base.join("test.jsonl"), base.join("manifest.json"))
}

fn generate_data(ctx: &Ctx, args: &DataArgs) -> Result<()> {
    let family = ctx.family(args);
    let cfg = CollectConfig {
        family,
        ..ctx.exp.data.clone()
    };
    let (train_path, test_path, manifest_path) = dataset_paths(&ctx.data_dir(args), family);
    for p in [&train_path, &test_path, &manifest_path] {
        ctx.guard(p)?;
    }
    let seed = run_seeds(ctx.exp.seed, 0).data;
    let (train, test) = collect_meta_dataset(&cfg, seed)?;
    let meta = serde_json::json!({ "collect": cfg, "master_seed": ctx.exp.seed, "data_seed": seed });
    save_dataset(&train, &train_path, meta.clone())?;
    save_dataset(&test, &test_path, meta)?;
    let manifest = serde_json::json!({
        "version": hpdt_core::version_string(),
        "family": family.name(),
        "master_seed": ctx.exp.seed,
        "data_seed": seed,
        "train_tasks": train.len(),
        "test_tasks": test.len(),
        "episodes_per_task": cfg.episodes_per_task,
        "demos_per_task": cfg.demos_per_task,
        "collect": cfg,
        "train_task_ids": train.iter().map(|b| &b.task_id).collect::<Vec<_>>(),
        "test_task_ids": test.iter().map(|b| &b.task_id).collect::<Vec<_>>(),
        "config": ctx.exp,
    });
    ctx.write(&manifest_path, &serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "wrote {} train and {} test tasks to {}",
        train.len(),
        test.len(),
        train_path.parent().unwrap_or(Path::new(".")).display()
    );
    Ok(())
}

fn load_split(path: &Path) -> Result<Vec<TaskBundle>> {
    let (bundles, _) =
        load_dataset(path).with_context(|| format!("loading {} (run generate-data first?)", path.display()))?;
    Ok(bundles)
}

fn print_param_counts(cfg: &ModelConfig) -> Result<()> {
    for mode in Mode::ALL {
        let c = ModelConfig { mode, ..cfg.clone() };
        let n = ModelParams::init(&c, 0)?.scalar_count();
        let marker = if mode == cfg.mode { " *" } else { "" };
        println!("params[{mode}] = {n}{marker}");
    }
    let full = ModelParams::init(&ModelConfig { mode: Mode::Full, ..cfg.clone() }, 0)?.scalar_count();
    let wo_t = ModelParams::init(&ModelConfig { mode: Mode::WoT, ..cfg.clone() }, 0)?.scalar_count();
    let h = cfg.embed_dim;
    println!(
        "params[wo_t] - params[full] = {} (h*(T_max+1) - 2h = {})",
        wo_t as i64 - full as i64,
        (h * (cfg.max_timestep + 1)) as i64 - 2 * h as i64
    );
    Ok(())
}

fn train_cmd(ctx: &Ctx, args: &DataArgs, mode: Option<Mode>, dry_run: bool) -> Result<()> {
    let mut model = ctx.exp.model.clone();
    if let Some(m) = mode {
        model.mode = m;
    }
    model.validate()?;
    if dry_run {
        println!("config ok (mode {})", model.mode);
        return print_param_counts(&model);
    }
    let family = ctx.family(args);
    let (train_path, test_path, _) = dataset_paths(&ctx.data_dir(args), family);
    let train = load_split(&train_path)?;
    let seeds = run_seeds(ctx.exp.seed, 0);
    let run_dir = ctx.out().join(format!("train-{}-{}", family.name(), model.mode));
    let final_ckpt = run_dir.join("final.ckpt");
    ctx.guard(&final_ckpt)?;
    let train_cfg = hpdt_core::trainer::TrainConfig {
        seed: seeds.train,
        checkpoint_dir: Some(run_dir.clone()),
        ..ctx.exp.train.clone()
    };
    let test = if train_cfg.eval_every > 0 { load_split(&test_path)? } else { Vec::new() };
    let hook = EvalHook {
        bundles: &test,
        config: EvalConfig {
            seed: seeds.eval,
            ..ctx.exp.eval.clone()
        },
    };
    let mut trainer = Trainer::new(&train, model, train_cfg)?;
    println!(
        "training mode {} with {} parameters for {} updates",
        trainer.model_config.mode,
        trainer.params.scalar_count(),
        trainer.config.total_updates()
    );
    let history = trainer.run((!test.is_empty()).then_some(&hook))?;
    let metrics = run_dir.join("metrics.csv");
    ctx.guard(&metrics)?;
    write_metrics_csv(&history, &metrics)?;
    ctx.write_manifest(
        &run_dir,
        "train",
        serde_json::json!({ "mode": trainer.model_config.mode, "model": trainer.model_config, "train_seed": seeds.train }),
    )?;
    if let Some(last) = history.last() {
        println!("final loss {:.6} after {} updates", last.loss, trainer.updates_done);
    }
    println!("checkpoint {}", final_ckpt.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    ctx: &Ctx,
    args: &DataArgs,
    checkpoint: &Path,
    ks: &[usize],
    m_primes: &[usize],
    episodes: Option<usize>,
    target_rtg: Option<f64>,
    project: bool,
) -> Result<()> {
    let ckpt = ModelCheckpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let family = ctx.family(args);
    let (_, test_path, _) = dataset_paths(&ctx.data_dir(args), family);
    let test = load_split(&test_path)?;
    for b in &test {
        if b.state_dim() != ckpt.config.state_dim || b.action_dim() != ckpt.config.action_dim {
            bail!(
                "dimension mismatch: dataset task {} has |S|={}, |A|={} but the checkpoint expects |S|={}, |A|={}",
                b.task_id,
                b.state_dim(),
                b.action_dim(),
                ckpt.config.state_dim,
                ckpt.config.action_dim
            );
        }
    }
    let base = EvalConfig {
        seed: run_seeds(ctx.exp.seed, 0).eval,
        episodes_per_task: episodes.unwrap_or(ctx.exp.eval.episodes_per_task),
        target_rtg: target_rtg.or(ctx.exp.eval.target_rtg),
        ..ctx.exp.eval.clone()
    };
    let ks: Vec<Option<usize>> = if ks.is_empty() { vec![base.k] } else { ks.iter().map(|&k| Some(k)).collect() };
    let ms: Vec<Option<usize>> = if m_primes.is_empty() {
        vec![base.demo_len]
    } else {
        m_primes.iter().map(|&m| Some(m)).collect()
    };
    let mut rows = Vec::new();
    for &k in &ks {
        for &m in &ms {
            let eval = EvalConfig {
                k,
                demo_len: m,
                ..base.clone()
            };
            rows.extend(evaluation_report(&test, &ckpt.params, &ckpt.config, &eval)?);
        }
    }
    let out = ctx.out().join("eval");
    let report = out.join("eval_report.csv");
    let text = format_report(&rows);
    ctx.write(&report, &text)?;
    print!("{text}");
    if project {
        let path = out.join("global_token_projection.csv");
        ctx.guard(&path)?;
        let proj = export_global_token_projection(&test, &ckpt.params, &ckpt.config, &path)?;
        println!("projection {} (rank {}, silhouette {:.4})", path.display(), proj.rank, proj.silhouette);
    }
    ctx.write_manifest(
        &out,
        "eval",
        serde_json::json!({ "checkpoint": checkpoint, "mode": ckpt.config.mode, "model": ckpt.config, "eval": base }),
    )?;
    Ok(())
}

fn repro_cmd(ctx: &Ctx, suite: Suite) -> Result<()> {
    let dir = ctx.out().join(suite.name());
    let runs_path = dir.join("runs.csv");
    let summary_path = dir.join("summary.csv");
    ctx.guard(&runs_path)?;
    ctx.guard(&summary_path)?;
    let records = run_suite(&ctx.exp, suite, |r| {
        eprintln!(
            "{} {} rep {} k={} m'={}: mean return {:.3} (expert {:.3})",
            r.family, r.mode, r.rep, r.k, r.demo_len, r.mean_return, r.expert_return
        );
    })?;
    check_suite_coverage(suite, &records)?;
    ctx.write(&runs_path, &format_runs(&records))?;
    let summary = format_summary(&summarize(&records));
    ctx.write(&summary_path, &summary)?;
    ctx.write_manifest(&dir, "repro", serde_json::json!({ "suite": suite.name() }))?;
    print!("{summary}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = resolve(&cli)?;
    match &cli.command {
        Command::GenerateData { data } => generate_data(&ctx, data),
        Command::Train { data, mode, dry_run } => train_cmd(&ctx, data, *mode, *dry_run),
        Command::Eval {
            data,
            checkpoint,
            k,
            m_prime,
            episodes,
            target_rtg,
            project_tokens,
        } => eval_cmd(&ctx, data, checkpoint, k, m_prime, *episodes, *target_rtg, *project_tokens),
        Command::Repro { suite } => repro_cmd(&ctx, *suite),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
