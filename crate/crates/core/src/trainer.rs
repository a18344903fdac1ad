//! Teacher-forced training across tasks.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{ModelCheckpoint, TrainState};
use crate::data::{sample_segment, sample_window, Segment, TaskBundle};
use crate::error::{invalid, HpdtError, Result};
use crate::evaluator::{evaluate_task, EvalConfig};
use crate::model::{action_loss, loss_value, ModelConfig, ModelParams, PromptedBatch, PromptedRow};
use crate::optim::{clip_grad_norm, AdamHyper, AdamState};
use crate::parallel::map_indexed;
use crate::prompt::retrieval_rtg_scale;
use crate::rng::{derive_seed, stream, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub updates_per_epoch: u64,
    /// Rows sampled per training task in every update (`M`).
    pub batch_per_task: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Evaluate and checkpoint every this many epochs; 0 disables periodic evaluation.
    pub eval_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Global gradient-norm clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamHyper::default();
        Self {
            epochs: 500,
            updates_per_epoch: 10,
            batch_per_task: 16,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
            eval_every: 0,
            checkpoint_dir: None,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.updates_per_epoch == 0 || self.batch_per_task == 0 {
            return invalid("updates_per_epoch and batch_per_task must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return invalid("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return invalid("grad_clip must be positive");
            }
        }
        Ok(())
    }

    pub fn total_updates(&self) -> u64 {
        self.epochs * self.updates_per_epoch
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Token-space rtg divisor derived from training data: the largest absolute demo return, floored at 1.
pub fn data_rtg_scale(bundles: &[TaskBundle]) -> f64 {
    bundles
        .iter()
        .flat_map(|b| b.demos.iter().map(|d| d.rtg[0].abs()))
        .fold(1.0, f64::max)
}

/// Retrieval rtg scale of a bundle under the model's distance setting.
pub fn rtg_scale_for(bundle: &TaskBundle, cfg: &ModelConfig) -> f64 {
    if cfg.raw_rtg_distance {
        1.0
    } else {
        retrieval_rtg_scale(bundle)
    }
}

fn check_bundles(bundles: &[TaskBundle], cfg: &ModelConfig) -> Result<()> {
    if bundles.is_empty() {
        return invalid("no training tasks");
    }
    for b in bundles {
        if b.rollouts.is_empty() || b.demos.is_empty() {
            return invalid(format!("task {} needs at least one rollout and one demo", b.task_id));
        }
        if b.state_dim() != cfg.state_dim || b.action_dim() != cfg.action_dim {
            return invalid(format!(
                "task {} has |S|={}, |A|={} but the model expects |S|={}, |A|={}",
                b.task_id,
                b.state_dim(),
                b.action_dim(),
                cfg.state_dim,
                cfg.action_dim
            ));
        }
    }
    Ok(())
}

/// Samples one prompted row: rollout segment, demo trajectory, demo window, neighbors.
fn sample_row(bundle: &TaskBundle, cfg: &ModelConfig, scale: f64, row_seed: u64) -> Result<PromptedRow> {
    let mut rng = stream(row_seed, &[]);
    let ri = rng.random_range(0..bundle.rollouts.len());
    let (_, rollout) = sample_segment(ri, &bundle.rollouts[ri], cfg.context_len, &mut rng)?;
    let di = rng.random_range(0..bundle.demos.len());
    let demo = &bundle.demos[di];
    let w = sample_window(di, demo, cfg.demo_window(), &mut rng);
    let demo_seg = Segment::from_ref(demo, w, None);
    PromptedRow::build(cfg, cfg.k, rollout, Some(demo_seg), scale)
}

/// Samples `n · M` rows, each from its own `(seed, tags…, task, row)` substream.
pub fn sample_rows(
    bundles: &[TaskBundle],
    cfg: &ModelConfig,
    rows_per_task: usize,
    seed: u64,
    tags: &[u64],
) -> Result<Vec<PromptedRow>> {
    check_bundles(bundles, cfg)?;
    let scales: Vec<f64> = bundles.iter().map(|b| rtg_scale_for(b, cfg)).collect();
    let base = derive_seed(seed, tags);
    map_indexed(bundles.len() * rows_per_task, |i| {
        let (task, row) = (i / rows_per_task, i % rows_per_task);
        sample_row(&bundles[task], cfg, scales[task], derive_seed(base, &[task as u64, row as u64]))
    })
    .into_iter()
    .collect()
}

pub fn build_batch_from(
    bundles: &[TaskBundle],
    cfg: &ModelConfig,
    rows_per_task: usize,
    seed: u64,
    tags: &[u64],
) -> Result<PromptedBatch> {
    PromptedBatch::new(cfg, &sample_rows(bundles, cfg, rows_per_task, seed, tags)?)
}

/// The batch of training update `update`.
pub fn build_training_batch(
    bundles: &[TaskBundle],
    cfg: &ModelConfig,
    rows_per_task: usize,
    seed: u64,
    update: u64,
) -> Result<PromptedBatch> {
    build_batch_from(bundles, cfg, rows_per_task, seed, &[tag::BATCH, update])
}

/// A fixed batch independent of the update counter, for monitoring loss.
pub fn probe_batch(bundles: &[TaskBundle], cfg: &ModelConfig, rows_per_task: usize, seed: u64) -> Result<PromptedBatch> {
    build_batch_from(bundles, cfg, rows_per_task, seed, &[tag::PROBE])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReturn {
    pub task_id: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: u64,
    pub update: u64,
    pub loss: f64,
    pub eval: Vec<TaskReturn>,
}

/// Optional held-out evaluation run every `eval_every` epochs.
pub struct EvalHook<'a> {
    pub bundles: &'a [TaskBundle],
    pub config: EvalConfig,
}

/// Owns the parameters and optimizer for one training run.
pub struct Trainer<'a> {
    bundles: &'a [TaskBundle],
    pub model_config: ModelConfig,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub updates_done: u64,
}

impl<'a> Trainer<'a> {
    /// Starts a fresh run; an unset `rtg_scale` is resolved from `bundles`.
    pub fn new(bundles: &'a [TaskBundle], mut model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        if model_config.rtg_scale.is_none() {
            model_config.rtg_scale = Some(data_rtg_scale(bundles));
        }
        model_config.validate()?;
        config.validate()?;
        check_bundles(bundles, &model_config)?;
        let params = ModelParams::init(&model_config, config.seed)?;
        let optimizer = AdamState::new(&params.store, config.adam());
        Ok(Self {
            bundles,
            model_config,
            config,
            params,
            optimizer,
            updates_done: 0,
        })
    }

    /// Continues a run from a checkpoint that carries optimizer and train state.
    pub fn from_checkpoint(bundles: &'a [TaskBundle], ckpt: ModelCheckpoint) -> Result<Self> {
        let state = ckpt
            .train_state
            .ok_or_else(|| HpdtError::Checkpoint("checkpoint has no training state to resume from".into()))?;
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| HpdtError::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        check_bundles(bundles, &ckpt.config)?;
        Ok(Self {
            bundles,
            model_config: ckpt.config,
            config: state.config,
            params: ckpt.params,
            optimizer,
            updates_done: state.updates_done,
        })
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let update = self.updates_done;
        let seed = self.config.seed;
        let batch = build_training_batch(self.bundles, &self.model_config, self.config.batch_per_task, seed, update)?;
        let mut dropout_rng = stream(seed, &[tag::DROPOUT, update]);
        let mut tape = Tape::new();
        let loss = action_loss(&mut tape, &self.params, &self.model_config, &batch, Some(&mut dropout_rng))?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            let snapshot = self.write_snapshot(update, value)?;
            return Err(HpdtError::NonFiniteLoss {
                update,
                batch_seed: derive_seed(seed, &[tag::BATCH, update]),
                snapshot: snapshot.display().to_string(),
            });
        }
        self.params.store.zero_grads();
        tape.backward(loss, &mut self.params.store)?;
        if let Some(c) = self.config.grad_clip {
            clip_grad_norm(&mut self.params.store, c);
        }
        self.optimizer.step(&mut self.params.store, self.config.lr)?;
        self.updates_done += 1;
        Ok(value)
    }

    fn write_snapshot(&self, update: u64, loss: f64) -> Result<PathBuf> {
        let dir = self
            .config
            .checkpoint_dir
            .clone()
            .unwrap_or_else(std::env::temp_dir);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("nonfinite_update_{update}.json"));
        let report = serde_json::json!({
            "update": update,
            "loss": loss.to_string(),
            "seed": self.config.seed,
            "batch_seed": derive_seed(self.config.seed, &[tag::BATCH, update]),
            "grad_norm": self.params.store.grad_norm(),
            "model_config": self.model_config,
            "version": crate::version_string(),
        });
        std::fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
        let ckpt_path = dir.join(format!("nonfinite_update_{update}.ckpt"));
        self.checkpoint().save(&ckpt_path)?;
        Ok(path)
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            config: self.model_config.clone(),
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            train_state: Some(TrainState {
                config: self.config.clone(),
                updates_done: self.updates_done,
            }),
            metadata: serde_json::json!({ "version": crate::version_string() }),
        }
    }

    /// Runs until `config.total_updates()`, evaluating and checkpointing on schedule.
    pub fn run(&mut self, eval: Option<&EvalHook<'_>>) -> Result<Vec<MetricsRow>> {
        let total = self.config.total_updates();
        let upe = self.config.updates_per_epoch;
        let mut history = Vec::with_capacity(total.saturating_sub(self.updates_done) as usize);
        while self.updates_done < total {
            let update = self.updates_done;
            let loss = self.step()?;
            let epoch = update / upe;
            let mut row = MetricsRow {
                epoch,
                update,
                loss,
                eval: Vec::new(),
            };
            let epoch_end = (update + 1).is_multiple_of(upe);
            let every = self.config.eval_every;
            if epoch_end && every > 0 && (epoch + 1).is_multiple_of(every) {
                if let Some(hook) = eval {
                    row.eval = self.evaluate(hook)?;
                }
                if let Some(dir) = &self.config.checkpoint_dir {
                    self.checkpoint().save(&dir.join(format!("epoch_{:05}.ckpt", epoch + 1)))?;
                }
            }
            history.push(row);
        }
        if let Some(dir) = &self.config.checkpoint_dir {
            self.checkpoint().save(&dir.join("final.ckpt"))?;
        }
        Ok(history)
    }

    fn evaluate(&self, hook: &EvalHook<'_>) -> Result<Vec<TaskReturn>> {
        hook.bundles
            .iter()
            .map(|b| {
                let r = evaluate_task(&b.env_spec, b, &self.params, &self.model_config, &hook.config)?;
                Ok(TaskReturn {
                    task_id: b.task_id.clone(),
                    mean: r.mean_return,
                    std: r.std_return,
                })
            })
            .collect()
    }

    /// Loss of `batch` under the current parameters, without dropout.
    pub fn eval_loss(&self, batch: &PromptedBatch) -> Result<f64> {
        loss_value(&self.params, &self.model_config, batch)
    }
}

pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<MetricsRow>,
}

/// Trains from scratch for `config.total_updates()` steps.
pub fn train(
    bundles: &[TaskBundle],
    model_config: &ModelConfig,
    config: &TrainConfig,
    eval: Option<&EvalHook<'_>>,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(bundles, model_config.clone(), config.clone())?;
    let history = t.run(eval)?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        history,
    })
}

/// Writes `epoch,update,loss[,mean_return_<task>,std_return_<task>…]`.
pub fn write_metrics_csv(history: &[MetricsRow], path: &Path) -> Result<()> {
    let mut tasks: Vec<String> = Vec::new();
    for row in history {
        for r in &row.eval {
            if !tasks.contains(&r.task_id) {
                tasks.push(r.task_id.clone());
            }
        }
    }
    let mut out = String::from("epoch,update,loss");
    for t in &tasks {
        out.push_str(&format!(",mean_return_{t},std_return_{t}"));
    }
    out.push('\n');
    for row in history {
        out.push_str(&format!("{},{},{}", row.epoch, row.update, row.loss));
        for t in &tasks {
            match row.eval.iter().find(|r| &r.task_id == t) {
                Some(r) => out.push_str(&format!(",{},{}", r.mean, r.std)),
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
