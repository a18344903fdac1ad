//! Experiment configuration files and canned experiment suites.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::TaskBundle;
use crate::envs::{collect_meta_dataset, expert_mean_return, CollectConfig, Family};
use crate::error::{invalid, HpdtError, Result};
use crate::evaluator::{demo_return_baseline, evaluate_task, mean_std, project_global_tokens, EvalConfig};
use crate::model::{Mode, ModelConfig, ModelParams};
use crate::rng::{derive_seed, tag};
use crate::trainer::{train, TrainConfig};

pub const SUITE_SEEDS: usize = 3;
pub const EXPERT_SKILL: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: CollectConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: CollectConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Task counts and training length at the scale of the original study.
    pub fn paper_scale(mut self) -> Self {
        self.data.n_train_tasks = 35;
        self.data.n_test_tasks = 5;
        self.train.epochs = 5000;
        self.eval.episodes_per_task = 50;
        self
    }

    /// Small model and short schedule that learn PointDir in a few CPU minutes.
    ///
    /// Two blocks, dropout and gradient clipping all matter here. Without them
    /// some initializations settle on copying the skill level from past
    /// actions and ignore the rtg tokens for thousands of updates.
    pub fn desk_scale(mut self) -> Self {
        self.data.episodes_per_task = 10;
        self.model.embed_dim = 32;
        self.model.n_layers = 2;
        self.model.n_heads = 2;
        self.model.context_len = 10;
        self.model.dropout = 0.1;
        self.train.epochs = 500;
        self.train.updates_per_epoch = 10;
        self.train.batch_per_task = 4;
        self.train.lr = 1e-3;
        self.train.grad_clip = Some(0.25);
        self.eval.episodes_per_task = 10;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            HpdtError::Json(j) => HpdtError::Format {
                path: path.to_path_buf(),
                line: j.line(),
                msg: j.to_string(),
            },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    PointDirAblation,
    PointVelAblation,
    Robustness,
    BaselineCompare,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::PointDirAblation,
        Suite::PointVelAblation,
        Suite::Robustness,
        Suite::BaselineCompare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::PointDirAblation => "pointdir-ablation",
            Suite::PointVelAblation => "pointvel-ablation",
            Suite::Robustness => "robustness",
            Suite::BaselineCompare => "baseline-compare",
        }
    }

    pub fn family(self) -> Family {
        match self {
            Suite::PointVelAblation => Family::PointVel,
            _ => Family::PointDir,
        }
    }

    pub fn modes(self) -> Vec<Mode> {
        match self {
            Suite::PointDirAblation | Suite::PointVelAblation => {
                vec![Mode::Full, Mode::WoG, Mode::WoA, Mode::WoT, Mode::PdtBaseline]
            }
            Suite::Robustness => vec![Mode::Full],
            Suite::BaselineCompare => vec![Mode::Full, Mode::PdtBaseline],
        }
    }

    /// Evaluation-time `(k, m′)` cells; `None` keeps the trained values.
    pub fn cells(self) -> Vec<(Option<usize>, Option<usize>)> {
        match self {
            Suite::Robustness => ROBUSTNESS_K
                .iter()
                .flat_map(|&k| ROBUSTNESS_M_PRIME.iter().map(move |&m| (Some(k), Some(m))))
                .collect(),
            _ => vec![(None, None)],
        }
    }
}

pub const ROBUSTNESS_K: [usize; 3] = [1, 3, 5];
pub const ROBUSTNESS_M_PRIME: [usize; 2] = [10, 25];

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Suite {
    type Err = HpdtError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| HpdtError::InvalidArgument(format!("unknown suite {s:?}")))
    }
}

/// Seeds of repetition `rep` derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub data: u64,
    pub train: u64,
    pub eval: u64,
}

pub fn run_seeds(master: u64, rep: usize) -> RunSeeds {
    RunSeeds {
        data: derive_seed(master, &[tag::DATA, rep as u64]),
        train: derive_seed(master, &[tag::INIT, rep as u64]),
        eval: derive_seed(master, &[tag::EVAL, rep as u64]),
    }
}

/// One trained model evaluated in one `(k, m′)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub family: Family,
    pub mode: Mode,
    pub rep: usize,
    pub seed: u64,
    pub k: usize,
    pub demo_len: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub expert_return: f64,
    pub demo_return: f64,
    pub final_loss: f64,
    /// Silhouette of projected global tokens on held-out tasks, when the mode has them.
    pub silhouette: Option<f64>,
}

/// Held-out data plus the expert reference for one repetition.
pub struct RepData {
    pub train: Vec<TaskBundle>,
    pub test: Vec<TaskBundle>,
    pub expert_return: f64,
    pub demo_return: f64,
}

pub fn prepare_rep(exp: &ExperimentConfig, family: Family, rep: usize) -> Result<RepData> {
    let seeds = run_seeds(exp.seed, rep);
    let data_cfg = CollectConfig {
        family,
        ..exp.data.clone()
    };
    let (train, test) = collect_meta_dataset(&data_cfg, seeds.data)?;
    let mut expert = 0.0;
    let mut demo = 0.0;
    for (i, b) in test.iter().enumerate() {
        expert += expert_mean_return(
            &b.env_spec,
            EXPERT_SKILL,
            exp.eval.episodes_per_task,
            derive_seed(seeds.eval, &[tag::PROBE, i as u64]),
        )?;
        demo += demo_return_baseline(b)?;
    }
    let n = test.len() as f64;
    Ok(RepData {
        train,
        test,
        expert_return: expert / n,
        demo_return: demo / n,
    })
}

/// Mean held-out return over the test tasks.
pub fn held_out_return(
    test: &[TaskBundle],
    params: &ModelParams,
    cfg: &ModelConfig,
    eval: &EvalConfig,
) -> Result<(f64, f64)> {
    let mut means = Vec::with_capacity(test.len());
    let mut stds = Vec::with_capacity(test.len());
    for b in test {
        let r = evaluate_task(&b.env_spec, b, params, cfg, eval)?;
        means.push(r.mean_return);
        stds.push(r.std_return);
    }
    Ok((mean_std(&means).0, mean_std(&stds).0))
}

/// Trains `mode` on one repetition and evaluates it in every requested cell.
pub fn run_mode(
    exp: &ExperimentConfig,
    family: Family,
    mode: Mode,
    rep: usize,
    data: &RepData,
    cells: &[(Option<usize>, Option<usize>)],
) -> Result<Vec<RunRecord>> {
    let seeds = run_seeds(exp.seed, rep);
    let model_cfg = ModelConfig {
        mode,
        ..exp.model.clone()
    };
    let train_cfg = TrainConfig {
        seed: seeds.train,
        checkpoint_dir: None,
        ..exp.train.clone()
    };
    let outcome = train(&data.train, &model_cfg, &train_cfg, None)?;
    let ckpt = outcome.checkpoint;
    let final_loss = outcome.history.last().map_or(f64::NAN, |r| r.loss);
    let silhouette = if mode.uses_global() {
        Some(project_global_tokens(&data.test, &ckpt.params, &ckpt.config)?.silhouette)
    } else {
        None
    };
    let mut out = Vec::with_capacity(cells.len());
    for &(k, demo_len) in cells {
        let eval = EvalConfig {
            seed: seeds.eval,
            k,
            demo_len,
            record_trace: false,
            ..exp.eval.clone()
        };
        let eff = crate::evaluator::effective_config(&ckpt.config, &eval)?;
        let (mean_return, std_return) = held_out_return(&data.test, &ckpt.params, &ckpt.config, &eval)?;
        out.push(RunRecord {
            family,
            mode,
            rep,
            seed: seeds.train,
            k: eff.k,
            demo_len: eff.demo_len,
            mean_return,
            std_return,
            expert_return: data.expert_return,
            demo_return: data.demo_return,
            final_loss,
            silhouette,
        });
    }
    Ok(out)
}

/// Runs every mode and cell of `suite` over [`SUITE_SEEDS`] repetitions.
pub fn run_suite(exp: &ExperimentConfig, suite: Suite, mut progress: impl FnMut(&RunRecord)) -> Result<Vec<RunRecord>> {
    exp.validate()?;
    let cells = suite.cells();
    let mut records = Vec::new();
    for rep in 0..SUITE_SEEDS {
        let data = prepare_rep(exp, suite.family(), rep)?;
        for mode in suite.modes() {
            for r in run_mode(exp, suite.family(), mode, rep, &data, &cells)? {
                progress(&r);
                records.push(r);
            }
        }
    }
    Ok(records)
}

pub const RUNS_HEADER: &str =
    "family,mode,rep,seed,k,m_prime,mean_return,std_return,expert_return,demo_return,final_loss,silhouette";

pub fn format_runs(records: &[RunRecord]) -> String {
    let mut out = String::from(RUNS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.family,
            r.mode,
            r.rep,
            r.seed,
            r.k,
            r.demo_len,
            r.mean_return,
            r.std_return,
            r.expert_return,
            r.demo_return,
            r.final_loss,
            r.silhouette.map_or(String::new(), |s| s.to_string())
        );
    }
    out
}

/// Seed-averaged return per `(mode, k, m′)` group.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub mode: Mode,
    pub k: usize,
    pub demo_len: usize,
    pub seeds: usize,
    pub mean_return: f64,
    pub std_over_seeds: f64,
    pub expert_return: f64,
    pub ratio_to_expert: f64,
}

pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Mode, usize, usize)> = Vec::new();
    for r in records {
        let key = (r.mode, r.k, r.demo_len);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(mode, k, demo_len)| {
            let group: Vec<&RunRecord> = records
                .iter()
                .filter(|r| (r.mode, r.k, r.demo_len) == (mode, k, demo_len))
                .collect();
            let returns: Vec<f64> = group.iter().map(|r| r.mean_return).collect();
            let experts: Vec<f64> = group.iter().map(|r| r.expert_return).collect();
            let (mean_return, std_over_seeds) = mean_std(&returns);
            let expert_return = mean_std(&experts).0;
            SummaryRow {
                mode,
                k,
                demo_len,
                seeds: group.len(),
                mean_return,
                std_over_seeds,
                expert_return,
                ratio_to_expert: mean_return / expert_return,
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "mode,k,m_prime,seeds,mean_return,std_over_seeds,expert_return,ratio_to_expert";

pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.mode, r.k, r.demo_len, r.seeds, r.mean_return, r.std_over_seeds, r.expert_return, r.ratio_to_expert
        );
    }
    out
}

/// Seed-averaged mean return of `mode` in a summary; errors when absent.
pub fn mode_mean(rows: &[SummaryRow], mode: Mode) -> Result<f64> {
    rows.iter()
        .find(|r| r.mode == mode)
        .map(|r| r.mean_return)
        .ok_or_else(|| HpdtError::InvalidArgument(format!("no summary row for mode {mode}")))
}

/// Checks the suite-level structural expectations of a record set.
pub fn check_suite_coverage(suite: Suite, records: &[RunRecord]) -> Result<()> {
    let expected = suite.modes().len() * suite.cells().len() * SUITE_SEEDS;
    if records.len() != expected {
        return invalid(format!("suite {suite} produced {} records, expected {expected}", records.len()));
    }
    Ok(())
}
