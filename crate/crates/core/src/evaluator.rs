//! Few-shot evaluation on held-out tasks and global-token projections.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{sample_window, Segment, TaskBundle};
use crate::envs::{clip_action, reset, step, EnvSpec};
use crate::error::{invalid, Result};
use crate::model::{predict, Mode, ModelConfig, ModelParams, PromptedBatch, PromptedRow};
use crate::parallel::map_indexed;
use crate::prompt::{encode_global_token, nearest_neighbors, query_key, RetrievalKeys};
use crate::rng::{hash_str, stream, tag, Rng};
use crate::trainer::rtg_scale_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes_per_task: usize,
    /// Overrides the per-task target (max demo return).
    pub target_rtg: Option<f64>,
    /// Caps episode length below the environment horizon.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Retrieval neighbor count override.
    pub k: Option<usize>,
    /// Demonstration segment length override.
    pub demo_len: Option<usize>,
    pub record_trace: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_task: 50,
            target_rtg: None,
            max_steps: None,
            seed: 0,
            k: None,
            demo_len: None,
            record_trace: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_task == 0 {
            return invalid("episodes_per_task must be at least 1");
        }
        if self.max_steps == Some(0) {
            return invalid("max_steps must be at least 1");
        }
        Ok(())
    }
}

/// The model config with evaluation overrides applied.
pub fn effective_config(cfg: &ModelConfig, eval: &EvalConfig) -> Result<ModelConfig> {
    let mut c = cfg.clone();
    if let Some(k) = eval.k {
        c.k = k;
    }
    if let Some(m) = eval.demo_len {
        c.demo_len = m;
    }
    c.validate()?;
    Ok(c)
}

/// Target return for a task: max over demos of the initial rtg.
pub fn default_target_rtg(bundle: &TaskBundle) -> f64 {
    bundle
        .demos
        .iter()
        .map(|d| d.rtg[0])
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Conditioning rtg fed to the model at this step.
    pub rtg: f64,
    /// Normalized state.
    pub state: Vec<f64>,
    pub action: [f64; 2],
    pub reward: f64,
    pub neighbors: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub ret: f64,
    pub length: usize,
    pub demo_index: usize,
    pub demo_segment: Segment,
    pub trace: Vec<StepRecord>,
}

/// One autoregressive rollout. `cfg` must already carry any evaluation overrides.
pub fn rollout_episode(
    spec: &EnvSpec,
    bundle: &TaskBundle,
    params: &ModelParams,
    cfg: &ModelConfig,
    eval: &EvalConfig,
    rng: &mut Rng,
) -> Result<EpisodeResult> {
    if bundle.demos.is_empty() {
        return invalid(format!("task {} has no demonstrations", bundle.task_id));
    }
    if bundle.state_dim() != cfg.state_dim || bundle.action_dim() != cfg.action_dim {
        return invalid(format!(
            "task {} has |S|={}, |A|={} but the model expects |S|={}, |A|={}",
            bundle.task_id,
            bundle.state_dim(),
            bundle.action_dim(),
            cfg.state_dim,
            cfg.action_dim
        ));
    }
    let di = rng.random_range(0..bundle.demos.len());
    let demo = &bundle.demos[di];
    let window = sample_window(di, demo, cfg.demo_window(), rng);
    let demo_seg = Segment::from_ref(demo, window, None);
    let target = eval.target_rtg.unwrap_or_else(|| default_target_rtg(bundle));
    let scale = rtg_scale_for(bundle, cfg);
    let keys = RetrievalKeys::new(&demo_seg, scale);
    let prompt = cfg.mode.uses_demo().then(|| demo_seg.clone());

    let horizon = eval.max_steps.map_or(spec.horizon, |m| m.min(spec.horizon));
    let (sd, ad) = (cfg.state_dim, cfg.action_dim);
    let mut env_state = reset(spec, rng);
    let mut rtg = Vec::with_capacity(horizon);
    let mut states = Vec::with_capacity(horizon * sd);
    let mut actions = Vec::with_capacity(horizon * ad);
    let mut neighbors: Vec<Vec<usize>> = Vec::with_capacity(horizon);
    let mut trace = Vec::new();
    let mut cumulative = 0.0;
    for t in 0..horizon {
        let r_hat = target - cumulative;
        let s = bundle.normalize_state(&env_state.observation());
        let nb = if cfg.mode.uses_adaptive() {
            nearest_neighbors(&keys, &query_key(r_hat, &s, scale), cfg.k)?
        } else {
            Vec::new()
        };
        rtg.push(r_hat);
        states.extend_from_slice(&s);
        actions.extend(std::iter::repeat_n(0.0, ad));
        neighbors.push(nb);

        let lo = (t + 1).saturating_sub(cfg.context_len);
        let w = t + 1 - lo;
        let seg = Segment {
            state_dim: sd,
            action_dim: ad,
            rtg: rtg[lo..].to_vec(),
            states: states[lo * sd..].to_vec(),
            actions: actions[lo * ad..].to_vec(),
            times: (lo..=t).map(|i| i as u32).collect(),
            mask: vec![1.0; w],
        };
        let row_neighbors = if cfg.mode.uses_adaptive() {
            neighbors[lo..].to_vec()
        } else {
            Vec::new()
        };
        let row = PromptedRow::with_neighbors(seg, prompt.clone(), row_neighbors);
        let batch = PromptedBatch::new(cfg, std::slice::from_ref(&row))?;
        let pred = predict(params, cfg, &batch)?;
        let out = pred.row(w - 1);
        let a = clip_action(spec, [out[0], out[1]]);
        actions[t * ad..(t + 1) * ad].copy_from_slice(&a);

        let (next, reward) = step(spec, &env_state, a, rng)?;
        cumulative += reward;
        if eval.record_trace {
            trace.push(StepRecord {
                t,
                rtg: r_hat,
                state: s,
                action: a,
                reward,
                neighbors: neighbors[t].clone(),
            });
        }
        env_state = next;
    }
    Ok(EpisodeResult {
        ret: cumulative,
        length: horizon,
        demo_index: di,
        demo_segment: demo_seg,
        trace,
    })
}

/// Seed stream of episode `e` of a task.
pub fn episode_rng(eval: &EvalConfig, task_id: &str, e: usize) -> Rng {
    stream(eval.seed, &[tag::EVAL, hash_str(task_id), e as u64])
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEvaluation {
    pub task_id: String,
    pub mean_return: f64,
    pub std_return: f64,
    pub returns: Vec<f64>,
    pub target_rtg: f64,
    pub episodes: Vec<EpisodeResult>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population std of returns over `episodes_per_task` seeded rollouts.
pub fn evaluate_task(
    spec: &EnvSpec,
    bundle: &TaskBundle,
    params: &ModelParams,
    cfg: &ModelConfig,
    eval: &EvalConfig,
) -> Result<TaskEvaluation> {
    eval.validate()?;
    let cfg = effective_config(cfg, eval)?;
    let episodes = map_indexed(eval.episodes_per_task, |e| {
        let mut rng = episode_rng(eval, &bundle.task_id, e);
        rollout_episode(spec, bundle, params, &cfg, eval, &mut rng)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let returns: Vec<f64> = episodes.iter().map(|e| e.ret).collect();
    let (mean_return, std_return) = mean_std(&returns);
    Ok(TaskEvaluation {
        task_id: bundle.task_id.clone(),
        mean_return,
        std_return,
        returns,
        target_rtg: eval.target_rtg.unwrap_or_else(|| default_target_rtg(bundle)),
        episodes: if eval.record_trace { episodes } else { Vec::new() },
    })
}

/// Mean demonstration return of a task.
pub fn demo_return_baseline(bundle: &TaskBundle) -> Result<f64> {
    if bundle.demos.is_empty() {
        return invalid(format!("task {} has no demonstrations", bundle.task_id));
    }
    Ok(bundle.demos.iter().map(|d| d.total_return()).sum::<f64>() / bundle.demos.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub task_id: String,
    pub mode: Mode,
    pub k: usize,
    pub demo_len: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub episodes: usize,
    pub demo_return: f64,
    pub target_rtg: f64,
}

pub const REPORT_HEADER: &str = "task_id,mode,k,m_prime,mean_return,std_return,episodes,demo_return,target_rtg";

/// Evaluates every task and appends an `aggregate` row (unweighted means).
pub fn evaluation_report(
    bundles: &[TaskBundle],
    params: &ModelParams,
    cfg: &ModelConfig,
    eval: &EvalConfig,
) -> Result<Vec<ReportRow>> {
    if bundles.is_empty() {
        return invalid("no evaluation tasks");
    }
    let eff = effective_config(cfg, eval)?;
    let mut rows = Vec::with_capacity(bundles.len() + 1);
    for b in bundles {
        let r = evaluate_task(&b.env_spec, b, params, cfg, eval)?;
        rows.push(ReportRow {
            task_id: b.task_id.clone(),
            mode: cfg.mode,
            k: eff.k,
            demo_len: eff.demo_len,
            mean_return: r.mean_return,
            std_return: r.std_return,
            episodes: eval.episodes_per_task,
            demo_return: demo_return_baseline(b)?,
            target_rtg: r.target_rtg,
        });
    }
    let n = rows.len() as f64;
    let avg = |f: fn(&ReportRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let aggregate = ReportRow {
        task_id: "aggregate".into(),
        mode: cfg.mode,
        k: eff.k,
        demo_len: eff.demo_len,
        mean_return: avg(|r| r.mean_return),
        std_return: avg(|r| r.std_return),
        episodes: eval.episodes_per_task,
        demo_return: avg(|r| r.demo_return),
        target_rtg: avg(|r| r.target_rtg),
    };
    rows.push(aggregate);
    Ok(rows)
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.task_id, r.mode, r.k, r.demo_len, r.mean_return, r.std_return, r.episodes, r.demo_return, r.target_rtg
        );
    }
    out
}

/// Top-two principal components by power iteration with deflation.
///
/// Returns the projected points and the numerical rank (0, 1 or 2) of the centered matrix.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, usize)> {
    let Some(first) = rows.first() else {
        return invalid("no points to project");
    };
    let d = first.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return invalid("points must share a nonzero dimension");
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j] / n;
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let tiny = 1e-12 * trace.max(f64::MIN_POSITIVE);
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2.min(d) {
        let Some(v) = top_eigenvector(&cov, d, tiny) else {
            break;
        };
        let lambda = rayleigh(&cov, d, &v);
        if lambda <= tiny {
            break;
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        comps.push(v);
    }
    let rank = comps.len();
    let points = centered
        .iter()
        .map(|r| {
            let mut p = [0.0; 2];
            for (c, v) in comps.iter().enumerate() {
                p[c] = r.iter().zip(v).map(|(a, b)| a * b).sum();
            }
            p
        })
        .collect();
    Ok((points, rank))
}

fn rayleigh(a: &[f64], d: usize, v: &[f64]) -> f64 {
    (0..d)
        .map(|i| v[i] * (0..d).map(|j| a[i * d + j] * v[j]).sum::<f64>())
        .sum()
}

fn top_eigenvector(a: &[f64], d: usize, tiny: f64) -> Option<Vec<f64>> {
    // Start from the largest column, which lies in the range of `a`.
    let col_norm = |j: usize| (0..d).map(|i| a[i * d + j] * a[i * d + j]).sum::<f64>();
    let best = (0..d).max_by(|&x, &y| col_norm(x).total_cmp(&col_norm(y)))?;
    if col_norm(best).sqrt() <= tiny {
        return None;
    }
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        n
    };
    let mut v: Vec<f64> = (0..d).map(|i| a[i * d + best]).collect();
    normalize(&mut v);
    for _ in 0..100_000 {
        let mut w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| a[i * d + j] * v[j]).sum()).collect();
        if normalize(&mut w) <= tiny {
            return None;
        }
        let delta = v.iter().zip(&w).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        v = w;
        if delta < 1e-10 {
            break;
        }
    }
    Some(v)
}

/// Mean silhouette coefficient of labelled 2D points; singleton clusters score 0.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return invalid("silhouette needs one label per point");
    }
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    if labels.iter().collect::<std::collections::BTreeSet<_>>().len() < 2 {
        return invalid("silhouette needs at least two clusters");
    }
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for (i, &p) in points.iter().enumerate() {
        let mut sums = vec![0.0; n_labels];
        let mut counts = vec![0usize; n_labels];
        for (j, &q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist(p, q);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..n_labels)
            .filter(|&l| l != own && counts[l] > 0)
            .map(|l| sums[l] / counts[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub task_id: String,
    pub segment_index: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenProjection {
    pub points: Vec<ProjectedPoint>,
    pub rank: usize,
    pub silhouette: f64,
}

/// Global tokens of non-overlapping demo windows of length `m′` (rtg in token units), projected to 2D.
pub fn project_global_tokens(bundles: &[TaskBundle], params: &ModelParams, cfg: &ModelConfig) -> Result<TokenProjection> {
    let enc = params
        .global
        .ok_or_else(|| crate::error::HpdtError::InvalidArgument(format!("mode {} has no global token", cfg.mode)))?;
    if bundles.len() < 2 {
        return invalid("projection needs at least two tasks");
    }
    let mut tokens = Vec::new();
    let mut meta = Vec::new();
    for (ti, b) in bundles.iter().enumerate() {
        let mut idx = 0;
        for (di, demo) in b.demos.iter().enumerate() {
            let mut start = 0;
            while start + cfg.demo_len <= demo.len() {
                let r = crate::data::SegmentRef {
                    traj: di,
                    start,
                    len: cfg.demo_len,
                };
                let mut seg = Segment::from_ref(demo, r, None);
                seg.rtg.iter_mut().for_each(|v| *v /= cfg.rtg_divisor());
                tokens.push(encode_global_token(&seg, &params.store, &enc)?);
                meta.push((ti, idx));
                idx += 1;
                start += cfg.demo_len;
            }
        }
        if idx < 2 {
            return invalid(format!("task {} yields fewer than two demo segments", b.task_id));
        }
    }
    let (xy, rank) = pca_2d(&tokens)?;
    let labels: Vec<usize> = meta.iter().map(|m| m.0).collect();
    let silhouette = silhouette(&xy, &labels)?;
    let points = xy
        .iter()
        .zip(&meta)
        .map(|(p, &(ti, si))| ProjectedPoint {
            task_id: bundles[ti].task_id.clone(),
            segment_index: si,
            x: p[0],
            y: p[1],
        })
        .collect();
    Ok(TokenProjection { points, rank, silhouette })
}

/// Writes `task_id,segment_index,x,y`; a leading `#` row flags a rank-deficient matrix.
pub fn write_projection_csv(proj: &TokenProjection, path: &Path) -> Result<()> {
    let mut out = String::from("task_id,segment_index,x,y\n");
    if proj.rank < 2 {
        let _ = writeln!(out, "# warning: token matrix has rank {} < 2; missing components are zero", proj.rank);
    }
    for p in &proj.points {
        let _ = writeln!(out, "{},{},{},{}", p.task_id, p.segment_index, p.x, p.y);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn export_global_token_projection(
    bundles: &[TaskBundle],
    params: &ModelParams,
    cfg: &ModelConfig,
    path: &Path,
) -> Result<TokenProjection> {
    let proj = project_global_tokens(bundles, params, cfg)?;
    write_projection_csv(&proj, path)?;
    Ok(proj)
}
