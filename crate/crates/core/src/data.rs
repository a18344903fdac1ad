//! Trajectories, task bundles, segment sampling and the JSON-lines dataset format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{invalid, HpdtError, Result};
use crate::rng::Rng;

/// Lower bound applied to per-dimension state standard deviations.
pub const STD_FLOOR: f64 = 1e-6;
pub const DATASET_FORMAT: &str = "hpdt-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Undiscounted suffix sums: `rtg[t] = Σ_{u ≥ t} rewards[u]`.
pub fn compute_rtg(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return invalid("compute_rtg on an empty reward series");
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    Ok(out)
}

/// One episode of one task. States and actions are stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task_id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub rtg: Vec<f64>,
    pub times: Vec<u32>,
}

impl Trajectory {
    /// Builds a trajectory, deriving `rtg` and `times` from the rewards.
    pub fn new(
        task_id: impl Into<String>,
        state_dim: usize,
        action_dim: usize,
        states: Vec<f64>,
        actions: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let rtg = compute_rtg(&rewards)?;
        let times = (0..rewards.len() as u32).collect();
        let t = Self {
            task_id: task_id.into(),
            state_dim,
            action_dim,
            states,
            actions,
            rewards,
            rtg,
            times,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rewards.len();
        if n == 0 {
            return invalid("trajectory is empty");
        }
        if self.state_dim == 0 || self.action_dim == 0 {
            return invalid("state and action dimensions must be positive");
        }
        if self.states.len() != n * self.state_dim
            || self.actions.len() != n * self.action_dim
            || self.rtg.len() != n
            || self.times.len() != n
        {
            return invalid(format!("trajectory {:?}: series lengths disagree", self.task_id));
        }
        if self.times.iter().enumerate().any(|(i, &t)| t as usize != i) {
            return invalid("trajectory times must be 0..T-1");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Offline data of one task: rollout set `O` and demonstration set `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBundle {
    pub task_id: String,
    pub env_spec: EnvSpec,
    pub rollouts: Vec<Trajectory>,
    pub demos: Vec<Trajectory>,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub normalized: bool,
}

impl TaskBundle {
    pub fn new(task_id: impl Into<String>, env_spec: EnvSpec, rollouts: Vec<Trajectory>, demos: Vec<Trajectory>) -> Result<Self> {
        let Some(first) = demos.first() else {
            return invalid("a task bundle needs at least one demonstration");
        };
        let sd = first.state_dim;
        let ad = first.action_dim;
        if rollouts.iter().chain(&demos).any(|t| t.state_dim != sd || t.action_dim != ad) {
            return invalid("trajectories in a bundle must share dimensions");
        }
        Ok(Self {
            task_id: task_id.into(),
            env_spec,
            rollouts,
            demos,
            norm_mean: vec![0.0; sd],
            norm_std: vec![1.0; sd],
            normalized: false,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.demos[0].state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.demos[0].action_dim
    }

    /// Applies the stored statistics to a raw observation.
    pub fn normalize_state(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.norm_mean.iter().zip(&self.norm_std))
            .map(|(s, (m, d))| (s - m) / d)
            .collect()
    }
}

/// Per-dimension population mean and standard deviation (floored) over all demo states.
pub fn demo_state_statistics(demos: &[Trajectory]) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(first) = demos.first() else {
        return invalid("no demonstrations to compute statistics from");
    };
    let d = first.state_dim;
    let count: usize = demos.iter().map(|t| t.len()).sum();
    let mut mean = vec![0.0; d];
    for t in demos {
        for row in t.states.chunks_exact(d) {
            for (m, s) in mean.iter_mut().zip(row) {
                *m += s;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; d];
    for t in demos {
        for row in t.states.chunks_exact(d) {
            for ((v, s), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (s - m) * (s - m);
            }
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok((mean, std))
}

/// Standardizes all states of the bundle with statistics of its demonstrations only.
pub fn normalize_bundle(mut bundle: TaskBundle) -> Result<TaskBundle> {
    if bundle.normalized {
        return invalid(format!("bundle {:?} is already normalized", bundle.task_id));
    }
    let (mean, std) = demo_state_statistics(&bundle.demos)?;
    let d = mean.len();
    for t in bundle.demos.iter_mut().chain(bundle.rollouts.iter_mut()) {
        for row in t.states.chunks_exact_mut(d) {
            for ((s, m), sd) in row.iter_mut().zip(&mean).zip(&std) {
                *s = (*s - m) / sd;
            }
        }
    }
    bundle.norm_mean = mean;
    bundle.norm_std = std;
    bundle.normalized = true;
    Ok(bundle)
}

/// Location of a window inside a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentRef {
    pub traj: usize,
    pub start: usize,
    pub len: usize,
}

/// A materialized window, padded at the end to `mask.len()` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub state_dim: usize,
    pub action_dim: usize,
    pub rtg: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub times: Vec<u32>,
    /// 1 for real positions, 0 for padding.
    pub mask: Vec<f64>,
}

impl Segment {
    /// Copies `r` out of `traj`, zero-padding up to `pad_to` positions when given.
    pub fn from_ref(traj: &Trajectory, r: SegmentRef, pad_to: Option<usize>) -> Self {
        let total = pad_to.unwrap_or(r.len).max(r.len);
        let (sd, ad) = (traj.state_dim, traj.action_dim);
        let mut seg = Segment {
            state_dim: sd,
            action_dim: ad,
            rtg: vec![0.0; total],
            states: vec![0.0; total * sd],
            actions: vec![0.0; total * ad],
            times: vec![0; total],
            mask: vec![0.0; total],
        };
        for i in 0..r.len {
            let t = r.start + i;
            seg.rtg[i] = traj.rtg[t];
            seg.states[i * sd..(i + 1) * sd].copy_from_slice(traj.state(t));
            seg.actions[i * ad..(i + 1) * ad].copy_from_slice(traj.action(t));
            seg.times[i] = traj.times[t];
            seg.mask[i] = 1.0;
        }
        seg
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Number of unpadded positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }
}

/// Uniform window of length `min(len, T)`.
pub fn sample_window(traj_index: usize, traj: &Trajectory, len: usize, rng: &mut Rng) -> SegmentRef {
    let t = traj.len();
    let len = len.min(t);
    let start = rng.random_range(0..=t - len);
    SegmentRef {
        traj: traj_index,
        start,
        len,
    }
}

/// Samples a rollout segment of `m` positions; trajectories shorter than `m`
/// are used whole and padded with masked positions.
pub fn sample_segment(traj_index: usize, traj: &Trajectory, m: usize, rng: &mut Rng) -> Result<(SegmentRef, Segment)> {
    if m == 0 {
        return invalid("segment length must be at least 1");
    }
    let r = sample_window(traj_index, traj, m, rng);
    Ok((r, Segment::from_ref(traj, r, Some(m))))
}

// ---- dataset files ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleHeader {
    task_id: String,
    env_spec: EnvSpec,
    state_dim: usize,
    action_dim: usize,
    normalized: bool,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
    n_rollouts: usize,
    n_demos: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format: String,
    version: u32,
    generator: String,
    bundles: Vec<BundleHeader>,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TrajKind {
    Rollout,
    Demo,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajRecord {
    task_id: String,
    kind: TrajKind,
    index: usize,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    rtg: Vec<f64>,
}

fn to_record(t: &Trajectory, kind: TrajKind, index: usize) -> TrajRecord {
    TrajRecord {
        task_id: t.task_id.clone(),
        kind,
        index,
        states: t.states.chunks_exact(t.state_dim).map(<[f64]>::to_vec).collect(),
        actions: t.actions.chunks_exact(t.action_dim).map(<[f64]>::to_vec).collect(),
        rewards: t.rewards.clone(),
        rtg: t.rtg.clone(),
    }
}

/// Writes bundles as JSON lines: a header line, then one trajectory per line.
///
/// `metadata` is embedded verbatim in the header (resolved config, version).
pub fn save_dataset(bundles: &[TaskBundle], path: &Path, metadata: serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        generator: crate::version_string(),
        bundles: bundles
            .iter()
            .map(|b| BundleHeader {
                task_id: b.task_id.clone(),
                env_spec: b.env_spec.clone(),
                state_dim: b.state_dim(),
                action_dim: b.action_dim(),
                normalized: b.normalized,
                norm_mean: b.norm_mean.clone(),
                norm_std: b.norm_std.clone(),
                n_rollouts: b.rollouts.len(),
                n_demos: b.demos.len(),
            })
            .collect(),
        metadata,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for b in bundles {
        for (i, t) in b.rollouts.iter().enumerate() {
            serde_json::to_writer(&mut w, &to_record(t, TrajKind::Rollout, i))?;
            w.write_all(b"\n")?;
        }
        for (i, t) in b.demos.iter().enumerate() {
            serde_json::to_writer(&mut w, &to_record(t, TrajKind::Demo, i))?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]; returns the bundles and the header metadata.
pub fn load_dataset(path: &Path) -> Result<(Vec<TaskBundle>, serde_json::Value)> {
    let reader = BufReader::new(File::open(path)?);
    let fail = |line: usize, msg: String| HpdtError::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate();
    let header_line = match lines.next() {
        Some((_, l)) => l?,
        None => return Err(fail(1, "empty file, missing header".into())),
    };
    let probe: serde_json::Value = serde_json::from_str(&header_line).map_err(|e| fail(1, format!("bad header: {e}")))?;
    if probe.get("format").and_then(|v| v.as_str()) != Some(DATASET_FORMAT) {
        return Err(fail(1, "not an hpdt dataset (format tag missing)".into()));
    }
    let version = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != DATASET_VERSION {
        return Err(HpdtError::UnsupportedVersion {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let header: DatasetHeader = serde_json::from_value(probe).map_err(|e| fail(1, format!("bad header: {e}")))?;

    let mut bundles = Vec::with_capacity(header.bundles.len());
    let mut last_line = 1;
    for bh in &header.bundles {
        let mut rollouts = Vec::with_capacity(bh.n_rollouts);
        let mut demos = Vec::with_capacity(bh.n_demos);
        let expected = [(TrajKind::Rollout, bh.n_rollouts), (TrajKind::Demo, bh.n_demos)];
        for (kind, count) in expected {
            for index in 0..count {
                let (ln, line) = match lines.next() {
                    Some((i, l)) => (i + 1, l?),
                    None => {
                        return Err(fail(
                            last_line + 1,
                            format!("unexpected end of file: missing {kind:?} {index} of task {:?}", bh.task_id),
                        ))
                    }
                };
                last_line = ln;
                let rec: TrajRecord = serde_json::from_str(&line).map_err(|e| fail(ln, format!("malformed trajectory: {e}")))?;
                if rec.task_id != bh.task_id || rec.kind != kind || rec.index != index {
                    return Err(fail(
                        ln,
                        format!(
                            "expected {kind:?} {index} of task {:?}, found {:?} {} of task {:?}",
                            bh.task_id, rec.kind, rec.index, rec.task_id
                        ),
                    ));
                }
                let traj = from_record(rec, bh.state_dim, bh.action_dim).map_err(|e| fail(ln, e.to_string()))?;
                match kind {
                    TrajKind::Rollout => rollouts.push(traj),
                    TrajKind::Demo => demos.push(traj),
                }
            }
        }
        let mut b = TaskBundle::new(bh.task_id.clone(), bh.env_spec.clone(), rollouts, demos).map_err(|e| fail(last_line, e.to_string()))?;
        if bh.norm_mean.len() != bh.state_dim || bh.norm_std.len() != bh.state_dim {
            return Err(fail(1, format!("normalization statistics of {:?} have wrong width", bh.task_id)));
        }
        b.norm_mean = bh.norm_mean.clone();
        b.norm_std = bh.norm_std.clone();
        b.normalized = bh.normalized;
        bundles.push(b);
    }
    if let Some((i, l)) = lines.next() {
        let l = l?;
        if !l.trim().is_empty() {
            return Err(fail(i + 1, "trailing data after the last trajectory".into()));
        }
    }
    Ok((bundles, header.metadata))
}

fn from_record(rec: TrajRecord, sd: usize, ad: usize) -> Result<Trajectory> {
    let n = rec.rewards.len();
    if rec.states.len() != n || rec.actions.len() != n || rec.rtg.len() != n {
        return invalid("series lengths disagree");
    }
    if rec.states.iter().any(|s| s.len() != sd) || rec.actions.iter().any(|a| a.len() != ad) {
        return invalid(format!("expected state width {sd} and action width {ad}"));
    }
    let t = Trajectory {
        task_id: rec.task_id,
        state_dim: sd,
        action_dim: ad,
        states: rec.states.concat(),
        actions: rec.actions.concat(),
        rewards: rec.rewards,
        rtg: rec.rtg,
        times: (0..n as u32).collect(),
    };
    t.validate()?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvSpec, Task};
    use crate::rng::stream;

    fn traj(states: Vec<f64>, rewards: Vec<f64>) -> Trajectory {
        let n = rewards.len();
        let sd = states.len() / n;
        Trajectory::new("t", sd, 1, states, vec![0.5; n], rewards).unwrap()
    }

    fn spec() -> EnvSpec {
        EnvSpec::new(Task::Dir { angle: 0.0 })
    }

    #[test]
    fn rtg_examples() {
        assert_eq!(compute_rtg(&[1.0, 2.0, 3.0]).unwrap(), vec![6.0, 5.0, 3.0]);
        assert_eq!(compute_rtg(&[0.0, 0.0, 0.0]).unwrap(), vec![0.0; 3]);
        assert!(compute_rtg(&[]).is_err());
    }

    #[test]
    fn constant_demo_states_floor_std() {
        let demos = vec![traj(vec![2.5; 6], vec![1.0; 3]); 2];
        let b = TaskBundle::new("t", spec(), vec![], demos).unwrap();
        let b = normalize_bundle(b).unwrap();
        assert_eq!(b.norm_mean, vec![2.5, 2.5]);
        assert_eq!(b.norm_std, vec![STD_FLOOR, STD_FLOOR]);
        assert!(b.demos.iter().all(|t| t.states.iter().all(|&s| s == 0.0)));
        assert!(normalize_bundle(b).is_err());
    }

    #[test]
    fn standardized_demos_unchanged() {
        let demo = traj(vec![-1.0, 1.0, 1.0, -1.0], vec![0.0, 0.0]);
        let b = normalize_bundle(TaskBundle::new("t", spec(), vec![], vec![demo.clone()]).unwrap()).unwrap();
        assert_eq!(b.norm_mean, vec![0.0, 0.0]);
        assert_eq!(b.norm_std, vec![1.0, 1.0]);
        assert_eq!(b.demos[0].states, demo.states);
    }

    #[test]
    fn segment_padding_rule() {
        let t = traj((0..5).map(f64::from).collect(), vec![1.0; 5]);
        let mut rng = stream(0, &[]);
        let (r, seg) = sample_segment(0, &t, 20, &mut rng).unwrap();
        assert_eq!((r.start, r.len), (0, 5));
        assert_eq!(seg.len(), 20);
        assert_eq!(seg.real_len(), 5);
        assert!(seg.mask[5..].iter().all(|&m| m == 0.0));
        assert!(sample_segment(0, &t, 0, &mut rng).is_err());
    }

    #[test]
    fn full_length_segment_starts_at_zero() {
        let t = traj(vec![0.0; 20], vec![1.0; 20]);
        let mut rng = stream(1, &[]);
        for _ in 0..50 {
            assert_eq!(sample_segment(0, &t, 20, &mut rng).unwrap().0.start, 0);
        }
    }
}
