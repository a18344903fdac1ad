//! Point-mass meta-environment families, scripted experts and offline data collection.
//!
//! Observation is `[px, py, vx, vy]`, actions are 2-D forces. One step:
//!
//! ```text
//! a' = clip(a, ±bound)
//! v' = (1 − drag) v + a' / mass · dt + ε,   ε ~ N(0, noise_std²)
//! p' = p + v' dt                             dt = 0.1
//! ```
//!
//! `PointDir`, `PointVel` and `PointGoal` share the dynamics (mass 1, drag 0.1)
//! and differ in reward; `PointDyn` shares its reward across tasks and varies
//! mass and drag.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{normalize_bundle, TaskBundle, Trajectory};
use crate::error::{invalid, HpdtError, Result};
use crate::parallel;
use crate::rng::{derive_seed, stream, tag, Rng};

pub const DT: f64 = 0.1;
pub const DEFAULT_MASS: f64 = 1.0;
pub const DEFAULT_DRAG: f64 = 0.1;
pub const ACTION_COST: f64 = 0.01;
pub const RESET_POSITION_STD: f64 = 0.1;
pub const EXPLORATION_STD: f64 = 0.3;
pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;
/// Range of target speeds used for `PointVel` task grids.
pub const VEL_RANGE: (f64, f64) = (0.1, 1.0);
pub const GOAL_RADIUS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    PointDir,
    PointVel,
    PointDyn,
    PointGoal,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::PointDir, Family::PointVel, Family::PointDyn, Family::PointGoal];

    pub fn name(self) -> &'static str {
        match self {
            Family::PointDir => "pointdir",
            Family::PointVel => "pointvel",
            Family::PointDyn => "pointdyn",
            Family::PointGoal => "pointgoal",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = HpdtError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s.to_ascii_lowercase().replace(['-', '_'], ""))
            .ok_or_else(|| HpdtError::InvalidArgument(format!("unknown env family {s:?}")))
    }
}

/// Family plus its task parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum Task {
    #[serde(rename = "pointdir")]
    Dir { angle: f64 },
    #[serde(rename = "pointvel")]
    Vel { target_speed: f64 },
    #[serde(rename = "pointdyn")]
    Dyn { mass: f64, drag: f64 },
    #[serde(rename = "pointgoal")]
    Goal { goal: [f64; 2] },
}

impl Task {
    pub fn family(&self) -> Family {
        match self {
            Task::Dir { .. } => Family::PointDir,
            Task::Vel { .. } => Family::PointVel,
            Task::Dyn { .. } => Family::PointDyn,
            Task::Goal { .. } => Family::PointGoal,
        }
    }

    /// `(mass, drag)` of the dynamics.
    pub fn dynamics(&self) -> (f64, f64) {
        match *self {
            Task::Dyn { mass, drag } => (mass, drag),
            _ => (DEFAULT_MASS, DEFAULT_DRAG),
        }
    }

    fn params(&self) -> Vec<f64> {
        match *self {
            Task::Dir { angle } => vec![angle.rem_euclid(2.0 * PI)],
            Task::Vel { target_speed } => vec![target_speed],
            Task::Dyn { mass, drag } => vec![mass, drag],
            Task::Goal { goal } => goal.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub task: Task,
    pub horizon: usize,
    pub action_bound: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl EnvSpec {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            horizon: 64,
            action_bound: 1.0,
            noise_std: 0.01,
            seed: 0,
        }
    }

    pub fn family(&self) -> Family {
        self.task.family()
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.action_bound.is_nan() || self.action_bound <= 0.0 || self.noise_std.is_nan() || self.noise_std < 0.0 {
            return invalid("horizon and action bound must be positive, noise non-negative");
        }
        match self.task {
            Task::Vel { target_speed } if !(0.0..=3.0).contains(&target_speed) => {
                invalid(format!("target speed {target_speed} outside [0, 3]"))
            }
            Task::Dyn { mass, drag } if mass.is_nan() || mass <= 0.0 || !(0.0..1.0).contains(&drag) => {
                invalid(format!("invalid dynamics mass={mass} drag={drag}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub step_count: usize,
}

impl EnvState {
    pub fn observation(&self) -> [f64; STATE_DIM] {
        [self.position[0], self.position[1], self.velocity[0], self.velocity[1]]
    }
}

pub fn reset(_spec: &EnvSpec, rng: &mut Rng) -> EnvState {
    let n = Normal::new(0.0, RESET_POSITION_STD).expect("valid std");
    EnvState {
        position: [n.sample(rng), n.sample(rng)],
        velocity: [0.0, 0.0],
        step_count: 0,
    }
}

fn norm2(v: [f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

pub fn clip_action(spec: &EnvSpec, action: [f64; 2]) -> [f64; 2] {
    let b = spec.action_bound;
    [action[0].clamp(-b, b), action[1].clamp(-b, b)]
}

/// Advances one step; returns the next state and the reward.
pub fn step(spec: &EnvSpec, state: &EnvState, action: [f64; 2], rng: &mut Rng) -> Result<(EnvState, f64)> {
    if state.step_count >= spec.horizon {
        return Err(HpdtError::Env(format!(
            "episode finished after {} steps",
            spec.horizon
        )));
    }
    if !action.iter().all(|a| a.is_finite()) {
        return Err(HpdtError::Env(format!("non-finite action {action:?}")));
    }
    let a = clip_action(spec, action);
    let (mass, drag) = spec.task.dynamics();
    let mut v = [0.0; 2];
    for i in 0..2 {
        let eps = if spec.noise_std > 0.0 {
            Normal::new(0.0, spec.noise_std).expect("valid std").sample(rng)
        } else {
            0.0
        };
        v[i] = (1.0 - drag) * state.velocity[i] + a[i] / mass * DT + eps;
    }
    let p = [state.position[0] + v[0] * DT, state.position[1] + v[1] * DT];
    let cost = ACTION_COST * (a[0] * a[0] + a[1] * a[1]);
    let reward = match spec.task {
        Task::Dir { angle } => v[0] * angle.cos() + v[1] * angle.sin() - cost,
        Task::Vel { target_speed } => -(norm2(v) - target_speed).abs() - cost,
        Task::Dyn { .. } => v[0] - cost,
        Task::Goal { goal } => -norm2([p[0] - goal[0], p[1] - goal[1]]) - cost,
    };
    Ok((
        EnvState {
            position: p,
            velocity: v,
            step_count: state.step_count + 1,
        },
        reward,
    ))
}

const VEL_GAIN: f64 = 5.0;
const GOAL_KP: f64 = 4.0;
const GOAL_KD: f64 = 3.0;

/// Noise-free proportional controller toward the task objective.
pub fn expert_command(spec: &EnvSpec, state: &EnvState) -> [f64; 2] {
    let v = state.velocity;
    match spec.task {
        Task::Dir { angle } => [angle.cos(), angle.sin()],
        Task::Vel { target_speed } => [
            target_speed + VEL_GAIN * (target_speed - v[0]),
            -VEL_GAIN * v[1],
        ],
        Task::Dyn { .. } => [spec.action_bound, -VEL_GAIN * v[1]],
        Task::Goal { goal } => {
            let p = state.position;
            [
                GOAL_KP * (goal[0] - p[0]) - GOAL_KD * v[0],
                GOAL_KP * (goal[1] - p[1]) - GOAL_KD * v[1],
            ]
        }
    }
}

/// `clip(skill · command + (1 − skill) · N(0, 0.3²))`.
pub fn scripted_expert(spec: &EnvSpec, state: &EnvState, skill: f64, rng: &mut Rng) -> [f64; 2] {
    let u = expert_command(spec, state);
    let noise = Normal::new(0.0, EXPLORATION_STD).expect("valid std");
    let explore = 1.0 - skill;
    let mut a = [0.0; 2];
    for i in 0..2 {
        let n = if explore > 0.0 { explore * noise.sample(rng) } else { 0.0 };
        a[i] = skill * u[i] + n;
    }
    clip_action(spec, a)
}

/// Runs one full-horizon episode with `policy`, recording raw observations.
pub fn run_episode<P>(spec: &EnvSpec, task_id: &str, rng: &mut Rng, mut policy: P) -> Result<Trajectory>
where
    P: FnMut(&EnvState, &mut Rng) -> [f64; 2],
{
    let mut state = reset(spec, rng);
    let mut states = Vec::with_capacity(spec.horizon * STATE_DIM);
    let mut actions = Vec::with_capacity(spec.horizon * ACTION_DIM);
    let mut rewards = Vec::with_capacity(spec.horizon);
    for _ in 0..spec.horizon {
        let a = clip_action(spec, policy(&state, rng));
        let (next, r) = step(spec, &state, a, rng)?;
        states.extend_from_slice(&state.observation());
        actions.extend_from_slice(&a);
        rewards.push(r);
        state = next;
    }
    Trajectory::new(task_id, STATE_DIM, ACTION_DIM, states, actions, rewards)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub family: Family,
    pub n_train_tasks: usize,
    pub n_test_tasks: usize,
    pub episodes_per_task: usize,
    pub demos_per_task: usize,
    pub skill_mix: Vec<f64>,
    pub horizon: usize,
    pub noise_std: f64,
    pub action_bound: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            family: Family::PointDir,
            n_train_tasks: 8,
            n_test_tasks: 2,
            episodes_per_task: 30,
            demos_per_task: 5,
            skill_mix: vec![0.4, 0.7, 1.0],
            horizon: 64,
            noise_std: 0.01,
            action_bound: 1.0,
        }
    }
}

impl CollectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train_tasks == 0 || self.n_test_tasks == 0 || self.episodes_per_task == 0 || self.demos_per_task == 0 {
            return invalid("task, episode and demo counts must be at least 1");
        }
        if self.skill_mix.is_empty() || self.skill_mix.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return invalid("skills must lie in (0, 1]");
        }
        if self.horizon < 2 {
            return invalid("horizon must be at least 2");
        }
        Ok(())
    }
}

fn unit_grid(n_train: usize, n_test: usize) -> (Vec<f64>, Vec<f64>) {
    let train: Vec<f64> = if n_train == 1 {
        vec![0.5]
    } else {
        (0..n_train).map(|i| i as f64 / (n_train - 1) as f64).collect()
    };
    let gaps = n_train.saturating_sub(1);
    let test = if gaps >= n_test {
        (0..n_test)
            .map(|j| {
                let g = ((j as f64 + 0.5) * gaps as f64 / n_test as f64).floor() as usize;
                (g as f64 + 0.5) / gaps as f64
            })
            .collect()
    } else {
        (0..n_test).map(|j| (j as f64 + 0.5) / n_test as f64).collect()
    };
    (train, test)
}

fn angle_grid(n_train: usize, n_test: usize) -> (Vec<f64>, Vec<f64>) {
    let spacing = 2.0 * PI / n_train as f64;
    let train = (0..n_train).map(|i| i as f64 * spacing).collect();
    let test = (0..n_test)
        .map(|j| spacing / 2.0 + 2.0 * PI * j as f64 / n_test as f64)
        .collect();
    (train, test)
}

/// Train and held-out task parameters for a family.
pub fn task_grid(family: Family, n_train: usize, n_test: usize) -> (Vec<Task>, Vec<Task>) {
    let lerp = |u: f64, lo: f64, hi: f64| lo + (hi - lo) * u;
    let map = |v: Vec<f64>, f: &dyn Fn(f64) -> Task| v.into_iter().map(f).collect::<Vec<_>>();
    match family {
        Family::PointDir => {
            let (a, b) = angle_grid(n_train, n_test);
            let f = |angle| Task::Dir { angle };
            (map(a, &f), map(b, &f))
        }
        Family::PointGoal => {
            let (a, b) = angle_grid(n_train, n_test);
            let f = |ang: f64| Task::Goal {
                goal: [GOAL_RADIUS * ang.cos(), GOAL_RADIUS * ang.sin()],
            };
            (map(a, &f), map(b, &f))
        }
        Family::PointVel => {
            let (a, b) = unit_grid(n_train, n_test);
            let f = |u| Task::Vel {
                target_speed: lerp(u, VEL_RANGE.0, VEL_RANGE.1),
            };
            (map(a, &f), map(b, &f))
        }
        Family::PointDyn => {
            let (a, b) = unit_grid(n_train, n_test);
            let f = |u| Task::Dyn {
                mass: lerp(u, 0.5, 2.0),
                drag: lerp(u, 0.3, 0.05),
            };
            (map(a, &f), map(b, &f))
        }
    }
}

fn params_close(a: &Task, b: &Task) -> bool {
    let (pa, pb) = (a.params(), b.params());
    pa.iter().zip(&pb).all(|(x, y)| {
        let d = (x - y).abs();
        match a {
            Task::Dir { .. } => d.min(2.0 * PI - d) < 1e-9,
            _ => d < 1e-9,
        }
    })
}

/// Errors if any held-out task repeats a training task's parameters.
pub fn check_disjoint(train: &[Task], test: &[Task]) -> Result<()> {
    for t in test {
        if let Some(o) = train.iter().find(|o| params_close(o, t)) {
            return invalid(format!("held-out task {t:?} overlaps training task {o:?}"));
        }
    }
    Ok(())
}

pub fn task_id(family: Family, split: &str, i: usize) -> String {
    format!("{}-{split}-{i:02}", family.name())
}

fn collect_task(cfg: &CollectConfig, task: Task, id: String, task_seed: u64, with_rollouts: bool) -> Result<TaskBundle> {
    let spec = EnvSpec {
        task,
        horizon: cfg.horizon,
        action_bound: cfg.action_bound,
        noise_std: cfg.noise_std,
        seed: task_seed,
    };
    spec.validate()?;
    let top = cfg.skill_mix.iter().copied().fold(f64::MIN, f64::max);
    let episode = |kind: u64, e: usize, skill: f64| {
        let mut rng = stream(task_seed, &[tag::EPISODE, kind, e as u64]);
        run_episode(&spec, &id, &mut rng, |s, r| scripted_expert(&spec, s, skill, r))
    };
    let rollouts = if with_rollouts {
        (0..cfg.episodes_per_task)
            .map(|e| episode(0, e, cfg.skill_mix[e % cfg.skill_mix.len()]))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let demos = (0..cfg.demos_per_task)
        .map(|e| episode(1, e, top))
        .collect::<Result<Vec<_>>>()?;
    normalize_bundle(TaskBundle::new(id.clone(), spec, rollouts, demos)?)
}

/// Generates train and held-out bundles. Held-out bundles carry demonstrations only.
pub fn collect_meta_dataset(cfg: &CollectConfig, seed: u64) -> Result<(Vec<TaskBundle>, Vec<TaskBundle>)> {
    cfg.validate()?;
    let (train_tasks, test_tasks) = task_grid(cfg.family, cfg.n_train_tasks, cfg.n_test_tasks);
    check_disjoint(&train_tasks, &test_tasks)?;
    let build = |split: &str, split_tag: u64, tasks: &[Task], with_rollouts: bool| {
        parallel::map_indexed(tasks.len(), |i| {
            let s = derive_seed(seed, &[tag::DATA, split_tag, i as u64]);
            collect_task(cfg, tasks[i], task_id(cfg.family, split, i), s, with_rollouts)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()
    };
    let train = build("train", 0, &train_tasks, true)?;
    let test = build("test", 1, &test_tasks, false)?;
    Ok((train, test))
}

/// Mean undiscounted return of `episodes` scripted-expert episodes at `skill`.
pub fn expert_mean_return(spec: &EnvSpec, skill: f64, episodes: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for e in 0..episodes {
        let mut rng = stream(seed, &[tag::EVAL, e as u64]);
        total += run_episode(spec, "expert", &mut rng, |s, r| scripted_expert(spec, s, skill, r))?.total_return();
    }
    Ok(total / episodes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(task: Task) -> EnvSpec {
        EnvSpec {
            noise_std: 0.0,
            ..EnvSpec::new(task)
        }
    }

    #[test]
    fn zero_action_is_a_fixed_point() {
        let spec = noiseless(Task::Goal { goal: [1.0, -2.0] });
        let s = EnvState {
            position: [0.3, 0.4],
            velocity: [0.0, 0.0],
            step_count: 3,
        };
        let (n, r) = step(&spec, &s, [0.0, 0.0], &mut stream(0, &[])).unwrap();
        assert_eq!(n.position, s.position);
        assert_eq!(n.velocity, s.velocity);
        assert_eq!(n.step_count, 4);
        assert_eq!(r, -norm2([0.3 - 1.0, 0.4 + 2.0]));
    }

    #[test]
    fn dir_reward_direct_formula() {
        let spec = noiseless(Task::Dir { angle: 0.0 });
        let s = EnvState {
            position: [0.0, 0.0],
            velocity: [1.0, 0.0],
            step_count: 0,
        };
        let (_, r) = step(&spec, &s, [0.0, 0.0], &mut stream(0, &[])).unwrap();
        assert!((r - 0.9).abs() < 1e-15);
    }

    #[test]
    fn finished_episode_errors() {
        let spec = noiseless(Task::Dir { angle: 0.0 });
        let s = EnvState {
            position: [0.0; 2],
            velocity: [0.0; 2],
            step_count: spec.horizon,
        };
        assert!(step(&spec, &s, [0.0, 0.0], &mut stream(0, &[])).is_err());
    }

    #[test]
    fn reset_is_deterministic_with_zero_velocity() {
        let spec = EnvSpec::new(Task::Dir { angle: 1.0 });
        let a = reset(&spec, &mut stream(5, &[]));
        let b = reset(&spec, &mut stream(5, &[]));
        assert_eq!(a, b);
        assert_eq!(a.velocity, [0.0, 0.0]);
        assert_eq!(a.step_count, 0);
    }

    #[test]
    fn expert_brakes_at_goal() {
        let spec = noiseless(Task::Goal { goal: [0.5, 0.5] });
        let s = EnvState {
            position: [0.5, 0.5],
            velocity: [0.0, 0.0],
            step_count: 0,
        };
        let a = scripted_expert(&spec, &s, 1.0, &mut stream(0, &[]));
        assert!(a[0].abs() < 1e-12 && a[1].abs() < 1e-12);
    }

    #[test]
    fn dir_grid_is_offset_by_half_spacing() {
        let (train, test) = task_grid(Family::PointDir, 8, 2);
        assert_eq!(train.len(), 8);
        let angles = |ts: &[Task]| {
            ts.iter()
                .map(|t| match t {
                    Task::Dir { angle } => *angle,
                    _ => unreachable!(),
                })
                .collect::<Vec<_>>()
        };
        let (a, b) = (angles(&train), angles(&test));
        for w in a.windows(2) {
            assert!((w[1] - w[0] - PI / 4.0).abs() < 1e-12);
        }
        for t in b {
            let gap = a
                .iter()
                .map(|x| {
                    let d = (x - t).rem_euclid(2.0 * PI);
                    d.min(2.0 * PI - d)
                })
                .fold(f64::MAX, f64::min);
            assert!((gap - PI / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn overlapping_grids_are_rejected() {
        let cfg = CollectConfig {
            n_train_tasks: 1,
            n_test_tasks: 2,
            ..CollectConfig::default()
        };
        assert!(collect_meta_dataset(&cfg, 0).is_err());
    }

    #[test]
    fn family_round_trips_through_strings() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert_eq!("point-dir".parse::<Family>().unwrap(), Family::PointDir);
    }
}
