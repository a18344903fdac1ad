//! The causal transformer policy and its prompt-dependent input constructions.
//!
//! Token layout of one row (full mode, `m` timesteps):
//!
//! ```text
//! [g, r̂₀+r̂*₀, s₀+s*₀, a₀+a*₀, …, r̂ₘ₋₁+r̂*ₘ₋₁, sₘ₋₁+s*ₘ₋₁, aₘ₋₁+a*ₘ₋₁]
//! ```
//!
//! Every modality has its own projection to width `h`; the time embedding of
//! step `t` is added to all three tokens of that step and never to the global
//! token. The action for step `t` is read from the hidden state at the `s_t`
//! position, so it depends only on tokens up to and including `s_t`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::data::Segment;
use crate::error::{invalid, shape_err, HpdtError, Result};
use crate::prompt::{
    gather_neighbor_tuples, global_tokens_on_tape, segment_neighbors, template_on_tape, time2vec_on_tape, transition_tuples,
    transition_width, tuple_width, AdaptiveEncoder, GlobalTokenEncoder, Time2VecParams,
};
use crate::rng::{stream, tag, Rng};
use crate::tensor::NdTensor;

pub const INIT_STD: f64 = 0.02;
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "full")]
    Full,
    /// No global token.
    #[serde(rename = "wo_g")]
    WoG,
    /// No adaptive tokens.
    #[serde(rename = "wo_a")]
    WoA,
    /// Lookup-table time embedding instead of Time2Vec.
    #[serde(rename = "wo_t")]
    WoT,
    /// Neither global nor adaptive tokens: a plain decision transformer.
    #[serde(rename = "wo_ga")]
    WoGA,
    /// Static demonstration segment prepended to the rollout.
    #[serde(rename = "pdt_baseline")]
    PdtBaseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeEmbedding {
    Time2Vec,
    Lookup,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Full, Mode::WoG, Mode::WoA, Mode::WoT, Mode::WoGA, Mode::PdtBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::WoG => "wo_g",
            Mode::WoA => "wo_a",
            Mode::WoT => "wo_t",
            Mode::WoGA => "wo_ga",
            Mode::PdtBaseline => "pdt_baseline",
        }
    }

    pub fn uses_global(self) -> bool {
        matches!(self, Mode::Full | Mode::WoA | Mode::WoT)
    }

    pub fn uses_adaptive(self) -> bool {
        matches!(self, Mode::Full | Mode::WoG | Mode::WoT)
    }

    pub fn static_prompt(self) -> bool {
        self == Mode::PdtBaseline
    }

    pub fn uses_demo(self) -> bool {
        self.uses_global() || self.uses_adaptive() || self.static_prompt()
    }

    pub fn time_embedding(self) -> TimeEmbedding {
        match self {
            Mode::WoT | Mode::PdtBaseline => TimeEmbedding::Lookup,
            _ => TimeEmbedding::Time2Vec,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = HpdtError;

    /// Accepts `full`, `wo-g`/`wo_g`, `wo-a`, `wo-t`, `wo-ga`, `pdt`/`pdt_baseline`.
    fn from_str(s: &str) -> Result<Self> {
        let k = s.to_ascii_lowercase().replace('-', "_");
        Ok(match k.as_str() {
            "full" => Mode::Full,
            "wo_g" => Mode::WoG,
            "wo_a" => Mode::WoA,
            "wo_t" => Mode::WoT,
            "wo_ga" => Mode::WoGA,
            "pdt" | "pdt_baseline" => Mode::PdtBaseline,
            _ => return invalid(format!("unknown mode {s:?}")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Rollout segment length `m`.
    pub context_len: usize,
    pub dropout: f64,
    pub mode: Mode,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Width of the global token before projection.
    pub global_dim: usize,
    /// Demonstration segment length `m′`.
    pub demo_len: usize,
    pub k: usize,
    /// Largest time step; Time2Vec scales by it and the lookup table has `max_timestep + 1` rows.
    pub max_timestep: usize,
    /// Compare raw rtg in retrieval instead of rtg divided by the task's demo rtg std.
    pub raw_rtg_distance: bool,
    /// Divisor applied to every rtg value in token space; `None` is resolved from training data.
    pub rtg_scale: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            n_layers: 3,
            n_heads: 1,
            context_len: 20,
            dropout: 0.1,
            mode: Mode::Full,
            state_dim: 4,
            action_dim: 2,
            global_dim: 7,
            demo_len: 10,
            k: 3,
            max_timestep: 64,
            raw_rtg_distance: false,
            rtg_scale: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_dim,
            self.n_layers,
            self.n_heads,
            self.context_len,
            self.state_dim,
            self.action_dim,
            self.global_dim,
            self.demo_len,
            self.k,
            self.max_timestep,
        ];
        if dims.contains(&0) {
            return invalid("all model dimensions must be at least 1");
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return invalid(format!("embed_dim {} is not divisible by n_heads {}", self.embed_dim, self.n_heads));
        }
        if self.embed_dim < 2 {
            return invalid("embed_dim must be at least 2 (Time2Vec needs a periodic channel)");
        }
        if self.demo_len < 2 {
            return invalid("demo_len must be at least 2");
        }
        if self.mode.uses_adaptive() && self.k > self.demo_len {
            return invalid(format!("k = {} exceeds demo_len {}", self.k, self.demo_len));
        }
        if let Some(c) = self.rtg_scale {
            if !(c > 0.0 && c.is_finite()) {
                return invalid(format!("rtg_scale must be positive and finite, got {c}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn rtg_divisor(&self) -> f64 {
        self.rtg_scale.unwrap_or(1.0)
    }

    /// Demonstration window length sampled per row: `m′`, or `m′ + 1` steps for the static prompt.
    pub fn demo_window(&self) -> usize {
        if self.mode.static_prompt() {
            self.demo_len + 1
        } else {
            self.demo_len
        }
    }

    /// Tokens before the first rollout timestep.
    pub fn prefix_len(&self, prompt_steps: usize) -> usize {
        match self.mode {
            Mode::PdtBaseline => 3 * prompt_steps,
            m if m.uses_global() => 1,
            _ => 0,
        }
    }

    /// Longest sequence the model accepts.
    pub fn max_seq_len(&self) -> usize {
        self.prefix_len(self.demo_window()) + 3 * self.context_len
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNormParams,
    pub fc: Linear,
    pub proj: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeParams {
    Time2Vec(Time2VecParams),
    Table(ParamId),
}

/// All learnable tensors of a model and handles into them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub store: ParamStore,
    pub global: Option<GlobalTokenEncoder>,
    pub adaptive: Option<AdaptiveEncoder>,
    pub time: TimeParams,
    pub proj_global: Option<Linear>,
    pub proj_rtg: Linear,
    pub proj_state: Linear,
    pub proj_action: Linear,
    pub blocks: Vec<BlockParams>,
    pub ln_f: LayerNormParams,
    pub head: Linear,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Parameter names, shapes and initializers in store order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let h = cfg.embed_dim;
    let (s, a) = (cfg.state_dim, cfg.action_dim);
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let lin = |out: &mut Vec<_>, name: &str, i: usize, o: usize| {
        out.push((format!("{name}.weight"), vec![i, o], Init::Normal(INIT_STD)));
        out.push((format!("{name}.bias"), vec![o], Init::Zeros));
    };
    if cfg.mode.uses_global() {
        lin(&mut out, "global.h_g", transition_width(s, a), cfg.global_dim);
    }
    if cfg.mode.uses_adaptive() {
        let w = tuple_width(s, a);
        lin(&mut out, "adaptive.h_a", w, w);
    }
    match cfg.mode.time_embedding() {
        TimeEmbedding::Time2Vec => {
            out.push(("time.t2v.omega".into(), vec![h], Init::Normal(1.0)));
            out.push(("time.t2v.phi".into(), vec![h], Init::Normal(1.0)));
        }
        TimeEmbedding::Lookup => out.push(("time.table".into(), vec![cfg.max_timestep + 1, h], Init::Normal(INIT_STD))),
    }
    if cfg.mode.uses_global() {
        lin(&mut out, "proj.global", cfg.global_dim, h);
    }
    lin(&mut out, "proj.rtg", 1, h);
    lin(&mut out, "proj.state", s, h);
    lin(&mut out, "proj.action", a, h);
    let ln = |out: &mut Vec<(String, Vec<usize>, Init)>, name: String| {
        out.push((format!("{name}.gain"), vec![h], Init::Ones));
        out.push((format!("{name}.bias"), vec![h], Init::Zeros));
    };
    for b in 0..cfg.n_layers {
        ln(&mut out, format!("blocks.{b}.ln1"));
        for p in ["q", "k", "v", "o"] {
            lin(&mut out, &format!("blocks.{b}.attn.{p}"), h, h);
        }
        ln(&mut out, format!("blocks.{b}.ln2"));
        lin(&mut out, &format!("blocks.{b}.mlp.fc"), h, MLP_RATIO * h);
        lin(&mut out, &format!("blocks.{b}.mlp.proj"), MLP_RATIO * h, h);
    }
    ln(&mut out, "ln_f".into());
    lin(&mut out, "head", h, a);
    out
}

impl ModelParams {
    /// Fresh parameters drawn from the `(seed, INIT)` stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, &[tag::INIT]);
        let mut store = ParamStore::new();
        for (name, shape, init) in layout(cfg) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| d.sample(&mut rng)).collect()
                }
            };
            store.add(name, NdTensor::new(shape, data)?)?;
        }
        Self::bind(cfg, store)
    }

    /// Wires handles into an existing store, checking names and shapes against the config.
    pub fn bind(cfg: &ModelConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(cfg);
        if expected.len() != store.len() {
            let names: Vec<&str> = expected.iter().map(|e| e.0.as_str()).collect();
            let extra = store.iter().find(|p| !names.contains(&p.name.as_str()));
            let missing = expected.iter().find(|e| store.id_of(&e.0).is_none());
            return Err(HpdtError::Checkpoint(format!(
                "parameter set does not match the {} layout (expected {}, found {}; missing {:?}, unexpected {:?})",
                cfg.mode,
                expected.len(),
                store.len(),
                missing.map(|m| &m.0),
                extra.map(|p| &p.name)
            )));
        }
        for (name, shape, _) in &expected {
            let id = store
                .id_of(name)
                .ok_or_else(|| HpdtError::Checkpoint(format!("missing parameter {name}")))?;
            if store.get(id).value.shape() != shape.as_slice() {
                return Err(HpdtError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    store.get(id).value.shape()
                )));
            }
        }
        let id = |n: &str| store.id_of(n).expect("checked above");
        let lin = |n: &str| Linear {
            weight: id(&format!("{n}.weight")),
            bias: id(&format!("{n}.bias")),
        };
        let ln = |n: &str| LayerNormParams {
            gain: id(&format!("{n}.gain")),
            bias: id(&format!("{n}.bias")),
        };
        let global = cfg.mode.uses_global().then(|| {
            let l = lin("global.h_g");
            GlobalTokenEncoder {
                weight: l.weight,
                bias: l.bias,
            }
        });
        let adaptive = cfg.mode.uses_adaptive().then(|| {
            let l = lin("adaptive.h_a");
            AdaptiveEncoder {
                weight: l.weight,
                bias: l.bias,
                k: cfg.k,
            }
        });
        let time = match cfg.mode.time_embedding() {
            TimeEmbedding::Time2Vec => TimeParams::Time2Vec(Time2VecParams {
                omega: id("time.t2v.omega"),
                phi: id("time.t2v.phi"),
                t_max: cfg.max_timestep,
            }),
            TimeEmbedding::Lookup => TimeParams::Table(id("time.table")),
        };
        let blocks = (0..cfg.n_layers)
            .map(|b| BlockParams {
                ln1: ln(&format!("blocks.{b}.ln1")),
                q: lin(&format!("blocks.{b}.attn.q")),
                k: lin(&format!("blocks.{b}.attn.k")),
                v: lin(&format!("blocks.{b}.attn.v")),
                o: lin(&format!("blocks.{b}.attn.o")),
                ln2: ln(&format!("blocks.{b}.ln2")),
                fc: lin(&format!("blocks.{b}.mlp.fc")),
                proj: lin(&format!("blocks.{b}.mlp.proj")),
            })
            .collect();
        Ok(Self {
            global,
            adaptive,
            time,
            proj_global: cfg.mode.uses_global().then(|| lin("proj.global")),
            proj_rtg: lin("proj.rtg"),
            proj_state: lin("proj.state"),
            proj_action: lin("proj.action"),
            blocks,
            ln_f: ln("ln_f"),
            head: lin("head"),
            store,
        })
    }

    pub fn scalar_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Overrides the neighbor count used for retrieval.
    pub fn set_k(&mut self, k: usize) {
        if let Some(a) = self.adaptive.as_mut() {
            a.k = k;
        }
    }
}

/// Logical parameter group of a parameter name (`global`, `adaptive`, `time`, `proj`, `blocks`, `ln_f`, `head`).
pub fn param_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// One training or inference row before it touches the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptedRow {
    /// `m` positions, padded at the end.
    pub rollout: Segment,
    /// Demonstration segment the prompt is drawn from.
    pub demo: Option<Segment>,
    /// Neighbor indices into `demo` for every rollout position (adaptive modes).
    pub neighbors: Vec<Vec<usize>>,
}

impl PromptedRow {
    /// Retrieves neighbors (batched distance matrix) when the mode needs them.
    pub fn build(cfg: &ModelConfig, k: usize, rollout: Segment, demo: Option<Segment>, rtg_scale: f64) -> Result<Self> {
        if cfg.mode.uses_demo() && demo.is_none() {
            return invalid(format!("mode {} needs a demonstration segment", cfg.mode));
        }
        let demo = if cfg.mode.uses_demo() { demo } else { None };
        let neighbors = match (&demo, cfg.mode.uses_adaptive()) {
            (Some(d), true) => segment_neighbors(&rollout, d, k, rtg_scale)?,
            _ => Vec::new(),
        };
        Ok(Self { rollout, demo, neighbors })
    }

    /// Builds a row from precomputed neighbor sets (evaluation caches them step by step).
    pub fn with_neighbors(rollout: Segment, demo: Option<Segment>, neighbors: Vec<Vec<usize>>) -> Self {
        Self { rollout, demo, neighbors }
    }
}

/// Rows stacked into flat constant arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptedBatch {
    pub batch: usize,
    pub steps: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub rtg: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub times: Vec<u32>,
    pub mask: Vec<f64>,
    pub targets: Vec<f64>,
    pub global_tuples: Vec<Vec<f64>>,
    pub neighbor_tuples: Vec<f64>,
    pub neighbor_indices: Vec<Vec<usize>>,
    pub k: usize,
    pub prompt: Option<Segment>,
    pub prompt_steps: usize,
}

impl PromptedBatch {
    pub fn new(cfg: &ModelConfig, rows: &[PromptedRow]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return invalid("empty batch");
        };
        let steps = first.rollout.len();
        let (sd, ad) = (first.rollout.state_dim, first.rollout.action_dim);
        if sd != cfg.state_dim || ad != cfg.action_dim {
            return shape_err(format!(
                "data has |S|={sd}, |A|={ad} but the model expects |S|={}, |A|={}",
                cfg.state_dim, cfg.action_dim
            ));
        }
        if steps == 0 || steps > cfg.context_len {
            return shape_err(format!("rollout window of {steps} steps exceeds context length {}", cfg.context_len));
        }
        let mut b = PromptedBatch {
            batch: rows.len(),
            steps,
            state_dim: sd,
            action_dim: ad,
            rtg: Vec::with_capacity(rows.len() * steps),
            states: Vec::with_capacity(rows.len() * steps * sd),
            actions: Vec::with_capacity(rows.len() * steps * ad),
            times: Vec::with_capacity(rows.len() * steps),
            mask: Vec::with_capacity(rows.len() * steps),
            targets: Vec::new(),
            global_tuples: Vec::new(),
            neighbor_tuples: Vec::new(),
            neighbor_indices: Vec::new(),
            k: 0,
            prompt: None,
            prompt_steps: 0,
        };
        let div = cfg.rtg_divisor();
        let scaled = |seg: &Segment| {
            let mut c = seg.clone();
            c.rtg.iter_mut().for_each(|r| *r /= div);
            c
        };
        let mut prompt_parts: Vec<Segment> = Vec::new();
        for row in rows {
            let r = &scaled(&row.rollout);
            if r.len() != steps || r.state_dim != sd || r.action_dim != ad {
                return shape_err("rows of a batch must share rollout length and dimensions");
            }
            b.rtg.extend_from_slice(&r.rtg);
            b.states.extend_from_slice(&r.states);
            b.actions.extend_from_slice(&r.actions);
            b.times.extend_from_slice(&r.times);
            b.mask.extend_from_slice(&r.mask);
            if let Some(t) = r.times.iter().find(|&&t| t as usize > cfg.max_timestep) {
                return invalid(format!("time step {t} exceeds max_timestep {}", cfg.max_timestep));
            }
            let demo_scaled = row.demo.as_ref().map(&scaled);
            let demo = demo_scaled.as_ref();
            if cfg.mode.uses_global() {
                let d = demo.ok_or_else(|| HpdtError::InvalidArgument("global token needs a demo".into()))?;
                b.global_tuples.push(transition_tuples(d)?);
            }
            if cfg.mode.uses_adaptive() {
                let d = demo.ok_or_else(|| HpdtError::InvalidArgument("adaptive tokens need a demo".into()))?;
                if row.neighbors.len() != steps {
                    return shape_err(format!("{} neighbor sets for {steps} steps", row.neighbors.len()));
                }
                let k = row.neighbors[0].len();
                if b.k == 0 {
                    b.k = k;
                }
                if k == 0 || row.neighbors.iter().any(|n| n.len() != b.k) {
                    return shape_err("all positions of a batch must use the same k");
                }
                b.neighbor_tuples.extend(gather_neighbor_tuples(d, &row.neighbors));
                b.neighbor_indices.extend(row.neighbors.iter().cloned());
            }
            if cfg.mode.static_prompt() {
                let d = demo.ok_or_else(|| HpdtError::InvalidArgument("static prompt needs a demo".into()))?;
                if let Some(t) = d.times.iter().find(|&&t| t as usize > cfg.max_timestep) {
                    return invalid(format!("prompt time step {t} exceeds max_timestep {}", cfg.max_timestep));
                }
                prompt_parts.push(d.clone());
            }
        }
        b.targets = b.actions.clone();
        if !prompt_parts.is_empty() {
            let p = prompt_parts[0].len();
            if prompt_parts.iter().any(|s| s.len() != p || s.real_len() != p) {
                return shape_err("static prompts of a batch must share their length");
            }
            let mut stacked = Segment {
                state_dim: sd,
                action_dim: ad,
                rtg: Vec::new(),
                states: Vec::new(),
                actions: Vec::new(),
                times: Vec::new(),
                mask: Vec::new(),
            };
            for s in &prompt_parts {
                stacked.rtg.extend_from_slice(&s.rtg);
                stacked.states.extend_from_slice(&s.states);
                stacked.actions.extend_from_slice(&s.actions);
                stacked.times.extend_from_slice(&s.times);
                stacked.mask.extend_from_slice(&s.mask);
            }
            b.prompt = Some(stacked);
            b.prompt_steps = p;
        }
        Ok(b)
    }

    /// Expands the per-position mask over action dimensions.
    pub fn action_mask(&self) -> Vec<f64> {
        self.mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(m, self.action_dim))
            .collect()
    }
}

/// Tape nodes of the fused (prompt-augmented) rollout tokens.
#[derive(Clone, Debug)]
pub struct FusedBatch {
    pub batch: usize,
    pub steps: usize,
    pub rtg: Var,
    pub states: Var,
    pub actions: Var,
    pub global: Option<Var>,
}

/// Sums the template into the raw rollout tokens and encodes the global token.
pub fn fuse_batch(tape: &mut Tape, params: &ModelParams, cfg: &ModelConfig, batch: &PromptedBatch) -> Result<FusedBatch> {
    let n = batch.batch * batch.steps;
    let (sd, ad) = (batch.state_dim, batch.action_dim);
    let mut rtg = tape.constant(NdTensor::matrix(n, 1, batch.rtg.clone())?);
    let mut states = tape.constant(NdTensor::matrix(n, sd, batch.states.clone())?);
    let mut actions = tape.constant(NdTensor::matrix(n, ad, batch.actions.clone())?);
    if cfg.mode.uses_adaptive() {
        let enc = params
            .adaptive
            .ok_or_else(|| HpdtError::InvalidArgument("model has no adaptive encoder".into()))?;
        let enc = AdaptiveEncoder { k: batch.k, ..enc };
        let t = template_on_tape(tape, &params.store, &enc, batch.neighbor_tuples.clone(), &batch.mask)?;
        let tr = tape.slice_cols(t, 0, 1)?;
        let ts = tape.slice_cols(t, 1, 1 + sd)?;
        let ta = tape.slice_cols(t, 1 + sd, 1 + sd + ad)?;
        rtg = tape.add(rtg, tr)?;
        states = tape.add(states, ts)?;
        actions = tape.add(actions, ta)?;
    }
    let global = if cfg.mode.uses_global() {
        let enc = params
            .global
            .ok_or_else(|| HpdtError::InvalidArgument("model has no global encoder".into()))?;
        Some(global_tokens_on_tape(tape, &params.store, &enc, &batch.global_tuples)?)
    } else {
        None
    };
    Ok(FusedBatch {
        batch: batch.batch,
        steps: batch.steps,
        rtg,
        states,
        actions,
        global,
    })
}

fn apply_linear(tape: &mut Tape, store: &ParamStore, l: &Linear, x: Var) -> Result<Var> {
    let w = tape.param(store, l.weight);
    let b = tape.param(store, l.bias);
    tape.linear(x, w, Some(b))
}

fn apply_ln(tape: &mut Tape, store: &ParamStore, l: &LayerNormParams, x: Var) -> Result<Var> {
    let g = tape.param(store, l.gain);
    let b = tape.param(store, l.bias);
    tape.layer_norm(x, g, b)
}

fn time_embedding(tape: &mut Tape, params: &ModelParams, cfg: &ModelConfig, times: &[u32]) -> Result<Var> {
    match params.time {
        TimeParams::Time2Vec(t) => time2vec_on_tape(tape, &params.store, &t, times),
        TimeParams::Table(id) => {
            let table = tape.param(&params.store, id);
            if let Some(t) = times.iter().find(|&&t| t as usize > cfg.max_timestep) {
                return invalid(format!("time step {t} exceeds max_timestep {}", cfg.max_timestep));
            }
            tape.gather_rows(&[table], times.iter().map(|&t| (0, t)).collect())
        }
    }
}

fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let n = tape.value(x).len();
            let mask = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
            tape.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

/// Embedded token sequence `[batch * len, h]` and the row of every state token.
#[derive(Clone, Debug)]
pub struct EmbeddedSequence {
    pub tokens: Var,
    pub len: usize,
    pub state_rows: Vec<u32>,
}

/// Projects every modality, adds time embeddings and interleaves the tokens.
pub fn embed_sequence(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &PromptedBatch,
    fused: &FusedBatch,
    dropout_rng: Option<&mut Rng>,
) -> Result<EmbeddedSequence> {
    let store = &params.store;
    let te = time_embedding(tape, params, cfg, &batch.times)?;
    let r = apply_linear(tape, store, &params.proj_rtg, fused.rtg)?;
    let s = apply_linear(tape, store, &params.proj_state, fused.states)?;
    let a = apply_linear(tape, store, &params.proj_action, fused.actions)?;
    let r = tape.add(r, te)?;
    let s = tape.add(s, te)?;
    let a = tape.add(a, te)?;
    let mut parts = vec![r, s, a];

    let (b, m) = (fused.batch, fused.steps);
    let prompt_steps = batch.prompt_steps;
    let prefix = cfg.prefix_len(prompt_steps);
    let len = prefix + 3 * m;
    if len > cfg.max_seq_len() {
        return shape_err(format!("sequence of {len} tokens exceeds the maximum {}", cfg.max_seq_len()));
    }
    let mut index: Vec<(u32, u32)> = Vec::with_capacity(b * len);
    let mut state_rows = Vec::with_capacity(b * m);

    let global_part = match (fused.global, &params.proj_global) {
        (Some(g), Some(pg)) => {
            parts.push(apply_linear(tape, store, pg, g)?);
            Some(parts.len() as u32 - 1)
        }
        (None, None) => None,
        _ => return invalid("global token and its projection must both be present"),
    };
    let prompt_parts = match &batch.prompt {
        Some(p) if cfg.mode.static_prompt() => {
            let np = p.len();
            let pr = tape.constant(NdTensor::matrix(np, 1, p.rtg.clone())?);
            let ps = tape.constant(NdTensor::matrix(np, batch.state_dim, p.states.clone())?);
            let pa = tape.constant(NdTensor::matrix(np, batch.action_dim, p.actions.clone())?);
            let pte = time_embedding(tape, params, cfg, &p.times)?;
            let pr = apply_linear(tape, store, &params.proj_rtg, pr)?;
            let ps = apply_linear(tape, store, &params.proj_state, ps)?;
            let pa = apply_linear(tape, store, &params.proj_action, pa)?;
            let pr = tape.add(pr, pte)?;
            let ps = tape.add(ps, pte)?;
            let pa = tape.add(pa, pte)?;
            parts.extend([pr, ps, pa]);
            let base = parts.len() as u32 - 3;
            Some(base)
        }
        None if cfg.mode.static_prompt() => return invalid("static-prompt mode needs a prompt segment"),
        _ => None,
    };

    for row in 0..b {
        let row_start = (row * len) as u32;
        if let Some(base) = prompt_parts {
            for i in 0..prompt_steps {
                let src = (row * prompt_steps + i) as u32;
                index.extend([(base, src), (base + 1, src), (base + 2, src)]);
            }
        }
        if let Some(g) = global_part {
            index.push((g, row as u32));
        }
        for i in 0..m {
            let src = (row * m + i) as u32;
            state_rows.push(row_start + (prefix + 3 * i + 1) as u32);
            index.extend([(0, src), (1, src), (2, src)]);
        }
    }
    let tokens = tape.gather_rows(&parts, index)?;
    let tokens = dropout(tape, tokens, cfg.dropout, dropout_rng)?;
    Ok(EmbeddedSequence { tokens, len, state_rows })
}

/// Runs the transformer; returns predicted actions `[batch * steps, |A|]`.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &PromptedBatch,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<Var> {
    let fused = fuse_batch(tape, params, cfg, batch)?;
    let emb = embed_sequence(tape, params, cfg, batch, &fused, dropout_rng.as_deref_mut())?;
    let store = &params.store;
    let mut x = emb.tokens;
    for blk in &params.blocks {
        let h = apply_ln(tape, store, &blk.ln1, x)?;
        let q = apply_linear(tape, store, &blk.q, h)?;
        let k = apply_linear(tape, store, &blk.k, h)?;
        let v = apply_linear(tape, store, &blk.v, h)?;
        let att = tape.causal_attention(q, k, v, batch.batch, emb.len, cfg.n_heads)?;
        let o = apply_linear(tape, store, &blk.o, att)?;
        let o = dropout(tape, o, cfg.dropout, dropout_rng.as_deref_mut())?;
        x = tape.add(x, o)?;
        let h = apply_ln(tape, store, &blk.ln2, x)?;
        let f = apply_linear(tape, store, &blk.fc, h)?;
        let f = tape.gelu(f);
        let f = apply_linear(tape, store, &blk.proj, f)?;
        let f = dropout(tape, f, cfg.dropout, dropout_rng.as_deref_mut())?;
        x = tape.add(x, f)?;
    }
    let states = tape.gather_rows(&[x], emb.state_rows.iter().map(|&r| (0, r)).collect())?;
    let h = apply_ln(tape, store, &params.ln_f, states)?;
    apply_linear(tape, store, &params.head, h)
}

/// Masked MSE between predicted and target actions at rollout positions.
pub fn action_loss(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &PromptedBatch,
    dropout_rng: Option<&mut Rng>,
) -> Result<Var> {
    let pred = forward(tape, params, cfg, batch, dropout_rng)?;
    let n = batch.batch * batch.steps;
    let target = tape.constant(NdTensor::matrix(n, batch.action_dim, batch.targets.clone())?);
    tape.masked_mse(pred, target, batch.action_mask())
}

/// Evaluation-mode prediction (no dropout).
pub fn predict(params: &ModelParams, cfg: &ModelConfig, batch: &PromptedBatch) -> Result<NdTensor> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, params, cfg, batch, None)?;
    Ok(tape.value(out).clone())
}

/// Evaluation-mode loss value.
pub fn loss_value(params: &ModelParams, cfg: &ModelConfig, batch: &PromptedBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let l = action_loss(&mut tape, params, cfg, batch, None)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            let j = serde_json::to_string(&m).unwrap();
            assert_eq!(j, format!("\"{}\"", m.name()));
        }
        assert_eq!("wo-g".parse::<Mode>().unwrap(), Mode::WoG);
        assert_eq!("pdt".parse::<Mode>().unwrap(), Mode::PdtBaseline);
    }

    #[test]
    fn sequence_lengths() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.prefix_len(cfg.demo_window()) + 3 * 20, 61);
        let pdt = ModelConfig {
            mode: Mode::PdtBaseline,
            ..ModelConfig::default()
        };
        assert_eq!(pdt.max_seq_len(), 93);
        let wog = ModelConfig {
            mode: Mode::WoG,
            ..ModelConfig::default()
        };
        assert_eq!(wog.max_seq_len(), 60);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = ModelConfig {
            embed_dim: 10,
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            k: 11,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_names_are_unique_and_grouped() {
        let p = ModelParams::init(&ModelConfig::default(), 0).unwrap();
        let groups: std::collections::BTreeSet<&str> = p.store.iter().map(|q| param_group(&q.name)).collect();
        assert_eq!(
            groups.into_iter().collect::<Vec<_>>(),
            vec!["adaptive", "blocks", "global", "head", "ln_f", "proj", "time"]
        );
    }
}
