//! Hierarchical prompt construction.
//!
//! * Global token: mean over transition tuples `[r̂_t, s_t, a_t, s_{t+1}, r̂_{t+1}]`
//!   of `GELU(h_g(tuple))`, one vector per demonstration segment.
//! * Adaptive tokens: for every rollout timestep, the `k` demonstration
//!   timesteps nearest to the query `[r̂ / scale, s]` (Euclidean, ties to the
//!   lower index), encoded by the dimension-preserving map `h_a` over
//!   `[r̂, s, a]` and averaged.
//! * Time2Vec embedding of `t / T_max`.
//! * Summation fusion of the template into the rollout tokens.
//!
//! Neighbor selection happens outside the tape and is treated as a constant
//! during backpropagation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::data::{Segment, TaskBundle, STD_FLOOR};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::NdTensor;

/// `h_g`: `[2 + 2|S| + |A|] → [d_g]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalTokenEncoder {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// `h_a`: `[1 + |S| + |A|] → [1 + |S| + |A|]` plus the neighbor count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveEncoder {
    pub weight: ParamId,
    pub bias: ParamId,
    pub k: usize,
}

/// `ω`, `φ` of length `h` and the horizon used to scale time steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Time2VecParams {
    pub omega: ParamId,
    pub phi: ParamId,
    pub t_max: usize,
}

pub fn tuple_width(state_dim: usize, action_dim: usize) -> usize {
    1 + state_dim + action_dim
}

pub fn transition_width(state_dim: usize, action_dim: usize) -> usize {
    2 + 2 * state_dim + action_dim
}

/// Row-major transition tuples of the real positions of `demo`; `L` positions give `L − 1` rows.
pub fn transition_tuples(demo: &Segment) -> Result<Vec<f64>> {
    let n = demo.real_len();
    if n < 2 {
        return invalid(format!("global token needs a segment of at least 2 steps, got {n}"));
    }
    let w = transition_width(demo.state_dim, demo.action_dim);
    let mut out = Vec::with_capacity((n - 1) * w);
    for t in 0..n - 1 {
        out.push(demo.rtg[t]);
        out.extend_from_slice(demo.state(t));
        out.extend_from_slice(demo.action(t));
        out.extend_from_slice(demo.state(t + 1));
        out.push(demo.rtg[t + 1]);
    }
    Ok(out)
}

/// `[r̂, s, a]` rows for every real position of `demo`.
pub fn rsa_tuples(demo: &Segment) -> Vec<f64> {
    let n = demo.real_len();
    let mut out = Vec::with_capacity(n * tuple_width(demo.state_dim, demo.action_dim));
    for t in 0..n {
        out.push(demo.rtg[t]);
        out.extend_from_slice(demo.state(t));
        out.extend_from_slice(demo.action(t));
    }
    out
}

/// Global tokens for a batch of tuple sets; `tuples[b]` holds the rows of sample `b`.
/// Returns a `[batch, d_g]` node.
pub fn global_tokens_on_tape(tape: &mut Tape, store: &ParamStore, enc: &GlobalTokenEncoder, tuples: &[Vec<f64>]) -> Result<Var> {
    let w_in = store.get(enc.weight).value.shape()[0];
    let mut offsets = vec![0usize];
    let mut data = Vec::new();
    for t in tuples {
        if t.is_empty() || t.len() % w_in != 0 {
            return shape_err(format!("transition tuples must be non-empty rows of width {w_in}"));
        }
        data.extend_from_slice(t);
        offsets.push(offsets.last().unwrap() + t.len() / w_in);
    }
    let rows = *offsets.last().unwrap();
    let x = tape.constant(NdTensor::matrix(rows, w_in, data)?);
    let w = tape.param(store, enc.weight);
    let b = tape.param(store, enc.bias);
    let h = tape.linear(x, w, Some(b))?;
    let a = tape.gelu(h);
    tape.group_mean(a, offsets)
}

/// Global token of a single demonstration segment.
pub fn encode_global_token(demo: &Segment, store: &ParamStore, enc: &GlobalTokenEncoder) -> Result<Vec<f64>> {
    let tuples = transition_tuples(demo)?;
    let mut tape = Tape::new();
    let g = global_tokens_on_tape(&mut tape, store, enc, &[tuples])?;
    Ok(tape.value(g).data().to_vec())
}

/// Scale dividing rtg in the retrieval space: std of all demo rtg values of the task, floored.
pub fn retrieval_rtg_scale(bundle: &TaskBundle) -> f64 {
    let vals: Vec<f64> = bundle.demos.iter().flat_map(|d| d.rtg.iter().copied()).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt().max(STD_FLOOR)
}

/// Retrieval keys `[r̂ / scale, s]` of a demonstration segment.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalKeys {
    pub width: usize,
    pub keys: Vec<f64>,
}

impl RetrievalKeys {
    pub fn new(demo: &Segment, rtg_scale: f64) -> Self {
        let n = demo.real_len();
        let width = 1 + demo.state_dim;
        let mut keys = Vec::with_capacity(n * width);
        for t in 0..n {
            keys.push(demo.rtg[t] / rtg_scale);
            keys.extend_from_slice(demo.state(t));
        }
        Self { width, keys }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, j: usize) -> &[f64] {
        &self.keys[j * self.width..(j + 1) * self.width]
    }
}

pub fn query_key(rtg: f64, state: &[f64], rtg_scale: f64) -> Vec<f64> {
    let mut q = Vec::with_capacity(1 + state.len());
    q.push(rtg / rtg_scale);
    q.extend_from_slice(state);
    q
}

/// Euclidean distance between a query and a key.
pub fn key_distance(q: &[f64], key: &[f64]) -> f64 {
    q.iter().zip(key).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn by_distance(d: &[f64]) -> impl Fn(&usize, &usize) -> std::cmp::Ordering + '_ {
    move |a, b| d[*a].total_cmp(&d[*b]).then(a.cmp(b))
}

/// Indices of the `k` nearest keys, nearest first, ties to the lower index.
///
/// This is the per-step path used at evaluation time: it sorts every distance.
pub fn nearest_neighbors(keys: &RetrievalKeys, query: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = keys.len();
    if k == 0 || k > n {
        return invalid(format!("k = {k} must lie in 1..={n} (demo segment length)"));
    }
    let d: Vec<f64> = (0..n).map(|j| key_distance(query, keys.key(j))).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(by_distance(&d));
    idx.truncate(k);
    Ok(idx)
}

/// Full `[queries, demo]` distance matrix, row-major.
pub fn distance_matrix(keys: &RetrievalKeys, queries: &[Vec<f64>]) -> Vec<f64> {
    let n = keys.len();
    let mut d = vec![0.0; queries.len() * n];
    for (q, row) in queries.iter().zip(d.chunks_exact_mut(n)) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = key_distance(q, keys.key(j));
        }
    }
    d
}

/// Batched path: one distance matrix, then partial selection per row.
/// Selects exactly the same neighbors as [`nearest_neighbors`].
pub fn batched_nearest_neighbors(keys: &RetrievalKeys, queries: &[Vec<f64>], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = keys.len();
    if k == 0 || k > n {
        return invalid(format!("k = {k} must lie in 1..={n} (demo segment length)"));
    }
    let d = distance_matrix(keys, queries);
    let mut scratch: Vec<usize> = Vec::with_capacity(n);
    Ok(d.chunks_exact(n)
        .map(|row| {
            scratch.clear();
            scratch.extend(0..n);
            let cmp = by_distance(row);
            if k < n {
                scratch.select_nth_unstable_by(k - 1, &cmp);
            }
            let mut top = scratch[..k].to_vec();
            top.sort_by(&cmp);
            top
        })
        .collect())
}

/// Adaptive tokens for `neighbor_tuples` (`[rows * k, 1+|S|+|A|]`), averaged per
/// row and zeroed where `row_mask` is 0. Returns a `[rows, 1+|S|+|A|]` node.
pub fn template_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &AdaptiveEncoder,
    neighbor_tuples: Vec<f64>,
    row_mask: &[f64],
) -> Result<Var> {
    let w = store.get(enc.weight).value.shape()[0];
    let rows = row_mask.len();
    if neighbor_tuples.len() != rows * enc.k * w {
        return shape_err(format!(
            "template: expected {rows}x{}x{w} neighbor values, got {}",
            enc.k,
            neighbor_tuples.len()
        ));
    }
    let x = tape.constant(NdTensor::matrix(rows * enc.k, w, neighbor_tuples)?);
    let wv = tape.param(store, enc.weight);
    let bv = tape.param(store, enc.bias);
    let h = tape.linear(x, wv, Some(bv))?;
    let offsets = (0..=rows).map(|r| r * enc.k).collect();
    let mean = tape.group_mean(h, offsets)?;
    if row_mask.iter().all(|&m| m == 1.0) {
        Ok(mean)
    } else {
        tape.scale_rows(mean, row_mask.to_vec())
    }
}

/// Gathers `[r̂, s, a]` of the selected demo positions, row after row.
pub fn gather_neighbor_tuples(demo: &Segment, neighbors: &[Vec<usize>]) -> Vec<f64> {
    let all = rsa_tuples(demo);
    let w = tuple_width(demo.state_dim, demo.action_dim);
    neighbors
        .iter()
        .flatten()
        .flat_map(|&j| all[j * w..(j + 1) * w].iter().copied())
        .collect()
}

/// Output of one retrieval step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveStep {
    pub rtg: f64,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub neighbors: Vec<usize>,
}

/// Retrieves and encodes the adaptive token for one `(rtg, state)` query.
pub fn retrieve_adaptive_step(
    query_rtg: f64,
    query_state: &[f64],
    demo: &Segment,
    store: &ParamStore,
    enc: &AdaptiveEncoder,
    rtg_scale: f64,
) -> Result<AdaptiveStep> {
    if query_state.len() != demo.state_dim {
        return shape_err(format!("query state has width {}, demo {}", query_state.len(), demo.state_dim));
    }
    let keys = RetrievalKeys::new(demo, rtg_scale);
    let neighbors = nearest_neighbors(&keys, &query_key(query_rtg, query_state, rtg_scale), enc.k)?;
    let tuples = gather_neighbor_tuples(demo, std::slice::from_ref(&neighbors));
    let mut tape = Tape::new();
    let t = template_on_tape(&mut tape, store, enc, tuples, &[1.0])?;
    let v = tape.value(t).data();
    let s = demo.state_dim;
    Ok(AdaptiveStep {
        rtg: v[0],
        state: v[1..1 + s].to_vec(),
        action: v[1 + s..].to_vec(),
        neighbors,
    })
}

/// Neighbor sets for every position of a rollout segment, batched path.
pub fn segment_neighbors(rollout: &Segment, demo: &Segment, k: usize, rtg_scale: f64) -> Result<Vec<Vec<usize>>> {
    let keys = RetrievalKeys::new(demo, rtg_scale);
    let queries: Vec<Vec<f64>> = (0..rollout.len())
        .map(|i| query_key(rollout.rtg[i], rollout.state(i), rtg_scale))
        .collect();
    batched_nearest_neighbors(&keys, &queries, k)
}

/// Same as [`segment_neighbors`] through the per-step path.
pub fn segment_neighbors_per_step(rollout: &Segment, demo: &Segment, k: usize, rtg_scale: f64) -> Result<Vec<Vec<usize>>> {
    let keys = RetrievalKeys::new(demo, rtg_scale);
    (0..rollout.len())
        .map(|i| nearest_neighbors(&keys, &query_key(rollout.rtg[i], rollout.state(i), rtg_scale), k))
        .collect()
}

/// Time2Vec rows for integer time steps.
pub fn time2vec_on_tape(tape: &mut Tape, store: &ParamStore, params: &Time2VecParams, times: &[u32]) -> Result<Var> {
    let tau = times.iter().map(|&t| f64::from(t) / params.t_max as f64).collect();
    let w = tape.param(store, params.omega);
    let p = tape.param(store, params.phi);
    tape.time2vec(w, p, tau)
}

pub fn time2vec(t: u32, store: &ParamStore, params: &Time2VecParams) -> Result<Vec<f64>> {
    if t as usize > params.t_max {
        return invalid(format!("time step {t} exceeds T_max {}", params.t_max));
    }
    let mut tape = Tape::new();
    let v = time2vec_on_tape(&mut tape, store, params, &[t])?;
    Ok(tape.value(v).data().to_vec())
}

/// Hierarchical prompt of one rollout segment, in plain numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub global_token: Option<Vec<f64>>,
    pub template_rtg: Vec<f64>,
    pub template_state: Vec<f64>,
    pub template_action: Vec<f64>,
    pub neighbor_indices: Vec<Vec<usize>>,
}

impl PromptBundle {
    /// A prompt whose template and global token are all zero.
    pub fn zeros(len: usize, state_dim: usize, action_dim: usize, global_dim: Option<usize>) -> Self {
        Self {
            global_token: global_dim.map(|d| vec![0.0; d]),
            template_rtg: vec![0.0; len],
            template_state: vec![0.0; len * state_dim],
            template_action: vec![0.0; len * action_dim],
            neighbor_indices: vec![Vec::new(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.template_rtg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.template_rtg.is_empty()
    }
}

/// Builds the template part (and the global token, when `global` is given) for `rollout`.
pub fn build_prompt(
    rollout: &Segment,
    demo: &Segment,
    store: &ParamStore,
    global: Option<&GlobalTokenEncoder>,
    adaptive: &AdaptiveEncoder,
    rtg_scale: f64,
) -> Result<PromptBundle> {
    let neighbors = segment_neighbors(rollout, demo, adaptive.k, rtg_scale)?;
    let tuples = gather_neighbor_tuples(demo, &neighbors);
    let mut tape = Tape::new();
    let t = template_on_tape(&mut tape, store, adaptive, tuples, &rollout.mask)?;
    let (s, a) = (rollout.state_dim, rollout.action_dim);
    let w = tuple_width(s, a);
    let mut out = PromptBundle::zeros(rollout.len(), s, a, None);
    for (i, row) in tape.value(t).data().chunks_exact(w).enumerate() {
        out.template_rtg[i] = row[0];
        out.template_state[i * s..(i + 1) * s].copy_from_slice(&row[1..1 + s]);
        out.template_action[i * a..(i + 1) * a].copy_from_slice(&row[1 + s..]);
    }
    out.neighbor_indices = neighbors;
    if let Some(g) = global {
        out.global_token = Some(encode_global_token(demo, store, g)?);
    }
    Ok(out)
}

/// Rollout tokens with the template summed in, and the global token as the prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSequence {
    pub prefix: Option<Vec<f64>>,
    pub rtg: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
}

impl FusedSequence {
    /// Token count once each timestep contributes `(r̂, s, a)`.
    pub fn token_len(&self) -> usize {
        usize::from(self.prefix.is_some()) + 3 * self.rtg.len()
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn fuse(rollout: &Segment, prompt: &PromptBundle) -> Result<FusedSequence> {
    if prompt.len() != rollout.len()
        || prompt.template_state.len() != rollout.states.len()
        || prompt.template_action.len() != rollout.actions.len()
    {
        return shape_err(format!(
            "prompt of length {} does not match rollout of length {}",
            prompt.len(),
            rollout.len()
        ));
    }
    Ok(FusedSequence {
        prefix: prompt.global_token.clone(),
        rtg: add(&rollout.rtg, &prompt.template_rtg),
        states: add(&rollout.states, &prompt.template_state),
        actions: add(&rollout.actions, &prompt.template_action),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng as _;

    fn seg(rtg: Vec<f64>, states: Vec<f64>, actions: Vec<f64>) -> Segment {
        let n = rtg.len();
        Segment {
            state_dim: states.len() / n,
            action_dim: actions.len() / n,
            rtg,
            states,
            actions,
            times: (0..n as u32).collect(),
            mask: vec![1.0; n],
        }
    }

    fn random_seg(n: usize, seed: u64) -> Segment {
        let mut r = stream(seed, &[]);
        let mut v = |len: usize| (0..len).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        seg(v(n).iter().map(|x| 10.0 * x).collect(), v(n * 4), v(n * 2))
    }

    fn encoders(seed: u64) -> (ParamStore, GlobalTokenEncoder, AdaptiveEncoder) {
        let mut r = stream(seed, &[]);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            NdTensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-0.5..0.5)).collect()).unwrap()
        };
        let mut store = ParamStore::new();
        let gw = store.add("g.w", rand_t(&[11, 7])).unwrap();
        let gb = store.add("g.b", rand_t(&[7])).unwrap();
        let aw = store.add("a.w", rand_t(&[7, 7])).unwrap();
        let ab = store.add("a.b", rand_t(&[7])).unwrap();
        (
            store,
            GlobalTokenEncoder { weight: gw, bias: gb },
            AdaptiveEncoder { weight: aw, bias: ab, k: 1 },
        )
    }

    #[test]
    fn global_token_needs_two_steps() {
        let (store, g, _) = encoders(0);
        assert!(encode_global_token(&random_seg(1, 0), &store, &g).is_err());
    }

    #[test]
    fn exact_match_retrieves_itself() {
        let (store, _, a) = encoders(1);
        let demo = random_seg(12, 2);
        let out = retrieve_adaptive_step(demo.rtg[7], demo.state(7), &demo, &store, &a, 3.0).unwrap();
        assert_eq!(out.neighbors, vec![7]);
        let mut tape = Tape::new();
        let x = tape.constant(NdTensor::matrix(1, 7, rsa_tuples(&demo)[49..56].to_vec()).unwrap());
        let w = tape.param(&store, a.weight);
        let b = tape.param(&store, a.bias);
        let y = tape.linear(x, w, Some(b)).unwrap();
        let d = tape.value(y).data();
        assert_eq!(out.rtg, d[0]);
        assert_eq!(out.state, d[1..5].to_vec());
        assert_eq!(out.action, d[5..].to_vec());
    }

    #[test]
    fn full_k_is_query_independent() {
        let (store, _, mut a) = encoders(3);
        let demo = random_seg(6, 4);
        a.k = 6;
        let x = retrieve_adaptive_step(100.0, &[1.0, 2.0, 3.0, 4.0], &demo, &store, &a, 1.0).unwrap();
        let y = retrieve_adaptive_step(-5.0, &[0.0; 4], &demo, &store, &a, 1.0).unwrap();
        let flat = |s: &AdaptiveStep| [vec![s.rtg], s.state.clone(), s.action.clone()].concat();
        for (u, v) in flat(&x).iter().zip(flat(&y)) {
            assert!((u - v).abs() < 1e-12);
        }
        a.k = 7;
        assert!(retrieve_adaptive_step(0.0, &[0.0; 4], &demo, &store, &a, 1.0).is_err());
    }

    #[test]
    fn duplicated_rows_prefer_lower_index() {
        let demo = seg(vec![1.0, 1.0, 1.0, 2.0], vec![0.0; 16], vec![0.0; 8]);
        let keys = RetrievalKeys::new(&demo, 1.0);
        let q = query_key(1.0, &[0.0; 4], 1.0);
        assert_eq!(nearest_neighbors(&keys, &q, 2).unwrap(), vec![0, 1]);
        assert_eq!(batched_nearest_neighbors(&keys, &[q], 2).unwrap(), vec![vec![0, 1]]);
    }

    #[test]
    fn single_step_template_equals_single_retrieval() {
        let (store, _, mut a) = encoders(5);
        a.k = 3;
        let demo = random_seg(10, 6);
        let rollout = random_seg(1, 7);
        let p = build_prompt(&rollout, &demo, &store, None, &a, 2.0).unwrap();
        let s = retrieve_adaptive_step(rollout.rtg[0], rollout.state(0), &demo, &store, &a, 2.0).unwrap();
        assert_eq!(p.neighbor_indices[0], s.neighbors);
        assert_eq!(p.template_rtg[0], s.rtg);
        assert_eq!(p.template_state, s.state);
        assert_eq!(p.template_action, s.action);
    }

    #[test]
    fn padded_positions_have_zero_template() {
        let (store, _, mut a) = encoders(8);
        a.k = 2;
        let demo = random_seg(10, 9);
        let mut rollout = random_seg(5, 10);
        rollout.mask[3] = 0.0;
        rollout.mask[4] = 0.0;
        let p = build_prompt(&rollout, &demo, &store, None, &a, 2.0).unwrap();
        assert_eq!(&p.template_rtg[3..], &[0.0, 0.0]);
        assert!(p.template_state[12..].iter().all(|&v| v == 0.0));
        assert!(p.template_action[6..].iter().all(|&v| v == 0.0));
        assert!(p.template_rtg[..3].iter().all(|&v| v != 0.0));
    }

    #[test]
    fn fuse_with_zero_prompt_is_identity() {
        let rollout = random_seg(4, 11);
        let f = fuse(&rollout, &PromptBundle::zeros(4, 4, 2, Some(7))).unwrap();
        assert_eq!(f.prefix, Some(vec![0.0; 7]));
        assert_eq!(f.rtg, rollout.rtg);
        assert_eq!(f.states, rollout.states);
        assert_eq!(f.actions, rollout.actions);
        assert_eq!(f.token_len(), 13);
        assert!(fuse(&rollout, &PromptBundle::zeros(3, 4, 2, None)).is_err());
    }

    #[test]
    fn fuse_is_additive_in_the_template() {
        let rollout = random_seg(3, 12);
        let p = build_prompt(&rollout, &random_seg(8, 13), &encoders(14).0, None, &AdaptiveEncoder { k: 2, ..encoders(14).2 }, 1.0).unwrap();
        let q = build_prompt(&rollout, &random_seg(8, 15), &encoders(16).0, None, &AdaptiveEncoder { k: 2, ..encoders(16).2 }, 1.0).unwrap();
        let pq = PromptBundle {
            template_rtg: add(&p.template_rtg, &q.template_rtg),
            template_state: add(&p.template_state, &q.template_state),
            template_action: add(&p.template_action, &q.template_action),
            ..p.clone()
        };
        let zero = Segment {
            rtg: vec![0.0; 3],
            states: vec![0.0; 12],
            actions: vec![0.0; 6],
            ..rollout.clone()
        };
        let lhs = fuse(&rollout, &pq).unwrap();
        let a = fuse(&rollout, &p).unwrap();
        let b = fuse(&zero, &q).unwrap();
        for (x, (y, z)) in lhs.states.iter().zip(a.states.iter().zip(&b.states)) {
            assert!((x - (y + z)).abs() < 1e-12);
        }
    }
}
