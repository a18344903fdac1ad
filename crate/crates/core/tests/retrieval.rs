mod common;

use common::*;
use hpdt_core::autodiff::{gelu_scalar, ParamStore, Tape};
use hpdt_core::data::Segment;
use hpdt_core::envs::Family;
use hpdt_core::model::{Mode, PromptedBatch};
use hpdt_core::prompt::*;
use hpdt_core::rng::{stream, Rng};
use hpdt_core::trainer::{rtg_scale_for, sample_rows};
use rand::Rng as _;

fn random_segment(len: usize, rng: &mut Rng, grid: bool) -> Segment {
    let mut draw = |lo: f64, hi: f64| {
        let v: f64 = rng.random_range(lo..hi);
        if grid {
            v.round()
        } else {
            v
        }
    };
    let rtg = (0..len).map(|_| draw(-20.0, 20.0)).collect();
    let states = (0..len * 4).map(|_| draw(-2.0, 2.0)).collect();
    let actions = (0..len * 2).map(|_| draw(-1.0, 1.0)).collect();
    Segment {
        state_dim: 4,
        action_dim: 2,
        rtg,
        states,
        actions,
        times: (0..len as u32).collect(),
        mask: vec![1.0; len],
    }
}

/// Sorts every distance, ties to the lower index.
fn oracle(demo: &Segment, rtg: f64, state: &[f64], scale: f64, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..demo.len())
        .map(|j| {
            let mut sq = (rtg / scale - demo.rtg[j] / scale).powi(2);
            for (a, b) in state.iter().zip(demo.state(j)) {
                sq += (a - b).powi(2);
            }
            (j, sq.sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn oracle_tuples(demo: &Segment, idx: &[usize]) -> Vec<f64> {
    idx.iter()
        .flat_map(|&j| {
            let mut t = vec![demo.rtg[j]];
            t.extend_from_slice(demo.state(j));
            t.extend_from_slice(demo.action(j));
            t
        })
        .collect()
}

/// Queries, including exact key hits and duplicated demo rows.
fn cases(n: usize, seed: u64, grid: bool) -> Vec<(Segment, f64, Vec<f64>, f64, usize)> {
    let mut rng = stream(seed, &[]);
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..30);
            let mut demo = random_segment(len, &mut rng, grid);
            if len > 3 && i % 3 == 0 {
                let (a, b) = (rng.random_range(0..len), rng.random_range(0..len));
                demo.rtg[b] = demo.rtg[a];
                let s = demo.state(a).to_vec();
                demo.states[b * 4..b * 4 + 4].copy_from_slice(&s);
            }
            let (rtg, state) = if i % 4 == 1 {
                let j = rng.random_range(0..len);
                (demo.rtg[j], demo.state(j).to_vec())
            } else {
                let q = random_segment(1, &mut rng, grid);
                (q.rtg[0], q.states)
            };
            let scale = if grid { 1.0 } else { rng.random_range(0.5..10.0) };
            let k = rng.random_range(1..=len);
            (demo, rtg, state, scale, k)
        })
        .collect()
}

#[test]
fn both_paths_match_the_full_sort_oracle() {
    let mut ties = 0;
    let mut total = 0;
    for (seed, grid) in [(1, false), (2, true)] {
        for (demo, rtg, state, scale, k) in cases(800, seed, grid) {
            let want = oracle(&demo, rtg, &state, scale, k);
            let want_idx: Vec<usize> = want.iter().map(|w| w.0).collect();
            let keys = RetrievalKeys::new(&demo, scale);
            let q = query_key(rtg, &state, scale);
            let per_step = nearest_neighbors(&keys, &q, k).unwrap();
            let batched = batched_nearest_neighbors(&keys, std::slice::from_ref(&q), k).unwrap();
            assert_eq!(per_step, want_idx);
            assert_eq!(batched[0], want_idx);
            for (&j, &(_, d)) in per_step.iter().zip(&want) {
                assert_eq!(key_distance(&q, keys.key(j)), d);
            }
            assert_eq!(gather_neighbor_tuples(&demo, std::slice::from_ref(&per_step)), oracle_tuples(&demo, &want_idx));
            let full = oracle(&demo, rtg, &state, scale, demo.len());
            if full.windows(2).any(|w| w[0].1 == w[1].1) {
                ties += 1;
            }
            total += 1;
        }
    }
    assert!(total >= 1000);
    assert!(ties >= 100, "only {ties} queries exercised duplicate distances");
}

#[test]
fn batched_and_per_step_segment_paths_agree() {
    let mut rng = stream(3, &[]);
    for _ in 0..50 {
        let rollout = random_segment(rng.random_range(1..20), &mut rng, false);
        let demo = random_segment(rng.random_range(3..25), &mut rng, false);
        let k = rng.random_range(1..=3);
        let scale = rng.random_range(0.5..5.0);
        assert_eq!(
            segment_neighbors(&rollout, &demo, k, scale).unwrap(),
            segment_neighbors_per_step(&rollout, &demo, k, scale).unwrap()
        );
    }
}

fn perturbed(cfg_mode: Mode, seed: u64) -> (ParamStore, Option<GlobalTokenEncoder>, Option<AdaptiveEncoder>) {
    let p = generic_params(&tiny_config(cfg_mode), seed);
    (p.store, p.global, p.adaptive)
}

fn manual_linear(store: &ParamStore, w: hpdt_core::autodiff::ParamId, b: hpdt_core::autodiff::ParamId, x: &[f64]) -> Vec<f64> {
    let (wv, bv) = (&store.get(w).value, &store.get(b).value);
    let (n_in, n_out) = (wv.shape()[0], wv.shape()[1]);
    (0..n_out)
        .map(|o| bv.data()[o] + (0..n_in).map(|i| x[i] * wv.data()[i * n_out + o]).sum::<f64>())
        .collect()
}

#[test]
fn adaptive_token_is_the_mean_encoded_neighbor() {
    let (store, _, adaptive) = perturbed(Mode::Full, 4);
    let enc = adaptive.unwrap();
    let mut rng = stream(5, &[]);
    for _ in 0..20 {
        let demo = random_segment(12, &mut rng, false);
        let q = random_segment(1, &mut rng, false);
        let step = retrieve_adaptive_step(q.rtg[0], &q.states, &demo, &store, &enc, 3.0).unwrap();
        let want_idx: Vec<usize> = oracle(&demo, q.rtg[0], &q.states, 3.0, enc.k).iter().map(|w| w.0).collect();
        assert_eq!(step.neighbors, want_idx);
        let tuples = oracle_tuples(&demo, &want_idx);
        let mut mean = vec![0.0; 7];
        for t in tuples.chunks(7) {
            for (m, v) in mean.iter_mut().zip(manual_linear(&store, enc.weight, enc.bias, t)) {
                *m += v / enc.k as f64;
            }
        }
        let got: Vec<f64> = [vec![step.rtg], step.state, step.action].concat();
        for (a, b) in got.iter().zip(&mean) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn training_rows_use_oracle_neighbors() {
    let (train, _) = tiny_data(Family::PointDir, 16);
    let cfg = resolved(tiny_config(Mode::Full), &train);
    let rows = sample_rows(&train, &cfg, 3, 9, &[1]).unwrap();
    let batch = PromptedBatch::new(&cfg, &rows).unwrap();
    let div = cfg.rtg_divisor();
    let mut expect_tuples = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let bundle = &train[i / 3];
        let scale = rtg_scale_for(bundle, &cfg);
        let demo = row.demo.as_ref().unwrap();
        for (t, got) in row.neighbors.iter().enumerate() {
            let want: Vec<usize> = oracle(demo, row.rollout.rtg[t], row.rollout.state(t), scale, cfg.k)
                .iter()
                .map(|w| w.0)
                .collect();
            assert_eq!(got, &want, "row {i} step {t}");
            let mut tuples = oracle_tuples(demo, &want);
            tuples.chunks_mut(7).for_each(|c| c[0] /= div);
            expect_tuples.extend(tuples);
        }
    }
    assert_eq!(batch.neighbor_tuples, expect_tuples);
}

fn oracle_global(store: &ParamStore, enc: &GlobalTokenEncoder, rows: &[Vec<f64>]) -> Vec<f64> {
    let mut mean = vec![0.0; store.get(enc.bias).value.len()];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(manual_linear(store, enc.weight, enc.bias, r)) {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            *m += 0.5 * v * (1.0 + (c * (v + 0.044715 * v.powi(3))).tanh()) / rows.len() as f64;
        }
    }
    mean
}

fn token(store: &ParamStore, enc: &GlobalTokenEncoder, rows: &[Vec<f64>]) -> Vec<f64> {
    let mut tape = Tape::new();
    let g = global_tokens_on_tape(&mut tape, store, enc, &[rows.concat()]).unwrap();
    tape.value(g).data().to_vec()
}

#[test]
fn global_token_is_a_set_function() {
    let (store, global, _) = perturbed(Mode::Full, 6);
    let enc = global.unwrap();
    let mut rng = stream(7, &[]);
    for _ in 0..20 {
        let demo = random_segment(rng.random_range(2..15), &mut rng, false);
        let rows: Vec<Vec<f64>> = transition_tuples(&demo).unwrap().chunks(12).map(|c| c.to_vec()).collect();
        let base = token(&store, &enc, &rows);
        let oracle = oracle_global(&store, &enc, &rows);
        assert!(base.iter().zip(&oracle).all(|(a, b)| (a - b).abs() <= 1e-12));
        assert_eq!(encode_global_token(&demo, &store, &enc).unwrap(), base);

        let mut shuffled = rows.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let doubled: Vec<Vec<f64>> = rows.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
        for other in [token(&store, &enc, &shuffled), token(&store, &enc, &doubled)] {
            assert!(base.iter().zip(&other).all(|(a, b)| (a - b).abs() <= 1e-9));
        }
    }
}

#[test]
fn identical_transitions_give_the_single_tuple_embedding() {
    let (store, global, _) = perturbed(Mode::Full, 8);
    let enc = global.unwrap();
    for len in [2, 5, 17, 40] {
        let demo = Segment {
            state_dim: 4,
            action_dim: 2,
            rtg: vec![3.5; len],
            states: [0.3, -1.2, 0.7, 0.05].repeat(len),
            actions: [0.4, -0.9].repeat(len),
            times: (0..len as u32).collect(),
            mask: vec![1.0; len],
        };
        let tuple = transition_tuples(&demo).unwrap()[..12].to_vec();
        let single: Vec<f64> = manual_linear(&store, enc.weight, enc.bias, &tuple)
            .into_iter()
            .map(gelu_scalar)
            .collect();
        let g = encode_global_token(&demo, &store, &enc).unwrap();
        assert!(g.iter().zip(&single).all(|(a, b)| (a - b).abs() <= 1e-12), "len {len}");
    }
}

#[test]
fn time2vec_matches_its_formula() {
    let p = generic_params(&tiny_config(Mode::Full), 2);
    let hpdt_core::model::TimeParams::Time2Vec(t2v) = p.time else {
        panic!("full mode uses Time2Vec");
    };
    let (w, phi) = (p.store.get(t2v.omega).value.data(), p.store.get(t2v.phi).value.data());
    for t in 0..=t2v.t_max as u32 {
        let v = time2vec(t, &p.store, &t2v).unwrap();
        let tau = t as f64 / t2v.t_max as f64;
        assert_eq!(v[0], w[0] * tau + phi[0]);
        for i in 1..v.len() {
            assert_eq!(v[i], (w[i] * tau + phi[i]).sin());
        }
    }
    assert!(time2vec(t2v.t_max as u32 + 1, &p.store, &t2v).is_err());
}
