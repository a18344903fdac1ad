use hpdt_core::autodiff::{ParamStore, Tape, Var};
use hpdt_core::gradcheck::{finite_difference_gradient, max_relative_error, DEFAULT_STEP};
use hpdt_core::rng::stream;
use hpdt_core::tensor::NdTensor;
use proptest::prelude::*;
use rand::Rng as _;

fn random_tensor(shape: &[usize], seed: u64) -> NdTensor {
    let mut rng = stream(seed, &[shape.len() as u64]);
    let n = shape.iter().product();
    NdTensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn triple_loop(x: &[f64], w: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for l in 0..k {
                out[i * m + j] += x[i * k + l] * w[l * m + j];
            }
        }
    }
    out
}

/// Neumaier-compensated sum, accurate well beyond naive f64 accumulation.
fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// Analytic gradient of every store parameter against central differences.
fn gradient_error(store: &mut ParamStore, build: impl Fn(&mut Tape, &ParamStore) -> Var) -> f64 {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    store.zero_grads();
    tape.backward(loss, store).unwrap();
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    let numeric = finite_difference_gradient(store, DEFAULT_STEP, |s| {
        let mut t = Tape::new();
        let l = build(&mut t, s);
        Ok(t.value(l).item())
    })
    .unwrap();
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_relative_error(a, n.data(), 1e-6))
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_matches_triple_loop(n in 1usize..=16, k in 1usize..=16, m in 1usize..=16, seed in any::<u64>()) {
        let x = random_tensor(&[n, k], seed);
        let w = random_tensor(&[k, m], seed ^ 1);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.linear(xv, wv, None).unwrap();
        let oracle = triple_loop(x.data(), w.data(), n, k, m);
        for (a, b) in tape.value(y).data().iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..12, scale in 1e-3f64..1e4, seed in any::<u64>()) {
        let mut x = random_tensor(&[rows, cols], seed);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.softmax_rows(xv);
        let out = tape.value(y);
        for r in 0..rows {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom = compensated_sum(row.iter().map(|v| (v - max).exp()));
            for (j, v) in out.row(r).iter().enumerate() {
                let oracle = (row[j] - max).exp() / denom;
                prop_assert!((v - oracle).abs() <= 1e-9);
            }
            prop_assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    for seed in 0..20 {
        let mut x = random_tensor(&[3, 16], seed);
        x.data_mut().iter_mut().for_each(|v| *v = *v * 5.0 + 2.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(NdTensor::full(&[16], 1.0));
        let b = tape.constant(NdTensor::zeros(&[16]));
        let y = tape.layer_norm(xv, g, b).unwrap();
        for r in 0..3 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "var {var}");
        }
    }
}

#[test]
fn linear_gelu_mse_gradients() {
    for seed in 0..5 {
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&[3, 4], seed)).unwrap();
        let w = store.add("w", random_tensor(&[4, 5], seed + 10)).unwrap();
        let b = store.add("b", random_tensor(&[5], seed + 20)).unwrap();
        let target = random_tensor(&[3, 5], seed + 30);
        let err = gradient_error(&mut store, |t, s| {
            let (xv, wv, bv) = (t.param(s, x), t.param(s, w), t.param(s, b));
            let y = t.linear(xv, wv, Some(bv)).unwrap();
            let y = t.gelu(y);
            let tv = t.constant(target.clone());
            t.masked_mse(y, tv, vec![1.0; 15]).unwrap()
        });
        assert!(err <= 1e-4, "seed {seed}: {err:.3e}");
    }
}

#[test]
fn attention_block_gradients() {
    let (batch, len, width, heads) = (2, 5, 8, 2);
    for seed in 0..3 {
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&[batch * len, width], seed)).unwrap();
        let gain = store.add("ln.gain", random_tensor(&[width], seed + 1)).unwrap();
        let bias = store.add("ln.bias", random_tensor(&[width], seed + 2)).unwrap();
        let wq = store.add("wq", random_tensor(&[width, width], seed + 3)).unwrap();
        let wk = store.add("wk", random_tensor(&[width, width], seed + 4)).unwrap();
        let wv = store.add("wv", random_tensor(&[width, width], seed + 5)).unwrap();
        let wo = store.add("wo", random_tensor(&[width, 3], seed + 6)).unwrap();
        let target = random_tensor(&[batch * len, 3], seed + 7);
        let mut mask = vec![1.0; batch * len * 3];
        mask[..3].iter_mut().for_each(|m| *m = 0.0);
        let err = gradient_error(&mut store, |t, s| {
            let xv = t.param(s, x);
            let (g, b) = (t.param(s, gain), t.param(s, bias));
            let h = t.layer_norm(xv, g, b).unwrap();
            let (wq, wk, wv, wo) = (t.param(s, wq), t.param(s, wk), t.param(s, wv), t.param(s, wo));
            let q = t.linear(h, wq, None).unwrap();
            let k = t.linear(h, wk, None).unwrap();
            let v = t.linear(h, wv, None).unwrap();
            let a = t.causal_attention(q, k, v, batch, len, heads).unwrap();
            let r = t.add(a, xv).unwrap();
            let y = t.linear(r, wo, None).unwrap();
            let tv = t.constant(target.clone());
            t.masked_mse(y, tv, mask.clone()).unwrap()
        });
        assert!(err <= 1e-4, "seed {seed}: {err:.3e}");
    }
}

#[test]
fn prompt_composite_gradients() {
    for seed in 0..3 {
        let mut store = ParamStore::new();
        let omega = store.add("omega", random_tensor(&[6], seed)).unwrap();
        let phi = store.add("phi", random_tensor(&[6], seed + 1)).unwrap();
        let tuples = store.add("tuples", random_tensor(&[7, 5], seed + 2)).unwrap();
        let w = store.add("w", random_tensor(&[5, 6], seed + 3)).unwrap();
        let scale = random_tensor(&[4, 6], seed + 4);
        let err = gradient_error(&mut store, |t, s| {
            let time = {
                let (o, p) = (t.param(s, omega), t.param(s, phi));
                t.time2vec(o, p, vec![0.0, 0.25, 0.5, 1.0]).unwrap()
            };
            let tv = t.param(s, tuples);
            let wv = t.param(s, w);
            let e = t.linear(tv, wv, None).unwrap();
            let e = t.gelu(e);
            let groups = t.group_mean(e, vec![0, 2, 3, 7]).unwrap();
            let mixed = t.gather_rows(&[groups, time], vec![(0, 0), (1, 1), (0, 2), (1, 3)]).unwrap();
            let summed = t.add(mixed, time).unwrap();
            let sliced = t.slice_cols(summed, 1, 6).unwrap();
            let sc = t.constant(NdTensor::matrix(4, 5, scale.data()[..20].to_vec()).unwrap());
            let prod = t.mul(sliced, sc).unwrap();
            t.sum(prod)
        });
        assert!(err <= 1e-4, "seed {seed}: {err:.3e}");
    }
}

#[test]
fn identical_inputs_give_bitwise_identical_outputs_and_gradients() {
    let run = || {
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&[4, 8], 5)).unwrap();
        let w = store.add("w", random_tensor(&[8, 8], 6)).unwrap();
        let mut t = Tape::new();
        let (xv, wv) = (t.param(&store, x), t.param(&store, w));
        let q = t.linear(xv, wv, None).unwrap();
        let a = t.causal_attention(q, q, q, 1, 4, 2).unwrap();
        let g = t.gelu(a);
        let l = t.sum(g);
        store.zero_grads();
        t.backward(l, &mut store).unwrap();
        let grads: Vec<u64> = store
            .iter()
            .flat_map(|p| p.grad.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        (t.value(l).item().to_bits(), grads)
    };
    assert_eq!(run(), run());
}
