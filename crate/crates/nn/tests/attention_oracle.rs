//! Attention against a straight-line re-implementation of the formula.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socialdrive_nn::{MultiHeadAttention, ParamStore, Tape, Tensor};

fn dense_oracle(store: &ParamStore<f64>, att: &MultiHeadAttention, x: &[Vec<f64>], valid: &[bool]) -> Vec<f64> {
    let get = |name: &str| store.value(store.id(name).unwrap()).clone();
    let (wq, wk, wv) = (get("att.wq"), get("att.wk"), get("att.wv"));
    let dh = att.dim / att.heads;
    let n = x.len();
    let proj = |v: &[f64], w: &Tensor<f64>, col: usize| -> f64 { (0..v.len()).map(|i| v[i] * w.at(i, col)).sum() };
    let mut out = vec![0.0; att.outputs];
    for m in 0..att.heads {
        let q: Vec<f64> = (0..dh).map(|j| proj(&x[0], &wq, m * dh + j)).collect();
        let mut scores = Vec::new();
        for row in x {
            let k: Vec<f64> = (0..dh).map(|j| proj(row, &wk, m * dh + j)).collect();
            let s: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt();
            scores.push(s);
        }
        for (s, &ok) in scores.iter_mut().zip(valid) {
            if !ok {
                *s += -1e9;
            }
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut head = vec![0.0; dh];
        for i in 0..n {
            for j in 0..dh {
                head[j] += e[i] / z * proj(&x[i], &wv, m * dh + j);
            }
        }
        let pw = get(&format!("att.proj{m}.w"));
        let pb = get(&format!("att.proj{m}.b"));
        for o in 0..att.outputs {
            out[o] += (0..dh).map(|j| head[j] * pw.at(j, o)).sum::<f64>() + pb.at(0, o);
        }
    }
    out
}

#[test]
fn two_heads_match_dense_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::<f64>::new();
    let att = MultiHeadAttention::new(&mut store, "att", 6, 8, 2, 5, &mut rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    for trial in 0..10 {
        let n = 1 + trial % 5;
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let valid: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.7)).collect();
        let mut t = Tape::new();
        let xi = t.input(Tensor::matrix(n, 6, x.concat()));
        let o = att.forward(&mut t, &store, xi, n, &valid).unwrap();
        let want = dense_oracle(&store, &att, &x, &valid);
        for (a, b) in t.value(o.out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "trial {trial}: {a} vs {b}");
        }
    }
}

#[test]
fn batched_groups_equal_individual_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f32>::new();
    let att = MultiHeadAttention::new(&mut store, "att", 3, 4, 2, 3, &mut rng).unwrap();
    let rows: Vec<f32> = (0..3 * 3 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let valid = [true, false, true, true, true, true, true, true, false];
    let mut t = Tape::new();
    let all = t.input(Tensor::matrix(9, 3, rows.clone()));
    let batched = att.forward(&mut t, &store, all, 3, &valid).unwrap();
    for s in 0..3 {
        let xi = t.input(Tensor::matrix(3, 3, rows[s * 9..(s + 1) * 9].to_vec()));
        let one = att.forward(&mut t, &store, xi, 3, &valid[s * 3..(s + 1) * 3]).unwrap();
        assert_eq!(t.value(one.out).row(0), t.value(batched.out).row(s));
    }
}
