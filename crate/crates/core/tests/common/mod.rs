//! Reference implementations used as oracles by the integration tests. None
//! of them share code paths with the library routines they check.

#![allow(dead_code)]

use alt_core::numerics::{Array, Graph, ParamStore};
use rand::Rng;

/// Row-normalized log-probabilities from uniform logits in `[-3, 3)`.
pub fn random_logp(rng: &mut impl Rng, frames: usize, vocab: usize) -> Array {
    let mut data = Vec::with_capacity(frames * vocab);
    for _ in 0..frames {
        let row: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|x| x - z));
    }
    Array::matrix(frames, vocab, data).unwrap()
}

pub fn random_array(rng: &mut impl Rng, shape: &[usize], range: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-range..range)).collect()).unwrap()
}

/// Merge repeats, then drop blanks.
fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != blank {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// `−ln Σ P(path)` over every path of `V^T` that collapses to `target`.
/// Infinite when none does.
pub fn brute_force_ctc(logp: &Array, target: &[usize], blank: usize) -> f64 {
    let (t, v) = (logp.rows(), logp.cols());
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        if collapse(&path, blank) == target {
            total += (0..t).map(|i| logp.get2(i, path[i])).sum::<f64>().exp();
        }
        let mut k = 0;
        loop {
            if k == t {
                return -total.ln();
            }
            path[k] += 1;
            if path[k] < v {
                break;
            }
            path[k] = 0;
            k += 1;
        }
    }
}

/// Plain Levenshtein distance by the full `(n+1)×(m+1)` table.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in table.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        table[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = table[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            table[i][j] = sub.min(table[i - 1][j] + 1).min(table[i][j - 1] + 1);
        }
    }
    table[a.len()][b.len()]
}

/// Largest relative error between reverse-mode parameter gradients of the
/// scalar built by `loss` and central differences over every parameter
/// entry. The denominator is floored at `1e-5`: a parameter whose true
/// gradient is identically zero (a key bias under softmax attention, say)
/// still picks up about `1e-10` of central-difference roundoff per entry on
/// a loss of order ten.
pub fn param_gradient_error(
    params: &ParamStore,
    h: f64,
    loss: impl Fn(&mut Graph) -> alt_core::Result<alt_core::numerics::Var>,
) -> f64 {
    let value = |p: &ParamStore| {
        let mut g = Graph::inference(p);
        let l = loss(&mut g).unwrap();
        g.value(l).item()
    };
    let analytic = {
        let mut g = Graph::training(params);
        let l = loss(&mut g).unwrap();
        g.param_grads(l).unwrap()
    };
    let mut work = params.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        let an = analytic
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Array::zeros(params.get(&name).unwrap().shape()));
        let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in 0..len {
            let orig = params.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = value(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = value(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            let a = an.data()[i];
            d2 += (a - num) * (a - num);
            a2 += a * a;
            n2 += num * num;
        }
        worst = worst.max(d2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-5));
    }
    worst
}

/// Means of every full window of `window` consecutive values.
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    xs.windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
