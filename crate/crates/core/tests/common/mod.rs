//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use prognos_core::autodiff::Tensor;

pub mod gradcheck;
pub mod routing;

/// Central-difference gradient of `f` with respect to every entry of every
/// input.
pub fn numeric_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = central(f, inputs, i, j, h);
        }
        out.push(g);
    }
    out
}

/// One central difference: d f / d inputs[i][j].
pub fn central(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], i: usize, j: usize, h: f64) -> f64 {
    let mut x = inputs.to_vec();
    let v = x[i].data()[j];
    x[i].data_mut()[j] = v + h;
    let up = f(&x);
    x[i].data_mut()[j] = v - h;
    let down = f(&x);
    (up - down) / (2.0 * h)
}

/// Relative disagreement of one analytic/numeric pair; values below `floor`
/// in magnitude are compared on the floor's scale.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Tolerance-adjusted precision/recall/F1 by direct enumeration.
pub fn brute_tolerant_f1(pred: &[u8], gt: &[u8], t: Option<usize>) -> (f64, f64, f64) {
    let n = pred.len();
    let mut adj = pred.to_vec();
    for i in 0..n {
        if pred[i] != 1 {
            continue;
        }
        for j in 0..n {
            let near = match t {
                None => true,
                Some(t) => (i as i64 - j as i64).unsigned_abs() as usize <= t,
            };
            if near && gt[j] == 1 {
                adj[j] = 1;
            }
        }
    }
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for j in 0..n {
        match (adj[j], gt[j]) {
            (1, 1) => tp += 1.0,
            (1, 0) => fp += 1.0,
            (0, 1) => fn_ += 1.0,
            _ => {}
        }
    }
    let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
    let r = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Top-`n` key indices by sorting every (score, index) pair.
pub fn exhaustive_top_n(query: &[f64], keys: &[Vec<f64>], n: usize) -> Vec<usize> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut scored: Vec<(f64, usize)> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let kn = norm(k);
            let dot: f64 = query.iter().zip(k).map(|(a, b)| a * b).sum();
            let s = if qn < 1e-12 || kn < 1e-12 { 0.0 } else { dot / (qn * kn) };
            (s, i)
        })
        .collect();
    // descending score, then ascending index
    for i in 0..scored.len() {
        for j in 0..scored.len() - 1 - i {
            let (a, b) = (scored[j], scored[j + 1]);
            if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                scored.swap(j, j + 1);
            }
        }
    }
    scored.into_iter().take(n).map(|(_, i)| i).collect()
}

/// Area under the ROC curve via the rank-sum statistic, ties averaged.
pub fn auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut rank_sum, mut pos) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum += r;
                pos += 1.0;
            }
        }
        i = j + 1;
    }
    let neg = scores.len() as f64 - pos;
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}
