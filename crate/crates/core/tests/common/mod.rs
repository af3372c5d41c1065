//! Test-only oracles, written without reusing library internals.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use fsl_core::nn::{self, Batch, ParameterSet};

pub fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn loss_at(model: &ParameterSet, flat: &[f64], batch: &Batch) -> f64 {
    let m = model.unflatten_like(flat).unwrap();
    let cache = nn::forward(&m, batch).unwrap();
    nn::batch_loss(&cache, &batch.labels)
}

/// Largest relative disagreement between the analytic gradient and central
/// differences with step `h`. Coordinates where both are below `floor` in
/// magnitude are compared absolutely against `floor`.
pub fn finite_difference_error(model: &ParameterSet, batch: &Batch, h: f64, floor: f64) -> f64 {
    let cache = nn::forward(model, batch).unwrap();
    let analytic = nn::backward(model, &cache, &batch.labels).unwrap().flatten();
    let base = model.flatten();
    let mut worst: f64 = 0.0;
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let up = loss_at(model, &probe, batch);
        probe[i] = base[i] - h;
        let down = loss_at(model, &probe, batch);
        probe[i] = base[i];
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

pub fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

pub fn median_oracle(values: &[f64]) -> f64 {
    let s = sorted(values.to_vec());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

pub fn trimmed_mean_oracle(values: &[f64], beta: f64) -> f64 {
    let s = sorted(values.to_vec());
    let t = (beta * s.len() as f64).floor() as usize;
    let kept = &s[t..s.len() - t];
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if items.len() < k {
        return vec![];
    }
    let mut with_first: Vec<Vec<usize>> = combinations(&items[1..], k - 1)
        .into_iter()
        .map(|mut c| {
            c.insert(0, items[0]);
            c
        })
        .collect();
    with_first.extend(combinations(&items[1..], k));
    with_first
}

/// Krum score by brute force: the smallest total squared distance to any
/// `m − f − 2` other updates.
pub fn krum_score_oracle(flats: &[Vec<f64>], f: usize, i: usize) -> f64 {
    let m = flats.len();
    let others: Vec<usize> = (0..m).filter(|&j| j != i).collect();
    combinations(&others, m - f - 2)
        .iter()
        .map(|set| {
            set.iter()
                .map(|&j| {
                    flats[i]
                        .iter()
                        .zip(&flats[j])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Top-two eigenvectors of the sample covariance of `rows`, from a full
/// symmetric eigendecomposition.
pub fn covariance_top2(rows: &Array2<f64>) -> (Vec<Vec<f64>>, [f64; 2]) {
    let (n, d) = rows.dim();
    let mut x = DMatrix::<f64>::zeros(n, d);
    for j in 0..d {
        let mean = (0..n).map(|i| rows[[i, j]]).sum::<f64>() / n as f64;
        for i in 0..n {
            x[(i, j)] = rows[[i, j]] - mean;
        }
    }
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let vecs = order[..2.min(d)]
        .iter()
        .map(|&k| eig.eigenvectors.column(k).iter().copied().collect())
        .collect();
    let vals = [
        eig.eigenvalues[order[0]],
        if d > 1 { eig.eigenvalues[order[1]] } else { 0.0 },
    ];
    (vecs, vals)
}

/// Sine of the largest principal angle between span(`a`) and span(`b`)
/// (orthonormal columns given as vectors of equal count).
pub fn subspace_sine(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d = a[0].len();
    let ma = DMatrix::from_fn(d, a.len(), |i, j| a[j][i]);
    let mb = DMatrix::from_fn(d, b.len(), |i, j| b[j][i]);
    let resid = &mb - &ma * (ma.transpose() * &mb);
    resid.singular_values().max()
}

/// 16 honest `g + noise` and 4 attacker `−g + noise` vectors, noise norm at
/// most `0.1·‖g‖`; attackers are the last four.
pub fn separable_instance(seed: u64, dim: usize) -> (Vec<Vec<f64>>, BTreeSet<usize>) {
    let mut r = rng(seed);
    let g = gaussian_vec(&mut r, dim);
    let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let vectors = (0..20)
        .map(|i| {
            let dir = gaussian_vec(&mut r, dim);
            let dn = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = r.random_range(0.0..=0.1) * gn / dn;
            let sign = if i < 16 { 1.0 } else { -1.0 };
            g.iter().zip(&dir).map(|(a, b)| sign * a + scale * b).collect()
        })
        .collect();
    (vectors, (16..20).collect())
}

fn raw_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// FoolsGold as in its reference implementation: cosine matrix minus the
/// identity, pardoning, `1 − rowmax`, rescale, `0.99` for exact ones,
/// logit plus one half, clipped.
pub fn foolsgold_oracle(histories: &[Vec<f64>]) -> Vec<f64> {
    let n = histories.len();
    let mut cs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        raw_cosine(&histories[i], &histories[j])
                    }
                })
                .collect()
        })
        .collect();
    let maxcs: Vec<f64> = cs
        .iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && maxcs[i] < maxcs[j] {
                cs[i][j] = cs[i][j] * maxcs[i] / maxcs[j];
            }
        }
    }
    let mut wv: Vec<f64> = cs
        .iter()
        .map(|row| (1.0 - row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).clamp(0.0, 1.0))
        .collect();
    let top = wv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top <= 0.0 {
        return vec![0.0; n];
    }
    for w in &mut wv {
        *w /= top;
        if *w == 1.0 {
            *w = 0.99;
        }
        *w = (*w / (1.0 - *w)).ln() + 0.5;
        if w.is_infinite() || *w > 1.0 {
            *w = if *w < 0.0 { 0.0 } else { 1.0 };
        }
        if *w < 0.0 {
            *w = 0.0;
        }
    }
    wv
}
