//! Baseline aggregators: sample-weighted averaging and the coordinate-wise /
//! distance-based robust rules. All operate on flat parameter views.

use super::numerics::median;
use super::WorkerUpdate;
use crate::error::{FslError, Result};
use crate::nn::ParameterSet;

fn check_updates(updates: &[WorkerUpdate]) -> Result<&ParameterSet> {
    let first = &updates
        .first()
        .ok_or_else(|| FslError::Input("no updates to aggregate".into()))?
        .params;
    if let Some(u) = updates.iter().find(|u| !u.params.same_shape(first)) {
        return Err(FslError::Input(format!(
            "worker {} has a different architecture",
            u.worker
        )));
    }
    Ok(first)
}

fn flat_views(updates: &[WorkerUpdate]) -> Vec<Vec<f64>> {
    updates.iter().map(|u| u.params.flatten()).collect()
}

/// Apply `reduce` to every coordinate's column of worker values.
fn coordinatewise(updates: &[WorkerUpdate], mut reduce: impl FnMut(&mut [f64]) -> f64) -> Result<ParameterSet> {
    let shape = check_updates(updates)?;
    let flats = flat_views(updates);
    let mut column = vec![0.0; flats.len()];
    let out: Vec<f64> = (0..shape.num_params())
        .map(|j| {
            for (c, f) in column.iter_mut().zip(&flats) {
                *c = f[j];
            }
            reduce(&mut column)
        })
        .collect();
    shape.unflatten_like(&out)
}

/// `Σ (n_k / n) W_k`.
pub fn fedavg(updates: &[WorkerUpdate]) -> Result<ParameterSet> {
    let shape = check_updates(updates)?;
    if let Some(u) = updates.iter().find(|u| u.num_samples == 0) {
        return Err(FslError::Input(format!("worker {} reports zero samples", u.worker)));
    }
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    let mut out = shape.zeros_like();
    for u in updates {
        out.add_scaled(u.num_samples as f64 / total as f64, &u.params);
    }
    Ok(out)
}

pub fn coordinate_median(updates: &[WorkerUpdate]) -> Result<ParameterSet> {
    coordinatewise(updates, median)
}

/// Number of values trimmed from each end for `m` workers.
pub fn trim_count(m: usize, beta: f64) -> usize {
    (beta * m as f64).floor() as usize
}

/// Per coordinate: drop the `⌊β·m⌋` smallest and largest values, average
/// the rest.
pub fn trimmed_mean(updates: &[WorkerUpdate], beta: f64) -> Result<ParameterSet> {
    if !(0.0..0.5).contains(&beta) {
        return Err(FslError::Input(format!("trim fraction {beta} outside [0, 0.5)")));
    }
    let m = updates.len();
    let t = trim_count(m, beta);
    if m <= 2 * t {
        return Err(FslError::Input(format!(
            "trimming {t} from each end of {m} values leaves nothing"
        )));
    }
    coordinatewise(updates, |col| {
        col.sort_by(f64::total_cmp);
        let kept = &col[t..m - t];
        kept.iter().sum::<f64>() / kept.len() as f64
    })
}

/// Default Byzantine count for Multi-Krum: `⌈0.2·m⌉`.
pub fn default_krum_f(m: usize) -> usize {
    (0.2 * m as f64).ceil() as usize
}

#[derive(Debug, Clone)]
pub struct KrumSelection {
    pub model: ParameterSet,
    /// Positions (into the input slice) of the averaged updates, best first.
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Krum scores: sum of squared distances to the `m − f − 2` nearest other
/// updates.
pub fn krum_scores(flats: &[Vec<f64>], f: usize) -> Result<Vec<f64>> {
    let m = flats.len();
    if m < f + 3 {
        return Err(FslError::Input(format!(
            "Multi-Krum needs m ≥ f + 3, got m = {m}, f = {f}"
        )));
    }
    let mut dist = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let d = squared_distance(&flats[i], &flats[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let neighbours = m - f - 2;
    Ok((0..m)
        .map(|i| {
            let mut others: Vec<f64> = (0..m).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            others.sort_by(f64::total_cmp);
            others[..neighbours].iter().sum()
        })
        .collect())
}

/// Average the `n_select` updates with the lowest Krum scores (ties by lower
/// position).
pub fn multi_krum(updates: &[WorkerUpdate], f: usize, n_select: usize) -> Result<KrumSelection> {
    let shape = check_updates(updates)?;
    let m = updates.len();
    if n_select == 0 || n_select > m {
        return Err(FslError::Input(format!("cannot select {n_select} of {m} updates")));
    }
    let flats = flat_views(updates);
    let scores = krum_scores(&flats, f)?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(n_select);
    let mut out = shape.zeros_like();
    for &i in &order {
        out.add_scaled(1.0 / n_select as f64, &updates[i].params);
    }
    Ok(KrumSelection {
        model: out,
        selected: order,
        scores,
    })
}
