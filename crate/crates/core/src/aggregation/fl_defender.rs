//! Trust-weighted aggregation driven by last-layer gradient similarity.
//!
//! Each round: pairwise cosine similarity of the selected workers' last-layer
//! pseudo-gradients, two-component PCA of the similarity rows, component-wise
//! median centroid, cosine of every PC pair with the centroid accumulated
//! into a per-worker history `H`. Trust is `H` shifted down by its first
//! quartile, clamped at zero and scaled to a maximum of one.

use serde::{Deserialize, Serialize};

use super::numerics::{centroid_median, cosine, cosine_similarity_matrix, pca2, quantile_type7, CompressedFeatures};
use super::WorkerUpdate;
use crate::error::{FslError, Result};
use crate::nn::ParameterSet;

/// Per-worker accumulated similarity and derived trust.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustState {
    pub history: Vec<f64>,
    pub gamma: Vec<f64>,
    pub ever_selected: Vec<bool>,
    pub round: usize,
    /// Whether the last update fell back to uniform trust.
    pub fallback: bool,
}

impl TrustState {
    pub fn new(workers: usize) -> Self {
        TrustState {
            history: vec![0.0; workers],
            gamma: vec![0.0; workers],
            ever_selected: vec![false; workers],
            round: 0,
            fallback: false,
        }
    }

    pub fn num_workers(&self) -> usize {
        self.history.len()
    }
}

/// The similarity front-end shared with the diagnostics: cosine matrix of the
/// last-layer gradients, PCA of its rows, median centroid.
pub fn compress_last_layer<V: AsRef<[f64]>>(grads: &[V]) -> Result<CompressedFeatures> {
    let cs = cosine_similarity_matrix(grads)?;
    let mut features = pca2(cs.view())?;
    features.centroid = Some(centroid_median(features.pcs.view())?);
    Ok(features)
}

/// Update `state` with this round's compressed features and return the trust
/// of each selected worker (in `selected` order).
///
/// Rows of `pcs` correspond to `selected`. The first quartile is taken over
/// the histories of workers selected at least once; trust is normalised by
/// its maximum over the same population. When every selected worker ends at
/// zero trust, all selected workers get trust 1.
pub fn fl_defender_trust(
    features: &CompressedFeatures,
    centroid: [f64; 2],
    selected: &[usize],
    state: &mut TrustState,
) -> Result<Vec<f64>> {
    let k = state.num_workers();
    if features.len() != selected.len() {
        return Err(FslError::Input(format!(
            "{} PC rows for {} selected workers",
            features.len(),
            selected.len()
        )));
    }
    if selected.is_empty() {
        return Err(FslError::Input("no selected workers".into()));
    }
    if let Some(&bad) = selected.iter().find(|&&w| w >= k) {
        return Err(FslError::Input(format!("worker id {bad} ≥ K = {k}")));
    }
    for (row, &w) in selected.iter().enumerate() {
        state.history[w] += cosine(&features.pair(row), &centroid);
        state.ever_selected[w] = true;
    }
    let population: Vec<usize> = (0..k).filter(|&w| state.ever_selected[w]).collect();
    let seen: Vec<f64> = population.iter().map(|&w| state.history[w]).collect();
    let q1 = quantile_type7(&seen, 0.25);

    let mut gamma = vec![0.0; k];
    for &w in &population {
        gamma[w] = (state.history[w] - q1).max(0.0);
    }
    let max = population.iter().map(|&w| gamma[w]).fold(0.0, f64::max);
    let selected_mass: f64 = selected.iter().map(|&w| gamma[w]).sum();
    state.fallback = max <= 0.0 || selected_mass <= 0.0;
    if state.fallback {
        gamma.iter_mut().for_each(|g| *g = 0.0);
        for &w in selected {
            gamma[w] = 1.0;
        }
    } else {
        for g in &mut gamma {
            *g /= max;
        }
    }
    state.gamma = gamma;
    state.round += 1;
    Ok(selected.iter().map(|&w| state.gamma[w]).collect())
}

/// `Σ γ_k W_k / Σ γ_k` over the updates, in input order.
pub fn aggregate_weighted(updates: &[WorkerUpdate], gamma: &[f64]) -> Result<ParameterSet> {
    if updates.is_empty() || updates.len() != gamma.len() {
        return Err(FslError::Input(format!(
            "{} updates vs {} weights",
            updates.len(),
            gamma.len()
        )));
    }
    if gamma.iter().any(|&g| g < 0.0 || !g.is_finite()) {
        return Err(FslError::Input("weights must be finite and non-negative".into()));
    }
    let total: f64 = gamma.iter().sum();
    if total <= 0.0 {
        return Err(FslError::Internal("all aggregation weights are zero".into()));
    }
    let first = &updates[0].params;
    let mut out = first.zeros_like();
    for (u, &g) in updates.iter().zip(gamma) {
        if !u.params.same_shape(first) {
            return Err(FslError::Input(format!(
                "worker {} has a different architecture",
                u.worker
            )));
        }
        if g > 0.0 {
            out.add_scaled(g / total, &u.params);
        }
    }
    Ok(out)
}

/// Outcome of one defended aggregation round.
#[derive(Debug, Clone)]
pub struct DefendedRound {
    pub model: ParameterSet,
    pub features: CompressedFeatures,
    pub gamma: Vec<f64>,
}

/// The full server step for one round.
pub fn fl_defender_round(
    global: &ParameterSet,
    updates: &[WorkerUpdate],
    state: &mut TrustState,
) -> Result<DefendedRound> {
    let grads = updates
        .iter()
        .map(|u| crate::nn::last_layer_pseudo_gradient(global, &u.params))
        .collect::<Result<Vec<_>>>()?;
    let features = compress_last_layer(&grads)?;
    let centroid = features.centroid.expect("set by compress_last_layer");
    let selected: Vec<usize> = updates.iter().map(|u| u.worker).collect();
    let gamma = fl_defender_trust(&features, centroid, &selected, state)?;
    let model = aggregate_weighted(updates, &gamma)?;
    Ok(DefendedRound { model, features, gamma })
}
