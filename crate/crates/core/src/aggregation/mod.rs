//! Server-side aggregation rules.

mod fl_defender;
mod foolsgold;
pub mod numerics;
mod robust;

use serde::{Deserialize, Serialize};

pub use fl_defender::{
    aggregate_weighted, compress_last_layer, fl_defender_round, fl_defender_trust, DefendedRound, TrustState,
};
pub use foolsgold::{foolsgold, FOOLSGOLD_EPS};
pub use numerics::{
    centroid_median, cosine_similarity_matrix, pca2, quantile_type7, CompressedFeatures, SimilarityMatrix,
};
pub use robust::{
    coordinate_median, default_krum_f, fedavg, krum_scores, multi_krum, squared_distance, trim_count, trimmed_mean,
    KrumSelection,
};

use crate::error::{FslError, Result};
use crate::nn::{last_layer_pseudo_gradient, ParameterSet};

/// A worker's locally trained model and its sample count `n_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerUpdate {
    pub worker: usize,
    pub params: ParameterSet,
    pub num_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Defense {
    FedAvg,
    Median,
    TrimmedMean {
        beta: f64,
    },
    /// `f` defaults to `⌈0.2·m⌉`, `n_select` to `m − f`.
    MultiKrum {
        f: Option<usize>,
        n_select: Option<usize>,
    },
    FoolsGold,
    FlDefender,
}

impl Defense {
    pub const ALL_NAMES: [&'static str; 6] = ["fedavg", "median", "tmean", "mkrum", "fgold", "fl_defender"];

    pub fn name(&self) -> &'static str {
        match self {
            Defense::FedAvg => "fedavg",
            Defense::Median => "median",
            Defense::TrimmedMean { .. } => "tmean",
            Defense::MultiKrum { .. } => "mkrum",
            Defense::FoolsGold => "fgold",
            Defense::FlDefender => "fl_defender",
        }
    }

    /// Parse a defense name with default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name.trim().to_ascii_lowercase().as_str() {
            "fedavg" => Defense::FedAvg,
            "median" => Defense::Median,
            "tmean" | "trimmed_mean" => Defense::TrimmedMean { beta: 0.2 },
            "mkrum" | "multi_krum" => Defense::MultiKrum {
                f: None,
                n_select: None,
            },
            "fgold" | "foolsgold" => Defense::FoolsGold,
            "fl_defender" | "fldefender" => Defense::FlDefender,
            other => {
                return Err(FslError::Config(format!(
                    "unknown defense {other:?} (expected one of {})",
                    Defense::ALL_NAMES.join(", ")
                )))
            }
        })
    }

    /// Smallest per-round worker count the rule can handle.
    pub fn min_workers(&self) -> usize {
        match *self {
            Defense::FlDefender => 3,
            Defense::MultiKrum { f, .. } => f.map_or(4, |f| f + 3),
            Defense::TrimmedMean { beta } => {
                // smallest m with m > 2·⌊β·m⌋
                (1..).find(|&m| m > 2 * trim_count(m, beta)).unwrap_or(1)
            }
            _ => 1,
        }
    }
}

/// Result of one aggregation round.
#[derive(Debug, Clone)]
pub struct AggregationOutcome {
    pub model: ParameterSet,
    /// Per-worker relative weight (length `K`, maximum 1; 0 for workers not
    /// aggregated this round). For FL-Defender this is the trust vector.
    pub weights: Vec<f64>,
    /// FL-Defender fell back to uniform trust, or FoolsGold trusted nobody.
    pub fallback: bool,
}

/// Stateful server: one defense plus whatever history it carries across
/// rounds.
#[derive(Debug, Clone)]
pub struct Aggregator {
    defense: Defense,
    trust: TrustState,
    histories: Vec<Option<Vec<f64>>>,
}

impl Aggregator {
    pub fn new(defense: Defense, num_workers: usize) -> Self {
        Aggregator {
            defense,
            trust: TrustState::new(num_workers),
            histories: vec![None; num_workers],
        }
    }

    pub fn defense(&self) -> Defense {
        self.defense
    }

    pub fn trust(&self) -> &TrustState {
        &self.trust
    }

    pub fn num_workers(&self) -> usize {
        self.trust.num_workers()
    }

    /// Aggregate `updates` (ordered by worker id) produced from `global`.
    pub fn aggregate(&mut self, global: &ParameterSet, updates: &[WorkerUpdate]) -> Result<AggregationOutcome> {
        let k = self.num_workers();
        if updates.is_empty() {
            return Err(FslError::Input("no updates to aggregate".into()));
        }
        if let Some(u) = updates.iter().find(|u| u.worker >= k) {
            return Err(FslError::Input(format!("worker id {} ≥ K = {k}", u.worker)));
        }
        let mut weights = vec![0.0; k];
        let mut fallback = false;
        let model = match self.defense {
            Defense::FedAvg => {
                let top = updates.iter().map(|u| u.num_samples).max().unwrap_or(1).max(1) as f64;
                for u in updates {
                    weights[u.worker] = u.num_samples as f64 / top;
                }
                fedavg(updates)?
            }
            Defense::Median => {
                updates.iter().for_each(|u| weights[u.worker] = 1.0);
                coordinate_median(updates)?
            }
            Defense::TrimmedMean { beta } => {
                updates.iter().for_each(|u| weights[u.worker] = 1.0);
                trimmed_mean(updates, beta)?
            }
            Defense::MultiKrum { f, n_select } => {
                let m = updates.len();
                let f = f.unwrap_or_else(|| default_krum_f(m));
                let n_select = n_select.unwrap_or(m.saturating_sub(f)).min(m);
                let sel = multi_krum(updates, f, n_select)?;
                for &i in &sel.selected {
                    weights[updates[i].worker] = 1.0;
                }
                sel.model
            }
            Defense::FoolsGold => {
                for u in updates {
                    let g = last_layer_pseudo_gradient(global, &u.params)?;
                    match &mut self.histories[u.worker] {
                        Some(h) => h.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
                let hist: Vec<&[f64]> = updates
                    .iter()
                    .map(|u| self.histories[u.worker].as_deref().expect("just filled"))
                    .collect();
                let w = foolsgold(&hist)?;
                for (u, &wi) in updates.iter().zip(&w) {
                    weights[u.worker] = wi;
                }
                if w.iter().sum::<f64>() > 0.0 {
                    aggregate_weighted(updates, &w)?
                } else {
                    fallback = true;
                    global.clone()
                }
            }
            Defense::FlDefender => {
                let round = fl_defender_round(global, updates, &mut self.trust)?;
                weights.clone_from(&self.trust.gamma);
                fallback = self.trust.fallback;
                round.model
            }
        };
        Ok(AggregationOutcome {
            model,
            weights,
            fallback,
        })
    }
}
