//! Feature study: map a round's worker updates to per-worker (magnitude,
//! angle-to-centroid) pairs under four feature pipelines and measure how well
//! the angle separates attackers from honest workers.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::aggregation::numerics::{centroid_median, median, norm, pca2, SIMILARITY_QUANTUM, ZERO_NORM};
use crate::aggregation::{compress_last_layer, WorkerUpdate};
use crate::error::{FslError, Result};
use crate::nn::{last_layer_pseudo_gradient, pseudo_gradient, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureMode {
    /// PCA of the full flat pseudo-gradients.
    All,
    /// Raw last-layer pseudo-gradients.
    Last,
    /// PCA of the last-layer pseudo-gradients.
    LastPca,
    /// Cosine matrix of the last-layer pseudo-gradients, then PCA: the
    /// aggregation front-end.
    Engineered,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 4] = [
        FeatureMode::All,
        FeatureMode::Last,
        FeatureMode::LastPca,
        FeatureMode::Engineered,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FeatureMode::All => "all",
            FeatureMode::Last => "last",
            FeatureMode::LastPca => "lastpca",
            FeatureMode::Engineered => "engineered",
        }
    }
}

impl FromStr for FeatureMode {
    type Err = FslError;

    fn from_str(s: &str) -> Result<Self> {
        FeatureMode::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| FslError::Config(format!("unknown feature mode {s:?} (all, last, lastpca, engineered)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerFeature {
    pub worker: usize,
    pub magnitude: f64,
    pub angle_deg: f64,
    pub is_attacker: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub mode: FeatureMode,
    pub workers: Vec<WorkerFeature>,
    /// Smallest attacker angle minus largest honest angle; only with ground
    /// truth and both groups non-empty.
    pub separation_margin: Option<f64>,
}

/// Angle between two vectors in degrees; 0 when either is (numerically)
/// zero. The cosine is clamped and snapped to the same grid as the
/// similarity matrix so parallel vectors give exactly 0.
pub fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return 0.0;
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    let c = ((c / SIMILARITY_QUANTUM).round() * SIMILARITY_QUANTUM).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

fn rows_of(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn stack(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(FslError::Input("feature vectors of different lengths".into()));
    }
    Ok(Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]))
}

/// Featured vectors and their centroid for one mode. `vectors` are full-model
/// pseudo-gradients for `All` and last-layer ones otherwise.
fn featurize(mode: FeatureMode, vectors: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    match mode {
        FeatureMode::All | FeatureMode::LastPca => {
            let f = pca2(stack(vectors)?.view())?;
            let c = centroid_median(f.pcs.view())?;
            Ok((rows_of(&f.pcs), c.to_vec()))
        }
        FeatureMode::Last => {
            let d = vectors[0].len();
            let mut column = vec![0.0; vectors.len()];
            let centroid = (0..d)
                .map(|j| {
                    for (c, v) in column.iter_mut().zip(vectors) {
                        *c = v[j];
                    }
                    median(&mut column)
                })
                .collect();
            Ok((vectors.to_vec(), centroid))
        }
        FeatureMode::Engineered => {
            let f = compress_last_layer(vectors)?;
            let c = f.centroid.expect("set by compress_last_layer");
            Ok((rows_of(&f.pcs), c.to_vec()))
        }
    }
}

/// The pipeline on precomputed pseudo-gradients, one per entry of `workers`.
pub fn features_from_gradients(
    mode: FeatureMode,
    vectors: &[Vec<f64>],
    workers: &[usize],
    attackers: Option<&BTreeSet<usize>>,
) -> Result<FeatureReport> {
    if vectors.len() < 3 {
        return Err(FslError::Input(format!(
            "feature study needs at least 3 updates, got {}",
            vectors.len()
        )));
    }
    if workers.len() != vectors.len() {
        return Err(FslError::Input("one worker id per vector expected".into()));
    }
    let (featured, centroid) = featurize(mode, vectors)?;
    let rows: Vec<WorkerFeature> = featured
        .iter()
        .zip(workers)
        .map(|(v, &w)| WorkerFeature {
            worker: w,
            magnitude: norm(v),
            angle_deg: angle_deg(v, &centroid),
            is_attacker: attackers.map(|a| a.contains(&w)),
        })
        .collect();
    let separation_margin = attackers.and_then(|_| {
        let angles = |att: bool| {
            rows.iter()
                .filter(move |r| r.is_attacker == Some(att))
                .map(|r| r.angle_deg)
        };
        let min_att = angles(true).fold(f64::INFINITY, f64::min);
        let max_honest = angles(false).fold(f64::NEG_INFINITY, f64::max);
        (min_att.is_finite() && max_honest.is_finite()).then_some(min_att - max_honest)
    });
    Ok(FeatureReport {
        mode,
        workers: rows,
        separation_margin,
    })
}

/// Run one pipeline on a round's updates relative to the global model they
/// were trained from. Attacker ids are used only for labelling and the
/// margin.
pub fn feature_pipeline(
    updates: &[WorkerUpdate],
    global: &ParameterSet,
    mode: FeatureMode,
    attackers: Option<&BTreeSet<usize>>,
) -> Result<FeatureReport> {
    if updates.len() < 3 {
        return Err(FslError::Input(format!(
            "feature study needs at least 3 updates, got {}",
            updates.len()
        )));
    }
    let vectors = updates
        .iter()
        .map(|u| match mode {
            FeatureMode::All => pseudo_gradient(global, &u.params),
            _ => last_layer_pseudo_gradient(global, &u.params),
        })
        .collect::<Result<Vec<_>>>()?;
    let workers: Vec<usize> = updates.iter().map(|u| u.worker).collect();
    features_from_gradients(mode, &vectors, &workers, attackers)
}

pub const FEATURE_CSV_HEADER: &str = "mode,worker_id,is_attacker,magnitude,angle_deg";

/// Plot-ready rows for one or more reports. `is_attacker` is empty when no
/// ground truth was supplied.
pub fn features_csv(reports: &[FeatureReport]) -> String {
    let mut out = String::from(FEATURE_CSV_HEADER);
    out.push('\n');
    for r in reports {
        for w in &r.workers {
            let flag = match w.is_attacker {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.mode.name(),
                w.worker,
                flag,
                crate::report::fmt_sig6(w.magnitude),
                crate::report::fmt_sig6(w.angle_deg)
            );
        }
    }
    out
}
