//! FoolsGold: down-weight workers whose accumulated update histories are
//! suspiciously similar to someone else's.

use super::numerics::cosine_similarity_matrix;
use crate::error::Result;

pub const FOOLSGOLD_EPS: f64 = 1e-5;

/// Per-worker weights in `[0, 1]` from accumulated last-layer histories.
///
/// Pairwise cosine with a zeroed diagonal, per-worker row maximum `v_i`
/// (so never below 0), pardoning `cs_ij ·= v_i / v_j` whenever `v_j > v_i`,
/// `w_i = 1 − max_j cs_ij` clipped to `[0, 1]`, rescaled by the maximum, then the logit
/// `ln(w / (1 − w)) + 0.5` clipped to `[0, 1]`. All-zero when every history
/// is a clone of another.
pub fn foolsgold<V: AsRef<[f64]>>(histories: &[V]) -> Result<Vec<f64>> {
    let n = histories.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut cs = cosine_similarity_matrix(histories)?.0;
    for i in 0..n {
        cs[[i, i]] = 0.0;
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let row_max = |cs: &ndarray::Array2<f64>, i: usize| (0..n).map(|j| cs[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
    let max_cs: Vec<f64> = (0..n).map(|i| row_max(&cs, i)).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && max_cs[i] < max_cs[j] {
                cs[[i, j]] *= max_cs[i] / max_cs[j];
            }
        }
    }
    let mut w: Vec<f64> = (0..n).map(|i| (1.0 - row_max(&cs, i)).clamp(0.0, 1.0)).collect();
    let top = w.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return Ok(vec![0.0; n]);
    }
    for v in &mut w {
        *v /= top;
        let c = v.clamp(FOOLSGOLD_EPS, 1.0 - FOOLSGOLD_EPS);
        *v = ((c / (1.0 - c)).ln() + 0.5).clamp(0.0, 1.0);
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_histories_keep_full_weight() {
        let h: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0 + i as f64;
                v
            })
            .collect();
        assert_eq!(foolsgold(&h).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn clones_are_silenced() {
        let h = vec![vec![1.0, 2.0, 3.0]; 3];
        assert_eq!(foolsgold(&h).unwrap(), vec![0.0; 3]);
    }
}
