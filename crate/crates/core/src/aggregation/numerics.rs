//! Shared numerics for the defenses: pairwise cosine similarity, a
//! two-component PCA by power iteration with deflation, medians and
//! quantiles.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{FslError, Result};

/// Vectors with a smaller Euclidean norm have cosine 0 with everything.
pub const ZERO_NORM: f64 = 1e-12;

/// Cosines are rounded to multiples of 2^-32. Rescaling an input vector by a
/// positive constant perturbs the raw cosine by a few ulps; rounding removes
/// that noise so the whole trust pipeline is bitwise scale-invariant.
pub const SIMILARITY_QUANTUM: f64 = 1.0 / 4_294_967_296.0;

pub const PCA_TOL: f64 = 1e-10;
pub const PCA_MAX_ITER: usize = 1000;
/// A second eigenvalue below this fraction of the first is treated as zero.
pub const PCA_RANK_CUTOFF: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Raw cosine with the zero-norm rule; not quantised.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

fn quantize(v: f64) -> f64 {
    (v / SIMILARITY_QUANTUM).round() * SIMILARITY_QUANTUM
}

/// Symmetric `m × m` matrix of pairwise cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(pub Array2<f64>);

impl SimilarityMatrix {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

/// `cs_ij = ∇_i·∇_j / (‖∇_i‖‖∇_j‖)`, 0 when either norm is below
/// [`ZERO_NORM`] (including the diagonal of such a row).
pub fn cosine_similarity_matrix<V: AsRef<[f64]>>(grads: &[V]) -> Result<SimilarityMatrix> {
    let m = grads.len();
    if let Some(first) = grads.first() {
        let d = first.as_ref().len();
        if let Some(bad) = grads.iter().position(|g| g.as_ref().len() != d) {
            return Err(FslError::Input(format!(
                "gradient {bad} has length {} but gradient 0 has {d}",
                grads[bad].as_ref().len()
            )));
        }
    }
    let norms: Vec<f64> = grads.iter().map(|g| norm(g.as_ref())).collect();
    let mut cs = Array2::zeros((m, m));
    for i in 0..m {
        if norms[i] < ZERO_NORM {
            continue;
        }
        cs[[i, i]] = 1.0;
        for j in i + 1..m {
            if norms[j] < ZERO_NORM {
                continue;
            }
            let v = dot(grads[i].as_ref(), grads[j].as_ref()) / (norms[i] * norms[j]);
            let v = quantize(v.clamp(-1.0, 1.0));
            cs[[i, j]] = v;
            cs[[j, i]] = v;
        }
    }
    Ok(SimilarityMatrix(cs))
}

/// Per-row projections onto the first two principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedFeatures {
    /// `m × 2`.
    pub pcs: Array2<f64>,
    pub centroid: Option<[f64; 2]>,
    /// Unit principal directions, `d × 2` (a zero column when absent).
    pub directions: Array2<f64>,
    pub eigenvalues: [f64; 2],
}

impl CompressedFeatures {
    pub fn pair(&self, i: usize) -> [f64; 2] {
        [self.pcs[[i, 0]], self.pcs[[i, 1]]]
    }

    pub fn len(&self) -> usize {
        self.pcs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.pcs.nrows() == 0
    }
}

struct Eigen {
    value: f64,
    vector: Array1<f64>,
}

/// Number of squarings applied before iterating: the iteration runs on
/// `A^64`, so each step contracts the unwanted components by `(λ₂/λ₁)^64`.
const PCA_SQUARINGS: usize = 6;

/// `A^(2^PCA_SQUARINGS)` rescaled to unit Frobenius norm after every
/// squaring. Same eigenvectors, same ordering for a PSD matrix.
fn spectral_power(mat: &Array2<f64>) -> Array2<f64> {
    let mut p = mat.clone();
    for _ in 0..PCA_SQUARINGS {
        let fro = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        if fro == 0.0 || !fro.is_finite() {
            break;
        }
        p /= fro;
        p = p.dot(&p);
    }
    p
}

/// Dominant eigenpair of a symmetric PSD matrix by power iteration on a
/// power of it. Converged when successive unit vectors differ by less than
/// the tolerance, or when the eigen-residual `‖A v − ρ v‖` falls below the
/// tolerance relative to `scale` (which also accepts any vector of a nearly
/// degenerate eigenspace, whose direction is ill-defined). `Ok(None)` when
/// the matrix maps the start vector to zero.
fn power_iteration(mat: &Array2<f64>, scale: Option<f64>, start: Array1<f64>) -> Result<Option<Eigen>> {
    let n = mat.nrows();
    let powered = spectral_power(mat);
    let mut v = start;
    let vn = v.dot(&v).sqrt();
    if vn == 0.0 {
        return Ok(None);
    }
    v /= vn;
    // a start vector orthogonal to every eigenvector with non-zero
    // eigenvalue: retry from the basis vector of the largest diagonal entry
    if powered.dot(&v).iter().all(|&x| x == 0.0) {
        let best = (0..n).max_by(|&a, &b| mat[[a, a]].total_cmp(&mat[[b, b]]).then(b.cmp(&a)));
        match best {
            Some(i) if mat[[i, i]] > 0.0 => {
                v = Array1::zeros(n);
                v[i] = 1.0;
            }
            _ => return Ok(None),
        }
    }
    let mut residual = f64::INFINITY;
    for _ in 0..PCA_MAX_ITER {
        let mut w = powered.dot(&v);
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            return Ok(None);
        }
        w /= wn;
        let diff_minus = (&w - &v).dot(&(&w - &v)).sqrt();
        let diff_plus = (&w + &v).dot(&(&w + &v)).sqrt();
        v = w;
        let av = mat.dot(&v);
        let rho = v.dot(&av);
        let r = &av - &(&v * rho);
        let eig_residual = r.dot(&r).sqrt() / scale.unwrap_or(rho).max(f64::MIN_POSITIVE);
        residual = diff_minus.min(diff_plus).min(eig_residual);
        if residual < PCA_TOL {
            return Ok(Some(Eigen { value: rho, vector: v }));
        }
    }
    let value = v.dot(&mat.dot(&v));
    Err(FslError::Numeric {
        message: format!(
            "power iteration did not converge in {PCA_MAX_ITER} iterations (eigenvalue estimate {value:e})"
        ),
        residual,
    })
}

/// Flip so the largest-magnitude coordinate is positive (first one on ties).
fn fix_sign(v: &mut Array1<f64>) {
    let mut best = 0;
    for i in 0..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
}

/// Two-component PCA of the rows of `rows` (`n × d`, `n ≥ 3`).
///
/// Columns are mean-centred; the top two eigenvectors of the sample
/// covariance are found by power iteration (start vector all-ones) with
/// deflation. When `d > n` the same iteration runs on the `n × n` Gram
/// matrix, started from the image of the all-ones vector, which yields the
/// same directions. A second eigenvalue below `1e-12·λ₁` gives an all-zero
/// second component.
pub fn pca2(rows: ArrayView2<'_, f64>) -> Result<CompressedFeatures> {
    let (n, d) = rows.dim();
    if n < 3 {
        return Err(FslError::Input(format!("PCA needs at least 3 rows, got {n}")));
    }
    if d == 0 {
        return Err(FslError::Input("PCA input has no columns".into()));
    }
    let mean = rows.mean_axis(Axis(0)).expect("n ≥ 3");
    let x = &rows - &mean;
    let scale = 1.0 / (n as f64 - 1.0);
    let gram_route = d > n;
    let mat = if gram_route {
        x.dot(&x.t()) * scale
    } else {
        x.t().dot(&x) * scale
    };
    let ones = Array1::from_elem(d, 1.0);
    let start = if gram_route { x.dot(&ones) } else { ones };

    let mut directions = Array2::zeros((d, 2));
    let mut eigenvalues = [0.0; 2];
    let Some(first) = power_iteration(&mat, None, start.clone())? else {
        return Ok(CompressedFeatures {
            pcs: Array2::zeros((n, 2)),
            centroid: None,
            directions,
            eigenvalues,
        });
    };
    let mut deflated = mat.clone();
    for i in 0..deflated.nrows() {
        for j in 0..deflated.ncols() {
            deflated[[i, j]] -= first.value * first.vector[i] * first.vector[j];
        }
    }
    let second = match power_iteration(&deflated, Some(first.value), start) {
        Ok(e) => e.filter(|e| e.value >= PCA_RANK_CUTOFF * first.value),
        // no usable spectral gap below a negligible second eigenvalue
        Err(FslError::Numeric { message, residual }) => {
            if remaining_variance(&mat, &first) < PCA_RANK_CUTOFF * first.value {
                None
            } else {
                return Err(FslError::Numeric { message, residual });
            }
        }
        Err(e) => return Err(e),
    };
    eigenvalues[0] = first.value;
    let to_direction = |e: &Eigen| -> Array1<f64> {
        let mut dir = if gram_route {
            let v = x.t().dot(&e.vector);
            let vn = v.dot(&v).sqrt();
            if vn > 0.0 {
                v / vn
            } else {
                v
            }
        } else {
            e.vector.clone()
        };
        fix_sign(&mut dir);
        dir
    };
    directions.column_mut(0).assign(&to_direction(&first));
    if let Some(second) = &second {
        eigenvalues[1] = second.value;
        directions.column_mut(1).assign(&to_direction(second));
    }
    let pcs = x.dot(&directions);
    Ok(CompressedFeatures {
        pcs,
        centroid: None,
        directions,
        eigenvalues,
    })
}

/// Trace of the deflated matrix, i.e. the sum of all remaining eigenvalues;
/// an upper bound on the second eigenvalue.
fn remaining_variance(mat: &Array2<f64>, first: &Eigen) -> f64 {
    let n = mat.nrows();
    let mut trace = 0.0;
    for i in 0..n {
        trace += mat[[i, i]] - first.value * first.vector[i] * first.vector[i];
    }
    trace.max(0.0)
}

/// Median with mean-of-middle-two for even lengths. Panics on empty input.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Component-wise median of the PC pairs.
pub fn centroid_median(pcs: ArrayView2<'_, f64>) -> Result<[f64; 2]> {
    if pcs.nrows() == 0 || pcs.ncols() != 2 {
        return Err(FslError::Input(format!("expected m × 2 PCs, got {:?}", pcs.dim())));
    }
    let mut a: Vec<f64> = pcs.column(0).to_vec();
    let mut b: Vec<f64> = pcs.column(1).to_vec();
    Ok([median(&mut a), median(&mut b)])
}

/// Quantile by linear interpolation between order statistics (Hyndman–Fan
/// type 7): position `h = (n − 1)·q` in the sorted values.
pub fn quantile_type7(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn cosine_view(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(x), Some(y)) => cosine(x, y),
        _ => cosine(&a.to_vec(), &b.to_vec()),
    }
}
