//! Small feed-forward classifier: dense ReLU layers with an identity output
//! layer feeding softmax, an optional single-channel 3×3 convolution + 2×2
//! max-pool front-end, analytic backpropagation and SGD with momentum.
//!
//! Parameters live in [`ParameterSet`], which doubles as a gradient, a
//! momentum buffer and a model update.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FslError, Result};

/// Probabilities are clamped at this floor before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

const CONV_K: usize = 3;
const POOL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// `weights` is `out × in`, applied as `x · Wᵀ + b`.
    Dense,
    /// Valid 3×3 convolution over a `side × side` single-channel image with
    /// `filters` output channels, ReLU, then non-overlapping 2×2 max-pool.
    /// `weights` is `filters × 9`, `bias` has `filters` entries.
    Conv { side: usize, filters: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn dense(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(FslError::Config(format!(
                "dense layer has {} weight rows but {} biases",
                weights.nrows(),
                bias.len()
            )));
        }
        Ok(Layer {
            kind: LayerKind::Dense,
            weights,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.weights.ncols(),
            LayerKind::Conv { side, .. } => side * side,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.weights.nrows(),
            LayerKind::Conv { side, filters } => filters * pooled_side(side).pow(2),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn zeros_like(&self) -> Self {
        Layer {
            kind: self.kind,
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

fn conv_side(side: usize) -> usize {
    side + 1 - CONV_K
}

fn pooled_side(side: usize) -> usize {
    conv_side(side) / POOL
}

/// Model architecture: an optional convolution front-end followed by dense
/// layers `dims[0] → dims[1] → … → classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Filters of the optional convolution front-end; requires a square input.
    pub conv_filters: Option<usize>,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Architecture {
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        Architecture {
            input_dim,
            conv_filters: None,
            hidden: hidden.to_vec(),
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 || self.hidden.contains(&0) {
            return Err(FslError::Config(format!("degenerate architecture {self:?}")));
        }
        if let Some(filters) = self.conv_filters {
            let side = image_side(self.input_dim).ok_or_else(|| {
                FslError::Config(format!(
                    "convolution front-end needs a square input, got dim {}",
                    self.input_dim
                ))
            })?;
            if filters == 0 || pooled_side(side.max(CONV_K)) == 0 || side < CONV_K + 1 {
                return Err(FslError::Config(format!(
                    "convolution front-end does not fit a {side}×{side} input"
                )));
            }
        }
        Ok(())
    }

    fn layer_kinds(&self) -> Vec<(LayerKind, usize, usize)> {
        let mut out = Vec::new();
        let mut width = self.input_dim;
        if let Some(filters) = self.conv_filters {
            let side = image_side(self.input_dim).unwrap_or(0);
            let kind = LayerKind::Conv { side, filters };
            let out_dim = filters * pooled_side(side).pow(2);
            out.push((kind, width, out_dim));
            width = out_dim;
        }
        for &h in self.hidden.iter().chain(std::iter::once(&self.classes)) {
            out.push((LayerKind::Dense, width, h));
            width = h;
        }
        out
    }
}

/// Side length of a square image with `dim` pixels, if there is one.
pub fn image_side(dim: usize) -> Option<usize> {
    let side = (dim as f64).sqrt().round() as usize;
    (side * side == dim).then_some(side)
}

/// Layered model parameters with a canonical flat view: layers in order,
/// each contributing its weights row-major followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    layers: Vec<Layer>,
}

impl ParameterSet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(FslError::Config("model has no layers".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            match layer.kind {
                LayerKind::Dense => {
                    if layer.weights.nrows() != layer.bias.len() {
                        return Err(FslError::Config(format!(
                            "layer {l}: {} weight rows vs {} biases",
                            layer.weights.nrows(),
                            layer.bias.len()
                        )));
                    }
                }
                LayerKind::Conv { filters, .. } => {
                    if l != 0 {
                        return Err(FslError::Config(
                            "convolution is only supported as the first layer".into(),
                        ));
                    }
                    if layer.weights.dim() != (filters, CONV_K * CONV_K) || layer.bias.len() != filters {
                        return Err(FslError::Config(format!(
                            "layer {l}: convolution parameters have the wrong shape"
                        )));
                    }
                }
            }
            if l + 1 < layers.len() && layer.out_dim() != layers[l + 1].in_dim() {
                return Err(FslError::Config(format!(
                    "layer {l} outputs {} values but layer {} expects {}",
                    layer.out_dim(),
                    l + 1,
                    layers[l + 1].in_dim()
                )));
            }
        }
        if layers.last().map(|l| l.kind) != Some(LayerKind::Dense) {
            return Err(FslError::Config("the output layer must be dense".into()));
        }
        Ok(ParameterSet { layers })
    }

    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_kinds()
            .into_iter()
            .map(|(kind, input, output)| {
                let (rows, cols, nb) = match kind {
                    LayerKind::Dense => (output, input, output),
                    LayerKind::Conv { filters, .. } => (filters, CONV_K * CONV_K, filters),
                };
                Layer {
                    kind,
                    weights: Array2::zeros((rows, cols)),
                    bias: Array1::zeros(nb),
                }
            })
            .collect();
        ParameterSet::new(layers)
    }

    /// Uniform fan-in initialisation, `U(-1/√fan_in, 1/√fan_in)` for weights
    /// and biases alike.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let mut p = ParameterSet::zeros(arch)?;
        for layer in &mut p.layers {
            let fan_in = layer.weights.ncols() as f64;
            let bound = 1.0 / fan_in.sqrt();
            layer.weights.mapv_inplace(|_| rng.random_range(-bound..bound));
            layer.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(p)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn last_layer(&self) -> &Layer {
        self.layers.last().expect("non-empty by construction")
    }

    /// `(in, out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim(), l.out_dim())).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.last_layer().out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn last_layer_params(&self) -> usize {
        self.last_layer().num_params()
    }

    pub fn same_shape(&self, other: &ParameterSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.kind == b.kind && a.weights.dim() == b.weights.dim() && a.bias.len() == b.bias.len())
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend(layer.weights.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    /// Rebuild a parameter set with `self`'s shape from a flat vector.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(FslError::Input(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for layer in &mut out.layers {
            for w in layer.weights.iter_mut() {
                *w = flat[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = flat[offset];
                offset += 1;
            }
        }
        Ok(out)
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ParameterSet) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(alpha, &b.weights);
            a.bias.scaled_add(alpha, &b.bias);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for layer in &mut self.layers {
            layer.weights *= alpha;
            layer.bias *= alpha;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Training or evaluation examples: one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(FslError::Input(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Dense {
        input: Array2<f64>,
        pre_activation: Array2<f64>,
    },
    Conv {
        patches: Array2<f64>,
        pre_activation: Array2<f64>,
        /// For each pooled output (row-major `batch × filters·pooled²`), the
        /// flat index into the conv map that won the max.
        argmax: Vec<usize>,
        batch: usize,
    },
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    logits: Array2<f64>,
    probs: Array2<f64>,
    dims: Vec<(usize, usize)>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    /// Input to the output layer, `a^{L-1}`.
    pub fn penultimate(&self) -> ArrayView2<'_, f64> {
        match self.layers.last() {
            Some(LayerCache::Dense { input, .. }) => input.view(),
            _ => unreachable!("output layer is dense"),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.logits.nrows()
    }
}

pub fn forward(model: &ParameterSet, batch: &Batch) -> Result<ForwardCache> {
    check_labels(model, &batch.labels)?;
    forward_inputs(model, batch.inputs.view())
}

/// Forward pass on raw inputs: ReLU after every hidden layer, identity output
/// layer followed by a row-wise softmax.
pub fn forward_inputs(model: &ParameterSet, inputs: ArrayView2<'_, f64>) -> Result<ForwardCache> {
    if inputs.ncols() != model.input_dim() {
        return Err(FslError::Config(format!(
            "input has {} features, model expects {}",
            inputs.ncols(),
            model.input_dim()
        )));
    }
    let n_layers = model.layers.len();
    let mut caches = Vec::with_capacity(n_layers);
    let mut current = inputs.to_owned();
    for (l, layer) in model.layers.iter().enumerate() {
        let last = l + 1 == n_layers;
        match layer.kind {
            LayerKind::Dense => {
                let mut z = current.dot(&layer.weights.t());
                z += &layer.bias;
                let next = if last { z.clone() } else { z.mapv(relu) };
                caches.push(LayerCache::Dense {
                    input: current,
                    pre_activation: z,
                });
                current = next;
            }
            LayerKind::Conv { side, filters } => {
                let (cache, out) = conv_forward(layer, side, filters, current.view());
                caches.push(cache);
                current = out;
            }
        }
    }
    let logits = current;
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"));
    }
    if probs.iter().any(|p| p.is_nan()) {
        return Err(FslError::Numeric {
            message: "non-finite logits in forward pass".into(),
            residual: f64::NAN,
        });
    }
    Ok(ForwardCache {
        layers: caches,
        logits,
        probs,
        dims: model.layer_dims(),
    })
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn conv_forward(layer: &Layer, side: usize, filters: usize, input: ArrayView2<'_, f64>) -> (LayerCache, Array2<f64>) {
    let batch = input.nrows();
    let cs = conv_side(side);
    let ps = pooled_side(side);
    // im2col: one row per (example, output position), 9 taps each
    let mut patches = Array2::<f64>::zeros((batch * cs * cs, CONV_K * CONV_K));
    for b in 0..batch {
        let img = input.row(b);
        for r in 0..cs {
            for c in 0..cs {
                let mut row = patches.row_mut(b * cs * cs + r * cs + c);
                for dr in 0..CONV_K {
                    for dc in 0..CONV_K {
                        row[dr * CONV_K + dc] = img[(r + dr) * side + c + dc];
                    }
                }
            }
        }
    }
    // (batch·cs²) × filters
    let mut z = patches.dot(&layer.weights.t());
    z += &layer.bias;
    let mut out = Array2::<f64>::zeros((batch, filters * ps * ps));
    let mut argmax = vec![0usize; batch * filters * ps * ps];
    for b in 0..batch {
        for f in 0..filters {
            for pr in 0..ps {
                for pc in 0..ps {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_pos = 0;
                    for dr in 0..POOL {
                        for dc in 0..POOL {
                            let pos = (pr * POOL + dr) * cs + pc * POOL + dc;
                            let v = relu(z[[b * cs * cs + pos, f]]);
                            if v > best {
                                best = v;
                                best_pos = pos;
                            }
                        }
                    }
                    let o = f * ps * ps + pr * ps + pc;
                    out[[b, o]] = best;
                    argmax[b * filters * ps * ps + o] = best_pos;
                }
            }
        }
    }
    (
        LayerCache::Conv {
            patches,
            pre_activation: z,
            argmax,
            batch,
        },
        out,
    )
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(FslError::Input("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(FslError::Numeric {
            message: "softmax input is not finite".into(),
            residual: f64::NAN,
        });
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

fn one_hot_index(y: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in y.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err(FslError::Input("label vector has several ones".into()));
            }
            hot = Some(i);
        } else if v != 0.0 {
            return Err(FslError::Input(format!("label vector entry {v} is not 0/1")));
        }
    }
    hot.ok_or_else(|| FslError::Input("label vector has no hot entry".into()))
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; classes];
    y[class] = 1.0;
    y
}

/// `-Σ y_k ln p_k` with `p` clamped at [`LOG_CLAMP`].
pub fn cross_entropy(probs: &[f64], y: &[f64]) -> Result<f64> {
    if probs.len() != y.len() {
        return Err(FslError::Input(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            y.len()
        )));
    }
    let k = one_hot_index(y)?;
    Ok(-probs[k].max(LOG_CLAMP).ln())
}

/// Output-layer error `δ_i = p_i − y_i` for softmax over identity logits.
pub fn output_delta(probs: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if probs.len() != y.len() {
        return Err(FslError::Input(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            y.len()
        )));
    }
    one_hot_index(y)?;
    Ok(probs.iter().zip(y).map(|(p, t)| p - t).collect())
}

fn check_labels(model: &ParameterSet, labels: &[usize]) -> Result<()> {
    let classes = model.num_classes();
    match labels.iter().find(|&&y| y >= classes) {
        Some(y) => Err(FslError::Input(format!("label {y} out of range for {classes} classes"))),
        None => Ok(()),
    }
}

/// Mean cross-entropy of a forward pass against integer labels.
pub fn batch_loss(cache: &ForwardCache, labels: &[usize]) -> f64 {
    let n = labels.len().max(1) as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -cache.probs[[i, y]].max(LOG_CLAMP).ln())
        .sum::<f64>()
        / n
}

/// Mean gradient of the cross-entropy over the batch.
pub fn backward(model: &ParameterSet, cache: &ForwardCache, labels: &[usize]) -> Result<ParameterSet> {
    let n = cache.batch_size();
    if cache.dims != model.layer_dims() || labels.len() != n {
        return Err(FslError::Internal(
            "forward cache does not match the model or labels".into(),
        ));
    }
    check_labels(model, labels)?;
    let inv_n = 1.0 / n as f64;
    // δ^L = (p − y) / n
    let mut delta = cache.probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        delta[[i, y]] -= 1.0;
    }
    delta *= inv_n;

    let mut grads = model.zeros_like();
    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        match (&cache.layers[l], layer.kind) {
            (LayerCache::Dense { input, .. }, LayerKind::Dense) => {
                grads.layers[l].weights = delta.t().dot(input);
                grads.layers[l].bias = delta.sum_axis(Axis(0));
                if l > 0 {
                    let mut prev = delta.dot(&layer.weights);
                    match &cache.layers[l - 1] {
                        LayerCache::Dense { pre_activation, .. } => {
                            Zip::from(&mut prev).and(pre_activation).for_each(|d, &z| {
                                if z <= 0.0 {
                                    *d = 0.0
                                }
                            });
                        }
                        // pooled outputs are max(relu(z)) ≥ 0; the ReLU mask
                        // is applied while routing through the pool
                        LayerCache::Conv { .. } => {}
                    }
                    delta = prev;
                }
            }
            (
                LayerCache::Conv {
                    patches,
                    pre_activation,
                    argmax,
                    batch,
                },
                LayerKind::Conv { side, filters },
            ) => {
                let cs = conv_side(side);
                let ps = pooled_side(side);
                let mut dz = Array2::<f64>::zeros(pre_activation.raw_dim());
                for b in 0..*batch {
                    for f in 0..filters {
                        for o in 0..ps * ps {
                            let idx = f * ps * ps + o;
                            let pos = argmax[b * filters * ps * ps + idx];
                            let row = b * cs * cs + pos;
                            if pre_activation[[row, f]] > 0.0 {
                                dz[[row, f]] += delta[[b, idx]];
                            }
                        }
                    }
                }
                grads.layers[l].weights = dz.t().dot(patches);
                grads.layers[l].bias = dz.sum_axis(Axis(0));
            }
            _ => {
                return Err(FslError::Internal("layer kind mismatch in cache".into()));
            }
        }
    }
    Ok(grads)
}

/// One momentum-SGD step: `v ← μ·v + g`, `w ← w − η·v`.
pub fn sgd_step(
    model: &mut ParameterSet,
    grads: &ParameterSet,
    lr: f64,
    momentum: f64,
    velocity: &mut ParameterSet,
) -> Result<()> {
    if !model.same_shape(grads) || !model.same_shape(velocity) {
        return Err(FslError::Internal("sgd_step shape mismatch".into()));
    }
    for ((w, g), v) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(velocity.layers.iter_mut())
    {
        v.weights *= momentum;
        v.weights += &g.weights;
        w.weights.scaled_add(-lr, &v.weights);
        v.bias *= momentum;
        v.bias += &g.bias;
        w.bias.scaled_add(-lr, &v.bias);
    }
    Ok(())
}

/// `flatten(global.last − local.last)`: weights row-major, then bias.
pub fn last_layer_pseudo_gradient(global: &ParameterSet, local: &ParameterSet) -> Result<Vec<f64>> {
    if !global.same_shape(local) {
        return Err(FslError::Input(
            "global and local models have different architectures".into(),
        ));
    }
    let (g, l) = (global.last_layer(), local.last_layer());
    Ok(g.weights
        .iter()
        .zip(l.weights.iter())
        .chain(g.bias.iter().zip(l.bias.iter()))
        .map(|(a, b)| a - b)
        .collect())
}

/// Full-model pseudo-gradient `flatten(global − local)`.
pub fn pseudo_gradient(global: &ParameterSet, local: &ParameterSet) -> Result<Vec<f64>> {
    if !global.same_shape(local) {
        return Err(FslError::Input(
            "global and local models have different architectures".into(),
        ));
    }
    Ok(global
        .flatten()
        .iter()
        .zip(local.flatten())
        .map(|(a, b)| a - b)
        .collect())
}

/// Argmax class per row (first maximum wins).
pub fn predict(cache: &ForwardCache) -> Vec<usize> {
    cache
        .probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Copy the rows `indices` of `inputs` into a contiguous batch.
pub fn gather_rows(inputs: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), inputs.ncols()));
    for (dst, &src) in indices.iter().enumerate() {
        out.slice_mut(s![dst, ..]).assign(&inputs.row(src));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_model_gives_zero_logits() {
        let arch = Architecture::mlp(4, &[3], 2);
        let model = ParameterSet::zeros(&arch).unwrap();
        let batch = Batch::new(array![[0.3, 0.1, 0.9, 0.2]], vec![1]).unwrap();
        let cache = forward(&model, &batch).unwrap();
        assert!(cache.logits().iter().all(|&v| v == 0.0));
        assert_eq!(cache.probs().row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Layer::dense(Array2::eye(3), Array1::zeros(3)).unwrap();
        let model = ParameterSet::new(vec![layer]).unwrap();
        let x = array![[0.25, -1.5, 2.0]];
        let cache = forward_inputs(&model, x.view()).unwrap();
        assert_eq!(cache.logits(), &x);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let model = ParameterSet::zeros(&Architecture::mlp(4, &[3], 2)).unwrap();
        let x = Array2::zeros((1, 5));
        assert!(matches!(forward_inputs(&model, x.view()), Err(FslError::Config(_))));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-7.5, 0.0, 3.25, 900.0] {
            let p = softmax(&[c; 4]).unwrap();
            assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);
        assert!(p[1] < 1e-300);
        assert!(softmax(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let y = one_hot(2, 4);
        assert_eq!(cross_entropy(&y, &y).unwrap(), 0.0);
        let uniform = vec![0.1; 10];
        assert_abs_diff_eq!(
            cross_entropy(&uniform, &one_hot(7, 10)).unwrap(),
            std::f64::consts::LN_10,
            epsilon = 1e-12
        );
        let loss = cross_entropy(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(loss, -(1e-12f64).ln());
        assert!(cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).is_err());
        assert!(cross_entropy(&[0.5, 0.5], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn output_delta_examples() {
        let y = one_hot(1, 3);
        assert_eq!(output_delta(&y, &y).unwrap(), vec![0.0; 3]);
        let d = output_delta(&[0.7, 0.3], &[0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(d[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], -0.7, epsilon = 1e-15);
    }

    #[test]
    fn last_bias_gradient_is_output_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ParameterSet::init(&Architecture::mlp(5, &[4], 3), &mut rng).unwrap();
        let batch = Batch::new(array![[0.1, 0.5, 0.9, 0.0, 0.3]], vec![2]).unwrap();
        let cache = forward(&model, &batch).unwrap();
        let grads = backward(&model, &cache, &batch.labels).unwrap();
        let delta = output_delta(&cache.probs().row(0).to_vec(), &one_hot(2, 3)).unwrap();
        assert_eq!(grads.last_layer().bias.to_vec(), delta);
        // weights: δ ⊗ a^{L-1}
        let a = cache.penultimate().row(0).to_owned();
        for (i, d) in delta.iter().enumerate() {
            for j in 0..4 {
                assert_abs_diff_eq!(grads.last_layer().weights[[i, j]], d * a[j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn duplicated_example_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = ParameterSet::init(&Architecture::mlp(3, &[5], 4), &mut rng).unwrap();
        let one = Batch::new(array![[0.2, 0.7, 0.4]], vec![3]).unwrap();
        let two = Batch::new(array![[0.2, 0.7, 0.4], [0.2, 0.7, 0.4]], vec![3, 3]).unwrap();
        let g1 = backward(&model, &forward(&model, &one).unwrap(), &one.labels).unwrap();
        let g2 = backward(&model, &forward(&model, &two).unwrap(), &two.labels).unwrap();
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let a = ParameterSet::zeros(&Architecture::mlp(3, &[5], 4)).unwrap();
        let b = ParameterSet::zeros(&Architecture::mlp(3, &[6], 4)).unwrap();
        let batch = Batch::new(array![[0.2, 0.7, 0.4]], vec![0]).unwrap();
        let cache = forward(&a, &batch).unwrap();
        assert!(matches!(
            backward(&b, &cache, &batch.labels),
            Err(FslError::Internal(_))
        ));
    }

    #[test]
    fn sgd_vanilla_and_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let arch = Architecture::mlp(3, &[2], 2);
        let w0 = ParameterSet::init(&arch, &mut rng).unwrap();
        let g = ParameterSet::init(&arch, &mut rng).unwrap();

        let mut w = w0.clone();
        let mut v = w0.zeros_like();
        sgd_step(&mut w, &g, 0.1, 0.0, &mut v).unwrap();
        for ((a, b), c) in w.flatten().iter().zip(w0.flatten()).zip(g.flatten()) {
            assert_eq!(*a, b - 0.1 * c);
        }

        let mut w = w0.clone();
        let mut v = w0.zeros_like();
        sgd_step(&mut w, &w0.zeros_like(), 0.1, 0.9, &mut v).unwrap();
        assert_eq!(w, w0);
    }

    #[test]
    fn sgd_two_momentum_steps_match_hand_recurrence() {
        let layer = Layer::dense(array![[1.0]], array![0.5]).unwrap();
        let mut w = ParameterSet::new(vec![layer]).unwrap();
        let g1 = w.unflatten_like(&[2.0, -1.0]).unwrap();
        let g2 = w.unflatten_like(&[1.0, 4.0]).unwrap();
        let mut v = w.zeros_like();
        sgd_step(&mut w, &g1, 0.1, 0.9, &mut v).unwrap();
        sgd_step(&mut w, &g2, 0.1, 0.9, &mut v).unwrap();
        // v1 = g1, w1 = w0 − 0.1·g1; v2 = 0.9·g1 + g2, w2 = w1 − 0.1·v2
        // weight: v2 = 2.8, w = 1 − 0.2 − 0.28 = 0.52
        // bias:   v2 = 3.1, w = 0.5 + 0.1 − 0.31 = 0.29
        assert_abs_diff_eq!(w.flatten()[0], 0.52, epsilon = 1e-12);
        assert_abs_diff_eq!(w.flatten()[1], 0.29, epsilon = 1e-12);
        assert_abs_diff_eq!(v.flatten()[0], 2.8, epsilon = 1e-12);
        assert_abs_diff_eq!(v.flatten()[1], 3.1, epsilon = 1e-12);
    }

    #[test]
    fn pseudo_gradient_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let arch = Architecture::mlp(784, &[32], 10);
        let global = ParameterSet::init(&arch, &mut rng).unwrap();
        let pg = last_layer_pseudo_gradient(&global, &global).unwrap();
        assert_eq!(pg.len(), 330);
        assert!(pg.iter().all(|&v| v == 0.0));

        let g = ParameterSet::init(&arch, &mut rng).unwrap();
        let mut local = global.clone();
        let mut v = global.zeros_like();
        sgd_step(&mut local, &g, 0.01, 0.0, &mut v).unwrap();
        let pg = last_layer_pseudo_gradient(&global, &local).unwrap();
        let expected: Vec<f64> = g
            .last_layer()
            .weights
            .iter()
            .chain(g.last_layer().bias.iter())
            .map(|x| 0.01 * x)
            .collect();
        for (a, b) in pg.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }

        let other = ParameterSet::zeros(&Architecture::mlp(784, &[16], 10)).unwrap();
        assert!(last_layer_pseudo_gradient(&global, &other).is_err());
    }

    #[test]
    fn conv_front_end_shapes() {
        let arch = Architecture {
            input_dim: 784,
            conv_filters: Some(8),
            hidden: vec![16],
            classes: 10,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = ParameterSet::init(&arch, &mut rng).unwrap();
        assert_eq!(model.layer_dims(), vec![(784, 8 * 13 * 13), (1352, 16), (16, 10)]);
        assert_eq!(model.num_params(), 8 * 9 + 8 + 1352 * 16 + 16 + 16 * 10 + 10);
        let x = Array2::from_elem((2, 784), 0.5);
        let cache = forward_inputs(&model, x.view()).unwrap();
        assert_eq!(cache.probs().dim(), (2, 10));
    }

    #[test]
    fn invalid_layer_chains_are_rejected() {
        let a = Layer::dense(Array2::zeros((3, 4)), Array1::zeros(3)).unwrap();
        let b = Layer::dense(Array2::zeros((2, 5)), Array1::zeros(2)).unwrap();
        assert!(ParameterSet::new(vec![a, b]).is_err());
        assert!(Layer::dense(Array2::zeros((3, 4)), Array1::zeros(2)).is_err());
    }
}
