//! Feed-forward networks of dense and convolution layers, each stored either
//! full-rank or as a factorized `(U, Vᵀ)` pair, with reverse-mode gradients.
//!
//! Every weight layer is a linear map `cols · W + b` on some patch matrix
//! `cols`: the activations themselves for dense layers, the unrolled input
//! patches for conv layers. Conv weights are therefore held in unrolled
//! `(m·k², n)` form and only rolled back to 4-D for export.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::factorize::{FactorizedPair, Origin};
use crate::tensor::{DenseMatrix, WeightTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize },
    Conv { filters: usize, kernel: usize, #[serde(default)] padding: usize },
    Flatten,
}

/// Layer list over an input of shape `[channels, height, width]`.
///
/// ReLU follows every weight layer except the last, which produces logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Dense stack `inputs → hidden… → classes`.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers: Vec<LayerSpec> = hidden.iter().map(|&units| LayerSpec::Dense { units }).collect();
        layers.push(LayerSpec::Dense { units: classes });
        Self {
            input: [inputs, 1, 1],
            layers,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv { geom: ConvGeometry, out_channels: usize },
}

impl LayerKind {
    /// Rows of the unrolled weight matrix (`m` or `m·k²`).
    pub fn rows(&self) -> usize {
        match self {
            LayerKind::Dense { inputs, .. } => *inputs,
            LayerKind::Conv { geom, .. } => geom.patch_len(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            LayerKind::Dense { outputs, .. } => *outputs,
            LayerKind::Conv { out_channels, .. } => *out_channels,
        }
    }

    pub fn full_rank(&self) -> usize {
        self.rows().min(self.cols())
    }

    /// Patch rows per sample.
    pub fn positions(&self) -> usize {
        match self {
            LayerKind::Dense { .. } => 1,
            LayerKind::Conv { geom, .. } => geom.positions(),
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            LayerKind::Dense { inputs, .. } => *inputs,
            LayerKind::Conv { geom, .. } => geom.input_len(),
        }
    }

    pub fn output_len(&self) -> usize {
        self.cols() * self.positions()
    }

    pub fn origin(&self) -> Origin {
        match self {
            LayerKind::Dense { .. } => Origin::Dense,
            LayerKind::Conv { geom, out_channels } => Origin::Conv {
                in_channels: geom.in_channels,
                out_channels: *out_channels,
                kernel: geom.kernel,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Weights {
    Full(DenseMatrix),
    LowRank(FactorizedPair),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub weights: Weights,
    pub bias: Vec<f64>,
    pub relu: bool,
}

impl Layer {
    pub fn is_low_rank(&self) -> bool {
        matches!(self.weights, Weights::LowRank(_))
    }

    /// The `(m_eff, n)` matrix this layer applies, multiplied out if factorized.
    pub fn effective_matrix(&self) -> Result<DenseMatrix> {
        match &self.weights {
            Weights::Full(w) => Ok(w.clone()),
            Weights::LowRank(p) => p.u.matmul(&p.v_t),
        }
    }

    /// Native-shape weight tensor of a full-rank layer.
    pub fn weight_tensor(&self) -> Option<WeightTensor> {
        let Weights::Full(w) = &self.weights else {
            return None;
        };
        Some(match self.kind {
            LayerKind::Dense { .. } => WeightTensor::Dense(w.clone()),
            LayerKind::Conv { geom, .. } => {
                WeightTensor::Conv(conv::roll_conv(w, geom.in_channels, geom.kernel).ok()?)
            }
        })
    }

    pub fn param_count(&self) -> usize {
        let w = match &self.weights {
            Weights::Full(w) => w.data().len(),
            Weights::LowRank(p) => p.u.data().len() + p.v_t.data().len(),
        };
        w + self.bias.len()
    }
}

/// A full-rank, low-rank or hybrid network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
}

/// Alias used where a network may mix full-rank and factorized layers.
pub type HybridModel = Network;

impl Network {
    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let kinds = resolve_kinds(spec)?;
        let last = kinds.len() - 1;
        let layers = kinds
            .into_iter()
            .enumerate()
            .map(|(i, kind)| {
                let std = (2.0 / kind.rows() as f64).sqrt();
                Layer {
                    weights: Weights::Full(DenseMatrix::random_normal(kind.rows(), kind.cols(), std, rng)),
                    bias: vec![0.0; kind.cols()],
                    relu: i != last,
                    kind,
                }
            })
            .collect();
        Ok(Self {
            input: spec.input,
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// 1-based layer access, matching plan and report numbering.
    pub fn layer(&self, index: usize) -> Option<&Layer> {
        index.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.kind.output_len())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Logits for a batch of flattened inputs.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut a = x.clone();
        for layer in &self.layers {
            a = layer_forward(layer, &a, Execution::Parallel)?.out;
        }
        Ok(a)
    }

    /// Mean softmax cross-entropy and its gradient for every parameter.
    pub fn forward_backward(&self, x: &DenseMatrix, labels: &[usize], exec: Execution) -> Result<(f64, Gradients)> {
        if x.rows() != labels.len() {
            return Err(Error::Shape(format!("{} samples but {} labels", x.rows(), labels.len())));
        }
        if x.cols() != self.input_len() {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.input_len()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for layer in &self.layers {
            let c = layer_forward(layer, &a, exec)?;
            a = c.out.clone();
            caches.push(c);
        }
        let (loss, mut grad) = softmax_cross_entropy(&a, labels)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                loss,
                partial: None,
            });
        }
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        for (i, (layer, cache)) in self.layers.iter().zip(&caches).enumerate().rev() {
            let (g, dx) = layer_backward(layer, cache, grad, i > 0, exec)?;
            grads.push(g);
            grad = dx.unwrap_or_else(|| DenseMatrix::zeros(0, 0));
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }
}

fn resolve_kinds(spec: &ModelSpec) -> Result<Vec<LayerKind>> {
    let [mut c, mut h, mut w] = spec.input;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("input shape {:?} has a zero dimension", spec.input)));
    }
    let mut flat = h == 1 && w == 1;
    let mut kinds = Vec::new();
    for (i, l) in spec.layers.iter().enumerate() {
        match *l {
            LayerSpec::Flatten => {
                c *= h * w;
                h = 1;
                w = 1;
                flat = true;
            }
            LayerSpec::Dense { units } => {
                if !flat {
                    return Err(Error::Shape(format!("layer spec {i}: dense layer needs a flatten before it")));
                }
                if units == 0 {
                    return Err(Error::Shape(format!("layer spec {i}: zero units")));
                }
                kinds.push(LayerKind::Dense { inputs: c, outputs: units });
                c = units;
            }
            LayerSpec::Conv { filters, kernel, padding } => {
                if kinds.iter().any(|k| matches!(k, LayerKind::Dense { .. })) {
                    return Err(Error::Shape(format!("layer spec {i}: conv after dense layers")));
                }
                if filters == 0 {
                    return Err(Error::Shape(format!("layer spec {i}: zero filters")));
                }
                let geom = ConvGeometry::new(c, h, w, kernel, padding)?;
                kinds.push(LayerKind::Conv { geom, out_channels: filters });
                c = filters;
                h = geom.out_height();
                w = geom.out_width();
                flat = false;
            }
        }
    }
    if kinds.is_empty() {
        return Err(Error::Shape("model has no weight layers".into()));
    }
    Ok(kinds)
}

struct LayerCache {
    cols: DenseMatrix,
    /// `cols · U` for factorized layers.
    hidden: Option<DenseMatrix>,
    out: DenseMatrix,
}

fn layer_forward(layer: &Layer, x: &DenseMatrix, exec: Execution) -> Result<LayerCache> {
    if x.cols() != layer.kind.input_len() {
        return Err(Error::Shape(format!(
            "layer expects {} inputs, got {}",
            layer.kind.input_len(),
            x.cols()
        )));
    }
    let cols = match &layer.kind {
        LayerKind::Dense { .. } => x.clone(),
        LayerKind::Conv { geom, .. } => conv::im2col(x, geom, exec)?,
    };
    let (mut z, hidden) = match &layer.weights {
        Weights::Full(w) => (cols.matmul_with(w, exec)?, None),
        Weights::LowRank(p) => {
            let h = cols.matmul_with(&p.u, exec)?;
            (h.matmul_with(&p.v_t, exec)?, Some(h))
        }
    };
    let n = z.cols();
    for row in z.data_mut().chunks_mut(n) {
        row.iter_mut().zip(&layer.bias).for_each(|(v, b)| *v += b);
    }
    let mut out = match &layer.kind {
        LayerKind::Dense { .. } => z,
        LayerKind::Conv { geom, .. } => conv::positions_to_channels(&z, x.rows(), geom.positions()),
    };
    if layer.relu {
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(LayerCache { cols, hidden, out })
}

fn layer_backward(
    layer: &Layer,
    cache: &LayerCache,
    mut dout: DenseMatrix,
    need_input_grad: bool,
    exec: Execution,
) -> Result<(LayerGrad, Option<DenseMatrix>)> {
    if layer.relu {
        dout.data_mut()
            .iter_mut()
            .zip(cache.out.data())
            .for_each(|(g, &o)| {
                if o <= 0.0 {
                    *g = 0.0
                }
            });
    }
    let batch = dout.rows();
    let dz = match &layer.kind {
        LayerKind::Dense { .. } => dout,
        LayerKind::Conv { geom, .. } => conv::channels_to_positions(&dout, geom.positions()),
    };
    let mut bias = vec![0.0; dz.cols()];
    for row in dz.data().chunks(dz.cols()) {
        bias.iter_mut().zip(row).for_each(|(b, g)| *b += g);
    }
    let (weights, dcols) = match &layer.weights {
        Weights::Full(w) => {
            let dw = cache.cols.t_matmul(&dz)?;
            let dcols = if need_input_grad { Some(dz.matmul_t(w)?) } else { None };
            (WeightGrad::Full(dw), dcols)
        }
        Weights::LowRank(p) => {
            let h = cache.hidden.as_ref().expect("factorized layer caches its hidden product");
            let dv_t = h.t_matmul(&dz)?;
            let dh = dz.matmul_t(&p.v_t)?;
            let du = cache.cols.t_matmul(&dh)?;
            let dcols = if need_input_grad { Some(dh.matmul_t(&p.u)?) } else { None };
            (WeightGrad::LowRank { u: du, v_t: dv_t }, dcols)
        }
    };
    let dx = match (dcols, &layer.kind) {
        (None, _) => None,
        (Some(d), LayerKind::Dense { .. }) => Some(d),
        (Some(d), LayerKind::Conv { geom, .. }) => Some(conv::col2im(&d, batch, geom, exec)?),
    };
    Ok((LayerGrad { weights, bias }, dx))
}

/// Mean cross-entropy of softmax(logits) and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)> {
    let (b, c) = logits.shape();
    if b == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut grad = DenseMatrix::zeros(b, c);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidInput(format!("label {y} out of range for {c} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        let g = &mut grad.data_mut()[i * c..(i + 1) * c];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *gj = (p - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightGrad {
    Full(DenseMatrix),
    LowRank { u: DenseMatrix, v_t: DenseMatrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: WeightGrad,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}
