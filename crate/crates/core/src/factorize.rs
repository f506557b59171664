//! Truncated spectral factorization of layer weights and the plan that
//! decides which layers are factorized at which rank.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conv::{roll_conv, unroll_conv};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::{Network, Weights};
use crate::rank::{estimate_rank, RankEstimatorConfig};
use crate::svd::{singular_values, svd};
use crate::tensor::{ConvKernel, DenseMatrix, WeightTensor};
use crate::trajectory::TrajectorySet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Dense,
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
}

/// `W ≈ U · Vᵀ` with `U: m_eff × r` and `Vᵀ: r × n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedPair {
    pub u: DenseMatrix,
    pub v_t: DenseMatrix,
    pub rank: usize,
    pub origin: Origin,
}

/// Rank-`r` truncation of `Ũ·Σ^{1/2}` and `Σ^{1/2}·Ṽᵀ`.
pub fn spectral_factorize(w: &DenseMatrix, r: usize) -> Result<FactorizedPair> {
    let full = w.rows().min(w.cols());
    if r == 0 || r > full {
        return Err(Error::Rank(format!(
            "rank {r} outside 1..={full} for a {}x{} matrix",
            w.rows(),
            w.cols()
        )));
    }
    let s = svd(w)?;
    let roots: Vec<f64> = s.singular[..r].iter().map(|x| x.sqrt()).collect();
    let mut u = s.left.leading_cols(r);
    for i in 0..u.rows() {
        for (j, root) in roots.iter().enumerate() {
            u.set(i, j, u.get(i, j) * root);
        }
    }
    let mut v_t = s.right_t.leading_rows(r);
    let n = v_t.cols();
    for (j, root) in roots.iter().enumerate() {
        v_t.data_mut()[j * n..(j + 1) * n].iter_mut().for_each(|x| *x *= root);
    }
    Ok(FactorizedPair {
        u,
        v_t,
        rank: r,
        origin: Origin::Dense,
    })
}

/// Factorize a dense matrix or conv kernel; conv kernels are unrolled first.
pub fn factorize_tensor(w: &WeightTensor, r: usize) -> Result<FactorizedPair> {
    match w {
        WeightTensor::Dense(m) => spectral_factorize(m, r),
        WeightTensor::Conv(k) => {
            let mut pair = spectral_factorize(&unroll_conv(k), r)?;
            pair.origin = Origin::Conv {
                in_channels: k.in_channels(),
                out_channels: k.out_channels(),
                kernel: k.kernel(),
            };
            Ok(pair)
        }
    }
}

/// Thin `k×k` conv with `r` filters followed by a `1×1` conv to `n` channels.
pub fn reshape_to_conv(pair: &FactorizedPair) -> Result<(ConvKernel, ConvKernel)> {
    let Origin::Conv { in_channels, kernel, .. } = pair.origin else {
        return Err(Error::Origin("reshape_to_conv needs a conv-origin pair".into()));
    };
    let thin = roll_conv(&pair.u, in_channels, kernel)?;
    let project = roll_conv(&pair.v_t, pair.rank, 1)?;
    Ok((thin, project))
}

/// True iff a rank-`r` pair has strictly fewer weights than the `m × n` original.
pub fn break_even(m: usize, n: usize, r: usize) -> bool {
    r * (m + n) < m * n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer: usize,
    pub rank: usize,
    pub skip: bool,
}

/// Switch epoch, unfactorized prefix, and per-layer ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationPlan {
    pub switch_epoch: usize,
    #[serde(rename = "K")]
    pub prefix: usize,
    pub estimator: RankEstimatorConfig,
    pub ranks: Vec<PlanEntry>,
}

impl FactorizationPlan {
    pub fn active(&self) -> impl Iterator<Item = &PlanEntry> {
        self.ranks.iter().filter(|e| !e.skip)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// The matrix a weight tensor applies: itself, or the unrolled kernel.
pub fn effective_matrix(w: &WeightTensor) -> DenseMatrix {
    match w {
        WeightTensor::Dense(m) => m.clone(),
        WeightTensor::Conv(k) => unroll_conv(k),
    }
}

/// Plan over layers `prefix+1 .. num_layers-1` (1-based) from their current weights.
///
/// `weights` maps layer index to its full-rank tensor; scale factors come
/// from the trajectories.
pub fn build_plan_from_weights(
    weights: &BTreeMap<usize, WeightTensor>,
    num_layers: usize,
    trajectories: &TrajectorySet,
    prefix: usize,
    switch_epoch: usize,
    estimator: &RankEstimatorConfig,
    exec: Execution,
) -> Result<FactorizationPlan> {
    estimator.validate()?;
    let candidates: Vec<usize> = (prefix + 1..num_layers).collect();
    let mut inputs = Vec::with_capacity(candidates.len());
    for &layer in &candidates {
        let w = weights
            .get(&layer)
            .ok_or_else(|| Error::Plan(format!("layer {layer}: no full-rank weights available")))?;
        let xi = trajectories
            .get(layer)
            .ok_or_else(|| Error::Plan(format!("layer {layer}: no rank trajectory / scale factor")))?
            .xi;
        inputs.push((layer, effective_matrix(w), xi));
    }
    let results = exec::map(exec, &inputs, |(layer, m, xi)| -> Result<PlanEntry> {
        let sigma = singular_values(m).map_err(|e| Error::Plan(format!("layer {layer}: {e}")))?;
        let rank = estimate_rank(&sigma, *xi, estimator)?;
        Ok(PlanEntry {
            layer: *layer,
            rank,
            skip: !break_even(m.rows(), m.cols(), rank),
        })
    });
    Ok(FactorizationPlan {
        switch_epoch,
        prefix,
        estimator: *estimator,
        ranks: results.into_iter().collect::<Result<_>>()?,
    })
}

/// [`build_plan_from_weights`] on a network's current full-rank layers.
pub fn build_plan(
    model: &Network,
    trajectories: &TrajectorySet,
    prefix: usize,
    switch_epoch: usize,
    estimator: &RankEstimatorConfig,
) -> Result<FactorizationPlan> {
    let weights = model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.weight_tensor().map(|w| (i + 1, w)))
        .collect();
    build_plan_from_weights(
        &weights,
        model.num_layers(),
        trajectories,
        prefix,
        switch_epoch,
        estimator,
        Execution::Parallel,
    )
}

/// Replace every non-skipped layer of `plan` by its factorized pair.
///
/// Biases stay with the layer and are applied after the `Vᵀ` stage.
pub fn apply_plan(model: &Network, plan: &FactorizationPlan) -> Result<Network> {
    let num_layers = model.num_layers();
    for e in &plan.ranks {
        if e.layer <= plan.prefix || e.layer >= num_layers {
            return Err(Error::Plan(format!(
                "layer {}: outside the factorizable range {}..{}",
                e.layer,
                plan.prefix + 1,
                num_layers
            )));
        }
    }
    let active: Vec<PlanEntry> = plan.active().copied().collect();
    let factored = exec::map(Execution::Parallel, &active, |e| -> Result<(usize, FactorizedPair)> {
        let layer = &model.layers[e.layer - 1];
        let Weights::Full(w) = &layer.weights else {
            return Err(Error::Plan(format!("layer {}: already factorized", e.layer)));
        };
        if e.rank == 0 || e.rank > layer.kind.full_rank() {
            return Err(Error::Plan(format!(
                "layer {}: rank {} outside 1..={}",
                e.layer,
                e.rank,
                layer.kind.full_rank()
            )));
        }
        let mut pair = spectral_factorize(w, e.rank)?;
        pair.origin = layer.kind.origin();
        Ok((e.layer, pair))
    });
    let mut out = model.clone();
    for r in factored {
        let (layer, pair) = r?;
        out.layers[layer - 1].weights = Weights::LowRank(pair);
    }
    Ok(out)
}

/// Shape summary used for parameter and FLOP accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    /// Unrolled input width `m·k²`.
    pub rows: usize,
    pub cols: usize,
    /// Output positions per sample (`H·W` for conv, 1 for dense).
    pub positions: usize,
    pub rank: Option<usize>,
    pub bias: bool,
}

impl LayerShape {
    pub fn params(&self) -> usize {
        let w = match self.rank {
            None => self.rows * self.cols,
            Some(r) => r * (self.rows + self.cols),
        };
        w + if self.bias { self.cols } else { 0 }
    }

    /// Multiply-accumulates of one forward pass over `batch` samples.
    pub fn macs(&self, batch: usize) -> usize {
        let per_position = match self.rank {
            None => self.rows * self.cols,
            Some(r) => r * (self.rows + self.cols),
        };
        batch * self.positions * per_position
    }
}

pub fn layer_shapes(model: &Network) -> Vec<LayerShape> {
    model
        .layers
        .iter()
        .map(|l| LayerShape {
            rows: l.kind.rows(),
            cols: l.kind.cols(),
            positions: l.kind.positions(),
            rank: match &l.weights {
                Weights::Full(_) => None,
                Weights::LowRank(p) => Some(p.rank),
            },
            bias: true,
        })
        .collect()
}

pub fn param_count(model: &Network) -> usize {
    model.param_count()
}

/// Forward-pass multiply-accumulate count for `batch` samples.
pub fn flops_estimate(model: &Network, batch: usize) -> usize {
    layer_shapes(model).iter().map(|s| s.macs(batch)).sum()
}

/// Parameters held by the layers a plan factorizes, before and after.
pub fn factorized_layer_params(before: &Network, after: &Network, plan: &FactorizationPlan) -> (usize, usize) {
    plan.active().fold((0, 0), |(b, a), e| {
        (
            b + before.layers[e.layer - 1].param_count(),
            a + after.layers[e.layer - 1].param_count(),
        )
    })
}
