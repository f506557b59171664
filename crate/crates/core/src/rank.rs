//! Rank estimates derived from a layer's singular value spectrum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ConvKernel;

/// Default coverage fraction for [`EstimatorMode::MaxRule`].
pub const DEFAULT_ACCUM_FRACTION: f64 = 0.8;

/// Per-layer calibration fixed from the layer's spectrum at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactor {
    pub layer: usize,
    pub xi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    Stable,
    ScaledStable,
    MaxRule,
}

impl std::str::FromStr for EstimatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stable" => Ok(Self::Stable),
            "scaled_stable" => Ok(Self::ScaledStable),
            "max_rule" => Ok(Self::MaxRule),
            other => Err(Error::Config(format!("unknown estimator mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankEstimatorConfig {
    pub mode: EstimatorMode,
    /// Fraction of total singular-value mass for the accumulative rank.
    pub p: f64,
}

impl Default for RankEstimatorConfig {
    fn default() -> Self {
        Self {
            mode: EstimatorMode::ScaledStable,
            p: DEFAULT_ACCUM_FRACTION,
        }
    }
}

impl RankEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("accumulative fraction p = {} not in [0, 1]", self.p)));
        }
        Ok(())
    }
}

fn check_spectrum(singular: &[f64]) -> Result<f64> {
    let top = *singular
        .first()
        .ok_or_else(|| Error::DegenerateSpectrum("empty spectrum".into()))?;
    if !(top > 0.0) || !top.is_finite() {
        return Err(Error::DegenerateSpectrum(format!("leading singular value {top}")));
    }
    Ok(top)
}

/// `Σσᵢ² / σ₁²` for a descending spectrum.
pub fn stable_rank(singular: &[f64]) -> Result<f64> {
    let top = check_spectrum(singular)?;
    let energy: f64 = singular.iter().map(|s| s * s).sum();
    Ok(energy / (top * top))
}

/// `ξ = full_rank / stable_rank(Σ⁰)`.
pub fn scale_factor(layer: usize, singular_epoch0: &[f64], full_rank: usize) -> Result<ScaleFactor> {
    let sr = stable_rank(singular_epoch0)?;
    Ok(ScaleFactor {
        layer,
        xi: full_rank as f64 / sr,
    })
}

/// `ξ · stable_rank(σ)`, clamped to the spectrum length.
pub fn scaled_stable_rank(singular: &[f64], xi: f64) -> Result<f64> {
    if !(xi > 0.0) {
        return Err(Error::InvalidInput(format!("scale factor must be positive, got {xi}")));
    }
    let scaled = xi * stable_rank(singular)?;
    Ok(scaled.min(singular.len() as f64))
}

/// Smallest `r ≥ 1` whose leading `r` singular values hold fraction `p` of the total.
pub fn accumulative_rank(singular: &[f64], p: f64) -> usize {
    let total: f64 = singular.iter().sum();
    if total <= 0.0 {
        return 1;
    }
    let target = p * total;
    let mut acc = 0.0;
    for (i, s) in singular.iter().enumerate() {
        acc += s;
        if acc >= target {
            return i + 1;
        }
    }
    // Rounding in the running sum can leave `acc` a hair under `total`.
    singular.len().max(1)
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Integer factorization rank for one layer, always in `[1, full rank]`.
pub fn estimate_rank(singular: &[f64], xi: f64, config: &RankEstimatorConfig) -> Result<usize> {
    let full = singular.len();
    let r = match config.mode {
        EstimatorMode::Stable => round_half_up(stable_rank(singular)?),
        EstimatorMode::ScaledStable => round_half_up(scaled_stable_rank(singular, xi)?),
        EstimatorMode::MaxRule => {
            let scaled = round_half_up(scaled_stable_rank(singular, xi)?);
            scaled.max(accumulative_rank(singular, config.p))
        }
    };
    Ok(r.clamp(1, full.max(1)))
}

/// Rank of the unrolled `(m·k², n)` matrix of a conv kernel.
pub fn unrolled_full_rank(kernel: &ConvKernel) -> usize {
    let k2 = kernel.kernel() * kernel.kernel();
    (kernel.in_channels() * k2).min(kernel.out_channels())
}

pub fn rank_ratio(r: usize, full_rank: usize) -> f64 {
    r as f64 / full_rank as f64
}
