//! Weight decay: Frobenius decay `(λ/2)‖UVᵀ‖²_F` on factorized pairs and
//! plain ℓ2 decay `(λ/2)‖W‖²_F` on full-rank weights. Biases are exempt.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LowRankDecay {
    #[default]
    Frobenius,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayConfig {
    pub lambda: f64,
    /// Decay applied to factorized pairs; full-rank weights always get ℓ2.
    #[serde(default)]
    pub low_rank: LowRankDecay,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self {
            lambda: 5e-4,
            low_rank: LowRankDecay::Frobenius,
        }
    }
}

impl DecayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("decay lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `(λ·UVᵀV, λ·UᵀUVᵀ)` with the shared product `P = UVᵀ` formed once.
pub fn frobenius_decay_grads(u: &DenseMatrix, v_t: &DenseMatrix, lambda: f64) -> Result<(DenseMatrix, DenseMatrix)> {
    frobenius_decay_grads_with(u, v_t, lambda, &mut |a, b| a.matmul(b))
}

/// [`frobenius_decay_grads`] with a caller-supplied matrix product.
///
/// For `λ > 0`, `mul` is invoked exactly three times: `U·Vᵀ`, `P·V`, `Uᵀ·P`.
pub fn frobenius_decay_grads_with(
    u: &DenseMatrix,
    v_t: &DenseMatrix,
    lambda: f64,
    mul: &mut dyn FnMut(&DenseMatrix, &DenseMatrix) -> Result<DenseMatrix>,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if u.cols() != v_t.rows() {
        return Err(Error::Shape(format!(
            "U is {}x{} but Vᵀ is {}x{}",
            u.rows(),
            u.cols(),
            v_t.rows(),
            v_t.cols()
        )));
    }
    if lambda == 0.0 {
        return Ok((DenseMatrix::zeros(u.rows(), u.cols()), DenseMatrix::zeros(v_t.rows(), v_t.cols())));
    }
    let p = mul(u, v_t)?;
    let grad_u = mul(&p, &v_t.transpose())?;
    let grad_v_t = mul(&u.transpose(), &p)?;
    Ok((grad_u.scale(lambda), grad_v_t.scale(lambda)))
}

/// `λ·w`, elementwise.
pub fn l2_decay_grad(w: &[f64], lambda: f64) -> Vec<f64> {
    if lambda == 0.0 {
        return vec![0.0; w.len()];
    }
    w.iter().map(|x| lambda * x).collect()
}
