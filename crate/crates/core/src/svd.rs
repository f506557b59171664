//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! The input is orthogonalized column-pair by column-pair until every pair
//! satisfies `|gᵢ·gⱼ| ≤ tol·‖gᵢ‖‖gⱼ‖`. Column norms are then the singular
//! values. Wide matrices are handled through their transpose.
//!
//! `singular_values` runs the identical rotation sequence without
//! accumulating the right vectors, so its output matches `svd` bit for bit.

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Maximum number of full sweeps over all column pairs.
pub const MAX_SWEEPS: usize = 10_000;
/// Relative off-diagonal tolerance for a column pair.
pub const TOLERANCE: f64 = 1e-12;
/// Singular values below `CLAMP · σ_max` are reported as zero.
pub const CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `rows × rank`, orthonormal columns.
    pub left: DenseMatrix,
    /// Non-increasing, non-negative; `rank = min(rows, cols)` values.
    pub singular: Vec<f64>,
    /// `rank × cols`, orthonormal rows.
    pub right_t: DenseMatrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular.len()
    }

    /// `left[:, ..r] · diag(σ[..r]) · right_t[..r, :]`.
    pub fn reconstruct(&self, r: usize) -> Result<DenseMatrix> {
        let r = r.min(self.rank());
        let mut us = self.left.leading_cols(r);
        for i in 0..us.rows() {
            for j in 0..r {
                us.set(i, j, us.get(i, j) * self.singular[j]);
            }
        }
        us.matmul(&self.right_t.leading_rows(r))
    }
}

pub fn svd(matrix: &DenseMatrix) -> Result<SvdResult> {
    validate(matrix)?;
    if matrix.rows() >= matrix.cols() {
        svd_tall(matrix)
    } else {
        let t = svd_tall(&matrix.transpose())?;
        Ok(SvdResult {
            left: t.right_t.transpose(),
            singular: t.singular,
            right_t: t.left.transpose(),
        })
    }
}

/// Singular values in descending order, without computing singular vectors.
pub fn singular_values(matrix: &DenseMatrix) -> Result<Vec<f64>> {
    validate(matrix)?;
    let tall = if matrix.rows() >= matrix.cols() {
        matrix.clone()
    } else {
        matrix.transpose()
    };
    let (n, m) = (tall.cols(), tall.rows());
    let mut g = tall.transpose().into_data();
    jacobi(&mut g, None, n, m)?;
    let norms = column_norms(&g, n, m);
    let order = descending_order(&norms);
    let mut sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    clamp_small(&mut sigma);
    Ok(sigma)
}

fn validate(matrix: &DenseMatrix) -> Result<()> {
    if matrix.rows() == 0 || matrix.cols() == 0 {
        return Err(Error::InvalidInput("svd of an empty matrix".into()));
    }
    if !matrix.is_finite() {
        return Err(Error::InvalidInput("svd input has non-finite entries".into()));
    }
    Ok(())
}

fn svd_tall(a: &DenseMatrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    // Row j of `g` is column j of A; row j of `v` is column j of V.
    let mut g = a.transpose().into_data();
    let mut v = DenseMatrix::identity(n).into_data();
    jacobi(&mut g, Some(&mut v), n, m)?;

    let norms = column_norms(&g, n, m);
    let order = descending_order(&norms);
    let mut singular: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    clamp_small(&mut singular);

    // Left vectors as rows of length m, completed to an orthonormal set where σ = 0.
    let mut left_rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if singular[slot] > 0.0 {
            let s = norms[j];
            left_rows.push(g[j * m..(j + 1) * m].iter().map(|x| x / s).collect());
        } else {
            left_rows.push(Vec::new());
            missing.push(slot);
        }
    }
    complete_orthonormal(&mut left_rows, &missing, m)?;

    let mut left = DenseMatrix::zeros(m, n);
    for (j, col) in left_rows.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            left.set(i, j, x);
        }
    }
    let mut right_t = DenseMatrix::zeros(n, n);
    for (slot, &j) in order.iter().enumerate() {
        right_t.data_mut()[slot * n..(slot + 1) * n].copy_from_slice(&v[j * n..(j + 1) * n]);
    }
    if !left.is_finite() || !right_t.is_finite() {
        return Err(Error::NumericalFailure("non-finite singular vectors".into()));
    }
    Ok(SvdResult {
        left,
        singular,
        right_t,
    })
}

/// Rotate pairs of the `n` length-`m` rows of `g` until mutually orthogonal.
fn jacobi(g: &mut [f64], mut v: Option<&mut [f64]>, n: usize, m: usize) -> Result<()> {
    if n < 2 {
        return Ok(());
    }
    for _sweep in 0..MAX_SWEEPS {
        let mut norms: Vec<f64> = (0..n).map(|j| dot(&g[j * m..(j + 1) * m], &g[j * m..(j + 1) * m])).collect();
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let (gp, gq) = pair_mut(g, p, q, m);
                let gamma = dot(gp, gq);
                if gamma.abs() <= TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(gp, gq, c, s);
                norms[p] = alpha - t * gamma;
                norms[q] = beta + t * gamma;
                if let Some(v) = v.as_deref_mut() {
                    let (vp, vq) = pair_mut(v, p, q, n);
                    rotate(vp, vq, c, s);
                }
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(Error::NumericalFailure(format!(
        "jacobi svd did not converge in {MAX_SWEEPS} sweeps"
    )))
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pair_mut(buf: &mut [f64], p: usize, q: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (head, tail) = buf.split_at_mut(q * len);
    (&mut head[p * len..(p + 1) * len], &mut tail[..len])
}

fn column_norms(g: &[f64], n: usize, m: usize) -> Vec<f64> {
    (0..n)
        .map(|j| dot(&g[j * m..(j + 1) * m], &g[j * m..(j + 1) * m]).sqrt())
        .collect()
}

fn descending_order(norms: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order
}

fn clamp_small(sigma: &mut [f64]) {
    let max = sigma.first().copied().unwrap_or(0.0);
    for s in sigma.iter_mut() {
        if *s < CLAMP * max || max == 0.0 {
            *s = 0.0;
        }
    }
}

/// Fill `rows[slot]` for each `slot` in `missing` with unit vectors orthogonal
/// to every other row, drawing candidates from the standard basis.
fn complete_orthonormal(rows: &mut [Vec<f64>], missing: &[usize], m: usize) -> Result<()> {
    let mut basis = 0usize;
    for &slot in missing {
        loop {
            if basis >= m {
                return Err(Error::NumericalFailure(
                    "could not complete orthonormal left basis".into(),
                ));
            }
            let mut cand = vec![0.0; m];
            cand[basis] = 1.0;
            basis += 1;
            // Two passes of Gram-Schmidt.
            for _ in 0..2 {
                for (k, r) in rows.iter().enumerate() {
                    if k == slot || r.is_empty() {
                        continue;
                    }
                    let proj = dot(&cand, r);
                    cand.iter_mut().zip(r).for_each(|(c, x)| *c -= proj * x);
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 0.5 {
                cand.iter_mut().for_each(|c| *c /= norm);
                rows[slot] = cand;
                break;
            }
        }
    }
    Ok(())
}
