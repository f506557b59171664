#![allow(clippy::needless_range_loop)]

//! Test-side oracles written independently of the library numerics.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rankswitch_core::{ConvKernel, DenseMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

pub fn kernel(n: usize, m: usize, k: usize, rng: &mut impl Rng) -> ConvKernel {
    let data = (0..n * m * k * k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    ConvKernel::new(n, m, k, data).unwrap()
}

/// Eigenvalues of a symmetric matrix by the classical two-sided Jacobi method, descending.
pub fn symmetric_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut a: Vec<Vec<f64>> = a.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

/// Squared singular values of `m` as eigenvalues of the smaller Gram matrix.
pub fn squared_singular_values(m: &DenseMatrix) -> Vec<f64> {
    let (r, c) = m.shape();
    let small = r.min(c);
    let gram: Vec<Vec<f64>> = (0..small)
        .map(|i| {
            (0..small)
                .map(|j| {
                    if r >= c {
                        (0..r).map(|k| m.get(k, i) * m.get(k, j)).sum()
                    } else {
                        (0..c).map(|k| m.get(i, k) * m.get(j, k)).sum()
                    }
                })
                .collect()
        })
        .collect();
    symmetric_eigenvalues(&gram).into_iter().map(|x| x.max(0.0)).collect()
}

pub fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
}

/// Direct stride-1 convolution; samples are rows laid out `(channel, y, x)`.
pub fn naive_conv(input: &DenseMatrix, kernel: &ConvKernel, padding: usize, h: usize, w: usize) -> DenseMatrix {
    let (n, m, k) = (kernel.out_channels(), kernel.in_channels(), kernel.kernel());
    let oh = h + 2 * padding - k + 1;
    let ow = w + 2 * padding - k + 1;
    DenseMatrix::from_fn(input.rows(), n * oh * ow, |b, idx| {
        let (o, y, x) = (idx / (oh * ow), (idx / ow) % oh, idx % ow);
        let mut acc = 0.0;
        for c in 0..m {
            for kr in 0..k {
                for kc in 0..k {
                    let (iy, ix) = (y + kr, x + kc);
                    if iy < padding || ix < padding || iy - padding >= h || ix - padding >= w {
                        continue;
                    }
                    acc += kernel.get(o, c, kr, kc) * input.get(b, (c * h + iy - padding) * w + ix - padding);
                }
            }
        }
        acc
    })
}

/// Central finite difference of `f` along each coordinate of `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

/// `c + a·exp(−t/τ)` for `t = 0..len`.
pub fn exponential(c: f64, a: f64, tau: f64, len: usize) -> Vec<f64> {
    (0..len).map(|t| c + a * (-(t as f64) / tau).exp()).collect()
}

/// First `t` at which the windowed mean of `|r_s − r_{s−1}|` over the last
/// `w` pairs ending at `t` is at most `eps`, with at least `min_epochs`
/// values observed. Returns the switch epoch `t + 1`.
pub fn brute_force_switch(values: &[f64], eps: f64, w: usize, min_epochs: usize) -> Option<usize> {
    (0..values.len()).find_map(|t| {
        if t + 1 < min_epochs || t < w {
            return None;
        }
        let mean = (t + 1 - w..=t).map(|s| (values[s] - values[s - 1]).abs()).sum::<f64>() / w as f64;
        (mean <= eps).then_some(t + 1)
    })
}
