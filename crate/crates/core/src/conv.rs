//! Stride-1 convolution through patch unrolling.
//!
//! Patch columns and unrolled kernel rows share one vectorization order:
//! index `(c·k + kr)·k + kc` for input channel `c`, kernel row `kr`,
//! kernel column `kc`. With that order `im2col(x) · unroll(K)` is the
//! cross-correlation of `x` with `K`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::tensor::{ConvKernel, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, height: usize, width: usize, kernel: usize, padding: usize) -> Result<Self> {
        let g = Self {
            in_channels,
            height,
            width,
            kernel,
            padding,
        };
        if kernel == 0 || in_channels == 0 {
            return Err(Error::Shape("conv needs kernel >= 1 and at least one channel".into()));
        }
        if height + 2 * padding < kernel || width + 2 * padding < kernel {
            return Err(Error::Shape(format!(
                "kernel {kernel} does not fit a {height}x{width} input with padding {padding}"
            )));
        }
        Ok(g)
    }

    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    /// Output positions per sample.
    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Length of one patch column, `m·k²`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Input pixel feeding `(position, patch index)`, or `None` for padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, c: usize, kr: usize, kc: usize) -> Option<usize> {
        let y = (oy + kr).checked_sub(self.padding)?;
        let x = (ox + kc).checked_sub(self.padding)?;
        if y >= self.height || x >= self.width {
            return None;
        }
        Some((c * self.height + y) * self.width + x)
    }
}

/// Unroll a batch of `(c, h, w)` samples into a `(batch·positions) × patch_len` matrix.
pub fn im2col(input: &DenseMatrix, geom: &ConvGeometry, exec: Execution) -> Result<DenseMatrix> {
    if input.cols() != geom.input_len() {
        return Err(Error::Shape(format!(
            "conv input has {} features, geometry expects {}",
            input.cols(),
            geom.input_len()
        )));
    }
    let (p, len, k) = (geom.positions(), geom.patch_len(), geom.kernel);
    let ow = geom.out_width();
    let mut out = DenseMatrix::zeros(input.rows() * p, len);
    exec::for_each_chunk_mut(exec, out.data_mut(), p * len, |b, block| {
        let x = input.row(b);
        for pos in 0..p {
            let (oy, ox) = (pos / ow, pos % ow);
            let row = &mut block[pos * len..(pos + 1) * len];
            for c in 0..geom.in_channels {
                for kr in 0..k {
                    for kc in 0..k {
                        if let Some(src) = geom.source(oy, ox, c, kr, kc) {
                            row[(c * k + kr) * k + kc] = x[src];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the inputs.
pub fn col2im(cols: &DenseMatrix, batch: usize, geom: &ConvGeometry, exec: Execution) -> Result<DenseMatrix> {
    let (p, len, k) = (geom.positions(), geom.patch_len(), geom.kernel);
    if cols.shape() != (batch * p, len) {
        return Err(Error::Shape(format!(
            "col2im expects {}x{}, got {:?}",
            batch * p,
            len,
            cols.shape()
        )));
    }
    let ow = geom.out_width();
    let mut out = DenseMatrix::zeros(batch, geom.input_len());
    exec::for_each_chunk_mut(exec, out.data_mut(), geom.input_len(), |b, x| {
        for pos in 0..p {
            let (oy, ox) = (pos / ow, pos % ow);
            let row = cols.row(b * p + pos);
            for c in 0..geom.in_channels {
                for kr in 0..k {
                    for kc in 0..k {
                        if let Some(src) = geom.source(oy, ox, c, kr, kc) {
                            x[src] += row[(c * k + kr) * k + kc];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// `(m·k², n)` matrix whose column `j` is filter `j` vectorized.
pub fn unroll_conv(kernel: &ConvKernel) -> DenseMatrix {
    let (n, m, k) = (kernel.out_channels(), kernel.in_channels(), kernel.kernel());
    let mut out = DenseMatrix::zeros(m * k * k, n);
    for o in 0..n {
        for c in 0..m {
            for kr in 0..k {
                for kc in 0..k {
                    out.set((c * k + kr) * k + kc, o, kernel.get(o, c, kr, kc));
                }
            }
        }
    }
    out
}

/// Inverse of [`unroll_conv`] for a matrix with `in_channels·k²` rows.
pub fn roll_conv(matrix: &DenseMatrix, in_channels: usize, kernel: usize) -> Result<ConvKernel> {
    let (rows, n) = matrix.shape();
    if rows != in_channels * kernel * kernel {
        return Err(Error::Shape(format!(
            "cannot roll a {rows}-row matrix into {in_channels} channels of {kernel}x{kernel}"
        )));
    }
    let mut data = vec![0.0; rows * n];
    for o in 0..n {
        for idx in 0..rows {
            data[o * rows + idx] = matrix.get(idx, o);
        }
    }
    ConvKernel::new(n, in_channels, kernel, data)
}

/// Convolution of a batch with `kernel` (no bias), via [`im2col`].
///
/// Output rows are samples laid out `(out_channel, y, x)`.
pub fn conv_forward(input: &DenseMatrix, kernel: &ConvKernel, padding: usize, height: usize, width: usize) -> Result<DenseMatrix> {
    let geom = ConvGeometry::new(kernel.in_channels(), height, width, kernel.kernel(), padding)?;
    let cols = im2col(input, &geom, Execution::Sequential)?;
    let z = cols.matmul(&unroll_conv(kernel))?;
    Ok(positions_to_channels(&z, input.rows(), geom.positions()))
}

/// `(batch·P) × n` position-major rows to `batch × (n·P)` channel-major samples.
pub fn positions_to_channels(z: &DenseMatrix, batch: usize, positions: usize) -> DenseMatrix {
    let n = z.cols();
    let mut out = DenseMatrix::zeros(batch, n * positions);
    for b in 0..batch {
        for p in 0..positions {
            let row = z.row(b * positions + p);
            for (o, &v) in row.iter().enumerate() {
                out.data_mut()[b * n * positions + o * positions + p] = v;
            }
        }
    }
    out
}

/// Inverse of [`positions_to_channels`].
pub fn channels_to_positions(x: &DenseMatrix, positions: usize) -> DenseMatrix {
    let batch = x.rows();
    let n = x.cols() / positions;
    let mut out = DenseMatrix::zeros(batch * positions, n);
    for b in 0..batch {
        let row = x.row(b);
        for o in 0..n {
            for p in 0..positions {
                out.data_mut()[(b * positions + p) * n + o] = row[o * positions + p];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unroll_shape_and_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = ConvKernel::random_normal(64, 64, 3, 1.0, &mut rng).unwrap();
        let u = unroll_conv(&k);
        assert_eq!(u.shape(), (576, 64));
        assert_eq!(roll_conv(&u, 64, 3).unwrap(), k);
    }

    #[test]
    fn one_by_one_is_channel_mixing() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = ConvKernel::random_normal(5, 3, 1, 1.0, &mut rng).unwrap();
        let u = unroll_conv(&k);
        for o in 0..5 {
            for c in 0..3 {
                assert_eq!(u.get(c, o), k.get(o, c, 0, 0));
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let geom = ConvGeometry::new(2, 5, 4, 3, 1).unwrap();
        let x = DenseMatrix::random_normal(3, geom.input_len(), 1.0, &mut rng);
        let y = DenseMatrix::random_normal(3 * geom.positions(), geom.patch_len(), 1.0, &mut rng);
        let lhs: f64 = im2col(&x, &geom, Execution::Sequential)
            .unwrap()
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let back = col2im(&y, 3, &geom, Execution::Parallel).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn layout_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = DenseMatrix::random_normal(2 * 6, 4, 1.0, &mut rng);
        let x = positions_to_channels(&z, 2, 6);
        assert_eq!(channels_to_positions(&x, 6), z);
    }

    #[test]
    fn geometry_rejects_oversized_kernel() {
        assert!(ConvGeometry::new(1, 2, 2, 5, 0).is_err());
        let g = ConvGeometry::new(1, 8, 8, 3, 1).unwrap();
        assert_eq!((g.out_height(), g.out_width()), (8, 8));
    }
}
