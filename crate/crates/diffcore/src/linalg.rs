//! Thin wrappers over `matrixmultiply` plus the im2col/col2im pair used by conv2d.

/// `c (m×n) = beta·c + op(a) · op(b)`, all row-major.
///
/// `a` is stored as `m×k` (or `k×m` when `a_t`), `b` as `k×n` (or `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe exactly those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Offset into the `[C, H, W]` image for output position and kernel tap, if inside.
    #[inline]
    fn source(&self, c: usize, ki: usize, kj: usize, oh: usize, ow: usize) -> Option<usize> {
        let ih = (oh * self.stride + ki).checked_sub(self.pad)?;
        let iw = (ow * self.stride + kj).checked_sub(self.pad)?;
        if ih >= self.height || iw >= self.width {
            return None;
        }
        Some((c * self.height + ih) * self.width + iw)
    }

    pub fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let n_cols = self.col_cols();
        let k = self.kernel;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let out = &mut cols[row * n_cols..(row + 1) * n_cols];
                    for oh in 0..self.out_h {
                        for ow in 0..self.out_w {
                            out[oh * self.out_w + ow] = match self.source(c, ki, kj, oh, ow) {
                                Some(idx) => image[idx],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    pub fn col2im_add(&self, cols: &[f64], image: &mut [f64]) {
        let n_cols = self.col_cols();
        let k = self.kernel;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * n_cols..(row + 1) * n_cols];
                    for oh in 0..self.out_h {
                        for ow in 0..self.out_w {
                            if let Some(idx) = self.source(c, ki, kj, oh, ow) {
                                image[idx] += src[oh * self.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Divides each length-`d` row by `max(‖row‖, eps)`; returns the normalized rows and the raw norms.
pub(crate) fn normalize_rows(x: &[f64], d: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut norms = Vec::with_capacity(x.len() / d);
    for (row, out) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(eps);
        for (o, v) in out.iter_mut().zip(row) {
            *o = v / denom;
        }
        norms.push(norm);
    }
    (y, norms)
}

pub(crate) fn normalize_rows_backward(
    y: &[f64],
    norms: &[f64],
    gy: &[f64],
    d: usize,
    eps: f64,
) -> Vec<f64> {
    let mut gx = vec![0.0; y.len()];
    for (r, &norm) in norms.iter().enumerate() {
        let span = r * d..(r + 1) * d;
        let (yr, gyr, gxr) = (&y[span.clone()], &gy[span.clone()], &mut gx[span]);
        if norm > eps {
            let dot: f64 = yr.iter().zip(gyr).map(|(a, b)| a * b).sum();
            for i in 0..d {
                gxr[i] = (gyr[i] - yr[i] * dot) / norm;
            }
        } else {
            for i in 0..d {
                gxr[i] = gyr[i] / eps;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 1.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, false, &b, false, &mut c, 0.0);
        let mut naive = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for p in 0..3 {
                    naive[i * 4 + j] += a[i * 3 + p] * b[p * 4 + j];
                }
            }
        }
        assert_eq!(c, naive);

        // a^T stored 3x2, b^T stored 4x3
        let at: Vec<f64> = (0..6).map(|idx| a[(idx % 2) * 3 + idx / 2]).collect();
        let bt: Vec<f64> = (0..12).map(|idx| b[(idx % 3) * 4 + idx / 3]).collect();
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, &at, true, &bt, true, &mut c2, 0.0);
        assert_eq!(c2, naive);
    }

    #[test]
    fn conv_geometry_matches_encoder_pyramid() {
        let g1 = ConvGeom::new(1, 52, 52, 3, 2, 1).unwrap();
        assert_eq!((g1.out_h, g1.out_w), (26, 26));
        let g2 = ConvGeom::new(8, 26, 26, 3, 2, 1).unwrap();
        assert_eq!(g2.out_h, 13);
        let g3 = ConvGeom::new(16, 13, 13, 3, 2, 0).unwrap();
        assert_eq!(g3.out_h, 6);
        let g4 = ConvGeom::new(1, 112, 112, 3, 2, 1).unwrap();
        assert_eq!(g4.out_h, 56);
    }
}
