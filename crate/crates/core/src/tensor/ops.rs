//! Numeric kernels shared by the forward and backward passes.

/// `c = a·b + beta·c` for row-major `c` (m×n). `a` and `b` are addressed
/// through explicit strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides and extents describe in-bounds views of the slices;
    // callers pass lengths consistent with (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over a channels-last volume.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1 stride-1 unpadded conv reads the input directly as its column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Input pixel for output position (oy, ox) and kernel tap (ky, kx).
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.h && ix < self.w).then_some(iy * self.w + ix)
    }
}

pub(crate) fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let pl = g.patch_len();
    let mut cols = vec![0.0; g.positions() * pl];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * pl..][..pl];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some(src) = g.source(oy, ox, ky, kx) {
                        let dst = (ky * g.k + kx) * g.cin;
                        row[dst..dst + g.cin]
                            .copy_from_slice(&input[src * g.cin..(src + 1) * g.cin]);
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds column gradients back onto the input gradient.
pub(crate) fn col2im_add(g: &ConvGeom, dcols: &[f64], dinput: &mut [f64]) {
    let pl = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &dcols[(oy * g.ow + ox) * pl..][..pl];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some(src) = g.source(oy, ox, ky, kx) {
                        let off = (ky * g.k + kx) * g.cin;
                        for (d, s) in dinput[src * g.cin..(src + 1) * g.cin]
                            .iter_mut()
                            .zip(&row[off..off + g.cin])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of each contiguous row of length `width`, shifted by the row max.
pub(crate) fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}
