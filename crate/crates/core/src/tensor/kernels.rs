//! Raw slice kernels shared by the graph ops. No shape checking here.

/// `out[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for t in 0..m {
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..k {
            let av = a[t * k + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for i in 0..rows {
        let xr = &x[i * cols..(i + 1) * cols];
        let or = &mut out[i * cols..(i + 1) * cols];
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = 1.0 / sum;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
}

/// Geometry of a 2-D convolution over a `C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Unfold input patches into a `(C·k·k) × (H_out·W_out)` matrix, zero padded.
pub(crate) fn im2col(x: &[f64], g: ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    for c in 0..g.c_in {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let r = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[r * npix..(r + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input grid.
pub(crate) fn col2im(cols: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    for c in 0..g.c_in {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let r = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[r * npix..(r + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}
