//! 3x3, padding 1 convolution kernels via im2col and a fixed-blocking GEMM.

pub(crate) const KERNEL: usize = 3;
pub(crate) const PAD: usize = 1;

pub(crate) fn out_size(input: usize, stride: usize) -> usize {
    (input + 2 * PAD - KERNEL) / stride + 1
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: extents are checked by the callers, which pass buffers sized for
    // the given strides; matrixmultiply never reads outside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output columns `oj` whose input column `oj * stride + kj - PAD` lies inside `[0, w)`.
fn valid_cols(w: usize, ow: usize, stride: usize, kj: usize) -> (usize, usize) {
    let lo = PAD.saturating_sub(kj).div_ceil(stride);
    let hi = if w + PAD > kj { ((w + PAD - kj - 1) / stride + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `[channels, h, w]` image into `[channels * 9, oh * ow]`, appended to `cols`.
pub(crate) fn im2col(x: &[f64], channels: usize, h: usize, w: usize, stride: usize, cols: &mut Vec<f64>) {
    let (oh, ow) = (out_size(h, stride), out_size(w, stride));
    for c in 0..channels {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..KERNEL {
            for kj in 0..KERNEL {
                let (lo, hi) = valid_cols(w, ow, stride, kj);
                for oi in 0..oh {
                    let ii = oi * stride + ki;
                    if ii < PAD || ii - PAD >= h {
                        cols.resize(cols.len() + ow, 0.0);
                        continue;
                    }
                    let src = &xc[(ii - PAD) * w..(ii - PAD + 1) * w];
                    cols.resize(cols.len() + lo, 0.0);
                    if hi > lo {
                        let first = lo * stride + kj - PAD;
                        cols.extend(src[first..].iter().step_by(stride).take(hi - lo));
                    }
                    cols.resize(cols.len() + ow - hi, 0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[channels * 9, oh * ow]` back onto the image, accumulating.
pub(crate) fn col2im(cols: &[f64], channels: usize, h: usize, w: usize, stride: usize, dx: &mut [f64]) {
    let (oh, ow) = (out_size(h, stride), out_size(w, stride));
    let plane = oh * ow;
    for c in 0..channels {
        let dxc = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..KERNEL {
            for kj in 0..KERNEL {
                let (lo, hi) = valid_cols(w, ow, stride, kj);
                if hi == lo {
                    continue;
                }
                let row = (c * KERNEL + ki) * KERNEL + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let ii = oi * stride + ki;
                    if ii < PAD || ii - PAD >= h {
                        continue;
                    }
                    let first = (ii - PAD) * w + lo * stride + kj - PAD;
                    let dst = dxc[first..].iter_mut().step_by(stride);
                    for (d, v) in dst.zip(&src[oi * ow + lo..oi * ow + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}
