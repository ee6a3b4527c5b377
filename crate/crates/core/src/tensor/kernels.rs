//! 3x3 (stride 1, zero padding 1) and 1x1 convolutions as im2col + GEMM.
//!
//! GEMM runs single-threaded with a fixed blocking, and the reductions below
//! use a fixed eight-lane summation order, so results are deterministic.

#[inline]
pub(crate) fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            acc[l] += a[i * 8 + l];
        }
    }
    let tail: f64 = a[chunks * 8..].iter().sum();
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `c ← a·b + beta·c` for row-major `a: [m, k]`, `b: [k, n]`, `c: [m, n]`;
/// `trans_a`/`trans_b` read the operand as stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address only those elements.
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

/// Valid destination/source ranges along one axis for kernel offset `d` in {-1, 0, 1}.
#[inline]
fn span(len: usize, d: usize) -> (usize, usize, usize) {
    // (dst_start, dst_end, src_start)
    match d {
        0 => (1, len, 0),
        1 => (0, len, 0),
        _ => (0, len - 1, 1),
    }
}

/// `[c_in·9, h·w]` patch matrix; row `(ci, ky, kx)` holds `input[ci, y+ky−1, x+kx−1]` (zero outside).
fn im2col(input: &[f64], c_in: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut col = vec![0.0; c_in * 9 * plane];
    for ci in 0..c_in {
        let in_p = &input[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            let (y0, y1, sy) = span(h, ky);
            for kx in 0..3 {
                let (x0, x1, sx) = span(w, kx);
                let row = &mut col[((ci * 3 + ky) * 3 + kx) * plane..][..plane];
                for (dy, y) in (y0..y1).enumerate() {
                    let src = (sy + dy) * w + sx;
                    row[y * w + x0..y * w + x1].copy_from_slice(&in_p[src..src + (x1 - x0)]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the image.
fn col2im(col: &[f64], c_in: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; c_in * plane];
    for ci in 0..c_in {
        let out_p = &mut out[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            let (y0, y1, sy) = span(h, ky);
            for kx in 0..3 {
                let (x0, x1, sx) = span(w, kx);
                let row = &col[((ci * 3 + ky) * 3 + kx) * plane..][..plane];
                for (dy, y) in (y0..y1).enumerate() {
                    let dst = (sy + dy) * w + sx;
                    for (o, v) in out_p[dst..dst + (x1 - x0)]
                        .iter_mut()
                        .zip(&row[y * w + x0..y * w + x1])
                    {
                        *o += v;
                    }
                }
            }
        }
    }
    out
}

fn fill_bias(bias: &[f64], plane: usize) -> Vec<f64> {
    bias.iter()
        .flat_map(|&b| std::iter::repeat_n(b, plane))
        .collect()
}

/// Input, kernel and bias gradients, each present only when requested.
pub(crate) type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

pub(crate) fn conv3x3_forward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    bias: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let plane = h * w;
    let col = im2col(input, c_in, h, w);
    let mut out = fill_bias(bias, plane);
    gemm(
        c_out,
        c_in * 9,
        plane,
        kernel,
        false,
        &col,
        false,
        1.0,
        &mut out,
    );
    out
}

/// Returns (grad_input, grad_kernel, grad_bias); `want_input` skips the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    c_out: usize,
    grad_out: &[f64],
    want_input: bool,
    want_params: bool,
) -> ConvGrads {
    let plane = h * w;
    let kdim = c_in * 9;
    let (g_k, g_b) = if want_params {
        let col = im2col(input, c_in, h, w);
        let mut gk = vec![0.0; c_out * kdim];
        gemm(
            c_out, plane, kdim, grad_out, false, &col, true, 0.0, &mut gk,
        );
        let gb = (0..c_out)
            .map(|co| sum(&grad_out[co * plane..(co + 1) * plane]))
            .collect();
        (Some(gk), Some(gb))
    } else {
        (None, None)
    };
    let g_in = want_input.then(|| {
        let mut gcol = vec![0.0; kdim * plane];
        gemm(
            kdim, c_out, plane, kernel, true, grad_out, false, 0.0, &mut gcol,
        );
        col2im(&gcol, c_in, h, w)
    });
    (g_in, g_k, g_b)
}

pub(crate) fn conv1x1_forward(
    input: &[f64],
    c_in: usize,
    plane: usize,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let mut out = fill_bias(bias, plane);
    gemm(
        c_out, c_in, plane, weight, false, input, false, 1.0, &mut out,
    );
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1x1_backward(
    input: &[f64],
    c_in: usize,
    plane: usize,
    weight: &[f64],
    c_out: usize,
    grad_out: &[f64],
    want_input: bool,
    want_params: bool,
) -> ConvGrads {
    let (g_w, g_b) = if want_params {
        let mut gw = vec![0.0; c_out * c_in];
        gemm(
            c_out, plane, c_in, grad_out, false, input, true, 0.0, &mut gw,
        );
        let gb = (0..c_out)
            .map(|co| sum(&grad_out[co * plane..(co + 1) * plane]))
            .collect();
        (Some(gw), Some(gb))
    } else {
        (None, None)
    };
    let g_in = want_input.then(|| {
        let mut gi = vec![0.0; c_in * plane];
        gemm(
            c_in, c_out, plane, weight, true, grad_out, false, 0.0, &mut gi,
        );
        gi
    });
    (g_in, g_w, g_b)
}
