use alloc::vec;
use alloc::vec::Vec;

use super::gemm::gemm;

/// Geometry of a 2-D convolution. For a transposed convolution `in_*`
/// describe the (small) input and `out_*` the upsampled output, while the
/// im2col buffers are laid out over the output side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Unfolds a `(c, h, w)` map into a `(c·k·k) × (oh·ow)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(src: &[f64], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut col = vec![0.0; c * k * k * oh * ow];
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters columns back onto a `(c, h, w)` map.
#[allow(clippy::too_many_arguments)]
fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut dst = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col[row + oy * ow..row + (oy + 1) * ow];
                    let out_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            out_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    dst
}

/// Convolution, weight `(out_c, in_c, k, k)`.
pub(crate) fn conv_forward(g: &ConvGeom, weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let ckk = g.in_c * g.kernel * g.kernel;
    let hw = g.out_h * g.out_w;
    let col = im2col(x, g.in_c, g.in_h, g.in_w, g.kernel, g.stride, g.pad, g.out_h, g.out_w);
    let mut y = vec![0.0; g.out_c * hw];
    for (co, chunk) in y.chunks_mut(hw).enumerate() {
        chunk.fill(bias[co]);
    }
    gemm(g.out_c, ckk, hw, weight, false, &col, false, &mut y, 1.0);
    y
}

/// Returns the input gradient when `want_dx`; accumulates into `dw`/`db`
/// when given.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    weight: &[f64],
    x: &[f64],
    dy: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let ckk = g.in_c * g.kernel * g.kernel;
    let hw = g.out_h * g.out_w;
    if let Some((dw, db)) = grads {
        let col = im2col(x, g.in_c, g.in_h, g.in_w, g.kernel, g.stride, g.pad, g.out_h, g.out_w);
        gemm(g.out_c, hw, ckk, dy, false, &col, true, dw, 1.0);
        for (co, chunk) in dy.chunks(hw).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
    }
    if !want_dx {
        return None;
    }
    let mut dcol = vec![0.0; ckk * hw];
    gemm(ckk, g.out_c, hw, weight, true, dy, false, &mut dcol, 0.0);
    Some(col2im(&dcol, g.in_c, g.in_h, g.in_w, g.kernel, g.stride, g.pad, g.out_h, g.out_w))
}

/// Transposed convolution, weight `(in_c, out_c, k, k)`. It is the
/// data-gradient of a convolution from `out_c` to `in_c` channels.
pub(crate) fn conv_transpose_forward(g: &ConvGeom, weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let ckk = g.out_c * g.kernel * g.kernel;
    let hw = g.in_h * g.in_w;
    let mut col = vec![0.0; ckk * hw];
    gemm(ckk, g.in_c, hw, weight, true, x, false, &mut col, 0.0);
    let mut y = col2im(&col, g.out_c, g.out_h, g.out_w, g.kernel, g.stride, g.pad, g.in_h, g.in_w);
    let ohw = g.out_h * g.out_w;
    for (co, chunk) in y.chunks_mut(ohw).enumerate() {
        for v in chunk {
            *v += bias[co];
        }
    }
    y
}

pub(crate) fn conv_transpose_backward(
    g: &ConvGeom,
    weight: &[f64],
    x: &[f64],
    dy: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let ckk = g.out_c * g.kernel * g.kernel;
    let hw = g.in_h * g.in_w;
    let dcol = im2col(dy, g.out_c, g.out_h, g.out_w, g.kernel, g.stride, g.pad, g.in_h, g.in_w);
    if let Some((dw, db)) = grads {
        gemm(g.in_c, hw, ckk, x, false, &dcol, true, dw, 1.0);
        let ohw = g.out_h * g.out_w;
        for (co, chunk) in dy.chunks(ohw).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![0.0; g.in_c * hw];
    gemm(g.in_c, ckk, hw, weight, false, &dcol, false, &mut dx, 0.0);
    Some(dx)
}

/// Fully connected layer, weight `(outputs, inputs)`.
pub(crate) fn dense_forward(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = bias.to_vec();
    gemm(bias.len(), x.len(), 1, weight, false, x, false, &mut y, 1.0);
    y
}

pub(crate) fn dense_backward(
    weight: &[f64],
    x: &[f64],
    dy: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let (outputs, inputs) = (dy.len(), x.len());
    if let Some((dw, db)) = grads {
        gemm(outputs, 1, inputs, dy, false, x, false, dw, 1.0);
        for (b, g) in db.iter_mut().zip(dy) {
            *b += g;
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![0.0; inputs];
    gemm(inputs, outputs, 1, weight, true, dy, false, &mut dx, 0.0);
    Some(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct nested-loop convolution, independent of im2col/gemm.
    fn conv_direct(g: &ConvGeom, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; g.out_c * g.out_h * g.out_w];
        for co in 0..g.out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = b[co];
                    for ci in 0..g.in_c {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                acc += w[((co * g.in_c + ci) * g.kernel + ky) * g.kernel + kx]
                                    * x[(ci * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    y[(co * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        y
    }

    // Scatter form of the transposed convolution.
    fn conv_t_direct(g: &ConvGeom, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; g.out_c * g.out_h * g.out_w];
        for co in 0..g.out_c {
            for i in 0..g.out_h * g.out_w {
                y[co * g.out_h * g.out_w + i] = b[co];
            }
        }
        for ci in 0..g.in_c {
            for iy in 0..g.in_h {
                for ix in 0..g.in_w {
                    let v = x[(ci * g.in_h + iy) * g.in_w + ix];
                    for co in 0..g.out_c {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let oy = (iy * g.stride + ky) as isize - g.pad as isize;
                                let ox = (ix * g.stride + kx) as isize - g.pad as isize;
                                if oy < 0 || ox < 0 || oy >= g.out_h as isize || ox >= g.out_w as isize {
                                    continue;
                                }
                                y[(co * g.out_h + oy as usize) * g.out_w + ox as usize] +=
                                    v * w[((ci * g.out_c + co) * g.kernel + ky) * g.kernel + kx];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| libm::sin(i as f64 * 0.37 + seed)).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeom { in_c: 2, out_c: 3, kernel: 4, stride: 2, pad: 1, in_h: 8, in_w: 6, out_h: 4, out_w: 3 };
        let w = pseudo(3 * 2 * 16, 0.1);
        let b = pseudo(3, 0.2);
        let x = pseudo(2 * 8 * 6, 0.3);
        let fast = conv_forward(&g, &w, &b, &x);
        let slow = conv_direct(&g, &w, &b, &x);
        for (a, e) in fast.iter().zip(&slow) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_matches_scatter() {
        let g = ConvGeom { in_c: 3, out_c: 2, kernel: 4, stride: 2, pad: 1, in_h: 3, in_w: 4, out_h: 6, out_w: 8 };
        let w = pseudo(3 * 2 * 16, 0.4);
        let b = pseudo(2, 0.5);
        let x = pseudo(3 * 3 * 4, 0.6);
        let fast = conv_transpose_forward(&g, &w, &b, &x);
        let slow = conv_t_direct(&g, &w, &b, &x);
        for (a, e) in fast.iter().zip(&slow) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k, s, p) = (2, 5, 7, 3, 2, 1);
        let (oh, ow) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
        let x = pseudo(c * h * w, 0.7);
        let y = pseudo(c * k * k * oh * ow, 0.8);
        let lhs: f64 = im2col(&x, c, h, w, k, s, p, oh, ow).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&col2im(&y, c, h, w, k, s, p, oh, ow)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
