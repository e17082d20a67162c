//! Dense kernels behind the graph ops. Layout is `[N, C, D, H, W]`, row-major.

/// Row-major matrix view with explicit strides.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }
}

/// `c = a * b + beta * c`, with `a: m x k`, `b: k x n`, `c: m x n` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f32, c: &mut [f32]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let max_a = (m - 1) * a.row_stride + (k - 1) * a.col_stride;
    let max_b = (k - 1) * b.row_stride + (n - 1) * b.col_stride;
    assert!(max_a < a.data.len() && max_b < b.data.len());
    // SAFETY: the asserts above bound every element touched through the strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Output extent along one axis (ceil mode, never below one voxel).
    pub fn out_len(&self, n: usize) -> usize {
        let span = n as isize + 2 * self.pad as isize - self.kernel as isize;
        let s = self.stride as isize;
        ((span + s - 1).div_euclid(s) + 1).max(1) as usize
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        dims.map(|n| self.out_len(n))
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Input index range `[lo, hi)` of outputs whose tap `t` lands inside `[0, n)`.
#[inline]
fn valid_outputs(n: usize, out: usize, t: usize, g: &ConvGeometry) -> (usize, usize) {
    // input = o * stride + t - pad must lie in [0, n)
    let t = t as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if t >= 0 { 0 } else { (-t + s - 1) / s };
    let hi = (n as isize - t + s - 1).div_euclid(s).clamp(0, out as isize);
    (lo.min(hi) as usize, hi.max(0) as usize)
}

/// Unfolds one sample `[C, D, H, W]` into `cols: [C * k^3, Do * Ho * Wo]`.
pub(crate) fn im2col(x: &[f32], channels: usize, dims: [usize; 3], g: &ConvGeometry, cols: &mut [f32]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = g.out_dims(dims);
    let vo = od * oh * ow;
    let k = g.kernel;
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            let (d_lo, d_hi) = valid_outputs(d, od, kd, g);
            for kh in 0..k {
                let (h_lo, h_hi) = valid_outputs(h, oh, kh, g);
                for kw in 0..k {
                    let (w_lo, w_hi) = valid_outputs(w, ow, kw, g);
                    let dst = &mut cols[row * vo..(row + 1) * vo];
                    dst.fill(0.0);
                    for o_d in d_lo..d_hi {
                        let id = o_d * g.stride + kd - g.pad;
                        for o_h in h_lo..h_hi {
                            let ih = o_h * g.stride + kh - g.pad;
                            let src = &xc[(id * h + ih) * w..(id * h + ih + 1) * w];
                            let out = &mut dst[(o_d * oh + o_h) * ow..(o_d * oh + o_h + 1) * ow];
                            if g.stride == 1 {
                                let start = w_lo + kw - g.pad;
                                out[w_lo..w_hi].copy_from_slice(&src[start..start + (w_hi - w_lo)]);
                            } else {
                                for o_w in w_lo..w_hi {
                                    out[o_w] = src[o_w * g.stride + kw - g.pad];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx: [C, D, H, W]`.
pub(crate) fn col2im(cols: &[f32], channels: usize, dims: [usize; 3], g: &ConvGeometry, dx: &mut [f32]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = g.out_dims(dims);
    let vo = od * oh * ow;
    let k = g.kernel;
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            let (d_lo, d_hi) = valid_outputs(d, od, kd, g);
            for kh in 0..k {
                let (h_lo, h_hi) = valid_outputs(h, oh, kh, g);
                for kw in 0..k {
                    let (w_lo, w_hi) = valid_outputs(w, ow, kw, g);
                    let src = &cols[row * vo..(row + 1) * vo];
                    for o_d in d_lo..d_hi {
                        let id = o_d * g.stride + kd - g.pad;
                        for o_h in h_lo..h_hi {
                            let ih = o_h * g.stride + kh - g.pad;
                            let dst = &mut xc[(id * h + ih) * w..(id * h + ih + 1) * w];
                            let inp = &src[(o_d * oh + o_h) * ow..(o_d * oh + o_h + 1) * ow];
                            if g.stride == 1 {
                                let start = w_lo + kw - g.pad;
                                for (a, b) in dst[start..start + (w_hi - w_lo)].iter_mut().zip(&inp[w_lo..w_hi]) {
                                    *a += *b;
                                }
                            } else {
                                for o_w in w_lo..w_hi {
                                    dst[o_w * g.stride + kw - g.pad] += inp[o_w];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], ci: usize, dims: [usize; 3], w: &[f32], co: usize, g: &ConvGeometry) -> Vec<f32> {
        let [d, h, wd] = dims;
        let [od, oh, ow] = g.out_dims(dims);
        let k = g.kernel;
        let mut out = vec![0.0; co * od * oh * ow];
        for o in 0..co {
            for a in 0..od {
                for b in 0..oh {
                    for c in 0..ow {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let id = (a * g.stride + kd) as isize - g.pad as isize;
                                        let ih = (b * g.stride + kh) as isize - g.pad as isize;
                                        let iw = (c * g.stride + kw) as isize - g.pad as isize;
                                        if id < 0 || ih < 0 || iw < 0 || id >= d as isize || ih >= h as isize || iw >= wd as isize {
                                            continue;
                                        }
                                        let xv = x[((i * d + id as usize) * h + ih as usize) * wd + iw as usize];
                                        let wv = w[(((o * ci + i) * k + kd) * k + kh) * k + kw];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[((o * od + a) * oh + b) * ow + c] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_naive_convolution() {
        let geoms = [
            ConvGeometry { kernel: 3, stride: 1, pad: 1 },
            ConvGeometry { kernel: 2, stride: 2, pad: 0 },
            ConvGeometry { kernel: 4, stride: 2, pad: 1 },
        ];
        for g in geoms {
            for dims in [[4, 5, 6], [1, 1, 1], [2, 3, 2]] {
                let (ci, co) = (2, 3);
                let x: Vec<f32> = (0..ci * dims.iter().product::<usize>()).map(|i| ((i * 7 % 11) as f32) - 5.0).collect();
                let kk = g.kernel.pow(3) * ci;
                let w: Vec<f32> = (0..co * kk).map(|i| ((i * 5 % 13) as f32) * 0.1 - 0.6).collect();
                let od = g.out_dims(dims);
                let vo: usize = od.iter().product();
                let mut cols = vec![0.0; kk * vo];
                im2col(&x, ci, dims, &g, &mut cols);
                let mut out = vec![0.0; co * vo];
                gemm(co, kk, vo, MatRef::rows(&w, kk), MatRef::rows(&cols, vo), 0.0, &mut out);
                let expect = naive_conv(&x, ci, dims, &w, co, &g);
                for (a, b) in out.iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-4, "{g:?} {dims:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry { kernel: 4, stride: 2, pad: 1 };
        let dims = [5, 4, 3];
        let ci = 2;
        let n: usize = ci * dims.iter().product::<usize>();
        let vo: usize = g.out_dims(dims).iter().product();
        let rows = ci * 64;
        let x: Vec<f32> = (0..n).map(|i| (i % 7) as f32 - 3.0).collect();
        let y: Vec<f32> = (0..rows * vo).map(|i| (i % 5) as f32 - 2.0).collect();
        let mut cols = vec![0.0; rows * vo];
        im2col(&x, ci, dims, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut back = vec![0.0; n];
        col2im(&y, ci, dims, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-6);
    }

    #[test]
    fn ceil_mode_never_collapses() {
        let g = ConvGeometry { kernel: 4, stride: 2, pad: 1 };
        assert_eq!(g.out_len(32), 16);
        assert_eq!(g.out_len(2), 1);
        assert_eq!(g.out_len(1), 1);
        let same = ConvGeometry { kernel: 3, stride: 1, pad: 1 };
        assert_eq!(same.out_len(7), 7);
        let down = ConvGeometry { kernel: 2, stride: 2, pad: 0 };
        assert_eq!(down.out_len(16), 8);
    }
}
