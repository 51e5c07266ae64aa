//! Raw numeric kernels behind the autograd ops.

use alloc::vec;
use alloc::vec::Vec;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`, `c` is `m x n`. When `ta` is set `a`
/// is stored as `k x m` (likewise `tb`: `b` stored as `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe exactly the row-major
    // layouts of the slices.
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

/// Static geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Unfolds one `cin x h x w` image into `(cin*k*k) x (ho*wo)` columns.
pub fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let mut row = 0;
    for c in 0..g.cin {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
pub fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let mut row = 0;
    for c in 0..g.cin {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Batched convolution forward. `x`: `B x cin x h x w`, `w`: `cout x cin x k x k`.
pub fn conv2d_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    cout: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let in_len = g.cin * g.h * g.w;
    let rows = g.col_rows();
    let mut out = vec![0.0; batch * cout * plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * plane]
    };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * cout * plane..(b + 1) * cout * plane];
        let cols: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        gemm(cout, rows, plane, w, false, cols, false, ob, 0.0);
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                ob[o * plane..(o + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of a batched convolution: returns `(dx, dw, db)`.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    cout: usize,
    dout: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let in_len = g.cin * g.h * g.w;
    let rows = g.col_rows();
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    let mut db = vec![0.0; cout];
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; rows * plane] };
    let mut dcol = if pointwise || !need_dx {
        Vec::new()
    } else {
        vec![0.0; rows * plane]
    };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let gb = &dout[b * cout * plane..(b + 1) * cout * plane];
        for (o, d) in db.iter_mut().enumerate() {
            *d += gb[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
        if let Some(dw) = dw.as_mut() {
            let cols: &[f64] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut col);
                &col
            };
            gemm(cout, plane, rows, gb, false, cols, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                gemm(rows, cout, plane, w, true, gb, false, dxb, 1.0);
            } else {
                gemm(rows, cout, plane, w, true, gb, false, &mut dcol, 0.0);
                col2im(&dcol, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], g: &ConvGeom, w: &[f64], cout: usize) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..g.cin {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x[(c * g.h + iy as usize) * g.w + ix as usize]
                                    * w[((o * g.cin + c) * g.k + ky) * g.k + kx];
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let g = ConvGeom { cin: 3, h: 7, w: 7, k, stride, pad };
            let x: Vec<f64> = (0..3 * 49).map(|i| ((i * 37 % 17) as f64) - 8.0).collect();
            let w: Vec<f64> = (0..2 * 3 * k * k).map(|i| ((i * 13 % 7) as f64) * 0.1).collect();
            let fast = conv2d_forward(&x, 1, &g, &w, 2, None);
            let slow = naive_conv(&x, &g, &w, 2);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
