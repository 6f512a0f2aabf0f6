//! Raw forward/backward loops for the spatial operators.
//!
//! Convolutions lower to `im2col` followed by a single GEMM per image, so the
//! inner products run through `matrixmultiply`. Everything here is
//! single-threaded and deterministic for a given machine.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

/// `c = alpha * a * b + beta * c` for row-major operands given by explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the debug assertions above spell out the extents the kernel
    // touches; every call site passes slices sized from the same geometry.
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
            rsc as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.p();
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.p();
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![0.0; g.n * g.cout * p];
    let mut cols = vec![0.0; k * p];
    for ni in 0..g.n {
        let xn = &x[ni * g.cin * g.h * g.w..(ni + 1) * g.cin * g.h * g.w];
        im2col(xn, g, &mut cols);
        let yn = &mut out[ni * g.cout * p..(ni + 1) * g.cout * p];
        gemm(g.cout, k, p, w, (k, 1), &cols, (p, 1), 0.0, yn, p);
        if let Some(b) = b {
            for (co, row) in yn.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(x: &[f64], w: &[f64], dy: &[f64], g: &ConvGeom, need: (bool, bool, bool)) -> ConvGrads {
    let (k, p) = (g.k(), g.p());
    let in_sz = g.cin * g.h * g.w;
    let mut dx = need.0.then(|| vec![0.0; g.n * in_sz]);
    let mut dw = need.1.then(|| vec![0.0; g.cout * k]);
    let mut db = need.2.then(|| vec![0.0; g.cout]);
    let mut cols = vec![0.0; k * p];
    for ni in 0..g.n {
        let dyn_ = &dy[ni * g.cout * p..(ni + 1) * g.cout * p];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[ni * in_sz..(ni + 1) * in_sz], g, &mut cols);
            // dW[cout, k] += dY[cout, p] * cols^T[p, k]
            gemm(g.cout, p, k, dyn_, (p, 1), &cols, (1, p), 1.0, dw, k);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[k, p] = W^T[k, cout] * dY[cout, p]
            gemm(k, g.cout, p, w, (1, k), dyn_, (p, 1), 0.0, &mut cols, p);
            col2im(&cols, g, &mut dx[ni * in_sz..(ni + 1) * in_sz]);
        }
        if let Some(db) = db.as_mut() {
            for (co, row) in dyn_.chunks(p).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Geometry of a kernel-2, stride-2 transposed convolution.
/// Weight layout is `[cin, cout, 2, 2]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct UpGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn conv_transpose2x2_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &UpGeom) -> Vec<f64> {
    let hw = g.h * g.w;
    let rows = g.cout * 4;
    let (ho, wo) = (2 * g.h, 2 * g.w);
    let mut out = vec![0.0; g.n * g.cout * ho * wo];
    let mut ycols = vec![0.0; rows * hw];
    for ni in 0..g.n {
        let xn = &x[ni * g.cin * hw..(ni + 1) * g.cin * hw];
        // Y[cout*4, hw] = W^T[cout*4, cin] * X[cin, hw]
        gemm(rows, g.cin, hw, w, (1, rows), xn, (hw, 1), 0.0, &mut ycols, hw);
        let on = &mut out[ni * g.cout * ho * wo..(ni + 1) * g.cout * ho * wo];
        for co in 0..g.cout {
            let bias = b.map_or(0.0, |b| b[co]);
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &ycols[(co * 4 + a * 2 + bb) * hw..][..hw];
                    for i in 0..g.h {
                        for j in 0..g.w {
                            on[(co * ho + 2 * i + a) * wo + 2 * j + bb] = src[i * g.w + j] + bias;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2x2_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &UpGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let hw = g.h * g.w;
    let rows = g.cout * 4;
    let (ho, wo) = (2 * g.h, 2 * g.w);
    let mut dx = need.0.then(|| vec![0.0; g.n * g.cin * hw]);
    let mut dw = need.1.then(|| vec![0.0; g.cin * rows]);
    let mut db = need.2.then(|| vec![0.0; g.cout]);
    let mut dcols = vec![0.0; rows * hw];
    for ni in 0..g.n {
        let dn = &dy[ni * g.cout * ho * wo..(ni + 1) * g.cout * ho * wo];
        for co in 0..g.cout {
            for a in 0..2 {
                for bb in 0..2 {
                    let dst = &mut dcols[(co * 4 + a * 2 + bb) * hw..][..hw];
                    for i in 0..g.h {
                        for j in 0..g.w {
                            dst[i * g.w + j] = dn[(co * ho + 2 * i + a) * wo + 2 * j + bb];
                        }
                    }
                }
            }
            if let Some(db) = db.as_mut() {
                db[co] += dn[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
            }
        }
        let xn = &x[ni * g.cin * hw..(ni + 1) * g.cin * hw];
        if let Some(dx) = dx.as_mut() {
            // dX[cin, hw] = W[cin, cout*4] * dY[cout*4, hw]
            let dxn = &mut dx[ni * g.cin * hw..(ni + 1) * g.cin * hw];
            gemm(g.cin, rows, hw, w, (rows, 1), &dcols, (hw, 1), 0.0, dxn, hw);
        }
        if let Some(dw) = dw.as_mut() {
            // dW[cin, cout*4] += X[cin, hw] * dY^T[hw, cout*4]
            gemm(g.cin, hw, rows, xn, (hw, 1), &dcols, (1, hw), 1.0, dw, rows);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Window maximum with first-occurrence (row-major) tie-break. Padding cells
/// hold `f64::MIN` so they never win against a real value.
pub(crate) fn max_pool_forward(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let ho = (h + 2 * pad - kernel) / stride + 1;
    let wo = (w + 2 * pad - kernel) / stride + 1;
    let mut out = vec![0.0; n * c * ho * wo];
    let mut arg = vec![0usize; n * c * ho * wo];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::MIN;
                let mut best_at = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let at = base + iy as usize * w + ix as usize;
                        if best_at == usize::MAX || x[at] > best {
                            best = x[at];
                            best_at = at;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = best_at;
            }
        }
    }
    (out, arg, ho, wo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.cout * g.ho * g.wo];
        for n in 0..g.n {
            for co in 0..g.cout {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut s = 0.0;
                        for ci in 0..g.cin {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    s += x[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                        out[((n * g.cout + co) * g.ho + oy) * g.wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        let g = ConvGeom { n: 2, cin: 3, h: 7, w: 6, cout: 4, kh: 3, kw: 3, stride: 2, pad: 1, ho: 4, wo: 3 };
        let x: Vec<f64> = (0..2 * 3 * 7 * 6).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..4 * 3 * 9).map(|i| ((i * 13) % 7) as f64 * 0.5 - 1.0).collect();
        let fast = conv2d_forward(&x, &w, None, &g);
        let slow = naive_conv(&x, &w, &g);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_prefers_first_occurrence() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let (out, arg, _, _) = max_pool_forward(&x, (1, 1, 2, 2), 2, 2, 0);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}
