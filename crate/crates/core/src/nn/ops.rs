//! Numeric kernels behind the graph nodes.

use super::tensor::Tensor;

/// Convolution geometry. 2D convolutions are carried as 3D with unit depth.
#[derive(Clone, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub rank: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        let rank = x.len();
        assert!(rank == 4 || rank == 5, "conv input must be rank 4 or 5, got {x:?}");
        assert_eq!(w.len(), rank, "conv kernel rank {w:?} vs input {x:?}");
        assert_eq!(w[1], x[1], "conv channel mismatch: kernel {w:?} input {x:?}");
        let (in_dims, kernel, stride, pad) = if rank == 4 {
            (
                [1, x[2], x[3]],
                [1, w[2], w[3]],
                [1, stride, stride],
                [0, pad, pad],
            )
        } else {
            (
                [x[2], x[3], x[4]],
                [w[2], w[3], w[4]],
                [stride; 3],
                [pad; 3],
            )
        };
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let span = in_dims[a] + 2 * pad[a];
            assert!(span >= kernel[a], "conv kernel larger than padded input");
            out_dims[a] = (span - kernel[a]) / stride[a] + 1;
        }
        Self {
            batch: x[0],
            in_ch: x[1],
            out_ch: w[0],
            in_dims,
            out_dims,
            kernel,
            stride,
            pad,
            rank,
        }
    }

    fn in_size(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_size(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.rank == 4 {
            vec![self.batch, self.out_ch, self.out_dims[1], self.out_dims[2]]
        } else {
            let [d, h, w] = self.out_dims;
            vec![self.batch, self.out_ch, d, h, w]
        }
    }
}

/// Row-major GEMM: `c = a * b + beta * c` where `a` is `m x k` and `b` is
/// `k x n`. The `*_t` flags mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: operand lengths are checked above and strides describe
    // row-major (or transposed row-major) layouts within those bounds.
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

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let [id, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let plane = od * oh * ow;
    let mut row = 0;
    for c in 0..g.in_ch {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let row_ok =
                                iz >= 0 && iz < id as isize && iy >= 0 && iy < ih as isize;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                dst[o] = if row_ok && ix >= 0 && ix < iw as isize {
                                    xc[(iz as usize * ih + iy as usize) * iw + ix as usize]
                                } else {
                                    0.0
                                };
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let [id, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let plane = od * oh * ow;
    let mut row = 0;
    for c in 0..g.in_ch {
        let xc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * plane..(row + 1) * plane];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                o += ow;
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < iw as isize {
                                    xc[base + ix as usize] += src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &ConvGeom) -> Tensor {
    let mut out = Tensor::zeros(&g.out_shape());
    let (insz, outsz, rows) = (g.in_size(), g.out_size(), g.col_rows());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * outsz]
    };
    for n in 0..g.batch {
        let xn = &x.data()[n * g.in_ch * insz..(n + 1) * g.in_ch * insz];
        let on = &mut out.data_mut()[n * g.out_ch * outsz..(n + 1) * g.out_ch * outsz];
        if let Some(b) = b {
            for (o, chunk) in on.chunks_mut(outsz).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        let src = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        gemm(g.out_ch, rows, outsz, w.data(), false, src, false, beta, on);
    }
    out
}

#[allow(clippy::type_complexity)]
pub fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (insz, outsz, rows) = (g.in_size(), g.out_size(), g.col_rows());
    let mut dx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_w.then(|| Tensor::zeros(w.shape()));
    let mut db = want_b.then(|| Tensor::zeros(&[g.out_ch]));
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0; rows * outsz]
    };
    for n in 0..g.batch {
        let xn = &x.data()[n * g.in_ch * insz..(n + 1) * g.in_ch * insz];
        let dn = &dout.data()[n * g.out_ch * outsz..(n + 1) * g.out_ch * outsz];
        if let Some(db) = db.as_mut() {
            for (o, chunk) in dn.chunks(outsz).enumerate() {
                db.data_mut()[o] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let src = if pointwise {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            gemm(g.out_ch, outsz, rows, dn, false, src, true, 1.0, dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx.data_mut()[n * g.in_ch * insz..(n + 1) * g.in_ch * insz];
            if pointwise {
                gemm(rows, g.out_ch, outsz, w.data(), true, dn, false, 0.0, dxn);
            } else {
                gemm(rows, g.out_ch, outsz, w.data(), true, dn, false, 0.0, &mut cols);
                col2im(&cols, g, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// `(N, C, S)` view of a tensor whose leading axes are batch and channel.
pub fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected (N, C, ...) tensor, got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

/// Per-channel mean and biased variance.
pub fn channel_moments(x: &[f64], n: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * s) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * s;
            mean[ci] += x[base..base + s].iter().sum::<f64>();
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * s;
            var[ci] += x[base..base + s]
                .iter()
                .map(|v| (v - mean[ci]) * (v - mean[ci]))
                .sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= m;
    }
    (mean, var)
}

pub fn max_pool2_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "max_pool2 expects (N, C, H, W)");
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial size");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[s[0], s[1], oh, ow]);
    let mut argmax = vec![0; planes * oh * ow];
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (p * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > best_v || best == usize::MAX {
                            best_v = src[idx];
                            best = idx;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                dst[o] = best_v;
                argmax[o] = best;
            }
        }
    }
    (out, argmax)
}

pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4, "upsample2 expects (N, C, H, W)");
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[s[0], s[1], 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..planes {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dout: &Tensor, in_shape: &[usize]) -> Tensor {
    let (planes, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let mut dx = Tensor::zeros(in_shape);
    let src = dout.data();
    let dst = dx.data_mut();
    for p in 0..planes {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(p * h + y / 2) * w + xx / 2] += src[(p * 2 * h + y) * 2 * w + xx];
            }
        }
    }
    dx
}

pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    assert_eq!(w.shape()[1], f, "linear feature mismatch");
    let mut out = Tensor::zeros(&[n, o]);
    for row in out.data_mut().chunks_mut(o) {
        row.copy_from_slice(b.data());
    }
    gemm(n, f, o, x.data(), false, w.data(), true, 1.0, out.data_mut());
    out
}

pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    want_x: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut dw = Tensor::zeros(w.shape());
    gemm(o, n, f, dout.data(), true, x.data(), false, 0.0, dw.data_mut());
    let mut db = Tensor::zeros(&[o]);
    for row in dout.data().chunks(o) {
        for (d, g) in db.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    let dx = want_x.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        gemm(n, o, f, dout.data(), false, w.data(), false, 0.0, dx.data_mut());
        dx
    });
    (dx, dw, db)
}
