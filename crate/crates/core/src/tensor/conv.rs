//! Convolution and pooling on `[B, C, H, W]` tensors.

use super::Tensor;
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.b * self.oh * self.ow
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ohw, cols) = (g.oh * g.ow, g.cols());
    let mut out = vec![T::zero(); g.rows() * cols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for b in 0..g.b {
                    let plane = &x[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = oy + ki;
                        if iy < g.pad || iy - g.pad >= g.h {
                            continue;
                        }
                        let iy = iy - g.pad;
                        let base = b * ohw + oy * g.ow;
                        for ox in 0..g.ow {
                            let ix = ox + kj;
                            if ix < g.pad || ix - g.pad >= g.w {
                                continue;
                            }
                            dst[base + ox] = plane[iy * g.w + ix - g.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Scalar>(cols_buf: &[T], g: &ConvGeom) -> Vec<T> {
    let (ohw, cols) = (g.oh * g.ow, g.cols());
    let mut x = vec![T::zero(); g.b * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for b in 0..g.b {
                    let off = (b * g.c + c) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = oy + ki;
                        if iy < g.pad || iy - g.pad >= g.h {
                            continue;
                        }
                        let iy = iy - g.pad;
                        let base = b * ohw + oy * g.ow;
                        for ox in 0..g.ow {
                            let ix = ox + kj;
                            if ix < g.pad || ix - g.pad >= g.w {
                                continue;
                            }
                            x[off + iy * g.w + ix - g.pad] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[F, B*P] -> [B, F, P]`
fn fbp_to_bfp<T: Scalar>(src: &[T], f: usize, b: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for fi in 0..f {
        for bi in 0..b {
            out[(bi * f + fi) * p..(bi * f + fi + 1) * p]
                .copy_from_slice(&src[fi * b * p + bi * p..fi * b * p + (bi + 1) * p]);
        }
    }
    out
}

/// `[B, F, P] -> [F, B*P]`
fn bfp_to_fbp<T: Scalar>(src: &[T], f: usize, b: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for fi in 0..f {
            out[fi * b * p + bi * p..fi * b * p + (bi + 1) * p]
                .copy_from_slice(&src[(bi * f + fi) * p..(bi * f + fi + 1) * p]);
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    /// Stride-1 cross-correlation with symmetric zero padding.
    ///
    /// `self: [B, C, H, W]`, `kernel: [F, C, KH, KW]`, optional `bias: [F]`.
    pub fn conv2d(&self, kernel: &Tensor<T>, bias: Option<&Tensor<T>>, pad: usize) -> Result<Tensor<T>> {
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return dim_err("conv2d", xs, ks);
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return dim_err("conv2d", xs, ks);
        }
        if let Some(bias) = bias {
            if bias.shape() != [f] {
                return dim_err("conv2d bias", ks, bias.shape());
            }
        }
        let g = ConvGeom {
            b,
            c,
            h,
            w,
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        };
        let p = g.oh * g.ow;
        let cols = im2col(&self.data(), &g);
        let mut y = vec![T::zero(); f * g.cols()];
        T::gemm(f, g.rows(), g.cols(), T::one(), &kernel.data(), false, &cols, false, T::zero(), &mut y);
        let mut out = fbp_to_bfp(&y, f, b, p);
        if let Some(bias) = bias {
            let bd = bias.data();
            for (i, chunk) in out.chunks_mut(p).enumerate() {
                let v = bd[i % f];
                chunk.iter_mut().for_each(|o| *o += v);
            }
        }
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        let keep_cols = kernel.requires_grad();
        let cols = if keep_cols { cols } else { Vec::new() };
        Ok(Tensor::from_op(
            out,
            vec![b, f, g.oh, g.ow],
            parents,
            Box::new(move |gy, par| {
                let gyt = bfp_to_fbp(gy, f, b, p);
                let gx = par[0].requires_grad().then(|| {
                    let mut gcols = vec![T::zero(); g.rows() * g.cols()];
                    T::gemm(g.rows(), f, g.cols(), T::one(), &par[1].data(), true, &gyt, false, T::zero(), &mut gcols);
                    col2im(&gcols, &g)
                });
                let gk = par[1].requires_grad().then(|| {
                    let mut gk = vec![T::zero(); f * g.rows()];
                    T::gemm(f, g.cols(), g.rows(), T::one(), &gyt, false, &cols, true, T::zero(), &mut gk);
                    gk
                });
                let mut grads = vec![gx, gk];
                if par.len() == 3 {
                    grads.push(par[2].requires_grad().then(|| {
                        gyt.chunks(b * p).map(|r| r.iter().copied().sum()).collect()
                    }));
                }
                grads
            }),
        ))
    }

    /// Transposed convolution with a 2x2 kernel and stride 2 (exact upsampling
    /// by two). `self: [B, Cin, H, W]`, `kernel: [Cin, Cout, 2, 2]`, `bias: [Cout]`.
    pub fn conv_transpose2x2(&self, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[0] || ks[2] != 2 || ks[3] != 2 {
            return dim_err("conv_transpose2x2", xs, ks);
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ks[1];
        if bias.shape() != [cout] {
            return dim_err("conv_transpose2x2 bias", ks, bias.shape());
        }
        let p = h * w;
        let n = b * p;
        // x as [B*P, Cin]
        let xt = {
            let xd = self.data();
            let mut xt = vec![T::zero(); n * cin];
            for bi in 0..b {
                for ci in 0..cin {
                    let plane = &xd[(bi * cin + ci) * p..(bi * cin + ci + 1) * p];
                    for (pi, &v) in plane.iter().enumerate() {
                        xt[(bi * p + pi) * cin + ci] = v;
                    }
                }
            }
            xt
        };
        let q = cout * 4;
        let mut z = vec![T::zero(); n * q];
        T::gemm(n, cin, q, T::one(), &xt, false, &kernel.data(), false, T::zero(), &mut z);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); b * cout * oh * ow];
        {
            let bd = bias.data();
            for bi in 0..b {
                for i in 0..h {
                    for j in 0..w {
                        let zrow = &z[(bi * p + i * w + j) * q..(bi * p + i * w + j + 1) * q];
                        for o in 0..cout {
                            let base = (bi * cout + o) * oh * ow;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    out[base + (2 * i + di) * ow + 2 * j + dj] = zrow[o * 4 + di * 2 + dj] + bd[o];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![b, cout, oh, ow],
            vec![self.clone(), kernel.clone(), bias.clone()],
            Box::new(move |gy, par| {
                let mut gz = vec![T::zero(); n * q];
                let mut gb = vec![T::zero(); cout];
                for bi in 0..b {
                    for o in 0..cout {
                        let base = (bi * cout + o) * oh * ow;
                        for i in 0..h {
                            for j in 0..w {
                                let zi = (bi * p + i * w + j) * q + o * 4;
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        let v = gy[base + (2 * i + di) * ow + 2 * j + dj];
                                        gz[zi + di * 2 + dj] = v;
                                        gb[o] += v;
                                    }
                                }
                            }
                        }
                    }
                }
                let gx = par[0].requires_grad().then(|| {
                    let mut gxt = vec![T::zero(); n * cin];
                    T::gemm(n, q, cin, T::one(), &gz, false, &par[1].data(), true, T::zero(), &mut gxt);
                    let mut gx = vec![T::zero(); b * cin * p];
                    for bi in 0..b {
                        for ci in 0..cin {
                            for pi in 0..p {
                                gx[(bi * cin + ci) * p + pi] = gxt[(bi * p + pi) * cin + ci];
                            }
                        }
                    }
                    gx
                });
                let gk = par[1].requires_grad().then(|| {
                    let mut gk = vec![T::zero(); cin * q];
                    T::gemm(cin, n, q, T::one(), &xt, true, &gz, false, T::zero(), &mut gk);
                    gk
                });
                vec![gx, gk, Some(gb)]
            }),
        ))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// Gradient goes to the first maximal element of each window.
    pub fn maxpool2(&self) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return dim_err("maxpool2", xs, &[2, 2]);
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut arg = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        drop(xd);
        let total = b * c * h * w;
        Ok(Tensor::from_op(
            out,
            vec![b, c, oh, ow],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); total];
                for (&a, &gv) in arg.iter().zip(g) {
                    gx[a] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }
}
