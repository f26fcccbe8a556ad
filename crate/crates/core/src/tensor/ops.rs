//! Elementwise, reduction and dense-algebra operations.

use super::{numel_of, Tensor};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(op, a.shape(), b.shape());
    }
    Ok(())
}

fn unary<T: Scalar>(
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Tensor<T> {
    // df(input, output) -> local derivative
    let out: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    let saved = if x.requires_grad() { out.clone() } else { Vec::new() };
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, p| {
            let xd = p[0].data();
            let gx = g
                .iter()
                .zip(xd.iter().zip(&saved))
                .map(|(&g, (&xi, &yi))| g * df(xi, yi))
                .collect();
            vec![Some(gx)]
        }),
    )
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let out = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let out = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let out = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, p| {
                let (a, b) = (p[0].data(), p[1].data());
                let ga = p[0].requires_grad().then(|| g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect());
                let gb = p[1].requires_grad().then(|| g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect());
                vec![ga, gb]
            }),
        ))
    }

    /// Sum of equally shaped tensors.
    pub fn sum_all(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("sum_all of an empty list".into()))?;
        let mut out = vec![T::zero(); first.numel()];
        for t in items {
            same_shape("sum_all", first, t)?;
            out.iter_mut().zip(t.data().iter()).for_each(|(o, &v)| *o += v);
        }
        let n = items.len();
        Ok(Tensor::from_op(
            out,
            first.shape().to_vec(),
            items.to_vec(),
            Box::new(move |g, _| (0..n).map(|_| Some(g.to_vec())).collect()),
        ))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        unary(self, move |v| v + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        unary(self, move |v| v * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-1.0)
    }

    pub fn relu(&self) -> Tensor<T> {
        unary(
            self,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(
            self,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        unary(self, |v| v.exp(), |_, y| y)
    }

    pub fn log1p(&self) -> Tensor<T> {
        unary(self, |v| v.ln_1p(), |x, _| T::one() / (T::one() + x))
    }

    pub fn square(&self) -> Tensor<T> {
        unary(self, |v| v * v, |x, _| x + x)
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], Vec::new(), vec![self.clone()], Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum().mul_scalar(1.0 / n as f64)
    }

    /// Reduces `[B, ...]` to `[B]` by summing every non-batch axis.
    pub fn sum_per_sample(&self) -> Result<Tensor<T>> {
        let b = *self
            .shape()
            .first()
            .ok_or_else(|| Error::Contract("sum_per_sample on a scalar".into()))?;
        let inner = if b == 0 { 0 } else { self.numel() / b };
        let out: Vec<T> = if inner == 0 {
            vec![T::zero(); b]
        } else {
            self.data().chunks(inner).map(|c| c.iter().copied().sum()).collect()
        };
        Ok(Tensor::from_op(
            out,
            vec![b],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(b * inner);
                for &gi in g {
                    gx.extend(std::iter::repeat_n(gi, inner));
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[B, I] x [I, O] -> [B, O]`.
    pub fn matmul(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let (xs, ws) = (self.shape(), w.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return dim_err("matmul", xs, ws);
        }
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), &self.data(), false, &w.data(), false, T::zero(), &mut out);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), w.clone()],
            Box::new(move |g, p| {
                let gx = p[0].requires_grad().then(|| {
                    let mut gx = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, false, &p[1].data(), true, T::zero(), &mut gx);
                    gx
                });
                let gw = p[1].requires_grad().then(|| {
                    let mut gw = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), &p[0].data(), true, g, false, T::zero(), &mut gw);
                    gw
                });
                vec![gx, gw]
            }),
        ))
    }

    /// Adds `bias[O]` to every row of `[B, O]`.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 2 || bias.shape() != [xs[1]] {
            return dim_err("add_bias", xs, bias.shape());
        }
        let o = xs[1];
        let bd = bias.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % o])
            .collect();
        drop(bd);
        Ok(Tensor::from_op(
            out,
            xs.to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _| {
                let mut gb = vec![T::zero(); o];
                for row in g.chunks(o) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    /// Row-major reshape without copying semantics changes.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return dim_err("reshape", self.shape(), shape);
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&self) -> Result<Tensor<T>> {
        let b = *self
            .shape()
            .first()
            .ok_or_else(|| Error::Contract("flatten of a scalar".into()))?;
        let inner = if b == 0 { 0 } else { self.numel() / b };
        self.reshape(&[b, inner])
    }

    /// Multiplies sample `i` of `[B, ...]` by `w[i]`.
    pub fn scale_rows(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.shape().first().copied().unwrap_or(0);
        if w.shape() != [b] {
            return dim_err("scale_rows", self.shape(), w.shape());
        }
        let inner = if b == 0 { 0 } else { self.numel() / b };
        let wd = w.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wd[i / inner.max(1)])
            .collect();
        drop(wd);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), w.clone()],
            Box::new(move |g, p| {
                let gx = p[0].requires_grad().then(|| {
                    let wd = p[1].data();
                    g.iter().enumerate().map(|(i, &g)| g * wd[i / inner.max(1)]).collect()
                });
                let gw = p[1].requires_grad().then(|| {
                    let xd = p[0].data();
                    g.chunks(inner.max(1))
                        .zip(xd.chunks(inner.max(1)))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect()
                });
                vec![gx, gw]
            }),
        ))
    }

    /// Temperature softmax along the first axis. A 1-D input of length `M`
    /// is treated as one column; a 2-D `[M, B]` input is normalised per column.
    pub fn softmax_t(&self, tau: f64) -> Result<Tensor<T>> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Parameter(format!("softmax temperature must be positive, got {tau}")));
        }
        let (m, cols) = match self.shape() {
            [m] => (*m, 1),
            [m, b] => (*m, *b),
            s => return dim_err("softmax_t", s, &[0, 0]),
        };
        let out = softmax_columns(&self.data(), m, cols, tau);
        let saved = out.clone();
        let inv_tau = T::of(1.0 / tau);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); m * cols];
                for c in 0..cols {
                    let dot: T = (0..m).map(|r| g[r * cols + c] * saved[r * cols + c]).sum();
                    for r in 0..m {
                        let i = r * cols + c;
                        gx[i] = saved[i] * (g[i] - dot) * inv_tau;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Cross-entropy of `[B, K]` logits against class indices. `mean`
    /// selects batch-mean instead of batch-sum reduction.
    pub fn cross_entropy(&self, labels: &[usize], mean: bool) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return dim_err("cross_entropy", s, &[labels.len()]);
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Contract(format!("label {bad} outside 0..{k}")));
        }
        let probs = {
            let d = self.data();
            let mut p = Vec::with_capacity(b * k);
            for row in d.chunks(k) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let e: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
                let z: T = e.iter().copied().sum();
                p.extend(e.into_iter().map(|v| v / z));
            }
            p
        };
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            loss -= probs[i * k + y].max(T::min_positive_value()).ln();
        }
        let scale = if mean { T::one() / T::of(b.max(1) as f64) } else { T::one() };
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![loss * scale],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    gx[i * k + y] -= T::one();
                }
                let f = g[0] * scale;
                gx.iter_mut().for_each(|v| *v *= f);
                vec![Some(gx)]
            }),
        ))
    }

    /// Row-wise L2 normalisation of `[B, D]` (with a small floor on the norm).
    pub fn l2_normalize_rows(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return dim_err("l2_normalize_rows", s, &[0, 0]);
        }
        let d = s[1].max(1);
        let eps = T::of(1e-12);
        let norms: Vec<T> = self
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps))
            .collect();
        let out: Vec<T> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v / norms[i / d])
            .collect();
        let saved = out.clone();
        Ok(Tensor::from_op(
            out,
            s.to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); g.len()];
                for (r, n) in norms.iter().enumerate() {
                    let (gr, yr) = (&g[r * d..(r + 1) * d], &saved[r * d..(r + 1) * d]);
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - yr[j] * dot) / *n;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Columns `start..end` of a `[B, D]` tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 || start > end || end > s[1] {
            return dim_err("slice_cols", s, &[start, end]);
        }
        let (b, d, w) = (s[0], s[1], end - start);
        let src = self.data();
        let mut out = Vec::with_capacity(b * w);
        for r in 0..b {
            out.extend_from_slice(&src[r * d + start..r * d + end]);
        }
        drop(src);
        Ok(Tensor::from_op(
            out,
            vec![b, w],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); b * d];
                for r in 0..b {
                    gx[r * d + start..r * d + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[B, D1] ++ [B, D2] -> [B, D1 + D2]`.
    pub fn concat_cols(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, o) = (self.shape(), other.shape());
        if a.len() != 2 || o.len() != 2 || a[0] != o[0] {
            return dim_err("concat_cols", a, o);
        }
        let (b, d1, d2) = (a[0], a[1], o[1]);
        let (ad, od) = (self.data(), other.data());
        let mut out = Vec::with_capacity(b * (d1 + d2));
        for r in 0..b {
            out.extend_from_slice(&ad[r * d1..(r + 1) * d1]);
            out.extend_from_slice(&od[r * d2..(r + 1) * d2]);
        }
        drop((ad, od));
        let w = d1 + d2;
        Ok(Tensor::from_op(
            out,
            vec![b, w],
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let mut ga = Vec::with_capacity(b * d1);
                let mut gb = Vec::with_capacity(b * d2);
                for r in 0..b {
                    ga.extend_from_slice(&g[r * w..r * w + d1]);
                    gb.extend_from_slice(&g[r * w + d1..(r + 1) * w]);
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }
}

/// `y = x W + b` for `x[B, I]`, `W[I, O]`, `b[O]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    x.matmul(w)?.add_bias(b)
}

/// Column-wise stable softmax of an `[M, cols]` row-major buffer.
pub fn softmax_columns<T: Scalar>(v: &[T], m: usize, cols: usize, tau: f64) -> Vec<T> {
    let tau = T::of(tau);
    let mut out = vec![T::zero(); m * cols];
    for c in 0..cols {
        let mx = (0..m).map(|r| v[r * cols + c]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for r in 0..m {
            let e = ((v[r * cols + c] - mx) / tau).exp();
            out[r * cols + c] = e;
            z += e;
        }
        for r in 0..m {
            out[r * cols + c] /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn linear_identity_and_affine() {
        let y = linear(&t(&[1.0, 2.0], &[1, 2]), &t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]), &t(&[0.0, 0.0], &[2])).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0]);
        let y = linear(&t(&[1.0, 1.0], &[1, 2]), &t(&[2.0, 3.0], &[2, 1]), &t(&[1.0], &[1])).unwrap();
        assert_eq!(y.to_vec(), vec![6.0]);
    }

    #[test]
    fn linear_bias_gradient_is_ones() {
        let x = t(&[0.3, -1.0, 2.0, 0.1, 0.0, 5.0], &[2, 3]);
        let w = t(&[0.1; 12], &[3, 4]);
        let b = Tensor::param(vec![0.0; 4], &[4]).unwrap();
        // sum over a batch of 2 gives 2 per bias entry; use one row for the all-ones case
        let x1 = x.slice_cols(0, 3).unwrap().reshape(&[2, 3]).unwrap();
        linear(&x1, &w, &b).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0; 4]);
        b.zero_grad();
        linear(&t(&[1.0, 2.0, 3.0], &[1, 3]), &w, &b).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let err = linear(&t(&[1.0, 2.0], &[1, 2]), &t(&[1.0; 3], &[3, 1]), &t(&[0.0], &[1])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 1]"), "{msg}");
    }

    #[test]
    fn elementwise_family() {
        let x = t(&[-2.0, 3.0, 0.0], &[3]);
        assert_eq!(x.relu().to_vec(), vec![0.0, 3.0, 0.0]);
        assert_eq!(t(&[0.0], &[1]).sigmoid().item(), 0.5);
    }

    #[test]
    fn softmax_examples() {
        let w = t(&[0.0, 0.0], &[2]).softmax_t(1.0).unwrap().to_vec();
        assert_eq!(w, vec![0.5, 0.5]);
        let w = t(&[3f64.ln(), 0.0], &[2]).softmax_t(1.0).unwrap().to_vec();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        assert!(matches!(t(&[1.0], &[1]).softmax_t(0.0), Err(Error::Parameter(_))));
        assert!(t(&[1.0], &[1]).softmax_t(-1.0).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let l = t(&[0.0; 6], &[2, 3]).cross_entropy(&[0, 2], true).unwrap();
        assert!((l.item() - 3f64.ln()).abs() < 1e-12);
        assert!(t(&[0.0; 6], &[2, 3]).cross_entropy(&[0, 3], true).is_err());
    }

    #[test]
    fn slice_concat_inverse() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 4]);
        let a = x.slice_cols(0, 2).unwrap();
        let b = x.slice_cols(2, 4).unwrap();
        assert_eq!(a.concat_cols(&b).unwrap().to_vec(), x.to_vec());
    }
}
