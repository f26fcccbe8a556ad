use super::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

/// Per-channel batch normalisation over `[B, C, ...]`.
///
/// While training and not frozen the batch statistics normalise the input and
/// the running estimates move by `momentum`. Frozen or evaluating layers only
/// read the running estimates, which then never change.
pub struct BatchNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    running_mean: Vec<T>,
    running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
    frozen: bool,
}

/// Plain copy of every piece of batch-norm state.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormSnapshot<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        BatchNorm {
            gamma: Tensor::param(vec![T::one(); channels], &[channels]).expect("shape"),
            beta: Tensor::param(vec![T::zero(); channels], &[channels]).expect("shape"),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps,
            momentum,
            frozen: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn running_mean(&self) -> &[T] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[T] {
        &self.running_var
    }

    pub fn set_running(&mut self, mean: Vec<T>, var: Vec<T>) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return dim_err("set_running", &[mean.len(), var.len()], &[self.channels()]);
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Freezes affine parameters and running statistics.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.gamma.set_requires_grad(false);
        self.beta.set_requires_grad(false);
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        vec![self.gamma.clone(), self.beta.clone()]
    }

    pub fn snapshot(&self) -> BatchNormSnapshot<T> {
        BatchNormSnapshot {
            gamma: self.gamma.to_vec(),
            beta: self.beta.to_vec(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
        }
    }

    pub fn restore(&mut self, s: &BatchNormSnapshot<T>) {
        *self.gamma.data_mut() = s.gamma.clone();
        *self.beta.data_mut() = s.beta.clone();
        self.running_mean = s.running_mean.clone();
        self.running_var = s.running_var.clone();
    }

    /// Deep copy with fresh parameter leaves.
    pub fn duplicate(&self) -> Self {
        BatchNorm {
            gamma: self.gamma.deep_clone(),
            beta: self.beta.deep_clone(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            eps: self.eps,
            momentum: self.momentum,
            frozen: self.frozen,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        self.forward_with(x, training, true)
    }

    /// Like [`forward`](Self::forward), but with `update = false` a training
    /// pass normalises by batch statistics without moving the running ones.
    pub fn forward_with(&mut self, x: &Tensor<T>, training: bool, update: bool) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() < 2 || s[1] != self.channels() {
            return dim_err("batchnorm", s, &[self.channels()]);
        }
        let (b, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if training && !self.frozen {
            if b == 0 || b * inner == 0 {
                return Err(Error::DegenerateBatch("batchnorm needs at least one sample in training".into()));
            }
            self.forward_batch(x, b, c, inner, update)
        } else {
            Ok(self.forward_running(x, b, c, inner))
        }
    }

    fn forward_running(&self, x: &Tensor<T>, b: usize, c: usize, inner: usize) -> Tensor<T> {
        let eps = T::of(self.eps);
        let inv_std: Vec<T> = self.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = self.running_mean.clone();
        let (gd, bd) = (self.gamma.data(), self.beta.data());
        let xd = x.data();
        let mut out = Vec::with_capacity(xd.len());
        for bi in 0..b {
            for ci in 0..c {
                let scale = gd[ci] * inv_std[ci];
                let shift = bd[ci] - mean[ci] * scale;
                let off = (bi * c + ci) * inner;
                out.extend(xd[off..off + inner].iter().map(|&v| v * scale + shift));
            }
        }
        drop((gd, bd, xd));
        Tensor::from_op(
            out,
            x.shape().to_vec(),
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            Box::new(move |g, p| {
                let gdat = p[1].data();
                let xd = p[0].data();
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * inner;
                        let scale = gdat[ci] * inv_std[ci];
                        for i in off..off + inner {
                            gx[i] = g[i] * scale;
                            gg[ci] += g[i] * (xd[i] - mean[ci]) * inv_std[ci];
                            gb[ci] += g[i];
                        }
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            }),
        )
    }

    fn forward_batch(&mut self, x: &Tensor<T>, b: usize, c: usize, inner: usize, update: bool) -> Result<Tensor<T>> {
        let n = b * inner;
        let nt = T::of(n as f64);
        let eps = T::of(self.eps);
        let xd = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for (ci, m) in mean.iter_mut().enumerate() {
                let off = (bi * c + ci) * inner;
                *m += xd[off..off + inner].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= nt);
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * inner;
                var[ci] += xd[off..off + inner].iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= nt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xd.len());
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * inner;
                xhat.extend(xd[off..off + inner].iter().map(|&v| (v - mean[ci]) * inv_std[ci]));
            }
        }
        drop(xd);
        let (gd, bd) = (self.gamma.data(), self.beta.data());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ci = (i / inner) % c;
                v * gd[ci] + bd[ci]
            })
            .collect();
        drop((gd, bd));

        let mom = T::of(self.momentum);
        let unbias = if n > 1 { nt / T::of((n - 1) as f64) } else { T::one() };
        for ci in (0..c).filter(|_| update) {
            self.running_mean[ci] = (T::one() - mom) * self.running_mean[ci] + mom * mean[ci];
            self.running_var[ci] = (T::one() - mom) * self.running_var[ci] + mom * var[ci] * unbias;
        }

        Ok(Tensor::from_op(
            out,
            x.shape().to_vec(),
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            Box::new(move |g, p| {
                let gdat = p[1].data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (&gi, &xh)) in g.iter().zip(&xhat).enumerate() {
                    let ci = (i / inner) % c;
                    sum_g[ci] += gi;
                    sum_gx[ci] += gi * xh;
                }
                let gx = p[0].requires_grad().then(|| {
                    g.iter()
                        .zip(&xhat)
                        .enumerate()
                        .map(|(i, (&gi, &xh))| {
                            let ci = (i / inner) % c;
                            gdat[ci] * inv_std[ci] * (gi - sum_g[ci] / nt - xh * sum_gx[ci] / nt)
                        })
                        .collect()
                });
                vec![gx, Some(sum_gx), Some(sum_g)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_identity_state_passes_input_through() {
        let mut bn = BatchNorm::<f64>::new(2, 1e-5, 0.1);
        bn.freeze();
        let x = Tensor::from_f64(&[0.3, -1.2, 4.0, 2.5], &[2, 2]).unwrap();
        let y = bn.forward(&x, true).unwrap();
        for (a, b) in y.data().iter().zip(x.data().iter()) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn unit_variance_batch_normalises_to_plus_minus_one() {
        let mut bn = BatchNorm::<f64>::new(1, 1e-5, 0.1);
        let x = Tensor::from_f64(&[-1.0, 1.0], &[2, 1]).unwrap();
        let y = bn.forward(&x, true).unwrap().to_vec();
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0] + want).abs() < 1e-15 && (y[1] - want).abs() < 1e-15);
    }

    #[test]
    fn frozen_running_stats_never_move() {
        let mut bn = BatchNorm::<f64>::new(1, 1e-5, 0.1);
        bn.forward(&Tensor::from_f64(&[3.0, 5.0], &[2, 1]).unwrap(), true).unwrap();
        bn.freeze();
        let before = bn.snapshot();
        for _ in 0..10 {
            bn.forward(&Tensor::from_f64(&[30.0, -50.0], &[2, 1]).unwrap(), true).unwrap();
        }
        assert_eq!(before, bn.snapshot());
    }

    #[test]
    fn training_updates_running_mean() {
        let mut bn = BatchNorm::<f64>::new(1, 1e-5, 0.1);
        bn.forward(&Tensor::from_f64(&[3.0, 5.0], &[2, 1]).unwrap(), true).unwrap();
        assert!((bn.running_mean()[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn replay_pass_leaves_running_stats() {
        let mut bn = BatchNorm::<f64>::new(1, 1e-5, 0.1);
        let x = Tensor::from_f64(&[3.0, 5.0], &[2, 1]).unwrap();
        let a = bn.forward_with(&x, true, false).unwrap().to_vec();
        assert_eq!(bn.running_mean(), &[0.0]);
        let b = bn.forward(&x, true).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_training_batch_is_degenerate() {
        let mut bn = BatchNorm::<f64>::new(3, 1e-5, 0.1);
        let x = Tensor::<f64>::zeros(&[0, 3, 2, 2]);
        assert!(matches!(bn.forward(&x, true), Err(Error::DegenerateBatch(_))));
        assert!(bn.forward(&x, false).is_ok());
    }
}
