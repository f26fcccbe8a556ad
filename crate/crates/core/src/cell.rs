//! One composable module: a functional block paired with a local structural
//! component whose loss scores how familiar an input is to the module.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchNorm, BatchNormSnapshot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructuralKind {
    Autoencoder,
    Invertible,
}

/// Batch-norm and score-statistics settings shared by all cells of a network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// EMA factor of the running loss statistics.
    pub stats_decay: f64,
    pub sigma_floor: f64,
    /// Batches observed before z-scores become active.
    pub stats_warmup: u64,
}

impl Default for CellConfig {
    fn default() -> Self {
        CellConfig {
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            stats_decay: 0.99,
            sigma_floor: 1e-3,
            stats_warmup: 10,
        }
    }
}

fn normal_vec<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::of(dist.sample(rng))).collect()
}

fn uniform_vec<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<T> {
    (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect()
}

/// conv3x3(pad 1) -> batch-norm -> relu -> maxpool2
pub struct ConvBlock<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: BatchNorm<T>,
    in_shape: [usize; 3],
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new<R: Rng + ?Sized>(in_shape: [usize; 3], channels: usize, cfg: &CellConfig, rng: &mut R) -> Result<Self> {
        let [c, h, w] = in_shape;
        if c == 0 || channels == 0 || h < 2 || w < 2 {
            return Err(Error::Parameter(format!(
                "conv block needs non-empty input of at least 2x2, got {in_shape:?} -> {channels}"
            )));
        }
        let fan_in = c * 9;
        Ok(ConvBlock {
            weight: Tensor::param(normal_vec(rng, channels * fan_in, (2.0 / fan_in as f64).sqrt()), &[channels, c, 3, 3])?,
            bias: Tensor::param(vec![T::zero(); channels], &[channels])?,
            bn: BatchNorm::new(channels, cfg.bn_eps, cfg.bn_momentum),
            in_shape,
        })
    }

    pub fn in_shape(&self) -> [usize; 3] {
        self.in_shape
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.bias.numel(), self.in_shape[1] / 2, self.in_shape[2] / 2]
    }

    pub fn forward(&mut self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        self.forward_with(x, training, true)
    }

    pub fn forward_with(&mut self, x: &Tensor<T>, training: bool, update_bn: bool) -> Result<Tensor<T>> {
        let y = x.conv2d(&self.weight, Some(&self.bias), 1)?;
        self.bn.forward_with(&y, training, update_bn)?.relu().maxpool2()
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut p = vec![self.weight.clone(), self.bias.clone()];
        p.extend(self.bn.params());
        p
    }
}

/// flatten -> linear
pub struct HeadBlock<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> HeadBlock<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || classes == 0 {
            return Err(Error::Parameter(format!("head needs positive extents, got {in_dim} -> {classes}")));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(HeadBlock {
            weight: Tensor::param(uniform_vec(rng, in_dim * classes, bound), &[in_dim, classes])?,
            bias: Tensor::param(uniform_vec(rng, classes, bound), &[classes])?,
        })
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        crate::tensor::linear(&x.flatten()?, &self.weight, &self.bias)
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

pub enum Functional<T: Scalar> {
    Conv(ConvBlock<T>),
    Head(HeadBlock<T>),
}

impl<T: Scalar> Functional<T> {
    pub fn forward(&mut self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        self.forward_with(x, training, true)
    }

    pub fn forward_with(&mut self, x: &Tensor<T>, training: bool, update_bn: bool) -> Result<Tensor<T>> {
        match self {
            Functional::Conv(b) => b.forward_with(x, training, update_bn),
            Functional::Head(h) => h.forward(x),
        }
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        match self {
            Functional::Conv(b) => b.params(),
            Functional::Head(h) => h.params(),
        }
    }
}

/// convT(2x2, stride 2) -> batch-norm -> relu -> conv3x3(pad 1) -> sigmoid,
/// mapping a conv block's output back to that block's input shape.
pub struct Decoder<T: Scalar> {
    pub up_weight: Tensor<T>,
    pub up_bias: Tensor<T>,
    pub bn: BatchNorm<T>,
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(code_channels: usize, hidden: usize, out_channels: usize, cfg: &CellConfig, rng: &mut R) -> Result<Self> {
        let up_fan = code_channels * 4;
        let out_fan = hidden * 9;
        Ok(Decoder {
            up_weight: Tensor::param(
                normal_vec(rng, code_channels * hidden * 4, (2.0 / up_fan as f64).sqrt()),
                &[code_channels, hidden, 2, 2],
            )?,
            up_bias: Tensor::param(vec![T::zero(); hidden], &[hidden])?,
            bn: BatchNorm::new(hidden, cfg.bn_eps, cfg.bn_momentum),
            out_weight: Tensor::param(
                normal_vec(rng, out_channels * out_fan, (1.0 / out_fan as f64).sqrt()),
                &[out_channels, hidden, 3, 3],
            )?,
            out_bias: Tensor::param(vec![T::zero(); out_channels], &[out_channels])?,
        })
    }

    pub fn forward(&mut self, code: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let up = code.conv_transpose2x2(&self.up_weight, &self.up_bias)?;
        let h = self.bn.forward(&up, training)?.relu();
        Ok(h.conv2d(&self.out_weight, Some(&self.out_bias), 1)?.sigmoid())
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut p = vec![self.up_weight.clone(), self.up_bias.clone()];
        p.extend(self.bn.params());
        p.push(self.out_weight.clone());
        p.push(self.out_bias.clone());
        p
    }
}

/// Additive coupling on an L2-normalised input split into halves `o1, o2`:
/// `a1 = s1(o2) + o1`, `a2 = s2(a1) + o2`, with linear `s1`, `s2`.
pub struct Coupling<T: Scalar> {
    pub s1_weight: Tensor<T>,
    pub s1_bias: Tensor<T>,
    pub s2_weight: Tensor<T>,
    pub s2_bias: Tensor<T>,
}

impl<T: Scalar> Coupling<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Parameter(format!("invertible structural component needs an even feature extent, got {dim}")));
        }
        let h = dim / 2;
        let std = 0.1 / (h as f64).sqrt();
        Ok(Coupling {
            s1_weight: Tensor::param(normal_vec(rng, h * h, std), &[h, h])?,
            s1_bias: Tensor::param(vec![T::zero(); h], &[h])?,
            s2_weight: Tensor::param(normal_vec(rng, h * h, std), &[h, h])?,
            s2_bias: Tensor::param(vec![T::zero(); h], &[h])?,
        })
    }

    pub fn dim(&self) -> usize {
        self.s1_bias.numel() * 2
    }

    /// Maps an (already normalised) `[B, D]` input to the latent `a = (a1, a2)`.
    pub fn forward(&self, o: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.dim() / 2;
        let o1 = o.slice_cols(0, h)?;
        let o2 = o.slice_cols(h, 2 * h)?;
        let a1 = crate::tensor::linear(&o2, &self.s1_weight, &self.s1_bias)?.add(&o1)?;
        let a2 = crate::tensor::linear(&a1, &self.s2_weight, &self.s2_bias)?.add(&o2)?;
        a1.concat_cols(&a2)
    }

    /// Inverse recurrence `o2 = a2 - s2(a1)`, `o1 = a1 - s1(o2)`.
    pub fn inverse(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.dim() / 2;
        let a1 = a.slice_cols(0, h)?;
        let a2 = a.slice_cols(h, 2 * h)?;
        let o2 = a2.sub(&crate::tensor::linear(&a1, &self.s2_weight, &self.s2_bias)?)?;
        let o1 = a1.sub(&crate::tensor::linear(&o2, &self.s1_weight, &self.s1_bias)?)?;
        o1.concat_cols(&o2)
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        vec![self.s1_weight.clone(), self.s1_bias.clone(), self.s2_weight.clone(), self.s2_bias.clone()]
    }
}

pub enum Structural<T: Scalar> {
    Autoencoder(Decoder<T>),
    Invertible(Coupling<T>),
}

impl<T: Scalar> Structural<T> {
    pub fn kind(&self) -> StructuralKind {
        match self {
            Structural::Autoencoder(_) => StructuralKind::Autoencoder,
            Structural::Invertible(_) => StructuralKind::Invertible,
        }
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        match self {
            Structural::Autoencoder(d) => d.params(),
            Structural::Invertible(c) => c.params(),
        }
    }
}

/// Exponential moving estimates of a module's structural-loss distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean: f64,
    pub var: f64,
    pub count: u64,
    pub decay: f64,
    pub floor: f64,
    pub warmup: u64,
}

impl ScoreStats {
    pub fn new(cfg: &CellConfig) -> Self {
        ScoreStats {
            mean: 0.0,
            var: 0.0,
            count: 0,
            decay: cfg.stats_decay,
            floor: cfg.sigma_floor,
            warmup: cfg.stats_warmup,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.var.max(0.0).sqrt().max(self.floor)
    }

    pub fn is_warm(&self) -> bool {
        self.count >= self.warmup
    }

    /// Folds one batch of loss values in. The first batch initialises the
    /// estimates; later batches move them by `1 - decay`.
    pub fn update(&mut self, losses: &[f64]) {
        if losses.is_empty() {
            return;
        }
        let n = losses.len() as f64;
        let m = losses.iter().sum::<f64>() / n;
        let v = losses.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        if self.count == 0 {
            self.mean = m;
            self.var = v;
        } else {
            self.mean = self.decay * self.mean + (1.0 - self.decay) * m;
            self.var = self.decay * self.var + (1.0 - self.decay) * v;
        }
        self.count += 1;
    }

    /// Per-sample `(loss - mean) / max(sigma, floor)`; all zero before warm-up.
    pub fn z_scores(&self, losses: &[f64]) -> Vec<f64> {
        if !self.is_warm() {
            return vec![0.0; losses.len()];
        }
        let s = self.sigma();
        losses.iter().map(|l| (l - self.mean) / s).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeTarget {
    Functional,
    Structural,
    Both,
}

/// Deep copy of every value a cell owns.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSnapshot<T> {
    pub functional: Vec<Vec<T>>,
    pub structural: Vec<Vec<T>>,
    pub bn: Vec<BatchNormSnapshot<T>>,
    pub stats: ScoreStats,
}

/// Output of scoring a batch with one cell.
pub struct Scored<T: Scalar> {
    pub functional_out: Tensor<T>,
    /// Per-sample structural loss `[B]`, attached to the graph.
    pub loss: Tensor<T>,
}

impl<T: Scalar> Scored<T> {
    /// Relatedness `gamma = -loss`, detached.
    pub fn gamma(&self) -> Vec<f64> {
        self.loss.data().iter().map(|v| -v.f64()).collect()
    }
}

pub struct ModuleCell<T: Scalar> {
    pub functional: Functional<T>,
    pub structural: Structural<T>,
    pub stats: ScoreStats,
    frozen_functional: bool,
    frozen_structural: bool,
    birth_task: usize,
    checkpoint: Option<CellSnapshot<T>>,
}

impl<T: Scalar> ModuleCell<T> {
    /// Conv block with an autoencoder structural component.
    pub fn conv<R: Rng + ?Sized>(in_shape: [usize; 3], channels: usize, birth_task: usize, cfg: &CellConfig, rng: &mut R) -> Result<Self> {
        if in_shape[1] % 2 != 0 || in_shape[2] % 2 != 0 {
            return Err(Error::Parameter(format!("autoencoder cells need even spatial extents, got {in_shape:?}")));
        }
        let block = ConvBlock::new(in_shape, channels, cfg, rng)?;
        let dec = Decoder::new(channels, channels, in_shape[0], cfg, rng)?;
        Ok(Self::assemble(Functional::Conv(block), Structural::Autoencoder(dec), birth_task, cfg))
    }

    /// Linear output head with an invertible structural component over its
    /// flattened input.
    pub fn head<R: Rng + ?Sized>(in_dim: usize, classes: usize, birth_task: usize, cfg: &CellConfig, rng: &mut R) -> Result<Self> {
        let coupling = Coupling::new(in_dim, rng)?;
        let head = HeadBlock::new(in_dim, classes, rng)?;
        Ok(Self::assemble(Functional::Head(head), Structural::Invertible(coupling), birth_task, cfg))
    }

    pub fn assemble(functional: Functional<T>, structural: Structural<T>, birth_task: usize, cfg: &CellConfig) -> Self {
        ModuleCell {
            functional,
            structural,
            stats: ScoreStats::new(cfg),
            frozen_functional: false,
            frozen_structural: false,
            birth_task,
            checkpoint: None,
        }
    }

    pub fn birth_task(&self) -> usize {
        self.birth_task
    }

    pub fn is_frozen_functional(&self) -> bool {
        self.frozen_functional
    }

    pub fn is_frozen_structural(&self) -> bool {
        self.frozen_structural
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_functional && self.frozen_structural
    }

    pub fn classes(&self) -> Option<usize> {
        match &self.functional {
            Functional::Head(h) => Some(h.classes()),
            Functional::Conv(_) => None,
        }
    }

    pub fn run_functional(&mut self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        self.functional.forward(x, training)
    }

    /// Second functional pass over the same batch that leaves batch-norm
    /// running statistics alone.
    pub fn replay_functional(&mut self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        self.functional.forward_with(x, training, false)
    }

    /// Per-sample structural loss `[B]` in `log(1 + ||.||^2)` form.
    ///
    /// Autoencoder: reconstruction error of `input` decoded from
    /// `functional_out`. Invertible: squared norm of the coupling latent of the
    /// L2-normalised flattened `input`.
    pub fn structural_loss(&mut self, functional_out: &Tensor<T>, input: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        match &mut self.structural {
            Structural::Autoencoder(dec) => {
                let recon = dec.forward(functional_out, training)?;
                if recon.shape() != input.shape() {
                    return crate::error::dim_err("reconstruction", recon.shape(), input.shape());
                }
                Ok(recon.sub(input)?.square().sum_per_sample()?.log1p())
            }
            Structural::Invertible(c) => {
                let o = input.flatten()?;
                if o.shape()[1] != c.dim() {
                    return crate::error::dim_err("coupling", o.shape(), &[c.dim()]);
                }
                Ok(c.forward(&o.l2_normalize_rows()?)?.square().sum_per_sample()?.log1p())
            }
        }
    }

    /// Runs the functional block once and scores the batch.
    pub fn score(&mut self, input: &Tensor<T>, training: bool) -> Result<Scored<T>> {
        let functional_out = self.run_functional(input, training)?;
        let loss = self.structural_loss(&functional_out, input, training)?;
        Ok(Scored { functional_out, loss })
    }

    /// `(gamma, functional output)` for a batch.
    pub fn relatedness(&mut self, input: &Tensor<T>, training: bool) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = self.score(input, training)?;
        Ok((s.loss.neg(), s.functional_out))
    }

    /// Running statistics move only while the structural component trains.
    pub fn update_stats(&mut self, losses: &[f64]) {
        if !self.frozen_structural {
            self.stats.update(losses);
        }
    }

    pub fn z_scores(&self, losses: &[f64]) -> Vec<f64> {
        self.stats.z_scores(losses)
    }

    pub fn freeze(&mut self, what: FreezeTarget) {
        if matches!(what, FreezeTarget::Functional | FreezeTarget::Both) {
            self.frozen_functional = true;
            for p in self.functional.params() {
                p.set_requires_grad(false);
            }
            if let Functional::Conv(b) = &mut self.functional {
                b.bn.freeze();
            }
        }
        if matches!(what, FreezeTarget::Structural | FreezeTarget::Both) {
            self.frozen_structural = true;
            for p in self.structural.params() {
                p.set_requires_grad(false);
            }
            if let Structural::Autoencoder(d) = &mut self.structural {
                d.bn.freeze();
            }
        }
    }

    pub fn functional_params(&self) -> Vec<Tensor<T>> {
        self.functional.params()
    }

    pub fn structural_params(&self) -> Vec<Tensor<T>> {
        self.structural.params()
    }

    pub fn all_params(&self) -> Vec<Tensor<T>> {
        let mut p = self.functional_params();
        p.extend(self.structural_params());
        p
    }

    /// Parameters an optimizer may touch.
    pub fn trainable_params(&self) -> Vec<Tensor<T>> {
        self.all_params().into_iter().filter(Tensor::requires_grad).collect()
    }

    pub fn param_count(&self) -> usize {
        self.all_params().iter().map(Tensor::numel).sum()
    }

    fn bns(&self) -> Vec<&BatchNorm<T>> {
        let mut v = Vec::new();
        if let Functional::Conv(b) = &self.functional {
            v.push(&b.bn);
        }
        if let Structural::Autoencoder(d) = &self.structural {
            v.push(&d.bn);
        }
        v
    }

    fn bns_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = Vec::new();
        if let Functional::Conv(b) = &mut self.functional {
            v.push(&mut b.bn);
        }
        if let Structural::Autoencoder(d) = &mut self.structural {
            v.push(&mut d.bn);
        }
        v
    }

    pub fn snapshot(&self) -> CellSnapshot<T> {
        CellSnapshot {
            functional: self.functional_params().iter().map(Tensor::to_vec).collect(),
            structural: self.structural_params().iter().map(Tensor::to_vec).collect(),
            bn: self.bns().iter().map(|b| b.snapshot()).collect(),
            stats: self.stats,
        }
    }

    fn restore(&mut self, s: &CellSnapshot<T>) {
        for (p, v) in self.functional_params().iter().zip(&s.functional) {
            *p.data_mut() = v.clone();
        }
        for (p, v) in self.structural_params().iter().zip(&s.structural) {
            *p.data_mut() = v.clone();
        }
        for (b, v) in self.bns_mut().into_iter().zip(&s.bn) {
            b.restore(v);
        }
        self.stats = s.stats;
    }

    pub fn checkpoint(&mut self) {
        self.checkpoint = Some(self.snapshot());
    }

    pub fn has_checkpoint(&self) -> bool {
        self.checkpoint.is_some()
    }

    pub fn rollback(&mut self) -> Result<()> {
        let snap = self
            .checkpoint
            .clone()
            .ok_or_else(|| Error::Contract("rollback without a checkpoint".into()))?;
        self.restore(&snap);
        Ok(())
    }

    /// Independent deep copy (fresh tensor leaves, same flags and statistics).
    pub fn duplicate(&self) -> Self {
        let functional = match &self.functional {
            Functional::Conv(b) => Functional::Conv(ConvBlock {
                weight: b.weight.deep_clone(),
                bias: b.bias.deep_clone(),
                bn: b.bn.duplicate(),
                in_shape: b.in_shape,
            }),
            Functional::Head(h) => Functional::Head(HeadBlock {
                weight: h.weight.deep_clone(),
                bias: h.bias.deep_clone(),
            }),
        };
        let structural = match &self.structural {
            Structural::Autoencoder(d) => Structural::Autoencoder(Decoder {
                up_weight: d.up_weight.deep_clone(),
                up_bias: d.up_bias.deep_clone(),
                bn: d.bn.duplicate(),
                out_weight: d.out_weight.deep_clone(),
                out_bias: d.out_bias.deep_clone(),
            }),
            Structural::Invertible(c) => Structural::Invertible(Coupling {
                s1_weight: c.s1_weight.deep_clone(),
                s1_bias: c.s1_bias.deep_clone(),
                s2_weight: c.s2_weight.deep_clone(),
                s2_bias: c.s2_bias.deep_clone(),
            }),
        };
        ModuleCell {
            functional,
            structural,
            stats: self.stats,
            frozen_functional: self.frozen_functional,
            frozen_structural: self.frozen_structural,
            birth_task: self.birth_task,
            checkpoint: self.checkpoint.clone(),
        }
    }

    /// Trainable copy born in `birth_task`, with fresh score statistics.
    pub fn spawn(&self, birth_task: usize) -> Self {
        let mut c = self.duplicate();
        for p in c.all_params() {
            p.set_requires_grad(true);
        }
        if let Functional::Conv(b) = &mut c.functional {
            b.bn.unfreeze();
        }
        if let Structural::Autoencoder(d) = &mut c.structural {
            d.bn.unfreeze();
        }
        c.frozen_functional = false;
        c.frozen_structural = false;
        c.birth_task = birth_task;
        c.checkpoint = None;
        c.stats = ScoreStats { mean: 0.0, var: 0.0, count: 0, ..self.stats };
        c
    }

    /// Named tensors (name, shape, values) in a stable order, batch-norm
    /// running statistics included.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let mut push = |name: &str, t: &Tensor<T>| out.push((name.to_string(), t.shape().to_vec(), t.to_f64_vec()));
        match &self.functional {
            Functional::Conv(b) => {
                push("f.conv.weight", &b.weight);
                push("f.conv.bias", &b.bias);
                push("f.bn.gamma", &b.bn.gamma);
                push("f.bn.beta", &b.bn.beta);
            }
            Functional::Head(h) => {
                push("f.head.weight", &h.weight);
                push("f.head.bias", &h.bias);
            }
        }
        match &self.structural {
            Structural::Autoencoder(d) => {
                push("s.up.weight", &d.up_weight);
                push("s.up.bias", &d.up_bias);
                push("s.bn.gamma", &d.bn.gamma);
                push("s.bn.beta", &d.bn.beta);
                push("s.out.weight", &d.out_weight);
                push("s.out.bias", &d.out_bias);
            }
            Structural::Invertible(c) => {
                push("s.s1.weight", &c.s1_weight);
                push("s.s1.bias", &c.s1_bias);
                push("s.s2.weight", &c.s2_weight);
                push("s.s2.bias", &c.s2_bias);
            }
        }
        for (prefix, bn) in self.bn_labels() {
            out.push((format!("{prefix}.running_mean"), vec![bn.channels()], bn.running_mean().iter().map(|v| v.f64()).collect()));
            out.push((format!("{prefix}.running_var"), vec![bn.channels()], bn.running_var().iter().map(|v| v.f64()).collect()));
        }
        out
    }

    fn bn_labels(&self) -> Vec<(&'static str, &BatchNorm<T>)> {
        let mut v = Vec::new();
        if let Functional::Conv(b) = &self.functional {
            v.push(("f.bn", &b.bn));
        }
        if let Structural::Autoencoder(d) = &self.structural {
            v.push(("s.bn", &d.bn));
        }
        v
    }

    /// Loads values produced by [`named_tensors`](Self::named_tensors) into a
    /// cell of identical architecture.
    pub fn load_named(&mut self, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let expected = self.named_tensors();
        if expected.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "cell expects {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((en, es, _), (n, s, _)) in expected.iter().zip(tensors) {
            if en != n || es != s {
                return Err(Error::Contract(format!("tensor {n} {s:?} does not match {en} {es:?}")));
            }
        }
        let conv = |v: &Vec<f64>| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
        let params = self.all_params();
        for (p, (_, _, v)) in params.iter().zip(tensors) {
            *p.data_mut() = conv(v);
        }
        let mut rest = tensors[params.len()..].iter();
        for bn in self.bns_mut() {
            let m = rest.next().expect("length checked");
            let v = rest.next().expect("length checked");
            bn.set_running(conv(&m.2), conv(&v.2))?;
        }
        Ok(())
    }

    /// Restores freeze flags after loading.
    pub fn set_flags(&mut self, frozen_functional: bool, frozen_structural: bool, stats: ScoreStats) {
        if frozen_functional {
            self.freeze(FreezeTarget::Functional);
        }
        if frozen_structural {
            self.freeze(FreezeTarget::Structural);
        }
        self.stats = stats;
    }
}
