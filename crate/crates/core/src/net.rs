//! Layers of module cells plus per-task heads, composed by relatedness-based
//! soft gating, with on-line expansion and layer-wise combination.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{CellConfig, FreezeTarget, ModuleCell, ScoreStats};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{io, softmax_columns, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub tau: f64,
    /// Temperature of the batch-level prior in batched gating.
    pub tau_batch: f64,
    pub batched: bool,
    /// One-hot selection of the best module at every layer.
    pub hard: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            tau: 0.1,
            tau_batch: 0.1,
            batched: false,
            hard: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    pub enabled: bool,
    pub z_threshold: f64,
    /// Decide per sample instead of on the batch-mean z-score.
    pub per_sample: bool,
    /// Start new modules as copies of the layer's best-scoring module.
    pub inherit: bool,
    /// Gate off current-task modules whose batch is an outlier for them.
    pub mask_outliers: bool,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            enabled: true,
            z_threshold: 2.0,
            per_sample: false,
            inherit: true,
            mask_outliers: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_shape: [usize; 3],
    pub channels: usize,
    pub depth: usize,
    pub gate: GateConfig,
    pub expansion: ExpansionConfig,
    pub cell: CellConfig,
    /// Skip structural components entirely (plain modular baselines).
    pub compute_structural: bool,
    /// Let structural losses of fixed modules reach the functional blocks
    /// of lower layers.
    pub structural_backprop: bool,
    /// Gradient scale on that upstream signal; loss values are unaffected.
    pub projection_strength: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_shape: [3, 16, 16],
            channels: 16,
            depth: 4,
            gate: GateConfig::default(),
            expansion: ExpansionConfig::default(),
            cell: CellConfig::default(),
            compute_structural: true,
            structural_backprop: true,
            projection_strength: 0.03,
            seed: 0,
        }
    }
}

impl NetConfig {
    /// Input shape of conv layer `l`.
    pub fn layer_in_shape(&self, l: usize) -> [usize; 3] {
        if l == 0 {
            return self.in_shape;
        }
        let [_, h, w] = self.in_shape;
        [self.channels, h >> l, w >> l]
    }

    /// Flattened extent of the top representation fed to the heads.
    pub fn head_dim(&self) -> usize {
        let [c, h, w] = self.layer_in_shape(self.depth);
        c * h * w
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.in_shape;
        if c == 0 || self.channels == 0 || self.depth == 0 {
            return Err(Error::Parameter("network extents must be positive".into()));
        }
        if h % (1 << self.depth) != 0 || w % (1 << self.depth) != 0 {
            return Err(Error::Parameter(format!(
                "spatial extent {h}x{w} must be divisible by 2^{}",
                self.depth
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Parameter(format!("head input extent {} must be even", self.head_dim())));
        }
        if !(0.0..=1.0).contains(&self.projection_strength) {
            return Err(Error::Parameter(format!("projection strength must lie in [0, 1], got {}", self.projection_strength)));
        }
        for tau in [self.gate.tau, self.gate.tau_batch] {
            if !(tau > 0.0) {
                return Err(Error::Parameter(format!("gating temperature must be positive, got {tau}")));
            }
        }
        Ok(())
    }
}

/// Same values as `t`, gradient scaled by `alpha`.
fn damp<T: Scalar>(t: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    let d = t.detach();
    d.add(&t.sub(&d)?.mul_scalar(alpha))
}

/// Per-sample mixing weights for `gamma` laid out `[M, B]` row-major.
///
/// Plain: column softmax at `tau`. Batched: the plain weights times the batch
/// mean of a softmax at `tau_batch`, renormalised per column.
pub fn gate_weights(gamma: &[f64], m: usize, b: usize, cfg: &GateConfig) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::Contract("gating over zero modules".into()));
    }
    if gamma.len() != m * b {
        return crate::error::dim_err("gate_weights", &[gamma.len()], &[m, b]);
    }
    for tau in [cfg.tau, cfg.tau_batch] {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Parameter(format!("gating temperature must be positive, got {tau}")));
        }
    }
    if m == 1 {
        return Ok(vec![1.0; b]);
    }
    let mut w = softmax_columns(gamma, m, b, cfg.tau);
    if cfg.batched && b > 0 {
        let prior = softmax_columns(gamma, m, b, cfg.tau_batch);
        let mu: Vec<f64> = (0..m).map(|r| prior[r * b..(r + 1) * b].iter().sum::<f64>() / b as f64).collect();
        for r in 0..m {
            w[r * b..(r + 1) * b].iter_mut().for_each(|v| *v *= mu[r]);
        }
        normalize_columns(&mut w, m, b);
    }
    if cfg.hard {
        harden(&mut w, m, b);
    }
    Ok(w)
}

fn normalize_columns(w: &mut [f64], m: usize, b: usize) {
    for c in 0..b {
        let z: f64 = (0..m).map(|r| w[r * b + c]).sum();
        if z > 0.0 {
            (0..m).for_each(|r| w[r * b + c] /= z);
        }
    }
}

/// One-hot at the first maximum of every column.
fn harden(w: &mut [f64], m: usize, b: usize) {
    for c in 0..b {
        let mut best = 0;
        for r in 1..m {
            if w[r * b + c] > w[best * b + c] {
                best = r;
            }
        }
        (0..m).for_each(|r| w[r * b + c] = if r == best { 1.0 } else { 0.0 });
    }
}

pub struct Layer<T: Scalar> {
    pub index: usize,
    pub cells: Vec<ModuleCell<T>>,
    /// Freeze every existing cell when a fresh one is appended.
    pub freeze_on_expand: bool,
}

impl<T: Scalar> Layer<T> {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    /// `gamma[m][b]`
    pub gamma: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub mean_z: Vec<f64>,
    /// Indices of the cells that were evaluated (all of them unless routed).
    pub cells: Vec<usize>,
    /// Value of `-sum_m sum(gamma_m * w_m)` for this stage.
    pub structural: f64,
}

impl LayerRecord {
    pub fn recomputed_structural(&self) -> f64 {
        -self
            .gamma
            .iter()
            .zip(&self.weights)
            .map(|(g, w)| g.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionEvent {
    pub task: usize,
    pub layer: usize,
    /// Module count at the layer after the addition.
    pub modules: usize,
    pub mean_z: Vec<f64>,
}

pub struct ForwardTrace<T: Scalar> {
    pub layers: Vec<LayerRecord>,
    /// Head stage; in training and aware evaluation it holds one row.
    pub head: Option<LayerRecord>,
    pub structural_loss: Tensor<T>,
    pub expansions: Vec<ExpansionEvent>,
    pub selected_head: usize,
}

impl<T: Scalar> ForwardTrace<T> {
    /// `-sum_l sum_m sum(gamma * w)` over every recorded stage.
    pub fn recomputed_structural(&self) -> f64 {
        self.layers.iter().chain(self.head.iter()).map(LayerRecord::recomputed_structural).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMode {
    Aware(usize),
    Agnostic,
}

/// Seed for the cell created at `(layer, slot)`; heads use `layer = usize::MAX`.
fn cell_seed(seed: u64, layer: usize, slot: usize, task: usize) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [layer as u64, slot as u64, task as u64] {
        h = (h ^ v).wrapping_mul(0x100_0000_01B3).rotate_left(29);
    }
    h
}

pub struct LmcNetwork<T: Scalar> {
    pub cfg: NetConfig,
    pub layers: Vec<Layer<T>>,
    heads: BTreeMap<usize, ModuleCell<T>>,
    training: bool,
    current_task: usize,
    /// Forced path of module indices, one per layer.
    route: Option<Vec<usize>>,
}

impl<T: Scalar> LmcNetwork<T> {
    /// One fresh cell per layer, no heads.
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut net = Self::shell(cfg)?;
        for l in 0..cfg.depth {
            let cell = net.fresh_cell(l, 0)?;
            net.layers[l].cells.push(cell);
        }
        Ok(net)
    }

    /// Network with empty layers, useful only as a combination donor.
    pub fn shell(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LmcNetwork {
            cfg,
            layers: (0..cfg.depth)
                .map(|index| Layer {
                    index,
                    cells: Vec::new(),
                    freeze_on_expand: true,
                })
                .collect(),
            heads: BTreeMap::new(),
            training: false,
            current_task: 0,
            route: None,
        })
    }

    fn fresh_cell(&self, layer: usize, task: usize) -> Result<ModuleCell<T>> {
        let slot = self.layers[layer].cells.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(self.cfg.seed, layer, slot, task));
        ModuleCell::conv(self.cfg.layer_in_shape(layer), self.cfg.channels, task, &self.cfg.cell, &mut rng)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn train(&mut self) {
        self.training = true;
    }

    pub fn eval(&mut self) {
        self.training = false;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn current_task(&self) -> usize {
        self.current_task
    }

    pub fn set_current_task(&mut self, task: usize) {
        self.current_task = task;
    }

    pub fn set_route(&mut self, route: Option<Vec<usize>>) -> Result<()> {
        if let Some(r) = &route {
            if r.len() != self.depth() {
                return Err(Error::Contract(format!("route of length {} for depth {}", r.len(), self.depth())));
            }
            for (l, &m) in r.iter().enumerate() {
                if m >= self.layers[l].len() {
                    return Err(Error::Contract(format!("route selects module {m} of {} at layer {l}", self.layers[l].len())));
                }
            }
        }
        self.route = route;
        Ok(())
    }

    pub fn route(&self) -> Option<&[usize]> {
        self.route.as_deref()
    }

    /// Trunk modules per layer (heads excluded).
    pub fn module_counts(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::len).collect()
    }

    pub fn module_count(&self) -> usize {
        self.module_counts().iter().sum()
    }

    pub fn param_count(&self) -> usize {
        self.cells().map(ModuleCell::param_count).sum::<usize>() + self.heads.values().map(ModuleCell::param_count).sum::<usize>()
    }

    pub fn cells(&self) -> impl Iterator<Item = &ModuleCell<T>> {
        self.layers.iter().flat_map(|l| l.cells.iter())
    }

    pub fn cells_mut(&mut self) -> impl Iterator<Item = &mut ModuleCell<T>> {
        self.layers.iter_mut().flat_map(|l| l.cells.iter_mut())
    }

    pub fn heads(&self) -> &BTreeMap<usize, ModuleCell<T>> {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut BTreeMap<usize, ModuleCell<T>> {
        &mut self.heads
    }

    pub fn head_ids(&self) -> Vec<usize> {
        self.heads.keys().copied().collect()
    }

    pub fn add_head(&mut self, task: usize, classes: usize) -> Result<()> {
        if self.heads.contains_key(&task) {
            return Err(Error::Contract(format!("head for task {task} already exists")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(self.cfg.seed, usize::MAX, task, task));
        let head = ModuleCell::head(self.cfg.head_dim(), classes, task, &self.cfg.cell, &mut rng)?;
        self.heads.insert(task, head);
        Ok(())
    }

    /// Parameters the optimizer may update: unfrozen trunk cells plus the
    /// head of `task` (other heads never train).
    pub fn trainable_params(&self, task: usize) -> Vec<Tensor<T>> {
        let mut p: Vec<Tensor<T>> = self.cells().flat_map(ModuleCell::trainable_params).collect();
        if let Some(h) = self.heads.get(&task) {
            p.extend(h.trainable_params());
        }
        p
    }

    pub fn freeze_all(&mut self, what: FreezeTarget) {
        self.cells_mut().for_each(|c| c.freeze(what));
        self.heads.values_mut().for_each(|c| c.freeze(what));
    }

    fn layer_forward(&mut self, l: usize, x: &Tensor<T>, allow_expansion: bool, expanded: &mut bool, events: &mut Vec<ExpansionEvent>) -> Result<(Tensor<T>, LayerRecord, Option<Tensor<T>>)> {
        let training = self.training;
        let task = self.current_task;
        let cfg = self.cfg;
        let b = x.shape()[0];
        let route = self.route.as_ref().map(|r| r[l]);

        if let Some(m) = route {
            let cell = &mut self.layers[l].cells[m];
            let f = cell.run_functional(x, training)?;
            let rec = LayerRecord {
                gamma: vec![vec![0.0; b]],
                weights: vec![vec![1.0; b]],
                mean_z: vec![0.0],
                cells: vec![m],
                structural: 0.0,
            };
            return Ok((f, rec, None));
        }

        if !cfg.compute_structural {
            let cells = &mut self.layers[l].cells;
            let m = cells.len();
            let w = 1.0 / m as f64;
            let mut out: Option<Tensor<T>> = None;
            for cell in cells.iter_mut() {
                let f = cell.run_functional(x, training)?;
                let f = if m == 1 { f } else { f.mul_scalar(w) };
                out = Some(match out {
                    None => f,
                    Some(acc) => acc.add(&f)?,
                });
            }
            let out = out.ok_or_else(|| Error::Contract(format!("layer {l} has no modules")))?;
            let rec = LayerRecord {
                gamma: vec![vec![0.0; b]; m],
                weights: vec![vec![w; b]; m],
                mean_z: vec![0.0; m],
                cells: (0..m).collect(),
                structural: 0.0,
            };
            return Ok((out, rec, None));
        }

        let mut outs = Vec::new();
        let mut losses = Vec::new();
        for m in 0..self.layers[l].len() {
            let (f, loss) = self.score_cell(l, m, x)?;
            outs.push(f);
            losses.push(loss);
        }
        if outs.is_empty() {
            return Err(Error::Contract(format!("layer {l} has no modules")));
        }
        let mut loss_vals: Vec<Vec<f64>> = losses.iter().map(Tensor::to_f64_vec).collect();
        let mut mean_z: Vec<f64> = self.layers[l]
            .cells
            .iter()
            .zip(&loss_vals)
            .map(|(c, lv)| mean(&c.z_scores(lv)))
            .collect();

        if training {
            let outlier = self.layer_is_outlier(l, &loss_vals, &mean_z);
            let fresh_here = self.layers[l].cells.iter().any(|c| c.birth_task() == task);
            if allow_expansion && cfg.expansion.enabled && task > 0 && !*expanded && outlier && !fresh_here {
                if self.layers[l].freeze_on_expand {
                    self.layers[l].cells.iter_mut().for_each(|c| c.freeze(FreezeTarget::Both));
                }
                let cell = if cfg.expansion.inherit {
                    let best = (0..loss_vals.len())
                        .min_by(|&a, &b| mean(&loss_vals[a]).total_cmp(&mean(&loss_vals[b])))
                        .expect("non-empty layer");
                    self.layers[l].cells[best].spawn(task)
                } else {
                    self.fresh_cell(l, task)?
                };
                self.layers[l].cells.push(cell);
                let m = self.layers[l].len() - 1;
                let (f, loss) = self.score_cell(l, m, x)?;
                outs.push(f);
                loss_vals.push(loss.to_f64_vec());
                losses.push(loss);
                events.push(ExpansionEvent {
                    task,
                    layer: l,
                    modules: m + 1,
                    mean_z: mean_z.clone(),
                });
                mean_z.push(0.0);
                *expanded = true;
            }
            for (c, lv) in self.layers[l].cells.iter_mut().zip(&loss_vals) {
                c.update_stats(lv);
            }
        }

        let m = outs.len();
        let gamma: Vec<f64> = loss_vals.iter().flat_map(|lv| lv.iter().map(|v| -v)).collect();
        let mut w = gate_weights(&gamma, m, b, &cfg.gate)?;
        if training && cfg.expansion.mask_outliers {
            self.mask_outliers(l, &mut w, &gamma, &mean_z, b)?;
        }

        let mut out: Option<Tensor<T>> = None;
        let mut structural: Option<Tensor<T>> = None;
        for r in 0..m {
            let wr = &w[r * b..(r + 1) * b];
            let wt = Tensor::from_f64(wr, &[b])?;
            let term = if m == 1 { outs[r].clone() } else { outs[r].scale_rows(&wt)? };
            out = Some(match out {
                None => term,
                Some(acc) => acc.add(&term)?,
            });
            let s = losses[r].mul(&wt)?.sum();
            structural = Some(match structural {
                None => s,
                Some(acc) => acc.add(&s)?,
            });
        }
        let structural = structural.expect("non-empty layer");
        let rec = LayerRecord {
            gamma: gamma.chunks(b.max(1)).map(<[f64]>::to_vec).collect(),
            weights: w.chunks(b.max(1)).map(<[f64]>::to_vec).collect(),
            mean_z,
            cells: (0..m).collect(),
            structural: structural.item().f64(),
        };
        Ok((out.expect("non-empty layer"), rec, Some(structural)))
    }

    /// Functional output and per-sample structural loss of cell `m` at layer `l`.
    ///
    /// Trainable structural components score a detached input, so only fixed
    /// modules send a structural signal down to the layers below.
    fn score_cell(&mut self, l: usize, m: usize, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let training = self.training;
        let alpha = if self.cfg.structural_backprop { self.cfg.projection_strength } else { 0.0 };
        let cell = &mut self.layers[l].cells[m];
        let f = cell.run_functional(x, training)?;
        let loss = if cell.is_frozen_structural() {
            if alpha == 1.0 {
                cell.structural_loss(&f, x, training)?
            } else if alpha == 0.0 || !x.requires_grad() {
                cell.structural_loss(&f.detach(), &x.detach(), training)?
            } else {
                cell.structural_loss(&damp(&f, alpha)?, &damp(x, alpha)?, training)?
            }
        } else if cell.is_frozen_functional() {
            cell.structural_loss(&f.detach(), &x.detach(), training)?
        } else {
            let xd = x.detach();
            let fd = cell.replay_functional(&xd, training)?;
            cell.structural_loss(&fd, &xd, training)?
        };
        Ok((f, loss))
    }

    fn layer_is_outlier(&self, l: usize, loss_vals: &[Vec<f64>], mean_z: &[f64]) -> bool {
        let zt = self.cfg.expansion.z_threshold;
        let cells = &self.layers[l].cells;
        if !cells.iter().all(|c| c.stats.is_warm()) {
            return false;
        }
        if !self.cfg.expansion.per_sample {
            return mean_z.iter().all(|&z| z > zt);
        }
        let zs: Vec<Vec<f64>> = cells.iter().zip(loss_vals).map(|(c, lv)| c.z_scores(lv)).collect();
        let b = loss_vals[0].len();
        let outliers = (0..b).filter(|&i| zs.iter().all(|z| z[i] > zt)).count();
        b > 0 && 2 * outliers >= b
    }

    /// Zeroes cells born in the current task whose mean z exceeds the
    /// threshold; keeps the unmasked weights if nothing would remain.
    fn mask_outliers(&self, l: usize, w: &mut [f64], gamma: &[f64], mean_z: &[f64], b: usize) -> Result<()> {
        let zt = self.cfg.expansion.z_threshold;
        let task = self.current_task;
        let cells = &self.layers[l].cells;
        let masked: Vec<bool> = cells
            .iter()
            .zip(mean_z)
            .map(|(c, &z)| c.birth_task() == task && c.stats.is_warm() && z > zt)
            .collect();
        if !masked.iter().any(|&m| m) || masked.iter().all(|&m| m) {
            return Ok(());
        }
        let m = cells.len();
        if self.cfg.gate.hard {
            // re-select among the cells that remain
            let soft = gate_weights(gamma, m, b, &GateConfig { hard: false, ..self.cfg.gate })?;
            w.copy_from_slice(&soft);
        }
        for (r, &mk) in masked.iter().enumerate() {
            if mk {
                w[r * b..(r + 1) * b].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        normalize_columns(w, m, b);
        if self.cfg.gate.hard {
            harden(w, m, b);
        }
        Ok(())
    }

    /// Full forward pass. Training requires `task` and uses its head;
    /// evaluation with `task = None` selects one head per batch by relatedness.
    pub fn model_forward(&mut self, x: &Tensor<T>, task: Option<usize>, allow_expansion: bool) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        if x.shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::Contract("forward on an empty batch".into()));
        }
        if self.training && task.is_none() {
            return Err(Error::Contract("training forward needs a task id".into()));
        }
        if let Some(t) = task {
            if !self.heads.contains_key(&t) {
                return Err(Error::UnknownTask(t));
            }
            if self.training {
                self.current_task = t;
            }
        }
        let mut expanded = false;
        let mut events = Vec::new();
        let mut records = Vec::with_capacity(self.depth());
        let mut structural: Vec<Tensor<T>> = Vec::new();
        let mut h = x.clone();
        for l in 0..self.depth() {
            let (out, rec, s) = self.layer_forward(l, &h, allow_expansion, &mut expanded, &mut events)?;
            h = out;
            records.push(rec);
            structural.extend(s);
        }
        let (logits, head_rec, selected, head_struct) = self.head_forward(&h, task)?;
        structural.extend(head_struct);
        let structural_loss = if structural.is_empty() {
            Tensor::scalar(T::zero())
        } else {
            Tensor::sum_all(&structural)?
        };
        Ok((
            logits,
            ForwardTrace {
                layers: records,
                head: head_rec,
                structural_loss,
                expansions: events,
                selected_head: selected,
            },
        ))
    }

    fn head_forward(&mut self, h: &Tensor<T>, task: Option<usize>) -> Result<(Tensor<T>, Option<LayerRecord>, usize, Option<Tensor<T>>)> {
        let training = self.training;
        let b = h.shape()[0];
        let structural = self.cfg.compute_structural;
        match task {
            Some(t) => {
                let head = self.heads.get_mut(&t).ok_or(Error::UnknownTask(t))?;
                let logits = head.run_functional(h, training)?;
                if !(training && structural) {
                    return Ok((logits, None, t, None));
                }
                let loss = head.structural_loss(&logits.detach(), &h.detach(), training)?;
                let lv = loss.to_f64_vec();
                head.update_stats(&lv);
                let s = loss.sum();
                let rec = LayerRecord {
                    gamma: vec![lv.iter().map(|v| -v).collect()],
                    weights: vec![vec![1.0; b]],
                    mean_z: vec![mean(&head.z_scores(&lv))],
                    cells: vec![t],
                    structural: s.item().f64(),
                };
                Ok((logits, Some(rec), t, Some(s)))
            }
            None => {
                let ids = self.head_ids();
                if ids.is_empty() {
                    return Err(Error::Contract("no heads registered".into()));
                }
                let m = ids.len();
                let mut gamma = Vec::with_capacity(m * b);
                let mut logits = Vec::with_capacity(m);
                for id in &ids {
                    let head = self.heads.get_mut(id).expect("listed id");
                    let f = head.run_functional(h, training)?;
                    let loss = head.structural_loss(&f, h, training)?;
                    gamma.extend(loss.data().iter().map(|v| -v.f64()));
                    logits.push(f);
                }
                let gate = GateConfig {
                    batched: false,
                    hard: false,
                    ..self.cfg.gate
                };
                let w = gate_weights(&gamma, m, b, &gate)?;
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for r in 0..m {
                    let score = mean(&w[r * b..(r + 1) * b]);
                    if score > best_score {
                        best = r;
                        best_score = score;
                    }
                }
                let rec = LayerRecord {
                    gamma: gamma.chunks(b).map(<[f64]>::to_vec).collect(),
                    weights: w.chunks(b).map(<[f64]>::to_vec).collect(),
                    mean_z: vec![0.0; m],
                    cells: ids.clone(),
                    structural: 0.0,
                };
                Ok((logits.swap_remove(best), Some(rec), ids[best], None))
            }
        }
    }

    /// Evaluation forward without graph recording.
    pub fn predict(&mut self, x: &Tensor<T>, mode: HeadMode) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let was = self.training;
        self.training = false;
        let task = match mode {
            HeadMode::Aware(t) => Some(t),
            HeadMode::Agnostic => None,
        };
        let r = crate::tensor::no_grad(|| self.model_forward(x, task, false));
        self.training = was;
        r
    }

    /// Flattened head input `[b, D]` in eval mode, without graph recording.
    pub fn trunk_features(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let was = self.training;
        self.training = false;
        let r = crate::tensor::no_grad(|| {
            let mut h = x.clone();
            let (mut expanded, mut events) = (false, Vec::new());
            for l in 0..self.depth() {
                h = self.layer_forward(l, &h, false, &mut expanded, &mut events)?.0;
            }
            h.flatten()
        });
        self.training = was;
        r
    }

    /// Mean gating weight per layer and module over `batches`, in eval mode.
    pub fn selection_map(&mut self, batches: &[Tensor<T>], mode: HeadMode) -> Result<Vec<Vec<f64>>> {
        let mut acc: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.len()]).collect();
        let mut n = 0usize;
        for x in batches {
            let (_, trace) = self.predict(x, mode)?;
            for (l, rec) in trace.layers.iter().enumerate() {
                for (r, &cell) in rec.cells.iter().enumerate() {
                    acc[l][cell] += rec.weights[r].iter().sum::<f64>();
                }
            }
            n += x.shape()[0];
        }
        if n > 0 {
            acc.iter_mut().flatten().for_each(|v| *v /= n as f64);
        }
        Ok(acc)
    }

    /// Layer-wise union of `a` and `b`: `a`'s cells first, then `b`'s, all
    /// frozen copies; `b`'s heads are re-keyed past `a`'s largest task id.
    /// Returns the network and the key offset applied to `b`'s heads.
    pub fn combine(a: &LmcNetwork<T>, b: &LmcNetwork<T>) -> Result<(LmcNetwork<T>, usize)> {
        if a.depth() != b.depth() {
            return Err(Error::Combination(format!("depth {} does not match depth {}", a.depth(), b.depth())));
        }
        for l in 0..a.depth() {
            let (sa, sb) = (a.cfg.layer_in_shape(l), b.cfg.layer_in_shape(l));
            if sa != sb || a.cfg.channels != b.cfg.channels {
                return Err(Error::Combination(format!(
                    "layer {l}: input {sa:?} x {} channels vs {sb:?} x {} channels",
                    a.cfg.channels, b.cfg.channels
                )));
            }
        }
        let mut net = LmcNetwork::shell(a.cfg)?;
        for l in 0..a.depth() {
            for c in a.layers[l].cells.iter().chain(&b.layers[l].cells) {
                let mut d = c.duplicate();
                d.freeze(FreezeTarget::Both);
                net.layers[l].cells.push(d);
            }
        }
        let offset = a.heads.keys().next_back().map_or(0, |k| k + 1);
        for (k, h) in a.heads.iter().map(|(k, h)| (*k, h)).chain(b.heads.iter().map(|(k, h)| (k + offset, h))) {
            let mut d = h.duplicate();
            d.freeze(FreezeTarget::Both);
            net.heads.insert(k, d);
        }
        Ok((net, offset))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut layers = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut cells = Vec::new();
            for (m, c) in layer.cells.iter().enumerate() {
                cells.push(save_cell(dir, &format!("l{l}_m{m}"), c, None)?);
            }
            layers.push(cells);
        }
        let mut heads = Vec::new();
        for (t, h) in &self.heads {
            heads.push(save_cell(dir, &format!("head{t}"), h, Some(*t))?);
        }
        let manifest = Manifest {
            config: self.cfg,
            layers,
            heads,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut net = LmcNetwork::shell(manifest.config)?;
        if manifest.layers.len() != net.depth() {
            return Err(Error::Format(format!("manifest lists {} layers for depth {}", manifest.layers.len(), net.depth())));
        }
        let cfg = manifest.config;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (l, cells) in manifest.layers.iter().enumerate() {
            for e in cells {
                let mut c = ModuleCell::conv(cfg.layer_in_shape(l), cfg.channels, e.birth_task, &cfg.cell, &mut rng)?;
                load_cell(dir, &mut c, e)?;
                net.layers[l].cells.push(c);
            }
        }
        for e in &manifest.heads {
            let task = e.head_task.ok_or_else(|| Error::Format("head entry without task id".into()))?;
            let classes = e.classes.ok_or_else(|| Error::Format("head entry without class count".into()))?;
            let mut c = ModuleCell::head(cfg.head_dim(), classes, e.birth_task, &cfg.cell, &mut rng)?;
            load_cell(dir, &mut c, e)?;
            net.heads.insert(task, c);
        }
        Ok(net)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: NetConfig,
    layers: Vec<Vec<CellEntry>>,
    heads: Vec<CellEntry>,
}

#[derive(Serialize, Deserialize)]
struct CellEntry {
    id: String,
    birth_task: usize,
    head_task: Option<usize>,
    classes: Option<usize>,
    frozen_functional: bool,
    frozen_structural: bool,
    stats: ScoreStats,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    role: String,
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn save_cell<T: Scalar>(dir: &Path, id: &str, c: &ModuleCell<T>, head_task: Option<usize>) -> Result<CellEntry> {
    let mut tensors = Vec::new();
    for (name, shape, data) in c.named_tensors() {
        let file = format!("{id}.{name}.lmct");
        io::save(&dir.join(&file), &shape, &data)?;
        let role = if name.starts_with("f.") { "functional" } else { "structural" };
        tensors.push(TensorEntry {
            role: role.into(),
            name,
            shape,
            file,
        });
    }
    Ok(CellEntry {
        id: id.into(),
        birth_task: c.birth_task(),
        head_task,
        classes: c.classes(),
        frozen_functional: c.is_frozen_functional(),
        frozen_structural: c.is_frozen_structural(),
        stats: c.stats,
        tensors,
    })
}

fn load_cell<T: Scalar>(dir: &Path, c: &mut ModuleCell<T>, e: &CellEntry) -> Result<()> {
    let mut named = Vec::with_capacity(e.tensors.len());
    for t in &e.tensors {
        let raw = io::load(&dir.join(&t.file))?;
        if raw.shape != t.shape {
            return Err(Error::Format(format!("{} has shape {:?}, manifest says {:?}", t.file, raw.shape, t.shape)));
        }
        named.push((t.name.clone(), raw.shape, raw.data));
    }
    c.load_named(&named)?;
    c.set_flags(e.frozen_functional, e.frozen_structural, e.stats);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_cfg() -> NetConfig {
        NetConfig {
            in_shape: [3, 8, 8],
            channels: 4,
            depth: 2,
            ..NetConfig::default()
        }
    }

    fn batch(seed: u64, b: usize, cfg: &NetConfig) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = cfg.in_shape;
        Tensor::new((0..b * c * h * w).map(|_| r.random_range(0.0..1.0)).collect(), &[b, c, h, w]).unwrap()
    }

    #[test]
    fn plain_gating_example() {
        let w = gate_weights(&[0.0, 3f64.ln()], 2, 1, &GateConfig { tau: 1.0, ..GateConfig::default() }).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn single_module_weight_is_exactly_one() {
        assert_eq!(gate_weights(&[-3.0, 7.0], 1, 2, &GateConfig::default()).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn nonpositive_temperature_is_rejected() {
        let cfg = GateConfig { tau: 0.0, ..GateConfig::default() };
        assert!(matches!(gate_weights(&[0.0, 1.0], 2, 1, &cfg), Err(Error::Parameter(_))));
        let cfg = GateConfig { tau_batch: -1.0, batched: true, ..GateConfig::default() };
        assert!(matches!(gate_weights(&[0.0, 1.0], 2, 1, &cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn batched_matches_plain_on_identical_columns() {
        let gamma = [0.2, 0.2, 0.2, -1.0, -1.0, -1.0, 0.7, 0.7, 0.7];
        let plain = GateConfig { tau: 0.5, tau_batch: 0.5, ..GateConfig::default() };
        let batched = GateConfig { batched: true, ..plain };
        let a = gate_weights(&gamma, 3, 3, &plain).unwrap();
        let b = gate_weights(&gamma, 3, 3, &batched).unwrap();
        // batched squares the per-column distribution; equality needs the
        // product renormalised back, which holds only when all columns agree
        let sq: Vec<f64> = a.iter().map(|v| v * v).collect();
        let z: f64 = (0..3).map(|r| sq[r * 3]).sum();
        for (x, y) in b.iter().zip(&sq) {
            assert!((x - y / z).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn weights_are_probability_vectors(m in 1usize..5, b in 1usize..6, seed in any::<u64>(), batched: bool, hard: bool) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let gamma: Vec<f64> = (0..m * b).map(|_| r.random_range(-20.0..5.0)).collect();
            let cfg = GateConfig { tau: 0.3, tau_batch: 0.7, batched, hard };
            let w = gate_weights(&gamma, m, b, &cfg).unwrap();
            for c in 0..b {
                let s: f64 = (0..m).map(|r| w[r * b + c]).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!((0..m).all(|r| w[r * b + c] >= 0.0));
                if hard {
                    prop_assert!((0..m).all(|r| w[r * b + c] == 0.0 || w[r * b + c] == 1.0));
                }
            }
        }

        #[test]
        fn plain_gating_is_shift_invariant(m in 1usize..5, b in 1usize..6, seed in any::<u64>(), shift in -50.0f64..50.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let gamma: Vec<f64> = (0..m * b).map(|_| r.random_range(-5.0..5.0)).collect();
            let shifted: Vec<f64> = gamma.iter().map(|g| g + shift).collect();
            let cfg = GateConfig { tau: 0.5, ..GateConfig::default() };
            let a = gate_weights(&gamma, m, b, &cfg).unwrap();
            let s = gate_weights(&shifted, m, b, &cfg).unwrap();
            for (x, y) in a.iter().zip(&s) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_module_layer_outputs_functional_exactly() {
        let cfg = small_cfg();
        let mut net = LmcNetwork::<f64>::new(cfg).unwrap();
        net.add_head(0, 3).unwrap();
        let x = batch(1, 4, &cfg);
        let want = net.layers[0].cells[0].run_functional(&x, false).unwrap().to_vec();
        let (got, rec, _) = net.layer_forward(0, &x, false, &mut false, &mut Vec::new()).unwrap();
        assert_eq!(got.to_vec(), want);
        assert_eq!(rec.weights, vec![vec![1.0; 4]]);
    }

    #[test]
    fn identical_modules_reproduce_single_output() {
        let cfg = small_cfg();
        let mut net = LmcNetwork::<f64>::new(cfg).unwrap();
        let dup = net.layers[0].cells[0].duplicate();
        net.layers[0].cells.push(dup);
        let x = batch(2, 3, &cfg);
        let want = net.layers[0].cells[0].run_functional(&x, false).unwrap().to_vec();
        let (got, rec, _) = net.layer_forward(0, &x, false, &mut false, &mut Vec::new()).unwrap();
        assert!(rec.weights.iter().flatten().all(|&w| (w - 0.5).abs() < 1e-15));
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn three_module_layer_matches_explicit_mixture() {
        let cfg = small_cfg();
        let mut net = LmcNetwork::<f64>::new(cfg).unwrap();
        for _ in 0..2 {
            let c = net.fresh_cell(0, 0).unwrap();
            net.layers[0].cells.push(c);
        }
        let x = batch(3, 5, &cfg);
        let (got, rec, _) = net.layer_forward(0, &x, false, &mut false, &mut Vec::new()).unwrap();
        let mut want = vec![0.0; got.numel()];
        let inner = got.numel() / 5;
        for (m, cell) in net.layers[0].cells.iter_mut().enumerate() {
            let f = cell.run_functional(&x, false).unwrap().to_vec();
            for (i, v) in f.iter().enumerate() {
                want[i] += rec.weights[m][i / inner] * v;
            }
        }
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn training_forward_requires_task() {
        let mut net = LmcNetwork::<f64>::new(small_cfg()).unwrap();
        net.train();
        let x = batch(0, 2, &small_cfg());
        assert!(matches!(net.model_forward(&x, None, true), Err(Error::Contract(_))));
        assert!(matches!(net.model_forward(&x, Some(4), true), Err(Error::UnknownTask(4))));
    }

    #[test]
    fn heads_registry() {
        let mut net = LmcNetwork::<f64>::new(small_cfg()).unwrap();
        for t in 0..6 {
            net.add_head(t, 2 + t).unwrap();
        }
        assert_eq!(net.head_ids(), (0..6).collect::<Vec<_>>());
        assert!(matches!(net.add_head(2, 2), Err(Error::Contract(_))));
        let x = batch(0, 3, &small_cfg());
        let (logits, _) = net.predict(&x, HeadMode::Aware(4)).unwrap();
        assert_eq!(logits.shape(), &[3, 6]);
    }

    #[test]
    fn task_zero_never_expands() {
        let mut cfg = small_cfg();
        cfg.expansion.z_threshold = -1e9;
        cfg.cell.stats_warmup = 0;
        let mut net = LmcNetwork::<f64>::new(cfg).unwrap();
        net.add_head(0, 2).unwrap();
        net.train();
        for s in 0..5 {
            let (_, tr) = net.model_forward(&batch(s, 4, &cfg), Some(0), true).unwrap();
            assert!(tr.expansions.is_empty());
        }
        assert_eq!(net.module_count(), 2);
    }

    #[test]
    fn expansion_happens_once_per_layer_and_task_input_side_first() {
        let mut cfg = small_cfg();
        cfg.expansion.z_threshold = -1e9;
        cfg.cell.stats_warmup = 0;
        let mut net = LmcNetwork::<f64>::new(cfg).unwrap();
        net.add_head(0, 2).unwrap();
        net.add_head(1, 2).unwrap();
        net.train();
        net.model_forward(&batch(0, 4, &cfg), Some(0), true).unwrap();
        net.freeze_all(FreezeTarget::Both);
        let mut layers = Vec::new();
        for s in 0..4 {
            let (_, tr) = net.model_forward(&batch(s, 4, &cfg), Some(1), true).unwrap();
            assert!(tr.expansions.len() <= 1);
            layers.extend(tr.expansions.iter().map(|e| e.layer));
        }
        assert_eq!(layers, vec![0, 1]);
        assert_eq!(net.module_counts(), vec![2, 2]);
    }

    #[test]
    fn high_threshold_keeps_module_count() {
        let mut cfg = small_cfg();
        cfg.expansion.z_threshold = 1e9;
        cfg.cell.stats_warmup = 0;
        let mut net = LmcNetwork::<f64>::new(cfg).unwrap();
        net.add_head(1, 2).unwrap();
        net.train();
        for s in 0..3 {
            net.model_forward(&batch(s, 4, &cfg), Some(1), true).unwrap();
        }
        assert_eq!(net.module_count(), 2);
    }

    #[test]
    fn trace_structural_matches_recomputation() {
        let cfg = small_cfg();
        let mut net = LmcNetwork::<f64>::new(cfg).unwrap();
        let c = net.fresh_cell(1, 0).unwrap();
        net.layers[1].cells.push(c);
        net.add_head(0, 2).unwrap();
        net.train();
        let (_, tr) = net.model_forward(&batch(9, 6, &cfg), Some(0), true).unwrap();
        let v = tr.structural_loss.item();
        assert!((v - tr.recomputed_structural()).abs() < 1e-10 * v.abs().max(1.0));
        for rec in tr.layers.iter().chain(tr.head.iter()) {
            for c in 0..6 {
                let s: f64 = rec.weights.iter().map(|w| w[c]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = small_cfg();
        let mut net = LmcNetwork::<f64>::new(cfg).unwrap();
        net.add_head(0, 2).unwrap();
        net.add_head(1, 2).unwrap();
        net.freeze_all(FreezeTarget::Both);
        let x = batch(5, 4, &cfg);
        let (a, ta) = net.predict(&x, HeadMode::Agnostic).unwrap();
        let (b, tb) = net.predict(&x, HeadMode::Agnostic).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        assert_eq!(ta.selected_head, tb.selected_head);
    }

    #[test]
    fn combine_with_shell_preserves_logits() {
        let cfg = small_cfg();
        let mut net = LmcNetwork::<f64>::new(cfg).unwrap();
        let c = net.fresh_cell(0, 0).unwrap();
        net.layers[0].cells.push(c);
        net.add_head(0, 3).unwrap();
        let shell = LmcNetwork::shell(cfg).unwrap();
        let (mut both, off) = LmcNetwork::combine(&net, &shell).unwrap();
        assert_eq!(off, 1);
        assert_eq!(both.module_counts(), net.module_counts());
        let x = batch(4, 3, &cfg);
        for mode in [HeadMode::Aware(0), HeadMode::Agnostic] {
            assert_eq!(net.predict(&x, mode).unwrap().0.to_vec(), both.predict(&x, mode).unwrap().0.to_vec());
        }
    }

    #[test]
    fn combine_counts_rekeys_and_routes() {
        let cfg = small_cfg();
        let mut a = LmcNetwork::<f64>::new(cfg).unwrap();
        a.add_head(0, 2).unwrap();
        a.add_head(1, 2).unwrap();
        let mut b = LmcNetwork::<f64>::new(NetConfig { seed: 7, ..cfg }).unwrap();
        let c = b.fresh_cell(1, 0).unwrap();
        b.layers[1].cells.push(c);
        b.add_head(0, 4).unwrap();
        let before: Vec<_> = b.cells().map(ModuleCell::snapshot).collect();
        let (mut ab, off) = LmcNetwork::combine(&a, &b).unwrap();
        assert_eq!(ab.module_counts(), vec![2, 3]);
        assert_eq!(ab.head_ids(), vec![0, 1, 2]);
        assert_eq!(off, 2);
        assert!(ab.cells().all(ModuleCell::is_frozen));
        let after: Vec<_> = b.cells().map(ModuleCell::snapshot).collect();
        assert_eq!(before, after);

        let x = batch(6, 3, &cfg);
        ab.set_route(Some(vec![0, 0])).unwrap();
        a.set_route(Some(vec![0, 0])).unwrap();
        assert_eq!(ab.predict(&x, HeadMode::Aware(1)).unwrap().0.to_vec(), a.predict(&x, HeadMode::Aware(1)).unwrap().0.to_vec());
        ab.set_route(Some(vec![1, 2])).unwrap();
        b.set_route(Some(vec![0, 1])).unwrap();
        assert_eq!(ab.predict(&x, HeadMode::Aware(2)).unwrap().0.to_vec(), b.predict(&x, HeadMode::Aware(0)).unwrap().0.to_vec());
        assert!(ab.set_route(Some(vec![2, 0])).is_err());
    }

    #[test]
    fn combine_rejects_depth_mismatch() {
        let a = LmcNetwork::<f64>::new(small_cfg()).unwrap();
        let b = LmcNetwork::<f64>::new(NetConfig { depth: 3, ..small_cfg() }).unwrap();
        assert!(matches!(LmcNetwork::combine(&a, &b), Err(Error::Combination(_))));
    }

    #[test]
    fn selection_map_rows_sum_to_one() {
        let cfg = small_cfg();
        let mut net = LmcNetwork::<f64>::new(cfg).unwrap();
        net.add_head(0, 2).unwrap();
        let xs = vec![batch(1, 3, &cfg), batch(2, 5, &cfg)];
        assert_eq!(net.selection_map(&xs, HeadMode::Agnostic).unwrap(), vec![vec![1.0], vec![1.0]]);
        let c = net.fresh_cell(0, 0).unwrap();
        net.layers[0].cells.push(c);
        let map = net.selection_map(&xs, HeadMode::Agnostic).unwrap();
        assert!((map[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn save_load_roundtrip_keeps_behaviour() {
        let cfg = small_cfg();
        let mut net = LmcNetwork::<f64>::new(cfg).unwrap();
        net.add_head(0, 2).unwrap();
        net.add_head(3, 5).unwrap();
        net.train();
        net.model_forward(&batch(1, 4, &cfg), Some(0), false).unwrap();
        net.layers[0].cells[0].freeze(FreezeTarget::Functional);
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path()).unwrap();
        let mut back = LmcNetwork::<f64>::load(dir.path()).unwrap();
        assert_eq!(back.head_ids(), vec![0, 3]);
        assert!(back.layers[0].cells[0].is_frozen_functional());
        let x = batch(2, 3, &cfg);
        for mode in [HeadMode::Aware(3), HeadMode::Agnostic] {
            assert_eq!(net.predict(&x, mode).unwrap().0.to_vec(), back.predict(&x, mode).unwrap().0.to_vec());
        }
    }
}
