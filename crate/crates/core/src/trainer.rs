//! Continual training with projection and accumulation phases.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::FreezeTarget;
use crate::error::{Error, Result};
use crate::net::{ExpansionEvent, ForwardTrace, HeadMode, LmcNetwork};
use crate::scalar::Scalar;
use crate::taskgen::{Dataset, Split};
use crate::tensor::optim::{Adam, AdamConfig, Optimizer};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Projection length `k` in epochs; `0` disables the phase.
    pub projection_epochs: usize,
    pub functional_in_projection: bool,
    /// Add the structural loss to the objective.
    pub structural_loss: bool,
    /// Freeze the functional blocks of existing modules when a task starts.
    pub freeze_previous: bool,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            projection_epochs: 5,
            functional_in_projection: true,
            structural_loss: true,
            freeze_previous: true,
            adam: AdamConfig::default(),
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("epochs and batch size must be positive".into()));
        }
        if self.projection_epochs > 0 && self.projection_epochs >= self.epochs {
            return Err(Error::Parameter(format!(
                "projection length {} must be shorter than {} epochs",
                self.projection_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// Projection bookkeeping within one task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PhaseState {
    pub last_addition_epoch: Option<usize>,
}

impl PhaseState {
    pub fn in_projection(&self, epoch: usize, k: usize) -> bool {
        self.last_addition_epoch.is_some_and(|e| epoch < e + k)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub expansions: Vec<ExpansionEvent>,
    /// Mean objective per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean per-sample cross-entropy and structural loss per epoch.
    pub epoch_functional: Vec<f64>,
    pub epoch_structural: Vec<f64>,
    /// Per epoch: whether any batch was trained in projection.
    pub projection: Vec<bool>,
    /// Largest gap between the reported and trace-recomputed structural loss.
    pub structural_gap: f64,
}

/// Objective for one batch. Projection uses the structural loss (plus the
/// functional term when configured); accumulation uses both.
pub fn batch_loss<T: Scalar>(trace: &ForwardTrace<T>, logits: &Tensor<T>, labels: &[usize], cfg: &TrainConfig, in_projection: bool) -> Result<Tensor<T>> {
    let ce = logits.cross_entropy(labels, false)?;
    let with_structural = |base: Tensor<T>| -> Result<Tensor<T>> {
        if cfg.structural_loss {
            base.add(&trace.structural_loss)
        } else {
            Ok(base)
        }
    };
    if in_projection {
        if cfg.functional_in_projection {
            with_structural(ce)
        } else if cfg.structural_loss {
            Ok(trace.structural_loss.clone())
        } else {
            Ok(Tensor::scalar(T::zero()))
        }
    } else {
        with_structural(ce)
    }
}

/// `projection_loss` is the projection-phase branch of [`batch_loss`].
pub fn projection_loss<T: Scalar>(trace: &ForwardTrace<T>, logits: &Tensor<T>, labels: &[usize], cfg: &TrainConfig) -> Result<Tensor<T>> {
    batch_loss(trace, logits, labels, cfg, true)
}

fn epoch_seed(seed: u64, task: usize, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((task as u64) << 32) ^ epoch as u64
}

/// Applies the start-of-task freezing policy and registers the head.
pub fn begin_task<T: Scalar>(net: &mut LmcNetwork<T>, task: usize, classes: usize, cfg: &TrainConfig) -> Result<()> {
    if cfg.freeze_previous {
        for c in net.cells_mut().filter(|c| c.birth_task() < task) {
            c.freeze(FreezeTarget::Functional);
        }
        for (_, h) in net.heads_mut().iter_mut().filter(|(t, _)| **t != task) {
            h.freeze(FreezeTarget::Both);
        }
    }
    if !net.heads().contains_key(&task) {
        net.add_head(task, classes)?;
    }
    net.set_current_task(task);
    Ok(())
}

pub fn train_task<T: Scalar>(net: &mut LmcNetwork<T>, ds: &Dataset, task: usize, cfg: &TrainConfig) -> Result<TaskReport> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::Contract(format!("task {task} has no training samples")));
    }
    begin_task(net, task, ds.classes, cfg)?;
    net.train();
    let mut opt = Adam::new(cfg.adam);
    let mut phase = PhaseState::default();
    let mut report = TaskReport {
        task,
        epochs: cfg.epochs,
        ..TaskReport::default()
    };
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, task, epoch));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut fnc = 0.0;
        let mut stc = 0.0;
        let mut any_projection = false;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = ds.gather::<T>(&ds.train, idx)?;
            let in_projection = phase.in_projection(epoch, cfg.projection_epochs);
            any_projection |= in_projection;
            let (logits, trace) = net.model_forward(&x, Some(task), !in_projection)?;
            if !trace.expansions.is_empty() {
                phase.last_addition_epoch = Some(epoch);
                report.expansions.extend(trace.expansions.iter().cloned());
            }
            let gap = (trace.structural_loss.item().f64() - trace.recomputed_structural()).abs();
            report.structural_gap = report.structural_gap.max(gap);
            let ends_in_projection = phase.in_projection(epoch, cfg.projection_epochs);
            let loss = batch_loss(&trace, &logits, &y, cfg, in_projection || ends_in_projection)?;
            total += loss.item().f64();
            fnc += crate::tensor::no_grad(|| logits.cross_entropy(&y, false))?.item().f64();
            stc += trace.structural_loss.item().f64();
            let params = net.trainable_params(task);
            if loss.requires_grad() {
                loss.backward()?;
                opt.step(&params);
            }
            opt.zero_grad(&params);
        }
        let n = ds.train.len() as f64;
        report.epoch_loss.push(total / n);
        report.epoch_functional.push(fnc / n);
        report.epoch_structural.push(stc / n);
        report.projection.push(any_projection);
    }
    net.freeze_all(FreezeTarget::Structural);
    net.eval();
    report.train_accuracy = evaluate(net, ds, &ds.train, HeadMode::Aware(task), cfg.batch_size)?;
    report.val_accuracy = if ds.val.is_empty() {
        report.train_accuracy
    } else {
        evaluate(net, ds, &ds.val, HeadMode::Aware(task), cfg.batch_size)?
    };
    Ok(report)
}

/// Fraction of correct argmax predictions; batches are drawn in order.
pub fn evaluate<T: Scalar>(net: &mut LmcNetwork<T>, ds: &Dataset, split: &Split, mode: HeadMode, batch_size: usize) -> Result<f64> {
    Ok(evaluate_detailed(net, ds, split, mode, batch_size)?.0)
}

/// Accuracy plus the head chosen for every batch.
pub fn evaluate_detailed<T: Scalar>(net: &mut LmcNetwork<T>, ds: &Dataset, split: &Split, mode: HeadMode, batch_size: usize) -> Result<(f64, Vec<usize>)> {
    if split.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let mut correct = 0usize;
    let mut heads = Vec::new();
    for (x, y) in ds.ordered_batches::<T>(split, batch_size)? {
        let (logits, trace) = net.predict(&x, mode)?;
        heads.push(trace.selected_head);
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok((correct as f64 / split.len() as f64, heads))
}

pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k.max(1))
        .map(|r| {
            let mut best = 0;
            for (i, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamResult {
    /// `aware[i][j]`: task-aware test accuracy on task `j` after task `i`.
    pub aware: Vec<Vec<f64>>,
    pub agnostic: Vec<Vec<f64>>,
    /// Trunk modules after each task.
    pub module_counts: Vec<usize>,
    pub per_layer_counts: Vec<Vec<usize>>,
    pub reports: Vec<TaskReport>,
    /// Per task: mean gating weight per layer and module on its test split,
    /// measured after the final task.
    pub selection_maps: Vec<Vec<Vec<f64>>>,
    /// Per task: argmax module per layer of its selection map.
    pub routes: Vec<Vec<usize>>,
    /// Per task: argmax route on its training split, taken right after
    /// that task finished.
    pub training_routes: Vec<Vec<usize>>,
    pub wall_clock_secs: f64,
}

/// Argmax module of every layer row.
pub fn map_argmax(map: &[Vec<f64>]) -> Vec<usize> {
    map.iter()
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub aware: bool,
    pub agnostic: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { aware: true, agnostic: true }
    }
}

/// Trains the tasks in order, evaluating all seen tasks after each one.
pub fn run_stream<T: Scalar>(net: &mut LmcNetwork<T>, tasks: &[Dataset], cfg: &TrainConfig, eval: &EvalConfig) -> Result<StreamResult> {
    let start = Instant::now();
    let mut out = StreamResult::default();
    for (t, ds) in tasks.iter().enumerate() {
        let report = train_task(net, ds, t, cfg)?;
        out.reports.push(report);
        let batches: Vec<Tensor<T>> = ds.ordered_batches::<T>(&ds.train, cfg.batch_size)?.into_iter().map(|(x, _)| x).collect();
        out.training_routes.push(map_argmax(&net.selection_map(&batches, HeadMode::Aware(t))?));
        let mut aware = Vec::new();
        let mut agnostic = Vec::new();
        for (j, dj) in tasks[..=t].iter().enumerate() {
            if eval.aware {
                aware.push(evaluate(net, dj, &dj.test, HeadMode::Aware(j), cfg.batch_size)?);
            }
            if eval.agnostic {
                agnostic.push(evaluate(net, dj, &dj.test, HeadMode::Agnostic, cfg.batch_size)?);
            }
        }
        out.aware.push(aware);
        out.agnostic.push(agnostic);
        out.module_counts.push(net.module_count());
        out.per_layer_counts.push(net.module_counts());
    }
    for (j, dj) in tasks.iter().enumerate() {
        let batches: Vec<Tensor<T>> = dj.ordered_batches::<T>(&dj.test, cfg.batch_size)?.into_iter().map(|(x, _)| x).collect();
        let map = net.selection_map(&batches, HeadMode::Aware(j))?;
        out.routes.push(map_argmax(&map));
        out.selection_maps.push(map);
    }
    out.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::taskgen::{gen_task, Sizes, TaskSpec, BLACK, GREEN, RED};

    fn tiny_net(seed: u64) -> LmcNetwork<f64> {
        LmcNetwork::new(NetConfig {
            in_shape: [3, 8, 8],
            channels: 4,
            depth: 2,
            seed,
            ..NetConfig::default()
        })
        .unwrap()
    }

    fn tiny_task(fg: [f64; 3], seed: u64) -> Dataset {
        let mut s = TaskSpec::new("t", vec![0, 1], fg, BLACK, Sizes { train: 64, val: 16, test: 32 }, seed);
        s.image = [3, 8, 8];
        s.noise = 0.05;
        gen_task(&s).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 6,
            projection_epochs: 2,
            batch_size: 16,
            adam: AdamConfig { lr: 5e-3, ..AdamConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn phase_boundaries() {
        let p = PhaseState { last_addition_epoch: Some(3) };
        assert!(p.in_projection(3, 5) && p.in_projection(7, 5));
        assert!(!p.in_projection(8, 5));
        assert!(!p.in_projection(3, 0));
        assert!(!PhaseState::default().in_projection(0, 5));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig { projection_epochs: 10, epochs: 10, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { projection_epochs: 0, epochs: 1, ..TrainConfig::default() }.validate().is_ok());
    }

    #[test]
    fn empty_dataset_is_a_contract_error() {
        let mut ds = tiny_task(RED, 0);
        ds.train.x.clear();
        ds.train.y.clear();
        assert!(matches!(train_task(&mut tiny_net(0), &ds, 0, &quick()), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_composition() {
        let mut net = tiny_net(1);
        let ds = tiny_task(RED, 1);
        net.add_head(0, 2).unwrap();
        net.train();
        let (x, y) = ds.gather::<f64>(&ds.train, &[0, 1, 2, 3]).unwrap();
        let (logits, trace) = net.model_forward(&x, Some(0), false).unwrap();
        let ce = logits.cross_entropy(&y, false).unwrap().item();
        let s = trace.structural_loss.item();
        let base = quick();
        let acc = batch_loss(&trace, &logits, &y, &base, false).unwrap().item();
        assert!((acc - (ce + s)).abs() < 1e-12);
        let proj = TrainConfig { functional_in_projection: false, ..base };
        assert_eq!(projection_loss(&trace, &logits, &y, &proj).unwrap().item(), s);
        let none = TrainConfig { structural_loss: false, ..proj };
        let l = projection_loss(&trace, &logits, &y, &none).unwrap();
        assert!(!l.requires_grad());
    }

    #[test]
    fn functional_free_projection_leaves_head_weights_without_functional_gradient() {
        let mut net = tiny_net(2);
        let ds = tiny_task(RED, 2);
        net.add_head(0, 2).unwrap();
        net.train();
        let (x, y) = ds.gather::<f64>(&ds.train, &[0, 1, 2, 3]).unwrap();
        let (logits, trace) = net.model_forward(&x, Some(0), false).unwrap();
        let cfg = TrainConfig { functional_in_projection: false, ..quick() };
        projection_loss(&trace, &logits, &y, &cfg).unwrap().backward().unwrap();
        let head = &net.heads()[&0];
        for p in head.functional_params() {
            assert!(p.grad().is_none_or(|g| g.iter().all(|v| *v == 0.0)));
        }
        assert!(head.structural_params().iter().any(|p| p.grad().is_some_and(|g| g.iter().any(|v| *v != 0.0))));
    }

    #[test]
    fn earlier_tasks_stay_bit_identical() {
        let mut net = tiny_net(3);
        let a = tiny_task(RED, 3);
        let b = tiny_task(GREEN, 4);
        train_task(&mut net, &a, 0, &quick()).unwrap();
        let first: Vec<_> = net.cells().map(|c| c.snapshot()).collect();
        let head0 = net.heads()[&0].snapshot();
        train_task(&mut net, &b, 1, &quick()).unwrap();
        let kept: Vec<_> = net.cells().filter(|c| c.birth_task() == 0).map(|c| c.snapshot()).collect();
        assert_eq!(first, kept);
        assert_eq!(head0, net.heads()[&0].snapshot());
    }

    #[test]
    fn structural_gap_is_negligible_and_no_expansion_in_projection() {
        let mut net = tiny_net(4);
        let cfg = TrainConfig {
            projection_epochs: 3,
            ..quick()
        };
        train_task(&mut net, &tiny_task(RED, 5), 0, &cfg).unwrap();
        let r = train_task(&mut net, &tiny_task(GREEN, 6), 1, &cfg).unwrap();
        assert!(r.structural_gap < 1e-10);
        let mut layers: Vec<usize> = r.expansions.iter().map(|e| e.layer).collect();
        let n = layers.len();
        layers.dedup();
        assert_eq!(layers.len(), n);
    }

    #[test]
    fn aware_and_agnostic_agree_with_one_head() {
        let mut net = tiny_net(5);
        let ds = tiny_task(RED, 7);
        train_task(&mut net, &ds, 0, &quick()).unwrap();
        let a = evaluate(&mut net, &ds, &ds.test, HeadMode::Aware(0), 8).unwrap();
        let b = evaluate(&mut net, &ds, &ds.test, HeadMode::Agnostic, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_task_stream_gives_one_by_one_matrix() {
        let mut net = tiny_net(6);
        let r = run_stream(&mut net, &[tiny_task(RED, 8)], &quick(), &EvalConfig::default()).unwrap();
        assert_eq!(r.aware.len(), 1);
        assert_eq!(r.aware[0].len(), 1);
        assert_eq!(r.module_counts, vec![2]);
        assert_eq!(r.selection_maps[0], vec![vec![1.0], vec![1.0]]);
    }
}
