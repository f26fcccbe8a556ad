//! Comparison learners built from the same cells: per-task experts, a single
//! finetuned trunk, LMC variants and a path-search learner.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{FreezeTarget, ModuleCell};
use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::net::{HeadMode, LmcNetwork, NetConfig};
use crate::record::{Event, RunRecord};
use crate::scalar::Scalar;
use crate::taskgen::{Dataset, Split};
use crate::tensor::Tensor;
use crate::trainer::{argmax_rows, evaluate, run_stream, train_task, EvalConfig, StreamResult, TaskReport, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Experts,
    Finetune,
    FinetuneWide,
    LmcAgnostic,
    LmcAware,
    LmcHard,
    LmcNoProjection,
    MntdpLite,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 8] = [
        BaselineKind::Experts,
        BaselineKind::Finetune,
        BaselineKind::FinetuneWide,
        BaselineKind::LmcAgnostic,
        BaselineKind::LmcAware,
        BaselineKind::LmcHard,
        BaselineKind::LmcNoProjection,
        BaselineKind::MntdpLite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Experts => "experts",
            BaselineKind::Finetune => "finetune",
            BaselineKind::FinetuneWide => "finetune-wide",
            BaselineKind::LmcAgnostic => "lmc-agnostic",
            BaselineKind::LmcAware => "lmc-aware",
            BaselineKind::LmcHard => "lmc-hard",
            BaselineKind::LmcNoProjection => "lmc-no-projection",
            BaselineKind::MntdpLite => "mntdp-lite",
        }
    }

    pub fn is_lmc(self) -> bool {
        matches!(
            self,
            BaselineKind::LmcAgnostic | BaselineKind::LmcAware | BaselineKind::LmcHard | BaselineKind::LmcNoProjection
        )
    }

    /// Whether a prediction can be made without the task id.
    pub fn supports_agnostic(self) -> bool {
        self.is_lmc()
    }

    /// Evaluation mode of the primary accuracy matrix.
    pub fn primary_aware(self) -> bool {
        !matches!(self, BaselineKind::LmcAgnostic | BaselineKind::LmcNoProjection)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown learner kind {s:?}")))
    }
}

/// Shared settings; each kind derives its own construction from these.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Standardise input channels with statistics of the first training split.
    pub normalize: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            net: NetConfig::default(),
            train: TrainConfig::default(),
            normalize: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub kind: BaselineKind,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub normalize: bool,
}

/// Plain modular network: no structural components, no growth.
fn plain(mut net: NetConfig, mut train: TrainConfig) -> (NetConfig, TrainConfig) {
    net.compute_structural = false;
    net.expansion.enabled = false;
    train.structural_loss = false;
    train.projection_epochs = 0;
    (net, train)
}

pub fn recipe(kind: BaselineKind, base: &LearnerConfig) -> Recipe {
    let (mut net, mut train) = (base.net, base.train);
    let mut eval = EvalConfig { aware: true, agnostic: false };
    match kind {
        BaselineKind::Experts | BaselineKind::MntdpLite => {
            (net, train) = plain(net, train);
            train.freeze_previous = true;
        }
        BaselineKind::Finetune | BaselineKind::FinetuneWide => {
            (net, train) = plain(net, train);
            train.freeze_previous = false;
            if kind == BaselineKind::FinetuneWide {
                net.channels *= 2;
            }
        }
        BaselineKind::LmcAgnostic | BaselineKind::LmcAware => eval = EvalConfig::default(),
        BaselineKind::LmcHard => {
            net.gate.hard = true;
            eval = EvalConfig::default();
        }
        BaselineKind::LmcNoProjection => {
            train.projection_epochs = 0;
            net.structural_backprop = false;
            net.expansion.mask_outliers = false;
            eval = EvalConfig::default();
        }
    }
    Recipe {
        kind,
        net,
        train,
        eval,
        normalize: base.normalize,
    }
}

/// Per-channel affine map `x -> (x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Self {
        let [c, h, w] = ds.image;
        let plane = h * w;
        let n = ds.train.len();
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for &v in &ds.train.x[off..off + plane] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (n * plane).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt().max(1e-6)
            })
            .collect();
        Normalizer { mean, std }
    }

    fn apply_split(&self, split: &mut Split, image: [usize; 3]) {
        let [c, h, w] = image;
        let plane = h * w;
        for (i, v) in split.x.iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let mut d = ds.clone();
        for s in [&mut d.train, &mut d.val, &mut d.test] {
            self.apply_split(s, ds.image);
        }
        d
    }
}

/// A trained learner plus everything needed to evaluate it again.
pub struct Learned<T: Scalar> {
    pub kind: BaselineKind,
    pub recipe: Recipe,
    pub record: RunRecord,
    /// One network per task for experts, otherwise a single network.
    pub nets: Vec<LmcNetwork<T>>,
    /// Per task: module index per layer (path search only).
    pub layouts: Vec<Vec<usize>>,
    pub normalizer: Option<Normalizer>,
    pub reports: Vec<TaskReport>,
}

impl<T: Scalar> Learned<T> {
    /// Accuracy on `split` of `ds` with the head of `task`, or with head
    /// selection when `aware` is false.
    pub fn evaluate(&mut self, task: usize, ds: &Dataset, split: fn(&Dataset) -> &Split, aware: bool) -> Result<f64> {
        let ds = match &self.normalizer {
            Some(n) => n.apply(ds),
            None => ds.clone(),
        };
        let bs = self.recipe.train.batch_size;
        if !aware && !self.kind.supports_agnostic() {
            return Err(Error::Contract(format!("{} needs the task id at evaluation", self.kind)));
        }
        let mode = if aware { HeadMode::Aware(task) } else { HeadMode::Agnostic };
        match self.kind {
            BaselineKind::Experts => {
                let net = self.nets.get_mut(task).ok_or(Error::UnknownTask(task))?;
                evaluate(net, &ds, split(&ds), HeadMode::Aware(0), bs)
            }
            BaselineKind::MntdpLite => {
                let layout = self.layouts.get(task).ok_or(Error::UnknownTask(task))?.clone();
                let net = &mut self.nets[0];
                net.set_route(Some(layout))?;
                let a = evaluate(net, &ds, split(&ds), mode, bs);
                net.set_route(None)?;
                a
            }
            _ => evaluate(&mut self.nets[0], &ds, split(&ds), mode, bs),
        }
    }

    /// Mean gating weights per layer and module on `split`, task-aware.
    pub fn selection_map(&mut self, task: usize, ds: &Dataset, split: fn(&Dataset) -> &Split) -> Result<Vec<Vec<f64>>> {
        let ds = match &self.normalizer {
            Some(n) => n.apply(ds),
            None => ds.clone(),
        };
        let batches: Vec<Tensor<T>> = ds.ordered_batches::<T>(split(&ds), self.recipe.train.batch_size)?.into_iter().map(|(x, _)| x).collect();
        match self.kind {
            BaselineKind::Experts => {
                let net = self.nets.get_mut(task).ok_or(Error::UnknownTask(task))?;
                net.selection_map(&batches, HeadMode::Aware(0))
            }
            BaselineKind::MntdpLite => {
                let layout = self.layouts.get(task).ok_or(Error::UnknownTask(task))?.clone();
                let net = &mut self.nets[0];
                net.set_route(Some(layout))?;
                let m = net.selection_map(&batches, HeadMode::Aware(task));
                net.set_route(None)?;
                m
            }
            _ => self.nets[0].selection_map(&batches, HeadMode::Aware(task)),
        }
    }

    pub fn module_count(&self) -> usize {
        self.nets.iter().map(LmcNetwork::module_count).sum()
    }
}

fn base_record(recipe: &Recipe) -> Result<RunRecord> {
    Ok(RunRecord {
        learner: recipe.kind.name().into(),
        seed: recipe.train.seed,
        config: serde_json::to_value(recipe)?,
        ..RunRecord::default()
    })
}

fn task_events(r: &TaskReport, frozen: usize) -> Vec<Event> {
    let mut v = vec![Event::TaskStart { task: r.task }];
    if frozen > 0 {
        v.push(Event::Freeze {
            task: r.task,
            modules: frozen,
        });
    }
    v.extend(r.expansions.iter().cloned().map(Event::Expansion));
    v.push(Event::TaskEnd {
        task: r.task,
        train_accuracy: r.train_accuracy,
        val_accuracy: r.val_accuracy,
    });
    v
}

/// Trains `kind` on `tasks` in order.
pub fn run_learner<T: Scalar>(kind: BaselineKind, tasks: &[Dataset], cfg: &LearnerConfig) -> Result<Learned<T>> {
    if tasks.is_empty() {
        return Err(Error::Contract("empty task stream".into()));
    }
    let recipe = recipe(kind, cfg);
    let normalizer = recipe.normalize.then(|| Normalizer::fit(&tasks[0]));
    let data: Vec<Dataset> = match &normalizer {
        Some(n) => tasks.iter().map(|d| n.apply(d)).collect(),
        None => tasks.to_vec(),
    };
    let start = Instant::now();
    let mut out = match kind {
        BaselineKind::Experts => train_experts(&data, &recipe)?,
        BaselineKind::MntdpLite => mntdp_lite(&data, &recipe)?,
        _ => single_network(&data, &recipe)?,
    };
    out.normalizer = normalizer;
    out.record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(out)
}

fn single_network<T: Scalar>(tasks: &[Dataset], recipe: &Recipe) -> Result<Learned<T>> {
    let mut net = LmcNetwork::new(recipe.net)?;
    let res = run_stream(&mut net, tasks, &recipe.train, &recipe.eval)?;
    let mut record = base_record(recipe)?;
    fill_from_stream(&mut record, &res, recipe)?;
    record.params = net.param_count();
    Ok(Learned {
        kind: recipe.kind,
        recipe: *recipe,
        record,
        nets: vec![net],
        layouts: Vec::new(),
        normalizer: None,
        reports: res.reports,
    })
}

fn fill_from_stream(record: &mut RunRecord, res: &StreamResult, recipe: &Recipe) -> Result<()> {
    let aware = if recipe.eval.aware { Some(AccuracyMatrix::new(res.aware.clone())?) } else { None };
    let agnostic = if recipe.eval.agnostic { Some(AccuracyMatrix::new(res.agnostic.clone())?) } else { None };
    record.accuracy = if recipe.kind.primary_aware() { aware.clone() } else { agnostic.clone() }
        .ok_or_else(|| Error::Contract("primary evaluation mode was not run".into()))?;
    record.aware = aware;
    record.agnostic = agnostic;
    record.module_counts = res.module_counts.clone();
    record.per_layer_counts = res.per_layer_counts.clone();
    record.selection_maps = res.selection_maps.clone();
    record.routes = res.routes.clone();
    let mut born_before = 0;
    for (t, r) in res.reports.iter().enumerate() {
        let frozen = if recipe.train.freeze_previous { born_before } else { 0 };
        record.events.extend(task_events(r, frozen));
        born_before = res.module_counts[t];
    }
    Ok(())
}

fn expert_seed(seed: u64, task: usize) -> u64 {
    seed ^ (task as u64).wrapping_add(1).wrapping_mul(0xA24B_AED4_963E_E407)
}

/// One independent network per task, each evaluated on its own task.
pub fn train_experts<T: Scalar>(tasks: &[Dataset], recipe: &Recipe) -> Result<Learned<T>> {
    let mut record = base_record(recipe)?;
    let mut nets = Vec::new();
    let mut reports = Vec::new();
    let mut own = Vec::new();
    for (t, ds) in tasks.iter().enumerate() {
        let mut net = LmcNetwork::new(NetConfig {
            seed: expert_seed(recipe.net.seed, t),
            ..recipe.net
        })?;
        let train = TrainConfig {
            seed: expert_seed(recipe.train.seed, t),
            ..recipe.train
        };
        let mut r = train_task(&mut net, ds, 0, &train)?;
        r.task = t;
        own.push(evaluate(&mut net, ds, &ds.test, HeadMode::Aware(0), train.batch_size)?);
        let frozen = 0;
        record.events.extend(task_events(&r, frozen));
        reports.push(r);
        net.freeze_all(FreezeTarget::Both);
        nets.push(net);
        record.module_counts.push(nets.iter().map(LmcNetwork::module_count).sum());
        record.per_layer_counts.push(nets.iter().fold(vec![0; recipe.net.depth], |mut acc, n| {
            acc.iter_mut().zip(n.module_counts()).for_each(|(a, c)| *a += c);
            acc
        }));
    }
    let rows: Vec<Vec<f64>> = (0..tasks.len()).map(|i| own[..=i].to_vec()).collect();
    record.accuracy = AccuracyMatrix::new(rows)?;
    record.aware = Some(record.accuracy.clone());
    record.params = nets.iter().map(LmcNetwork::param_count).sum();
    record.routes = (0..tasks.len()).map(|_| vec![0; recipe.net.depth]).collect();
    Ok(Learned {
        kind: recipe.kind,
        recipe: *recipe,
        record,
        nets,
        layouts: Vec::new(),
        normalizer: None,
        reports,
    })
}

/// Nearest class-mean accuracy under cosine similarity: prototypes from
/// `train`, queries from `query`.
pub fn prototype_accuracy(train: &[Vec<f64>], train_y: &[usize], query: &[Vec<f64>], query_y: &[usize], classes: usize) -> f64 {
    if query.is_empty() || train.is_empty() {
        return 0.0;
    }
    let d = train[0].len();
    let mut proto = vec![vec![0.0; d]; classes];
    let mut count = vec![0usize; classes];
    for (x, &y) in train.iter().zip(train_y) {
        proto[y].iter_mut().zip(x).for_each(|(p, v)| *p += v);
        count[y] += 1;
    }
    for (p, &n) in proto.iter_mut().zip(&count) {
        if n > 0 {
            p.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    let pn: Vec<f64> = proto.iter().map(|p| norm(p)).collect();
    let mut correct = 0;
    for (x, &y) in query.iter().zip(query_y) {
        let xn = norm(x);
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (c, p) in proto.iter().enumerate() {
            if count[c] == 0 {
                continue;
            }
            let sim = p.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / (pn[c] * xn);
            if sim > best_sim {
                best = c;
                best_sim = sim;
            }
        }
        correct += usize::from(best == y);
    }
    correct as f64 / query.len() as f64
}

fn split_features<T: Scalar>(net: &mut LmcNetwork<T>, ds: &Dataset, split: &Split, bs: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (x, _) in ds.ordered_batches::<T>(split, bs)? {
        let f = net.trunk_features(&x)?;
        let d = f.shape()[1];
        rows.extend(f.to_f64_vec().chunks(d.max(1)).map(<[f64]>::to_vec));
    }
    Ok(rows)
}

/// Candidate layout: `Some(i)` reuses module `i` of the layer, `None` adds one.
pub type Layout = Vec<Option<usize>>;

/// Reuse of `path`, then new modules on the top `c` layers for `c = 1..=depth`.
pub fn candidate_layouts(path: &[usize]) -> Vec<Layout> {
    let depth = path.len();
    (0..=depth)
        .map(|c| path.iter().enumerate().map(|(l, &m)| (l + c < depth).then_some(m)).collect())
        .collect()
}

/// Index of the best `(accuracy, new modules)` pair: higher accuracy, then
/// fewer new modules, then the earlier index.
pub fn pick_candidate(scores: &[(f64, usize)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(acc, new)) in scores.iter().enumerate() {
        best = match best {
            Some(b) if scores[b].0 > acc || (scores[b].0 == acc && scores[b].1 <= new) => Some(b),
            _ => Some(i),
        };
    }
    best
}

fn candidate_seed(seed: u64, task: usize, cand: usize, layer: usize) -> u64 {
    let mut h = seed ^ 0xD6E8_FEB8_6659_FD93;
    for v in [task as u64, cand as u64, layer as u64] {
        h = (h ^ v).wrapping_mul(0x100_0000_01B3).rotate_left(23);
    }
    h
}

/// Path search: per task, score every stored path by nearest-prototype
/// accuracy on the new task, then train each suffix-replacement of the best
/// path and keep the one with the best validation accuracy.
pub fn mntdp_lite<T: Scalar>(tasks: &[Dataset], recipe: &Recipe) -> Result<Learned<T>> {
    let cfg = recipe.net;
    let depth = cfg.depth;
    let bs = recipe.train.batch_size;
    let mut master = LmcNetwork::<T>::shell(cfg)?;
    let mut layouts: Vec<Vec<usize>> = Vec::new();
    let mut record = base_record(recipe)?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for (t, ds) in tasks.iter().enumerate() {
        let candidates: Vec<Layout> = if layouts.is_empty() {
            vec![vec![None; depth]]
        } else {
            let mut best = (f64::NEG_INFINITY, 0);
            for (p, path) in layouts.iter().enumerate() {
                master.set_route(Some(path.clone()))?;
                let tr = split_features(&mut master, ds, &ds.train, bs)?;
                let (qs, qy) = if ds.val.is_empty() { (&ds.train, &ds.train.y) } else { (&ds.val, &ds.val.y) };
                let q = split_features(&mut master, ds, qs, bs)?;
                let acc = prototype_accuracy(&tr, &ds.train.y, &q, qy, ds.classes);
                if acc > best.0 {
                    best = (acc, p);
                }
            }
            master.set_route(None)?;
            candidate_layouts(&layouts[best.1])
        };
        let mut trained = Vec::new();
        let mut scores = Vec::new();
        for (ci, layout) in candidates.iter().enumerate() {
            let mut net = LmcNetwork::<T>::shell(cfg)?;
            for (l, slot) in layout.iter().enumerate() {
                let cell = match slot {
                    Some(m) => master.layers[l].cells[*m].duplicate(),
                    None => {
                        let mut rng = ChaCha8Rng::seed_from_u64(candidate_seed(cfg.seed, t, ci, l));
                        ModuleCell::conv(cfg.layer_in_shape(l), cfg.channels, t, &cfg.cell, &mut rng)?
                    }
                };
                net.layers[l].cells.push(cell);
            }
            let report = train_task(&mut net, ds, t, &recipe.train)?;
            scores.push((report.val_accuracy, layout.iter().filter(|s| s.is_none()).count()));
            trained.push((net, report));
        }
        let pick = pick_candidate(&scores).expect("at least one candidate");
        let (mut net, report) = trained.swap_remove(pick);
        let layout = &candidates[pick];
        let mut path = Vec::with_capacity(depth);
        for (l, slot) in layout.iter().enumerate() {
            match slot {
                Some(m) => path.push(*m),
                None => {
                    let mut c = net.layers[l].cells.pop().expect("candidate cell");
                    c.freeze(FreezeTarget::Both);
                    master.layers[l].cells.push(c);
                    path.push(master.layers[l].len() - 1);
                }
            }
        }
        let mut head = net.heads_mut().remove(&t).expect("trained head");
        head.freeze(FreezeTarget::Both);
        master.heads_mut().insert(t, head);
        record.events.push(Event::TaskStart { task: t });
        record.events.push(Event::TaskEnd {
            task: t,
            train_accuracy: report.train_accuracy,
            val_accuracy: report.val_accuracy,
        });
        reports.push(report);
        layouts.push(path);
        let mut row = Vec::with_capacity(t + 1);
        for (j, dj) in tasks[..=t].iter().enumerate() {
            master.set_route(Some(layouts[j].clone()))?;
            row.push(evaluate(&mut master, dj, &dj.test, HeadMode::Aware(j), bs)?);
        }
        master.set_route(None)?;
        rows.push(row);
        record.module_counts.push(master.module_count());
        record.per_layer_counts.push(master.module_counts());
    }
    record.accuracy = AccuracyMatrix::new(rows)?;
    record.aware = Some(record.accuracy.clone());
    record.params = master.param_count();
    record.routes = layouts.clone();
    record.selection_maps = layouts
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(l, &m)| (0..master.layers[l].len()).map(|i| if i == m { 1.0 } else { 0.0 }).collect())
                .collect()
        })
        .collect();
    Ok(Learned {
        kind: recipe.kind,
        recipe: *recipe,
        record,
        nets: vec![master],
        layouts,
        normalizer: None,
        reports,
    })
}

/// Test accuracy of a fresh expert trained on the last task alone.
pub fn expert_last_accuracy<T: Scalar>(tasks: &[Dataset], cfg: &LearnerConfig) -> Result<f64> {
    let last = tasks.len().checked_sub(1).ok_or_else(|| Error::Contract("empty task stream".into()))?;
    let recipe = recipe(BaselineKind::Experts, cfg);
    let ds = match recipe.normalize {
        true => Normalizer::fit(&tasks[0]).apply(&tasks[last]),
        false => tasks[last].clone(),
    };
    let mut net = LmcNetwork::<T>::new(NetConfig {
        seed: expert_seed(recipe.net.seed, last),
        ..recipe.net
    })?;
    let train = TrainConfig {
        seed: expert_seed(recipe.train.seed, last),
        ..recipe.train
    };
    train_task(&mut net, &ds, 0, &train)?;
    evaluate(&mut net, &ds, &ds.test, HeadMode::Aware(0), train.batch_size)
}

/// Predicted labels of `net` on `split` with the head of `task`.
pub fn predictions<T: Scalar>(net: &mut LmcNetwork<T>, ds: &Dataset, split: &Split, task: usize, bs: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (x, _) in ds.ordered_batches::<T>(split, bs)? {
        out.extend(argmax_rows(&net.predict(&x, HeadMode::Aware(task))?.0));
    }
    Ok(out)
}
