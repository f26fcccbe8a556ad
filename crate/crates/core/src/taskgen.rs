//! Seeded procedural image-classification tasks and task streams.
//!
//! Every class is a parametric glyph drawn as `bg + mask * (fg - bg)` plus
//! Gaussian noise, clamped to `[0, 1]`, with per-sample position and scale
//! jitter.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{io, Tensor};

pub const FAMILY_NAMES: [&str; 14] = [
    "hbar", "vbar", "plus", "cross", "ring", "disk", "square", "triangle", "ell", "dots", "diag", "tee", "checker", "antidiag",
];

pub fn family_count() -> usize {
    FAMILY_NAMES.len()
}

fn glyph(family: usize, u: f64, v: f64) -> bool {
    const T: f64 = 0.18;
    let r = (u * u + v * v).sqrt();
    let inside = u.abs() < 0.7 && v.abs() < 0.7;
    match family {
        0 => v.abs() < T && u.abs() < 0.7,
        1 => u.abs() < T && v.abs() < 0.7,
        2 => (v.abs() < T && u.abs() < 0.7) || (u.abs() < T && v.abs() < 0.7),
        3 => inside && ((u - v).abs() < 1.4 * T || (u + v).abs() < 1.4 * T),
        4 => r > 0.4 && r < 0.7,
        5 => r < 0.55,
        6 => {
            let m = u.abs().max(v.abs());
            m > 0.45 && m < 0.7
        }
        7 => v > -0.6 && v < 0.6 && u.abs() < (v + 0.6) * 0.6,
        8 => ((u + 0.5).abs() < T && v.abs() < 0.7) || ((v - 0.5).abs() < T && u > -0.7 && u < 0.5),
        9 => ((u + 0.4).powi(2) + v * v).sqrt() < 0.25 || ((u - 0.4).powi(2) + v * v).sqrt() < 0.25,
        10 => (u - v).abs() < 1.4 * T && r < 0.75,
        11 => ((v + 0.5).abs() < T && u.abs() < 0.7) || (u.abs() < T && v > -0.5 && v < 0.7),
        12 => inside && ((u > 0.0) != (v > 0.0)),
        13 => (u + v).abs() < 1.4 * T && r < 0.75,
        _ => false,
    }
}

pub type Color = [f64; 3];

pub const RED: Color = [1.0, 0.0, 0.0];
pub const GREEN: Color = [0.0, 1.0, 0.0];
pub const BLUE: Color = [0.0, 0.0, 1.0];
pub const BLACK: Color = [0.0, 0.0, 0.0];
pub const YELLOW: Color = [1.0, 1.0, 0.0];
pub const CYAN: Color = [0.0, 1.0, 1.0];
pub const MAGENTA: Color = [1.0, 0.0, 1.0];
pub const WHITE: Color = [1.0, 1.0, 1.0];
pub const NAVY: Color = [0.1, 0.1, 0.45];
pub const GRAY: Color = [0.5, 0.5, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub generator: String,
    /// Shape family of every class, before `label_perm` is applied.
    pub families: Vec<usize>,
    pub fg: Color,
    pub bg: Color,
    /// Class `c` is labelled `label_perm[c]`.
    pub label_perm: Vec<usize>,
    pub noise: f64,
    pub jitter: f64,
    pub sizes: Sizes,
    pub image: [usize; 3],
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(generator: &str, families: Vec<usize>, fg: Color, bg: Color, sizes: Sizes, seed: u64) -> Self {
        let n = families.len();
        TaskSpec {
            generator: generator.into(),
            families,
            fg,
            bg,
            label_perm: (0..n).collect(),
            noise: 0.1,
            jitter: 1.0,
            sizes,
            image: [3, 16, 16],
            seed,
        }
    }

    pub fn classes(&self) -> usize {
        self.families.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes();
        if k == 0 {
            return Err(Error::Spec("a task needs at least one class".into()));
        }
        if k > family_count() {
            return Err(Error::Spec(format!("{k} classes requested but only {} shape families exist", family_count())));
        }
        if let Some(&f) = self.families.iter().find(|&&f| f >= family_count()) {
            return Err(Error::Spec(format!("unknown shape family {f}")));
        }
        let mut seen = self.families.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != k {
            return Err(Error::Spec("classes must use distinct shape families".into()));
        }
        let mut perm = self.label_perm.clone();
        perm.sort_unstable();
        if perm != (0..k).collect::<Vec<_>>() {
            return Err(Error::Spec(format!("label permutation {:?} is not a permutation of 0..{k}", self.label_perm)));
        }
        if self.image[0] != 3 || self.image[1] == 0 || self.image[2] == 0 {
            return Err(Error::Spec(format!("image extent {:?} must be 3xHxW", self.image)));
        }
        if !(self.noise >= 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Spec("noise and jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// One split: `x` is `[n, C, H, W]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image: [usize; 3],
    pub classes: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn features(&self) -> usize {
        self.image.iter().product()
    }

    /// Samples `idx` of `split` as a `[len, C, H, W]` tensor and their labels.
    pub fn gather<T: Scalar>(&self, split: &Split, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let d = self.features();
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend(split.x[i * d..(i + 1) * d].iter().map(|&v| T::of(v)));
            y.push(split.y[i]);
        }
        let [c, h, w] = self.image;
        Ok((Tensor::new(x, &[idx.len(), c, h, w])?, y))
    }

    /// Consecutive batches in the given order.
    pub fn batches<T: Scalar>(&self, split: &Split, order: &[usize], batch_size: usize) -> Result<Vec<(Tensor<T>, Vec<usize>)>> {
        order.chunks(batch_size.max(1)).map(|c| self.gather(split, c)).collect()
    }

    pub fn ordered_batches<T: Scalar>(&self, split: &Split, batch_size: usize) -> Result<Vec<(Tensor<T>, Vec<usize>)>> {
        let order: Vec<usize> = (0..split.len()).collect();
        self.batches(split, &order, batch_size)
    }
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn render_split(spec: &TaskSpec, n: usize, seed: u64) -> Split {
    let [c, h, w] = spec.image;
    let k = spec.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("non-negative std");
    let mut x = Vec::with_capacity(n * c * h * w);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let j = spec.jitter;
        let (dx, dy, s) = if j > 0.0 {
            (
                rng.random_range(-0.25 * j..=0.25 * j),
                rng.random_range(-0.25 * j..=0.25 * j),
                rng.random_range((1.0 - 0.2 * j).max(0.2)..=1.0 + 0.2 * j),
            )
        } else {
            (0.0, 0.0, 1.0)
        };
        let mut mask = vec![0.0; h * w];
        for py in 0..h {
            for px in 0..w {
                let u = ((px as f64 + 0.5) / w as f64 * 2.0 - 1.0 - dx) / s;
                let v = ((py as f64 + 0.5) / h as f64 * 2.0 - 1.0 - dy) / s;
                if glyph(spec.families[class], u, v) {
                    mask[py * w + px] = 1.0;
                }
            }
        }
        for ch in 0..c {
            let (bg, fg) = (spec.bg[ch], spec.fg[ch]);
            for &m in &mask {
                let e = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                x.push((bg + m * (fg - bg) + e).clamp(0.0, 1.0));
            }
        }
        y.push(spec.label_perm[class]);
    }
    Split { x, y }
}

/// Renders the three splits of `spec` from disjoint sub-seeds.
pub fn gen_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        image: spec.image,
        classes: spec.classes(),
        train: render_split(spec, spec.sizes.train, sub_seed(spec.seed, 1)),
        val: render_split(spec, spec.sizes.val, sub_seed(spec.seed, 2)),
        test: render_split(spec, spec.sizes.test, sub_seed(spec.seed, 3)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamKind {
    SMinus,
    SPlus,
    SIn,
    SOut,
    SPl,
    OodDiagonal,
    Long,
    Custom,
}

impl std::str::FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "s-minus" => StreamKind::SMinus,
            "s-plus" => StreamKind::SPlus,
            "s-in" => StreamKind::SIn,
            "s-out" => StreamKind::SOut,
            "s-pl" => StreamKind::SPl,
            "ood-diagonal" => StreamKind::OodDiagonal,
            "long" => StreamKind::Long,
            "custom" => StreamKind::Custom,
            other => return Err(Error::Spec(format!("unknown stream kind {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub kind: StreamKind,
    pub tasks: Vec<TaskSpec>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn generate(&self) -> Result<Vec<Dataset>> {
        self.tasks.iter().map(gen_task).collect()
    }
}

/// Sample counts and task shape shared by the built-in streams.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Multiplies every split size.
    pub scale: f64,
    pub classes: usize,
    pub noise: f64,
    pub jitter: f64,
    /// Task count of the long stream.
    pub long_tasks: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            scale: 1.0,
            classes: 4,
            noise: 0.1,
            jitter: 1.0,
            long_tasks: 30,
        }
    }
}

const BIG_TRAIN: usize = 2000;
const SMALL_TRAIN: usize = 200;
const VAL: usize = 100;
const TEST: usize = 400;

fn scaled(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(4)
}

fn sizes(train: usize, cfg: &StreamConfig) -> Sizes {
    Sizes {
        train: scaled(train, cfg.scale),
        val: scaled(VAL, cfg.scale),
        test: scaled(TEST, cfg.scale),
    }
}

/// Base tasks of the six-task streams: disjoint family groups and distinct
/// colour pairs.
fn base_tasks(cfg: &StreamConfig, seed: u64) -> Vec<TaskSpec> {
    let k = cfg.classes;
    let palette = [(RED, BLACK), (GREEN, BLACK), (BLUE, WHITE), (YELLOW, NAVY), (MAGENTA, BLACK), (CYAN, GRAY)];
    (0..5)
        .map(|t| {
            let families = (0..k).map(|c| (t * k + c) % family_count()).collect();
            let (fg, bg) = palette[t];
            let mut s = TaskSpec::new(&format!("base{t}"), families, fg, bg, sizes(SMALL_TRAIN, cfg), sub_seed(seed, 100 + t as u64));
            s.noise = cfg.noise;
            s.jitter = cfg.jitter;
            s
        })
        .collect()
}

pub fn make_stream(kind: StreamKind, seed: u64, cfg: &StreamConfig) -> Result<TaskStream> {
    if cfg.classes == 0 || cfg.classes > family_count() {
        return Err(Error::Spec(format!("class count {} out of range", cfg.classes)));
    }
    let base = base_tasks(cfg, seed);
    let first = base[0].clone();
    let last_seed = sub_seed(seed, 999);
    let tasks = match kind {
        StreamKind::SMinus => {
            let mut t1 = first.clone();
            t1.sizes = sizes(BIG_TRAIN, cfg);
            let mut t6 = first;
            t6.generator = "base0-small".into();
            t6.seed = last_seed;
            let mut v = vec![t1];
            v.extend(base[1..5].iter().cloned());
            v.push(t6);
            v
        }
        StreamKind::SPlus => {
            let mut t6 = first.clone();
            t6.generator = "base0-large".into();
            t6.sizes = sizes(BIG_TRAIN, cfg);
            t6.seed = last_seed;
            let mut v = base.clone();
            v.push(t6);
            v
        }
        StreamKind::SIn => {
            let mut t6 = first.clone();
            t6.generator = "base0-bg".into();
            t6.bg = NAVY;
            let mut v = base.clone();
            v.push(t6);
            v
        }
        StreamKind::SOut => {
            let mut t1 = first.clone();
            t1.sizes = sizes(BIG_TRAIN, cfg);
            let mut t6 = first;
            t6.generator = "base0-perm".into();
            t6.seed = last_seed;
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 7));
            let k = t6.classes();
            let identity: Vec<usize> = (0..k).collect();
            let mut perm = identity.clone();
            while k > 1 && perm == identity {
                perm.shuffle(&mut rng);
            }
            t6.label_perm = perm;
            let mut v = vec![t1];
            v.extend(base[1..5].iter().cloned());
            v.push(t6);
            v
        }
        StreamKind::SPl => base,
        StreamKind::OodDiagonal => return Ok(make_ood_grid(seed, cfg).diagonal),
        StreamKind::Long => long_stream(seed, cfg),
        StreamKind::Custom => return Err(Error::Spec("custom streams are built from ingested tasks".into())),
    };
    Ok(TaskStream { kind, tasks })
}

/// `N` tasks cycling over six generators; recurring generators reuse the
/// same families and colours with fresh samples.
fn long_stream(seed: u64, cfg: &StreamConfig) -> Vec<TaskSpec> {
    let k = cfg.classes;
    let palette = [(RED, BLACK), (GREEN, BLACK), (BLUE, WHITE), (YELLOW, NAVY), (MAGENTA, BLACK), (CYAN, GRAY)];
    (0..cfg.long_tasks)
        .map(|i| {
            let g = i % palette.len();
            let families = (0..k).map(|c| (g * 2 + c) % family_count()).collect();
            let (fg, bg) = palette[g];
            let mut s = TaskSpec::new(&format!("long{g}"), families, fg, bg, sizes(SMALL_TRAIN, cfg), sub_seed(seed, 500 + i as u64));
            s.noise = cfg.noise;
            s.jitter = cfg.jitter;
            s
        })
        .collect()
}

pub const OOD_COLORS: [(Color, Color); 5] = [(RED, BLACK), (GREEN, BLACK), (BLUE, BLACK), (BLACK, RED), (BLACK, GREEN)];

pub struct OodGrid {
    pub diagonal: TaskStream,
    /// `cells[i][j]`: class pair `i` in colour combination `j`.
    pub cells: Vec<Vec<TaskSpec>>,
}

/// Five disjoint two-class pairs crossed with five colour combinations.
pub fn make_ood_grid(seed: u64, cfg: &StreamConfig) -> OodGrid {
    let cells: Vec<Vec<TaskSpec>> = (0..5)
        .map(|i| {
            (0..5)
                .map(|j| {
                    let (fg, bg) = OOD_COLORS[j];
                    let mut s = TaskSpec::new(
                        &format!("pair{i}-color{j}"),
                        vec![2 * i, 2 * i + 1],
                        fg,
                        bg,
                        sizes(SMALL_TRAIN, cfg),
                        sub_seed(seed, 1000 + (i * 5 + j) as u64),
                    );
                    s.noise = cfg.noise;
                    s.jitter = cfg.jitter;
                    s
                })
                .collect()
        })
        .collect();
    let diagonal = TaskStream {
        kind: StreamKind::OodDiagonal,
        tasks: (0..5).map(|i| cells[i][i].clone()).collect(),
    };
    OodGrid { diagonal, cells }
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Writes `x_<split>.lmct` (`[n, C, H, W]`) and `y_<split>.lmct` (`[n]`).
pub fn export_task(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let [c, h, w] = ds.image;
    for (name, split) in SPLITS.iter().zip([&ds.train, &ds.val, &ds.test]) {
        io::save(&dir.join(format!("x_{name}.lmct")), &[split.len(), c, h, w], &split.x)?;
        let y: Vec<f64> = split.y.iter().map(|&v| v as f64).collect();
        io::save(&dir.join(format!("y_{name}.lmct")), &[split.len()], &y)?;
    }
    fs::write(dir.join("meta.json"), serde_json::to_string(&serde_json::json!({ "classes": ds.classes }))?)?;
    Ok(())
}

/// Loads a task directory written by [`export_task`] or by hand. The class
/// count comes from `meta.json` when present and from the labels otherwise.
pub fn ingest_task(dir: &Path) -> Result<Dataset> {
    let fail = |file: &Path, reason: String| Error::Ingestion {
        path: file.to_path_buf(),
        reason,
    };
    let mut parts = Vec::new();
    let mut image: Option<[usize; 3]> = None;
    for name in SPLITS {
        let xp = dir.join(format!("x_{name}.lmct"));
        let yp = dir.join(format!("y_{name}.lmct"));
        let x = io::load(&xp).map_err(|e| fail(&xp, e.to_string()))?;
        let y = io::load(&yp).map_err(|e| fail(&yp, e.to_string()))?;
        let [n, c, h, w] = x.shape[..] else {
            return Err(fail(&xp, format!("expected a rank-4 tensor, got shape {:?}", x.shape)));
        };
        match image {
            None => image = Some([c, h, w]),
            Some(im) if im != [c, h, w] => return Err(fail(&xp, format!("image extent {:?} differs from {im:?}", [c, h, w]))),
            Some(_) => {}
        }
        if y.shape != [n] {
            return Err(fail(&yp, format!("label shape {:?} does not match {n} samples", y.shape)));
        }
        let mut labels = Vec::with_capacity(n);
        for &v in &y.data {
            if !(v >= 0.0) || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(fail(&yp, format!("label {v} is not a non-negative integer")));
            }
            labels.push(v as usize);
        }
        parts.push((yp, Split { x: x.data, y: labels }));
    }
    let meta = dir.join("meta.json");
    let classes = if meta.exists() {
        let text = fs::read_to_string(&meta)?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| fail(&meta, e.to_string()))?;
        v.get("classes")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| fail(&meta, "missing integer field \"classes\"".into()))? as usize
    } else {
        parts.iter().flat_map(|(_, s)| s.y.iter()).max().map_or(0, |m| m + 1)
    };
    for (yp, s) in &parts {
        if let Some(&bad) = s.y.iter().find(|&&l| l >= classes) {
            return Err(fail(yp, format!("label {bad} out of range for {classes} classes")));
        }
    }
    let mut it = parts.into_iter().map(|(_, s)| s);
    Ok(Dataset {
        image: image.expect("three splits read"),
        classes,
        train: it.next().expect("train"),
        val: it.next().expect("val"),
        test: it.next().expect("test"),
    })
}
