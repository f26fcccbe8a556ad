use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use lmc_core::baselines::{expert_last_accuracy, run_learner, Learned, LearnerConfig};
use lmc_core::metrics::{comparison_csv, mean_std, Summary};
use lmc_core::record::RunRecord;
use lmc_core::taskgen::{ingest_task, make_stream, Dataset, StreamKind};
use rayon::prelude::*;
use toml::Value;

use crate::config::{parse_value, ExperimentConfig, SchemaErrors, KEYS};
use crate::svg;
use crate::CliError;

pub const DATA_ENV: &str = "LMC_LAB_DATA";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub jobs: usize,
    pub seed_offset: u64,
}

impl RunOptions {
    /// `--out`, then `output.dir`, then `$LMC_LAB_DATA`, then `./lmc-lab-data`.
    pub fn root(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.output.clone())
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("lmc-lab-data"))
    }
}

pub struct RunOutcome {
    pub name: String,
    pub dir: PathBuf,
    pub record: RunRecord,
    pub summary: Summary,
}

pub fn run_name(cfg: &ExperimentConfig) -> String {
    format!("{}-seed{}", cfg.learner, cfg.seed)
}

pub fn load_tasks(cfg: &ExperimentConfig) -> Result<Vec<Dataset>, CliError> {
    let tasks = match cfg.stream {
        StreamKind::Custom => cfg.tasks.iter().map(|p| ingest_task(p)).collect::<Result<Vec<_>, _>>()?,
        kind => make_stream(kind, cfg.stream_seed, &cfg.stream_cfg)?.generate()?,
    };
    let first = tasks.first().ok_or_else(|| CliError::Runtime("stream has no tasks".into()))?.image;
    if let Some((t, d)) = tasks.iter().enumerate().find(|(_, d)| d.image != first) {
        return Err(CliError::Runtime(format!("task {t} has image shape {:?}, task 0 has {first:?}", d.image)));
    }
    Ok(tasks)
}

/// Learner settings for `cfg` sized to the stream's image shape.
pub fn learner_config(cfg: &ExperimentConfig, tasks: &[Dataset]) -> LearnerConfig {
    let mut l = cfg.learner_config();
    if let Some(d) = tasks.first() {
        l.net.in_shape = d.image;
    }
    l
}

/// One-per-line JSON failure note appended to the run's event log.
fn flush_failure(dir: &Path, err: &CliError) {
    let line = serde_json::json!({ "event": "failed", "message": err.to_string() });
    if fs::create_dir_all(dir).is_ok() {
        if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(dir.join("events.jsonl")) {
            let _ = writeln!(f, "{line}");
        }
    }
}

pub fn save_learned(dir: &Path, cfg: &ExperimentConfig, learned: &Learned<f64>) -> Result<(), CliError> {
    fs::write(dir.join("experiment.toml"), cfg.to_toml())?;
    let net_dir = dir.join("network");
    match learned.nets.as_slice() {
        [one] => one.save(&net_dir)?,
        many => {
            for (t, n) in many.iter().enumerate() {
                n.save(&net_dir.join(format!("task{t}")))?;
            }
        }
    }
    if !learned.layouts.is_empty() {
        fs::write(dir.join("layouts.json"), serde_json::to_string(&learned.layouts)?)?;
    }
    if let Some(n) = &learned.normalizer {
        fs::write(dir.join("normalizer.json"), serde_json::to_string_pretty(n)?)?;
    }
    Ok(())
}

/// Trains one learner on its stream and persists the run under `dir`.
pub fn run_single(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutcome, CliError> {
    let go = || -> Result<RunOutcome, CliError> {
        let tasks = load_tasks(cfg)?;
        let lc = learner_config(cfg, &tasks);
        let mut learned = run_learner::<f64>(cfg.learner, &tasks, &lc)?;
        if cfg.transfer {
            learned.record.expert_last = Some(expert_last_accuracy::<f64>(&tasks, &lc)?);
        }
        learned.record.save(dir)?;
        save_learned(dir, cfg, &learned)?;
        let summary = learned.record.summary()?;
        Ok(RunOutcome {
            name: run_name(cfg),
            dir: dir.to_path_buf(),
            record: learned.record,
            summary,
        })
    };
    go().inspect_err(|e| flush_failure(dir, e))
}

/// Runs `jobs` on at most `threads` workers, keeping input order.
pub fn parallel<I: Sync, O: Send>(threads: usize, items: &[I], f: impl Fn(&I) -> O + Sync + Send) -> Result<Vec<O>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(&f).collect()))
}

/// Repetition configs: seeds shifted by the offset plus the repetition index.
pub fn repetitions(cfg: &ExperimentConfig, offset: u64) -> Vec<ExperimentConfig> {
    (0..cfg.repetitions as u64).map(|r| cfg.with_seed_offset(offset + r)).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

pub fn summary_table(rows: &[(String, Summary)]) -> String {
    let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(3).max(3);
    let mut s = format!("{:<w$}  {:>8}  {:>8}  {:>8}  {:>5}\n", "run", "A", "F", "T", "M");
    for (n, m) in rows {
        let _ = writeln!(s, "{n:<w$}  {:>8.4}  {:>8}  {:>8}  {:>5}", m.average_accuracy, fmt_opt(m.forgetting), fmt_opt(m.transfer), m.modules);
    }
    s
}

/// `metric,mean,std` over the repetitions; missing values are skipped.
pub fn aggregate_csv(rows: &[(String, Summary)]) -> String {
    let mut s = String::from("metric,mean,std\n");
    let metrics: [(&str, fn(&Summary) -> Option<f64>); 4] = [
        ("A", |m| Some(m.average_accuracy)),
        ("F", |m| m.forgetting),
        ("T", |m| m.transfer),
        ("M", |m| Some(m.modules as f64)),
    ];
    for (name, get) in metrics {
        let v: Vec<f64> = rows.iter().filter_map(|(_, m)| get(m)).collect();
        if !v.is_empty() {
            let (mean, std) = mean_std(&v);
            let _ = writeln!(s, "{name},{mean},{std}");
        }
    }
    s
}

pub struct RunReport {
    pub outcomes: Vec<RunOutcome>,
    pub text: String,
}

/// `run`: every repetition of `cfg`, then the summary table.
pub fn cli_run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport, CliError> {
    let root = opts.root(cfg);
    let cfgs = repetitions(cfg, opts.seed_offset);
    let results = parallel(opts.jobs, &cfgs, |c| run_single(c, &root.join(run_name(c))))?;
    let outcomes = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<(String, Summary)> = outcomes.iter().map(|o| (o.name.clone(), o.summary.clone())).collect();
    fs::create_dir_all(&root)?;
    fs::write(root.join("summary.csv"), comparison_csv(&rows))?;
    let mut text = summary_table(&rows);
    if rows.len() > 1 {
        let agg = aggregate_csv(&rows);
        fs::write(root.join("aggregate.csv"), &agg)?;
        text.push('\n');
        for line in agg.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let (m, sd): (f64, f64) = (f[1].parse().unwrap_or(f64::NAN), f[2].parse().unwrap_or(f64::NAN));
            let _ = writeln!(text, "{} = {m:.4} ± {sd:.4}", f[0]);
        }
    }
    Ok(RunReport { outcomes, text })
}

pub struct SweepReport {
    pub values: Vec<Value>,
    pub accuracy: Vec<f64>,
    pub modules: Vec<f64>,
    pub csv: String,
    pub dir: PathBuf,
    pub text: String,
}

/// Consecutive comparisons in which `ys` does not increase, and their count.
pub fn non_increasing_steps(ys: &[f64]) -> (usize, usize) {
    let steps = ys.windows(2).filter(|w| w[1] <= w[0]).count();
    (steps, ys.len().saturating_sub(1))
}

fn path_safe(v: &Value) -> String {
    v.to_string().trim_matches('"').chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

/// `sweep`: one run per value of `param`, repetitions averaged.
pub fn cli_sweep(cfg: &ExperimentConfig, param: &str, values: &[String], opts: &RunOptions) -> Result<SweepReport, CliError> {
    let values: Vec<&String> = values.iter().filter(|v| !v.trim().is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Usage(format!("sweep over {param} needs at least one value")));
    }
    if !KEYS.contains(&param) {
        return Err(CliError::Schema(SchemaErrors(vec![format!("{param}: unknown key")])));
    }
    let parsed: Vec<Value> = values.iter().map(|v| parse_value(v)).collect();
    let mut errors = Vec::new();
    let mut points = Vec::new();
    for v in &parsed {
        let mut c = cfg.clone();
        match c.set(param, v).map_err(|e| SchemaErrors(vec![e])).and_then(|_| c.validate()) {
            Ok(()) => points.push(c),
            Err(e) => errors.extend(e.0.into_iter().map(|m| format!("{m} (value {v})"))),
        }
    }
    if !errors.is_empty() {
        return Err(CliError::Schema(SchemaErrors(errors)));
    }
    let dir = opts.root(cfg).join(format!("sweep-{param}"));
    let jobs: Vec<(usize, ExperimentConfig, PathBuf)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            let vdir = dir.join(format!("{}={}", param, path_safe(&parsed[i])));
            repetitions(c, opts.seed_offset).into_iter().map(move |r| {
                let d = vdir.join(run_name(&r));
                (i, r, d)
            })
        })
        .collect();
    let results = parallel(opts.jobs, &jobs, |(_, c, d)| run_single(c, d))?;
    let mut acc = vec![Vec::new(); parsed.len()];
    let mut mods = vec![Vec::new(); parsed.len()];
    for ((i, _, _), r) in jobs.iter().zip(results) {
        let r = r?;
        acc[*i].push(r.summary.average_accuracy);
        mods[*i].push(r.summary.modules as f64);
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let accuracy: Vec<f64> = acc.iter().map(mean).collect();
    let modules: Vec<f64> = mods.iter().map(mean).collect();
    let mut csv = String::from("value,A,M\n");
    for (i, v) in parsed.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{}", v.to_string().trim_matches('"'), accuracy[i], modules[i]);
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("sweep.csv"), &csv)?;
    fs::write(dir.join("sweep.svg"), svg::scatter(&format!("modules vs accuracy over {param}"), &csv, "M", "A", "value"))?;
    let (steps, of) = non_increasing_steps(&modules);
    let mut text = csv.replace(',', "\t");
    let _ = writeln!(text, "modules non-increasing in {steps} of {of} steps");
    Ok(SweepReport {
        values: parsed,
        accuracy,
        modules,
        csv,
        dir,
        text,
    })
}

/// `inspect`: human-readable view of a saved run.
pub fn inspect(dir: &Path) -> Result<String, CliError> {
    let r = RunRecord::load(dir)?;
    let m = r.summary()?;
    let mut s = String::new();
    let _ = writeln!(s, "learner   {}", r.learner);
    let _ = writeln!(s, "seed      {}", r.seed);
    let _ = writeln!(s, "tasks     {}", r.accuracy.tasks());
    let _ = writeln!(s, "params    {}", r.params);
    let _ = writeln!(s, "wallclock {:.1}s", r.wall_clock_secs);
    let _ = writeln!(s, "\n{}", summary_table(&[(r.learner.clone(), m)]));
    let _ = writeln!(s, "accuracy after each task:");
    for (i, row) in r.accuracy.rows().iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        let _ = writeln!(s, "  t{i:<3} {}", cells.join(" "));
    }
    if let Some(layers) = r.per_layer_counts.last() {
        let _ = writeln!(s, "\nmodules per layer: {layers:?}");
    }
    let _ = writeln!(s, "module count after each task: {:?}", r.module_counts);
    if !r.routes.is_empty() {
        let _ = writeln!(s, "routes:");
        for (t, route) in r.routes.iter().enumerate() {
            let _ = writeln!(s, "  t{t:<3} {route:?}");
        }
    }
    Ok(s)
}
