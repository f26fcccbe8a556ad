use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lmc_core::baselines::Normalizer;
use lmc_core::net::{HeadMode, LmcNetwork};
use lmc_core::taskgen::Dataset;
use lmc_core::trainer::evaluate;
use lmc_core::Error;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::runner::load_tasks;
use crate::svg;
use crate::CliError;

/// SHA-256 of every file in a network directory, by file name.
pub fn checksums(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            let bytes = fs::read(entry.path())?;
            out.insert(entry.file_name().to_string_lossy().into_owned(), hex::encode(Sha256::digest(&bytes)));
        }
    }
    Ok(out)
}

struct Source {
    name: String,
    net: LmcNetwork<f64>,
    tasks: Vec<Dataset>,
    net_dir: PathBuf,
}

fn open_source(run: &Path, tag: &str) -> Result<Source, CliError> {
    let cfg = ExperimentConfig::load(&run.join("experiment.toml"))?;
    if !cfg.learner.is_lmc() {
        return Err(CliError::Usage(format!("{}: {} is not a single modular network", run.display(), cfg.learner)));
    }
    let net_dir = run.join("network");
    let net = LmcNetwork::load(&net_dir)?;
    let mut tasks = load_tasks(&cfg)?;
    let norm = run.join("normalizer.json");
    if norm.exists() {
        let n: Normalizer = serde_json::from_str(&fs::read_to_string(&norm)?)?;
        tasks = tasks.iter().map(|d| n.apply(d)).collect();
    }
    let name = format!("{tag}-{}", run.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy()));
    Ok(Source { name, net, tasks, net_dir })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskScore {
    pub source: String,
    pub task: usize,
    /// Head key inside the combined network.
    pub head: usize,
    pub alone: f64,
    pub combined: f64,
    pub combined_agnostic: f64,
}

pub struct CombineReport {
    pub scores: Vec<TaskScore>,
    pub unchanged: bool,
    pub dir: PathBuf,
    pub text: String,
}

pub fn scores_csv(scores: &[TaskScore]) -> String {
    let mut s = String::from("label,source,task,head,alone,combined,combined_agnostic\n");
    for t in scores {
        let _ = writeln!(s, "{}:t{},{},{},{},{},{},{}", t.source, t.task, t.source, t.task, t.head, t.alone, t.combined, t.combined_agnostic);
    }
    s
}

/// `combine`: layer-wise union of two saved runs evaluated on both
/// streams without further training.
pub fn cli_combine(a: &Path, b: &Path, out: &Path) -> Result<CombineReport, CliError> {
    let mut sa = open_source(a, "a")?;
    let mut sb = open_source(b, "b")?;
    let before = (checksums(&sa.net_dir)?, checksums(&sb.net_dir)?);
    let (mut both, offset) = LmcNetwork::combine(&sa.net, &sb.net).map_err(|e| match e {
        Error::Combination(m) => CliError::Usage(format!("incompatible networks: {m}")),
        other => other.into(),
    })?;
    let bs = 64;
    let mut scores = Vec::new();
    fs::create_dir_all(out.join("selection"))?;
    for (src, shift) in [(&mut sa, 0), (&mut sb, offset)] {
        for (t, ds) in src.tasks.iter().enumerate() {
            let head = t + shift;
            let alone = evaluate(&mut src.net, ds, &ds.test, HeadMode::Aware(t), bs)?;
            let combined = evaluate(&mut both, ds, &ds.test, HeadMode::Aware(head), bs)?;
            let combined_agnostic = evaluate(&mut both, ds, &ds.test, HeadMode::Agnostic, bs)?;
            let batches: Vec<_> = ds.ordered_batches::<f64>(&ds.test, bs)?.into_iter().map(|(x, _)| x).collect();
            let map = both.selection_map(&batches, HeadMode::Aware(head))?;
            let mut csv = String::from("layer,module,weight\n");
            for (l, row) in map.iter().enumerate() {
                for (m, w) in row.iter().enumerate() {
                    let _ = writeln!(csv, "{l},{m},{w}");
                }
            }
            fs::write(out.join("selection").join(format!("{}_t{t}.csv", src.name)), csv)?;
            scores.push(TaskScore {
                source: src.name.clone(),
                task: t,
                head,
                alone,
                combined,
                combined_agnostic,
            });
        }
    }
    let after = (checksums(&sa.net_dir)?, checksums(&sb.net_dir)?);
    let unchanged = before == after;
    let csv = scores_csv(&scores);
    fs::write(out.join("combine.csv"), &csv)?;
    fs::write(out.join("combine.svg"), svg::bars("per-task accuracy, source vs combined", &csv, "label", &["alone", "combined", "combined_agnostic"]))?;
    fs::write(
        out.join("checksums.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "before": [before.0, before.1], "after": [after.0, after.1] }))?,
    )?;
    both.save(&out.join("network"))?;
    let mut text = String::new();
    for s in &scores {
        let _ = writeln!(text, "{}:t{}  alone {:.4}  combined {:.4}  combined agnostic {:.4}", s.source, s.task, s.alone, s.combined, s.combined_agnostic);
    }
    let _ = writeln!(text, "source parameters unchanged: {unchanged}");
    if !unchanged {
        return Err(CliError::Runtime(format!("source network files changed during combination\n{text}")));
    }
    Ok(CombineReport {
        scores,
        unchanged,
        dir: out.to_path_buf(),
        text,
    })
}
