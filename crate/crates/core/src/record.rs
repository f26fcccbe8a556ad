//! Persisted results of one run.
//!
//! Directory layout:
//!
//! ```text
//! summary.json        metrics and module counts
//! accuracy.csv        primary accuracy matrix
//! aware.csv           task-aware matrix, when evaluated
//! agnostic.csv        task-agnostic matrix, when evaluated
//! events.jsonl        one line per task boundary, expansion or freeze
//! selection/taskJ.lmct  [layers, max modules] mean gating weights
//! config.json         configuration echo
//! record.json         everything above in one document
//! timing.json         wall clock
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{AccuracyMatrix, Summary};
use crate::net::ExpansionEvent;
use crate::tensor::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    TaskStart { task: usize },
    Expansion(ExpansionEvent),
    Freeze { task: usize, modules: usize },
    TaskEnd { task: usize, train_accuracy: f64, val_accuracy: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub learner: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub accuracy: AccuracyMatrix,
    pub aware: Option<AccuracyMatrix>,
    pub agnostic: Option<AccuracyMatrix>,
    /// Trunk modules after each task.
    pub module_counts: Vec<usize>,
    pub per_layer_counts: Vec<Vec<usize>>,
    pub params: usize,
    /// Per task: mean gating weight per layer and module after the final task.
    pub selection_maps: Vec<Vec<Vec<f64>>>,
    pub routes: Vec<Vec<usize>>,
    pub events: Vec<Event>,
    /// Last-task accuracy of an isolated expert, when measured.
    pub expert_last: Option<f64>,
    pub wall_clock_secs: f64,
}

#[derive(Serialize, Deserialize)]
struct SummaryFile {
    learner: String,
    seed: u64,
    #[serde(flatten)]
    metrics: Summary,
    module_counts: Vec<usize>,
    per_layer_counts: Vec<Vec<usize>>,
}

impl RunRecord {
    pub fn summary(&self) -> Result<Summary> {
        Summary::compute(&self.accuracy, &self.module_counts, self.params, self.expert_last)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("selection"))?;
        let summary = SummaryFile {
            learner: self.learner.clone(),
            seed: self.seed,
            metrics: self.summary()?,
            module_counts: self.module_counts.clone(),
            per_layer_counts: self.per_layer_counts.clone(),
        };
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        fs::write(dir.join("accuracy.csv"), self.accuracy.to_csv())?;
        if let Some(m) = &self.aware {
            fs::write(dir.join("aware.csv"), m.to_csv())?;
        }
        if let Some(m) = &self.agnostic {
            fs::write(dir.join("agnostic.csv"), m.to_csv())?;
        }
        let mut ev = String::new();
        for e in &self.events {
            ev.push_str(&serde_json::to_string(e)?);
            ev.push('\n');
        }
        fs::write(dir.join("events.jsonl"), ev)?;
        for (j, map) in self.selection_maps.iter().enumerate() {
            let (shape, data) = pad_map(map);
            io::save(&dir.join("selection").join(format!("task{j}.lmct")), &shape, &data)?;
        }
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        let mut doc = self.clone();
        doc.wall_clock_secs = 0.0;
        fs::write(dir.join("record.json"), serde_json::to_string_pretty(&doc)?)?;
        fs::write(dir.join("timing.json"), serde_json::json!({ "wall_clock_secs": self.wall_clock_secs }).to_string())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("record.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::Ingestion {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let mut r: RunRecord = serde_json::from_str(&text)?;
        if let Ok(t) = fs::read_to_string(dir.join("timing.json")) {
            if let Some(s) = serde_json::from_str::<serde_json::Value>(&t).ok().and_then(|v| v["wall_clock_secs"].as_f64()) {
                r.wall_clock_secs = s;
            }
        }
        Ok(r)
    }
}

/// Ragged per-layer rows padded with zeros to `[layers, max modules]`.
pub fn pad_map(map: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let width = map.iter().map(Vec::len).max().unwrap_or(0);
    let mut data = Vec::with_capacity(map.len() * width);
    for row in map {
        data.extend_from_slice(row);
        data.extend(std::iter::repeat_n(0.0, width - row.len()));
    }
    (vec![map.len(), width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunRecord {
        RunRecord {
            learner: "lmc-aware".into(),
            seed: 3,
            config: serde_json::json!({ "train.epochs": 2 }),
            accuracy: AccuracyMatrix::new(vec![vec![1.0], vec![0.5, 0.75]]).unwrap(),
            module_counts: vec![4, 5],
            per_layer_counts: vec![vec![1; 4], vec![2, 1, 1, 1]],
            params: 10,
            selection_maps: vec![vec![vec![1.0, 0.0], vec![1.0]]],
            routes: vec![vec![0, 0]],
            events: vec![
                Event::TaskStart { task: 0 },
                Event::Expansion(ExpansionEvent {
                    task: 1,
                    layer: 0,
                    modules: 2,
                    mean_z: vec![3.0],
                }),
            ],
            wall_clock_secs: 1.5,
            ..RunRecord::default()
        }
    }

    #[test]
    fn round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        r.save(dir.path()).unwrap();
        assert_eq!(RunRecord::load(dir.path()).unwrap(), r);
        let sel = io::load(&dir.path().join("selection/task0.lmct")).unwrap();
        assert_eq!(sel.shape, vec![2, 2]);
        assert_eq!(sel.data, vec![1.0, 0.0, 1.0, 0.0]);
        let events = fs::read_to_string(dir.path().join("events.jsonl")).unwrap();
        assert_eq!(events.lines().count(), 2);
        assert!(events.contains("\"event\":\"expansion\""));
    }

    #[test]
    fn metric_files_do_not_depend_on_timing() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut r = sample();
        r.save(a.path()).unwrap();
        r.wall_clock_secs = 99.0;
        r.save(b.path()).unwrap();
        for f in ["summary.json", "accuracy.csv", "record.json", "events.jsonl"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn missing_directory_names_the_file() {
        let err = RunRecord::load(Path::new("/nonexistent/run")).unwrap_err();
        assert!(err.to_string().contains("record.json"));
    }
}
