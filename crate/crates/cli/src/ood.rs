use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lmc_core::baselines::{run_learner, Learned};
use lmc_core::taskgen::{gen_task, make_ood_grid, Dataset, StreamKind};

use crate::config::ExperimentConfig;
use crate::runner::{learner_config, parallel, repetitions, run_name, save_learned, RunOptions};
use crate::svg;
use crate::CliError;

pub const SIDE: usize = 5;

pub type Grid = Vec<Vec<f64>>;

pub struct OodRun {
    pub dir: PathBuf,
    /// `aware[i][j]`: class pair `i` in colour combination `j`, scored with
    /// the head of pair `i`.
    pub aware: Grid,
    pub agnostic: Option<Grid>,
}

pub struct OodReport {
    pub runs: Vec<OodRun>,
    pub mean: Grid,
    pub text: String,
}

pub fn diagonal_mean(g: &Grid) -> f64 {
    (0..g.len()).map(|i| g[i][i]).sum::<f64>() / g.len() as f64
}

pub fn off_diagonal_mean(g: &Grid) -> f64 {
    let n = g.len();
    let total: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| g[i][j]).sum();
    total / (n * n - n) as f64
}

pub fn grid_csv(g: &Grid) -> String {
    let mut s = String::from("pair");
    for j in 0..g.first().map_or(0, Vec::len) {
        let _ = write!(s, ",color{j}");
    }
    s.push('\n');
    for (i, row) in g.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "pair{i},{}", cells.join(","));
    }
    s
}

fn selection_csv(maps: &[Vec<Vec<f64>>]) -> String {
    let width = maps.iter().flatten().map(Vec::len).max().unwrap_or(0);
    let mut s = String::from("color/layer");
    for m in 0..width {
        let _ = write!(s, ",m{m}");
    }
    s.push('\n');
    for (j, map) in maps.iter().enumerate() {
        for (l, row) in map.iter().enumerate() {
            let cells: Vec<String> = (0..width).map(|m| row.get(m).map_or(String::new(), |v| v.to_string())).collect();
            let _ = writeln!(s, "color{j}/l{l},{}", cells.join(","));
        }
    }
    s
}

fn mean_grid(grids: &[&Grid]) -> Grid {
    let n = grids.len() as f64;
    (0..SIDE).map(|i| (0..SIDE).map(|j| grids.iter().map(|g| g[i][j]).sum::<f64>() / n).collect()).collect()
}

fn one(cfg: &ExperimentConfig, dir: &Path) -> Result<OodRun, CliError> {
    let grid = make_ood_grid(cfg.stream_seed, &cfg.stream_cfg);
    let train = grid.diagonal.generate()?;
    let lc = learner_config(cfg, &train);
    let mut learned: Learned<f64> = run_learner(cfg.learner, &train, &lc)?;
    learned.record.save(dir)?;
    save_learned(dir, cfg, &learned)?;
    let agnostic = cfg.learner.supports_agnostic();
    let mut aware = vec![vec![0.0; SIDE]; SIDE];
    let mut blind = vec![vec![0.0; SIDE]; SIDE];
    fs::create_dir_all(dir.join("ood"))?;
    for (i, row) in grid.cells.iter().enumerate() {
        let mut maps = Vec::new();
        for (j, spec) in row.iter().enumerate() {
            let ds: Dataset = if i == j { train[i].clone() } else { gen_task(spec)? };
            aware[i][j] = learned.evaluate(i, &ds, |d| &d.test, true)?;
            if agnostic {
                blind[i][j] = learned.evaluate(i, &ds, |d| &d.test, false)?;
            }
            maps.push(learned.selection_map(i, &ds, |d| &d.test)?);
        }
        let csv = selection_csv(&maps);
        fs::write(dir.join("ood").join(format!("selection_pair{i}.csv")), &csv)?;
        fs::write(dir.join("ood").join(format!("selection_pair{i}.svg")), svg::heatmap(&format!("module selection, pair {i}"), &csv))?;
    }
    let csv = grid_csv(&aware);
    fs::write(dir.join("ood").join("grid.csv"), &csv)?;
    fs::write(dir.join("ood").join("grid.svg"), svg::heatmap("test accuracy, pair x colour", &csv))?;
    if agnostic {
        let csv = grid_csv(&blind);
        fs::write(dir.join("ood").join("grid_agnostic.csv"), &csv)?;
        fs::write(dir.join("ood").join("grid_agnostic.svg"), svg::heatmap("task-agnostic accuracy, pair x colour", &csv))?;
    }
    Ok(OodRun {
        dir: dir.to_path_buf(),
        aware,
        agnostic: agnostic.then_some(blind),
    })
}

/// `ood`: trains on the grid diagonal and scores all 25 cells per repetition.
pub fn cli_ood(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<OodReport, CliError> {
    let mut cfg = cfg.clone();
    cfg.stream = StreamKind::OodDiagonal;
    let root = opts.root(&cfg).join("ood");
    let cfgs = repetitions(&cfg, opts.seed_offset);
    let runs = parallel(opts.jobs, &cfgs, |c| one(c, &root.join(run_name(c))))?.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mean = mean_grid(&runs.iter().map(|r| &r.aware).collect::<Vec<_>>());
    let csv = grid_csv(&mean);
    fs::create_dir_all(&root)?;
    fs::write(root.join("grid_mean.csv"), &csv)?;
    fs::write(root.join("grid_mean.svg"), svg::heatmap(&format!("{} test accuracy over {} runs", cfg.learner, runs.len()), &csv))?;
    let mut text = String::new();
    for (r, c) in runs.iter().zip(&cfgs) {
        let _ = writeln!(text, "{}: diagonal {:.4} off-diagonal {:.4}", run_name(c), diagonal_mean(&r.aware), off_diagonal_mean(&r.aware));
    }
    let _ = writeln!(text, "mean: diagonal {:.4} off-diagonal {:.4}", diagonal_mean(&mean), off_diagonal_mean(&mean));
    Ok(OodReport { runs, mean, text })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_means() {
        let g: Grid = (0..SIDE).map(|i| (0..SIDE).map(|j| if i == j { 1.0 } else { 0.25 }).collect()).collect();
        assert_eq!(diagonal_mean(&g), 1.0);
        assert_eq!(off_diagonal_mean(&g), 0.25);
        let csv = grid_csv(&g);
        assert_eq!(csv.lines().count(), 6);
        assert_eq!(csv.lines().skip(1).map(|l| l.split(',').skip(1).count()).sum::<usize>(), 25);
    }
}
