//! Grid of train/eval runs over model switches.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Result};
use log::{error, info};
use serde::Serialize;
use vstpose_core::dataset::{split, Clip};
use vstpose_core::model::{ModelConfig, VelocitySource};
use vstpose_core::training::{fit, EvalSummary, TrainOptions, Trainer};
use vstpose_core::Scalar;

use crate::config::{AblateGrid, RunConfig};
use crate::data::{evaluate_model, load_clips, windows_for};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub index: usize,
    pub window: usize,
    pub depth: usize,
    pub velocity_branch: bool,
    pub velocity_source: VelocitySource,
    pub velocity_fusion: bool,
}

impl Cell {
    fn source_name(&self) -> &'static str {
        match self.velocity_source {
            VelocitySource::Ts => "ts",
            VelocitySource::St => "st",
            VelocitySource::TsSt => "ts+st",
        }
    }

    pub fn label(&self) -> String {
        format!(
            "T{}-N{}-vel{}-{}-fuse{}",
            self.window,
            self.depth,
            u8::from(self.velocity_branch),
            self.source_name(),
            u8::from(self.velocity_fusion)
        )
    }

    fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.model.window = self.window;
        cfg.load.window = self.window;
        cfg.model.depth = self.depth;
        cfg.model.ablation.velocity_branch = self.velocity_branch;
        cfg.model.ablation.velocity_source = self.velocity_source;
        cfg.model.ablation.velocity_fusion = self.velocity_fusion;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    #[serde(flatten)]
    pub cell: Cell,
    pub label: String,
    pub best_epoch: Option<usize>,
    pub metrics: Option<EvalSummary>,
    pub error: Option<String>,
}

/// Cartesian product of the non-empty axes; empty axes keep the base value.
pub fn expand(grid: &AblateGrid, base: &ModelConfig) -> Result<Vec<Cell>> {
    if grid.window.is_empty()
        && grid.depth.is_empty()
        && grid.velocity_branch.is_empty()
        && grid.velocity_source.is_empty()
        && grid.velocity_fusion.is_empty()
    {
        bail!("ablation grid is empty: set at least one of ablate.window, depth, velocity_branch, velocity_source, velocity_fusion");
    }
    fn or<T: Clone>(axis: &[T], base: T) -> Vec<T> {
        if axis.is_empty() {
            vec![base]
        } else {
            axis.to_vec()
        }
    }
    let ab = base.ablation;
    let mut cells = Vec::new();
    for &window in &or(&grid.window, base.window) {
        for &depth in &or(&grid.depth, base.depth) {
            for &velocity_branch in &or(&grid.velocity_branch, ab.velocity_branch) {
                for &velocity_source in &or(&grid.velocity_source, ab.velocity_source) {
                    for &velocity_fusion in &or(&grid.velocity_fusion, ab.velocity_fusion) {
                        cells.push(Cell { index: cells.len(), window, depth, velocity_branch, velocity_source, velocity_fusion });
                    }
                }
            }
        }
    }
    Ok(cells)
}

fn run_cell<S: Scalar>(cell: &Cell, base: &RunConfig, clips: &[Clip<S>], dir: &Path) -> Result<(Option<usize>, EvalSummary)> {
    let cfg = cell.apply(base);
    cfg.validate()?;
    let windows = windows_for(clips, &cfg, &cfg.model)?;
    let (train, test) = split(&windows, &cfg.split)?;
    if test.is_empty() {
        bail!("test split has no windows");
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join(crate::run::CONFIG_FILE), cfg.to_toml())?;
    let mut trainer = Trainer::<S>::new(cfg.model.clone(), cfg.train.clone())?;
    let opts = TrainOptions { metrics: cfg.metrics.clone(), out_dir: Some(dir.to_path_buf()) };
    let outcome = fit(&mut trainer, &train, &test, &opts)?;
    let report = evaluate_model(&outcome.model, &test, &cfg)?;
    report.write_all(&dir.join("report"))?;
    Ok((outcome.best.map(|b| b.epoch), EvalSummary::from(&report)))
}

fn workers(grid: &AblateGrid, cells: usize) -> usize {
    if !grid.parallel {
        return 1;
    }
    let n = if grid.workers == 0 { std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1) } else { grid.workers };
    n.clamp(1, cells.max(1))
}

fn to_tsv(rows: &[CellResult]) -> String {
    let mut out = String::from(
        "index\tlabel\twindow\tdepth\tvelocity_branch\tvelocity_source\tvelocity_fusion\tbest_epoch\tpck50\tpck40\tpck30\tpck20\tpck10\tmpjpe\tpa_mpjpe\terror\n",
    );
    for r in rows {
        let c = &r.cell;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t",
            c.index,
            r.label,
            c.window,
            c.depth,
            c.velocity_branch,
            c.source_name(),
            c.velocity_fusion
        ));
        out.push_str(&r.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()));
        match &r.metrics {
            Some(m) => {
                for v in [m.pck50, m.pck40, m.pck30, m.pck20, m.pck10, m.mpjpe, m.pa_mpjpe] {
                    out.push_str(&format!("\t{v:.6}"));
                }
            }
            None => out.push_str(&"\t-".repeat(7)),
        }
        out.push('\t');
        out.push_str(&r.error.as_deref().unwrap_or("-").replace(['\t', '\n'], " "));
        out.push('\n');
    }
    out
}

pub fn ablate<S: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let cells = expand(&cfg.ablate, &cfg.model)?;
    let clips = load_clips::<S>(cfg)?;
    let n_workers = workers(&cfg.ablate, cells.len());
    info!("ablation over {} cells with {n_workers} worker(s)", cells.len());

    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cell) = cells.get(i) else { break };
        let label = cell.label();
        let cell_dir = dir.join("cells").join(format!("{:03}-{label}", cell.index));
        info!("cell {}/{}: {label}", i + 1, cells.len());
        let result = match run_cell(cell, cfg, &clips, &cell_dir) {
            Ok((best_epoch, m)) => CellResult { cell: cell.clone(), label, best_epoch, metrics: Some(m), error: None },
            Err(e) => {
                let msg = crate::run::error_chain(&e);
                error!("cell {label} failed: {msg}");
                CellResult { cell: cell.clone(), label, best_epoch: None, metrics: None, error: Some(msg) }
            }
        };
        results.lock().expect("results lock")[i] = Some(result);
    };
    if n_workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..n_workers {
                s.spawn(&work);
            }
        });
    }
    let rows: Vec<CellResult> = results.into_inner().expect("results lock").into_iter().flatten().collect();

    let tsv = to_tsv(&rows);
    fs::write(dir.join("ablation.tsv"), &tsv)?;
    fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    print!("{tsv}");
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        bail!("{failed} of {} ablation cells failed", rows.len());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_the_product_of_non_empty_axes() {
        let grid = AblateGrid { depth: vec![1, 2, 3], velocity_fusion: vec![true, false], ..Default::default() };
        let base = ModelConfig::default();
        let cells = expand(&grid, &base).unwrap();
        assert_eq!(cells.len(), 6);
        assert!(cells.iter().all(|c| c.window == base.window && c.velocity_branch));
        assert_eq!(cells.iter().map(|c| c.index).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
        assert_eq!(cells[1].label(), "T3-N1-vel1-ts-fuse0");
    }

    #[test]
    fn empty_grid_is_an_error() {
        assert!(expand(&AblateGrid::default(), &ModelConfig::default()).is_err());
    }
}
