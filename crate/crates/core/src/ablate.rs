//! Ablation sweeps over (variant, n, T, layers) cells.
//!
//! Every cell starts from a shared base configuration, trains with the same
//! seed and is evaluated on the test split with its EMA weights. Cells whose
//! predicted activation memory exceeds the budget are reported as skipped.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::eval_run;
use crate::model::{param_count_for, Model};
use crate::plot::{line_chart, Series};
use crate::recursion::{check_memory, effective_depth, Variant};
use crate::train::{train_loop, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub n: usize,
    #[serde(rename = "T", alias = "t")]
    pub t: usize,
    pub layers: usize,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("{} n={} T={} L={}", self.variant.as_str(), self.n, self.t, self.layers)
    }

    /// The base configuration with this cell's axes applied.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.schedule.variant = self.variant;
        c.schedule.n = self.n;
        c.schedule.t = self.t;
        c.net.n_layers = self.layers;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Grid {
    pub base: RunConfig,
    pub cells: Vec<Cell>,
    /// Evaluation batch size; the training batch size when zero.
    pub eval_batch: usize,
}

impl Grid {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub variant: Variant,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub layers: usize,
    pub depth: usize,
    pub params: usize,
    pub nfp: u64,
    pub test_exact_match: Option<f64>,
    pub final_loss: Option<f64>,
    /// `planned`, `ok`, or `skipped: <reason>`.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub rows: Vec<Row>,
    /// Total training loss per step, one series per trained cell.
    pub curves: Vec<Series>,
}

/// Static columns of every cell, with memory-predicted skips; no training.
pub fn plan(grid: &Grid) -> Result<Vec<Row>> {
    grid.cells
        .iter()
        .map(|cell| {
            let cfg = cell.apply(&grid.base);
            cfg.validate()?;
            let status = match check_memory(
                &cfg.net,
                &cfg.schedule,
                cfg.train.batch_size,
                4,
                cfg.train.memory_budget_bytes,
            ) {
                Ok(()) => "planned".to_string(),
                Err(e @ Error::OutOfMemory { .. }) => format!("skipped: {e}"),
                Err(e) => return Err(e),
            };
            Ok(Row {
                variant: cell.variant,
                n: cell.n,
                t: cell.t,
                layers: cell.layers,
                depth: effective_depth(cell.t, cell.n, cell.layers),
                params: param_count_for(&cfg.net, cell.variant),
                nfp: cell.variant.forward_passes_per_step(),
                test_exact_match: None,
                final_loss: None,
                status,
            })
        })
        .collect()
}

fn thin(points: Vec<(f64, f64)>, max: usize) -> Vec<(f64, f64)> {
    if points.len() <= max {
        return points;
    }
    let stride = points.len().div_ceil(max);
    let last = *points.last().expect("non-empty");
    let mut out: Vec<_> = points.into_iter().step_by(stride).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Trains and evaluates every runnable cell. `progress` receives one line per event.
pub fn run(grid: &Grid, train: &Dataset, test: &Dataset, mut progress: impl FnMut(&str)) -> Result<Outcome> {
    let mut rows = plan(grid)?;
    let mut curves = Vec::new();
    for (cell, row) in grid.cells.iter().zip(rows.iter_mut()) {
        if row.status != "planned" {
            progress(&format!("{}: {}", cell.label(), row.status));
            continue;
        }
        let started = Instant::now();
        let cfg = cell.apply(&grid.base);
        let model = Model::<f32>::new(cfg.net.clone(), cfg.schedule.variant, cfg.train.seed)?;
        let mut trainer = Trainer::new(model, cfg.schedule, cfg.train.clone(), train)?;
        let mut losses = Vec::new();
        train_loop(&mut trainer, train, |_, m| {
            losses.push((m.step as f64, m.loss_answer + m.loss_halt));
            Ok(())
        })?;
        let bs = if grid.eval_batch == 0 {
            cfg.train.batch_size
        } else {
            grid.eval_batch
        };
        let (report, _) = eval_run(&trainer.ema_model(), test, &cfg.schedule, bs)?;
        row.test_exact_match = Some(report.exact_match);
        row.final_loss = losses.last().map(|l| l.1);
        row.status = "ok".into();
        progress(&format!(
            "{}: test exact-match {:.4} ({:.1}s)",
            cell.label(),
            report.exact_match,
            started.elapsed().as_secs_f64()
        ));
        curves.push(Series::new(cell.label(), thin(losses, 400)));
    }
    Ok(Outcome { rows, curves })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn markdown(rows: &[Row]) -> String {
    let mut s = String::from(
        "| variant | n | T | layers | depth | test exact-match | params | NFP | status |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.variant.as_str(),
            r.n,
            r.t,
            r.layers,
            r.depth,
            opt(r.test_exact_match),
            r.params,
            r.nfp,
            r.status.replace('|', "/")
        );
    }
    s
}

pub fn csv(rows: &[Row]) -> String {
    let mut s = String::from("variant,n,T,layers,depth,test_exact_match,params,nfp,final_loss,status\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},\"{}\"",
            r.variant.as_str(),
            r.n,
            r.t,
            r.layers,
            r.depth,
            r.test_exact_match.map_or(String::new(), |x| format!("{x:.6}")),
            r.params,
            r.nfp,
            r.final_loss.map_or(String::new(), |x| format!("{x:.6}")),
            r.status.replace('"', "'")
        );
    }
    s
}

/// Writes `table.md`, `table.csv` and `loss_curves.svg` into `dir`.
pub fn write_outputs(dir: &Path, outcome: &Outcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    put("table.md", markdown(&outcome.rows))?;
    put("table.csv", csv(&outcome.rows))?;
    put(
        "loss_curves.svg",
        line_chart("training loss", "step", "answer + halt loss", &outcome.curves),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID: &str = r#"
[base.train]
batch_size = 768
memory_budget_bytes = 42949672960

[[cells]]
variant = "trm"
n = 6
T = 3
layers = 2

[[cells]]
variant = "hrm"
n = 2
T = 2
layers = 4

[[cells]]
variant = "trm"
n = 12
T = 3
layers = 2
"#;

    #[test]
    fn plan_columns() {
        let grid = Grid::from_toml(GRID).unwrap();
        let rows = plan(&grid).unwrap();
        assert_eq!(rows.iter().map(|r| r.depth).collect::<Vec<_>>(), vec![42, 24, 78]);
        assert_eq!(rows.iter().map(|r| r.nfp).collect::<Vec<_>>(), vec![1, 2, 1]);
        assert_eq!(rows[0].status, "planned");
        assert!(rows[2].status.starts_with("skipped"), "{}", rows[2].status);
        let md = markdown(&rows);
        assert_eq!(md.lines().count(), 5);
        assert_eq!(csv(&rows).lines().count(), 4);
    }

    #[test]
    fn empty_grid_gives_empty_table() {
        let grid = Grid::from_toml("").unwrap();
        let out = run(&grid, &dummy(), &dummy(), |_| {}).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(markdown(&out.rows).lines().count(), 2);
    }

    fn dummy() -> Dataset {
        Dataset::new(crate::data::Task::Sudoku, (4, 4), 6, 1, Vec::new()).unwrap()
    }

    #[test]
    fn thinning_keeps_endpoints() {
        let pts: Vec<_> = (0..1001).map(|i| (i as f64, 0.0)).collect();
        let t = thin(pts, 100);
        assert!(t.len() <= 102);
        assert_eq!(t[0].0, 0.0);
        assert_eq!(t.last().unwrap().0, 1000.0);
    }
}
