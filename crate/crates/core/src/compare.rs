//! Multi-method, multi-seed comparison runs and the architecture table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::arch::{design_global, design_local, ClientProfile, ModelSpec};
use crate::config::ExperimentConfig;
use crate::data::{generate, TaskData};
use crate::error::{Error, Result};
use crate::fed::{run_experiment, Federation, Method, RunOutput};

pub const RUNS_HEADER: &str = "method,repeat,seed,group,accuracy,loss,dataset";
pub const COMPARISON_HEADER: &str = "method,column,mean,sd,runs,status";

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One successful run: final test accuracy and loss per group.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub method: Method,
    pub repeat: usize,
    pub seed: u64,
    pub accuracy: Vec<f64>,
    pub loss: Vec<f64>,
}

impl RunResult {
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / self.accuracy.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub sd: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodRow {
    pub method: Method,
    /// One cell per group, then the cross-group average; `None` when every run failed.
    pub cells: Vec<Option<Cell>>,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub rows: Vec<MethodRow>,
    pub runs: Vec<RunResult>,
    pub dataset_checksum: String,
}

impl Comparison {
    pub fn row(&self, method: Method) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn runs_csv(&self) -> String {
        let mut out = format!("{RUNS_HEADER}\n");
        for r in &self.runs {
            for (g, (a, l)) in r.accuracy.iter().zip(&r.loss).enumerate() {
                let _ = writeln!(out, "{},{},{},{g},{a:.6},{l:.6},{}", r.method, r.repeat, r.seed, self.dataset_checksum);
            }
        }
        out
    }

    pub fn comparison_csv(&self) -> String {
        let mut out = format!("{COMPARISON_HEADER}\n");
        for row in &self.rows {
            let status = if row.failures.is_empty() { "ok" } else { "partial" };
            for (col, cell) in self.columns.iter().zip(&row.cells) {
                match cell {
                    Some(c) => {
                        let _ = writeln!(out, "{},{col},{:.6},{:.6},{},{status}", row.method, c.mean, c.sd, c.runs);
                    }
                    None => {
                        let _ = writeln!(out, "{},{col},,,0,failed", row.method);
                    }
                }
            }
        }
        out
    }

    /// Aligned text table, accuracies in percent as `mean ± sd`.
    pub fn render(&self) -> String {
        let mut rows = vec![std::iter::once("method".to_string()).chain(self.columns.iter().cloned()).collect::<Vec<_>>()];
        for row in &self.rows {
            let mut line = vec![row.method.name()];
            line.extend(row.cells.iter().map(|c| match c {
                Some(c) => format!("{:.2} ± {:.2}", 100.0 * c.mean, 100.0 * c.sd),
                None => "failed".into(),
            }));
            rows.push(line);
        }
        let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
            }
        }
        for row in &self.rows {
            for f in &row.failures {
                let _ = writeln!(out, "{}: {f}", row.method);
            }
        }
        out
    }
}

/// Runs every configured method for `repeats` seeds on one generated dataset.
/// Failed runs are recorded and skipped; with `out` each run writes its own
/// directory and the tables are written at the top level.
pub fn run_compare(config: &ExperimentConfig, out: Option<&Path>) -> Result<Comparison> {
    if config.methods.is_empty() {
        return Err(Error::Usage("compare needs at least one method".into()));
    }
    let data = Arc::new(generate(&config.data)?);
    compare_on(config, data, out)
}

/// As [`run_compare`] on an already generated dataset.
pub fn compare_on(config: &ExperimentConfig, data: Arc<TaskData>, out: Option<&Path>) -> Result<Comparison> {
    let checksum = data.checksum();
    let mut columns: Vec<String> = data.tests.iter().map(|t| t.group.to_string()).collect();
    columns.push("average".into());
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for &method in &config.methods {
        let mut mine: Vec<RunResult> = Vec::new();
        let mut failures = Vec::new();
        for repeat in 0..config.repeats {
            let mut fed_cfg = config.federation.clone();
            fed_cfg.method = method;
            fed_cfg.seed = config.federation.seed.wrapping_add(repeat as u64);
            let run_dir = out.map(|o| RunOutput {
                dir: o.join(method.name()).join(format!("repeat{repeat}")),
                checkpoints: config.output.checkpoints,
            });
            let seed = fed_cfg.seed;
            let outcome = Federation::new(fed_cfg, &config.design, data.clone()).and_then(|mut fed| run_experiment(&mut fed, run_dir.as_ref()));
            match outcome {
                Ok(report) => mine.push(RunResult {
                    method,
                    repeat,
                    seed,
                    accuracy: report.final_eval.iter().map(|e| e.test_accuracy).collect(),
                    loss: report.final_eval.iter().map(|e| e.test_loss).collect(),
                }),
                Err(e) => failures.push(format!("repeat {repeat}: {e}")),
            }
        }
        let cells = (0..columns.len())
            .map(|c| {
                if mine.is_empty() {
                    return None;
                }
                let values: Vec<f64> = mine
                    .iter()
                    .map(|r| if c < r.accuracy.len() { r.accuracy[c] } else { r.mean_accuracy() })
                    .collect();
                let (mean, sd) = mean_sd(&values);
                Some(Cell { mean, sd, runs: values.len() })
            })
            .collect();
        rows.push(MethodRow { method, cells, failures });
        runs.extend(mine);
    }
    let cmp = Comparison {
        columns,
        rows,
        runs,
        dataset_checksum: checksum,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("runs.csv", cmp.runs_csv()), ("comparison.csv", cmp.comparison_csv()), ("comparison.txt", cmp.render())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(cmp)
}

/// Local model of one client per group plus the global model, as a text table.
pub fn print_arch(config: &ExperimentConfig) -> Result<String> {
    let profiles: Vec<ClientProfile> = config
        .data
        .groups
        .iter()
        .enumerate()
        .map(|(g, grp)| ClientProfile::new(g, grp.image_size, grp.num_classes, grp.train_per_client))
        .collect();
    let mut columns: Vec<(String, ModelSpec)> = profiles
        .iter()
        .map(|p| Ok((p.group().to_string(), design_local(p, &config.design)?)))
        .collect::<Result<_>>()?;
    columns.push(("global".into(), design_global(&profiles, &config.design)?));
    Ok(crate::arch::render_table(&columns, !config.federation.local_head))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_sd() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_sd(&[4.0]), (4.0, 0.0));
    }
}
