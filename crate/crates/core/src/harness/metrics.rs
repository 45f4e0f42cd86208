use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::lease::IterationReport;

pub const METRICS_HEADER: &str = "iteration,explainer_train_loss,explainer_val_loss,audience_train_loss,audience_val_loss,attack_objective,outer_objective";
pub const TIMINGS_HEADER: &str = "iteration,wall_ms";
pub const EVAL_HEADER: &str = "epoch,train_loss,test_loss,test_accuracy";
pub const SWEEP_HEADER: &str = "gamma,seed,test_error,test_accuracy,explainer_val_loss,audience_val_loss";

/// One search iteration. Stages the mode skipped are `None` and written as
/// empty cells.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub explainer_train_loss: f64,
    pub explainer_val_loss: f64,
    pub audience_train_loss: Option<f64>,
    pub audience_val_loss: Option<f64>,
    pub attack_objective: Option<f64>,
    pub outer_objective: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    pub fn from_report<X>(r: &IterationReport<X>, wall_ms: f64) -> MetricsRow {
        MetricsRow {
            iteration: r.iteration,
            explainer_train_loss: r.explainer_train_loss,
            explainer_val_loss: r.explainer_val_loss,
            audience_train_loss: r.audience_train_loss,
            audience_val_loss: r.audience_val_loss,
            attack_objective: r.attack_objective,
            outer_objective: r.outer_objective,
            wall_ms,
        }
    }

    /// The `metrics.csv` line; wall-clock time is left out so that the file
    /// is a pure function of the configuration.
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.explainer_train_loss,
            self.explainer_val_loss,
            opt(self.audience_train_loss),
            opt(self.audience_val_loss),
            opt(self.attack_objective),
            self.outer_objective
        )
    }

    /// Parses a `metrics.csv` line; `wall_ms` comes back as zero.
    pub fn parse_csv(line: &str) -> Option<MetricsRow> {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 7 {
            return None;
        }
        let num = |s: &str| s.parse::<f64>().ok();
        let maybe = |s: &str| if s.is_empty() { Some(None) } else { num(s).map(Some) };
        Some(MetricsRow {
            iteration: cells[0].parse().ok()?,
            explainer_train_loss: num(cells[1])?,
            explainer_val_loss: num(cells[2])?,
            audience_train_loss: maybe(cells[3])?,
            audience_val_loss: maybe(cells[4])?,
            attack_objective: maybe(cells[5])?,
            outer_objective: num(cells[6])?,
            wall_ms: 0.0,
        })
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Appends rows to `metrics.csv` and `timings.csv` as they arrive.
pub struct MetricsWriter {
    metrics: BufWriter<File>,
    timings: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<MetricsWriter> {
        let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        let mut timings = BufWriter::new(File::create(dir.join("timings.csv"))?);
        writeln!(metrics, "{METRICS_HEADER}")?;
        writeln!(timings, "{TIMINGS_HEADER}")?;
        Ok(MetricsWriter { metrics, timings })
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.metrics, "{}", row.csv())?;
        writeln!(self.timings, "{},{:.3}", row.iteration, row.wall_ms)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.metrics.flush()?;
        self.timings.flush()?;
        Ok(())
    }
}

/// One evaluation epoch; epoch 0 is the untrained network.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.test_loss, r.test_accuracy).expect("string write");
    }
    s
}

/// One γ of a sweep: the final-iteration validation losses of its search
/// and the test error of its retrained genotype.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub gamma: f64,
    pub seed: u64,
    pub test_error: f64,
    pub test_accuracy: f64,
    pub explainer_val_loss: f64,
    pub audience_val_loss: Option<f64>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.gamma,
            r.seed,
            r.test_error,
            r.test_accuracy,
            r.explainer_val_loss,
            opt(r.audience_val_loss)
        )
        .expect("string write");
    }
    s
}
