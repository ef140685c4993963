//! Per-step metrics CSV.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::distill::StepReport;
use crate::error::{AsitError, Result};

pub const METRICS_HEADER: &str = "step,lr,wd,lambda,loss_recons,loss_lcl,loss_gcl,loss_total";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub wd: f64,
    pub lambda: f64,
    pub loss_recons: f64,
    pub loss_lcl: f64,
    pub loss_gcl: f64,
    pub loss_total: f64,
}

impl From<&StepReport> for MetricsRow {
    fn from(r: &StepReport) -> Self {
        MetricsRow {
            step: r.step,
            lr: r.lr,
            wd: r.wd,
            lambda: r.lambda,
            loss_recons: r.parts.recons,
            loss_lcl: r.parts.lcl,
            loss_gcl: r.parts.gcl,
            loss_total: r.total,
        }
    }
}

impl MetricsRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.lr, self.wd, self.lambda, self.loss_recons, self.loss_lcl, self.loss_gcl, self.loss_total
        )
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Starts a fresh file with the header.
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| AsitError::io(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        };
        writeln!(w.out, "{METRICS_HEADER}").map_err(|e| AsitError::io(path, e))?;
        w.flush()?;
        Ok(w)
    }

    /// Reopens an existing file, dropping rows at or past `from_step` so a
    /// resumed run does not duplicate them.
    pub fn resume(path: &Path, from_step: u64) -> Result<Self> {
        let rows = read_metrics(path)?;
        let mut w = Self::create(path)?;
        for r in rows.iter().filter(|r| r.step < from_step) {
            w.append(r)?;
        }
        w.flush()?;
        drop(w);
        let f = OpenOptions::new().append(true).open(path).map_err(|e| AsitError::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_line()).map_err(|e| AsitError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| AsitError::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| AsitError::io(path, e))?;
    parse_metrics(&text)
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        _ => return Err(AsitError::Data("metrics file lacks the expected header".into())),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let bad = || AsitError::Data(format!("metrics row {}: `{l}`", i + 1));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |j: usize| f[j].trim().parse::<f64>().map_err(|_| bad());
            Ok(MetricsRow {
                step: f[0].trim().parse().map_err(|_| bad())?,
                lr: num(1)?,
                wd: num(2)?,
                lambda: num(3)?,
                loss_recons: num(4)?,
                loss_lcl: num(5)?,
                loss_gcl: num(6)?,
                loss_total: num(7)?,
            })
        })
        .collect()
}
