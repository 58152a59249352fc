//! Append-only CSV sinks for training and evaluation records.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::evaluation::EvalReport;
use crate::training::StepMetrics;

pub const METRICS_HEADER: &str = "scheme,step,loss,loss_tf,loss_csf,nfe";
pub const TIMING_HEADER: &str = "scheme,step,wall_time_s";
pub const EVAL_HEADER: &str = "scheme,step,fd,precision,recall,per_scale_fd,nfe";

fn open_append(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(f);
    if fresh {
        writeln!(w, "{header}")?;
    }
    Ok(w)
}

/// Training records go to `metrics.csv`; wall-clock times go to a separate
/// `timing.csv` so that the former is a deterministic function of the run.
pub struct MetricsSink {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    dir: PathBuf,
}

impl MetricsSink {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            metrics: open_append(&dir.join("metrics.csv"), METRICS_HEADER)?,
            timing: open_append(&dir.join("timing.csv"), TIMING_HEADER)?,
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn emit(&mut self, m: &StepMetrics, wall_time_s: f64) -> Result<()> {
        writeln!(self.metrics, "{}", metrics_row(m))?;
        writeln!(self.timing, "{},{},{:.6}", m.scheme, m.step, wall_time_s)?;
        Ok(())
    }

    pub fn emit_eval(&mut self, scheme: &str, step: u64, r: &EvalReport) -> Result<()> {
        let mut w = open_append(&self.dir.join("eval.csv"), EVAL_HEADER)?;
        writeln!(w, "{}", eval_row(scheme, step, r))?;
        w.flush()?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}

impl Drop for MetricsSink {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

pub fn metrics_row(m: &StepMetrics) -> String {
    format!(
        "{},{},{},{},{},{}",
        m.scheme, m.step, m.loss, m.loss_tf, m.loss_csf, m.nfe
    )
}

/// Per-scale values are joined with `;` inside one column.
pub fn eval_row(scheme: &str, step: u64, r: &EvalReport) -> String {
    let per: Vec<String> = r.per_scale_fd.iter().map(|v| v.to_string()).collect();
    format!(
        "{scheme},{step},{},{},{},{},{}",
        r.fd,
        r.precision,
        r.recall,
        per.join(";"),
        r.nfe_per_image
    )
}

/// One parsed `metrics.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub scheme: String,
    pub step: u64,
    pub values: Vec<f64>,
}

/// Reads a CSV whose first two columns are `scheme,step` and the rest numeric
/// (or `;`-joined lists).
/// Malformed rows are skipped with a warning. Returns the header and the rows.
pub fn read_csv(text: &str) -> (Vec<String>, Vec<MetricsRow>) {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .map(|h| h.split(',').map(str::to_string).collect())
        .unwrap_or_default();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let parsed = (|| {
            if f.len() != header.len() || f.len() < 2 {
                return None;
            }
            let step = f[1].parse().ok()?;
            // `;`-joined list columns (per-scale FD) read as NaN.
            let values = f[2..]
                .iter()
                .map(|v| if v.contains(';') { Some(f64::NAN) } else { v.parse::<f64>().ok() })
                .collect::<Option<Vec<_>>>()?;
            Some(MetricsRow {
                scheme: f[0].to_string(),
                step,
                values,
            })
        })();
        match parsed {
            Some(r) => rows.push(r),
            None => log::warn!("skipping malformed CSV row {}: {line:?}", n + 2),
        }
    }
    (header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_rows_are_skipped() {
        let (h, rows) = read_csv("scheme,step,loss\ntf,0,1.5\ntf,x,2\ntf,1,2.5,9\nsar,2,0.5\n");
        assert_eq!(h.len(), 3);
        assert_eq!(rows.len(), 2);
        assert_eq!(
            rows[1],
            MetricsRow {
                scheme: "sar".into(),
                step: 2,
                values: vec![0.5]
            }
        );
    }
}
