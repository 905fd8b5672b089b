use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 6] = ["step", "total", "term2", "term1", "lr", "sigma_x"];

/// One metrics line. `term2` is blank for the fixed-prior baseline and
/// `term1` is blank in upper-bound mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub total: f64,
    pub term2: Option<f64>,
    pub term1: Option<f64>,
    pub lr: f64,
    pub sigma_x: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    fn record(&self) -> [String; 6] {
        [
            self.step.to_string(),
            self.total.to_string(),
            cell(self.term2),
            cell(self.term1),
            self.lr.to_string(),
            self.sigma_x.to_string(),
        ]
    }
}

/// In-memory log that also streams to a CSV file when one is attached.
#[derive(Default)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
    sink: Option<csv::Writer<BufWriter<File>>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(METRICS_HEADER)?;
        w.flush()?;
        Ok(Self {
            rows: Vec::new(),
            sink: Some(w),
        })
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(w) = &mut self.sink {
            w.write_record(row.record())?;
            w.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn into_rows(mut self) -> Result<Vec<MetricsRow>> {
        if let Some(mut w) = self.sink.take() {
            w.flush()?;
            w.into_inner()
                .map_err(|e| Error::Io(e.into_error()))?
                .flush()?;
        }
        Ok(self.rows)
    }
}

fn parse_cell(field: &str, what: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::invalid(format!("metrics column {what}: cannot parse `{field}`")))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::invalid(format!("{}: unexpected metrics header", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let need = |i: usize| -> Result<f64> {
            parse_cell(&rec[i], METRICS_HEADER[i])?
                .ok_or_else(|| Error::invalid(format!("metrics column {} is blank", METRICS_HEADER[i])))
        };
        rows.push(MetricsRow {
            step: rec[0]
                .parse()
                .map_err(|_| Error::invalid(format!("bad step `{}`", &rec[0])))?,
            total: need(1)?,
            term2: parse_cell(&rec[2], "term2")?,
            term1: parse_cell(&rec[3], "term1")?,
            lr: need(4)?,
            sigma_x: need(5)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_with_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut log = MetricsLog::to_file(&path).unwrap();
        let rows = [
            MetricsRow { step: 0, total: 1.5, term2: Some(-1.5), term1: None, lr: 3e-4, sigma_x: 0.0 },
            MetricsRow { step: 100, total: 0.1 + 0.2, term2: None, term1: Some(-2.0), lr: 1e-3, sigma_x: 0.01 },
        ];
        for r in rows {
            log.push(r).unwrap();
        }
        assert_eq!(log.into_rows().unwrap(), rows);
        assert_eq!(read_metrics(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,total,term2,term1,lr,sigma_x\n0,1.5,-1.5,,"));
    }
}
