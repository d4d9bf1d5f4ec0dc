use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossReport;

/// Append-only `iter,term,value` log, one row per loss term and iteration.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricRow {
    pub iter: u64,
    pub term: String,
    pub value: f64,
}

impl MetricsLog {
    /// Open for appending at iteration `start`. Rows of iterations at or
    /// after `start` left by an interrupted run are dropped.
    pub fn open(path: &Path, start: u64) -> Result<Self> {
        let kept: Vec<MetricRow> = if path.exists() {
            read_metrics(path)?.into_iter().filter(|r| r.iter < start).collect()
        } else {
            Vec::new()
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(["iter", "term", "value"])?;
        for r in &kept {
            write_row(&mut writer, r.iter, &r.term, r.value)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        drop(writer);
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            writer: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        })
    }

    pub fn append(&mut self, iter: u64, report: &LossReport) -> Result<()> {
        for (term, value) in report {
            write_row(&mut self.writer, iter, term, *value)?;
        }
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn write_row<W: std::io::Write>(w: &mut csv::Writer<W>, iter: u64, term: &str, value: f64) -> Result<()> {
    // `{:?}` prints the shortest representation that parses back exactly
    w.write_record([iter.to_string(), term.to_string(), format!("{value:?}")])?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?)
}

/// Values of one term ordered by iteration.
pub fn term_series(rows: &[MetricRow], term: &str) -> Vec<(u64, f64)> {
    let mut v: Vec<(u64, f64)> = rows.iter().filter(|r| r.term == term).map(|r| (r.iter, r.value)).collect();
    v.sort_by_key(|p| p.0);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resume_truncates_and_values_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rep = |x: f64| LossReport::from([("a".to_string(), x), ("b".to_string(), 0.1 + x)]);
        let mut log = MetricsLog::open(&p, 0).unwrap();
        for i in 0..5 {
            log.append(i, &rep(i as f64 / 3.0)).unwrap();
        }
        drop(log);
        let mut log = MetricsLog::open(&p, 3).unwrap();
        log.append(3, &rep(7.0)).unwrap();
        drop(log);
        let rows = read_metrics(&p).unwrap();
        assert_eq!(rows.len(), 8);
        let a = term_series(&rows, "a");
        assert_eq!(a.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(a[1].1, 1.0 / 3.0);
        assert_eq!(a[3].1, 7.0);
    }
}
