//! Per-step loss CSV: `step,center,box,offset,relation,mask,total`.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use repparse_core::loss::LossReport;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub center: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    pub offset: f64,
    pub relation: f64,
    pub mask: f64,
    pub total: f64,
}

impl LossRow {
    pub fn new(step: usize, r: &LossReport) -> Self {
        LossRow { step, center: r.center, box_: r.box_, offset: r.offset, relation: r.relation, mask: r.mask, total: r.total }
    }
}

pub struct LossLog {
    writer: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(LossLog { writer: csv::Writer::from_writer(file), path: path.to_path_buf() })
    }

    pub fn push(&mut self, row: LossRow) -> Result<()> {
        self.writer.serialize(row).map_err(|e| Error::parse(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::parse(path, e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let rows = [
            LossRow { step: 1, center: 0.5, box_: 0.25, offset: 0.125, relation: 0.0, mask: 1.5, total: 2.0 },
            LossRow { step: 2, center: 0.1, box_: 0.2, offset: 0.3, relation: 0.4, mask: 0.5, total: 0.6 },
        ];
        let mut log = LossLog::create(&p).unwrap();
        for r in rows {
            log.push(r).unwrap();
        }
        log.flush().unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next(), Some("step,center,box,offset,relation,mask,total"));
        assert_eq!(read(&p).unwrap(), rows);
    }
}
