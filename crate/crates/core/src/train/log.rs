//! Tab-separated training logs.
//!
//! `loss.tsv` starts with the header `step\tl1\tmsssim\tperc\tadv\ttotal`
//! followed by one row per optimisation step; `val.tsv` has
//! `step\tpsnr_db\tssim`. Numbers use the shortest representation that
//! round-trips exactly, so two logs are equal iff the values are.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossRecord;

#[derive(Debug)]
pub struct LossLog {
    path: PathBuf,
    out: BufWriter<File>,
}

fn create(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(out)
}

impl LossLog {
    pub fn header() -> String {
        std::iter::once("step")
            .chain(LossRecord::COLUMNS)
            .collect::<Vec<_>>()
            .join("\t")
    }

    pub fn create(path: &Path) -> Result<Self> {
        Ok(LossLog {
            path: path.to_path_buf(),
            out: create(path, &Self::header())?,
        })
    }

    /// Appends and flushes one row, so the log survives a crash.
    pub fn append(&mut self, step: usize, r: &LossRecord) -> Result<()> {
        let row: Vec<String> = r.values().iter().map(f64::to_string).collect();
        writeln!(self.out, "{step}\t{}", row.join("\t")).map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<(usize, LossRecord)>> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if i == 0 {
                if line != Self::header() {
                    return Err(Error::Config(format!("{}: unexpected loss-log header", path.display())));
                }
                continue;
            }
            let bad = || Error::Config(format!("{}: malformed row {}", path.display(), i + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(bad());
            }
            let step = fields[0].parse().map_err(|_| bad())?;
            let v: Vec<f64> = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            rows.push((
                step,
                LossRecord {
                    l1: v[0],
                    msssim: v[1],
                    perc: v[2],
                    adv: v[3],
                    total: v[4],
                },
            ));
        }
        Ok(rows)
    }
}

#[derive(Debug)]
pub struct ValLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl ValLog {
    pub const HEADER: &'static str = "step\tpsnr_db\tssim";

    pub fn create(path: &Path) -> Result<Self> {
        Ok(ValLog {
            path: path.to_path_buf(),
            out: create(path, Self::HEADER)?,
        })
    }

    pub fn append(&mut self, step: usize, psnr: f64, ssim: f64) -> Result<()> {
        writeln!(self.out, "{step}\t{psnr}\t{ssim}").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.tsv");
        let rec = LossRecord {
            l1: 0.1 + 0.2,
            msssim: 1.0 / 3.0,
            perc: 1e-300,
            adv: 0.6931471805599453,
            total: 2.5,
        };
        let mut log = LossLog::create(&path).unwrap();
        log.append(0, &rec).unwrap();
        log.append(1, &rec).unwrap();
        let rows = LossLog::read(&path).unwrap();
        assert_eq!(rows, vec![(0, rec), (1, rec)]);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step\tl1\tmsssim\tperc\tadv\ttotal\n"));
    }
}
