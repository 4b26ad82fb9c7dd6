//! Line-oriented run logs and evaluation results.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use drsformer_core::train::{Scores, StepLog};

use crate::error::{read, write, Error, Result};

/// Appends `iter\tloss\tlr\tpsnr\tssim` lines; the metric columns are empty
/// on iterations without a held-out evaluation.
pub struct RunLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RunLog {
    /// Creates the log, or reopens it for appending when resuming.
    pub fn open(path: &Path, append: bool, header: &[String]) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut log = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        for line in header {
            log.line(&format!("# {line}"))?;
        }
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn step(&mut self, log: &StepLog, eval: Option<&Scores>) -> Result<()> {
        let metrics = eval.map_or_else(|| "\t".to_string(), |s| format!("{:.4}\t{:.6}", s.psnr, s.ssim));
        self.line(&format!(
            "{}\t{:.6e}\t{:.6e}\t{metrics}",
            log.iteration + 1,
            log.loss,
            log.lr
        ))
    }

    pub fn comment(&mut self, s: &str) -> Result<()> {
        self.line(&format!("# {s}"))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// One parsed run-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub eval: Option<Scores>,
}

pub fn read_run_log(path: &Path) -> Result<Vec<LogLine>> {
    let text = String::from_utf8(read(path)?).map_err(|_| Error::format(path, "log is not UTF-8"))?;
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            let bad = || Error::format(path, format!("bad log line {}: {l:?}", i + 1));
            let f: Vec<&str> = l.split('\t').collect();
            let [it, loss, lr, psnr, ssim] = f[..] else {
                return Err(bad());
            };
            let eval = match (psnr, ssim) {
                ("", "") => None,
                (p, s) => Some(Scores {
                    psnr: p.parse().map_err(|_| bad())?,
                    ssim: s.parse().map_err(|_| bad())?,
                }),
            };
            Ok(LogLine {
                iteration: it.parse().map_err(|_| bad())?,
                loss: loss.parse().map_err(|_| bad())?,
                lr: lr.parse().map_err(|_| bad())?,
                eval,
            })
        })
        .collect()
}

/// `name\tpsnr\tssim` rows followed by their arithmetic `mean`.
pub fn render_results(rows: &[(String, Scores)]) -> String {
    let mut out = String::new();
    for (name, s) in rows {
        writeln!(out, "{name}\t{:.4}\t{:.6}", s.psnr, s.ssim).unwrap();
    }
    let m = mean(rows.iter().map(|(_, s)| *s));
    writeln!(out, "mean\t{:.4}\t{:.6}", m.psnr, m.ssim).unwrap();
    out
}

pub fn mean(scores: impl Iterator<Item = Scores>) -> Scores {
    let (mut p, mut s, mut n) = (0.0, 0.0, 0usize);
    for x in scores {
        p += x.psnr;
        s += x.ssim;
        n += 1;
    }
    let n = n.max(1) as f64;
    Scores {
        psnr: p / n,
        ssim: s / n,
    }
}

pub fn save_results(path: &Path, rows: &[(String, Scores)]) -> Result<()> {
    write(path, render_results(rows).as_bytes())
}
