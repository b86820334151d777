//! JSON-lines run log. Every line is a standalone object tagged by `kind`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogRecord {
    Step { step: u64, action: usize, reward: f64, reset: bool },
    Train { learn_step: u64, loss: f64, mean_abs_td: f64 },
    Eval { segment: u64, avg_reward: f64, swarm_clears: u64, q: Vec<f64>, ps: Vec<f64> },
    Meta { config: String, seed: u64, version: String },
}

pub struct LogWriter {
    out: BufWriter<File>,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(LogWriter { out: BufWriter::new(File::create(path)?) })
    }

    pub fn write(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record).map_err(|e| Error::Internal(e.to_string()))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn parse_line(line: &str) -> Result<LogRecord> {
    serde_json::from_str(line).map_err(|e| Error::Argument(format!("bad log line: {e}")))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line).map_err(|e| Error::Argument(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}
