//! Artifact files: checkpoints, score tables and training traces.

use std::fmt::Write as _;
use std::path::Path;

use srood_core::scoring::ScoreRecord;

use crate::datasets::Split;
use crate::error::{io_err, AppError, AppResult};

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> AppResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Reads a checkpoint, reporting absence as a missing checkpoint.
pub fn read_checkpoint(path: &Path) -> AppResult<Vec<u8>> {
    if !path.is_file() {
        return Err(AppError::MissingCheckpoint(path.to_path_buf()));
    }
    std::fs::read(path).map_err(io_err(path))
}

pub fn read_text(path: &Path, what: &str) -> AppResult<String> {
    if !path.is_file() {
        return Err(AppError::MissingPrerequisite(format!("{what} ({})", path.display())));
    }
    std::fs::read_to_string(path).map_err(io_err(path))
}

/// A score row together with the split it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub split: Split,
    pub record: ScoreRecord,
}

pub const SCORE_HEADER: &str = "sample_id,split,score,decision,erosion_id";

pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut s = String::from(SCORE_HEADER);
    s.push('\n');
    for r in rows {
        let decision = match r.record.decision {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        let _ = writeln!(
            s,
            "{},{},{:?},{},{}",
            r.record.sample_id, r.split, r.record.score, decision, r.record.erosion_id
        );
    }
    s
}

pub fn parse_scores_csv(text: &str) -> AppResult<Vec<ScoreRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SCORE_HEADER) {
        return Err(AppError::Config("score file lacks the expected header".to_string()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || AppError::Config(format!("score file row {}: malformed", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let decision = match f[3] {
                "" => None,
                "1" => Some(true),
                "0" => Some(false),
                _ => return Err(bad()),
            };
            Ok(ScoreRow {
                split: f[1].parse()?,
                record: ScoreRecord {
                    sample_id: f[0].parse().map_err(|_| bad())?,
                    score: f[2].parse().map_err(|_| bad())?,
                    decision,
                    erosion_id: f[4].parse().map_err(|_| bad())?,
                },
            })
        })
        .collect()
}

/// One `iteration,loss` line per step.
pub fn curve_csv(header: &str, values: &[f64]) -> String {
    let mut s = format!("iteration,{header}\n");
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(s, "{i},{v:?}");
    }
    s
}
