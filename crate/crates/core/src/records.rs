//! Rating records and their CSV / JSONL exchange format.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Capitalization, TokenContext};

/// Words at least this long are flagged as length outliers.
pub const LONG_WORD_CHARS: f64 = 20.0;
/// Ratings that took at least this long are flagged as completion-time outliers.
pub const SLOW_RESPONSE_SECS: f64 = 60.0;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("record {index}: rating {rating} outside 1..={max}")]
    RatingOutOfRange { index: usize, rating: u8, max: usize },
    #[error("record {index}: completion time {value} must be positive")]
    BadCompletionTime { index: usize, value: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualizationCondition {
    #[default]
    Saliency,
    Corrected,
    Bars,
}

impl VisualizationCondition {
    pub const ALL: [VisualizationCondition; 3] = [Self::Saliency, Self::Corrected, Self::Bars];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Saliency => "saliency",
            Self::Corrected => "corrected",
            Self::Bars => "bars",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

/// One importance rating of a target token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub worker_id: String,
    pub sentence_id: String,
    /// 0-based index of the rated token.
    pub token_index: usize,
    pub context: TokenContext,
    pub rating: u8,
    pub completion_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    pub display_index: u32,
    #[serde(default)]
    pub condition: VisualizationCondition,
}

impl RatingRecord {
    pub fn validate(&self, index: usize, num_categories: usize) -> Result<(), RecordError> {
        if self.rating < 1 || self.rating as usize > num_categories {
            return Err(RecordError::RatingOutOfRange {
                index,
                rating: self.rating,
                max: num_categories,
            });
        }
        if !(self.completion_time_s > 0.0) || !self.completion_time_s.is_finite() {
            return Err(RecordError::BadCompletionTime {
                index,
                value: self.completion_time_s,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFlags {
    pub len_outlier: bool,
    pub ct_outlier: bool,
    pub trap_fail: bool,
}

impl RecordFlags {
    pub fn any(&self) -> bool {
        self.len_outlier || self.ct_outlier || self.trap_fail
    }
}

/// Flags a record; `trap_failed_workers` holds workers who failed every trap.
pub fn flag(record: &RatingRecord, trap_failed_workers: &HashSet<String>) -> RecordFlags {
    RecordFlags {
        len_outlier: record.context.word_length >= LONG_WORD_CHARS,
        ct_outlier: record.completion_time_s >= SLOW_RESPONSE_SECS,
        trap_fail: trap_failed_workers.contains(&record.worker_id),
    }
}

/// Drops every flagged record.
pub fn apply_filters(records: &[RatingRecord], trap_failed_workers: &HashSet<String>) -> Vec<RatingRecord> {
    records
        .iter()
        .filter(|r| !flag(r, trap_failed_workers).any())
        .cloned()
        .collect()
}

pub const CSV_COLUMNS: [&str; 20] = [
    "worker_id",
    "sentence_id",
    "token_index",
    "rating",
    "completion_time_s",
    "comment",
    "display_index",
    "condition",
    "saliency",
    "word_length",
    "word_frequency",
    "sentence_length",
    "sentiment_polarity",
    "saliency_rank",
    "word_position",
    "capitalization",
    "dependency_relation",
    "len_outlier",
    "ct_outlier",
    "trap_fail",
];

pub fn write_csv<W: Write>(
    out: W,
    records: &[RatingRecord],
    trap_failed_workers: &HashSet<String>,
) -> Result<(), RecordError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        let f = flag(r, trap_failed_workers);
        let c = &r.context;
        w.write_record([
            r.worker_id.clone(),
            r.sentence_id.clone(),
            r.token_index.to_string(),
            r.rating.to_string(),
            r.completion_time_s.to_string(),
            r.comment.clone().unwrap_or_default(),
            r.display_index.to_string(),
            r.condition.as_str().to_string(),
            c.saliency.to_string(),
            c.word_length.to_string(),
            c.word_frequency.to_string(),
            c.sentence_length.to_string(),
            c.sentiment_polarity.to_string(),
            c.saliency_rank.to_string(),
            c.word_position.to_string(),
            c.capitalization.as_str().to_string(),
            c.dependency_relation.clone(),
            f.len_outlier.to_string(),
            f.ct_outlier.to_string(),
            f.trap_fail.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads records from the CSV export; flag columns are ignored.
pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<RatingRecord>, RecordError> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, RecordError> {
        headers.iter().position(|h| h == name).ok_or_else(|| RecordError::Parse {
            line: 1,
            message: format!("missing column '{name}'"),
        })
    };
    let idx: Vec<usize> = CSV_COLUMNS[..17].iter().map(|c| col(c)).collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let field = |k: usize| row.get(idx[k]).unwrap_or("");
        let num = |k: usize| -> Result<f64, RecordError> {
            field(k).parse::<f64>().map_err(|_| RecordError::Parse {
                line,
                message: format!("column '{}' is not a number: {:?}", CSV_COLUMNS[k], field(k)),
            })
        };
        let int = |k: usize| -> Result<u64, RecordError> {
            field(k).parse::<u64>().map_err(|_| RecordError::Parse {
                line,
                message: format!("column '{}' is not an integer: {:?}", CSV_COLUMNS[k], field(k)),
            })
        };
        let bad = |k: usize| RecordError::Parse {
            line,
            message: format!("column '{}' has unknown value {:?}", CSV_COLUMNS[k], field(k)),
        };
        let comment = field(5);
        out.push(RatingRecord {
            worker_id: field(0).to_string(),
            sentence_id: field(1).to_string(),
            token_index: int(2)? as usize,
            rating: u8::try_from(int(3)?).map_err(|_| bad(3))?,
            completion_time_s: num(4)?,
            comment: (!comment.is_empty()).then(|| comment.to_string()),
            display_index: u32::try_from(int(6)?).map_err(|_| bad(6))?,
            condition: VisualizationCondition::parse(field(7)).ok_or_else(|| bad(7))?,
            context: TokenContext {
                saliency: num(8)?,
                word_length: num(9)?,
                word_frequency: num(10)?,
                sentence_length: num(11)?,
                display_index: num(6)?,
                sentiment_polarity: num(12)?,
                saliency_rank: num(13)?,
                word_position: num(14)?,
                capitalization: Capitalization::parse(field(15)).ok_or_else(|| bad(15))?,
                dependency_relation: field(16).to_string(),
            },
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct JsonlRow<'a> {
    #[serde(flatten)]
    record: &'a RatingRecord,
    flags: RecordFlags,
}

pub fn write_jsonl<W: Write>(
    mut out: W,
    records: &[RatingRecord],
    trap_failed_workers: &HashSet<String>,
) -> Result<(), RecordError> {
    for r in records {
        let row = JsonlRow {
            record: r,
            flags: flag(r, trap_failed_workers),
        };
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads one record per non-empty line; extra fields such as `flags` are ignored.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<RatingRecord>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RecordError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads CSV or JSONL depending on the file extension.
pub fn read_records(path: &std::path::Path) -> Result<Vec<RatingRecord>, RecordError> {
    let file = std::fs::File::open(path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        read_csv(file)
    } else {
        read_jsonl(std::io::BufReader::new(file))
    }
}
