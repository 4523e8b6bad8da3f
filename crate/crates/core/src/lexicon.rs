//! Tab-separated word frequency tables and sentiment lexicons.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("line {line}: expected `term<TAB>value`, found {content:?}")]
    Malformed { line: usize, content: String },
    #[error("line {line}: value {value:?} is not a number")]
    NotNumeric { line: usize, value: String },
    #[error("line {line}: frequency {value} is negative")]
    NegativeFrequency { line: usize, value: f64 },
    #[error("reading lexicon: {0}")]
    Io(#[from] std::io::Error),
}

/// Parsed `term -> value` entries with case-folded keys. Later lines win.
fn parse_tsv<R: BufRead>(reader: R) -> Result<(Vec<(String, f64, usize)>, Vec<String>), LexiconError> {
    let mut entries: HashMap<String, (f64, usize)> = HashMap::new();
    let mut duplicates = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((term, value)) = trimmed.split_once('\t') else {
            return Err(LexiconError::Malformed {
                line: line_no,
                content: trimmed.to_string(),
            });
        };
        let value = value.trim();
        let parsed: f64 = value.parse().map_err(|_| LexiconError::NotNumeric {
            line: line_no,
            value: value.to_string(),
        })?;
        if !parsed.is_finite() {
            return Err(LexiconError::NotNumeric {
                line: line_no,
                value: value.to_string(),
            });
        }
        let key = term.trim().to_lowercase();
        if entries.insert(key.clone(), (parsed, line_no)).is_some() {
            log::warn!("lexicon line {line_no}: duplicate term '{key}', keeping the later value");
            duplicates.push(key);
        }
    }
    let mut out: Vec<(String, f64, usize)> =
        entries.into_iter().map(|(k, (v, l))| (k, v, l)).collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((out, duplicates))
}

/// Relative word frequencies in `[0, 1]` (raw counts divided by the maximum).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    entries: HashMap<String, f64>,
    #[serde(default, skip)]
    duplicates: Vec<String>,
}

impl FrequencyTable {
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, LexiconError> {
        let (raw, duplicates) = parse_tsv(reader)?;
        if let Some((_, value, line)) = raw.iter().find(|(_, v, _)| *v < 0.0) {
            return Err(LexiconError::NegativeFrequency { line: *line, value: *value });
        }
        let max = raw.iter().fold(0.0f64, |m, (_, v, _)| m.max(*v));
        let entries = raw
            .into_iter()
            .map(|(k, v, _)| (k, if max > 0.0 { v / max } else { 0.0 }))
            .collect();
        Ok(Self { entries, duplicates })
    }

    /// Case-insensitive lookup; unknown terms have frequency 0.
    pub fn lookup(&self, term: &str) -> f64 {
        self.entries.get(&term.to_lowercase()).copied().unwrap_or(0.0)
    }

    pub fn duplicate_terms(&self) -> &[String] {
        &self.duplicates
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Word polarities clamped to `[-1, 1]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SentimentLexicon {
    entries: HashMap<String, f64>,
    #[serde(default, skip)]
    duplicates: Vec<String>,
}

impl SentimentLexicon {
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, LexiconError> {
        let (raw, duplicates) = parse_tsv(reader)?;
        let entries = raw
            .into_iter()
            .map(|(k, v, _)| (k, v.clamp(-1.0, 1.0)))
            .collect();
        Ok(Self { entries, duplicates })
    }

    /// Case-insensitive lookup; unknown terms are neutral.
    pub fn lookup(&self, term: &str) -> f64 {
        self.entries.get(&term.to_lowercase()).copied().unwrap_or(0.0)
    }

    pub fn duplicate_terms(&self) -> &[String] {
        &self.duplicates
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_frequency_table<R: BufRead>(reader: R) -> Result<FrequencyTable, LexiconError> {
    FrequencyTable::from_reader(reader)
}

pub fn load_sentiment_lexicon<R: BufRead>(reader: R) -> Result<SentimentLexicon, LexiconError> {
    SentimentLexicon::from_reader(reader)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Lexicons {
    pub frequency: FrequencyTable,
    pub sentiment: SentimentLexicon,
}

impl Lexicons {
    pub fn new(frequency: FrequencyTable, sentiment: SentimentLexicon) -> Self {
        Self { frequency, sentiment }
    }
}
