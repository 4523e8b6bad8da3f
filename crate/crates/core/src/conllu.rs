//! CoNLL-U ingestion and sentence screening.

use std::collections::HashSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Sentence, Token};

#[derive(Debug, Error)]
pub enum ConlluError {
    #[error("line {line}: expected 10 tab-separated fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: invalid token id {id:?}")]
    BadId { line: usize, id: String },
    #[error("line {line}: token id {found} does not continue the sentence (expected {expected})")]
    NonContiguous { line: usize, expected: usize, found: usize },
    #[error("line {line}: invalid head {head:?}")]
    BadHead { line: usize, head: String },
    #[error("reading CoNLL-U: {0}")]
    Io(#[from] std::io::Error),
}

fn opt_field(s: &str) -> Option<String> {
    (s != "_" && !s.is_empty()).then(|| s.to_string())
}

/// Parses every sentence in a CoNLL-U stream. Multi-word token ranges and
/// empty nodes are skipped; the number of skipped ranges is kept on the
/// sentence. Sentence ids come from `# sent_id` comments when present.
pub fn ingest_conllu<R: BufRead>(reader: R) -> Result<Vec<Sentence>, ConlluError> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<Token> = Vec::new();
    let mut sent_id: Option<String> = None;
    let mut ranges = 0usize;

    let mut flush = |tokens: &mut Vec<Token>, sent_id: &mut Option<String>, ranges: &mut usize| {
        if !tokens.is_empty() {
            let id = sent_id
                .take()
                .unwrap_or_else(|| format!("sent-{}", sentences.len() + 1));
            sentences.push(Sentence {
                id,
                tokens: std::mem::take(tokens),
                language: "en".to_string(),
                multiword_ranges: *ranges,
            });
        }
        *sent_id = None;
        *ranges = 0;
    };

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut sent_id, &mut ranges);
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                if key.trim() == "sent_id" {
                    sent_id = Some(value.trim().to_string());
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 10 {
            return Err(ConlluError::FieldCount {
                line: line_no,
                found: fields.len(),
            });
        }
        let id = fields[0];
        if id.contains('-') {
            ranges += 1;
            continue;
        }
        if id.contains('.') {
            continue;
        }
        let parsed: usize = id.parse().map_err(|_| ConlluError::BadId {
            line: line_no,
            id: id.to_string(),
        })?;
        if parsed != tokens.len() + 1 {
            return Err(ConlluError::NonContiguous {
                line: line_no,
                expected: tokens.len() + 1,
                found: parsed,
            });
        }
        let head = match fields[6] {
            "_" => None,
            h => Some(h.parse::<usize>().map_err(|_| ConlluError::BadHead {
                line: line_no,
                head: h.to_string(),
            })?),
        };
        tokens.push(Token {
            surface: fields[1].to_string(),
            lemma: opt_field(fields[2]),
            dep_relation: opt_field(fields[7]),
            head,
        });
    }
    flush(&mut tokens, &mut sent_id, &mut ranges);
    Ok(sentences)
}

/// Why a sentence would be excluded from a study corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceFlags {
    /// Some surface form occurs more than once.
    pub non_unique: bool,
    /// Longer than the corpus mean length plus one standard deviation.
    pub length_outlier: bool,
    /// Contains sub-token (multi-word) ranges.
    pub multiword: bool,
}

impl SentenceFlags {
    pub fn any(&self) -> bool {
        self.non_unique || self.length_outlier || self.multiword
    }
}

pub fn has_repeated_word(sentence: &Sentence) -> bool {
    let mut seen = HashSet::new();
    sentence.tokens.iter().any(|t| !seen.insert(t.surface.as_str()))
}

/// Flags each sentence against the corpus filters. The length threshold uses
/// the population standard deviation of token counts.
pub fn screen(sentences: &[Sentence]) -> Vec<SentenceFlags> {
    if sentences.is_empty() {
        return Vec::new();
    }
    let n = sentences.len() as f64;
    let mean = sentences.iter().map(|s| s.len() as f64).sum::<f64>() / n;
    let var = sentences
        .iter()
        .map(|s| (s.len() as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let limit = mean + var.sqrt();
    sentences
        .iter()
        .map(|s| SentenceFlags {
            non_unique: has_repeated_word(s),
            length_outlier: s.len() as f64 > limit,
            multiword: s.multiword_ranges > 0,
        })
        .collect()
}
