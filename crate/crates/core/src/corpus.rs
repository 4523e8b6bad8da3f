//! Sentences plus the lexicons needed to compute their covariates.

use std::path::Path;

use thiserror::Error;

use crate::conllu::{ingest_conllu, ConlluError};
use crate::features::Sentence;
use crate::lexicon::{FrequencyTable, LexiconError, Lexicons, SentimentLexicon};

const TOY_CONLLU: &str = include_str!("../data/toy_reviews.conllu");
const TOY_FREQUENCY: &str = include_str!("../data/toy_frequency.tsv");
const TOY_SENTIMENT: &str = include_str!("../data/toy_sentiment.tsv");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Conllu(#[from] ConlluError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unknown sentence '{0}'")]
    UnknownSentence(String),
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub lexicons: Lexicons,
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>, CorpusError> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
}

impl Corpus {
    /// The bundled corpus of 61 short English reviews with toy lexicons.
    pub fn toy() -> Self {
        Self {
            sentences: ingest_conllu(TOY_CONLLU.as_bytes()).expect("bundled corpus parses"),
            lexicons: Lexicons::new(
                FrequencyTable::from_reader(TOY_FREQUENCY.as_bytes()).expect("bundled frequencies parse"),
                SentimentLexicon::from_reader(TOY_SENTIMENT.as_bytes()).expect("bundled sentiment parses"),
            ),
        }
    }

    /// Loads a CoNLL-U file and optional lexicons; missing lexicons fall back
    /// to the bundled toy ones.
    pub fn load(conllu: &Path, frequency: Option<&Path>, sentiment: Option<&Path>) -> Result<Self, CorpusError> {
        let sentences = ingest_conllu(open(conllu)?)?;
        Self::with_sentences(sentences, frequency, sentiment)
    }

    pub fn with_sentences(
        sentences: Vec<Sentence>,
        frequency: Option<&Path>,
        sentiment: Option<&Path>,
    ) -> Result<Self, CorpusError> {
        let toy = Self::toy().lexicons;
        let frequency = match frequency {
            Some(p) => FrequencyTable::from_reader(open(p)?)?,
            None => toy.frequency,
        };
        let sentiment = match sentiment {
            Some(p) => SentimentLexicon::from_reader(open(p)?)?,
            None => toy.sentiment,
        };
        Ok(Self {
            sentences,
            lexicons: Lexicons::new(frequency, sentiment),
        })
    }

    pub fn sentence(&self, id: &str) -> Result<&Sentence, CorpusError> {
        self.sentences
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| CorpusError::UnknownSentence(id.to_string()))
    }

    /// The first `n` sentences (all of them when `n` exceeds the corpus).
    pub fn take(&self, n: usize) -> Self {
        Self {
            sentences: self.sentences.iter().take(n).cloned().collect(),
            lexicons: self.lexicons.clone(),
        }
    }
}
