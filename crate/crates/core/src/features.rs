//! Token-level covariates describing one displayed saliency explanation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::Lexicons;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("saliency map for sentence '{sentence}' has {scores} scores but the sentence has {tokens} tokens")]
    Misaligned {
        sentence: String,
        tokens: usize,
        scores: usize,
    },
    #[error("token index {index} out of bounds for a sentence of {len} tokens")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("saliency score {value} at token {index} is outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("sentence '{0}' has no tokens")]
    EmptySentence(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TokenRepr")]
pub struct Token {
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lemma: Option<String>,
    #[serde(default, alias = "deprel", skip_serializing_if = "Option::is_none")]
    pub dep_relation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
}

/// Tokens may be given as bare strings in JSON inputs.
#[derive(Deserialize)]
#[serde(untagged)]
enum TokenRepr {
    Plain(String),
    Full {
        surface: String,
        #[serde(default)]
        lemma: Option<String>,
        #[serde(default, alias = "deprel")]
        dep_relation: Option<String>,
        #[serde(default)]
        head: Option<usize>,
    },
}

impl From<TokenRepr> for Token {
    fn from(r: TokenRepr) -> Self {
        match r {
            TokenRepr::Plain(surface) => Token::new(surface),
            TokenRepr::Full { surface, lemma, dep_relation, head } => Token { surface, lemma, dep_relation, head },
        }
    }
}

impl Token {
    pub fn new(surface: impl Into<String>) -> Self {
        Self {
            surface: surface.into(),
            lemma: None,
            dep_relation: None,
            head: None,
        }
    }

    /// Key used for lexicon lookups: the lemma, or the lowercased surface.
    pub fn lookup_key(&self) -> String {
        match &self.lemma {
            Some(l) if !l.is_empty() && l != "_" => l.to_lowercase(),
            _ => self.surface.to_lowercase(),
        }
    }
}

fn default_language() -> String {
    "en".to_string()
}

/// A tokenized sentence; token positions are 1-based in covariates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<Token>,
    #[serde(default = "default_language")]
    pub language: String,
    /// Number of multi-word token ranges skipped during CoNLL-U ingestion.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub multiword_ranges: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

impl Sentence {
    pub fn from_words(id: impl Into<String>, words: &[&str]) -> Self {
        Self {
            id: id.into(),
            tokens: words.iter().map(|w| Token::new(*w)).collect(),
            language: default_language(),
            multiword_ranges: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub sentence_id: String,
    pub scores: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(sentence_id: impl Into<String>, scores: Vec<f64>) -> Self {
        Self {
            sentence_id: sentence_id.into(),
            scores,
        }
    }

    pub fn check_aligned(&self, sentence: &Sentence) -> Result<(), FeatureError> {
        if self.scores.len() != sentence.len() {
            return Err(FeatureError::Misaligned {
                sentence: sentence.id.clone(),
                tokens: sentence.len(),
                scores: self.scores.len(),
            });
        }
        for (index, &value) in self.scores.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(FeatureError::ScoreOutOfRange { index, value });
            }
        }
        Ok(())
    }
}

/// The JSON exchange format for one sentence with its saliency scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceDocument {
    pub id: String,
    pub tokens: Vec<Token>,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
}

impl SentenceDocument {
    pub fn into_parts(self) -> Result<(Sentence, SaliencyMap), FeatureError> {
        let sentence = Sentence {
            id: self.id.clone(),
            tokens: self.tokens,
            language: self.language.unwrap_or_else(default_language),
            multiword_ranges: 0,
        };
        if sentence.is_empty() {
            return Err(FeatureError::EmptySentence(sentence.id));
        }
        let map = SaliencyMap::new(self.id, self.scores);
        map.check_aligned(&sentence)?;
        Ok((sentence, map))
    }

    pub fn from_parts(sentence: &Sentence, map: &SaliencyMap) -> Self {
        Self {
            id: sentence.id.clone(),
            tokens: sentence.tokens.clone(),
            scores: map.scores.clone(),
            language: Some(sentence.language.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Capitalization {
    Lower,
    FirstCapital,
    AllCapital,
}

impl Capitalization {
    pub const ALL: [Capitalization; 3] = [Self::Lower, Self::FirstCapital, Self::AllCapital];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lower => "lower",
            Self::FirstCapital => "first-capital",
            Self::AllCapital => "all-capital",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

/// How single uppercase letters such as "I" are classed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CapitalizationRules {
    pub single_letter_all_capital: bool,
}

pub fn capitalization_class(surface: &str) -> Capitalization {
    capitalization_class_with(surface, CapitalizationRules::default())
}

pub fn capitalization_class_with(surface: &str, rules: CapitalizationRules) -> Capitalization {
    let letters: Vec<char> = surface.chars().filter(|c| c.is_alphabetic()).collect();
    let Some(first) = letters.first() else {
        return Capitalization::Lower;
    };
    let min_letters = if rules.single_letter_all_capital { 1 } else { 2 };
    if letters.len() >= min_letters && letters.iter().all(|c| c.is_uppercase()) {
        Capitalization::AllCapital
    } else if first.is_uppercase() {
        Capitalization::FirstCapital
    } else {
        Capitalization::Lower
    }
}

/// Covariates of one token in one display event. Numeric fields are real
/// valued so that reference contexts may sit between attainable values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenContext {
    pub saliency: f64,
    pub word_length: f64,
    pub word_frequency: f64,
    pub sentence_length: f64,
    pub display_index: f64,
    pub sentiment_polarity: f64,
    pub saliency_rank: f64,
    pub word_position: f64,
    pub capitalization: Capitalization,
    pub dependency_relation: String,
}

pub const UNKNOWN_RELATION: &str = "unknown";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericCovariate {
    Saliency,
    WordLength,
    WordFrequency,
    SentenceLength,
    DisplayIndex,
    SentimentPolarity,
    SaliencyRank,
    WordPosition,
}

impl NumericCovariate {
    pub const ALL: [NumericCovariate; 8] = [
        Self::Saliency,
        Self::WordLength,
        Self::WordFrequency,
        Self::SentenceLength,
        Self::DisplayIndex,
        Self::SentimentPolarity,
        Self::SaliencyRank,
        Self::WordPosition,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Saliency => "saliency",
            Self::WordLength => "word_length",
            Self::WordFrequency => "word_frequency",
            Self::SentenceLength => "sentence_length",
            Self::DisplayIndex => "display_index",
            Self::SentimentPolarity => "sentiment_polarity",
            Self::SaliencyRank => "saliency_rank",
            Self::WordPosition => "word_position",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn get(self, ctx: &TokenContext) -> f64 {
        match self {
            Self::Saliency => ctx.saliency,
            Self::WordLength => ctx.word_length,
            Self::WordFrequency => ctx.word_frequency,
            Self::SentenceLength => ctx.sentence_length,
            Self::DisplayIndex => ctx.display_index,
            Self::SentimentPolarity => ctx.sentiment_polarity,
            Self::SaliencyRank => ctx.saliency_rank,
            Self::WordPosition => ctx.word_position,
        }
    }

    pub fn set(self, ctx: &mut TokenContext, value: f64) {
        let slot = match self {
            Self::Saliency => &mut ctx.saliency,
            Self::WordLength => &mut ctx.word_length,
            Self::WordFrequency => &mut ctx.word_frequency,
            Self::SentenceLength => &mut ctx.sentence_length,
            Self::DisplayIndex => &mut ctx.display_index,
            Self::SentimentPolarity => &mut ctx.sentiment_polarity,
            Self::SaliencyRank => &mut ctx.saliency_rank,
            Self::WordPosition => &mut ctx.word_position,
        };
        *slot = value;
    }

    /// Word frequency is heavily skewed, so its smooth defaults to quantile
    /// knots.
    pub fn is_skewed(self) -> bool {
        matches!(self, Self::WordFrequency)
    }
}

/// 1-based rank of token `index` (0-based) among the sentence's scores,
/// normalized by sentence length. Rank 1 is the highest score; ties go to the
/// earlier token.
pub fn saliency_rank(scores: &[f64], index: usize) -> Result<f64, FeatureError> {
    if index >= scores.len() {
        return Err(FeatureError::IndexOutOfBounds {
            index,
            len: scores.len(),
        });
    }
    Ok(rank_of(scores, index) as f64 / scores.len() as f64)
}

fn rank_of(scores: &[f64], index: usize) -> usize {
    let s = scores[index];
    let better = scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < index))
        .count();
    better + 1
}

/// Normalized ranks for every token at once.
pub fn saliency_ranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = (pos + 1) as f64 / n as f64;
    }
    ranks
}

/// Builds the covariates of every token of `sentence` shown with `map` at
/// position `display_index` of a session.
pub fn extract(
    sentence: &Sentence,
    map: &SaliencyMap,
    display_index: usize,
    lexicons: &Lexicons,
) -> Result<Vec<TokenContext>, FeatureError> {
    if sentence.is_empty() {
        return Err(FeatureError::EmptySentence(sentence.id.clone()));
    }
    map.check_aligned(sentence)?;
    let ranks = saliency_ranks(&map.scores);
    let len = sentence.len() as f64;
    Ok(sentence
        .tokens
        .iter()
        .enumerate()
        .map(|(i, tok)| TokenContext {
            saliency: map.scores[i],
            word_length: tok.surface.chars().count() as f64,
            word_frequency: lexicons.frequency.lookup(&tok.surface),
            sentence_length: len,
            display_index: display_index as f64,
            sentiment_polarity: lexicons.sentiment.lookup(&tok.lookup_key()),
            saliency_rank: ranks[i],
            word_position: (i + 1) as f64,
            capitalization: capitalization_class(&tok.surface),
            dependency_relation: tok
                .dep_relation
                .clone()
                .filter(|d| !d.is_empty() && d != "_")
                .unwrap_or_else(|| UNKNOWN_RELATION.to_string()),
        })
        .collect())
}

/// Recomputes only the saliency-dependent fields of already extracted
/// contexts after the scores changed.
pub fn refresh_saliency(contexts: &mut [TokenContext], scores: &[f64]) {
    let ranks = saliency_ranks(scores);
    for ((ctx, &s), r) in contexts.iter_mut().zip(scores).zip(ranks) {
        ctx.saliency = s;
        ctx.saliency_rank = r;
    }
}
