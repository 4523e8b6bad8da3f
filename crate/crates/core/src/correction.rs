//! Reference contexts, bias scores and iterative saliency correction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::features::{self, FeatureError, NumericCovariate, SaliencyMap, Sentence, TokenContext};
use crate::lexicon::Lexicons;
use crate::model::fitted::blank_context;
use crate::model::{CovariateSpace, FittedPerceptionModel};
use crate::plan::{ItemKind, StudyPlan};
use crate::records::VisualizationCondition;
use crate::simulate::GroundTruthModel;

pub const DEFAULT_REFERENCE_SAMPLES: usize = 10_001;
pub const DEFAULT_PROBE_SALIENCY: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_STEPS: usize = 100;

#[derive(Debug, Error)]
pub enum CorrectionError {
    #[error("reference sampling needs an odd, positive sample count, got {0}")]
    EvenSampleCount(usize),
    #[error("step size must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("at least one correction step is required")]
    NoSteps,
    #[error("sentence {0} is not in the corpus")]
    UnknownSentence(String),
    #[error("bias reports cover different tokens ({before} vs {after})")]
    MismatchedReports { before: usize, after: usize },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

/// Anything that yields the latent perception of saliency `s` in context `x`,
/// averaged over raters and sentences.
pub trait PerceptionModel: Sync {
    fn latent_averaged(&self, s: f64, x: &TokenContext) -> f64;
}

impl PerceptionModel for FittedPerceptionModel {
    fn latent_averaged(&self, s: f64, x: &TokenContext) -> f64 {
        self.predict_latent_averaged(s, x)
    }
}

/// Random effects have mean zero, so the average is the fixed part.
impl PerceptionModel for GroundTruthModel {
    fn latent_averaged(&self, s: f64, x: &TokenContext) -> f64 {
        let mut ctx = x.clone();
        ctx.saliency = s;
        self.latent(&ctx)
    }
}

/// A model given by a closure, for tests and what-if analyses.
pub struct FnModel<F>(pub F);

impl<F: Fn(f64, &TokenContext) -> f64 + Sync> PerceptionModel for FnModel<F> {
    fn latent_averaged(&self, s: f64, x: &TokenContext) -> f64 {
        (self.0)(s, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceContext {
    pub context: TokenContext,
    pub sample_count: usize,
    pub seed: u64,
    pub probe_saliency: f64,
    /// Averaged latent prediction of the chosen candidate at the probe.
    pub latent: f64,
    /// Index of the chosen candidate in sampling order.
    pub candidate: usize,
}

/// `n` candidates drawn uniformly from the covariate space, in sampling order.
pub fn sample_candidates(space: &CovariateSpace, n: usize, seed: u64) -> Vec<TokenContext> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut ctx = blank_context();
            for cov in NumericCovariate::ALL {
                if let Some((lo, hi)) = space.range(cov) {
                    let v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                    cov.set(&mut ctx, v);
                }
            }
            if !space.capitalization.is_empty() {
                ctx.capitalization = space.capitalization[rng.random_range(0..space.capitalization.len())];
            }
            if !space.dependency_relation.is_empty() {
                let i = rng.random_range(0..space.dependency_relation.len());
                ctx.dependency_relation = space.dependency_relation[i].clone();
            }
            ctx
        })
        .collect()
}

/// The sampled context whose averaged prediction at `probe` is the median;
/// among equal medians the lowest candidate index wins.
pub fn select_reference_context(
    model: &dyn PerceptionModel,
    space: &CovariateSpace,
    n: usize,
    probe: f64,
    seed: u64,
) -> Result<ReferenceContext, CorrectionError> {
    if n.is_multiple_of(2) {
        return Err(CorrectionError::EvenSampleCount(n));
    }
    let candidates = sample_candidates(space, n, seed);
    let values: Vec<f64> = candidates.par_iter().map(|c| model.latent_averaged(probe, c)).collect();
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[n / 2];
    let idx = values.iter().position(|v| v.total_cmp(&median).is_eq()).expect("median is attained");
    let mut context = candidates[idx].clone();
    context.saliency = probe;
    Ok(ReferenceContext {
        context,
        sample_count: n,
        seed,
        probe_saliency: probe,
        latent: median,
        candidate: idx,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasScore {
    pub p: f64,
    pub p_ref: f64,
    pub b: f64,
}

/// Perceived minus reference perception of the same saliency.
pub fn bias_score(model: &dyn PerceptionModel, s: f64, x: &TokenContext, x_ref: &TokenContext) -> BiasScore {
    let p = model.latent_averaged(s, x);
    let p_ref = model.latent_averaged(s, x_ref);
    BiasScore { p, p_ref, b: p - p_ref }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBias {
    pub token: String,
    pub saliency: f64,
    pub p: f64,
    pub p_ref: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceBias {
    pub sentence_id: String,
    pub tokens: Vec<TokenBias>,
}

impl SentenceBias {
    pub fn total_abs(&self) -> f64 {
        self.tokens.iter().map(|t| t.b.abs()).sum()
    }
}

/// Bias of every token of `sentence` shown with `map`.
pub fn sentence_bias(
    model: &dyn PerceptionModel,
    sentence: &Sentence,
    map: &SaliencyMap,
    x_ref: &ReferenceContext,
    display_index: usize,
    lexicons: &Lexicons,
) -> Result<SentenceBias, CorrectionError> {
    let contexts = features::extract(sentence, map, display_index, lexicons)?;
    Ok(SentenceBias {
        sentence_id: sentence.id.clone(),
        tokens: sentence
            .tokens
            .iter()
            .zip(&contexts)
            .map(|(tok, ctx)| {
                let s = bias_score(model, ctx.saliency, ctx, &x_ref.context);
                TokenBias {
                    token: tok.surface.clone(),
                    saliency: ctx.saliency,
                    p: s.p,
                    p_ref: s.p_ref,
                    b: s.b,
                }
            })
            .collect(),
    })
}

/// Share of the initial absolute bias removed, in percent; 0 when there was
/// no bias to begin with.
pub fn bias_removed_percent(before: &SentenceBias, after: &SentenceBias) -> Result<f64, CorrectionError> {
    let same = before.tokens.len() == after.tokens.len()
        && before.tokens.iter().zip(&after.tokens).all(|(a, b)| a.token == b.token);
    if !same {
        return Err(CorrectionError::MismatchedReports {
            before: before.tokens.len(),
            after: after.tokens.len(),
        });
    }
    let b0 = before.total_abs();
    if b0 == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * (1.0 - after.total_abs() / b0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionParams {
    pub alpha: f64,
    pub n_steps: usize,
}

impl Default for CorrectionParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            n_steps: DEFAULT_STEPS,
        }
    }
}

impl CorrectionParams {
    /// `α (1 - (k-1)/n)²` for the 1-based step `k`.
    pub fn step_size(&self, k: usize) -> f64 {
        let decay = 1.0 - (k - 1) as f64 / self.n_steps as f64;
        self.alpha * decay * decay
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub sentence_id: String,
    pub before: SentenceBias,
    pub after: SentenceBias,
    pub total_before: f64,
    pub total_after: f64,
    pub removed_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub corrected: SaliencyMap,
    pub report: BiasReport,
}

/// One inner update of the correction loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateEvent {
    pub step: usize,
    pub token: usize,
    pub step_size: f64,
    pub p: f64,
    pub p_ref: f64,
    pub b: f64,
    pub before: f64,
    pub after: f64,
}

pub fn correct_sentence(
    model: &dyn PerceptionModel,
    sentence: &Sentence,
    s_orig: &SaliencyMap,
    x_ref: &ReferenceContext,
    params: CorrectionParams,
    display_index: usize,
    lexicons: &Lexicons,
) -> Result<Correction, CorrectionError> {
    correct_sentence_observed(model, sentence, s_orig, x_ref, params, display_index, lexicons, |_| {})
}

/// [`correct_sentence`] reporting every inner update to `observe`.
#[allow(clippy::too_many_arguments)]
pub fn correct_sentence_observed(
    model: &dyn PerceptionModel,
    sentence: &Sentence,
    s_orig: &SaliencyMap,
    x_ref: &ReferenceContext,
    params: CorrectionParams,
    display_index: usize,
    lexicons: &Lexicons,
    mut observe: impl FnMut(&UpdateEvent),
) -> Result<Correction, CorrectionError> {
    if !(params.alpha.is_finite() && params.alpha > 0.0) {
        return Err(CorrectionError::InvalidAlpha(params.alpha));
    }
    if params.n_steps == 0 {
        return Err(CorrectionError::NoSteps);
    }
    let before = sentence_bias(model, sentence, s_orig, x_ref, display_index, lexicons)?;
    let mut contexts = features::extract(sentence, s_orig, display_index, lexicons)?;
    let p_ref: Vec<f64> = before.tokens.iter().map(|t| t.p_ref).collect();
    let mut s = s_orig.scores.clone();
    for k in 1..=params.n_steps {
        let step_size = params.step_size(k);
        for i in 0..s.len() {
            // The rank covariate of token i depends on every current score.
            features::refresh_saliency(&mut contexts, &s);
            let p = model.latent_averaged(s[i], &contexts[i]);
            let b = p - p_ref[i];
            let sign = if b > 0.0 {
                1.0
            } else if b < 0.0 {
                -1.0
            } else {
                0.0
            };
            let old = s[i];
            if sign != 0.0 {
                s[i] = (old - step_size * sign).clamp(0.0, 1.0);
            }
            observe(&UpdateEvent {
                step: k,
                token: i,
                step_size,
                p,
                p_ref: p_ref[i],
                b,
                before: old,
                after: s[i],
            });
        }
    }
    features::refresh_saliency(&mut contexts, &s);
    let after = SentenceBias {
        sentence_id: sentence.id.clone(),
        tokens: sentence
            .tokens
            .iter()
            .enumerate()
            .map(|(i, tok)| {
                let p = model.latent_averaged(s[i], &contexts[i]);
                TokenBias {
                    token: tok.surface.clone(),
                    saliency: s[i],
                    p,
                    p_ref: p_ref[i],
                    b: p - p_ref[i],
                }
            })
            .collect(),
    };
    let removed_percent = bias_removed_percent(&before, &after)?;
    Ok(Correction {
        corrected: SaliencyMap::new(sentence.id.clone(), s),
        report: BiasReport {
            sentence_id: sentence.id.clone(),
            total_before: before.total_abs(),
            total_after: after.total_abs(),
            before,
            after,
            removed_percent,
        },
    })
}

/// Input line of the JSON correction interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRequest {
    pub sentence: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResponse {
    pub sentence: String,
    pub scores_corrected: Vec<f64>,
    pub bias_before: Vec<f64>,
    pub bias_after: Vec<f64>,
    pub removed_percent: f64,
}

impl From<&Correction> for CorrectionResponse {
    fn from(c: &Correction) -> Self {
        Self {
            sentence: c.report.sentence_id.clone(),
            scores_corrected: c.corrected.scores.clone(),
            bias_before: c.report.before.tokens.iter().map(|t| t.b).collect(),
            bias_after: c.report.after.tokens.iter().map(|t| t.b).collect(),
            removed_percent: c.report.removed_percent,
        }
    }
}

/// Replaces the scores of every corrected-condition sentence item of `plan`
/// by their corrected version, leaving all other items untouched.
pub fn correct_plan(
    plan: &mut StudyPlan,
    corpus: &Corpus,
    model: &dyn PerceptionModel,
    x_ref: &ReferenceContext,
    params: CorrectionParams,
) -> Result<(), CorrectionError> {
    plan.participants.par_iter_mut().try_for_each(|p| {
        for item in &mut p.items {
            let ItemKind::Sentence { sentence_id } = &item.kind else { continue };
            if item.condition != VisualizationCondition::Corrected {
                continue;
            }
            let sentence = corpus
                .sentence(sentence_id)
                .map_err(|_| CorrectionError::UnknownSentence(sentence_id.clone()))?;
            let map = SaliencyMap::new(sentence_id.clone(), item.scores.clone());
            let out = correct_sentence(model, sentence, &map, x_ref, params, item.display_index as usize, &corpus.lexicons)?;
            item.scores = out.corrected.scores;
        }
        Ok(())
    })
}
