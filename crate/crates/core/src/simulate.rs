//! Synthetic raters drawn from a known ground-truth perception model.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError};
use crate::features::{self, FeatureError, NumericCovariate, SaliencyMap, TokenContext};
use crate::model::ordinal::sigmoid;
use crate::plan::{slot_worker_id, stream_rng, ItemKind, StudyPlan};
use crate::records::RatingRecord;

pub const DEFAULT_CUT_POINTS: [f64; 6] = [-1.0, 1.31, 3.29, 5.15, 7.1, 9.22];

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("cut points must be strictly increasing")]
    CutPoints,
    #[error("standard deviations must be non-negative")]
    NegativeSd,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Closed-form contribution of one covariate to the latent scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum LatentFunction {
    Zero,
    Linear { slope: f64 },
    /// `amplitude * sin(2π * frequency * x + phase)`
    Sine { amplitude: f64, frequency: f64, phase: f64 },
    /// `curvature * (x - center)^2`
    Parabola { curvature: f64, center: f64 },
}

impl LatentFunction {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::Linear { slope } => slope * x,
            Self::Sine {
                amplitude,
                frequency,
                phase,
            } => amplitude * (std::f64::consts::TAU * frequency * x + phase).sin(),
            Self::Parabola { curvature, center } => curvature * (x - center).powi(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthModel {
    pub intercept: f64,
    pub effects: BTreeMap<NumericCovariate, LatentFunction>,
    pub cut_points: Vec<f64>,
    pub worker_intercept_sd: f64,
    pub worker_slope_sd: f64,
    pub sentence_intercept_sd: f64,
}

impl Default for GroundTruthModel {
    fn default() -> Self {
        Self {
            intercept: 3.0,
            effects: BTreeMap::new(),
            cut_points: DEFAULT_CUT_POINTS.to_vec(),
            worker_intercept_sd: 0.0,
            worker_slope_sd: 0.0,
            sentence_intercept_sd: 0.0,
        }
    }
}

impl GroundTruthModel {
    /// Three nonlinear effects (saliency, word length, display index) plus
    /// moderate random effects.
    pub fn nonlinear() -> Self {
        let mut effects = BTreeMap::new();
        effects.insert(
            NumericCovariate::Saliency,
            LatentFunction::Parabola {
                curvature: -4.0,
                center: 1.0,
            },
        );
        effects.insert(
            NumericCovariate::WordLength,
            LatentFunction::Sine {
                amplitude: 1.0,
                frequency: 1.0 / 12.0,
                phase: 0.0,
            },
        );
        effects.insert(
            NumericCovariate::DisplayIndex,
            LatentFunction::Parabola {
                curvature: -0.001,
                center: 30.0,
            },
        );
        Self {
            intercept: 5.0,
            effects,
            worker_intercept_sd: 0.5,
            worker_slope_sd: 0.3,
            sentence_intercept_sd: 0.3,
            ..Self::default()
        }
    }

    /// [`Self::nonlinear`] without random effects.
    pub fn oracle() -> Self {
        Self {
            worker_intercept_sd: 0.0,
            worker_slope_sd: 0.0,
            sentence_intercept_sd: 0.0,
            ..Self::nonlinear()
        }
    }

    /// Perception rises with saliency and, independently, with word length.
    pub fn word_length_inflation() -> Self {
        Self {
            intercept: 1.0,
            ..Self::default()
        }
        .with_effect(NumericCovariate::Saliency, LatentFunction::Linear { slope: 4.0 })
        .with_effect(NumericCovariate::WordLength, LatentFunction::Linear { slope: 0.3 })
    }

    pub const PRESETS: [&'static str; 4] = ["nonlinear", "oracle", "word-length", "flat"];

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "nonlinear" => Some(Self::nonlinear()),
            "oracle" => Some(Self::oracle()),
            "word-length" => Some(Self::word_length_inflation()),
            "flat" => Some(Self::default()),
            _ => None,
        }
    }

    pub fn with_effect(mut self, cov: NumericCovariate, f: LatentFunction) -> Self {
        self.effects.insert(cov, f);
        self
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        if self.cut_points.windows(2).any(|w| !(w[0] < w[1])) || self.cut_points.is_empty() {
            return Err(SimulationError::CutPoints);
        }
        if [self.worker_intercept_sd, self.worker_slope_sd, self.sentence_intercept_sd]
            .iter()
            .any(|s| !(*s >= 0.0))
        {
            return Err(SimulationError::NegativeSd);
        }
        Ok(())
    }

    pub fn num_categories(&self) -> usize {
        self.cut_points.len() + 1
    }

    pub fn effect(&self, cov: NumericCovariate, x: f64) -> f64 {
        self.effects.get(&cov).map_or(0.0, |f| f.eval(x))
    }

    /// Fixed part of η (random effects excluded).
    pub fn latent(&self, ctx: &TokenContext) -> f64 {
        self.intercept + self.effects.iter().map(|(c, f)| f.eval(c.get(ctx))).sum::<f64>()
    }

    /// Draws a rating for latent value `eta` from uniform `u`.
    pub fn rating_for(&self, eta: f64, u: f64) -> u8 {
        for (j, theta) in self.cut_points.iter().enumerate() {
            if u < sigmoid(theta - eta) {
                return (j + 1) as u8;
            }
        }
        self.num_categories() as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub seed: u64,
    pub completion_time_median_s: f64,
    pub completion_time_log_sd: f64,
    /// Plan slots answering uniformly at random, traps included.
    pub clickers: BTreeSet<usize>,
}

impl SimulationConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            completion_time_median_s: 6.0,
            completion_time_log_sd: 0.8,
            clickers: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapOutcome {
    pub worker_id: String,
    pub display_index: u32,
    pub expected: u8,
    pub given: u8,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub records: Vec<RatingRecord>,
    pub traps: Vec<TrapOutcome>,
}

impl Simulation {
    /// Workers who failed every trap they saw.
    pub fn trap_failed_workers(&self) -> BTreeSet<String> {
        failed_all_traps(&self.traps)
    }
}

pub fn failed_all_traps(traps: &[TrapOutcome]) -> BTreeSet<String> {
    let mut seen: BTreeMap<&str, bool> = BTreeMap::new();
    for t in traps {
        let any_pass = seen.entry(&t.worker_id).or_insert(false);
        *any_pass |= t.passed;
    }
    seen.into_iter().filter(|(_, p)| !p).map(|(w, _)| w.to_string()).collect()
}

/// Simulates every participant of `plan`; participants are independent
/// streams, so the result does not depend on scheduling.
pub fn simulate_ratings(
    gt: &GroundTruthModel,
    plan: &StudyPlan,
    corpus: &Corpus,
    config: &SimulationConfig,
) -> Result<Simulation, SimulationError> {
    gt.validate()?;
    let sentence_effects: BTreeMap<&str, f64> = plan
        .sentence_ids
        .iter()
        .map(|id| {
            let mut rng = stream_rng(config.seed, &["sentence-effect", id]);
            (id.as_str(), normal(gt.sentence_intercept_sd).sample(&mut rng))
        })
        .collect();
    let time = Normal::new(config.completion_time_median_s.ln(), config.completion_time_log_sd.max(0.0))
        .expect("finite log-normal parameters");

    let per_participant: Vec<Result<Simulation, SimulationError>> = plan
        .participants
        .par_iter()
        .map(|p| {
            let worker = slot_worker_id(p.slot);
            let clicker = config.clickers.contains(&p.slot);
            let mut rng = stream_rng(config.seed, &["worker", &worker]);
            let w_int = normal(gt.worker_intercept_sd).sample(&mut rng);
            let w_slope = normal(gt.worker_slope_sd).sample(&mut rng);
            let mut out = Simulation::default();
            for item in &p.items {
                let display = item.display_index.to_string();
                let mut rng = stream_rng(config.seed, &["rating", &worker, &display]);
                let u: f64 = rng.random();
                let uniform_pick: u8 = rng.random_range(1..=gt.num_categories() as u8);
                let seconds = time.sample(&mut rng).exp();
                match &item.kind {
                    ItemKind::Trap { expected_rating, .. } => {
                        let given = if clicker { uniform_pick } else { *expected_rating };
                        out.traps.push(TrapOutcome {
                            worker_id: worker.clone(),
                            display_index: item.display_index,
                            expected: *expected_rating,
                            given,
                            passed: given == *expected_rating,
                        });
                    }
                    ItemKind::Sentence { sentence_id } => {
                        let sentence = corpus.sentence(sentence_id)?;
                        let map = SaliencyMap::new(sentence_id.clone(), item.scores.clone());
                        let contexts =
                            features::extract(sentence, &map, item.display_index as usize, &corpus.lexicons)?;
                        let ctx = contexts[item.target_token].clone();
                        let eta = gt.latent(&ctx) + w_int + w_slope * ctx.saliency + sentence_effects[sentence_id.as_str()];
                        let rating = if clicker { uniform_pick } else { gt.rating_for(eta, u) };
                        out.records.push(RatingRecord {
                            worker_id: worker.clone(),
                            sentence_id: sentence_id.clone(),
                            token_index: item.target_token,
                            context: ctx,
                            rating,
                            completion_time_s: seconds,
                            comment: None,
                            display_index: item.display_index,
                            condition: item.condition,
                        });
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut sim = Simulation::default();
    for part in per_participant {
        let part = part?;
        sim.records.extend(part.records);
        sim.traps.extend(part.traps);
    }
    Ok(sim)
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("non-negative standard deviation")
}
