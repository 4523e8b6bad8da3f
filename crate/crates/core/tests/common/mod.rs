#![allow(dead_code)]

use perception_core::corpus::Corpus;
use perception_core::plan::{make_study_plan, StudyMode};
use perception_core::records::{RatingRecord, VisualizationCondition};
use perception_core::simulate::{simulate_ratings, GroundTruthModel, SimulationConfig};

/// Ratings of `participants` simulated raters over the first `sentences`
/// toy sentences.
pub fn simulate(gt: &GroundTruthModel, sentences: usize, participants: usize, seed: u64) -> Vec<RatingRecord> {
    let corpus = Corpus::toy().take(sentences);
    let plan = make_study_plan(
        &corpus.sentences,
        participants,
        StudyMode::SingleCondition(VisualizationCondition::Saliency),
        seed,
    )
    .unwrap();
    simulate_ratings(gt, &plan, &corpus, &SimulationConfig::new(seed))
        .unwrap()
        .records
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}
