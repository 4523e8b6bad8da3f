//! Study plans: per-participant item sequences with trap items and
//! visualization-condition schedules.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{SaliencyMap, Sentence};
use crate::records::VisualizationCondition;

pub const TRAPS_PER_PARTICIPANT: usize = 3;

/// Every ordering of the three visualization conditions.
pub const CONDITION_ORDERINGS: [[VisualizationCondition; 3]; 6] = {
    use VisualizationCondition::{Bars as B, Corrected as C, Saliency as S};
    [[S, C, B], [S, B, C], [C, S, B], [C, B, S], [B, S, C], [B, C, S]]
};

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("within-subject plans need a sentence count divisible by 3, got {0}")]
    IndivisibleSentences(usize),
    #[error("{0} sentences leave no room for {TRAPS_PER_PARTICIPANT} traps in the last two thirds")]
    TooFewSentences(usize),
    #[error("a study needs at least one participant")]
    NoParticipants,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyMode {
    SingleCondition(VisualizationCondition),
    WithinSubject,
}

impl StudyMode {
    /// Parses `single`, `single:<condition>` or `within`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "within" | "within-subject" => Some(Self::WithinSubject),
            "single" | "single-condition" => Some(Self::SingleCondition(VisualizationCondition::Saliency)),
            _ => s
                .strip_prefix("single:")
                .and_then(VisualizationCondition::parse)
                .map(Self::SingleCondition),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ItemKind {
    Sentence { sentence_id: String },
    /// An attention check whose target token asks for a specific rating.
    Trap { tokens: Vec<String>, expected_rating: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanItem {
    pub kind: ItemKind,
    /// 0-based index of the token to be rated.
    pub target_token: usize,
    pub scores: Vec<f64>,
    pub condition: VisualizationCondition,
    /// 1-based position in the participant's item sequence.
    pub display_index: u32,
}

impl PlanItem {
    pub fn is_trap(&self) -> bool {
        matches!(self.kind, ItemKind::Trap { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantPlan {
    pub slot: usize,
    /// Indices into the plan's sentence list, in display order.
    pub sentence_order: Vec<usize>,
    /// 1-based positions among the real sentences before which a trap is shown.
    pub trap_positions: Vec<usize>,
    /// Index into [`CONDITION_ORDERINGS`] in within-subject mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordering: Option<usize>,
    pub items: Vec<PlanItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPlan {
    pub seed: u64,
    pub mode: StudyMode,
    pub sentence_ids: Vec<String>,
    pub participants: Vec<ParticipantPlan>,
}

/// Simulated worker id of a plan slot.
pub fn slot_worker_id(slot: usize) -> String {
    format!("w{slot:03}")
}

/// Independent, reproducible random stream for `(seed, parts...)`.
pub fn stream_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    // FNV-1a over the seed and the separated parts.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    seed.to_le_bytes().into_iter().for_each(&mut eat);
    for p in parts {
        eat(0xff);
        p.bytes().for_each(&mut eat);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// I.i.d. uniform scores for one participant's view of a sentence.
pub fn random_saliencies(sentence: &Sentence, participant: usize, seed: u64) -> SaliencyMap {
    let mut rng = stream_rng(seed, &["saliency", &participant.to_string(), &sentence.id]);
    SaliencyMap::new(
        sentence.id.clone(),
        (0..sentence.len()).map(|_| rng.random::<f64>()).collect(),
    )
}

fn trap_item(rng: &mut ChaCha8Rng, condition: VisualizationCondition, display_index: u32) -> PlanItem {
    let expected: u8 = rng.random_range(1..=7);
    let tokens: Vec<String> = ["Please", "rate", "this", "word", "as"]
        .iter()
        .map(|s| s.to_string())
        .chain(std::iter::once(expected.to_string()))
        .collect();
    let scores = (0..tokens.len()).map(|_| rng.random::<f64>()).collect();
    PlanItem {
        target_token: tokens.len() - 1,
        kind: ItemKind::Trap {
            tokens,
            expected_rating: expected,
        },
        scores,
        condition,
        display_index,
    }
}

pub fn make_study_plan(
    sentences: &[Sentence],
    participants: usize,
    mode: StudyMode,
    seed: u64,
) -> Result<StudyPlan, PlanError> {
    let n = sentences.len();
    if participants == 0 {
        return Err(PlanError::NoParticipants);
    }
    if mode == StudyMode::WithinSubject && !n.is_multiple_of(3) {
        return Err(PlanError::IndivisibleSentences(n));
    }
    let first_allowed = n / 3 + 1;
    if n < first_allowed + TRAPS_PER_PARTICIPANT - 1 {
        return Err(PlanError::TooFewSentences(n));
    }
    let slots: Vec<ParticipantPlan> = (0..participants)
        .map(|slot| {
            let slot_s = slot.to_string();
            let mut order: Vec<usize> = (0..n).collect();
            if let StudyMode::SingleCondition(_) = mode {
                order.shuffle(&mut stream_rng(seed, &["order", &slot_s]));
            }
            let mut trap_rng = stream_rng(seed, &["traps", &slot_s]);
            let candidates: Vec<usize> = (first_allowed..=n).collect();
            let traps: BTreeSet<usize> = candidates
                .choose_multiple(&mut trap_rng, TRAPS_PER_PARTICIPANT)
                .copied()
                .collect();
            let ordering = (mode == StudyMode::WithinSubject).then_some(slot % CONDITION_ORDERINGS.len());
            let condition_at = |pos: usize| match (mode, ordering) {
                (StudyMode::SingleCondition(c), _) => c,
                (StudyMode::WithinSubject, Some(o)) => CONDITION_ORDERINGS[o][pos / (n / 3)],
                _ => unreachable!(),
            };
            let mut items = Vec::with_capacity(n + TRAPS_PER_PARTICIPANT);
            for (pos, &si) in order.iter().enumerate() {
                let condition = condition_at(pos);
                if traps.contains(&(pos + 1)) {
                    let display = items.len() as u32 + 1;
                    items.push(trap_item(&mut trap_rng, condition, display));
                }
                let sentence = &sentences[si];
                let map = random_saliencies(sentence, slot, seed);
                let mut target_rng = stream_rng(seed, &["target", &slot_s, &sentence.id]);
                items.push(PlanItem {
                    kind: ItemKind::Sentence {
                        sentence_id: sentence.id.clone(),
                    },
                    target_token: target_rng.random_range(0..sentence.len()),
                    scores: map.scores,
                    condition,
                    display_index: items.len() as u32 + 1,
                });
            }
            ParticipantPlan {
                slot,
                sentence_order: order,
                trap_positions: traps.into_iter().collect(),
                ordering,
                items,
            }
        })
        .collect();
    Ok(StudyPlan {
        seed,
        mode,
        sentence_ids: sentences.iter().map(|s| s.id.clone()).collect(),
        participants: slots,
    })
}
