//! Ordinal (cumulative-logit) generalized additive mixed model.

pub mod design;
pub mod fit;
pub mod fitted;
pub mod ordinal;
pub mod select;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{NumericCovariate, TokenContext};
use crate::records::{RecordError, VisualizationCondition};
use crate::spline::{KnotPlacement, SplineError};

pub use design::{CovariateSpace, Design, PredictInput};
pub use fit::{fit, fit_with_lambdas, FitOptions, FitReport};
pub use fitted::{FittedPerceptionModel, PartialEffect, TermEdf};
pub use select::{select_smoothing, SelectOptions, Selection};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no rating records")]
    EmptyData,
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("gradient is not finite at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("penalized Hessian is singular")]
    SingularHessian,
    #[error("unknown term '{name}'; available terms: {available}")]
    UnknownTerm { name: String, available: String },
    #[error("term '{0}' is not a univariate smooth")]
    NotASmooth(String),
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// How a penalty's smoothing parameter is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    Fixed(f64),
    Select,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoricalCovariate {
    Capitalization,
    DependencyRelation,
    Condition,
}

impl CategoricalCovariate {
    pub fn name(self) -> &'static str {
        match self {
            Self::Capitalization => "capitalization",
            Self::DependencyRelation => "dependency_relation",
            Self::Condition => "condition",
        }
    }

    pub fn level(self, ctx: &TokenContext, condition: Option<VisualizationCondition>) -> Option<&str> {
        match self {
            Self::Capitalization => Some(ctx.capitalization.as_str()),
            Self::DependencyRelation => Some(ctx.dependency_relation.as_str()),
            Self::Condition => condition.map(|c| c.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Worker,
    Sentence,
}

impl Grouping {
    pub fn name(self) -> &'static str {
        match self {
            Self::Worker => "worker_id",
            Self::Sentence => "sentence_id",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothTerm {
    pub covariate: NumericCovariate,
    pub num_basis: usize,
    pub knots: KnotPlacement,
    /// Basis range; the observed training range when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<(f64, f64)>,
    pub smoothing: Smoothing,
    /// Restricts the smooth to records shown in one condition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by: Option<VisualizationCondition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorTerm {
    pub a: NumericCovariate,
    pub b: NumericCovariate,
    pub num_basis: (usize, usize),
    pub smoothing: [Smoothing; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Term {
    Smooth(SmoothTerm),
    Factor {
        covariate: CategoricalCovariate,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference: Option<String>,
    },
    Tensor(TensorTerm),
    RandomIntercept {
        group: Grouping,
        smoothing: Smoothing,
    },
    /// Per-level slope on saliency.
    RandomSlope {
        group: Grouping,
        smoothing: Smoothing,
    },
}

pub const DEFAULT_NUM_BASIS: usize = 10;
pub const SALIENCY_NUM_BASIS: usize = 20;
pub const TENSOR_NUM_BASIS: usize = 5;

impl Term {
    /// Smooth with default basis size and knot placement for `covariate`.
    pub fn smooth(covariate: NumericCovariate) -> Self {
        Term::Smooth(SmoothTerm {
            covariate,
            num_basis: if covariate == NumericCovariate::Saliency {
                SALIENCY_NUM_BASIS
            } else {
                DEFAULT_NUM_BASIS
            },
            knots: if covariate.is_skewed() {
                KnotPlacement::Quantile
            } else {
                KnotPlacement::UniformOverRange
            },
            range: None,
            smoothing: Smoothing::Select,
            by: None,
        })
    }

    pub fn smooth_k(covariate: NumericCovariate, num_basis: usize, smoothing: Smoothing) -> Self {
        let mut t = Self::smooth(covariate);
        if let Term::Smooth(s) = &mut t {
            s.num_basis = num_basis;
            s.smoothing = smoothing;
        }
        t
    }

    pub fn tensor(a: NumericCovariate, b: NumericCovariate, smoothing: Smoothing) -> Self {
        Term::Tensor(TensorTerm {
            a,
            b,
            num_basis: (TENSOR_NUM_BASIS, TENSOR_NUM_BASIS),
            smoothing: [smoothing, smoothing],
        })
    }

    pub fn factor(covariate: CategoricalCovariate) -> Self {
        Term::Factor {
            covariate,
            reference: None,
        }
    }

    pub fn random_intercept(group: Grouping, smoothing: Smoothing) -> Self {
        Term::RandomIntercept { group, smoothing }
    }

    pub fn random_slope(group: Grouping, smoothing: Smoothing) -> Self {
        Term::RandomSlope { group, smoothing }
    }

    /// Display label, e.g. `s(saliency)` or `ti(saliency,word_length)`.
    pub fn label(&self) -> String {
        match self {
            Term::Smooth(s) => match s.by {
                Some(c) => format!("s({}):{}", s.covariate.name(), c.as_str()),
                None => format!("s({})", s.covariate.name()),
            },
            Term::Factor { covariate, .. } => covariate.name().to_string(),
            Term::Tensor(t) => format!("ti({},{})", t.a.name(), t.b.name()),
            Term::RandomIntercept { group, .. } => format!("s({},bs=re)", group.name()),
            Term::RandomSlope { group, .. } => format!("s(saliency,{},bs=re)", group.name()),
        }
    }
}

fn default_categories() -> usize {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub terms: Vec<Term>,
    #[serde(default = "default_categories")]
    pub num_categories: usize,
    #[serde(default)]
    pub double_penalty: bool,
}

impl ModelSpec {
    pub fn new(terms: Vec<Term>) -> Self {
        Self {
            terms,
            num_categories: 7,
            double_penalty: true,
        }
    }

    /// Smooths of every numeric covariate, both categorical factors, random
    /// intercepts and saliency slopes per worker and sentence, and optionally
    /// tensor interactions of every pair of numeric covariates.
    pub fn full(with_interactions: bool) -> Self {
        let mut terms: Vec<Term> = NumericCovariate::ALL.into_iter().map(Term::smooth).collect();
        terms.push(Term::factor(CategoricalCovariate::Capitalization));
        terms.push(Term::factor(CategoricalCovariate::DependencyRelation));
        if with_interactions {
            let all = NumericCovariate::ALL;
            for i in 0..all.len() {
                for j in i + 1..all.len() {
                    terms.push(Term::tensor(all[i], all[j], Smoothing::Select));
                }
            }
        }
        for g in [Grouping::Worker, Grouping::Sentence] {
            terms.push(Term::random_intercept(g, Smoothing::Select));
            terms.push(Term::random_slope(g, Smoothing::Select));
        }
        Self::new(terms)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_categories < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "need at least 2 rating categories, got {}",
                self.num_categories
            )));
        }
        let mut labels = std::collections::HashSet::new();
        for t in &self.terms {
            if !labels.insert(t.label()) {
                return Err(ModelError::InvalidSpec(format!("term {} appears twice", t.label())));
            }
            let check = |s: &Smoothing| match s {
                Smoothing::Fixed(l) if !(l.is_finite() && *l >= 0.0) => Err(ModelError::InvalidSpec(format!(
                    "smoothing parameter {l} of {} must be finite and non-negative",
                    t.label()
                ))),
                _ => Ok(()),
            };
            match t {
                Term::Smooth(s) => {
                    check(&s.smoothing)?;
                    if let Some((lo, hi)) = s.range {
                        if !(lo < hi) {
                            return Err(ModelError::InvalidSpec(format!("empty range for {}", t.label())));
                        }
                    }
                }
                Term::Tensor(tt) => {
                    tt.smoothing.iter().try_for_each(check)?;
                    if tt.a == tt.b {
                        return Err(ModelError::InvalidSpec(format!("{} pairs a covariate with itself", t.label())));
                    }
                }
                Term::RandomIntercept { smoothing, .. } | Term::RandomSlope { smoothing, .. } => check(smoothing)?,
                Term::Factor { .. } => {}
            }
        }
        Ok(())
    }

    pub fn has_selection(&self) -> bool {
        self.terms.iter().any(|t| match t {
            Term::Smooth(s) => s.smoothing == Smoothing::Select,
            Term::Tensor(tt) => tt.smoothing.contains(&Smoothing::Select),
            Term::RandomIntercept { smoothing, .. } | Term::RandomSlope { smoothing, .. } => {
                *smoothing == Smoothing::Select
            }
            Term::Factor { .. } => false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_json_round_trip() {
        let spec = ModelSpec::full(true);
        assert_eq!(spec.terms.len(), 8 + 2 + 28 + 4);
        let json = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        spec.validate().unwrap();
    }

    #[test]
    fn duplicate_smooth_is_rejected() {
        let spec = ModelSpec::new(vec![
            Term::smooth(NumericCovariate::Saliency),
            Term::smooth(NumericCovariate::Saliency),
        ]);
        assert!(matches!(spec.validate(), Err(ModelError::InvalidSpec(_))));
        let mut one_category = ModelSpec::new(vec![]);
        one_category.num_categories = 1;
        assert!(one_category.validate().is_err());
    }
}
