//! A fitted model: prediction, partial effects, effective degrees of freedom
//! and JSON persistence.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::design::{CompiledTerm, CovariateSpace, Design, PredictInput};
use super::fit::FitReport;
use super::{ordinal, ModelError};
use crate::features::{Capitalization, NumericCovariate, TokenContext, UNKNOWN_RELATION};
use crate::linalg::{self, matrix_serde};

pub const MODEL_FORMAT: &str = "perception-model/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedPerceptionModel {
    pub format: String,
    pub design: Design,
    pub coefficients: Vec<f64>,
    /// Log increments between consecutive cut points.
    pub cut_increments: Vec<f64>,
    pub cut_points: Vec<f64>,
    /// One smoothing parameter per penalty component.
    pub lambdas: Vec<f64>,
    /// Hessian of the penalized objective over coefficients and increments.
    #[serde(with = "matrix_serde")]
    pub penalized_hessian: DMatrix<f64>,
    pub report: FitReport,
    #[serde(skip)]
    covariance: OnceLock<Option<DMatrix<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialEffect {
    pub term: String,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEdf {
    pub term: String,
    pub size: usize,
    pub edf: f64,
}

/// A context with every numeric field at zero, used to probe single terms.
pub fn blank_context() -> TokenContext {
    TokenContext {
        saliency: 0.0,
        word_length: 0.0,
        word_frequency: 0.0,
        sentence_length: 0.0,
        display_index: 0.0,
        sentiment_polarity: 0.0,
        saliency_rank: 0.0,
        word_position: 0.0,
        capitalization: Capitalization::Lower,
        dependency_relation: UNKNOWN_RELATION.to_string(),
    }
}

impl FittedPerceptionModel {
    pub fn new(design: Design, params: DVector<f64>, lambdas: Vec<f64>, hessian: DMatrix<f64>, report: FitReport) -> Self {
        let p = design.num_coefficients;
        let coefficients = params.as_slice()[..p].to_vec();
        let cut_increments = params.as_slice()[p..].to_vec();
        let cut_points = ordinal::cut_points(&cut_increments);
        Self {
            format: MODEL_FORMAT.to_string(),
            design,
            coefficients,
            cut_increments,
            cut_points,
            lambdas,
            penalized_hessian: hessian,
            report,
            covariance: OnceLock::new(),
        }
    }

    /// A model with the given design and all-zero coefficients.
    pub fn zeroed(design: Design) -> Self {
        let p = design.num_coefficients;
        let q = design.num_categories - 2;
        let lambdas = design.initial_lambdas(1.0);
        let mut h = design.penalty_matrix(&lambdas);
        h = h.resize(p + q, p + q, 0.0);
        for i in 0..p + q {
            h[(i, i)] += 1.0;
        }
        Self::new(design, DVector::zeros(p + q), lambdas, h, FitReport::default())
    }

    pub fn num_categories(&self) -> usize {
        self.design.num_categories
    }

    pub fn covariate_space(&self) -> &CovariateSpace {
        &self.design.space
    }

    pub fn workers(&self) -> &[String] {
        &self.design.workers
    }

    pub fn sentences(&self) -> &[String] {
        &self.design.sentences
    }

    pub fn term_labels(&self) -> Vec<String> {
        self.design.labels()
    }

    fn available(&self) -> String {
        self.design.labels().join(", ")
    }

    fn block(&self, label: &str) -> Result<usize, ModelError> {
        self.design.block_index(label).ok_or_else(|| ModelError::UnknownTerm {
            name: label.to_string(),
            available: self.available(),
        })
    }

    /// η for a fully specified input.
    pub fn predict(&self, input: &PredictInput<'_>) -> f64 {
        self.design
            .row(input)
            .iter()
            .map(|&(j, v)| v * self.coefficients[j])
            .sum()
    }

    /// η at saliency `s` in context `x` for worker `w` and sentence `v`
    /// (`None` leaves that random effect out).
    pub fn predict_latent(&self, s: f64, x: &TokenContext, w: Option<&str>, v: Option<&str>) -> f64 {
        let mut ctx = x.clone();
        ctx.saliency = s;
        self.predict(&PredictInput {
            ctx: &ctx,
            condition: None,
            worker: w,
            sentence: v,
        })
    }

    /// η averaged over every training worker and sentence. Random effects
    /// enter linearly, so this equals prediction with their mean coefficients.
    pub fn predict_latent_averaged(&self, s: f64, x: &TokenContext) -> f64 {
        let mut ctx = x.clone();
        ctx.saliency = s;
        self.predict_averaged(&PredictInput::new(&ctx))
    }

    /// Averaged prediction for an arbitrary input; its worker and sentence are
    /// ignored.
    pub fn predict_averaged(&self, input: &PredictInput<'_>) -> f64 {
        let base = PredictInput {
            worker: None,
            sentence: None,
            ..*input
        };
        let mut eta = self.predict(&base);
        for block in &self.design.blocks {
            let (levels, slope) = match &block.term {
                CompiledTerm::RandomIntercept { levels, .. } => (levels, false),
                CompiledTerm::RandomSlope { levels, .. } => (levels, true),
                _ => continue,
            };
            if levels.is_empty() {
                continue;
            }
            let coefs = &self.coefficients[block.offset..block.offset + block.size];
            let mean = coefs.iter().sum::<f64>() / coefs.len() as f64;
            eta += if slope { mean * input.ctx.saliency } else { mean };
        }
        eta
    }

    pub fn category_probs(&self, s: f64, x: &TokenContext, w: Option<&str>, v: Option<&str>) -> Vec<f64> {
        ordinal::category_probs(self.predict_latent(s, x, w, v), &self.cut_points)
    }

    pub fn probs_for_latent(&self, eta: f64) -> Vec<f64> {
        ordinal::category_probs(eta, &self.cut_points)
    }

    /// Contribution of a single term to η.
    pub fn term_contribution(&self, label: &str, input: &PredictInput<'_>) -> Result<f64, ModelError> {
        let b = self.block(label)?;
        let mut row = Vec::new();
        self.design.push_block_row(b, input, &mut row);
        Ok(row.iter().map(|&(j, v)| v * self.coefficients[j]).sum())
    }

    /// Inverse of the penalized Hessian (coefficients then increments).
    pub fn covariance(&self) -> Result<&DMatrix<f64>, ModelError> {
        self.covariance
            .get_or_init(|| linalg::spd_inverse(&self.penalized_hessian))
            .as_ref()
            .ok_or(ModelError::SingularHessian)
    }

    /// Fitted curve of a univariate smooth with a one-standard-error band.
    pub fn partial_effect(&self, label: &str, grid: &[f64]) -> Result<PartialEffect, ModelError> {
        let b = self.block(label)?;
        let block = &self.design.blocks[b];
        let CompiledTerm::Smooth { covariate, by, .. } = &block.term else {
            return Err(ModelError::NotASmooth(label.to_string()));
        };
        let cov = self.covariance()?;
        let vb = cov.view((block.offset, block.offset), (block.size, block.size));
        let beta = DVector::from_column_slice(&self.coefficients[block.offset..block.offset + block.size]);
        let mut out = PartialEffect {
            term: label.to_string(),
            grid: grid.to_vec(),
            values: Vec::with_capacity(grid.len()),
            se: Vec::with_capacity(grid.len()),
            lower: Vec::with_capacity(grid.len()),
            upper: Vec::with_capacity(grid.len()),
        };
        let mut ctx = blank_context();
        for &x in grid {
            covariate.set(&mut ctx, x);
            let mut row = Vec::new();
            let input = PredictInput {
                ctx: &ctx,
                condition: *by,
                worker: None,
                sentence: None,
            };
            self.design.push_block_row(b, &input, &mut row);
            let mut r = DVector::zeros(block.size);
            for (j, v) in row {
                r[j - block.offset] = v;
            }
            let value = r.dot(&beta);
            let se = r.dot(&(vb * &r)).max(0.0).sqrt();
            out.values.push(value);
            out.se.push(se);
            out.lower.push(value - se);
            out.upper.push(value + se);
        }
        Ok(out)
    }

    /// Evenly spaced grid over a smooth's basis range.
    pub fn smooth_grid(&self, label: &str, n: usize) -> Result<Vec<f64>, ModelError> {
        let b = self.block(label)?;
        let CompiledTerm::Smooth { basis, .. } = &self.design.blocks[b].term else {
            return Err(ModelError::NotASmooth(label.to_string()));
        };
        let (lo, hi) = basis.spec.range;
        Ok((0..n)
            .map(|i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect())
    }

    pub fn smooth_labels(&self) -> Vec<String> {
        self.design
            .blocks
            .iter()
            .filter(|b| matches!(b.term, CompiledTerm::Smooth { .. }))
            .map(|b| b.label.clone())
            .collect()
    }

    pub fn smooth_covariate(&self, label: &str) -> Option<NumericCovariate> {
        let b = self.design.block_index(label)?;
        match &self.design.blocks[b].term {
            CompiledTerm::Smooth { covariate, .. } => Some(*covariate),
            _ => None,
        }
    }

    /// Per-term trace of `H_pen⁻¹ H_unpen`, where `H_unpen = H_pen - S_λ`.
    pub fn edf(&self) -> Result<Vec<TermEdf>, ModelError> {
        let cov = self.covariance()?;
        let mut by_block = vec![0.0; self.design.blocks.len()];
        for (comp, &lambda) in self.design.penalties.iter().zip(&self.lambdas) {
            let off = self.design.blocks[comp.block].offset;
            let k = comp.matrix.nrows();
            // diag(H⁻¹ S) restricted to the block
            for i in 0..k {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += cov[(off + i, off + j)] * comp.matrix[(j, i)];
                }
                by_block[comp.block] += lambda * acc;
            }
        }
        Ok(self
            .design
            .blocks
            .iter()
            .zip(by_block)
            .map(|(b, shrink)| TermEdf {
                term: b.label.clone(),
                size: b.size,
                edf: b.size as f64 - shrink,
            })
            .collect())
    }

    /// Random-effect coefficient of `level` in the block labelled `label`.
    pub fn random_effect(&self, label: &str, level: &str) -> Result<Option<f64>, ModelError> {
        let b = self.block(label)?;
        let block = &self.design.blocks[b];
        Ok(match &block.term {
            CompiledTerm::RandomIntercept { levels, .. } | CompiledTerm::RandomSlope { levels, .. } => {
                levels.get(level).map(|&j| self.coefficients[block.offset + j])
            }
            _ => None,
        })
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self, ModelError> {
        let model: Self = serde_json::from_str(json)?;
        if model.format != MODEL_FORMAT {
            return Err(ModelError::InvalidSpec(format!("unsupported model format '{}'", model.format)));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
