//! Compiled model terms: basis expansions, constraints, level maps and
//! penalties, plus sparse design-row assembly.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{CategoricalCovariate, Grouping, ModelError, ModelSpec, Smoothing, Term};
use crate::features::{Capitalization, NumericCovariate, TokenContext};
use crate::linalg::{self, matrix_serde};
use crate::records::{RatingRecord, VisualizationCondition};
use crate::spline::{
    difference_penalty_matrix, null_space_penalty, sum_to_zero_constraint, tensor_interaction_basis, BasisSpec,
    KnotPlacement, PenaltyMatrix, SplineBasis, TensorSpec, TensorTransform,
};

/// Everything a design row depends on.
#[derive(Debug, Clone, Copy)]
pub struct PredictInput<'a> {
    pub ctx: &'a TokenContext,
    pub condition: Option<VisualizationCondition>,
    pub worker: Option<&'a str>,
    pub sentence: Option<&'a str>,
}

impl<'a> PredictInput<'a> {
    pub fn new(ctx: &'a TokenContext) -> Self {
        Self {
            ctx,
            condition: None,
            worker: None,
            sentence: None,
        }
    }

    pub fn from_record(r: &'a RatingRecord) -> Self {
        Self {
            ctx: &r.context,
            condition: Some(r.condition),
            worker: Some(&r.worker_id),
            sentence: Some(&r.sentence_id),
        }
    }
}

/// Observed covariate ranges and categorical levels of the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpace {
    pub numeric: BTreeMap<NumericCovariate, (f64, f64)>,
    pub capitalization: Vec<Capitalization>,
    pub dependency_relation: Vec<String>,
    pub conditions: Vec<VisualizationCondition>,
}

impl CovariateSpace {
    pub fn from_records(records: &[RatingRecord]) -> Self {
        let mut numeric = BTreeMap::new();
        for cov in NumericCovariate::ALL {
            let (lo, hi) = records.iter().map(|r| cov.get(&r.context)).fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), v| (lo.min(v), hi.max(v)),
            );
            if lo <= hi {
                numeric.insert(cov, (lo, hi));
            }
        }
        let caps: BTreeSet<Capitalization> = records.iter().map(|r| r.context.capitalization).collect();
        let rels: BTreeSet<String> = records.iter().map(|r| r.context.dependency_relation.clone()).collect();
        let conds: BTreeSet<VisualizationCondition> = records.iter().map(|r| r.condition).collect();
        Self {
            numeric,
            capitalization: caps.into_iter().collect(),
            dependency_relation: rels.into_iter().collect(),
            conditions: conds.into_iter().collect(),
        }
    }

    pub fn range(&self, cov: NumericCovariate) -> Option<(f64, f64)> {
        self.numeric.get(&cov).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompiledTerm {
    Intercept,
    Smooth {
        covariate: NumericCovariate,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        by: Option<VisualizationCondition>,
        basis: SplineBasis,
        /// `k x (k-1)` map from constrained to raw B-spline coefficients.
        #[serde(with = "matrix_serde")]
        constraint: DMatrix<f64>,
    },
    Factor {
        covariate: CategoricalCovariate,
        reference: String,
        /// Level -> column within the block.
        columns: BTreeMap<String, usize>,
        /// Levels folded into the reference (e.g. perfectly separated ones).
        dropped: Vec<String>,
    },
    Tensor {
        a: NumericCovariate,
        b: NumericCovariate,
        basis_a: SplineBasis,
        basis_b: SplineBasis,
        transform: TensorTransform,
    },
    RandomIntercept {
        group: Grouping,
        levels: BTreeMap<String, usize>,
    },
    RandomSlope {
        group: Grouping,
        levels: BTreeMap<String, usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub label: String,
    pub offset: usize,
    pub size: usize,
    pub term: CompiledTerm,
}

/// One quadratic penalty `λ βᵀ S β` on a block's coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyComponent {
    pub block: usize,
    pub label: String,
    #[serde(with = "matrix_serde")]
    pub matrix: DMatrix<f64>,
    pub smoothing: Smoothing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub spec: ModelSpec,
    pub blocks: Vec<Block>,
    pub penalties: Vec<PenaltyComponent>,
    pub num_coefficients: usize,
    pub num_categories: usize,
    pub space: CovariateSpace,
    pub workers: Vec<String>,
    pub sentences: Vec<String>,
    /// Diagnostics produced while compiling (dropped levels and similar).
    pub notes: Vec<String>,
}

/// Compressed sparse rows of a design matrix.
#[derive(Debug, Clone, Default)]
pub struct RowMatrix {
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl RowMatrix {
    pub fn from_rows(rows: &[SparseRow]) -> Self {
        let mut m = RowMatrix {
            indptr: vec![0],
            ..Default::default()
        };
        for row in rows {
            for &(j, v) in row {
                m.indices.push(j as u32);
                m.values.push(v);
            }
            m.indptr.push(m.indices.len());
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.indptr.len().saturating_sub(1)
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn dot(&self, i: usize, beta: &[f64]) -> f64 {
        let (idx, val) = self.row(i);
        idx.iter().zip(val).map(|(&j, &v)| v * beta[j as usize]).sum()
    }
}

/// Sparse row: `(column, value)` pairs in increasing column order.
pub type SparseRow = Vec<(usize, f64)>;

fn observed_range(values: &[f64]) -> (f64, f64) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo < hi {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

fn level_map(levels: impl IntoIterator<Item = String>) -> BTreeMap<String, usize> {
    let set: BTreeSet<String> = levels.into_iter().collect();
    set.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
}

fn marginal_basis(cov: NumericCovariate, k: usize, samples: &[f64]) -> Result<SplineBasis, ModelError> {
    let placement = if cov.is_skewed() {
        KnotPlacement::Quantile
    } else {
        KnotPlacement::UniformOverRange
    };
    let spec = BasisSpec::new(cov.name(), k, observed_range(samples)).with_knots(placement);
    Ok(SplineBasis::new(spec, samples)?)
}

impl Design {
    /// Compiles `spec` against the training records.
    pub fn build(records: &[RatingRecord], spec: &ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        if records.is_empty() {
            return Err(ModelError::EmptyData);
        }
        for (i, r) in records.iter().enumerate() {
            r.validate(i, spec.num_categories)?;
        }
        let space = CovariateSpace::from_records(records);
        let workers: Vec<String> = level_map(records.iter().map(|r| r.worker_id.clone())).into_keys().collect();
        let sentences: Vec<String> = level_map(records.iter().map(|r| r.sentence_id.clone())).into_keys().collect();
        let mut notes = Vec::new();
        let mut blocks = vec![Block {
            label: "(Intercept)".into(),
            offset: 0,
            size: 1,
            term: CompiledTerm::Intercept,
        }];
        // Penalties before scaling, keyed by block index.
        let mut raw_penalties: Vec<(usize, String, DMatrix<f64>, Smoothing)> = Vec::new();
        let mut offset = 1;

        for term in &spec.terms {
            let label = term.label();
            let block_index = blocks.len();
            let (compiled, size) = match term {
                Term::Smooth(s) => {
                    let samples: Vec<f64> = records
                        .iter()
                        .filter(|r| s.by.is_none_or(|c| r.condition == c))
                        .map(|r| s.covariate.get(&r.context))
                        .collect();
                    if samples.is_empty() {
                        return Err(ModelError::InvalidSpec(format!("{label} has no training records")));
                    }
                    let range = s.range.unwrap_or_else(|| observed_range(&samples));
                    let bspec = BasisSpec::new(s.covariate.name(), s.num_basis, range).with_knots(s.knots);
                    let basis = SplineBasis::new(bspec, &samples)?;
                    let x = basis.design(&samples)?;
                    let z = sum_to_zero_constraint(&x);
                    let raw = difference_penalty_matrix(s.num_basis, 2)?;
                    let wiggle = linalg::symmetrized(z.transpose() * raw * &z);
                    if spec.double_penalty {
                        let null = null_space_penalty(&PenaltyMatrix::from_matrix(wiggle.clone())?)?;
                        raw_penalties.push((block_index, format!("{label}:wiggle"), wiggle, s.smoothing));
                        raw_penalties.push((block_index, format!("{label}:null"), null.matrix, s.smoothing));
                    } else {
                        raw_penalties.push((block_index, label.clone(), wiggle, s.smoothing));
                    }
                    let size = z.ncols();
                    (
                        CompiledTerm::Smooth {
                            covariate: s.covariate,
                            by: s.by,
                            basis,
                            constraint: z,
                        },
                        size,
                    )
                }
                Term::Factor { covariate, reference } => {
                    let (compiled, size, dropped) = compile_factor(records, *covariate, reference.as_deref(), spec)?;
                    for (level, why) in dropped {
                        notes.push(format!("{label}: level '{level}' dropped ({why})"));
                    }
                    (compiled, size)
                }
                Term::Tensor(t) => {
                    let xa: Vec<f64> = records.iter().map(|r| t.a.get(&r.context)).collect();
                    let xb: Vec<f64> = records.iter().map(|r| t.b.get(&r.context)).collect();
                    let basis_a = marginal_basis(t.a, t.num_basis.0, &xa)?;
                    let basis_b = marginal_basis(t.b, t.num_basis.1, &xb)?;
                    let tspec = TensorSpec::new(basis_a.spec.clone(), basis_b.spec.clone());
                    let tb = tensor_interaction_basis(&basis_a.design(&xa)?, &basis_b.design(&xb)?, &tspec)?;
                    let size = tb.transform.ncols();
                    if size == 0 {
                        notes.push(format!("{label}: no interaction variation, term is empty"));
                    } else {
                        let [pa, pb] = tb.penalties;
                        if spec.double_penalty {
                            let sum = PenaltyMatrix::from_matrix(linalg::symmetrized(&pa.matrix + &pb.matrix))?;
                            let null = null_space_penalty(&sum)?;
                            if null.matrix.iter().any(|v| *v != 0.0) {
                                raw_penalties.push((block_index, format!("{label}:null"), null.matrix, t.smoothing[0]));
                            }
                        }
                        raw_penalties.push((block_index, format!("{label}:{}", t.a.name()), pa.matrix, t.smoothing[0]));
                        raw_penalties.push((block_index, format!("{label}:{}", t.b.name()), pb.matrix, t.smoothing[1]));
                    }
                    (
                        CompiledTerm::Tensor {
                            a: t.a,
                            b: t.b,
                            basis_a,
                            basis_b,
                            transform: tb.transform,
                        },
                        size,
                    )
                }
                Term::RandomIntercept { group, smoothing } | Term::RandomSlope { group, smoothing } => {
                    let names = match group {
                        Grouping::Worker => &workers,
                        Grouping::Sentence => &sentences,
                    };
                    let levels = level_map(names.iter().cloned());
                    let size = levels.len();
                    raw_penalties.push((block_index, label.clone(), DMatrix::identity(size, size), *smoothing));
                    let compiled = if matches!(term, Term::RandomIntercept { .. }) {
                        CompiledTerm::RandomIntercept { group: *group, levels }
                    } else {
                        CompiledTerm::RandomSlope { group: *group, levels }
                    };
                    (compiled, size)
                }
            };
            blocks.push(Block {
                label,
                offset,
                size,
                term: compiled,
            });
            offset += size;
        }

        let mut design = Design {
            spec: spec.clone(),
            blocks,
            penalties: Vec::new(),
            num_coefficients: offset,
            num_categories: spec.num_categories,
            space,
            workers,
            sentences,
            notes,
        };

        // Scale every penalty to the magnitude of its block's cross-product
        // so that one λ grid suits all blocks.
        let rows = design.rows(records);
        let grams = design.block_grams(&rows);
        for (block, label, matrix, smoothing) in raw_penalties {
            let s_norm = matrix.norm();
            let g_norm = grams[block].norm();
            let scale = if s_norm > 0.0 && g_norm > 0.0 { g_norm / s_norm } else { 1.0 };
            design.penalties.push(PenaltyComponent {
                block,
                label,
                matrix: matrix * scale,
                smoothing,
            });
        }
        for note in &design.notes {
            log::warn!("{note}");
        }
        Ok(design)
    }

    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn labels(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.label.clone()).collect()
    }

    /// Appends block `b`'s entries for `input` to `out`.
    pub fn push_block_row(&self, b: usize, input: &PredictInput<'_>, out: &mut SparseRow) {
        let block = &self.blocks[b];
        let off = block.offset;
        match &block.term {
            CompiledTerm::Intercept => out.push((off, 1.0)),
            CompiledTerm::Smooth {
                covariate,
                by,
                basis,
                constraint,
            } => {
                if let Some(c) = by {
                    if input.condition != Some(*c) {
                        return;
                    }
                }
                let sp = basis.eval_sparse(covariate.get(input.ctx));
                for j in 0..constraint.ncols() {
                    let v: f64 = sp
                        .values
                        .iter()
                        .enumerate()
                        .map(|(i, bv)| bv * constraint[(sp.first + i, j)])
                        .sum();
                    out.push((off + j, v));
                }
            }
            CompiledTerm::Factor {
                covariate,
                columns,
                reference,
                dropped,
            } => {
                let Some(level) = covariate.level(input.ctx, input.condition) else {
                    return;
                };
                match columns.get(level) {
                    Some(&j) => out.push((off + j, 1.0)),
                    None if level == reference || dropped.iter().any(|d| d == level) => {}
                    None => log::warn!(
                        "unknown level '{level}' of {}, using reference level '{reference}'",
                        covariate.name()
                    ),
                }
            }
            CompiledTerm::Tensor {
                a,
                b,
                basis_a,
                basis_b,
                transform,
            } => {
                if block.size == 0 {
                    return;
                }
                let ra = basis_a.eval_row(a.get(input.ctx));
                let rb = basis_b.eval_row(b.get(input.ctx));
                let t = transform.apply(&ra, &rb);
                for (j, v) in t.iter().enumerate() {
                    out.push((off + j, *v));
                }
            }
            CompiledTerm::RandomIntercept { group, levels } | CompiledTerm::RandomSlope { group, levels } => {
                let id = match group {
                    Grouping::Worker => input.worker,
                    Grouping::Sentence => input.sentence,
                };
                let Some(id) = id else { return };
                match levels.get(id) {
                    Some(&j) => {
                        let v = if matches!(block.term, CompiledTerm::RandomSlope { .. }) {
                            input.ctx.saliency
                        } else {
                            1.0
                        };
                        out.push((off + j, v));
                    }
                    None => log::warn!("unknown {} '{id}', random effect set to zero", group.name()),
                }
            }
        }
    }

    pub fn row(&self, input: &PredictInput<'_>) -> SparseRow {
        let mut out = Vec::new();
        for b in 0..self.blocks.len() {
            self.push_block_row(b, input, &mut out);
        }
        out
    }

    pub fn dense_row(&self, input: &PredictInput<'_>) -> DVector<f64> {
        let mut row = DVector::zeros(self.num_coefficients);
        for (j, v) in self.row(input) {
            row[j] = v;
        }
        row
    }

    pub fn rows(&self, records: &[RatingRecord]) -> RowMatrix {
        let mut m = RowMatrix {
            indptr: Vec::with_capacity(records.len() + 1),
            indices: Vec::new(),
            values: Vec::new(),
        };
        m.indptr.push(0);
        let mut buf = Vec::new();
        for r in records {
            buf.clear();
            for b in 0..self.blocks.len() {
                self.push_block_row(b, &PredictInput::from_record(r), &mut buf);
            }
            for &(j, v) in &buf {
                m.indices.push(j as u32);
                m.values.push(v);
            }
            m.indptr.push(m.indices.len());
        }
        m
    }

    /// Per-block `X_bᵀ X_b` over the rows.
    fn block_grams(&self, rows: &RowMatrix) -> Vec<DMatrix<f64>> {
        let mut grams: Vec<DMatrix<f64>> = self.blocks.iter().map(|b| DMatrix::zeros(b.size, b.size)).collect();
        let owner: Vec<usize> = self
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| std::iter::repeat_n(i, b.size))
            .collect();
        for r in 0..rows.nrows() {
            let (idx, val) = rows.row(r);
            for (p, (&i, &vi)) in idx.iter().zip(val).enumerate() {
                let bi = owner[i as usize];
                let off = self.blocks[bi].offset;
                for (&j, &vj) in idx[p..].iter().zip(&val[p..]) {
                    if owner[j as usize] != bi {
                        break;
                    }
                    let (a, c) = (i as usize - off, j as usize - off);
                    grams[bi][(a, c)] += vi * vj;
                    if a != c {
                        grams[bi][(c, a)] += vi * vj;
                    }
                }
            }
        }
        grams
    }

    /// `Σ λ_m S_m` embedded in the full coefficient space.
    pub fn penalty_matrix(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let p = self.num_coefficients;
        let mut s = DMatrix::zeros(p, p);
        for (comp, &lambda) in self.penalties.iter().zip(lambdas) {
            let off = self.blocks[comp.block].offset;
            let k = comp.matrix.nrows();
            let mut view = s.view_mut((off, off), (k, k));
            view += &comp.matrix * lambda;
        }
        s
    }

    /// Initial λ: fixed values as given, selectable ones at `default`.
    pub fn initial_lambdas(&self, default: f64) -> Vec<f64> {
        self.penalties
            .iter()
            .map(|c| match c.smoothing {
                Smoothing::Fixed(l) => l,
                Smoothing::Select => default,
            })
            .collect()
    }
}

type FactorCompile = (CompiledTerm, usize, Vec<(String, &'static str)>);

fn compile_factor(
    records: &[RatingRecord],
    covariate: CategoricalCovariate,
    reference: Option<&str>,
    spec: &ModelSpec,
) -> Result<FactorCompile, ModelError> {
    // level -> (count, min rating, max rating)
    let mut stats: BTreeMap<String, (usize, u8, u8)> = BTreeMap::new();
    for r in records {
        let Some(level) = covariate.level(&r.context, Some(r.condition)) else {
            continue;
        };
        let e = stats.entry(level.to_string()).or_insert((0, u8::MAX, 0));
        e.0 += 1;
        e.1 = e.1.min(r.rating);
        e.2 = e.2.max(r.rating);
    }
    if stats.is_empty() {
        return Err(ModelError::InvalidSpec(format!("factor {} has no levels", covariate.name())));
    }
    let top = spec.num_categories as u8;
    let mut dropped = Vec::new();
    let reference = match reference {
        Some(r) if stats.contains_key(r) => r.to_string(),
        requested => {
            // Most frequent level; ties go to the alphabetically first.
            let best = stats
                .iter()
                .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.0.cmp(a.0)))
                .map(|(l, _)| l.clone())
                .expect("nonempty");
            if let Some(r) = requested {
                dropped.push((r.to_string(), "requested reference level not observed; using most frequent"));
            }
            best
        }
    };
    let mut kept = Vec::new();
    for (level, &(_, lo, hi)) in &stats {
        if *level == reference {
            continue;
        }
        if hi == 1 || lo == top {
            dropped.push((level.clone(), "ratings perfectly separated"));
        } else {
            kept.push(level.clone());
        }
    }
    let size = kept.len();
    let columns = kept.into_iter().enumerate().map(|(i, l)| (l, i)).collect();
    let dropped_levels = dropped
        .iter()
        .filter(|(_, why)| *why == "ratings perfectly separated")
        .map(|(l, _)| l.clone())
        .collect();
    Ok((
        CompiledTerm::Factor {
            covariate,
            reference,
            columns,
            dropped: dropped_levels,
        },
        size,
        dropped,
    ))
}
