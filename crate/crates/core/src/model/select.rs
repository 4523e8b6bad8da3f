//! Smoothing-parameter selection by worker-grouped cross-validation.

use std::collections::HashMap;
use std::rc::Rc;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::design::{Design, RowMatrix};
use super::fit::{ratings_of, FitOptions, Problem};
use super::{ordinal, ModelError, ModelSpec, Smoothing};
use crate::records::RatingRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectOptions {
    /// Candidate λ values, in any order.
    pub grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    pub max_sweeps: usize,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            grid: (-3..=6).map(|e| 10f64.powi(e)).collect(),
            folds: 5,
            seed: 0,
            max_sweeps: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// One λ per penalty component, in design order.
    pub lambdas: Vec<f64>,
    pub labels: Vec<String>,
    /// Cross-validated deviance at the selected λ (NaN when no CV was run).
    pub cv_deviance: f64,
    pub sweeps: usize,
    pub evaluations: usize,
}

/// Assigns every worker to one of `k` folds: workers are sorted, shuffled
/// with the seed, and dealt round-robin.
pub fn worker_folds(workers: &[String], k: usize, seed: u64) -> HashMap<String, usize> {
    let mut sorted: Vec<String> = workers.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    sorted.into_iter().enumerate().map(|(i, w)| (w, i % k)).collect()
}

/// Selects λ for every penalty marked `Select`; fixed ones are kept.
///
/// Coordinate descent over penalties: each step evaluates the whole grid by
/// worker-grouped cross-validated deviance and keeps the largest λ within one
/// paired standard error of the best.
pub fn select_smoothing(records: &[RatingRecord], spec: &ModelSpec, opts: &SelectOptions) -> Result<Selection, ModelError> {
    let design = Design::build(records, spec)?;
    let rows = design.rows(records);
    let ratings = ratings_of(records);
    let fit_opts = FitOptions {
        select: opts.clone(),
        ..FitOptions::default()
    };
    select_on_design(&design, &rows, records, &ratings, &fit_opts)
}

struct CvState<'a> {
    design: &'a Design,
    rows: &'a RowMatrix,
    ratings: &'a [u8],
    train: Vec<Vec<usize>>,
    test: Vec<Vec<usize>>,
    warm: Vec<Option<DVector<f64>>>,
    /// Held-out deviance of every record, per λ vector.
    cache: HashMap<Vec<u64>, Rc<Vec<f64>>>,
    max_iter: usize,
    tol: f64,
}

impl CvState<'_> {
    fn deviances(&mut self, lambdas: &[f64]) -> Result<Rc<Vec<f64>>, ModelError> {
        let key: Vec<u64> = lambdas.iter().map(|l| l.to_bits()).collect();
        if let Some(v) = self.cache.get(&key) {
            return Ok(v.clone());
        }
        let p = self.design.num_coefficients;
        let mut dev = vec![0.0; self.ratings.len()];
        for f in 0..self.train.len() {
            let problem = Problem::new(self.design, self.rows, self.ratings, &self.train[f], lambdas);
            let init = self.warm[f].clone().unwrap_or_else(|| problem.initial_params());
            let (params, _, _) = problem.newton(init, self.max_iter, self.tol)?;
            let beta = &params.as_slice()[..p];
            let cuts = ordinal::cut_points(&params.as_slice()[p..]);
            for &i in &self.test[f] {
                dev[i] = -2.0 * ordinal::log_prob(self.ratings[i] as usize, self.rows.dot(i, beta), &cuts);
            }
            self.warm[f] = Some(params);
        }
        let dev = Rc::new(dev);
        self.cache.insert(key, dev.clone());
        Ok(dev)
    }
}

/// Index of the largest candidate whose total deviance exceeds the minimum
/// by at most one standard error of the paired per-record differences.
/// Candidates must be sorted by increasing λ.
fn one_se_choice(candidates: &[Rc<Vec<f64>>]) -> usize {
    let totals: Vec<f64> = candidates.iter().map(|d| d.iter().sum()).collect();
    let mut best = 0;
    for (i, t) in totals.iter().enumerate() {
        if *t <= totals[best] {
            best = i;
        }
    }
    for i in (best + 1..candidates.len()).rev() {
        let diffs: Vec<f64> = candidates[i].iter().zip(candidates[best].iter()).map(|(a, b)| a - b).collect();
        let n = diffs.len() as f64;
        let total: f64 = diffs.iter().sum();
        let mean = total / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        if total <= (n * var).sqrt() {
            return i;
        }
    }
    best
}

pub(crate) fn select_on_design(
    design: &Design,
    rows: &RowMatrix,
    records: &[RatingRecord],
    ratings: &[u8],
    opts: &FitOptions,
) -> Result<Selection, ModelError> {
    let sopts = &opts.select;
    let mut grid: Vec<f64> = sopts.grid.clone();
    if grid.is_empty() || grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(ModelError::InvalidSpec("λ grid must be nonempty, finite and non-negative".into()));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let selectable: Vec<usize> = (0..design.penalties.len())
        .filter(|&c| design.penalties[c].smoothing == Smoothing::Select)
        .collect();
    let mut lambdas = design.initial_lambdas(grid[grid.len() / 2]);
    let labels = design.penalties.iter().map(|c| c.label.clone()).collect();
    if grid.len() == 1 || selectable.is_empty() {
        return Ok(Selection {
            lambdas,
            labels,
            cv_deviance: f64::NAN,
            sweeps: 0,
            evaluations: 0,
        });
    }

    let k = sopts.folds.min(design.workers.len());
    if k < 2 {
        return Err(ModelError::InvalidSpec(
            "cross-validated smoothing selection needs at least two workers".into(),
        ));
    }
    let folds = worker_folds(&design.workers, k, sopts.seed);
    let mut train = vec![Vec::new(); k];
    let mut test = vec![Vec::new(); k];
    for (i, r) in records.iter().enumerate() {
        let f = folds[&r.worker_id];
        for g in 0..k {
            if g == f {
                test[g].push(i);
            } else {
                train[g].push(i);
            }
        }
    }
    let mut state = CvState {
        design,
        rows,
        ratings,
        train,
        test,
        warm: vec![None; k],
        cache: HashMap::new(),
        max_iter: opts.max_iter,
        tol: opts.tol,
    };

    let mut sweeps = 0;
    for _ in 0..sopts.max_sweeps {
        sweeps += 1;
        let mut changed = false;
        for &c in &selectable {
            let mut candidates = Vec::with_capacity(grid.len());
            // Largest λ first, so warm starts move from smooth to wiggly fits.
            for &g in grid.iter().rev() {
                let mut trial = lambdas.clone();
                trial[c] = g;
                candidates.push(state.deviances(&trial)?);
            }
            candidates.reverse();
            let choice = grid[one_se_choice(&candidates)];
            if choice != lambdas[c] {
                lambdas[c] = choice;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let best: f64 = state.deviances(&lambdas)?.iter().sum();
    Ok(Selection {
        lambdas,
        labels,
        cv_deviance: best,
        sweeps,
        evaluations: state.cache.len(),
    })
}
