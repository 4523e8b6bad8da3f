//! Penalized maximum likelihood by damped Newton iterations.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::design::{Design, RowMatrix};
use super::ordinal::{self, cut_jacobian};
use super::select::{self, SelectOptions, Selection};
use super::{FittedPerceptionModel, ModelError, ModelSpec};
use crate::linalg;
use crate::records::RatingRecord;

/// Newton armijo constant.
const ARMIJO: f64 = 1e-4;
const DECREMENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence threshold on the gradient max-norm.
    pub tol: f64,
    pub select: SelectOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            select: SelectOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub gradient_max_norm: f64,
    /// Largest Levenberg damping added to the Hessian (0 when none was needed).
    pub max_damping: f64,
    pub notes: Vec<String>,
    /// Penalized objective at the start and after every accepted step.
    #[serde(default)]
    pub objective_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Selection>,
}

/// The penalized negative log-likelihood over a subset of training rows.
/// Parameters are `β` followed by the `R - 2` log cut-point increments.
pub struct Problem<'a> {
    pub rows: &'a RowMatrix,
    pub ratings: &'a [u8],
    pub subset: &'a [usize],
    pub penalty: DMatrix<f64>,
    pub num_coefficients: usize,
    pub num_increments: usize,
}

/// Value, gradient and (optionally) Hessian of the objective.
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: Option<DMatrix<f64>>,
}

impl<'a> Problem<'a> {
    pub fn new(design: &Design, rows: &'a RowMatrix, ratings: &'a [u8], subset: &'a [usize], lambdas: &[f64]) -> Self {
        Self {
            rows,
            ratings,
            subset,
            penalty: design.penalty_matrix(lambdas),
            num_coefficients: design.num_coefficients,
            num_increments: design.num_categories - 2,
        }
    }

    pub fn dim(&self) -> usize {
        self.num_coefficients + self.num_increments
    }

    fn split<'p>(&self, params: &'p DVector<f64>) -> (&'p [f64], Vec<f64>) {
        let p = self.num_coefficients;
        let beta = &params.as_slice()[..p];
        let cuts = ordinal::cut_points(&params.as_slice()[p..]);
        (beta, cuts)
    }

    fn penalty_value(&self, beta: &[f64]) -> f64 {
        let b = DVector::from_column_slice(beta);
        0.5 * b.dot(&(&self.penalty * &b))
    }

    pub fn value(&self, params: &DVector<f64>) -> f64 {
        let (beta, cuts) = self.split(params);
        let terms: Vec<f64> = self
            .subset
            .par_iter()
            .map(|&i| ordinal::log_prob(self.ratings[i] as usize, self.rows.dot(i, beta), &cuts))
            .collect();
        -terms.iter().sum::<f64>() + self.penalty_value(beta)
    }

    pub fn evaluate(&self, params: &DVector<f64>, with_hessian: bool) -> Result<Evaluation, ModelError> {
        let p = self.num_coefficients;
        let q = self.num_increments;
        let (beta, cuts) = self.split(params);
        let exp_inc: Vec<f64> = params.as_slice()[p..].iter().map(|d| d.exp()).collect();
        let derivs: Vec<ordinal::Derivs> = self
            .subset
            .par_iter()
            .map(|&i| ordinal::derivs(self.ratings[i] as usize, self.rows.dot(i, beta), &cuts))
            .collect();

        let bvec = DVector::from_column_slice(beta);
        // Same arithmetic as the line search, so accepted steps compare exactly.
        let value = self.value(params);
        let mut gradient = DVector::zeros(p + q);
        gradient.rows_mut(0, p).copy_from(&(&self.penalty * &bvec));
        let mut a = vec![0.0; q];
        let mut c = vec![0.0; q];
        let mut hess = with_hessian.then(|| {
            let mut h = DMatrix::zeros(p + q, p + q);
            h.view_mut((0, 0), (p, p)).copy_from(&self.penalty);
            h
        });

        for (&i, d) in self.subset.iter().zip(&derivs) {
            let r = self.ratings[i] as usize;
            let (idx, val) = self.rows.row(i);
            let g_eta = d.ga + d.gc;
            for (&j, &v) in idx.iter().zip(val) {
                gradient[j as usize] += g_eta * v;
            }
            for m in 0..q {
                a[m] = cut_jacobian(r, m, &exp_inc);
                c[m] = if r >= 2 { cut_jacobian(r - 1, m, &exp_inc) } else { 0.0 };
                gradient[p + m] -= d.ga * a[m] + d.gc * c[m];
            }
            if let Some(h) = hess.as_mut() {
                for m in 0..q {
                    let u = (d.haa + d.hac) * a[m] + (d.hac + d.hcc) * c[m];
                    if u != 0.0 {
                        for (&j, &v) in idx.iter().zip(val) {
                            h[(p + m, j as usize)] += u * v;
                        }
                    }
                    for n in 0..=m {
                        let mut v = d.haa * a[m] * a[n] + d.hcc * c[m] * c[n] + d.hac * (a[m] * c[n] + c[m] * a[n]);
                        if m == n {
                            v += d.ga * a[m] + d.gc * c[m];
                        }
                        h[(p + m, p + n)] -= v;
                    }
                }
            }
        }
        for (j, g) in gradient.iter().enumerate() {
            if !g.is_finite() {
                return Err(ModelError::NonFiniteGradient { index: j });
            }
        }

        if let Some(h) = hess.as_mut() {
            let weights: Vec<f64> = derivs.iter().map(|d| -(d.haa + 2.0 * d.hac + d.hcc)).collect();
            self.accumulate_gram(h, &weights);
            // Mirror the lower triangle.
            for col in 0..p + q {
                for row in col + 1..p + q {
                    h[(col, row)] = h[(row, col)];
                }
            }
        }
        Ok(Evaluation {
            value,
            gradient,
            hessian: hess,
        })
    }

    /// Adds `Σ w_i x_i x_iᵀ` to the lower triangle of the leading `p x p`
    /// block. Columns are split into stripes owned by one task each, and every
    /// entry is summed in record order, so the result does not depend on the
    /// thread count.
    fn accumulate_gram(&self, h: &mut DMatrix<f64>, weights: &[f64]) {
        let n = h.nrows();
        let p = self.num_coefficients;
        const STRIPE: usize = 8;
        let data = h.as_mut_slice();
        data[..p * n]
            .par_chunks_mut(STRIPE * n)
            .enumerate()
            .for_each(|(s, cols)| {
                let c0 = s * STRIPE;
                let c1 = (c0 + STRIPE).min(p);
                for (&i, &w) in self.subset.iter().zip(weights) {
                    if w == 0.0 {
                        continue;
                    }
                    let (idx, val) = self.rows.row(i);
                    let start = idx.partition_point(|&j| (j as usize) < c0);
                    for a in start..idx.len() {
                        let col = idx[a] as usize;
                        if col >= c1 {
                            break;
                        }
                        let wa = w * val[a];
                        let base = (col - c0) * n;
                        for b in a..idx.len() {
                            cols[base + idx[b] as usize] += wa * val[b];
                        }
                    }
                }
            });
    }

    /// Category frequencies of the subset turned into starting cut points,
    /// with the intercept absorbing the fixed first cut.
    pub fn initial_params(&self) -> DVector<f64> {
        let p = self.num_coefficients;
        let num_cat = self.num_increments + 2;
        let mut counts = vec![0usize; num_cat];
        for &i in self.subset {
            counts[self.ratings[i] as usize - 1] += 1;
        }
        let n = self.subset.len() as f64;
        let mut cum = 0usize;
        let logits: Vec<f64> = (0..num_cat - 1)
            .map(|j| {
                cum += counts[j];
                let q = (cum as f64 + 0.5) / (n + 1.0);
                (q / (1.0 - q)).ln()
            })
            .collect();
        let eta0 = ordinal::FIRST_CUT - logits[0];
        let cuts: Vec<f64> = logits.iter().map(|l| l + eta0).collect();
        let mut params = DVector::zeros(p + self.num_increments);
        params[0] = eta0;
        for (m, d) in ordinal::increments_from_cuts(&cuts, 0.05).into_iter().enumerate() {
            params[p + m] = d;
        }
        params
    }

    /// Damped Newton with Armijo backtracking from `init`.
    pub fn newton(&self, init: DVector<f64>, max_iter: usize, tol: f64) -> Result<(DVector<f64>, Evaluation, FitReport), ModelError> {
        let mut params = init;
        let mut report = FitReport::default();
        let mut eval = self.evaluate(&params, true)?;
        report.objective_trace.push(eval.value);
        for iter in 0..max_iter {
            let gmax = eval.gradient.amax();
            report.iterations = iter;
            if gmax < tol {
                report.converged = true;
                break;
            }
            let h = eval.hessian.as_ref().expect("hessian requested");
            let Some((step, mu)) = linalg::damped_solve(h, &(-&eval.gradient)) else {
                report.notes.push("Newton system could not be solved".into());
                break;
            };
            report.max_damping = report.max_damping.max(mu);
            let slope = eval.gradient.dot(&step);
            if -slope <= DECREMENT_EPS * eval.value.abs().max(1.0) {
                // The predicted decrease is below the rounding error of f, so
                // the pure Newton step is judged by the gradient instead.
                let cand = &params + &step;
                let next = self.evaluate(&cand, true)?;
                if !(next.gradient.amax() < gmax) {
                    report
                        .notes
                        .push(format!("stopped at the rounding level of the objective with gradient max-norm {gmax:e}"));
                    break;
                }
                params = cand;
                eval = next;
            } else {
                let mut t = 1.0;
                let mut accepted = None;
                while t > 1e-12 {
                    let cand = &params + &step * t;
                    let v = self.value(&cand);
                    if v.is_finite() && v <= eval.value + ARMIJO * t * slope {
                        accepted = Some(cand);
                        break;
                    }
                    t *= 0.5;
                }
                let Some(next) = accepted else {
                    report
                        .notes
                        .push(format!("line search failed at iteration {iter} with gradient max-norm {gmax:e}"));
                    break;
                };
                params = next;
                eval = self.evaluate(&params, true)?;
            }
            report.objective_trace.push(eval.value);
            report.iterations = iter + 1;
        }
        if !report.converged && eval.gradient.amax() < tol {
            report.converged = true;
        }
        if report.max_damping > 0.0 {
            report.notes.push(format!(
                "Hessian was not positive definite; Levenberg damping up to {:e} applied",
                report.max_damping
            ));
        }
        if !report.converged {
            report.notes.push(format!(
                "did not converge: gradient max-norm {:e} after {} iterations",
                eval.gradient.amax(),
                report.iterations
            ));
        }
        report.objective = eval.value;
        report.gradient_max_norm = eval.gradient.amax();
        Ok((params, eval, report))
    }
}

pub fn ratings_of(records: &[RatingRecord]) -> Vec<u8> {
    records.iter().map(|r| r.rating).collect()
}

/// Fits the model, selecting smoothing parameters by cross-validation for
/// every penalty marked `Select`.
pub fn fit(records: &[RatingRecord], spec: &ModelSpec, opts: &FitOptions) -> Result<FittedPerceptionModel, ModelError> {
    let design = Design::build(records, spec)?;
    let rows = design.rows(records);
    let ratings = ratings_of(records);
    let (lambdas, selection) = if spec.has_selection() {
        let sel = select::select_on_design(&design, &rows, records, &ratings, opts)?;
        (sel.lambdas.clone(), Some(sel))
    } else {
        (design.initial_lambdas(0.0), None)
    };
    finish(design, &rows, &ratings, lambdas, selection, opts)
}

/// Fits with explicit smoothing parameters, one per penalty component.
pub fn fit_with_lambdas(
    records: &[RatingRecord],
    spec: &ModelSpec,
    lambdas: &[f64],
    opts: &FitOptions,
) -> Result<FittedPerceptionModel, ModelError> {
    let design = Design::build(records, spec)?;
    if lambdas.len() != design.penalties.len() {
        return Err(ModelError::InvalidSpec(format!(
            "{} smoothing parameters given for {} penalties",
            lambdas.len(),
            design.penalties.len()
        )));
    }
    let rows = design.rows(records);
    let ratings = ratings_of(records);
    finish(design, &rows, &ratings, lambdas.to_vec(), None, opts)
}

fn finish(
    design: Design,
    rows: &RowMatrix,
    ratings: &[u8],
    lambdas: Vec<f64>,
    selection: Option<Selection>,
    opts: &FitOptions,
) -> Result<FittedPerceptionModel, ModelError> {
    let subset: Vec<usize> = (0..ratings.len()).collect();
    let problem = Problem::new(&design, rows, ratings, &subset, &lambdas);
    let init = problem.initial_params();
    let (params, eval, mut report) = problem.newton(init, opts.max_iter, opts.tol)?;
    let hessian = eval.hessian.expect("hessian requested");
    if hessian.clone().cholesky().is_none() {
        report
            .notes
            .push("penalized Hessian is not positive definite at the reported optimum".into());
    }
    report.notes.extend(design.notes.iter().cloned());
    report.selection = selection;
    for note in &report.notes {
        log::warn!("{note}");
    }
    Ok(FittedPerceptionModel::new(design, params, lambdas, hessian, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_accumulation_matches_dense_product() {
        // Tiny synthetic design: three rows over four coefficients.
        let design_rows = [vec![(0usize, 1.0), (2, 0.5)], vec![(0, 1.0), (1, 2.0), (3, -1.0)], vec![(0, 1.0), (3, 4.0)]];
        let records = RowMatrix::from_rows(&design_rows);
        let subset = [0usize, 1, 2];
        let ratings = [1u8, 2, 3];
        let problem = Problem {
            rows: &records,
            ratings: &ratings,
            subset: &subset,
            penalty: DMatrix::zeros(4, 4),
            num_coefficients: 4,
            num_increments: 1,
        };
        let w = [0.5, 2.0, -1.0];
        let mut h = DMatrix::zeros(5, 5);
        problem.accumulate_gram(&mut h, &w);
        let mut dense = DMatrix::zeros(4, 4);
        for (row, &wi) in design_rows.iter().zip(&w) {
            let mut x = DVector::zeros(4);
            for &(j, v) in row {
                x[j] = v;
            }
            dense += &x * x.transpose() * wi;
        }
        for i in 0..4 {
            for j in 0..=i {
                assert_eq!(h[(i, j)], dense[(i, j)]);
            }
        }
    }
}
