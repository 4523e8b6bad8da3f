//! Cumulative-logit likelihood pieces for a single observation.

/// First cut point; fixed so that the intercept is identifiable.
pub const FIRST_CUT: f64 = -1.0;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cut points `θ_1 = -1`, `θ_{j+1} = θ_j + exp(δ_j)`.
pub fn cut_points(increments: &[f64]) -> Vec<f64> {
    let mut cuts = Vec::with_capacity(increments.len() + 1);
    let mut theta = FIRST_CUT;
    cuts.push(theta);
    for d in increments {
        theta += d.exp();
        cuts.push(theta);
    }
    cuts
}

/// Inverse of [`cut_points`]. Gaps are floored at `min_gap`.
pub fn increments_from_cuts(cuts: &[f64], min_gap: f64) -> Vec<f64> {
    cuts.windows(2)
        .map(|w| (w[1] - w[0]).max(min_gap).ln())
        .collect()
}

/// Upper and lower latent thresholds of category `r` (1-based) relative to η.
/// Infinite bounds are `None`.
fn bounds(r: usize, eta: f64, cuts: &[f64]) -> (Option<f64>, Option<f64>) {
    let num_categories = cuts.len() + 1;
    let a = (r < num_categories).then(|| cuts[r - 1] - eta);
    let c = (r > 1).then(|| cuts[r - 2] - eta);
    (a, c)
}

/// `ln P(y = r | η)`.
pub fn log_prob(r: usize, eta: f64, cuts: &[f64]) -> f64 {
    match bounds(r, eta, cuts) {
        (Some(a), None) => log_sigmoid(a),
        (None, Some(c)) => log_sigmoid(-c),
        (Some(a), Some(c)) => log_sigmoid(a) + log_sigmoid(-c) + (-(c - a).exp_m1()).ln(),
        (None, None) => 0.0,
    }
}

/// Category probabilities for latent value `eta`.
pub fn category_probs(eta: f64, cuts: &[f64]) -> Vec<f64> {
    (1..=cuts.len() + 1).map(|r| log_prob(r, eta, cuts).exp()).collect()
}

/// First and second derivatives of `ln P(y = r)` with respect to the upper
/// threshold argument `a = θ_r - η` and the lower one `c = θ_{r-1} - η`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivs {
    pub log_p: f64,
    pub ga: f64,
    pub gc: f64,
    pub haa: f64,
    pub hcc: f64,
    pub hac: f64,
}

pub fn derivs(r: usize, eta: f64, cuts: &[f64]) -> Derivs {
    let (a, c) = bounds(r, eta, cuts);
    match (a, c) {
        (Some(a), None) => {
            let ga = sigmoid(-a);
            Derivs {
                log_p: log_sigmoid(a),
                ga,
                gc: 0.0,
                haa: -sigmoid(a) * ga,
                hcc: 0.0,
                hac: 0.0,
            }
        }
        (None, Some(c)) => {
            let gc = -sigmoid(c);
            Derivs {
                log_p: log_sigmoid(-c),
                ga: 0.0,
                gc,
                haa: 0.0,
                hcc: gc * sigmoid(-c),
                hac: 0.0,
            }
        }
        (Some(a), Some(c)) => {
            let log_gap = (-(c - a).exp_m1()).ln();
            let log_p = log_sigmoid(a) + log_sigmoid(-c) + log_gap;
            // f(a)/P and f(c)/P with f = σ(1 - σ), in log space.
            let ra = (log_sigmoid(-a) - log_sigmoid(-c) - log_gap).exp();
            let rc = (log_sigmoid(c) - log_sigmoid(a) - log_gap).exp();
            Derivs {
                log_p,
                ga: ra,
                gc: -rc,
                haa: ra * (1.0 - 2.0 * sigmoid(a)) - ra * ra,
                hcc: -rc * (1.0 - 2.0 * sigmoid(c)) - rc * rc,
                hac: ra * rc,
            }
        }
        (None, None) => Derivs {
            log_p: 0.0,
            ga: 0.0,
            gc: 0.0,
            haa: 0.0,
            hcc: 0.0,
            hac: 0.0,
        },
    }
}

/// Derivative of cut point `θ_j` (1-based) with respect to increment `δ_m`
/// (0-based), given `e = exp(δ)`.
#[inline]
pub fn cut_jacobian(j: usize, m: usize, exp_increments: &[f64]) -> f64 {
    if m + 1 < j {
        exp_increments[m]
    } else {
        0.0
    }
}
