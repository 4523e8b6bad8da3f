use nalgebra::{DMatrix, DVector};

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// Least-squares solution of `a x = b` for possibly rank-deficient `a`, via
/// column-pivoted QR. Columns whose pivot falls below `1e-10` of the leading
/// pivot get a zero coefficient.
pub fn least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    let qr = a.clone().col_piv_qr();
    let q = qr.q();
    let r = qr.r();
    let lead = r[(0, 0)].abs();
    let rank = (0..r.nrows().min(n))
        .take_while(|&i| lead > 0.0 && r[(i, i)].abs() > 1e-10 * lead)
        .count();
    let qtb = q.transpose() * b;
    let mut x = DMatrix::zeros(n, b.ncols());
    if rank > 0 {
        let r_top = r.view((0, 0), (rank, rank)).into_owned();
        let rhs = qtb.rows(0, rank).into_owned();
        let z = r_top
            .solve_upper_triangular(&rhs)
            .expect("nonzero pivots on the retained diagonal");
        x.rows_mut(0, rank).copy_from(&z);
    }
    qr.p().inv_permute_rows(&mut x);
    x
}

/// Cholesky solve with Levenberg-style diagonal damping when `h` is not
/// numerically positive definite. Returns the solution and the damping used.
pub fn damped_solve(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    if let Some(chol) = h.clone().cholesky() {
        return Some((chol.solve(rhs), 0.0));
    }
    let scale = h
        .diagonal()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    let mut mu = 1e-8 * scale;
    for _ in 0..40 {
        let mut damped = h.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += mu;
        }
        if let Some(chol) = damped.cholesky() {
            return Some((chol.solve(rhs), mu));
        }
        mu *= 10.0;
    }
    None
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    h.clone().cholesky().map(|c| c.inverse())
}

/// Serializes a dense matrix as `{rows, cols, data}` with row-major data.
pub mod matrix_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Dense {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter().copied());
        }
        Dense {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let dense = Dense::deserialize(d)?;
        if dense.rows * dense.cols != dense.data.len() {
            return Err(serde::de::Error::custom(format!(
                "matrix data has {} entries, expected {}x{}",
                dense.data.len(),
                dense.rows,
                dense.cols
            )));
        }
        Ok(DMatrix::from_row_slice(dense.rows, dense.cols, &dense.data))
    }
}
