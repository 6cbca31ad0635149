//! Small dense linear-algebra and distribution helpers shared by the estimators.

use nalgebra::DMatrix;

/// Orthonormal basis of the column span of `x` (thin QR).
pub(crate) fn col_basis(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().qr().q()
}

/// In place m ← (I − QQᵀ) m for an orthonormal Q.
pub(crate) fn project_out(q: &DMatrix<f64>, m: &mut DMatrix<f64>) {
    let coef = q.transpose() * &*m;
    *m -= q * coef;
}

/// Inverse of a symmetric positive definite matrix, `None` when Cholesky fails.
pub(crate) fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| c.inverse())
}

/// Leading `k` right singular vectors of `a` as columns of an n × k matrix,
/// with a deterministic sign (largest-magnitude entry positive).
pub(crate) fn top_right_singular_vectors(a: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let n = a.ncols();
    // Work with the n × n Gram matrix when it is the smaller side.
    let svd = if a.nrows() >= n {
        let g = a.transpose() * a;
        let eig = g.symmetric_eigen();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
        let vals: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()).collect();
        let mut v = DMatrix::zeros(n, k);
        for (c, &i) in idx.iter().take(k).enumerate() {
            v.set_column(c, &eig.eigenvectors.column(i));
        }
        (v, vals)
    } else {
        let s = a.clone().svd(false, true);
        let vt = s.v_t.expect("requested V");
        let mut idx: Vec<usize> = (0..s.singular_values.len()).collect();
        idx.sort_by(|&i, &j| s.singular_values[j].partial_cmp(&s.singular_values[i]).unwrap());
        let vals: Vec<f64> = idx.iter().map(|&i| s.singular_values[i]).collect();
        let mut v = DMatrix::zeros(n, k);
        for (c, &i) in idx.iter().take(k).enumerate() {
            v.set_column(c, &vt.row(i).transpose());
        }
        (v, vals)
    };
    let (mut v, vals) = svd;
    fix_signs(&mut v);
    (v, vals)
}

pub(crate) fn fix_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let mut best = 0.0f64;
        for &x in col.iter() {
            if x.abs() > best.abs() {
                best = x;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

/// Orthonormalize the columns of `m` (thin QR) with deterministic signs.
pub(crate) fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Upper tail of χ²_df.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 || x.is_nan() {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    statrs::function::gamma::gamma_ur(df / 2.0, x / 2.0).clamp(0.0, 1.0)
}

/// Two-sided normal p-value for a z statistic.
pub fn normal_two_sided(z: f64) -> f64 {
    if z.is_nan() {
        return 1.0;
    }
    chi2_sf(z * z, 1.0)
}

/// Linear-interpolation sample quantile (type 7) of already sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Largest principal angle based Frobenius distance ‖P_a − P_b‖_F between
/// the column spans of two orthonormal bases.
pub fn subspace_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let pa = a * a.transpose();
    let pb = b * b.transpose();
    (pa - pb).norm()
}

/// Singular values of `a` in decreasing order, via the Gram matrix of the
/// smaller side.
pub(crate) fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let g = if a.nrows() >= a.ncols() { a.transpose() * a } else { a * a.transpose() };
    let mut v: Vec<f64> = g.symmetric_eigenvalues().iter().map(|&e| e.max(0.0).sqrt()).collect();
    v.sort_by(|x, y| y.partial_cmp(x).unwrap());
    v
}

/// Serde adapter storing a matrix as a list of rows.
pub(crate) mod serde_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Rows {
        ncols: usize,
        rows: Vec<Vec<f64>>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        Rows {
            ncols: m.ncols(),
            rows: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let Rows { ncols, rows } = Rows::deserialize(d)?;
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}
