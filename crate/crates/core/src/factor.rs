//! Latent factor subspace by inverse-probability-weighted alternating least
//! squares, the covariate/factor regression Ω, and the number of factors.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DesignMatrix, MetaboliteClass, MetabolitePartition, ObservedMatrix};
use crate::error::{Error, Result};
use crate::fdr::{qvalues, QValueMethod};
use crate::linalg::{chi2_sf, col_basis, orthonormalize, project_out, quantile_sorted, serde_rows, singular_values, spd_inverse, top_right_singular_vectors};
use crate::mechanism::{centered_complete_block, MechanismEstimate};
use crate::par::map_indexed;

pub const STORE_FORMAT: &str = "msnimble-factors";
pub const STORE_VERSION: u32 = 1;

/// Observation weights for the analysed metabolites (complete and missing
/// classes, in metabolite order). Row `r` belongs to metabolite `rows[r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub rows: Vec<usize>,
    n: usize,
    w: Vec<f64>,
    pub n_clamped: usize,
}

impl WeightMatrix {
    /// Weight 1 on every observed cell of the given metabolites.
    pub fn unit(m: &ObservedMatrix, rows: &[usize]) -> Self {
        let n = m.n_samples();
        let mut w = Vec::with_capacity(rows.len() * n);
        for &g in rows {
            w.extend(m.mask_row(g).iter().map(|&o| if o { 1.0 } else { 0.0 }));
        }
        WeightMatrix { rows: rows.to_vec(), n, w, n_clamped: 0 }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.w[r * self.n..(r + 1) * self.n]
    }
}

/// ŵ_gi = r_gi / Ψ{α̂_g(y_gi − δ̂_g)} for missing-class metabolites and r_gi
/// for complete ones. Weights above `max_weight` are clamped and counted.
pub fn compute_weights(m: &ObservedMatrix, part: &MetabolitePartition, mech: &MechanismEstimate, max_weight: f64) -> Result<WeightMatrix> {
    if !(max_weight >= 1.0) {
        return Err(Error::InvalidInput(format!("weight clamp {max_weight} must be at least 1")));
    }
    let rows = part.analyzed();
    let mut wm = WeightMatrix::unit(m, &rows);
    let by_id = mech.by_id();
    let n = m.n_samples();
    for (r, &g) in rows.iter().enumerate() {
        if part.class_of(g) != MetaboliteClass::Missing {
            continue;
        }
        let id = &m.metabolite_ids()[g];
        let rec = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::StoreMismatch(format!("no mechanism estimate for metabolite `{id}`")))?;
        let y = m.row(g);
        for i in 0..n {
            let cell = &mut wm.w[r * n + i];
            if *cell == 0.0 {
                continue;
            }
            let psi = mech.cdf.cdf(rec.alpha * (y[i] - rec.delta));
            let v = 1.0 / psi;
            if v > max_weight || !v.is_finite() {
                wm.n_clamped += 1;
                *cell = max_weight;
            } else {
                *cell = v;
            }
        }
    }
    Ok(wm)
}

/// Leading right singular vectors of the complete block after projecting out X.
pub fn init_subspace(m: &ObservedMatrix, part: &MetabolitePartition, x: &DesignMatrix, k: usize) -> Result<DMatrix<f64>> {
    if part.complete.len() < k {
        return Err(Error::TooFewComplete { needed: k, have: part.complete.len() });
    }
    if x.n_rows() != m.n_samples() {
        return Err(Error::InvalidInput("design rows do not match samples".into()));
    }
    if k + x.n_cols() >= m.n_samples() {
        return Err(Error::InvalidInput(format!("{k} factors and {} covariates leave no residual degrees of freedom", x.n_cols())));
    }
    let q = col_basis(x.x());
    let mut a = centered_complete_block(m, &part.complete).transpose();
    project_out(&q, &mut a);
    let a = a.transpose();
    let (mut v, s) = top_right_singular_vectors(&a, k);
    if k > 0 && !(s[k - 1] > 1e-6 * s[0].max(f64::MIN_POSITIVE)) {
        return Err(Error::RankDeficient(format!(
            "complete-metabolite residuals have rank below {k}; try a smaller number of factors"
        )));
    }
    project_out(&q, &mut v);
    Ok(orthonormalize(&v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub max_weight: f64,
    pub refine_iters: usize,
    pub q_thresh: f64,
    pub qvalue_method: QValueMethod,
    pub n_perm: usize,
    pub perm_quantile: f64,
    pub seed: u64,
}

impl Default for FactorConfig {
    fn default() -> Self {
        FactorConfig {
            tol: 1e-8,
            max_iter: 200,
            max_weight: 50.0,
            refine_iters: 3,
            q_thresh: 0.1,
            qvalue_method: QValueMethod::BenjaminiHochberg,
            n_perm: 19,
            perm_quantile: 0.95,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorScale {
    /// Factors enter downstream models as √n · c_perp, so loadings are O(1).
    SqrtN,
}

/// Objective value after a half-step of the alternating fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTrace {
    pub iter: usize,
    pub after_coefs: f64,
    pub after_factors: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorEstimate {
    pub k: usize,
    pub scale: FactorScale,
    pub metabolites: Vec<String>,
    #[serde(with = "serde_rows")]
    pub c_perp: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub loadings: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub coefs: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub omega_hat: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub c_hat: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<ObjectiveTrace>,
    /// Metabolites whose weighted normal equations were singular at some iteration.
    pub dropped: Vec<String>,
    pub n_clamped: usize,
    /// Metabolites retained by the final Ω refinement round.
    pub omega_included: Vec<bool>,
    pub omega_warning: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Store {
    format: String,
    version: u32,
    factors: FactorEstimate,
}

impl FactorEstimate {
    pub fn n_samples(&self) -> usize {
        self.c_perp.nrows()
    }

    /// √n · c_perp.
    pub fn scaled_factors(&self) -> DMatrix<f64> {
        &self.c_perp * (self.n_samples() as f64).sqrt()
    }

    /// Replace Ω̂ and rebuild Ĉ = √n·c_perp + XΩ̂.
    pub fn set_omega(&mut self, x: &DesignMatrix, omega: DMatrix<f64>) {
        self.c_hat = self.scaled_factors() + x.x() * &omega;
        self.omega_hat = omega;
    }

    /// Ẑ = [X, Ĉ].
    pub fn z_hat(&self, x: &DesignMatrix) -> DMatrix<f64> {
        let (n, d) = (x.n_rows(), x.n_cols());
        let mut z = DMatrix::zeros(n, d + self.k);
        z.columns_mut(0, d).copy_from(x.x());
        z.columns_mut(d, self.k).copy_from(&self.c_hat);
        z
    }

    /// Eigenvalues of loadingsᵀloadings / p, decreasing.
    pub fn loading_eigenvalues(&self) -> Vec<f64> {
        let p = self.loadings.nrows().max(1) as f64;
        let mut v: Vec<f64> = (self.loadings.transpose() * &self.loadings / p).symmetric_eigenvalues().iter().copied().collect();
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        v
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Store {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            factors: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        if v.get("format").and_then(|f| f.as_str()) != Some(STORE_FORMAT) {
            return Err(Error::StoreMismatch(format!("not a {STORE_FORMAT} store")));
        }
        if v.get("version").and_then(|f| f.as_u64()) != Some(STORE_VERSION as u64) {
            return Err(Error::StoreMismatch(format!("unsupported {STORE_FORMAT} version")));
        }
        let store: Store = serde_json::from_value(v)?;
        Ok(store.factors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Weighted least squares of `y` on the rows of `zt` (columns are samples).
/// Returns (coefficients, weighted RSS) or `None` when singular.
pub(crate) fn wls(zt: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Option<(DVector<f64>, f64)> {
    let q = zt.nrows();
    let mut a = DMatrix::<f64>::zeros(q, q);
    let mut b = DVector::<f64>::zeros(q);
    for (i, zi) in zt.column_iter().enumerate() {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for r in 0..q {
            let wz = wi * zi[r];
            b[r] += wz * y[i];
            for c in r..q {
                a[(r, c)] += wz * zi[c];
            }
        }
    }
    a.fill_lower_triangle_with_upper_triangle();
    let theta = a.cholesky()?.solve(&b);
    if theta.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut rss = 0.0;
    for (i, zi) in zt.column_iter().enumerate() {
        if w[i] > 0.0 {
            let e = y[i] - zi.dot(&theta);
            rss += w[i] * e * e;
        }
    }
    Some((theta, rss))
}

fn design_with(x: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d, k) = (x.nrows(), x.ncols(), c.ncols());
    let mut z = DMatrix::zeros(n, d + k);
    z.columns_mut(0, d).copy_from(x);
    z.columns_mut(d, k).copy_from(c);
    z
}

struct CoefStep {
    theta: Vec<Option<DVector<f64>>>,
    objective: f64,
}

fn coef_step(m: &ObservedMatrix, w: &WeightMatrix, zt: &DMatrix<f64>) -> CoefStep {
    let fits = map_indexed(w.n_rows(), |r| wls(zt, m.row(w.rows[r]), w.row(r)));
    let objective = fits.iter().flatten().map(|(_, rss)| rss).sum();
    CoefStep {
        theta: fits.into_iter().map(|f| f.map(|(t, _)| t)).collect(),
        objective,
    }
}

/// IPW alternating least squares for the factor subspace orthogonal to X.
pub fn fit_factors(
    m: &ObservedMatrix,
    x: &DesignMatrix,
    w: &WeightMatrix,
    k: usize,
    init: &DMatrix<f64>,
    cfg: &FactorConfig,
) -> Result<FactorEstimate> {
    let (n, d) = (m.n_samples(), x.n_cols());
    if x.n_rows() != n || w.n_samples() != n || init.nrows() != n {
        return Err(Error::InvalidInput("fit_factors: sample dimensions disagree".into()));
    }
    if init.ncols() != k {
        return Err(Error::InvalidInput(format!("initial subspace has {} columns, expected {k}", init.ncols())));
    }
    let q = col_basis(x.x());
    let mut cp = init.clone();
    project_out(&q, &mut cp);
    let mut cp = orthonormalize(&cp);
    let sqrt_n = (n as f64).sqrt();
    let xt = x.x().transpose();

    let mut trace = Vec::new();
    let mut dropped = std::collections::BTreeSet::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut prev = f64::INFINITY;
    let mut step = coef_step(m, w, &design_with(x.x(), &(&cp * sqrt_n)).transpose());
    while k > 0 && iterations < cfg.max_iter {
        iterations += 1;
        for (r, t) in step.theta.iter().enumerate() {
            if t.is_none() {
                dropped.insert(w.rows[r]);
            }
        }
        // Factor rows given coefficients: one K×K weighted system per sample.
        let rows: Vec<(usize, &DVector<f64>)> = step.theta.iter().enumerate().filter_map(|(r, t)| t.as_ref().map(|t| (r, t))).collect();
        let c_rows = map_indexed(n, |i| {
            let mut a = DMatrix::<f64>::zeros(k, k);
            let mut b = DVector::<f64>::zeros(k);
            let xi = xt.column(i);
            for &(r, t) in &rows {
                let wi = w.row(r)[i];
                if wi == 0.0 {
                    continue;
                }
                let resid = m.row(w.rows[r])[i] - t.rows(0, d).dot(&xi);
                let l = t.rows(d, k);
                for a_ in 0..k {
                    b[a_] += wi * l[a_] * resid;
                    for c in a_..k {
                        a[(a_, c)] += wi * l[a_] * l[c];
                    }
                }
            }
            a.fill_lower_triangle_with_upper_triangle();
            a.cholesky().map(|ch| ch.solve(&b))
        });
        let mut c = &cp * sqrt_n;
        for (i, row) in c_rows.iter().enumerate() {
            if let Some(v) = row {
                for j in 0..k {
                    c[(i, j)] = v[j];
                }
            }
        }
        let mut after_factors = 0.0;
        for &(r, t) in &rows {
            let y = m.row(w.rows[r]);
            let wr = w.row(r);
            for i in 0..n {
                if wr[i] > 0.0 {
                    let e = y[i] - t.rows(0, d).dot(&xt.column(i)) - t.rows(d, k).dot(&c.row(i).transpose());
                    after_factors += wr[i] * e * e;
                }
            }
        }
        project_out(&q, &mut c);
        cp = orthonormalize(&c);
        let next = coef_step(m, w, &design_with(x.x(), &(&cp * sqrt_n)).transpose());
        trace.push(ObjectiveTrace {
            iter: iterations,
            after_coefs: step.objective,
            after_factors,
        });
        let cur = next.objective;
        step = next;
        if prev.is_finite() && (prev - cur) <= cfg.tol * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        prev = cur;
    }
    if k == 0 {
        converged = true;
        trace.push(ObjectiveTrace {
            iter: 0,
            after_coefs: step.objective,
            after_factors: step.objective,
        });
    }
    let ids = m.metabolite_ids();
    let mut loadings = DMatrix::zeros(w.n_rows(), k);
    let mut coefs = DMatrix::zeros(w.n_rows(), d);
    for (r, t) in step.theta.iter().enumerate() {
        match t {
            Some(t) => {
                coefs.row_mut(r).copy_from(&t.rows(0, d).transpose());
                loadings.row_mut(r).copy_from(&t.rows(d, k).transpose());
            }
            None => {
                dropped.insert(w.rows[r]);
                coefs.row_mut(r).fill(f64::NAN);
                loadings.row_mut(r).fill(f64::NAN);
            }
        }
    }
    let scaled = &cp * sqrt_n;
    Ok(FactorEstimate {
        k,
        scale: FactorScale::SqrtN,
        metabolites: w.rows.iter().map(|&g| ids[g].clone()).collect(),
        c_hat: scaled,
        c_perp: cp,
        loadings,
        coefs,
        omega_hat: DMatrix::zeros(d, k),
        iterations,
        converged,
        trace,
        dropped: dropped.into_iter().map(|g| ids[g].clone()).collect(),
        n_clamped: w.n_clamped,
        omega_included: vec![true; w.n_rows()],
        omega_warning: None,
    })
}

/// Ω̂ = (Σ b̃_g ℓ̃_gᵀ)(Σ ℓ̃_g ℓ̃_gᵀ)⁻¹ over the included metabolites.
pub fn omega_closed_form(coefs: &DMatrix<f64>, loadings: &DMatrix<f64>, include: &[bool]) -> Result<DMatrix<f64>> {
    let (d, k) = (coefs.ncols(), loadings.ncols());
    let mut bl = DMatrix::<f64>::zeros(d, k);
    let mut ll = DMatrix::<f64>::zeros(k, k);
    for r in 0..coefs.nrows() {
        let (b, l) = (coefs.row(r), loadings.row(r));
        if !include[r] || l.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            continue;
        }
        bl += b.transpose() * l;
        ll += l.transpose() * l;
    }
    if k == 0 {
        return Ok(bl);
    }
    let inv = spd_inverse(&ll).ok_or_else(|| Error::Singular("sum of loading outer products".into()))?;
    Ok(bl * inv)
}

/// Sandwich Wald statistic for the interest coefficients of each metabolite
/// in the IPW regression on ẑ = (x, ĉ). Returns (stat, p) per row.
pub fn ipw_interest_tests(m: &ObservedMatrix, x: &DesignMatrix, w: &WeightMatrix, fe: &FactorEstimate) -> Vec<(f64, f64)> {
    let z = fe.z_hat(x);
    let zt = z.transpose();
    let q = zt.nrows();
    let d1 = x.n_interest();
    map_indexed(w.n_rows(), |r| {
        let y = m.row(w.rows[r]);
        let wr = w.row(r);
        let Some((theta, _)) = wls(&zt, y, wr) else {
            return (f64::NAN, 1.0);
        };
        let mut bread = DMatrix::<f64>::zeros(q, q);
        let mut meat = DMatrix::<f64>::zeros(q, q);
        for (i, zi) in zt.column_iter().enumerate() {
            if wr[i] == 0.0 {
                continue;
            }
            let e = y[i] - zi.dot(&theta);
            let outer = zi * zi.transpose();
            bread += &outer * wr[i];
            meat += outer * (wr[i] * wr[i] * e * e);
        }
        let Some(binv) = spd_inverse(&bread) else {
            return (f64::NAN, 1.0);
        };
        let v = &binv * meat * &binv;
        let vb = v.view((0, 0), (d1, d1)).into_owned();
        let beta = theta.rows(0, d1).into_owned();
        match spd_inverse(&vb) {
            Some(vi) => {
                let stat = (beta.transpose() * vi * &beta)[(0, 0)];
                (stat, chi2_sf(stat, d1 as f64))
            }
            None => (f64::NAN, 1.0),
        }
    })
}

/// Ω̂ by the closed form, then `cfg.refine_iters` rounds that exclude
/// metabolites with a significant interest effect. Updates `fe` in place.
pub fn estimate_omega(fe: &mut FactorEstimate, m: &ObservedMatrix, x: &DesignMatrix, w: &WeightMatrix, cfg: &FactorConfig) -> Result<DMatrix<f64>> {
    let rows = fe.coefs.nrows();
    if w.n_rows() != rows {
        return Err(Error::InvalidInput("weights and factor estimate cover different metabolites".into()));
    }
    let mut include = vec![true; rows];
    let mut omega = omega_closed_form(&fe.coefs, &fe.loadings, &include)?;
    fe.set_omega(x, omega.clone());
    fe.omega_warning = None;
    for round in 0..cfg.refine_iters {
        if fe.k == 0 {
            break;
        }
        let tests = ipw_interest_tests(m, x, w, fe);
        let p: Vec<f64> = tests.iter().map(|t| t.1).collect();
        let qv = qvalues(&p, cfg.qvalue_method);
        let next: Vec<bool> = qv.iter().map(|&q| q > cfg.q_thresh).collect();
        if !next.iter().any(|&b| b) {
            fe.omega_warning = Some(format!("refinement round {} would exclude every metabolite; kept the previous estimate", round + 1));
            break;
        }
        match omega_closed_form(&fe.coefs, &fe.loadings, &next) {
            Ok(o) => {
                omega = o;
                include = next;
                fe.set_omega(x, omega.clone());
            }
            Err(_) => {
                fe.omega_warning = Some(format!("refinement round {} left a singular loading matrix; kept the previous estimate", round + 1));
                break;
            }
        }
    }
    fe.omega_included = include;
    Ok(omega)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfoundingTest {
    pub covariate: String,
    pub stat: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Ω̂_jᵀΩ̂_j / [(XᵀX)⁻¹]_jj against χ²_K.
pub fn test_confounding(omega_hat: &DMatrix<f64>, x: &DesignMatrix, j: usize) -> Result<ConfoundingTest> {
    if !x.interest_cols().contains(&j) {
        return Err(Error::InvalidInput(format!("column {j} is not a covariate of interest")));
    }
    let k = omega_hat.ncols();
    let row = omega_hat.row(j);
    let stat = row.dot(&row) / x.gram_inverse()[(j, j)];
    Ok(ConfoundingTest {
        covariate: x.names()[j].clone(),
        stat,
        df: k,
        p_value: if k == 0 { 1.0 } else { chi2_sf(stat, k as f64) },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelAnalysis {
    pub k: usize,
    pub singular_values: Vec<f64>,
    pub thresholds: Vec<f64>,
}

/// Parallel analysis on the complete block with X projected out: count the
/// leading singular values that strictly exceed the permutation quantile.
pub fn parallel_analysis(m: &ObservedMatrix, part: &MetabolitePartition, x: &DesignMatrix, cfg: &FactorConfig) -> Result<ParallelAnalysis> {
    if part.complete.len() < 2 {
        return Err(Error::TooFewComplete { needed: 2, have: part.complete.len() });
    }
    if cfg.n_perm == 0 {
        return Err(Error::InvalidInput("parallel analysis needs at least one permutation".into()));
    }
    let q = col_basis(x.x());
    let residual = |mut a: DMatrix<f64>| {
        // a is n × p_c here.
        project_out(&q, &mut a);
        a
    };
    let base = residual(centered_complete_block(m, &part.complete).transpose());
    let sv = singular_values(&base);
    let n = base.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perm_sv: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_perm);
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.n_perm {
        let mut a = base.clone();
        for j in 0..a.ncols() {
            idx.shuffle(&mut rng);
            let col: Vec<f64> = idx.iter().map(|&i| base[(i, j)]).collect();
            a.column_mut(j).copy_from_slice(&col);
        }
        perm_sv.push(singular_values(&residual(a)));
    }
    let usable = (n - x.n_cols()).min(part.complete.len());
    let mut thresholds = Vec::with_capacity(usable);
    let mut k = 0;
    let mut counting = true;
    for c in 0..usable {
        let mut vals: Vec<f64> = perm_sv.iter().map(|s| s[c]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let thr = quantile_sorted(&vals, cfg.perm_quantile);
        thresholds.push(thr);
        if counting && sv[c] > thr {
            k += 1;
        } else {
            counting = false;
        }
    }
    Ok(ParallelAnalysis {
        k,
        singular_values: sv[..usable].to_vec(),
        thresholds,
    })
}

/// Number of factors by parallel analysis; an error when none are found.
pub fn select_k(m: &ObservedMatrix, part: &MetabolitePartition, x: &DesignMatrix, cfg: &FactorConfig) -> Result<usize> {
    match parallel_analysis(m, part, x, cfg)?.k {
        0 => Err(Error::NoFactors),
        k => Ok(k),
    }
}

/// Weights, initialization, alternating fit and Ω̂ in one call.
pub fn estimate_factors(
    m: &ObservedMatrix,
    part: &MetabolitePartition,
    x: &DesignMatrix,
    mech: &MechanismEstimate,
    k: usize,
    cfg: &FactorConfig,
) -> Result<(FactorEstimate, WeightMatrix)> {
    let w = compute_weights(m, part, mech, cfg.max_weight)?;
    let init = init_subspace(m, part, x, k)?;
    let mut fe = fit_factors(m, x, &w, k, &init, cfg)?;
    estimate_omega(&mut fe, m, x, &w, cfg)?;
    Ok((fe, w))
}
