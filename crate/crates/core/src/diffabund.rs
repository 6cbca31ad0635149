//! Per-metabolite coefficients: IPW start, Fisher scoring on the observed-data
//! likelihood, and Wald inference.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{DesignMatrix, MetaboliteClass, MetabolitePartition, ObservedMatrix};
use crate::error::{Error, Result};
use crate::factor::{compute_weights, test_confounding, wls, ConfoundingTest, FactorEstimate};
use crate::fdr::{qvalues, QValueMethod};
use crate::linalg::{normal_two_sided, serde_rows};
use crate::mechanism::MechanismEstimate;
use crate::par::map_indexed;
use crate::quadrature::{miss_prob_pair, observation_moments, QuadratureRule};
use crate::selection::SelectionCdf;

/// Selection parameters of one metabolite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechParams {
    pub alpha: f64,
    pub delta: f64,
}

/// One metabolite's data and model. `mech = None` means the metabolite is
/// treated as fully observed: missing cells (if any) are ignored.
#[derive(Debug, Clone, Copy)]
pub struct Likelihood<'a> {
    pub id: &'a str,
    pub y: &'a [f64],
    pub mask: &'a [bool],
    pub z: &'a DMatrix<f64>,
    pub mech: Option<MechParams>,
    pub cdf: &'a SelectionCdf,
    pub rule: &'a QuadratureRule,
}

/// Per-sample score contributions with respect to (μ_i, σ) and expected
/// information entries a_i = E[−∂²/∂μ²], b_i = E[−∂²/∂μ∂σ], c_i = E[−∂²/∂σ²].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTerms {
    pub s_mu: Vec<f64>,
    pub s_sigma: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl<'a> Likelihood<'a> {
    pub fn n_params(&self) -> usize {
        self.z.ncols() + 1
    }

    fn check(&self, theta: &[f64], sigma: f64) -> Result<()> {
        let n = self.y.len();
        if self.mask.len() != n || self.z.nrows() != n || theta.len() != self.z.ncols() {
            return Err(Error::InvalidInput(format!("metabolite `{}`: dimension mismatch", self.id)));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("metabolite `{}`: sigma must be positive", self.id)));
        }
        Ok(())
    }

    fn means(&self, theta: &[f64]) -> DVector<f64> {
        self.z * DVector::from_column_slice(theta)
    }

    /// Observed-data log-likelihood; −∞ when a missing cell has a numerically
    /// zero probability of being missing.
    pub fn loglik(&self, theta: &[f64], sigma: f64) -> Result<f64> {
        self.check(theta, sigma)?;
        let mu = self.means(theta);
        let ls = sigma.ln();
        let mut ll = 0.0;
        for i in 0..self.y.len() {
            if self.mask[i] {
                let e = (self.y[i] - mu[i]) / sigma;
                ll -= ls + 0.5 * e * e;
            } else if let Some(mp) = self.mech {
                let (_, qbar) = miss_prob_pair(self.cdf, mp.alpha, mp.delta, mu[i], sigma, self.rule);
                if qbar <= 0.0 {
                    return Ok(f64::NEG_INFINITY);
                }
                ll += qbar.ln();
            }
        }
        Ok(ll)
    }

    pub fn sample_terms(&self, theta: &[f64], sigma: f64) -> Result<SampleTerms> {
        self.check(theta, sigma)?;
        let n = self.y.len();
        let mu = self.means(theta);
        let mut t = SampleTerms {
            s_mu: vec![0.0; n],
            s_sigma: vec![0.0; n],
            a: vec![0.0; n],
            b: vec![0.0; n],
            c: vec![0.0; n],
        };
        let s2 = sigma * sigma;
        for i in 0..n {
            if self.mask[i] {
                let e = (self.y[i] - mu[i]) / sigma;
                t.s_mu[i] = e / sigma;
                t.s_sigma[i] = (e * e - 1.0) / sigma;
            }
            match self.mech {
                None => {
                    if self.mask[i] {
                        t.a[i] = 1.0 / s2;
                        t.c[i] = 2.0 / s2;
                    }
                }
                Some(mp) => {
                    let mo = observation_moments(self.cdf, mp.alpha, mp.delta, mu[i], sigma, self.rule);
                    if !(mo.q_bar > 0.0) {
                        return Err(Error::Singular(format!(
                            "metabolite `{}`: sample {i} has no probability of being missing at the current parameters",
                            self.id
                        )));
                    }
                    if !self.mask[i] {
                        t.s_mu[i] = -mo.dq_dmu / mo.q_bar;
                        t.s_sigma[i] = -mo.dq_dsigma / mo.q_bar;
                    }
                    t.a[i] = mo.m_e2 / s2 + mo.dq_dmu * mo.dq_dmu / mo.q_bar;
                    t.b[i] = mo.m_e3 / s2 + mo.dq_dmu * mo.dq_dsigma / mo.q_bar;
                    t.c[i] = mo.m_e4 / s2 + mo.dq_dsigma * mo.dq_dsigma / mo.q_bar;
                }
            }
        }
        Ok(t)
    }

    pub fn score_and_info(&self, theta: &[f64], sigma: f64) -> Result<ScoreInfo> {
        let t = self.sample_terms(theta, sigma)?;
        Ok(assemble(self.z, &t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreInfo {
    pub score: DVector<f64>,
    pub info: DMatrix<f64>,
    /// A ridge of 1e-8·trace was added because the information was not
    /// positive definite.
    pub ridged: bool,
}

fn assemble(z: &DMatrix<f64>, t: &SampleTerms) -> ScoreInfo {
    let (n, q) = (z.nrows(), z.ncols());
    let mut score = DVector::zeros(q + 1);
    let mut info = DMatrix::zeros(q + 1, q + 1);
    let mut za = z.clone();
    for i in 0..n {
        za.row_mut(i).scale_mut(t.a[i]);
    }
    info.view_mut((0, 0), (q, q)).copy_from(&(z.transpose() * &za));
    for i in 0..n {
        let zi = z.row(i);
        for r in 0..q {
            score[r] += t.s_mu[i] * zi[r];
            info[(r, q)] += t.b[i] * zi[r];
        }
        score[q] += t.s_sigma[i];
        info[(q, q)] += t.c[i];
    }
    for r in 0..q {
        info[(q, r)] = info[(r, q)];
    }
    let sym = (&info + info.transpose()) * 0.5;
    let mut info = sym;
    let ridged = info.clone().cholesky().is_none();
    if ridged {
        let ridge = 1e-8 * info.trace().abs().max(f64::MIN_POSITIVE);
        for r in 0..=q {
            info[(r, r)] += ridge;
        }
    }
    ScoreInfo { score, info, ridged }
}

/// θ̂ = (Σ ŵ ẑẑᵀ)⁻¹ Σ ŵ ẑ y and σ̂² = Σ ŵ (y − θ̂ᵀẑ)² / Σ ŵ.
pub fn ipw_fit(id: &str, y: &[f64], z: &DMatrix<f64>, w: &[f64]) -> Result<(Vec<f64>, f64)> {
    if y.len() != z.nrows() || w.len() != y.len() {
        return Err(Error::InvalidInput(format!("metabolite `{id}`: dimension mismatch")));
    }
    let (theta, rss) = wls(&z.transpose(), y, w).ok_or_else(|| Error::Singular(format!("weighted normal equations of metabolite `{id}`")))?;
    let sw: f64 = w.iter().sum();
    Ok((theta.iter().copied().collect(), (rss / sw).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaConfig {
    pub max_iter: usize,
    pub tol: f64,
    /// Allowed decrease of the log-likelihood before a step is halved.
    pub backtrack_tol: f64,
    pub max_halvings: usize,
    pub quadrature_order: usize,
    pub max_weight: f64,
    pub qvalue_method: QValueMethod,
}

impl Default for DaConfig {
    fn default() -> Self {
        DaConfig {
            max_iter: 10,
            tol: 1e-8,
            backtrack_tol: 1e-8,
            max_halvings: 20,
            quadrature_order: QuadratureRule::DEFAULT_ORDER,
            max_weight: 50.0,
            qvalue_method: QValueMethod::BenjaminiHochberg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefInference {
    /// β̂ then ℓ̂.
    pub theta: Vec<f64>,
    pub sigma: f64,
    /// Inverse expected information for (θ, σ).
    #[serde(with = "serde_rows")]
    pub cov: DMatrix<f64>,
    pub n_iter: usize,
    pub converged: bool,
    pub flags: Vec<String>,
    pub n_interest: usize,
}

impl CoefInference {
    pub fn se(&self, j: usize) -> f64 {
        self.cov[(j, j)].max(0.0).sqrt()
    }

    /// Two-sided Wald p-values for the covariates of interest.
    pub fn wald_p(&self) -> Vec<f64> {
        (0..self.n_interest).map(|j| normal_two_sided(self.theta[j] / self.se(j))).collect()
    }
}

/// Fisher scoring from the IPW estimate.
pub fn fisher_fit(lik: &Likelihood, w: &[f64], n_interest: usize, cfg: &DaConfig) -> Result<CoefInference> {
    let (theta0, sigma0) = ipw_fit(lik.id, lik.y, lik.z, w)?;
    fisher_from(lik, theta0, sigma0, n_interest, cfg)
}

pub fn fisher_from(lik: &Likelihood, theta0: Vec<f64>, sigma0: f64, n_interest: usize, cfg: &DaConfig) -> Result<CoefInference> {
    let q = lik.z.ncols();
    let mut eta: Vec<f64> = theta0;
    eta.push(sigma0);
    let mut flags = Vec::new();
    let mut ll = lik.loglik(&eta[..q], eta[q])?;
    let mut converged = false;
    let mut n_iter = 0;
    'outer: while n_iter < cfg.max_iter {
        let si = lik.score_and_info(&eta[..q], eta[q])?;
        if si.ridged && !flags.iter().any(|f| f == "info_ridge") {
            flags.push("info_ridge".into());
        }
        let step = si
            .info
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("information matrix of metabolite `{}`", lik.id)))?
            .solve(&si.score);
        let mut t = 1.0;
        let mut halvings = 0;
        loop {
            let cand: Vec<f64> = eta.iter().zip(step.iter()).map(|(e, s)| e + t * s).collect();
            if cand[q] > 0.0 {
                let cl = lik.loglik(&cand[..q], cand[q])?;
                if cl >= ll - cfg.backtrack_tol {
                    eta = cand;
                    ll = cl;
                    break;
                }
            }
            halvings += 1;
            if halvings > cfg.max_halvings {
                flags.push("step_halving_exhausted".into());
                break 'outer;
            }
            t *= 0.5;
        }
        n_iter += 1;
        if t * step.norm() <= cfg.tol {
            converged = true;
            break;
        }
    }
    let si = lik.score_and_info(&eta[..q], eta[q])?;
    if si.ridged && !flags.iter().any(|f| f == "info_ridge") {
        flags.push("info_ridge".into());
    }
    let cov = si
        .info
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("information matrix of metabolite `{}`", lik.id)))?
        .inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    if !converged {
        flags.push("not_converged".into());
    }
    let sigma = eta.pop().unwrap();
    Ok(CoefInference {
        theta: eta,
        sigma,
        cov,
        n_iter,
        converged,
        flags,
        n_interest,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaRow {
    pub metabolite: String,
    pub class: MetaboliteClass,
    pub fit: std::result::Result<CoefInference, String>,
    /// q-values per covariate of interest across all rows.
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaTable {
    pub covariates: Vec<String>,
    pub confounding: Vec<ConfoundingTest>,
    pub rows: Vec<DaRow>,
}

/// Shared inputs for one metabolite's likelihood, keyed by row of the factor
/// estimate.
pub struct Analysis<'a> {
    pub m: &'a ObservedMatrix,
    pub part: &'a MetabolitePartition,
    pub mech: &'a MechanismEstimate,
    pub z: DMatrix<f64>,
    pub rule: QuadratureRule,
}

impl<'a> Analysis<'a> {
    pub fn new(m: &'a ObservedMatrix, part: &'a MetabolitePartition, x: &DesignMatrix, mech: &'a MechanismEstimate, fe: &FactorEstimate, quadrature_order: usize) -> Result<Self> {
        if fe.n_samples() != m.n_samples() || x.n_rows() != m.n_samples() {
            return Err(Error::InvalidInput("factor estimate, design and data disagree on the number of samples".into()));
        }
        Ok(Analysis {
            m,
            part,
            mech,
            z: fe.z_hat(x),
            rule: QuadratureRule::new(quadrature_order)?,
        })
    }

    pub fn likelihood(&self, g: usize) -> Result<Likelihood<'_>> {
        let id = &self.m.metabolite_ids()[g];
        let mech = match self.part.class_of(g) {
            MetaboliteClass::Missing => {
                let rec = self.mech.get(id).ok_or_else(|| Error::StoreMismatch(format!("no mechanism estimate for metabolite `{id}`")))?;
                Some(MechParams { alpha: rec.alpha, delta: rec.delta })
            }
            _ => None,
        };
        Ok(Likelihood {
            id,
            y: self.m.row(g),
            mask: self.m.mask_row(g),
            z: &self.z,
            mech,
            cdf: &self.mech.cdf,
            rule: &self.rule,
        })
    }
}

/// Fisher-scoring fits for every analysed metabolite.
pub fn fit_all(an: &Analysis, x: &DesignMatrix, cfg: &DaConfig) -> Result<Vec<std::result::Result<CoefInference, String>>> {
    let rows = an.part.analyzed();
    let w = compute_weights(an.m, an.part, an.mech, cfg.max_weight)?;
    Ok(map_indexed(rows.len(), |r| {
        let g = rows[r];
        an.likelihood(g)
            .and_then(|lik| fisher_fit(&lik, w.row(r), x.n_interest(), cfg))
            .map_err(|e| e.to_string())
    }))
}

/// Differential abundance for every analysed metabolite plus the
/// factor/covariate dependence test for each covariate of interest.
pub fn run_da(
    m: &ObservedMatrix,
    part: &MetabolitePartition,
    x: &DesignMatrix,
    mech: &MechanismEstimate,
    fe: &FactorEstimate,
    cfg: &DaConfig,
) -> Result<DaTable> {
    let an = Analysis::new(m, part, x, mech, fe, cfg.quadrature_order)?;
    let fits = fit_all(&an, x, cfg)?;
    let rows = part.analyzed();
    let d1 = x.n_interest();
    let mut qs = vec![Vec::new(); rows.len()];
    for j in 0..d1 {
        let p: Vec<f64> = fits.iter().map(|f| f.as_ref().map(|c| c.wald_p()[j]).unwrap_or(f64::NAN)).collect();
        for (r, q) in qvalues(&p, cfg.qvalue_method).into_iter().enumerate() {
            qs[r].push(q);
        }
    }
    let confounding = x.interest_cols().map(|j| test_confounding(&fe.omega_hat, x, j)).collect::<Result<Vec<_>>>()?;
    let ids = m.metabolite_ids();
    Ok(DaTable {
        covariates: x.names()[..d1].to_vec(),
        confounding,
        rows: rows
            .iter()
            .zip(fits)
            .zip(qs)
            .map(|((&g, fit), q)| DaRow {
                metabolite: ids[g].clone(),
                class: part.class_of(g),
                fit,
                q,
            })
            .collect(),
    })
}

impl DaTable {
    pub fn write_to(&self, out: &mut impl Write, metadata: &[String]) -> Result<()> {
        for line in metadata {
            writeln!(out, "# {line}")?;
        }
        for t in &self.confounding {
            writeln!(out, "# confounding_test\tcovariate={}\tstat={:?}\tdf={}\tp={:?}", t.covariate, t.stat, t.df, t.p_value)?;
        }
        let mut header = vec!["metabolite".to_string(), "class".into()];
        for c in &self.covariates {
            header.extend([format!("beta_{c}"), format!("se_{c}"), format!("p_{c}"), format!("q_{c}")]);
        }
        header.extend(["sigma".into(), "n_iter".into(), "converged".into(), "flags".into()]);
        writeln!(out, "{}", header.join("\t"))?;
        for row in &self.rows {
            let mut cells = vec![row.metabolite.clone(), row.class.as_str().to_string()];
            match &row.fit {
                Ok(f) => {
                    let p = f.wald_p();
                    for j in 0..self.covariates.len() {
                        cells.extend([format!("{:?}", f.theta[j]), format!("{:?}", f.se(j)), format!("{:?}", p[j]), format!("{:?}", row.q[j])]);
                    }
                    let flags = if f.flags.is_empty() { "-".to_string() } else { f.flags.join(",") };
                    cells.extend([format!("{:?}", f.sigma), f.n_iter.to_string(), f.converged.to_string(), flags]);
                }
                Err(e) => {
                    for _ in &self.covariates {
                        cells.extend(["NA".into(), "NA".into(), "NA".into(), "NA".into()]);
                    }
                    cells.extend(["NA".into(), "0".into(), "false".into(), format!("error: {}", e.replace(['\t', '\n'], " "))]);
                }
            }
            writeln!(out, "{}", cells.join("\t"))?;
        }
        Ok(())
    }

    pub fn write(&self, path: &Path, metadata: &[String]) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f, metadata)?;
        f.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn toy(n: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => (i % 2) as f64,
            1 => 1.0,
            _ => rng.sample::<f64, _>(StandardNormal),
        });
        let y: Vec<f64> = (0..n).map(|i| 10.0 + 0.5 * z[(i, 0)] + 0.8 * z[(i, 2)] + rng.sample::<f64, _>(StandardNormal)).collect();
        (z, y)
    }

    fn mnar(y: &[f64], mp: MechParams, seed: u64) -> Vec<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cdf = SelectionCdf::default();
        y.iter().map(|&v| rng.random::<f64>() < cdf.cdf(mp.alpha * (v - mp.delta))).collect()
    }

    #[test]
    fn ipw_hand_case() {
        let z = DMatrix::from_element(3, 1, 1.0);
        let (t, s) = ipw_fit("m", &[1.0, 2.0, 6.0], &z, &[1.0, 1.0, 0.0]).unwrap();
        assert!((t[0] - 1.5).abs() < 1e-15 && (s - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ipw_weight_scale_invariance_and_ols() {
        let (z, y) = toy(40, 1);
        let (t1, _) = ipw_fit("m", &y, &z, &[1.0; 40]).unwrap();
        let (t2, _) = ipw_fit("m", &y, &z, &[2.0; 40]).unwrap();
        let ols = z.clone().svd(true, true).solve(&DVector::from_vec(y.clone()), 1e-14).unwrap();
        for j in 0..3 {
            assert!((t1[j] - t2[j]).abs() < 1e-12);
            assert!((t1[j] - ols[j]).abs() < 1e-10);
        }
        let z0 = DMatrix::zeros(4, 1);
        assert!(matches!(ipw_fit("m7", &[1.0; 4], &z0, &[1.0; 4]), Err(Error::Singular(s)) if s.contains("m7")));
    }

    #[test]
    fn gaussian_limits() {
        let (z, y) = toy(30, 2);
        let mask = vec![true; 30];
        let cdf = SelectionCdf::default();
        let rule = QuadratureRule::default();
        let lik = Likelihood { id: "m", y: &y, mask: &mask, z: &z, mech: None, cdf: &cdf, rule: &rule };
        let theta = [0.3, 9.0, 0.5];
        let sigma: f64 = 1.3;
        let mut closed = 0.0;
        for i in 0..30 {
            let r = y[i] - (z.row(i) * DVector::from_column_slice(&theta))[(0, 0)];
            closed += -sigma.ln() - r * r / (2.0 * sigma * sigma);
        }
        assert!((lik.loglik(&theta, sigma).unwrap() - closed).abs() < 1e-10);
        let si = lik.score_and_info(&theta, sigma).unwrap();
        let ztz = z.transpose() * &z / (sigma * sigma);
        assert!((si.info.view((0, 0), (3, 3)) - ztz).norm() < 1e-12);
        assert!((si.info[(3, 3)] - 60.0 / (sigma * sigma)).abs() < 1e-12);
        assert!(si.info.view((0, 3), (3, 1)).norm() == 0.0);
    }

    #[test]
    fn score_matches_finite_differences() {
        let (z, y) = toy(30, 3);
        let mp = MechParams { alpha: 1.2, delta: 10.0 };
        let mask = mnar(&y, mp, 4);
        let cdf = SelectionCdf::default();
        let rule = QuadratureRule::default();
        let lik = Likelihood { id: "m", y: &y, mask: &mask, z: &z, mech: Some(mp), cdf: &cdf, rule: &rule };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut eta = vec![rng.random_range(-1.0..1.0), rng.random_range(8.0..12.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0)];
            let si = lik.score_and_info(&eta[..3], eta[3]).unwrap();
            for k in 0..4 {
                let h = 1e-5;
                eta[k] += h;
                let up = lik.loglik(&eta[..3], eta[3]).unwrap();
                eta[k] -= 2.0 * h;
                let dn = lik.loglik(&eta[..3], eta[3]).unwrap();
                eta[k] += h;
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - si.score[k]).abs() <= 1e-6 * si.score[k].abs().max(1.0), "{k}: {fd} vs {}", si.score[k]);
            }
        }
    }

    #[test]
    fn fully_observed_matches_ols_in_one_step() {
        let (z, y) = toy(50, 6);
        let mask = vec![true; 50];
        let cdf = SelectionCdf::default();
        let rule = QuadratureRule::default();
        let lik = Likelihood { id: "m", y: &y, mask: &mask, z: &z, mech: None, cdf: &cdf, rule: &rule };
        let fit = fisher_fit(&lik, &[1.0; 50], 1, &DaConfig::default()).unwrap();
        let ztz_inv = (z.transpose() * &z).try_inverse().unwrap();
        let ols = &ztz_inv * z.transpose() * DVector::from_vec(y.clone());
        let rss: f64 = (DVector::from_vec(y) - &z * &ols).norm_squared();
        let s2 = rss / 50.0;
        for j in 0..3 {
            assert!((fit.theta[j] - ols[j]).abs() < 1e-8);
            for k in 0..3 {
                assert!((fit.cov[(j, k)] - s2 * ztz_inv[(j, k)]).abs() < 1e-8);
            }
        }
        assert!(fit.converged && fit.n_iter == 1);
    }

    #[test]
    fn mle_is_stationary_and_cov_is_psd() {
        let (z, y) = toy(200, 7);
        let mp = MechParams { alpha: 1.0, delta: 10.0 };
        let mask = mnar(&y, mp, 8);
        let cdf = SelectionCdf::default();
        let rule = QuadratureRule::default();
        let lik = Likelihood { id: "m", y: &y, mask: &mask, z: &z, mech: Some(mp), cdf: &cdf, rule: &rule };
        let w: Vec<f64> = (0..200).map(|i| if mask[i] { 1.0 / cdf.cdf(mp.alpha * (y[i] - mp.delta)) } else { 0.0 }).collect();
        let cfg = DaConfig { max_iter: 200, tol: 1e-11, ..Default::default() };
        let fit = fisher_fit(&lik, &w, 1, &cfg).unwrap();
        assert!(fit.converged);
        let si = lik.score_and_info(&fit.theta, fit.sigma).unwrap();
        assert!(si.score.norm() <= 1e-6, "{}", si.score.norm());
        assert!((&fit.cov - fit.cov.transpose()).norm() < 1e-12);
        assert!(fit.cov.symmetric_eigenvalues().min() > -1e-8);
        assert!(fit.sigma > 0.0);
    }

    #[test]
    fn loglik_falls_as_missingness_becomes_impossible() {
        let (z, y) = toy(20, 9);
        let mut mask = vec![true; 20];
        mask[0] = false;
        let cdf = SelectionCdf::default();
        let rule = QuadratureRule::default();
        let theta = [0.5, 10.0, 0.8];
        let mut last = f64::INFINITY;
        for a in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let lik = Likelihood { id: "m", y: &y, mask: &mask, z: &z, mech: Some(MechParams { alpha: a, delta: 5.0 }), cdf: &cdf, rule: &rule };
            let ll = lik.loglik(&theta, 1.0).unwrap();
            assert!(ll < last);
            last = ll;
        }
    }
}
