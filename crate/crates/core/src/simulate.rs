//! Synthetic data under the missing-not-at-random factor model, imputation
//! baselines and evaluation metrics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{partition_metabolites, DesignMatrix, MetaboliteClass, MetabolitePartition, ObservedMatrix};
use crate::diffabund::DaTable;
use crate::error::{Error, Result};
use crate::factor::{estimate_omega, fit_factors, init_subspace, FactorConfig, WeightMatrix};
use crate::fdr::bh;
use crate::linalg::{normal_two_sided, top_right_singular_vectors};
use crate::selection::SelectionCdf;

/// Mixture weight on zero and slab variance for one factor's loadings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadingSpec {
    pub pi: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub p: usize,
    pub n: usize,
    pub k: usize,
    pub frac_nonzero_beta: f64,
    pub beta_sd: f64,
    pub mu_alpha: f64,
    pub alpha_log_sd: f64,
    pub delta_mean: f64,
    pub delta_sd: f64,
    pub mu_mean: f64,
    pub mu_sd: f64,
    /// Shape and rate of the Gamma law of σ².
    pub sigma_gamma_shape: f64,
    pub confounding_a: f64,
    /// Empty means "derive from n and k" (see [`SimConfig::default_loadings`]).
    pub loading_spec: Vec<LoadingSpec>,
    pub truth_cdf: SelectionCdf,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

/// Log scale μ_α at which Z with CDF Ψ̃{exp(μ_α) x} has unit variance.
pub fn unit_variance_log_scale(cdf: &SelectionCdf) -> f64 {
    0.5 * cdf.variance().ln()
}

/// a such that the population R² of the treatment on the two shifted factors is `r2`.
pub fn confounding_for_r2(r2: f64) -> f64 {
    // R² = 0.5a²/(1 + 0.5a²) for a balanced 0/1 treatment and two shifted factors
    (2.0 * r2 / (1.0 - r2)).sqrt()
}

impl SimConfig {
    /// Desk-scale design: p = 400, n = 300, K = 5, logistic truth and
    /// confounding with R² = 0.6.
    pub fn desk(seed: u64) -> Self {
        let truth_cdf = SelectionCdf::logistic();
        Self {
            p: 400,
            n: 300,
            k: 5,
            frac_nonzero_beta: 0.2,
            beta_sd: 0.4,
            mu_alpha: unit_variance_log_scale(&truth_cdf),
            alpha_log_sd: 0.4,
            delta_mean: 16.0,
            delta_sd: 1.2,
            mu_mean: 18.0,
            mu_sd: 5.0,
            sigma_gamma_shape: 25.0,
            confounding_a: confounding_for_r2(0.6),
            loading_spec: Vec::new(),
            truth_cdf,
            seed,
        }
    }

    /// Full-size design with p = 1200, n = 600 and K = 10.
    pub fn full(seed: u64) -> Self {
        Self {
            p: 1200,
            n: 600,
            k: 10,
            ..Self::desk(seed)
        }
    }

    /// Loadings whose eigenvalues λ_k ≈ (1 − π_k)τ_k² fall from 0.8 to
    /// n^{-0.47}, with log λ_k linear in t^{0.3} for t = (k − 1)/(K − 1) so
    /// that one dominant factor is followed by a cluster of weak ones. π_k
    /// rises linearly from 0 to 0.5.
    pub fn default_loadings(n: usize, k: usize) -> Vec<LoadingSpec> {
        let lo = (n as f64).powf(-0.47);
        let hi = 0.8f64;
        (0..k)
            .map(|j| {
                let t = if k > 1 { j as f64 / (k - 1) as f64 } else { 0.0 };
                let lambda = hi * (lo / hi).powf(t.powf(LOADING_DECAY));
                let pi = 0.5 * t;
                LoadingSpec {
                    pi,
                    tau: (lambda / (1.0 - pi)).sqrt(),
                }
            })
            .collect()
    }

    pub fn loadings(&self) -> Vec<LoadingSpec> {
        if self.loading_spec.is_empty() {
            Self::default_loadings(self.n, self.k)
        } else {
            self.loading_spec.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("simulation config: {m}")));
        if self.p == 0 || self.n < 4 {
            return bad("need p >= 1 and n >= 4");
        }
        if !(0.0..=1.0).contains(&self.frac_nonzero_beta) {
            return bad("frac_nonzero_beta must be in [0, 1]");
        }
        for (name, v) in [
            ("beta_sd", self.beta_sd),
            ("alpha_log_sd", self.alpha_log_sd),
            ("delta_sd", self.delta_sd),
            ("mu_sd", self.mu_sd),
            ("sigma_gamma_shape", self.sigma_gamma_shape),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be > 0"));
            }
        }
        let ls = self.loadings();
        if ls.len() != self.k {
            return bad("loading_spec must have one entry per factor");
        }
        if ls.iter().any(|l| !(0.0..=1.0).contains(&l.pi) || !(l.tau > 0.0)) {
            return bad("loading mixture weights must be in [0, 1] and scales > 0");
        }
        if !self.confounding_a.is_finite() || !self.mu_alpha.is_finite() {
            return bad("non-finite parameter");
        }
        Ok(())
    }
}

/// Everything drawn by the generator.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub beta: Vec<f64>,
    pub ell: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub delta: Vec<f64>,
    pub x: Vec<f64>,
    /// Complete (pre-missingness) p × n data, row-major.
    pub y_full: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub truth: SimTruth,
    pub observed: ObservedMatrix,
    pub design: DesignMatrix,
}

const LOADING_DECAY: f64 = 0.3;

pub fn metabolite_ids(p: usize) -> Vec<String> {
    (1..=p).map(|g| format!("m{g}")).collect()
}

pub fn sample_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("s{i}")).collect()
}

/// Balanced 0/1 treatment: the first ⌊n/2⌋ samples are treated.
pub fn treatment(n: usize) -> Vec<f64> {
    (0..n).map(|i| if i < n / 2 { 1.0 } else { 0.0 }).collect()
}

pub fn generate(cfg: &SimConfig) -> Result<SimDataset> {
    cfg.validate()?;
    let (p, n, k) = (cfg.p, cfg.n, cfg.k);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = treatment(n);

    let la = Normal::new(cfg.mu_alpha, cfg.alpha_log_sd).expect("validated");
    let dl = Normal::new(cfg.delta_mean, cfg.delta_sd).expect("validated");
    let mut alpha = Vec::with_capacity(p);
    let mut delta = Vec::with_capacity(p);
    for _ in 0..p {
        alpha.push(la.sample(&mut rng).exp());
        delta.push(dl.sample(&mut rng));
    }

    let mut c = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            let shift = if j < 2 { cfg.confounding_a * x[i] } else { 0.0 };
            c[(i, j)] = shift + rng.sample::<f64, _>(StandardNormal);
        }
    }

    let specs = cfg.loadings();
    let mut ell = DMatrix::zeros(p, k);
    for g in 0..p {
        for (j, s) in specs.iter().enumerate() {
            if rng.random::<f64>() >= s.pi {
                ell[(g, j)] = s.tau * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    let mn = Normal::new(cfg.mu_mean, cfg.mu_sd).expect("validated");
    let gam = Gamma::new(cfg.sigma_gamma_shape, 1.0 / cfg.sigma_gamma_shape).expect("validated");
    let mut mu = Vec::with_capacity(p);
    let mut sigma = Vec::with_capacity(p);
    for _ in 0..p {
        mu.push(mn.sample(&mut rng));
        sigma.push(gam.sample(&mut rng).sqrt());
    }

    let mut beta = Vec::with_capacity(p);
    for _ in 0..p {
        let b = if rng.random::<f64>() < cfg.frac_nonzero_beta {
            cfg.beta_sd * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        beta.push(b);
    }

    let lc = &ell * c.transpose();
    let mut y_full = vec![0.0; p * n];
    for g in 0..p {
        for i in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            y_full[g * n + i] = mu[g] + x[i] * beta[g] + lc[(g, i)] + sigma[g] * e;
        }
    }

    let mut y = y_full.clone();
    let mut mask = vec![true; p * n];
    for g in 0..p {
        for i in 0..n {
            let pr = cfg.truth_cdf.cdf(alpha[g] * (y_full[g * n + i] - delta[g]));
            if rng.random::<f64>() >= pr {
                mask[g * n + i] = false;
                y[g * n + i] = f64::NAN;
            }
        }
    }

    let observed = ObservedMatrix::from_parts_unchecked(p, n, y, mask, metabolite_ids(p), sample_ids(n));
    let design = DesignMatrix::with_intercept(&DMatrix::from_column_slice(n, 1, &x), vec!["treatment".into()])?;
    Ok(SimDataset {
        truth: SimTruth {
            beta,
            ell,
            c,
            mu,
            sigma,
            alpha,
            delta,
            x,
            y_full,
        },
        observed,
        design,
    })
}

/// Fills each metabolite's missing cells with `scale_a` times its observed minimum.
/// Metabolites with nothing observed are left as they are.
pub fn impute_minimum(m: &ObservedMatrix, scale_a: f64) -> Result<ObservedMatrix> {
    let (p, n) = (m.n_metabolites(), m.n_samples());
    let mut y = Vec::with_capacity(p * n);
    let mut mask = Vec::with_capacity(p * n);
    for g in 0..p {
        let min = m.observed(g).fold(f64::INFINITY, f64::min);
        if !min.is_finite() {
            y.extend_from_slice(m.row(g));
            mask.extend_from_slice(m.mask_row(g));
            continue;
        }
        let fill = scale_a * min;
        y.extend(m.row(g).iter().zip(m.mask_row(g)).map(|(&v, &o)| if o { v } else { fill }));
        mask.extend(std::iter::repeat_n(true, n));
    }
    Ok(ObservedMatrix::from_parts_unchecked(p, n, y, mask, m.metabolite_ids().to_vec(), m.sample_ids().to_vec()))
}

#[derive(Debug, Clone)]
pub struct SvdImputation {
    pub matrix: ObservedMatrix,
    pub iterations: usize,
    pub converged: bool,
    /// Observed-cell residual sum of squares after each iteration.
    pub objective: Vec<f64>,
}

/// Iterative hard impute with a row-mean plus rank-k model.
pub fn impute_svd(m: &ObservedMatrix, k: usize, max_iter: usize, tol: f64) -> Result<SvdImputation> {
    let (p, n) = (m.n_metabolites(), m.n_samples());
    if k >= p.min(n) {
        return Err(Error::InvalidInput(format!("rank {k} too large for a {p}x{n} matrix")));
    }
    let mut z = DMatrix::zeros(p, n);
    for g in 0..p {
        let cnt = m.n_observed(g);
        if cnt == 0 {
            return Err(Error::InvalidInput(format!("metabolite `{}` has no observed values", m.metabolite_ids()[g])));
        }
        let mean = m.observed(g).sum::<f64>() / cnt as f64;
        for i in 0..n {
            z[(g, i)] = m.get(g, i).unwrap_or(mean);
        }
    }
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let means: Vec<f64> = (0..p).map(|g| z.row(g).sum() / n as f64).collect();
        let mut centered = z.clone();
        for g in 0..p {
            centered.row_mut(g).add_scalar_mut(-means[g]);
        }
        let recon = if k > 0 {
            let (v, _) = top_right_singular_vectors(&centered, k);
            &centered * &v * v.transpose()
        } else {
            DMatrix::zeros(p, n)
        };
        let (mut change, mut scale, mut obj) = (0.0, 0.0, 0.0);
        for g in 0..p {
            for i in 0..n {
                let fit = recon[(g, i)] + means[g];
                if m.is_observed(g, i) {
                    obj += (z[(g, i)] - fit).powi(2);
                } else {
                    change += (z[(g, i)] - fit).powi(2);
                    scale += fit * fit;
                    z[(g, i)] = fit;
                }
            }
        }
        objective.push(obj);
        if change <= tol * tol * scale.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    let matrix = ObservedMatrix::from_parts_unchecked(
        p,
        n,
        z.transpose().as_slice().to_vec(),
        vec![true; p * n],
        m.metabolite_ids().to_vec(),
        m.sample_ids().to_vec(),
    );
    Ok(SvdImputation {
        matrix,
        iterations,
        converged,
        objective,
    })
}

/// One method's inference for the first covariate of interest on one metabolite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Call {
    pub metabolite: usize,
    pub estimate: f64,
    pub se: f64,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateAtQ {
    pub q: f64,
    pub fdp: f64,
    pub power: f64,
    pub n_rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub n_evaluated: usize,
    pub rates: Vec<RateAtQ>,
    pub coverage: f64,
    pub mean_width: f64,
    /// Coverage among the top decile of |β|.
    pub coverage_top_decile: f64,
    /// Fraction of null metabolites with p < 0.05.
    pub type1_05: f64,
}

pub const Z_975: f64 = 1.959_963_984_540_054;

/// FDP, power, 95% Wald coverage and type-I error on missing-class metabolites.
/// FDP with no rejections is defined as 0.
pub fn evaluate(truth: &SimTruth, part: &MetabolitePartition, method: &str, calls: &[Call], q_thresholds: &[f64]) -> MethodMetrics {
    let calls: Vec<&Call> = calls.iter().filter(|c| part.class_of(c.metabolite) == MetaboliteClass::Missing).collect();
    let nonnull = |c: &Call| truth.beta[c.metabolite] != 0.0;
    let n_true = calls.iter().filter(|c| nonnull(c)).count();
    let rates = q_thresholds
        .iter()
        .map(|&q| {
            let rej: Vec<&&Call> = calls.iter().filter(|c| c.q <= q).collect();
            let false_rej = rej.iter().filter(|c| !nonnull(c)).count();
            let true_rej = rej.len() - false_rej;
            RateAtQ {
                q,
                fdp: if rej.is_empty() { 0.0 } else { false_rej as f64 / rej.len() as f64 },
                power: if n_true == 0 { 0.0 } else { true_rej as f64 / n_true as f64 },
                n_rejected: rej.len(),
            }
        })
        .collect();
    let covers = |c: &Call| (c.estimate - truth.beta[c.metabolite]).abs() <= Z_975 * c.se;
    let nf = calls.len().max(1) as f64;
    let coverage = calls.iter().filter(|c| covers(c)).count() as f64 / nf;
    let mean_width = calls.iter().map(|c| 2.0 * Z_975 * c.se).sum::<f64>() / nf;
    let mut by_size: Vec<&&Call> = calls.iter().collect();
    by_size.sort_by(|a, b| truth.beta[b.metabolite].abs().partial_cmp(&truth.beta[a.metabolite].abs()).unwrap().then(a.metabolite.cmp(&b.metabolite)));
    let top = (calls.len() as f64 / 10.0).ceil() as usize;
    let coverage_top_decile = if top == 0 { f64::NAN } else { by_size[..top].iter().filter(|c| covers(c)).count() as f64 / top as f64 };
    let nulls: Vec<&&Call> = calls.iter().filter(|c| !nonnull(c)).collect();
    let type1_05 = if nulls.is_empty() { f64::NAN } else { nulls.iter().filter(|c| c.p < 0.05).count() as f64 / nulls.len() as f64 };
    MethodMetrics {
        method: method.to_owned(),
        n_evaluated: calls.len(),
        rates,
        coverage,
        mean_width,
        coverage_top_decile,
        type1_05,
    }
}

/// Root mean squared z-score of paired estimates of the same effect from two
/// independent datasets: z = (b₁ − b₂)/(v₁ + v₂)^{1/2}.
pub fn paired_rmsz(b1: &[f64], v1: &[f64], b2: &[f64], v2: &[f64]) -> f64 {
    let m = b1.len();
    let s: f64 = (0..m).map(|g| (b1[g] - b2[g]).powi(2) / (v1[g] + v2[g])).sum();
    (s / m as f64).sqrt()
}

/// Sample R² of regressing `x` on the columns of `c` (with intercept).
pub fn r_squared(x: &[f64], c: &DMatrix<f64>) -> f64 {
    let n = x.len();
    let mut z = DMatrix::from_element(n, c.ncols() + 1, 1.0);
    z.view_mut((0, 1), (n, c.ncols())).copy_from(c);
    let xv = nalgebra::DVector::from_column_slice(x);
    let coef = (z.transpose() * &z).cholesky().expect("full rank").solve(&(z.transpose() * &xv));
    let fit = &z * coef;
    let mean = xv.mean();
    let ss_res: f64 = (&xv - fit).iter().map(|e| e * e).sum();
    let ss_tot: f64 = xv.iter().map(|v| (v - mean).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// Wald calls for the first covariate of interest from OLS of each listed
/// metabolite on [X, extra]. `m` must be fully observed (e.g. imputed).
pub fn ols_calls(m: &ObservedMatrix, rows: &[usize], x: &DesignMatrix, extra: Option<&DMatrix<f64>>) -> Result<Vec<Call>> {
    let n = m.n_samples();
    let e = extra.map_or(0, |c| c.ncols());
    let d = x.n_cols();
    let mut z = DMatrix::zeros(n, d + e);
    z.columns_mut(0, d).copy_from(x.x());
    if let Some(c) = extra {
        z.columns_mut(d, e).copy_from(c);
    }
    let df = n as f64 - (d + e) as f64;
    if df <= 0.0 {
        return Err(Error::InvalidInput("no residual degrees of freedom".into()));
    }
    let inv = (z.transpose() * &z)
        .cholesky()
        .ok_or_else(|| Error::Singular("regression design".into()))?
        .inverse();
    let proj = &inv * z.transpose();
    let mut calls = Vec::with_capacity(rows.len());
    for &g in rows {
        if m.n_observed(g) != n {
            return Err(Error::InvalidInput(format!("metabolite `{}` is not fully observed", m.metabolite_ids()[g])));
        }
        let y = DVector::from_column_slice(m.row(g));
        let coef = &proj * &y;
        let rss = (&y - &z * &coef).norm_squared();
        let se = (rss / df * inv[(0, 0)]).sqrt();
        calls.push(Call {
            metabolite: g,
            estimate: coef[0],
            se,
            p: normal_two_sided(coef[0] / se),
            q: f64::NAN,
        });
    }
    fill_q(&mut calls);
    Ok(calls)
}

fn fill_q(calls: &mut [Call]) {
    let p: Vec<f64> = calls.iter().map(|c| c.p).collect();
    for (c, q) in calls.iter_mut().zip(bh(&p)) {
        c.q = q;
    }
}

/// Imputed data analysed as if complete: factors from the residual SVD,
/// Ω by the refined regression, then OLS on (x, ĉ).
pub fn imputed_factor_calls(imputed: &ObservedMatrix, part: &MetabolitePartition, x: &DesignMatrix, k: usize, cfg: &FactorConfig) -> Result<Vec<Call>> {
    let rows = part.analyzed();
    let sub = imputed.select_rows(&rows);
    let all: Vec<usize> = (0..rows.len()).collect();
    let subpart = partition_metabolites(&sub);
    let w = WeightMatrix::unit(&sub, &all);
    let init = init_subspace(&sub, &subpart, x, k)?;
    let mut fe = fit_factors(&sub, x, &w, k, &init, cfg)?;
    estimate_omega(&mut fe, &sub, x, &w, cfg)?;
    let mut calls = ols_calls(&sub, &all, x, Some(&fe.c_hat))?;
    for c in &mut calls {
        c.metabolite = rows[c.metabolite];
    }
    Ok(calls)
}

/// Calls for the first covariate of interest from a differential abundance
/// table, whose rows follow `part.analyzed()`.
pub fn da_calls(table: &DaTable, part: &MetabolitePartition) -> Vec<Call> {
    part.analyzed()
        .into_iter()
        .zip(&table.rows)
        .map(|(g, row)| match &row.fit {
            Ok(f) => Call {
                metabolite: g,
                estimate: f.theta[0],
                se: f.se(0),
                p: f.wald_p()[0],
                q: row.q[0],
            },
            Err(_) => Call {
                metabolite: g,
                estimate: f64::NAN,
                se: f64::NAN,
                p: 1.0,
                q: 1.0,
            },
        })
        .collect()
}
