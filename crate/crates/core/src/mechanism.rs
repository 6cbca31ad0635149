//! Per-metabolite selection parameters (α, δ) by a grid-based Bayesian
//! generalized method of moments.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{MetabolitePartition, ObservedMatrix};
use crate::error::{Error, Result};
use crate::linalg::top_right_singular_vectors;
use crate::par::map_indexed;
use crate::selection::SelectionCdf;

pub const STORE_FORMAT: &str = "msnimble-mechanisms";
pub const STORE_VERSION: u32 = 1;

/// Candidate instruments: leading right singular vectors of the row-centred
/// complete-metabolite block, stored as unit-norm columns.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentSet {
    pub u: DMatrix<f64>,
    pub source: String,
}

impl InstrumentSet {
    pub fn n_candidates(&self) -> usize {
        self.u.ncols()
    }
}

/// Complete-class block with its (rare) missing cells filled by row means,
/// then row-centred.
pub(crate) fn centered_complete_block(m: &ObservedMatrix, rows: &[usize]) -> DMatrix<f64> {
    let n = m.n_samples();
    let mut a = DMatrix::zeros(rows.len(), n);
    for (r, &g) in rows.iter().enumerate() {
        let mean = m.observed(g).sum::<f64>() / m.n_observed(g).max(1) as f64;
        for (i, (&v, &obs)) in m.row(g).iter().zip(m.mask_row(g)).enumerate() {
            a[(r, i)] = if obs { v - mean } else { 0.0 };
        }
    }
    a
}

pub fn build_instruments(m: &ObservedMatrix, part: &MetabolitePartition, num_candidates: usize) -> Result<InstrumentSet> {
    if num_candidates < 2 {
        return Err(Error::InvalidInput("at least two candidate instruments are required".into()));
    }
    if part.complete.len() < num_candidates {
        return Err(Error::TooFewComplete {
            needed: num_candidates,
            have: part.complete.len(),
        });
    }
    if m.n_samples() <= num_candidates {
        return Err(Error::InvalidInput(format!("{} samples cannot support {num_candidates} instruments", m.n_samples())));
    }
    let a = centered_complete_block(m, &part.complete);
    let (u, _) = top_right_singular_vectors(&a, num_candidates);
    Ok(InstrumentSet {
        u,
        source: format!("first {num_candidates} principal components of {} complete metabolites", part.complete.len()),
    })
}

/// m_g(α, δ) = n^{-1/2} Σ_i u_i [1 − r_i / Ψ{α(y_i − δ)}].
pub fn moment_vector(y: &[f64], mask: &[bool], u: &DMatrix<f64>, alpha: f64, delta: f64, cdf: &SelectionCdf) -> Result<Vec<f64>> {
    let n = y.len();
    if mask.len() != n || u.nrows() != n {
        return Err(Error::InvalidInput("moment_vector: length mismatch".into()));
    }
    if !(alpha >= 0.0 && alpha.is_finite() && delta.is_finite()) {
        return Err(Error::InvalidInput(format!("invalid (alpha, delta) = ({alpha}, {delta})")));
    }
    let mut out = vec![0.0; u.ncols()];
    for i in 0..n {
        let factor = if mask[i] {
            let psi = cdf.cdf(alpha * (y[i] - delta));
            let f = 1.0 - 1.0 / psi;
            if !f.is_finite() {
                return Err(Error::SelectionUnderflow {
                    metabolite: String::new(),
                    sample: i,
                });
            }
            f
        } else {
            1.0
        };
        for (j, o) in out.iter_mut().enumerate() {
            *o += u[(i, j)] * factor;
        }
    }
    let s = (n as f64).sqrt();
    out.iter_mut().for_each(|v| *v /= s);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MechanismConfig {
    pub num_candidates: usize,
    pub n_instruments: usize,
    pub log_alpha_min: f64,
    pub log_alpha_max: f64,
    pub n_alpha: usize,
    pub n_delta: usize,
    /// The δ grid starts this many standard deviations below the observed minimum.
    pub delta_sd_below: f64,
    pub prior_log_alpha_mean: f64,
    pub prior_log_alpha_sd: f64,
    pub ridge: f64,
    pub min_observed: usize,
    /// Posterior mass on the grid boundary at or above which a metabolite is flagged.
    pub boundary_flag: f64,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        let lo = 0.05f64.ln();
        let hi = 5.0f64.ln();
        Self {
            num_candidates: 10,
            n_instruments: 3,
            log_alpha_min: lo,
            log_alpha_max: hi,
            n_alpha: 60,
            n_delta: 80,
            delta_sd_below: 2.0,
            prior_log_alpha_mean: 0.5 * (lo + hi),
            prior_log_alpha_sd: 1.0,
            ridge: 1e-8,
            min_observed: 5,
            boundary_flag: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismRecord {
    pub metabolite: String,
    pub alpha: f64,
    pub delta: f64,
    /// Posterior standard deviations of (α, δ).
    pub posterior_sd: [f64; 2],
    /// Euclidean norm of the moment vector at the posterior mean.
    pub moment_norm: f64,
    pub boundary_mass: f64,
    pub flagged: bool,
    /// Candidate instrument columns used for this metabolite.
    pub instruments: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismEstimate {
    pub cdf: SelectionCdf,
    pub config: MechanismConfig,
    pub records: Vec<MechanismRecord>,
}

#[derive(Serialize, Deserialize)]
struct MechanismStore {
    format: String,
    version: u32,
    #[serde(flatten)]
    estimate: MechanismEstimate,
}

impl MechanismEstimate {
    /// Index of records by metabolite id.
    pub fn by_id(&self) -> HashMap<&str, &MechanismRecord> {
        self.records.iter().map(|r| (r.metabolite.as_str(), r)).collect()
    }

    pub fn get(&self, id: &str) -> Option<&MechanismRecord> {
        self.records.iter().find(|r| r.metabolite == id)
    }

    pub fn n_flagged(&self) -> usize {
        self.records.iter().filter(|r| r.flagged).count()
    }

    pub fn to_json(&self) -> Result<String> {
        let store = MechanismStore {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            estimate: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&store)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        if v.get("format").and_then(|f| f.as_str()) != Some(STORE_FORMAT) {
            return Err(Error::StoreMismatch("not a mechanism store".into()));
        }
        let ver = v.get("version").and_then(|f| f.as_u64());
        if ver != Some(STORE_VERSION as u64) {
            return Err(Error::StoreMismatch(format!("unsupported mechanism store version {ver:?}")));
        }
        let store: MechanismStore = serde_json::from_value(v)?;
        Ok(store.estimate)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Loads and checks that the stored selection CDF is `expected`.
    pub fn load_expecting(path: &Path, expected: &SelectionCdf) -> Result<Self> {
        let est = Self::load(path)?;
        if est.cdf != *expected {
            return Err(Error::StoreMismatch(format!(
                "mechanisms were estimated with {} but {} was requested",
                est.cdf.label(),
                expected.label()
            )));
        }
        Ok(est)
    }
}

pub fn save_mechanisms(est: &MechanismEstimate, path: &Path) -> Result<()> {
    est.save(path)
}

pub fn load_mechanisms(path: &Path) -> Result<MechanismEstimate> {
    MechanismEstimate::load(path)
}

fn sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

/// Pick the `r` candidate columns most correlated (in absolute value) with
/// the observed values.
fn select_instruments(y: &[f64], mask: &[bool], u: &DMatrix<f64>, r: usize) -> Vec<usize> {
    let obs: Vec<usize> = (0..y.len()).filter(|&i| mask[i]).collect();
    let no = obs.len() as f64;
    let ym = obs.iter().map(|&i| y[i]).sum::<f64>() / no;
    let mut scored: Vec<(usize, f64)> = (0..u.ncols())
        .map(|j| {
            let um = obs.iter().map(|&i| u[(i, j)]).sum::<f64>() / no;
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for &i in &obs {
                let a = u[(i, j)] - um;
                let b = y[i] - ym;
                sxy += a * b;
                sxx += a * a;
                syy += b * b;
            }
            let c = if sxx > 0.0 && syy > 0.0 { (sxy / (sxx * syy).sqrt()).abs() } else { 0.0 };
            (j, c)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut keep: Vec<usize> = scored.into_iter().take(r).map(|(j, _)| j).collect();
    keep.sort_unstable();
    keep
}

/// −½ log|V| − ½ mᵀV⁻¹m at one grid point, or `None` if an observed cell
/// has vanishing selection probability.
fn grid_loglik<const R: usize>(y: &[f64], mask: &[bool], u: &[[f64; R]], alpha: f64, delta: f64, cdf: &SelectionCdf, ridge: f64) -> Option<f64> {
    let n = y.len();
    let mut sum = SVector::<f64, R>::zeros();
    let mut sq = SMatrix::<f64, R, R>::zeros();
    for i in 0..n {
        let f = if mask[i] {
            let psi = cdf.cdf(alpha * (y[i] - delta));
            let f = 1.0 - 1.0 / psi;
            if !f.is_finite() {
                return None;
            }
            f
        } else {
            1.0
        };
        let s = SVector::<f64, R>::from_fn(|j, _| u[i][j] * f);
        sum += s;
        sq.syger(1.0, &s, &s, 1.0);
    }
    let nf = n as f64;
    let mean = sum / nf;
    let mut v = sq / nf - mean * mean.transpose();
    v.fill_upper_triangle_with_lower_triangle();
    let add = ridge * v.trace() / R as f64;
    for j in 0..R {
        v[(j, j)] += add;
    }
    let m = sum / nf.sqrt();
    let chol = v.cholesky()?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let sol = chol.solve(&m);
    let ll = -0.5 * logdet - 0.5 * m.dot(&sol);
    ll.is_finite().then_some(ll)
}

fn estimate_one(id: &str, y: &[f64], mask: &[bool], inst: &InstrumentSet, cdf: &SelectionCdf, cfg: &MechanismConfig) -> Result<MechanismRecord> {
    let obs: Vec<f64> = y.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    if obs.len() < cfg.min_observed {
        return Err(Error::InvalidInput(format!("metabolite `{id}` has {} observed values, need {}", obs.len(), cfg.min_observed)));
    }
    let r = cfg.n_instruments.min(inst.n_candidates());
    if r != 3 {
        return Err(Error::InvalidInput("the mechanism estimator uses exactly three instruments per metabolite".into()));
    }
    let cols = select_instruments(y, mask, &inst.u, r);
    // An intercept moment pins the overall level of Ψ; centred instruments
    // alone only identify Ψ up to a multiplicative constant.
    let s0 = 1.0 / (y.len() as f64).sqrt();
    let u: Vec<[f64; 4]> = (0..y.len()).map(|i| [s0, inst.u[(i, cols[0])], inst.u[(i, cols[1])], inst.u[(i, cols[2])]]).collect();

    let mut sorted = obs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let y_sd = sd(&obs).max(1e-8);
    let prior_delta_mean = crate::linalg::quantile_sorted(&sorted, 0.1);
    let d_lo = sorted[0] - cfg.delta_sd_below * y_sd;
    let d_hi = *sorted.last().unwrap();
    let na = cfg.n_alpha;
    let nd = cfg.n_delta;
    let la = |a: usize| cfg.log_alpha_min + (cfg.log_alpha_max - cfg.log_alpha_min) * a as f64 / (na - 1) as f64;
    let dd = |d: usize| d_lo + (d_hi - d_lo) * d as f64 / (nd - 1) as f64;

    let mut logpost = vec![f64::NEG_INFINITY; na * nd];
    for a in 0..na {
        let lalpha = la(a);
        let alpha = lalpha.exp();
        let lp_a = -0.5 * ((lalpha - cfg.prior_log_alpha_mean) / cfg.prior_log_alpha_sd).powi(2);
        for d in 0..nd {
            let delta = dd(d);
            if let Some(ll) = grid_loglik(y, mask, &u, alpha, delta, cdf, cfg.ridge) {
                let lp_d = -0.5 * ((delta - prior_delta_mean) / y_sd).powi(2);
                logpost[a * nd + d] = ll + lp_a + lp_d;
            }
        }
    }
    let max = logpost.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::SelectionUnderflow {
            metabolite: id.to_owned(),
            sample: 0,
        });
    }
    let (mut z, mut ea, mut ed, mut eaa, mut edd, mut bmass) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for a in 0..na {
        let alpha = la(a).exp();
        for d in 0..nd {
            let w = (logpost[a * nd + d] - max).exp();
            let delta = dd(d);
            z += w;
            ea += w * alpha;
            ed += w * delta;
            eaa += w * alpha * alpha;
            edd += w * delta * delta;
            if a == 0 || a == na - 1 || d == 0 || d == nd - 1 {
                bmass += w;
            }
        }
    }
    let alpha = ea / z;
    let delta = ed / z;
    let sda = (eaa / z - alpha * alpha).max(0.0).sqrt();
    let sdd = (edd / z - delta * delta).max(0.0).sqrt();
    let bmass = bmass / z;
    let full_u = DMatrix::from_fn(y.len(), 4, |i, j| u[i][j]);
    let mnorm = moment_vector(y, mask, &full_u, alpha, delta, cdf)
        .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
        .unwrap_or(f64::INFINITY);
    Ok(MechanismRecord {
        metabolite: id.to_owned(),
        alpha,
        delta,
        posterior_sd: [sda, sdd],
        moment_norm: mnorm,
        boundary_mass: bmass,
        flagged: bmass >= cfg.boundary_flag,
        instruments: cols,
    })
}

/// Posterior means of (α_g, δ_g) for every missing-class metabolite.
pub fn estimate_mechanism(
    m: &ObservedMatrix,
    part: &MetabolitePartition,
    inst: &InstrumentSet,
    cdf: &SelectionCdf,
    cfg: &MechanismConfig,
) -> Result<MechanismEstimate> {
    if inst.u.nrows() != m.n_samples() {
        return Err(Error::InvalidInput("instrument rows do not match samples".into()));
    }
    if cfg.n_alpha < 2 || cfg.n_delta < 2 || cfg.log_alpha_max <= cfg.log_alpha_min {
        return Err(Error::InvalidInput("degenerate mechanism grid".into()));
    }
    if cfg.n_instruments > inst.n_candidates() {
        return Err(Error::InvalidInput(format!(
            "{} instruments requested but only {} candidates",
            cfg.n_instruments,
            inst.n_candidates()
        )));
    }
    let ids = m.metabolite_ids();
    let records = map_indexed(part.missing.len(), |k| {
        let g = part.missing[k];
        estimate_one(&ids[g], m.row(g), m.mask_row(g), inst, cdf, cfg)
    });
    Ok(MechanismEstimate {
        cdf: cdf.clone(),
        config: cfg.clone(),
        records: records.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::partition_metabolites;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn moment_at_zero_alpha() {
        let y = [1.0, 2.0, 3.0, 4.0];
        let mask = [true, true, true, true];
        let u = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, -1.0, 0.5, 2.0, -0.5, 0.0, 1.5]);
        let m = moment_vector(&y, &mask, &u, 0.0, 3.0, &SelectionCdf::default()).unwrap();
        // each summand is −u_i
        assert!((m[0] + 2.0 / 2.0).abs() < 1e-15);
        assert!((m[1] + 2.0 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn moment_single_sample() {
        let cdf = SelectionCdf::default();
        let u = DMatrix::from_element(1, 1, 1.0);
        let m = moment_vector(&[3.0], &[true], &u, 0.7, 1.0, &cdf).unwrap();
        assert!((m[0] - (1.0 - 1.0 / cdf.cdf(0.7 * 2.0))).abs() < 1e-15);
        let m = moment_vector(&[f64::NAN], &[false], &u, 0.7, 1.0, &cdf).unwrap();
        assert_eq!(m[0], 1.0);
    }

    #[test]
    fn moment_flags_underflow() {
        let cdf = SelectionCdf::normal();
        let u = DMatrix::from_element(1, 1, 1.0);
        let e = moment_vector(&[-1e3], &[true], &u, 5.0, 0.0, &cdf).unwrap_err();
        assert!(matches!(e, Error::SelectionUnderflow { sample: 0, .. }));
    }

    #[test]
    fn rank_one_instrument() {
        let b: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() + 0.3).collect();
        let a: Vec<f64> = (0..6).map(|g| 1.0 + g as f64).collect();
        let mut vals = Vec::new();
        for &ag in &a {
            for &bi in &b {
                vals.push(10.0 + ag * bi);
            }
        }
        let ids = |p: &str, k: usize| (0..k).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let m = ObservedMatrix::complete(&vals, ids("m", 6), ids("s", 12)).unwrap();
        let part = partition_metabolites(&m);
        let inst = build_instruments(&m, &part, 2).unwrap();
        let bm = b.iter().sum::<f64>() / 12.0;
        let bc: Vec<f64> = b.iter().map(|v| v - bm).collect();
        let nb = bc.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = (0..12).map(|i| inst.u[(i, 0)] * bc[i] / nb).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-10);
        let utu = inst.u.transpose() * &inst.u;
        assert!((utu - DMatrix::identity(2, 2)).norm() < 1e-10);
        assert!(build_instruments(&m, &part, 7).is_err());
    }

    fn toy(seed: u64, mcar: bool) -> (ObservedMatrix, f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 300;
        let p_complete = 20;
        let c: Vec<[f64; 2]> = (0..n).map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
        let mut cells = Vec::new();
        for g in 0..p_complete + 1 {
            let l = [1.0 + 0.1 * g as f64, -0.8 + 0.05 * g as f64];
            for ci in &c {
                let e: f64 = rng.sample(StandardNormal);
                cells.push(Some(16.0 + l[0] * ci[0] + l[1] * ci[1] + 0.5 * e));
            }
        }
        let (alpha, delta) = (1.5, 15.5);
        let cdf = SelectionCdf::default();
        let last = p_complete * n;
        for i in 0..n {
            let y = cells[last + i].unwrap();
            let pr = if mcar { 0.75 } else { cdf.cdf(alpha * (y - delta)) };
            if rng.random::<f64>() > pr {
                cells[last + i] = None;
            }
        }
        let ids = |p: &str, k: usize| (0..k).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        (ObservedMatrix::from_cells(cells, ids("m", p_complete + 1), ids("s", n)).unwrap(), alpha, delta)
    }

    #[test]
    fn recovers_mechanism_and_is_deterministic() {
        let (m, _alpha, delta) = toy(3, false);
        let part = partition_metabolites(&m);
        assert_eq!(part.missing, vec![20]);
        let inst = build_instruments(&m, &part, 5).unwrap();
        let cdf = SelectionCdf::default();
        let cfg = MechanismConfig::default();
        let est = estimate_mechanism(&m, &part, &inst, &cdf, &cfg).unwrap();
        let r = &est.records[0];
        assert!((r.delta - delta).abs() < 0.7, "{r:?}");
        assert!(r.alpha >= 0.0);
        assert!(!r.flagged);
        let again = estimate_mechanism(&m, &part, &inst, &cdf, &cfg).unwrap();
        assert_eq!(est, again);
        // posterior mean inside the grid hull
        assert!(r.alpha >= cfg.log_alpha_min.exp() && r.alpha <= cfg.log_alpha_max.exp());
    }

    #[test]
    fn store_round_trip_and_mismatch() {
        let (m, _, _) = toy(4, false);
        let part = partition_metabolites(&m);
        let inst = build_instruments(&m, &part, 5).unwrap();
        let cdf = SelectionCdf::default();
        let cfg = MechanismConfig {
            n_alpha: 10,
            n_delta: 10,
            ..Default::default()
        };
        let est = estimate_mechanism(&m, &part, &inst, &cdf, &cfg).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_mechanisms(&est, f.path()).unwrap();
        assert_eq!(load_mechanisms(f.path()).unwrap(), est);
        assert_eq!(MechanismEstimate::load_expecting(f.path(), &cdf).unwrap(), est);
        let other = SelectionCdf::student_t(5.0).unwrap();
        assert!(matches!(MechanismEstimate::load_expecting(f.path(), &other), Err(Error::StoreMismatch(_))));
        let text = std::fs::read_to_string(f.path()).unwrap().replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(MechanismEstimate::from_json(&text), Err(Error::StoreMismatch(_))));
    }

    #[test]
    fn mcar_gives_small_alpha() {
        let (m, _, _) = toy(5, true);
        let part = partition_metabolites(&m);
        let inst = build_instruments(&m, &part, 5).unwrap();
        let cfg = MechanismConfig::default();
        let est = estimate_mechanism(&m, &part, &inst, &SelectionCdf::default(), &cfg).unwrap();
        // 0.25 quantile of the log-normal prior on α
        let q25 = (cfg.prior_log_alpha_mean - 0.674_489_750_196_081_7 * cfg.prior_log_alpha_sd).exp();
        assert!(est.records[0].alpha < q25, "{:?}", est.records[0]);
    }
}
