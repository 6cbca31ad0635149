//! Genome-wide score tests for metabolite levels: an idiosyncratic effect
//! (η_e), an effect mediated by the latent factors (η_c), and their sum.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_table, DesignMatrix, MetaboliteClass, TableFormat};
use crate::diffabund::{Analysis, CoefInference, Likelihood};
use crate::error::{Error, Result};
use crate::factor::FactorEstimate;
use crate::linalg::{chi2_sf, col_basis};
use crate::par::map_indexed;

/// S × n genotype dosages in {0, 1, 2}.
#[derive(Debug, Clone, PartialEq)]
pub struct GenotypeMatrix {
    snp_ids: Vec<String>,
    n: usize,
    g: Vec<u8>,
}

impl GenotypeMatrix {
    pub fn new(snp_ids: Vec<String>, n: usize, g: Vec<u8>) -> Result<Self> {
        if g.len() != snp_ids.len() * n {
            return Err(Error::InvalidInput("genotype matrix size does not match its ids".into()));
        }
        if let Some(v) = g.iter().find(|&&v| v > 2) {
            return Err(Error::InvalidInput(format!("genotype value {v} outside {{0, 1, 2}}")));
        }
        Ok(GenotypeMatrix { snp_ids, n, g })
    }

    /// Independent SNPs with minor allele frequency uniform on [maf_min, 0.5].
    pub fn simulate(n_snps: usize, n: usize, maf_min: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Vec::with_capacity(n_snps * n);
        for _ in 0..n_snps {
            let maf = rng.random_range(maf_min..=0.5);
            let b = Binomial::new(2, maf).expect("valid probability");
            g.extend((0..n).map(|_| b.sample(&mut rng) as u8));
        }
        GenotypeMatrix {
            snp_ids: (1..=n_snps).map(|s| format!("snp{s}")).collect(),
            n,
            g,
        }
    }

    pub fn n_snps(&self) -> usize {
        self.snp_ids.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn snp_ids(&self) -> &[String] {
        &self.snp_ids
    }

    pub fn row(&self, s: usize) -> &[u8] {
        &self.g[s * self.n..(s + 1) * self.n]
    }

    pub fn minor_allele_count(&self, s: usize) -> usize {
        let alt: usize = self.row(s).iter().map(|&v| v as usize).sum();
        alt.min(2 * self.n - alt)
    }

    /// Reads an S × n table (`snp` header then sample ids) and orders the
    /// columns as `sample_order`.
    pub fn load(path: &Path, format: TableFormat, sample_order: &[String]) -> Result<Self> {
        let t = read_table(path, format, "snp", "sample")?;
        let n = sample_order.len();
        let pos: HashMap<&str, usize> = t.col_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        if t.col_ids.len() != n {
            return Err(Error::InvalidInput(format!("genotypes cover {} samples, abundance matrix has {n}", t.col_ids.len())));
        }
        let cols: Vec<usize> = sample_order
            .iter()
            .map(|s| pos.get(s.as_str()).copied().ok_or_else(|| Error::InvalidInput(format!("sample `{s}` missing from {}", path.display()))))
            .collect::<Result<_>>()?;
        let width = t.col_ids.len();
        let mut g = Vec::with_capacity(t.row_ids.len() * n);
        for (r, id) in t.row_ids.iter().enumerate() {
            for &c in &cols {
                match t.cells[r * width + c] {
                    Some(v) if v == 0.0 || v == 1.0 || v == 2.0 => g.push(v as u8),
                    Some(v) => return Err(Error::InvalidInput(format!("SNP `{id}`: genotype {v} outside {{0, 1, 2}}"))),
                    None => return Err(Error::InvalidInput(format!("SNP `{id}`: missing genotypes are not supported"))),
                }
            }
        }
        Ok(GenotypeMatrix { snp_ids: t.row_ids, n, g })
    }

    pub fn write(&self, path: &Path, sample_ids: &[String]) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "snp\t{}", sample_ids.join("\t"))?;
        for (s, id) in self.snp_ids.iter().enumerate() {
            write!(out, "{id}")?;
            for &v in self.row(s) {
                write!(out, "\t{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    fn chunk(&self, snps: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, snps.len(), |i, j| self.row(snps[j])[i] as f64)
    }
}

/// Genotype-free quantities of one metabolite at its fitted (θ̂, σ̂).
#[derive(Debug, Clone)]
pub struct MetabolitePrecompute {
    /// Per-sample score residuals ∂h/∂μ_i.
    pub s: Vec<f64>,
    /// Per-sample information entries for (μ_i, μ_i) and (μ_i, σ).
    pub d11: Vec<f64>,
    pub d12: Vec<f64>,
    /// [s, d11·ẑ, d12] as columns, so one product with a genotype block
    /// yields every SNP-dependent sum.
    pub stacked: DMatrix<f64>,
    /// Inverse information of (θ, σ).
    pub info_inv: DMatrix<f64>,
    /// info_inv · score(θ, σ), used to orthogonalize the genotype score.
    pub h: DVector<f64>,
    /// Fully observed metabolites: residual sum of squares and observed count
    /// for the Wald form.
    pub gaussian: Option<(f64, usize)>,
    pub ell: DVector<f64>,
    pub v_ell: DMatrix<f64>,
}

pub fn precompute_metabolite(lik: &Likelihood, fit: &CoefInference, d: usize) -> Result<MetabolitePrecompute> {
    let q = lik.z.ncols();
    let t = lik.sample_terms(&fit.theta, fit.sigma)?;
    let n = t.s_mu.len();
    let mut score = DVector::zeros(q + 1);
    let mut info = DMatrix::zeros(q + 1, q + 1);
    let mut stacked = DMatrix::zeros(n, q + 2);
    for i in 0..n {
        let zi = lik.z.row(i);
        stacked[(i, 0)] = t.s_mu[i];
        for r in 0..q {
            stacked[(i, 1 + r)] = t.a[i] * zi[r];
            score[r] += t.s_mu[i] * zi[r];
            info[(r, q)] += t.b[i] * zi[r];
        }
        stacked[(i, q + 1)] = t.b[i];
        score[q] += t.s_sigma[i];
        info[(q, q)] += t.c[i];
    }
    let za = stacked.columns(1, q).into_owned();
    info.view_mut((0, 0), (q, q)).copy_from(&(lik.z.transpose() * za));
    for r in 0..q {
        info[(q, r)] = info[(r, q)];
    }
    let info_inv = info
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("information matrix of metabolite `{}`", lik.id)))?
        .inverse();
    let h = &info_inv * &score;
    let gaussian = if lik.mech.is_none() {
        let theta = DVector::from_column_slice(&fit.theta);
        let mu = lik.z * theta;
        let mut rss = 0.0;
        let mut n_obs = 0;
        for i in 0..n {
            if lik.mask[i] {
                rss += (lik.y[i] - mu[i]).powi(2);
                n_obs += 1;
            }
        }
        Some((rss, n_obs))
    } else {
        None
    };
    let k = q - d;
    Ok(MetabolitePrecompute {
        s: t.s_mu,
        d11: t.a,
        d12: t.b,
        stacked,
        info_inv,
        h,
        gaussian,
        ell: DVector::from_iterator(k, fit.theta[d..].iter().copied()),
        v_ell: fit.cov.view((d, d), (k, k)).into_owned(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub stat: f64,
    pub p: f64,
    /// The bordered information was numerically singular.
    pub collinear: bool,
}

/// η_e from the SNP-dependent sums: `gs` = Σ G s, `gz` = [Σ G d11 ẑ, Σ G d12],
/// `g2a` = Σ G² d11.
fn eta_e_from_sums(pre: &MetabolitePrecompute, gs: f64, gz: &DVector<f64>, g2a: f64) -> TestResult {
    let u = gs - gz.dot(&pre.h);
    let schur = g2a - (gz.transpose() * &pre.info_inv * gz)[(0, 0)];
    if !(schur > 1e-10 * g2a.abs()) {
        return TestResult { stat: 0.0, p: 1.0, collinear: true };
    }
    let score_stat = u * u / schur;
    let stat = match pre.gaussian {
        // With d11 = 1/σ̂², score_stat·σ̂² is the regression sum of squares of the genotype.
        Some((rss, n_obs)) => {
            let sigma2 = rss / n_obs as f64;
            let t = (score_stat * sigma2).min(rss);
            let df = n_obs as f64 - pre.info_inv.nrows() as f64;
            let resid = (rss - t) / df;
            if resid > 0.0 {
                t / resid
            } else {
                f64::INFINITY
            }
        }
        None => score_stat,
    };
    TestResult { stat, p: chi2_sf(stat, 1.0), collinear: false }
}

/// Score statistic for adding one genotype to the metabolite's model.
pub fn eta_e(pre: &MetabolitePrecompute, g: &[f64]) -> TestResult {
    let gm = DMatrix::from_column_slice(g.len(), 1, g);
    let sums = gm.transpose() * &pre.stacked;
    let g2a: f64 = g.iter().zip(&pre.d11).map(|(v, a)| v * v * a).sum();
    let m = sums.ncols();
    let gz = DVector::from_iterator(m - 1, sums.iter().skip(1).copied());
    eta_e_from_sums(pre, sums[(0, 0)], &gz, g2a)
}

/// (ℓ̂ᵀγ̂)² / (ℓ̂ᵀV_γℓ̂ + γ̂ᵀV_ℓγ̂).
pub fn eta_c(ell: &DVector<f64>, v_ell: &DMatrix<f64>, gamma: &DVector<f64>, v_gamma: &DMatrix<f64>) -> Result<TestResult> {
    let num = ell.dot(gamma).powi(2);
    let den = (ell.transpose() * v_gamma * ell)[(0, 0)] + (gamma.transpose() * v_ell * gamma)[(0, 0)];
    if !(den > 0.0) {
        if num == 0.0 {
            return Ok(TestResult { stat: 0.0, p: 1.0, collinear: false });
        }
        return Err(Error::Singular("degenerate variances in the factor-mediated statistic".into()));
    }
    let stat = num / den;
    Ok(TestResult { stat, p: chi2_sf(stat, 1.0), collinear: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGenotypeFit {
    pub gamma_hat: DVector<f64>,
    pub v_gamma: DMatrix<f64>,
}

/// Per-SNP regression of the latent factors on genotype with X partialled out.
struct FactorRegression {
    q: DMatrix<f64>,
    c_perp: DMatrix<f64>,
    ctc: DMatrix<f64>,
    df: f64,
}

impl FactorRegression {
    fn new(c_hat: &DMatrix<f64>, x: &DesignMatrix) -> Self {
        let q = col_basis(x.x());
        let mut c_perp = c_hat.clone();
        crate::linalg::project_out(&q, &mut c_perp);
        let ctc = c_perp.transpose() * &c_perp;
        FactorRegression {
            q,
            c_perp,
            ctc,
            df: (x.n_rows() - x.n_cols() - 1) as f64,
        }
    }

    /// Fits for each column of the genotype block `gb` (n × S).
    fn fit_block(&self, gb: &DMatrix<f64>) -> Vec<Option<FactorGenotypeFit>> {
        let cg = gb.transpose() * &self.c_perp;
        let qg = self.q.transpose() * gb;
        (0..gb.ncols())
            .map(|s| {
                let gg = gb.column(s).norm_squared() - qg.column(s).norm_squared();
                if !(gg > 1e-10 * gb.column(s).norm_squared()) {
                    return None;
                }
                let gamma = cg.row(s).transpose() / gg;
                let rss = &self.ctc - &gamma * gamma.transpose() * gg;
                Some(FactorGenotypeFit {
                    v_gamma: rss / (self.df * gg),
                    gamma_hat: gamma,
                })
            })
            .collect()
    }
}

pub fn regress_factors_on_genotype(c_hat: &DMatrix<f64>, x: &DesignMatrix, g: &[f64]) -> Result<FactorGenotypeFit> {
    let fr = FactorRegression::new(c_hat, x);
    fr.fit_block(&DMatrix::from_column_slice(g.len(), 1, g))
        .pop()
        .flatten()
        .ok_or_else(|| Error::Singular("genotype lies in the span of the design".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GwasConfig {
    pub min_mac: usize,
    pub chunk: usize,
}

impl Default for GwasConfig {
    fn default() -> Self {
        GwasConfig { min_mac: 3, chunk: 2048 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GwasRow {
    /// Row of the analysed-metabolite list.
    pub metabolite: usize,
    pub snp: usize,
    pub eta_e: f64,
    pub p_e: f64,
    pub eta_c: f64,
    pub p_c: f64,
    pub eta_ce: f64,
    pub p_ce: f64,
    pub collinear: bool,
    pub factor_degenerate: bool,
    /// η_e is a Wald statistic from the fully observed regression.
    pub wald: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GwasSummary {
    pub n_pairs: usize,
    pub skipped_snps: Vec<String>,
    pub failed_metabolites: Vec<(String, String)>,
}

fn combine(m: usize, s: usize, e: TestResult, c: Option<TestResult>, wald: bool) -> GwasRow {
    let (eta_c, p_c, degenerate) = match c {
        Some(c) => (c.stat, c.p, false),
        None => (0.0, 1.0, true),
    };
    let eta_ce = e.stat + eta_c;
    GwasRow {
        metabolite: m,
        snp: s,
        eta_e: e.stat,
        p_e: e.p,
        eta_c,
        p_c,
        eta_ce,
        p_ce: chi2_sf(eta_ce, 2.0),
        collinear: e.collinear,
        factor_degenerate: degenerate,
        wald,
    }
}

/// Scans every (metabolite, SNP) pair, streaming rows to `sink` in
/// (metabolite, SNP) order. `fits` is aligned with `part.analyzed()`.
pub fn run_gwas(
    an: &Analysis,
    x: &DesignMatrix,
    fe: &FactorEstimate,
    fits: &[std::result::Result<CoefInference, String>],
    geno: &GenotypeMatrix,
    cfg: &GwasConfig,
    mut sink: impl FnMut(&GwasRow) -> Result<()>,
) -> Result<GwasSummary> {
    let rows = an.part.analyzed();
    if fits.len() != rows.len() {
        return Err(Error::InvalidInput("coefficient fits do not match the analysed metabolites".into()));
    }
    if geno.n_samples() != an.m.n_samples() {
        return Err(Error::InvalidInput("genotype and abundance matrices disagree on the number of samples".into()));
    }
    let ids = an.m.metabolite_ids();
    let mut summary = GwasSummary::default();
    let kept: Vec<usize> = (0..geno.n_snps()).filter(|&s| geno.minor_allele_count(s) >= cfg.min_mac).collect();
    summary.skipped_snps = (0..geno.n_snps()).filter(|&s| geno.minor_allele_count(s) < cfg.min_mac).map(|s| geno.snp_ids[s].clone()).collect();

    let fr = FactorRegression::new(&fe.c_hat, x);
    let chunk = cfg.chunk.max(1);
    let blocks: Vec<&[usize]> = kept.chunks(chunk).collect();
    let factor_fits: Vec<Vec<Option<FactorGenotypeFit>>> = map_indexed(blocks.len(), |b| fr.fit_block(&geno.chunk(blocks[b])));

    let mut pres = Vec::with_capacity(rows.len());
    for (r, &g) in rows.iter().enumerate() {
        let pre = match &fits[r] {
            Ok(fit) => an.likelihood(g).and_then(|lik| precompute_metabolite(&lik, fit, x.n_cols())).map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        };
        match pre {
            Ok(p) => pres.push(Some((r, g, p))),
            Err(e) => {
                summary.failed_metabolites.push((ids[g].clone(), e));
                pres.push(None);
            }
        }
    }
    let active: Vec<&(usize, usize, MetabolitePrecompute)> = pres.iter().flatten().collect();
    let width = crate::par::threads().max(1) * 2;
    for group in active.chunks(width) {
        let results: Vec<Vec<GwasRow>> = map_indexed(group.len(), |j| {
            let (r, g, pre) = group[j];
            let wald = an.part.class_of(*g) != MetaboliteClass::Missing;
            let mut out = Vec::with_capacity(kept.len());
            for (b, block) in blocks.iter().enumerate() {
                let gb = geno.chunk(block);
                let sums = gb.transpose() * &pre.stacked;
                let g2 = gb.map(|v| v * v);
                let g2a = g2.transpose() * DVector::from_column_slice(&pre.d11);
                for (c, &s) in block.iter().enumerate() {
                    let row = sums.row(c);
                    let gz = DVector::from_iterator(row.len() - 1, row.iter().skip(1).copied());
                    let e = eta_e_from_sums(pre, row[0], &gz, g2a[c]);
                    let cres = factor_fits[b][c].as_ref().and_then(|f| eta_c(&pre.ell, &pre.v_ell, &f.gamma_hat, &f.v_gamma).ok());
                    out.push(combine(*r, s, e, cres, wald));
                }
            }
            out
        });
        for rows in results {
            for row in &rows {
                sink(row)?;
                summary.n_pairs += 1;
            }
        }
    }
    Ok(summary)
}

/// Writes the scan as TSV with a `#` metadata header.
pub fn write_gwas(
    out: &mut impl Write,
    an: &Analysis,
    x: &DesignMatrix,
    fe: &FactorEstimate,
    fits: &[std::result::Result<CoefInference, String>],
    geno: &GenotypeMatrix,
    cfg: &GwasConfig,
    metadata: &[String],
) -> Result<GwasSummary> {
    for line in metadata {
        writeln!(out, "# {line}")?;
    }
    writeln!(out, "metabolite\tsnp\teta_e\tp_e\teta_c\tp_c\teta_ce\tp_ce\tflags")?;
    let rows = an.part.analyzed();
    let ids = an.m.metabolite_ids();
    let summary = run_gwas(an, x, fe, fits, geno, cfg, |r| {
        let mut flags = Vec::new();
        if r.wald {
            flags.push("wald");
        }
        if r.collinear {
            flags.push("collinear");
        }
        if r.factor_degenerate {
            flags.push("factor_degenerate");
        }
        let flags = if flags.is_empty() { "-".to_string() } else { flags.join(",") };
        writeln!(
            out,
            "{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{}",
            ids[rows[r.metabolite]],
            geno.snp_ids[r.snp],
            r.eta_e,
            r.p_e,
            r.eta_c,
            r.p_c,
            r.eta_ce,
            r.p_ce,
            flags
        )?;
        Ok(())
    })?;
    for s in &summary.skipped_snps {
        writeln!(out, "# skipped_snp\t{s}\tminor allele count below {}", cfg.min_mac)?;
    }
    for (m, e) in &summary.failed_metabolites {
        writeln!(out, "# failed_metabolite\t{m}\t{}", e.replace(['\t', '\n'], " "))?;
    }
    Ok(summary)
}
