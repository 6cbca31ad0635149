//! Browser demo bindings. Each export returns a JSON string so the page needs
//! no generated type glue beyond `wasm-bindgen`'s string passing.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use msnimble::diffabund::{fit_all, Analysis};
use msnimble::mtgwas::{run_gwas, GenotypeMatrix, GwasConfig};
use msnimble::pipeline::{run_pipeline, PipelineConfig};
use msnimble::simulate::{da_calls, generate, impute_minimum, ols_calls, SimConfig};
use msnimble::{miss_prob, MetaboliteClass, QuadratureRule, SelectionCdf};

fn cdf_named(name: &str) -> Result<SelectionCdf, String> {
    match name {
        "t4" => Ok(SelectionCdf::default()),
        "logistic" => Ok(SelectionCdf::logistic()),
        "normal" => Ok(SelectionCdf::normal()),
        _ => Err(format!("unknown selection CDF `{name}`")),
    }
}

fn json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct SelectionCurve {
    y: Vec<f64>,
    /// Ψ{α(y − δ)}: probability a value y is observed.
    observe: Vec<f64>,
    /// q(μ, σ) at μ = y: probability a draw from N(μ, σ²) is observed.
    observe_mean: Vec<f64>,
}

pub fn selection_curve_json(cdf: &str, alpha: f64, delta: f64, sigma: f64, points: usize) -> Result<String, String> {
    let cdf = cdf_named(cdf)?;
    let rule = QuadratureRule::default();
    let points = points.clamp(2, 2000);
    let (lo, hi) = (delta - 6.0 / alpha.max(0.1) - 3.0 * sigma, delta + 6.0 / alpha.max(0.1) + 3.0 * sigma);
    let y: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let observe = y.iter().map(|&v| cdf.cdf(alpha * (v - delta))).collect();
    let observe_mean = y
        .iter()
        .map(|&m| miss_prob(&cdf, alpha, delta, m, sigma, &rule).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    json(&SelectionCurve { y, observe, observe_mean })
}

fn small_design(p: usize, n: usize, seed: u64, confounding_r2: f64) -> SimConfig {
    SimConfig {
        p,
        n,
        k: 3,
        confounding_a: msnimble::simulate::confounding_for_r2(confounding_r2),
        ..SimConfig::desk(seed)
    }
}

#[derive(Serialize)]
struct DaPoint {
    truth: f64,
    msnimble: f64,
    msnimble_se: f64,
    min_impute: f64,
    min_impute_se: f64,
}

#[derive(Serialize)]
struct DaComparison {
    points: Vec<DaPoint>,
    confounding_p: f64,
}

/// Missing-class effect estimates from the full method and from minimum
/// imputation with naive regression, on one simulated dataset.
pub fn da_comparison_json(p: usize, n: usize, seed: u64, confounding_r2: f64) -> Result<String, String> {
    let cfg = small_design(p.clamp(30, 400), n.clamp(40, 400), seed, confounding_r2.clamp(0.0, 0.9));
    let d = generate(&cfg).map_err(|e| e.to_string())?;
    let pc = PipelineConfig { k: Some(cfg.k), ..Default::default() };
    let r = run_pipeline(&d.observed, &d.design, &pc).map_err(|e| e.to_string())?;
    let ours = da_calls(&r.da, &r.partition);
    let imp = impute_minimum(&d.observed, 1.0).map_err(|e| e.to_string())?;
    let naive = ols_calls(&imp, &r.partition.analyzed(), &d.design, None).map_err(|e| e.to_string())?;
    let points = ours
        .iter()
        .zip(&naive)
        .filter(|(a, _)| r.partition.class_of(a.metabolite) == MetaboliteClass::Missing && a.se.is_finite())
        .map(|(a, b)| DaPoint {
            truth: d.truth.beta[a.metabolite],
            msnimble: a.estimate,
            msnimble_se: a.se,
            min_impute: b.estimate,
            min_impute_se: b.se,
        })
        .collect();
    json(&DaComparison {
        points,
        confounding_p: r.da.confounding[0].p_value,
    })
}

#[derive(Serialize)]
struct NullQq {
    /// Expected −log10 p under the uniform null, increasing.
    expected: Vec<f64>,
    eta_e: Vec<f64>,
    eta_c: Vec<f64>,
    n_pairs: usize,
}

fn neg_log10_sorted(mut p: Vec<f64>) -> Vec<f64> {
    p.sort_by(|a, b| b.partial_cmp(a).unwrap());
    p.into_iter().map(|v| -v.max(1e-300).log10()).collect()
}

/// Null scan with genotypes independent of everything else.
pub fn gwas_null_qq_json(p: usize, n: usize, snps: usize, seed: u64) -> Result<String, String> {
    let cfg = small_design(p.clamp(30, 300), n.clamp(40, 400), seed, 0.6);
    let d = generate(&cfg).map_err(|e| e.to_string())?;
    let pc = PipelineConfig { k: Some(cfg.k), ..Default::default() };
    let r = run_pipeline(&d.observed, &d.design, &pc).map_err(|e| e.to_string())?;
    let an = Analysis::new(&d.observed, &r.partition, &d.design, &r.mechanisms, &r.factors, pc.da.quadrature_order).map_err(|e| e.to_string())?;
    let fits = fit_all(&an, &d.design, &pc.da).map_err(|e| e.to_string())?;
    let geno = GenotypeMatrix::simulate(snps.clamp(1, 2000), cfg.n, 0.05, seed.wrapping_add(1));
    let (mut pe, mut pcv) = (Vec::new(), Vec::new());
    run_gwas(&an, &d.design, &r.factors, &fits, &geno, &GwasConfig::default(), |row| {
        pe.push(row.p_e);
        pcv.push(row.p_c);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let m = pe.len();
    let expected = (0..m).map(|i| -((i as f64 + 0.5) / m as f64).log10()).rev().collect();
    json(&NullQq {
        expected,
        eta_e: neg_log10_sorted(pe),
        eta_c: neg_log10_sorted(pcv),
        n_pairs: m,
    })
}

#[wasm_bindgen]
pub fn selection_curve(cdf: &str, alpha: f64, delta: f64, sigma: f64, points: usize) -> Result<String, JsValue> {
    selection_curve_json(cdf, alpha, delta, sigma, points).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn da_comparison(p: usize, n: usize, seed: u32, confounding_r2: f64) -> Result<String, JsValue> {
    da_comparison_json(p, n, seed as u64, confounding_r2).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn gwas_null_qq(p: usize, n: usize, snps: usize, seed: u32) -> Result<String, JsValue> {
    gwas_null_qq_json(p, n, snps, seed as u64).map_err(|e| JsValue::from_str(&e))
}
