use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use msnimble::diffabund::{fisher_fit, fit_all, ipw_fit, Analysis, DaConfig, Likelihood};
use msnimble::factor::{compute_weights, estimate_omega, fit_factors, init_subspace, FactorConfig};
use msnimble::mechanism::{moment_vector, MechanismConfig, MechanismEstimate};
use msnimble::mtgwas::{eta_e, precompute_metabolite};
use msnimble::pipeline::{estimate_mechanisms, run_pipeline, PipelineConfig};
use msnimble::simulate::{generate, SimConfig, SimDataset};
use msnimble::{miss_prob, partition_metabolites, ObservedMatrix, QuadratureRule, SelectionCdf};

fn families() -> Vec<SelectionCdf> {
    vec![SelectionCdf::default(), SelectionCdf::student_t(7.0).unwrap(), SelectionCdf::logistic(), SelectionCdf::normal()]
}

fn small(seed: u64) -> SimDataset {
    generate(&SimConfig { p: 80, n: 120, k: 2, ..SimConfig::desk(seed) }).unwrap()
}

fn small_mechanisms() -> &'static (SimDataset, MechanismEstimate) {
    static CELL: OnceLock<(SimDataset, MechanismEstimate)> = OnceLock::new();
    CELL.get_or_init(|| {
        let d = small(21);
        let part = partition_metabolites(&d.observed);
        let mech = estimate_mechanisms(&d.observed, &part, &SelectionCdf::default(), &MechanismConfig::default()).unwrap();
        (d, mech)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psi_derivatives_match_central_differences(x in -50.0f64..50.0, fam in 0usize..4) {
        let cdf = &families()[fam];
        let h = 1e-5;
        for d in 1..=4 {
            let fd = (cdf.psi(x + h, d - 1).unwrap() - cdf.psi(x - h, d - 1).unwrap()) / (2.0 * h);
            prop_assert!((cdf.psi(x, d).unwrap() - fd).abs() <= 1e-6, "order {d} at {x}");
        }
    }

    #[test]
    fn miss_prob_nondecreasing_in_mu(alpha in 0.05f64..5.0, delta in 10.0f64..22.0, mu in 5.0f64..30.0, step in 0.01f64..2.0, sigma in 0.2f64..3.0, fam in 0usize..4) {
        let cdf = &families()[fam];
        let rule = QuadratureRule::default();
        let a = miss_prob(cdf, alpha, delta, mu, sigma, &rule).unwrap();
        let b = miss_prob(cdf, alpha, delta, mu + step, sigma, &rule).unwrap();
        prop_assert!(b >= a - 1e-14);
    }

    #[test]
    fn miss_prob_order_insensitive(alpha in 0.05f64..5.0, delta in 12.0f64..20.0, mu in 8.0f64..28.0, sigma in 0.4f64..2.0, fam in 0usize..4) {
        let cdf = &families()[fam];
        let q32 = miss_prob(cdf, alpha, delta, mu, sigma, &QuadratureRule::new(32).unwrap()).unwrap();
        let q64 = miss_prob(cdf, alpha, delta, mu, sigma, &QuadratureRule::new(64).unwrap()).unwrap();
        prop_assert!((q32 - q64).abs() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn partition_is_permutation_equivariant(seed in 0u64..1000, rot in 1usize..79) {
        let d = generate(&SimConfig { p: 80, n: 20, k: 2, ..SimConfig::desk(seed) }).unwrap();
        let part = partition_metabolites(&d.observed);
        let perm: Vec<usize> = (0..80).map(|g| (g + rot) % 80).collect();
        let shuffled = d.observed.select_rows(&perm);
        let sp = partition_metabolites(&shuffled);
        for (new, &old) in perm.iter().enumerate() {
            prop_assert_eq!(sp.class_of(new), part.class_of(old));
        }
    }

    #[test]
    fn ipw_and_fisher_agree_under_mcar(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 300;
        let z = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => (i < n / 2) as u8 as f64,
            1 => 1.0,
            _ => ((i * 13 % 17) as f64 - 8.0) / 5.0,
        });
        let y: Vec<f64> = (0..n).map(|i| 0.5 * z[(i, 0)] + 12.0 + 0.4 * z[(i, 2)] + rng.sample::<f64, _>(StandardNormal)).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
        let y: Vec<f64> = y.iter().zip(&mask).map(|(&v, &o)| if o { v } else { f64::NAN }).collect();
        let m = ObservedMatrix::from_cells(y.iter().map(|v| v.is_finite().then_some(*v)).collect(), vec!["m".into()], (0..n).map(|i| format!("s{i}")).collect()).unwrap();
        // Mechanism with α near zero: MCAR as seen by the likelihood.
        let cdf = SelectionCdf::default();
        let rule = QuadratureRule::default();
        let mech = msnimble::diffabund::MechParams { alpha: 1e-3, delta: 0.0 };
        let lik = Likelihood { id: "m", y: m.row(0), mask: m.mask_row(0), z: &z, mech: Some(mech), cdf: &cdf, rule: &rule };
        let w: Vec<f64> = mask.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        let (ipw, _) = ipw_fit("m", lik.y, &z, &w).unwrap();
        let fit = fisher_fit(&lik, &w, 1, &DaConfig::default()).unwrap();
        prop_assert!((ipw[0] - fit.theta[0]).abs() <= 2.0 * fit.se(0) * std::f64::consts::SQRT_2);
    }
}

#[test]
fn moment_vector_is_mean_zero_under_true_mechanism() {
    let cdf = SelectionCdf::logistic();
    let (n, reps) = (400, 400);
    let (alpha, delta) = (1.2, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 / (n as f64).sqrt() } else { ((i % 7) as f64 - 3.0) / (28.0 * n as f64 / 7.0).sqrt() });
    let mut mean = vec![0.0; 2];
    let mut sq = vec![0.0; 2];
    for _ in 0..reps {
        let y: Vec<f64> = (0..n).map(|i| 0.5 * u[(i, 1)] * (n as f64).sqrt() + rng.sample::<f64, _>(StandardNormal)).collect();
        let mask: Vec<bool> = y.iter().map(|&v| rng.random::<f64>() < cdf.cdf(alpha * (v - delta))).collect();
        let mv = moment_vector(&y, &mask, &u, alpha, delta, &cdf).unwrap();
        for j in 0..2 {
            mean[j] += mv[j] / reps as f64;
            sq[j] += mv[j] * mv[j] / reps as f64;
        }
    }
    for j in 0..2 {
        let se = ((sq[j] - mean[j] * mean[j]) / reps as f64).sqrt();
        assert!(mean[j].abs() <= 4.0 * se, "component {j}: mean {} se {se}", mean[j]);
    }
}

#[test]
fn mechanism_estimates_lie_in_the_grid() {
    let (_, mech) = small_mechanisms();
    let cfg = &mech.config;
    assert!(!mech.records.is_empty());
    for r in &mech.records {
        assert!(r.alpha >= 0.0);
        assert!(r.alpha.ln() >= cfg.log_alpha_min - 1e-12 && r.alpha.ln() <= cfg.log_alpha_max + 1e-12);
        assert!(r.delta.is_finite());
    }
}

#[test]
fn downstream_estimates_ignore_rotation_of_the_start() {
    let (d, mech) = small_mechanisms();
    let part = partition_metabolites(&d.observed);
    let cfg = FactorConfig { tol: 1e-14, max_iter: 2000, ..Default::default() };
    let w = compute_weights(&d.observed, &part, mech, cfg.max_weight).unwrap();
    let init = init_subspace(&d.observed, &part, &d.design, 2).unwrap();
    let (c, s) = (0.6f64.cos(), 0.6f64.sin());
    let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
    let beta = |start: &DMatrix<f64>| -> Vec<f64> {
        let mut fe = fit_factors(&d.observed, &d.design, &w, 2, start, &cfg).unwrap();
        estimate_omega(&mut fe, &d.observed, &d.design, &w, &cfg).unwrap();
        let an = Analysis::new(&d.observed, &part, &d.design, mech, &fe, 12).unwrap();
        fit_all(&an, &d.design, &DaConfig::default()).unwrap().into_iter().map(|f| f.map(|f| f.theta[0]).unwrap_or(f64::NAN)).collect()
    };
    let (a, b) = (beta(&init), beta(&(&init * rot)));
    for (x, y) in a.iter().zip(&b) {
        if x.is_finite() {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }
}

#[test]
fn interest_coefficients_ignore_factor_scaling() {
    let (d, mech) = small_mechanisms();
    let cfg = PipelineConfig { k: Some(2), ..Default::default() };
    let r = run_pipeline(&d.observed, &d.design, &cfg).unwrap();
    let mut scaled = r.factors.clone();
    for (j, f) in [3.0, -0.25].iter().enumerate() {
        scaled.c_hat.column_mut(j).scale_mut(*f);
    }
    let fits = |fe| {
        let an = Analysis::new(&d.observed, &r.partition, &d.design, mech, fe, 12).unwrap();
        fit_all(&an, &d.design, &cfg.da).unwrap()
    };
    for (a, b) in fits(&r.factors).iter().zip(&fits(&scaled)) {
        if let (Ok(a), Ok(b)) = (a, b) {
            assert!((a.theta[0] - b.theta[0]).abs() <= 1e-6);
            assert!((a.wald_p()[0] - b.wald_p()[0]).abs() <= 1e-6);
        }
    }
}

#[test]
fn score_and_wald_agree_for_fully_observed_metabolites() {
    let (n, p, snps) = (600, 40, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => (i < n / 2) as u8 as f64,
        1 => 1.0,
        _ => rng.sample::<f64, _>(StandardNormal),
    });
    let cdf = SelectionCdf::default();
    let rule = QuadratureRule::default();
    let mask = vec![true; n];
    let mut diffs = Vec::new();
    for _ in 0..p {
        let y: Vec<f64> = (0..n).map(|i| 14.0 + 0.3 * z[(i, 2)] + rng.sample::<f64, _>(StandardNormal)).collect();
        let lik = Likelihood { id: "m", y: &y, mask: &mask, z: &z, mech: None, cdf: &cdf, rule: &rule };
        let fit = fisher_fit(&lik, &vec![1.0; n], 1, &DaConfig::default()).unwrap();
        let pre = precompute_metabolite(&lik, &fit, 2).unwrap();
        let h = &z * (z.transpose() * &z).try_inverse().unwrap() * z.transpose();
        let r = DVector::from_vec(y.clone()) - &h * DVector::from_vec(y.clone());
        for _ in 0..snps {
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
            let wald = eta_e(&pre, &g).stat;
            let gv = DVector::from_vec(g);
            let gt = &gv - &h * &gv;
            let score = gt.dot(&r).powi(2) / gt.norm_squared() / (r.norm_squared() / n as f64);
            diffs.push((wald - score).abs());
        }
    }
    diffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!(diffs[diffs.len() / 2] <= 0.1, "median difference {}", diffs[diffs.len() / 2]);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let d = small(33);
    let cfg = PipelineConfig { k: Some(2), ..Default::default() };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let r = run_pipeline(&d.observed, &d.design, &cfg).unwrap();
            let mut out = Vec::new();
            r.da.write_to(&mut out, &[]).unwrap();
            (out, r.factors, r.mechanisms)
        })
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}
