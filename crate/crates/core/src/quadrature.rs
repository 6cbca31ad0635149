//! Normal-weighted integrals of the selection CDF.
//!
//! Every likelihood term needs integrals of the form ∫ f{α(μ + σe − δ)} φ(e) de
//! where f is Ψ or one of its derivatives. For large ασ the integrand has a
//! sharp transition at e* = (δ − μ)/σ and Ψ has complex singularities close to
//! the real axis, which defeats plain Gauss–Hermite rules. We use composite
//! Gauss–Legendre panels on [-L, L], graded geometrically around e*, with
//! panel widths capped so φ itself is resolved.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::SelectionCdf;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const MAX_BREAKS: usize = 160;

/// Gauss–Legendre reference rule used on every panel of the composite rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RuleSpec", into = "RuleSpec")]
pub struct QuadratureRule {
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    half_width: f64,
    max_panel: f64,
}

#[derive(Serialize, Deserialize)]
struct RuleSpec {
    order: usize,
}

impl TryFrom<RuleSpec> for QuadratureRule {
    type Error = Error;
    fn try_from(s: RuleSpec) -> Result<Self> {
        QuadratureRule::new(s.order)
    }
}

impl From<QuadratureRule> for RuleSpec {
    fn from(r: QuadratureRule) -> Self {
        RuleSpec { order: r.order }
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self::new(Self::DEFAULT_ORDER).expect("default order is valid")
    }
}

impl QuadratureRule {
    pub const DEFAULT_ORDER: usize = 12;
    pub const MIN_ORDER: usize = 8;

    pub fn new(order: usize) -> Result<Self> {
        if !(Self::MIN_ORDER..=256).contains(&order) {
            return Err(Error::InvalidInput(format!(
                "quadrature order must be in {}..=256, got {order}",
                Self::MIN_ORDER
            )));
        }
        let (nodes, weights) = gauss_legendre(order);
        Ok(Self {
            order,
            nodes,
            weights,
            half_width: 9.0,
            max_panel: 2.0,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Reference nodes on [-1, 1].
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Calls `f(e, w)` for every node of the composite rule, where `w`
    /// already includes the standard normal density φ(e). `kink` is the
    /// location of the transition and `rho` the distance (in e units) to the
    /// integrand's nearest complex singularity; `rho = ∞` means smooth.
    pub(crate) fn for_each_node(&self, kink: f64, rho: f64, mut f: impl FnMut(f64, f64)) {
        let l = self.half_width;
        let mut breaks = [0.0f64; MAX_BREAKS];
        let mut nb = 0usize;
        breaks[nb] = -l;
        nb += 1;
        breaks[nb] = l;
        nb += 1;
        if rho.is_finite() && rho < self.max_panel && kink.is_finite() {
            let rho = rho.max(1e-9);
            let mut k = 0;
            loop {
                let d = rho * ((1u64 << k) as f64 - 1.0);
                if d > 2.0 * l + kink.abs() || nb + 2 > MAX_BREAKS || k >= 62 {
                    break;
                }
                for p in [kink - d, kink + d] {
                    if p > -l && p < l {
                        breaks[nb] = p;
                        nb += 1;
                    }
                }
                k += 1;
            }
        }
        let breaks = &mut breaks[..nb];
        breaks.sort_by(|a, b| a.partial_cmp(b).expect("finite breakpoints"));
        for win in breaks.windows(2) {
            let (a, b) = (win[0], win[1]);
            let width = b - a;
            if width <= 1e-14 {
                continue;
            }
            let pieces = (width / self.max_panel).ceil().max(1.0) as usize;
            let h = width / pieces as f64;
            for j in 0..pieces {
                let lo = a + h * j as f64;
                let mid = lo + 0.5 * h;
                let half = 0.5 * h;
                for (t, w) in self.nodes.iter().zip(&self.weights) {
                    let e = mid + half * t;
                    f(e, half * w * FRAC_1_SQRT_2PI * (-0.5 * e * e).exp());
                }
            }
        }
    }

    /// ∫ g(e) φ(e) de over the truncated real line with no kink refinement.
    pub fn integrate_normal(&self, mut g: impl FnMut(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        self.for_each_node(0.0, f64::INFINITY, |e, w| acc += w * g(e));
        acc
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1] by Newton iteration.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn validate(alpha: f64, delta: f64, mu: f64, sigma: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidInput(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidInput(format!("sigma must be finite and > 0, got {sigma}")));
    }
    if !(delta.is_finite() && mu.is_finite()) {
        return Err(Error::InvalidInput("mu and delta must be finite".into()));
    }
    Ok(())
}

#[inline]
fn kink_and_rho(cdf: &SelectionCdf, alpha: f64, delta: f64, mu: f64, sigma: f64) -> (f64, f64) {
    let kink = (delta - mu) / sigma;
    let rho = if alpha > 0.0 {
        cdf.singularity_distance() / (alpha * sigma)
    } else {
        f64::INFINITY
    };
    (kink, rho)
}

/// q(μ, σ) = ∫ Ψ{α(μ + σe − δ)} φ(e) de, the probability an observation
/// with mean μ and standard deviation σ is observed.
pub fn miss_prob(
    cdf: &SelectionCdf,
    alpha: f64,
    delta: f64,
    mu: f64,
    sigma: f64,
    rule: &QuadratureRule,
) -> Result<f64> {
    validate(alpha, delta, mu, sigma)?;
    Ok(miss_prob_pair(cdf, alpha, delta, mu, sigma, rule).0)
}

/// Returns (q, 1 − q), each integrated directly so that neither suffers
/// cancellation in its tail.
pub(crate) fn miss_prob_pair(
    cdf: &SelectionCdf,
    alpha: f64,
    delta: f64,
    mu: f64,
    sigma: f64,
    rule: &QuadratureRule,
) -> (f64, f64) {
    if alpha == 0.0 {
        return (0.5, 0.5);
    }
    let (kink, rho) = kink_and_rho(cdf, alpha, delta, mu, sigma);
    let (mut q, mut qbar) = (0.0, 0.0);
    rule.for_each_node(kink, rho, |e, w| {
        let (p, pc) = cdf.cdf_pair(alpha * (mu + sigma * e - delta));
        q += w * p;
        qbar += w * pc;
    });
    (q, qbar)
}

/// Partial derivatives of q(μ, σ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissProbPartials {
    pub dq_dmu: f64,
    pub dq_dsigma: f64,
    pub d2q_dmu2: f64,
    pub d2q_dsigma2: f64,
    pub d2q_dmu_dsigma: f64,
}

pub fn miss_prob_partials(
    cdf: &SelectionCdf,
    alpha: f64,
    delta: f64,
    mu: f64,
    sigma: f64,
    rule: &QuadratureRule,
) -> Result<MissProbPartials> {
    validate(alpha, delta, mu, sigma)?;
    if alpha == 0.0 {
        return Ok(MissProbPartials {
            dq_dmu: 0.0,
            dq_dsigma: 0.0,
            d2q_dmu2: 0.0,
            d2q_dsigma2: 0.0,
            d2q_dmu_dsigma: 0.0,
        });
    }
    let (kink, rho) = kink_and_rho(cdf, alpha, delta, mu, sigma);
    let mut acc = [0.0f64; 5];
    rule.for_each_node(kink, rho, |e, w| {
        let d = cdf.density_derivs(alpha * (mu + sigma * e - delta));
        acc[0] += w * d[0];
        acc[1] += w * d[0] * e;
        acc[2] += w * d[1];
        acc[3] += w * d[1] * e;
        acc[4] += w * d[1] * e * e;
    });
    let a2 = alpha * alpha;
    Ok(MissProbPartials {
        dq_dmu: alpha * acc[0],
        dq_dsigma: alpha * acc[1],
        d2q_dmu2: a2 * acc[2],
        d2q_dmu_dsigma: a2 * acc[3],
        d2q_dsigma2: a2 * acc[4],
    })
}

/// Everything the observed-data likelihood needs for one sample, from a
/// single pass over the quadrature nodes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ObservationMoments {
    pub q_bar: f64,
    pub dq_dmu: f64,
    pub dq_dsigma: f64,
    /// ∫ Ψ e² φ
    pub m_e2: f64,
    /// ∫ Ψ e(e² − 1) φ
    pub m_e3: f64,
    /// ∫ Ψ (e² − 1)² φ
    pub m_e4: f64,
}

pub(crate) fn observation_moments(
    cdf: &SelectionCdf,
    alpha: f64,
    delta: f64,
    mu: f64,
    sigma: f64,
    rule: &QuadratureRule,
) -> ObservationMoments {
    if alpha == 0.0 {
        return ObservationMoments {
            q_bar: 0.5,
            dq_dmu: 0.0,
            dq_dsigma: 0.0,
            m_e2: 0.5,
            m_e3: 0.0,
            m_e4: 1.0,
        };
    }
    let (kink, rho) = kink_and_rho(cdf, alpha, delta, mu, sigma);
    let mut acc = [0.0f64; 7];
    rule.for_each_node(kink, rho, |e, w| {
        let x = alpha * (mu + sigma * e - delta);
        let (p, pc) = cdf.cdf_pair(x);
        let d1 = cdf.density_derivs(x)[0];
        let e2m1 = e * e - 1.0;
        acc[1] += w * pc;
        acc[2] += w * d1;
        acc[3] += w * d1 * e;
        acc[4] += w * p * e * e;
        acc[5] += w * p * e * e2m1;
        acc[6] += w * p * e2m1 * e2m1;
    });
    ObservationMoments {
        q_bar: acc[1],
        dq_dmu: alpha * acc[2],
        dq_dsigma: alpha * acc[3],
        m_e2: acc[4],
        m_e3: acc[5],
        m_e4: acc[6],
    }
}
