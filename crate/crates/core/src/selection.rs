//! Selection CDFs linking a metabolite's log-abundance to the probability it
//! is observed, together with their first four derivatives.

use serde::{Deserialize, Serialize};
use statrs::function::{beta::beta_reg, erf::erfc, gamma::ln_gamma};

use crate::error::{Error, Result};

/// Parametric family of a selection CDF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SelectionFamily {
    StudentT { df: f64 },
    Logistic,
    Normal,
}

/// A symmetric selection CDF Ψ with Ψ(-x) = 1 - Ψ(x).
///
/// The default is the Student-t CDF with four degrees of freedom, whose
/// polynomial left tail keeps inverse-probability weights bounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SelectionFamily", into = "SelectionFamily")]
pub struct SelectionCdf {
    family: SelectionFamily,
    // Student-t density normalising constant; unused otherwise.
    norm: f64,
}

impl Default for SelectionCdf {
    fn default() -> Self {
        Self::student_t(4.0).expect("df = 4 is valid")
    }
}

impl TryFrom<SelectionFamily> for SelectionCdf {
    type Error = Error;

    fn try_from(family: SelectionFamily) -> Result<Self> {
        match family {
            SelectionFamily::StudentT { df } => Self::student_t(df),
            SelectionFamily::Logistic => Ok(Self::logistic()),
            SelectionFamily::Normal => Ok(Self::normal()),
        }
    }
}

impl From<SelectionCdf> for SelectionFamily {
    fn from(c: SelectionCdf) -> Self {
        c.family
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl SelectionCdf {
    pub fn student_t(df: f64) -> Result<Self> {
        if !(df.is_finite() && df > 0.0) {
            return Err(Error::InvalidInput(format!(
                "Student-t degrees of freedom must be positive, got {df}"
            )));
        }
        let norm = if df == 4.0 {
            0.375
        } else {
            (ln_gamma(0.5 * (df + 1.0)) - ln_gamma(0.5 * df) - 0.5 * (df * std::f64::consts::PI).ln())
                .exp()
        };
        Ok(Self {
            family: SelectionFamily::StudentT { df },
            norm,
        })
    }

    pub fn logistic() -> Self {
        Self {
            family: SelectionFamily::Logistic,
            norm: 0.0,
        }
    }

    pub fn normal() -> Self {
        Self {
            family: SelectionFamily::Normal,
            norm: 0.0,
        }
    }

    pub fn family(&self) -> SelectionFamily {
        self.family
    }

    /// Short human-readable tag, e.g. `student_t(4)`.
    pub fn label(&self) -> String {
        match self.family {
            SelectionFamily::StudentT { df } => format!("student_t({df})"),
            SelectionFamily::Logistic => "logistic".into(),
            SelectionFamily::Normal => "normal".into(),
        }
    }

    /// Variance of a random variable with this CDF (infinite for t with df <= 2).
    pub fn variance(&self) -> f64 {
        match self.family {
            SelectionFamily::StudentT { df } if df > 2.0 => df / (df - 2.0),
            SelectionFamily::StudentT { .. } => f64::INFINITY,
            SelectionFamily::Logistic => std::f64::consts::PI.powi(2) / 3.0,
            SelectionFamily::Normal => 1.0,
        }
    }

    /// Distance from the real axis to the nearest singularity of Ψ in the
    /// complex plane. Used to grade quadrature panels around the kink.
    pub(crate) fn singularity_distance(&self) -> f64 {
        match self.family {
            SelectionFamily::StudentT { df } => df.sqrt(),
            SelectionFamily::Logistic => std::f64::consts::PI,
            // entire; this is only a resolution scale
            SelectionFamily::Normal => 1.5,
        }
    }

    /// Ψ⁽ᵈ⁾(x) for `deriv_order` in 0..=4.
    pub fn psi(&self, x: f64, deriv_order: usize) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::InvalidInput(format!("psi argument must be finite, got {x}")));
        }
        if deriv_order > 4 {
            return Err(Error::InvalidInput(format!(
                "psi derivative order must be in 0..=4, got {deriv_order}"
            )));
        }
        Ok(self.derivs(x)[deriv_order])
    }

    /// Lower-tail mass Ψ(-a) for a >= 0, computed without cancellation.
    #[inline]
    fn lower_tail(&self, a: f64) -> f64 {
        debug_assert!(a >= 0.0);
        match self.family {
            SelectionFamily::StudentT { df } if df == 4.0 => {
                let r = (4.0 + a * a).sqrt();
                let w = a / r;
                let one_minus_w = 4.0 / (r * (r + a));
                0.25 * one_minus_w * one_minus_w * (2.0 + w)
            }
            SelectionFamily::StudentT { df } => 0.5 * beta_reg(0.5 * df, 0.5, df / (df + a * a)),
            SelectionFamily::Logistic => {
                let e = (-a).exp();
                e / (1.0 + e)
            }
            SelectionFamily::Normal => 0.5 * erfc(a * std::f64::consts::FRAC_1_SQRT_2),
        }
    }

    /// Returns (Ψ(x), Ψ(-x)); whichever is small is computed directly.
    #[inline]
    pub fn cdf_pair(&self, x: f64) -> (f64, f64) {
        let lt = self.lower_tail(x.abs());
        if x < 0.0 {
            (lt, 1.0 - lt)
        } else {
            (1.0 - lt, lt)
        }
    }

    #[inline]
    pub fn cdf(&self, x: f64) -> f64 {
        self.cdf_pair(x).0
    }

    /// Returns [Ψ'(x), Ψ''(x), Ψ'''(x), Ψ''''(x)].
    #[inline]
    pub fn density_derivs(&self, x: f64) -> [f64; 4] {
        match self.family {
            SelectionFamily::StudentT { df } => {
                let a = 1.0 / df;
                let m = 0.5 * (df + 1.0);
                let u = 1.0 + x * x * a;
                let base = if df == 4.0 {
                    self.norm / (u * u * u.sqrt())
                } else {
                    self.norm * u.powf(-m)
                };
                let x2 = x * x;
                let p1 = -2.0 * m * a * x;
                let p2 = -2.0 * m * a + 2.0 * m * (2.0 * m + 1.0) * a * a * x2;
                let p3 = 12.0 * m * (m + 1.0) * a * a * x
                    - 4.0 * m * (2.0 * m + 1.0) * (m + 1.0) * a * a * a * x2 * x;
                let f0 = base;
                let f1 = base / u * p1;
                let f2 = base / (u * u) * p2;
                let f3 = base / (u * u * u) * p3;
                [f0, f1, f2, f3]
            }
            SelectionFamily::Logistic => {
                let (p, q) = self.cdf_pair(x);
                let s = p * q;
                let d = q - p; // 1 - 2p
                let pq = p * q;
                [
                    s,
                    s * d,
                    s * (1.0 - 6.0 * pq),
                    s * d * (1.0 - 12.0 * pq),
                ]
            }
            SelectionFamily::Normal => {
                let phi = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
                [
                    phi,
                    -x * phi,
                    (x * x - 1.0) * phi,
                    -(x * x * x - 3.0 * x) * phi,
                ]
            }
        }
    }

    /// Returns [Ψ, Ψ', Ψ'', Ψ''', Ψ''''] at x.
    #[inline]
    pub fn derivs(&self, x: f64) -> [f64; 5] {
        let d = self.density_derivs(x);
        [self.cdf(x), d[0], d[1], d[2], d[3]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn families() -> Vec<SelectionCdf> {
        vec![
            SelectionCdf::default(),
            SelectionCdf::student_t(7.5).unwrap(),
            SelectionCdf::logistic(),
            SelectionCdf::normal(),
        ]
    }

    #[test]
    fn t4_values() {
        let c = SelectionCdf::default();
        assert_eq!(c.psi(0.0, 0).unwrap(), 0.5);
        assert!((c.psi(0.0, 1).unwrap() - 0.375).abs() < 1e-15);
        // closed form agrees with the incomplete-beta route
        let general = SelectionCdf {
            family: SelectionFamily::StudentT { df: 4.0 },
            norm: 0.375,
        };
        for &x in &[-30.0, -3.0, -0.7, 0.2, 1.9, 12.0] {
            let via_beta = if x < 0.0 {
                0.5 * beta_reg(2.0, 0.5, 4.0 / (4.0 + x * x))
            } else {
                1.0 - 0.5 * beta_reg(2.0, 0.5, 4.0 / (4.0 + x * x))
            };
            assert!((general.cdf(x) - via_beta).abs() < 1e-14, "x = {x}");
        }
    }

    #[test]
    fn logistic_value() {
        let v = SelectionCdf::logistic().psi(2.0, 0).unwrap();
        assert!((v - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((v - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_arguments() {
        let c = SelectionCdf::default();
        assert!(c.psi(f64::NAN, 0).is_err());
        assert!(c.psi(f64::INFINITY, 1).is_err());
        assert!(c.psi(0.0, 5).is_err());
        assert!(SelectionCdf::student_t(0.0).is_err());
        assert!(SelectionCdf::student_t(-1.0).is_err());
    }

    #[test]
    fn symmetry_and_limits() {
        for c in families() {
            for i in -200..=200 {
                let x = i as f64 * 0.25;
                let (p, q) = c.cdf_pair(x);
                assert!((c.cdf(-x) - q).abs() < 1e-15);
                assert!((p + q - 1.0).abs() < 1e-15);
                assert!((0.0..=1.0).contains(&p));
            }
            assert!(c.cdf(-1e6) < 1e-10);
            assert!(c.cdf(1e6) > 1.0 - 1e-10);
        }
    }

    #[test]
    fn tail_is_accurate() {
        // t4 lower tail ~ 3 / x^4 for large |x|
        let c = SelectionCdf::default();
        let x = 1e4;
        let lt = c.cdf(-x);
        assert!(lt > 0.0);
        assert!((lt * x.powi(4) / 3.0 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn monotone() {
        for c in families() {
            let mut prev = 0.0;
            for i in -400..=400 {
                let v = c.cdf(i as f64 * 0.125);
                assert!(v >= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for c in families() {
            // scale of each derivative order over the grid, for a mixed tolerance
            let grid: Vec<f64> = (0..200).map(|i| -50.0 + 100.0 * i as f64 / 199.0).collect();
            let mut scale = [0.0f64; 5];
            for &x in &grid {
                for (j, v) in c.derivs(x).iter().enumerate() {
                    scale[j] = scale[j].max(v.abs());
                }
            }
            for &x in &grid {
                for j in 1..=4 {
                    let fd = (c.psi(x + h, j - 1).unwrap() - c.psi(x - h, j - 1).unwrap()) / (2.0 * h);
                    let an = c.psi(x, j).unwrap();
                    let err = (an - fd).abs();
                    assert!(
                        err <= 1e-6 * an.abs().max(scale[j]),
                        "{:?} order {j} at x={x}: analytic {an} fd {fd}",
                        c.family()
                    );
                }
            }
        }
    }

    #[test]
    fn serde_round_trip_and_validation() {
        let c = SelectionCdf::student_t(4.0).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(s, r#"{"family":"student_t","df":4.0}"#);
        let back: SelectionCdf = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<SelectionCdf>(r#"{"family":"student_t","df":-2.0}"#).is_err());
        let l: SelectionCdf = serde_json::from_str(r#"{"family":"logistic"}"#).unwrap();
        assert_eq!(l, SelectionCdf::logistic());
    }
}
