//! q-values.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum QValueMethod {
    /// Benjamini–Hochberg step-up.
    #[default]
    BenjaminiHochberg,
    /// Storey's estimator of the null proportion at a fixed λ, times BH.
    Storey { lambda: f64 },
}

/// Step-up q-values. NaN p-values are treated as 1.
pub fn qvalues(p: &[f64], method: QValueMethod) -> Vec<f64> {
    let m = p.len();
    if m == 0 {
        return Vec::new();
    }
    let clean: Vec<f64> = p.iter().map(|&v| if v.is_nan() { 1.0 } else { v.clamp(0.0, 1.0) }).collect();
    let pi0 = match method {
        QValueMethod::BenjaminiHochberg => 1.0,
        QValueMethod::Storey { lambda } => {
            let above = clean.iter().filter(|&&v| v > lambda).count() as f64;
            (above / ((1.0 - lambda) * m as f64)).clamp(1.0 / m as f64, 1.0)
        }
    };
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| clean[a].partial_cmp(&clean[b]).unwrap().then(a.cmp(&b)));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        let v = pi0 * clean[i] * m as f64 / (rank + 1) as f64;
        running = running.min(v);
        q[i] = running.min(1.0);
    }
    q
}

pub fn bh(p: &[f64]) -> Vec<f64> {
    qvalues(p, QValueMethod::BenjaminiHochberg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bh_arithmetic() {
        assert_eq!(bh(&[1.0, 1.0, 1.0]), vec![1.0, 1.0, 1.0]);
        let q = bh(&[0.01, 0.02, 0.03, 0.04]);
        for v in q {
            assert!((v - 0.04).abs() < 1e-15);
        }
        let q = bh(&[0.04, 0.01]);
        assert!((q[0] - 0.04).abs() < 1e-15 && (q[1] - 0.02).abs() < 1e-15);
        assert!(bh(&[]).is_empty());
    }

    #[test]
    fn storey_is_no_larger_than_bh() {
        let p: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        let a = bh(&p);
        let b = qvalues(&p, QValueMethod::Storey { lambda: 0.5 });
        for (x, y) in a.iter().zip(&b) {
            assert!(y <= x);
        }
    }

    proptest! {
        #[test]
        fn monotone_bounded(p in proptest::collection::vec(0.0f64..=1.0, 1..60)) {
            let q = bh(&p);
            for i in 0..p.len() {
                prop_assert!(q[i] <= 1.0 && q[i] >= p[i] - 1e-15);
                for j in 0..p.len() {
                    if p[i] < p[j] {
                        prop_assert!(q[i] <= q[j]);
                    }
                }
            }
        }
    }
}
