//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use dfcformer::dfc::Label;
use dfcformer::numerics::Tensor;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};

/// Pearson correlation from exact rational sums; only the final square root
/// is taken in floating point.
pub fn exact_pearson(x: &[f64], y: &[f64]) -> f64 {
    let q = |v: f64| BigRational::from_float(v).expect("finite");
    let n = BigRational::from_integer(BigInt::from(x.len()));
    let mx = x.iter().map(|&v| q(v)).fold(BigRational::zero(), |a, b| a + b) / &n;
    let my = y.iter().map(|&v| q(v)).fold(BigRational::zero(), |a, b| a + b) / &n;
    let mut sxy = BigRational::zero();
    let mut sxx = BigRational::zero();
    let mut syy = BigRational::zero();
    for (&a, &b) in x.iter().zip(y) {
        let dx = q(a) - &mx;
        let dy = q(b) - &my;
        sxy += &dx * &dy;
        sxx += &dx * &dx;
        syy += &dy * &dy;
    }
    let r2 = (&sxy * &sxy) / (sxx * syy);
    let r = r2.to_f64().unwrap().sqrt();
    if sxy.is_negative() {
        -r
    } else {
        r
    }
}

pub fn assert_fc_invariants(m: &Tensor) {
    let n = m.rows();
    assert_eq!(m.cols(), n);
    for i in 0..n {
        assert_eq!(m.get(i, i), 1.0, "diagonal");
        for j in 0..n {
            let v = m.get(i, j);
            assert!((-1.0..=1.0).contains(&v), "range: {v}");
            assert_eq!(v, m.get(j, i), "symmetry");
        }
    }
}

/// Non-panicking form of [`assert_fc_invariants`].
pub fn fc_invariants_hold(m: &Tensor) -> bool {
    let n = m.rows();
    m.cols() == n
        && (0..n).all(|i| {
            m.get(i, i) == 1.0
                && (0..n).all(|j| (-1.0..=1.0).contains(&m.get(i, j)) && m.get(i, j) == m.get(j, i))
        })
}

/// Term-by-term enumeration: for every anchor i and every positive p,
/// `−log(exp(s_ip/τ) / Σ_{k≠i} exp(s_ik/τ))`, averaged over all terms.
pub fn enumerate_contrastive(emb: &[Vec<f64>], labels: &[Label], tau: f64) -> Option<f64> {
    let cos = |u: &[f64], v: &[f64]| {
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (nu * nv)
    };
    let b = emb.len();
    let mut total = 0.0;
    let mut terms = 0usize;
    for i in 0..b {
        let denom: f64 = (0..b).filter(|&k| k != i).map(|k| (cos(&emb[i], &emb[k]) / tau).exp()).sum();
        for p in 0..b {
            if p != i && labels[p] == labels[i] {
                total += -((cos(&emb[i], &emb[p]) / tau).exp() / denom).ln();
                terms += 1;
            }
        }
    }
    (terms > 0).then(|| total / terms as f64)
}

/// Pair-counting AUC: P(positive outranks negative), ties ½.
pub fn brute_force_auc(scores: &[f64], labels: &[Label]) -> f64 {
    let mut wins2 = 0u64;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != Label::Mci {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != Label::Nc {
                continue;
            }
            pairs += 1;
            wins2 += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    wins2 as f64 / (2 * pairs) as f64
}
