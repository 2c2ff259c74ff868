//! ROC AUC, bootstrap percentile intervals and Spearman correlation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub low: f64,
    pub high: f64,
    pub level: f64,
    pub n_valid: usize,
    pub n_requested: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    /// Two-sided, from the t approximation with n - 2 degrees of freedom.
    /// Only approximate for small n.
    pub p_value: f64,
    pub n: usize,
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("{what} contain non-finite values")));
    }
    Ok(())
}

/// Twice the average rank of every element (1-based), as integers so that
/// tied groups are represented exactly.
fn doubled_ranks(xs: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0u64; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // positions i+1 ..= j+1 share rank (i + j + 2) / 2
        let twice = (i + j + 2) as u64;
        for &t in &idx[i..=j] {
            out[t] = twice;
        }
        i = j + 1;
    }
    out
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    doubled_ranks(xs).into_iter().map(|r| r as f64 / 2.0).collect()
}

/// P(score₊ > score₋) + ½ P(tie), via the rank-sum identity.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Parameter(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_finite(scores, "scores")?;
    let n_pos = labels.iter().filter(|l| **l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Class("AUC needs both classes present".into()));
    }
    Ok(auc_unchecked(scores, labels, n_pos, n_neg))
}

fn auc_unchecked(scores: &[f64], labels: &[bool], n_pos: u64, n_neg: u64) -> f64 {
    let r2: u64 = doubled_ranks(scores)
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l)
        .map(|(r, _)| *r)
        .sum();
    // 2U = 2R₊ − n₊(n₊+1)
    let u2 = r2 - n_pos * (n_pos + 1);
    u2 as f64 / (2 * n_pos * n_neg) as f64
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for the AUC. Resample `b` draws from a
/// ChaCha20 stream keyed by `(seed, b)`, so the result does not depend on
/// evaluation order. Single-class resamples are dropped and counted out of
/// `n_valid`.
pub fn bootstrap_auc_ci(
    scores: &[f64],
    labels: &[bool],
    n: usize,
    level: f64,
    seed: u64,
) -> Result<ConfidenceInterval> {
    auc(scores, labels)?;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!("coverage level {level} outside (0, 1)")));
    }
    let len = scores.len();
    let draws: Vec<Option<f64>> = (0..n)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut s = Vec::with_capacity(len);
            let mut l = Vec::with_capacity(len);
            for _ in 0..len {
                let i = rng.random_range(0..len);
                s.push(scores[i]);
                l.push(labels[i]);
            }
            let n_pos = l.iter().filter(|x| **x).count() as u64;
            let n_neg = len as u64 - n_pos;
            (n_pos > 0 && n_neg > 0).then(|| auc_unchecked(&s, &l, n_pos, n_neg))
        })
        .collect();
    let mut valid: Vec<f64> = draws.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::Degenerate(format!(
            "all {n} bootstrap resamples contained a single class"
        )));
    }
    valid.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(ConfidenceInterval {
        low: quantile_sorted(&valid, tail),
        high: quantile_sorted(&valid, 1.0 - tail),
        level,
        n_valid: valid.len(),
        n_requested: n,
    })
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<SpearmanResult> {
    if x.len() != y.len() {
        return Err(Error::Parameter(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Degenerate(format!(
            "Spearman needs at least 3 pairs, got {}",
            x.len()
        )));
    }
    check_finite(x, "x values")?;
    check_finite(y, "y values")?;
    let rho = pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::Degenerate("zero rank variance".into()))?;
    let n = x.len();
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(SpearmanResult { rho, p_value, n })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_extremes() {
        let s = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(auc(&s, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&s, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(matches!(auc(&s, &[true; 4]), Err(Error::Class(_))));
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.5), 2.0);
        assert_eq!(quantile_sorted(&v, 0.125), 0.5);
    }

    #[test]
    fn separated_bootstrap_is_pinned() {
        let s = [0.9, 0.8, 0.7, 0.3, 0.2, 0.1];
        let l = [true, true, true, false, false, false];
        let ci = bootstrap_auc_ci(&s, &l, 1000, 0.95, 7).unwrap();
        assert_eq!((ci.low, ci.high), (1.0, 1.0));
        assert!(ci.n_valid < 1000 && ci.n_valid > 900);
        let inv: Vec<bool> = l.iter().map(|x| !x).collect();
        let ci = bootstrap_auc_ci(&s, &inv, 1000, 0.95, 7).unwrap();
        assert_eq!((ci.low, ci.high), (0.0, 0.0));
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let s = [0.9, 0.1, 0.7, 0.3, 0.6, 0.4, 0.5];
        let l = [true, false, false, true, true, false, true];
        let a = bootstrap_auc_ci(&s, &l, 500, 0.9, 3).unwrap();
        let b = bootstrap_auc_ci(&s, &l, 500, 0.9, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.low <= a.high);
    }

    #[test]
    fn spearman_identity_and_reversal() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &x).unwrap().rho, 1.0);
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap().rho, -1.0);
        assert!(matches!(spearman(&x[..2], &x[..2]), Err(Error::Degenerate(_))));
        assert!(matches!(spearman(&x, &[1.0; 4]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn spearman_p_value_matches_t_table() {
        // rho = 0.8 on n = 10: t = 3.771, two-sided p ≈ 0.00546
        let r = SpearmanResult { rho: 0.8, p_value: 0.0, n: 10 };
        let t = r.rho * (8.0f64 / (1.0 - 0.64)).sqrt();
        let p = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, 8.0).unwrap().cdf(t));
        assert!((p - 0.005_46).abs() < 5e-5, "{p}");
    }
}
