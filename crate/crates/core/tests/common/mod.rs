//! Independent reference implementations used as test oracles. None of them
//! call into the library's numerics.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Orthonormal columns by modified Gram-Schmidt on a Gaussian matrix.
pub fn random_orthonormal(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut q = gaussian_matrix(rng, rows, cols);
    for j in 0..cols {
        for i in 0..j {
            let proj = q.column(i).dot(&q.column(j));
            let qi = q.column(i).clone_owned();
            q.column_mut(j).axpy(-proj, &qi, 1.0);
        }
        let n = q.column(j).norm();
        q.column_mut(j).scale_mut(1.0 / n);
    }
    q
}

/// Eigenvalues (descending) and eigenvectors (as columns, same order) of a
/// symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                let (rp, rq) = (a[p].clone(), a[q].clone());
                for (k, (apk, aqk)) in rp.into_iter().zip(rq).enumerate() {
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&j| (0..n).map(|i| v[i][j]).collect()).collect();
    (values, vectors)
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Squared singular values of `m` from the eigenvalues of `mᵀm`, descending,
/// truncated to min(rows, cols).
pub fn singular_values_sq(m: &DMatrix<f64>) -> Vec<f64> {
    let gram = m.transpose() * m;
    let (mut vals, _) = jacobi_eigen(&to_rows(&gram));
    vals.truncate(m.nrows().min(m.ncols()));
    vals.iter().map(|v| v.max(0.0)).collect()
}

/// AUC by counting every positive/negative pair, ties as one half.
pub fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, si) in scores.iter().enumerate() {
        for (j, sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// 1-based average ranks by counting smaller and equal values.
pub fn counted_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|x| {
            let below = xs.iter().filter(|y| *y < x).count() as f64;
            let equal = xs.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    sxy / (sxx * syy).sqrt()
}

/// Spearman as the Pearson correlation of counted average ranks.
pub fn rank_spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&counted_ranks(x), &counted_ranks(y))
}

/// PCA scores by eigendecomposition of the D x D covariance (unnormalized
/// scatter). Returns (explained variance ratios, score columns), leading
/// components first.
pub fn direct_pca(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len();
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let scatter: Vec<Vec<f64>> = (0..d)
        .map(|a| (0..d).map(|b| centered.iter().map(|r| r[a] * r[b]).sum()).collect())
        .collect();
    let (vals, vecs) = jacobi_eigen(&scatter);
    let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    let keep = vals.iter().take(n - 1).filter(|v| **v > 1e-9 * vals[0]).count();
    let evr = vals[..keep].iter().map(|v| v / total).collect();
    let scores = vecs[..keep]
        .iter()
        .map(|w| centered.iter().map(|r| r.iter().zip(w).map(|(a, b)| a * b).sum()).collect())
        .collect();
    (evr, scores)
}

/// max |a_i - s b_i| over the better of s = ±1.
pub fn max_diff_up_to_sign(a: &[f64], b: &[f64]) -> f64 {
    let plus = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let minus = a.iter().zip(b).map(|(x, y)| (x + y).abs()).fold(0.0, f64::max);
    plus.min(minus)
}
