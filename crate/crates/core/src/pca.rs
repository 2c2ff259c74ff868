//! PCA of flattened deltas through the `N x N` Gram matrix.
//!
//! With `N` adapters and `D` coordinates, `D ≫ N`: only pairwise dot
//! products are formed, so memory stays `O(N² + D)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter_io::DeltaVector;
use crate::error::{Error, Result};
use crate::stats::{auc, spearman};

/// Relative floor below which a Gram eigenvalue counts as zero.
const EIGEN_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub ids: Vec<String>,
    /// `N x C`; column `j` holds every adapter's score on component `j`.
    pub component_scores: DMatrix<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Variance along each component (`λ / (N - 1)`).
    pub variances: Vec<f64>,
    pub ordering_tag: String,
    pub n: usize,
    pub mean: Vec<f64>,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.component_scores.ncols()
    }

    pub fn scores(&self, component: usize) -> Result<Vec<f64>> {
        if component >= self.n_components() {
            return Err(Error::Parameter(format!(
                "component {component} out of range ({} available)",
                self.n_components()
            )));
        }
        Ok(self.component_scores.column(component).iter().copied().collect())
    }
}

/// Dot product with a fixed left-to-right reduction order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Raw Gram matrix `G[i, j] = xᵢ · xⱼ`. Pairs are computed in parallel; each
/// entry is a sequential reduction, so the result does not depend on scheduling.
pub fn gram_matrix(vectors: &[DeltaVector]) -> DMatrix<f64> {
    let n = vectors.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| dot(&vectors[i].values, &vectors[j].values))
        .collect();
    let mut g = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        g[(i, j)] = v;
        g[(j, i)] = v;
    }
    g
}

/// `H G H` with `H = I - 11ᵀ/N`: the Gram matrix of mean-centered vectors.
pub fn double_center(g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g.nrows();
    let nf = n as f64;
    let row_mean: Vec<f64> = (0..n).map(|i| g.row(i).sum() / nf).collect();
    let grand = row_mean.iter().sum::<f64>() / nf;
    DMatrix::from_fn(n, n, |i, j| g[(i, j)] - row_mean[i] - row_mean[j] + grand)
}

fn largest_abs_positive(col: &mut [f64]) {
    let mut best = 0;
    for i in 1..col.len() {
        if col[i].abs() > col[best].abs() {
            best = i;
        }
    }
    if col.get(best).is_some_and(|v| *v < 0.0) {
        col.iter_mut().for_each(|v| *v = -*v);
    }
}

pub fn pca_fit(vectors: &[DeltaVector]) -> Result<PcaModel> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::Population(format!("PCA needs at least 3 vectors, got {n}")));
    }
    let tag = &vectors[0].ordering_tag;
    let dim = vectors[0].values.len();
    for v in vectors {
        if &v.ordering_tag != tag || v.values.len() != dim {
            return Err(Error::Schema(format!(
                "`{}` has ordering `{}`, expected `{tag}`",
                v.adapter_id, v.ordering_tag
            )));
        }
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("`{}` has non-finite entries", v.adapter_id)));
        }
    }
    let centered = double_center(&gram_matrix(vectors));
    let eig = SymmetricEigen::new(centered.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let trace = centered.trace();
    let top = eig.eigenvalues[order[0]].max(0.0);
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&j| top > 0.0 && eig.eigenvalues[j] > EIGEN_RTOL * top)
        .take(n - 1)
        .collect();
    let c = kept.len();
    let mut scores = DMatrix::zeros(n, c);
    let mut evr = Vec::with_capacity(c);
    let mut variances = Vec::with_capacity(c);
    for (out, &j) in kept.iter().enumerate() {
        let lambda = eig.eigenvalues[j];
        let mut col: Vec<f64> = eig.eigenvectors.column(j).iter().map(|e| e * lambda.sqrt()).collect();
        largest_abs_positive(&mut col);
        scores.set_column(out, &nalgebra::DVector::from_vec(col));
        evr.push(if trace > 0.0 { lambda / trace } else { 0.0 });
        variances.push(lambda / (n as f64 - 1.0));
    }
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(&v.values) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Ok(PcaModel {
        ids: vectors.iter().map(|v| v.adapter_id.clone()).collect(),
        component_scores: scores,
        explained_variance_ratio: evr,
        variances,
        ordering_tag: tag.clone(),
        n,
        mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedAuc {
    /// `max(auc, 1 - auc)`.
    pub auc: f64,
    /// AUC of the raw component scores.
    pub raw_auc: f64,
    /// `+1` if raw scores rank positives higher, `-1` if flipped.
    pub orientation: i8,
}

/// Type AUC of one component. Component sign is arbitrary, so the better
/// orientation is reported with the raw value alongside.
pub fn pc_objective_auc(model: &PcaModel, component: usize, labels: &[bool]) -> Result<OrientedAuc> {
    if labels.len() != model.n {
        return Err(Error::Parameter(format!("{} labels for {} adapters", labels.len(), model.n)));
    }
    let raw = auc(&model.scores(component)?, labels)?;
    let flipped = 1.0 - raw;
    Ok(if raw >= flipped {
        OrientedAuc { auc: raw, raw_auc: raw, orientation: 1 }
    } else {
        OrientedAuc { auc: flipped, raw_auc: raw, orientation: -1 }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedRho {
    /// Non-negative after orientation.
    pub rho: f64,
    pub p_value: f64,
    pub orientation: i8,
    pub n_levels: usize,
}

/// Spearman ρ between component scores and intensity, with the component
/// sign chosen so that ρ ≥ 0.
pub fn pc_intensity_rho(model: &PcaModel, component: usize, intensity: &[f64]) -> Result<OrientedRho> {
    if intensity.len() != model.n {
        return Err(Error::Parameter(format!(
            "{} intensities for {} adapters",
            intensity.len(),
            model.n
        )));
    }
    let mut levels: Vec<f64> = intensity.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if levels.len() < 3 {
        return Err(Error::Degenerate(format!(
            "intensity correlation needs 3 distinct levels, got {}",
            levels.len()
        )));
    }
    let s = spearman(&model.scores(component)?, intensity)?;
    Ok(OrientedRho {
        rho: s.rho.abs(),
        p_value: s.p_value,
        orientation: if s.rho < 0.0 { -1 } else { 1 },
        n_levels: levels.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub component: usize,
    pub explained_variance_ratio: f64,
    pub scores: BTreeMap<String, f64>,
    pub objective_auc: Option<OrientedAuc>,
    pub intensity_rho: Option<OrientedRho>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    pub n: usize,
    pub ordering_tag: String,
    /// Which ids counted as the positive type, if a type split was given.
    pub positive_type: Option<String>,
    pub components: Vec<ComponentSummary>,
}

/// Summarizes the leading `max_components` components. Type labels and
/// intensities are optional; a missing or degenerate input leaves that
/// field empty.
pub fn pca_report(
    model: &PcaModel,
    max_components: usize,
    labels: Option<(&[bool], &str)>,
    intensity: Option<&[f64]>,
) -> Result<PcaReport> {
    let mut components = Vec::new();
    for j in 0..model.n_components().min(max_components) {
        let scores = model.scores(j)?;
        let objective_auc = match labels {
            Some((l, _)) => match pc_objective_auc(model, j, l) {
                Ok(a) => Some(a),
                Err(Error::Class(_)) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        let intensity_rho = match intensity {
            Some(s) => match pc_intensity_rho(model, j, s) {
                Ok(r) => Some(r),
                Err(Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        components.push(ComponentSummary {
            component: j + 1,
            explained_variance_ratio: model.explained_variance_ratio[j],
            scores: model.ids.iter().cloned().zip(scores).collect(),
            objective_auc,
            intensity_rho,
        });
    }
    Ok(PcaReport {
        n: model.n,
        ordering_tag: model.ordering_tag.clone(),
        positive_type: labels.map(|(_, name)| name.to_string()),
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn vecs(rows: &[Vec<f64>]) -> Vec<DeltaVector> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| DeltaVector {
                adapter_id: format!("a{i:02}"),
                values: r.clone(),
                ordering_tag: "t".into(),
            })
            .collect()
    }

    fn random_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn planted_axis_separates() {
        let mut rows = random_rows(1, 12, 40);
        for (i, r) in rows.iter_mut().enumerate() {
            r.iter_mut().for_each(|x| *x *= 0.1);
            r[0] += if i < 6 { 5.0 } else { -5.0 };
        }
        let m = pca_fit(&vecs(&rows)).unwrap();
        let labels: Vec<bool> = (0..12).map(|i| i < 6).collect();
        assert_eq!(pc_objective_auc(&m, 0, &labels).unwrap().auc, 1.0);
    }

    #[test]
    fn duplicates_keep_components() {
        let rows = random_rows(2, 6, 30);
        let a = pca_fit(&vecs(&rows)).unwrap();
        let mut doubled = rows.clone();
        doubled.extend(rows.iter().cloned());
        let b = pca_fit(&vecs(&doubled)).unwrap();
        assert_eq!(b.n, 12);
        assert_eq!(a.n_components(), b.n_components());
        for j in 0..a.n_components() {
            assert!((a.explained_variance_ratio[j] - b.explained_variance_ratio[j]).abs() < 1e-10);
            for i in 0..6 {
                let (x, y) = (a.component_scores[(i, j)], b.component_scores[(i, j)]);
                assert!((x.abs() - y.abs()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn scores_are_centered_and_evr_bounded() {
        let m = pca_fit(&vecs(&random_rows(3, 9, 25))).unwrap();
        assert!(m.n_components() <= 8);
        for j in 0..m.n_components() {
            assert!(m.component_scores.column(j).sum().abs() < 1e-8 * 9.0);
        }
        assert!(m.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1]));
        assert!(m.explained_variance_ratio.iter().sum::<f64>() <= 1.0 + 1e-9);
    }

    #[test]
    fn preconditions() {
        let mut v = vecs(&random_rows(4, 5, 10));
        assert!(matches!(pca_fit(&v[..2]), Err(Error::Population(_))));
        v[3].ordering_tag = "other".into();
        assert!(matches!(pca_fit(&v), Err(Error::Schema(_))));
        let m = pca_fit(&vecs(&random_rows(4, 5, 10))).unwrap();
        assert!(matches!(
            pc_intensity_rho(&m, 0, &[1.0, 2.0, 1.0, 2.0, 1.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(pc_objective_auc(&m, 0, &[true; 5]), Err(Error::Class(_))));
    }
}
