//! Per-sublayer SVD and the magnitude, shape and direction feature families.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter_io::{AdapterDelta, AdapterMetadata, ModuleKind, SublayerKey};
use crate::centroid::CentroidModel;
use crate::error::{Error, Result};
use crate::util::{atomic_write, fmt_f64};

/// Below this spectral norm a sublayer is treated as a zero matrix.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// A singular direction whose value is at most this fraction of σ₁ spans
/// (numerically) the null space. Its vector is an arbitrary completion, so
/// it carries no direction information.
pub const NULL_DIRECTION_RTOL: f64 = 1e-9;

const SVD_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `d x p`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Non-increasing, length `p`.
    pub sigma: Vec<f64>,
    /// `k x p`, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl SvdResult {
    pub fn rank_p(&self) -> usize {
        self.sigma.len()
    }

    pub fn spectral_norm(&self) -> f64 {
        self.sigma.first().copied().unwrap_or(0.0)
    }

    pub fn is_degenerate(&self) -> bool {
        self.spectral_norm() < DEGENERATE_EPS
    }

    /// Whether direction `i` is numerically in the null space.
    pub fn is_null_direction(&self, i: usize) -> bool {
        self.is_degenerate() || self.sigma[i] <= NULL_DIRECTION_RTOL * self.sigma[0]
    }

    pub fn recompose(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

/// Flips column `j` of `u` (and of `v` when given) so that the entry with the
/// largest magnitude is positive. Ties go to the lowest index.
pub(crate) fn fix_sign(u: &mut DMatrix<f64>, mut v: Option<&mut DMatrix<f64>>) {
    for j in 0..u.ncols() {
        let col = u.column(j);
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if !col.is_empty() && col[best] < 0.0 {
            u.column_mut(j).neg_mut();
            if let Some(v) = v.as_deref_mut() {
                v.column_mut(j).neg_mut();
            }
        }
    }
}

/// Residual bound, relative to `‖M‖_F`, for accepting a decomposition.
const SVD_CHECK_RTOL: f64 = 1e-10;

/// The bidiagonal QR iteration in nalgebra occasionally reports convergence
/// on rank-deficient input with a wrong factorization. Each attempt is
/// checked by reconstruction and orthonormality; on failure the transposed
/// problem and then looser splitting tolerances are tried.
fn verified_svd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let scale = m.norm().max(DEGENERATE_EPS);
    let accept = |u: &DMatrix<f64>, s: &DVector<f64>, v: &DMatrix<f64>, target: &DMatrix<f64>| {
        let p = s.len();
        let id = DMatrix::<f64>::identity(p, p);
        let mut us = u.clone();
        for (j, x) in s.iter().enumerate() {
            us.column_mut(j).scale_mut(*x);
        }
        (&us * v.transpose() - target).norm() <= SVD_CHECK_RTOL * scale
            && (u.transpose() * u - &id).norm() <= 1e-8
            && (v.transpose() * v - &id).norm() <= 1e-8
    };
    for eps in [f64::EPSILON, 1e-14, 1e-12] {
        for transposed in [false, true] {
            let target = if transposed { m.transpose() } else { m.clone() };
            let Some(dec) = target.clone().try_svd(true, true, eps, SVD_MAX_ITER) else {
                continue;
            };
            let u = dec.u.expect("u requested");
            let v = dec.v_t.expect("v requested").transpose();
            if accept(&u, &dec.singular_values, &v, &target) {
                return Ok(if transposed {
                    (v, u, dec.singular_values)
                } else {
                    (u, v, dec.singular_values)
                });
            }
        }
    }
    Err(Error::Numeric("SVD did not converge to a valid factorization".into()))
}

pub fn svd(delta: &DMatrix<f64>) -> Result<SvdResult> {
    if delta.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("SVD input has non-finite entries".into()));
    }
    let p = delta.nrows().min(delta.ncols());
    if p == 0 {
        return Err(Error::Shape("SVD of an empty matrix".into()));
    }
    let (mut u, mut v, values) = verified_svd(delta)?;
    let s1 = values.max();
    // Rounding-level values are reported as exact zeros so that features of
    // low-rank deltas do not carry solver noise.
    let sigma: Vec<f64> = values
        .iter()
        .map(|&s| if s <= NULL_DIRECTION_RTOL * s1 { 0.0 } else { s })
        .collect();
    fix_sign(&mut u, Some(&mut v));
    Ok(SvdResult { u, sigma, v })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Magnitude,
    Shape,
    Direction,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Magnitude, Family::Shape, Family::Direction];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Magnitude => "magnitude",
            Family::Shape => "shape",
            Family::Direction => "direction",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Family::Magnitude),
            "shape" => Ok(Family::Shape),
            "direction" => Ok(Family::Direction),
            other => Err(Error::Parameter(format!("unknown feature family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeFeatures {
    pub frobenius: f64,
    pub spectral: f64,
    pub top_k: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeFeatures {
    pub stable_rank: f64,
    /// Singular-value entropy in nats.
    pub entropy: f64,
    pub effective_rank: f64,
    /// σ₁² / Σσ².
    pub concentration: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionFeatures {
    pub centroid_cosines: Vec<f64>,
}

pub fn magnitude_features(svd: &SvdResult, k: usize) -> Result<MagnitudeFeatures> {
    if k == 0 || k > svd.rank_p() {
        return Err(Error::Parameter(format!(
            "top-k count {k} outside [1, {}]",
            svd.rank_p()
        )));
    }
    let frobenius = svd.sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
    Ok(MagnitudeFeatures {
        frobenius,
        spectral: svd.spectral_norm(),
        top_k: svd.sigma[..k].to_vec(),
    })
}

pub fn shape_features(svd: &SvdResult) -> ShapeFeatures {
    shape_from_sigma(&svd.sigma)
}

pub(crate) fn shape_from_sigma(sigma: &[f64]) -> ShapeFeatures {
    let s1 = sigma.first().copied().unwrap_or(0.0);
    if s1 < DEGENERATE_EPS {
        return ShapeFeatures {
            stable_rank: 0.0,
            entropy: 0.0,
            effective_rank: 0.0,
            concentration: 0.0,
            degenerate: true,
        };
    }
    let sq: f64 = sigma.iter().map(|s| s * s).sum();
    let total: f64 = sigma.iter().sum();
    let entropy = sigma
        .iter()
        .filter(|s| **s > 0.0)
        .map(|s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0);
    ShapeFeatures {
        stable_rank: sq / (s1 * s1),
        entropy,
        effective_rank: entropy.exp(),
        concentration: (s1 * s1) / sq,
        degenerate: false,
    }
}

fn cosine(a: nalgebra::DVectorView<'_, f64>, b: nalgebra::DVectorView<'_, f64>) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return 0.0;
    }
    (a.dot(&b) / denom).clamp(-1.0, 1.0)
}

pub fn direction_features(
    svd: &SvdResult,
    centroid: &CentroidModel,
    key: SublayerKey,
    k: usize,
) -> Result<DirectionFeatures> {
    let c = centroid
        .per_sublayer
        .get(&key)
        .ok_or_else(|| Error::Schema(format!("centroid has no sublayer {key}")))?;
    if k > c.u.ncols() || k > svd.rank_p() {
        return Err(Error::Parameter(format!(
            "direction count {k} exceeds available vectors at {key}"
        )));
    }
    if c.u.nrows() != svd.u.nrows() {
        return Err(Error::Schema(format!(
            "centroid vectors at {key} have dimension {}, delta has {}",
            c.u.nrows(),
            svd.u.nrows()
        )));
    }
    let centroid_s1 = c.singular_values.first().copied().unwrap_or(0.0);
    let centroid_null = |i: usize| {
        centroid_s1 < DEGENERATE_EPS || c.singular_values[i] <= NULL_DIRECTION_RTOL * centroid_s1
    };
    let centroid_cosines = (0..k)
        .map(|i| {
            if svd.is_null_direction(i) || centroid_null(i) {
                0.0
            } else {
                cosine(svd.u.column(i), c.u.column(i))
            }
        })
        .collect();
    Ok(DirectionFeatures { centroid_cosines })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SublayerFeatures {
    pub magnitude: MagnitudeFeatures,
    pub shape: ShapeFeatures,
    pub direction: Option<DirectionFeatures>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralFeatureSet {
    pub adapter_id: String,
    pub k: usize,
    pub per_sublayer: BTreeMap<SublayerKey, SublayerFeatures>,
}

impl SpectralFeatureSet {
    pub fn has_direction(&self) -> bool {
        self.per_sublayer.values().all(|f| f.direction.is_some())
    }

    pub fn mean_frobenius(&self) -> f64 {
        let n = self.per_sublayer.len().max(1) as f64;
        self.per_sublayer.values().map(|f| f.magnitude.frobenius).sum::<f64>() / n
    }
}

pub fn extract_features(
    delta: &AdapterDelta,
    centroid: Option<&CentroidModel>,
    k: usize,
) -> Result<SpectralFeatureSet> {
    if let Some(c) = centroid {
        if c.k < k {
            return Err(Error::Parameter(format!(
                "centroid holds {} vectors per sublayer, {k} requested",
                c.k
            )));
        }
        for key in delta.deltas.keys() {
            if !c.per_sublayer.contains_key(key) {
                return Err(Error::Schema(format!("centroid has no sublayer {key}")));
            }
        }
    }
    let per_sublayer = delta
        .deltas
        .par_iter()
        .map(|(key, m)| {
            let tag = |e: Error| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{}: sublayer {key}: {msg}", delta.adapter_id)),
                other => other,
            };
            let s = svd(m).map_err(tag)?;
            let magnitude = magnitude_features(&s, k)?;
            let shape = shape_features(&s);
            let direction = centroid.map(|c| direction_features(&s, c, *key, k)).transpose()?;
            Ok((*key, SublayerFeatures { magnitude, shape, direction }))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();
    Ok(SpectralFeatureSet {
        adapter_id: delta.adapter_id.clone(),
        k,
        per_sublayer,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub sublayer: SublayerKey,
    pub family: Family,
    pub name: String,
}

impl FeatureColumn {
    pub fn header(&self) -> String {
        format!("{}.{}.{}", self.sublayer, self.family, self.name)
    }

    pub fn parse_header(h: &str) -> Result<Self> {
        let parts: Vec<&str> = h.splitn(4, '.').collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!("bad feature column `{h}`")));
        }
        Ok(FeatureColumn {
            sublayer: format!("{}.{}", parts[0], parts[1]).parse()?,
            family: parts[2].parse()?,
            name: parts[3].to_string(),
        })
    }
}

/// Column names for one sublayer, in canonical order.
pub fn sublayer_columns(k: usize, with_direction: bool) -> Vec<(Family, String)> {
    let mut cols = vec![
        (Family::Magnitude, "frobenius".to_string()),
        (Family::Magnitude, "spectral".to_string()),
    ];
    cols.extend((1..=k).map(|i| (Family::Magnitude, format!("sigma_{i}"))));
    for n in ["stable_rank", "entropy", "effective_rank", "concentration"] {
        cols.push((Family::Shape, n.to_string()));
    }
    if with_direction {
        cols.extend((1..=k).map(|i| (Family::Direction, format!("cos_{i}"))));
    }
    cols
}

fn sublayer_values(f: &SublayerFeatures) -> Vec<f64> {
    let mut v = vec![f.magnitude.frobenius, f.magnitude.spectral];
    v.extend_from_slice(&f.magnitude.top_k);
    v.extend([
        f.shape.stable_rank,
        f.shape.entropy,
        f.shape.effective_rank,
        f.shape.concentration,
    ]);
    if let Some(d) = &f.direction {
        v.extend_from_slice(&d.centroid_cosines);
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub columns: Vec<FeatureColumn>,
    /// `rows x columns`
    pub values: DMatrix<f64>,
    pub labels: Vec<AdapterMetadata>,
}

pub fn assemble_matrix(
    features: &[SpectralFeatureSet],
    labels: &[AdapterMetadata],
    families: &[Family],
    modules: &[ModuleKind],
) -> Result<FeatureMatrix> {
    if families.is_empty() || modules.is_empty() {
        return Err(Error::Parameter("feature and module filters must be non-empty".into()));
    }
    if labels.len() != features.len() {
        return Err(Error::Parameter(format!(
            "{} feature sets but {} label rows",
            features.len(),
            labels.len()
        )));
    }
    let Some(first) = features.first() else {
        return Err(Error::Population("no adapters to assemble".into()));
    };
    let keys: Vec<SublayerKey> = first.per_sublayer.keys().copied().collect();
    let with_direction = features.iter().all(SpectralFeatureSet::has_direction);
    if families.contains(&Family::Direction) && !with_direction {
        return Err(Error::Dependency(
            "direction features requested but features were extracted without a centroid".into(),
        ));
    }
    for f in features {
        if f.k != first.k || !f.per_sublayer.keys().eq(keys.iter()) {
            return Err(Error::Schema(format!(
                "{} and {} have different sublayer schemas or k",
                first.adapter_id, f.adapter_id
            )));
        }
    }

    let per = sublayer_columns(first.k, with_direction);
    let mut columns = Vec::new();
    let mut picks = Vec::new();
    for (s, key) in keys.iter().enumerate() {
        if !modules.contains(&key.module) {
            continue;
        }
        for (j, (family, name)) in per.iter().enumerate() {
            if families.contains(family) {
                columns.push(FeatureColumn {
                    sublayer: *key,
                    family: *family,
                    name: name.clone(),
                });
                picks.push((s, j));
            }
        }
    }
    if columns.is_empty() {
        return Err(Error::Parameter("filters select no columns".into()));
    }
    let rows: Vec<Vec<Vec<f64>>> = features
        .iter()
        .map(|f| f.per_sublayer.values().map(sublayer_values).collect())
        .collect();
    let values = DMatrix::from_fn(features.len(), columns.len(), |r, c| {
        let (s, j) = picks[c];
        rows[r][s][j]
    });
    Ok(FeatureMatrix {
        ids: features.iter().map(|f| f.adapter_id.clone()).collect(),
        columns,
        values,
        labels: labels.to_vec(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    adapter_id: String,
    #[serde(flatten)]
    meta: AdapterMetadata,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Keeps the columns that pass both filters, in their current order.
    pub fn filter(&self, families: &[Family], modules: &[ModuleKind]) -> Result<FeatureMatrix> {
        if families.is_empty() || modules.is_empty() {
            return Err(Error::Parameter("feature and module filters must be non-empty".into()));
        }
        if families.contains(&Family::Direction) && !self.columns.iter().any(|c| c.family == Family::Direction) {
            return Err(Error::Dependency("matrix has no direction columns".into()));
        }
        let keep: Vec<usize> = (0..self.columns.len())
            .filter(|&j| {
                let c = &self.columns[j];
                families.contains(&c.family) && modules.contains(&c.sublayer.module)
            })
            .collect();
        if keep.is_empty() {
            return Err(Error::Parameter("filters select no columns".into()));
        }
        Ok(FeatureMatrix {
            ids: self.ids.clone(),
            columns: keep.iter().map(|&j| self.columns[j].clone()).collect(),
            values: self.values.select_columns(keep.iter()),
            labels: self.labels.clone(),
        })
    }

    /// Rows in the order given by `ids`.
    pub fn select_rows(&self, ids: &[String]) -> Result<FeatureMatrix> {
        let idx: Vec<usize> = ids
            .iter()
            .map(|id| {
                self.index_of(id)
                    .ok_or_else(|| Error::Schema(format!("adapter `{id}` not in feature matrix")))
            })
            .collect::<Result<_>>()?;
        Ok(FeatureMatrix {
            ids: ids.to_vec(),
            columns: self.columns.clone(),
            values: self.values.select_rows(idx.iter()),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["adapter_id".to_string()];
        header.extend(self.columns.iter().map(FeatureColumn::header));
        w.write_record(&header).map_err(csv_err)?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.values.row(i).iter().map(|x| fmt_f64(*x)));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn labels_json(&self) -> String {
        let rows: Vec<LabelRow> = self
            .ids
            .iter()
            .zip(&self.labels)
            .map(|(id, meta)| LabelRow {
                adapter_id: id.clone(),
                meta: meta.clone(),
            })
            .collect();
        serde_json::to_string_pretty(&rows).expect("labels serialize")
    }

    pub fn from_csv(csv_text: &str, labels_json: &str) -> Result<FeatureMatrix> {
        let mut r = csv::Reader::from_reader(csv_text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        if header.get(0) != Some("adapter_id") {
            return Err(Error::Format("feature CSV must start with an adapter_id column".into()));
        }
        let columns: Vec<FeatureColumn> = header
            .iter()
            .skip(1)
            .map(FeatureColumn::parse_header)
            .collect::<Result<_>>()?;
        let mut ids = Vec::new();
        let mut flat = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != columns.len() + 1 {
                return Err(Error::Parse {
                    line: line + 2,
                    msg: format!("expected {} fields, found {}", columns.len() + 1, rec.len()),
                });
            }
            ids.push(rec[0].to_string());
            for field in rec.iter().skip(1) {
                flat.push(field.parse::<f64>().map_err(|e| Error::Parse {
                    line: line + 2,
                    msg: format!("`{field}`: {e}"),
                })?);
            }
        }
        let rows: Vec<LabelRow> = serde_json::from_str(labels_json)
            .map_err(|e| Error::Format(format!("bad labels sidecar: {e}")))?;
        let by_id: BTreeMap<&str, &AdapterMetadata> =
            rows.iter().map(|r| (r.adapter_id.as_str(), &r.meta)).collect();
        let labels = ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|m| (*m).clone())
                    .ok_or_else(|| Error::Format(format!("labels sidecar lacks `{id}`")))
            })
            .collect::<Result<_>>()?;
        Ok(FeatureMatrix {
            values: DMatrix::from_row_slice(ids.len(), columns.len(), &flat),
            ids,
            columns,
            labels,
        })
    }

    pub fn save(&self, csv_path: &Path, labels_path: &Path) -> Result<()> {
        atomic_write(csv_path, self.to_csv()?.as_bytes())?;
        atomic_write(labels_path, self.labels_json().as_bytes())
    }

    pub fn load(csv_path: &Path, labels_path: &Path) -> Result<FeatureMatrix> {
        let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let labels = std::fs::read_to_string(labels_path).map_err(|e| Error::io(labels_path, e))?;
        FeatureMatrix::from_csv(&text, &labels)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
