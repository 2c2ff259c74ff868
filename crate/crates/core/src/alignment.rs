//! Alignment between probe normals and the leading left singular vectors of
//! a delta: `max_i |cos(n, u_i)|`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::adapter_io::{AdapterDelta, ModuleKind, SublayerKey};
use crate::error::{Error, Result};
use crate::spectral::{svd, SvdResult};

/// Tolerance on the stored norm before a probe vector is flagged.
pub const NORM_WARN_TOL: f64 = 1e-6;
const BASELINE_SAMPLES: usize = 20_000;
const BASELINE_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeNormals {
    pub per_layer: BTreeMap<usize, DVector<f64>>,
    pub d_act: usize,
    pub source_tag: String,
}

#[derive(Serialize, Deserialize)]
struct ProbeLayer {
    layer: usize,
    vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    layers: Vec<ProbeLayer>,
    d_act: usize,
    source_tag: String,
}

impl ProbeNormals {
    /// Parses the probe file. Vectors are normalized; any whose norm was off
    /// by more than [`NORM_WARN_TOL`] is listed in the returned warnings.
    pub fn from_json(text: &str) -> Result<(ProbeNormals, Vec<String>)> {
        let file: ProbeFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("probe file: {e}")))?;
        let mut per_layer = BTreeMap::new();
        let mut warnings = Vec::new();
        for ProbeLayer { layer, vector } in file.layers {
            if vector.len() != file.d_act {
                return Err(Error::Schema(format!(
                    "probe for layer {layer} has length {}, d_act is {}",
                    vector.len(),
                    file.d_act
                )));
            }
            let v = DVector::from_vec(vector);
            let norm = v.norm();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::Numeric(format!("probe for layer {layer} has norm {norm}")));
            }
            if (norm - 1.0).abs() > NORM_WARN_TOL {
                warnings.push(format!("probe for layer {layer} had norm {norm:.9}; normalized"));
            }
            if per_layer.insert(layer, v / norm).is_some() {
                return Err(Error::Schema(format!("duplicate probe for layer {layer}")));
            }
        }
        Ok((
            ProbeNormals {
                per_layer,
                d_act: file.d_act,
                source_tag: file.source_tag,
            },
            warnings,
        ))
    }

    pub fn load(path: &Path) -> Result<(ProbeNormals, Vec<String>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = ProbeFile {
            layers: self
                .per_layer
                .iter()
                .map(|(l, v)| ProbeLayer {
                    layer: *l,
                    vector: v.iter().copied().collect(),
                })
                .collect(),
            d_act: self.d_act,
            source_tag: self.source_tag.clone(),
        };
        serde_json::to_string_pretty(&file).expect("probe file serializes")
    }
}

/// `max_{i < k} |cos(n, u_i)|`, skipping null directions.
pub fn alignment_score(normal: &DVector<f64>, svd: &SvdResult, k: usize) -> Result<f64> {
    if normal.len() != svd.u.nrows() {
        return Err(Error::Schema(format!(
            "probe dimension {} does not match left singular vectors of dimension {}",
            normal.len(),
            svd.u.nrows()
        )));
    }
    if k == 0 || k > svd.rank_p() {
        return Err(Error::Parameter(format!("k = {k} outside [1, {}]", svd.rank_p())));
    }
    let nn = normal.norm();
    if nn == 0.0 {
        return Err(Error::Numeric("zero probe normal".into()));
    }
    let best = (0..k)
        .filter(|&i| !svd.is_null_direction(i))
        .map(|i| (svd.u.column(i).dot(normal) / nn).abs())
        .fold(0.0, f64::max);
    Ok(best.min(1.0))
}

/// Expected alignment of a uniformly random unit vector in dimension `d`
/// against `k` orthonormal directions. Closed form for `k = 1`, otherwise a
/// fixed-seed Monte-Carlo estimate.
pub fn random_baseline(d: usize, k: usize) -> f64 {
    if k == 0 || d == 0 {
        return 0.0;
    }
    if k >= d {
        return 1.0;
    }
    if k == 1 {
        let df = d as f64;
        return (ln_gamma(df / 2.0) - ln_gamma((df + 1.0) / 2.0)).exp() / std::f64::consts::PI.sqrt();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(BASELINE_SEED);
    let mut total = 0.0;
    for _ in 0..BASELINE_SAMPLES {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        total += g[..k].iter().fold(0.0f64, |m, x| m.max(x.abs())) / norm;
    }
    total / BASELINE_SAMPLES as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAlignment {
    pub layer: usize,
    pub alignment: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub adapter_id: String,
    pub module: ModuleKind,
    pub k: usize,
    pub per_layer: Vec<LayerAlignment>,
    pub max: f64,
    pub mean: f64,
    /// Mean over layers of alignment divided by the random-vector baseline
    /// at the same dimension and `k`. Values near 1 mean chance-level.
    pub mean_ratio: f64,
}

pub fn alignment_report(
    delta: &AdapterDelta,
    probes: &ProbeNormals,
    module: ModuleKind,
    k: usize,
) -> Result<AlignmentReport> {
    let mut per_layer = Vec::new();
    let mut baselines: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (key, m) in &delta.deltas {
        if key.module != module {
            continue;
        }
        let normal = probes.per_layer.get(&key.layer).ok_or_else(|| {
            Error::Coverage(format!(
                "no probe normal for layer {} ({})",
                key.layer,
                SublayerKey::new(key.layer, module)
            ))
        })?;
        let s = svd(m)?;
        let alignment = alignment_score(normal, &s, k)?;
        let baseline = *baselines
            .entry((m.nrows(), k))
            .or_insert_with(|| random_baseline(m.nrows(), k));
        per_layer.push(LayerAlignment {
            layer: key.layer,
            alignment,
            baseline,
        });
    }
    if per_layer.is_empty() {
        return Err(Error::Coverage(format!(
            "`{}` has no {} sublayers",
            delta.adapter_id,
            module.as_str()
        )));
    }
    let n = per_layer.len() as f64;
    Ok(AlignmentReport {
        adapter_id: delta.adapter_id.clone(),
        module,
        k,
        max: per_layer.iter().map(|l| l.alignment).fold(0.0, f64::max),
        mean: per_layer.iter().map(|l| l.alignment).sum::<f64>() / n,
        mean_ratio: per_layer.iter().map(|l| l.alignment / l.baseline).sum::<f64>() / n,
        per_layer,
    })
}
