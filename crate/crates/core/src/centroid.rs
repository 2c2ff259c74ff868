//! Healthy-population reference directions.
//!
//! Per sublayer the healthy deltas are averaged first and the mean is then
//! decomposed; its top-k left singular vectors are the reference directions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use safetensors::tensor::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::adapter_io::{write_matrices, AdapterDelta, StorageDtype, SublayerKey};
use crate::classify::SplitPlan;
use crate::error::{Error, Result};
use crate::spectral::{svd, DEGENERATE_EPS};
use crate::util::{atomic_write, read_json, write_json};

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSublayer {
    /// `d x k`, sign-fixed.
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidModel {
    pub k: usize,
    pub per_sublayer: BTreeMap<SublayerKey, CentroidSublayer>,
    pub source_adapter_ids: Vec<String>,
    /// Split the sources were drawn from, kept for leakage audits.
    pub split: Option<SplitPlan>,
}

pub fn build_centroid(healthy: &[AdapterDelta], k: usize) -> Result<CentroidModel> {
    if healthy.len() < 2 {
        return Err(Error::Population(format!(
            "centroid needs at least 2 healthy adapters, got {}",
            healthy.len()
        )));
    }
    let mut sorted: Vec<&AdapterDelta> = healthy.iter().collect();
    sorted.sort_by(|a, b| a.adapter_id.cmp(&b.adapter_id));
    let schema = sorted[0].schema();
    for d in &sorted[1..] {
        if d.schema() != schema {
            return Err(Error::Schema(format!(
                "{} and {} have different sublayer shapes",
                sorted[0].adapter_id, d.adapter_id
            )));
        }
    }
    for (key, (d, kk)) in &schema.0 {
        if k == 0 || k > *d.min(kk) {
            return Err(Error::Parameter(format!("k = {k} invalid for {d}x{kk} sublayer {key}")));
        }
    }

    let n = sorted.len() as f64;
    let per_sublayer = schema
        .0
        .par_iter()
        .map(|(key, _)| {
            let mut mean = sorted[0].deltas[key].clone();
            for d in &sorted[1..] {
                mean += &d.deltas[key];
            }
            mean /= n;
            let s = svd(&mean).map_err(|e| Error::Numeric(format!("centroid sublayer {key}: {e}")))?;
            let degenerate = s.spectral_norm() < DEGENERATE_EPS;
            Ok((
                *key,
                CentroidSublayer {
                    u: s.u.columns(0, k).into_owned(),
                    singular_values: s.sigma[..k].to_vec(),
                    degenerate,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();

    Ok(CentroidModel {
        k,
        per_sublayer,
        source_adapter_ids: sorted.iter().map(|d| d.adapter_id.clone()).collect(),
        split: None,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    k: usize,
    source_adapter_ids: Vec<String>,
    singular_values: BTreeMap<String, Vec<f64>>,
    degenerate: Vec<String>,
    split: Option<SplitPlan>,
}

fn tensor_name(key: SublayerKey) -> String {
    format!("centroid.{}.{}.U", key.layer, key.module)
}

fn parse_tensor_name(name: &str) -> Option<SublayerKey> {
    name.strip_prefix("centroid.")?.strip_suffix(".U")?.parse().ok()
}

/// Sidecar path used when none is given: `<file>.json`.
pub fn sidecar_path(tensor_path: &Path) -> PathBuf {
    let mut s = tensor_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl CentroidModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self
            .per_sublayer
            .iter()
            .map(|(k, c)| (tensor_name(*k), &c.u))
            .collect();
        write_matrices(named, StorageDtype::F64, None)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)?;
        let sidecar = Sidecar {
            k: self.k,
            source_adapter_ids: self.source_adapter_ids.clone(),
            singular_values: self
                .per_sublayer
                .iter()
                .map(|(k, c)| (k.to_string(), c.singular_values.clone()))
                .collect(),
            degenerate: self
                .per_sublayer
                .iter()
                .filter(|(_, c)| c.degenerate)
                .map(|(k, _)| k.to_string())
                .collect(),
            split: self.split.clone(),
        };
        write_json(&sidecar_path(path), &sidecar)
    }

    pub fn load(path: &Path) -> Result<CentroidModel> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let sidecar: Sidecar = read_json(&sidecar_path(path))?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut per_sublayer = BTreeMap::new();
        for (name, view) in st.tensors() {
            let key = parse_tensor_name(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor `{name}` in centroid file")))?;
            if view.dtype() != safetensors::Dtype::F64 || view.shape().len() != 2 {
                return Err(Error::Format(format!("centroid tensor `{name}` must be a 2-d F64 matrix")));
            }
            let (d, k) = (view.shape()[0], view.shape()[1]);
            let vals: Vec<f64> = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let sv = sidecar
                .singular_values
                .get(&key.to_string())
                .ok_or_else(|| Error::Format(format!("sidecar lacks singular values for {key}")))?
                .clone();
            if k != sidecar.k || sv.len() != k {
                return Err(Error::Format(format!("centroid sublayer {key} does not hold k = {} vectors", sidecar.k)));
            }
            per_sublayer.insert(
                key,
                CentroidSublayer {
                    u: DMatrix::from_row_slice(d, k, &vals),
                    singular_values: sv,
                    degenerate: sidecar.degenerate.contains(&key.to_string()),
                },
            );
        }
        if sidecar.source_adapter_ids.is_empty() {
            return Err(Error::Format("centroid sidecar lists no source adapters".into()));
        }
        Ok(CentroidModel {
            k: sidecar.k,
            per_sublayer,
            source_adapter_ids: sidecar.source_adapter_ids,
            split: sidecar.split,
        })
    }
}
