//! End-to-end glue: population loading, leakage-free centroid, feature
//! matrix and the evaluation battery.

use crate::adapter_io::{
    check_population, reconstruct_delta, AdapterDelta, AdapterMetadata, AdapterWeights, Category, Manifest,
    ModuleKind, NamePattern, ScalePolicy,
};
use crate::centroid::{build_centroid, CentroidModel};
use crate::classify::{detection_split, evaluate_population, EvalConfig, EvalReport};
use crate::error::{Error, Result};
use crate::spectral::{assemble_matrix, extract_features, Family, FeatureMatrix};

use rayon::prelude::*;

/// Reconstructed deltas and their labels, sorted by adapter id.
#[derive(Debug, Clone)]
pub struct Population {
    pub deltas: Vec<AdapterDelta>,
    pub labels: Vec<AdapterMetadata>,
}

impl Population {
    pub fn from_weights(weights: &[AdapterWeights], policy: ScalePolicy) -> Result<Population> {
        check_population(weights)?;
        let mut pairs: Vec<(AdapterDelta, AdapterMetadata)> = weights
            .par_iter()
            .map(|w| Ok((reconstruct_delta(w, policy)?, w.metadata.clone())))
            .collect::<Result<_>>()?;
        pairs.sort_by(|a, b| a.0.adapter_id.cmp(&b.0.adapter_id));
        let (deltas, labels) = pairs.into_iter().unzip();
        Ok(Population { deltas, labels })
    }

    pub fn load(manifest: &Manifest, pattern: &NamePattern, policy: ScalePolicy) -> Result<Population> {
        Self::from_weights(&manifest.load_all(pattern)?, policy)
    }

    pub fn ids(&self) -> Vec<String> {
        self.deltas.iter().map(|d| d.adapter_id.clone()).collect()
    }

    pub fn labelled(&self) -> Vec<(String, AdapterMetadata)> {
        self.ids().into_iter().zip(self.labels.iter().cloned()).collect()
    }

    /// Members whose category is not excluded.
    pub fn without(&self, exclude: &[Category]) -> Population {
        let (deltas, labels) = self
            .deltas
            .iter()
            .zip(&self.labels)
            .filter(|(_, m)| !exclude.contains(&m.category))
            .map(|(d, m)| (d.clone(), m.clone()))
            .unzip();
        Population { deltas, labels }
    }
}

/// Centroid from the healthy rows of the detection training split.
pub fn training_centroid(pop: &Population, config: &EvalConfig, k: usize) -> Result<CentroidModel> {
    let plan = detection_split(&pop.labelled(), config)?;
    let healthy: Vec<AdapterDelta> = pop
        .deltas
        .iter()
        .zip(&pop.labels)
        .filter(|(d, m)| m.category == Category::Healthy && plan.train_ids.contains(&d.adapter_id))
        .map(|(d, _)| d.clone())
        .collect();
    let mut c = build_centroid(&healthy, k)?;
    c.split = Some(plan);
    Ok(c)
}

/// Every family the inputs support, on both modules.
pub fn feature_matrix(pop: &Population, centroid: Option<&CentroidModel>, k: usize) -> Result<FeatureMatrix> {
    if pop.deltas.is_empty() {
        return Err(Error::Population("no adapters".into()));
    }
    let features = pop
        .deltas
        .par_iter()
        .map(|d| extract_features(d, centroid, k))
        .collect::<Result<Vec<_>>>()?;
    let families: Vec<Family> = if centroid.is_some() {
        Family::ALL.to_vec()
    } else {
        vec![Family::Magnitude, Family::Shape]
    };
    assemble_matrix(&features, &pop.labels, &families, &ModuleKind::ALL)
}

#[derive(Debug, Clone)]
pub struct Audit {
    pub centroid: CentroidModel,
    pub matrix: FeatureMatrix,
    pub report: EvalReport,
}

/// Centroid, features and evaluation in one pass.
pub fn audit(pop: &Population, config: &EvalConfig, k: usize) -> Result<Audit> {
    let pop = pop.without(&config.exclude_categories);
    let centroid = training_centroid(&pop, config, k)?;
    let matrix = feature_matrix(&pop, Some(&centroid), k)?;
    let report = evaluate_population(&matrix, config)?;
    Ok(Audit {
        centroid,
        matrix,
        report,
    })
}
