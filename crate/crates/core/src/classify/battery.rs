use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::logreg::{fit, sigmoid, ClassifierModel};
use super::split::{stratified_split, SplitPlan};
use crate::adapter_io::{AdapterMetadata, Category, ModuleKind};
use crate::error::{Error, Result};
use crate::spectral::{Family, FeatureMatrix};
use crate::stats::{auc, bootstrap_auc_ci, spearman, ConfidenceInterval};
use crate::util::fmt_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSplit {
    Magnitude,
    Shape,
    Direction,
    All,
}

impl FeatureSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSplit::Magnitude => "magnitude",
            FeatureSplit::Shape => "shape",
            FeatureSplit::Direction => "direction",
            FeatureSplit::All => "all",
        }
    }

    /// `All` means every family present in the matrix.
    pub fn families(self, matrix: &FeatureMatrix) -> Vec<Family> {
        match self {
            FeatureSplit::Magnitude => vec![Family::Magnitude],
            FeatureSplit::Shape => vec![Family::Shape],
            FeatureSplit::Direction => vec![Family::Direction],
            FeatureSplit::All => Family::ALL
                .into_iter()
                .filter(|f| matrix.columns.iter().any(|c| c.family == *f))
                .collect(),
        }
    }
}

impl fmt::Display for FeatureSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(FeatureSplit::Magnitude),
            "shape" => Ok(FeatureSplit::Shape),
            "direction" => Ok(FeatureSplit::Direction),
            "all" => Ok(FeatureSplit::All),
            other => Err(Error::Parameter(format!("unknown feature split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleSplit {
    Query,
    Value,
    Both,
}

impl ModuleSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            ModuleSplit::Query => "q_proj",
            ModuleSplit::Value => "v_proj",
            ModuleSplit::Both => "both",
        }
    }

    pub fn modules(self) -> Vec<ModuleKind> {
        match self {
            ModuleSplit::Query => vec![ModuleKind::Query],
            ModuleSplit::Value => vec![ModuleKind::Value],
            ModuleSplit::Both => ModuleKind::ALL.to_vec(),
        }
    }
}

impl fmt::Display for ModuleSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" | "q_proj" => Ok(ModuleSplit::Query),
            "value" | "v_proj" => Ok(ModuleSplit::Value),
            "both" => Ok(ModuleSplit::Both),
            other => Err(Error::Parameter(format!("unknown module split `{other}`"))),
        }
    }
}

/// A set of adapters on one side of a comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Group(String),
    Categories(Vec<Category>),
    /// Every non-healthy row.
    Drifted,
}

impl Selection {
    pub fn matches(&self, m: &AdapterMetadata) -> bool {
        match self {
            Selection::Group(g) => &m.group == g,
            Selection::Categories(cs) => cs.contains(&m.category),
            Selection::Drifted => m.category != Category::Healthy,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Selection::Group(g) => g.clone(),
            Selection::Categories(cs) => cs.iter().map(|c| c.as_str()).collect::<Vec<_>>().join("+"),
            Selection::Drifted => "drifted".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Label 0.
    pub negative: Selection,
    /// Label 1; AUC > 0.5 means these rows score higher.
    pub positive: Selection,
}

impl Comparison {
    pub fn new(negative: Selection, positive: Selection) -> Self {
        Self { negative, positive }
    }

    pub fn name(&self) -> String {
        format!("{} vs {}", self.negative.name(), self.positive.name())
    }

    /// Row ids and labels of the participating adapters.
    pub fn rows(&self, matrix: &FeatureMatrix) -> Result<(Vec<String>, Vec<bool>)> {
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let (mut n_neg, mut n_pos) = (0, 0);
        for (id, m) in matrix.ids.iter().zip(&matrix.labels) {
            let pos = self.positive.matches(m);
            let neg = self.negative.matches(m);
            if pos && neg {
                return Err(Error::Parameter(format!("{id} falls on both sides of `{}`", self.name())));
            }
            if pos || neg {
                ids.push(id.clone());
                labels.push(pos);
                if pos {
                    n_pos += 1;
                } else {
                    n_neg += 1;
                }
            }
        }
        if n_pos < 3 || n_neg < 3 {
            return Err(Error::Population(format!(
                "`{}` needs at least 3 adapters per side, found {n_neg} and {n_pos}",
                self.name()
            )));
        }
        Ok((ids, labels))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub lambda: f64,
    pub ratio: f64,
    pub seed: u64,
    pub n_bootstrap: usize,
    pub level: f64,
    pub feature_splits: Vec<FeatureSplit>,
    pub module_splits: Vec<ModuleSplit>,
    pub exclude_categories: Vec<Category>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            ratio: 0.7,
            seed: 0,
            n_bootstrap: 1000,
            level: 0.95,
            feature_splits: vec![FeatureSplit::Magnitude, FeatureSplit::Shape, FeatureSplit::All],
            module_splits: vec![ModuleSplit::Query, ModuleSplit::Value, ModuleSplit::Both],
            exclude_categories: vec![Category::Legacy],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub auc: f64,
    pub ci: ConfidenceInterval,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalResult {
    pub group: String,
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
    pub n_levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossMethodResult {
    pub train: String,
    pub test: String,
    pub result: CellResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyImportance {
    pub mean_abs_weight: f64,
    pub n_columns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    /// Families with no estimable column are absent, not zero.
    pub families: BTreeMap<Family, FamilyImportance>,
    /// `"a/b"` → mean |w| of `a` over mean |w| of `b`.
    pub ratios: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub config: EvalConfig,
    pub solver: String,
    pub standardization: String,
    pub auc_score: String,
    pub drift_probability_source: String,
    pub ordinal_score: String,
    pub feature_importance_source: String,
    pub n_adapters: usize,
    pub n_columns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: EvalMetadata,
    /// comparison → feature split → module split → cell
    pub comparisons: BTreeMap<String, BTreeMap<String, BTreeMap<String, CellResult>>>,
    /// Comparison names in evaluation order.
    pub comparison_order: Vec<String>,
    pub splits: BTreeMap<String, SplitPlan>,
    pub drift_probabilities: BTreeMap<String, f64>,
    pub drift_scores: BTreeMap<String, f64>,
    pub ordinal: Vec<OrdinalResult>,
    pub cross_method: Vec<CrossMethodResult>,
    pub importance: FeatureImportance,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn cell(&self, comparison: &str, feature: FeatureSplit, module: ModuleSplit) -> Option<&CellResult> {
        self.comparisons.get(comparison)?.get(feature.as_str())?.get(module.as_str())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "comparison",
            "feature_split",
            "module_split",
            "auc",
            "ci_low",
            "ci_high",
            "n_valid",
            "n_requested",
            "n_train",
            "n_test",
            "seed",
        ])
        .expect("in-memory write");
        for name in &self.comparison_order {
            for (fs, modules) in &self.comparisons[name] {
                for (ms, c) in modules {
                    w.write_record([
                        name.clone(),
                        fs.clone(),
                        ms.clone(),
                        fmt_f64(c.auc),
                        fmt_f64(c.ci.low),
                        fmt_f64(c.ci.high),
                        c.ci.n_valid.to_string(),
                        c.ci.n_requested.to_string(),
                        c.n_train.to_string(),
                        c.n_test.to_string(),
                        c.seed.to_string(),
                    ])
                    .expect("in-memory write");
                }
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

fn row_indices(matrix: &FeatureMatrix, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            matrix
                .index_of(id)
                .ok_or_else(|| Error::Schema(format!("adapter `{id}` not in feature matrix")))
        })
        .collect()
}

/// Fits on the plan's training rows; `labels` is aligned with `ids`.
pub fn train_logreg(
    matrix: &FeatureMatrix,
    ids: &[String],
    labels: &[bool],
    plan: &SplitPlan,
    lambda: f64,
) -> Result<ClassifierModel> {
    let label_of: BTreeMap<&str, bool> = ids.iter().map(String::as_str).zip(labels.iter().copied()).collect();
    let train_labels = plan
        .train_ids
        .iter()
        .map(|id| {
            label_of
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Schema(format!("training id `{id}` has no label")))
        })
        .collect::<Result<Vec<_>>>()?;
    let idx = row_indices(matrix, &plan.train_ids)?;
    let x = matrix.values.select_rows(idx.iter());
    fit(&x, &train_labels, lambda, &matrix.columns)
}

/// Decision-function values (logits) for the given rows.
pub fn score_rows(model: &ClassifierModel, matrix: &FeatureMatrix, ids: &[String]) -> Result<Vec<f64>> {
    model.check_columns(&matrix.columns)?;
    row_indices(matrix, ids)?
        .into_iter()
        .map(|i| model.decision(&matrix.row(i)))
        .collect()
}

fn test_cell(
    model: &ClassifierModel,
    matrix: &FeatureMatrix,
    ids: &[String],
    labels: &[bool],
    n_train: usize,
    config: &EvalConfig,
) -> Result<CellResult> {
    let scores = score_rows(model, matrix, ids)?;
    Ok(CellResult {
        auc: auc(&scores, labels)?,
        ci: bootstrap_auc_ci(&scores, labels, config.n_bootstrap, config.level, config.seed)?,
        n_train,
        n_test: ids.len(),
        seed: config.seed,
    })
}

fn plan_for(comparison: &Comparison, ids: &[String], labels: &[bool], config: &EvalConfig) -> Result<SplitPlan> {
    let items: Vec<(String, String)> = ids
        .iter()
        .zip(labels)
        .map(|(id, l)| {
            let side = if *l { &comparison.positive } else { &comparison.negative };
            (id.clone(), side.name())
        })
        .collect();
    stratified_split(&items, config.ratio, config.seed)
}

fn labels_for(ids: &[String], all_ids: &[String], all_labels: &[bool]) -> Vec<bool> {
    let m: BTreeMap<&str, bool> = all_ids.iter().map(String::as_str).zip(all_labels.iter().copied()).collect();
    ids.iter().map(|id| m[id.as_str()]).collect()
}

/// Healthy vs every non-healthy adapter.
pub fn binary_comparison() -> Comparison {
    Comparison::new(Selection::Categories(vec![Category::Healthy]), Selection::Drifted)
}

/// The split the binary comparison uses for these adapters, after category
/// exclusions. Centroids built from its healthy training rows keep held-out
/// adapters out of the direction features.
pub fn detection_split(labels: &[(String, AdapterMetadata)], config: &EvalConfig) -> Result<SplitPlan> {
    let cmp = binary_comparison();
    let (ids, flags): (Vec<String>, Vec<bool>) = labels
        .iter()
        .filter(|(_, m)| !config.exclude_categories.contains(&m.category))
        .filter(|(_, m)| cmp.positive.matches(m) || cmp.negative.matches(m))
        .map(|(id, m)| (id.clone(), cmp.positive.matches(m)))
        .unzip();
    plan_for(&cmp, &ids, &flags, config)
}

type Grid = BTreeMap<String, BTreeMap<String, BTreeMap<String, CellResult>>>;

/// One AUC and bootstrap interval per (comparison, feature split, module
/// split). Each comparison gets its own stratified split, shared by all of
/// its cells.
pub fn pairwise_eval(
    matrix: &FeatureMatrix,
    comparisons: &[Comparison],
    config: &EvalConfig,
) -> Result<(Grid, BTreeMap<String, SplitPlan>)> {
    let mut jobs = Vec::new();
    let mut splits = BTreeMap::new();
    for cmp in comparisons {
        let (ids, labels) = cmp.rows(matrix)?;
        let plan = plan_for(cmp, &ids, &labels, config)?;
        for fs in &config.feature_splits {
            for ms in &config.module_splits {
                jobs.push((cmp.name(), *fs, *ms, ids.clone(), labels.clone(), plan.clone()));
            }
        }
        splits.insert(cmp.name(), plan);
    }
    let cells = jobs
        .par_iter()
        .map(|(name, fs, ms, ids, labels, plan)| {
            let sub = matrix.filter(&fs.families(matrix), &ms.modules())?;
            let model = train_logreg(&sub, ids, labels, plan, config.lambda)?;
            let test_labels = labels_for(&plan.test_ids, ids, labels);
            let cell = test_cell(&model, &sub, &plan.test_ids, &test_labels, plan.train_ids.len(), config)?;
            Ok((name.clone(), *fs, *ms, cell))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grid: Grid = BTreeMap::new();
    for (name, fs, ms, cell) in cells {
        grid.entry(name)
            .or_default()
            .entry(fs.as_str().to_string())
            .or_default()
            .insert(ms.as_str().to_string(), cell);
    }
    Ok((grid, splits))
}

/// Spearman ρ between per-adapter drift scores and intensity.
pub fn ordinal_severity(scores: &[f64], intensity: &[f64]) -> Result<(f64, f64)> {
    let mut levels: Vec<f64> = intensity.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if levels.len() < 3 {
        return Err(Error::Degenerate(format!(
            "ordinal ranking needs at least 3 intensity levels, found {}",
            levels.len()
        )));
    }
    let r = spearman(scores, intensity)?;
    Ok((r.rho, r.p_value))
}

/// Fits on every row of `train`, scores every row of `test`; no refitting.
pub fn cross_method_eval(
    train: &FeatureMatrix,
    train_labels: &[bool],
    test: &FeatureMatrix,
    test_labels: &[bool],
    config: &EvalConfig,
) -> Result<CellResult> {
    if train.columns != test.columns {
        return Err(Error::Schema("train and test populations have different feature columns".into()));
    }
    let model = fit(&train.values, train_labels, config.lambda, &train.columns)?;
    test_cell(&model, test, &test.ids, test_labels, train.n_rows(), config)
}

pub fn feature_importance(model: &ClassifierModel) -> FeatureImportance {
    let mut sums: BTreeMap<Family, (f64, usize)> = BTreeMap::new();
    for (j, c) in model.columns.iter().enumerate() {
        if model.standardization.constant[j] {
            continue;
        }
        let e = sums.entry(c.family).or_insert((0.0, 0));
        e.0 += model.weights[j].abs();
        e.1 += 1;
    }
    let families: BTreeMap<Family, FamilyImportance> = sums
        .into_iter()
        .map(|(f, (s, n))| {
            (
                f,
                FamilyImportance {
                    mean_abs_weight: s / n as f64,
                    n_columns: n,
                },
            )
        })
        .collect();
    let mut ratios = BTreeMap::new();
    for (a, b) in [
        (Family::Direction, Family::Magnitude),
        (Family::Direction, Family::Shape),
        (Family::Shape, Family::Magnitude),
    ] {
        if let (Some(x), Some(y)) = (families.get(&a), families.get(&b)) {
            if y.mean_abs_weight > 0.0 {
                ratios.insert(format!("{a}/{b}"), x.mean_abs_weight / y.mean_abs_weight);
            }
        }
    }
    FeatureImportance { families, ratios }
}

fn group_order(matrix: &FeatureMatrix) -> Vec<(Category, String)> {
    let mut groups: Vec<(Category, String)> = matrix
        .labels
        .iter()
        .map(|m| (m.category, m.group.clone()))
        .collect();
    groups.sort();
    groups.dedup();
    groups
}

fn count(matrix: &FeatureMatrix, sel: &Selection) -> usize {
    matrix.labels.iter().filter(|m| sel.matches(m)).count()
}

/// Runs the full battery: binary detection, every pairwise group
/// comparison, ordinal severity per drift group, cross-method transfer from
/// gradient-trained to steering adapters, and family importance.
pub fn evaluate_population(matrix: &FeatureMatrix, config: &EvalConfig) -> Result<EvalReport> {
    let keep: Vec<String> = matrix
        .ids
        .iter()
        .zip(&matrix.labels)
        .filter(|(_, m)| !config.exclude_categories.contains(&m.category))
        .map(|(id, _)| id.clone())
        .collect();
    let matrix = &matrix.select_rows(&keep)?;
    let mut notes = Vec::new();

    let binary = binary_comparison();
    let mut comparisons = vec![binary.clone()];
    let groups = group_order(matrix);
    for (i, (_, a)) in groups.iter().enumerate() {
        for (_, b) in &groups[i + 1..] {
            let cmp = Comparison::new(Selection::Group(a.clone()), Selection::Group(b.clone()));
            if count(matrix, &cmp.negative) >= 3 && count(matrix, &cmp.positive) >= 3 {
                comparisons.push(cmp);
            } else {
                notes.push(format!("skipped `{}`: fewer than 3 adapters on a side", cmp.name()));
            }
        }
    }
    let (grid, splits) = pairwise_eval(matrix, &comparisons, config)?;

    // Reference detector: healthy vs drifted on every available column.
    let (b_ids, b_labels) = binary.rows(matrix)?;
    let b_plan = &splits[&binary.name()];
    let model = train_logreg(matrix, &b_ids, &b_labels, b_plan, config.lambda)?;
    let scores = score_rows(&model, matrix, &matrix.ids)?;
    let drift_scores: BTreeMap<String, f64> = matrix.ids.iter().cloned().zip(scores.iter().copied()).collect();
    let drift_probabilities = drift_scores.iter().map(|(k, v)| (k.clone(), sigmoid(*v))).collect();

    // Severity within a group is ranked by that group's own detector.
    let mut ordinal = Vec::new();
    for (cat, g) in &groups {
        if *cat == Category::Healthy {
            continue;
        }
        let rows: Vec<usize> = (0..matrix.n_rows())
            .filter(|i| &matrix.labels[*i].group == g && matrix.labels[*i].intensity.is_some())
            .collect();
        let t: Vec<f64> = rows
            .iter()
            .map(|i| matrix.labels[*i].intensity.expect("filtered") as f64)
            .collect();
        let cmp = Comparison::new(Selection::Categories(vec![Category::Healthy]), Selection::Group(g.clone()));
        let result = cmp.rows(matrix).and_then(|(ids, labels)| {
            let plan = splits.get(&cmp.name()).cloned().map_or_else(|| plan_for(&cmp, &ids, &labels, config), Ok)?;
            let model = train_logreg(matrix, &ids, &labels, &plan, config.lambda)?;
            let members: Vec<String> = rows.iter().map(|i| matrix.ids[*i].clone()).collect();
            let s = score_rows(&model, matrix, &members)?;
            ordinal_severity(&s, &t)
        });
        match result {
            Ok((rho, p_value)) => {
                let mut lv = t.clone();
                lv.sort_by(f64::total_cmp);
                lv.dedup();
                ordinal.push(OrdinalResult {
                    group: g.clone(),
                    rho,
                    p_value,
                    n: rows.len(),
                    n_levels: lv.len(),
                });
            }
            Err(e) => notes.push(format!("ordinal ranking skipped for `{g}`: {e}")),
        }
    }

    let cross_method = cross_method_battery(matrix, config, &mut notes)?;

    Ok(EvalReport {
        metadata: EvalMetadata {
            config: config.clone(),
            solver: "Newton with Armijo backtracking, |grad| <= 1e-8".into(),
            standardization: "z-score from training rows only; constant columns get weight 0".into(),
            auc_score: "decision function (logit) on held-out rows".into(),
            drift_probability_source: "binary healthy-vs-drifted model on all available columns".into(),
            ordinal_score: "Spearman of the healthy-vs-group model's logit against intensity, per group".into(),
            feature_importance_source: "binary healthy-vs-drifted model, standardized weights".into(),
            n_adapters: matrix.n_rows(),
            n_columns: matrix.columns.len(),
        },
        comparison_order: comparisons.iter().map(Comparison::name).collect(),
        comparisons: grid,
        splits,
        drift_probabilities,
        drift_scores,
        ordinal,
        cross_method,
        importance: feature_importance(&model),
        notes,
    })
}

fn cross_method_battery(
    matrix: &FeatureMatrix,
    config: &EvalConfig,
    notes: &mut Vec<String>,
) -> Result<Vec<CrossMethodResult>> {
    let healthy = Selection::Categories(vec![Category::Healthy]);
    let gradient = Selection::Categories(vec![Category::InvertedHarmlessness, Category::InvertedHelpfulness]);
    let train_cmp = Comparison::new(healthy.clone(), gradient.clone());
    let steering_groups: Vec<String> = group_order(matrix)
        .into_iter()
        .filter(|(c, _)| *c == Category::Steering)
        .map(|(_, g)| g)
        .collect();
    if steering_groups.is_empty() {
        notes.push("cross-method transfer skipped: no steering adapters".into());
        return Ok(Vec::new());
    }
    let (ids, labels) = match train_cmp.rows(matrix) {
        Ok(r) => r,
        Err(e) => {
            notes.push(format!("cross-method transfer skipped: {e}"));
            return Ok(Vec::new());
        }
    };
    let plan = plan_for(&train_cmp, &ids, &labels, config)?;
    let train = matrix.select_rows(&plan.train_ids)?;
    let train_labels = labels_for(&plan.train_ids, &ids, &labels);
    let healthy_test: Vec<String> = plan
        .test_ids
        .iter()
        .filter(|id| {
            let i = matrix.index_of(id).expect("from matrix");
            healthy.matches(&matrix.labels[i])
        })
        .cloned()
        .collect();

    let mut out = Vec::new();
    let control_labels = labels_for(&plan.test_ids, &ids, &labels);
    let control = cross_method_eval(&train, &train_labels, &matrix.select_rows(&plan.test_ids)?, &control_labels, config)?;
    out.push(CrossMethodResult {
        train: train_cmp.name(),
        test: format!("held-out {}", train_cmp.name()),
        result: control,
    });

    let mut targets: Vec<(String, Selection)> = steering_groups
        .iter()
        .map(|g| (g.clone(), Selection::Group(g.clone())))
        .collect();
    if steering_groups.len() > 1 {
        targets.push(("steering".into(), Selection::Categories(vec![Category::Steering])));
    }
    for (name, sel) in targets {
        let mut test_ids = healthy_test.clone();
        test_ids.extend(
            matrix
                .ids
                .iter()
                .zip(&matrix.labels)
                .filter(|(_, m)| sel.matches(m))
                .map(|(id, _)| id.clone()),
        );
        let test_labels: Vec<bool> = test_ids
            .iter()
            .map(|id| sel.matches(&matrix.labels[matrix.index_of(id).expect("from matrix")]))
            .collect();
        let test = matrix.select_rows(&test_ids)?;
        out.push(CrossMethodResult {
            train: train_cmp.name(),
            test: format!("healthy vs {name}"),
            result: cross_method_eval(&train, &train_labels, &test, &test_labels, config)?,
        });
    }
    Ok(out)
}
