//! Logistic-regression detectors and the evaluation battery built on them.

mod battery;
mod logreg;
mod split;

pub use battery::{
    binary_comparison, cross_method_eval, detection_split, evaluate_population, feature_importance, ordinal_severity, pairwise_eval, score_rows,
    train_logreg, CellResult, Comparison, CrossMethodResult, EvalConfig, EvalMetadata, EvalReport, FamilyImportance,
    FeatureImportance, FeatureSplit, ModuleSplit, OrdinalResult, Selection,
};
pub use logreg::{fit, sigmoid, ClassifierModel, FitDiagnostics, Standardization, GRAD_TOL};
pub use split::{stratified_split, train_count, SplitPlan};
