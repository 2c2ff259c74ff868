//! Command-line front end. Every run writes `<command>.config.json` into its
//! output directory; passing that file back with `--config` reproduces the run.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adapter_io::{flatten_delta, Category, Manifest, ModuleKind, NamePattern, ScalePolicy};
use crate::alignment::{alignment_report, AlignmentReport, ProbeNormals};
use crate::behavior_link::{labels_from_manifest, link_report, AsrTable, LinkReport};
use crate::centroid::CentroidModel;
use crate::classify::{
    binary_comparison, detection_split, evaluate_population, train_logreg, ClassifierModel, EvalConfig, EvalReport,
    FeatureSplit, ModuleSplit, SplitPlan,
};
use crate::error::{Error, Result};
use crate::pca::{pca_fit, pca_report, PcaReport};
use crate::pipeline::{feature_matrix, training_centroid, Population};
use crate::report;
use crate::spectral::{extract_features, Family, FeatureMatrix};
use crate::synthgen::{gen_population, synthetic_asr_csv, synthetic_probes, PopulationSpec};
use crate::util::{atomic_write, read_json, write_json};

#[derive(Debug, Parser)]
#[command(name = "deltaprint", version, about = "Spectral drift auditing for LoRA adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Default, Args)]
struct CommonArgs {
    /// Population manifest (JSON list of adapter entries).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed for `synth`; split and bootstrap seed elsewhere.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of singular directions per sublayer.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// L2 penalty on standardized weights.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Training fraction of each stratified split.
    #[arg(long, global = true)]
    ratio: Option<f64>,
    /// magnitude, shape, direction or all; comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    feature_split: Vec<FeatureSplit>,
    /// query, value or both; comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    module_split: Vec<ModuleSplit>,
    /// unit or alpha-over-rank.
    #[arg(long, global = true)]
    scale_policy: Option<ScalePolicy>,
    /// Categories to drop; comma-separated, `none` for no exclusions.
    #[arg(long, global = true, value_delimiter = ',')]
    exclude_category: Vec<String>,
    /// Resolved-config snapshot from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic population, its ASR table and probe normals.
    Synth {
        /// `default` or a population spec JSON file.
        #[arg(long)]
        spec: Option<String>,
    },
    /// Write the spectral feature matrix.
    Extract {
        #[arg(long)]
        centroid: Option<PathBuf>,
    },
    /// Build the healthy centroid from the detection training split.
    Centroid,
    /// Fit the healthy-vs-drifted detector.
    Train {
        #[arg(long)]
        centroid: Option<PathBuf>,
    },
    /// Run the evaluation battery.
    Evaluate {
        #[arg(long)]
        centroid: Option<PathBuf>,
        /// Bootstrap resamples per interval.
        #[arg(long)]
        bootstrap: Option<usize>,
    },
    /// PCA over flattened deltas.
    Pca {
        /// Restrict to these groups; repeatable.
        #[arg(long = "group", value_delimiter = ',')]
        groups: Vec<String>,
        /// Group whose members are the positive type for component AUCs.
        #[arg(long)]
        positive_group: Option<String>,
        #[arg(long)]
        components: Option<usize>,
    },
    /// Probe alignment of each adapter's top singular directions.
    Align {
        #[arg(long)]
        probes: Option<PathBuf>,
    },
    /// Join drift probabilities and geometry with an ASR table.
    Link {
        #[arg(long)]
        asr: Option<PathBuf>,
        /// `eval_report.json` from `evaluate`.
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Render text tables from earlier artifacts.
    Report {
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        pca: Option<PathBuf>,
        #[arg(long)]
        link: Option<PathBuf>,
        #[arg(long)]
        align: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Extract { .. } => "extract",
            Command::Centroid => "centroid",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Pca { .. } => "pca",
            Command::Align { .. } => "align",
            Command::Link { .. } => "link",
            Command::Report { .. } => "report",
        }
    }
}

/// Every parameter a command used, after flags, snapshot and defaults are
/// merged. Input paths are absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub k: usize,
    pub lambda: f64,
    pub ratio: f64,
    pub n_bootstrap: usize,
    pub feature_splits: Vec<FeatureSplit>,
    pub module_splits: Vec<ModuleSplit>,
    pub scale_policy: ScalePolicy,
    pub exclude_categories: Vec<Category>,
    pub name_pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asr: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults for `command` before any flag or snapshot is applied.
    pub fn defaults(command: &str) -> RunConfig {
        let eval = EvalConfig::default();
        let (feature_splits, module_splits) = match command {
            "train" => (vec![FeatureSplit::All], vec![ModuleSplit::Both]),
            "extract" | "align" => (vec![FeatureSplit::All], vec![ModuleSplit::Both]),
            _ => (eval.feature_splits.clone(), eval.module_splits.clone()),
        };
        let exclude_categories = match command {
            "link" => vec![Category::Steering, Category::Legacy],
            _ => eval.exclude_categories.clone(),
        };
        RunConfig {
            command: command.to_string(),
            seed: if command == "synth" { PopulationSpec::default().master_seed } else { eval.seed },
            k: 8,
            lambda: eval.lambda,
            ratio: eval.ratio,
            n_bootstrap: eval.n_bootstrap,
            feature_splits,
            module_splits,
            scale_policy: ScalePolicy::Unit,
            exclude_categories,
            name_pattern: NamePattern::default().template().to_string(),
            manifest: None,
            spec: (command == "synth").then(|| "default".to_string()),
            centroid: None,
            groups: Vec::new(),
            positive_group: None,
            components: (command == "pca").then_some(5),
            probes: None,
            asr: None,
            eval: None,
            pca: None,
            link: None,
            align: None,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            lambda: self.lambda,
            ratio: self.ratio,
            seed: self.seed,
            n_bootstrap: self.n_bootstrap,
            feature_splits: self.feature_splits.clone(),
            module_splits: self.module_splits.clone(),
            exclude_categories: self.exclude_categories.clone(),
            ..EvalConfig::default()
        }
    }

    pub fn snapshot_path(&self, out: &Path) -> PathBuf {
        out.join(format!("{}.config.json", self.command))
    }
}

fn absolute(p: PathBuf) -> Result<PathBuf> {
    std::path::absolute(&p).map_err(|e| Error::io(p, e))
}

fn parse_exclusions(values: &[String]) -> Result<Option<Vec<Category>>> {
    if values.is_empty() {
        return Ok(None);
    }
    if values.iter().any(|v| v == "none") {
        if values.len() > 1 {
            return Err(Error::Parameter("`none` cannot be combined with other categories".into()));
        }
        return Ok(Some(Vec::new()));
    }
    let mut cats = values.iter().map(|v| v.parse()).collect::<Result<Vec<Category>>>()?;
    cats.sort();
    cats.dedup();
    Ok(Some(cats))
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let name = cli.command.name();
    let mut cfg = match &cli.common.config {
        Some(path) => {
            let cfg: RunConfig = read_json(path)?;
            if cfg.command != name {
                return Err(Error::Parameter(format!(
                    "{} is a `{}` snapshot, not `{name}`",
                    path.display(),
                    cfg.command
                )));
            }
            cfg
        }
        None => RunConfig::defaults(name),
    };
    let c = &cli.common;
    let set_path = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| -> Result<()> {
        if let Some(p) = v {
            *slot = Some(absolute(p.clone())?);
        }
        Ok(())
    };
    set_path(&mut cfg.manifest, &c.manifest)?;
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.k {
        cfg.k = v;
    }
    if let Some(v) = c.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = c.ratio {
        cfg.ratio = v;
    }
    if !c.feature_split.is_empty() {
        cfg.feature_splits = c.feature_split.clone();
    }
    if !c.module_split.is_empty() {
        cfg.module_splits = c.module_split.clone();
    }
    if let Some(v) = c.scale_policy {
        cfg.scale_policy = v;
    }
    if let Some(v) = parse_exclusions(&c.exclude_category)? {
        cfg.exclude_categories = v;
    }
    match &cli.command {
        Command::Synth { spec } => {
            if let Some(s) = spec {
                cfg.spec = Some(if s == "default" { s.clone() } else { absolute(s.into())?.display().to_string() });
            }
        }
        Command::Extract { centroid } | Command::Train { centroid } => set_path(&mut cfg.centroid, centroid)?,
        Command::Evaluate { centroid, bootstrap } => {
            set_path(&mut cfg.centroid, centroid)?;
            if let Some(b) = bootstrap {
                cfg.n_bootstrap = *b;
            }
        }
        Command::Centroid => {}
        Command::Pca {
            groups,
            positive_group,
            components,
        } => {
            if !groups.is_empty() {
                cfg.groups = groups.clone();
            }
            if positive_group.is_some() {
                cfg.positive_group = positive_group.clone();
            }
            if components.is_some() {
                cfg.components = *components;
            }
        }
        Command::Align { probes } => set_path(&mut cfg.probes, probes)?,
        Command::Link { asr, eval } => {
            set_path(&mut cfg.asr, asr)?;
            set_path(&mut cfg.eval, eval)?;
        }
        Command::Report { eval, pca, link, align } => {
            set_path(&mut cfg.eval, eval)?;
            set_path(&mut cfg.pca, pca)?;
            set_path(&mut cfg.link, link)?;
            set_path(&mut cfg.align, align)?;
        }
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    if cfg.k == 0 {
        return Err(Error::Parameter("--k must be at least 1".into()));
    }
    if !(cfg.lambda.is_finite() && cfg.lambda > 0.0) {
        return Err(Error::Parameter(format!("--lambda {} must be positive", cfg.lambda)));
    }
    if !(cfg.ratio > 0.0 && cfg.ratio < 1.0) {
        return Err(Error::Parameter(format!("--ratio {} outside (0, 1)", cfg.ratio)));
    }
    if cfg.feature_splits.is_empty() || cfg.module_splits.is_empty() {
        return Err(Error::Parameter("at least one feature split and one module split are needed".into()));
    }
    NamePattern::new(&cfg.name_pattern)?;
    Ok(())
}

fn required<'a, T>(v: &'a Option<T>, flag: &str, command: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Parameter(format!("`{command}` needs --{flag}")))
}

fn load_population(cfg: &RunConfig) -> Result<(Manifest, Population)> {
    let manifest = Manifest::load(required(&cfg.manifest, "manifest", &cfg.command)?)?;
    let pattern = NamePattern::new(&cfg.name_pattern)?;
    let pop = Population::load(&manifest, &pattern, cfg.scale_policy)?;
    Ok((manifest, pop.without(&cfg.exclude_categories)))
}

fn needs_direction(cfg: &RunConfig) -> bool {
    cfg.feature_splits
        .iter()
        .any(|f| matches!(f, FeatureSplit::Direction | FeatureSplit::All))
}

/// Loads the centroid when one is given. Direction features without one are
/// a dependency error, and a centroid built on a different detection split
/// would leak held-out healthy adapters, so it is rejected too.
fn load_centroid(cfg: &RunConfig, pop: &Population) -> Result<Option<CentroidModel>> {
    let Some(path) = &cfg.centroid else {
        if needs_direction(cfg) {
            return Err(Error::Dependency(format!(
                "direction features (feature split {}) need a centroid: run `deltaprint centroid` and pass --centroid",
                cfg.feature_splits.iter().map(|f| f.as_str()).collect::<Vec<_>>().join(",")
            )));
        }
        return Ok(None);
    };
    let c = CentroidModel::load(path)?;
    let plan = detection_split(&pop.labelled(), &cfg.eval_config())?;
    if c.split.as_ref() != Some(&plan) {
        return Err(Error::Dependency(format!(
            "{} was built on a different detection split; rebuild it with the same --seed, --ratio and --exclude-category",
            path.display()
        )));
    }
    if let Some(id) = c.source_adapter_ids.iter().find(|id| !plan.train_ids.contains(id)) {
        return Err(Error::Dependency(format!("centroid source `{id}` is not a training adapter")));
    }
    Ok(Some(c))
}

fn selected_families(cfg: &RunConfig, matrix: &FeatureMatrix) -> Vec<Family> {
    let mut fams: Vec<Family> = cfg.feature_splits.iter().flat_map(|f| f.families(matrix)).collect();
    fams.sort();
    fams.dedup();
    fams
}

fn selected_modules(cfg: &RunConfig) -> Vec<ModuleKind> {
    let mut mods: Vec<ModuleKind> = cfg.module_splits.iter().flat_map(|m| m.modules()).collect();
    mods.sort();
    mods.dedup();
    mods
}

/// The detector written by `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedDetector {
    pub comparison: String,
    pub feature_split: FeatureSplit,
    pub module_split: ModuleSplit,
    pub split: SplitPlan,
    pub model: ClassifierModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentOutput {
    pub k: usize,
    pub probe_source: String,
    pub warnings: Vec<String>,
    pub reports: Vec<AlignmentReport>,
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut spec = match cfg.spec.as_deref() {
        None | Some("default") => PopulationSpec::default(),
        Some(path) => read_json(Path::new(path))?,
    };
    spec.master_seed = cfg.seed;
    let manifest = gen_population(&spec, out)?;
    let asr = out.join("asr.csv");
    atomic_write(&asr, synthetic_asr_csv(&spec, &manifest).as_bytes())?;
    let probes = out.join("probes.json");
    atomic_write(&probes, (synthetic_probes(&spec).to_json() + "\n").as_bytes())?;
    Ok(vec![out.join("manifest.json"), out.join("population_spec.json"), asr, probes])
}

fn cmd_extract(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (_, pop) = load_population(cfg)?;
    let centroid = load_centroid(cfg, &pop)?;
    let full = feature_matrix(&pop, centroid.as_ref(), cfg.k)?;
    let matrix = full.filter(&selected_families(cfg, &full), &selected_modules(cfg))?;
    let (csv_path, labels_path) = (out.join("features.csv"), out.join("features.labels.json"));
    matrix.save(&csv_path, &labels_path)?;
    Ok(vec![csv_path, labels_path])
}

fn cmd_centroid(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (_, pop) = load_population(cfg)?;
    let c = training_centroid(&pop, &cfg.eval_config(), cfg.k)?;
    let path = out.join("centroid.safetensors");
    c.save(&path)?;
    Ok(vec![path.clone(), crate::centroid::sidecar_path(&path)])
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let ([fs], [ms]) = (cfg.feature_splits.as_slice(), cfg.module_splits.as_slice()) else {
        return Err(Error::Parameter("`train` takes exactly one feature split and one module split".into()));
    };
    let (_, pop) = load_population(cfg)?;
    let centroid = load_centroid(cfg, &pop)?;
    let full = feature_matrix(&pop, centroid.as_ref(), cfg.k)?;
    let matrix = full.filter(&fs.families(&full), &ms.modules())?;
    let cmp = binary_comparison();
    let (ids, labels) = cmp.rows(&matrix)?;
    let split = detection_split(&pop.labelled(), &cfg.eval_config())?;
    let model = train_logreg(&matrix, &ids, &labels, &split, cfg.lambda)?;
    let path = out.join("classifier.json");
    write_json(
        &path,
        &TrainedDetector {
            comparison: cmp.name(),
            feature_split: *fs,
            module_split: *ms,
            split,
            model,
        },
    )?;
    Ok(vec![path])
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (_, pop) = load_population(cfg)?;
    let centroid = load_centroid(cfg, &pop)?;
    let matrix = feature_matrix(&pop, centroid.as_ref(), cfg.k)?;
    let report = evaluate_population(&matrix, &cfg.eval_config())?;
    let (json, csv) = (out.join("eval_report.json"), out.join("eval_report.csv"));
    write_json(&json, &report)?;
    atomic_write(&csv, report.to_csv().as_bytes())?;
    Ok(vec![json, csv])
}

fn cmd_pca(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (_, pop) = load_population(cfg)?;
    let keep: Vec<usize> = (0..pop.labels.len())
        .filter(|i| cfg.groups.is_empty() || cfg.groups.contains(&pop.labels[*i].group))
        .collect();
    for g in &cfg.groups {
        if !pop.labels.iter().any(|m| &m.group == g) {
            return Err(Error::Population(format!("group `{g}` has no adapters")));
        }
    }
    let schema = pop.deltas[*keep.first().ok_or_else(|| Error::Population("no adapters selected".into()))?].schema();
    let vectors = keep
        .iter()
        .map(|i| flatten_delta(&pop.deltas[*i], Some(&schema)))
        .collect::<Result<Vec<_>>>()?;
    let model = pca_fit(&vectors)?;
    let labels: Option<Vec<bool>> = cfg
        .positive_group
        .as_ref()
        .map(|g| keep.iter().map(|i| &pop.labels[*i].group == g).collect());
    let intensity: Option<Vec<f64>> = keep
        .iter()
        .map(|i| pop.labels[*i].intensity.map(|t| t as f64))
        .collect();
    let report = pca_report(
        &model,
        cfg.components.unwrap_or(5),
        labels.as_deref().zip(cfg.positive_group.as_deref()),
        intensity.as_deref(),
    )?;
    let path = out.join("pca_report.json");
    write_json(&path, &report)?;
    Ok(vec![path])
}

fn cmd_align(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (_, pop) = load_population(cfg)?;
    let (probes, warnings) = ProbeNormals::load(required(&cfg.probes, "probes", "align")?)?;
    let mut reports = Vec::new();
    for d in &pop.deltas {
        for m in selected_modules(cfg) {
            reports.push(alignment_report(d, &probes, m, cfg.k)?);
        }
    }
    let path = out.join("alignment.json");
    write_json(
        &path,
        &AlignmentOutput {
            k: cfg.k,
            probe_source: probes.source_tag,
            warnings,
            reports,
        },
    )?;
    Ok(vec![path])
}

fn cmd_link(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let manifest = Manifest::load(required(&cfg.manifest, "manifest", "link")?)?;
    let table = AsrTable::load(required(&cfg.asr, "asr", "link")?)?;
    let eval: EvalReport = read_json(required(&cfg.eval, "eval", "link")?)?;
    let labels = labels_from_manifest(&manifest);
    let pattern = NamePattern::new(&cfg.name_pattern)?;
    let pop = Population::load(&manifest, &pattern, cfg.scale_policy)?.without(&cfg.exclude_categories);
    let features = pop
        .deltas
        .iter()
        .map(|d| extract_features(d, None, cfg.k))
        .collect::<Result<Vec<_>>>()?;
    let report = link_report(
        &eval.drift_probabilities,
        &eval.metadata.drift_probability_source,
        &table,
        &labels,
        &features,
        &cfg.exclude_categories,
    )?;
    let path = out.join("link_report.json");
    write_json(&path, &report)?;
    Ok(vec![path])
}

fn cmd_report(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let eval: EvalReport = read_json(required(&cfg.eval, "eval", "report")?)?;
    let manifest = cfg.manifest.as_deref().map(Manifest::load).transpose()?;
    let pca: Option<PcaReport> = cfg.pca.as_deref().map(read_json).transpose()?;
    let link: Option<LinkReport> = cfg.link.as_deref().map(read_json).transpose()?;
    let align: Option<AlignmentOutput> = cfg.align.as_deref().map(read_json).transpose()?;
    let tables = report::tables(
        &eval,
        manifest.as_ref(),
        pca.as_ref(),
        link.as_ref(),
        align.as_ref().map(|a| a.reports.as_slice()),
    );
    let mut notes = eval.notes.clone();
    if let Some(l) = &link {
        notes.extend(l.notes.iter().cloned());
        notes.push(format!("drift probabilities: {}", l.drift_probability_source));
    }
    let text = report::render(&tables, &notes);
    print!("{text}");
    let mut written = vec![out.join("report.txt")];
    atomic_write(&written[0], text.as_bytes())?;
    for (name, t) in &tables {
        let p = out.join(format!("table_{name}.csv"));
        atomic_write(&p, t.to_csv().as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

/// Runs one command with a resolved config; returns the files written,
/// not counting the snapshot.
pub fn execute(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let written = match cfg.command.as_str() {
        "synth" => cmd_synth(cfg, out)?,
        "extract" => cmd_extract(cfg, out)?,
        "centroid" => cmd_centroid(cfg, out)?,
        "train" => cmd_train(cfg, out)?,
        "evaluate" => cmd_evaluate(cfg, out)?,
        "pca" => cmd_pca(cfg, out)?,
        "align" => cmd_align(cfg, out)?,
        "link" => cmd_link(cfg, out)?,
        "report" => cmd_report(cfg, out)?,
        other => return Err(Error::Parameter(format!("unknown command `{other}`"))),
    };
    write_json(&cfg.snapshot_path(out), cfg)?;
    Ok(written)
}

/// Parses `argv`, runs the command and returns the process exit code: 0 on
/// success, the error category code otherwise.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Error::Parameter(String::new()).category().code() } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = resolve(&cli).and_then(|cfg| {
        let out = cli.common.out.clone().unwrap_or_else(|| PathBuf::from("."));
        execute(&cfg, &out)
    });
    match result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("deltaprint: {e}");
            e.category().code()
        }
    }
}
