//! Adapter containers, factor pairing, delta reconstruction and flattening.
//!
//! Containers use the safetensors layout: an 8-byte little-endian header
//! length, a JSON header mapping tensor names to `{dtype, shape,
//! data_offsets}`, then the data region. Factor tensors follow the PEFT
//! convention: `lora_A` is `r x k`, `lora_B` is `d x r`, both row-major.
//!
//! Everything is converted to `f64` on load regardless of on-disk precision.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use safetensors::tensor::{Dtype, SafeTensors, View};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleKind {
    #[serde(rename = "q_proj")]
    Query,
    #[serde(rename = "v_proj")]
    Value,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 2] = [ModuleKind::Query, ModuleKind::Value];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Query => "q_proj",
            ModuleKind::Value => "v_proj",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q_proj" | "query" | "q" => Ok(ModuleKind::Query),
            "v_proj" | "value" | "v" => Ok(ModuleKind::Value),
            other => Err(Error::Parameter(format!("unknown module kind `{other}`"))),
        }
    }
}

/// One (layer, module) slot. Ordering is layer-major with the query
/// projection before the value projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SublayerKey {
    pub layer: usize,
    pub module: ModuleKind,
}

impl SublayerKey {
    pub fn new(layer: usize, module: ModuleKind) -> Self {
        Self { layer, module }
    }
}

impl fmt::Display for SublayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.module)
    }
}

impl FromStr for SublayerKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (layer, module) = s
            .split_once('.')
            .ok_or_else(|| Error::Parameter(format!("bad sublayer key `{s}`")))?;
        let layer = layer
            .parse()
            .map_err(|_| Error::Parameter(format!("bad layer index in `{s}`")))?;
        Ok(SublayerKey::new(layer, module.parse()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Healthy,
    InvertedHarmlessness,
    InvertedHelpfulness,
    Steering,
    Legacy,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Healthy => "healthy",
            Category::InvertedHarmlessness => "inverted_harmlessness",
            Category::InvertedHelpfulness => "inverted_helpfulness",
            Category::Steering => "steering",
            Category::Legacy => "legacy",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "healthy" => Ok(Category::Healthy),
            "inverted_harmlessness" => Ok(Category::InvertedHarmlessness),
            "inverted_helpfulness" => Ok(Category::InvertedHelpfulness),
            "steering" => Ok(Category::Steering),
            "legacy" => Ok(Category::Legacy),
            other => Err(Error::Parameter(format!("unknown category `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterMetadata {
    pub category: Category,
    /// Population arm, e.g. `refusal_steering` vs `sycophancy_steering`.
    /// Defaults to the category name.
    pub group: String,
    pub method: String,
    pub intensity: Option<u64>,
    pub seed: u64,
}

impl AdapterMetadata {
    pub fn new(category: Category) -> Self {
        Self {
            category,
            group: category.as_str().to_string(),
            method: String::new(),
            intensity: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `r x k`
    pub a: DMatrix<f64>,
    /// `d x r`
    pub b: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub adapter_id: String,
    pub rank: usize,
    pub alpha: f64,
    pub factors: BTreeMap<SublayerKey, LoraPair>,
    pub metadata: AdapterMetadata,
}

impl AdapterWeights {
    /// Checks the pairing and shape invariants.
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Shape(format!("{}: rank must be positive", self.adapter_id)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Parameter(format!(
                "{}: alpha must be a positive finite number",
                self.adapter_id
            )));
        }
        for (key, pair) in &self.factors {
            if pair.a.nrows() != self.rank || pair.b.ncols() != self.rank {
                return Err(Error::Shape(format!(
                    "{}: sublayer {key} has inner dimensions {} (A rows) and {} (B cols), expected rank {}",
                    self.adapter_id,
                    pair.a.nrows(),
                    pair.b.ncols(),
                    self.rank
                )));
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> PopulationSchema {
        PopulationSchema(
            self.factors
                .iter()
                .map(|(k, p)| (*k, (p.b.nrows(), p.a.ncols())))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePolicy {
    /// `dW = B A`
    #[default]
    Unit,
    /// `dW = (alpha / r) B A`, what a deployed LoRA layer adds.
    AlphaOverRank,
}

impl ScalePolicy {
    pub fn factor(self, alpha: f64, rank: usize) -> f64 {
        match self {
            ScalePolicy::Unit => 1.0,
            ScalePolicy::AlphaOverRank => alpha / rank as f64,
        }
    }
}

impl FromStr for ScalePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(ScalePolicy::Unit),
            "alpha-over-rank" | "alpha_over_rank" => Ok(ScalePolicy::AlphaOverRank),
            other => Err(Error::Parameter(format!("unknown scale policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterDelta {
    pub adapter_id: String,
    pub deltas: BTreeMap<SublayerKey, DMatrix<f64>>,
    pub scale_policy: ScalePolicy,
}

impl AdapterDelta {
    pub fn schema(&self) -> PopulationSchema {
        PopulationSchema(
            self.deltas
                .iter()
                .map(|(k, m)| (*k, (m.nrows(), m.ncols())))
                .collect(),
        )
    }
}

/// Sublayer set and `(d, k)` shapes shared by a population.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopulationSchema(pub BTreeMap<SublayerKey, (usize, usize)>);

impl PopulationSchema {
    pub fn flat_len(&self) -> usize {
        self.0.values().map(|(d, k)| d * k).sum()
    }

    /// Identifier for the canonical flattening of this schema.
    pub fn ordering_tag(&self) -> String {
        let mut h = Fnv64::new();
        for (key, (d, k)) in &self.0 {
            h.write(format!("{key}:{d}x{k};").as_bytes());
        }
        format!("rowmajor-v1-{}x{:016x}", self.0.len(), h.finish())
    }
}

/// FNV-1a; used only to fingerprint schemas, so it must be stable across
/// toolchains (std's hashers make no such promise).
struct Fnv64(u64);

impl Fnv64 {
    fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaVector {
    pub adapter_id: String,
    pub values: Vec<f64>,
    pub ordering_tag: String,
}

/// Tensor-name template with `{layer}`, `{module}` and `{factor}`
/// placeholders, e.g. `base_model.model.layers.{layer}.self_attn.{module}.lora_{factor}.weight`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamePattern {
    template: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Lit(String),
    Layer,
    Module,
    Factor,
}

impl Default for NamePattern {
    fn default() -> Self {
        NamePattern {
            template: "layers.{layer}.{module}.lora_{factor}".to_string(),
        }
    }
}

impl NamePattern {
    pub fn new(template: &str) -> Result<Self> {
        let pattern = NamePattern {
            template: template.to_string(),
        };
        let tokens = pattern.tokens()?;
        for needed in [Token::Layer, Token::Module, Token::Factor] {
            if tokens.iter().filter(|t| **t == needed).count() != 1 {
                return Err(Error::Parameter(format!(
                    "name pattern `{template}` must contain each of {{layer}}, {{module}}, {{factor}} exactly once"
                )));
            }
        }
        Ok(pattern)
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    fn tokens(&self) -> Result<Vec<Token>> {
        let mut out = Vec::new();
        let mut rest = self.template.as_str();
        while let Some(open) = rest.find('{') {
            if open > 0 {
                out.push(Token::Lit(rest[..open].to_string()));
            }
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| Error::Parameter(format!("unclosed brace in `{}`", self.template)))?;
            out.push(match &rest[open + 1..open + close] {
                "layer" => Token::Layer,
                "module" => Token::Module,
                "factor" => Token::Factor,
                other => {
                    return Err(Error::Parameter(format!("unknown placeholder {{{other}}}")));
                }
            });
            rest = &rest[open + close + 1..];
        }
        if !rest.is_empty() {
            out.push(Token::Lit(rest.to_string()));
        }
        Ok(out)
    }

    pub fn render(&self, key: SublayerKey, factor: char) -> String {
        self.template
            .replace("{layer}", &key.layer.to_string())
            .replace("{module}", key.module.as_str())
            .replace("{factor}", &factor.to_string())
    }

    /// Returns `(key, 'A' | 'B')` when `name` matches the template.
    pub fn parse(&self, name: &str) -> Option<(SublayerKey, char)> {
        let tokens = self.tokens().ok()?;
        let mut rest = name;
        let mut layer = None;
        let mut module = None;
        let mut factor = None;
        for tok in &tokens {
            match tok {
                Token::Lit(lit) => rest = rest.strip_prefix(lit.as_str())?,
                Token::Layer => {
                    let n = rest.bytes().take_while(u8::is_ascii_digit).count();
                    if n == 0 {
                        return None;
                    }
                    layer = Some(rest[..n].parse().ok()?);
                    rest = &rest[n..];
                }
                Token::Module => {
                    let (m, len) = if rest.starts_with("q_proj") {
                        (ModuleKind::Query, 6)
                    } else if rest.starts_with("v_proj") {
                        (ModuleKind::Value, 6)
                    } else {
                        return None;
                    };
                    module = Some(m);
                    rest = &rest[len..];
                }
                Token::Factor => {
                    let c = rest.chars().next()?;
                    if c != 'A' && c != 'B' {
                        return None;
                    }
                    factor = Some(c);
                    rest = &rest[1..];
                }
            }
        }
        if !rest.is_empty() {
            return None;
        }
        Some((SublayerKey::new(layer?, module?), factor?))
    }
}

/// On-disk precision for [`write_adapter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StorageDtype {
    F16,
    F32,
    #[default]
    F64,
}

const ALPHA_KEY: &str = "lora_alpha";

fn decode(dtype: Dtype, bytes: &[u8]) -> Result<Vec<f64>> {
    match dtype {
        Dtype::F64 => Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect()),
        Dtype::F32 => Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
            .collect()),
        Dtype::F16 => Ok(bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect()),
        other => Err(Error::Format(format!("unsupported dtype {other:?}"))),
    }
}

fn row_major_matrix(name: &str, shape: &[usize], values: Vec<f64>) -> Result<DMatrix<f64>> {
    if shape.len() != 2 {
        return Err(Error::Format(format!(
            "tensor `{name}` has rank {} (expected a 2-d matrix)",
            shape.len()
        )));
    }
    Ok(DMatrix::from_row_slice(shape[0], shape[1], &values))
}

/// Parses a container into paired LoRA factors. Every tensor must match
/// `pattern`; alpha is read from the header metadata when present and
/// otherwise taken from `alpha_hint`.
pub fn parse_adapter(
    bytes: &[u8],
    adapter_id: &str,
    metadata: AdapterMetadata,
    alpha_hint: Option<f64>,
    pattern: &NamePattern,
) -> Result<AdapterWeights> {
    let (_, header) = SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Format(format!("{adapter_id}: malformed header: {e}")))?;
    let st = SafeTensors::deserialize(bytes)
        .map_err(|e| Error::Format(format!("{adapter_id}: malformed container: {e}")))?;

    let mut a_map: BTreeMap<SublayerKey, DMatrix<f64>> = BTreeMap::new();
    let mut b_map: BTreeMap<SublayerKey, DMatrix<f64>> = BTreeMap::new();
    for (name, view) in st.tensors() {
        let (key, factor) = pattern.parse(&name).ok_or_else(|| {
            Error::Format(format!(
                "{adapter_id}: tensor `{name}` does not match pattern `{}`",
                pattern.template()
            ))
        })?;
        let values = decode(view.dtype(), view.data())?;
        let m = row_major_matrix(&name, view.shape(), values)?;
        let slot = if factor == 'A' { &mut a_map } else { &mut b_map };
        if slot.insert(key, m).is_some() {
            return Err(Error::Format(format!(
                "{adapter_id}: duplicate lora_{factor} tensor for sublayer {key}"
            )));
        }
    }

    for key in b_map.keys() {
        if !a_map.contains_key(key) {
            return Err(Error::Pairing {
                sublayer: key.to_string(),
                missing: 'A',
            });
        }
    }
    let mut factors = BTreeMap::new();
    let mut rank = None;
    for (key, a) in a_map {
        let b = b_map.remove(&key).ok_or(Error::Pairing {
            sublayer: key.to_string(),
            missing: 'B',
        })?;
        if a.nrows() != b.ncols() {
            return Err(Error::Shape(format!(
                "{adapter_id}: sublayer {key} has A with {} rows but B with {} columns",
                a.nrows(),
                b.ncols()
            )));
        }
        match rank {
            None => rank = Some(a.nrows()),
            Some(r) if r != a.nrows() => {
                return Err(Error::Shape(format!(
                    "{adapter_id}: sublayer {key} has rank {} but earlier sublayers have rank {r}",
                    a.nrows()
                )));
            }
            Some(_) => {}
        }
        factors.insert(key, LoraPair { a, b });
    }
    let rank = rank.ok_or_else(|| Error::Format(format!("{adapter_id}: container holds no tensors")))?;

    let alpha = match header.metadata().as_ref().and_then(|m| m.get(ALPHA_KEY)) {
        Some(s) => s
            .parse::<f64>()
            .map_err(|_| Error::Format(format!("{adapter_id}: bad {ALPHA_KEY} `{s}`")))?,
        None => alpha_hint.ok_or_else(|| {
            Error::Parameter(format!("{adapter_id}: alpha not stored in container and not supplied"))
        })?,
    };

    let weights = AdapterWeights {
        adapter_id: adapter_id.to_string(),
        rank,
        alpha,
        factors,
        metadata,
    };
    weights.validate()?;
    Ok(weights)
}

struct OwnedTensor {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl View for &OwnedTensor {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.data)
    }
    fn data_len(&self) -> usize {
        self.data.len()
    }
}

fn encode(m: &DMatrix<f64>, dtype: StorageDtype) -> OwnedTensor {
    let mut data = Vec::with_capacity(m.len() * 8);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let x = m[(i, j)];
            match dtype {
                StorageDtype::F64 => data.extend_from_slice(&x.to_le_bytes()),
                StorageDtype::F32 => data.extend_from_slice(&(x as f32).to_le_bytes()),
                StorageDtype::F16 => data.extend_from_slice(&half::f16::from_f64(x).to_le_bytes()),
            }
        }
    }
    OwnedTensor {
        dtype: match dtype {
            StorageDtype::F64 => Dtype::F64,
            StorageDtype::F32 => Dtype::F32,
            StorageDtype::F16 => Dtype::F16,
        },
        shape: vec![m.nrows(), m.ncols()],
        data,
    }
}

pub(crate) fn write_matrices(
    named: Vec<(String, &DMatrix<f64>)>,
    dtype: StorageDtype,
    metadata: Option<(&str, String)>,
) -> Result<Vec<u8>> {
    let owned: Vec<(String, OwnedTensor)> =
        named.into_iter().map(|(n, m)| (n, encode(m, dtype))).collect();
    // A single metadata entry keeps the header byte-for-byte deterministic.
    let info = metadata.map(|(k, v)| HashMap::from([(k.to_string(), v)]));
    safetensors::serialize(owned.iter().map(|(n, t)| (n.as_str(), t)), info)
        .map_err(|e| Error::Format(format!("serialization failed: {e}")))
}

pub fn write_adapter(weights: &AdapterWeights, dtype: StorageDtype, pattern: &NamePattern) -> Result<Vec<u8>> {
    weights.validate()?;
    let mut named = Vec::with_capacity(weights.factors.len() * 2);
    for (key, pair) in &weights.factors {
        named.push((pattern.render(*key, 'A'), &pair.a));
        named.push((pattern.render(*key, 'B'), &pair.b));
    }
    write_matrices(named, dtype, Some((ALPHA_KEY, format!("{}", weights.alpha))))
}

pub fn reconstruct_delta(weights: &AdapterWeights, policy: ScalePolicy) -> Result<AdapterDelta> {
    let s = policy.factor(weights.alpha, weights.rank);
    let mut deltas = BTreeMap::new();
    for (key, pair) in &weights.factors {
        if pair.b.ncols() != pair.a.nrows() {
            return Err(Error::Shape(format!(
                "{}: sublayer {key}: B is {}x{}, A is {}x{}",
                weights.adapter_id,
                pair.b.nrows(),
                pair.b.ncols(),
                pair.a.nrows(),
                pair.a.ncols()
            )));
        }
        let mut m = &pair.b * &pair.a;
        if s != 1.0 {
            m *= s;
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "{}: sublayer {key}: non-finite entries in reconstructed delta",
                weights.adapter_id
            )));
        }
        deltas.insert(*key, m);
    }
    Ok(AdapterDelta {
        adapter_id: weights.adapter_id.clone(),
        deltas,
        scale_policy: policy,
    })
}

/// Concatenates sublayer matrices in canonical key order, each row-major.
/// When `schema` is given the delta must match it exactly.
pub fn flatten_delta(delta: &AdapterDelta, schema: Option<&PopulationSchema>) -> Result<DeltaVector> {
    let own = delta.schema();
    if let Some(expected) = schema {
        if *expected != own {
            return Err(Error::Schema(format!(
                "{}: sublayer shapes differ from the population schema",
                delta.adapter_id
            )));
        }
    }
    let mut values = Vec::with_capacity(own.flat_len());
    for m in delta.deltas.values() {
        for i in 0..m.nrows() {
            values.extend(m.row(i).iter());
        }
    }
    Ok(DeltaVector {
        adapter_id: delta.adapter_id.clone(),
        values,
        ordering_tag: own.ordering_tag(),
    })
}

/// One manifest row. `path` is resolved relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub adapter_id: String,
    pub path: PathBuf,
    pub category: Category,
    pub method: String,
    pub intensity: Option<u64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl ManifestEntry {
    pub fn group(&self) -> &str {
        self.group.as_deref().unwrap_or(self.category.as_str())
    }

    pub fn metadata(&self) -> AdapterMetadata {
        AdapterMetadata {
            category: self.category,
            group: self.group().to_string(),
            method: self.method.clone(),
            intensity: self.intensity,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative entry paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: bad manifest: {e}", path.display())))?;
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.adapter_id.as_str()) {
                return Err(Error::Format(format!(
                    "{}: duplicate adapter_id `{}`",
                    path.display(),
                    e.adapter_id
                )));
            }
        }
        Ok(Manifest {
            entries,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("manifest serializes")
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn get(&self, adapter_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.adapter_id == adapter_id)
    }

    pub fn load_adapter(&self, entry: &ManifestEntry, pattern: &NamePattern) -> Result<AdapterWeights> {
        let path = self.resolve(entry);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        parse_adapter(&bytes, &entry.adapter_id, entry.metadata(), entry.alpha, pattern)
    }

    /// Loads every adapter and checks they share one schema and rank.
    pub fn load_all(&self, pattern: &NamePattern) -> Result<Vec<AdapterWeights>> {
        use rayon::prelude::*;
        let loaded: Vec<AdapterWeights> = self
            .entries
            .par_iter()
            .map(|e| self.load_adapter(e, pattern))
            .collect::<Result<_>>()?;
        check_population(&loaded)?;
        Ok(loaded)
    }
}

/// Population invariant: identical sublayer schemas and ranks.
pub fn check_population(adapters: &[AdapterWeights]) -> Result<()> {
    let Some(first) = adapters.first() else {
        return Ok(());
    };
    let schema = first.schema();
    for w in &adapters[1..] {
        if w.schema() != schema {
            return Err(Error::Schema(format!(
                "{} and {} have different sublayer shapes",
                first.adapter_id, w.adapter_id
            )));
        }
        if w.rank != first.rank {
            return Err(Error::Schema(format!(
                "{} has rank {} but {} has rank {}",
                w.adapter_id, w.rank, first.adapter_id, first.rank
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(d: usize, k: usize, r: usize, seed: f64) -> LoraPair {
        LoraPair {
            a: DMatrix::from_fn(r, k, |i, j| ((i * 7 + j) as f64 * 0.37 + seed).sin()),
            b: DMatrix::from_fn(d, r, |i, j| ((i * 3 + j) as f64 * 0.11 - seed).cos()),
        }
    }

    fn weights(layers: usize, d: usize, k: usize, r: usize) -> AdapterWeights {
        let mut factors = BTreeMap::new();
        for l in 0..layers {
            for m in ModuleKind::ALL {
                factors.insert(SublayerKey::new(l, m), pair(d, k, r, l as f64 + 0.5));
            }
        }
        AdapterWeights {
            adapter_id: "t".into(),
            rank: r,
            alpha: 16.0,
            factors,
            metadata: AdapterMetadata::new(Category::Healthy),
        }
    }

    #[test]
    fn key_order_is_layer_then_query_first() {
        let mut keys = [
            SublayerKey::new(1, ModuleKind::Query),
            SublayerKey::new(0, ModuleKind::Value),
            SublayerKey::new(0, ModuleKind::Query),
        ];
        keys.sort();
        assert_eq!(keys[0], SublayerKey::new(0, ModuleKind::Query));
        assert_eq!(keys[1], SublayerKey::new(0, ModuleKind::Value));
        assert_eq!(keys[2], SublayerKey::new(1, ModuleKind::Query));
    }

    #[test]
    fn fifty_six_sublayers_pair_up() {
        let w = weights(28, 6, 5, 8);
        let bytes = write_adapter(&w, StorageDtype::F64, &NamePattern::default()).unwrap();
        let parsed = parse_adapter(
            &bytes,
            "t",
            AdapterMetadata::new(Category::Healthy),
            None,
            &NamePattern::default(),
        )
        .unwrap();
        assert_eq!(parsed.factors.len(), 56);
        assert_eq!(parsed.rank, 8);
        assert_eq!(parsed, w);
    }

    #[test]
    fn missing_b_is_a_pairing_error() {
        let w = weights(2, 4, 4, 2);
        let p = NamePattern::default();
        let mut named = Vec::new();
        for (key, pair) in &w.factors {
            named.push((p.render(*key, 'A'), &pair.a));
            if *key != SublayerKey::new(1, ModuleKind::Value) {
                named.push((p.render(*key, 'B'), &pair.b));
            }
        }
        let bytes = write_matrices(named, StorageDtype::F32, Some((ALPHA_KEY, "16".into()))).unwrap();
        let err = parse_adapter(&bytes, "t", AdapterMetadata::new(Category::Healthy), None, &p).unwrap_err();
        match err {
            Error::Pairing { sublayer, missing } => {
                assert_eq!(sublayer, "1.v_proj");
                assert_eq!(missing, 'B');
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn inconsistent_inner_dimension_is_a_shape_error() {
        let p = NamePattern::default();
        let a = DMatrix::<f64>::zeros(3, 4);
        let b = DMatrix::<f64>::zeros(4, 2);
        let key = SublayerKey::new(0, ModuleKind::Query);
        let bytes = write_matrices(
            vec![(p.render(key, 'A'), &a), (p.render(key, 'B'), &b)],
            StorageDtype::F64,
            Some((ALPHA_KEY, "16".into())),
        )
        .unwrap();
        let err = parse_adapter(&bytes, "t", AdapterMetadata::new(Category::Healthy), None, &p).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn malformed_header_is_a_format_error() {
        let mut bytes = 1000u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{not json");
        let err = parse_adapter(
            &bytes,
            "t",
            AdapterMetadata::new(Category::Healthy),
            Some(16.0),
            &NamePattern::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn unmatched_tensor_name_is_rejected() {
        let m = DMatrix::<f64>::zeros(2, 2);
        let bytes = write_matrices(vec![("model.embed".into(), &m)], StorageDtype::F64, None).unwrap();
        let err = parse_adapter(
            &bytes,
            "t",
            AdapterMetadata::new(Category::Healthy),
            Some(16.0),
            &NamePattern::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn third_party_pattern() {
        let p = NamePattern::new("base_model.model.model.layers.{layer}.self_attn.{module}.lora_{factor}.weight").unwrap();
        let (key, f) = p
            .parse("base_model.model.model.layers.17.self_attn.v_proj.lora_B.weight")
            .unwrap();
        assert_eq!(key, SublayerKey::new(17, ModuleKind::Value));
        assert_eq!(f, 'B');
        assert!(p.parse("base_model.model.model.layers.17.self_attn.o_proj.lora_B.weight").is_none());
        assert!(NamePattern::new("layers.{layer}.lora_{factor}").is_err());
    }

    #[test]
    fn f16_and_f32_storage_decode() {
        let w = weights(1, 3, 3, 1);
        for dt in [StorageDtype::F16, StorageDtype::F32] {
            let bytes = write_adapter(&w, dt, &NamePattern::default()).unwrap();
            let parsed = parse_adapter(
                &bytes,
                "t",
                AdapterMetadata::new(Category::Healthy),
                None,
                &NamePattern::default(),
            )
            .unwrap();
            for (key, pair) in &w.factors {
                let got = &parsed.factors[key];
                let tol = if dt == StorageDtype::F16 { 1e-3 } else { 1e-7 };
                assert!((&got.a - &pair.a).amax() < tol);
                assert!((&got.b - &pair.b).amax() < tol);
            }
        }
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let mut w = weights(1, 4, 3, 2);
        for p in w.factors.values_mut() {
            p.b.fill(0.0);
        }
        let d = reconstruct_delta(&w, ScalePolicy::Unit).unwrap();
        assert!(d.deltas.values().all(|m| m.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn rank_one_outer_product() {
        let mut factors = BTreeMap::new();
        factors.insert(
            SublayerKey::new(0, ModuleKind::Query),
            LoraPair {
                a: DMatrix::from_row_slice(1, 2, &[2.0, 3.0]),
                b: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            },
        );
        let w = AdapterWeights {
            adapter_id: "x".into(),
            rank: 1,
            alpha: 2.0,
            factors,
            metadata: AdapterMetadata::new(Category::Healthy),
        };
        let d = reconstruct_delta(&w, ScalePolicy::Unit).unwrap();
        let m = &d.deltas[&SublayerKey::new(0, ModuleKind::Query)];
        assert_eq!(m, &DMatrix::from_row_slice(2, 2, &[2.0, 3.0, 0.0, 0.0]));
    }

    #[test]
    fn alpha_over_rank_doubles_at_r8_alpha16() {
        let w = weights(2, 5, 4, 8);
        let unit = reconstruct_delta(&w, ScalePolicy::Unit).unwrap();
        let scaled = reconstruct_delta(&w, ScalePolicy::AlphaOverRank).unwrap();
        for (key, m) in &unit.deltas {
            assert_eq!(&(m * 2.0), &scaled.deltas[key]);
        }
    }

    #[test]
    fn non_finite_product_is_numeric_error() {
        let mut w = weights(1, 2, 2, 1);
        w.factors.values_mut().next().unwrap().a[(0, 0)] = f64::INFINITY;
        assert!(matches!(
            reconstruct_delta(&w, ScalePolicy::Unit),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn flatten_orders_row_major_by_key() {
        let mut deltas = BTreeMap::new();
        deltas.insert(
            SublayerKey::new(0, ModuleKind::Value),
            DMatrix::from_row_slice(2, 2, &[5.0, 6.0, 7.0, 8.0]),
        );
        deltas.insert(
            SublayerKey::new(0, ModuleKind::Query),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
        );
        let d = AdapterDelta {
            adapter_id: "x".into(),
            deltas,
            scale_policy: ScalePolicy::Unit,
        };
        let v = flatten_delta(&d, None).unwrap();
        assert_eq!(v.values, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn flatten_rejects_foreign_schema() {
        let w = weights(1, 3, 3, 1);
        let d = reconstruct_delta(&w, ScalePolicy::Unit).unwrap();
        let other = weights(1, 3, 4, 1).schema();
        assert!(matches!(flatten_delta(&d, Some(&other)), Err(Error::Schema(_))));
    }

    #[test]
    fn full_model_flat_length() {
        let mut shapes = BTreeMap::new();
        for l in 0..28 {
            for m in ModuleKind::ALL {
                shapes.insert(SublayerKey::new(l, m), (3072, 3072));
            }
        }
        let schema = PopulationSchema(shapes);
        assert_eq!(schema.flat_len(), 56 * 3072 * 3072);
        assert_eq!(schema.flat_len(), 528_482_304);
    }
}
