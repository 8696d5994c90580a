//! Tabular dataset loading, encoding, and actionability schemas.
//!
//! A dataset is a CSV file (UTF-8, header row) plus a JSON sidecar schema
//! declaring feature kinds, immutable features, bounds, the sparsity budget,
//! the favorable-label rule, and an optional subgroup column. Categorical
//! columns are expanded to one-hot groups at load time; continuous columns are
//! standardized with train-split statistics. Bounds on post-action values are
//! expressed in post-preprocessing units (standardized for continuous
//! features, raw for ordinals, {0,1} for one-hot coordinates).

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CfqError, Result};
use crate::mat::Mat;

/// Default stabilizer wherever a small positive constant is needed.
pub const DEFAULT_EPS: f64 = 1e-8;

// ── Raw (column-level) schema, the JSON sidecar ─────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RawKind {
    Continuous,
    /// Discrete numeric domain; kept in raw units.
    Ordinal,
    /// Expanded to a one-hot group at load time.
    Categorical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawFeature {
    pub name: String,
    pub kind: RawKind,
    /// Ordinal domain values, required for `kind = ordinal`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    /// Declared category labels; inferred (sorted) from the file if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    /// Post-preprocessing lower bound on the feature value after an action.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    /// Post-preprocessing upper bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FavorableRule {
    /// "fixed-class" or "opposite-of-prediction".
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawSchema {
    pub features: Vec<RawFeature>,
    pub label: String,
    /// Declared label classes; inferred (sorted) from the file if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    #[serde(default)]
    pub immutable: Vec<String>,
    pub sparsity_k: usize,
    pub favorable: FavorableRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroup: Option<String>,
}

impl RawSchema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

// ── Encoded (feature-level) schema ──────────────────────────────────────

/// Kind of one encoded feature coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureKind {
    Continuous,
    /// Valid discrete values, in post-preprocessing units.
    Ordinal(Vec<f64>),
    /// Member of the one-hot group with this id.
    OneHot(usize),
}

/// Target-label rule for recourse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FavorableLabel {
    FixedClass(usize),
    OppositeOfPrediction,
}

/// Encoded-space actionability schema shared by every downstream module.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub feature_names: Vec<String>,
    pub feature_kinds: Vec<FeatureKind>,
    /// Immutable coordinate indices.
    pub immutable_indices: Vec<usize>,
    pub lower_bounds: Vec<f64>,
    pub upper_bounds: Vec<f64>,
    /// Max number of changed action units (a one-hot group counts as one).
    pub sparsity_k: usize,
    /// One-hot groups as coordinate index lists, indexed by group id.
    pub onehot_groups: Vec<Vec<usize>>,
    pub favorable: FavorableLabel,
    pub num_classes: usize,
    pub subgroup_column: Option<String>,
}

impl DatasetSchema {
    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn is_immutable(&self, j: usize) -> bool {
        self.immutable_indices.contains(&j)
    }

    /// Number of actionable units: scalar actionable coordinates plus
    /// actionable one-hot groups.
    pub fn actionable_units(&self) -> usize {
        let mut groups_seen = vec![false; self.onehot_groups.len()];
        let mut count = 0;
        for j in 0..self.dim() {
            if self.is_immutable(j) {
                continue;
            }
            match &self.feature_kinds[j] {
                FeatureKind::OneHot(g) => {
                    if !groups_seen[*g] {
                        groups_seen[*g] = true;
                        count += 1;
                    }
                }
                _ => count += 1,
            }
        }
        count
    }

    /// Check internal consistency; called after construction and on load.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.feature_kinds.len() != d || self.lower_bounds.len() != d || self.upper_bounds.len() != d {
            return Err(CfqError::schema("schema arrays have inconsistent lengths"));
        }
        for (j, (lo, hi)) in self.lower_bounds.iter().zip(&self.upper_bounds).enumerate() {
            if lo > hi {
                return Err(CfqError::schema(format!(
                    "lower bound exceeds upper bound for feature {}",
                    self.feature_names[j]
                )));
            }
        }
        for &j in &self.immutable_indices {
            if j >= d {
                return Err(CfqError::schema(format!("immutable index {j} out of range")));
            }
        }
        let mut seen = vec![false; d];
        for (g, members) in self.onehot_groups.iter().enumerate() {
            if members.is_empty() {
                return Err(CfqError::schema(format!("one-hot group {g} is empty")));
            }
            for &j in members {
                if j >= d {
                    return Err(CfqError::schema(format!("group {g} index {j} out of range")));
                }
                if seen[j] {
                    return Err(CfqError::schema(format!("feature index {j} in two one-hot groups")));
                }
                seen[j] = true;
                if self.feature_kinds[j] != FeatureKind::OneHot(g) {
                    return Err(CfqError::schema(format!("feature {j} not tagged with group {g}")));
                }
            }
        }
        if self.sparsity_k > self.actionable_units() {
            return Err(CfqError::schema(format!(
                "sparsity budget {} exceeds {} actionable units",
                self.sparsity_k,
                self.actionable_units()
            )));
        }
        if let FavorableLabel::FixedClass(c) = self.favorable {
            if c >= self.num_classes {
                return Err(CfqError::schema(format!("favorable class {c} out of range")));
            }
        }
        Ok(())
    }
}

// ── Dataset ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Encoded, preprocessed dataset split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub rows: Mat,
    pub labels: Vec<usize>,
    /// Subgroup id per row, when the schema declares a subgroup column.
    pub groups: Option<Vec<usize>>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols
    }
}

/// Per-feature train-split statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
    /// Median absolute deviation, for robust cost weights.
    pub mad: Vec<f64>,
    pub eps: f64,
}

// ── Cost specification ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostNorm {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    InverseStd,
    Uniform,
    InverseMad,
}

/// Weighted-norm action cost c(delta) = ||W delta||_p.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostSpec {
    pub weights: Vec<f64>,
    pub norm: CostNorm,
    pub eps: f64,
}

impl CostSpec {
    pub fn uniform(dim: usize, norm: CostNorm) -> Self {
        CostSpec { weights: vec![1.0; dim], norm, eps: DEFAULT_EPS }
    }
}

/// Per-feature effort weights from train statistics.
pub fn compute_cost_weights(stats: &FeatureStats, mode: WeightMode, norm: CostNorm) -> CostSpec {
    let weights = match mode {
        WeightMode::InverseStd => stats.stddev.iter().map(|s| 1.0 / (s + stats.eps)).collect(),
        WeightMode::Uniform => vec![1.0; stats.stddev.len()],
        WeightMode::InverseMad => stats.mad.iter().map(|m| 1.0 / (m + stats.eps)).collect(),
    };
    CostSpec { weights, norm, eps: stats.eps }
}

/// c(delta) = ||W delta||_p.
pub fn action_cost(delta: &[f64], cost: &CostSpec) -> Result<f64> {
    if delta.len() != cost.weights.len() {
        return Err(CfqError::DimensionMismatch { expected: cost.weights.len(), got: delta.len() });
    }
    let it = delta.iter().zip(&cost.weights).map(|(d, w)| w * d);
    Ok(match cost.norm {
        CostNorm::L1 => it.map(f64::abs).sum(),
        CostNorm::L2 => it.map(|v| v * v).sum::<f64>().sqrt(),
    })
}

// ── Loading pipeline ────────────────────────────────────────────────────

/// Raw CSV parsed against a RawSchema: numeric columns parsed, categorical
/// values resolved to category indices.
#[derive(Debug, Clone)]
pub struct RawTable {
    /// Per feature column: parsed values (numeric) or category index (as f64).
    pub columns: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub groups: Option<Vec<usize>>,
    /// Category labels per categorical feature column index.
    pub categories: BTreeMap<usize, Vec<String>>,
    pub classes: Vec<String>,
    pub subgroup_labels: Vec<String>,
}

fn resolve_category(cats: &[String], v: &str) -> Option<usize> {
    cats.iter().position(|c| c == v)
}

/// Parse a CSV file against the raw schema. Categorical levels and label
/// classes are taken from the schema when declared, else inferred from the
/// file in sorted order.
pub fn read_raw_table(path: impl AsRef<Path>, raw: &RawSchema) -> Result<RawTable> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(CfqError::data(format!("dataset file not found: {}", path.display())));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();

    let col_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CfqError::schema(format!("column '{name}' missing from CSV header")))
    };
    let feature_cols: Vec<usize> =
        raw.features.iter().map(|f| col_of(&f.name)).collect::<Result<_>>()?;
    let label_col = col_of(&raw.label)?;
    let subgroup_col = match &raw.subgroup {
        Some(name) => Some(col_of(name)?),
        None => None,
    };

    let mut records: Vec<csv::StringRecord> = Vec::new();
    for rec in rdr.records() {
        records.push(rec?);
    }
    if records.is_empty() {
        return Err(CfqError::data("no rows"));
    }
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != headers.len() {
            return Err(CfqError::data(format!(
                "row {i}: expected {} columns, got {}",
                headers.len(),
                rec.len()
            )));
        }
    }

    // Category/class vocabularies.
    let mut categories: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (fi, feat) in raw.features.iter().enumerate() {
        if matches!(feat.kind, RawKind::Categorical) {
            let cats = match &feat.categories {
                Some(c) => c.clone(),
                None => {
                    let mut vals: Vec<String> =
                        records.iter().map(|r| r[feature_cols[fi]].to_string()).collect();
                    vals.sort();
                    vals.dedup();
                    vals
                }
            };
            if cats.len() < 2 {
                return Err(CfqError::schema(format!(
                    "categorical feature '{}' has fewer than 2 categories",
                    feat.name
                )));
            }
            categories.insert(fi, cats);
        }
    }
    let classes = match &raw.classes {
        Some(c) => c.clone(),
        None => {
            let mut vals: Vec<String> = records.iter().map(|r| r[label_col].to_string()).collect();
            vals.sort();
            vals.dedup();
            vals
        }
    };
    let mut subgroup_labels: Vec<String> = Vec::new();
    if let Some(sc) = subgroup_col {
        let mut vals: Vec<String> = records.iter().map(|r| r[sc].to_string()).collect();
        vals.sort();
        vals.dedup();
        subgroup_labels = vals;
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(records.len()); raw.features.len()];
    let mut labels = Vec::with_capacity(records.len());
    let mut groups = subgroup_col.map(|_| Vec::with_capacity(records.len()));

    for (i, rec) in records.iter().enumerate() {
        for (fi, feat) in raw.features.iter().enumerate() {
            let cell = &rec[feature_cols[fi]];
            let v = match feat.kind {
                RawKind::Continuous | RawKind::Ordinal => cell.parse::<f64>().map_err(|_| {
                    CfqError::data(format!(
                        "row {i}: feature '{}' has non-numeric value '{cell}'",
                        feat.name
                    ))
                })?,
                RawKind::Categorical => {
                    let cats = &categories[&fi];
                    resolve_category(cats, cell).ok_or_else(|| {
                        CfqError::data(format!(
                            "row {i}: unknown category '{cell}' for feature '{}'",
                            feat.name
                        ))
                    })? as f64
                }
            };
            columns[fi].push(v);
        }
        let cls = &rec[label_col];
        let y = classes.iter().position(|c| c == cls).ok_or_else(|| {
            CfqError::data(format!("row {i}: unknown label class '{cls}'"))
        })?;
        labels.push(y);
        if let (Some(gv), Some(sc)) = (groups.as_mut(), subgroup_col) {
            let g = subgroup_labels.iter().position(|c| c == &rec[sc]).unwrap();
            gv.push(g);
        }
    }

    Ok(RawTable { columns, labels, groups, categories, classes, subgroup_labels })
}

/// Fitted preprocessing pipeline: the encoded schema plus train statistics.
///
/// `fit` derives the encoded layout (one-hot expansion, standardization
/// statistics, bounds) from a raw schema and the train-split table; the
/// pipeline then encodes any split consistently.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pipeline {
    pub raw: RawSchema,
    pub schema: DatasetSchema,
    pub stats: FeatureStats,
    /// Raw-units mean/std used to standardize continuous columns (one entry
    /// per raw feature; unused slots are (0, 1)).
    raw_mean: Vec<f64>,
    raw_std: Vec<f64>,
    /// Categorical vocabularies fixed at fit time.
    categories: BTreeMap<usize, Vec<String>>,
    classes: Vec<String>,
    subgroup_labels: Vec<String>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

impl Pipeline {
    /// Fit on the train-split raw table.
    pub fn fit(raw: &RawSchema, train: &RawTable) -> Result<Self> {
        // Standardization parameters per raw feature (continuous only).
        let n = train.labels.len();
        let mut raw_mean = vec![0.0; raw.features.len()];
        let mut raw_std = vec![1.0; raw.features.len()];
        for (fi, feat) in raw.features.iter().enumerate() {
            if matches!(feat.kind, RawKind::Continuous) {
                let col = &train.columns[fi];
                let mean = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                raw_mean[fi] = mean;
                raw_std[fi] = var.sqrt();
            }
        }

        // Encoded layout.
        let mut feature_names = Vec::new();
        let mut feature_kinds = Vec::new();
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        let mut onehot_groups: Vec<Vec<usize>> = Vec::new();
        let mut immutable_indices = Vec::new();
        for (fi, feat) in raw.features.iter().enumerate() {
            let imm = raw.immutable.contains(&feat.name);
            match feat.kind {
                RawKind::Continuous => {
                    let j = feature_names.len();
                    feature_names.push(feat.name.clone());
                    feature_kinds.push(FeatureKind::Continuous);
                    lower.push(feat.lower.unwrap_or(f64::NEG_INFINITY));
                    upper.push(feat.upper.unwrap_or(f64::INFINITY));
                    if imm {
                        immutable_indices.push(j);
                    }
                }
                RawKind::Ordinal => {
                    let j = feature_names.len();
                    let mut dom = feat.values.clone().ok_or_else(|| {
                        CfqError::schema(format!("ordinal feature '{}' missing values", feat.name))
                    })?;
                    dom.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    feature_names.push(feat.name.clone());
                    lower.push(feat.lower.unwrap_or(dom[0]));
                    upper.push(feat.upper.unwrap_or(*dom.last().unwrap()));
                    feature_kinds.push(FeatureKind::Ordinal(dom));
                    if imm {
                        immutable_indices.push(j);
                    }
                }
                RawKind::Categorical => {
                    let cats = train
                        .categories
                        .get(&fi)
                        .ok_or_else(|| CfqError::schema(format!("no categories for '{}'", feat.name)))?;
                    let gid = onehot_groups.len();
                    let mut members = Vec::new();
                    for cat in cats {
                        let j = feature_names.len();
                        feature_names.push(format!("{}={}", feat.name, cat));
                        feature_kinds.push(FeatureKind::OneHot(gid));
                        lower.push(0.0);
                        upper.push(1.0);
                        members.push(j);
                        if imm {
                            immutable_indices.push(j);
                        }
                    }
                    onehot_groups.push(members);
                }
            }
        }

        let favorable = match raw.favorable.mode.as_str() {
            "fixed-class" => FavorableLabel::FixedClass(raw.favorable.class.ok_or_else(|| {
                CfqError::schema("favorable mode 'fixed-class' requires 'class'")
            })?),
            "opposite-of-prediction" => FavorableLabel::OppositeOfPrediction,
            other => return Err(CfqError::schema(format!("unknown favorable mode '{other}'"))),
        };

        let schema = DatasetSchema {
            feature_names,
            feature_kinds,
            immutable_indices,
            lower_bounds: lower,
            upper_bounds: upper,
            sparsity_k: raw.sparsity_k,
            onehot_groups,
            favorable,
            num_classes: train.classes.len(),
            subgroup_column: raw.subgroup.clone(),
        };
        schema.validate()?;

        let mut pipe = Pipeline {
            raw: raw.clone(),
            schema,
            stats: FeatureStats { mean: vec![], stddev: vec![], mad: vec![], eps: DEFAULT_EPS },
            raw_mean,
            raw_std,
            categories: train.categories.clone(),
            classes: train.classes.clone(),
            subgroup_labels: train.subgroup_labels.clone(),
        };

        // Encoded train matrix drives the encoded-space statistics.
        let train_ds = pipe.encode(train, Split::Train)?;
        let d = pipe.schema.dim();
        let m = train_ds.len() as f64;
        let mut mean = vec![0.0; d];
        let mut stddev = vec![0.0; d];
        let mut mad = vec![0.0; d];
        for j in 0..d {
            let col: Vec<f64> = (0..train_ds.len()).map(|i| train_ds.rows.at(i, j)).collect();
            let mu = col.iter().sum::<f64>() / m;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            mean[j] = mu;
            stddev[j] = var.sqrt();
            let mut sorted = col.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = median(&sorted);
            let mut devs: Vec<f64> = col.iter().map(|v| (v - med).abs()).collect();
            devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            mad[j] = median(&devs);
        }
        pipe.stats = FeatureStats { mean, stddev, mad, eps: DEFAULT_EPS };
        Ok(pipe)
    }

    /// Encode a raw table into a validated, preprocessed Dataset.
    pub fn encode(&self, table: &RawTable, split: Split) -> Result<Dataset> {
        let n = table.labels.len();
        if n == 0 {
            return Err(CfqError::data("no rows"));
        }
        let d = self.schema.dim();
        let mut rows = Mat::zeros(n, d);
        for i in 0..n {
            let mut j = 0;
            for (fi, feat) in self.raw.features.iter().enumerate() {
                match feat.kind {
                    RawKind::Continuous => {
                        let std = if self.raw_std[fi] > 0.0 { self.raw_std[fi] } else { 1.0 };
                        *rows.at_mut(i, j) = (table.columns[fi][i] - self.raw_mean[fi]) / std;
                        j += 1;
                    }
                    RawKind::Ordinal => {
                        *rows.at_mut(i, j) = table.columns[fi][i];
                        j += 1;
                    }
                    RawKind::Categorical => {
                        let width = self.categories[&fi].len();
                        let idx = table.columns[fi][i] as usize;
                        if idx >= width {
                            return Err(CfqError::data(format!(
                                "row {i}: category index {idx} out of range for '{}'",
                                feat.name
                            )));
                        }
                        *rows.at_mut(i, j + idx) = 1.0;
                        j += width;
                    }
                }
            }
        }

        // Bound validation with row/feature attribution.
        for i in 0..n {
            for j in 0..d {
                let v = rows.at(i, j);
                if v < self.schema.lower_bounds[j] - 1e-12 || v > self.schema.upper_bounds[j] + 1e-12 {
                    return Err(CfqError::data(format!(
                        "row {i}: feature '{}' value {v} violates bounds [{}, {}]",
                        self.schema.feature_names[j],
                        self.schema.lower_bounds[j],
                        self.schema.upper_bounds[j]
                    )));
                }
            }
        }

        for y in &table.labels {
            if *y >= self.schema.num_classes {
                return Err(CfqError::data(format!("label {y} out of range")));
            }
        }

        Ok(Dataset { rows, labels: table.labels.clone(), groups: table.groups.clone(), split })
    }

    /// Load and encode a CSV split with the fitted pipeline.
    pub fn load_dataset(&self, path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
        let table = read_raw_table(path, &self.raw)?;
        if table.classes != self.classes {
            return Err(CfqError::data("label classes differ from the fitted pipeline"));
        }
        self.encode(&table, split)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn subgroup_labels(&self) -> &[String] {
        &self.subgroup_labels
    }
}

/// Convenience: fit on a train CSV and load {train, val, test} in one call.
pub fn load_splits(
    raw: &RawSchema,
    train_path: impl AsRef<Path>,
    val_path: impl AsRef<Path>,
    test_path: impl AsRef<Path>,
) -> Result<(Pipeline, Dataset, Dataset, Dataset)> {
    let train_table = read_raw_table(train_path, raw)?;
    let pipe = Pipeline::fit(raw, &train_table)?;
    let train = pipe.encode(&train_table, Split::Train)?;
    let val = pipe.load_dataset(val_path, Split::Val)?;
    let test = pipe.load_dataset(test_path, Split::Test)?;
    Ok((pipe, train, val, test))
}

// ── Structural decode/encode round-trip ─────────────────────────────────

/// Structurally decoded value of one action unit of a row.
#[derive(Debug, Clone, PartialEq)]
pub enum DecodedValue {
    Scalar(f64),
    /// (group id, active category index)
    Category(usize, usize),
}

/// Decode an encoded row into scalar values and active category indices.
pub fn decode_row(schema: &DatasetSchema, row: &[f64]) -> Vec<DecodedValue> {
    let mut out = Vec::new();
    let mut done_groups = vec![false; schema.onehot_groups.len()];
    for j in 0..schema.dim() {
        match &schema.feature_kinds[j] {
            FeatureKind::OneHot(g) => {
                if !done_groups[*g] {
                    done_groups[*g] = true;
                    let members = &schema.onehot_groups[*g];
                    let active = members
                        .iter()
                        .enumerate()
                        .max_by(|a, b| row[*a.1].partial_cmp(&row[*b.1]).unwrap())
                        .map(|(k, _)| k)
                        .unwrap();
                    out.push(DecodedValue::Category(*g, active));
                }
            }
            _ => out.push(DecodedValue::Scalar(row[j])),
        }
    }
    out
}

/// Re-encode a decoded row; exact inverse of `decode_row` for valid rows.
pub fn encode_row(schema: &DatasetSchema, decoded: &[DecodedValue]) -> Vec<f64> {
    let mut out = vec![0.0; schema.dim()];
    let mut it = decoded.iter();
    let mut done_groups = vec![false; schema.onehot_groups.len()];
    for j in 0..schema.dim() {
        match &schema.feature_kinds[j] {
            FeatureKind::OneHot(g) => {
                if !done_groups[*g] {
                    done_groups[*g] = true;
                    match it.next() {
                        Some(DecodedValue::Category(gid, k)) if gid == g => {
                            out[schema.onehot_groups[*g][*k]] = 1.0;
                        }
                        _ => panic!("decoded row does not match schema"),
                    }
                }
            }
            _ => match it.next() {
                Some(DecodedValue::Scalar(v)) => out[j] = *v,
                _ => panic!("decoded row does not match schema"),
            },
        }
    }
    out
}

// ── Synthetic generator and built-in layouts ────────────────────────────

/// Two-Gaussian synthetic binary task configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub dim: usize,
    /// Distance between class means along the discriminative direction.
    pub separation: f64,
    /// Additional class-mean offset along the immutable coordinates. With a
    /// nonzero offset, recourse points occupy a region factual data never
    /// covers (favorable actionable profile, unfavorable immutable profile).
    #[serde(default)]
    pub immutable_offset: f64,
    pub sparsity_k: usize,
    /// Number of leading immutable coordinates.
    pub immutable_prefix: usize,
    pub bound: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_train: 1200,
            n_val: 400,
            n_test: 800,
            dim: 10,
            separation: 3.0,
            immutable_offset: 1.5,
            sparsity_k: 2,
            immutable_prefix: 1,
            bound: 4.5,
            seed: 0,
        }
    }
}

/// Sample the two-blob task. Returns the fitted pipeline plus encoded splits;
/// class 1 (the favorable class) sits at +separation/2 along a fixed
/// direction, class 0 at the opposite side. Noise draws are clamped to
/// +-3.4 so every standardized value stays inside the declared bound.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Pipeline, Dataset, Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    // Discriminative direction: weight on the first actionable coordinates
    // after the immutable prefix, plus an offset on the immutables.
    let imm = spec.immutable_prefix.min(d);
    let mut dir = vec![0.0; d];
    let active = (d - imm).min(3).max(1);
    for dirj in dir.iter_mut().skip(imm).take(active) {
        *dirj = 1.0 / (active as f64).sqrt();
    }
    let mut off = vec![0.0; d];
    if imm > 0 {
        for o in off.iter_mut().take(imm) {
            *o = 1.0 / (imm as f64).sqrt();
        }
    }

    let sample_split = |n: usize, rng: &mut ChaCha8Rng| -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 2;
            let sign = if y == 1 { 0.5 } else { -0.5 };
            let mut row = Vec::with_capacity(d);
            for j in 0..d {
                let g: f64 = sample_standard_normal(rng).clamp(-3.4, 3.4);
                row.push(
                    sign * spec.separation * dir[j]
                        + sign * spec.immutable_offset * off[j]
                        + g,
                );
            }
            rows.push(row);
            labels.push(y);
        }
        (rows, labels)
    };

    let raw = RawSchema {
        features: (0..d)
            .map(|j| RawFeature {
                name: format!("x{j}"),
                kind: RawKind::Continuous,
                values: None,
                categories: None,
                lower: Some(-spec.bound),
                upper: Some(spec.bound),
            })
            .collect(),
        label: "y".to_string(),
        classes: Some(vec!["0".to_string(), "1".to_string()]),
        immutable: (0..spec.immutable_prefix).map(|j| format!("x{j}")).collect(),
        sparsity_k: spec.sparsity_k,
        favorable: FavorableRule { mode: "fixed-class".to_string(), class: Some(1) },
        subgroup: None,
    };

    let (train_rows, train_labels) = sample_split(spec.n_train, &mut rng);
    let (val_rows, val_labels) = sample_split(spec.n_val, &mut rng);
    let (test_rows, test_labels) = sample_split(spec.n_test, &mut rng);

    let to_table = |rows: Vec<Vec<f64>>, labels: Vec<usize>| RawTable {
        columns: (0..d).map(|j| rows.iter().map(|r| r[j]).collect()).collect(),
        labels,
        groups: None,
        categories: BTreeMap::new(),
        classes: vec!["0".to_string(), "1".to_string()],
        subgroup_labels: vec![],
    };

    let train_table = to_table(train_rows, train_labels);
    let pipe = Pipeline::fit(&raw, &train_table)?;
    let train = pipe.encode(&train_table, Split::Train)?;
    let val = pipe.encode(&to_table(val_rows, val_labels), Split::Val)?;
    let test = pipe.encode(&to_table(test_rows, test_labels), Split::Test)?;
    Ok((pipe, train, val, test))
}

/// Write a generated synthetic task to `<dir>/{train,val,test}.csv` plus
/// `schema.json`, for exercising the CSV/JSON external interfaces.
pub fn write_synthetic_csv(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<RawSchema> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let mut dir_vec = vec![0.0; d];
    let active = d.min(4).max(1);
    for v in dir_vec.iter_mut().take(active) {
        *v = 1.0 / (active as f64).sqrt();
    }
    let write_split = |name: &str, n: usize, rng: &mut ChaCha8Rng| -> Result<()> {
        let mut out = String::new();
        out.push_str(&(0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(","));
        out.push_str(",y\n");
        for i in 0..n {
            let y = i % 2;
            let sign = if y == 1 { 0.5 } else { -0.5 };
            for dv in dir_vec.iter().take(d) {
                let g: f64 = sample_standard_normal(rng).clamp(-3.4, 3.4);
                out.push_str(&format!("{},", sign * spec.separation * dv + g));
            }
            out.push_str(&format!("{y}\n"));
        }
        std::fs::write(dir.join(name), out)?;
        Ok(())
    };
    write_split("train.csv", spec.n_train, &mut rng)?;
    write_split("val.csv", spec.n_val, &mut rng)?;
    write_split("test.csv", spec.n_test, &mut rng)?;
    let raw = RawSchema {
        features: (0..d)
            .map(|j| RawFeature {
                name: format!("x{j}"),
                kind: RawKind::Continuous,
                values: None,
                categories: None,
                lower: Some(-spec.bound),
                upper: Some(spec.bound),
            })
            .collect(),
        label: "y".to_string(),
        classes: Some(vec!["0".to_string(), "1".to_string()]),
        immutable: (0..spec.immutable_prefix).map(|j| format!("x{j}")).collect(),
        sparsity_k: spec.sparsity_k,
        favorable: FavorableRule { mode: "fixed-class".to_string(), class: Some(1) },
        subgroup: None,
    };
    raw.to_json_file(dir.join("schema.json"))?;
    Ok(raw)
}

fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per call keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Standard-normal sampler shared by the solver and teacher-noise paths.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    sample_standard_normal(rng)
}

/// Built-in raw schemas for the common public tabular layouts. Files are
/// always user-supplied; these only fix column names, kinds, and constraint
/// defaults.
pub fn builtin_raw_schema(name: &str) -> Result<RawSchema> {
    let cont = |name: &str, lo: f64, hi: f64| RawFeature {
        name: name.to_string(),
        kind: RawKind::Continuous,
        values: None,
        categories: None,
        lower: Some(lo),
        upper: Some(hi),
    };
    let cat = |name: &str| RawFeature {
        name: name.to_string(),
        kind: RawKind::Categorical,
        values: None,
        categories: None,
        lower: None,
        upper: None,
    };
    match name {
        "adult" => Ok(RawSchema {
            features: vec![
                cont("age", -3.0, 3.0),
                cat("workclass"),
                cont("fnlwgt", -3.0, 3.0),
                cat("education"),
                cont("education-num", -3.0, 3.0),
                cat("marital-status"),
                cat("occupation"),
                cat("relationship"),
                cat("race"),
                cat("sex"),
                cont("capital-gain", -3.0, 10.0),
                cont("capital-loss", -3.0, 10.0),
                cont("hours-per-week", -3.0, 3.0),
                cat("native-country"),
            ],
            label: "income".to_string(),
            classes: Some(vec!["<=50K".to_string(), ">50K".to_string()]),
            immutable: vec![
                "age".to_string(),
                "marital-status".to_string(),
                "relationship".to_string(),
                "race".to_string(),
                "sex".to_string(),
                "native-country".to_string(),
            ],
            sparsity_k: 5,
            favorable: FavorableRule { mode: "fixed-class".to_string(), class: Some(1) },
            subgroup: Some("sex".to_string()),
        }),
        "german" => Ok(RawSchema {
            features: vec![
                cat("checking_status"),
                cont("duration", -3.0, 3.0),
                cat("credit_history"),
                cat("purpose"),
                cont("credit_amount", -3.0, 3.0),
                cat("savings"),
                cat("employment"),
                cont("installment_rate", -3.0, 3.0),
                cat("personal_status"),
                cat("other_parties"),
                cont("residence_since", -3.0, 3.0),
                cat("property"),
                cont("age", -3.0, 3.0),
                cat("other_payment_plans"),
                cat("housing"),
                cont("existing_credits", -3.0, 3.0),
                cat("job"),
                cont("num_dependents", -3.0, 3.0),
                cat("telephone"),
                cat("foreign_worker"),
            ],
            label: "class".to_string(),
            classes: Some(vec!["bad".to_string(), "good".to_string()]),
            immutable: vec![
                "personal_status".to_string(),
                "age".to_string(),
                "foreign_worker".to_string(),
                "other_parties".to_string(),
                "telephone".to_string(),
            ],
            sparsity_k: 4,
            favorable: FavorableRule { mode: "fixed-class".to_string(), class: Some(1) },
            subgroup: Some("personal_status".to_string()),
        }),
        "compas" => Ok(RawSchema {
            features: vec![
                cat("sex"),
                cont("age", -3.0, 3.0),
                cat("race"),
                cont("juv_fel_count", -3.0, 6.0),
                cont("juv_misd_count", -3.0, 6.0),
                cont("juv_other_count", -3.0, 6.0),
                cont("priors_count", -3.0, 6.0),
                cat("c_charge_degree"),
            ],
            label: "two_year_recid".to_string(),
            classes: Some(vec!["1".to_string(), "0".to_string()]),
            immutable: vec!["sex".to_string(), "age".to_string(), "race".to_string()],
            sparsity_k: 3,
            favorable: FavorableRule { mode: "fixed-class".to_string(), class: Some(1) },
            subgroup: Some("race".to_string()),
        }),
        other => Err(CfqError::schema(format!("unknown builtin layout '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_raw() -> RawSchema {
        RawSchema {
            features: vec![
                RawFeature {
                    name: "a".into(),
                    kind: RawKind::Continuous,
                    values: None,
                    categories: None,
                    lower: Some(-4.0),
                    upper: Some(4.0),
                },
                RawFeature {
                    name: "c".into(),
                    kind: RawKind::Categorical,
                    values: None,
                    categories: None,
                    lower: None,
                    upper: None,
                },
            ],
            label: "y".into(),
            classes: Some(vec!["0".into(), "1".into()]),
            immutable: vec![],
            sparsity_k: 2,
            favorable: FavorableRule { mode: "fixed-class".into(), class: Some(1) },
            subgroup: None,
        }
    }

    fn write_csv(dir: &std::path::Path, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn load_expands_onehot_groups() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(dir.path(), "d.csv", "a,c,y\n1.0,yes,0\n2.0,no,1\n");
        let raw = small_raw();
        let table = read_raw_table(&p, &raw).unwrap();
        let pipe = Pipeline::fit(&raw, &table).unwrap();
        let ds = pipe.encode(&table, Split::Train).unwrap();
        assert_eq!(ds.dim(), 3); // a + 2-wide one-hot
        assert_eq!(pipe.schema.onehot_groups.len(), 1);
        for i in 0..ds.len() {
            let s: f64 = pipe.schema.onehot_groups[0].iter().map(|&j| ds.rows.at(i, j)).sum();
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn bound_violation_names_row_and_feature() {
        let dir = tempfile::tempdir().unwrap();
        let train = write_csv(dir.path(), "train.csv", "a,c,y\n1.0,yes,0\n2.0,no,1\n3.0,yes,1\n");
        // Third row is far outside +-4 train-split sigmas.
        let test = write_csv(dir.path(), "test.csv", "a,c,y\n1.5,yes,0\n2.5,no,1\n99.0,no,1\n");
        let raw = small_raw();
        let table = read_raw_table(&train, &raw).unwrap();
        let pipe = Pipeline::fit(&raw, &table).unwrap();
        let err = pipe.load_dataset(&test, Split::Test).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2"), "{msg}");
        assert!(msg.contains("'a'"), "{msg}");
    }

    #[test]
    fn empty_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(dir.path(), "d.csv", "a,c,y\n");
        let err = read_raw_table(&p, &small_raw()).unwrap_err();
        assert!(err.to_string().contains("no rows"));
    }

    #[test]
    fn missing_file_is_reported() {
        let err = read_raw_table("/nonexistent/file.csv", &small_raw()).unwrap_err();
        assert!(err.to_string().contains("not found"));
    }

    #[test]
    fn unknown_category_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(dir.path(), "d.csv", "a,c,y\n1.0,yes,0\n2.0,no,1\n");
        let mut raw = small_raw();
        raw.features[1].categories = Some(vec!["yes".into()]);
        let err = read_raw_table(&p, &raw);
        assert!(err.is_err());
        raw.features[1].categories = Some(vec!["yes".into(), "maybe".into()]);
        let err = read_raw_table(&p, &raw).unwrap_err();
        assert!(err.to_string().contains("unknown category"));
    }

    #[test]
    fn cost_weights_modes() {
        let stats = FeatureStats {
            mean: vec![0.0, 0.0],
            stddev: vec![1.0, 4.0],
            mad: vec![0.5, 2.0],
            eps: 1e-8,
        };
        let w = compute_cost_weights(&stats, WeightMode::InverseStd, CostNorm::L1);
        assert!((w.weights[0] - 1.0).abs() < 1e-7);
        assert!((w.weights[1] - 0.25).abs() < 1e-7);
        let w = compute_cost_weights(&stats, WeightMode::Uniform, CostNorm::L1);
        assert_eq!(w.weights, vec![1.0, 1.0]);
        let w = compute_cost_weights(&stats, WeightMode::InverseMad, CostNorm::L1);
        assert!((w.weights[0] - 2.0).abs() < 1e-7);
        let stats0 = FeatureStats { mean: vec![0.0], stddev: vec![0.0], mad: vec![0.0], eps: 1e-8 };
        let w = compute_cost_weights(&stats0, WeightMode::InverseStd, CostNorm::L1);
        assert!((w.weights[0] - 1e8).abs() / 1e8 < 1e-9);
    }

    #[test]
    fn action_cost_examples() {
        let cost = CostSpec::uniform(2, CostNorm::L1);
        assert_eq!(action_cost(&[1.0, -2.0], &cost).unwrap(), 3.0);
        assert_eq!(action_cost(&[0.0, 0.0], &cost).unwrap(), 0.0);
        let cost2 = CostSpec::uniform(2, CostNorm::L2);
        assert_eq!(action_cost(&[3.0, 4.0], &cost2).unwrap(), 5.0);
        assert!(action_cost(&[1.0], &cost).is_err());
    }

    #[test]
    fn standardization_centers_train_split() {
        let (pipe, train, _, _) = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let n = train.len() as f64;
        for j in 0..pipe.schema.dim() {
            let mean: f64 = (0..train.len()).map(|i| train.rows.at(i, j)).sum::<f64>() / n;
            let var: f64 =
                (0..train.len()).map(|i| (train.rows.at(i, j) - mean).powi(2)).sum::<f64>() / n;
            if pipe.stats.stddev[j] > 0.0 {
                assert!(mean.abs() < 1e-9, "feature {j} mean {mean}");
                assert!((var.sqrt() - 1.0).abs() < 1e-9, "feature {j} std {}", var.sqrt());
            }
        }
    }

    #[test]
    fn decode_encode_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_csv(
            dir.path(),
            "d.csv",
            "a,c,y\n1.0,yes,0\n2.0,no,1\n1.5,yes,1\n0.5,no,0\n",
        );
        let raw = small_raw();
        let table = read_raw_table(&p, &raw).unwrap();
        let pipe = Pipeline::fit(&raw, &table).unwrap();
        let ds = pipe.encode(&table, Split::Train).unwrap();
        for i in 0..ds.len() {
            let row = ds.rows.row(i);
            let decoded = decode_row(&pipe.schema, row);
            let back = encode_row(&pipe.schema, &decoded);
            assert_eq!(back, row, "row {i} not bit-exact");
        }
    }

    #[test]
    fn builtin_layouts_exist() {
        for name in ["adult", "german", "compas"] {
            let raw = builtin_raw_schema(name).unwrap();
            assert!(!raw.features.is_empty());
        }
        assert!(builtin_raw_schema("nope").is_err());
    }
}
