//! Tabular training data.
//!
//! Values are held column-major; categorical columns store dense level codes
//! as `f64`. Class labels are re-coded `0..C` in order of first appearance,
//! and so are categorical levels.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RfxError};

/// Largest categorical cardinality supported by exhaustive partition search.
pub const MAX_CATEGORICAL_LEVELS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical { levels: Vec<String> },
}

impl ColumnKind {
    pub fn level_count(&self) -> Option<usize> {
        match self {
            ColumnKind::Numeric => None,
            ColumnKind::Categorical { levels } => Some(levels.len()),
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self, ColumnKind::Categorical { .. })
    }
}

/// One entry of a schema file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub column: String,
    pub kind: SchemaKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemaKind {
    Numeric,
    Categorical,
    /// Marks the label column; optional, the label column is named separately.
    Label,
}

/// Column declarations for [`Dataset::load_csv`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Every column numeric except `label`.
    pub fn all_numeric<S: AsRef<str>>(header: &[S], label: &str) -> Self {
        let columns = header
            .iter()
            .map(|h| {
                let name = h.as_ref();
                ColumnSpec {
                    column: name.to_string(),
                    kind: if name == label {
                        SchemaKind::Label
                    } else {
                        SchemaKind::Numeric
                    },
                    levels: None,
                }
            })
            .collect();
        Schema { columns }
    }

    fn find(&self, column: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.column == column)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n: usize,
    feature_names: Vec<String>,
    columns: Vec<ColumnKind>,
    /// Column-major, `values[j * n + i]`.
    values: Vec<f64>,
    labels: Vec<u32>,
    class_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from column-major values, validating every invariant.
    pub fn new(
        feature_names: Vec<String>,
        columns: Vec<ColumnKind>,
        values: Vec<f64>,
        labels: Vec<u32>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let n = labels.len();
        let p = columns.len();
        if feature_names.len() != p {
            return Err(RfxError::data(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                p
            )));
        }
        if p == 0 {
            return Err(RfxError::data("dataset has no feature columns"));
        }
        if n < 2 {
            return Err(RfxError::data(format!("need at least 2 samples, got {n}")));
        }
        if values.len() != n * p {
            return Err(RfxError::data(format!(
                "expected {} values for {n} x {p}, got {}",
                n * p,
                values.len()
            )));
        }
        let c = class_names.len();
        if c < 2 {
            return Err(RfxError::data("label column has a single class"));
        }
        if let Some(bad) = labels.iter().position(|&y| y as usize >= c) {
            return Err(RfxError::data(format!(
                "label {} at row {} exceeds class count {c}",
                labels[bad],
                bad + 1
            )));
        }
        for (j, kind) in columns.iter().enumerate() {
            let col = &values[j * n..(j + 1) * n];
            match kind {
                ColumnKind::Numeric => {
                    if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                        return Err(RfxError::data(format!(
                            "non-finite value in column '{}' at row {}",
                            feature_names[j],
                            i + 1
                        )));
                    }
                }
                ColumnKind::Categorical { levels } => {
                    let k = levels.len();
                    if k < 2 {
                        return Err(RfxError::data(format!(
                            "categorical column '{}' needs at least 2 levels",
                            feature_names[j]
                        )));
                    }
                    if k > MAX_CATEGORICAL_LEVELS {
                        return Err(RfxError::TooManyLevels {
                            feature: j,
                            levels: k,
                        });
                    }
                    if let Some(i) = col
                        .iter()
                        .position(|&v| v < 0.0 || v.fract() != 0.0 || v as usize >= k)
                    {
                        return Err(RfxError::data(format!(
                            "invalid level code {} in column '{}' at row {}",
                            col[i],
                            feature_names[j],
                            i + 1
                        )));
                    }
                }
            }
        }
        Ok(Dataset {
            n,
            feature_names,
            columns,
            values,
            labels,
            class_names,
        })
    }

    /// Reads a comma-separated file with a header row.
    ///
    /// Columns absent from `schema` are rejected, as are schema entries naming
    /// columns the file lacks. Empty cells are rejected with their row and
    /// column (rows are 1-based and count data rows only).
    pub fn load_csv(path: impl AsRef<Path>, schema: &Schema, label_column: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path.as_ref())?;
        let header: Vec<String> = reader
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        Self::from_records(&header, reader.records(), schema, label_column)
    }

    /// Reads a CSV whose columns are all numeric apart from `label_column`.
    pub fn load_csv_numeric(path: impl AsRef<Path>, label_column: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path.as_ref())?;
        let header: Vec<String> = reader
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let schema = Schema::all_numeric(&header, label_column);
        Self::from_records(&header, reader.records(), &schema, label_column)
    }

    /// Parses CSV text; same contract as [`Dataset::load_csv`].
    pub fn from_csv_str(text: &str, schema: &Schema, label_column: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        Self::from_records(&header, reader.records(), schema, label_column)
    }

    fn from_records<I>(
        header: &[String],
        records: I,
        schema: &Schema,
        label_column: &str,
    ) -> Result<Self>
    where
        I: Iterator<Item = std::result::Result<csv::StringRecord, csv::Error>>,
    {
        let label_idx = header
            .iter()
            .position(|h| h == label_column)
            .ok_or_else(|| {
                RfxError::data(format!("label column '{label_column}' not found in header"))
            })?;
        for spec in &schema.columns {
            if !header.contains(&spec.column) {
                return Err(RfxError::data(format!(
                    "schema names unknown column '{}'",
                    spec.column
                )));
            }
        }

        struct Builder {
            name: String,
            source: usize,
            categorical: Option<LevelCoder>,
            values: Vec<f64>,
        }

        let mut builders = Vec::new();
        for (idx, name) in header.iter().enumerate() {
            if idx == label_idx {
                continue;
            }
            let spec = schema.find(name).ok_or_else(|| {
                RfxError::data(format!("column '{name}' is not declared in the schema"))
            })?;
            let categorical = match spec.kind {
                SchemaKind::Numeric => None,
                SchemaKind::Categorical => Some(LevelCoder::new(spec.levels.clone())),
                SchemaKind::Label => return Err(RfxError::data(format!(
                    "column '{name}' is declared as label but the label column is '{label_column}'"
                ))),
            };
            builders.push(Builder {
                name: name.clone(),
                source: idx,
                categorical,
                values: Vec::new(),
            });
        }

        let mut label_coder = LevelCoder::new(None);
        let mut labels = Vec::new();
        for (row, record) in records.enumerate() {
            let record = record?;
            let row_no = row + 1;
            if record.len() != header.len() {
                return Err(RfxError::data(format!(
                    "row {row_no} has {} fields, header has {}",
                    record.len(),
                    header.len()
                )));
            }
            let label = record[label_idx].trim();
            if label.is_empty() {
                return Err(RfxError::data(format!(
                    "missing value at row {row_no}, column '{label_column}'"
                )));
            }
            labels.push(label_coder.code(label, row_no, label_column)?);
            for b in &mut builders {
                let token = record[b.source].trim();
                if token.is_empty() {
                    return Err(RfxError::data(format!(
                        "missing value at row {row_no}, column '{}'",
                        b.name
                    )));
                }
                let v = match &mut b.categorical {
                    Some(coder) => coder.code(token, row_no, &b.name)? as f64,
                    None => {
                        let v: f64 = token.parse().map_err(|_| {
                            RfxError::data(format!(
                                "non-numeric token '{token}' at row {row_no}, column '{}'",
                                b.name
                            ))
                        })?;
                        if !v.is_finite() {
                            return Err(RfxError::data(format!(
                                "non-finite value '{token}' at row {row_no}, column '{}'",
                                b.name
                            )));
                        }
                        v
                    }
                };
                b.values.push(v);
            }
        }

        let n = labels.len();
        let mut names = Vec::with_capacity(builders.len());
        let mut kinds = Vec::with_capacity(builders.len());
        let mut values = Vec::with_capacity(n * builders.len());
        for b in builders {
            names.push(b.name);
            kinds.push(match b.categorical {
                None => ColumnKind::Numeric,
                Some(coder) => ColumnKind::Categorical {
                    levels: coder.into_levels(),
                },
            });
            values.extend(b.values);
        }
        Dataset::new(names, kinds, values, labels, label_coder.into_levels())
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn columns(&self) -> &[ColumnKind] {
        &self.columns
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.values[j * self.n..(j + 1) * self.n]
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.n + i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Row `i` as a dense feature vector.
    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.n_features()).map(|j| self.value(i, j)).collect()
    }

    /// Copy with one extra numeric column appended.
    pub fn with_extra_column(&self, name: &str, column: Vec<f64>) -> Result<Self> {
        if column.len() != self.n {
            return Err(RfxError::data(
                "appended column length differs from sample count",
            ));
        }
        let mut names = self.feature_names.clone();
        names.push(name.to_string());
        let mut kinds = self.columns.clone();
        kinds.push(ColumnKind::Numeric);
        let mut values = self.values.clone();
        values.extend(column);
        Dataset::new(
            names,
            kinds,
            values,
            self.labels.clone(),
            self.class_names.clone(),
        )
    }
}

/// Assigns dense codes by first appearance. Declared levels that never occur
/// are appended after the observed ones, in declared order.
struct LevelCoder {
    declared: Option<Vec<String>>,
    codes: HashMap<String, u32>,
    order: Vec<String>,
}

impl LevelCoder {
    fn new(declared: Option<Vec<String>>) -> Self {
        LevelCoder {
            declared,
            codes: HashMap::new(),
            order: Vec::new(),
        }
    }

    fn code(&mut self, token: &str, row: usize, column: &str) -> Result<u32> {
        if let Some(&c) = self.codes.get(token) {
            return Ok(c);
        }
        if let Some(declared) = &self.declared {
            if !declared.iter().any(|d| d == token) {
                return Err(RfxError::data(format!(
                    "undeclared level '{token}' at row {row}, column '{column}'"
                )));
            }
        }
        let c = self.order.len() as u32;
        self.codes.insert(token.to_string(), c);
        self.order.push(token.to_string());
        Ok(c)
    }

    fn into_levels(mut self) -> Vec<String> {
        if let Some(declared) = self.declared.take() {
            for level in declared {
                if !self.codes.contains_key(&level) {
                    self.codes.insert(level.clone(), self.order.len() as u32);
                    self.order.push(level);
                }
            }
        }
        self.order
    }
}
