//! Clinical feature tables, the fitted preprocessing recipe that turns them
//! into design matrices, and a synthetic cohort generator.

mod cohort;
mod preprocess;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use cohort::{synth_cohort, CohortSpec, SIGNAL_FEATURES};
pub use preprocess::{
    apply_preprocessor, apply_with_audit, fit_preprocessor, ApplyAudit, DesignMatrix, DroppedColumn, FittedColumn,
    PreprocessConfig, PreprocessorModel, Target,
};

use crate::split::{assign_splits, Split, SplitError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Categorical,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Missing,
    Num(f64),
    Cat(String),
}

impl Value {
    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(v) => Some(*v),
            _ => None,
        }
    }
}

/// Sidecar schema describing a table's columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub id_column: String,
    pub label_column: Option<String>,
    pub columns: Vec<ColumnSpec>,
}

/// Column-major table with explicit missing cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub columns: Vec<ColumnSpec>,
    /// `values[column][row]`
    pub values: Vec<Vec<Value>>,
    pub row_ids: Vec<String>,
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, thiserror::Error)]
pub enum TabularError {
    #[error("table has no rows")]
    NoRows,
    #[error("every column was dropped")]
    AllColumnsDropped,
    #[error("missing required column {0:?}")]
    MissingColumn(String),
    #[error("duplicate row id {0:?}")]
    DuplicateRowId(String),
    #[error("row {row}, column {column:?}: {message}")]
    BadCell { row: usize, column: String, message: String },
    #[error("table is not rectangular: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn is_missing_token(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t == "NA"
}

impl FeatureTable {
    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn validate(&self) -> Result<(), TabularError> {
        let n = self.rows();
        if self.values.len() != self.columns.len() {
            return Err(TabularError::Shape("column count differs from schema".into()));
        }
        for (c, col) in self.columns.iter().zip(&self.values) {
            if col.len() != n {
                return Err(TabularError::Shape(format!("column {} has {} cells for {n} rows", c.name, col.len())));
            }
            for (row, v) in col.iter().enumerate() {
                let ok = match (c.kind, v) {
                    (_, Value::Missing) => true,
                    (ColumnKind::Continuous, Value::Num(x)) => x.is_finite(),
                    (ColumnKind::Binary, Value::Num(x)) => *x == 0.0 || *x == 1.0,
                    (ColumnKind::Categorical, Value::Cat(_)) => true,
                    _ => false,
                };
                if !ok {
                    return Err(TabularError::BadCell {
                        row,
                        column: c.name.clone(),
                        message: format!("{v:?} does not fit kind {:?}", c.kind),
                    });
                }
            }
        }
        if self.labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(TabularError::Shape("label count differs from rows".into()));
        }
        let mut seen = BTreeSet::new();
        for id in &self.row_ids {
            if !seen.insert(id) {
                return Err(TabularError::DuplicateRowId(id.clone()));
            }
        }
        Ok(())
    }

    /// Rows `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> FeatureTable {
        FeatureTable {
            columns: self.columns.clone(),
            values: self
                .values
                .iter()
                .map(|col| idx.iter().map(|&i| col[i].clone()).collect())
                .collect(),
            row_ids: idx.iter().map(|&i| self.row_ids[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Copy with the label column removed, for stages that must not see it.
    pub fn without_labels(&self) -> FeatureTable {
        FeatureTable {
            labels: None,
            ..self.clone()
        }
    }

    pub fn missing_fraction(&self, column: usize) -> f64 {
        let col = &self.values[column];
        col.iter().filter(|v| v.is_missing()).count() as f64 / col.len().max(1) as f64
    }

    pub fn schema(&self, id_column: &str, label_column: Option<&str>) -> TableSchema {
        TableSchema {
            id_column: id_column.to_string(),
            label_column: label_column.map(str::to_string),
            columns: self.columns.clone(),
        }
    }

    pub fn to_csv(&self, schema: &TableSchema) -> Result<String, TabularError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![schema.id_column.clone()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        if let (Some(l), Some(_)) = (&schema.label_column, &self.labels) {
            header.push(l.clone());
        }
        w.write_record(&header)?;
        for r in 0..self.rows() {
            let mut rec = vec![self.row_ids[r].clone()];
            for col in &self.values {
                rec.push(match &col[r] {
                    Value::Missing => "NA".to_string(),
                    Value::Num(v) => format!("{v}"),
                    Value::Cat(s) => s.clone(),
                });
            }
            if let (Some(_), Some(l)) = (&schema.label_column, &self.labels) {
                rec.push(l[r].to_string());
            }
            w.write_record(&rec)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv is utf-8"))
    }

    /// Parses a headed CSV; empty cells and `NA` are missing.
    pub fn from_csv(text: &str, schema: &TableSchema) -> Result<FeatureTable, TabularError> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let find = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| TabularError::MissingColumn(name.to_string()))
        };
        let id_at = find(&schema.id_column)?;
        let label_at = schema.label_column.as_deref().map(find).transpose()?;
        let col_at: Vec<usize> = schema.columns.iter().map(|c| find(&c.name)).collect::<Result<_, _>>()?;
        let mut table = FeatureTable {
            columns: schema.columns.clone(),
            values: vec![Vec::new(); schema.columns.len()],
            row_ids: Vec::new(),
            labels: label_at.map(|_| Vec::new()),
        };
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            table.row_ids.push(rec[id_at].to_string());
            for (k, (spec, &at)) in schema.columns.iter().zip(&col_at).enumerate() {
                let raw = &rec[at];
                let v = if is_missing_token(raw) {
                    Value::Missing
                } else {
                    match spec.kind {
                        ColumnKind::Categorical => Value::Cat(raw.trim().to_string()),
                        _ => Value::Num(raw.trim().parse().map_err(|_| TabularError::BadCell {
                            row,
                            column: spec.name.clone(),
                            message: format!("{raw:?} is not a number"),
                        })?),
                    }
                };
                table.values[k].push(v);
            }
            if let (Some(at), Some(labels)) = (label_at, table.labels.as_mut()) {
                labels.push(rec[at].trim().parse().map_err(|_| TabularError::BadCell {
                    row,
                    column: "label".into(),
                    message: format!("{:?} is not a class index", &rec[at]),
                })?);
            }
        }
        table.validate()?;
        Ok(table)
    }
}

/// Label-stratified split; see [`crate::split::assign_splits`].
pub fn stratified_split(labels: &[usize], fractions: &[f64], seed: u64) -> Result<Vec<Split>, TabularError> {
    Ok(assign_splits(labels, fractions, seed, true)?)
}
