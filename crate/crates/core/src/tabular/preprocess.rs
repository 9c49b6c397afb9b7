use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ColumnKind, FeatureTable, TabularError, Value};
use crate::autodiff::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Columns missing in strictly more than this fraction of rows are dropped.
    pub missing_threshold: f64,
    /// Columns that gain a `<name>_missing` indicator.
    pub indicator_columns: Vec<String>,
    /// Also add indicators for every retained column with any missing cell.
    pub indicate_all: bool,
    /// Column defining imputation strata. Only global medians are
    /// implemented; setting this is rejected.
    pub stratum_column: Option<String>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            missing_threshold: 0.8,
            indicator_columns: Vec::new(),
            indicate_all: false,
            stratum_column: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub name: String,
    pub missing_fraction: f64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedColumn {
    Continuous {
        name: String,
        median: f64,
        mean: f64,
        std: f64,
        indicator: bool,
    },
    Categorical {
        name: String,
        mode: String,
        vocabulary: Vec<String>,
        indicator: bool,
    },
    Binary {
        name: String,
        mode: f64,
        indicator: bool,
    },
}

impl FittedColumn {
    pub fn name(&self) -> &str {
        match self {
            FittedColumn::Continuous { name, .. }
            | FittedColumn::Categorical { name, .. }
            | FittedColumn::Binary { name, .. } => name,
        }
    }

    fn indicator(&self) -> bool {
        match self {
            FittedColumn::Continuous { indicator, .. }
            | FittedColumn::Categorical { indicator, .. }
            | FittedColumn::Binary { indicator, .. } => *indicator,
        }
    }

    fn width(&self) -> usize {
        match self {
            FittedColumn::Categorical { vocabulary, .. } => vocabulary.len(),
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessorModel {
    pub dropped: Vec<DroppedColumn>,
    pub columns: Vec<FittedColumn>,
    /// Retained columns (one-hot expanded) in input order, then indicators.
    pub output_names: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Fully imputed.
    Neural,
    /// Continuous missing cells kept as NaN for the tree learner.
    Gbdt,
}

/// Dense row-major matrix; NaN marks a preserved missing cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    pub row_ids: Vec<String>,
    pub rows: usize,
    pub cols: usize,
    /// Written with `null` for NaN, since JSON has no NaN.
    #[serde(with = "nan_as_null")]
    pub data: Vec<f64>,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| (!x.is_nan()).then_some(*x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<Option<f64>>::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

impl DesignMatrix {
    pub fn new(names: Vec<String>, row_ids: Vec<String>, data: Vec<f64>) -> DesignMatrix {
        let (rows, cols) = (row_ids.len(), names.len());
        assert_eq!(rows * cols, data.len(), "design matrix shape");
        DesignMatrix {
            names,
            row_ids,
            rows,
            cols,
            data,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> DesignMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        DesignMatrix::new(
            self.names.clone(),
            idx.iter().map(|&i| self.row_ids[i].clone()).collect(),
            data,
        )
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.data.clone()).expect("nonempty design matrix")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["row_id".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).expect("in-memory csv");
        for i in 0..self.rows {
            let mut rec = vec![self.row_ids[i].clone()];
            rec.extend(
                self.row(i)
                    .iter()
                    .map(|v| if v.is_nan() { "NA".to_string() } else { format!("{v}") }),
            );
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        sorted[n / 2 - 1] / 2.0 + sorted[n / 2] / 2.0
    }
}

/// Fits imputation, scaling and encoding statistics. Pass the training rows
/// only.
pub fn fit_preprocessor(table: &FeatureTable, config: &PreprocessConfig) -> Result<PreprocessorModel, TabularError> {
    if table.rows() == 0 {
        return Err(TabularError::NoRows);
    }
    table.validate()?;
    if let Some(s) = &config.stratum_column {
        return Err(TabularError::InvalidConfig(format!(
            "within-stratum imputation by {s:?} is not implemented; global training medians are used"
        )));
    }
    if !(0.0..=1.0).contains(&config.missing_threshold) {
        return Err(TabularError::InvalidConfig("missing_threshold must lie in [0, 1]".into()));
    }
    for name in &config.indicator_columns {
        if table.column_index(name).is_none() {
            return Err(TabularError::MissingColumn(name.clone()));
        }
    }
    let mut dropped = Vec::new();
    let mut columns = Vec::new();
    for (k, spec) in table.columns.iter().enumerate() {
        let frac = table.missing_fraction(k);
        let drop = |reason: &str| DroppedColumn {
            name: spec.name.clone(),
            missing_fraction: frac,
            reason: reason.to_string(),
        };
        if frac > config.missing_threshold {
            dropped.push(drop("missingness above threshold"));
            continue;
        }
        let observed: Vec<&Value> = table.values[k].iter().filter(|v| !v.is_missing()).collect();
        if observed.is_empty() {
            dropped.push(drop("no observed values"));
            continue;
        }
        let indicator = config.indicator_columns.contains(&spec.name) || (config.indicate_all && frac > 0.0);
        let name = spec.name.clone();
        match spec.kind {
            ColumnKind::Continuous => {
                let mut xs: Vec<f64> = observed.iter().filter_map(|v| v.as_num()).collect();
                xs.sort_by(f64::total_cmp);
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                if std == 0.0 {
                    log::info!("dropping zero-variance column {name}");
                    dropped.push(drop("zero variance"));
                    continue;
                }
                columns.push(FittedColumn::Continuous {
                    name,
                    median: median(&xs),
                    mean,
                    std,
                    indicator,
                });
            }
            ColumnKind::Categorical => {
                let mut vocabulary: Vec<String> = Vec::new();
                let mut counts: Vec<usize> = Vec::new();
                for v in &observed {
                    if let Value::Cat(s) = v {
                        match vocabulary.iter().position(|c| c == s) {
                            Some(i) => counts[i] += 1,
                            None => {
                                vocabulary.push(s.clone());
                                counts.push(1);
                            }
                        }
                    }
                }
                let best = (0..counts.len()).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
                columns.push(FittedColumn::Categorical {
                    name,
                    mode: vocabulary[best].clone(),
                    vocabulary,
                    indicator,
                });
            }
            ColumnKind::Binary => {
                let ones = observed.iter().filter(|v| v.as_num() == Some(1.0)).count();
                let mode = if 2 * ones > observed.len() { 1.0 } else { 0.0 };
                columns.push(FittedColumn::Binary { name, mode, indicator });
            }
        }
    }
    if columns.is_empty() {
        return Err(TabularError::AllColumnsDropped);
    }
    let mut output_names = Vec::new();
    for c in &columns {
        match c {
            FittedColumn::Categorical { name, vocabulary, .. } => {
                output_names.extend(vocabulary.iter().map(|v| format!("{name}={v}")))
            }
            _ => output_names.push(c.name().to_string()),
        }
    }
    for c in columns.iter().filter(|c| c.indicator()) {
        output_names.push(format!("{}_missing", c.name()));
    }
    Ok(PreprocessorModel {
        dropped,
        columns,
        output_names,
    })
}

/// Cells the model could not encode faithfully.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApplyAudit {
    /// Unseen category occurrences per categorical column.
    pub unseen_categories: BTreeMap<String, usize>,
    pub imputed_cells: usize,
}

pub fn apply_preprocessor(
    model: &PreprocessorModel,
    table: &FeatureTable,
    target: Target,
) -> Result<DesignMatrix, TabularError> {
    Ok(apply_with_audit(model, table, target)?.0)
}

pub fn apply_with_audit(
    model: &PreprocessorModel,
    table: &FeatureTable,
    target: Target,
) -> Result<(DesignMatrix, ApplyAudit), TabularError> {
    let n = table.rows();
    let width = model.output_names.len();
    let sources: Vec<usize> = model
        .columns
        .iter()
        .map(|c| {
            table
                .column_index(c.name())
                .ok_or_else(|| TabularError::MissingColumn(c.name().to_string()))
        })
        .collect::<Result<_, _>>()?;
    let mut data = vec![0.0; n * width];
    let mut audit = ApplyAudit::default();
    let mut offset = 0;
    let mut ind = model.columns.iter().map(FittedColumn::width).sum::<usize>();
    for (c, &src) in model.columns.iter().zip(&sources) {
        let cells = &table.values[src];
        for (r, v) in cells.iter().enumerate() {
            let out = &mut data[r * width..(r + 1) * width];
            if v.is_missing() {
                audit.imputed_cells += 1;
            }
            match c {
                FittedColumn::Continuous { median, mean, std, .. } => {
                    out[offset] = match (v, target) {
                        (Value::Missing, Target::Gbdt) => f64::NAN,
                        (Value::Missing, Target::Neural) => (median - mean) / std,
                        (Value::Num(x), _) => (x - mean) / std,
                        (Value::Cat(_), _) => unreachable!("validated table"),
                    };
                }
                FittedColumn::Binary { mode, .. } => {
                    out[offset] = v.as_num().unwrap_or(*mode);
                }
                FittedColumn::Categorical {
                    name, mode, vocabulary, ..
                } => {
                    let cat = match v {
                        Value::Cat(s) => s,
                        _ => mode,
                    };
                    match vocabulary.iter().position(|x| x == cat) {
                        Some(i) => out[offset + i] = 1.0,
                        None => *audit.unseen_categories.entry(name.clone()).or_default() += 1,
                    }
                }
            }
            if c.indicator() && v.is_missing() {
                out[ind] = 1.0;
            }
        }
        offset += c.width();
        if c.indicator() {
            ind += 1;
        }
    }
    Ok((
        DesignMatrix::new(model.output_names.clone(), table.row_ids.clone(), data),
        audit,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::ColumnSpec;

    fn table(kind: ColumnKind, cells: Vec<Value>) -> FeatureTable {
        let n = cells.len();
        FeatureTable {
            columns: vec![ColumnSpec { name: "c".into(), kind }],
            values: vec![cells],
            row_ids: (0..n).map(|i| format!("r{i}")).collect(),
            labels: None,
        }
    }

    #[test]
    fn continuous_statistics_over_observed() {
        let t = table(
            ColumnKind::Continuous,
            vec![Value::Num(1.0), Value::Num(2.0), Value::Missing, Value::Num(3.0)],
        );
        let m = fit_preprocessor(&t, &PreprocessConfig::default()).unwrap();
        let FittedColumn::Continuous { median, mean, std, .. } = &m.columns[0] else {
            unreachable!()
        };
        assert_eq!((*median, *mean), (2.0, 2.0));
        assert!((std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn categorical_mode_and_vocabulary() {
        let t = table(
            ColumnKind::Categorical,
            vec![Value::Cat("A".into()), Value::Cat("A".into()), Value::Cat("B".into())],
        );
        let m = fit_preprocessor(&t, &PreprocessConfig::default()).unwrap();
        assert_eq!(m.output_names, vec!["c=A", "c=B"]);
        let FittedColumn::Categorical { mode, .. } = &m.columns[0] else {
            unreachable!()
        };
        assert_eq!(mode, "A");
        let unseen = table(ColumnKind::Categorical, vec![Value::Cat("C".into())]);
        let (x, audit) = apply_with_audit(&m, &unseen, Target::Neural).unwrap();
        assert_eq!(x.row(0), &[0.0, 0.0]);
        assert_eq!(audit.unseen_categories.get("c"), Some(&1));
    }

    #[test]
    fn constant_column_only_is_rejected() {
        let t = table(ColumnKind::Continuous, vec![Value::Num(4.0); 5]);
        assert!(matches!(
            fit_preprocessor(&t, &PreprocessConfig::default()),
            Err(TabularError::AllColumnsDropped)
        ));
    }

    #[test]
    fn stratum_hook_is_declared_unsupported() {
        let t = table(ColumnKind::Binary, vec![Value::Num(0.0), Value::Num(1.0)]);
        let cfg = PreprocessConfig {
            stratum_column: Some("c".into()),
            ..PreprocessConfig::default()
        };
        assert!(matches!(fit_preprocessor(&t, &cfg), Err(TabularError::InvalidConfig(_))));
    }
}
