//! CSV ingestion with ordinal encoding of categorical columns.
//!
//! Categorical feature values get codes in order of first appearance. Class
//! labels are coded in sorted order (numerically when every label parses as a
//! number), so `0/1` and `negative/positive` style targets map the positive
//! class to 1. Missing cells are a hard error.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::error::{NcartError, Result};
use crate::matrix::Matrix;
use crate::model::Targets;

/// Code given to categories never seen while loading the training data.
pub const UNSEEN_CODE: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    /// Feature columns, in matrix column order.
    pub features: Vec<String>,
    pub target: String,
    pub categorical: Vec<String>,
    pub task: Task,
}

impl Schema {
    pub fn is_categorical(&self, column: &str) -> bool {
        self.categorical.iter().any(|c| c == column)
    }
}

/// Per categorical column, the category strings indexed by code.
pub type Categories = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes { codes: Vec<usize>, names: Vec<String> },
    Values(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Labels,
    pub schema: Schema,
    pub categories: Categories,
}

impl Dataset {
    pub fn from_parts(x: Matrix, y: Labels, schema: Schema) -> Result<Self> {
        let len = match &y {
            Labels::Classes { codes, names } => {
                if let Some(&bad) = codes.iter().find(|&&c| c >= names.len()) {
                    return Err(NcartError::InvalidInput(format!("class code {bad} without a label name")));
                }
                codes.len()
            }
            Labels::Values(v) => v.rows(),
        };
        if len != x.rows() {
            return Err(NcartError::InvalidInput(format!("{} feature rows but {len} targets", x.rows())));
        }
        if schema.features.len() != x.cols() {
            return Err(NcartError::InvalidInput(format!(
                "schema lists {} features, matrix has {}",
                schema.features.len(),
                x.cols()
            )));
        }
        Ok(Self {
            x,
            y,
            schema,
            categories: Categories::new(),
        })
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    /// Network output width: the class count, or the number of target columns.
    pub fn outputs(&self) -> usize {
        match &self.y {
            Labels::Classes { names, .. } => names.len(),
            Labels::Values(v) => v.cols(),
        }
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match &self.y {
            Labels::Classes { codes, .. } => Some(codes),
            Labels::Values(_) => None,
        }
    }

    pub fn targets(&self) -> Targets<'_> {
        match &self.y {
            Labels::Classes { codes, .. } => Targets::Classes(codes),
            Labels::Values(v) => Targets::Values(v),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let y = match &self.y {
            Labels::Classes { codes, names } => Labels::Classes {
                codes: rows.iter().map(|&r| codes[r]).collect(),
                names: names.clone(),
            },
            Labels::Values(v) => Labels::Values(v.select_rows(rows)),
        };
        Dataset {
            x: self.x.select_rows(rows),
            y,
            schema: self.schema.clone(),
            categories: self.categories.clone(),
        }
    }
}

fn data_err(path: &Path, line: usize, column: &str, message: impl Into<String>) -> NcartError {
    NcartError::Data {
        path: path.display().to_string(),
        line,
        column: column.to_string(),
        message: message.into(),
    }
}

struct Table {
    header: Vec<String>,
    /// Data records with their 1-based line numbers (the header is line 1).
    records: Vec<(usize, csv::StringRecord)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(data_err(path, 1, "", "missing header row"));
    }
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            data_err(path, line, "", e.to_string())
        })?;
        let line = rec.position().map_or(records.len() + 2, |p| p.line() as usize);
        records.push((line, rec));
    }
    Ok(Table { header, records })
}

fn column_index(table: &Table, path: &Path, name: &str) -> Result<usize> {
    table
        .header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| data_err(path, 1, name, "column not found in header"))
}

fn cell<'r>(rec: &'r csv::StringRecord, idx: usize, line: usize, path: &Path, column: &str) -> Result<&'r str> {
    let v = rec.get(idx).map(str::trim).unwrap_or("");
    if v.is_empty() {
        return Err(data_err(path, line, column, "missing value (missing values are not supported)"));
    }
    Ok(v)
}

fn parse_number(v: &str, line: usize, path: &Path, column: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(data_err(path, line, column, format!("cannot parse `{v}` as a finite number"))),
    }
}

/// Sorted distinct labels; numeric order when all of them are numbers.
fn class_names(raw: &[String]) -> Vec<String> {
    let mut names: Vec<String> = raw.to_vec();
    names.sort();
    names.dedup();
    let numeric: Option<Vec<f64>> = names.iter().map(|n| n.parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(names).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        names = pairs.into_iter().map(|p| p.1).collect();
    }
    names
}

/// Loads a headered CSV. Every column except the target is a feature unless
/// `features` restricts the set.
pub fn load_csv(
    path: impl AsRef<Path>,
    target: &str,
    task: Task,
    categorical: &[String],
    features: Option<&[String]>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let table = read_table(path)?;
    let target_idx = column_index(&table, path, target)?;
    let feature_names: Vec<String> = match features {
        Some(f) => f.to_vec(),
        None => table.header.iter().filter(|h| *h != target).cloned().collect(),
    };
    if feature_names.iter().any(|f| f == target) {
        return Err(NcartError::Config(format!("target `{target}` is also listed as a feature")));
    }
    if feature_names.is_empty() {
        return Err(NcartError::Config("no feature columns".into()));
    }
    for c in categorical {
        if !feature_names.contains(c) {
            return Err(data_err(path, 1, c, "categorical column is not a feature column"));
        }
    }
    let idx: Vec<usize> = feature_names
        .iter()
        .map(|f| column_index(&table, path, f))
        .collect::<Result<_>>()?;
    if table.records.is_empty() {
        return Err(NcartError::InvalidInput(format!("{}: no data rows", path.display())));
    }

    let mut categories = Categories::new();
    let mut x = Matrix::zeros(table.records.len(), feature_names.len());
    let mut raw_targets = Vec::with_capacity(table.records.len());
    for (r, (line, rec)) in table.records.iter().enumerate() {
        for (j, (&ci, name)) in idx.iter().zip(&feature_names).enumerate() {
            let v = cell(rec, ci, *line, path, name)?;
            let code = if categorical.contains(name) {
                let dict = categories.entry(name.clone()).or_default();
                let k = dict.iter().position(|c| c == v).unwrap_or_else(|| {
                    dict.push(v.to_string());
                    dict.len() - 1
                });
                k as f64
            } else {
                parse_number(v, *line, path, name)?
            };
            x.row_mut(r)[j] = code;
        }
        raw_targets.push((*line, cell(rec, target_idx, *line, path, target)?.to_string()));
    }

    let y = if task.is_classification() {
        let labels: Vec<String> = raw_targets.iter().map(|t| t.1.clone()).collect();
        let names = class_names(&labels);
        if names.len() < 2 {
            return Err(NcartError::InvalidInput(format!("target `{target}` has a single class")));
        }
        if task == Task::Binclass && names.len() != 2 {
            return Err(NcartError::InvalidInput(format!(
                "binclass target `{target}` has {} classes",
                names.len()
            )));
        }
        let codes = labels.iter().map(|l| names.iter().position(|n| n == l).expect("label collected")).collect();
        Labels::Classes { codes, names }
    } else {
        let values = raw_targets
            .iter()
            .map(|(line, v)| parse_number(v, *line, path, target))
            .collect::<Result<Vec<f64>>>()?;
        Labels::Values(Matrix::from_vec(values.len(), 1, values)?)
    };

    Ok(Dataset {
        x,
        y,
        schema: Schema {
            features: feature_names,
            target: target.to_string(),
            categorical: categorical.to_vec(),
            task,
        },
        categories,
    })
}

/// Encodes raw string rows (in schema feature order) with training-time
/// dictionaries. Returns the matrix and the number of unseen categories,
/// which are coded as [`UNSEEN_CODE`].
pub fn encode_with(schema: &Schema, categories: &Categories, rows: &[Vec<String>]) -> Result<(Matrix, usize)> {
    let n = schema.features.len();
    let mut x = Matrix::zeros(rows.len(), n);
    let mut unseen = 0;
    for (r, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(NcartError::InvalidInput(format!("row {r} has {} cells, expected {n}", row.len())));
        }
        for (j, (v, name)) in row.iter().zip(&schema.features).enumerate() {
            let v = v.trim();
            if v.is_empty() {
                return Err(NcartError::InvalidInput(format!("row {r}, column `{name}`: missing value")));
            }
            x.row_mut(r)[j] = if schema.is_categorical(name) {
                match categories.get(name).and_then(|d| d.iter().position(|c| c == v)) {
                    Some(k) => k as f64,
                    None => {
                        unseen += 1;
                        UNSEEN_CODE
                    }
                }
            } else {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| NcartError::InvalidInput(format!("row {r}, column `{name}`: cannot parse `{v}`")))?
            };
        }
    }
    Ok((x, unseen))
}

/// Reads the schema's feature columns from a CSV (extra columns, including
/// the target, are ignored) and encodes them with [`encode_with`].
pub fn load_features(path: impl AsRef<Path>, schema: &Schema, categories: &Categories) -> Result<(Matrix, usize)> {
    let path = path.as_ref();
    let table = read_table(path)?;
    let idx: Vec<usize> = schema
        .features
        .iter()
        .map(|f| column_index(&table, path, f))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(table.records.len());
    for (line, rec) in &table.records {
        let row = idx
            .iter()
            .zip(&schema.features)
            .map(|(&i, name)| cell(rec, i, *line, path, name).map(str::to_string))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    encode_with(schema, categories, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn categorical_codes_follow_first_appearance() {
        let f = write_csv("c,v,y\nb,1.5,0\na,2,1\nb,-3,1\n");
        let d = load_csv(f.path(), "y", Task::Binclass, &["c".into()], None).unwrap();
        assert_eq!(d.x.column(0), vec![0.0, 1.0, 0.0]);
        assert_eq!(d.x.column(1), vec![1.5, 2.0, -3.0]);
        assert_eq!(d.categories["c"], vec!["b", "a"]);
        assert_eq!(d.classes().unwrap(), &[0, 1, 1]);
    }

    #[test]
    fn class_labels_are_sorted() {
        let f = write_csv("x,y\n1,tested_positive\n2,tested_negative\n3,tested_positive\n");
        let d = load_csv(f.path(), "y", Task::Binclass, &[], None).unwrap();
        assert_eq!(d.classes().unwrap(), &[1, 0, 1]);
        let f = write_csv("x,y\n1,10\n2,9\n3,2\n");
        let d = load_csv(f.path(), "y", Task::Multiclass, &[], None).unwrap();
        assert_eq!(d.classes().unwrap(), &[2, 1, 0]);
    }

    #[test]
    fn missing_cell_names_row_and_column() {
        let f = write_csv("a,b,y\n1,2,0\n3,,1\n");
        let err = load_csv(f.path(), "y", Task::Binclass, &[], None).unwrap_err();
        match err {
            NcartError::Data { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let f = write_csv("a,y\nfoo,0\n1,1\n");
        assert!(load_csv(f.path(), "y", Task::Binclass, &[], None).is_err());
        let f = write_csv("a,y\n1,0\n2,0\n");
        assert!(load_csv(f.path(), "y", Task::Binclass, &[], None).is_err());
        let f = write_csv("a,y\n1,0\n2,1\n");
        assert!(load_csv(f.path(), "z", Task::Binclass, &[], None).is_err());
        assert!(load_csv(f.path(), "y", Task::Binclass, &["q".into()], None).is_err());
    }

    #[test]
    fn encode_with_uses_training_codes_and_sentinel() {
        let f = write_csv("c,v,y\nb,1,0\na,2,1\n");
        let d = load_csv(f.path(), "y", Task::Binclass, &["c".into()], None).unwrap();
        let rows = vec![vec!["a".to_string(), "5".to_string()], vec!["zz".to_string(), "1".to_string()]];
        let (x, unseen) = encode_with(&d.schema, &d.categories, &rows).unwrap();
        assert_eq!(x.column(0), vec![1.0, UNSEEN_CODE]);
        assert_eq!(unseen, 1);
        let (again, unseen) = load_features(f.path(), &d.schema, &d.categories).unwrap();
        assert_eq!(again, d.x);
        assert_eq!(unseen, 0);
    }
}
