//! Model files: one JSON document holding the configuration, schema,
//! category dictionaries and every parameter.
//!
//! Floats are written in shortest round-trip form, so a reloaded model
//! reproduces predictions bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::NcartConfig;
use crate::data::{Categories, Dataset, Labels, Schema};
use crate::error::{NcartError, Result};
use crate::model::NcartModel;

pub const FORMAT_VERSION: u32 = 1;

/// Top-level sections in file order.
pub const SECTIONS: [&str; 7] = ["format_version", "config", "schema", "categories", "class_names", "seed", "model"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub config: NcartConfig,
    pub schema: Schema,
    pub categories: Categories,
    /// Class label strings by class index; empty for regression.
    pub class_names: Vec<String>,
    pub seed: u64,
    pub model: NcartModel,
}

impl ModelFile {
    pub fn new(model: NcartModel, config: &NcartConfig, data: &Dataset) -> Self {
        let class_names = match &data.y {
            Labels::Classes { names, .. } => names.clone(),
            Labels::Values(_) => Vec::new(),
        };
        Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            schema: data.schema.clone(),
            categories: data.categories.clone(),
            class_names,
            seed: config.seed,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| NcartError::ModelFile(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) if e.is_eof() => return Err(truncation_error(text)),
            Err(e) => return Err(NcartError::ModelFile(format!("malformed JSON: {e}"))),
        };
        let obj = value
            .as_object()
            .ok_or_else(|| NcartError::ModelFile("top level is not an object".into()))?;
        if let Some(missing) = SECTIONS.iter().find(|s| !obj.contains_key(**s)) {
            return Err(NcartError::ModelFile(format!("missing section `{missing}`")));
        }
        let version = obj["format_version"].as_u64();
        if version != Some(FORMAT_VERSION as u64) {
            return Err(NcartError::ModelFile(format!(
                "unsupported format version {}, expected {FORMAT_VERSION}",
                obj["format_version"]
            )));
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| NcartError::ModelFile(e.to_string()))?;
        file.model.validate()?;
        if file.schema.features.len() != file.model.n_features {
            return Err(NcartError::ModelFile(format!(
                "schema lists {} features, model expects {}",
                file.schema.features.len(),
                file.model.n_features
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Names the section a truncated document stops in: the last top-level key
/// (two-space indented, as written by [`ModelFile::to_json`]) in the text.
fn truncation_error(text: &str) -> NcartError {
    let started = SECTIONS.iter().rposition(|s| text.contains(&format!("\n  \"{s}\":")));
    match started {
        Some(i) => NcartError::ModelFile(format!(
            "truncated file: section `{}` is incomplete{}",
            SECTIONS[i],
            match &SECTIONS[i + 1..] {
                [] => String::new(),
                rest => format!(" and {} missing", rest.iter().map(|s| format!("`{s}`")).collect::<Vec<_>>().join(", ")),
            }
        )),
        None => NcartError::ModelFile(format!("truncated file: missing section `{}`", SECTIONS[0])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Task;
    use crate::matrix::Matrix;

    fn sample() -> (ModelFile, Matrix) {
        let config = NcartConfig {
            trees: 8,
            sel_dim: 2,
            hidden: Some(4),
            ..NcartConfig::default()
        };
        let x = Matrix::from_fn(12, 3, |r, c| ((r * 7 + c * 3) % 11) as f64 / 3.0 - 1.7);
        let data = Dataset::from_parts(
            x.clone(),
            Labels::Classes {
                codes: (0..12).map(|i| i % 2).collect(),
                names: vec!["no".into(), "yes".into()],
            },
            Schema {
                features: vec!["a".into(), "b".into(), "c".into()],
                target: "y".into(),
                categorical: vec![],
                task: Task::Binclass,
            },
        )
        .unwrap();
        let (model, _) = crate::train::fit(&data, &NcartConfig { epochs: 3, ..config.clone() }).unwrap();
        (ModelFile::new(model, &config, &data), x)
    }

    #[test]
    fn round_trip_preserves_predictions_bitwise() {
        let (file, x) = sample();
        let back = ModelFile::from_json(&file.to_json().unwrap()).unwrap();
        assert_eq!(back, file);
        let p1 = file.model.predict(&x).unwrap();
        let p2 = back.model.predict(&x).unwrap();
        assert!(p1.as_slice().iter().zip(p2.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_file_names_the_section() {
        let (file, _) = sample();
        let text = file.to_json().unwrap();
        let cut = &text[..text.find("\"model\":").unwrap() + 40];
        let msg = ModelFile::from_json(cut).unwrap_err().to_string();
        assert!(msg.contains("`model`"), "{msg}");
        let cut = &text[..text.find("\"schema\":").unwrap() + 12];
        let msg = ModelFile::from_json(cut).unwrap_err().to_string();
        assert!(msg.contains("`schema` is incomplete"), "{msg}");
    }

    #[test]
    fn missing_section_and_version_are_reported() {
        let (file, _) = sample();
        let mut v = serde_json::to_value(&file).unwrap();
        v.as_object_mut().unwrap().remove("categories");
        let msg = ModelFile::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(msg.contains("missing section `categories`"), "{msg}");
        let mut v = serde_json::to_value(&file).unwrap();
        v["format_version"] = 99.into();
        let msg = ModelFile::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(msg.contains("version"), "{msg}");
    }
}
