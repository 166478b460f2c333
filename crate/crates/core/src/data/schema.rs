use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EdkError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub vocab_size: usize,
}

/// Field layout of a dataset.
///
/// History ids, when present, index the vocabulary of `history_field`
/// (the candidate-item field), so behavior sequences and the target item
/// share embeddings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub fields: Vec<FieldSpec>,
    #[serde(default)]
    pub has_history: bool,
    #[serde(default)]
    pub max_history_len: usize,
    #[serde(default)]
    pub history_field: Option<usize>,
}

impl DatasetSchema {
    /// Schema with fields named `field_0..field_{F-1}`.
    pub fn with_vocab_sizes(vocab_sizes: &[usize]) -> Self {
        DatasetSchema {
            fields: vocab_sizes
                .iter()
                .enumerate()
                .map(|(i, &v)| FieldSpec {
                    name: format!("field_{i}"),
                    vocab_size: v,
                })
                .collect(),
            has_history: false,
            max_history_len: 0,
            history_field: None,
        }
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.vocab_size).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields.len() < 2 {
            return Err(EdkError::Config(format!(
                "schema needs at least 2 fields, got {}",
                self.fields.len()
            )));
        }
        let mut seen = HashSet::new();
        for f in &self.fields {
            if f.vocab_size == 0 {
                return Err(EdkError::Config(format!("field {} has vocab size 0", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(EdkError::Config(format!("duplicate field name {}", f.name)));
            }
            if matches!(f.name.as_str(), "label" | "timestamp" | "history") {
                return Err(EdkError::Config(format!("reserved field name {}", f.name)));
            }
        }
        if self.has_history {
            match self.history_field {
                Some(h) if h < self.fields.len() => {}
                _ => {
                    return Err(EdkError::Config(
                        "has_history requires a valid history_field index".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Vocabulary size of history ids.
    pub fn history_vocab(&self) -> Option<usize> {
        self.history_field.map(|h| self.fields[h].vocab_size)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    /// Hex SHA-256 of the compact JSON form; identifies the schema a model was built for.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("schema serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let schema: DatasetSchema = serde_json::from_str(&text)
            .map_err(|e| EdkError::Config(format!("invalid schema file: {e}")))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}
