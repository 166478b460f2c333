//! Dataset schema, CSV files, temporal splitting and synthetic logs.

mod encode;
mod io;
mod schema;
mod split;
mod synthetic;

pub use encode::{encode_raw, Encoded, Vocabulary};
pub use io::{load_dataset, read_dataset, write_dataset, write_dataset_to};
pub use schema::{DatasetSchema, FieldSpec};
pub use split::{temporal_split, SplitSpec, Splits};
pub use synthetic::{
    click_probability, generate_synthetic, HistoryConfig, Rule, RuleGenerator, SyntheticConfig,
};

use crate::error::{EdkError, Result};

/// One log row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceRecord {
    pub field_values: Vec<u32>,
    pub label: u8,
    pub timestamp: i64,
    /// Earlier positively-labeled item ids, oldest first.
    pub history: Vec<u32>,
}

impl InstanceRecord {
    pub fn check(&self, schema: &DatasetSchema) -> Result<()> {
        if self.field_values.len() != schema.num_fields() {
            return Err(EdkError::Data(format!(
                "record has {} fields, schema has {}",
                self.field_values.len(),
                schema.num_fields()
            )));
        }
        for (i, (&v, spec)) in self.field_values.iter().zip(&schema.fields).enumerate() {
            if v as usize >= spec.vocab_size {
                return Err(EdkError::Lookup {
                    field: i,
                    id: v,
                    vocab_size: spec.vocab_size,
                });
            }
        }
        if self.label > 1 {
            return Err(EdkError::Data(format!("label {} not in {{0, 1}}", self.label)));
        }
        if !self.history.is_empty() && !schema.has_history {
            return Err(EdkError::Data("history present but schema has none".into()));
        }
        Ok(())
    }
}

pub(crate) use split::unit_hash;
