//! Ingestion pass mapping raw categorical strings to dense ids.

use std::collections::HashMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::{DatasetSchema, FieldSpec, InstanceRecord};
use crate::error::{EdkError, Result};

/// Per-field id -> raw string tables, in id order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub fields: Vec<(String, Vec<String>)>,
}

pub struct Encoded {
    pub schema: DatasetSchema,
    pub vocabulary: Vocabulary,
    pub records: Vec<InstanceRecord>,
}

/// Encodes a raw CSV whose header is `<fields...>,label,timestamp[,history]`.
///
/// Ids are assigned per field in order of first appearance. History tokens
/// share the vocabulary of `history_field` (looked up by name).
pub fn encode_raw(reader: impl Read, history_field: Option<&str>) -> Result<Encoded> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| EdkError::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let has_history = header.last().map(String::as_str) == Some("history");
    let n_tail = if has_history { 3 } else { 2 };
    if header.len() < n_tail + 2
        || header[header.len() - n_tail] != "label"
        || header[header.len() - n_tail + 1] != "timestamp"
    {
        return Err(EdkError::Parse {
            row: 0,
            message: "header must end with label,timestamp[,history]".into(),
        });
    }
    let names: Vec<String> = header[..header.len() - n_tail].to_vec();
    let hist_idx = match (has_history, history_field) {
        (true, Some(name)) => Some(names.iter().position(|n| n == name).ok_or_else(|| {
            EdkError::Config(format!("history field {name} not among columns"))
        })?),
        (true, None) => {
            return Err(EdkError::Config(
                "raw data has a history column; name the item field it refers to".into(),
            ))
        }
        (false, _) => None,
    };

    let f = names.len();
    let mut maps: Vec<HashMap<String, u32>> = vec![HashMap::new(); f];
    let mut tables: Vec<Vec<String>> = vec![Vec::new(); f];
    let mut intern = |field: usize, token: &str| -> u32 {
        if let Some(&id) = maps[field].get(token) {
            return id;
        }
        let id = tables[field].len() as u32;
        maps[field].insert(token.to_string(), id);
        tables[field].push(token.to_string());
        id
    };
    let mut records = Vec::new();
    let mut max_hist = 0;
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| EdkError::Parse {
            row: row_no,
            message: e.to_string(),
        })?;
        let field_values: Vec<u32> = (0..f).map(|j| intern(j, &row[j])).collect();
        let label = match &row[f] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(EdkError::Parse {
                    row: row_no,
                    message: format!("label must be 0 or 1, found {other:?}"),
                })
            }
        };
        let timestamp = row[f + 1].parse().map_err(|_| EdkError::Parse {
            row: row_no,
            message: format!("invalid timestamp {:?}", &row[f + 1]),
        })?;
        let history: Vec<u32> = match hist_idx {
            Some(h) if !row[f + 2].is_empty() => {
                row[f + 2].split('|').map(|t| intern(h, t)).collect()
            }
            _ => Vec::new(),
        };
        max_hist = max_hist.max(history.len());
        records.push(InstanceRecord {
            field_values,
            label,
            timestamp,
            history,
        });
    }
    let schema = DatasetSchema {
        fields: names
            .iter()
            .zip(&tables)
            .map(|(n, t)| FieldSpec {
                name: n.clone(),
                vocab_size: t.len().max(1),
            })
            .collect(),
        has_history,
        max_history_len: max_hist,
        history_field: hist_idx,
    };
    schema.validate()?;
    Ok(Encoded {
        schema,
        vocabulary: Vocabulary {
            fields: names.into_iter().zip(tables).collect(),
        },
        records,
    })
}
