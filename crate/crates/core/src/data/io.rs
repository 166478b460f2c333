//! CSV dataset files.
//!
//! Layout: header `<field names...>,label,timestamp[,history]`, one record per
//! line, ids in base 10, history as a `|`-separated id list (possibly empty).

use std::fmt::Write as _;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{DatasetSchema, InstanceRecord};
use crate::error::{EdkError, Result};

pub fn load_dataset(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Vec<InstanceRecord>> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file, schema)
}

pub fn read_dataset(reader: impl Read, schema: &DatasetSchema) -> Result<Vec<InstanceRecord>> {
    schema.validate()?;
    let f = schema.num_fields();
    let expected_cols = f + 2 + usize::from(schema.has_history);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = rdr.records();

    let header = match rows.next() {
        Some(h) => h.map_err(|e| EdkError::Parse {
            row: 0,
            message: e.to_string(),
        })?,
        None => {
            return Err(EdkError::Parse {
                row: 0,
                message: "missing header".into(),
            })
        }
    };
    let expected_header = header_columns(schema);
    let got: Vec<&str> = header.iter().collect();
    if got != expected_header.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(EdkError::Parse {
            row: 0,
            message: format!("header {:?} does not match schema {:?}", got, expected_header),
        });
    }

    let mut out = Vec::new();
    for (i, row) in rows.enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| EdkError::Parse {
            row: row_no,
            message: e.to_string(),
        })?;
        if row.len() != expected_cols {
            return Err(EdkError::Parse {
                row: row_no,
                message: format!("expected {expected_cols} columns, found {}", row.len()),
            });
        }
        let perr = |message: String| EdkError::Parse {
            row: row_no,
            message,
        };
        let mut field_values = Vec::with_capacity(f);
        for (j, spec) in schema.fields.iter().enumerate() {
            let v: u32 = row[j]
                .parse()
                .map_err(|_| perr(format!("field {} is not a non-negative integer: {:?}", spec.name, &row[j])))?;
            if v as usize >= spec.vocab_size {
                return Err(perr(format!(
                    "field {} id {v} exceeds vocab size {}",
                    spec.name, spec.vocab_size
                )));
            }
            field_values.push(v);
        }
        let label = match &row[f] {
            "0" => 0u8,
            "1" => 1u8,
            other => return Err(perr(format!("label must be 0 or 1, found {other:?}"))),
        };
        let timestamp: i64 = row[f + 1]
            .parse()
            .map_err(|_| perr(format!("invalid timestamp {:?}", &row[f + 1])))?;
        let history = if schema.has_history {
            parse_history(&row[f + 2], schema).map_err(perr)?
        } else {
            Vec::new()
        };
        out.push(InstanceRecord {
            field_values,
            label,
            timestamp,
            history,
        });
    }
    Ok(out)
}

fn parse_history(text: &str, schema: &DatasetSchema) -> std::result::Result<Vec<u32>, String> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let vocab = schema.history_vocab().unwrap_or(0);
    let ids: Vec<u32> = text
        .split('|')
        .map(|t| t.parse::<u32>().map_err(|_| format!("invalid history id {t:?}")))
        .collect::<std::result::Result<_, _>>()?;
    if ids.len() > schema.max_history_len {
        return Err(format!(
            "history length {} exceeds max_history_len {}",
            ids.len(),
            schema.max_history_len
        ));
    }
    if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(format!("history id {bad} exceeds vocab size {vocab}"));
    }
    Ok(ids)
}

fn header_columns(schema: &DatasetSchema) -> Vec<String> {
    let mut cols: Vec<String> = schema.fields.iter().map(|f| f.name.clone()).collect();
    cols.push("label".into());
    cols.push("timestamp".into());
    if schema.has_history {
        cols.push("history".into());
    }
    cols
}

/// Writes the canonical form: `\n` line endings, no quoting, no padding.
pub fn write_dataset(
    path: impl AsRef<Path>,
    schema: &DatasetSchema,
    records: &[InstanceRecord],
) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    write_dataset_to(&mut w, schema, records)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset_to(
    w: &mut impl Write,
    schema: &DatasetSchema,
    records: &[InstanceRecord],
) -> Result<()> {
    writeln!(w, "{}", header_columns(schema).join(","))?;
    let mut line = String::new();
    for r in records {
        line.clear();
        for v in &r.field_values {
            write!(line, "{v},").expect("string write");
        }
        write!(line, "{},{}", r.label, r.timestamp).expect("string write");
        if schema.has_history {
            line.push(',');
            for (i, h) in r.history.iter().enumerate() {
                if i > 0 {
                    line.push('|');
                }
                write!(line, "{h}").expect("string write");
            }
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}
