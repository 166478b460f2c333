//! Mask-cardinality statistics and vector export of a knowledge base.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kb::KnowledgeBase;
use crate::autograd::Graph;
use crate::data::InstanceRecord;
use crate::error::{EdkError, Result};
use crate::extractor::FieldBatch;
use crate::nn::Cx;
use crate::Mode;

/// A mask entry counts as selected when it exceeds this.
pub const SELECT_THRESHOLD: f64 = 0.5;
/// Slack against rounding: the eval-mode mask of a zero logit lands a few ulps
/// above 0.5 and must not count as selected.
pub const SELECT_TOLERANCE: f64 = 1e-9;

const STATS_BATCH: usize = 1024;

/// `histogram[j][n]`: instances whose pattern `j` selects exactly `n` fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternStats {
    pub num_fields: usize,
    pub num_instances: usize,
    pub histogram: Vec<Vec<u64>>,
}

impl PatternStats {
    pub fn total(&self) -> u64 {
        self.histogram.iter().flatten().sum()
    }

    /// Counts summed over patterns.
    pub fn pooled(&self) -> Vec<u64> {
        let mut out = vec![0; self.num_fields + 1];
        for row in &self.histogram {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let mut header = String::from("pattern");
        for n in 0..=self.num_fields {
            write!(header, ",card_{n}").expect("string write");
        }
        writeln!(w, "{header}")?;
        for (j, row) in self.histogram.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(w, "{j},{}", cells.join(","))?;
        }
        Ok(())
    }
}

fn selected(v: f64) -> bool {
    v > SELECT_THRESHOLD + SELECT_TOLERANCE
}

/// Streams eval-mode passes over `records`; calls `visit` per batch with the
/// mask `[b, f, k]`, pooled memorization embeddings `[b, d]` and `s` `[b, k, dk]`.
fn passes(
    kb: &KnowledgeBase,
    records: &[InstanceRecord],
    mut visit: impl FnMut(usize, &[f64], &[f64], &[f64]) -> Result<()>,
) -> Result<()> {
    let model = kb.model();
    for r in records {
        r.check(kb.schema())?;
    }
    for chunk in records.chunks(STATS_BATCH) {
        let batch = FieldBatch::from_records(chunk);
        let g = Graph::new();
        let cx = Cx::new(&g, kb.params(), false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = model.forward(&cx, &batch, Mode::Eval, &mut rng)?;
        let mask = pass.extraction.mask.value();
        let pooled = pass.extraction.memory.mean_axis1().value();
        let s = pass.s.value();
        if !mask.is_finite() || !pooled.is_finite() || !s.is_finite() {
            return Err(EdkError::Numeric("non-finite values in knowledge base pass".into()));
        }
        visit(chunk.len(), mask.data(), pooled.data(), s.data())?;
    }
    Ok(())
}

pub fn pattern_stats(kb: &KnowledgeBase, records: &[InstanceRecord]) -> Result<PatternStats> {
    let f = kb.schema().num_fields();
    let k = kb.num_patterns();
    let mut histogram = vec![vec![0u64; f + 1]; k];
    passes(kb, records, |b, mask, _, _| {
        for i in 0..b {
            for (j, row) in histogram.iter_mut().enumerate() {
                let n = (0..f).filter(|&fi| selected(mask[(i * f + fi) * k + j])).count();
                row[n] += 1;
            }
        }
        Ok(())
    })?;
    Ok(PatternStats {
        num_fields: f,
        num_instances: records.len(),
        histogram,
    })
}

/// Columnar export: per instance one `instance` row (mean-pooled memorization
/// embedding) followed by one `pattern` row per knowledge vector. Rows are
/// padded to a common width with empty cells. Returns the number of data rows.
pub fn export_vectors(kb: &KnowledgeBase, records: &[InstanceRecord], w: &mut impl Write) -> Result<usize> {
    let d = kb.arch().dim;
    let dk = kb.knowledge_dim();
    let k = kb.num_patterns();
    let width = d.max(dk);
    let mut header = String::from("instance,kind,pattern");
    for i in 0..width {
        write!(header, ",v{i}").expect("string write");
    }
    writeln!(w, "{header}")?;
    let mut rows = 0;
    let mut next = 0;
    let mut line = String::new();
    let emit = |w: &mut dyn Write, line: &mut String, id: usize, kind: &str, pattern: &str, values: &[f64]| {
        line.clear();
        write!(line, "{id},{kind},{pattern}").expect("string write");
        for v in values {
            write!(line, ",{v}").expect("string write");
        }
        for _ in values.len()..width {
            line.push(',');
        }
        writeln!(w, "{line}")
    };
    passes(kb, records, |b, _, pooled, s| {
        for i in 0..b {
            let id = next + i;
            emit(w, &mut line, id, "instance", "", &pooled[i * d..(i + 1) * d])?;
            for j in 0..k {
                let off = (i * k + j) * dk;
                emit(w, &mut line, id, "pattern", &j.to_string(), &s[off..off + dk])?;
            }
            rows += k + 1;
        }
        next += b;
        Ok(())
    })?;
    Ok(rows)
}

/// Writes `cardinality.csv`, `cardinality.json` and `vectors.csv` into `dir`.
pub fn write_stats(kb: &KnowledgeBase, records: &[InstanceRecord], dir: impl AsRef<Path>) -> Result<PatternStats> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let stats = pattern_stats(kb, records)?;
    let mut buf = Vec::new();
    stats.write_csv(&mut buf)?;
    std::fs::write(dir.join("cardinality.csv"), buf)?;
    std::fs::write(dir.join("cardinality.json"), serde_json::to_vec_pretty(&stats)?)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join("vectors.csv"))?);
    export_vectors(kb, records, &mut file)?;
    file.flush()?;
    Ok(stats)
}
