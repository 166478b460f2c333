//! Principle ablation and pattern-count sweep.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::compress::{compress, CompressionConfig};
use super::metrics::EvalReport;
use super::train::{train_backbone, TrainConfig};
use crate::backbones::BackboneConfig;
use crate::data::{DatasetSchema, Splits};
use crate::error::{EdkError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    /// Every cell is repeated once per seed; the seed drives both compression
    /// and backbone training.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_k_values() -> Vec<usize> {
    vec![5, 10, 15, 20, 25]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            k_values: default_k_values(),
            seeds: default_seeds(),
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(EdkError::Config("ablation needs at least one seed".into()));
        }
        if self.k_values.contains(&0) {
            return Err(EdkError::Config("ablation k_values must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WithoutDisentangled,
    WithoutEssential,
    WithoutBoth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::WithoutDisentangled,
        Variant::WithoutEssential,
        Variant::WithoutBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutDisentangled => "w/o_disentangled",
            Variant::WithoutEssential => "w/o_essential",
            Variant::WithoutBoth => "w/o_both",
        }
    }

    /// `cfg` with the principle(s) of this variant switched off.
    pub fn apply(self, cfg: &CompressionConfig) -> CompressionConfig {
        let mut cfg = cfg.clone();
        let reg = &mut cfg.regularizers;
        if matches!(self, Variant::WithoutDisentangled | Variant::WithoutBoth) {
            reg.weights.beta = 0.0;
        }
        if matches!(self, Variant::WithoutEssential | Variant::WithoutBoth) {
            reg.weights.alpha = 0.0;
            reg.vclub = false;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub variant: Variant,
    pub num_patterns: usize,
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
}

impl AblationRow {
    pub fn aucs(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.auc).collect()
    }

    pub fn mean_auc(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.auc))
    }

    pub fn mean_logloss(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.logloss))
    }
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len() as f64;
    v.sum::<f64>() / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, cell: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    /// One line per row; per-seed values in `auc_<seed>` / `logloss_<seed>` columns.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let seeds = self.rows.first().map(|r| r.seeds.clone()).unwrap_or_default();
        let mut header = String::from("cell,variant,k,mean_auc,mean_logloss");
        for s in &seeds {
            write!(header, ",auc_{s}").expect("string write");
        }
        for s in &seeds {
            write!(header, ",logloss_{s}").expect("string write");
        }
        writeln!(w, "{header}")?;
        for row in &self.rows {
            let mut line = format!(
                "{},{},{},{},{}",
                row.cell,
                row.variant.name(),
                row.num_patterns,
                row.mean_auc(),
                row.mean_logloss()
            );
            for r in &row.reports {
                write!(line, ",{}", r.auc).expect("string write");
            }
            for r in &row.reports {
                write!(line, ",{}", r.logloss).expect("string write");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Runs one compress + train + test cell.
pub fn run_cell(
    schema: &DatasetSchema,
    splits: &Splits,
    compression: &CompressionConfig,
    backbone: &BackboneConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut ccfg = compression.clone();
    ccfg.seed = seed;
    let kb = compress(&splits.old, schema, &ccfg, None)?.kb;
    let mut bcfg = backbone.clone();
    bcfg.use_knowledge = true;
    let mut tcfg = train.clone();
    tcfg.seed = seed;
    let model = train_backbone(schema, &splits.train, &splits.valid, Some(&kb), &bcfg, &tcfg)?;
    model.evaluate(&splits.test, Some(&kb))
}

/// Four principle variants at the configured K, then the K sweep on the full
/// variant. Identical cells are run once.
pub fn ablate(
    schema: &DatasetSchema,
    splits: &Splits,
    compression: &CompressionConfig,
    backbone: &BackboneConfig,
    train: &TrainConfig,
    cfg: &AblationConfig,
) -> Result<AblationTable> {
    cfg.validate()?;
    let mut memo: HashMap<(String, u64), EvalReport> = HashMap::new();
    let mut cells: Vec<(String, Variant, CompressionConfig)> = Variant::ALL
        .iter()
        .map(|&v| (v.name().to_string(), v, v.apply(compression)))
        .collect();
    for &k in &cfg.k_values {
        let mut c = compression.clone();
        c.arch.num_patterns = k;
        cells.push((format!("k={k}"), Variant::Full, c));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, variant, ccfg) in cells {
        let mut key_cfg = ccfg.clone();
        key_cfg.seed = 0;
        let key = serde_json::to_string(&key_cfg)?;
        let mut reports = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let report = match memo.get(&(key.clone(), seed)) {
                Some(r) => r.clone(),
                None => {
                    let r = run_cell(schema, splits, &ccfg, backbone, train, seed)?;
                    memo.insert((key.clone(), seed), r.clone());
                    r
                }
            };
            reports.push(report);
        }
        rows.push(AblationRow {
            cell,
            variant,
            num_patterns: ccfg.arch.num_patterns,
            seeds: cfg.seeds.clone(),
            reports,
        });
    }
    Ok(AblationTable { rows })
}
