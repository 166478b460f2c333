//! Experiment configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ablate::AblationConfig;
use super::compress::CompressionConfig;
use super::train::TrainConfig;
use crate::backbones::{BackboneConfig, BackboneKind};
use crate::data::{
    generate_synthetic, load_dataset, temporal_split, DatasetSchema, InstanceRecord, SplitSpec, Splits,
    SyntheticConfig,
};
use crate::error::{EdkError, Result};

/// Where the records come from: generated, or a CSV file plus its schema.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    /// Dataset CSV; relative paths are taken from the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataConfig,
    /// Defaults to the synthetic generator's boundaries.
    #[serde(default)]
    pub split: Option<SplitSpec>,
    #[serde(default)]
    pub compression: CompressionConfig,
    #[serde(default = "default_backbone")]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_backbone() -> BackboneConfig {
    BackboneConfig::new(BackboneKind::DeepFm)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            split: None,
            compression: CompressionConfig::default(),
            backbone: default_backbone(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Loaded records with their layout.
pub struct Dataset {
    pub schema: DatasetSchema,
    pub records: Vec<InstanceRecord>,
}

impl ExperimentConfig {
    /// Parses a config file; data paths are made absolute against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| EdkError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        for p in [&mut cfg.data.path, &mut cfg.data.schema].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| EdkError::Config(format!("invalid config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (&d.synthetic, &d.path) {
            (Some(_), Some(_)) => {
                return Err(EdkError::Config("data: give either synthetic or path, not both".into()))
            }
            (None, None) => return Err(EdkError::Config("data: synthetic or path is required".into())),
            (None, Some(_)) if d.schema.is_none() => {
                return Err(EdkError::Config("data: a dataset path needs a schema file".into()))
            }
            _ => {}
        }
        if let Some(s) = &d.synthetic {
            s.validate()?;
        }
        if self.split.is_none() && d.synthetic.is_none() {
            return Err(EdkError::Config("split is required for file datasets".into()));
        }
        if let Some(s) = &self.split {
            s.validate()?;
        }
        self.compression.validate()?;
        self.train.validate()?;
        self.ablation.validate()
    }

    pub fn schema(&self) -> Result<DatasetSchema> {
        match (&self.data.synthetic, &self.data.schema) {
            (Some(s), _) => Ok(s.schema()),
            (None, Some(p)) => DatasetSchema::load(p),
            (None, None) => Err(EdkError::Config("data: no schema available".into())),
        }
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let schema = self.schema()?;
        let records = match (&self.data.synthetic, &self.data.path) {
            (Some(s), _) => generate_synthetic(s)?,
            (None, Some(p)) => load_dataset(p, &schema)?,
            (None, None) => return Err(EdkError::Config("data: synthetic or path is required".into())),
        };
        Ok(Dataset { schema, records })
    }

    /// Fills every defaulted or derived setting so that the serialized form is
    /// complete.
    pub fn resolve(&mut self, schema: &DatasetSchema) -> Result<()> {
        self.validate()?;
        if self.split.is_none() {
            let s = self.data.synthetic.as_ref().expect("validated");
            self.split = Some(SplitSpec {
                t0: s.t0,
                t1: s.t1,
                valid_fraction: 0.5,
                split_seed: s.seed,
            });
        }
        let dk = self.compression.arch.knowledge_dim;
        let reg = &mut self.compression.regularizers;
        reg.discriminator_hidden.get_or_insert(dk);
        reg.variational_hidden.get_or_insert(dk);
        self.backbone.resolve(schema)
    }

    pub fn split(&self, records: &[InstanceRecord]) -> Result<Splits> {
        let spec = self
            .split
            .as_ref()
            .ok_or_else(|| EdkError::Config("split is not resolved".into()))?;
        let splits = temporal_split(records, spec)?;
        for (name, part) in [
            ("D_old", &splits.old),
            ("D_train", &splits.train),
            ("D_valid", &splits.valid),
            ("D_test", &splits.test),
        ] {
            if part.is_empty() {
                return Err(EdkError::Config(format!("{name} empty")));
            }
        }
        Ok(splits)
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_json() -> &'static str {
        r#"{"data": {"synthetic": {"vocab_sizes": [4, 5, 6], "n_records": 400, "t0": 100, "t1": 200,
            "invariant_rules": [{"conditions": [[0, 1]], "prob": 0.9}]}}}"#
    }

    #[test]
    fn resolved_snapshot_lists_every_default() {
        let mut cfg = ExperimentConfig::from_json(synthetic_json()).unwrap();
        let schema = cfg.schema().unwrap();
        cfg.resolve(&schema).unwrap();
        let v = cfg.snapshot();
        let c = &v["compression"];
        assert_eq!(c["arch"]["num_patterns"], 20);
        assert_eq!(c["arch"]["hard_concrete"]["beta"], 2.0 / 3.0);
        assert_eq!(c["regularizers"]["weights"]["lambda1"], 0.1);
        assert_eq!(c["regularizers"]["weights"]["lambda2"], 0.01);
        assert_eq!(c["regularizers"]["temperature"], 0.5);
        assert_eq!(c["regularizers"]["dropout"], 0.1);
        assert_eq!(c["regularizers"]["discriminator_hidden"], 16);
        assert_eq!(c["patience"], 3);
        assert_eq!(c["holdout_fraction"], 0.1);
        assert_eq!(v["backbone"]["hidden"], serde_json::json!([64, 32]));
        assert_eq!(v["backbone"]["adapter_hidden"], serde_json::json!([32]));
        assert_eq!(v["train"]["learning_rates"].as_array().unwrap().len(), 4);
        assert_eq!(v["train"]["weight_decays"].as_array().unwrap().len(), 6);
        assert_eq!(v["train"]["patience"], 3);
        assert_eq!(v["train"]["max_epochs"], 30);
        assert_eq!(v["ablation"]["k_values"], serde_json::json!([5, 10, 15, 20, 25]));
        assert_eq!(v["split"]["t0"], 100);
        assert_eq!(v["split"]["valid_fraction"], 0.5);
        // the snapshot parses back to the same config
        let back: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = ExperimentConfig::from_json(r#"{"compresion": {}}"#).unwrap_err();
        assert!(matches!(err, EdkError::Config(_)));
        let err = ExperimentConfig::from_json(r#"{"train": {"lr": 0.1}}"#).unwrap_err();
        assert!(matches!(err, EdkError::Config(_)));
    }

    #[test]
    fn data_source_must_be_unique() {
        let mut cfg = ExperimentConfig::from_json(synthetic_json()).unwrap();
        cfg.data.path = Some("x.csv".into());
        assert!(matches!(cfg.validate(), Err(EdkError::Config(_))));
        let cfg = ExperimentConfig::default();
        assert!(matches!(cfg.validate(), Err(EdkError::Config(_))));
    }

    #[test]
    fn empty_split_names_the_partition() {
        let mut cfg = ExperimentConfig::from_json(synthetic_json()).unwrap();
        let data = cfg.load_data().unwrap();
        cfg.resolve(&data.schema).unwrap();
        cfg.split.as_mut().unwrap().t0 = -5;
        match cfg.split(&data.records) {
            Err(EdkError::Config(m)) => assert!(m.contains("D_old")),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(
            &p,
            r#"{"data": {"path": "d.csv", "schema": "s.json"}, "split": {"t0": 1, "t1": 2}}"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&p).unwrap();
        assert_eq!(cfg.data.path.unwrap(), dir.path().join("d.csv"));
    }
}
