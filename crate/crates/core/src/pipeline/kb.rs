//! The frozen knowledge base produced by compression.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::checkpoint::{load_checkpoint, restore_into, save_checkpoint, store_digest};
use crate::autograd::{ParamStore, Tensor};
use crate::data::{DatasetSchema, InstanceRecord};
use crate::error::{EdkError, Result};
use crate::extractor::FieldBatch;
use crate::knowledge::{KnowledgeArch, KnowledgeModel, KnowledgeVectors};

const KIND: &str = "knowledge_base";
const QUERY_BATCH: usize = 1024;

/// Extractor and encoder parameters with the schema they were trained on.
///
/// There is no mutable access to the parameters once built.
#[derive(Clone, Debug)]
pub struct KnowledgeBase {
    schema: DatasetSchema,
    model: KnowledgeModel,
    store: ParamStore,
    config: serde_json::Value,
    version: String,
}

fn build(schema: &DatasetSchema, arch: &KnowledgeArch) -> Result<(KnowledgeModel, ParamStore)> {
    let mut store = ParamStore::new();
    // values are overwritten right after construction
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = KnowledgeModel::new(&mut store, &schema.vocab_sizes(), arch.clone(), &mut rng)?;
    Ok((model, store))
}

fn version_of(schema: &DatasetSchema, arch: &KnowledgeArch, store: &ParamStore) -> String {
    let mut h = Sha256::new();
    h.update(schema.fingerprint().as_bytes());
    h.update(serde_json::to_vec(arch).expect("arch serializes"));
    h.update(store_digest(store).as_bytes());
    hex::encode(&h.finalize()[..16])
}

impl KnowledgeBase {
    /// Copies the `extractor.*` and `encoder.*` parameters out of a training store.
    pub fn freeze(
        schema: &DatasetSchema,
        arch: &KnowledgeArch,
        source: &ParamStore,
        config: serde_json::Value,
    ) -> Result<Self> {
        let (model, mut store) = build(schema, arch)?;
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let src = source
                .find(&name)
                .ok_or_else(|| EdkError::Contract(format!("training store lacks {name}")))?;
            store.set(id, source.get(src).clone());
        }
        let version = version_of(schema, arch, &store);
        Ok(KnowledgeBase {
            schema: schema.clone(),
            model,
            store,
            config,
            version,
        })
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    pub fn arch(&self) -> &KnowledgeArch {
        &self.model.arch
    }

    pub fn model(&self) -> &KnowledgeModel {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn config_snapshot(&self) -> &serde_json::Value {
        &self.config
    }

    /// Content hash of schema, architecture and parameter values.
    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn knowledge_dim(&self) -> usize {
        self.model.arch.knowledge_dim
    }

    pub fn num_patterns(&self) -> usize {
        self.model.arch.num_patterns
    }

    pub fn check_schema(&self, schema: &DatasetSchema) -> Result<()> {
        if schema.fingerprint() != self.schema.fingerprint() {
            return Err(EdkError::Contract(
                "dataset schema does not match the knowledge base schema".into(),
            ));
        }
        Ok(())
    }

    pub fn query_batch(&self, batch: &FieldBatch) -> Result<KnowledgeVectors> {
        self.model.infer(&self.store, batch)
    }

    /// Eval-mode knowledge vectors for all records, in order.
    pub fn query(&self, records: &[InstanceRecord]) -> Result<KnowledgeVectors> {
        let k = self.num_patterns();
        let dk = self.knowledge_dim();
        let mut s = Vec::with_capacity(records.len() * k * dk);
        let mut c = Vec::with_capacity(records.len() * dk);
        for chunk in records.chunks(QUERY_BATCH) {
            let out = self.query_batch(&FieldBatch::from_records(chunk))?;
            s.extend_from_slice(out.s.data());
            c.extend_from_slice(out.c.data());
        }
        Ok(KnowledgeVectors {
            s: Tensor::new(vec![records.len(), k, dk], s),
            c: Tensor::new(vec![records.len(), dk], c),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = json!({
            "schema": self.schema,
            "fingerprint": self.schema.fingerprint(),
            "arch": self.model.arch,
            "config": self.config,
            "version": self.version,
        });
        save_checkpoint(path, KIND, meta, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (manifest, tensors) = load_checkpoint(path)?;
        if manifest.kind != KIND {
            return Err(EdkError::Checkpoint(format!(
                "expected a knowledge base checkpoint, found {}",
                manifest.kind
            )));
        }
        let meta = &manifest.metadata;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| EdkError::Checkpoint(format!("manifest lacks {k}")))
        };
        let schema: DatasetSchema = serde_json::from_value(field("schema")?)?;
        let arch: KnowledgeArch = serde_json::from_value(field("arch")?)?;
        if field("fingerprint")?.as_str() != Some(schema.fingerprint().as_str()) {
            return Err(EdkError::Checkpoint("schema fingerprint mismatch".into()));
        }
        let (model, mut store) = build(&schema, &arch)?;
        restore_into(&mut store, tensors)?;
        let version = version_of(&schema, &arch, &store);
        if field("version")?.as_str() != Some(version.as_str()) {
            return Err(EdkError::Checkpoint("version id does not match contents".into()));
        }
        Ok(KnowledgeBase {
            schema,
            model,
            store,
            config: field("config")?,
            version,
        })
    }
}
