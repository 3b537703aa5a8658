//! Checkpoint directories: `weights.bin` (little-endian f64 in parameter
//! order), `vocab.txt` (one token per line) and `meta.json`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::EncoderClassifier;
use super::mlm::MaskedLm;
use super::params::ParamStore;
use super::seq2seq::Seq2Seq;
use super::tokenizer::Tokenizer;
use super::{NnError, TransformerConfig};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Seq2seq,
    Classifier,
    MaskedLm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub kind: ModelKind,
    /// What the model was trained for, e.g. `ambiguity` or `generator`.
    pub role: String,
    pub model: TransformerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    pub seed: u64,
    pub corpus_fingerprint: String,
    pub tokenizer_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_weights: Option<LossWeights>,
    /// Training configuration snapshot.
    pub config: serde_json::Value,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub params: Vec<(String, [usize; 2])>,
}

impl CheckpointInfo {
    pub fn new(kind: ModelKind, role: impl Into<String>, model: TransformerConfig, tokenizer: &Tokenizer) -> Self {
        CheckpointInfo {
            kind,
            role: role.into(),
            model,
            n_classes: None,
            seed: 0,
            corpus_fingerprint: String::new(),
            tokenizer_fingerprint: tokenizer.fingerprint(),
            loss_weights: None,
            config: serde_json::Value::Null,
            metrics: BTreeMap::new(),
            params: Vec::new(),
        }
    }
}

/// A model whose parameters can be written to and rebuilt from a checkpoint.
pub trait Persist: Sized {
    const KIND: ModelKind;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Freshly initialized model with the architecture in `info`.
    fn skeleton(info: &CheckpointInfo) -> Result<Self, NnError>;
}

impl Persist for Seq2Seq {
    const KIND: ModelKind = ModelKind::Seq2seq;
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn skeleton(info: &CheckpointInfo) -> Result<Self, NnError> {
        Ok(Seq2Seq::new(info.model.clone(), 0))
    }
}

impl Persist for EncoderClassifier {
    const KIND: ModelKind = ModelKind::Classifier;
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn skeleton(info: &CheckpointInfo) -> Result<Self, NnError> {
        let n = info.n_classes.ok_or_else(|| NnError::Checkpoint("classifier metadata lacks n_classes".into()))?;
        Ok(EncoderClassifier::new(info.model.clone(), n, 0))
    }
}

impl Persist for MaskedLm {
    const KIND: ModelKind = ModelKind::MaskedLm;
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn skeleton(info: &CheckpointInfo) -> Result<Self, NnError> {
        Ok(MaskedLm::new(info.model.clone(), 0))
    }
}

/// Trained weights, the tokenizer they were trained with, and metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint<M> {
    pub model: M,
    pub tokenizer: Tokenizer,
    pub info: CheckpointInfo,
}

impl<M: Persist> Checkpoint<M> {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), NnError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut info = self.info.clone();
        info.kind = M::KIND;
        info.params = self.model.params().shapes();
        info.tokenizer_fingerprint = self.tokenizer.fingerprint();
        let bytes: Vec<u8> = self.model.params().flatten().iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.join(WEIGHTS_FILE), bytes)?;
        self.tokenizer.save(dir.join(VOCAB_FILE))?;
        let mut meta = serde_json::to_string_pretty(&info)?;
        meta.push('\n');
        std::fs::write(dir.join(META_FILE), meta)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, NnError> {
        let dir = dir.as_ref();
        let info = read_info(dir)?;
        if info.kind != M::KIND {
            return Err(NnError::Checkpoint(format!("expected a {:?} checkpoint, found {:?}", M::KIND, info.kind)));
        }
        let tokenizer = Tokenizer::load(dir.join(VOCAB_FILE))?;
        if tokenizer.fingerprint() != info.tokenizer_fingerprint {
            return Err(NnError::Checkpoint(format!(
                "tokenizer fingerprint {} does not match metadata {}",
                tokenizer.fingerprint(),
                info.tokenizer_fingerprint
            )));
        }
        let mut model = M::skeleton(&info)?;
        if model.params().shapes() != info.params {
            return Err(NnError::Checkpoint("parameter shapes differ from metadata".into()));
        }
        let bytes = std::fs::read(dir.join(WEIGHTS_FILE))?;
        if bytes.len() % 8 != 0 {
            return Err(NnError::Checkpoint("weights file is not a whole number of f64 values".into()));
        }
        let flat: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        model.params_mut().load_flat(&flat).map_err(NnError::Checkpoint)?;
        Ok(Checkpoint { model, tokenizer, info })
    }
}

/// Reads only `meta.json`.
pub fn read_info(dir: impl AsRef<Path>) -> Result<CheckpointInfo, NnError> {
    let text = std::fs::read_to_string(dir.as_ref().join(META_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_weights_and_metadata() {
        let tok = Tokenizer::from_texts(["the heart is normal.", "mild cardiomegaly."], 1).unwrap();
        let cfg = TransformerConfig::tiny(tok.len());
        let model = EncoderClassifier::new(cfg.clone(), 2, 4);
        let mut info = CheckpointInfo::new(ModelKind::Classifier, "ambiguity", cfg, &tok);
        info.n_classes = Some(2);
        info.seed = 4;
        info.metrics.insert("val_accuracy".into(), 0.5);
        let ckpt = Checkpoint { model, tokenizer: tok, info };
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let back = Checkpoint::<EncoderClassifier>::load(dir.path()).unwrap();
        assert_eq!(back.model.params, ckpt.model.params);
        assert_eq!(back.info.metrics, ckpt.info.metrics);
        assert_eq!(back.tokenizer, ckpt.tokenizer);
        let ids = back.tokenizer.encode("the heart is normal.");
        assert_eq!(back.model.predict(&ids).unwrap(), ckpt.model.predict(&ids).unwrap());
        assert!(Checkpoint::<Seq2Seq>::load(dir.path()).is_err());
    }
}
