//! Checkpoint format: a single JSON document holding the resolved config,
//! the vocabulary and every parameter as `name -> {shape, data}`. The format
//! is stable; floats round-trip exactly through serde_json.

use crate::config::TrainConfig;
use crate::data::Vocab;
use crate::error::{KmapError, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub epoch: usize,
    /// Parameter tensors in registration order.
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, vocab: &Vocab, epoch: usize, store: &ParamStore) -> Self {
        Checkpoint {
            config: config.clone(),
            vocab: vocab.clone(),
            epoch,
            params: store.export(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            KmapError::invalid(format!("cannot open checkpoint {}: {e}", path.display()))
        })?;
        let ckpt = serde_json::from_reader(std::io::BufReader::new(file))?;
        Ok(ckpt)
    }

    pub fn param_map(&self) -> HashMap<String, Tensor> {
        self.params.iter().cloned().collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_values_exactly() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::vector(vec![0.1 + 0.2, 1.0 / 3.0, -1e-17]));
        let config = TrainConfig::default();
        let vocab = Vocab {
            students: vec!["s".into()],
            questions: vec!["q".into()],
            lectures: vec!["l".into()],
        };
        let ckpt = Checkpoint::capture(&config, &vocab, 3, &store);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.params, ckpt.params);
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.vocab, vocab);
    }
}
