use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use edgeflow::aligner::AlignmentConfig;
use edgeflow::edgeformer::EdgeTransformerConfig;
use edgeflow::genmodel::Seq2SeqConfig;
use edgeflow::kgraph::EnhancementConfig;
use edgeflow::subgraph::RetrievalConfig;
use edgeflow::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub enhanced_graph: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub alignment: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_freq: u64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            max_size: 30_000,
            min_freq: 2,
        }
    }
}

/// Every module setting in one JSON document. The top-level `seed` overrides
/// `train.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub vocab: VocabConfig,
    pub alignment: AlignmentConfig,
    pub enhancement: EnhancementConfig,
    pub ablation_fraction: f64,
    pub retrieval: RetrievalConfig,
    pub edge_transformer: EdgeTransformerConfig,
    pub seq2seq: Seq2SeqConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            paths: Paths::default(),
            vocab: VocabConfig::default(),
            alignment: AlignmentConfig::default(),
            enhancement: EnhancementConfig::default(),
            ablation_fraction: 0.2,
            retrieval: RetrievalConfig::default(),
            edge_transformer: EdgeTransformerConfig::default(),
            seq2seq: Seq2SeqConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Applies the seed and checks cross-module consistency.
    pub fn finish(mut self) -> anyhow::Result<Self> {
        self.train.seed = self.seed;
        self.enhancement.validate()?;
        self.edge_transformer.validate()?;
        self.seq2seq.validate()?;
        self.train.validate()?;
        if self.edge_transformer.hidden_dim != self.seq2seq.hidden_dim {
            bail!(
                "edge_transformer.hidden_dim ({}) must equal seq2seq.hidden_dim ({})",
                self.edge_transformer.hidden_dim,
                self.seq2seq.hidden_dim
            );
        }
        if !(0.0..=1.0).contains(&self.ablation_fraction) {
            bail!("ablation_fraction must be in [0, 1]");
        }
        if self.vocab.max_size < 4 {
            bail!("vocab.max_size must be at least 4");
        }
        Ok(self)
    }
}
