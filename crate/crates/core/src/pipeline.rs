//! End-to-end fitting of one model from a dataset and a run configuration.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainedModel;
use crate::dataset::Dataset;
use crate::encoder::{LstmConfig, QuestionVocab};
use crate::error::{Error, Result};
use crate::model::{DualNetConfig, FusionMode, VqaModel};
use crate::train::{build_answer_vocab, prepare_training, train, EpochStats, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub mode: FusionMode,
    pub common_dim: usize,
    pub head_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Cap on the question vocabulary, counting the unknown token.
    #[serde(default)]
    pub max_vocab: Option<usize>,
}

/// Everything needed to train one model, as read from a TOML file:
///
/// ```toml
/// [train]
/// batch_size = 50
/// learning_rate = 0.003
/// epochs = 30
/// answer_vocab_size = 10
/// seed = 0
///
/// [model]
/// mode = "dual"
/// common_dim = 16
/// head_dim = 32
///
/// [encoder]
/// embed_dim = 8
/// hidden_dim = 16
/// num_layers = 1
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelSection,
    pub encoder: EncoderSection,
}

impl Default for RunConfig {
    /// Settings sized for the generated toy datasets.
    fn default() -> Self {
        RunConfig {
            train: TrainConfig {
                batch_size: 50,
                learning_rate: 0.003,
                epochs: 30,
                answer_vocab_size: 10,
                ..TrainConfig::default()
            },
            model: ModelSection {
                mode: FusionMode::Dual,
                common_dim: 16,
                head_dim: 32,
            },
            encoder: EncoderSection {
                embed_dim: 8,
                hidden_dim: 16,
                num_layers: 1,
                max_vocab: None,
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub epoch_losses: Vec<f64>,
    /// Training records skipped because their answer is outside the vocabulary.
    pub dropped: usize,
}

/// Builds vocabularies from `data`, initializes a model from `cfg.train.seed`
/// and trains it. `on_epoch` sees the model after every epoch.
pub fn fit(
    data: &Dataset,
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&EpochStats, &TrainedModel) -> Result<()>,
) -> Result<(TrainedModel, FitReport)> {
    cfg.train.validate()?;
    let question_vocab = QuestionVocab::build(data.examples.iter().map(|e| e.question.as_str()), cfg.encoder.max_vocab);
    let answer_vocab = build_answer_vocab(
        data.examples.iter().flat_map(|e| e.human_answers.iter().map(String::as_str)),
        cfg.train.answer_vocab_size,
    )?;
    let lstm = LstmConfig {
        vocab_size: question_vocab.len(),
        embed_dim: cfg.encoder.embed_dim,
        hidden_dim: cfg.encoder.hidden_dim,
        num_layers: cfg.encoder.num_layers,
    };
    let net = DualNetConfig {
        image_dims: data.sources().iter().map(|s| s.dim).collect(),
        question_dim: cfg.encoder.hidden_dim,
        common_dim: cfg.model.common_dim,
        head_dim: cfg.model.head_dim,
        num_answers: answer_vocab.len(),
        mode: cfg.model.mode,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    // Separate stream from the one `train` uses for shuffling.
    init_rng.set_stream(1);
    let model = VqaModel::init(&lstm, &net, &mut init_rng)?;
    let (examples, dropped) = prepare_training(&data.examples, data.sources(), &question_vocab, &answer_vocab)?;
    let mut trained = TrainedModel {
        model,
        sources: data.sources().to_vec(),
        question_vocab,
        answer_vocab,
    };
    let epoch_losses = {
        let snapshot = trained.clone();
        train(&mut trained.model, &examples, &cfg.train, |stats, model| {
            let view = TrainedModel {
                model: model.clone(),
                ..snapshot.clone()
            };
            on_epoch(stats, &view)
        })?
    };
    Ok((trained, FitReport { epoch_losses, dropped }))
}
