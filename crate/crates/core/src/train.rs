//! Answer vocabulary, RMSProp training, and VQA-style evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::OpenOptions;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{SourceSchema, VqaExample, NUM_HUMAN_ANSWERS};
use crate::encoder::{QuestionSequence, QuestionVocab};
use crate::error::{Error, Result};
use crate::features::{classify_question, QuestionType};
use crate::model::{predict, VqaModel};
use crate::tensor::{Tape, Tensor};

fn default_batch_size() -> usize {
    300
}
fn default_learning_rate() -> f64 {
    0.0004
}
fn default_decay() -> f64 {
    0.99
}
fn default_eps() -> f64 {
    1e-8
}
fn default_epochs() -> usize {
    10
}
fn default_answer_vocab_size() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_decay")]
    pub rmsprop_decay: f64,
    #[serde(default = "default_eps")]
    pub rmsprop_eps: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_answer_vocab_size")]
    pub answer_vocab_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            rmsprop_decay: default_decay(),
            rmsprop_eps: default_eps(),
            epochs: default_epochs(),
            answer_vocab_size: default_answer_vocab_size(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return Err(Error::Config(format!("rmsprop_decay must lie in (0, 1), got {}", self.rmsprop_decay)));
        }
        if !(self.rmsprop_eps > 0.0) {
            return Err(Error::Config("rmsprop_eps must be positive".into()));
        }
        if self.answer_vocab_size < 2 {
            return Err(Error::Config("answer_vocab_size must be at least 2".into()));
        }
        Ok(())
    }
}

/// The K answers used as class labels, index = class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerVocab {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn from_answers(answers: Vec<String>) -> Result<Self> {
        if answers.is_empty() {
            return Err(Error::Empty("answer vocabulary"));
        }
        let mut index = HashMap::with_capacity(answers.len());
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate answer {a:?}")));
            }
        }
        Ok(AnswerVocab { answers, index })
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn id(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, id: usize) -> Option<&str> {
        self.answers.get(id).map(String::as_str)
    }
}

/// Top-`k` answers by count, ties broken lexicographically.
pub fn build_answer_vocab<'a>(answers: impl IntoIterator<Item = &'a str>, k: usize) -> Result<AnswerVocab> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(a).or_default() += 1;
    }
    if counts.len() < k {
        return Err(Error::Invalid(format!(
            "need at least {k} distinct answers, found {}",
            counts.len()
        )));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    AnswerVocab::from_answers(ranked.into_iter().take(k).map(|(a, _)| a.to_string()).collect())
}

/// One RMSProp update, in place.
pub fn rmsprop_step(param: &mut Tensor, grad: &[f64], cache: &mut [f64], cfg: &TrainConfig) -> Result<()> {
    if grad.len() != param.len() || cache.len() != param.len() {
        return Err(Error::shape("rmsprop_step", param.shape(), &[grad.len(), cache.len()]));
    }
    let (lr, decay, eps) = (cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_eps);
    for ((p, &g), c) in param.data_mut().iter_mut().zip(grad).zip(cache.iter_mut()) {
        *c = decay * *c + (1.0 - decay) * g * g;
        *p -= lr * g / (c.sqrt() + eps);
    }
    Ok(())
}

/// A training record in model-ready form.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub images: Vec<Vec<f64>>,
    pub question: QuestionSequence,
    pub target: usize,
}

/// Maps records to training examples. Records whose modal answer is not in
/// `answers` are skipped; the number skipped is returned alongside.
pub fn prepare_training(
    examples: &[VqaExample],
    sources: &[SourceSchema],
    questions: &QuestionVocab,
    answers: &AnswerVocab,
) -> Result<(Vec<TrainingExample>, usize)> {
    let mut out = Vec::with_capacity(examples.len());
    let mut dropped = 0;
    for ex in examples {
        let Some(target) = answers.id(ex.modal_answer()) else {
            dropped += 1;
            continue;
        };
        if ex.image_feats.len() != sources.len()
            || ex.image_feats.iter().zip(sources).any(|(f, s)| f.values.len() != s.dim)
        {
            return Err(Error::Invalid(format!("example {} has inconsistent features", ex.example_id)));
        }
        out.push(TrainingExample {
            images: ex.image_feats.iter().map(|f| f.values.clone()).collect(),
            question: questions.encode(&ex.question)?,
            target,
        });
    }
    Ok((out, dropped))
}

/// Stacks a batch into per-source matrices plus question and target lists.
fn collate<'a>(batch: &[&'a TrainingExample]) -> Result<(Vec<Tensor>, Vec<&'a QuestionSequence>, Vec<usize>)> {
    let sources = batch[0].images.len();
    let images = (0..sources)
        .map(|s| {
            let dim = batch[0].images[s].len();
            let data: Vec<f64> = batch.iter().flat_map(|ex| ex.images[s].iter().copied()).collect();
            Tensor::matrix(batch.len(), dim, data)
        })
        .collect::<Result<_>>()?;
    let questions = batch.iter().map(|ex| &ex.question).collect();
    let targets = batch.iter().map(|ex| ex.target).collect();
    Ok((images, questions, targets))
}

/// Mean cross-entropy over `examples` without updating anything.
pub fn mean_loss(model: &VqaModel, examples: &[TrainingExample], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("no examples to score"));
    }
    let mut total = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainingExample> = chunk.iter().collect();
        let (images, questions, targets) = collate(&refs)?;
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let out = VqaModel::forward(&bound, &images, &questions)?;
        total += out.logits.softmax_cross_entropy(&targets)?.item() * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Per-epoch summary passed to the training callback.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch, weighted by batch size.
    pub loss: f64,
}

/// Shuffled mini-batch RMSProp on softmax cross-entropy. The shuffle order is
/// drawn from `cfg.seed`, so identical inputs give identical trajectories.
pub fn train(
    model: &mut VqaModel,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &VqaModel) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("no training examples after filtering"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut caches: Vec<Vec<f64>> = model.named_params().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (images, questions, targets) = collate(&batch)?;
            let grads = {
                let tape = Tape::new();
                let vars: Vec<_> = model.named_params().iter().map(|(_, t)| tape.param(t)).collect();
                let bound = model.bind_vars(&vars);
                let out = VqaModel::forward(&bound, &images, &questions)?;
                let loss = out.logits.softmax_cross_entropy(&targets)?;
                total += loss.item() * batch.len() as f64;
                let g = tape.backward(loss)?;
                vars.iter().map(|v| g.get_or_zeros(v)).collect::<Vec<_>>()
            };
            for ((param, grad), cache) in model.params_mut().into_iter().zip(&grads).zip(&mut caches) {
                rmsprop_step(param, grad, cache, cfg)?;
            }
        }
        let stats = EpochStats {
            epoch,
            loss: total / examples.len() as f64,
        };
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite { op: "train" });
        }
        losses.push(stats.loss);
        on_epoch(&stats, model)?;
    }
    Ok(losses)
}

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `min(#matching human answers / 3, 1)` over exactly ten human answers.
pub fn vqa_accuracy(predicted: &str, human_answers: &[String]) -> Result<f64> {
    if human_answers.len() != NUM_HUMAN_ANSWERS {
        return Err(Error::Invalid(format!(
            "expected {NUM_HUMAN_ANSWERS} human answers, found {}",
            human_answers.len()
        )));
    }
    let p = normalize_answer(predicted);
    let matches = human_answers.iter().filter(|h| normalize_answer(h) == p).count();
    Ok(match matches {
        0 => 0.0,
        1 => 1.0 / 3.0,
        2 => 2.0 / 3.0,
        _ => 1.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    OpenEnded,
    MultipleChoice,
}

impl std::str::FromStr for AnswerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" | "open_ended" | "open-ended" => Ok(AnswerMode::OpenEnded),
            "mc" | "multiple_choice" | "multiple-choice" => Ok(AnswerMode::MultipleChoice),
            other => Err(Error::Config(format!("unknown answer mode {other:?}"))),
        }
    }
}

/// Mean accuracy overall and per question type. A category with no examples
/// is `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Accuracy {
    pub all: f64,
    pub yes_no: Option<f64>,
    pub number: Option<f64>,
    pub other: Option<f64>,
    pub counts: [usize; 3],
}

impl Accuracy {
    pub fn header() -> String {
        format!("{:>8} {:>8} {:>8} {:>8}", "All", "Y/N", "Num", "Others")
    }

    pub fn row(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
        format!(
            "{:>8} {:>8} {:>8} {:>8}",
            cell(Some(self.all)),
            cell(self.yes_no),
            cell(self.number),
            cell(self.other)
        )
    }
}

impl fmt::Display for Accuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\n{}", Accuracy::header(), self.row())
    }
}

/// Picks an answer index from a score row, restricting to the example's
/// candidates in multiple-choice mode. Candidates outside the vocabulary
/// cannot be scored and are ignored; if none remain, the open-ended argmax is
/// used.
pub fn choose_answer(scores: &[f64], example: &VqaExample, answers: &AnswerVocab, mode: AnswerMode) -> Result<usize> {
    let restrict: Option<Vec<usize>> = match (mode, &example.multiple_choice) {
        (AnswerMode::MultipleChoice, Some(choices)) => {
            let ids: Vec<usize> = choices.iter().filter_map(|c| answers.id(c)).collect();
            (!ids.is_empty()).then_some(ids)
        }
        (AnswerMode::MultipleChoice, None) => {
            return Err(Error::Invalid(format!(
                "example {} has no multiple-choice candidates",
                example.example_id
            )))
        }
        (AnswerMode::OpenEnded, _) => None,
    };
    predict(scores, restrict.as_deref())
}

/// Scores predicted answer strings against the human answers.
pub fn score_predictions(examples: &[VqaExample], predicted: &[&str]) -> Result<Accuracy> {
    if examples.is_empty() {
        return Err(Error::Empty("no examples to evaluate"));
    }
    if examples.len() != predicted.len() {
        return Err(Error::shape("score_predictions", &[examples.len()], &[predicted.len()]));
    }
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    let mut total = 0.0;
    for (ex, p) in examples.iter().zip(predicted) {
        let acc = vqa_accuracy(p, &ex.human_answers)?;
        let slot = match classify_question(&ex.question)? {
            QuestionType::YesNo => 0,
            QuestionType::Number => 1,
            QuestionType::Other => 2,
        };
        sums[slot] += acc;
        counts[slot] += 1;
        total += acc;
    }
    let mean = |i: usize| (counts[i] > 0).then(|| sums[i] / counts[i] as f64);
    Ok(Accuracy {
        all: total / examples.len() as f64,
        yes_no: mean(0),
        number: mean(1),
        other: mean(2),
        counts,
    })
}

/// Turns per-example score rows into accuracies.
pub fn evaluate_scores(
    scores: &[Vec<f64>],
    examples: &[VqaExample],
    answers: &AnswerVocab,
    mode: AnswerMode,
) -> Result<Accuracy> {
    if scores.len() != examples.len() {
        return Err(Error::shape("evaluate", &[examples.len()], &[scores.len()]));
    }
    let ids = scores
        .iter()
        .zip(examples)
        .map(|(s, ex)| choose_answer(s, ex, answers, mode))
        .collect::<Result<Vec<_>>>()?;
    let predicted: Vec<&str> = ids.iter().map(|&i| answers.answers()[i].as_str()).collect();
    score_predictions(examples, &predicted)
}

/// Appends metric rows to a CSV file, writing the header when the file is new.
pub struct MetricsLog {
    writer: csv::Writer<std::fs::File>,
}

impl MetricsLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut writer = csv::Writer::from_writer(file);
        if fresh {
            writer.write_record(["epoch", "split", "loss", "all", "yes_no", "number", "other"])?;
            writer.flush()?;
        }
        Ok(MetricsLog { writer })
    }

    pub fn log(&mut self, epoch: usize, split: &str, loss: Option<f64>, acc: Option<&Accuracy>) -> Result<()> {
        let num = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
        self.writer.write_record([
            epoch.to_string(),
            split.to_string(),
            num(loss),
            num(acc.map(|a| a.all)),
            num(acc.and_then(|a| a.yes_no)),
            num(acc.and_then(|a| a.number)),
            num(acc.and_then(|a| a.other)),
        ])?;
        self.writer.flush()?;
        Ok(())
    }
}
