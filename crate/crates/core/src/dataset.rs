//! JSON-lines datasets and the synthetic teacher-labelled generator.
//!
//! A dataset file starts with one header object followed by one record per
//! line:
//!
//! ```text
//! {"format":"dualnet-vqa","version":1,"split":"train","sources":[{"name":"holistic","dim":32}, ...]}
//! {"example_id":"train-0","image_feats":[{"source":"holistic","values":[...]}, ...],"question":"...","human_answers":[...]}
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainedModel;
use crate::encoder::{LstmConfig, QuestionVocab};
use crate::error::{Error, Result};
use crate::model::{DualNetConfig, FusionMode, VqaModel};
use crate::train::AnswerVocab;

pub const FORMAT_NAME: &str = "dualnet-vqa";
pub const FORMAT_VERSION: u32 = 1;
pub const NUM_HUMAN_ANSWERS: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSchema {
    pub name: String,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    pub sources: Vec<SourceSchema>,
    /// Present for generated data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherSpec>,
}

impl DatasetHeader {
    pub fn new(sources: Vec<SourceSchema>) -> Self {
        DatasetHeader {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            split: None,
            sources,
            teacher: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedFeature {
    pub source: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaExample {
    pub example_id: String,
    pub image_feats: Vec<NamedFeature>,
    pub question: String,
    pub human_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiple_choice: Option<Vec<String>>,
}

impl VqaExample {
    /// Most frequent human answer, ties broken lexicographically.
    pub fn modal_answer(&self) -> &str {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for a in &self.human_answers {
            *counts.entry(a.as_str()).or_default() += 1;
        }
        let mut best = ("", 0);
        for (a, c) in counts {
            if c > best.1 {
                best = (a, c);
            }
        }
        best.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub examples: Vec<VqaExample>,
}

impl Dataset {
    pub fn sources(&self) -> &[SourceSchema] {
        &self.header.sources
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for ex in &self.examples {
            serde_json::to_writer(&mut w, ex)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn validate_example(ex: &VqaExample, sources: &[SourceSchema]) -> std::result::Result<(), String> {
    if ex.human_answers.len() != NUM_HUMAN_ANSWERS {
        return Err(format!(
            "human_answers: expected {NUM_HUMAN_ANSWERS} answers, found {}",
            ex.human_answers.len()
        ));
    }
    if ex.question.trim().is_empty() {
        return Err("question: empty".into());
    }
    if ex.image_feats.len() != sources.len() {
        return Err(format!(
            "image_feats: expected {} sources, found {}",
            sources.len(),
            ex.image_feats.len()
        ));
    }
    for (f, s) in ex.image_feats.iter().zip(sources) {
        if f.source != s.name {
            return Err(format!("image_feats: expected source {:?}, found {:?}", s.name, f.source));
        }
        if f.values.len() != s.dim {
            return Err(format!(
                "image_feats[{}]: expected dimension {}, found {}",
                s.name,
                s.dim,
                f.values.len()
            ));
        }
        if f.values.iter().any(|v| !v.is_finite()) {
            return Err(format!("image_feats[{}]: non-finite value", s.name));
        }
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut header: Option<DatasetHeader> = None;
    let mut examples = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: lineno, msg };
        match &header {
            None => {
                let h: DatasetHeader = serde_json::from_str(&line).map_err(|e| parse_err(format!("header: {e}")))?;
                if h.format != FORMAT_NAME {
                    return Err(parse_err(format!("unknown format {:?}", h.format)));
                }
                if h.version != FORMAT_VERSION {
                    return Err(parse_err(format!("unsupported version {}", h.version)));
                }
                if h.sources.is_empty() || h.sources.iter().any(|s| s.dim == 0) {
                    return Err(parse_err("sources: need at least one source of positive dimension".into()));
                }
                header = Some(h);
            }
            Some(h) => {
                let ex: VqaExample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
                validate_example(&ex, &h.sources).map_err(parse_err)?;
                examples.push(ex);
            }
        }
    }
    match header {
        Some(header) if !examples.is_empty() => Ok(Dataset { header, examples }),
        _ => Err(Error::Empty("no examples")),
    }
}

/// Planted teacher used to label synthetic data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    /// Seed actually used for the teacher weights.
    pub seed: u64,
    pub sources: Vec<SourceSchema>,
    pub num_answers: usize,
    pub common_dim: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Multiplier applied to every fusion projection matrix after initialization.
    pub gain: f64,
    /// Multiplier for the head weights that read the multiplication path.
    #[serde(default = "unit_gain")]
    pub mul_gain: f64,
    /// Extra multiplier for the question projections of both paths.
    #[serde(default = "unit_gain")]
    pub question_gain: f64,
}

fn unit_gain() -> f64 {
    1.0
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec {
            seed: 7,
            sources: vec![
                SourceSchema {
                    name: "holistic".into(),
                    dim: 32,
                },
                SourceSchema {
                    name: "regional".into(),
                    dim: 24,
                },
            ],
            num_answers: 10,
            common_dim: 4,
            head_dim: 16,
            embed_dim: 8,
            hidden_dim: 16,
            num_layers: 1,
            gain: 3.0,
            mul_gain: 5.0,
            question_gain: 5.0,
        }
    }
}

/// Question words of the toy vocabulary.
pub const TOY_WORDS: [&str; 50] = [
    "what", "is", "the", "how", "many", "are", "there", "color", "of", "does", "this", "a", "man", "woman", "dog",
    "cat", "in", "on", "picture", "number", "people", "can", "you", "see", "do", "table", "red", "blue", "left",
    "right", "holding", "wearing", "where", "who", "why", "which", "room", "sky", "water", "car", "bus", "tree",
    "shirt", "has", "was", "could", "kind", "animal", "food", "sport",
];

const TOY_ANSWERS: [&str; 10] = ["yes", "no", "2", "1", "3", "white", "red", "dog", "tennis", "kitchen"];

const MIN_QUESTION_LEN: usize = 3;
const MAX_QUESTION_LEN: usize = 8;
const CHOICES_PER_QUESTION: usize = 4;
const MAX_CLASS_SHARE: f64 = 0.9;
const MAX_TEACHER_ATTEMPTS: u64 = 64;

pub fn toy_answers(count: usize) -> Vec<String> {
    (0..count)
        .map(|i| TOY_ANSWERS.get(i).map_or_else(|| format!("answer{i}"), |a| (*a).to_string()))
        .collect()
}

impl TeacherSpec {
    pub fn lstm_config(&self) -> LstmConfig {
        LstmConfig {
            vocab_size: TOY_WORDS.len() + 1,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
        }
    }

    pub fn dualnet_config(&self) -> DualNetConfig {
        DualNetConfig {
            image_dims: self.sources.iter().map(|s| s.dim).collect(),
            question_dim: self.hidden_dim,
            common_dim: self.common_dim,
            head_dim: self.head_dim,
            num_answers: self.num_answers,
            mode: FusionMode::Dual,
        }
    }

    /// Builds the frozen teacher network for `self.seed`.
    pub fn build(&self) -> Result<TrainedModel> {
        if self.num_answers < 2 {
            return Err(Error::Config("teacher needs at least two answers".into()));
        }
        for (what, g) in [("gain", self.gain), ("mul_gain", self.mul_gain), ("question_gain", self.question_gain)] {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::Config(format!("teacher {what} must be positive, got {g}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut model = VqaModel::init(&self.lstm_config(), &self.dualnet_config(), &mut rng)?;
        let names: Vec<String> = model.fusion.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(model.fusion.params_mut()) {
            if name.starts_with("head.") || !name.ends_with(".W") {
                continue;
            }
            let mut g = self.gain;
            if name.ends_with(".q.W") {
                g *= self.question_gain;
            }
            t.data_mut().iter_mut().for_each(|v| *v *= g);
        }
        let d = self.common_dim;
        for row in model.fusion.head_hidden.w.data_mut().chunks_mut(2 * d) {
            row[..d].iter_mut().for_each(|v| *v *= self.mul_gain);
        }
        Ok(TrainedModel {
            model,
            sources: self.sources.clone(),
            question_vocab: QuestionVocab::from_tokens(TOY_WORDS.iter().map(|w| w.to_string()).collect())?,
            answer_vocab: AnswerVocab::from_answers(toy_answers(self.num_answers))?,
        })
    }
}

/// Sizes and seed for a generated train/dev/test triple.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplits {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSplits {
    fn default() -> Self {
        SyntheticSplits {
            n_train: 8000,
            n_dev: 1000,
            n_test: 1000,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

fn draw_unlabelled(rng: &mut ChaCha8Rng, sources: &[SourceSchema], id: String) -> VqaExample {
    let image_feats = sources
        .iter()
        .map(|s| NamedFeature {
            source: s.name.clone(),
            values: (0..s.dim).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
        })
        .collect();
    let len = rng.gen_range(MIN_QUESTION_LEN..=MAX_QUESTION_LEN);
    let question = (0..len)
        .map(|_| *TOY_WORDS.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ");
    VqaExample {
        example_id: id,
        image_feats,
        question,
        human_answers: Vec::new(),
        multiple_choice: None,
    }
}

/// Teacher argmax label for each example. Depends only on the teacher and the
/// example's own features.
pub fn teacher_labels(teacher: &TrainedModel, examples: &[VqaExample]) -> Result<Vec<usize>> {
    teacher
        .logits(examples)?
        .iter()
        .map(|l| crate::model::predict(l, None))
        .collect()
}

/// Generates three disjoint splits labelled by the teacher. If the teacher
/// puts more than 90% of all examples in one class, the teacher seed is
/// advanced and labelling retried; the seed that was used is recorded in the
/// headers.
pub fn generate_synthetic(teacher: &TeacherSpec, splits: &SyntheticSplits) -> Result<SyntheticData> {
    if splits.n_train == 0 || splits.n_dev == 0 || splits.n_test == 0 {
        return Err(Error::Config("split sizes must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splits.seed);
    let sizes = [("train", splits.n_train), ("dev", splits.n_dev), ("test", splits.n_test)];
    let mut drawn: Vec<Vec<VqaExample>> = sizes
        .iter()
        .map(|&(name, n)| {
            (0..n)
                .map(|i| draw_unlabelled(&mut rng, &teacher.sources, format!("{name}-{i}")))
                .collect()
        })
        .collect();

    let mut spec = teacher.clone();
    let (net, labels) = loop {
        let net = spec.build()?;
        let labels: Vec<Vec<usize>> = drawn
            .iter()
            .map(|exs| teacher_labels(&net, exs))
            .collect::<Result<_>>()?;
        let mut counts = vec![0usize; spec.num_answers];
        labels.iter().flatten().for_each(|&l| counts[l] += 1);
        let total: usize = counts.iter().sum();
        let top = counts.iter().copied().max().unwrap_or(0);
        if (top as f64) <= MAX_CLASS_SHARE * total as f64 {
            break (net, labels);
        }
        if spec.seed - teacher.seed + 1 >= MAX_TEACHER_ATTEMPTS {
            return Err(Error::Degenerate(format!(
                "no teacher seed in {}..{} gives a label distribution with every class at most 90%",
                teacher.seed,
                spec.seed + 1
            )));
        }
        spec.seed += 1;
    };

    let answers = net.answer_vocab.answers();
    let mut out = Vec::with_capacity(3);
    for ((exs, labs), &(name, _)) in drawn.iter_mut().zip(&labels).zip(&sizes) {
        for (ex, &label) in exs.iter_mut().zip(labs) {
            ex.human_answers = vec![answers[label].clone(); NUM_HUMAN_ANSWERS];
            let mut choices: Vec<String> = answers.iter().filter(|a| **a != answers[label]).cloned().collect();
            choices.shuffle(&mut rng);
            choices.truncate(CHOICES_PER_QUESTION.min(answers.len()) - 1);
            choices.push(answers[label].clone());
            choices.shuffle(&mut rng);
            ex.multiple_choice = Some(choices);
        }
        let mut header = DatasetHeader::new(spec.sources.clone());
        header.split = Some(name.to_string());
        header.teacher = Some(spec.clone());
        out.push(Dataset {
            header,
            examples: std::mem::take(exs),
        });
    }
    let test = out.pop().expect("three splits");
    let dev = out.pop().expect("three splits");
    let train = out.pop().expect("three splits");
    Ok(SyntheticData { train, dev, test })
}
