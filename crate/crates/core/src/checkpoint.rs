//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DNCK" | version: u32 | meta_len: u64 | meta: JSON bytes | count: u32
//! count × ( name_len: u32 | name | ndim: u32 | dims: u64 × ndim | data: f64 × prod(dims) )
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::dataset::{SourceSchema, VqaExample};
use crate::encoder::{LstmConfig, LstmParams, QuestionSequence, QuestionVocab};
use crate::error::{Error, Result};
use crate::model::{DualNetConfig, DualNetParams, VqaModel};
use crate::tensor::{softmax_row, Tensor};
use crate::train::AnswerVocab;

const MAGIC: &[u8; 4] = b"DNCK";
const VERSION: u32 = 1;

/// Metadata plus named tensors, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    metadata: &serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let meta = serde_json::to_vec(metadata)?;
    w.write_u64::<LittleEndian>(meta.len() as u64)?;
    w.write_all(&meta)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.read_u64::<LittleEndian>()? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let metadata = serde_json::from_slice(&meta)?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..ndim)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut data = vec![0.0; len];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    Ok(Checkpoint { metadata, tensors })
}

#[derive(Serialize, Deserialize)]
struct ModelMetadata {
    lstm: LstmConfig,
    dualnet: DualNetConfig,
    sources: Vec<SourceSchema>,
    question_vocab: Vec<String>,
    answer_vocab: Vec<String>,
}

/// A model together with everything needed to run it on dataset records.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: VqaModel,
    pub sources: Vec<SourceSchema>,
    pub question_vocab: QuestionVocab,
    pub answer_vocab: AnswerVocab,
}

/// Rows per forward pass when scoring many records.
const SCORING_BATCH: usize = 256;

impl TrainedModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = ModelMetadata {
            lstm: self.model.lstm_config(),
            dualnet: self.model.config().clone(),
            sources: self.sources.clone(),
            question_vocab: self.question_vocab.tokens()[1..].to_vec(),
            answer_vocab: self.answer_vocab.answers().to_vec(),
        };
        let file = BufWriter::new(File::create(path)?);
        write_checkpoint(file, &serde_json::to_value(meta)?, &self.model.named_params())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = read_checkpoint(BufReader::new(File::open(path)?))?;
        let meta: ModelMetadata = serde_json::from_value(ck.metadata)?;
        let mut model = VqaModel::new(LstmParams::zeros(&meta.lstm)?, DualNetParams::zeros(&meta.dualnet)?)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != ck.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                ck.tensors.len()
            )));
        }
        for ((slot, expected), (name, t)) in model.params_mut().into_iter().zip(&names).zip(ck.tensors) {
            if &name != expected || slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match expected {expected} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(TrainedModel {
            model,
            sources: meta.sources,
            question_vocab: QuestionVocab::from_tokens(meta.question_vocab)?,
            answer_vocab: AnswerVocab::from_answers(meta.answer_vocab)?,
        })
    }

    fn check_sources(&self, example: &VqaExample) -> Result<()> {
        let matches = example.image_feats.len() == self.sources.len()
            && example
                .image_feats
                .iter()
                .zip(&self.sources)
                .all(|(f, s)| f.source == s.name && f.values.len() == s.dim);
        if !matches {
            return Err(Error::Invalid(format!(
                "example {} does not match the model's feature sources",
                example.example_id
            )));
        }
        Ok(())
    }

    /// Raw logits per record, in input order.
    pub fn logits(&self, examples: &[VqaExample]) -> Result<Vec<Vec<f64>>> {
        let classes = self.model.config().num_answers;
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(SCORING_BATCH) {
            let mut images: Vec<Vec<f64>> = vec![Vec::new(); self.sources.len()];
            let mut seqs: Vec<QuestionSequence> = Vec::with_capacity(chunk.len());
            for ex in chunk {
                self.check_sources(ex)?;
                for (buf, f) in images.iter_mut().zip(&ex.image_feats) {
                    buf.extend_from_slice(&f.values);
                }
                seqs.push(self.question_vocab.encode(&ex.question)?);
            }
            let images: Vec<Tensor> = images
                .into_iter()
                .zip(&self.sources)
                .map(|(data, s)| Tensor::matrix(chunk.len(), s.dim, data))
                .collect::<Result<_>>()?;
            let refs: Vec<&QuestionSequence> = seqs.iter().collect();
            let logits = self.model.logits(&images, &refs)?;
            out.extend(logits.data().chunks(classes).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Softmax probabilities per record.
    pub fn answer_probs(&self, examples: &[VqaExample]) -> Result<Vec<Vec<f64>>> {
        Ok(self.logits(examples)?.iter().map(|l| softmax_row(l).0).collect())
    }
}
