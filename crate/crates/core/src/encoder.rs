//! Word embedding plus a stacked LSTM that turns a question into a vector.
//!
//! Gates follow the peephole-free formulation
//!
//! ```text
//! i, f, o = σ(W·x + U·h + b)      g = tanh(W·x + U·h + b)
//! c' = f∘c + i∘g                  h' = o∘tanh(c')
//! ```
//!
//! with separate `W`, `U`, `b` per gate. The question vector is the final
//! hidden state of the top layer.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{concat_rows, Tape, Tensor, Var};

/// Id reserved for out-of-vocabulary tokens.
pub const UNKNOWN_TOKEN: usize = 0;
const UNKNOWN_SYMBOL: &str = "<unk>";

/// Gate order used for parameter storage and naming.
const GATES: [&str; 4] = ["i", "f", "g", "o"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
}

impl Default for LstmConfig {
    /// Real-image setting: two layers of 512 units. The embedding width is not
    /// given there; 300 is our choice.
    fn default() -> Self {
        LstmConfig {
            vocab_size: 1000,
            embed_dim: 300,
            hidden_dim: 512,
            num_layers: 2,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("lstm {name} must be at least 1")));
            }
        }
        Ok(())
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }
}

/// Non-empty sequence of in-range vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionSequence {
    token_ids: Vec<usize>,
}

impl QuestionSequence {
    pub fn new(token_ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::Empty("question sequence"));
        }
        if let Some(&bad) = token_ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::IndexOutOfRange {
                what: "token",
                index: bad,
                bound: vocab_size,
            });
        }
        Ok(QuestionSequence { token_ids })
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Lowercases and splits on anything that is not alphanumeric or an apostrophe.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Token ↔ id table. Id 0 is always the unknown token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl QuestionVocab {
    pub fn from_tokens(known: Vec<String>) -> Result<Self> {
        let mut tokens = vec![UNKNOWN_SYMBOL.to_owned()];
        tokens.extend(known.into_iter().filter(|t| t != UNKNOWN_SYMBOL));
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(QuestionVocab { tokens, index })
    }

    /// Builds a vocabulary from question texts, most frequent first, ties
    /// broken lexicographically. `max_size` counts the unknown slot.
    pub fn build<'a>(questions: impl IntoIterator<Item = &'a str>, max_size: Option<usize>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for q in questions {
            for tok in tokenize(q) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(max) = max_size {
            ranked.truncate(max.saturating_sub(1));
        }
        QuestionVocab::from_tokens(ranked.into_iter().map(|(t, _)| t).collect())
            .expect("counted tokens are unique")
    }

    /// Reads a vocabulary file: one token per line, line number = id, line 0
    /// reserved for the unknown token.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(first) if first.trim() == UNKNOWN_SYMBOL => {}
            Some(_) => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("first line must be the reserved token {UNKNOWN_SYMBOL}"),
                })
            }
            None => return Err(Error::Empty("vocabulary file")),
        }
        QuestionVocab::from_tokens(lines.map(|l| l.trim().to_owned()).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNKNOWN_TOKEN)
    }

    pub fn encode(&self, text: &str) -> Result<QuestionSequence> {
        let ids = tokenize(text).iter().map(|t| self.id(t)).collect();
        QuestionSequence::new(ids, self.len())
    }
}

/// One LSTM layer: input weights `W` (hidden×in), recurrent weights `U`
/// (hidden×hidden) and a bias per gate, in `i, f, g, o` order.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub w: [Tensor; 4],
    pub u: [Tensor; 4],
    pub b: [Tensor; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub embedding: Tensor,
    pub layers: Vec<LstmLayer>,
}

impl LstmParams {
    /// Uniform `[-a, a]` weights with `a = 1/sqrt(hidden)`, forget-gate bias 1,
    /// other biases 0.
    pub fn init(cfg: &LstmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let a = 1.0 / (cfg.hidden_dim as f64).sqrt();
        let mut uniform = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect();
            Tensor::matrix(rows, cols, data).expect("sized by construction")
        };
        let embedding = uniform(cfg.vocab_size, cfg.embed_dim);
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let input = cfg.layer_input(l);
                LstmLayer {
                    w: std::array::from_fn(|_| uniform(cfg.hidden_dim, input)),
                    u: std::array::from_fn(|_| uniform(cfg.hidden_dim, cfg.hidden_dim)),
                    b: std::array::from_fn(|gate| {
                        Tensor::filled(&[cfg.hidden_dim], if gate == 1 { 1.0 } else { 0.0 })
                    }),
                }
            })
            .collect();
        Ok(LstmParams { embedding, layers })
    }

    pub fn zeros(cfg: &LstmConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.num_layers)
            .map(|l| LstmLayer {
                w: std::array::from_fn(|_| Tensor::zeros(&[cfg.hidden_dim, cfg.layer_input(l)])),
                u: std::array::from_fn(|_| Tensor::zeros(&[cfg.hidden_dim, cfg.hidden_dim])),
                b: std::array::from_fn(|_| Tensor::zeros(&[cfg.hidden_dim])),
            })
            .collect();
        Ok(LstmParams {
            embedding: Tensor::zeros(&[cfg.vocab_size, cfg.embed_dim]),
            layers,
        })
    }

    pub fn config(&self) -> LstmConfig {
        let (vocab_size, embed_dim) = (self.embedding.shape()[0], self.embedding.shape()[1]);
        LstmConfig {
            vocab_size,
            embed_dim,
            hidden_dim: self.layers[0].b[0].len(),
            num_layers: self.layers.len(),
        }
    }

    /// Parameters in canonical order with their checkpoint names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("lstm.embed".to_owned(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (kind, group) in [("W", &layer.w), ("U", &layer.u), ("b", &layer.b)] {
                for (gate, t) in GATES.iter().zip(group) {
                    out.push((format!("lstm.l{l}.{kind}_{gate}"), t));
                }
            }
        }
        out
    }

    /// Same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend(layer.w.iter_mut());
            out.extend(layer.u.iter_mut());
            out.extend(layer.b.iter_mut());
        }
        out
    }

    pub fn num_tensors(&self) -> usize {
        1 + 12 * self.layers.len()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundLstm<'t> {
        let vars: Vec<Var<'t>> = self.named_params().into_iter().map(|(_, t)| tape.param(t)).collect();
        self.bind_vars(&vars)
    }

    /// Builds the bound view from already-recorded variables in canonical order.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t>]) -> BoundLstm<'t> {
        assert_eq!(vars.len(), self.num_tensors(), "wrong number of lstm variables");
        let layers = vars[1..]
            .chunks_exact(12)
            .map(|c| BoundLayer {
                w: [c[0], c[1], c[2], c[3]],
                u: [c[4], c[5], c[6], c[7]],
                b: [c[8], c[9], c[10], c[11]],
            })
            .collect();
        BoundLstm {
            embedding: vars[0],
            layers,
            hidden_dim: self.layers[0].b[0].len(),
        }
    }

    /// Encodes one question without keeping a tape around.
    pub fn encode(&self, seq: &QuestionSequence) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let q = encode_question(&bound, seq)?;
        let v = q.value();
        Tensor::vector(v.data().to_vec())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayer<'t> {
    pub w: [Var<'t>; 4],
    pub u: [Var<'t>; 4],
    pub b: [Var<'t>; 4],
}

#[derive(Clone, Debug)]
pub struct BoundLstm<'t> {
    pub embedding: Var<'t>,
    pub layers: Vec<BoundLayer<'t>>,
    hidden_dim: usize,
}

/// Embedding rows for a batch of token ids, `ids.len()×embed_dim`.
pub fn embed<'t>(bound: &BoundLstm<'t>, ids: &[usize]) -> Result<Var<'t>> {
    bound.embedding.gather_rows(ids)
}

/// One recurrent step over a batch of rows.
pub fn lstm_step<'t>(
    x: &Var<'t>,
    h: &Var<'t>,
    c: &Var<'t>,
    layer: &BoundLayer<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let gate = |k: usize| -> Result<Var<'t>> {
        x.matmul_t(&layer.w[k])?
            .add(&h.matmul_t(&layer.u[k])?)?
            .add_bias(&layer.b[k])
    };
    let i = gate(0)?.sigmoid()?;
    let f = gate(1)?.sigmoid()?;
    let g = gate(2)?.tanh()?;
    let o = gate(3)?.sigmoid()?;
    let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
    let h_next = o.mul(&c_next.tanh()?)?;
    Ok((h_next, c_next))
}

/// Runs a batch of equal-length sequences through every layer and returns the
/// top layer's final hidden state, `batch×hidden`.
fn encode_same_length<'t>(bound: &BoundLstm<'t>, seqs: &[&QuestionSequence]) -> Result<Var<'t>> {
    let tape = bound.embedding.tape();
    let steps = seqs[0].len();
    let zeros = Tensor::zeros(&[seqs.len(), bound.hidden_dim]);
    let mut inputs: Vec<Var<'t>> = (0..steps)
        .map(|t| {
            let ids: Vec<usize> = seqs.iter().map(|s| s.token_ids[t]).collect();
            embed(bound, &ids)
        })
        .collect::<Result<_>>()?;
    for layer in &bound.layers {
        let mut h = tape.constant(&zeros);
        let mut c = tape.constant(&zeros);
        for x in inputs.iter_mut() {
            (h, c) = lstm_step(x, &h, &c, layer)?;
            *x = h;
        }
    }
    Ok(*inputs.last().expect("non-empty sequence"))
}

/// Encodes a batch of questions of any lengths, `batch×hidden`, rows in input
/// order. Sequences are grouped by length internally; each group runs as one
/// dense batch.
pub fn encode_batch<'t>(bound: &BoundLstm<'t>, seqs: &[&QuestionSequence]) -> Result<Var<'t>> {
    if seqs.is_empty() {
        return Err(Error::Empty("question batch"));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::Empty("question sequence"));
        }
        groups.entry(s.len()).or_default().push(i);
    }
    if groups.len() == 1 {
        return encode_same_length(bound, seqs);
    }
    let mut parts = Vec::with_capacity(groups.len());
    let mut position = vec![0usize; seqs.len()];
    let mut row = 0;
    for members in groups.values() {
        let group: Vec<&QuestionSequence> = members.iter().map(|&i| seqs[i]).collect();
        parts.push(encode_same_length(bound, &group)?);
        for &i in members {
            position[i] = row;
            row += 1;
        }
    }
    concat_rows(&parts)?.gather_rows(&position)
}

/// Question vector for a single sequence, shape `[1, hidden]`.
pub fn encode_question<'t>(bound: &BoundLstm<'t>, seq: &QuestionSequence) -> Result<Var<'t>> {
    encode_same_length(bound, &[seq])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_many, sigmoid};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(layers: usize) -> LstmConfig {
        LstmConfig {
            vocab_size: 7,
            embed_dim: 3,
            hidden_dim: 4,
            num_layers: layers,
        }
    }

    /// Straight scalar loops over the gate equations.
    fn oracle_step(x: &[f64], h: &[f64], c: &[f64], layer: &LstmLayer) -> (Vec<f64>, Vec<f64>) {
        let hidden = h.len();
        let pre = |k: usize, j: usize| {
            let w = layer.w[k].data();
            let u = layer.u[k].data();
            let mut s = layer.b[k].data()[j];
            for (p, xp) in x.iter().enumerate() {
                s += w[j * x.len() + p] * xp;
            }
            for (p, hp) in h.iter().enumerate() {
                s += u[j * hidden + p] * hp;
            }
            s
        };
        let mut h2 = vec![0.0; hidden];
        let mut c2 = vec![0.0; hidden];
        for j in 0..hidden {
            let i = sigmoid(pre(0, j));
            let f = sigmoid(pre(1, j));
            let g = pre(2, j).tanh();
            let o = sigmoid(pre(3, j));
            c2[j] = f * c[j] + i * g;
            h2[j] = o * c2[j].tanh();
        }
        (h2, c2)
    }

    fn oracle_encode(params: &LstmParams, ids: &[usize]) -> Vec<f64> {
        let e = params.embedding.shape()[1];
        let mut seq: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| params.embedding.data()[id * e..(id + 1) * e].to_vec())
            .collect();
        for layer in &params.layers {
            let hidden = layer.b[0].len();
            let (mut h, mut c) = (vec![0.0; hidden], vec![0.0; hidden]);
            for x in seq.iter_mut() {
                (h, c) = oracle_step(x, &h, &c, layer);
                *x = h.clone();
            }
        }
        seq.pop().unwrap()
    }

    #[test]
    fn embed_examples() {
        let c = LstmConfig {
            vocab_size: 4,
            embed_dim: 4,
            hidden_dim: 2,
            num_layers: 1,
        };
        let mut p = LstmParams::zeros(&c).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape);
        assert_eq!(embed(&b, &[3]).unwrap().value().data(), &[0.0; 4]);

        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        p.embedding = Tensor::matrix(4, 4, eye).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape);
        assert_eq!(embed(&b, &[2]).unwrap().value().data(), &[0., 0., 1., 0.]);
        assert!(matches!(embed(&b, &[4]), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn embed_equals_one_hot_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LstmParams::init(&cfg(1), &mut rng).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape);
        for k in 0..7 {
            let mut onehot = vec![0.0; 7];
            onehot[k] = 1.0;
            let oh = tape.constant(&Tensor::matrix(1, 7, onehot).unwrap());
            let via_matmul = oh.matmul(&b.embedding).unwrap().value();
            let via_lookup = embed(&b, &[k]).unwrap().value();
            assert_eq!(via_matmul.data(), via_lookup.data());
        }
    }

    #[test]
    fn zero_step_is_zero() {
        let p = LstmParams::zeros(&cfg(1)).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape);
        let z = tape.constant(&Tensor::zeros(&[1, 4]));
        let x = tape.constant(&Tensor::zeros(&[1, 3]));
        let (h, c) = lstm_step(&x, &z, &z, &b.layers[0]).unwrap();
        assert_eq!(h.value().data(), &[0.0; 4]);
        assert_eq!(c.value().data(), &[0.0; 4]);
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        let mut p = LstmParams::zeros(&cfg(1)).unwrap();
        p.layers[0].b[0] = Tensor::filled(&[4], -50.0);
        p.layers[0].b[1] = Tensor::filled(&[4], 50.0);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let x = tape.constant(&Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap());
        let h = tape.constant(&Tensor::matrix(1, 4, vec![0.1, 0.2, -0.3, 0.4]).unwrap());
        let c0 = [0.5, -1.5, 2.0, 0.0];
        let c = tape.constant(&Tensor::matrix(1, 4, c0.to_vec()).unwrap());
        let (_, c2) = lstm_step(&x, &h, &c, &b.layers[0]).unwrap();
        for (a, e) in c2.value().data().iter().zip(c0) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LstmParams::init(&cfg(1), &mut rng).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (eh, ec) = oracle_step(&x, &h, &c, &p.layers[0]);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let v = |d: &[f64]| tape.constant(&Tensor::matrix(1, d.len(), d.to_vec()).unwrap());
        let (ah, ac) = lstm_step(&v(&x), &v(&h), &v(&c), &b.layers[0]).unwrap();
        for (a, e) in ah.value().data().iter().zip(&eh).chain(ac.value().data().iter().zip(&ec)) {
            assert_abs_diff_eq!(*a, *e, epsilon = 1e-14);
        }
    }

    #[test]
    fn encode_examples() {
        let p = LstmParams::zeros(&cfg(2)).unwrap();
        let seq = QuestionSequence::new(vec![3], 7).unwrap();
        assert_eq!(p.encode(&seq).unwrap().data(), &[0.0; 4]);
        assert!(matches!(QuestionSequence::new(vec![], 7), Err(Error::Empty(_))));
        assert!(QuestionSequence::new(vec![7], 7).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LstmParams::init(&cfg(2), &mut rng).unwrap();
        let seq = QuestionSequence::new(vec![1, 5, 2], 7).unwrap();
        let q = p.encode(&seq).unwrap();
        assert_eq!(q.shape(), &[4]);
        for (a, e) in q.data().iter().zip(oracle_encode(&p, &[1, 5, 2])) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-14);
        }
    }

    #[test]
    fn single_layer_encode_is_iterated_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = LstmParams::init(&cfg(1), &mut rng).unwrap();
        let seq = QuestionSequence::new(vec![0, 6, 6, 2], 7).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape);
        let z = tape.constant(&Tensor::zeros(&[1, 4]));
        let (mut h, mut c) = (z, z);
        for &id in seq.token_ids() {
            (h, c) = lstm_step(&embed(&b, &[id]).unwrap(), &h, &c, &b.layers[0]).unwrap();
        }
        assert_eq!(h.value().data(), encode_question(&b, &seq).unwrap().value().data());
    }

    #[test]
    fn mixed_length_batch_matches_individual_encodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = LstmParams::init(&cfg(2), &mut rng).unwrap();
        let seqs: Vec<QuestionSequence> = [vec![1, 2, 3], vec![4], vec![5, 6], vec![2, 2, 2], vec![0]]
            .into_iter()
            .map(|ids| QuestionSequence::new(ids, 7).unwrap())
            .collect();
        let refs: Vec<&QuestionSequence> = seqs.iter().collect();
        let tape = Tape::new();
        let b = p.bind(&tape);
        let batch = encode_batch(&b, &refs).unwrap().value();
        assert_eq!(batch.shape(), &[5, 4]);
        for (row, s) in batch.data().chunks(4).zip(&seqs) {
            assert_eq!(row, p.encode(s).unwrap().data());
        }
    }

    #[test]
    fn outputs_bounded_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = LstmParams::init(&cfg(2), &mut rng).unwrap();
        for t in p.params_mut() {
            for v in t.data_mut() {
                *v *= 20.0;
            }
        }
        for len in 1..9 {
            let ids: Vec<usize> = (0..len).map(|i| (i * 3) % 7).collect();
            let seq = QuestionSequence::new(ids, 7).unwrap();
            let q = p.encode(&seq).unwrap();
            assert_eq!(q.shape(), &[4]);
            assert!(q.data().iter().all(|v| v.abs() < 1.0));
            assert_eq!(q, p.encode(&seq).unwrap());
        }
    }

    #[test]
    fn encoder_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = LstmParams::init(&cfg(2), &mut rng).unwrap();
        let seq = QuestionSequence::new(vec![1, 4, 4, 6, 0], 7).unwrap();
        let tensors: Vec<Tensor> = p.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        let errs = grad_check_many(
            |_, vars| {
                let b = p.bind_vars(vars);
                encode_question(&b, &seq)?.softmax_cross_entropy(&[2])
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        for (e, (name, _)) in errs.iter().zip(p.named_params()) {
            assert!(*e < 1e-4, "{name}: relative error {e}");
        }
    }

    #[test]
    fn vocab_build_and_file_round_trip() {
        let v = QuestionVocab::build(["How many trees?", "is this a tree", "how many cats"], None);
        assert_eq!(v.tokens()[0], "<unk>");
        assert_eq!(v.tokens()[1], "how");
        assert_eq!(v.tokens()[2], "many");
        assert_eq!(v.id("zebra"), UNKNOWN_TOKEN);
        assert_eq!(v.encode("How MANY zebra").unwrap().token_ids(), &[1, 2, 0]);
        assert!(v.encode("?!").is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(QuestionVocab::load(&path).unwrap(), v);

        let small = QuestionVocab::build(["a b c a"], Some(2));
        assert_eq!(small.tokens(), &["<unk>", "a"]);
    }
}
