//! The dual-path fusion network.
//!
//! Every image source `Iᵢ` and the question vector `Q` are projected into a
//! common `d`-dimensional space twice, with separate weights per path:
//!
//! ```text
//! F_M = tanh(W_M1·I₁+b) ∘ … ∘ tanh(W_MN·I_N+b) ∘ tanh(W_Mq·Q+b)
//! F_S = tanh(W_S1·I₁+b) + … + tanh(W_SN·I_N+b) + tanh(W_Sq·Q+b)
//! F   = [F_M, F_S]
//! logits = W_f2·tanh(W_f1·F + b₁) + b₂
//! ```
//!
//! `sum_only` and `mul_only` keep a single path and feed it to the head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_batch, BoundLstm, LstmConfig, LstmParams, QuestionSequence};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Dual,
    SumOnly,
    MulOnly,
}

impl FusionMode {
    pub fn has_mul(self) -> bool {
        matches!(self, FusionMode::Dual | FusionMode::MulOnly)
    }

    pub fn has_sum(self) -> bool {
        matches!(self, FusionMode::Dual | FusionMode::SumOnly)
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Dual => "dual",
            FusionMode::SumOnly => "sum_only",
            FusionMode::MulOnly => "mul_only",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(FusionMode::Dual),
            "sum" | "sum_only" => Ok(FusionMode::SumOnly),
            "mul" | "mul_only" => Ok(FusionMode::MulOnly),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

fn default_head_dim() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualNetConfig {
    /// One entry per image-feature source.
    pub image_dims: Vec<usize>,
    pub question_dim: usize,
    /// Common-space dimension `d`.
    pub common_dim: usize,
    /// Hidden width of the classifier head.
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    pub num_answers: usize,
    pub mode: FusionMode,
}

impl DualNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_dims.is_empty() {
            return Err(Error::Config("at least one image feature source is required".into()));
        }
        if self.image_dims.contains(&0) {
            return Err(Error::Config("image feature dimensions must be positive".into()));
        }
        if self.question_dim == 0 || self.common_dim == 0 || self.head_dim == 0 {
            return Err(Error::Config("question, common and head dimensions must be positive".into()));
        }
        if self.num_answers < 2 {
            return Err(Error::Config("at least two answers are required".into()));
        }
        Ok(())
    }

    /// Width of the fused vector fed to the head.
    pub fn fused_dim(&self) -> usize {
        match self.mode {
            FusionMode::Dual => 2 * self.common_dim,
            FusionMode::SumOnly | FusionMode::MulOnly => self.common_dim,
        }
    }
}

/// Affine map `x ↦ W·x + b` with `W` stored `out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let a = 1.0 / (in_dim as f64).sqrt();
        let data = (0..out_dim * in_dim).map(|_| rng.gen_range(-a..=a)).collect();
        Linear {
            w: Tensor::matrix(out_dim, in_dim, data).expect("sized by construction"),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[out_dim, in_dim]),
            b: Tensor::zeros(&[out_dim]),
        }
    }
}

/// Projections of one fusion path: one per image source plus the question.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionPath {
    pub images: Vec<Linear>,
    pub question: Linear,
}

impl FusionPath {
    fn build(cfg: &DualNetConfig, mut make: impl FnMut(usize, usize) -> Linear) -> Self {
        FusionPath {
            images: cfg.image_dims.iter().map(|&dim| make(cfg.common_dim, dim)).collect(),
            question: make(cfg.common_dim, cfg.question_dim),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, l) in self.images.iter().enumerate() {
            out.push((format!("{prefix}.img{i}.W"), &l.w));
            out.push((format!("{prefix}.img{i}.b"), &l.b));
        }
        out.push((format!("{prefix}.q.W"), &self.question.w));
        out.push((format!("{prefix}.q.b"), &self.question.b));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for l in &mut self.images {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.question.w);
        out.push(&mut self.question.b);
    }
}

/// Learnable weights of the fusion network. The two paths own separate
/// tensors; an ablation mode simply has no tensors for the missing path.
#[derive(Clone, Debug, PartialEq)]
pub struct DualNetParams {
    config: DualNetConfig,
    pub mul: Option<FusionPath>,
    pub sum: Option<FusionPath>,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

impl DualNetParams {
    pub fn init(cfg: &DualNetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mul = cfg.mode.has_mul().then(|| FusionPath::build(cfg, |o, i| Linear::init(o, i, rng)));
        let sum = cfg.mode.has_sum().then(|| FusionPath::build(cfg, |o, i| Linear::init(o, i, rng)));
        Ok(DualNetParams {
            config: cfg.clone(),
            mul,
            sum,
            head_hidden: Linear::init(cfg.head_dim, cfg.fused_dim(), rng),
            head_out: Linear::init(cfg.num_answers, cfg.head_dim, rng),
        })
    }

    pub fn zeros(cfg: &DualNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(DualNetParams {
            config: cfg.clone(),
            mul: cfg.mode.has_mul().then(|| FusionPath::build(cfg, Linear::zeros)),
            sum: cfg.mode.has_sum().then(|| FusionPath::build(cfg, Linear::zeros)),
            head_hidden: Linear::zeros(cfg.head_dim, cfg.fused_dim()),
            head_out: Linear::zeros(cfg.num_answers, cfg.head_dim),
        })
    }

    pub fn config(&self) -> &DualNetConfig {
        &self.config
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(p) = &self.mul {
            p.named("mul", &mut out);
        }
        if let Some(p) = &self.sum {
            p.named("sum", &mut out);
        }
        out.push(("head.W1".into(), &self.head_hidden.w));
        out.push(("head.b1".into(), &self.head_hidden.b));
        out.push(("head.W2".into(), &self.head_out.w));
        out.push(("head.b2".into(), &self.head_out.b));
        out
    }

    /// Same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(p) = &mut self.mul {
            p.tensors_mut(&mut out);
        }
        if let Some(p) = &mut self.sum {
            p.tensors_mut(&mut out);
        }
        out.extend([
            &mut self.head_hidden.w,
            &mut self.head_hidden.b,
            &mut self.head_out.w,
            &mut self.head_out.b,
        ]);
        out
    }

    pub fn num_tensors(&self) -> usize {
        let per_path = 2 * (self.config.image_dims.len() + 1);
        let paths = usize::from(self.mul.is_some()) + usize::from(self.sum.is_some());
        paths * per_path + 4
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundDualNet<'t> {
        let vars: Vec<Var<'t>> = self.named_params().into_iter().map(|(_, t)| tape.param(t)).collect();
        self.bind_vars(&vars)
    }

    pub fn bind_vars<'t>(&self, vars: &[Var<'t>]) -> BoundDualNet<'t> {
        assert_eq!(vars.len(), self.num_tensors(), "wrong number of fusion variables");
        let n = self.config.image_dims.len();
        let mut it = vars.iter().copied();
        let mut take_path = || {
            let images = (0..n)
                .map(|_| BoundLinear {
                    w: it.next().unwrap(),
                    b: it.next().unwrap(),
                })
                .collect();
            let question = BoundLinear {
                w: it.next().unwrap(),
                b: it.next().unwrap(),
            };
            BoundPath { images, question }
        };
        let mul = self.mul.as_ref().map(|_| take_path());
        let sum = self.sum.as_ref().map(|_| take_path());
        let mut rest = vars[vars.len() - 4..].iter().copied();
        let mut next = || rest.next().unwrap();
        BoundDualNet {
            mode: self.config.mode,
            num_sources: n,
            mul,
            sum,
            head_hidden: BoundLinear { w: next(), b: next() },
            head_out: BoundLinear { w: next(), b: next() },
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

impl<'t> BoundLinear<'t> {
    /// `x·Wᵀ + b` over a batch of rows.
    pub fn apply(&self, x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul_t(&self.w)?.add_bias(&self.b)
    }
}

#[derive(Clone, Debug)]
pub struct BoundPath<'t> {
    pub images: Vec<BoundLinear<'t>>,
    pub question: BoundLinear<'t>,
}

impl<'t> BoundPath<'t> {
    /// `tanh` projections of every branch, image sources first, question last.
    fn branches(&self, images: &[Var<'t>], q: &Var<'t>) -> Result<Vec<Var<'t>>> {
        if images.len() != self.images.len() {
            return Err(Error::Invalid(format!(
                "expected {} image feature sources, got {}",
                self.images.len(),
                images.len()
            )));
        }
        let mut out = Vec::with_capacity(images.len() + 1);
        for (proj, x) in self.images.iter().zip(images) {
            out.push(proj.apply(x)?.tanh()?);
        }
        out.push(self.question.apply(q)?.tanh()?);
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct BoundDualNet<'t> {
    pub mode: FusionMode,
    pub num_sources: usize,
    pub mul: Option<BoundPath<'t>>,
    pub sum: Option<BoundPath<'t>>,
    pub head_hidden: BoundLinear<'t>,
    pub head_out: BoundLinear<'t>,
}

/// Element-wise product of all projected branches, left to right.
pub fn mul_path<'t>(path: &BoundPath<'t>, images: &[Var<'t>], q: &Var<'t>) -> Result<Var<'t>> {
    let branches = path.branches(images, q)?;
    let mut acc = branches[0];
    for b in &branches[1..] {
        acc = acc.mul(b)?;
    }
    Ok(acc)
}

/// Element-wise sum of all projected branches, left to right.
pub fn sum_path<'t>(path: &BoundPath<'t>, images: &[Var<'t>], q: &Var<'t>) -> Result<Var<'t>> {
    let branches = path.branches(images, q)?;
    let mut acc = branches[0];
    for b in &branches[1..] {
        acc = acc.add(b)?;
    }
    Ok(acc)
}

/// Intermediate and final outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput<'t> {
    pub mul: Option<Var<'t>>,
    pub sum: Option<Var<'t>>,
    pub fused: Var<'t>,
    pub logits: Var<'t>,
}

/// Fusion and head for a batch of rows. `images[i]` is `batch×image_dims[i]`
/// and `q` is `batch×question_dim`. Returns raw logits, no softmax.
pub fn forward<'t>(net: &BoundDualNet<'t>, images: &[Var<'t>], q: &Var<'t>) -> Result<FusionOutput<'t>> {
    let mul = net.mul.as_ref().map(|p| mul_path(p, images, q)).transpose()?;
    let sum = net.sum.as_ref().map(|p| sum_path(p, images, q)).transpose()?;
    let fused = match (mul, sum) {
        (Some(m), Some(s)) => m.concat(&s)?,
        (Some(m), None) => m,
        (None, Some(s)) => s,
        (None, None) => unreachable!("every mode has at least one path"),
    };
    let hidden = net.head_hidden.apply(&fused)?.tanh()?;
    let logits = net.head_out.apply(&hidden)?;
    Ok(FusionOutput { mul, sum, fused, logits })
}

/// Argmax over all logits, or only over `restrict` when given. Ties go to the
/// lowest index.
pub fn predict(logits: &[f64], restrict: Option<&[usize]>) -> Result<usize> {
    let candidates: Box<dyn Iterator<Item = usize>> = match restrict {
        None => Box::new(0..logits.len()),
        Some([]) => return Err(Error::Empty("answer restriction set")),
        Some(set) => {
            if let Some(&bad) = set.iter().find(|&&i| i >= logits.len()) {
                return Err(Error::IndexOutOfRange {
                    what: "answer",
                    index: bad,
                    bound: logits.len(),
                });
            }
            let mut sorted = set.to_vec();
            sorted.sort_unstable();
            Box::new(sorted.into_iter())
        }
    };
    let mut best: Option<usize> = None;
    for i in candidates {
        if best.is_none_or(|b| logits[i] > logits[b]) {
            best = Some(i);
        }
    }
    best.ok_or(Error::Empty("logits"))
}

/// Question encoder plus fusion network: the full trainable model.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaModel {
    pub encoder: LstmParams,
    pub fusion: DualNetParams,
}

#[derive(Clone, Debug)]
pub struct BoundModel<'t> {
    pub encoder: BoundLstm<'t>,
    pub fusion: BoundDualNet<'t>,
}

impl VqaModel {
    pub fn new(encoder: LstmParams, fusion: DualNetParams) -> Result<Self> {
        let hidden = encoder.config().hidden_dim;
        if fusion.config().question_dim != hidden {
            return Err(Error::Config(format!(
                "question_dim {} does not match lstm hidden_dim {hidden}",
                fusion.config().question_dim
            )));
        }
        Ok(VqaModel { encoder, fusion })
    }

    pub fn init(lstm: &LstmConfig, net: &DualNetConfig, rng: &mut impl Rng) -> Result<Self> {
        let encoder = LstmParams::init(lstm, rng)?;
        let fusion = DualNetParams::init(net, rng)?;
        VqaModel::new(encoder, fusion)
    }

    pub fn lstm_config(&self) -> LstmConfig {
        self.encoder.config()
    }

    pub fn config(&self) -> &DualNetConfig {
        self.fusion.config()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named_params();
        out.extend(self.fusion.named_params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        out.extend(self.fusion.params_mut());
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        let vars: Vec<Var<'t>> = self.named_params().into_iter().map(|(_, t)| tape.param(t)).collect();
        self.bind_vars(&vars)
    }

    pub fn bind_vars<'t>(&self, vars: &[Var<'t>]) -> BoundModel<'t> {
        let split = self.encoder.num_tensors();
        BoundModel {
            encoder: self.encoder.bind_vars(&vars[..split]),
            fusion: self.fusion.bind_vars(&vars[split..]),
        }
    }

    /// Full forward pass for a batch. `images[i]` holds one row per example.
    pub fn forward<'t>(
        bound: &BoundModel<'t>,
        images: &[Tensor],
        questions: &[&QuestionSequence],
    ) -> Result<FusionOutput<'t>> {
        let tape = bound.encoder.embedding.tape();
        let q = encode_batch(&bound.encoder, questions)?;
        let imgs: Vec<Var<'t>> = images.iter().map(|t| tape.constant(t)).collect();
        forward(&bound.fusion, &imgs, &q)
    }

    /// Logits for a batch without keeping gradients, `batch×num_answers`.
    pub fn logits(&self, images: &[Tensor], questions: &[&QuestionSequence]) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        Ok(VqaModel::forward(&bound, images, questions)?.logits.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(image_dims: Vec<usize>, mode: FusionMode) -> DualNetConfig {
        DualNetConfig {
            image_dims,
            question_dim: 3,
            common_dim: 4,
            head_dim: 5,
            num_answers: 6,
            mode,
        }
    }

    fn random_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mode_parsing_and_dims() {
        assert_eq!("sum".parse::<FusionMode>().unwrap(), FusionMode::SumOnly);
        assert_eq!("mul_only".parse::<FusionMode>().unwrap(), FusionMode::MulOnly);
        assert!("both".parse::<FusionMode>().is_err());
        assert_eq!(cfg(vec![2], FusionMode::Dual).fused_dim(), 8);
        assert_eq!(cfg(vec![2], FusionMode::SumOnly).fused_dim(), 4);
        let mut bad = cfg(vec![2], FusionMode::Dual);
        bad.num_answers = 1;
        assert!(bad.validate().is_err());
        bad = cfg(vec![], FusionMode::Dual);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mul_path_zero_branch_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = DualNetParams::init(&cfg(vec![2, 3], FusionMode::Dual), &mut rng).unwrap();
        let path = p.mul.as_mut().unwrap();
        path.images[1] = Linear::zeros(4, 3);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let imgs = [tape.constant(&random_rows(2, 2, &mut rng)), tape.constant(&random_rows(2, 3, &mut rng))];
        let q = tape.constant(&random_rows(2, 3, &mut rng));
        let fm = mul_path(b.mul.as_ref().unwrap(), &imgs, &q).unwrap();
        assert!(fm.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mul_path_hand_example() {
        // N=1, d=1: both branches give tanh(atanh(0.5)) = 0.5.
        let c = DualNetConfig {
            image_dims: vec![1],
            question_dim: 1,
            common_dim: 1,
            head_dim: 1,
            num_answers: 2,
            mode: FusionMode::MulOnly,
        };
        let mut p = DualNetParams::zeros(&c).unwrap();
        let path = p.mul.as_mut().unwrap();
        let w = Tensor::matrix(1, 1, vec![0.5f64.atanh()]).unwrap();
        path.images[0].w = w.clone();
        path.question.w = w;
        let tape = Tape::new();
        let b = p.bind(&tape);
        let one = tape.constant(&Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let fm = mul_path(b.mul.as_ref().unwrap(), &[one], &one).unwrap();
        assert!((fm.item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sum_path_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cfg(vec![2, 3], FusionMode::SumOnly);
        let p = DualNetParams::zeros(&c).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape);
        let imgs = [tape.constant(&random_rows(1, 2, &mut rng)), tape.constant(&random_rows(1, 3, &mut rng))];
        let q = tape.constant(&random_rows(1, 3, &mut rng));
        let fs = sum_path(b.sum.as_ref().unwrap(), &imgs, &q).unwrap();
        assert_eq!(fs.value().data(), &[0.0; 4]);

        // Biases set to atanh of the target branch outputs, zero weights.
        let c = DualNetConfig {
            image_dims: vec![1, 1],
            question_dim: 1,
            common_dim: 2,
            head_dim: 1,
            num_answers: 2,
            mode: FusionMode::SumOnly,
        };
        let mut p = DualNetParams::zeros(&c).unwrap();
        let atanh = |v: [f64; 2]| Tensor::vector(v.iter().map(|x| x.atanh()).collect()).unwrap();
        let path = p.sum.as_mut().unwrap();
        path.images[0].b = atanh([0.5, -0.5]);
        path.images[1].b = atanh([0.1, 0.1]);
        path.question.b = atanh([0.2, 0.0]);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let x = tape.constant(&Tensor::matrix(1, 1, vec![0.7]).unwrap());
        let fs = sum_path(b.sum.as_ref().unwrap(), &[x, x], &x).unwrap().value();
        assert!((fs.data()[0] - 0.8).abs() < 1e-12);
        assert!((fs.data()[1] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn path_outputs_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = DualNetParams::init(&cfg(vec![2, 3, 4], FusionMode::Dual), &mut rng).unwrap();
        for t in p.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
        let tape = Tape::new();
        let b = p.bind(&tape);
        let imgs: Vec<Var> = [2, 3, 4].iter().map(|&d| tape.constant(&random_rows(8, d, &mut rng))).collect();
        let q = tape.constant(&random_rows(8, 3, &mut rng));
        let out = forward(&b, &imgs, &q).unwrap();
        assert!(out.mul.unwrap().value().data().iter().all(|v| v.abs() < 1.0));
        assert!(out.sum.unwrap().value().data().iter().all(|v| v.abs() <= 4.0));
        assert_eq!(out.fused.shape(), vec![8, 8]);
    }

    #[test]
    fn wrong_source_count_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = DualNetParams::init(&cfg(vec![2, 3], FusionMode::Dual), &mut rng).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape);
        let q = tape.constant(&random_rows(1, 3, &mut rng));
        let img = tape.constant(&random_rows(1, 2, &mut rng));
        assert!(matches!(forward(&b, &[img], &q), Err(Error::Invalid(_))));
        let wrong_dim = tape.constant(&random_rows(1, 5, &mut rng));
        assert!(matches!(forward(&b, &[img, wrong_dim], &q), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let p = DualNetParams::zeros(&cfg(vec![2], FusionMode::Dual)).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape);
        let img = tape.constant(&Tensor::filled(&[1, 2], 0.5));
        let q = tape.constant(&Tensor::filled(&[1, 3], -0.5));
        let out = forward(&b, &[img], &q).unwrap();
        assert_eq!(out.logits.value().data(), &[0.0; 6]);
    }

    #[test]
    fn dual_with_sum_columns_zeroed_equals_mul_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dual_cfg = cfg(vec![2, 3], FusionMode::Dual);
        let mut dual = DualNetParams::init(&dual_cfg, &mut rng).unwrap();
        let d = dual_cfg.common_dim;
        let w1 = dual.head_hidden.w.data_mut();
        for row in w1.chunks_mut(2 * d) {
            row[d..].fill(0.0);
        }
        let mut mul_only = DualNetParams::zeros(&cfg(vec![2, 3], FusionMode::MulOnly)).unwrap();
        mul_only.mul = dual.mul.clone();
        let trimmed: Vec<f64> = dual.head_hidden.w.data().chunks(2 * d).flat_map(|r| r[..d].to_vec()).collect();
        mul_only.head_hidden = Linear {
            w: Tensor::matrix(5, d, trimmed).unwrap(),
            b: dual.head_hidden.b.clone(),
        };
        mul_only.head_out = dual.head_out.clone();

        let imgs = [random_rows(3, 2, &mut rng), random_rows(3, 3, &mut rng)];
        let q = random_rows(3, 3, &mut rng);
        let run = |p: &DualNetParams| {
            let tape = Tape::new();
            let b = p.bind(&tape);
            let iv: Vec<Var> = imgs.iter().map(|t| tape.constant(t)).collect();
            forward(&b, &iv, &tape.constant(&q)).unwrap().logits.value()
        };
        let a = run(&dual);
        let m = run(&mul_only);
        for (x, y) in a.data().iter().zip(m.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn permuted_outputs(p: &DualNetParams, imgs: &[Tensor], q: &Tensor, order: &[usize]) -> (Tensor, Tensor) {
        let mut c = p.config().clone();
        c.image_dims = order.iter().map(|&i| p.config().image_dims[i]).collect();
        let mut permuted = DualNetParams::zeros(&c).unwrap();
        for (dst, src) in [(&mut permuted.mul, &p.mul), (&mut permuted.sum, &p.sum)] {
            let src = src.as_ref().unwrap();
            *dst = Some(FusionPath {
                images: order.iter().map(|&i| src.images[i].clone()).collect(),
                question: src.question.clone(),
            });
        }
        permuted.head_hidden = p.head_hidden.clone();
        permuted.head_out = p.head_out.clone();
        let tape = Tape::new();
        let b = permuted.bind(&tape);
        let iv: Vec<Var> = order.iter().map(|&i| tape.constant(&imgs[i])).collect();
        let out = forward(&b, &iv, &tape.constant(q)).unwrap();
        (out.mul.unwrap().value(), out.sum.unwrap().value())
    }

    #[test]
    fn permuting_two_sources_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = DualNetParams::init(&cfg(vec![2, 3], FusionMode::Dual), &mut rng).unwrap();
        let imgs = [random_rows(2, 2, &mut rng), random_rows(2, 3, &mut rng)];
        let q = random_rows(2, 3, &mut rng);
        assert_eq!(permuted_outputs(&p, &imgs, &q, &[0, 1]), permuted_outputs(&p, &imgs, &q, &[1, 0]));
    }

    #[test]
    fn permuting_three_sources_agrees_to_rounding() {
        // With three or more sources a permutation re-associates the product
        // and sum, so agreement is only up to rounding.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let p = DualNetParams::init(&cfg(vec![2, 3, 4], FusionMode::Dual), &mut rng).unwrap();
        let imgs = [random_rows(2, 2, &mut rng), random_rows(2, 3, &mut rng), random_rows(2, 4, &mut rng)];
        let q = random_rows(2, 3, &mut rng);
        let base = permuted_outputs(&p, &imgs, &q, &[0, 1, 2]);
        assert_eq!(base, permuted_outputs(&p, &imgs, &q, &[1, 0, 2]));
        for order in [[2, 1, 0], [1, 2, 0], [0, 2, 1]] {
            let other = permuted_outputs(&p, &imgs, &q, &order);
            for (a, b) in base.0.data().iter().zip(other.0.data()).chain(base.1.data().iter().zip(other.1.data())) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn predict_examples() {
        let l = [0.1, 0.9, 0.3];
        assert_eq!(predict(&l, None).unwrap(), 1);
        assert_eq!(predict(&l, Some(&[0, 2])).unwrap(), 2);
        assert_eq!(predict(&l, Some(&[2, 0])).unwrap(), 2);
        assert_eq!(predict(&[0.5, 0.5, 0.5], None).unwrap(), 0);
        assert_eq!(predict(&[0.5, 0.5, 0.5], Some(&[2, 1])).unwrap(), 1);
        assert!(matches!(predict(&l, Some(&[])), Err(Error::Empty(_))));
        assert!(predict(&l, Some(&[3])).is_err());
        let shifted: Vec<f64> = l.iter().map(|v| v + 17.0).collect();
        assert_eq!(predict(&shifted, None).unwrap(), 1);
    }

    #[test]
    fn full_model_gradient_check_for_each_source_count() {
        use crate::gradcheck::{model_grad_check, CHECK_BATCH, EPS};
        let lstm = LstmConfig {
            vocab_size: 6,
            embed_dim: 3,
            hidden_dim: 3,
            num_layers: 2,
        };
        for n in 1..=3 {
            let dims: Vec<usize> = (0..n).map(|i| 2 + i).collect();
            let results = model_grad_check(&lstm, &cfg(dims, FusionMode::Dual), CHECK_BATCH, 20 + n as u64, EPS).unwrap();
            assert_eq!(results.len(), 1 + 12 * 2 + 4 * (n + 1) + 4);
            for r in results {
                assert!(r.passed(), "N={n} {}: {:?}", r.name, r.stats);
            }
        }
    }

    #[test]
    fn model_rejects_mismatched_question_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lstm = LstmConfig {
            vocab_size: 4,
            embed_dim: 2,
            hidden_dim: 7,
            num_layers: 1,
        };
        assert!(VqaModel::init(&lstm, &cfg(vec![2], FusionMode::Dual), &mut rng).is_err());
    }
}
