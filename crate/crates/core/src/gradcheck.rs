//! Finite-difference checks of every differentiable piece, from single ops up
//! to the full question-encoder + fusion model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{LstmConfig, QuestionSequence};
use crate::error::Result;
use crate::model::{DualNetConfig, FusionMode, VqaModel};
use crate::tensor::{concat_rows, grad_check_detailed, GradCheckStats, Tape, Tensor, Var};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Rows per model check. With very few rows a hidden unit can saturate on
/// every row, leaving gradients near 1e-8 that a central difference on an
/// O(1) loss cannot resolve to the tolerance.
pub const CHECK_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub stats: GradCheckStats,
}

impl CheckResult {
    /// Plain relative error below the tolerance on every coordinate.
    pub fn passed_strict(&self) -> bool {
        self.stats.max_rel_error < TOLERANCE
    }

    /// Relative error below the tolerance once the rounding floor of the
    /// difference quotient is taken out.
    pub fn passed(&self) -> bool {
        self.stats.max_resolved_error < TOLERANCE
    }
}

fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("non-empty shape")
}

/// Checks cross-entropy gradients of a randomly drawn model with respect to
/// every parameter tensor. Parameters, image rows and question tokens are all
/// drawn from `seed`; parameters are uniform in `[-1, 1]`.
pub fn model_grad_check(
    lstm: &LstmConfig,
    net: &DualNetConfig,
    batch: usize,
    seed: u64,
    eps: f64,
) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VqaModel::init(lstm, net, &mut rng)?;
    for t in model.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    let images: Vec<Tensor> = net.image_dims.iter().map(|&d| uniform(&[batch, d], &mut rng)).collect();
    let seqs: Vec<QuestionSequence> = (0..batch)
        .map(|i| {
            let len = 1 + i % 3;
            let ids = (0..len).map(|_| rng.gen_range(0..lstm.vocab_size)).collect();
            QuestionSequence::new(ids, lstm.vocab_size)
        })
        .collect::<Result<_>>()?;
    let targets: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..net.num_answers)).collect();
    let refs: Vec<&QuestionSequence> = seqs.iter().collect();
    let named = model.named_params();
    let tensors: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
    let stats = grad_check_detailed(
        |_, vars| {
            let bound = model.bind_vars(vars);
            VqaModel::forward(&bound, &images, &refs)?
                .logits
                .softmax_cross_entropy(&targets)
        },
        &tensors,
        eps,
    )?;
    Ok(named
        .into_iter()
        .zip(stats)
        .map(|((name, _), stats)| CheckResult { name, stats })
        .collect())
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]]),
        ("matmul_t", vec![vec![3, 4], vec![2, 4]]),
        ("add", vec![vec![2, 3], vec![2, 3]]),
        ("mul", vec![vec![2, 3], vec![2, 3]]),
        ("add_bias", vec![vec![3, 4], vec![4]]),
        ("tanh", vec![vec![5]]),
        ("sigmoid", vec![vec![5]]),
        ("concat", vec![vec![2, 3], vec![2, 2]]),
        ("gather_rows", vec![vec![4, 3]]),
        ("concat_rows", vec![vec![1, 3], vec![2, 3]]),
        ("softmax_cross_entropy", vec![vec![3, 4]]),
    ]
}

fn op_loss<'t>(name: &str, tape: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    // Reduce with a distinct weight per coordinate.
    let weigh = |x: Var<'t>| -> Result<Var<'t>> {
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let w = Tensor::new(shape, (0..n).map(|i| 0.5 + 0.1 * i as f64).collect())?;
        x.mul(&tape.constant(&w))?.sum()
    };
    match name {
        "matmul" => weigh(v[0].matmul(&v[1])?),
        "matmul_t" => weigh(v[0].matmul_t(&v[1])?),
        "add" => weigh(v[0].add(&v[1])?),
        "mul" => weigh(v[0].mul(&v[1])?),
        "add_bias" => weigh(v[0].add_bias(&v[1])?),
        "tanh" => weigh(v[0].tanh()?),
        "sigmoid" => weigh(v[0].sigmoid()?),
        "concat" => weigh(v[0].concat(&v[1])?),
        "gather_rows" => weigh(v[0].gather_rows(&[2, 0, 2, 3])?),
        "concat_rows" => weigh(concat_rows(&[v[1], v[0]])?),
        "softmax_cross_entropy" => v[0].softmax_cross_entropy(&[1, 0, 3]),
        other => unreachable!("unknown op case {other}"),
    }
}

/// Per-op checks followed by full-model checks for one to three image
/// sources in every fusion mode.
pub fn grad_check_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes) in op_cases() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(s, &mut rng)).collect();
        let per_input = grad_check_detailed(|tape, vars| op_loss(name, tape, vars), &inputs, EPS)?;
        let stats = per_input
            .into_iter()
            .reduce(|a, b| GradCheckStats {
                max_rel_error: a.max_rel_error.max(b.max_rel_error),
                max_resolved_error: a.max_resolved_error.max(b.max_resolved_error),
                roundoff_floor: a.roundoff_floor.max(b.roundoff_floor),
            })
            .expect("every op has an input");
        out.push(CheckResult {
            name: format!("op/{name}"),
            stats,
        });
    }
    let lstm = LstmConfig {
        vocab_size: 12,
        embed_dim: 6,
        hidden_dim: 8,
        num_layers: 2,
    };
    for n in 1..=3 {
        for mode in [FusionMode::Dual, FusionMode::SumOnly, FusionMode::MulOnly] {
            let net = DualNetConfig {
                image_dims: (0..n).map(|i| 6 + 2 * i).collect(),
                question_dim: lstm.hidden_dim,
                common_dim: 8,
                head_dim: 8,
                num_answers: 5,
                mode,
            };
            for r in model_grad_check(&lstm, &net, CHECK_BATCH, seed.wrapping_add(n as u64), EPS)? {
                out.push(CheckResult {
                    name: format!("model/N={n}/{mode}/{}", r.name),
                    ..r
                });
            }
        }
    }
    Ok(out)
}
