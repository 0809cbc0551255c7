use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use dualnet::dataset::{generate_synthetic, load_dataset, SyntheticSplits, TeacherSpec};
use dualnet::ensemble::{tune_ensemble_weights, Ensemble, EnsembleSpec};
use dualnet::features::{
    avg_region_softmax, classify_question, l2_normalize, pca_fit, region_code, vlad_center, vlad_one_cluster,
    PcaModel, RegionDescriptor,
};
use dualnet::gradcheck::{grad_check_suite, TOLERANCE};
use dualnet::model::FusionMode;
use dualnet::pipeline::{fit, RunConfig};
use dualnet::train::{choose_answer, evaluate_scores, Accuracy, AnswerMode, MetricsLog};
use dualnet::TrainedModel;

/// Dual multiplication/summation fusion networks for visual question answering.
#[derive(Parser)]
#[command(name = "dualnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate teacher-labelled train/dev/test JSONL files.
    SynthGen(SynthGenArgs),
    /// Train one model and write a checkpoint plus a CSV metric log.
    Train(TrainArgs),
    /// Print accuracy by question type for a checkpoint or an ensemble.
    Eval(EvalArgs),
    /// Print the predicted answer for one record.
    Predict(PredictArgs),
    /// Tune ensemble weights on a dev set.
    EnsembleTune(TuneArgs),
    /// Finite-difference check of every op and of full models.
    Gradcheck(GradcheckArgs),
    /// Feature-pipeline transforms on JSON feature files.
    Encode(EncodeArgs),
}

#[derive(Args)]
struct SynthGenArgs {
    /// Directory that receives train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    /// Seed for features, questions and multiple-choice candidates.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Seed for the teacher network's weights.
    #[arg(long, default_value_t = TeacherSpec::default().seed)]
    teacher_seed: u64,
    #[arg(long, default_value_t = 8000)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_dev: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training JSONL file.
    #[arg(long)]
    data: PathBuf,
    /// Optional dev JSONL file, evaluated after every epoch.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fusion mode: dual, sum or mul.
    #[arg(long)]
    mode: Option<FusionMode>,
    /// Common-space dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
    /// CSV log path; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ModelSource {
    /// Single-model checkpoint.
    #[arg(long, conflicts_with = "ensemble", required_unless_present = "ensemble")]
    checkpoint: Option<PathBuf>,
    /// Ensemble spec (TOML).
    #[arg(long)]
    ensemble: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long)]
    data: PathBuf,
    /// Restrict answers to each record's candidate list.
    #[arg(long)]
    multiple_choice: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long)]
    data: PathBuf,
    /// Record id; defaults to the first record.
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    multiple_choice: bool,
}

#[derive(Args)]
struct TuneArgs {
    /// Ensemble spec to start from (left unchanged).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    /// Where to write the tuned spec; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print every check, not just the summary.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(subcommand)]
    op: EncodeOp,
}

#[derive(Subcommand)]
enum EncodeOp {
    /// L2-normalise each row of a JSON matrix.
    L2(IoArgs),
    /// Fit PCA on the rows of a JSON matrix and write the model.
    PcaFit {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long)]
        k: usize,
    },
    /// Project rows with a fitted PCA model.
    Pca {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// One-cluster VLAD of the rows (one image's regions).
    Vlad {
        #[command(flatten)]
        io: IoArgs,
        /// JSON vector holding the cluster center fitted on training regions.
        #[arg(long)]
        center: PathBuf,
    },
    /// Mean of the rows, for use as a VLAD center.
    VladCenter(IoArgs),
    /// Average per-region softmax rows.
    AvgSoftmax {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long)]
        count: usize,
    },
    /// PCA code plus normalised box coordinates for a JSON list of regions.
    RegionCode {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Question type for each line of a text file.
    Qtype(IoArgs),
}

#[derive(Args)]
struct IoArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Raised when a check fails rather than the input being bad.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<CheckFailed>().is_some() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<dualnet::Error>() {
            return if err.is_validation() { 1 } else { 2 };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 1;
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            use std::io::ErrorKind::*;
            return if matches!(io.kind(), NotFound | PermissionDenied | InvalidInput) { 1 } else { 2 };
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthGen(a) => synth_gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::EnsembleTune(a) => tune_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Encode(a) => encode_cmd(a.op),
    }
}

fn synth_gen(a: SynthGenArgs) -> anyhow::Result<()> {
    let teacher = TeacherSpec {
        seed: a.teacher_seed,
        ..TeacherSpec::default()
    };
    let splits = SyntheticSplits {
        n_train: a.n_train,
        n_dev: a.n_dev,
        n_test: a.n_test,
        seed: a.seed,
    };
    let data = generate_synthetic(&teacher, &splits)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (name, d) in [("train", &data.train), ("dev", &data.dev), ("test", &data.test)] {
        let path = a.out_dir.join(format!("{name}.jsonl"));
        d.save(&path).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {} ({} examples)", path.display(), d.examples.len());
    }
    if let Some(t) = &data.train.header.teacher {
        println!("teacher seed {}", t.seed);
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    if a.out == a.data || Some(&a.out) == a.dev.as_ref() {
        bail!(dualnet::Error::Invalid("--out must not overwrite an input file".into()));
    }
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(m) = a.mode {
        cfg.model.mode = m;
    }
    if let Some(d) = a.dim {
        cfg.model.common_dim = d;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let data = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let dev = a
        .dev
        .as_ref()
        .map(|p| load_dataset(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    if log_path.exists() {
        std::fs::remove_file(&log_path).with_context(|| format!("replacing {}", log_path.display()))?;
    }
    let mut log = MetricsLog::open(&log_path)?;
    println!(
        "training {} model, d={}, {} epochs, seed {}",
        cfg.model.mode, cfg.model.common_dim, cfg.train.epochs, cfg.train.seed
    );
    let (model, report) = fit(&data, &cfg, |stats, model| {
        log.log(stats.epoch, "train", Some(stats.loss), None)?;
        let mut line = format!("epoch {:>3}  loss {:.4}", stats.epoch, stats.loss);
        if let Some(dev) = &dev {
            let probs = model.answer_probs(&dev.examples)?;
            let acc = evaluate_scores(&probs, &dev.examples, &model.answer_vocab, AnswerMode::OpenEnded)?;
            log.log(stats.epoch, "dev", None, Some(&acc))?;
            line.push_str(&format!("  dev {:.2}", 100.0 * acc.all));
        }
        println!("{line}");
        Ok(())
    })?;
    if report.dropped > 0 {
        println!("dropped {} training records with answers outside the vocabulary", report.dropped);
    }
    model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} and {}", a.out.display(), log_path.display());
    Ok(())
}

enum Scorer {
    Single(Box<TrainedModel>),
    Ensemble(Ensemble),
}

impl Scorer {
    fn load(src: &ModelSource) -> anyhow::Result<Self> {
        match (&src.checkpoint, &src.ensemble) {
            (Some(c), _) => Ok(Scorer::Single(Box::new(
                TrainedModel::load(c).with_context(|| format!("loading {}", c.display()))?,
            ))),
            (None, Some(e)) => {
                let spec = EnsembleSpec::load(e).with_context(|| format!("loading {}", e.display()))?;
                let base = e.parent().unwrap_or(Path::new("."));
                Ok(Scorer::Ensemble(Ensemble::load(&spec, base)?))
            }
            (None, None) => bail!(dualnet::Error::Invalid("give --checkpoint or --ensemble".into())),
        }
    }

    fn probs(&self, examples: &[dualnet::dataset::VqaExample]) -> dualnet::Result<Vec<Vec<f64>>> {
        match self {
            Scorer::Single(m) => m.answer_probs(examples),
            Scorer::Ensemble(e) => e.answer_probs(examples),
        }
    }

    fn answers(&self) -> &dualnet::train::AnswerVocab {
        match self {
            Scorer::Single(m) => &m.answer_vocab,
            Scorer::Ensemble(e) => e.answer_vocab(),
        }
    }
}

fn answer_mode(mc: bool) -> AnswerMode {
    if mc {
        AnswerMode::MultipleChoice
    } else {
        AnswerMode::OpenEnded
    }
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let scorer = Scorer::load(&a.source)?;
    let data = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let probs = scorer.probs(&data.examples)?;
    let acc = evaluate_scores(&probs, &data.examples, scorer.answers(), answer_mode(a.multiple_choice))?;
    print_table(&acc);
    Ok(())
}

fn print_table(acc: &Accuracy) {
    println!("{}", Accuracy::header());
    println!("{}", acc.row());
    println!(
        "({} yes/no, {} number, {} other questions)",
        acc.counts[0], acc.counts[1], acc.counts[2]
    );
}

fn predict_cmd(a: PredictArgs) -> anyhow::Result<()> {
    let scorer = Scorer::load(&a.source)?;
    let data = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let example = match &a.id {
        Some(id) => data
            .examples
            .iter()
            .find(|e| &e.example_id == id)
            .ok_or_else(|| dualnet::Error::Invalid(format!("no record with id {id:?}")))?,
        None => &data.examples[0],
    };
    let probs = scorer.probs(std::slice::from_ref(example))?;
    let idx = choose_answer(&probs[0], example, scorer.answers(), answer_mode(a.multiple_choice))?;
    println!("{}", scorer.answers().answers()[idx]);
    Ok(())
}

fn tune_cmd(a: TuneArgs) -> anyhow::Result<()> {
    let spec = EnsembleSpec::load(&a.spec).with_context(|| format!("loading {}", a.spec.display()))?;
    let base = a.spec.parent().unwrap_or(Path::new(".")).to_path_buf();
    let ensemble = Ensemble::load(&spec, &base)?;
    let dev = load_dataset(&a.dev).with_context(|| format!("loading {}", a.dev.display()))?;
    let unit_probs = ensemble.unit_probs(&dev.examples)?;
    let weights = tune_ensemble_weights(&unit_probs, &dev.examples, ensemble.answer_vocab(), a.iterations)?;
    let mut tuned = spec.clone();
    let out_base = a.out.as_ref().and_then(|p| p.parent()).map(Path::to_path_buf);
    for (unit, w) in tuned.units.iter_mut().zip(&weights) {
        unit.weight = *w;
        let moved = out_base.as_ref().is_some_and(|b| b != &base);
        if moved && unit.checkpoint.is_relative() {
            unit.checkpoint = std::path::absolute(base.join(&unit.checkpoint))?;
        }
    }
    for (unit, w) in tuned.units.iter().zip(&weights) {
        eprintln!("d={:<5} weight {:.4}", unit.common_dim, w);
    }
    match &a.out {
        Some(p) => {
            if p == &a.spec {
                bail!(dualnet::Error::Invalid("--out must not overwrite the input spec".into()));
            }
            tuned.save(p)?;
        }
        None => print!("{}", toml::to_string(&tuned)?),
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> anyhow::Result<()> {
    let results = grad_check_suite(a.seed)?;
    let mut failed = 0;
    let mut unresolved = 0;
    for r in &results {
        if !r.passed() {
            failed += 1;
        } else if !r.passed_strict() {
            unresolved += 1;
        }
        if a.verbose || !r.passed() {
            println!(
                "{:<40} rel {:.2e}  resolved {:.2e}  {}",
                r.name,
                r.stats.max_rel_error,
                r.stats.max_resolved_error,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
    }
    println!(
        "{} checks, {} failed (tolerance {TOLERANCE:e}); {} exceed it only within finite-difference rounding",
        results.len(),
        failed,
        unresolved
    );
    if failed > 0 {
        return Err(CheckFailed(format!("{failed} gradient checks failed")).into());
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_output(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(io: &IoArgs, value: &T) -> anyhow::Result<()> {
    if io.out.as_ref() == Some(&io.input) {
        bail!(dualnet::Error::Invalid("--out must not overwrite --input".into()));
    }
    write_output(io.out.as_deref(), &serde_json::to_string(value)?)
}

fn encode_cmd(op: EncodeOp) -> anyhow::Result<()> {
    match op {
        EncodeOp::L2(io) => {
            let rows: Vec<Vec<f64>> = read_json(&io.input)?;
            let out = rows.iter().map(|r| l2_normalize(r)).collect::<dualnet::Result<Vec<_>>>()?;
            write_json(&io, &out)
        }
        EncodeOp::PcaFit { io, k } => {
            let rows: Vec<Vec<f64>> = read_json(&io.input)?;
            write_json(&io, &pca_fit(&rows, k)?)
        }
        EncodeOp::Pca { io, model } => {
            let pca = PcaModel::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let rows: Vec<Vec<f64>> = read_json(&io.input)?;
            let out = rows.iter().map(|r| pca.transform(r)).collect::<dualnet::Result<Vec<_>>>()?;
            write_json(&io, &out)
        }
        EncodeOp::Vlad { io, center } => {
            let rows: Vec<Vec<f64>> = read_json(&io.input)?;
            let c: Vec<f64> = read_json(&center)?;
            write_json(&io, &vlad_one_cluster(&rows, &c)?)
        }
        EncodeOp::VladCenter(io) => {
            let rows: Vec<Vec<f64>> = read_json(&io.input)?;
            write_json(&io, &vlad_center(&rows)?)
        }
        EncodeOp::AvgSoftmax { io, count } => {
            let rows: Vec<Vec<f64>> = read_json(&io.input)?;
            write_json(&io, &avg_region_softmax(&rows, count)?)
        }
        EncodeOp::RegionCode { io, model } => {
            let pca = PcaModel::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let regions: Vec<RegionDescriptor> = read_json(&io.input)?;
            let out = regions
                .iter()
                .map(|r| region_code(r, &pca))
                .collect::<dualnet::Result<Vec<_>>>()?;
            write_json(&io, &out)
        }
        EncodeOp::Qtype(io) => {
            let text = std::fs::read_to_string(&io.input).with_context(|| format!("reading {}", io.input.display()))?;
            let mut lines = Vec::new();
            for (i, q) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let t = classify_question(q).map_err(|e| dualnet::Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                lines.push(format!("{t}\t{q}"));
            }
            if io.out.as_ref() == Some(&io.input) {
                bail!(dualnet::Error::Invalid("--out must not overwrite --input".into()));
            }
            write_output(io.out.as_deref(), &lines.join("\n"))
        }
    }
}
