//! `plda`: train, evaluate and budget differentially private LDA models.
//!
//! Exit codes: 0 success, 1 I/O or unreadable input, 2 invalid flags or
//! mismatched inputs, 3 infeasible privacy budget.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use plda_core::corpus::{Corpus, Vocabulary};
use plda_core::privacy::{
    self, account_fixed, forward_account, BudgetSpec, CompositionMethod, PrivacyError,
};
use plda_core::synthetic::{SyntheticModel, SyntheticSpec};
use plda_core::trainer::{
    self, heldout_perplexity, ModelDump, PrivacySettings, TrainError, TrainerConfig,
};
use plda_core::vi::EStepOptions;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
const BUDGET_HEADER: &str = "method,epsilon_iter,delta_iter,sigma,accounted_epsilon";

#[derive(Parser)]
#[command(
    name = "plda",
    version,
    about = "Differentially private topic modeling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a topic model, optionally under a total (epsilon, delta) budget.
    Train(Box<TrainArgs>),
    /// Solve per-iteration budgets and print them as CSV.
    Budget(BudgetArgs),
    /// Held-out perplexity bound and top words of a trained model.
    Eval(EvalArgs),
    /// Sample a synthetic corpus from random topics.
    Synth(SynthArgs),
    /// Re-run a training run from its manifest.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Composition {
    Zcdp,
    Advanced,
    Linear,
    None,
}

impl From<Composition> for CompositionMethod {
    fn from(c: Composition) -> Self {
        match c {
            Composition::Zcdp => CompositionMethod::Zcdp,
            Composition::Advanced => CompositionMethod::Advanced,
            Composition::Linear => CompositionMethod::Linear,
            Composition::None => CompositionMethod::None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BudgetComposition {
    Zcdp,
    Advanced,
    Linear,
    All,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("length").required(true).args(["iters", "docs_budget"]))]
struct TrainArgs {
    /// Training corpus in sparse count format.
    #[arg(long)]
    corpus: PathBuf,
    /// Vocabulary file, one term per line.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    topics: usize,
    #[arg(long)]
    batch_size: usize,
    /// Number of iterations J.
    #[arg(long)]
    iters: Option<u64>,
    /// Documents to process; sets J = ceil(docs / batch size).
    #[arg(long)]
    docs_budget: Option<u64>,
    /// Model dump destination.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_enum, default_value = "zcdp")]
    composition: Composition,
    /// Truncation length N. Required for private runs; defaults to the
    /// longest document otherwise.
    #[arg(long)]
    max_doc_len: Option<u64>,
    /// Dirichlet prior on document topics [default: 1/K].
    #[arg(long)]
    alpha: Option<f64>,
    /// Dirichlet prior on topic terms [default: 1/K].
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value_t = 1024.0)]
    tau0: f64,
    #[arg(long, default_value_t = 0.7)]
    kappa: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trace CSV destination [default: <out> with extension trace.csv].
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Held-out corpus for perplexity checkpoints.
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
    /// Iterations between checkpoints [default: max(1, J/20)].
    #[arg(long)]
    eval_every: Option<u64>,
    /// Worker threads for the E-step (results do not depend on this).
    #[arg(long)]
    threads: Option<usize>,
    /// Manifest destination [default: <out> with extension manifest.json].
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    iters: u64,
    #[arg(long)]
    sampling_ratio: f64,
    #[arg(long, default_value_t = 1.0)]
    sensitivity: f64,
    #[arg(long, value_enum, default_value = "all")]
    composition: BudgetComposition,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Print the n most probable terms of every topic.
    #[arg(long)]
    top_words: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    docs: usize,
    #[arg(long)]
    out_corpus: PathBuf,
    #[arg(long)]
    out_vocab: PathBuf,
    #[arg(long, default_value_t = 3)]
    topics: usize,
    #[arg(long, default_value_t = 20)]
    vocab_size: usize,
    #[arg(long, default_value_t = 40)]
    doc_len: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Seed for the topics; the same seed gives the same topics.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent document stream, e.g. 0 for training and 1 for held-out.
    #[arg(long, default_value_t = 0)]
    stream: u64,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Write the model here instead of the recorded path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the trace here instead of the recorded path.
    #[arg(long)]
    trace: Option<PathBuf>,
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    tool: String,
    tool_version: String,
    seed: u64,
    config: TrainerConfig,
    threads: Option<usize>,
    corpus: InputFile,
    vocab: InputFile,
    eval_corpus: Option<InputFile>,
    model: PathBuf,
    trace: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InputFile {
    path: PathBuf,
    sha256: String,
}

impl InputFile {
    fn digest(path: &Path) -> Result<Self, Failure> {
        let bytes = fs::read(path).map_err(|e| Failure::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self {
            code: 1,
            message: format!("{}: {err}", path.display()),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn privacy(err: PrivacyError) -> Self {
        let code = match err {
            PrivacyError::Infeasible(_) | PrivacyError::ToleranceNotAmplifiable { .. } => 3,
            PrivacyError::Domain(_) | PrivacyError::NoPrivacy => 2,
        };
        Self {
            code,
            message: err.to_string(),
        }
    }

    fn train(err: TrainError) -> Self {
        match err {
            TrainError::Privacy(e) => Self::privacy(e),
            TrainError::Io(e) => Self {
                code: 1,
                message: e.to_string(),
            },
            TrainError::Model(m) => Self {
                code: 1,
                message: m,
            },
            other => Self::usage(other.to_string()),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::io(path, e))
}

fn read_corpus(path: &Path) -> Result<Corpus, Failure> {
    Corpus::read_sparse(open(path)?).map_err(|e| Failure::io(path, e))
}

fn read_vocab(path: &Path) -> Result<Vocabulary, Failure> {
    Vocabulary::read(open(path)?).map_err(|e| Failure::io(path, e))
}

fn check_vocab(corpus: &Corpus, vocab: &Vocabulary, path: &Path) -> Result<(), Failure> {
    if corpus.vocab_size() != vocab.len() {
        return Err(Failure::usage(format!(
            "{} declares {} terms but the vocabulary has {}",
            path.display(),
            corpus.vocab_size(),
            vocab.len()
        )));
    }
    Ok(())
}

fn train_config(args: &TrainArgs, corpus: &Corpus) -> Result<TrainerConfig, Failure> {
    let method = CompositionMethod::from(args.composition);
    let privacy = if method.is_private() {
        let need = |flag: &str| {
            Failure::usage(format!(
                "--{flag} is required with --composition {}",
                method.as_str()
            ))
        };
        let epsilon = args.epsilon.ok_or_else(|| need("epsilon"))?;
        let delta = args.delta.ok_or_else(|| need("delta"))?;
        PrivacySettings::new(method, epsilon, delta)
    } else {
        PrivacySettings::none()
    };
    let max_doc_len = match (args.max_doc_len, method.is_private()) {
        (Some(n), _) => n,
        (None, false) => corpus.max_doc_len(),
        (None, true) => {
            return Err(Failure::usage(format!(
                "--max-doc-len is required with --composition {}",
                method.as_str()
            )))
        }
    };
    if args.batch_size == 0 {
        return Err(Failure::usage("--batch-size must be at least 1"));
    }
    let iterations = match (args.iters, args.docs_budget) {
        (Some(j), _) => j,
        (None, Some(docs)) => trainer::iterations_for_docs(docs, args.batch_size),
        (None, None) => {
            return Err(Failure::usage(
                "one of --iters or --docs-budget is required",
            ))
        }
    };

    let mut config = TrainerConfig::new(args.topics, args.batch_size, max_doc_len, iterations);
    if let Some(alpha) = args.alpha {
        config.alpha = alpha;
    }
    if let Some(eta) = args.eta {
        config.eta = eta;
    }
    if let Some(every) = args.eval_every {
        config.eval_every = every;
    }
    config.tau0 = args.tau0;
    config.kappa = args.kappa;
    config.seed = args.seed;
    config.privacy = privacy;
    config
        .validate(corpus.doc_count())
        .map_err(Failure::train)?;
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let vocab = read_vocab(&args.vocab)?;
    let corpus = read_corpus(&args.corpus)?;
    check_vocab(&corpus, &vocab, &args.corpus)?;
    let config = train_config(&args, &corpus)?;

    let manifest = RunManifest {
        tool: "plda".into(),
        tool_version: TOOL_VERSION.into(),
        seed: config.seed,
        config,
        threads: args.threads,
        corpus: InputFile::digest(&args.corpus)?,
        vocab: InputFile::digest(&args.vocab)?,
        eval_corpus: args
            .eval_corpus
            .as_deref()
            .map(InputFile::digest)
            .transpose()?,
        model: args.out.clone(),
        trace: args
            .trace
            .clone()
            .unwrap_or_else(|| args.out.with_extension("trace.csv")),
    };
    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| args.out.with_extension("manifest.json"));
    run(&manifest, &manifest.model, &manifest.trace)?;

    let mut w = create(&manifest_path)?;
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| Failure::io(&manifest_path, e))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| Failure::io(&manifest_path, e))
}

fn cmd_replay(args: ReplayArgs) -> Result<(), Failure> {
    let manifest: RunManifest = serde_json::from_reader(open(&args.manifest)?)
        .map_err(|e| Failure::io(&args.manifest, e))?;
    let inputs = [
        Some(&manifest.corpus),
        Some(&manifest.vocab),
        manifest.eval_corpus.as_ref(),
    ];
    for input in inputs.into_iter().flatten() {
        let now = InputFile::digest(&input.path)?;
        if now.sha256 != input.sha256 {
            return Err(Failure::usage(format!(
                "{} changed since the run was recorded",
                input.path.display()
            )));
        }
    }
    if manifest.tool_version != TOOL_VERSION {
        eprintln!(
            "warning: manifest written by version {}, replaying with {TOOL_VERSION}",
            manifest.tool_version
        );
    }
    let model = args.out.unwrap_or_else(|| manifest.model.clone());
    let trace = args.trace.unwrap_or_else(|| manifest.trace.clone());
    run(&manifest, &model, &trace)
}

/// Trains exactly as the manifest describes and writes the model and trace.
fn run(manifest: &RunManifest, model_path: &Path, trace_path: &Path) -> Result<(), Failure> {
    let config = manifest.config;
    let vocab = read_vocab(&manifest.vocab.path)?;
    let corpus = read_corpus(&manifest.corpus.path)?;
    check_vocab(&corpus, &vocab, &manifest.corpus.path)?;
    config
        .validate(corpus.doc_count())
        .map_err(Failure::train)?;
    let eval = match &manifest.eval_corpus {
        Some(input) => {
            let held_out = read_corpus(&input.path)?;
            check_vocab(&held_out, &vocab, &input.path)?;
            Some(held_out)
        }
        None => None,
    };

    if let Some(spec) = config.budget_spec(corpus.doc_count()) {
        let budget = privacy::solve_budget(&spec).map_err(Failure::privacy)?;
        println!(
            "per-iteration budget: epsilon_iter={} delta_iter={} sigma={}",
            budget.epsilon_iter, budget.delta_iter, budget.sigma
        );
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.threads.unwrap_or(0))
        .build()
        .map_err(|e| Failure::usage(format!("--threads: {e}")))?;
    let output = pool
        .install(|| trainer::train(&corpus, &config, eval.as_ref().map(Corpus::documents)))
        .map_err(Failure::train)?;

    let mut w = create(model_path)?;
    ModelDump::from_output(&output, &config)
        .write(&mut w)
        .map_err(Failure::train)?;
    w.flush().map_err(|e| Failure::io(model_path, e))?;

    let mut w = create(trace_path)?;
    output
        .trace
        .write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Failure::io(trace_path, e))?;

    if let Some(ledger) = &output.ledger {
        let spent = ledger.accounted();
        println!(
            "accounted: epsilon={} delta={} over {} iterations",
            spent.epsilon,
            spent.delta,
            ledger.len()
        );
    }
    if let Some(last) = output.trace.checkpoints.last().and_then(|c| c.perplexity) {
        println!("final held-out perplexity: {last}");
    }
    Ok(())
}

fn cmd_budget(args: BudgetArgs) -> Result<(), Failure> {
    if !(args.sampling_ratio > 0.0 && args.sampling_ratio <= 1.0) {
        return Err(Failure::usage(format!(
            "--sampling-ratio must lie in (0, 1], got {}",
            args.sampling_ratio
        )));
    }
    let methods: Vec<CompositionMethod> = match args.composition {
        BudgetComposition::All => CompositionMethod::PRIVATE.to_vec(),
        BudgetComposition::Zcdp => vec![CompositionMethod::Zcdp],
        BudgetComposition::Advanced => vec![CompositionMethod::Advanced],
        BudgetComposition::Linear => vec![CompositionMethod::Linear],
    };

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut failure = None;
    writeln!(out, "{BUDGET_HEADER}").map_err(|e| Failure::io(Path::new("stdout"), e))?;
    for method in methods {
        let spec = BudgetSpec {
            epsilon_tot: args.epsilon,
            delta_tot: args.delta,
            iterations: args.iters,
            sampling_ratio: args.sampling_ratio,
            sensitivity: args.sensitivity,
            method,
        };
        let row = privacy::solve_budget(&spec).and_then(|b| {
            let ledger = account_fixed(
                method,
                args.iters,
                args.sensitivity,
                &b,
                args.sampling_ratio,
                args.delta,
            )?;
            Ok((b, forward_account(&ledger)?))
        });
        match row {
            Ok((b, total)) => writeln!(
                out,
                "{},{},{},{},{}",
                method, b.epsilon_iter, b.delta_iter, b.sigma, total.epsilon
            )
            .map_err(|e| Failure::io(Path::new("stdout"), e))?,
            Err(e) => {
                let f = Failure::privacy(e);
                eprintln!("{method}: {}", f.message);
                // A validation failure outranks an infeasible method.
                if failure.as_ref().is_none_or(|p: &Failure| f.code < p.code) {
                    failure = Some(f);
                }
            }
        }
    }
    match failure {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let dump = ModelDump::read(open(&args.model)?).map_err(|e| Failure::io(&args.model, e))?;
    let model = dump
        .topic_matrix()
        .map_err(|e| Failure::io(&args.model, e))?;
    let vocab = read_vocab(&args.vocab)?;
    let corpus = read_corpus(&args.corpus)?;
    if vocab.len() != model.vocab_size() {
        return Err(Failure::usage(format!(
            "model has {} terms but {} has {}",
            model.vocab_size(),
            args.vocab.display(),
            vocab.len()
        )));
    }
    check_vocab(&corpus, &vocab, &args.corpus)?;

    let perplexity = heldout_perplexity(corpus.documents(), &model, &EStepOptions::new(dump.alpha))
        .map_err(Failure::train)?;
    println!("perplexity: {perplexity}");
    if let Some(n) = args.top_words {
        let tables = trainer::top_words(&model, &vocab, n).map_err(Failure::train)?;
        print!("{}", trainer::format_top_words(&tables));
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    let spec = SyntheticSpec {
        topics: args.topics,
        vocab_size: args.vocab_size,
        doc_len: args.doc_len,
        alpha: args.alpha,
        ..SyntheticSpec::default()
    };
    if spec.topics == 0 || spec.vocab_size < 2 || spec.doc_len == 0 || args.docs == 0 {
        return Err(Failure::usage(
            "synthetic corpus needs topics >= 1, vocab size >= 2, doc length >= 1 and docs >= 1",
        ));
    }
    if spec.alpha.is_nan() || spec.alpha <= 0.0 {
        return Err(Failure::usage("--alpha must be positive"));
    }
    let model = SyntheticModel::new(spec, args.seed);
    let corpus = model
        .sample_corpus(args.docs, args.seed, args.stream)
        .map_err(|e| Failure::usage(e.to_string()))?;

    let mut w = create(&args.out_corpus)?;
    corpus
        .write_sparse(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Failure::io(&args.out_corpus, e))?;
    let mut w = create(&args.out_vocab)?;
    model
        .vocabulary()
        .write(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Failure::io(&args.out_vocab, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(*a),
        Command::Budget(a) => cmd_budget(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
