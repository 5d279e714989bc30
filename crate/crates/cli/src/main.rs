//! `vulngraph` command-line tool.

mod settings;

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vulngraph::checkpoint::Checkpoint;
use vulngraph::data::{
    import_embeddings, load_jsonl, prepare_graphs, sha256_file, tokens_of, verify_stats,
    CodeSample, StatsVerdict,
};
use vulngraph::graph::GraphRecord;
use vulngraph::model::{predict_proba, GraphInput};
use vulngraph::tokenizer::{build_vocab, encode};
use vulngraph::train::{
    ablate, ablation_csv, describe, evaluate, init_params, metrics_csv, predicted_label,
    predictions_csv, rng_for, train_with, AblationAxis, ExperimentData, EMBEDDING_STREAM,
};
use vulngraph::{build_graph, Construction, Matrix, TrainConfig, Vocabulary};

use settings::{ConfigArgs, InitSource};

#[derive(Debug, Parser)]
#[command(
    name = "vulngraph",
    version,
    about = "Graph neural network vulnerability detection for C/C++ functions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoint, vocabulary, metrics and manifest
    Train(TrainArgs),
    /// Score a checkpoint on a labelled split
    Eval(EvalArgs),
    /// Classify functions read from a file or stdin
    Predict(PredictArgs),
    /// Export token graphs as JSON lines
    BuildGraph(BuildGraphArgs),
    /// Train along one or all ablation axes
    Ablate(AblateArgs),
    /// Print split sizes and label counts
    Stats(StatsArgs),
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// Training split (JSONL with `func`, `target`, optional `idx`)
    #[arg(long, value_name = "PATH")]
    train_file: PathBuf,

    /// Validation split used for checkpoint selection
    #[arg(long, value_name = "PATH")]
    valid_file: PathBuf,

    /// Test split scored with the selected checkpoint
    #[arg(long, value_name = "PATH")]
    test_file: Option<PathBuf>,

    #[arg(long, value_name = "DIR", default_value = "run")]
    out_dir: PathBuf,

    /// Initial node features: `random` or `file:<path>` (token v1 ... vd per line)
    #[arg(long, value_name = "SOURCE", default_value = "random")]
    init: InitSource,

    /// Compare split sizes with the CodeXGLUE release
    #[arg(long)]
    expect_codexglue: bool,

    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,

    /// Vocabulary file; defaults to vocab.txt next to the checkpoint
    #[arg(long, value_name = "PATH")]
    vocab: Option<PathBuf>,

    /// Labelled JSONL split
    #[arg(long, value_name = "PATH")]
    data_file: PathBuf,

    /// Predictions CSV; defaults to predictions.csv next to the checkpoint
    #[arg(long, value_name = "PATH")]
    predictions: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct PredictArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,

    /// Vocabulary file; defaults to vocab.txt next to the checkpoint
    #[arg(long, value_name = "PATH")]
    vocab: Option<PathBuf>,

    /// Source file; stdin when absent
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,

    /// Input is JSONL with one function per `func` field
    #[arg(long)]
    jsonl: bool,
}

#[derive(Debug, clap::Args)]
struct BuildGraphArgs {
    /// Source file; stdin when absent
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,

    /// Input is JSONL with one function per `func` field
    #[arg(long)]
    jsonl: bool,

    /// Vocabulary file; built from the input when absent
    #[arg(long, value_name = "PATH")]
    vocab: Option<PathBuf>,

    #[arg(long, default_value = "unique", value_name = "unique|index")]
    construction: Construction,

    /// Sliding window size
    #[arg(long = "ws", default_value_t = 5, value_name = "N")]
    window: usize,

    #[arg(long, default_value_t = vulngraph::tokenizer::DEFAULT_MAX_LEN, value_name = "N")]
    max_len: usize,

    #[arg(long)]
    pretokenized: bool,

    /// Output file; stdout when absent
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisChoice {
    Residual,
    Mix,
    Window,
    Fraction,
    All,
}

#[derive(Debug, clap::Args)]
struct AblateArgs {
    #[arg(long, value_name = "PATH")]
    train_file: PathBuf,

    #[arg(long, value_name = "PATH")]
    valid_file: PathBuf,

    #[arg(long, value_name = "PATH")]
    test_file: Option<PathBuf>,

    #[arg(long, value_enum)]
    axis: AxisChoice,

    #[arg(long, value_name = "DIR", default_value = "ablation")]
    out_dir: PathBuf,

    /// Initial node features: `random` or `file:<path>`
    #[arg(long, value_name = "SOURCE", default_value = "random")]
    init: InitSource,

    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, clap::Args)]
struct StatsArgs {
    #[arg(long, value_name = "PATH")]
    train_file: Option<PathBuf>,

    #[arg(long, value_name = "PATH")]
    valid_file: Option<PathBuf>,

    #[arg(long, value_name = "PATH")]
    test_file: Option<PathBuf>,

    #[arg(long)]
    expect_codexglue: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::BuildGraph(a) => cmd_build_graph(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Stats(a) => cmd_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_split(path: &Path) -> Result<Vec<CodeSample>> {
    let report = load_jsonl(path)?;
    for r in &report.rejected {
        eprintln!("warning: {}:{}: {}", path.display(), r.line, r.reason);
    }
    Ok(report.samples)
}

fn graphs_for(
    name: &str,
    samples: &[CodeSample],
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<Vec<GraphInput>> {
    let (graphs, dropped) = prepare_graphs(samples, vocab, config)?;
    if !dropped.is_empty() {
        eprintln!(
            "warning: {name}: dropped {} samples with no tokens (idx {:?})",
            dropped.len(),
            dropped
        );
    }
    if graphs.is_empty() {
        bail!("{name}: no usable samples");
    }
    Ok(graphs)
}

fn vocab_from(samples: &[CodeSample], config: &TrainConfig) -> Vocabulary {
    let corpus: Vec<Vec<String>> = samples
        .iter()
        .map(|s| tokens_of(&s.source, config.pretokenized))
        .collect();
    build_vocab(&corpus, config.min_count)
}

fn initial_embedding(
    init: &InitSource,
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<Option<Matrix>> {
    match init {
        InitSource::Random => Ok(None),
        InitSource::File(path) => {
            let mut rng = rng_for(config.seed, EMBEDDING_STREAM);
            let imp = import_embeddings(path, vocab, config.hidden, &mut rng)?;
            eprintln!(
                "embeddings: {} of {} tokens found in {} (coverage {:.4})",
                imp.matched,
                vocab.regular_tokens().len(),
                path.display(),
                imp.coverage
            );
            Ok(Some(imp.table))
        }
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Outputs {
    checkpoint: PathBuf,
    vocab: PathBuf,
    metrics: PathBuf,
    test_predictions: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    config: TrainConfig,
    seed: u64,
    init: String,
    inputs: Vec<InputDigest>,
    outputs: Outputs,
    started_at_unix: u64,
    finished_at_unix: Option<u64>,
    best_epoch: Option<usize>,
    best_valid_acc: Option<f64>,
    test_acc: Option<f64>,
}

impl Manifest {
    fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let started = unix_now();
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;

    let mut input_paths = vec![args.train_file.clone(), args.valid_file.clone()];
    input_paths.extend(args.test_file.clone());
    if let InitSource::File(p) = &args.init {
        input_paths.push(p.clone());
    }
    if let Some(p) = &args.config.config {
        input_paths.push(p.clone());
    }
    let inputs = input_paths
        .into_iter()
        .map(|path| {
            Ok(InputDigest {
                sha256: sha256_file(&path)?,
                path,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let out = |name: &str| args.out_dir.join(name);
    let mut manifest = Manifest {
        config: config.clone(),
        seed: config.seed,
        init: match &args.init {
            InitSource::Random => "random".into(),
            InitSource::File(p) => format!("file:{}", p.display()),
        },
        inputs,
        outputs: Outputs {
            checkpoint: out("model.ckpt"),
            vocab: out("vocab.txt"),
            metrics: out("metrics.csv"),
            test_predictions: args.test_file.as_ref().map(|_| out("test_predictions.csv")),
        },
        started_at_unix: started,
        finished_at_unix: None,
        best_epoch: None,
        best_valid_acc: None,
        test_acc: None,
    };
    let manifest_path = out("manifest.json");
    manifest.write(&manifest_path)?;

    let train_s = load_split(&args.train_file)?;
    let valid_s = load_split(&args.valid_file)?;
    let test_s = args.test_file.as_deref().map(load_split).transpose()?;
    if args.expect_codexglue {
        report_stats(Some(&train_s), Some(&valid_s), test_s.as_deref(), true)?;
    }

    let vocab = vocab_from(&train_s, &config);
    vocab.save(&manifest.outputs.vocab)?;
    eprintln!("{}; vocabulary {} entries", describe(&config), vocab.len());

    let train_g = graphs_for("train", &train_s, &vocab, &config)?;
    let valid_g = graphs_for("valid", &valid_s, &vocab, &config)?;
    let mut init = init_params(&config, vocab.len());
    if let Some(table) = initial_embedding(&args.init, &vocab, &config)? {
        init.embedding = table;
    }
    if config.epochs == 0 {
        eprintln!("warning: --epochs 0, writing the initial parameters without training");
    }

    let outcome = train_with(&train_g, &valid_g, &config, init, |m| {
        eprintln!(
            "epoch {:>3}  train_loss {:.6}  valid_acc {:.4}",
            m.epoch, m.train_loss, m.valid_acc
        );
    })?;
    write_file(&manifest.outputs.metrics, &metrics_csv(&outcome.log))?;
    let ckpt = Checkpoint {
        config: config.clone(),
        vocab_hash: vocab.content_hash(),
        best_epoch: outcome.best_epoch,
        valid_acc: outcome.best_valid_acc,
        params: outcome.best,
    };
    ckpt.save(&manifest.outputs.checkpoint)?;

    let mut stdout = io::stdout().lock();
    if let (Some(epoch), Some(acc)) = (outcome.best_epoch, outcome.best_valid_acc) {
        writeln!(stdout, "best_epoch={epoch}")?;
        writeln!(stdout, "valid_accuracy={acc}")?;
    }
    if let (Some(test), Some(path)) = (&test_s, &manifest.outputs.test_predictions) {
        let test_g = graphs_for("test", test, &vocab, &config)?;
        let eval = evaluate(&ckpt.params, &config.architecture(), &test_g)?;
        write_file(path, &predictions_csv(&eval.predictions))?;
        writeln!(stdout, "test_accuracy={}", eval.accuracy)?;
        manifest.test_acc = Some(eval.accuracy);
    }
    manifest.best_epoch = outcome.best_epoch;
    manifest.best_valid_acc = outcome.best_valid_acc;
    manifest.finished_at_unix = Some(unix_now());
    manifest.write(&manifest_path)
}

fn load_model(checkpoint: &Path, vocab: Option<&Path>) -> Result<(Checkpoint, Vocabulary)> {
    let vocab_path = match vocab {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("vocab.txt"),
    };
    let vocab = Vocabulary::load(&vocab_path)?;
    let ckpt = Checkpoint::load_for(checkpoint, &vocab)?;
    Ok((ckpt, vocab))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (ckpt, vocab) = load_model(&args.checkpoint, args.vocab.as_deref())?;
    let samples = load_split(&args.data_file)?;
    let graphs = graphs_for("data", &samples, &vocab, &ckpt.config)?;
    let eval = evaluate(&ckpt.params, &ckpt.config.architecture(), &graphs)?;
    let out = args.predictions.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("predictions.csv")
    });
    write_file(&out, &predictions_csv(&eval.predictions))?;
    println!("accuracy={}", eval.accuracy);
    Ok(())
}

fn read_input(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        None => {
            let mut s = String::new();
            io::stdin()
                .read_to_string(&mut s)
                .context("reading stdin")?;
            Ok(s)
        }
    }
}

/// Functions to process: every JSONL record, or the whole input as one.
fn sources(args_input: Option<&Path>, jsonl: bool) -> Result<Vec<String>> {
    if !jsonl {
        return Ok(vec![read_input(args_input)?]);
    }
    let text = read_input(args_input)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let v: serde_json::Value = serde_json::from_str(line)
                .with_context(|| format!("line {}: invalid JSON", n + 1))?;
            match v.get("func").and_then(|f| f.as_str()) {
                Some(f) => Ok(f.to_owned()),
                None => bail!("line {}: missing string field `func`", n + 1),
            }
        })
        .collect()
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let (ckpt, vocab) = load_model(&args.checkpoint, args.vocab.as_deref())?;
    let config = &ckpt.config;
    let arch = config.architecture();
    let mut stdout = io::stdout().lock();
    for source in sources(args.input.as_deref(), args.jsonl)? {
        let tokens = tokens_of(&source, config.pretokenized);
        let seq = encode(&tokens, &vocab, config.max_len)?;
        let graph = build_graph(&seq, config.window, config.construction)?;
        let probs = predict_proba(&ckpt.params, &arch, &GraphInput::from_graph(&graph, 0, 0))?;
        let label = if predicted_label(probs) == 1 {
            "vulnerable"
        } else {
            "benign"
        };
        writeln!(stdout, "{label} p={}", probs[1])?;
    }
    Ok(())
}

fn cmd_build_graph(args: BuildGraphArgs) -> Result<()> {
    let sources = sources(args.input.as_deref(), args.jsonl)?;
    let token_lists: Vec<Vec<String>> = sources
        .iter()
        .map(|s| tokens_of(s, args.pretokenized))
        .collect();
    let vocab = match &args.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => build_vocab(&token_lists, 1),
    };
    let mut out = String::new();
    for tokens in &token_lists {
        let seq = encode(tokens, &vocab, args.max_len)?;
        let graph = build_graph(&seq, args.window, args.construction)?;
        out.push_str(&serde_json::to_string(&GraphRecord::from(&graph))?);
        out.push('\n');
    }
    match &args.output {
        Some(p) => write_file(p, &out),
        None => {
            io::stdout().lock().write_all(out.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let config = args.config.resolve()?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let train_s = load_split(&args.train_file)?;
    let valid_s = load_split(&args.valid_file)?;
    let test_s = args.test_file.as_deref().map(load_split).transpose()?;
    let vocab = vocab_from(&train_s, &config);
    let embedding = initial_embedding(&args.init, &vocab, &config)?;
    let data = ExperimentData {
        train: &train_s,
        valid: &valid_s,
        test: test_s.as_deref(),
        vocab: &vocab,
        embedding: embedding.as_ref(),
    };
    let axes: Vec<AblationAxis> = match args.axis {
        AxisChoice::Residual => vec![AblationAxis::Residual],
        AxisChoice::Mix => vec![AblationAxis::Mix],
        AxisChoice::Window => vec![AblationAxis::Window],
        AxisChoice::Fraction => vec![AblationAxis::Fraction],
        AxisChoice::All => AblationAxis::ALL.to_vec(),
    };
    let mut stdout = io::stdout().lock();
    for axis in axes {
        eprintln!("ablating {axis} from {}", describe(&config));
        let rows = ablate(&data, &config, axis)?;
        let csv = ablation_csv(&rows);
        write_file(&args.out_dir.join(format!("ablation_{axis}.csv")), &csv)?;
        stdout.write_all(csv.as_bytes())?;
    }
    Ok(())
}

fn report_stats(
    train: Option<&[CodeSample]>,
    valid: Option<&[CodeSample]>,
    test: Option<&[CodeSample]>,
    expect_codexglue: bool,
) -> Result<()> {
    let report = verify_stats(train, valid, test, expect_codexglue)?;
    if report.verdict == StatsVerdict::Mismatch {
        eprintln!("warning: split sizes differ from the CodeXGLUE release");
    }
    println!("{report}");
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let load = |p: &Option<PathBuf>| p.as_deref().map(load_split).transpose();
    let (train, valid, test) = (
        load(&args.train_file)?,
        load(&args.valid_file)?,
        load(&args.test_file)?,
    );
    report_stats(
        train.as_deref(),
        valid.as_deref(),
        test.as_deref(),
        args.expect_codexglue,
    )
}
