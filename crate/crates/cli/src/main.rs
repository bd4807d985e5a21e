//! `embedmap`: synthesize, split, train, evaluate and query embedding
//! translators from the command line.

mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use embedmap::data::{self, MapKind, PairDataset, SplitIndices, SyntheticSpec};
use embedmap::nn::{self, MlpModel};
use embedmap::retrieval::{compare_retrieval, ComparisonReport, SearchResult, VectorStore};
use embedmap::training::{self, InputChecksum, RunReport, TrainConfig};
use embedmap::{atomic_write, format, rng, Exec};
use serde::Serialize;

use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

const PREDICT_BATCH: usize = 256;

#[derive(Parser)]
#[command(name = "embedmap", version, about = "Train and query feed-forward embedding translators")]
struct Cli {
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pair file from a random ground-truth map.
    Synth(SynthArgs),
    /// Validate a review CSV, drop over-long reviews and sample a subset.
    Ingest(IngestArgs),
    /// Partition the ids of a pair file into train/validation/test.
    Split(SplitArgs),
    /// Train a translator on the train section of a split.
    Train(TrainArgs),
    /// Score a model on one section of a split.
    Eval(EvalArgs),
    /// Translate every vector of a file.
    Predict(PredictArgs),
    /// Rank a vector store against query vectors.
    Search(SearchArgs),
    /// Compare rankings of translated queries against their true counterparts.
    Compare(CompareArgs),
    /// Print a model's architecture, size and checksum.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of pairs.
    #[arg(long)]
    n: usize,
    /// Source dimension.
    #[arg(long, default_value_t = nn::DEFAULT_INPUT_DIM)]
    d_in: usize,
    /// Target dimension.
    #[arg(long, default_value_t = nn::DEFAULT_OUTPUT_DIM)]
    d_out: usize,
    #[arg(long)]
    seed: u64,
    /// Standard deviation of gaussian noise added to targets.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Ground-truth map: `linear` or `linear+tanh`.
    #[arg(long, default_value = "linear")]
    map: MapKind,
    #[arg(long, default_value = "pairs.v2vp")]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Review CSV with Id, ProductId, UserId, Score, Summary, Text columns.
    #[arg(long)]
    csv: PathBuf,
    /// Drop reviews whose approximate token count exceeds this.
    #[arg(long, default_value_t = data::DEFAULT_MAX_TOKENS)]
    max_tokens: usize,
    /// Number of reviews to sample after filtering.
    #[arg(long, default_value_t = 50_000)]
    sample: usize,
    #[arg(long)]
    seed: u64,
    /// Write the sampled reviews here as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// Fraction of all ids held out for testing.
    #[arg(long, default_value_t = data::DEFAULT_TEST_FRAC)]
    test_frac: f64,
    /// Fraction of the remaining ids used for validation.
    #[arg(long, default_value_t = data::DEFAULT_VAL_FRAC)]
    val_frac: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "split.txt")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value_t = training::DEFAULT_EPOCHS as u64, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    /// Minibatch size.
    #[arg(long, default_value_t = training::DEFAULT_BATCH_SIZE as u64, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Dropout rate after every hidden layer.
    #[arg(long, default_value_t = nn::DEFAULT_DROPOUT)]
    dropout: f32,
    /// Comma-separated hidden widths; empty for a single linear layer.
    #[arg(long, default_value = "1536,1536,1536")]
    arch: String,
    /// Seeds initialization, shuffling and dropout.
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "model.v2vm")]
    out: PathBuf,
    /// JSON run report; per-epoch metrics go to a CSV beside it.
    #[arg(long, default_value = "report.json")]
    report: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Split section to score.
    #[arg(long, default_value = "test", value_parser = ["train", "validation", "test"])]
    section: String,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Pair file (source side is read) or vector file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Vector file of translations, one per input id.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StoreArgs {
    /// Pair or vector file whose target vectors form the store.
    #[arg(long)]
    store: PathBuf,
    /// Restrict the store to one section of this split.
    #[arg(long, requires = "section")]
    split: Option<PathBuf>,
    #[arg(long, requires = "split", value_parser = ["train", "validation", "test"])]
    section: Option<String>,
    /// Review CSV used to show titles and contents next to hits.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    store: StoreArgs,
    /// Vector file of queries (target side of a pair file).
    #[arg(long)]
    query_vector: PathBuf,
    /// Only run the query with this id.
    #[arg(long)]
    query_id: Option<u64>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Write the rankings as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    store: StoreArgs,
    /// Translated queries, e.g. the output of `predict`.
    #[arg(long)]
    query_translated: PathBuf,
    /// True target-space queries, matched to translated ones by id.
    #[arg(long)]
    query_true: PathBuf,
    /// Only compare the query with this id.
    #[arg(long)]
    query_id: Option<u64>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Write the comparisons as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", usage_for_args());
            }
            return ExitCode::from(1);
        }
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => ingest(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a, exec),
        Command::Eval(a) => eval(a, exec),
        Command::Predict(a) => predict(a, exec),
        Command::Search(a) => search(a, exec),
        Command::Compare(a) => compare(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Usage line of the subcommand named on the command line, if any.
fn usage_for_args() -> clap::builder::StyledStr {
    let mut cmd = Cli::command();
    cmd.build();
    let name = std::env::args().skip(1).find(|a| cmd.find_subcommand(a).is_some());
    match name.and_then(|n| cmd.find_subcommand_mut(&n).map(|c| c.render_usage())) {
        Some(u) => u,
        None => cmd.render_usage(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn checksum(path: &Path, bytes: &[u8]) -> InputChecksum {
    let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    InputChecksum::of(&name, bytes)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn load_model(path: &Path) -> Result<MlpModel> {
    Ok(MlpModel::deserialize(&read(path)?)?)
}

fn load_split(path: &Path) -> Result<SplitIndices> {
    Ok(SplitIndices::parse(&String::from_utf8_lossy(&read(path)?))?)
}

fn section<'a>(split: &'a SplitIndices, name: &str) -> &'a [u64] {
    match name {
        "train" => &split.train,
        "validation" => &split.validation,
        _ => &split.test,
    }
}

fn parse_arch(spec: &str) -> Result<Vec<usize>> {
    let spec = spec.trim();
    if spec.is_empty() {
        return Ok(Vec::new());
    }
    spec.split(',')
        .map(|w| match w.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("--arch: '{w}' is not a positive width"))),
        })
        .collect()
}

fn synth(a: SynthArgs) -> Result<()> {
    println!("seed: {}", a.seed);
    let spec =
        SyntheticSpec { n: a.n, d_in: a.d_in, d_out: a.d_out, seed: a.seed, noise_sigma: a.noise, map_kind: a.map };
    let (pairs, _) = data::generate_synthetic_pairs(&spec)?;
    write(&a.out, &pairs.to_bytes())?;
    println!(
        "wrote {} pairs ({} -> {}, map {}, noise {}) to {}",
        a.n,
        a.d_in,
        a.d_out,
        a.map,
        a.noise,
        a.out.display()
    );
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    println!("seed: {}", a.seed);
    let corpus = data::parse_corpus(&a.csv)?;
    println!("parsed {} reviews, skipped {} malformed rows", corpus.records.len(), corpus.diagnostics.len());
    for d in corpus.diagnostics.iter().take(10) {
        println!("  line {}: {}", d.line, d.message);
    }
    let parsed = corpus.records.len();
    let kept = data::filter_by_length(corpus.records, a.max_tokens);
    println!("{} reviews within {} tokens ({} dropped)", kept.len(), a.max_tokens, parsed - kept.len());
    let sample = data::sample_subset(&kept, a.sample, a.seed)?;
    println!("sampled {} reviews", sample.len());
    if let Some(out) = &a.out {
        write(out, &data::write_corpus_csv(&sample)?)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    println!("seed: {}", a.seed);
    let pairs = PairDataset::from_bytes(&read(&a.pairs)?)?;
    let split = data::split_dataset(&pairs, a.test_frac, a.val_frac, a.seed)?;
    write(&a.out, split.to_text().as_bytes())?;
    println!(
        "train {} / validation {} / test {} written to {}",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs, exec: Exec) -> Result<()> {
    println!("seed: {}", a.seed);
    let pair_bytes = read(&a.pairs)?;
    let split_bytes = read(&a.split)?;
    let pairs = PairDataset::from_bytes(&pair_bytes)?;
    let split = SplitIndices::parse(&String::from_utf8_lossy(&split_bytes))?;
    split.check_against(&pairs)?;
    let mut cfg = TrainConfig {
        epochs: a.epochs as usize,
        batch_size: a.batch as usize,
        seed: a.seed,
        hidden: parse_arch(&a.arch)?,
        dropout: a.dropout,
        ..TrainConfig::default()
    };
    cfg.adam.learning_rate = a.lr;
    cfg.validate()?;
    let model = MlpModel::init(&cfg.architecture(pairs.d_in(), pairs.d_out()), cfg.seed)?;
    println!(
        "training {} parameters on {} pairs ({} validation) for {} epochs",
        model.param_count(),
        split.train.len(),
        split.validation.len(),
        cfg.epochs
    );
    let outcome = training::train_with(model, &pairs, &split, &cfg, exec, |m| {
        let val = m.val_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.8}"));
        let cos = m.val_mean_cosine.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        println!(
            "epoch {:>3}  train loss {:.8}  val loss {val}  val cosine {cos}  {:.1}s",
            m.epoch, m.train_loss, m.wall_time
        );
    })?;
    write(&a.out, &outcome.model.serialize())?;
    let report = RunReport {
        kind: "train".into(),
        rng: rng::ALGORITHM.into(),
        split_seed: split.seed,
        architecture: outcome.model.architecture(),
        output_dim: outcome.model.output_dim(),
        config: Some(cfg),
        inputs: vec![checksum(&a.pairs, &pair_bytes), checksum(&a.split, &split_bytes)],
        epochs: outcome.history.clone(),
        evaluated: None,
        stats: None,
        cosines: Vec::new(),
    };
    write(&a.report, report.to_json()?.as_bytes())?;
    let csv_path = a.report.with_extension("csv");
    write(&csv_path, training::metrics_csv(&outcome.history).as_bytes())?;
    println!("wrote {}, {} and {}", a.out.display(), a.report.display(), csv_path.display());
    Ok(())
}

fn eval(a: EvalArgs, exec: Exec) -> Result<()> {
    let model_bytes = read(&a.model)?;
    let pair_bytes = read(&a.pairs)?;
    let split_bytes = read(&a.split)?;
    let model = MlpModel::deserialize(&model_bytes)?;
    let pairs = PairDataset::from_bytes(&pair_bytes)?;
    let split = SplitIndices::parse(&String::from_utf8_lossy(&split_bytes))?;
    println!("seed: {} (split)", split.seed);
    split.check_against(&pairs)?;
    let ids = section(&split, &a.section);
    let ev = training::evaluate_with(&model, &pairs, ids, training::DEFAULT_BINS, exec)?;
    let s = &ev.stats;
    println!(
        "{} {} pairs: mean cosine {:.6}  std {:.6}  min {:.6}  max {:.6}",
        a.section, s.n, s.mean, s.std, s.min, s.max
    );
    if let Some(path) = &a.report {
        let report = RunReport {
            kind: "eval".into(),
            rng: rng::ALGORITHM.into(),
            split_seed: split.seed,
            config: None,
            architecture: model.architecture(),
            output_dim: model.output_dim(),
            inputs: vec![
                checksum(&a.model, &model_bytes),
                checksum(&a.pairs, &pair_bytes),
                checksum(&a.split, &split_bytes),
            ],
            epochs: Vec::new(),
            evaluated: Some(a.section.clone()),
            stats: Some(ev.stats),
            cosines: ev.cosines,
        };
        write(path, report.to_json()?.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Vectors to feed the model: the source side of a pair file, or the
/// vectors of a vector file.
fn model_inputs(file: &PairDataset, d_in: usize) -> Result<Vec<&[f32]>> {
    let rows: Vec<&[f32]> = if file.d_in() == d_in {
        (0..file.len()).map(|i| file.source(i)).collect()
    } else if file.d_in() == 0 && file.d_out() == d_in {
        (0..file.len()).map(|i| file.target(i)).collect()
    } else {
        return Err(CliError::Data(format!(
            "input holds {}->{} vectors but the model expects {d_in}-d inputs",
            file.d_in(),
            file.d_out()
        )));
    };
    Ok(rows)
}

fn predict(a: PredictArgs, exec: Exec) -> Result<()> {
    println!("seed: none");
    let model = load_model(&a.model)?;
    let input = PairDataset::from_bytes(&read(&a.input)?)?;
    let rows = model_inputs(&input, model.input_dim())?;
    let mut out = PairDataset::new(0, model.output_dim());
    for (c, chunk) in rows.chunks(PREDICT_BATCH).enumerate() {
        let flat: Vec<f64> = chunk.iter().flat_map(|r| r.iter().map(|&v| v as f64)).collect();
        let pred = model.predict_batch(&flat, chunk.len(), exec)?;
        for (j, y) in pred.chunks(model.output_dim()).enumerate() {
            let id = input.ids()[c * PREDICT_BATCH + j];
            let y: Vec<f32> = y.iter().map(|&v| v as f32).collect();
            if y.iter().any(|v| !v.is_finite()) {
                return Err(CliError::Numeric(format!("non-finite prediction for id {id}")));
            }
            out.push(id, &[], &y)?;
        }
    }
    write(&a.out, &out.to_bytes())?;
    println!("translated {} vectors to {}-d, wrote {}", out.len(), model.output_dim(), a.out.display());
    Ok(())
}

fn build_store(a: &StoreArgs) -> Result<VectorStore> {
    let pairs = PairDataset::from_bytes(&read(&a.store)?)?;
    let store = match (&a.split, &a.section) {
        (Some(path), Some(name)) => {
            let split = load_split(path)?;
            VectorStore::from_targets(&pairs, Some(section(&split, name)))?
        }
        _ => VectorStore::from_targets(&pairs, None)?,
    };
    println!("store: {} vectors of dimension {}", store.len(), store.dim());
    Ok(store)
}

fn load_corpus(path: Option<&PathBuf>) -> Result<Vec<data::ReviewRecord>> {
    match path {
        Some(p) => Ok(data::parse_corpus(p)?.records),
        None => Ok(Vec::new()),
    }
}

/// `(id, vector)` queries from the target side of a file.
fn queries(path: &Path, only: Option<u64>) -> Result<Vec<(u64, Vec<f32>)>> {
    let file = PairDataset::from_bytes(&read(path)?)?;
    let picked: Vec<(u64, Vec<f32>)> = (0..file.len())
        .filter(|&i| only.is_none_or(|id| file.ids()[i] == id))
        .map(|i| (file.ids()[i], file.target(i).to_vec()))
        .collect();
    if picked.is_empty() {
        return Err(CliError::Data(match only {
            Some(id) => format!("{}: no query with id {id}", path.display()),
            None => format!("{}: no queries", path.display()),
        }));
    }
    Ok(picked)
}

#[derive(Serialize)]
struct QueryResult {
    query: u64,
    #[serde(flatten)]
    result: SearchResult,
}

fn search(a: SearchArgs, exec: Exec) -> Result<()> {
    println!("seed: none");
    let store = build_store(&a.store)?;
    let corpus = load_corpus(a.store.csv.as_ref())?;
    let titles: std::collections::HashMap<u64, &str> = corpus.iter().map(|r| (r.id, r.summary.as_str())).collect();
    let mut results = Vec::new();
    for (id, q) in queries(&a.query_vector, a.query_id)? {
        let result = store.top_k_with(&q, a.k, exec)?;
        println!("query {id}:");
        for (rank, h) in result.hits.iter().enumerate() {
            match titles.get(&h.id) {
                Some(t) => println!("  {:>3}. id {:<10} score {:.6}  {t}", rank + 1, h.id, h.score),
                None => println!("  {:>3}. id {:<10} score {:.6}", rank + 1, h.id, h.score),
            }
        }
        results.push(QueryResult { query: id, result });
    }
    if let Some(out) = &a.out {
        write(out, to_json(&results)?.as_bytes())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct QueryComparison {
    query: u64,
    #[serde(flatten)]
    report: ComparisonReport,
}

fn compare(a: CompareArgs) -> Result<()> {
    println!("seed: none");
    let store = build_store(&a.store)?;
    let corpus = load_corpus(a.store.csv.as_ref())?;
    let truth: std::collections::HashMap<u64, Vec<f32>> = queries(&a.query_true, a.query_id)?.into_iter().collect();
    let mut out = Vec::new();
    for (id, qt) in queries(&a.query_translated, a.query_id)? {
        let Some(qtrue) = truth.get(&id) else { continue };
        let mut report = compare_retrieval(&store, &qt, qtrue, a.k)?;
        if !corpus.is_empty() {
            report.join_corpus(&corpus);
        }
        println!("query {id}:");
        print!("{}", report.to_text(48));
        out.push(QueryComparison { query: id, report });
    }
    if out.is_empty() {
        return Err(CliError::Data("translated and true query files share no ids".into()));
    }
    let mean = out.iter().map(|c| c.report.overlap).sum::<f64>() / out.len() as f64;
    println!("mean overlap@{} over {} queries: {mean:.4}", a.k, out.len());
    if let Some(path) = &a.report {
        write(path, to_json(&out)?.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    println!("seed: none");
    let bytes = read(&a.model)?;
    let model = MlpModel::deserialize(&bytes)?;
    println!("layers:");
    for (i, l) in model.architecture().iter().enumerate() {
        println!(
            "  {i}: {} -> {}  {:?}  dropout {}  ({} parameters)",
            l.in_dim,
            l.out_dim,
            l.activation,
            l.dropout_rate,
            l.param_count()
        );
    }
    println!("parameters: {}", model.param_count());
    println!("size bytes: {}", bytes.len());
    let body = &bytes[..bytes.len() - 8];
    println!("checksum: crc64 {:016x}", format::crc64(body));
    Ok(())
}
