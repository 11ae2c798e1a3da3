//! `idcnn`: train, tag, evaluate and benchmark sequence labelers.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or input error,
//! 3 training diverged.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};
use idcnn_core::bench::{bench, BenchConfig};
use idcnn_core::config::Context;
use idcnn_core::data::{
    build_sequences, iob_to_bilou, load_embeddings, normalize_digits, read_conll, split_label, Document, LabelScheme,
    SequenceKind, TaggedSequence, Vocabulary,
};
use idcnn_core::eval::{extract_segments, micro_f1};
use idcnn_core::train::{sweep, train_with};
use idcnn_core::{Config, Error, Model};

#[derive(Parser)]
#[command(name = "idcnn", version, about = "Dilated-convolution sequence labeling")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only print errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write model.bin, metrics.tsv and config.resolved.
    Train(TrainArgs),
    /// Append a predicted BILOU column to a CoNLL file.
    Tag(TagArgs),
    /// Score predictions against gold labels (segment-level micro F1).
    Eval(EvalArgs),
    /// Time decoding of one or more models over a corpus.
    Bench(BenchArgs),
    /// Train several configurations and report their dev scores.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Training data in CoNLL format.
    #[arg(long)]
    train: PathBuf,
    /// Development data in CoNLL format.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Pretrained word vectors, one `word v1 ... vk` line per word.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Hyperparameter file of `key = value` lines.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct TagArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Gold labels in the last column (IOB or BILOU).
    #[arg(long)]
    gold: PathBuf,
    /// Predicted labels in the last column, token-aligned with the gold file.
    #[arg(long)]
    pred: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// A model as NAME=PATH (repeatable).
    #[arg(long = "model", required = true, value_parser = parse_named_path)]
    models: Vec<(String, PathBuf)>,
    /// Corpus to decode.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000,10000")]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    /// Model the multipliers are relative to; defaults to the first one.
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long, default_value_t = 4096)]
    memory_budget_mb: usize,
    /// Directory for bench.tsv and bench.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Hyperparameter files; each is trained from scratch (repeatable).
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), path.into())),
        _ => Err(format!("expected NAME=PATH, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Tag(a) => cmd_tag(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ")
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Diverged { .. }) => 3,
        Some(
            Error::Usage(_)
            | Error::Parse { .. }
            | Error::Config(_)
            | Error::Io { .. }
            | Error::Mismatch(_)
            | Error::TooLong { .. }
            | Error::Format(_)
            | Error::Init(_),
        ) => 2,
        Some(Error::Dimension { .. } | Error::NonFinite(_)) | None => 1,
    }
}

fn kind_of(config: &Config) -> SequenceKind {
    match config.train.context {
        Context::Sentence => SequenceKind::Sentence,
        Context::Document => SequenceKind::Document,
    }
}

/// Training data and the vocabulary and label set derived from it.
struct Corpus {
    train_docs: Vec<Document>,
    dev_docs: Vec<Document>,
    vocab: Vocabulary,
    labels: LabelScheme,
    embeddings: Option<idcnn_core::data::Embeddings>,
}

impl Corpus {
    fn load(args: &DataArgs) -> anyhow::Result<Self> {
        let train_docs = read_conll(&args.train)?;
        let dev_docs = match &args.dev {
            Some(p) => read_conll(p)?,
            None => Vec::new(),
        };
        let embeddings = args.embeddings.as_ref().map(load_embeddings).transpose()?;
        let sentences = || train_docs.iter().flat_map(|d| &d.sentences);
        let mut vocab = Vocabulary::from_words(
            sentences()
                .flat_map(|s| s.tokens().map(normalize_digits))
                .collect::<Vec<_>>()
                .iter()
                .map(String::as_str),
        );
        if let Some(emb) = &embeddings {
            for w in &emb.words {
                vocab.insert(&normalize_digits(w));
            }
        }
        let mut gold = Vec::new();
        for s in sentences() {
            let labels = s
                .labels()
                .ok_or_else(|| Error::Usage(format!("{}: training data has no label column", args.train.display())))?;
            gold.extend(labels);
        }
        let labels = LabelScheme::from_labels(gold);
        log::info!("vocabulary {} words, {} labels", vocab.len(), labels.len());
        Ok(Corpus {
            train_docs,
            dev_docs,
            vocab,
            labels,
            embeddings,
        })
    }

    fn sequences(&self, kind: SequenceKind) -> anyhow::Result<(Vec<TaggedSequence>, Vec<TaggedSequence>)> {
        let build = |docs: &[Document]| build_sequences(docs, &self.vocab, Some(&self.labels), kind);
        Ok((build(&self.train_docs)?, build(&self.dev_docs)?))
    }

    fn model(&self, config: &Config) -> idcnn_core::Result<Model> {
        let mut model = Model::new(
            config.clone(),
            self.vocab.clone(),
            self.labels.clone(),
            config.train.seed,
        )?;
        if let Some(emb) = &self.embeddings {
            let hits = model.load_pretrained(emb)?;
            log::info!("{hits} pretrained vectors loaded");
        }
        if let Some(path) = &config.train.init_from {
            let copied = model.warm_start(&Model::load(path)?);
            log::info!("{copied} parameters initialized from {}", path.display());
        }
        Ok(model)
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<Config> {
    let mut config = Config::load(path).with_context(|| format!("reading config {}", path.display()))?;
    if let Some(s) = seed {
        config.train.seed = s;
    }
    Ok(config)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let config = load_config(&args.config, args.data.seed)?;
    let corpus = Corpus::load(&args.data)?;
    let (train_seqs, dev_seqs) = corpus.sequences(kind_of(&config))?;
    let model = corpus.model(&config)?;

    let out = &args.data.out;
    create_dir(out)?;
    write_file(&out.join("config.resolved"), config.to_text())?;
    let metrics_path = out.join("metrics.tsv");
    let file = fs::File::create(&metrics_path).map_err(|e| Error::Io {
        path: metrics_path.clone(),
        source: e,
    })?;
    let mut metrics = BufWriter::new(file);
    writeln!(metrics, "epoch\tsplit\tmetric\tvalue")?;
    let mut write_err = None;
    let outcome = train_with(&config, model, &train_seqs, &dev_seqs, |m| {
        log::info!("{}", m.line());
        if let Err(e) = writeln!(metrics, "{}", m.line()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", metrics_path.display()));
    }
    metrics.flush()?;

    if let Some(e) = outcome.diverged {
        return Err(e.into());
    }
    outcome.model.save(out.join("model.bin"))?;
    match outcome.best_dev_f1 {
        Some(f1) => log::warn!("best dev F1 {f1:.2} at epoch {}", outcome.best_epoch),
        None => log::warn!("trained {} epochs", outcome.best_epoch),
    }
    Ok(())
}

fn cmd_tag(args: TagArgs) -> anyhow::Result<()> {
    let model = Model::load(&args.model)?;
    let docs = read_conll(&args.input)?;
    check_compatible(&model, &docs, &args.input)?;
    let kind = kind_of(&model.config);
    let seqs = build_sequences(&docs, &model.vocab, None, kind)?;

    let mut predictions = Vec::new();
    for seq in &seqs {
        let pred = model.predict_sequence(seq)?;
        let mut offset = 0;
        for &len in &seq.sentence_lengths {
            predictions.push(pred[offset..offset + len].to_vec());
            offset += len;
        }
    }
    let mut text = String::new();
    let sentences = docs.iter().flat_map(|d| &d.sentences);
    for (sentence, pred) in sentences.zip(&predictions) {
        for (cols, &p) in sentence.columns.iter().zip(pred) {
            text.push_str(&cols.join(" "));
            text.push(' ');
            text.push_str(model.labels.label(p));
            text.push('\n');
        }
        text.push('\n');
    }
    match &args.output {
        Some(path) => write_file(path, text),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// Rejects inputs whose labels use types the model never saw, or whose
/// tokens the model's vocabulary does not cover at all.
fn check_compatible(model: &Model, docs: &[Document], path: &Path) -> anyhow::Result<()> {
    let known: BTreeSet<&str> = model.labels.types().iter().map(String::as_str).collect();
    let mut tokens = 0;
    let mut covered = 0;
    for s in docs.iter().flat_map(|d| &d.sentences) {
        if let Some(labels) = s.labels() {
            for (i, l) in labels.iter().enumerate() {
                if let Some((p, ty)) = split_label(l) {
                    if matches!(p, 'B' | 'I' | 'L' | 'U') && !known.contains(ty) {
                        return Err(Error::Mismatch(format!(
                            "{}:{}: entity type {ty:?} is not in the model's label scheme",
                            path.display(),
                            s.lines[i]
                        ))
                        .into());
                    }
                }
            }
        }
        for w in s.tokens() {
            tokens += 1;
            covered += usize::from(model.vocab.contains(&normalize_digits(w)));
        }
    }
    if tokens > 0 && covered == 0 {
        bail!(Error::Mismatch(format!(
            "{}: none of the {tokens} tokens is in the model's vocabulary",
            path.display()
        )));
    }
    Ok(())
}

/// Line numbers, tokens and last-column labels of one sentence.
type Labeled = (Vec<usize>, Vec<String>, Vec<String>);

/// Every labeled sentence of a file.
fn labeled_sentences(path: &Path) -> anyhow::Result<Vec<Labeled>> {
    let docs = read_conll(path)?;
    let mut out = Vec::new();
    for s in docs.iter().flat_map(|d| &d.sentences) {
        let labels = s.labels().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: s.lines[0],
            msg: "no label column".into(),
        })?;
        out.push((
            s.lines.clone(),
            s.tokens().map(str::to_string).collect(),
            labels.iter().map(|l| l.to_string()).collect(),
        ));
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let gold = labeled_sentences(&args.gold)?;
    let pred = labeled_sentences(&args.pred)?;
    let where_ = |g: Option<usize>, p: Option<usize>| {
        let at = |path: &Path, l: Option<usize>| match l {
            Some(l) => format!("{}:{l}", path.display()),
            None => format!("{}:end", path.display()),
        };
        format!("{} vs {}", at(&args.gold, g), at(&args.pred, p))
    };
    let (mut gold_segs, mut pred_segs) = (Vec::new(), Vec::new());
    for i in 0..gold.len().max(pred.len()) {
        let (g, p) = match (gold.get(i), pred.get(i)) {
            (Some(g), Some(p)) => (g, p),
            (g, p) => {
                let msg = format!("sentence count differs ({} vs {})", gold.len(), pred.len());
                bail!(Error::Mismatch(format!(
                    "{}: {msg}",
                    where_(g.map(|g| g.0[0]), p.map(|p| p.0[0]))
                )));
            }
        };
        for t in 0..g.1.len().max(p.1.len()) {
            if g.1.get(t) != p.1.get(t) {
                bail!(Error::Mismatch(format!(
                    "{}: tokens are not aligned",
                    where_(g.0.get(t).copied(), p.0.get(t).copied())
                )));
            }
        }
        gold_segs.push(extract_segments(&iob_to_bilou(&g.2)));
        pred_segs.push(extract_segments(&iob_to_bilou(&p.2)));
    }
    println!("{}", micro_f1(&gold_segs, &pred_segs).report());
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> anyhow::Result<()> {
    let docs = read_conll(&args.data)?;
    let mut loaded = Vec::new();
    for (name, path) in &args.models {
        let model = Model::load(path)?;
        let seqs = build_sequences(&docs, &model.vocab, None, kind_of(&model.config))?;
        loaded.push((name.clone(), model, seqs));
    }
    let cfg = BenchConfig {
        batch_sizes: args.batch_sizes,
        repeats: args.repeats,
        baseline: args.baseline.unwrap_or_else(|| args.models[0].0.clone()),
        memory_budget_bytes: args.memory_budget_mb << 20,
    };
    if !args.models.iter().any(|(n, _)| *n == cfg.baseline) {
        bail!(Error::Usage(format!(
            "baseline {:?} is not one of the models",
            cfg.baseline
        )));
    }
    let inputs: Vec<(String, &Model, &[TaggedSequence])> =
        loaded.iter().map(|(n, m, s)| (n.clone(), m, s.as_slice())).collect();
    let report = bench(&inputs, &cfg)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("bench.tsv"), report.to_tsv())?;
    write_file(&args.out.join("bench.json"), report.to_json())?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let corpus = Corpus::load(&args.data)?;
    let mut configs = Vec::new();
    for path in &args.configs {
        let name = path
            .file_stem()
            .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        configs.push((name, load_config(path, args.data.seed)?));
    }
    let kind = kind_of(&configs[0].1);
    if configs.iter().any(|(_, c)| kind_of(c) != kind) {
        bail!(Error::Usage("all sweep configs must use the same context".into()));
    }
    let (train_seqs, dev_seqs) = corpus.sequences(kind)?;

    create_dir(&args.data.out)?;
    for (name, c) in &configs {
        write_file(&args.data.out.join(format!("{name}.config.resolved")), c.to_text())?;
    }
    let results = sweep(&configs, |c| corpus.model(c), &train_seqs, &dev_seqs)?;
    let mut tsv = String::from("config\tbest_epoch\tdev_f1\tdev_accuracy\n");
    for r in &results {
        let f1 = r.best_dev_f1.map_or("-".to_string(), |f| format!("{f:.2}"));
        tsv.push_str(&format!("{}\t{}\t{f1}\t{:.4}\n", r.name, r.best_epoch, r.dev_accuracy));
    }
    write_file(&args.data.out.join("sweep.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}
