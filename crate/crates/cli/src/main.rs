use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use seqforge::checkpoint::SavedModel;
use seqforge::eval::{bleu_with_reference_length, perplexity, SentenceScorer, UniformScorer};
use seqforge::langmodel::{
    cbow_examples, ngram_examples, Cbow, CbowConfig, Nlm, NlmConfig, RnnLm, RnnLmConfig,
};
use seqforge::ngram::{ArpaModel, NgramCounts, NgramModel, Smoothing};
use seqforge::nn::CellKind;
use seqforge::optim::{train_with, OptimConfig, TrainReport};
use seqforge::text::{read_corpus, read_parallel, split_lines, tokenize, TokenId, Vocabulary, DEFAULT_MAX_LEN};
use seqforge::translate::{
    alignment_tsv, beam_decode, default_max_len, greedy_decode, sample_translation, Arch, EncodedPair, NmtConfig,
    NmtModel,
};

/// Flags that take no value; `key=true` in a config file turns them on.
const SWITCHES: &[&str] = &["sample", "uniform"];

#[derive(Parser)]
#[command(name = "seqforge", version, about = "Language modeling and neural translation toolkit")]
struct Cli {
    /// File of `key=value` lines used as defaults for flags not given on
    /// the command line.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Vocabulary files.
    #[command(subcommand)]
    Vocab(VocabCommand),
    /// Language models.
    #[command(subcommand)]
    Lm(LmCommand),
    /// Translation models.
    #[command(subcommand)]
    Nmt(NmtCommand),
    /// Translate one sentence per input line.
    Translate(TranslateArgs),
    /// Corpus BLEU of candidates against one reference each.
    Bleu(BleuArgs),
    /// Export attention alignments as TSV.
    Align(AlignArgs),
}

#[derive(Subcommand)]
enum VocabCommand {
    Build(VocabBuildArgs),
}

#[derive(Args)]
struct VocabBuildArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Maximum size including the four special tokens.
    #[arg(long)]
    max_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
}

#[derive(Subcommand)]
enum LmCommand {
    Train(LmTrainArgs),
    Eval(LmEvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LmKind {
    Ngram,
    Nlm,
    Cbow,
    Rnnlm,
}

#[derive(Clone, Copy, ValueEnum)]
enum SmoothingArg {
    Kn,
    Interpolated,
}

#[derive(Clone, Copy, ValueEnum)]
enum CellArg {
    Simple,
    Gru,
    Lstm,
}

impl From<CellArg> for CellKind {
    fn from(c: CellArg) -> Self {
        match c {
            CellArg::Simple => CellKind::Simple,
            CellArg::Gru => CellKind::Gru,
            CellArg::Lstm => CellKind::Lstm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Simple,
    Attention,
}

#[derive(Args)]
struct OptimArgs {
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Gradient norm threshold; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    /// Updates between validation evaluations.
    #[arg(long, default_value_t = 100)]
    eval_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl OptimArgs {
    fn config(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.lr,
            minibatch_size: self.batch_size,
            clip_threshold: (self.clip > 0.0).then_some(self.clip),
            max_epochs: self.epochs,
            patience: self.patience,
            eval_every: self.eval_every,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct LmTrainArgs {
    #[arg(long, value_enum)]
    kind: LmKind,
    #[arg(long)]
    train: PathBuf,
    /// Validation corpus; required for neural kinds and interpolated n-grams.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Checkpoint path, or ARPA path for n-gram models.
    #[arg(long)]
    output: PathBuf,
    /// Existing vocabulary file; built from the training corpus otherwise.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    max_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    /// n-gram order (ngram and nlm).
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long, value_enum, default_value_t = SmoothingArg::Kn)]
    smoothing: SmoothingArg,
    /// Additive constant of the unigram base for interpolated smoothing.
    #[arg(long, default_value_t = 1.0)]
    base_alpha: f64,
    #[arg(long, default_value_t = 32)]
    emb: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Tokens on each side for cbow.
    #[arg(long, default_value_t = 2)]
    window: usize,
    #[arg(long, value_enum, default_value_t = CellArg::Gru)]
    cell: CellArg,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args)]
struct LmEvalArgs {
    /// Checkpoint or ARPA file.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    /// Score with the uniform distribution over the vocabulary instead.
    #[arg(long)]
    uniform: bool,
    /// Vocabulary the test data is expected to use; must match the model's.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Subcommand)]
enum NmtCommand {
    Train(NmtTrainArgs),
}

#[derive(Args)]
struct NmtTrainArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    val_src: PathBuf,
    #[arg(long)]
    val_tgt: PathBuf,
    #[arg(long, value_enum, default_value_t = ArchArg::Attention)]
    arch: ArchArg,
    #[arg(long, value_enum, default_value_t = CellArg::Gru)]
    cell: CellArg,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    emb: usize,
    #[arg(long, default_value_t = 64)]
    att_dim: usize,
    #[arg(long)]
    src_max_size: Option<usize>,
    #[arg(long)]
    tgt_max_size: Option<usize>,
    /// Pairs with a longer side are dropped.
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    beam: u64,
    /// Output length cap; defaults to twice the source length plus five.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    max_len: Option<u64>,
    /// Ancestral sampling instead of search.
    #[arg(long)]
    sample: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BleuArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    references: PathBuf,
    /// Total reference length to use in the brevity penalty.
    #[arg(long)]
    ref_len: Option<usize>,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

/// Invalid flag combination detected after parsing.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Appends `--key value` for every config entry whose flag is absent.
fn merge_config(mut args: Vec<String>) -> anyhow::Result<Vec<String>> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let path = match args[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => args.get(pos + 1).cloned().ok_or_else(|| usage("--config needs a file"))?,
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let present = |key: &str, args: &[String]| {
        let flag = format!("--{key}");
        args.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")))
    };
    let mut extra = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{path}:{}: expected key=value", i + 1)))?;
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        if key == "config" || present(&key, &args) {
            continue;
        }
        if SWITCHES.contains(&key.as_str()) {
            match value {
                "true" => extra.push(format!("--{key}")),
                "false" => {}
                _ => return Err(usage(format!("{path}:{}: `{key}` takes true or false", i + 1))),
            }
        } else {
            extra.push(format!("--{key}"));
            extra.push(value.to_string());
        }
    }
    args.extend(extra);
    Ok(args)
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    split_lines(&bytes)
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.with_context(|| format!("{}:{}: invalid UTF-8", path.display(), i + 1)))
        .collect()
}

fn encode_corpus(vocab: &Vocabulary, corpus: &[Vec<String>]) -> Vec<Vec<TokenId>> {
    corpus.iter().map(|s| vocab.encode(s)).collect()
}

fn csv_path(output: &Path) -> PathBuf {
    let mut p = output.as_os_str().to_owned();
    p.push(".csv");
    PathBuf::from(p)
}

fn report_training(report: &TrainReport, output: &Path) -> anyhow::Result<()> {
    report.write_csv(&csv_path(output))?;
    eprintln!(
        "stopped after {} updates ({:?}); best validation cost {:.6} at update {}",
        report.final_update, report.stopping_reason, report.best_val_cost, report.best_checkpoint_at
    );
    Ok(())
}

fn progress(r: &seqforge::optim::EvalRecord) {
    eprintln!("updates={} train={:.6} val={:.6}", r.updates, r.train_cost, r.val_cost);
}

fn vocab_build(a: &VocabBuildArgs) -> anyhow::Result<()> {
    let (corpus, _) = read_corpus(&a.input, None)?;
    let vocab = Vocabulary::build(corpus.iter().flatten().map(String::as_str), a.max_size, a.min_count);
    vocab.save(&a.output)?;
    println!("{}", vocab.len());
    Ok(())
}

fn lm_train(a: &LmTrainArgs) -> anyhow::Result<()> {
    let needs_val = !matches!((a.kind, a.smoothing), (LmKind::Ngram, SmoothingArg::Kn));
    if needs_val && a.val.is_none() {
        return Err(usage("--val is required for this kind of model"));
    }
    let (train, stats) = read_corpus(&a.train, Some(DEFAULT_MAX_LEN))?;
    if train.is_empty() {
        bail!("{}: no usable sentences", a.train.display());
    }
    eprintln!(
        "{}: kept {} of {} lines ({} empty, {} too long, {} invalid UTF-8)",
        a.train.display(),
        stats.kept,
        stats.lines,
        stats.empty,
        stats.too_long,
        stats.invalid_encoding
    );
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::build(train.iter().flatten().map(String::as_str), a.max_size, a.min_count),
    };
    let train = encode_corpus(&vocab, &train);
    let val = match &a.val {
        Some(p) => {
            let (v, _) = read_corpus(p, Some(DEFAULT_MAX_LEN))?;
            if v.is_empty() {
                bail!("{}: no usable sentences", p.display());
            }
            encode_corpus(&vocab, &v)
        }
        None => Vec::new(),
    };
    let cfg = a.optim.config();
    match a.kind {
        LmKind::Ngram => {
            let counts = NgramCounts::count(&train, a.order, vocab.len())?;
            let model = match a.smoothing {
                SmoothingArg::Kn => NgramModel::new(counts, Smoothing::ModifiedKn)?,
                SmoothingArg::Interpolated => NgramModel::fit_interpolated(counts, &val, a.base_alpha)?,
            };
            model.write_arpa(&vocab, &a.output)?;
            let mut csv = String::from("order,contexts\n");
            for k in 1..=a.order {
                csv.push_str(&format!("{k},{}\n", model.counts().contexts_of_order(k).len()));
            }
            std::fs::write(csv_path(&a.output), csv)?;
        }
        LmKind::Nlm => {
            let mut m = Nlm::new(
                NlmConfig {
                    vocab_size: vocab.len(),
                    order: a.order,
                    emb_dim: a.emb,
                    hidden_dim: a.hidden,
                },
                a.optim.seed,
            )?;
            let report = train_with(&mut m, &ngram_examples(&train, a.order), &ngram_examples(&val, a.order), &cfg, progress)?;
            SavedModel::Nlm(m, vocab).save(&a.output)?;
            report_training(&report, &a.output)?;
        }
        LmKind::Cbow => {
            let mut m = Cbow::new(
                CbowConfig {
                    vocab_size: vocab.len(),
                    window: a.window,
                    emb_dim: a.emb,
                },
                a.optim.seed,
            )?;
            let report = train_with(&mut m, &cbow_examples(&train, a.window), &cbow_examples(&val, a.window), &cfg, progress)?;
            SavedModel::Cbow(m, vocab).save(&a.output)?;
            report_training(&report, &a.output)?;
        }
        LmKind::Rnnlm => {
            let mut m = RnnLm::new(
                RnnLmConfig {
                    vocab_size: vocab.len(),
                    cell: a.cell.into(),
                    emb_dim: a.emb,
                    hidden_dim: a.hidden,
                },
                a.optim.seed,
            )?;
            let report = train_with(&mut m, &train, &val, &cfg, progress)?;
            SavedModel::RnnLm(m, vocab).save(&a.output)?;
            report_training(&report, &a.output)?;
        }
    }
    Ok(())
}

#[allow(clippy::large_enum_variant)]
enum LoadedLm {
    Arpa(ArpaModel),
    Saved(SavedModel),
}

impl LoadedLm {
    fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        if bytes.starts_with(seqforge::checkpoint::MAGIC) {
            Ok(LoadedLm::Saved(SavedModel::load(path)?))
        } else {
            Ok(LoadedLm::Arpa(ArpaModel::load(path)?))
        }
    }

    fn vocab(&self) -> anyhow::Result<&Vocabulary> {
        match self {
            LoadedLm::Arpa(m) => Ok(m.vocab()),
            LoadedLm::Saved(SavedModel::Nlm(_, v) | SavedModel::Cbow(_, v) | SavedModel::RnnLm(_, v)) => Ok(v),
            LoadedLm::Saved(SavedModel::Nmt { .. }) => Err(usage("lm eval needs a language model, not a translation model")),
        }
    }
}

fn lm_eval(a: &LmEvalArgs) -> anyhow::Result<()> {
    let model = a.model.as_deref().map(LoadedLm::load).transpose()?;
    let expected = a.vocab.as_deref().map(Vocabulary::load).transpose()?;
    let vocab = match (&model, &expected) {
        (Some(m), Some(v)) => {
            if m.vocab()?.tokens() != v.tokens() {
                bail!("vocabulary mismatch: the model and {} differ", a.vocab.as_ref().unwrap().display());
            }
            v
        }
        (Some(m), None) => m.vocab()?,
        (None, Some(v)) => v,
        (None, None) => return Err(usage("lm eval needs --model, or --uniform with --vocab")),
    };
    if model.is_none() && !a.uniform {
        return Err(usage("--model is required unless --uniform is given"));
    }
    let (test, _) = read_corpus(&a.test, None)?;
    let test = encode_corpus(vocab, &test);
    if a.uniform {
        let p = perplexity(&UniformScorer { vocab_size: vocab.len() }, &test)?;
        println!("PPL={:.6} tokens={}", p.value, p.tokens);
        return Ok(());
    }
    let scorer: &dyn SentenceScorer = match model.as_ref().expect("checked above") {
        LoadedLm::Arpa(m) => m,
        LoadedLm::Saved(SavedModel::Nlm(m, _)) => m,
        LoadedLm::Saved(SavedModel::RnnLm(m, _)) => m,
        LoadedLm::Saved(SavedModel::Cbow(m, _)) => {
            let (ppl, tokens) = m.pseudo_perplexity(&test)?;
            println!("PSEUDO_PPL={ppl:.6} tokens={tokens}");
            return Ok(());
        }
        LoadedLm::Saved(SavedModel::Nmt { .. }) => unreachable!("rejected by vocab()"),
    };
    let p = perplexity(scorer, &test)?;
    println!("PPL={:.6} tokens={}", p.value, p.tokens);
    Ok(())
}

fn nmt_train(a: &NmtTrainArgs) -> anyhow::Result<()> {
    let (train, stats) = read_parallel(&a.src, &a.tgt, Some(a.max_len))?;
    if train.is_empty() {
        bail!("no usable training pairs");
    }
    eprintln!("kept {} of {} training pairs", stats.kept, stats.lines);
    let (val, _) = read_parallel(&a.val_src, &a.val_tgt, Some(a.max_len))?;
    if val.is_empty() {
        bail!("no usable validation pairs");
    }
    let src_vocab = Vocabulary::build(train.iter().flat_map(|p| &p.0).map(String::as_str), a.src_max_size, 1);
    let tgt_vocab = Vocabulary::build(train.iter().flat_map(|p| &p.1).map(String::as_str), a.tgt_max_size, 1);
    let encode = |pairs: &[(Vec<String>, Vec<String>)]| -> Vec<EncodedPair> {
        pairs
            .iter()
            .map(|(s, t)| EncodedPair::encode(&src_vocab, &tgt_vocab, s, t))
            .collect()
    };
    let (train, val) = (encode(&train), encode(&val));
    let mut model = NmtModel::new(
        NmtConfig {
            src_vocab_size: src_vocab.len(),
            tgt_vocab_size: tgt_vocab.len(),
            arch: match a.arch {
                ArchArg::Simple => Arch::Simple,
                ArchArg::Attention => Arch::Attention,
            },
            cell: a.cell.into(),
            dim: a.dim,
            emb_dim: a.emb,
            att_dim: a.att_dim,
        },
        a.optim.seed,
    )?;
    let report = train_with(&mut model, &train, &val, &a.optim.config(), progress)?;
    SavedModel::Nmt {
        model,
        src_vocab,
        tgt_vocab,
    }
    .save(&a.output)?;
    report_training(&report, &a.output)
}

fn load_nmt(path: &Path) -> anyhow::Result<(NmtModel, Vocabulary, Vocabulary)> {
    match SavedModel::load(path)? {
        SavedModel::Nmt {
            model,
            src_vocab,
            tgt_vocab,
        } => Ok((model, src_vocab, tgt_vocab)),
        _ => Err(usage(format!("{} is not a translation model", path.display()))),
    }
}

fn translate(a: &TranslateArgs) -> anyhow::Result<()> {
    let (model, src_vocab, tgt_vocab) = load_nmt(&a.model)?;
    let lines = read_lines(&a.input)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, line) in lines.iter().enumerate() {
        let source = src_vocab.encode(&tokenize(line));
        if source.is_empty() {
            writeln!(out)?;
            continue;
        }
        let max_len = a.max_len.map_or_else(|| default_max_len(source.len()), |m| m as usize);
        let provider = model.provider(&source)?;
        let decoded = if a.sample {
            sample_translation(&provider, a.seed.wrapping_add(i as u64), max_len)?
        } else if a.beam == 1 {
            greedy_decode(&provider, max_len)?
        } else {
            beam_decode(&provider, a.beam as usize, max_len)?
        };
        writeln!(out, "{}", tgt_vocab.decode_line(&decoded.tokens)?)?;
    }
    Ok(())
}

fn bleu(a: &BleuArgs) -> anyhow::Result<()> {
    let cands = read_lines(&a.candidates)?;
    let refs = read_lines(&a.references)?;
    let tok = |lines: &[String]| -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| tokenize(l).into_iter().map(str::to_string).collect())
            .collect()
    };
    let stats = bleu_with_reference_length(&tok(&cands), &tok(&refs), a.ref_len)?;
    println!("{}", stats.report_line());
    if let Some(n) = stats.zero_order {
        eprintln!("no matching {n}-grams; BLEU is 0");
    }
    Ok(())
}

fn align(a: &AlignArgs) -> anyhow::Result<()> {
    let (model, src_vocab, tgt_vocab) = load_nmt(&a.model)?;
    let (pairs, stats) = read_parallel(&a.src, &a.tgt, None)?;
    let mut out = String::new();
    for (s, t) in &pairs {
        let pair = EncodedPair::encode(&src_vocab, &tgt_vocab, s, t);
        let m = model.alignment_matrix(&pair)?;
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&alignment_tsv(s, t, &m)?);
    }
    std::fs::write(&a.output, out).with_context(|| format!("writing {}", a.output.display()))?;
    if stats.kept < stats.lines {
        eprintln!("skipped {} of {} pairs", stats.lines - stats.kept, stats.lines);
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Vocab(VocabCommand::Build(a)) => vocab_build(&a),
        Command::Lm(LmCommand::Train(a)) => lm_train(&a),
        Command::Lm(LmCommand::Eval(a)) => lm_eval(&a),
        Command::Nmt(NmtCommand::Train(a)) => nmt_train(&a),
        Command::Translate(a) => translate(&a),
        Command::Bleu(a) => bleu(&a),
        Command::Align(a) => align(&a),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some()
        || matches!(e.downcast_ref::<seqforge::Error>(), Some(seqforge::Error::LineCountMismatch { .. }))
    {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let args = match merge_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
