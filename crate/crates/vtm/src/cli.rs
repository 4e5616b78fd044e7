//! Command-line entry point: data preparation, toy-corpus generation,
//! training, generation, evaluation and temperature sweeps.
//!
//! Conventions: human logs go to standard error; machine-readable outputs go
//! to files (or standard output when no `--out` is given). Every command is
//! deterministic under a fixed `--seed`, so identical invocations produce
//! byte-identical output files. Exit codes: 0 success, 2 usage or input
//! errors, 3 training divergence.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_vocab, encode_paired, encode_raw, generate_toy_corpus, parse_table, serialize_table,
    tokenize, Table, TemplateOverlap, ToyExample, ToyOptions,
};
use crate::metrics::{
    bleu4, group_by_table, rouge_l_f, self_bleu, tradeoff_sweep, EvalInstance, EvalReport,
    SWEEP_TAUS,
};
use crate::rng::derive_seed;
use crate::sampling::{generate, DecodeSpec, Strategy};
use crate::trainer::{fit, Checkpoint, Dataset, TrainConfig, TrainLogs, TrainMode, TrainerError};

#[derive(Parser)]
#[command(
    name = "vtm",
    version,
    about = "Table-to-text generation with template and content latent variables"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize and delexicalize a corpus, writing processed files and the vocabulary.
    Prepare(PrepareArgs),
    /// Generate the synthetic slot-filling corpus with a known template oracle.
    MakeToy(MakeToyArgs),
    /// Train a model and write the best checkpoint plus training logs.
    Train(TrainArgs),
    /// Generate sentences for tables with a trained checkpoint.
    Generate(GenerateArgs),
    /// Score generations against a test set (BLEU-4, self-BLEU, ROUGE-L).
    Evaluate(EvaluateArgs),
    /// Quality-diversity sweep over sampling temperatures.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Paired corpus: one JSON object {"table": ..., "sentence": ...} per line.
    #[arg(long)]
    paired: PathBuf,
    /// Raw corpus: one sentence per line.
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    min_count: usize,
    /// Output directory (defaults to $VTM_DATA_DIR or ./data).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RawTemplates {
    Shared,
    Disjoint,
}

#[derive(Args)]
struct MakeToyArgs {
    #[arg(long, default_value_t = 1000)]
    paired: usize,
    #[arg(long, default_value_t = 10000)]
    raw: usize,
    #[arg(long, default_value_t = 8)]
    templates: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Whether raw sentences reuse the paired template pool or a disjoint half.
    #[arg(long, value_enum, default_value_t = RawTemplates::Shared)]
    raw_templates: RawTemplates,
    /// Fraction of the paired/raw sets reserved for validation.
    #[arg(long, default_value_t = 0.1)]
    valid_fraction: f64,
    /// Output directory (defaults to $VTM_DATA_DIR or ./data).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file; command-line flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    paired_train: Option<PathBuf>,
    #[arg(long)]
    paired_valid: Option<PathBuf>,
    #[arg(long)]
    raw_train: Option<PathBuf>,
    #[arg(long)]
    raw_valid: Option<PathBuf>,
    /// Output directory for checkpoint and logs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Greedy,
    Temperature,
    Beam,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One serialized table: tab-separated field_pos:value entries.
    #[arg(long)]
    table: Option<String>,
    /// JSONL file whose rows carry a "table" field (e.g. a test set).
    #[arg(long)]
    tables: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, value_enum, default_value_t = StrategyArg::Greedy)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 60)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Paired test file; rows sharing a table become one multi-reference group.
    #[arg(long)]
    test: PathBuf,
    /// Score an existing generations JSONL instead of decoding fresh ones.
    #[arg(long)]
    generations: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Comma-separated temperatures.
    #[arg(long)]
    taus: Option<String>,
    #[arg(long, default_value_t = 5)]
    n_per_table: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the CLI on the given arguments and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err
                .downcast_ref::<TrainerError>()
                .is_some_and(|e| matches!(e, TrainerError::Diverged(_)))
            {
                3
            } else {
                2
            }
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(args) => prepare(args),
        Command::MakeToy(args) => make_toy(args),
        Command::Train(args) => train(args),
        Command::Generate(args) => run_generate(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Sweep(args) => sweep(args),
    }
}

fn default_data_dir() -> PathBuf {
    std::env::var_os("VTM_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Serialize, Deserialize)]
struct PairedLine {
    table: String,
    sentence: String,
}

#[derive(Serialize, Deserialize)]
struct GenerationLine {
    table: String,
    outputs: Vec<String>,
    strategy: String,
    seed: u64,
}

/// Reads a paired JSONL file into (table, tokenized sentence) rows.
fn read_paired_file(path: &Path) -> Result<Vec<(Table, Vec<String>)>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read paired file {}", path.display()))?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: PairedLine = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: malformed JSON", path.display(), no + 1))?;
        let table = parse_table(&row.table)
            .with_context(|| format!("{}:{}: bad table", path.display(), no + 1))?;
        out.push((table, tokenize(&row.sentence)));
    }
    if out.is_empty() {
        bail!("{} holds no examples", path.display());
    }
    Ok(out)
}

fn read_raw_file(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read raw file {}", path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(tokenize)
        .collect())
}

/// Builds the training dataset from the config's file paths: vocabulary from
/// the training splits only, then encoding and delexicalization.
fn load_dataset(config: &TrainConfig) -> Result<Dataset> {
    let paired_train_path = config
        .paired_train
        .as_ref()
        .ok_or_else(|| anyhow!("config is missing paired_train"))?;
    let paired_valid_path = config
        .paired_valid
        .as_ref()
        .ok_or_else(|| anyhow!("config is missing paired_valid"))?;
    let paired_train = read_paired_file(paired_train_path)?;
    let paired_valid = read_paired_file(paired_valid_path)?;
    let raw_train = match &config.raw_train {
        Some(p) => read_raw_file(p)?,
        None => Vec::new(),
    };
    let raw_valid = match &config.raw_valid {
        Some(p) => read_raw_file(p)?,
        None => Vec::new(),
    };

    let mut sentences: Vec<Vec<String>> =
        paired_train.iter().map(|(_, s)| s.clone()).collect();
    sentences.extend(raw_train.iter().cloned());
    let tables: Vec<Table> = paired_train.iter().map(|(t, _)| t.clone()).collect();
    let vocab = build_vocab(&sentences, &tables, config.min_count)?;

    Ok(Dataset {
        paired_train: paired_train
            .into_iter()
            .map(|(t, s)| encode_paired(t, &s, &vocab))
            .collect(),
        paired_valid: paired_valid
            .into_iter()
            .map(|(t, s)| encode_paired(t, &s, &vocab))
            .collect(),
        raw_train: raw_train.iter().map(|s| encode_raw(s, &vocab)).collect(),
        raw_valid: raw_valid.iter().map(|s| encode_raw(s, &vocab)).collect(),
        vocab,
    })
}

fn prepare(args: PrepareArgs) -> Result<()> {
    let out = args.out.unwrap_or_else(default_data_dir);
    fs::create_dir_all(&out)?;
    let paired = read_paired_file(&args.paired)?;
    let raw = match &args.raw {
        Some(p) => read_raw_file(p)?,
        None => Vec::new(),
    };

    let mut sentences: Vec<Vec<String>> = paired.iter().map(|(_, s)| s.clone()).collect();
    sentences.extend(raw.iter().cloned());
    let tables: Vec<Table> = paired.iter().map(|(t, _)| t.clone()).collect();
    let vocab = build_vocab(&sentences, &tables, args.min_count)?;
    fs::write(out.join("vocab.json"), serde_json::to_string_pretty(&vocab)?)?;

    let mut w = fs::File::create(out.join("paired.tok.jsonl"))?;
    for (table, tokens) in &paired {
        let (template, _) = crate::corpus::delexicalize(table, tokens);
        let row = serde_json::json!({
            "table": serialize_table(table),
            "sentence": tokens.join(" "),
            "template": template.join(" "),
        });
        writeln!(w, "{row}")?;
    }
    if !raw.is_empty() {
        let mut w = fs::File::create(out.join("raw.tok.txt"))?;
        for tokens in &raw {
            writeln!(w, "{}", tokens.join(" "))?;
        }
    }
    eprintln!(
        "prepared {} paired and {} raw examples; vocabulary of {} words -> {}",
        paired.len(),
        raw.len(),
        vocab.word_count(),
        out.display()
    );
    Ok(())
}

fn write_paired_jsonl(path: &Path, examples: &[&ToyExample]) -> Result<()> {
    let mut w = fs::File::create(path)?;
    for ex in examples {
        let table = ex.table.as_ref().expect("paired toy example has a table");
        let row = PairedLine {
            table: serialize_table(table),
            sentence: ex.sentence.join(" "),
        };
        writeln!(w, "{}", serde_json::to_string(&row)?)?;
    }
    Ok(())
}

fn write_raw_txt(path: &Path, examples: &[&ToyExample]) -> Result<()> {
    let mut w = fs::File::create(path)?;
    for ex in examples {
        writeln!(w, "{}", ex.sentence.join(" "))?;
    }
    Ok(())
}

fn write_template_sidecar(path: &Path, examples: &[&ToyExample]) -> Result<()> {
    let mut w = fs::File::create(path)?;
    for ex in examples {
        writeln!(w, "{}", ex.template_id)?;
    }
    Ok(())
}

/// Toy-sized training configuration written next to the generated corpus.
fn toy_config(out: &Path, seed: u64) -> TrainConfig {
    TrainConfig {
        mode: TrainMode::Vtm,
        seed,
        embed_dim: 48,
        hidden_dim: 64,
        table_dim: 64,
        d_z: 12,
        d_c: 32,
        lambda_mi: 1.0,
        lambda_pt: 1.0,
        lambda_pc: 1.0,
        learning_rate: 0.001,
        batch_size_paired: 32,
        batch_size_raw: 32,
        max_epochs: 40,
        patience: 8,
        min_count: 2,
        paired_train: Some(out.join("paired_train.jsonl")),
        paired_valid: Some(out.join("paired_valid.jsonl")),
        raw_train: Some(out.join("raw_train.txt")),
        raw_valid: Some(out.join("raw_valid.txt")),
        test: Some(out.join("test.jsonl")),
        out_dir: Some(out.join("run")),
        ..TrainConfig::default()
    }
}

fn make_toy(args: MakeToyArgs) -> Result<()> {
    let out = args.out.unwrap_or_else(default_data_dir);
    fs::create_dir_all(&out)?;
    let corpus = generate_toy_corpus(&ToyOptions {
        n_paired: args.paired,
        n_raw: args.raw,
        n_templates: args.templates,
        seed: args.seed,
        raw_templates: match args.raw_templates {
            RawTemplates::Shared => TemplateOverlap::Shared,
            RawTemplates::Disjoint => TemplateOverlap::Disjoint,
        },
    })?;

    if !(0.0..1.0).contains(&args.valid_fraction) {
        bail!("valid_fraction must be in [0, 1)");
    }
    let n_valid = ((args.paired as f64 * args.valid_fraction) as usize).max(1);
    let split = corpus.paired.len().saturating_sub(n_valid);
    let (train, valid) = corpus.paired.split_at(split);
    let train: Vec<&ToyExample> = train.iter().collect();
    let valid: Vec<&ToyExample> = valid.iter().collect();
    write_paired_jsonl(&out.join("paired_train.jsonl"), &train)?;
    write_template_sidecar(&out.join("paired_train.templates.txt"), &train)?;
    write_paired_jsonl(&out.join("paired_valid.jsonl"), &valid)?;
    write_template_sidecar(&out.join("paired_valid.templates.txt"), &valid)?;

    let n_raw_valid = ((args.raw as f64 * args.valid_fraction) as usize).max(1);
    let raw_split = corpus.raw.len().saturating_sub(n_raw_valid);
    let (raw_train, raw_valid) = corpus.raw.split_at(raw_split);
    let raw_train: Vec<&ToyExample> = raw_train.iter().collect();
    let raw_valid: Vec<&ToyExample> = raw_valid.iter().collect();
    write_raw_txt(&out.join("raw_train.txt"), &raw_train)?;
    write_template_sidecar(&out.join("raw_train.templates.txt"), &raw_train)?;
    write_raw_txt(&out.join("raw_valid.txt"), &raw_valid)?;
    write_template_sidecar(&out.join("raw_valid.templates.txt"), &raw_valid)?;

    let held: Vec<&ToyExample> = corpus.held_out.iter().collect();
    write_paired_jsonl(&out.join("test.jsonl"), &held)?;
    write_template_sidecar(&out.join("test.templates.txt"), &held)?;

    let config = toy_config(&out, args.seed);
    fs::write(out.join("toy.toml"), toml::to_string_pretty(&config)?)?;

    eprintln!(
        "toy corpus: {} paired train, {} paired valid, {} raw train, {} raw valid, {} test rows -> {}",
        train.len(),
        valid.len(),
        raw_train.len(),
        raw_valid.len(),
        held.len(),
        out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.max_epochs {
        config.max_epochs = epochs;
    }
    if let Some(lr) = args.learning_rate {
        config.learning_rate = lr;
    }
    if let Some(p) = args.patience {
        config.patience = p;
    }
    for (slot, value) in [
        (&mut config.paired_train, &args.paired_train),
        (&mut config.paired_valid, &args.paired_valid),
        (&mut config.raw_train, &args.raw_train),
        (&mut config.raw_valid, &args.raw_valid),
    ] {
        if let Some(v) = value {
            *slot = Some(v.clone());
        }
    }
    if let Some(out) = &args.out {
        config.out_dir = Some(out.clone());
    }
    config.validate()?;
    let out_dir = config
        .out_dir
        .clone()
        .unwrap_or_else(|| default_data_dir().join("run"));

    let dataset = load_dataset(&config)?;
    eprintln!(
        "training mode={} on {} paired / {} raw examples (vocab {})",
        config.mode.name(),
        dataset.paired_train.len(),
        dataset.raw_train.len(),
        dataset.vocab.word_count()
    );
    let mut logs = TrainLogs::in_dir(&out_dir)?;
    let report = fit(&dataset, &config, &mut logs)?;
    let ckpt_path = out_dir.join("checkpoint.vtm");
    report.checkpoint.save(&ckpt_path)?;
    eprintln!(
        "best epoch {} (validation {:.4}); checkpoint -> {}",
        report.checkpoint.best_epoch,
        report.checkpoint.best_val,
        ckpt_path.display()
    );
    Ok(())
}

fn strategy_from(args_strategy: StrategyArg, tau: f64, n: usize) -> Strategy {
    match args_strategy {
        StrategyArg::Greedy => Strategy::Greedy,
        StrategyArg::Temperature => Strategy::Temperature(tau),
        StrategyArg::Beam => Strategy::Beam(n),
    }
}

fn strategy_label(s: Strategy) -> String {
    match s {
        Strategy::Greedy => "greedy".into(),
        Strategy::Temperature(t) => format!("temperature:{t}"),
        Strategy::Beam(_) => "beam".into(),
    }
}

/// Writes `content` to `--out` or standard output.
fn emit(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            fs::write(path, content)?;
        }
        None => print!("{content}"),
    }
    Ok(())
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let tables: Vec<Table> = match (&args.table, &args.tables) {
        (Some(line), None) => vec![parse_table(line)?],
        (None, Some(path)) => read_paired_file(path)?
            .into_iter()
            .map(|(t, _)| t)
            .collect(),
        _ => bail!("provide exactly one of --table or --tables"),
    };
    let strategy = strategy_from(args.strategy, args.tau, args.n);
    let mut body = String::new();
    for (idx, table) in tables.iter().enumerate() {
        let spec = DecodeSpec {
            strategy,
            max_len: args.max_len,
            n: args.n,
            seed: derive_seed(args.seed, &format!("table-{idx}")),
        };
        let outputs = generate(table, args.n, &spec, &ckpt)?;
        let row = GenerationLine {
            table: serialize_table(table),
            outputs,
            strategy: strategy_label(strategy),
            seed: args.seed,
        };
        body.push_str(&serde_json::to_string(&row)?);
        body.push('\n');
    }
    emit(&args.out, &body)?;
    eprintln!("generated {} outputs for {} tables", args.n, tables.len());
    Ok(())
}

fn load_instances(test: &Path) -> Result<Vec<EvalInstance>> {
    let pairs = read_paired_file(test)?;
    Ok(group_by_table(&pairs))
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let instances = load_instances(&args.test)?;
    let report = match &args.generations {
        None => crate::metrics::evaluate_generation(
            &ckpt,
            &instances,
            Strategy::Greedy,
            args.n,
            args.seed,
        )?,
        Some(path) => score_generation_file(path, &instances)?,
    };
    let content = format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row());
    emit(&args.out, &content)?;
    eprintln!(
        "bleu4 {:.2}, self-bleu {}, rouge-l {:.2} over {} tables",
        report.bleu4,
        report
            .self_bleu
            .map_or("na".into(), |s| format!("{s:.2}")),
        report.rouge_l,
        report.n_tables
    );
    Ok(())
}

/// Scores a generations JSONL against reference groups keyed by table.
fn score_generation_file(path: &Path, instances: &[EvalInstance]) -> Result<EvalReport> {
    let by_table: std::collections::HashMap<String, &EvalInstance> = instances
        .iter()
        .map(|inst| (serialize_table(&inst.table), inst))
        .collect();
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read generations {}", path.display()))?;
    let mut firsts = Vec::new();
    let mut refs = Vec::new();
    let mut self_bleus = Vec::new();
    let mut n_per_table = 0usize;
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: GenerationLine = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: malformed JSON", path.display(), no + 1))?;
        let inst = by_table
            .get(&row.table)
            .ok_or_else(|| anyhow!("{}:{}: table not in the test set", path.display(), no + 1))?;
        let tokenized: Vec<Vec<String>> = row
            .outputs
            .iter()
            .map(|s| s.split_whitespace().map(str::to_string).collect())
            .collect();
        n_per_table = n_per_table.max(tokenized.len());
        if tokenized.len() >= 2 {
            self_bleus.push(self_bleu(&tokenized)?);
        }
        firsts.push(tokenized.into_iter().next().unwrap_or_default());
        refs.push(inst.references.clone());
    }
    if firsts.is_empty() {
        bail!("{} holds no generations", path.display());
    }
    Ok(EvalReport {
        tau: None,
        bleu4: bleu4(&firsts, &refs)?,
        self_bleu: (!self_bleus.is_empty())
            .then(|| self_bleus.iter().sum::<f64>() / self_bleus.len() as f64),
        rouge_l: rouge_l_f(&firsts, &refs)?,
        n_tables: firsts.len(),
        n_per_table,
    })
}

fn sweep(args: SweepArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let instances = load_instances(&args.test)?;
    let taus: Vec<f64> = match &args.taus {
        None => SWEEP_TAUS.to_vec(),
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| anyhow!("bad temperature `{s}`"))
            })
            .collect::<Result<_>>()?,
    };
    let rows = tradeoff_sweep(&ckpt, &instances, &taus, args.n_per_table, args.seed)?;
    let mut content = format!("{}\n", EvalReport::CSV_HEADER);
    for row in &rows {
        content.push_str(&row.csv_row());
        content.push('\n');
    }
    emit(&args.out, &content)?;
    eprintln!("swept {} temperatures over {} tables", taus.len(), instances.len());
    Ok(())
}
