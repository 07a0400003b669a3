//! Command-line front end. Progress goes to stderr; machine-readable output
//! goes to stdout or files.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::config::{self, apply_family, arch_from_entries, read_key_values, train_config_from_entries};
use crate::decoder::batch_decode;
use crate::error::{Error, Result};
use crate::pipeline::{build_report, run_curriculum, select_by_certainty, Curriculum, Registry};
use crate::rng::derive_seed;
use crate::synthcorpus::{build_family, generate_dataset, reference_manifest, ErrorRates, FamilyConfig, Manifest};
use crate::tokenizer::{pool_transcripts, train_bpe, Vocab};
use crate::trainer::{evaluate, train};
use crate::transducer::{init_model, read_checkpoint, warm_start, write_checkpoint, WarmStartMode};

pub const SEED_ENV: &str = "IPLFORGE_SEED";

#[derive(Debug, Parser)]
#[command(name = "iplforge", version, about = "Transducer training with iterative pseudo-labeling")]
struct Cli {
    /// Random seed; falls back to $IPLFORGE_SEED, then to the command's default.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a family config.
    GenData(GenData),
    /// Train a BPE vocabulary on manifest transcripts.
    TrainTokenizer(TrainTokenizer),
    /// Train a Transducer model.
    Train(Train),
    /// Pseudo-label a manifest with a trained model.
    Decode(Decode),
    /// Keep the most certain fraction of a pseudo-labeled manifest.
    Select(Select),
    /// Print the corpus WER of a model on a manifest.
    Evaluate(Evaluate),
    /// Run every stage of a curriculum file.
    RunCurriculum(RunCurriculum),
    /// Evaluate every registered stage and print a WERR report.
    Report(Report),
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainTokenizer {
    #[arg(long, num_args = 1.., required = true)]
    manifests: Vec<PathBuf>,
    #[arg(long)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Train {
    #[arg(long)]
    arch: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    cfg: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    warm_start: Option<PathBuf>,
    /// `full` or `encoder_only`; derived from the vocabulary size if omitted.
    #[arg(long, requires = "warm_start")]
    mode: Option<WarmStartMode>,
}

#[derive(Debug, Args)]
struct Decode {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    stage_ref: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Select {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Evaluate {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Debug, Args)]
struct RunCurriculum {
    #[arg(long)]
    file: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Report {
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    reference_wer: f64,
}

/// Flag value, then the environment, then `fallback`.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> std::result::Result<u64, String> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| format!("{SEED_ENV} is not an integer: `{v}`")),
        Err(_) => Ok(fallback),
    }
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::Level::Info
    }

    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            eprintln!("{}", record.args());
        }
    }

    fn flush(&self) {}
}

fn init_logging() {
    if log::set_logger(&StderrLogger).is_ok() {
        log::set_max_level(log::LevelFilter::Info);
    }
}

fn usage_error(message: &str) -> i32 {
    eprintln!("error: {message}; usage: iplforge [--seed N] [--threads N] <subcommand> [flags] (see --help)");
    1
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code: 0 success, 1 usage error, 2 runtime error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return usage_error(first.trim_start_matches("error: "));
        }
    };
    init_logging();
    if let Some(n) = cli.threads {
        if n == 0 {
            return usage_error("--threads must be positive");
        }
        // Fails only if a pool already exists, e.g. on a second call in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let fallback = match &cli.command {
        Command::RunCurriculum(c) => match Curriculum::read(&c.file) {
            Ok(cur) => cur.seed,
            Err(e) => {
                eprintln!("error: {e}");
                return 2;
            }
        },
        Command::Train(t) => match read_key_values(&t.cfg).and_then(|e| train_config_from_entries(&e)) {
            Ok(cfg) => cfg.seed,
            Err(e) => {
                eprintln!("error: {e}");
                return 2;
            }
        },
        _ => 0,
    };
    let seed = match resolve_seed(cli.seed, fallback) {
        Ok(s) => s,
        Err(m) => return usage_error(&m),
    };
    eprintln!("seed {seed}");
    match run(cli.command, seed) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(command: Command, seed: u64) -> Result<()> {
    match command {
        Command::GenData(c) => gen_data(&c, seed),
        Command::TrainTokenizer(c) => {
            let manifests = c.manifests.iter().map(|p| Manifest::read(p)).collect::<Result<Vec<_>>>()?;
            let vocab = train_bpe(&pool_transcripts(&manifests), c.size)?;
            ensure_parent(&c.out)?;
            vocab.write(&c.out)?;
            log::info!("{} tokens, {} merges", vocab.size(), vocab.merges().len());
            Ok(())
        }
        Command::Train(c) => train_command(&c, seed),
        Command::Decode(c) => {
            let model = read_checkpoint(&c.ckpt)?;
            let vocab = Vocab::read(&c.vocab)?;
            let decoded = batch_decode(&model, &Manifest::read(&c.manifest)?, &vocab, &c.stage_ref)?;
            decoded.write(&c.out)
        }
        Command::Select(c) => select_by_certainty(&Manifest::read(&c.manifest)?, c.fraction)?.write(&c.out),
        Command::Evaluate(c) => {
            let model = read_checkpoint(&c.ckpt)?;
            let wer = evaluate(&model, &Manifest::read(&c.manifest)?, &Vocab::read(&c.vocab)?)?;
            stdout(&format!("wer {wer:.6}\n"))
        }
        Command::RunCurriculum(c) => {
            let mut cur = Curriculum::read(&c.file)?;
            cur.seed = seed;
            let outcome = run_curriculum(&cur, &c.out)?;
            stdout(&outcome.report.to_tsv())
        }
        Command::Report(c) => {
            let registry = Registry::open(&c.registry)?;
            let report = build_report(&registry, &Manifest::read(&c.test)?, c.reference_wer)?;
            stdout(&report.to_tsv())
        }
    }
}

fn stdout(text: &str) -> Result<()> {
    std::io::stdout()
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

/// Dataset config: family keys, `count.<LANG> = n`, optional `split` (id
/// prefix, default `train`) and `reference_errors = sub,del,ins`.
struct GenDataConfig {
    family: FamilyConfig,
    counts: BTreeMap<String, usize>,
    split: String,
    reference: Option<ErrorRates>,
}

fn gen_data_config(path: &Path) -> Result<GenDataConfig> {
    let mut cfg = GenDataConfig {
        family: FamilyConfig::default(),
        counts: BTreeMap::new(),
        split: "train".into(),
        reference: None,
    };
    for e in read_key_values(path)? {
        if let Some(lang) = e.key.strip_prefix("count.") {
            cfg.counts.insert(lang.to_string(), e.parse()?);
        } else if e.key == "split" {
            cfg.split = e.value.clone();
        } else if e.key == "reference_errors" {
            cfg.reference = Some(config::parse_rates(&e)?);
        } else if !apply_family(&mut cfg.family, &e)? {
            return Err(e.unknown());
        }
    }
    Ok(cfg)
}

fn gen_data(c: &GenData, seed: u64) -> Result<()> {
    let cfg = gen_data_config(&c.config)?;
    let spec = build_family(&cfg.family, derive_seed(seed, "family", 0))?;
    for lang in cfg.counts.keys() {
        spec.language(lang)?;
    }
    let manifest = generate_dataset(&spec, &cfg.counts, derive_seed(seed, &cfg.split, 0), &cfg.split, &c.out.join("feats"))?;
    manifest.write(&c.out.join("manifest.tsv"))?;
    if let Some(rates) = cfg.reference {
        reference_manifest(&spec, &manifest, rates, derive_seed(seed, "reference", 0))?
            .write(&c.out.join("reference.tsv"))?;
    }
    log::info!("wrote {} utterances to {}", manifest.len(), c.out.display());
    Ok(())
}

fn train_command(c: &Train, seed: u64) -> Result<()> {
    let vocab = Vocab::read(&c.vocab)?;
    let arch = arch_from_entries(&read_key_values(&c.arch)?, vocab.label_count())?;
    let mut cfg = train_config_from_entries(&read_key_values(&c.cfg)?)?;
    cfg.seed = seed;
    let initial = match &c.warm_start {
        None => init_model(arch, derive_seed(seed, "init", 0))?,
        Some(path) => {
            let prior = read_checkpoint(path)?;
            let mode = c.mode.unwrap_or(if prior.arch().vocab_size == vocab.label_count() {
                WarmStartMode::Full
            } else {
                WarmStartMode::EncoderOnly
            });
            log::info!("warm start from {} ({mode})", path.display());
            warm_start(&prior, vocab.label_count(), mode, derive_seed(seed, "init", 0))?
        }
    };
    let (model, report) = train(
        &initial,
        &Manifest::read(&c.train)?,
        &Manifest::read(&c.dev)?,
        &vocab,
        &cfg,
        &c.out.join("ckpt"),
    )?;
    write_checkpoint(&model, &c.out.join("best.ckpt"))?;
    report.write(&c.out.join("report.tsv"))?;
    stdout(&format!("best_step {}\tdev_wer {:.6}\n", report.best_step, report.best_dev_wer))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}
