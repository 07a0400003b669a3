//! The multi-stage recipe as data: dataset preparation, a stage registry
//! with warm-start lineage, certainty-based selection, iterative
//! pseudo-labeling, and the WERR report.

mod curriculum;
mod registry;


use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub use curriculum::{Curriculum, DataConfig, DataSource, StageSpec, TokenizerSpec, Weighting};
pub use registry::{Registry, RegistryEntry};

use crate::decoder::batch_decode;
use crate::error::{Error, Result};
use crate::metrics::{corpus_wer, werr};
use crate::rng::derive_seed;
use crate::synthcorpus::{
    build_family, generate_dataset, reference_manifest, subsample, FamilySpec, Manifest, UttRecord,
};
use crate::tokenizer::{pool_transcripts, train_bpe, Vocab};
use crate::trainer::{evaluate, train, TrainConfig, TrainReport};
use crate::transducer::{init_model, warm_start, ArchConfig, Model, WarmStartMode};

/// Naturally weighted composition, per language.
pub const NW_WEIGHTS: [(&str, usize); 5] =
    [("UKR", 12), ("RUS", 501), ("POL", 92), ("CZE", 35), ("SVK", 8)];
/// Balanced composition, per language.
pub const BL_WEIGHTS: [(&str, usize); 5] =
    [("UKR", 25), ("RUS", 16), ("POL", 27), ("CZE", 23), ("SVK", 18)];

fn weight(table: &[(&str, usize)], lang: &str) -> usize {
    table.iter().find(|(l, _)| *l == lang).map_or(0, |(_, w)| *w)
}

/// Everything the stages train and evaluate on.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub spec: FamilySpec,
    /// Ground truth for every training-pool utterance.
    pub pool_truth: Manifest,
    /// Reference transcripts, naturally weighted.
    pub nw: Manifest,
    /// Reference transcripts, balanced.
    pub bl: Manifest,
    pub dev: Manifest,
    pub test: Manifest,
    /// Corpus WER of the reference transcriber on the test set.
    pub reference_wer: f64,
}

impl Datasets {
    pub fn truth(&self, utt_id: &str) -> Option<&UttRecord> {
        self.pool_truth.get(utt_id)
    }

    pub fn composition(&self, weighting: Weighting) -> &Manifest {
        match weighting {
            Weighting::Nw => &self.nw,
            Weighting::Bl => &self.bl,
        }
    }
}

/// Records of the given languages, in manifest order.
pub fn filter_languages(manifest: &Manifest, languages: &[String]) -> Result<Manifest> {
    Manifest::new(
        manifest
            .records()
            .iter()
            .filter(|r| languages.contains(&r.lang))
            .cloned()
            .collect(),
    )
}

/// Generates the family and all datasets under `out_dir/data`:
/// a training pool large enough for both compositions, its reference
/// transcripts, NW/BL subsamples, and truth-labeled dev/test sets of the
/// target language.
pub fn prepare_data(cfg: &DataConfig, seed: u64, out_dir: &Path) -> Result<Datasets> {
    let spec = build_family(&cfg.family, derive_seed(seed, "family", 0))?;
    spec.language(&cfg.target)?;
    let data_dir = out_dir.join("data");
    let mut pool_counts = BTreeMap::new();
    let mut nw_counts = BTreeMap::new();
    let mut bl_counts = BTreeMap::new();
    for l in &spec.languages {
        let nw = weight(&NW_WEIGHTS, &l.lang_id) * cfg.utts_per_khr;
        let bl = weight(&BL_WEIGHTS, &l.lang_id) * cfg.utts_per_khr;
        pool_counts.insert(l.lang_id.clone(), nw.max(bl));
        nw_counts.insert(l.lang_id.clone(), nw);
        bl_counts.insert(l.lang_id.clone(), bl);
    }
    let feats = data_dir.join("feats");
    log::info!("generating training pool");
    let pool_truth = generate_dataset(&spec, &pool_counts, derive_seed(seed, "pool", 0), "train", &feats)?;
    let pool_ref = reference_manifest(&spec, &pool_truth, cfg.reference_errors, derive_seed(seed, "reference", 0))?;
    let nw = subsample(&pool_ref, &nw_counts, derive_seed(seed, "nw", 0))?;
    let bl = subsample(&pool_ref, &bl_counts, derive_seed(seed, "bl", 0))?;
    let target = |n: usize| BTreeMap::from([(cfg.target.clone(), n)]);
    let dev = generate_dataset(&spec, &target(cfg.dev_utts), derive_seed(seed, "dev", 0), "dev", &feats)?;
    let test = generate_dataset(&spec, &target(cfg.test_utts), derive_seed(seed, "test", 0), "test", &feats)?;
    let test_ref = reference_manifest(&spec, &test, cfg.reference_errors, derive_seed(seed, "reference", 1))?;
    let pairs: Vec<(&str, &str)> = test
        .records()
        .iter()
        .zip(test_ref.records())
        .map(|(t, r)| (t.transcript.as_str(), r.transcript.as_str()))
        .collect();
    let reference_wer = corpus_wer(&pairs)?;
    log::info!("reference transcriber test WER {reference_wer:.4}");

    pool_truth.write(&data_dir.join("pool.truth.tsv"))?;
    pool_ref.write(&data_dir.join("pool.reference.tsv"))?;
    nw.write(&data_dir.join("nw.tsv"))?;
    bl.write(&data_dir.join("bl.tsv"))?;
    dev.write(&data_dir.join("dev.tsv"))?;
    test.write(&data_dir.join("test.tsv"))?;
    test_ref.write(&data_dir.join("test.reference.tsv"))?;
    let path = data_dir.join("reference_wer.txt");
    fs::write(&path, format!("{reference_wer:.6}\n")).map_err(|e| Error::io(&path, e))?;
    Ok(Datasets { spec, pool_truth, nw, bl, dev, test, reference_wer })
}

/// Trains every tokenizer on pooled balanced-set reference transcripts and
/// writes it to `out_dir/tokenizers/<name>.vocab`.
pub fn train_tokenizers(
    specs: &[TokenizerSpec],
    datasets: &Datasets,
    out_dir: &Path,
) -> Result<BTreeMap<String, Vocab>> {
    let dir = out_dir.join("tokenizers");
    ensure_dir(&dir)?;
    let mut out = BTreeMap::new();
    for t in specs {
        let corpus = pool_transcripts([&filter_languages(&datasets.bl, &t.languages)?]);
        let vocab = train_bpe(&corpus, t.size)?;
        vocab.write(&tokenizer_path(&dir, &t.name))?;
        log::info!("tokenizer {}: {} tokens, {} merges", t.name, vocab.size(), vocab.merges().len());
        out.insert(t.name.clone(), vocab);
    }
    Ok(out)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn tokenizer_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.vocab"))
}

fn certainty_of(r: &UttRecord) -> Result<f64> {
    r.certainty
        .ok_or_else(|| Error::Selection(format!("record {} has no certainty", r.utt_id)))
}

/// Orders by certainty, highest first, ties by ascending utt_id.
fn rank_by_certainty(manifest: &Manifest) -> Result<Vec<(f64, &UttRecord)>> {
    let mut ranked = manifest
        .records()
        .iter()
        .map(|r| Ok((certainty_of(r)?, r)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.utt_id.cmp(&b.1.utt_id)));
    Ok(ranked)
}

/// Splits into the `ceil(p·N)` most certain records and the rest, each in
/// rank order.
pub fn split_by_certainty(manifest: &Manifest, fraction: f64) -> Result<(Manifest, Manifest)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Selection(format!("fraction {fraction} is outside (0, 1]")));
    }
    let ranked = rank_by_certainty(manifest)?;
    let keep = ((fraction * ranked.len() as f64).ceil() as usize).min(ranked.len());
    let (sel, rej): (Vec<_>, Vec<_>) = ranked
        .into_iter()
        .enumerate()
        .map(|(i, (_, r))| (i, r.clone()))
        .partition(|(i, _)| *i < keep);
    let strip = |v: Vec<(usize, UttRecord)>| Manifest::new(v.into_iter().map(|(_, r)| r).collect());
    Ok((strip(sel)?, strip(rej)?))
}

/// Keeps the `ceil(p·N)` records with the highest certainty.
pub fn select_by_certainty(manifest: &Manifest, fraction: f64) -> Result<Manifest> {
    Ok(split_by_certainty(manifest, fraction)?.0)
}

/// Corpus WER of pseudo-labels against the ground truth.
pub fn pseudo_label_wer(pseudo: &Manifest, datasets: &Datasets) -> Result<f64> {
    let pairs = pseudo
        .records()
        .iter()
        .map(|r| {
            let truth = datasets
                .truth(&r.utt_id)
                .ok_or_else(|| Error::Selection(format!("no ground truth for {}", r.utt_id)))?;
            Ok((truth.transcript.as_str(), r.transcript.as_str()))
        })
        .collect::<Result<Vec<_>>>()?;
    corpus_wer(&pairs)
}

/// Certainty distribution of one decoding pass and the quality of what
/// selection kept and dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct CertaintySummary {
    pub stage_ref: String,
    pub decoded: usize,
    pub selected: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    /// Lowest certainty that was kept.
    pub threshold: f64,
    pub selected_wer: f64,
    pub rejected_wer: Option<f64>,
}

impl CertaintySummary {
    pub const HEADER: &'static str =
        "stage_ref\tdecoded\tselected\tmin\tmedian\tmax\tthreshold\tselected_wer\trejected_wer";

    pub fn to_tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.stage_ref,
            self.decoded,
            self.selected,
            self.min,
            self.median,
            self.max,
            self.threshold,
            self.selected_wer,
            self.rejected_wer.map_or_else(|| "-".to_string(), |w| format!("{w:.6}")),
        )
    }
}

fn summarize(
    stage_ref: &str,
    decoded: &Manifest,
    selected: &Manifest,
    rejected: &Manifest,
    datasets: &Datasets,
) -> Result<CertaintySummary> {
    let ranked: Vec<f64> = rank_by_certainty(decoded)?.into_iter().map(|(c, _)| c).collect();
    let n = ranked.len();
    let median = if n % 2 == 1 {
        ranked[n / 2]
    } else {
        0.5 * (ranked[n / 2 - 1] + ranked[n / 2])
    };
    Ok(CertaintySummary {
        stage_ref: stage_ref.to_string(),
        decoded: n,
        selected: selected.len(),
        min: ranked[n - 1],
        median,
        max: ranked[0],
        threshold: ranked[selected.len() - 1],
        selected_wer: pseudo_label_wer(selected, datasets)?,
        rejected_wer: if rejected.is_empty() {
            None
        } else {
            Some(pseudo_label_wer(rejected, datasets)?)
        },
    })
}

/// Shared inputs for running stages.
pub struct StageContext<'a> {
    pub root: &'a Path,
    pub seed: u64,
    pub arch: ArchConfig,
    pub datasets: &'a Datasets,
    pub tokenizers: &'a BTreeMap<String, Vocab>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub warm_start: Option<WarmStartMode>,
    pub train_size: usize,
    /// Pseudo-labeled manifest before selection.
    pub decoded: Option<Manifest>,
    pub certainty: Option<CertaintySummary>,
}

pub fn stage_dir(root: &Path, stage_ref: &str) -> PathBuf {
    root.join("stages").join(stage_ref)
}

/// Warm-start mode implied by a tokenizer change.
pub fn derived_mode(prior_tokenizer: &str, tokenizer: &str) -> WarmStartMode {
    if prior_tokenizer == tokenizer {
        WarmStartMode::Full
    } else {
        WarmStartMode::EncoderOnly
    }
}

/// Resolves data and the initial model, trains, and registers the best
/// checkpoint under the stage's ref.
pub fn run_stage(stage: &StageSpec, registry: &mut Registry, ctx: &StageContext<'_>) -> Result<StageOutcome> {
    let vocab = ctx.tokenizers.get(&stage.tokenizer_ref).ok_or_else(|| {
        Error::Curriculum(format!("stage `{}`: unknown tokenizer `{}`", stage.stage_ref, stage.tokenizer_ref))
    })?;
    let dir = stage_dir(ctx.root, &stage.stage_ref);
    ensure_dir(&dir)?;
    let base = filter_languages(ctx.datasets.composition(stage.weighting), &stage.languages)?;

    let (train_manifest, decoded, certainty) = match &stage.source {
        DataSource::Reference => (base, None, None),
        DataSource::Pseudo(src) => {
            let (_, model, src_vocab) = registry.get(src).ok_or_else(|| {
                Error::Curriculum(format!("stage `{}`: pseudo source `{src}` is not registered", stage.stage_ref))
            })?;
            log::info!("{}: decoding {} utterances with {src}", stage.stage_ref, base.len());
            let decoded = batch_decode(model, &base, src_vocab, src)?;
            decoded.write(&dir.join("decoded.tsv"))?;
            let p = stage.selection.unwrap_or(1.0);
            let (selected, rejected) = split_by_certainty(&decoded, p)?;
            let summary = summarize(&stage.stage_ref, &decoded, &selected, &rejected, ctx.datasets)?;
            log::info!(
                "{}: kept {} of {}; pseudo-label WER kept {:.4}, dropped {}",
                stage.stage_ref,
                summary.selected,
                summary.decoded,
                summary.selected_wer,
                summary.rejected_wer.map_or_else(|| "-".into(), |w| format!("{w:.4}"))
            );
            (selected, Some(decoded), Some(summary))
        }
    };
    if train_manifest.is_empty() {
        return Err(Error::Curriculum(format!("stage `{}` has no training data", stage.stage_ref)));
    }
    train_manifest.write(&dir.join("train.tsv"))?;

    let stage_seed = derive_seed(ctx.seed, &format!("stage:{}", stage.stage_ref), stage.train.seed);
    let (initial, mode) = match &stage.warm_start_from {
        None => {
            let arch = ArchConfig { vocab_size: vocab.label_count(), ..ctx.arch };
            (init_model(arch, derive_seed(stage_seed, "init", 0))?, None)
        }
        Some(prior_ref) => {
            let (entry, prior, _) = registry.get(prior_ref).ok_or_else(|| {
                Error::Curriculum(format!("stage `{}`: warm start `{prior_ref}` is not registered", stage.stage_ref))
            })?;
            let mode = derived_mode(&entry.tokenizer_ref, &stage.tokenizer_ref);
            let model = warm_start(prior, vocab.label_count(), mode, derive_seed(stage_seed, "init", 0))?;
            (model, Some(mode))
        }
    };
    log::info!(
        "{}: training on {} utterances, warm start {}",
        stage.stage_ref,
        train_manifest.len(),
        match (&stage.warm_start_from, mode) {
            (Some(r), Some(m)) => format!("{r} ({m})"),
            _ => "none".into(),
        }
    );
    let cfg = TrainConfig { seed: stage_seed, ..stage.train };
    let (model, report) = train(&initial, &train_manifest, &ctx.datasets.dev, vocab, &cfg, &dir.join("ckpt"))?;
    report.write(&dir.join("report.tsv"))?;
    registry.register(
        RegistryEntry {
            stage_ref: stage.stage_ref.clone(),
            tokenizer_ref: stage.tokenizer_ref.clone(),
            checkpoint: dir.join("best.ckpt"),
            vocab: tokenizer_path(&ctx.root.join("tokenizers"), &stage.tokenizer_ref),
            best_step: report.best_step,
            dev_wer: report.best_dev_wer,
        },
        model.clone(),
        vocab.clone(),
    )?;
    Ok(StageOutcome {
        model,
        report,
        warm_start: mode,
        train_size: train_manifest.len(),
        decoded,
        certainty,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WerrRow {
    pub stage_ref: String,
    pub dev_wer: f64,
    pub test_wer: f64,
    pub werr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WerrReport {
    pub rows: Vec<WerrRow>,
}

impl WerrReport {
    pub const HEADER: &'static str = "stage_ref\tdev_wer\ttest_wer\twerr";

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{:.2}", r.stage_ref, r.dev_wer, r.test_wer, r.werr);
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Curriculum(format!("bad report line `{line}`"));
        let mut rows = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            rows.push(WerrRow {
                stage_ref: f[0].to_string(),
                dev_wer: num(f[1])?,
                test_wer: num(f[2])?,
                werr: num(f[3])?,
            });
        }
        Ok(WerrReport { rows })
    }

    pub fn row(&self, stage_ref: &str) -> Option<&WerrRow> {
        self.rows.iter().find(|r| r.stage_ref == stage_ref)
    }
}

/// One row for a registered model.
pub fn werr_row(entry: &RegistryEntry, model: &Model, vocab: &Vocab, test: &Manifest, reference_wer: f64) -> Result<WerrRow> {
    let test_wer = evaluate(model, test, vocab)?;
    Ok(WerrRow {
        stage_ref: entry.stage_ref.clone(),
        dev_wer: entry.dev_wer,
        test_wer,
        werr: werr(reference_wer, test_wer)?,
    })
}

/// Evaluates every registered stage on `test`, in registration order.
pub fn build_report(registry: &Registry, test: &Manifest, reference_wer: f64) -> Result<WerrReport> {
    let rows = registry
        .entries()
        .iter()
        .map(|e| {
            let (_, model, vocab) = registry.get(&e.stage_ref).expect("entry is registered");
            werr_row(e, model, vocab, test, reference_wer)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WerrReport { rows })
}

#[derive(Debug, Clone)]
pub struct IplPass {
    pub pass: usize,
    pub stage_ref: String,
    pub model: Model,
    pub row: WerrRow,
    pub decoded: Manifest,
    pub certainty: CertaintySummary,
}

/// Iterative pseudo-labeling from a registered stage: each pass re-decodes
/// the target language's balanced set with the current model, keeps the
/// most certain fraction, and continues training from the current model.
/// Passes are registered as `<base>-P<k>C`.
pub fn run_ipl(
    base_stage: &str,
    passes: usize,
    fraction: f64,
    train_cfg: TrainConfig,
    registry: &mut Registry,
    ctx: &StageContext<'_>,
    target: &str,
) -> Result<Vec<IplPass>> {
    if passes == 0 {
        return Err(Error::Curriculum("IPL needs at least one pass".into()));
    }
    let tokenizer_ref = registry
        .get(base_stage)
        .ok_or_else(|| Error::Curriculum(format!("IPL base `{base_stage}` is not registered")))?
        .0
        .tokenizer_ref
        .clone();
    let mut current = base_stage.to_string();
    let mut out = Vec::with_capacity(passes);
    for pass in 1..=passes {
        let stage = StageSpec {
            stage_ref: format!("{base_stage}-P{pass}C"),
            languages: vec![target.to_string()],
            weighting: Weighting::Bl,
            source: DataSource::Pseudo(current.clone()),
            tokenizer_ref: tokenizer_ref.clone(),
            warm_start_from: Some(current.clone()),
            selection: Some(fraction),
            train: train_cfg,
        };
        let outcome = run_stage(&stage, registry, ctx)?;
        let (entry, model, vocab) = registry.get(&stage.stage_ref).expect("just registered");
        let row = werr_row(entry, model, vocab, &ctx.datasets.test, ctx.datasets.reference_wer)?;
        out.push(IplPass {
            pass,
            stage_ref: stage.stage_ref.clone(),
            model: outcome.model,
            row,
            decoded: outcome.decoded.expect("pseudo stage decodes"),
            certainty: outcome.certainty.expect("pseudo stage summarizes"),
        });
        current = stage.stage_ref;
    }
    Ok(out)
}

#[derive(Debug)]
pub struct CurriculumOutcome {
    pub report: WerrReport,
    pub registry: Registry,
    pub reference_wer: f64,
    pub certainty: Vec<CertaintySummary>,
}

/// Runs every stage in order under `out_dir` and writes `report.tsv` and
/// `certainty.tsv` there.
pub fn run_curriculum(cur: &Curriculum, out_dir: &Path) -> Result<CurriculumOutcome> {
    cur.validate()?;
    let datasets = prepare_data(&cur.data, cur.seed, out_dir)?;
    let tokenizers = train_tokenizers(&cur.tokenizers, &datasets, out_dir)?;
    let mut registry = Registry::create(out_dir)?;
    let ctx = StageContext {
        root: out_dir,
        seed: cur.seed,
        arch: cur.arch,
        datasets: &datasets,
        tokenizers: &tokenizers,
    };
    let mut certainty = Vec::new();
    let mut rows = Vec::new();
    for stage in &cur.stages {
        let outcome = run_stage(stage, &mut registry, &ctx)?;
        certainty.extend(outcome.certainty);
        let (entry, model, vocab) = registry.get(&stage.stage_ref).expect("just registered");
        let row = werr_row(entry, model, vocab, &datasets.test, datasets.reference_wer)?;
        log::info!("{}: dev WER {:.4}, test WER {:.4}, WERR {:.2}", row.stage_ref, row.dev_wer, row.test_wer, row.werr);
        rows.push(row);
    }
    let report = WerrReport { rows };
    let path = out_dir.join("report.tsv");
    fs::write(&path, report.to_tsv()).map_err(|e| Error::io(&path, e))?;
    let mut text = format!("{}\n", CertaintySummary::HEADER);
    for c in &certainty {
        text.push_str(&c.to_tsv_row());
        text.push('\n');
    }
    let path = out_dir.join("certainty.tsv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(CurriculumOutcome {
        report,
        registry,
        reference_wer: datasets.reference_wer,
        certainty,
    })
}
