//! Curriculum files: a `key = value` preamble followed by `tokenizer` and
//! `stage` blocks.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::config::{self, apply_arch, apply_family, apply_train, parse_list, Entry};
use crate::error::{Error, Result};
use crate::synthcorpus::{ErrorRates, FamilyConfig};
use crate::trainer::TrainConfig;
use crate::transducer::ArchConfig;

/// Dataset composition: naturally weighted or balanced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Nw,
    Bl,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NW" => Ok(Weighting::Nw),
            "BL" => Ok(Weighting::Bl),
            _ => Err(Error::Curriculum(format!("unknown weighting `{s}` (NW or BL)"))),
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::Nw => "NW",
            Weighting::Bl => "BL",
        })
    }
}

/// Where a stage's training transcripts come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Reference,
    /// Decoded by the named stage's model.
    Pseudo(String),
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "reference" => Ok(DataSource::Reference),
            Some(("pseudo", r)) if !r.is_empty() => Ok(DataSource::Pseudo(r.to_string())),
            _ => Err(Error::Curriculum(format!(
                "unknown source `{s}` (reference or pseudo:<stage_ref>)"
            ))),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Reference => f.write_str("reference"),
            DataSource::Pseudo(r) => write!(f, "pseudo:{r}"),
        }
    }
}

/// Dataset generation parameters shared by all stages.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub family: FamilyConfig,
    /// Utterances per unit of the NW/BL weight tables.
    pub utts_per_khr: usize,
    pub dev_utts: usize,
    pub test_utts: usize,
    pub target: String,
    pub reference_errors: ErrorRates,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            family: FamilyConfig::default(),
            utts_per_khr: 20,
            dev_utts: 200,
            test_utts: 400,
            target: "UKR".into(),
            reference_errors: ErrorRates { sub: 0.1, del: 0.05, ins: 0.05 },
        }
    }
}

impl DataConfig {
    /// Applies a data key; returns `false` if the key is not one.
    pub fn apply(&mut self, entry: &Entry) -> Result<bool> {
        match entry.key.as_str() {
            "utts_per_khr" => self.utts_per_khr = entry.parse()?,
            "dev_utts" => self.dev_utts = entry.parse()?,
            "test_utts" => self.test_utts = entry.parse()?,
            "target" => self.target = entry.value.clone(),
            "reference_errors" => self.reference_errors = config::parse_rates(entry)?,
            _ => return apply_family(&mut self.family, entry),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerSpec {
    pub name: String,
    /// Trained on the pooled balanced-set reference transcripts of these languages.
    pub languages: Vec<String>,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub stage_ref: String,
    pub languages: Vec<String>,
    pub weighting: Weighting,
    pub source: DataSource,
    pub tokenizer_ref: String,
    pub warm_start_from: Option<String>,
    pub selection: Option<f64>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curriculum {
    pub seed: u64,
    pub data: DataConfig,
    /// Architecture template; the label count comes from each stage's tokenizer.
    pub arch: ArchConfig,
    pub tokenizers: Vec<TokenizerSpec>,
    pub stages: Vec<StageSpec>,
}

enum Block {
    Preamble,
    Tokenizer(Vec<Entry>),
    Stage(Vec<Entry>),
}

fn required<'a>(entries: &'a [Entry], key: &str, what: &str) -> Result<&'a Entry> {
    entries
        .iter()
        .find(|e| e.key == key)
        .ok_or_else(|| Error::Curriculum(format!("{what} block is missing `{key}`")))
}

fn check_unique(entries: &[Entry]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for e in entries {
        if !seen.insert(e.key.as_str()) {
            return Err(Error::Curriculum(format!("line {}: `{}` set twice", e.line, e.key)));
        }
    }
    Ok(())
}

fn optional_ref(value: &str) -> Option<String> {
    (value != "none").then(|| value.to_string())
}

fn tokenizer_from(entries: &[Entry]) -> Result<TokenizerSpec> {
    check_unique(entries)?;
    for e in entries {
        if !matches!(e.key.as_str(), "name" | "languages" | "size") {
            return Err(Error::Curriculum(format!("line {}: unknown tokenizer key `{}`", e.line, e.key)));
        }
    }
    Ok(TokenizerSpec {
        name: required(entries, "name", "tokenizer")?.value.clone(),
        languages: parse_list(&required(entries, "languages", "tokenizer")?.value),
        size: required(entries, "size", "tokenizer")?.parse()?,
    })
}

fn stage_from(entries: &[Entry]) -> Result<StageSpec> {
    check_unique(entries)?;
    let mut train = TrainConfig::default();
    for e in entries {
        let known = matches!(
            e.key.as_str(),
            "stage_ref" | "languages" | "weighting" | "source" | "tokenizer" | "warm_start" | "select"
        );
        if !known && !matches!(e.key.as_str(), "steps" | "batch" | "lr" | "eval_every" | "seed") {
            return Err(Error::Curriculum(format!("line {}: unknown stage key `{}`", e.line, e.key)));
        }
        if !known {
            apply_train(&mut train, e)?;
        }
    }
    let selection = match entries.iter().find(|e| e.key == "select") {
        Some(e) if e.value != "none" => Some(e.parse::<f64>()?),
        _ => None,
    };
    Ok(StageSpec {
        stage_ref: required(entries, "stage_ref", "stage")?.value.clone(),
        languages: parse_list(&required(entries, "languages", "stage")?.value),
        weighting: required(entries, "weighting", "stage")?.value.parse()?,
        source: required(entries, "source", "stage")?.value.parse()?,
        tokenizer_ref: required(entries, "tokenizer", "stage")?.value.clone(),
        warm_start_from: entries
            .iter()
            .find(|e| e.key == "warm_start")
            .and_then(|e| optional_ref(&e.value)),
        selection,
        train,
    })
}

impl Curriculum {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cur = Curriculum {
            seed: 0,
            data: DataConfig::default(),
            arch: ArchConfig::with_vocab(1),
            tokenizers: Vec::new(),
            stages: Vec::new(),
        };
        let mut preamble = Vec::new();
        let mut block = Block::Preamble;
        let finish = |block: Block, cur: &mut Curriculum| -> Result<()> {
            match block {
                Block::Preamble => {}
                Block::Tokenizer(e) => cur.tokenizers.push(tokenizer_from(&e)?),
                Block::Stage(e) => cur.stages.push(stage_from(&e)?),
            }
            Ok(())
        };
        for (i, raw) in text.lines().enumerate() {
            let line = config::strip_comment(raw);
            match line {
                "" => continue,
                "stage" | "tokenizer" => {
                    let next = if line == "stage" {
                        Block::Stage(Vec::new())
                    } else {
                        Block::Tokenizer(Vec::new())
                    };
                    finish(std::mem::replace(&mut block, next), &mut cur)?;
                    continue;
                }
                _ => {}
            }
            let entry = config::split_key_value(line, i + 1)
                .map_err(|e| Error::Curriculum(e.to_string()))?;
            match &mut block {
                Block::Preamble => preamble.push(entry),
                Block::Tokenizer(e) | Block::Stage(e) => e.push(entry),
            }
        }
        finish(block, &mut cur)?;

        check_unique(&preamble)?;
        for e in &preamble {
            let used = match e.key.as_str() {
                "seed" => {
                    cur.seed = e.parse()?;
                    true
                }
                // `feature_dim` is shared by the family and the model.
                "feature_dim" => {
                    apply_arch(&mut cur.arch, e)?;
                    cur.data.apply(e)?
                }
                _ => apply_arch(&mut cur.arch, e)? || cur.data.apply(e)?,
            };
            if !used {
                return Err(Error::Curriculum(format!("line {}: unknown key `{}`", e.line, e.key)));
            }
        }
        cur.validate()?;
        Ok(cur)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Curriculum::parse(&text)
    }

    /// Checks references and lineage: every referenced stage must appear
    /// earlier, so cycles and forward references are both rejected.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Curriculum(m));
        let mut tokenizer_names = BTreeSet::new();
        for t in &self.tokenizers {
            if !tokenizer_names.insert(t.name.as_str()) {
                return err(format!("tokenizer `{}` defined twice", t.name));
            }
            if t.languages.is_empty() {
                return err(format!("tokenizer `{}` has no languages", t.name));
            }
        }
        let mut earlier = BTreeSet::new();
        for s in &self.stages {
            if s.languages.is_empty() {
                return err(format!("stage `{}` has no languages", s.stage_ref));
            }
            if !tokenizer_names.contains(s.tokenizer_ref.as_str()) {
                return err(format!("stage `{}` uses unknown tokenizer `{}`", s.stage_ref, s.tokenizer_ref));
            }
            let mut refs: Vec<&str> = s.warm_start_from.iter().map(String::as_str).collect();
            if let DataSource::Pseudo(r) = &s.source {
                refs.push(r);
            }
            for r in refs {
                if !earlier.contains(r) {
                    return err(format!(
                        "stage `{}` refers to `{r}`, which is not an earlier stage",
                        s.stage_ref
                    ));
                }
            }
            match (s.selection, &s.source) {
                (Some(_), DataSource::Reference) => {
                    return err(format!("stage `{}`: selection needs a pseudo source", s.stage_ref))
                }
                (Some(p), _) if !(p > 0.0 && p <= 1.0) => {
                    return err(format!("stage `{}`: selection {p} is outside (0, 1]", s.stage_ref))
                }
                _ => {}
            }
            s.train.validate()?;
            if !earlier.insert(s.stage_ref.as_str()) {
                return err(format!("stage `{}` defined twice", s.stage_ref));
            }
        }
        Ok(())
    }

    pub fn stage(&self, stage_ref: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.stage_ref == stage_ref)
    }
}
