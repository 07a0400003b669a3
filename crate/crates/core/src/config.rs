//! Line-oriented `key = value` configuration text, shared by the CLI config
//! files and the curriculum preamble.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::synthcorpus::{ErrorRates, FamilyConfig, Interval};
use crate::trainer::TrainConfig;
use crate::transducer::ArchConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

impl Entry {
    pub fn parse<T>(&self) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.value.parse().map_err(|e| {
            Error::Config(format!("line {}: bad value for `{}`: {e}", self.line, self.key))
        })
    }

    pub fn unknown(&self) -> Error {
        Error::Config(format!("line {}: unknown key `{}`", self.line, self.key))
    }
}

/// Strips a trailing `#` comment and surrounding whitespace.
pub fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

/// Splits one non-empty, comment-free line at its first `=`.
pub fn split_key_value(line: &str, line_no: usize) -> Result<Entry> {
    let (key, value) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("line {line_no}: empty key")));
    }
    Ok(Entry {
        line: line_no,
        key: key.to_string(),
        value: value.trim().to_string(),
    })
}

/// Parses a whole file of `key = value` lines; duplicate keys are rejected.
pub fn parse_key_values(text: &str) -> Result<Vec<Entry>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        let entry = split_key_value(line, i + 1)?;
        if let Some(prev) = seen.insert(entry.key.clone(), entry.line) {
            return Err(Error::Config(format!(
                "line {}: `{}` already set on line {prev}",
                entry.line, entry.key
            )));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<Vec<Entry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text)
}

/// Parses `a,b,c` into trimmed, non-empty items.
pub fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_bool(entry: &Entry) -> Result<bool> {
    match entry.value.as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "line {}: `{}` expects true or false",
            entry.line, entry.key
        ))),
    }
}

/// Applies an architecture key; returns `false` if the key is not one.
/// `vocab_size` is not settable here: it always comes from the tokenizer.
pub fn apply_arch(arch: &mut ArchConfig, entry: &Entry) -> Result<bool> {
    match entry.key.as_str() {
        "feature_dim" => arch.feature_dim = entry.parse()?,
        "encoder_dim" => arch.encoder_dim = entry.parse()?,
        "label_dim" => arch.label_dim = entry.parse()?,
        "joiner_dim" => arch.joiner_dim = entry.parse()?,
        "downsample_factor" => arch.downsample_factor = entry.parse()?,
        "use_attention" => arch.use_attention = parse_bool(entry)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn apply_train(cfg: &mut TrainConfig, entry: &Entry) -> Result<bool> {
    match entry.key.as_str() {
        "steps" => cfg.steps = entry.parse()?,
        "batch" | "batch_size" => cfg.batch_size = entry.parse()?,
        "lr" | "learning_rate" => cfg.learning_rate = entry.parse()?,
        "beta1" => cfg.beta1 = entry.parse()?,
        "beta2" => cfg.beta2 = entry.parse()?,
        "epsilon" => cfg.epsilon = entry.parse()?,
        "grad_clip_norm" => cfg.grad_clip_norm = entry.parse()?,
        "eval_every" => cfg.eval_every = entry.parse()?,
        "seed" => cfg.seed = entry.parse()?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn apply_family(family: &mut FamilyConfig, entry: &Entry) -> Result<bool> {
    match entry.key.as_str() {
        "feature_dim" => family.feature_dim = entry.parse()?,
        "noise_sigma" => family.noise_sigma = entry.parse()?,
        "frames_per_char" => family.frames_per_char = entry.parse::<Interval>()?,
        "word_len" => family.word_len = entry.parse::<Interval>()?,
        "words_per_utt" => family.words_per_utt = entry.parse::<Interval>()?,
        "script_offset" => family.script_offset = entry.parse()?,
        "sharpness" => family.sharpness = entry.parse()?,
        "final_fraction" => family.final_fraction = entry.parse()?,
        "end_prob_final" => family.end_prob_final = entry.parse()?,
        "end_prob_other" => family.end_prob_other = entry.parse()?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Parses `sub,del,ins`.
pub fn parse_rates(entry: &Entry) -> Result<ErrorRates> {
    let parts = parse_list(&entry.value);
    let nums = parts
        .iter()
        .map(|p| p.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>();
    match nums.as_deref() {
        Ok([sub, del, ins]) => {
            let rates = ErrorRates { sub: *sub, del: *del, ins: *ins };
            rates.check()?;
            Ok(rates)
        }
        _ => Err(Error::Config(format!(
            "line {}: `{}` expects sub,del,ins",
            entry.line, entry.key
        ))),
    }
}

/// Architecture file: every key must be an architecture key.
pub fn arch_from_entries(entries: &[Entry], vocab_size: usize) -> Result<ArchConfig> {
    let mut arch = ArchConfig::with_vocab(vocab_size);
    for e in entries {
        if !apply_arch(&mut arch, e)? {
            return Err(e.unknown());
        }
    }
    arch.validate()?;
    Ok(arch)
}

pub fn train_config_from_entries(entries: &[Entry]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for e in entries {
        if !apply_train(&mut cfg, e)? {
            return Err(e.unknown());
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_duplicates() {
        let entries = parse_key_values("# c\n a = 1 # x\n\nb=two\n").unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].key, "a");
        assert_eq!(entries[0].value, "1");
        assert_eq!(entries[1].line, 4);
        assert!(parse_key_values("a = 1\na = 2\n").is_err());
        assert!(parse_key_values("novalue\n").is_err());
    }

    #[test]
    fn train_and_arch_files() {
        let cfg = train_config_from_entries(&parse_key_values("steps = 5\nlr = 0.01\n").unwrap()).unwrap();
        assert_eq!(cfg.steps, 5);
        assert_eq!(cfg.learning_rate, 0.01);
        assert!(train_config_from_entries(&parse_key_values("bogus = 1\n").unwrap()).is_err());
        let arch = arch_from_entries(&parse_key_values("use_attention = true\n").unwrap(), 7).unwrap();
        assert!(arch.use_attention);
        assert_eq!(arch.vocab_size, 7);
        assert!(arch_from_entries(&parse_key_values("encoder_dim = 0\n").unwrap(), 7).is_err());
    }

    #[test]
    fn rates() {
        let e = split_key_value("reference_errors = 0.1, 0.05,0.05", 1).unwrap();
        assert_eq!(parse_rates(&e).unwrap(), ErrorRates { sub: 0.1, del: 0.05, ins: 0.05 });
        let e = split_key_value("reference_errors = 0.1,0.05", 1).unwrap();
        assert!(parse_rates(&e).is_err());
    }
}
