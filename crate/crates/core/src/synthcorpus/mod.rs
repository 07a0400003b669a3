//! Synthetic family of related languages: Markov-chain text, rendered
//! pseudo-acoustic frames, a simulated reference transcriber, and the
//! dataset builders (natural weighting, balanced sub-sampling).

mod features;
mod manifest;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

pub use features::FeatureMatrix;
pub use manifest::{relative_path, Manifest, Source, UttRecord};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub min: usize,
    pub max: usize,
}

impl Interval {
    pub const fn new(min: usize, max: usize) -> Self {
        Interval { min, max }
    }

    fn check(&self, what: &str, allow_zero: bool) -> Result<()> {
        if self.min > self.max || (!allow_zero && self.min == 0) {
            return Err(Error::Config(format!(
                "invalid {what} interval [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

impl std::str::FromStr for Interval {
    type Err = Error;

    /// Accepts `a..b` or a single integer.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad interval `{s}`"));
        let (lo, hi) = s.split_once("..").unwrap_or((s, s));
        let lo = lo.trim().parse().map_err(|_| bad())?;
        let hi = hi.trim().parse().map_err(|_| bad())?;
        Ok(Interval::new(lo, hi))
    }
}

/// A writing system. Characters at the same position in different scripts
/// share an underlying phone, so their acoustic prototypes are close.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptConfig {
    pub name: String,
    pub chars: Vec<char>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageConfig {
    pub lang_id: String,
    pub script: String,
    pub alphabet: Vec<char>,
}

/// Languages whose character chains share a common base matrix, mixed in
/// with weight `proximity`.
#[derive(Debug, Clone, PartialEq)]
pub struct Relation {
    pub members: Vec<String>,
    pub proximity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyConfig {
    pub scripts: Vec<ScriptConfig>,
    pub languages: Vec<LanguageConfig>,
    pub relations: Vec<Relation>,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub frames_per_char: Interval,
    pub word_len: Interval,
    pub words_per_utt: Interval,
    /// Scale of the per-script deviation from the shared phone prototype.
    pub script_offset: f64,
    /// Log-normal spread of transition weights; larger is more predictable.
    pub sharpness: f64,
    /// Fraction of phones that tend to close a word.
    pub final_fraction: f64,
    /// Word-end probability after a word-final-prone character.
    pub end_prob_final: f64,
    /// Word-end probability after any other character.
    pub end_prob_other: f64,
}

fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}

impl Default for FamilyConfig {
    /// Two scripts (Cyrillic, Latin) and five languages: UKR and RUS on the
    /// Cyrillic side, POL, CZE and SVK on the Latin side.
    fn default() -> Self {
        let lang = |id: &str, script: &str, alphabet: &str| LanguageConfig {
            lang_id: id.into(),
            script: script.into(),
            alphabet: chars(alphabet),
        };
        FamilyConfig {
            scripts: vec![
                ScriptConfig {
                    name: "cyrillic".into(),
                    chars: chars("абвгдеєжзиіїйклмнопрстуфхцчшьюя"),
                },
                ScriptConfig {
                    name: "latin".into(),
                    chars: chars("abvgdeęžziíjýklm"),
                },
            ],
            languages: vec![
                lang("UKR", "cyrillic", "абвгдеєжзиіїйклмнопрстухцчшьюя"),
                lang("RUS", "cyrillic", "абвгдежзийклмнопрстуфхцчшьюя"),
                lang("POL", "latin", "abvgdeęžzijklm"),
                lang("CZE", "latin", "abvgdežziíjýklm"),
                lang("SVK", "latin", "abvgdežziíjklm"),
            ],
            relations: vec![
                Relation {
                    members: vec!["UKR".into(), "RUS".into()],
                    proximity: 0.7,
                },
                Relation {
                    members: vec!["POL".into(), "CZE".into(), "SVK".into()],
                    proximity: 0.6,
                },
            ],
            feature_dim: 16,
            noise_sigma: 0.3,
            frames_per_char: Interval::new(2, 4),
            word_len: Interval::new(1, 10),
            words_per_utt: Interval::new(2, 4),
            script_offset: 0.3,
            sharpness: 1.5,
            final_fraction: 0.35,
            end_prob_final: 0.99,
            end_prob_other: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageSpec {
    pub lang_id: String,
    pub script: String,
    pub alphabet: Vec<char>,
    /// Row-stochastic `(n+1)×(n+1)` matrix; index `n` is the word boundary.
    /// The boundary row is the word-initial distribution.
    pub transition: Vec<Vec<f64>>,
    pub word_len_range: Interval,
    pub words_per_utt_range: Interval,
    pub relatedness_seed: u64,
}

impl LanguageSpec {
    fn boundary(&self) -> usize {
        self.alphabet.len()
    }

    /// One word from the character chain, honouring the length range.
    pub fn sample_word<R: Rng>(&self, rng: &mut R) -> String {
        let end = self.boundary();
        let mut state = end;
        let mut word = String::new();
        let mut len = 0;
        loop {
            if len >= self.word_len_range.max {
                break;
            }
            let row = &self.transition[state];
            let allow_end = len >= self.word_len_range.min.max(1);
            let total: f64 = if allow_end {
                row.iter().sum()
            } else {
                row[..end].iter().sum()
            };
            let mut u = rng.gen::<f64>() * total;
            let mut next = end;
            for (j, &p) in row.iter().enumerate() {
                if j == end && !allow_end {
                    continue;
                }
                if u < p {
                    next = j;
                    break;
                }
                u -= p;
            }
            if next == end {
                if allow_end {
                    break;
                }
                // Floating-point leftover: take the last character.
                next = end - 1;
            }
            word.push(self.alphabet[next]);
            len += 1;
            state = next;
        }
        word
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilySpec {
    pub languages: Vec<LanguageSpec>,
    pub prototypes: BTreeMap<char, Vec<f32>>,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub frames_per_char: Interval,
}

impl FamilySpec {
    pub fn language(&self, lang: &str) -> Result<&LanguageSpec> {
        self.languages
            .iter()
            .find(|l| l.lang_id == lang)
            .ok_or_else(|| Error::Config(format!("unknown language `{lang}`")))
    }
}

/// Random row-stochastic chain over `n` symbols plus boundary (index `n`).
/// Row `r < n` ends the word with probability `end_probs[r]`; the boundary
/// row never does. Self-transitions are zero unless `n == 1`.
pub fn random_chain<R: Rng>(end_probs: &[f64], sharpness: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let n = end_probs.len();
    (0..=n)
        .map(|row| {
            // A doubled character renders like one long character, so chains never
            // repeat a symbol immediately.
            let weights: Vec<f64> = (0..n)
                .map(|c| {
                    let w = (sharpness * rng.sample::<f64, _>(StandardNormal)).exp();
                    if c == row && n > 1 {
                        0.0
                    } else {
                        w
                    }
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let p_end = end_probs.get(row).copied().unwrap_or(0.0);
            let mut out: Vec<f64> = weights.iter().map(|w| w / total * (1.0 - p_end)).collect();
            out.push(p_end);
            out
        })
        .collect()
}

/// Restricts a script-level chain to a subset alphabet (`positions` index
/// into the script). Character mass is renormalized; word-end mass is kept.
pub fn restrict_chain(chain: &[Vec<f64>], positions: &[usize]) -> Vec<Vec<f64>> {
    let script_end = chain.len() - 1;
    positions
        .iter()
        .copied()
        .chain([script_end])
        .map(|r| {
            let end = chain[r][script_end];
            let total: f64 = positions.iter().map(|&c| chain[r][c]).sum();
            let mut row: Vec<f64> =
                positions.iter().map(|&c| chain[r][c] / total * (1.0 - end)).collect();
            row.push(end);
            row
        })
        .collect()
}

pub fn mix_chains(base: &[Vec<f64>], own: &[Vec<f64>], proximity: f64) -> Vec<Vec<f64>> {
    base.iter()
        .zip(own)
        .map(|(b, o)| {
            b.iter()
                .zip(o)
                .map(|(x, y)| proximity * x + (1.0 - proximity) * y)
                .collect()
        })
        .collect()
}

/// Phones that tend to close words, drawn once per family and shared by
/// every script.
pub fn final_phones(config: &FamilyConfig, seed: u64, phones: usize) -> Vec<bool> {
    let mut rng = stream(seed, "final-phones", 0);
    let k = ((config.final_fraction * phones as f64).round() as usize).clamp(1, phones.max(1));
    let mut flags = vec![false; phones];
    for i in sample_indices(&mut rng, phones, k.min(phones)) {
        flags[i] = true;
    }
    flags
}

fn end_probs(config: &FamilyConfig, finals: &[bool], positions: &[usize]) -> Vec<f64> {
    positions
        .iter()
        .map(|&p| if finals[p] { config.end_prob_final } else { config.end_prob_other })
        .collect()
}

/// Per-language chain drawn from the language's relatedness seed;
/// `positions` are the alphabet's indices in its script.
pub fn perturbation_chain(
    config: &FamilyConfig,
    finals: &[bool],
    positions: &[usize],
    relatedness_seed: u64,
) -> Vec<Vec<f64>> {
    random_chain(
        &end_probs(config, finals, positions),
        config.sharpness,
        &mut stream(relatedness_seed, "perturbation", 0),
    )
}

/// Shared chain of relation `index`, over the full character set of `script_len`.
pub fn relation_base_chain(
    config: &FamilyConfig,
    seed: u64,
    index: usize,
    finals: &[bool],
    script_len: usize,
) -> Vec<Vec<f64>> {
    let positions: Vec<usize> = (0..script_len).collect();
    random_chain(
        &end_probs(config, finals, &positions),
        config.sharpness,
        &mut stream(seed, "relation-base", index as u64),
    )
}

fn validate(config: &FamilyConfig) -> Result<()> {
    if config.feature_dim < 2 {
        return Err(Error::Config("feature_dim must be at least 2".into()));
    }
    if !(config.noise_sigma >= 0.0) {
        return Err(Error::Config("noise_sigma must be non-negative".into()));
    }
    let open_unit = |x: f64| 0.0 < x && x < 1.0;
    if !(open_unit(config.end_prob_final) && open_unit(config.end_prob_other)) {
        return Err(Error::Config("word-end probabilities must lie in (0, 1)".into()));
    }
    if !(0.0..=1.0).contains(&config.final_fraction) {
        return Err(Error::Config("final_fraction must lie in [0, 1]".into()));
    }
    config.frames_per_char.check("frames_per_char", false)?;
    config.word_len.check("word_len", false)?;
    config.words_per_utt.check("words_per_utt", false)?;
    if config.languages.is_empty() {
        return Err(Error::Config("family has no languages".into()));
    }
    let mut ids = HashSet::new();
    for lang in &config.languages {
        if !ids.insert(&lang.lang_id) {
            return Err(Error::Config(format!("duplicate language {}", lang.lang_id)));
        }
        if lang.alphabet.is_empty() {
            return Err(Error::Config(format!("language {} has an empty alphabet", lang.lang_id)));
        }
        let script = config
            .scripts
            .iter()
            .find(|s| s.name == lang.script)
            .ok_or_else(|| Error::Config(format!("language {}: unknown script {}", lang.lang_id, lang.script)))?;
        let mut seen = HashSet::new();
        for c in &lang.alphabet {
            if !script.chars.contains(c) || !seen.insert(c) || c.is_whitespace() {
                return Err(Error::Config(format!(
                    "language {}: character `{c}` is repeated or not in script {}",
                    lang.lang_id, script.name
                )));
            }
        }
    }
    let mut related = HashSet::new();
    for rel in &config.relations {
        if !(0.0..=1.0).contains(&rel.proximity) {
            return Err(Error::Config(format!("proximity {} outside [0, 1]", rel.proximity)));
        }
        let mut script = None;
        for m in &rel.members {
            let lang = config
                .languages
                .iter()
                .find(|l| &l.lang_id == m)
                .ok_or_else(|| Error::Config(format!("relation names unknown language {m}")))?;
            if !related.insert(m) {
                return Err(Error::Config(format!("language {m} is in more than one relation")));
            }
            if *script.get_or_insert(&lang.script) != &lang.script {
                return Err(Error::Config("related languages must share a script".into()));
            }
        }
    }
    Ok(())
}

/// Builds the language family. Pure in `(config, seed)`.
pub fn build_family(config: &FamilyConfig, seed: u64) -> Result<FamilySpec> {
    validate(config)?;
    let f = config.feature_dim;

    let phones = config.scripts.iter().map(|s| s.chars.len()).max().unwrap_or(0);
    let mut rng = stream(seed, "phones", 0);
    let phone_protos: Vec<Vec<f64>> = (0..phones)
        .map(|_| (0..f).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut prototypes = BTreeMap::new();
    for (si, script) in config.scripts.iter().enumerate() {
        let mut rng = stream(seed, "script-offset", si as u64);
        for (p, &c) in script.chars.iter().enumerate() {
            let proto: Vec<f32> = phone_protos[p]
                .iter()
                .map(|&x| (x + config.script_offset * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            if prototypes.insert(c, proto).is_some() {
                return Err(Error::Config(format!("character `{c}` appears in two scripts")));
            }
        }
    }

    let finals = final_phones(config, seed, phones);
    let mut languages = Vec::with_capacity(config.languages.len());
    for (li, lang) in config.languages.iter().enumerate() {
        let script = config.scripts.iter().find(|s| s.name == lang.script).unwrap();
        let relatedness_seed = derive_seed(seed, "language", li as u64);
        let positions: Vec<usize> = lang
            .alphabet
            .iter()
            .map(|c| script.chars.iter().position(|s| s == c).unwrap())
            .collect();
        let own = perturbation_chain(config, &finals, &positions, relatedness_seed);
        let transition = match config
            .relations
            .iter()
            .enumerate()
            .find(|(_, r)| r.members.contains(&lang.lang_id))
        {
            Some((ri, rel)) => {
                let base = relation_base_chain(config, seed, ri, &finals, script.chars.len());
                mix_chains(&restrict_chain(&base, &positions), &own, rel.proximity)
            }
            None => own,
        };
        languages.push(LanguageSpec {
            lang_id: lang.lang_id.clone(),
            script: lang.script.clone(),
            alphabet: lang.alphabet.clone(),
            transition,
            word_len_range: config.word_len,
            words_per_utt_range: config.words_per_utt,
            relatedness_seed,
        });
    }

    Ok(FamilySpec {
        languages,
        prototypes,
        feature_dim: f,
        noise_sigma: config.noise_sigma,
        frames_per_char: config.frames_per_char,
    })
}

/// Renders one frame block per character; spaces produce no frames.
pub fn render<R: Rng>(spec: &FamilySpec, transcript: &str, rng: &mut R) -> Result<FeatureMatrix> {
    let f = spec.feature_dim;
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let mut data = Vec::new();
    let mut frames = 0;
    for c in transcript.chars().filter(|c| *c != ' ') {
        let proto = spec
            .prototypes
            .get(&c)
            .ok_or_else(|| Error::Config(format!("no prototype for character `{c}`")))?;
        let d = spec.frames_per_char.sample(rng);
        for _ in 0..d {
            if spec.noise_sigma == 0.0 {
                data.extend_from_slice(proto);
            } else {
                data.extend(proto.iter().map(|&p| p + noise.sample(rng) as f32));
            }
        }
        frames += d;
    }
    FeatureMatrix::new(frames, f, data)
}

/// Samples a transcript from `lang` and renders its frames.
pub fn sample_utterance<R: Rng>(spec: &FamilySpec, lang: &str, rng: &mut R) -> Result<(String, FeatureMatrix)> {
    let language = spec.language(lang)?;
    let n_words = language.words_per_utt_range.sample(rng);
    let words: Vec<String> = (0..n_words).map(|_| language.sample_word(rng)).collect();
    let transcript = words.join(" ");
    let features = render(spec, &transcript, rng)?;
    Ok((transcript, features))
}

/// Per-word error probabilities of the simulated reference transcriber.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRates {
    pub sub: f64,
    pub del: f64,
    pub ins: f64,
}

impl ErrorRates {
    pub fn check(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(unit(self.sub) && unit(self.del) && unit(self.ins)) || self.sub + self.del > 1.0 {
            return Err(Error::Config(format!(
                "invalid error rates sub={} del={} ins={}",
                self.sub, self.del, self.ins
            )));
        }
        Ok(())
    }
}

/// Simulates an imperfect transcriber: each word is independently
/// substituted by a different word of the language, deleted, or kept, and
/// each surviving word may be followed by an inserted word.
pub fn reference_transcribe<R: Rng>(
    transcript: &str,
    rates: ErrorRates,
    language: &LanguageSpec,
    rng: &mut R,
) -> String {
    let mut out: Vec<String> = Vec::new();
    for word in crate::metrics::words(transcript) {
        let u: f64 = rng.gen();
        if u < rates.sub {
            let mut replacement = language.sample_word(rng);
            for _ in 0..32 {
                if replacement != word {
                    break;
                }
                replacement = language.sample_word(rng);
            }
            out.push(replacement);
        } else if u < rates.sub + rates.del {
            continue;
        } else {
            out.push(word.to_string());
        }
        if rng.gen::<f64>() < rates.ins {
            out.push(language.sample_word(rng));
        }
    }
    out.join(" ")
}

fn utt_stream_index(lang_index: usize, i: usize) -> u64 {
    ((lang_index as u64) << 32) | i as u64
}

/// Generates `counts[lang]` utterances per language into `out_dir`, one
/// feature file each, and returns their manifest (source `truth`). Ids are
/// `<split>-<lang>-<index>`; each utterance has its own random stream keyed
/// by `(seed, split, language, index)`.
pub fn generate_dataset(
    spec: &FamilySpec,
    counts: &BTreeMap<String, usize>,
    seed: u64,
    split: &str,
    out_dir: &Path,
) -> Result<Manifest> {
    for lang in counts.keys() {
        spec.language(lang)?;
    }
    let jobs: Vec<(usize, &str, usize)> = spec
        .languages
        .iter()
        .enumerate()
        .flat_map(|(li, l)| {
            let n = counts.get(&l.lang_id).copied().unwrap_or(0);
            (0..n).map(move |i| (li, l.lang_id.as_str(), i))
        })
        .collect();
    if jobs.is_empty() {
        return Ok(Manifest::default());
    }
    fs::create_dir_all(out_dir).map_err(|source| Error::Dataset {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let records = jobs
        .par_iter()
        .map(|&(li, lang, i)| {
            let mut rng = stream(seed, split, utt_stream_index(li, i));
            let (transcript, features) = sample_utterance(spec, lang, &mut rng)?;
            let utt_id = format!("{split}-{lang}-{i:06}");
            let feature_path = out_dir.join(format!("{utt_id}.feat"));
            features.write(&feature_path)?;
            Ok(UttRecord {
                utt_id,
                lang: lang.to_string(),
                feature_path,
                transcript,
                source: Source::Truth,
                certainty: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Manifest::new(records)
}

fn id_hash(id: &str) -> u64 {
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3))
}

/// Passes every transcript of a manifest through the reference transcriber.
pub fn reference_manifest(spec: &FamilySpec, manifest: &Manifest, rates: ErrorRates, seed: u64) -> Result<Manifest> {
    rates.check()?;
    let records = manifest
        .records()
        .iter()
        .map(|r| {
            let language = spec.language(&r.lang)?;
            let mut rng = stream(seed, "reference", id_hash(&r.utt_id));
            Ok(UttRecord {
                transcript: reference_transcribe(&r.transcript, rates, language, &mut rng),
                source: Source::Reference,
                certainty: None,
                ..r.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Manifest::new(records)
}

/// Uniform random subset of exactly `targets[lang]` records per language;
/// languages without a target are dropped. Output keeps manifest order.
pub fn subsample(manifest: &Manifest, targets: &BTreeMap<String, usize>, seed: u64) -> Result<Manifest> {
    let mut keep = vec![false; manifest.len()];
    for (lang, &target) in targets {
        let positions: Vec<usize> = manifest
            .records()
            .iter()
            .enumerate()
            .filter(|(_, r)| &r.lang == lang)
            .map(|(i, _)| i)
            .collect();
        if target > positions.len() {
            return Err(Error::Selection(format!(
                "language {lang}: requested {target} utterances, only {} available",
                positions.len()
            )));
        }
        let mut rng = stream(seed, "subsample", id_hash(lang));
        for k in sample_indices(&mut rng, positions.len(), target) {
            keep[positions[k]] = true;
        }
    }
    Manifest::new(
        manifest
            .records()
            .iter()
            .zip(keep)
            .filter(|(_, k)| *k)
            .map(|(r, _)| r.clone())
            .collect(),
    )
}

/// Nearest-prototype label of each frame, used to check noiseless renders.
pub fn nearest_prototype(spec: &FamilySpec, frame: &[f32]) -> char {
    spec.prototypes
        .iter()
        .map(|(c, p)| {
            let d: f32 = p.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum();
            (*c, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(c, _)| c)
        .unwrap()
}
