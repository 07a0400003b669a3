//! Utterance manifests and their TSV serialization.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Where an utterance's transcript came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Source {
    Truth,
    Reference,
    Pseudo(String),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Truth => f.write_str("truth"),
            Source::Reference => f.write_str("reference"),
            Source::Pseudo(stage) => write!(f, "pseudo:{stage}"),
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truth" => Ok(Source::Truth),
            "reference" => Ok(Source::Reference),
            _ => match s.strip_prefix("pseudo:") {
                Some(stage) if !stage.is_empty() => Ok(Source::Pseudo(stage.to_string())),
                _ => Err(Error::Manifest(format!("unknown transcript source `{s}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UttRecord {
    pub utt_id: String,
    pub lang: String,
    pub feature_path: PathBuf,
    pub transcript: String,
    pub source: Source,
    /// Sum of emitted-token log-probabilities (nats); only for pseudo-labels.
    pub certainty: Option<f64>,
}

impl UttRecord {
    fn check(&self) -> Result<()> {
        let pseudo = matches!(self.source, Source::Pseudo(_));
        if pseudo != self.certainty.is_some() {
            return Err(Error::Manifest(format!(
                "record {}: certainty must be present exactly for pseudo-labels",
                self.utt_id
            )));
        }
        for (name, field) in [("utt_id", &self.utt_id), ("lang", &self.lang)] {
            if field.is_empty() || field.contains(['\t', '\n']) {
                return Err(Error::Manifest(format!(
                    "record {}: invalid {name} `{field}`",
                    self.utt_id
                )));
            }
        }
        if self.transcript.contains(['\t', '\n']) {
            return Err(Error::Manifest(format!(
                "record {}: transcript contains a tab or newline",
                self.utt_id
            )));
        }
        Ok(())
    }
}

/// Ordered list of utterance records with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    records: Vec<UttRecord>,
}

impl Manifest {
    pub fn new(records: Vec<UttRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.check()?;
            if !seen.insert(r.utt_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate utt_id {}", r.utt_id)));
            }
        }
        Ok(Manifest { records })
    }

    pub fn records(&self) -> &[UttRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<UttRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, utt_id: &str) -> Option<&UttRecord> {
        self.records.iter().find(|r| r.utt_id == utt_id)
    }

    /// Records of one language, in manifest order.
    pub fn filter_lang(&self, lang: &str) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|r| r.lang == lang).cloned().collect(),
        }
    }

    /// Concatenation; fails on duplicate ids.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Manifest>) -> Result<Manifest> {
        Manifest::new(parts.into_iter().flat_map(|m| m.records.iter().cloned()).collect())
    }

    /// Languages in order of first appearance.
    pub fn languages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.lang) {
                out.push(r.lang.clone());
            }
        }
        out
    }

    /// TSV text. Feature paths under `base` are written relative to it.
    pub fn to_tsv(&self, base: Option<&Path>) -> String {
        let mut out = String::new();
        for r in &self.records {
            let path = match base {
                Some(b) => relative_path(&r.feature_path, b),
                None => r.feature_path.clone(),
            };
            let certainty = r.certainty.map(|c| format!("{c:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.utt_id,
                r.lang,
                path.display(),
                r.transcript,
                r.source,
                certainty
            ));
        }
        out
    }

    /// Parses TSV text; relative feature paths are resolved against `base`.
    pub fn from_tsv(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(Error::Manifest(format!(
                    "line {}: expected 6 tab-separated fields, found {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let raw_path = PathBuf::from(fields[2]);
            let feature_path = match base {
                Some(b) if raw_path.is_relative() => b.join(raw_path),
                _ => raw_path,
            };
            let certainty = if fields[5].is_empty() {
                None
            } else {
                Some(fields[5].parse::<f64>().map_err(|e| {
                    Error::Manifest(format!("line {}: bad certainty: {e}", lineno + 1))
                })?)
            };
            records.push(UttRecord {
                utt_id: fields[0].to_string(),
                lang: fields[1].to_string(),
                feature_path,
                transcript: fields[3].to_string(),
                source: fields[4].parse()?,
                certainty,
            });
        }
        Manifest::new(records)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().filter(|p| !p.as_os_str().is_empty());
        let base = base.map(absolute);
        if let Some(dir) = &base {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_tsv(base.as_deref())).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(absolute);
        Manifest::from_tsv(&text, base.as_deref())
    }
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

fn normalize(p: &Path) -> Vec<Component<'_>> {
    let mut out: Vec<Component<'_>> = Vec::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir if matches!(out.last(), Some(Component::Normal(_))) => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

/// `path` expressed relative to directory `base`; unchanged if the two share
/// no root.
pub fn relative_path(path: &Path, base: &Path) -> PathBuf {
    let path_abs = absolute(path);
    let base_abs = absolute(base);
    let p = normalize(&path_abs);
    let b = normalize(&base_abs);
    if p.first() != b.first() {
        return path.to_path_buf();
    }
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &p[common..] {
        out.push(c.as_os_str());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, source: Source, certainty: Option<f64>) -> UttRecord {
        UttRecord {
            utt_id: id.into(),
            lang: "UKR".into(),
            feature_path: PathBuf::from(format!("/data/{id}.feat")),
            transcript: "аб вг".into(),
            source,
            certainty,
        }
    }

    #[test]
    fn rejects_duplicate_ids() {
        let r = rec("a", Source::Truth, None);
        assert!(Manifest::new(vec![r.clone(), r]).is_err());
    }

    #[test]
    fn certainty_iff_pseudo() {
        assert!(Manifest::new(vec![rec("a", Source::Truth, Some(-1.0))]).is_err());
        assert!(Manifest::new(vec![rec("a", Source::Pseudo("s".into()), None)]).is_err());
        assert!(Manifest::new(vec![rec("a", Source::Pseudo("s".into()), Some(-1.0))]).is_ok());
    }

    #[test]
    fn tsv_round_trip_preserves_order() {
        let m = Manifest::new(vec![
            rec("b", Source::Reference, None),
            rec("a", Source::Pseudo("5L-NW-U".into()), Some(-1.25)),
            rec("c", Source::Truth, None),
        ])
        .unwrap();
        let text = m.to_tsv(None);
        assert!(text.contains("\tpseudo:5L-NW-U\t-1.250000\n"));
        assert!(text.ends_with("\ttruth\t\n"));
        let back = Manifest::from_tsv(&text, None).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rec("a", Source::Truth, None);
        r.feature_path = dir.path().join("feats").join("a.feat");
        let m = Manifest::new(vec![r]).unwrap();
        let path = dir.path().join("m.tsv");
        m.write(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\tfeats/a.feat\t"));
        assert_eq!(Manifest::read(&path).unwrap(), m);
    }

    #[test]
    fn relative_path_walks_up() {
        assert_eq!(
            relative_path(Path::new("/a/b/c.feat"), Path::new("/a/d")),
            PathBuf::from("../b/c.feat")
        );
    }

    #[test]
    fn bad_lines_are_rejected() {
        assert!(Manifest::from_tsv("a\tb\n", None).is_err());
        assert!(Manifest::from_tsv("a\tUKR\tp\tt\tbogus\t\n", None).is_err());
    }
}
