//! Append-only record of trained stages: `registry.tsv` under the run
//! directory plus one best checkpoint per stage.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::synthcorpus::relative_path;
use crate::tokenizer::Vocab;
use crate::transducer::{read_checkpoint, write_checkpoint, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub stage_ref: String,
    pub tokenizer_ref: String,
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub best_step: usize,
    pub dev_wer: f64,
}

#[derive(Debug)]
pub struct Registry {
    root: PathBuf,
    entries: Vec<(RegistryEntry, Model, Vocab)>,
}

const FILE: &str = "registry.tsv";

impl Registry {
    /// Starts an empty registry in `root`, replacing any previous index.
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(FILE);
        fs::write(&path, "").map_err(|e| Error::io(&path, e))?;
        Ok(Registry { root: root.to_path_buf(), entries: Vec::new() })
    }

    /// Loads an existing registry with its checkpoints and vocabularies.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Curriculum(format!("{}:{}: malformed registry line", path.display(), i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let entry = RegistryEntry {
                stage_ref: f[0].to_string(),
                tokenizer_ref: f[1].to_string(),
                checkpoint: root.join(f[2]),
                vocab: root.join(f[3]),
                best_step: f[4].parse().map_err(|_| bad())?,
                dev_wer: f[5].parse().map_err(|_| bad())?,
            };
            let model = read_checkpoint(&entry.checkpoint)?;
            let vocab = Vocab::read(&entry.vocab)?;
            entries.push((entry, model, vocab));
        }
        Ok(Registry { root: root.to_path_buf(), entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes the checkpoint and appends the index line. A stage ref can be
    /// registered only once.
    pub fn register(&mut self, entry: RegistryEntry, model: Model, vocab: Vocab) -> Result<()> {
        if self.get(&entry.stage_ref).is_some() {
            return Err(Error::Curriculum(format!("stage `{}` is already registered", entry.stage_ref)));
        }
        write_checkpoint(&model, &entry.checkpoint)?;
        let line = format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\n",
            entry.stage_ref,
            entry.tokenizer_ref,
            relative_path(&entry.checkpoint, &self.root).display(),
            relative_path(&entry.vocab, &self.root).display(),
            entry.best_step,
            entry.dev_wer
        );
        let path = self.root.join(FILE);
        OpenOptions::new()
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| Error::io(&path, e))?;
        self.entries.push((entry, model, vocab));
        Ok(())
    }

    pub fn get(&self, stage_ref: &str) -> Option<(&RegistryEntry, &Model, &Vocab)> {
        self.entries
            .iter()
            .find(|(e, _, _)| e.stage_ref == stage_ref)
            .map(|(e, m, v)| (e, m, v))
    }

    pub fn entries(&self) -> Vec<&RegistryEntry> {
        self.entries.iter().map(|(e, _, _)| e).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
