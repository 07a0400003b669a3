//! Minibatch training with adaptive moments, periodic checkpoints, and
//! selection of the checkpoint with the lowest dev WER.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::decoder::transcribe;
use crate::error::{Error, Result};
use crate::metrics::corpus_wer;
use crate::rng::stream;
use crate::synthcorpus::{relative_path, FeatureMatrix, Manifest};
use crate::tokenizer::Vocab;
use crate::transducer::{write_checkpoint, Model};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip_norm: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip_norm: 5.0,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| 0.0 < x && x < 1.0;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::Config(format!(
                "need learning_rate > 0 and betas in (0, 1): {self:?}"
            )));
        }
        if !(self.epsilon > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("epsilon and grad_clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub step: usize,
    pub path: PathBuf,
    pub dev_wer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub checkpoints: Vec<CheckpointRecord>,
    pub best_step: usize,
    pub best_dev_wer: f64,
}

impl TrainReport {
    /// `step<TAB>checkpoint<TAB>dev_wer` rows and a `best` footer.
    pub fn to_tsv(&self, base: Option<&Path>) -> String {
        let mut out = String::new();
        for c in &self.checkpoints {
            let path = base.map_or_else(|| c.path.clone(), |b| relative_path(&c.path, b));
            let _ = writeln!(out, "{}\t{}\t{:.6}", c.step, path.display(), c.dev_wer);
        }
        let _ = writeln!(out, "best\t{}\t{:.6}", self.best_step, self.best_dev_wer);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().filter(|p| !p.as_os_str().is_empty());
        fs::write(path, self.to_tsv(base)).map_err(|e| Error::io(path, e))
    }

    pub fn best_checkpoint(&self) -> Option<&CheckpointRecord> {
        self.checkpoints.iter().find(|c| c.step == self.best_step)
    }
}

/// An utterance held in memory for training or evaluation.
#[derive(Debug, Clone)]
pub struct LoadedUtt {
    pub utt_id: String,
    pub features: FeatureMatrix,
    pub transcript: String,
}

pub fn load_manifest(manifest: &Manifest) -> Result<Vec<LoadedUtt>> {
    manifest
        .records()
        .par_iter()
        .map(|r| {
            Ok(LoadedUtt {
                utt_id: r.utt_id.clone(),
                features: FeatureMatrix::read(&r.feature_path)?,
                transcript: r.transcript.clone(),
            })
        })
        .collect()
}

/// Corpus WER of greedy transcripts against in-memory references.
pub fn evaluate_loaded(model: &Model, utts: &[LoadedUtt], vocab: &Vocab) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::Metric("cannot evaluate on an empty manifest".into()));
    }
    let pairs = utts
        .par_iter()
        .map(|u| Ok((u.transcript.clone(), transcribe(model, vocab, &u.features)?.0)))
        .collect::<Result<Vec<_>>>()?;
    corpus_wer(&pairs)
}

/// Greedy-decodes every record and scores it against the manifest transcripts.
pub fn evaluate(model: &Model, manifest: &Manifest, vocab: &Vocab) -> Result<f64> {
    if manifest.is_empty() {
        return Err(Error::Metric("cannot evaluate on an empty manifest".into()));
    }
    evaluate_loaded(model, &load_manifest(manifest)?, vocab)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Scales `grad` so its L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

struct Example {
    utt_id: String,
    features: FeatureMatrix,
    labels: Vec<u32>,
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

/// Trains `model` and returns the checkpoint with the lowest dev WER
/// (earliest on ties). Checkpoints are written to `out_dir` at step 0,
/// every `eval_every` steps, and at the final step.
pub fn train(
    model: &Model,
    train_manifest: &Manifest,
    dev_manifest: &Manifest,
    vocab: &Vocab,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if train_manifest.is_empty() {
        return Err(Error::Config("training manifest is empty".into()));
    }
    if vocab.label_count() != model.arch().vocab_size {
        return Err(Error::Config(format!(
            "vocab has {} labels but the model predicts {}",
            vocab.label_count(),
            model.arch().vocab_size
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let dev = load_manifest(dev_manifest)?;
    let examples: Vec<Example> = load_manifest(train_manifest)?
        .into_iter()
        .map(|u| Example {
            labels: vocab.encode(&u.transcript),
            utt_id: u.utt_id,
            features: u.features,
        })
        .collect();

    let mut current = model.clone();
    let mut best = current.clone();
    let mut report = TrainReport {
        checkpoints: Vec::new(),
        best_step: 0,
        best_dev_wer: f64::INFINITY,
    };
    let record = |m: &Model, step: usize, report: &mut TrainReport, best: &mut Model| -> Result<()> {
        let path = checkpoint_path(out_dir, step);
        write_checkpoint(m, &path)?;
        let dev_wer = evaluate_loaded(m, &dev, vocab)?;
        log::info!("step {step}: dev WER {dev_wer:.4}");
        if dev_wer < report.best_dev_wer {
            report.best_dev_wer = dev_wer;
            report.best_step = step;
            *best = m.clone();
        }
        report.checkpoints.push(CheckpointRecord { step, path, dev_wer });
        Ok(())
    };
    record(&current, 0, &mut report, &mut best)?;

    let mut adam = Adam::new(current.params().len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut loss_acc = 0.0;
    let mut loss_count = 0usize;
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut stream(cfg.seed, "shuffle", epoch));
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let results = batch
            .par_iter()
            .map(|&i| current.loss_and_gradient(&examples[i].features, &examples[i].labels))
            .collect::<Result<Vec<_>>>()?;
        let mut grad = vec![0.0; current.params().len()];
        let mut batch_loss = 0.0;
        for (nll, g) in &results {
            batch_loss += nll;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                utt_ids: batch.iter().map(|&i| examples[i].utt_id.clone()).collect(),
            });
        }
        clip_global_norm(&mut grad, cfg.grad_clip_norm);
        adam.update(current.params_mut(), &grad, cfg);
        loss_acc += batch_loss;
        loss_count += batch.len();
        if step % cfg.eval_every == 0 || step == cfg.steps {
            log::debug!("step {step}: mean train nll {:.4}", loss_acc / loss_count as f64);
            loss_acc = 0.0;
            loss_count = 0;
            record(&current, step, &mut report, &mut best)?;
        }
    }
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm <= 1.0 + 1e-9);
        let mut small = vec![0.1, 0.1];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.1]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(2);
        let mut p = vec![1.0, -1.0];
        adam.update(&mut p, &[0.5, -2.0], &cfg);
        // Bias-corrected first step is lr * sign(g) up to epsilon.
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert!(adam.m.iter().chain(&adam.v).all(|x| x.is_finite()));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { beta1: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { grad_clip_norm: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn report_tsv_has_footer() {
        let report = TrainReport {
            checkpoints: vec![
                CheckpointRecord { step: 0, path: "/r/step-000000.ckpt".into(), dev_wer: 1.0 },
                CheckpointRecord { step: 10, path: "/r/step-000010.ckpt".into(), dev_wer: 0.5 },
            ],
            best_step: 10,
            best_dev_wer: 0.5,
        };
        let tsv = report.to_tsv(Some(Path::new("/r")));
        assert_eq!(tsv, "0\tstep-000000.ckpt\t1.000000\n10\tstep-000010.ckpt\t0.500000\nbest\t10\t0.500000\n");
        assert_eq!(report.best_checkpoint().unwrap().step, 10);
    }
}
