//! Greedy Transducer decoding with per-token log-probabilities, and the
//! utterance-level certainty used to rank pseudo-labels.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::synthcorpus::{FeatureMatrix, Manifest, Source, UttRecord};
use crate::tokenizer::{Vocab, BLANK_ID};
use crate::transducer::linalg::log_softmax;
use crate::transducer::Model;

pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 4;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeResult {
    pub token_ids: Vec<u32>,
    /// Log-probability (nats) of each emitted token at its emission step.
    pub token_logprobs: Vec<f64>,
    pub frames_consumed: usize,
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(model: &Model, features: &FeatureMatrix, max_symbols_per_frame: usize) -> Result<DecodeResult> {
    if max_symbols_per_frame == 0 {
        return Err(Error::Decode("max_symbols_per_frame must be at least 1".into()));
    }
    let enc = model.encode(features)?;
    let mut state = model.start_state();
    let mut out = DecodeResult::default();
    for t in 0..enc.frames {
        let mut emitted = 0;
        while emitted < max_symbols_per_frame {
            let mut logp = model.joint_logits(&enc, t, &state);
            log_softmax(&mut logp);
            let k = argmax(&logp);
            if k == BLANK_ID as usize {
                break;
            }
            out.token_ids.push(k as u32);
            out.token_logprobs.push(logp[k]);
            state = model.label_step(&state, k as u32);
            emitted += 1;
        }
        out.frames_consumed += 1;
    }
    Ok(out)
}

/// Sum of emitted-token log-probabilities; zero for an empty hypothesis.
pub fn certainty(result: &DecodeResult) -> f64 {
    result.token_logprobs.iter().sum()
}

/// Rounds to the six decimals kept in manifests, so in-memory and on-disk
/// rankings agree.
fn quantize(x: f64) -> f64 {
    let q = (x * 1e6).round() / 1e6;
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

/// Decodes one utterance to text and certainty.
pub fn transcribe(model: &Model, vocab: &Vocab, features: &FeatureMatrix) -> Result<(String, f64)> {
    let result = greedy_decode(model, features, DEFAULT_MAX_SYMBOLS_PER_FRAME)?;
    Ok((vocab.decode(&result.token_ids)?, certainty(&result)))
}

/// Re-transcribes every record with `model`, marking the output as
/// pseudo-labels from `stage_ref`. Order and ids are preserved.
pub fn batch_decode(model: &Model, manifest: &Manifest, vocab: &Vocab, stage_ref: &str) -> Result<Manifest> {
    if vocab.label_count() != model.arch().vocab_size {
        return Err(Error::Decode(format!(
            "vocab has {} labels but the model predicts {}",
            vocab.label_count(),
            model.arch().vocab_size
        )));
    }
    let records = manifest
        .records()
        .par_iter()
        .map(|r| {
            let features = FeatureMatrix::read(&r.feature_path)
                .map_err(|e| Error::Decode(format!("utterance {}: {e}", r.utt_id)))?;
            let (text, score) = transcribe(model, vocab, &features)
                .map_err(|e| Error::Decode(format!("utterance {}: {e}", r.utt_id)))?;
            Ok(UttRecord {
                transcript: text,
                source: Source::Pseudo(stage_ref.to_string()),
                certainty: Some(quantize(score)),
                ..r.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Manifest::new(records)
}
