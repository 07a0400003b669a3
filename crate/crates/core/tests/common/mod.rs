//! Independent reference implementations used as test oracles. They are
//! deliberately naive: exhaustive enumeration or recount-from-scratch.

#![allow(dead_code)]

use std::collections::BTreeMap;

use iplforge::transducer::Model;
use iplforge::synthcorpus::FeatureMatrix;
use iplforge::transducer::transducer_loss;

/// `log Σ exp` over a list, stable.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|x| x - lse).collect()
}

/// `-log P(labels)` by listing every monotone alignment path through a
/// `frames × (U+1) × classes` lattice. A path emits label `u` at `(t, u)`
/// (moving to `u+1`) or blank (moving to `t+1`) and ends with the blank at
/// `(T-1, U)`.
pub fn brute_force_nll(data: &[f64], frames: usize, labels: &[u32], classes: usize) -> f64 {
    let states = labels.len() + 1;
    let logp = |t: usize, u: usize| log_softmax(&data[(t * states + u) * classes..(t * states + u + 1) * classes]);
    let mut path_scores = Vec::new();
    // Each path is a sequence of moves; walk them with an explicit stack.
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, score)) = stack.pop() {
        let lp = logp(t, u);
        if t == frames - 1 && u == labels.len() {
            path_scores.push(score + lp[0]);
            continue;
        }
        if u < labels.len() {
            stack.push((t, u + 1, score + lp[labels[u] as usize]));
        }
        if t + 1 < frames {
            stack.push((t + 1, u, score + lp[0]));
        }
    }
    -log_sum_exp(&path_scores)
}

/// Number of alignment paths: C(T - 1 + U, U).
pub fn path_count(frames: usize, label_len: usize) -> u64 {
    let (n, k) = ((frames - 1 + label_len) as u64, label_len as u64);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Minimum number of word errors over every alignment of `a` against `b`,
/// found by exhaustive recursion (no memoization).
pub fn enumerate_edit_distance(a: &[&str], b: &[&str]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = enumerate_edit_distance(ra, rb) + usize::from(x != y);
            let del = enumerate_edit_distance(ra, b) + 1;
            let ins = enumerate_edit_distance(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

/// Every word sequence of length `0..=max_len` over `alphabet`.
pub fn all_sequences<'a>(alphabet: &[&'a str], max_len: usize) -> Vec<Vec<&'a str>> {
    let mut out = vec![Vec::new()];
    let mut frontier: Vec<Vec<&str>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for w in alphabet {
                let mut t = s.clone();
                t.push(*w);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// BPE by recounting every adjacent pair from the current segmentation on
/// each iteration. Returns the merge list and the final token count.
pub fn brute_force_bpe(corpus: &str, vocab_size: usize) -> (Vec<(String, String)>, usize) {
    let mut words: Vec<Vec<String>> = corpus
        .split_whitespace()
        .map(|w| {
            w.chars()
                .enumerate()
                .map(|(i, c)| if i == 0 { format!("\u{2581}{c}") } else { c.to_string() })
                .collect()
        })
        .collect();
    let mut tokens: Vec<String> = vec!["<blank>".into(), "<unk>".into()];
    let mut chars: Vec<char> = corpus.chars().filter(|c| !c.is_whitespace()).collect();
    chars.sort();
    chars.dedup();
    for c in chars {
        tokens.push(c.to_string());
        tokens.push(format!("\u{2581}{c}"));
    }
    let mut merges = Vec::new();
    while tokens.len() < vocab_size {
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for w in &words {
            for i in 1..w.len() {
                *counts.entry((w[i - 1].clone(), w[i].clone())).or_default() += 1;
            }
        }
        // Highest count; among equals the smallest pair (BTreeMap order).
        let Some((pair, count)) = counts.iter().fold(None::<(&(String, String), usize)>, |best, (p, &c)| {
            match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((p, c)),
            }
        }) else {
            break;
        };
        if count < 2 {
            break;
        }
        let (l, r) = pair.clone();
        for w in &mut words {
            let mut out = Vec::new();
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                    out.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    out.push(w[i].clone());
                    i += 1;
                }
            }
            *w = out;
        }
        let merged = format!("{l}{r}");
        if !tokens.contains(&merged) {
            tokens.push(merged);
        }
        merges.push((l, r));
    }
    (merges, tokens.len())
}

/// Central finite difference of the Transducer loss in parameter `i`.
pub fn central_difference(model: &Model, feats: &FeatureMatrix, labels: &[u32], i: usize, step: f64) -> f64 {
    let loss = |m: &Model| transducer_loss(&m.forward(feats, labels).unwrap(), labels).unwrap().0;
    let mut plus = model.clone();
    plus.params_mut()[i] += step;
    let mut minus = model.clone();
    minus.params_mut()[i] -= step;
    (loss(&plus) - loss(&minus)) / (2.0 * step)
}

/// Row-major features with entries uniform in `[-1, 1)` from a simple LCG,
/// independent of the library's RNG streams.
pub fn lcg_features(frames: usize, dim: usize, seed: u64) -> FeatureMatrix {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..frames * dim)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f64 / (1u64 << 24) as f64 * 2.0 - 1.0) as f32
        })
        .collect();
    FeatureMatrix::new(frames, dim, data).unwrap()
}
