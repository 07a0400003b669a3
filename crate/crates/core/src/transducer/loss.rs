//! Transducer negative log-likelihood over the alignment lattice, computed
//! with forward (alpha) and backward (beta) recursions in log space.

use super::linalg::log_add_exp;
use crate::error::{Error, Result};
use crate::tokenizer::BLANK_ID;

/// Joiner outputs `z[t, u, v]`, shape `frames × (labels+1) × (vocab+1)`,
/// with `v = 0` the blank.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLattice {
    frames: usize,
    states: usize,
    classes: usize,
    data: Vec<f64>,
}

impl LogitLattice {
    pub fn new(frames: usize, label_len: usize, vocab_size: usize, data: Vec<f64>) -> Result<Self> {
        let states = label_len + 1;
        let classes = vocab_size + 1;
        if data.len() != frames * states * classes {
            return Err(Error::Loss(format!(
                "lattice {frames}x{states}x{classes} given {} values",
                data.len()
            )));
        }
        Ok(LogitLattice {
            frames,
            states,
            classes,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn label_len(&self) -> usize {
        self.states - 1
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, t: usize, u: usize) -> &[f64] {
        let i = (t * self.states + u) * self.classes;
        &self.data[i..i + self.classes]
    }
}

/// Returns `(nll, d nll / d z)`.
pub fn transducer_loss(lattice: &LogitLattice, labels: &[u32]) -> Result<(f64, Vec<f64>)> {
    let (frames, states, classes) = (lattice.frames, lattice.states, lattice.classes);
    if frames == 0 {
        return Err(Error::Loss("lattice has zero frames".into()));
    }
    if labels.len() + 1 != states {
        return Err(Error::Loss(format!(
            "{} labels for a lattice with {} label states",
            labels.len(),
            states
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y == BLANK_ID || y as usize >= classes) {
        return Err(Error::Loss(format!("label {bad} is blank or out of range")));
    }
    let blank = BLANK_ID as usize;
    let mut logp = lattice.data.clone();
    let mut prob = vec![0.0; logp.len()];
    for (cell, p) in logp.chunks_exact_mut(classes).zip(prob.chunks_exact_mut(classes)) {
        let max = cell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (x, e) in cell.iter().zip(p.iter_mut()) {
            *e = (x - max).exp();
            sum += *e;
        }
        let log_norm = max + sum.ln();
        for (x, e) in cell.iter_mut().zip(p.iter_mut()) {
            *x -= log_norm;
            *e /= sum;
        }
    }
    let lp = |t: usize, u: usize, v: usize| logp[(t * states + u) * classes + v];
    let at = |t: usize, u: usize| t * states + u;
    let last_t = frames - 1;
    let last_u = states - 1;

    let mut alpha = vec![f64::NEG_INFINITY; frames * states];
    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..states {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = f64::NEG_INFINITY;
            if t > 0 {
                a = alpha[at(t - 1, u)] + lp(t - 1, u, blank);
            }
            if u > 0 {
                a = log_add_exp(a, alpha[at(t, u - 1)] + lp(t, u - 1, labels[u - 1] as usize));
            }
            alpha[at(t, u)] = a;
        }
    }
    let log_likelihood = alpha[at(last_t, last_u)] + lp(last_t, last_u, blank);

    let mut beta = vec![f64::NEG_INFINITY; frames * states];
    beta[at(last_t, last_u)] = lp(last_t, last_u, blank);
    for t in (0..frames).rev() {
        for u in (0..states).rev() {
            if t == last_t && u == last_u {
                continue;
            }
            let mut b = f64::NEG_INFINITY;
            if t < last_t {
                b = beta[at(t + 1, u)] + lp(t, u, blank);
            }
            if u < last_u {
                b = log_add_exp(b, beta[at(t, u + 1)] + lp(t, u, labels[u] as usize));
            }
            beta[at(t, u)] = b;
        }
    }

    let nll = -log_likelihood;
    let mut grad = vec![0.0; lattice.data.len()];
    for t in 0..frames {
        for u in 0..states {
            let base = at(t, u) * classes;
            let node = alpha[at(t, u)] + beta[at(t, u)] + nll;
            let occupancy = node.exp();
            for v in 0..classes {
                grad[base + v] = occupancy * prob[base + v];
            }
            let blank_next = if t < last_t {
                Some(beta[at(t + 1, u)])
            } else if u == last_u {
                Some(0.0)
            } else {
                None
            };
            if let Some(next) = blank_next {
                grad[base + blank] -= (alpha[at(t, u)] + lp(t, u, blank) + next + nll).exp();
            }
            if u < last_u {
                let y = labels[u] as usize;
                grad[base + y] -= (alpha[at(t, u)] + lp(t, u, y) + beta[at(t, u + 1)] + nll).exp();
            }
        }
    }
    Ok((nll, grad))
}
