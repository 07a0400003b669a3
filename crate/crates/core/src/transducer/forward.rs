//! Forward pass to the logit lattice, and exact reverse-mode gradients.

use super::linalg::{add_assign, affine, gemm, matvec_acc, matvec_t_acc, outer_acc, View};
use super::loss::LogitLattice;
use super::{Model, Param};
use crate::error::{Error, Result};
use crate::synthcorpus::FeatureMatrix;
use crate::tokenizer::BLANK_ID;

/// Acoustic encoder output for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub frames: usize,
    /// `frames × E`
    pub hidden: Vec<f64>,
    /// `frames × J`: encoder side of the joiner, `W_e · h_t`.
    pub joint: Vec<f64>,
}

/// Label-encoder state after consuming a label prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelState {
    /// `H`
    pub hidden: Vec<f64>,
    /// `J`: label side of the joiner, `W_l · g_u`.
    pub joint: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    input: Vec<f64>,
    act: Vec<f64>,
}

#[derive(Debug, Clone)]
struct AttnCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct EncoderCache {
    conv: [ConvCache; 2],
    attn: Option<AttnCache>,
    proj_input: Vec<f64>,
}

/// Everything `backward` needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    enc: EncoderCache,
    enc_out: EncoderOutput,
    tokens: Vec<u32>,
    label_hidden: Vec<f64>,
    joint_hidden: Vec<f64>,
    pub lattice: LogitLattice,
}

impl Model {
    fn check_features(&self, features: &FeatureMatrix) -> Result<()> {
        if features.dim() != self.arch.feature_dim {
            return Err(Error::Model(format!(
                "feature dimension {} does not match model ({})",
                features.dim(),
                self.arch.feature_dim
            )));
        }
        if features.frames() == 0 {
            return Err(Error::Model("utterance has no frames".into()));
        }
        Ok(())
    }

    fn downsample(&self, features: &FeatureMatrix) -> Vec<f64> {
        let f = self.arch.feature_dim;
        let k = self.arch.downsample_factor;
        let frames = self.arch.encoded_frames(features.frames());
        let mut out = vec![0.0; frames * f];
        for tau in 0..frames {
            let lo = tau * k;
            let hi = (lo + k).min(features.frames());
            let dst = &mut out[tau * f..(tau + 1) * f];
            for t in lo..hi {
                for (d, &x) in dst.iter_mut().zip(features.row(t)) {
                    *d += x as f64;
                }
            }
            let n = (hi - lo) as f64;
            dst.iter_mut().for_each(|d| *d /= n);
        }
        out
    }

    fn conv_forward(&self, w: Param, b: Param, x: &[f64], frames: usize) -> (Vec<f64>, ConvCache) {
        let f = self.arch.feature_dim;
        let weights = self.block(w);
        let bias = self.block(b);
        let mut act = vec![0.0; frames * f];
        for tau in 0..frames {
            let pre = &mut act[tau * f..(tau + 1) * f];
            pre.copy_from_slice(bias);
            for o in 0..3 {
                let src = tau as isize + o as isize - 1;
                if src < 0 || src as usize >= frames {
                    continue;
                }
                let src = src as usize;
                matvec_acc(&weights[o * f * f..(o + 1) * f * f], &x[src * f..(src + 1) * f], pre);
            }
            pre.iter_mut().for_each(|p| *p = p.tanh());
        }
        let out: Vec<f64> = x.iter().zip(&act).map(|(a, b)| a + b).collect();
        (
            out,
            ConvCache {
                input: x.to_vec(),
                act,
            },
        )
    }

    fn attn_forward(&self, y: &[f64], frames: usize) -> (Vec<f64>, AttnCache) {
        let f = self.arch.feature_dim;
        let project = |p: Param| {
            let w = self.block(p);
            let mut out = vec![0.0; frames * f];
            for t in 0..frames {
                affine(w, None, &y[t * f..(t + 1) * f], &mut out[t * f..(t + 1) * f]);
            }
            out
        };
        let q = project(Param::AttnQ);
        let k = project(Param::AttnK);
        let v = project(Param::AttnV);
        let scale = 1.0 / (f as f64).sqrt();
        let mut probs = vec![0.0; frames * frames];
        let mut out = y.to_vec();
        for i in 0..frames {
            let row = &mut probs[i * frames..(i + 1) * frames];
            let qi = &q[i * f..(i + 1) * f];
            for (j, s) in row.iter_mut().enumerate() {
                *s = scale * qi.iter().zip(&k[j * f..(j + 1) * f]).map(|(a, b)| a * b).sum::<f64>();
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            row.iter_mut().for_each(|s| *s /= total);
            let oi = &mut out[i * f..(i + 1) * f];
            for (j, &p) in row.iter().enumerate() {
                for (o, vj) in oi.iter_mut().zip(&v[j * f..(j + 1) * f]) {
                    *o += p * vj;
                }
            }
        }
        (
            out,
            AttnCache {
                input: y.to_vec(),
                q,
                k,
                v,
                probs,
            },
        )
    }

    fn encode_cached(&self, features: &FeatureMatrix) -> Result<(EncoderOutput, EncoderCache)> {
        self.check_features(features)?;
        let (e, j) = (self.arch.encoder_dim, self.arch.joiner_dim);
        let f = self.arch.feature_dim;
        let frames = self.arch.encoded_frames(features.frames());
        let x0 = self.downsample(features);
        let (x1, c0) = self.conv_forward(Param::Conv0W, Param::Conv0B, &x0, frames);
        let (x2, c1) = self.conv_forward(Param::Conv1W, Param::Conv1B, &x1, frames);
        let (x3, attn) = if self.arch.use_attention {
            let (out, cache) = self.attn_forward(&x2, frames);
            (out, Some(cache))
        } else {
            (x2, None)
        };
        let mut hidden = vec![0.0; frames * e];
        let mut joint = vec![0.0; frames * j];
        let (pw, pb, we) = (self.block(Param::ProjW), self.block(Param::ProjB), self.block(Param::JoinWe));
        for t in 0..frames {
            affine(pw, Some(pb), &x3[t * f..(t + 1) * f], &mut hidden[t * e..(t + 1) * e]);
            affine(we, None, &hidden[t * e..(t + 1) * e], &mut joint[t * j..(t + 1) * j]);
        }
        Ok((
            EncoderOutput { frames, hidden, joint },
            EncoderCache {
                conv: [c0, c1],
                attn,
                proj_input: x3,
            },
        ))
    }

    /// Runs the acoustic encoder alone.
    pub fn encode(&self, features: &FeatureMatrix) -> Result<EncoderOutput> {
        self.encode_cached(features).map(|(out, _)| out)
    }

    fn rnn_step(&self, prev: Option<&[f64]>, token: u32) -> Vec<f64> {
        let h = self.arch.label_dim;
        let embed = &self.block(Param::Embed)[token as usize * h..(token as usize + 1) * h];
        let mut g = vec![0.0; h];
        affine(self.block(Param::RnnWx), Some(self.block(Param::RnnB)), embed, &mut g);
        if let Some(prev) = prev {
            matvec_acc(self.block(Param::RnnWh), prev, &mut g);
        }
        g.iter_mut().for_each(|x| *x = x.tanh());
        g
    }

    fn label_state(&self, hidden: Vec<f64>) -> LabelState {
        let mut joint = vec![0.0; self.arch.joiner_dim];
        affine(self.block(Param::JoinWl), None, &hidden, &mut joint);
        LabelState { hidden, joint }
    }

    /// State after the start symbol (the blank embedding).
    pub fn start_state(&self) -> LabelState {
        self.label_state(self.rnn_step(None, BLANK_ID))
    }

    pub fn label_step(&self, state: &LabelState, token: u32) -> LabelState {
        self.label_state(self.rnn_step(Some(&state.hidden), token))
    }

    /// Joiner hidden activation for one lattice cell.
    fn joint_hidden(&self, enc_joint: &[f64], label_joint: &[f64], out: &mut [f64]) {
        let b = self.block(Param::JoinB);
        for ((o, (a, l)), bias) in out.iter_mut().zip(enc_joint.iter().zip(label_joint)).zip(b) {
            *o = (a + l + bias).tanh();
        }
    }

    /// Joiner logits (`V + 1`, blank first) for frame `t` and a label state.
    pub fn joint_logits(&self, enc: &EncoderOutput, t: usize, state: &LabelState) -> Vec<f64> {
        let j = self.arch.joiner_dim;
        let mut hid = vec![0.0; j];
        self.joint_hidden(&enc.joint[t * j..(t + 1) * j], &state.joint, &mut hid);
        let mut z = vec![0.0; self.arch.classes()];
        affine(self.block(Param::JoinWo), Some(self.block(Param::JoinBo)), &hid, &mut z);
        z
    }

    fn check_labels(&self, labels: &[u32]) -> Result<()> {
        for &y in labels {
            if y == BLANK_ID || y as usize > self.arch.vocab_size {
                return Err(Error::Model(format!(
                    "label {y} is blank or outside 1..={}",
                    self.arch.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Full forward pass, keeping the intermediates for `backward`.
    pub fn forward_cached(&self, features: &FeatureMatrix, labels: &[u32]) -> Result<ForwardCache> {
        self.check_labels(labels)?;
        let (enc_out, enc) = self.encode_cached(features)?;
        let (h, j, c) = (self.arch.label_dim, self.arch.joiner_dim, self.arch.classes());
        let states = labels.len() + 1;
        let tokens: Vec<u32> = std::iter::once(BLANK_ID).chain(labels.iter().copied()).collect();

        let mut label_hidden = Vec::with_capacity(states * h);
        let mut label_joint = vec![0.0; states * j];
        let mut prev: Option<Vec<f64>> = None;
        for (u, &tok) in tokens.iter().enumerate() {
            let g = self.rnn_step(prev.as_deref(), tok);
            affine(self.block(Param::JoinWl), None, &g, &mut label_joint[u * j..(u + 1) * j]);
            label_hidden.extend_from_slice(&g);
            prev = Some(g);
        }

        let frames = enc_out.frames;
        let mut joint_hidden = vec![0.0; frames * states * j];
        let mut logits = vec![0.0; frames * states * c];
        let (wo, bo) = (self.block(Param::JoinWo), self.block(Param::JoinBo));
        for t in 0..frames {
            for u in 0..states {
                let cell = t * states + u;
                let hid = &mut joint_hidden[cell * j..(cell + 1) * j];
                self.joint_hidden(&enc_out.joint[t * j..(t + 1) * j], &label_joint[u * j..(u + 1) * j], hid);
            }
        }
        for row in logits.chunks_exact_mut(c) {
            row.copy_from_slice(bo);
        }
        let cells = frames * states;
        gemm(View::new(&joint_hidden, cells, j), View::new(wo, c, j).t(), 1.0, &mut logits);
        Ok(ForwardCache {
            enc,
            enc_out,
            tokens,
            label_hidden,
            joint_hidden,
            lattice: LogitLattice::new(frames, labels.len(), self.arch.vocab_size, logits)?,
        })
    }

    /// Logit lattice `z[t, u, v]` of shape `T' × (U+1) × (V+1)`.
    pub fn forward(&self, features: &FeatureMatrix, labels: &[u32]) -> Result<LogitLattice> {
        self.forward_cached(features, labels).map(|c| c.lattice)
    }

    /// Gradient of `Σ lattice_grad · z` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, lattice_grad: &[f64]) -> Vec<f64> {
        let a = &self.arch;
        let (f, e, h, j, c) = (a.feature_dim, a.encoder_dim, a.label_dim, a.joiner_dim, a.classes());
        let frames = cache.enc_out.frames;
        let states = cache.tokens.len();
        assert_eq!(lattice_grad.len(), frames * states * c, "lattice gradient shape");
        let mut grad = vec![0.0; self.layout.total()];
        let lay = &self.layout;

        // Joiner.
        let wo = self.block(Param::JoinWo);
        let mut d_enc_joint = vec![0.0; frames * j];
        let mut d_label_joint = vec![0.0; states * j];
        {
            let cells = frames * states;
            let d_z = View::new(lattice_grad, cells, c);
            let mut d_wo = vec![0.0; c * j];
            gemm(d_z.t(), View::new(&cache.joint_hidden, cells, j), 0.0, &mut d_wo);
            let mut d_bo = vec![0.0; c];
            for dz in lattice_grad.chunks_exact(c) {
                add_assign(&mut d_bo, dz);
            }
            let mut d_hid = vec![0.0; cells * j];
            gemm(d_z, View::new(wo, c, j), 0.0, &mut d_hid);
            let mut d_b = vec![0.0; j];
            for t in 0..frames {
                for u in 0..states {
                    let cell = t * states + u;
                    let hid = &cache.joint_hidden[cell * j..(cell + 1) * j];
                    let dh = &mut d_hid[cell * j..(cell + 1) * j];
                    for (d, hv) in dh.iter_mut().zip(hid) {
                        *d *= 1.0 - hv * hv;
                    }
                    add_assign(&mut d_b, dh);
                    add_assign(&mut d_enc_joint[t * j..(t + 1) * j], dh);
                    add_assign(&mut d_label_joint[u * j..(u + 1) * j], dh);
                }
            }
            grad[lay.range(Param::JoinWo)].copy_from_slice(&d_wo);
            grad[lay.range(Param::JoinBo)].copy_from_slice(&d_bo);
            grad[lay.range(Param::JoinB)].copy_from_slice(&d_b);
        }

        // Label encoder, back through time.
        {
            let wl = self.block(Param::JoinWl);
            let wx = self.block(Param::RnnWx);
            let wh = self.block(Param::RnnWh);
            let embed = self.block(Param::Embed);
            let mut d_wl = vec![0.0; j * h];
            let mut d_wx = vec![0.0; h * h];
            let mut d_wh = vec![0.0; h * h];
            let mut d_rb = vec![0.0; h];
            let mut d_embed = vec![0.0; c * h];
            let mut carry = vec![0.0; h];
            for u in (0..states).rev() {
                let g = &cache.label_hidden[u * h..(u + 1) * h];
                let dlj = &d_label_joint[u * j..(u + 1) * j];
                outer_acc(&mut d_wl, dlj, g);
                let mut dg = std::mem::replace(&mut carry, vec![0.0; h]);
                matvec_t_acc(wl, dlj, &mut dg);
                let dpre: Vec<f64> = dg.iter().zip(g).map(|(d, gv)| d * (1.0 - gv * gv)).collect();
                add_assign(&mut d_rb, &dpre);
                let tok = cache.tokens[u] as usize;
                outer_acc(&mut d_wx, &dpre, &embed[tok * h..(tok + 1) * h]);
                matvec_t_acc(wx, &dpre, &mut d_embed[tok * h..(tok + 1) * h]);
                if u > 0 {
                    outer_acc(&mut d_wh, &dpre, &cache.label_hidden[(u - 1) * h..u * h]);
                    matvec_t_acc(wh, &dpre, &mut carry);
                }
            }
            grad[lay.range(Param::JoinWl)].copy_from_slice(&d_wl);
            grad[lay.range(Param::RnnWx)].copy_from_slice(&d_wx);
            grad[lay.range(Param::RnnWh)].copy_from_slice(&d_wh);
            grad[lay.range(Param::RnnB)].copy_from_slice(&d_rb);
            grad[lay.range(Param::Embed)].copy_from_slice(&d_embed);
        }

        // Encoder: joiner input map, output projection.
        let mut d_x = vec![0.0; frames * f];
        {
            let we = self.block(Param::JoinWe);
            let pw = self.block(Param::ProjW);
            let mut d_we = vec![0.0; j * e];
            let mut d_pw = vec![0.0; e * f];
            let mut d_pb = vec![0.0; e];
            let mut dh = vec![0.0; e];
            for t in 0..frames {
                let dej = &d_enc_joint[t * j..(t + 1) * j];
                outer_acc(&mut d_we, dej, &cache.enc_out.hidden[t * e..(t + 1) * e]);
                dh.fill(0.0);
                matvec_t_acc(we, dej, &mut dh);
                outer_acc(&mut d_pw, &dh, &cache.enc.proj_input[t * f..(t + 1) * f]);
                add_assign(&mut d_pb, &dh);
                matvec_t_acc(pw, &dh, &mut d_x[t * f..(t + 1) * f]);
            }
            grad[lay.range(Param::JoinWe)].copy_from_slice(&d_we);
            grad[lay.range(Param::ProjW)].copy_from_slice(&d_pw);
            grad[lay.range(Param::ProjB)].copy_from_slice(&d_pb);
        }

        if let Some(attn) = &cache.enc.attn {
            d_x = self.attn_backward(attn, &d_x, frames, &mut grad);
        }
        for (layer, (w, b)) in [(1, (Param::Conv1W, Param::Conv1B)), (0, (Param::Conv0W, Param::Conv0B))] {
            d_x = self.conv_backward(&cache.enc.conv[layer], w, b, &d_x, frames, &mut grad);
        }
        grad
    }

    fn attn_backward(&self, cache: &AttnCache, d_out: &[f64], frames: usize, grad: &mut [f64]) -> Vec<f64> {
        let f = self.arch.feature_dim;
        let scale = 1.0 / (f as f64).sqrt();
        let mut d_y = d_out.to_vec();
        let mut d_q = vec![0.0; frames * f];
        let mut d_k = vec![0.0; frames * f];
        let mut d_v = vec![0.0; frames * f];
        let mut d_p = vec![0.0; frames];
        for i in 0..frames {
            let doi = &d_out[i * f..(i + 1) * f];
            let probs = &cache.probs[i * frames..(i + 1) * frames];
            for jx in 0..frames {
                let vj = &cache.v[jx * f..(jx + 1) * f];
                d_p[jx] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                for (dv, d) in d_v[jx * f..(jx + 1) * f].iter_mut().zip(doi) {
                    *dv += probs[jx] * d;
                }
            }
            let mean: f64 = probs.iter().zip(&d_p).map(|(p, d)| p * d).sum();
            for jx in 0..frames {
                let ds = probs[jx] * (d_p[jx] - mean) * scale;
                if ds == 0.0 {
                    continue;
                }
                for m in 0..f {
                    d_q[i * f + m] += ds * cache.k[jx * f + m];
                    d_k[jx * f + m] += ds * cache.q[i * f + m];
                }
            }
        }
        for (p, d) in [(Param::AttnQ, &d_q), (Param::AttnK, &d_k), (Param::AttnV, &d_v)] {
            let w = self.block(p);
            let r = self.layout.range(p);
            for t in 0..frames {
                outer_acc(&mut grad[r.clone()], &d[t * f..(t + 1) * f], &cache.input[t * f..(t + 1) * f]);
                matvec_t_acc(w, &d[t * f..(t + 1) * f], &mut d_y[t * f..(t + 1) * f]);
            }
        }
        d_y
    }

    fn conv_backward(
        &self,
        cache: &ConvCache,
        w: Param,
        b: Param,
        d_out: &[f64],
        frames: usize,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let f = self.arch.feature_dim;
        let weights = self.block(w);
        let mut d_x = d_out.to_vec();
        let wr = self.layout.range(w);
        let br = self.layout.range(b);
        for tau in 0..frames {
            let dpre: Vec<f64> = d_out[tau * f..(tau + 1) * f]
                .iter()
                .zip(&cache.act[tau * f..(tau + 1) * f])
                .map(|(d, a)| d * (1.0 - a * a))
                .collect();
            add_assign(&mut grad[br.clone()], &dpre);
            for o in 0..3 {
                let src = tau as isize + o as isize - 1;
                if src < 0 || src as usize >= frames {
                    continue;
                }
                let src = src as usize;
                let block = wr.start + o * f * f..wr.start + (o + 1) * f * f;
                outer_acc(&mut grad[block], &dpre, &cache.input[src * f..(src + 1) * f]);
                matvec_t_acc(&weights[o * f * f..(o + 1) * f * f], &dpre, &mut d_x[src * f..(src + 1) * f]);
            }
        }
        d_x
    }

    /// Transducer negative log-likelihood and its exact parameter gradient.
    pub fn loss_and_gradient(&self, features: &FeatureMatrix, labels: &[u32]) -> Result<(f64, Vec<f64>)> {
        let cache = self.forward_cached(features, labels)?;
        let (nll, lattice_grad) = super::transducer_loss(&cache.lattice, labels)?;
        Ok((nll, self.backward(&cache, &lattice_grad)))
    }
}
