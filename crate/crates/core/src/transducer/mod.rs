//! Neural Transducer: acoustic encoder, label encoder and joiner over a flat
//! 64-bit parameter vector, with exact loss gradients and warm-starting.

mod checkpoint;
mod forward;
pub(crate) mod linalg;
mod loss;

use rand::Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{EncoderOutput, ForwardCache, LabelState};
pub use loss::{transducer_loss, LogitLattice};

use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub feature_dim: usize,
    pub encoder_dim: usize,
    pub label_dim: usize,
    pub joiner_dim: usize,
    /// Labels excluding blank; the joiner emits `vocab_size + 1` logits.
    pub vocab_size: usize,
    pub downsample_factor: usize,
    pub use_attention: bool,
}

impl ArchConfig {
    /// Default desk-scale dimensions for a given label count.
    pub fn with_vocab(vocab_size: usize) -> Self {
        ArchConfig {
            feature_dim: 16,
            encoder_dim: 32,
            label_dim: 16,
            joiner_dim: 32,
            vocab_size,
            downsample_factor: 2,
            use_attention: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feature_dim,
            self.encoder_dim,
            self.label_dim,
            self.joiner_dim,
            self.vocab_size,
            self.downsample_factor,
        ];
        if dims.contains(&0) {
            return Err(Error::Model(format!("all architecture dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.vocab_size + 1
    }

    /// Frames after downsampling.
    pub fn encoded_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.downsample_factor)
    }
}

/// Parameter blocks, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Conv0W,
    Conv0B,
    Conv1W,
    Conv1B,
    AttnQ,
    AttnK,
    AttnV,
    ProjW,
    ProjB,
    Embed,
    RnnWx,
    RnnWh,
    RnnB,
    JoinWe,
    JoinWl,
    JoinB,
    JoinWo,
    JoinBo,
}

/// Which sub-network a block belongs to; the warm-start boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Label,
    Joiner,
}

impl Param {
    pub const ALL: [Param; 18] = [
        Param::Conv0W,
        Param::Conv0B,
        Param::Conv1W,
        Param::Conv1B,
        Param::AttnQ,
        Param::AttnK,
        Param::AttnV,
        Param::ProjW,
        Param::ProjB,
        Param::Embed,
        Param::RnnWx,
        Param::RnnWh,
        Param::RnnB,
        Param::JoinWe,
        Param::JoinWl,
        Param::JoinB,
        Param::JoinWo,
        Param::JoinBo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::Conv0W => "enc.conv0.w",
            Param::Conv0B => "enc.conv0.b",
            Param::Conv1W => "enc.conv1.w",
            Param::Conv1B => "enc.conv1.b",
            Param::AttnQ => "enc.attn.q",
            Param::AttnK => "enc.attn.k",
            Param::AttnV => "enc.attn.v",
            Param::ProjW => "enc.proj.w",
            Param::ProjB => "enc.proj.b",
            Param::Embed => "lab.embed",
            Param::RnnWx => "lab.rnn.wx",
            Param::RnnWh => "lab.rnn.wh",
            Param::RnnB => "lab.rnn.b",
            Param::JoinWe => "join.we",
            Param::JoinWl => "join.wl",
            Param::JoinB => "join.b",
            Param::JoinWo => "join.wo",
            Param::JoinBo => "join.bo",
        }
    }

    pub fn group(self) -> Group {
        match self {
            Param::Embed | Param::RnnWx | Param::RnnWh | Param::RnnB => Group::Label,
            Param::JoinWe | Param::JoinWl | Param::JoinB | Param::JoinWo | Param::JoinBo => Group::Joiner,
            _ => Group::Encoder,
        }
    }

    pub fn is_bias(self) -> bool {
        matches!(
            self,
            Param::Conv0B | Param::Conv1B | Param::ProjB | Param::RnnB | Param::JoinB | Param::JoinBo
        )
    }

    /// `(element count, fan-in)` under `arch`.
    fn geometry(self, a: &ArchConfig) -> (usize, usize) {
        let (f, e, h, j, c) = (a.feature_dim, a.encoder_dim, a.label_dim, a.joiner_dim, a.classes());
        match self {
            Param::Conv0W | Param::Conv1W => (3 * f * f, 3 * f),
            Param::Conv0B | Param::Conv1B => (f, 1),
            Param::AttnQ | Param::AttnK | Param::AttnV => (f * f, f),
            Param::ProjW => (e * f, f),
            Param::ProjB => (e, 1),
            Param::Embed => (c * h, 1),
            Param::RnnWx | Param::RnnWh => (h * h, h),
            Param::RnnB => (h, 1),
            Param::JoinWe => (j * e, e),
            Param::JoinWl => (j * h, h),
            Param::JoinB => (j, 1),
            Param::JoinWo => (c * j, j),
            Param::JoinBo => (c, 1),
        }
    }

    pub fn from_name(name: &str) -> Option<Param> {
        Param::ALL.into_iter().find(|p| p.name() == name)
    }
}

/// Offsets of every block in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    ranges: [(usize, usize); 18],
    total: usize,
}

impl Layout {
    pub fn new(arch: &ArchConfig) -> Self {
        let mut ranges = [(0, 0); 18];
        let mut offset = 0;
        for (i, p) in Param::ALL.into_iter().enumerate() {
            let (len, _) = p.geometry(arch);
            ranges[i] = (offset, offset + len);
            offset += len;
        }
        Layout { ranges, total: offset }
    }

    pub fn range(&self, p: Param) -> std::ops::Range<usize> {
        let (a, b) = self.ranges[p as usize];
        a..b
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: ArchConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Draws block `p` the way `init_model` does for `(arch, seed)`.
fn init_block(arch: &ArchConfig, p: Param, seed: u64, out: &mut [f64]) {
    if p.is_bias() {
        out.fill(0.0);
        return;
    }
    let (_, fan_in) = p.geometry(arch);
    let s = 1.0 / (fan_in as f64).sqrt();
    let mut rng = stream(seed, "init", p as u64);
    for v in out.iter_mut() {
        *v = rng.gen_range(-s..s);
    }
}

/// Weights uniform in `(-1/√fan_in, 1/√fan_in)`, biases zero.
pub fn init_model(arch: ArchConfig, seed: u64) -> Result<Model> {
    arch.validate()?;
    let mut model = Model::zeros(arch)?;
    for p in Param::ALL {
        let r = model.layout.range(p);
        init_block(&arch, p, seed, &mut model.params[r]);
    }
    Ok(model)
}

/// How much of a prior model survives into the next stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmStartMode {
    /// Encoder copied; label encoder and joiner freshly initialized.
    EncoderOnly,
    /// Bitwise copy; the label inventory must be unchanged.
    Full,
}

impl std::str::FromStr for WarmStartMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder_only" => Ok(WarmStartMode::EncoderOnly),
            "full" => Ok(WarmStartMode::Full),
            _ => Err(Error::WarmStart(format!("unknown warm-start mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for WarmStartMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WarmStartMode::EncoderOnly => "encoder_only",
            WarmStartMode::Full => "full",
        })
    }
}

/// Initializes a new model from `prior`. With `EncoderOnly` the label
/// encoder and joiner are drawn as `init_model` would for `seed`, sized for
/// `new_vocab_size` labels.
pub fn warm_start(prior: &Model, new_vocab_size: usize, mode: WarmStartMode, seed: u64) -> Result<Model> {
    match mode {
        WarmStartMode::Full => {
            if new_vocab_size != prior.arch.vocab_size {
                return Err(Error::WarmStart(format!(
                    "full warm-start needs an unchanged label inventory ({} labels), got {new_vocab_size}",
                    prior.arch.vocab_size
                )));
            }
            Ok(prior.clone())
        }
        WarmStartMode::EncoderOnly => {
            let arch = ArchConfig {
                vocab_size: new_vocab_size,
                ..prior.arch
            };
            arch.validate()?;
            let mut model = Model::zeros(arch)?;
            for p in Param::ALL {
                let dst = model.layout.range(p);
                if p.group() == Group::Encoder {
                    model.params[dst].copy_from_slice(prior.block(p));
                } else {
                    init_block(&arch, p, seed, &mut model.params[dst]);
                }
            }
            Ok(model)
        }
    }
}

impl Model {
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        Ok(Model {
            params: vec![0.0; layout.total()],
            arch,
            layout,
        })
    }

    pub fn from_params(arch: ArchConfig, params: Vec<f64>) -> Result<Self> {
        let model = Model::zeros(arch)?;
        if params.len() != model.layout.total() {
            return Err(Error::Model(format!(
                "expected {} parameters, got {}",
                model.layout.total(),
                params.len()
            )));
        }
        Ok(Model { params, ..model })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn block(&self, p: Param) -> &[f64] {
        &self.params[self.layout.range(p)]
    }

    pub fn block_mut(&mut self, p: Param) -> &mut [f64] {
        let r = self.layout.range(p);
        &mut self.params[r]
    }

    /// Concatenated parameters of one sub-network.
    pub fn group_params(&self, group: Group) -> Vec<f64> {
        Param::ALL
            .into_iter()
            .filter(|p| p.group() == group)
            .flat_map(|p| self.block(p).iter().copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests;
