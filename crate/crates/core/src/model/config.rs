use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mixer::MixerDims;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LlambaConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub state_dim: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub norm_eps: f64,
    pub tie_embeddings: bool,
}

/// Reference model sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    B1,
    B3,
    B8,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::B1, Preset::B3, Preset::B8];
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::B1 => "1b",
            Preset::B3 => "3b",
            Preset::B8 => "8b",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1b" => Ok(Preset::B1),
            "3b" => Ok(Preset::B3),
            "8b" => Ok(Preset::B8),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

/// Byte vocabulary plus BOS and EOS.
const TOY_VOCAB: usize = 258;
const TOY_HEADS: usize = 4;
const TOY_STATE: usize = 4;
const TOY_BLOCKS: usize = 2;
/// Head dimension divisor applied to the reference presets at toy scale.
const TOY_SHRINK: usize = 16;

impl LlambaConfig {
    /// Full-size reference configuration.
    pub fn preset(p: Preset) -> Self {
        let (n_blocks, d_model, n_heads, head_dim, state_dim, mlp_hidden) = match p {
            Preset::B1 => (16, 2048, 32, 64, 64, 8192),
            Preset::B3 => (28, 3072, 32, 96, 64, 8192),
            Preset::B8 => (32, 4096, 32, 128, 64, 14336),
        };
        Self {
            n_blocks,
            d_model,
            n_heads,
            head_dim,
            state_dim,
            mlp_hidden,
            vocab: 128256,
            norm_eps: 1e-5,
            tie_embeddings: false,
        }
    }

    /// Same shape family as [`LlambaConfig::preset`] scaled to run on a desk:
    /// two blocks, four heads, head dimension divided by 16, `d = H·P`, MLP
    /// ratio kept, byte vocabulary.
    pub fn toy(p: Preset) -> Self {
        let full = Self::preset(p);
        let head_dim = full.head_dim / TOY_SHRINK;
        let d_model = TOY_HEADS * head_dim;
        let mlp_hidden = (d_model * full.mlp_hidden + full.d_model / 2) / full.d_model;
        Self {
            n_blocks: TOY_BLOCKS,
            d_model,
            n_heads: TOY_HEADS,
            head_dim,
            state_dim: TOY_STATE,
            mlp_hidden,
            vocab: TOY_VOCAB,
            norm_eps: full.norm_eps,
            tie_embeddings: false,
        }
    }

    pub fn mixer_dims(&self) -> MixerDims {
        MixerDims {
            d_model: self.d_model,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            state_dim: self.state_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("state_dim", self.state_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab", self.vocab),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("n_blocks".into(), self.n_blocks.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("head_dim".into(), self.head_dim.to_string()),
            ("state_dim".into(), self.state_dim.to_string()),
            ("mlp_hidden".into(), self.mlp_hidden.to_string()),
            ("vocab".into(), self.vocab.to_string()),
            ("norm_eps".into(), format!("{:?}", self.norm_eps)),
            ("tie_embeddings".into(), self.tie_embeddings.to_string()),
        ]
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let c = Self {
            n_blocks: get(kv, "n_blocks")?,
            d_model: get(kv, "d_model")?,
            n_heads: get(kv, "n_heads")?,
            head_dim: get(kv, "head_dim")?,
            state_dim: get(kv, "state_dim")?,
            mlp_hidden: get(kv, "mlp_hidden")?,
            vocab: get(kv, "vocab")?,
            norm_eps: get(kv, "norm_eps")?,
            tie_embeddings: get(kv, "tie_embeddings")?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub norm_eps: f64,
    /// Rows of the learned absolute position table; 0 disables it.
    pub max_positions: usize,
    /// Head `h` subtracts `recency / 2^h · (i − j)` from score `(i, j)`; 0 disables it.
    pub recency: f64,
}

impl TeacherConfig {
    /// The two-layer teacher of the bundled toy task.
    pub fn toy() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            n_kv_heads: 2,
            head_dim: 16,
            mlp_hidden: 64,
            vocab: 256,
            norm_eps: 1e-5,
            max_positions: 0,
            recency: 0.5,
        }
    }

    /// Distance penalty per key position for `head`.
    pub fn head_slope(&self, head: usize) -> f64 {
        self.recency / (1u64 << head.min(63)) as f64
    }

    /// Student with the teacher's stack shape, one mixer head per attention head.
    pub fn student(&self, state_dim: usize) -> LlambaConfig {
        LlambaConfig {
            n_blocks: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            state_dim,
            mlp_hidden: self.mlp_hidden,
            vocab: self.vocab,
            norm_eps: self.norm_eps,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.head_dim == 0 || self.vocab == 0 {
            return Err(Error::Config("teacher dimensions must be positive".into()));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        if self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_kv_heads = {} must divide n_heads = {}",
                self.n_kv_heads, self.n_heads
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be > 0".into()));
        }
        if !(self.recency >= 0.0 && self.recency.is_finite()) {
            return Err(Error::Config("recency must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("n_layers".into(), self.n_layers.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("n_kv_heads".into(), self.n_kv_heads.to_string()),
            ("head_dim".into(), self.head_dim.to_string()),
            ("mlp_hidden".into(), self.mlp_hidden.to_string()),
            ("vocab".into(), self.vocab.to_string()),
            ("norm_eps".into(), format!("{:?}", self.norm_eps)),
            ("max_positions".into(), self.max_positions.to_string()),
            ("recency".into(), format!("{:?}", self.recency)),
        ]
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let c = Self {
            n_layers: get(kv, "n_layers")?,
            d_model: get(kv, "d_model")?,
            n_heads: get(kv, "n_heads")?,
            n_kv_heads: get(kv, "n_kv_heads")?,
            head_dim: get(kv, "head_dim")?,
            mlp_hidden: get(kv, "mlp_hidden")?,
            vocab: get(kv, "vocab")?,
            norm_eps: get(kv, "norm_eps")?,
            max_positions: get(kv, "max_positions")?,
            recency: get(kv, "recency")?,
        };
        c.validate()?;
        Ok(c)
    }
}

pub(crate) fn get<T: FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = kv
        .get(key)
        .ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{raw}` for `{key}`")))
}
