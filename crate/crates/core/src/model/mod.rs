//! Llamba language model: residual blocks of RMSNorm → Discrete Mamba-2 and
//! RMSNorm → gated MLP, plus the softmax-attention teacher used for distillation.

mod config;
mod teacher;

use std::collections::BTreeMap;

use rand::Rng;

pub use config::{LlambaConfig, Preset, TeacherConfig};
pub use teacher::{taped_teacher, KvCache, TeacherCapture, TeacherModel};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::mixer::{
    forward_parallel, materialize_mixer, prefill as mixer_prefill, project_inputs, taped_mixer,
    MixerParams, RecurrentState, TapedMixer,
};
use crate::params::{ParamSet, Slot, SlotMut, VarMap};
use crate::scalar::Scalar;
use crate::tensor::{silu, softmax_rows, SoftmaxMask, Tensor};

/// Chunk length used by full-sequence forwards.
pub const DEFAULT_CHUNK: usize = 16;

/// Row-wise `x / sqrt(mean(x²) + eps) ⊙ weight` for `[d]` or `[T × d]` inputs.
pub fn rmsnorm<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
    let d = weight.len();
    if weight.rank() != 1 || x.shape().last() != Some(&d) {
        return Err(Error::dim("rmsnorm", x.shape(), weight.shape()));
    }
    let dn = S::lit(d as f64);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let ms = row.iter().map(|&v| v * v).sum::<S>() / dn;
        let r = S::one() / (ms + eps).sqrt();
        out.extend(row.iter().zip(weight.data()).map(|(&v, &w)| v * r * w));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `down(SiLU(x·gate) ⊙ (x·up))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedMlp<S> {
    /// `[d × m]`
    pub up: Linear<S>,
    /// `[d × m]`
    pub gate: Linear<S>,
    /// `[m × d]`
    pub down: Linear<S>,
}

impl<S: Scalar> GatedMlp<S> {
    pub fn random<R: Rng + ?Sized>(d: usize, hidden: usize, out_scale: f64, rng: &mut R) -> Self {
        let s_in = 1.0 / (d as f64).sqrt();
        let s_out = out_scale / (hidden as f64).sqrt();
        Self {
            up: Linear::Dense(Tensor::randn(&[d, hidden], s_in, rng)),
            gate: Linear::Dense(Tensor::randn(&[d, hidden], s_in, rng)),
            down: Linear::Dense(Tensor::randn(&[hidden, d], s_out, rng)),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        gated_mlp(x, self)
    }

    fn forward_vec(&self, x: &[S]) -> Result<Vec<S>> {
        let up = self.up.forward_vec(x)?;
        let gate = self.gate.forward_vec(x)?;
        let h: Vec<S> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
        self.down.forward_vec(&h)
    }

    fn visit_into(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, S>)) {
        f(&format!("{prefix}.up"), Slot::Linear(&self.up));
        f(&format!("{prefix}.gate"), Slot::Linear(&self.gate));
        f(&format!("{prefix}.down"), Slot::Linear(&self.down));
    }

    fn visit_into_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, S>)) {
        f(&format!("{prefix}.up"), SlotMut::Linear(&mut self.up));
        f(&format!("{prefix}.gate"), SlotMut::Linear(&mut self.gate));
        f(&format!("{prefix}.down"), SlotMut::Linear(&mut self.down));
    }
}

/// Gated MLP over `[d]` or `[T × d]`.
pub fn gated_mlp<S: Scalar>(x: &Tensor<S>, mlp: &GatedMlp<S>) -> Result<Tensor<S>> {
    if mlp.up.in_dim() != mlp.gate.in_dim()
        || mlp.up.out_dim() != mlp.gate.out_dim()
        || mlp.down.in_dim() != mlp.up.out_dim()
    {
        return Err(Error::Parameter("gated MLP weight shapes disagree".into()));
    }
    if x.rank() == 1 {
        let y = mlp.forward_vec(x.data())?;
        return Tensor::new(vec![y.len()], y);
    }
    let up = mlp.up.forward(x)?;
    let gate = mlp.gate.forward(x)?;
    let h = gate.zip_map(&up, "gated_mlp", |g, u| silu(g) * u)?;
    mlp.down.forward(&h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlambaBlock<S> {
    pub norm1: Tensor<S>,
    pub mixer: MixerParams<S>,
    pub norm2: Tensor<S>,
    pub mlp: GatedMlp<S>,
}

/// What a full-sequence forward should keep besides the logits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capture {
    pub hidden_states: bool,
    pub mixer_matrices: bool,
}

impl Capture {
    pub const NONE: Capture = Capture {
        hidden_states: false,
        mixer_matrices: false,
    };
    pub const ALL: Capture = Capture {
        hidden_states: true,
        mixer_matrices: true,
    };
}

#[derive(Debug, Clone, Default)]
pub struct StudentCapture<S> {
    /// Residual stream entering each block, then the stream after the last block.
    pub hidden_states: Vec<Tensor<S>>,
    /// Normalized input of each mixer.
    pub mixer_inputs: Vec<Tensor<S>>,
    pub mixer_outputs: Vec<Tensor<S>>,
    /// `[H × T × T]` per block.
    pub mixer_matrices: Vec<Tensor<S>>,
}

#[derive(Debug, Clone)]
pub struct StudentOutput<S> {
    /// `[T × V]`
    pub logits: Tensor<S>,
    pub captures: StudentCapture<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlambaModel<S> {
    pub config: LlambaConfig,
    /// `[V × d]`
    pub embed: Tensor<S>,
    pub blocks: Vec<LlambaBlock<S>>,
    pub final_norm: Tensor<S>,
    /// `[d × V]`; absent when the head is tied to the embedding.
    pub head: Option<Linear<S>>,
}

impl<S: Scalar> LlambaModel<S> {
    /// Random embedding, head and MLPs; identity-initialized mixers.
    pub fn new<R: Rng + ?Sized>(config: LlambaConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let out_scale = 1.0 / ((2 * config.n_blocks.max(1)) as f64).sqrt();
        let blocks = (0..config.n_blocks)
            .map(|_| LlambaBlock {
                norm1: Tensor::ones(&[d]),
                mixer: MixerParams::identity_init(config.mixer_dims(), rng),
                norm2: Tensor::ones(&[d]),
                mlp: GatedMlp::random(d, config.mlp_hidden, out_scale, rng),
            })
            .collect();
        let head = (!config.tie_embeddings).then(|| {
            Linear::Dense(Tensor::randn(&[d, config.vocab], 1.0 / (d as f64).sqrt(), rng))
        });
        Ok(Self {
            config,
            embed: Tensor::randn(&[config.vocab, d], 1.0, rng),
            blocks,
            final_norm: Tensor::ones(&[d]),
            head,
        })
    }

    fn eps(&self) -> S {
        S::lit(self.config.norm_eps)
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Input(format!(
                "token {t} out of vocabulary of size {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            out.extend_from_slice(self.embed.row(t));
        }
        Tensor::new(vec![tokens.len(), d], out)
    }

    /// Final norm and LM head over `[T × d]` or `[d]`.
    pub fn logits_from_hidden(&self, h: &Tensor<S>) -> Result<Tensor<S>> {
        let x = rmsnorm(h, &self.final_norm, self.eps())?;
        let x2 = if x.rank() == 1 {
            x.reshape(&[1, self.config.d_model])?
        } else {
            x
        };
        let logits = match &self.head {
            Some(head) => head.forward(&x2)?,
            None => x2.matmul_t(&self.embed)?,
        };
        if h.rank() == 1 {
            logits.reshape(&[self.config.vocab])
        } else {
            Ok(logits)
        }
    }

    /// Full-sequence forward through the chunked scan.
    pub fn forward(&self, tokens: &[usize], capture: Capture) -> Result<StudentOutput<S>> {
        let mut h = self.embed_tokens(tokens)?;
        let mut captures = StudentCapture::default();
        for block in &self.blocks {
            if capture.hidden_states {
                captures.hidden_states.push(h.clone());
            }
            let xn = rmsnorm(&h, &block.norm1, self.eps())?;
            let m = forward_parallel(&block.mixer, &xn, DEFAULT_CHUNK)?;
            if capture.mixer_matrices {
                captures
                    .mixer_matrices
                    .push(materialize_mixer(&project_inputs(&block.mixer, &xn)?)?);
            }
            if capture.hidden_states {
                captures.mixer_inputs.push(xn);
                captures.mixer_outputs.push(m.clone());
            }
            h = h.add(&m)?;
            let f = block.mlp.forward(&rmsnorm(&h, &block.norm2, self.eps())?)?;
            h = h.add(&f)?;
        }
        if capture.hidden_states {
            captures.hidden_states.push(h.clone());
        }
        let logits = self.logits_from_hidden(&h)?;
        if !logits.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(StudentOutput { logits, captures })
    }

    pub fn new_states(&self) -> Vec<RecurrentState<S>> {
        self.blocks
            .iter()
            .map(|b| RecurrentState::new(b.mixer.dims))
            .collect()
    }

    /// Total decode-state bytes across blocks.
    pub fn state_bytes(states: &[RecurrentState<S>]) -> usize {
        states.iter().map(RecurrentState::byte_size).sum()
    }

    /// Runs the prompt through the chunked scan and returns its logits with
    /// the decode states positioned after the last prompt token.
    pub fn prefill(&self, tokens: &[usize]) -> Result<(Tensor<S>, Vec<RecurrentState<S>>)> {
        let mut h = self.embed_tokens(tokens)?;
        let mut states = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let xn = rmsnorm(&h, &block.norm1, self.eps())?;
            let (m, st) = mixer_prefill(&block.mixer, &xn, DEFAULT_CHUNK)?;
            states.push(st);
            h = h.add(&m)?;
            let f = block.mlp.forward(&rmsnorm(&h, &block.norm2, self.eps())?)?;
            h = h.add(&f)?;
        }
        Ok((self.logits_from_hidden(&h)?, states))
    }

    /// One-token step through every block; returns the next-token logits `[V]`.
    pub fn decode(&self, states: &mut [RecurrentState<S>], token: usize) -> Result<Vec<S>> {
        if states.len() != self.blocks.len() {
            return Err(Error::Input(format!(
                "{} decode states for {} blocks",
                states.len(),
                self.blocks.len()
            )));
        }
        let mut h = self.embed_tokens(&[token])?.reshape(&[self.config.d_model])?;
        for (block, state) in self.blocks.iter().zip(states.iter_mut()) {
            let xn = rmsnorm(&h, &block.norm1, self.eps())?;
            let m = block.mixer.step(state, xn.data(), None)?;
            h = h.add(&Tensor::new(vec![m.len()], m)?)?;
            let f = block.mlp.forward_vec(rmsnorm(&h, &block.norm2, self.eps())?.data())?;
            h = h.add(&Tensor::new(vec![f.len()], f)?)?;
        }
        Ok(self.logits_from_hidden(&h)?.into_data())
    }

    /// Copy with every linear weight quantized to 4 bits.
    pub fn quantized(&self, group_size: usize) -> Result<Self> {
        let mut out = self.clone();
        let mut err = None;
        out.visit_mut(&mut |name, slot| {
            if let (SlotMut::Linear(l), None) = (slot, &err) {
                match l.quantized(name, group_size) {
                    Ok(q) => *l = q,
                    Err(e) => err = Some(e),
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    /// Replaces dense weights by name; used when loading files and checkpoints.
    pub fn set_params(&mut self, mut values: BTreeMap<String, Tensor<S>>) -> Result<()> {
        let mut err = None;
        self.for_each_dense_mut(&mut |name, t| {
            if let Some(v) = values.remove(name) {
                if v.shape() != t.shape() && err.is_none() {
                    err = Some(Error::Parameter(format!(
                        "`{name}`: expected shape {:?}, got {:?}",
                        t.shape(),
                        v.shape()
                    )));
                } else {
                    *t = v;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(name) = values.keys().next() {
            return Err(Error::Parameter(format!("unknown parameter `{name}`")));
        }
        Ok(())
    }
}

impl<S: Scalar> ParamSet<S> for LlambaModel<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, Slot<'_, S>)) {
        f("embed", Slot::Tensor(&self.embed));
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{i}.norm1"), Slot::Tensor(&b.norm1));
            b.mixer
                .visit(&mut |n, s| f(&format!("blocks.{i}.mixer.{n}"), s));
            f(&format!("blocks.{i}.norm2"), Slot::Tensor(&b.norm2));
            b.mlp.visit_into(&format!("blocks.{i}.mlp"), f);
        }
        f("final_norm", Slot::Tensor(&self.final_norm));
        if let Some(head) = &self.head {
            f("head", Slot::Linear(head));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, SlotMut<'_, S>)) {
        f("embed", SlotMut::Tensor(&mut self.embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{i}.norm1"), SlotMut::Tensor(&mut b.norm1));
            b.mixer
                .visit_mut(&mut |n, s| f(&format!("blocks.{i}.mixer.{n}"), s));
            f(&format!("blocks.{i}.norm2"), SlotMut::Tensor(&mut b.norm2));
            b.mlp.visit_into_mut(&format!("blocks.{i}.mlp"), f);
        }
        f("final_norm", SlotMut::Tensor(&mut self.final_norm));
        if let Some(head) = &mut self.head {
            f("head", SlotMut::Linear(head));
        }
    }
}

/// Gated MLP on a tape; weights `{prefix}.up|gate|down`.
pub fn taped_mlp<S: Scalar>(tape: &mut Tape<S>, vars: &VarMap, prefix: &str, x: Var) -> Result<Var> {
    let up = tape.matmul(x, vars.get(&format!("{prefix}.up"))?)?;
    let gate = tape.matmul(x, vars.get(&format!("{prefix}.gate"))?)?;
    let act = tape.silu(gate)?;
    let h = tape.mul(act, up)?;
    tape.matmul(h, vars.get(&format!("{prefix}.down"))?)
}

/// Final norm plus LM head on a tape.
pub(crate) fn taped_head<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &VarMap,
    h: Var,
    eps: S,
    tied: bool,
) -> Result<Var> {
    let x = tape.rmsnorm(h, vars.get("final_norm")?, eps)?;
    if tied {
        let et = tape.transpose(vars.get("embed")?)?;
        tape.matmul(x, et)
    } else {
        tape.matmul(x, vars.get("head")?)
    }
}

/// Differentiable student forward; returns `[T × V]` logits. Mixers run
/// through their materialized matrices.
pub fn taped_student<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &VarMap,
    config: &LlambaConfig,
    tokens: &[usize],
) -> Result<Var> {
    let eps = S::lit(config.norm_eps);
    let mut h = tape.gather(vars.get("embed")?, tokens)?;
    for i in 0..config.n_blocks {
        let xn = tape.rmsnorm(h, vars.get(&format!("blocks.{i}.norm1"))?, eps)?;
        let trace = taped_mixer(
            tape,
            vars,
            &format!("blocks.{i}.mixer"),
            config.mixer_dims(),
            xn,
            TapedMixer::Full,
        )?;
        h = tape.add(h, trace.output.expect("full mixer trace"))?;
        let xn2 = tape.rmsnorm(h, vars.get(&format!("blocks.{i}.norm2"))?, eps)?;
        let f = taped_mlp(tape, vars, &format!("blocks.{i}.mlp"), xn2)?;
        h = tape.add(h, f)?;
    }
    taped_head(tape, vars, h, eps, config.tie_embeddings)
}

/// Greedy (`temp == 0`) or temperature sampling from `[V]` logits.
pub fn sample<S: Scalar, R: Rng + ?Sized>(logits: &[S], temp: f64, rng: &mut R) -> Result<usize> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits during sampling".into()));
    }
    if temp <= 0.0 {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        return Ok(best);
    }
    let scaled = Tensor::new(
        vec![1, logits.len()],
        logits.iter().map(|v| v.as_f64() / temp).collect::<Vec<f64>>(),
    )?;
    let p = softmax_rows(&scaled, &SoftmaxMask::None)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.data().iter().enumerate() {
        acc += pi;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(logits.len() - 1)
}

/// Prefills `prompt` and samples `max_tokens` continuations.
pub fn generate<S: Scalar, R: Rng + ?Sized>(
    model: &LlambaModel<S>,
    prompt: &[usize],
    max_tokens: usize,
    temp: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if max_tokens == 0 {
        return Ok(Vec::new());
    }
    let (logits, mut states) = model.prefill(prompt)?;
    let last = logits.row(prompt.len() - 1).to_vec();
    let mut next = sample(&last, temp, rng)?;
    let mut out = vec![next];
    while out.len() < max_tokens {
        let logits = model.decode(&mut states, next)?;
        next = sample(&logits, temp, rng)?;
        out.push(next);
    }
    Ok(out)
}
