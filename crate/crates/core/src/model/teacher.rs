//! Causal softmax-attention teacher with optional grouped KV heads.

use rand::Rng;

use super::{gated_mlp, rmsnorm, taped_head, taped_mlp, GatedMlp, TeacherConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::params::{ParamSet, Slot, SlotMut, VarMap};
use crate::scalar::Scalar;
use crate::tensor::{softmax_rows, SoftmaxMask, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLayer<S> {
    pub norm1: Tensor<S>,
    /// `[d × H·hd]`
    pub wq: Linear<S>,
    /// `[d × Hkv·hd]`
    pub wk: Linear<S>,
    /// `[d × Hkv·hd]`
    pub wv: Linear<S>,
    /// `[H·hd × d]`
    pub wo: Linear<S>,
    pub norm2: Tensor<S>,
    pub mlp: GatedMlp<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel<S> {
    pub config: TeacherConfig,
    pub embed: Tensor<S>,
    /// `[max_positions × d]`, absent when `max_positions == 0`.
    pub pos_embed: Option<Tensor<S>>,
    pub layers: Vec<TeacherLayer<S>>,
    pub final_norm: Tensor<S>,
    pub head: Linear<S>,
}

#[derive(Debug, Clone, Default)]
pub struct TeacherCapture<S> {
    /// Residual stream entering each layer, then the stream after the last layer.
    pub hidden_states: Vec<Tensor<S>>,
    /// Normalized attention input of each layer.
    pub attn_inputs: Vec<Tensor<S>>,
    /// Attention sublayer output (after `wo`) of each layer.
    pub attn_outputs: Vec<Tensor<S>>,
    /// Post-softmax attention, `[H × T × T]` per layer.
    pub attention: Vec<Tensor<S>>,
}

impl<S: Scalar> TeacherCapture<S> {
    /// All attention matrices as one `[L × H × T × T]` tensor.
    pub fn attention_stack(&self) -> Result<Tensor<S>> {
        let refs: Vec<&Tensor<S>> = self.attention.iter().collect();
        Tensor::stack(&refs)
    }
}

/// Per-layer key/value cache, growing by one row per decoded token.
#[derive(Debug, Clone)]
pub struct KvCache<S> {
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    kv_width: usize,
    len: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(config: &TeacherConfig) -> Self {
        Self {
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            kv_width: config.n_kv_heads * config.head_dim,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Bytes of cached keys and values.
    pub fn byte_size(&self) -> usize {
        let scalars: usize = self
            .keys
            .iter()
            .chain(&self.values)
            .map(Vec::len)
            .sum();
        scalars * S::DTYPE.size_of()
    }

    /// `2 · L · Hkv · hd · t · sizeof(S)`.
    pub fn bytes_for(config: &TeacherConfig, t: usize) -> usize {
        2 * config.n_layers * config.n_kv_heads * config.head_dim * t * S::DTYPE.size_of()
    }
}

impl<S: Scalar> TeacherModel<S> {
    pub fn new<R: Rng + ?Sized>(config: TeacherConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let q_width = config.n_heads * config.head_dim;
        let kv_width = config.n_kv_heads * config.head_dim;
        let s_in = 1.0 / (d as f64).sqrt();
        let out_scale = 1.0 / ((2 * config.n_layers.max(1)) as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| {
                // Keys start equal to the queries of the first head in each
                // group, so fresh attention concentrates on the current token.
                let wq = Tensor::randn(&[d, q_width], s_in, rng);
                let (hd, group) = (config.head_dim, config.n_heads / config.n_kv_heads);
                let wk = Tensor::from_fn(&[d, kv_width], |ix| {
                    let (g, c) = (ix[1] / hd, ix[1] % hd);
                    wq.at2(ix[0], g * group * hd + c)
                });
                TeacherLayer {
                    norm1: Tensor::ones(&[d]),
                    wq: Linear::Dense(wq),
                    wk: Linear::Dense(wk),
                    wv: Linear::Dense(Tensor::randn(&[d, kv_width], s_in, rng)),
                    wo: Linear::Dense(Tensor::randn(
                        &[q_width, d],
                        out_scale / (q_width as f64).sqrt(),
                        rng,
                    )),
                    norm2: Tensor::ones(&[d]),
                    mlp: GatedMlp::random(d, config.mlp_hidden, out_scale, rng),
                }
            })
            .collect();
        let pos_embed =
            (config.max_positions > 0).then(|| Tensor::randn(&[config.max_positions, d], 0.5, rng));
        Ok(Self {
            config,
            embed: Tensor::randn(&[config.vocab, d], 1.0, rng),
            pos_embed,
            layers,
            final_norm: Tensor::ones(&[d]),
            head: Linear::Dense(Tensor::randn(&[d, config.vocab], s_in, rng)),
        })
    }

    fn eps(&self) -> S {
        S::lit(self.config.norm_eps)
    }

    fn group(&self) -> usize {
        self.config.n_heads / self.config.n_kv_heads
    }

    /// Token plus position embeddings for tokens starting at position `start`.
    fn embed_tokens(&self, tokens: &[usize], start: usize) -> Result<Tensor<S>> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let d = self.config.d_model;
        if self.pos_embed.is_some() && start + tokens.len() > self.config.max_positions {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds the teacher's {} positions",
                start + tokens.len(),
                self.config.max_positions
            )));
        }
        let mut out = Vec::with_capacity(tokens.len() * d);
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.config.vocab {
                return Err(Error::Input(format!(
                    "token {t} out of vocabulary of size {}",
                    self.config.vocab
                )));
            }
            match &self.pos_embed {
                Some(p) => out.extend(self.embed.row(t).iter().zip(p.row(start + i)).map(|(&a, &b)| a + b)),
                None => out.extend_from_slice(self.embed.row(t)),
            }
        }
        Tensor::new(vec![tokens.len(), d], out)
    }

    /// Attention sublayer on normalized input; returns the output and `[H × T × T]` weights.
    fn attention(&self, layer: &TeacherLayer<S>, xn: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let hd = self.config.head_dim;
        let q = layer.wq.forward(xn)?;
        let k = layer.wk.forward(xn)?;
        let v = layer.wv.forward(xn)?;
        let inv = S::one() / S::lit(hd as f64).sqrt();
        let mut probs = Vec::with_capacity(self.config.n_heads);
        let mut outs = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let g = h / self.group();
            let qh = q.slice_cols(h * hd, hd)?;
            let kh = k.slice_cols(g * hd, hd)?;
            let vh = v.slice_cols(g * hd, hd)?;
            let mut scores = qh.matmul_t(&kh)?.scale(inv);
            let slope = S::lit(self.config.head_slope(h));
            if slope > S::zero() {
                let t = scores.shape()[0];
                let data = scores.data_mut();
                for i in 0..t {
                    for j in 0..=i {
                        data[i * t + j] -= slope * S::lit((i - j) as f64);
                    }
                }
            }
            let a = softmax_rows(&scores, &SoftmaxMask::Causal)?;
            outs.push(a.matmul(&vh)?);
            probs.push(a);
        }
        let out_refs: Vec<&Tensor<S>> = outs.iter().collect();
        let prob_refs: Vec<&Tensor<S>> = probs.iter().collect();
        Ok((
            layer.wo.forward(&Tensor::concat_cols(&out_refs)?)?,
            Tensor::stack(&prob_refs)?,
        ))
    }

    /// Full forward; captures everything distillation needs.
    pub fn forward(&self, tokens: &[usize], capture: bool) -> Result<(Tensor<S>, TeacherCapture<S>)> {
        let mut h = self.embed_tokens(tokens, 0)?;
        let mut cap = TeacherCapture::default();
        for layer in &self.layers {
            let xn = rmsnorm(&h, &layer.norm1, self.eps())?;
            let (o, probs) = self.attention(layer, &xn)?;
            if capture {
                cap.hidden_states.push(h.clone());
                cap.attn_inputs.push(xn);
                cap.attn_outputs.push(o.clone());
                cap.attention.push(probs);
            }
            h = h.add(&o)?;
            let f = gated_mlp(&rmsnorm(&h, &layer.norm2, self.eps())?, &layer.mlp)?;
            h = h.add(&f)?;
        }
        if capture {
            cap.hidden_states.push(h.clone());
        }
        let logits = self.head.forward(&rmsnorm(&h, &self.final_norm, self.eps())?)?;
        Ok((logits, cap))
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        self.forward(tokens, false).map(|(l, _)| l)
    }

    /// One-token KV-cached step; returns next-token logits `[V]`.
    pub fn decode(&self, cache: &mut KvCache<S>, token: usize) -> Result<Vec<S>> {
        if cache.keys.len() != self.layers.len() {
            return Err(Error::Input("KV cache built for a different depth".into()));
        }
        let (hd, n_heads) = (self.config.head_dim, self.config.n_heads);
        let kvw = cache.kv_width;
        let mut h = self
            .embed_tokens(&[token], cache.len)?
            .reshape(&[self.config.d_model])?;
        let t = cache.len + 1;
        let inv = S::one() / S::lit(hd as f64).sqrt();
        for (li, layer) in self.layers.iter().enumerate() {
            let xn = rmsnorm(&h, &layer.norm1, self.eps())?;
            let q = layer.wq.forward_vec(xn.data())?;
            cache.keys[li].extend(layer.wk.forward_vec(xn.data())?);
            cache.values[li].extend(layer.wv.forward_vec(xn.data())?);
            let (keys, values) = (&cache.keys[li], &cache.values[li]);
            let mut attn = vec![S::zero(); n_heads * hd];
            let mut scores = vec![S::zero(); t];
            for head in 0..n_heads {
                let g = head / self.group();
                let qh = &q[head * hd..(head + 1) * hd];
                let slope = S::lit(self.config.head_slope(head));
                for (s, score) in scores.iter_mut().enumerate() {
                    let kh = &keys[s * kvw + g * hd..s * kvw + (g + 1) * hd];
                    *score = crate::tensor::dot(qh, kh) * inv - slope * S::lit((t - 1 - s) as f64);
                }
                let max = scores.iter().copied().fold(S::neg_infinity(), S::max);
                let mut total = S::zero();
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    total += *sc;
                }
                let out = &mut attn[head * hd..(head + 1) * hd];
                for (s, &w) in scores.iter().enumerate() {
                    let vh = &values[s * kvw + g * hd..s * kvw + (g + 1) * hd];
                    for (o, &v) in out.iter_mut().zip(vh) {
                        *o += w / total * v;
                    }
                }
            }
            let o = layer.wo.forward_vec(&attn)?;
            h = h.add(&Tensor::new(vec![o.len()], o)?)?;
            let f = gated_mlp(&rmsnorm(&h, &layer.norm2, self.eps())?, &layer.mlp)?;
            h = h.add(&f)?;
        }
        cache.len = t;
        let x = rmsnorm(&h, &self.final_norm, self.eps())?;
        self.head.forward_vec(x.data())
    }
}

impl<S: Scalar> ParamSet<S> for TeacherModel<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, Slot<'_, S>)) {
        f("embed", Slot::Tensor(&self.embed));
        if let Some(p) = &self.pos_embed {
            f("pos_embed", Slot::Tensor(p));
        }
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("blocks.{i}.norm1"), Slot::Tensor(&l.norm1));
            f(&format!("blocks.{i}.attn.wq"), Slot::Linear(&l.wq));
            f(&format!("blocks.{i}.attn.wk"), Slot::Linear(&l.wk));
            f(&format!("blocks.{i}.attn.wv"), Slot::Linear(&l.wv));
            f(&format!("blocks.{i}.attn.wo"), Slot::Linear(&l.wo));
            f(&format!("blocks.{i}.norm2"), Slot::Tensor(&l.norm2));
            l.mlp.visit_into(&format!("blocks.{i}.mlp"), f);
        }
        f("final_norm", Slot::Tensor(&self.final_norm));
        f("head", Slot::Linear(&self.head));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, SlotMut<'_, S>)) {
        f("embed", SlotMut::Tensor(&mut self.embed));
        if let Some(p) = &mut self.pos_embed {
            f("pos_embed", SlotMut::Tensor(p));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("blocks.{i}.norm1"), SlotMut::Tensor(&mut l.norm1));
            f(&format!("blocks.{i}.attn.wq"), SlotMut::Linear(&mut l.wq));
            f(&format!("blocks.{i}.attn.wk"), SlotMut::Linear(&mut l.wk));
            f(&format!("blocks.{i}.attn.wv"), SlotMut::Linear(&mut l.wv));
            f(&format!("blocks.{i}.attn.wo"), SlotMut::Linear(&mut l.wo));
            f(&format!("blocks.{i}.norm2"), SlotMut::Tensor(&mut l.norm2));
            l.mlp.visit_into_mut(&format!("blocks.{i}.mlp"), f);
        }
        f("final_norm", SlotMut::Tensor(&mut self.final_norm));
        f("head", SlotMut::Linear(&mut self.head));
    }
}

/// Differentiable teacher forward; returns `[T × V]` logits.
pub fn taped_teacher<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &VarMap,
    config: &TeacherConfig,
    tokens: &[usize],
) -> Result<Var> {
    let eps = S::lit(config.norm_eps);
    let hd = config.head_dim;
    let group = config.n_heads / config.n_kv_heads;
    let inv = S::one() / S::lit(hd as f64).sqrt();
    let mut h = tape.gather(vars.get("embed")?, tokens)?;
    if config.max_positions > 0 {
        if tokens.len() > config.max_positions {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds the teacher's {} positions",
                tokens.len(),
                config.max_positions
            )));
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = tape.gather(vars.get("pos_embed")?, &positions)?;
        h = tape.add(h, p)?;
    }
    for i in 0..config.n_layers {
        let p = |n: &str| vars.get(&format!("blocks.{i}.{n}"));
        let xn = tape.rmsnorm(h, p("norm1")?, eps)?;
        let q = tape.matmul(xn, p("attn.wq")?)?;
        let k = tape.matmul(xn, p("attn.wk")?)?;
        let v = tape.matmul(xn, p("attn.wv")?)?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let g = head / group;
            let qh = tape.slice_cols(q, head * hd, hd)?;
            let kh = tape.slice_cols(k, g * hd, hd)?;
            let vh = tape.slice_cols(v, g * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(raw, inv)?;
            let slope = config.head_slope(head);
            if slope > 0.0 {
                let t = tokens.len();
                let bias = Tensor::from_fn(&[t, t], |ix| S::lit(-slope * ix[0].abs_diff(ix[1]) as f64));
                let bias = tape.constant(bias);
                scores = tape.add(scores, bias)?;
            }
            let a = tape.softmax_rows(scores, true)?;
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let o = tape.matmul(cat, p("attn.wo")?)?;
        h = tape.add(h, o)?;
        let xn2 = tape.rmsnorm(h, p("norm2")?, eps)?;
        let f = taped_mlp(tape, vars, &format!("blocks.{i}.mlp"), xn2)?;
        h = tape.add(h, f)?;
    }
    taped_head(tape, vars, h, eps, false)
}
