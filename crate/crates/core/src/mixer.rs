//! Discrete Mamba-2 sequence mixer.
//!
//! Per head `h` and step `t` the mixer keeps an `N×P` state and computes
//!
//! ```text
//!   S_t = a_t · S_{t-1} + B_t x̂_tᵀ
//!   y_t = C_tᵀ S_t + D · x̂_t
//! ```
//!
//! where `a_t = sigmoid(w_a·u_t + b_a)` is projected straight from the input
//! (no Δ discretization) and `x̂`, `B`, `C` pass through a width-4 causal
//! depthwise convolution with no activation afterwards. The head outputs are
//! gated by `SiLU(z_t)` and projected back to the model width without any
//! normalization in between.
//!
//! Three evaluation schedules are provided and agree to rounding error:
//! [`recurrent_step`] (one token at a time, constant memory),
//! [`forward_parallel`] (chunked scan) and [`forward_materialized`] (the full
//! `T×T` mixing matrix from [`materialize_mixer`]).

use std::sync::OnceLock;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::params::{ParamSet, Slot, SlotMut, VarMap};
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, silu, Tensor};

pub const CONV_WIDTH: usize = 4;

/// Initial a-logit bias; sigmoid(2) ≈ 0.88.
const A_BIAS_INIT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixerDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub state_dim: usize,
}

impl MixerDims {
    /// Width of the x̂ and gate streams, `H·P`.
    pub fn inner(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Width of each of the B and C streams, `H·N`.
    pub fn bc_width(&self) -> usize {
        self.n_heads * self.state_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerParams<S> {
    pub dims: MixerDims,
    /// `[d × H·P]`
    pub w_x: Linear<S>,
    /// `[d × H·P]`
    pub w_z: Linear<S>,
    /// `[H·P]`
    pub b_z: Tensor<S>,
    /// `[d × H·N]`
    pub w_b: Linear<S>,
    /// `[d × H·N]`
    pub w_c: Linear<S>,
    /// `[d × H]`
    pub w_a: Linear<S>,
    /// `[H]`
    pub b_a: Tensor<S>,
    /// `[H·P × 4]`, last tap multiplies the current step.
    pub conv_x: Tensor<S>,
    /// `[H·N × 4]`
    pub conv_b: Tensor<S>,
    /// `[H·N × 4]`
    pub conv_c: Tensor<S>,
    /// `[H]`
    pub d_skip: Tensor<S>,
    /// `[H·P × d]`
    pub w_out: Linear<S>,
}

/// Parameter names, relative to a mixer's prefix, trained by matrix orientation.
pub const ORIENTATION_PARAMS: [&str; 4] = ["w_b", "w_c", "w_a", "b_a"];

/// Solves `x · sigmoid(x) = 1` by bisection, i.e. the bias at which SiLU outputs 1.
pub fn unit_gate_bias() -> f64 {
    static BIAS: OnceLock<f64> = OnceLock::new();
    *BIAS.get_or_init(|| {
        let f = |x: f64| x / (1.0 + (-x).exp()) - 1.0;
        let (mut lo, mut hi) = (0.0f64, 4.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    })
}

fn identity_kernel<S: Scalar>(channels: usize) -> Tensor<S> {
    Tensor::from_fn(&[channels, CONV_WIDTH], |ix| {
        if ix[1] == CONV_WIDTH - 1 {
            S::one()
        } else {
            S::zero()
        }
    })
}

/// `[rows × cols]` with orthonormal rows (rows <= cols) or orthonormal columns.
fn orthonormal<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<S> {
    if rows > cols {
        return orthonormal::<S, R>(cols, rows, rng)
            .transpose()
            .expect("rank 2");
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = Tensor::<f64>::randn(&[cols], 1.0, rng).into_data();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor::from_fn(&[rows, cols], |ix| S::lit(basis[ix[0]][ix[1]]))
}

impl<S: Scalar> MixerParams<S> {
    /// Identity initialization: identity conv kernels, unit gate, `D = 1`,
    /// zero C projection and `W_out = W_xᵀ`. When `H·P >= d` the mixer maps
    /// its input to itself exactly (up to rounding).
    pub fn identity_init<R: Rng + ?Sized>(dims: MixerDims, rng: &mut R) -> Self {
        let (d, hp, hn, h) = (dims.d_model, dims.inner(), dims.bc_width(), dims.n_heads);
        let w_x: Tensor<S> = if hp == d {
            Tensor::eye(d)
        } else {
            if hp < d {
                log::warn!(
                    "mixer init: H·P = {hp} < d = {d}; the initial block is only approximately the identity"
                );
            }
            orthonormal(d, hp, rng)
        };
        let w_out = w_x.transpose().expect("rank 2");
        let std = 1.0 / (d as f64).sqrt();
        Self {
            dims,
            w_x: Linear::Dense(w_x),
            w_z: Linear::Dense(Tensor::zeros(&[d, hp])),
            b_z: Tensor::full(&[hp], S::lit(unit_gate_bias())),
            w_b: Linear::Dense(Tensor::randn(&[d, hn], std, rng)),
            w_c: Linear::Dense(Tensor::zeros(&[d, hn])),
            w_a: Linear::Dense(Tensor::randn(&[d, h], 0.1 * std, rng)),
            b_a: Tensor::full(&[h], S::lit(A_BIAS_INIT)),
            conv_x: identity_kernel(hp),
            conv_b: identity_kernel(hn),
            conv_c: identity_kernel(hn),
            d_skip: Tensor::ones(&[h]),
            w_out: Linear::Dense(w_out),
        }
    }

    /// Every parameter drawn at random; used to exercise the math away from init.
    pub fn random<R: Rng + ?Sized>(dims: MixerDims, std: f64, rng: &mut R) -> Self {
        let (d, hp, hn, h) = (dims.d_model, dims.inner(), dims.bc_width(), dims.n_heads);
        Self {
            dims,
            w_x: Linear::Dense(Tensor::randn(&[d, hp], std, rng)),
            w_z: Linear::Dense(Tensor::randn(&[d, hp], std, rng)),
            b_z: Tensor::randn(&[hp], std, rng),
            w_b: Linear::Dense(Tensor::randn(&[d, hn], std, rng)),
            w_c: Linear::Dense(Tensor::randn(&[d, hn], std, rng)),
            w_a: Linear::Dense(Tensor::randn(&[d, h], std, rng)),
            b_a: Tensor::randn(&[h], 1.0, rng),
            conv_x: Tensor::randn(&[hp, CONV_WIDTH], 0.5, rng),
            conv_b: Tensor::randn(&[hn, CONV_WIDTH], 0.5, rng),
            conv_c: Tensor::randn(&[hn, CONV_WIDTH], 0.5, rng),
            d_skip: Tensor::randn(&[h], 1.0, rng),
            w_out: Linear::Dense(Tensor::randn(&[hp, d], std, rng)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, hp, hn, h) = (
            self.dims.d_model,
            self.dims.inner(),
            self.dims.bc_width(),
            self.dims.n_heads,
        );
        let check_lin = |name: &str, l: &Linear<S>, i: usize, o: usize| -> Result<()> {
            if l.in_dim() != i || l.out_dim() != o {
                return Err(Error::Parameter(format!(
                    "mixer {name}: expected [{i}×{o}], got [{}×{}]",
                    l.in_dim(),
                    l.out_dim()
                )));
            }
            Ok(())
        };
        check_lin("w_x", &self.w_x, d, hp)?;
        check_lin("w_z", &self.w_z, d, hp)?;
        check_lin("w_b", &self.w_b, d, hn)?;
        check_lin("w_c", &self.w_c, d, hn)?;
        check_lin("w_a", &self.w_a, d, h)?;
        check_lin("w_out", &self.w_out, hp, d)?;
        let check = |name: &str, t: &Tensor<S>, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Parameter(format!(
                    "mixer {name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        check("b_z", &self.b_z, &[hp])?;
        check("b_a", &self.b_a, &[h])?;
        check("d", &self.d_skip, &[h])?;
        check("conv_x", &self.conv_x, &[hp, CONV_WIDTH])?;
        check("conv_b", &self.conv_b, &[hn, CONV_WIDTH])?;
        check("conv_c", &self.conv_c, &[hn, CONV_WIDTH])
    }
}

impl<S: Scalar> ParamSet<S> for MixerParams<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, Slot<'_, S>)) {
        f("w_x", Slot::Linear(&self.w_x));
        f("w_z", Slot::Linear(&self.w_z));
        f("b_z", Slot::Tensor(&self.b_z));
        f("w_b", Slot::Linear(&self.w_b));
        f("w_c", Slot::Linear(&self.w_c));
        f("w_a", Slot::Linear(&self.w_a));
        f("b_a", Slot::Tensor(&self.b_a));
        f("conv_x", Slot::Tensor(&self.conv_x));
        f("conv_b", Slot::Tensor(&self.conv_b));
        f("conv_c", Slot::Tensor(&self.conv_c));
        f("d", Slot::Tensor(&self.d_skip));
        f("w_out", Slot::Linear(&self.w_out));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, SlotMut<'_, S>)) {
        f("w_x", SlotMut::Linear(&mut self.w_x));
        f("w_z", SlotMut::Linear(&mut self.w_z));
        f("b_z", SlotMut::Tensor(&mut self.b_z));
        f("w_b", SlotMut::Linear(&mut self.w_b));
        f("w_c", SlotMut::Linear(&mut self.w_c));
        f("w_a", SlotMut::Linear(&mut self.w_a));
        f("b_a", SlotMut::Tensor(&mut self.b_a));
        f("conv_x", SlotMut::Tensor(&mut self.conv_x));
        f("conv_b", SlotMut::Tensor(&mut self.conv_b));
        f("conv_c", SlotMut::Tensor(&mut self.conv_c));
        f("d", SlotMut::Tensor(&mut self.d_skip));
        f("w_out", SlotMut::Linear(&mut self.w_out));
    }
}

/// Per-token streams after projection and convolution, laid out `[T × width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerProjections<S> {
    pub dims: MixerDims,
    /// `[T × H·P]`
    pub xhat: Tensor<S>,
    /// Gate pre-activation, `[T × H·P]`.
    pub z: Tensor<S>,
    /// `[T × H·N]`
    pub b: Tensor<S>,
    /// `[T × H·N]`
    pub c: Tensor<S>,
    /// Decay factors in (0, 1), `[T × H]`.
    pub a: Tensor<S>,
    pre_conv: [Tensor<S>; 3],
}

impl<S: Scalar> MixerProjections<S> {
    pub fn seq_len(&self) -> usize {
        self.xhat.shape()[0]
    }

    pub fn head_x(&self, h: usize) -> Tensor<S> {
        let p = self.dims.head_dim;
        self.xhat.slice_cols(h * p, p).expect("head in range")
    }

    pub fn head_b(&self, h: usize) -> Tensor<S> {
        let n = self.dims.state_dim;
        self.b.slice_cols(h * n, n).expect("head in range")
    }

    pub fn head_c(&self, h: usize) -> Tensor<S> {
        let n = self.dims.state_dim;
        self.c.slice_cols(h * n, n).expect("head in range")
    }

    pub fn head_a(&self, h: usize) -> Tensor<S> {
        let t = self.seq_len();
        Tensor::from_fn(&[t], |ix| self.a.at2(ix[0], h))
    }
}

/// Depthwise causal convolution: `y[t][c] = Σ_k w[c][k] · x[t-K+1+k][c]`.
pub fn causal_conv<S: Scalar>(x: &Tensor<S>, kernel: &Tensor<S>) -> Result<Tensor<S>> {
    let (t, c) = x.dims2()?;
    let (kc, width) = kernel.dims2()?;
    if kc != c {
        return Err(Error::dim("causal_conv", x.shape(), kernel.shape()));
    }
    let mut out = vec![S::zero(); t * c];
    for step in 0..t {
        for k in 0..width {
            let Some(src) = (step + k + 1).checked_sub(width) else {
                continue;
            };
            for ch in 0..c {
                out[step * c + ch] += kernel.data()[ch * width + k] * x.data()[src * c + ch];
            }
        }
    }
    Tensor::new(vec![t, c], out)
}

/// Lower-triangular decay matrix `L[i][j] = Π_{k=j+1..=i} a_k` built by a
/// running product down each column.
pub fn decay_matrix<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let t = a.len();
    if a.rank() > 2 || (a.rank() == 2 && a.shape()[1] != 1) {
        return Err(Error::Shape {
            shape: a.shape().to_vec(),
            reason: "decay factors must be [T] or [T × 1]".into(),
        });
    }
    let a = a.data();
    let mut out = vec![S::zero(); t * t];
    for j in 0..t {
        let mut acc = S::one();
        out[j * t + j] = acc;
        for i in j + 1..t {
            acc *= a[i];
            out[i * t + j] = acc;
        }
    }
    Tensor::new(vec![t, t], out)
}

pub fn project_inputs<S: Scalar>(
    params: &MixerParams<S>,
    x: &Tensor<S>,
) -> Result<MixerProjections<S>> {
    let (t, d) = x.dims2()?;
    if d != params.dims.d_model {
        return Err(Error::dim("project_inputs", x.shape(), &[t, params.dims.d_model]));
    }
    let x_pre = params.w_x.forward(x)?;
    let b_pre = params.w_b.forward(x)?;
    let c_pre = params.w_c.forward(x)?;
    let z = params.w_z.forward(x)?.add(&params.b_z.broadcast_rows(t)?)?;
    let a = params
        .w_a
        .forward(x)?
        .add(&params.b_a.broadcast_rows(t)?)?
        .sigmoid();
    Ok(MixerProjections {
        dims: params.dims,
        xhat: causal_conv(&x_pre, &params.conv_x)?,
        z,
        b: causal_conv(&b_pre, &params.conv_b)?,
        c: causal_conv(&c_pre, &params.conv_c)?,
        a,
        pre_conv: [x_pre, b_pre, c_pre],
    })
}

/// Per-head mixing matrices `[H × T × T]`, `M[i][j] = (C_i·B_j) Π_{k=j+1..=i} a_k`.
/// The D skip and the gate are not part of the matrix.
pub fn materialize_mixer<S: Scalar>(proj: &MixerProjections<S>) -> Result<Tensor<S>> {
    let heads: Vec<Tensor<S>> = (0..proj.dims.n_heads)
        .map(|h| head_matrix(proj, h))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<S>> = heads.iter().collect();
    Tensor::stack(&refs)
}

fn head_matrix<S: Scalar>(proj: &MixerProjections<S>, h: usize) -> Result<Tensor<S>> {
    let gram = proj.head_c(h).matmul_t(&proj.head_b(h))?;
    gram.mul(&decay_matrix(&proj.head_a(h))?)
}

/// `(y + D⊙x̂) ⊙ SiLU(z)` followed by the output projection.
fn finish<S: Scalar>(
    params: &MixerParams<S>,
    proj: &MixerProjections<S>,
    y: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (t, hp) = y.dims2()?;
    let p = params.dims.head_dim;
    let mut gated = Vec::with_capacity(t * hp);
    for i in 0..t {
        for col in 0..hp {
            let dh = params.d_skip.data()[col / p];
            let v = y.at2(i, col) + dh * proj.xhat.at2(i, col);
            gated.push(v * silu(proj.z.at2(i, col)));
        }
    }
    params.w_out.forward(&Tensor::new(vec![t, hp], gated)?)
}

/// Mixer output computed through the materialized `T×T` matrices.
pub fn forward_materialized<S: Scalar>(
    params: &MixerParams<S>,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    let proj = project_inputs(params, x)?;
    let heads: Vec<Tensor<S>> = (0..params.dims.n_heads)
        .map(|h| head_matrix(&proj, h)?.matmul(&proj.head_x(h)))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<S>> = heads.iter().collect();
    finish(params, &proj, &Tensor::concat_cols(&refs)?)
}

/// Chunked scan for one head. `state` is the `N×P` carry, updated in place.
/// Returns `y` without the D skip, `[T × P]`.
fn scan_head<S: Scalar>(
    proj: &MixerProjections<S>,
    h: usize,
    chunk: usize,
    state: &mut [S],
) -> Result<Tensor<S>> {
    let (n, p) = (proj.dims.state_dim, proj.dims.head_dim);
    let t = proj.seq_len();
    let (xh, bh, ch, ah) = (proj.head_x(h), proj.head_b(h), proj.head_c(h), proj.head_a(h));
    let mut y = vec![S::zero(); t * p];
    let mut start = 0;
    while start < t {
        let end = (start + chunk).min(t);
        let len = end - start;
        let rows = |m: &Tensor<S>, w: usize| {
            Tensor::new(vec![len, w], m.data()[start * w..end * w].to_vec())
        };
        let (xc, bc, cc) = (rows(&xh, p)?, rows(&bh, n)?, rows(&ch, n)?);
        let ac = Tensor::new(vec![len], ah.data()[start..end].to_vec())?;
        let decay = decay_matrix(&ac)?;

        // Intra-chunk: materialized mixer restricted to the chunk.
        let intra = cc.matmul_t(&bc)?.mul(&decay)?.matmul(&xc)?;
        // Inter-chunk: carried state decayed up to each position.
        let carried = cc.matmul(&Tensor::new(vec![n, p], state.to_vec())?)?;
        for i in 0..len {
            let to_i = ac.data()[0] * decay.at2(i, 0);
            for col in 0..p {
                y[(start + i) * p + col] = intra.at2(i, col) + to_i * carried.at2(i, col);
            }
        }

        // Carry: S ← (Π_chunk a) S + Σ_j (Π_{k>j} a_k) B_j x_jᵀ.
        let total = ac.data()[0] * decay.at2(len - 1, 0);
        let last_row = decay.row(len - 1);
        let weighted_b = Tensor::from_fn(&[len, n], |ix| last_row[ix[0]] * bc.at2(ix[0], ix[1]));
        let contrib = weighted_b.t_matmul(&xc)?;
        for (s, &c) in state.iter_mut().zip(contrib.data()) {
            *s = total * *s + c;
        }
        start = end;
    }
    Tensor::new(vec![t, p], y)
}

/// Chunked-parallel mixer forward from a zero state.
pub fn forward_parallel<S: Scalar>(
    params: &MixerParams<S>,
    x: &Tensor<S>,
    chunk: usize,
) -> Result<Tensor<S>> {
    prefill(params, x, chunk).map(|(y, _)| y)
}

/// Chunked-parallel forward that also returns the decode state after the last token.
pub fn prefill<S: Scalar>(
    params: &MixerParams<S>,
    x: &Tensor<S>,
    chunk: usize,
) -> Result<(Tensor<S>, RecurrentState<S>)> {
    if chunk < 1 {
        return Err(Error::Parameter("chunk size must be >= 1".into()));
    }
    let proj = project_inputs(params, x)?;
    let t = proj.seq_len();
    let mut state = RecurrentState::new(params.dims);
    let block = params.dims.state_dim * params.dims.head_dim;
    let heads: Vec<Tensor<S>> = (0..params.dims.n_heads)
        .map(|h| scan_head(&proj, h, chunk, &mut state.ssm[h * block..(h + 1) * block]))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<S>> = heads.iter().collect();
    let y = finish(params, &proj, &Tensor::concat_cols(&refs)?)?;

    // Ring buffers hold the last K-1 pre-convolution inputs, oldest first.
    let bufs = [&mut state.conv_x, &mut state.conv_b, &mut state.conv_c];
    for (buf, pre) in bufs.into_iter().zip(&proj.pre_conv) {
        let width = pre.shape()[1];
        for slot in 0..CONV_WIDTH - 1 {
            if let Some(src) = (t + slot + 1).checked_sub(CONV_WIDTH) {
                buf[slot * width..(slot + 1) * width].copy_from_slice(pre.row(src));
            }
        }
    }
    state.position = t as u64;
    Ok((y, state))
}

/// Fixed-size decode state of one mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState<S> {
    dims: MixerDims,
    /// Per-head `N×P` blocks, head-major.
    ssm: Vec<S>,
    conv_x: Vec<S>,
    conv_b: Vec<S>,
    conv_c: Vec<S>,
    position: u64,
}

impl<S: Scalar> RecurrentState<S> {
    pub fn new(dims: MixerDims) -> Self {
        let k = CONV_WIDTH - 1;
        Self {
            dims,
            ssm: vec![S::zero(); dims.n_heads * dims.state_dim * dims.head_dim],
            conv_x: vec![S::zero(); k * dims.inner()],
            conv_b: vec![S::zero(); k * dims.bc_width()],
            conv_c: vec![S::zero(); k * dims.bc_width()],
            position: 0,
        }
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// `N×P` state of head `h`, row-major over (n, p).
    pub fn head_state(&self, h: usize) -> &[S] {
        let block = self.dims.state_dim * self.dims.head_dim;
        &self.ssm[h * block..(h + 1) * block]
    }

    pub fn head_state_mut(&mut self, h: usize) -> &mut [S] {
        let block = self.dims.state_dim * self.dims.head_dim;
        &mut self.ssm[h * block..(h + 1) * block]
    }

    /// Bytes held by the state: SSM blocks, conv ring buffers and the position counter.
    pub fn byte_size(&self) -> usize {
        let scalars = self.ssm.len() + self.conv_x.len() + self.conv_b.len() + self.conv_c.len();
        scalars * S::DTYPE.size_of() + std::mem::size_of::<u64>()
    }

    /// Byte size for the given dimensions, without allocating a state.
    pub fn byte_size_for(dims: MixerDims) -> usize {
        let k = CONV_WIDTH - 1;
        let scalars = dims.n_heads * dims.state_dim * dims.head_dim
            + k * (dims.inner() + 2 * dims.bc_width());
        scalars * S::DTYPE.size_of() + std::mem::size_of::<u64>()
    }

    pub fn ssm_norm(&self) -> S {
        self.ssm.iter().map(|&v| v * v).sum::<S>().sqrt()
    }
}

/// One convolution step against a ring buffer of the previous K-1 inputs.
fn conv_step<S: Scalar>(buf: &mut [S], kernel: &Tensor<S>, current: &[S]) -> Vec<S> {
    let c = current.len();
    let out = (0..c)
        .map(|ch| {
            let w = &kernel.data()[ch * CONV_WIDTH..(ch + 1) * CONV_WIDTH];
            let mut acc = S::zero();
            for (k, &wk) in w.iter().enumerate().take(CONV_WIDTH - 1) {
                acc += wk * buf[k * c + ch];
            }
            acc + w[CONV_WIDTH - 1] * current[ch]
        })
        .collect();
    buf.copy_within(c.., 0);
    buf[(CONV_WIDTH - 2) * c..].copy_from_slice(current);
    out
}

impl<S: Scalar> MixerParams<S> {
    /// Advances `state` by one token and returns the mixer output `[d]`.
    ///
    /// `force_decay` replaces every `a_t` with a fixed value; it exists to
    /// probe the memoryless (`a = 0`) and frozen-state (`a = 1`) limits.
    pub fn step(
        &self,
        state: &mut RecurrentState<S>,
        x_t: &[S],
        force_decay: Option<S>,
    ) -> Result<Vec<S>> {
        let dims = self.dims;
        if x_t.len() != dims.d_model {
            return Err(Error::dim("recurrent_step", &[x_t.len()], &[dims.d_model]));
        }
        if state.dims != dims {
            return Err(Error::Parameter("recurrent state built for other dims".into()));
        }
        let (h_count, n, p) = (dims.n_heads, dims.state_dim, dims.head_dim);
        let xh = conv_step(&mut state.conv_x, &self.conv_x, &self.w_x.forward_vec(x_t)?);
        let bt = conv_step(&mut state.conv_b, &self.conv_b, &self.w_b.forward_vec(x_t)?);
        let ct = conv_step(&mut state.conv_c, &self.conv_c, &self.w_c.forward_vec(x_t)?);
        let z = self.w_z.forward_vec(x_t)?;
        let a_logit = self.w_a.forward_vec(x_t)?;

        let mut gated = vec![S::zero(); dims.inner()];
        for h in 0..h_count {
            let a = force_decay.unwrap_or_else(|| sigmoid(a_logit[h] + self.b_a.data()[h]));
            let s = state.head_state_mut(h);
            let (b, c, x) = (
                &bt[h * n..(h + 1) * n],
                &ct[h * n..(h + 1) * n],
                &xh[h * p..(h + 1) * p],
            );
            for (ni, &bn) in b.iter().enumerate() {
                for (pi, &xp) in x.iter().enumerate() {
                    let v = &mut s[ni * p + pi];
                    *v = a * *v + bn * xp;
                }
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite recurrent state in head {h} at position {}",
                    state.position
                )));
            }
            let dh = self.d_skip.data()[h];
            for pi in 0..p {
                let mut y = S::zero();
                for (ni, &cn) in c.iter().enumerate() {
                    y += cn * s[ni * p + pi];
                }
                let col = h * p + pi;
                y += dh * x[pi];
                gated[col] = y * silu(z[col] + self.b_z.data()[col]);
            }
        }
        state.position += 1;
        self.w_out.forward_vec(&gated)
    }
}

/// Functional form of [`MixerParams::step`].
pub fn recurrent_step<S: Scalar>(
    params: &MixerParams<S>,
    mut state: RecurrentState<S>,
    x_t: &Tensor<S>,
) -> Result<(RecurrentState<S>, Tensor<S>)> {
    let y = params.step(&mut state, x_t.data(), None)?;
    let d = y.len();
    Ok((state, Tensor::new(vec![d], y)?))
}

/// Runs the recurrence over a whole sequence from a zero state.
pub fn forward_recurrent<S: Scalar>(params: &MixerParams<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let (t, d) = x.dims2()?;
    let mut state = RecurrentState::new(params.dims);
    let mut out = Vec::with_capacity(t * d);
    for i in 0..t {
        out.extend(params.step(&mut state, x.row(i), None)?);
    }
    Tensor::new(vec![t, d], out)
}

/// What a taped mixer forward should build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapedMixer {
    /// Only the per-head mixing matrices (matrix orientation).
    MatricesOnly,
    /// Matrices and the full mixer output.
    Full,
}

#[derive(Debug, Clone)]
pub struct MixerTrace {
    /// `[T × d]`, absent in [`TapedMixer::MatricesOnly`] mode.
    pub output: Option<Var>,
    /// One `[T × T]` mixing matrix per head.
    pub matrices: Vec<Var>,
}

/// Differentiable mixer forward on a tape, through the materialized matrices.
/// Parameters are looked up in `vars` as `{prefix}.{name}`, or bare names when
/// `prefix` is empty.
pub fn taped_mixer<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &VarMap,
    prefix: &str,
    dims: MixerDims,
    u: Var,
    mode: TapedMixer,
) -> Result<MixerTrace> {
    let var = |name: &str| {
        if prefix.is_empty() {
            vars.get(name)
        } else {
            vars.get(&format!("{prefix}.{name}"))
        }
    };
    let (t, _) = tape.value(u).dims2()?;
    let (h_count, n, p) = (dims.n_heads, dims.state_dim, dims.head_dim);

    let b_pre = tape.matmul(u, var("w_b")?)?;
    let b = tape.causal_conv(b_pre, var("conv_b")?)?;
    let c_pre = tape.matmul(u, var("w_c")?)?;
    let c = tape.causal_conv(c_pre, var("conv_c")?)?;
    let a_lin = tape.matmul(u, var("w_a")?)?;
    let a_bias = tape.broadcast_rows(var("b_a")?, t)?;
    let a_logit = tape.add(a_lin, a_bias)?;
    let a = tape.sigmoid(a_logit)?;

    let mut matrices = Vec::with_capacity(h_count);
    for h in 0..h_count {
        let bh = tape.slice_cols(b, h * n, n)?;
        let ch = tape.slice_cols(c, h * n, n)?;
        let ah = tape.slice_cols(a, h, 1)?;
        let decay = tape.decay_matrix(ah)?;
        let bt = tape.transpose(bh)?;
        let gram = tape.matmul(ch, bt)?;
        matrices.push(tape.mul(gram, decay)?);
    }
    if mode == TapedMixer::MatricesOnly {
        return Ok(MixerTrace {
            output: None,
            matrices,
        });
    }

    let x_pre = tape.matmul(u, var("w_x")?)?;
    let xhat = tape.causal_conv(x_pre, var("conv_x")?)?;
    let z_lin = tape.matmul(u, var("w_z")?)?;
    let z_bias = tape.broadcast_rows(var("b_z")?, t)?;
    let z = tape.add(z_lin, z_bias)?;

    let mut heads = Vec::with_capacity(h_count);
    for (h, &m) in matrices.iter().enumerate() {
        let xh = tape.slice_cols(xhat, h * p, p)?;
        heads.push(tape.matmul(m, xh)?);
    }
    let y = tape.concat_cols(&heads)?;
    // D is per head; spread it over each head's P columns with a constant 0/1 matrix.
    let spread = tape.constant(Tensor::from_fn(&[h_count, h_count * p], |ix| {
        if ix[1] / p == ix[0] {
            S::one()
        } else {
            S::zero()
        }
    }));
    let d_row = tape.reshape(var("d")?, &[1, h_count])?;
    let d_cols = tape.matmul(d_row, spread)?;
    let d_full = tape.broadcast_rows(d_cols, t)?;
    let skip = tape.mul(xhat, d_full)?;
    let y = tape.add(y, skip)?;
    let gate = tape.silu(z)?;
    let gated = tape.mul(y, gate)?;
    let output = tape.matmul(gated, var("w_out")?)?;
    Ok(MixerTrace {
        output: Some(output),
        matrices,
    })
}
