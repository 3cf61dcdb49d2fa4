//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            eps: 1e-8,
        }
    }
}

/// Moments keyed by parameter name plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub hyper: AdamW,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<S>>,
    pub v: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for OptimizerState<S> {
    fn default() -> Self {
        Self::new(AdamW::default())
    }
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(hyper: AdamW) -> Self {
        Self {
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One AdamW update of a flat parameter slice. `t` is the 1-based step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<S: Scalar>(
    theta: &mut [S],
    grad: &[S],
    m: &mut [S],
    v: &mut [S],
    t: u64,
    lr: f64,
    hyper: &AdamW,
    decay: bool,
) {
    let (b1, b2) = (S::lit(hyper.beta1), S::lit(hyper.beta2));
    let one = S::one();
    let c1 = one - b1.powi(t as i32);
    let c2 = one - b2.powi(t as i32);
    let (lr, eps) = (S::lit(lr), S::lit(hyper.eps));
    let wd = if decay { S::lit(hyper.weight_decay) } else { S::zero() };
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
    }
}

/// Whether weight decay applies to a parameter: matrices only, excluding conv kernels.
pub fn decays(name: &str, t: &Tensor<impl Scalar>) -> bool {
    t.rank() == 2 && !name.contains("conv")
}

/// Applies one AdamW step to every parameter that has an entry in `grads`.
pub fn adamw_step<S: Scalar, P: ParamSet<S> + ?Sized>(
    params: &mut P,
    grads: &BTreeMap<String, Tensor<S>>,
    opt: &mut OptimizerState<S>,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::Parameter(format!("learning rate must be >= 0, got {lr}")));
    }
    let mut err = None;
    let mut seen = 0;
    let t = opt.step + 1;
    let hyper = opt.hyper;
    params.for_each_dense_mut(&mut |name, theta| {
        let Some(g) = grads.get(name) else { return };
        seen += 1;
        if g.shape() != theta.shape() {
            err.get_or_insert(Error::dim("adamw_step", theta.shape(), g.shape()));
            return;
        }
        let m = opt
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(theta.shape()));
        let v = opt
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(theta.shape()));
        if m.shape() != theta.shape() || v.shape() != theta.shape() {
            err.get_or_insert(Error::dim("adamw_step moments", theta.shape(), m.shape()));
            return;
        }
        let decay = decays(name, theta);
        adamw_update(
            theta.data_mut(),
            g.data(),
            m.data_mut(),
            v.data_mut(),
            t,
            lr,
            &hyper,
            decay,
        );
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != grads.len() {
        return Err(Error::Parameter(
            "gradient supplied for an unknown or quantized parameter".into(),
        ));
    }
    opt.step = t;
    Ok(())
}
