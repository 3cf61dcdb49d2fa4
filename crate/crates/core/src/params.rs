//! Named parameter traversal shared by the trainer, the serializer and weight transfer.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub enum Slot<'a, S> {
    Tensor(&'a Tensor<S>),
    Linear(&'a Linear<S>),
}

pub enum SlotMut<'a, S> {
    Tensor(&'a mut Tensor<S>),
    Linear(&'a mut Linear<S>),
}

/// Anything that owns a fixed, ordered set of named weights.
pub trait ParamSet<S: Scalar> {
    /// Visits every weight in a stable order with its dotted name.
    fn visit(&self, f: &mut dyn FnMut(&str, Slot<'_, S>));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, SlotMut<'_, S>));

    /// Dense view of every floating-point weight; quantized weights are skipped.
    fn dense_params(&self) -> BTreeMap<String, Tensor<S>> {
        let mut out = BTreeMap::new();
        self.visit(&mut |name, slot| {
            let t = match slot {
                Slot::Tensor(t) => Some(t),
                Slot::Linear(l) => l.dense(),
            };
            if let Some(t) = t {
                out.insert(name.to_string(), t.clone());
            }
        });
        out
    }

    fn for_each_dense_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.visit_mut(&mut |name, slot| {
            let t = match slot {
                SlotMut::Tensor(t) => Some(t),
                SlotMut::Linear(l) => l.dense_mut(),
            };
            if let Some(t) = t {
                f(name, t);
            }
        });
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name.to_string()));
        names
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, slot| {
            n += match slot {
                Slot::Tensor(t) => t.len(),
                Slot::Linear(Linear::Dense(w)) => w.len(),
                Slot::Linear(Linear::Quant(q)) => q.len(),
            }
        });
        n
    }

    fn weight_bytes(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, slot| {
            n += match slot {
                Slot::Tensor(t) => t.byte_size(),
                Slot::Linear(l) => l.byte_size(),
            }
        });
        n
    }

    fn is_quantized(&self) -> bool {
        let mut q = false;
        self.visit(&mut |_, slot| {
            if let Slot::Linear(Linear::Quant(_)) = slot {
                q = true;
            }
        });
        q
    }
}

/// Tape handles for a model's weights, looked up by dotted name.
#[derive(Debug, Default, Clone)]
pub struct VarMap {
    vars: HashMap<String, Var>,
}

impl VarMap {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Autodiff(format!("parameter `{name}` not registered")))
    }

    pub fn insert(&mut self, name: String, var: Var) {
        self.vars.insert(name, var);
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Puts every dense weight of `model` on the tape as a leaf. Weights for which
/// `trainable` returns false are frozen leaves.
pub fn register_params<S: Scalar, P: ParamSet<S> + ?Sized>(
    tape: &mut Tape<S>,
    model: &P,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<VarMap> {
    let mut vars = VarMap::default();
    let mut err = None;
    model.visit(&mut |name, slot| {
        let t = match slot {
            Slot::Tensor(t) => t,
            Slot::Linear(l) => match l.dense() {
                Some(t) => t,
                None => {
                    err = Some(Error::Input(format!(
                        "`{name}` is quantized; training needs dense weights"
                    )));
                    return;
                }
            },
        };
        let v = tape.leaf(name, t.clone(), trainable(name));
        vars.insert(name.to_string(), v);
    });
    match err {
        Some(e) => Err(e),
        None => Ok(vars),
    }
}
