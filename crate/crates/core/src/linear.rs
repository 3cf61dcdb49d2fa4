//! Linear-layer weights that are either dense or 4-bit quantized.

use crate::error::{Error, Result};
use crate::quant::{dequant_matmul, quantize, QuantTensor};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A weight applied as `x · W`.
///
/// Dense weights are stored `[in × out]`. Quantized weights are stored
/// transposed, `[out × in]`, so that quantization groups run along the input
/// dimension and each output is one [`dequant_matmul`] row.
#[derive(Debug, Clone, PartialEq)]
pub enum Linear<S> {
    Dense(Tensor<S>),
    Quant(QuantTensor),
}

impl<S: Scalar> Linear<S> {
    pub fn in_dim(&self) -> usize {
        match self {
            Linear::Dense(w) => w.shape()[0],
            Linear::Quant(q) => q.shape()[1],
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Linear::Dense(w) => w.shape()[1],
            Linear::Quant(q) => q.shape()[0],
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Linear::Quant(_))
    }

    pub fn dense(&self) -> Option<&Tensor<S>> {
        match self {
            Linear::Dense(w) => Some(w),
            Linear::Quant(_) => None,
        }
    }

    pub fn dense_mut(&mut self) -> Option<&mut Tensor<S>> {
        match self {
            Linear::Dense(w) => Some(w),
            Linear::Quant(_) => None,
        }
    }

    pub fn byte_size(&self) -> usize {
        match self {
            Linear::Dense(w) => w.byte_size(),
            Linear::Quant(q) => q.byte_size(),
        }
    }

    /// The `[in × out]` weight, dequantizing if necessary.
    pub fn to_dense(&self) -> Tensor<S> {
        match self {
            Linear::Dense(w) => w.clone(),
            Linear::Quant(q) => q
                .dequantize::<S>()
                .transpose()
                .expect("quantized linear weights are rank 2"),
        }
    }

    pub fn quantized(&self, name: &str, group_size: usize) -> Result<Self> {
        match self {
            Linear::Dense(w) => Ok(Linear::Quant(quantize(name, &w.transpose()?, group_size)?)),
            Linear::Quant(_) => Err(Error::Quantize {
                tensor: name.into(),
                reason: "already quantized".into(),
            }),
        }
    }

    /// `[T × in] → [T × out]`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Linear::Dense(w) => x.matmul(w),
            Linear::Quant(q) => {
                let (t, k) = x.dims2()?;
                if k != self.in_dim() {
                    return Err(Error::dim("linear", x.shape(), q.shape()));
                }
                let mut out = Vec::with_capacity(t * self.out_dim());
                for i in 0..t {
                    out.extend(dequant_matmul(q, x.row(i))?);
                }
                Tensor::new(vec![t, self.out_dim()], out)
            }
        }
    }

    pub fn forward_vec(&self, x: &[S]) -> Result<Vec<S>> {
        match self {
            Linear::Dense(w) => {
                let (k, n) = w.dims2()?;
                if x.len() != k {
                    return Err(Error::dim("linear", &[x.len()], w.shape()));
                }
                let mut out = vec![S::zero(); n];
                crate::tensor::matmul_into(x, w.data(), &mut out, 1, k, n);
                Ok(out)
            }
            Linear::Quant(q) => dequant_matmul(q, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantized_forward_tracks_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::<f32>::randn(&[40, 6], 0.1, &mut rng);
        let x = Tensor::<f32>::randn(&[3, 40], 1.0, &mut rng);
        let dense = Linear::Dense(w);
        let q = dense.quantized("w", 32).unwrap();
        assert_eq!((q.in_dim(), q.out_dim()), (40, 6));
        let exact = x.matmul(&q.to_dense()).unwrap();
        let got = q.forward(&x).unwrap();
        assert!(exact.max_abs_diff(&got).unwrap() < 1e-5);
        assert!(q.quantized("w", 32).is_err());
        assert_eq!(
            dense.forward_vec(x.row(1)).unwrap().as_slice(),
            dense.forward(&x).unwrap().row(1)
        );
    }
}
