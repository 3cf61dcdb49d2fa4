//! 4-bit asymmetric group quantization.
//!
//! Groups of `group_size` consecutive elements tile the innermost dimension
//! (the last group of a row may be short). Each group stores an f32 scale and
//! a 4-bit zero point; element codes are packed two per byte, low nibble
//! first, in row-major element order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_GROUP_SIZE: usize = 32;
const MAX_CODE: i32 = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    shape: Vec<usize>,
    group_size: usize,
    scales: Vec<f32>,
    zero_points: Vec<u8>,
    codes: Vec<u8>,
}

fn pack_nibbles(values: &[u8]) -> Vec<u8> {
    values
        .chunks(2)
        .map(|pair| (pair[0] & 0x0f) | (pair.get(1).copied().unwrap_or(0) << 4))
        .collect()
}

fn nibble(packed: &[u8], i: usize) -> u8 {
    let byte = packed[i / 2];
    if i.is_multiple_of(2) {
        byte & 0x0f
    } else {
        byte >> 4
    }
}

/// Quantization parameters for one group: (scale, zero point, codes).
fn quantize_group(values: &[f64]) -> (f32, u8, Vec<u8>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        // Constant group: one code step of exactly |c| reproduces c.
        let c = lo as f32;
        return match c.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => (c, 0, vec![1; values.len()]),
            Some(std::cmp::Ordering::Less) => (-c, 1, vec![0; values.len()]),
            _ => (1.0, 0, vec![0; values.len()]),
        };
    }
    // The range always contains zero so that the zero point is a valid code.
    let lo = lo.min(0.0);
    let hi = hi.max(0.0);
    let mut scale = ((hi - lo) / MAX_CODE as f64) as f32;
    // Round the scale up so that 15 steps always cover [lo, hi].
    if (scale as f64) * (MAX_CODE as f64) < hi - lo {
        scale = scale.next_up();
    }
    let s = scale as f64;
    let zp = (-lo / s).round().clamp(0.0, MAX_CODE as f64) as i32;
    let codes = values
        .iter()
        .map(|&w| ((w / s).round() as i32 + zp).clamp(0, MAX_CODE) as u8)
        .collect();
    (scale, zp as u8, codes)
}

impl QuantTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// Unpacked zero points, one per group.
    pub fn zero_points(&self) -> Vec<u8> {
        (0..self.scales.len())
            .map(|g| nibble(&self.zero_points, g))
            .collect()
    }

    pub fn packed_zero_points(&self) -> &[u8] {
        &self.zero_points
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn code(&self, i: usize) -> u8 {
        nibble(&self.codes, i)
    }

    fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    fn groups_per_row(&self) -> usize {
        self.cols().div_ceil(self.group_size)
    }

    pub fn n_groups(&self) -> usize {
        self.scales.len()
    }

    /// Group index of flat element `i`.
    fn group_of(&self, i: usize) -> usize {
        let cols = self.cols();
        (i / cols) * self.groups_per_row() + (i % cols) / self.group_size
    }

    /// Payload bytes: packed codes, packed zero points and f32 scales.
    pub fn byte_size(&self) -> usize {
        self.codes.len() + self.zero_points.len() + 4 * self.scales.len()
    }

    pub fn bits_per_weight(&self) -> f64 {
        8.0 * self.byte_size() as f64 / self.len() as f64
    }

    /// Reassembles a tensor from its packed parts, validating every length.
    pub fn from_parts(
        shape: Vec<usize>,
        group_size: usize,
        scales: Vec<f32>,
        zero_points: Vec<u8>,
        codes: Vec<u8>,
    ) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || group_size == 0 {
            return Err(Error::Shape {
                shape,
                reason: "invalid quantized tensor shape or group size".into(),
            });
        }
        let n: usize = shape.iter().product();
        let cols = *shape.last().expect("non-empty");
        let groups = (n / cols) * cols.div_ceil(group_size);
        if scales.len() != groups
            || zero_points.len() != groups.div_ceil(2)
            || codes.len() != n.div_ceil(2)
        {
            return Err(Error::Format(format!(
                "quantized payload lengths do not match shape {shape:?}"
            )));
        }
        Ok(Self {
            shape,
            group_size,
            scales,
            zero_points,
            codes,
        })
    }

    pub fn dequantize<S: Scalar>(&self) -> Tensor<S> {
        let zps = self.zero_points();
        let data = (0..self.len())
            .map(|i| {
                let g = self.group_of(i);
                dequant_value(self.code(i), zps[g], self.scales[g])
            })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("valid shape")
    }
}

fn dequant_value<S: Scalar>(code: u8, zp: u8, scale: f32) -> S {
    S::lit((code as i32 - zp as i32) as f64) * S::lit(scale as f64)
}

/// Quantizes `w` in groups of `group_size` along its innermost dimension.
pub fn quantize<S: Scalar>(name: &str, w: &Tensor<S>, group_size: usize) -> Result<QuantTensor> {
    if group_size == 0 {
        return Err(Error::Quantize {
            tensor: name.into(),
            reason: "group size must be >= 1".into(),
        });
    }
    if let Some(pos) = w.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Quantize {
            tensor: name.into(),
            reason: format!("non-finite weight at flat index {pos}"),
        });
    }
    let cols = *w.shape().last().expect("rank >= 1");
    let mut scales = Vec::new();
    let mut zps = Vec::new();
    let mut codes = Vec::with_capacity(w.len());
    for row in w.data().chunks(cols) {
        for group in row.chunks(group_size) {
            let vals: Vec<f64> = group.iter().map(|v| v.as_f64()).collect();
            let (scale, zp, c) = quantize_group(&vals);
            scales.push(scale);
            zps.push(zp);
            codes.extend(c);
        }
    }
    QuantTensor::from_parts(
        w.shape().to_vec(),
        group_size,
        scales,
        pack_nibbles(&zps),
        pack_nibbles(&codes),
    )
}

/// `q[M×K] · x[K]`, dequantizing on the fly. Bit-identical to
/// `matmul(dequantize(q), x)`.
pub fn dequant_matmul<S: Scalar>(q: &QuantTensor, x: &[S]) -> Result<Vec<S>> {
    let (m, k) = match q.shape() {
        [m, k] => (*m, *k),
        other => return Err(Error::dim("dequant_matmul", other, &[x.len()])),
    };
    if x.len() != k {
        return Err(Error::dim("dequant_matmul", q.shape(), &[x.len()]));
    }
    let gpr = q.groups_per_row();
    let mut out = Vec::with_capacity(m);
    for row in 0..m {
        let mut acc = S::zero();
        for g in 0..gpr {
            let gi = row * gpr + g;
            let scale = q.scales[gi];
            let zp = nibble(&q.zero_points, gi);
            let start = g * q.group_size;
            let end = (start + q.group_size).min(k);
            for col in start..end {
                let w: S = dequant_value(q.code(row * k + col), zp, scale);
                if w == S::zero() {
                    continue;
                }
                acc += w * x[col];
            }
        }
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_groups_are_exact() {
        for c in [0.7f32, -0.7, 0.0] {
            let w = Tensor::<f32>::full(&[2, 40], c);
            let q = quantize("w", &w, 32).unwrap();
            assert_eq!(q.dequantize::<f32>(), w);
        }
    }

    #[test]
    fn codes_in_range_and_ragged_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::<f32>::randn(&[3, 70], 1.0, &mut rng);
        let q = quantize("w", &w, 32).unwrap();
        assert_eq!(q.n_groups(), 9);
        assert!((0..q.len()).all(|i| q.code(i) <= 15));
        assert!(q.zero_points().iter().all(|&z| z <= 15));
    }

    #[test]
    fn all_positive_group_respects_error_bound() {
        let w = Tensor::<f32>::from_fn(&[1, 32], |ix| 1.0 + ix[1] as f32 / 31.0);
        let q = quantize("w", &w, 32).unwrap();
        let d = q.dequantize::<f32>();
        let bound = q.scales()[0] / 2.0 + 1e-7;
        assert!(w.max_abs_diff(&d).unwrap() <= bound);
    }

    #[test]
    fn random_group_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::<f32>::randn(&[1, 32], 1.0, &mut rng);
        let q = quantize("w", &w, 32).unwrap();
        let d = q.dequantize::<f32>();
        for (a, b) in w.data().iter().zip(d.data()) {
            assert!((a - b).abs() <= q.scales()[0] / 2.0 + 1e-7);
        }
    }

    #[test]
    fn non_finite_weight_names_tensor() {
        let w = Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        let err = quantize("blocks.0.w_x", &w, 32).unwrap_err();
        assert!(err.to_string().contains("blocks.0.w_x"));
    }

    #[test]
    fn packing_is_low_nibble_first() {
        let w = Tensor::<f32>::new(vec![1, 3], vec![0.0, 15.0, 7.0]).unwrap();
        let q = quantize("w", &w, 32).unwrap();
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(q.packed_codes(), &[0xf0, 0x07]);
    }

    #[test]
    fn dequant_matmul_matches_reference_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::<f32>::randn(&[8, 32], 1.0, &mut rng);
        let x = Tensor::<f32>::randn(&[32, 1], 1.0, &mut rng);
        let q = quantize("w", &w, 32).unwrap();
        let fused = dequant_matmul(&q, x.data()).unwrap();
        let reference = q.dequantize::<f32>().matmul(&x).unwrap();
        assert_eq!(fused.as_slice(), reference.data());
        assert!(dequant_matmul(&q, &[0.0f32; 31]).is_err());
    }

    #[test]
    fn identity_and_zero_input() {
        let q = quantize("eye", &Tensor::<f32>::eye(8), 32).unwrap();
        let x: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
        let y = dequant_matmul(&q, &x).unwrap();
        let bound: f32 = q.scales().iter().fold(0.0f32, |m, &s| m.max(s)) / 2.0;
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= bound * x.iter().map(|v| v.abs()).sum::<f32>() + 1e-6);
        }
        assert!(dequant_matmul(&q, &[0.0f32; 8]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bits_per_weight_accounting() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::<f32>::randn(&[64, 256], 1.0, &mut rng);
        let q = quantize("w", &w, 32).unwrap();
        let n = w.len();
        assert!(q.byte_size() <= n.div_ceil(2) + n / 32 * 5);
        assert!((q.bits_per_weight() - 4.0).abs() < 1.25);
    }
}
