//! The three distillation objectives, eager and on a tape.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax_rows, softmax_rows, SoftmaxMask, Tensor};

fn check_matrices<S: Scalar>(m: &Tensor<S>, a: &Tensor<S>) -> Result<(usize, usize)> {
    if m.rank() != 3 || a.rank() != 3 {
        return Err(Error::Alignment(format!(
            "mixer and attention matrices must be [H × T × T], got {:?} and {:?}",
            m.shape(),
            a.shape()
        )));
    }
    if m.shape()[0] != a.shape()[0] {
        return Err(Error::Alignment(format!(
            "student has {} heads, teacher {}",
            m.shape()[0],
            a.shape()[0]
        )));
    }
    if m.shape() != a.shape() || m.shape()[1] != m.shape()[2] {
        return Err(Error::dim("matrix_orientation_loss", m.shape(), a.shape()));
    }
    Ok((m.shape()[0], m.shape()[1]))
}

/// Mean over heads of `‖M − A‖²_F / T²`.
pub fn matrix_orientation_loss<S: Scalar>(m: &Tensor<S>, a: &Tensor<S>) -> Result<S> {
    matrix_orientation_loss_with(m, a, false)
}

/// As [`matrix_orientation_loss`], optionally dividing each student row by its sum first.
pub fn matrix_orientation_loss_with<S: Scalar>(
    m: &Tensor<S>,
    a: &Tensor<S>,
    row_normalize: bool,
) -> Result<S> {
    let (h, t) = check_matrices(m, a)?;
    let mut total = S::zero();
    for (mrow, arow) in m.data().chunks(t).zip(a.data().chunks(t)) {
        let norm = if row_normalize {
            let s: S = mrow.iter().copied().sum();
            if s == S::zero() {
                S::one()
            } else {
                s
            }
        } else {
            S::one()
        };
        for (&x, &y) in mrow.iter().zip(arow) {
            let d = x / norm - y;
            total += d * d;
        }
    }
    Ok(total / S::lit((h * t * t) as f64))
}

/// Mean over positions of `‖s − t‖² / d`.
pub fn hidden_state_alignment_loss<S: Scalar>(student: &Tensor<S>, teacher: &Tensor<S>) -> Result<S> {
    let (t, d) = student.dims2()?;
    if student.shape() != teacher.shape() {
        return Err(Error::dim("hidden_state_alignment_loss", student.shape(), teacher.shape()));
    }
    let total: S = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(total / S::lit((t * d) as f64))
}

/// Entropy and KL parts of the distillation loss, each averaged over positions.
pub fn kd_parts<S: Scalar>(student_logits: &Tensor<S>, teacher_logits: &Tensor<S>) -> Result<(S, S)> {
    let (t, _) = student_logits.dims2()?;
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::dim("kd_loss", student_logits.shape(), teacher_logits.shape()));
    }
    let lp_s = log_softmax_rows(student_logits)?;
    let lp_t = log_softmax_rows(teacher_logits)?;
    let (mut entropy, mut kl) = (S::zero(), S::zero());
    for (&ls, &lt) in lp_s.data().iter().zip(lp_t.data()) {
        let p = lt.exp();
        if p > S::zero() {
            entropy -= p * lt;
            kl += p * (lt - ls);
        }
    }
    let n = S::lit(t as f64);
    Ok((entropy / n, kl / n))
}

/// Mean over positions of `CE(softmax(teacher), log_softmax(student))`.
pub fn kd_loss<S: Scalar>(student_logits: &Tensor<S>, teacher_logits: &Tensor<S>) -> Result<S> {
    let (t, _) = student_logits.dims2()?;
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::dim("kd_loss", student_logits.shape(), teacher_logits.shape()));
    }
    let lp_s = log_softmax_rows(student_logits)?;
    let p_t = softmax_rows(teacher_logits, &SoftmaxMask::None)?;
    let total: S = p_t
        .data()
        .iter()
        .zip(lp_s.data())
        .map(|(&p, &l)| -p * l)
        .sum();
    Ok(total / S::lit(t as f64))
}

/// Matrix orientation loss for one layer on a tape; `matrices` holds one `[T × T]` var per head.
pub fn taped_orientation_loss<S: Scalar>(
    tape: &mut Tape<S>,
    matrices: &[Var],
    teacher: &Tensor<S>,
) -> Result<Var> {
    if teacher.rank() != 3 || teacher.shape()[0] != matrices.len() {
        return Err(Error::Alignment(format!(
            "student has {} heads, teacher attention is {:?}",
            matrices.len(),
            teacher.shape()
        )));
    }
    let t = teacher.shape()[1];
    let mut total: Option<Var> = None;
    for (h, &m) in matrices.iter().enumerate() {
        let target = tape.constant(teacher.index_outer(h)?);
        let d = tape.sq_dist(m, target)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
    }
    let total = total.ok_or_else(|| Error::Alignment("no heads".into()))?;
    tape.scale(total, S::one() / S::lit((matrices.len() * t * t) as f64))
}

pub fn taped_alignment_loss<S: Scalar>(
    tape: &mut Tape<S>,
    student: Var,
    teacher: &Tensor<S>,
) -> Result<Var> {
    let target = tape.constant(teacher.clone());
    let d = tape.sq_dist(student, target)?;
    tape.scale(d, S::one() / S::lit(teacher.len() as f64))
}

pub fn taped_kd_loss<S: Scalar>(
    tape: &mut Tape<S>,
    student_logits: Var,
    teacher_logits: &Tensor<S>,
) -> Result<Var> {
    let p_t = softmax_rows(teacher_logits, &SoftmaxMask::None)?;
    tape.cross_entropy(student_logits, p_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn orientation_cases() {
        let a = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut rng(1));
        assert_eq!(matrix_orientation_loss(&a, &a).unwrap(), 0.0);
        let one = Tensor::<f64>::ones(&[1, 1, 1]);
        assert_eq!(matrix_orientation_loss(&Tensor::zeros(&[1, 1, 1]), &one).unwrap(), 1.0);
        let m = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut rng(2));
        let mut expect = 0.0;
        for h in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let k = h * 9 + i * 3 + j;
                    expect += (m.data()[k] - a.data()[k]).powi(2) / 9.0;
                }
            }
        }
        expect /= 2.0;
        assert!((matrix_orientation_loss(&m, &a).unwrap() - expect).abs() < 1e-14);
        let three = Tensor::<f64>::zeros(&[3, 3, 3]);
        assert!(matches!(matrix_orientation_loss(&three, &a), Err(Error::Alignment(_))));
    }

    #[test]
    fn row_normalized_orientation() {
        let m = Tensor::new(vec![1, 2, 2], vec![2.0f64, 0.0, 1.0, 3.0]).unwrap();
        let a = Tensor::new(vec![1, 2, 2], vec![1.0f64, 0.0, 0.25, 0.75]).unwrap();
        assert_eq!(matrix_orientation_loss_with(&m, &a, true).unwrap(), 0.0);
    }

    #[test]
    fn alignment_cases() {
        let x = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng(3));
        assert_eq!(hidden_state_alignment_loss(&x, &x).unwrap(), 0.0);
        let y = x.add(&Tensor::ones(&[4, 5])).unwrap();
        assert!((hidden_state_alignment_loss(&y, &x).unwrap() - 1.0).abs() < 1e-14);
        let z = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng(4));
        let mut expect = 0.0;
        for t in 0..4 {
            let mut s = 0.0;
            for j in 0..5 {
                s += (x.at2(t, j) - z.at2(t, j)).powi(2);
            }
            expect += s / 5.0;
        }
        expect /= 4.0;
        assert!((hidden_state_alignment_loss(&x, &z).unwrap() - expect).abs() < 1e-14);
        assert!(hidden_state_alignment_loss(&x, &Tensor::zeros(&[4, 4])).is_err());
    }

    #[test]
    fn kd_cases() {
        let uniform = Tensor::<f64>::zeros(&[1, 4]);
        assert!((kd_loss(&uniform, &uniform).unwrap() - 4f64.ln()).abs() < 1e-14);

        let mut t = vec![0.0f64; 5];
        t[2] = 60.0;
        let teacher = Tensor::new(vec![1, 5], t).unwrap();
        let student = Tensor::new(vec![1, 5], vec![0.3f64, -1.0, 0.5, 2.0, 0.0]).unwrap();
        let lsm = log_softmax_rows(&student).unwrap();
        assert!((kd_loss(&student, &teacher).unwrap() + lsm.data()[2]).abs() < 1e-12);

        let s = Tensor::<f64>::randn(&[2, 5], 1.0, &mut rng(5));
        let tl = Tensor::<f64>::randn(&[2, 5], 1.0, &mut rng(6));
        let mut expect = 0.0;
        for r in 0..2 {
            let zs: f64 = s.row(r).iter().map(|v| v.exp()).sum();
            let zt: f64 = tl.row(r).iter().map(|v| v.exp()).sum();
            for c in 0..5 {
                let p = tl.at2(r, c).exp() / zt;
                expect -= p * (s.at2(r, c).exp() / zs).ln();
            }
        }
        expect /= 2.0;
        assert!((kd_loss(&s, &tl).unwrap() - expect).abs() < 1e-12);
        let (h, kl) = kd_parts(&s, &tl).unwrap();
        assert!((h + kl - expect).abs() < 1e-12);
        let (h_same, kl_same) = kd_parts(&tl, &tl).unwrap();
        assert!(kl_same.abs() < 1e-14);
        assert!((kd_loss(&tl, &tl).unwrap() - h_same).abs() < 1e-12);
        assert!(kd_loss(&s, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn taped_losses_match_eager() {
        let m = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut rng(7));
        let a = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut rng(8));
        let mut tape = Tape::new();
        let heads: Vec<Var> = (0..2)
            .map(|h| tape.leaf(format!("m{h}"), m.index_outer(h).unwrap(), true))
            .collect();
        let l = taped_orientation_loss(&mut tape, &heads, &a).unwrap();
        let eager = matrix_orientation_loss(&m, &a).unwrap();
        assert!((tape.value(l).item().unwrap() - eager).abs() < 1e-14);
        assert!(taped_orientation_loss(&mut tape, &heads[..1], &a).is_err());

        let s = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng(9));
        let t = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng(10));
        let sv = tape.leaf("s", s.clone(), true);
        let l = taped_alignment_loss(&mut tape, sv, &t).unwrap();
        assert!((tape.value(l).item().unwrap() - hidden_state_alignment_loss(&s, &t).unwrap()).abs() < 1e-14);
        let l = taped_kd_loss(&mut tape, sv, &t).unwrap();
        assert!((tape.value(l).item().unwrap() - kd_loss(&s, &t).unwrap()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_zero_on_match(
            seed in 0u64..10_000,
            t in 1usize..6,
        ) {
            let mut r = rng(seed);
            let a = Tensor::<f64>::randn(&[2, t, t], 1.0, &mut r);
            let m = Tensor::<f64>::randn(&[2, t, t], 1.0, &mut r);
            prop_assert!(matrix_orientation_loss(&m, &a).unwrap() > 0.0);
            prop_assert_eq!(matrix_orientation_loss(&a, &a).unwrap(), 0.0);
            let x = Tensor::<f64>::randn(&[t, 3], 1.0, &mut r);
            let y = Tensor::<f64>::randn(&[t, 3], 1.0, &mut r);
            prop_assert!(hidden_state_alignment_loss(&x, &y).unwrap() > 0.0);
            prop_assert_eq!(hidden_state_alignment_loss(&x, &x).unwrap(), 0.0);
            let (_, kl) = kd_parts(&x, &y).unwrap();
            prop_assert!(kl >= -1e-12);
            let (_, kl0) = kd_parts(&x, &x).unwrap();
            prop_assert!(kl0.abs() < 1e-12);
        }
    }
}
