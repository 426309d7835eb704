//! Distillation terms and the total pretraining loss.

use crate::error::{Error, Result};
use crate::numerics::ops::{log_softmax_rows, softmax_rows};
use crate::numerics::{CustomOp, Matrix, Tape, Var};

/// Teacher outputs for one sequence.
#[derive(Debug, Clone)]
pub struct DistillTargets {
    /// `seq × vocab`
    pub logits: Matrix,
    /// Embedding output followed by every block output.
    pub hidden: Vec<Matrix>,
}

/// Forward KL `KL(p_t ‖ p_s)` at temperature `t`, averaged over rows.
pub fn kl_divergence(student: &Matrix, teacher: &Matrix, t: f64) -> Result<f64> {
    student.same_shape(teacher, "kl_divergence")?;
    let ls = log_softmax_rows(&student.scale(1.0 / t));
    let lt = log_softmax_rows(&teacher.scale(1.0 / t));
    let mut total = 0.0;
    for (s, tt) in ls.data().iter().zip(lt.data()) {
        let p = tt.exp();
        if p > 0.0 {
            total += p * (tt - s);
        }
    }
    Ok(total / student.rows().max(1) as f64)
}

pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.same_shape(b, "mse")?;
    let n = a.len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// `(ℓ_logit, ℓ_rep)`: KL on logits and the layer-averaged hidden MSE.
pub fn distill_losses(
    student_logits: &Matrix,
    student_hidden: &[Matrix],
    targets: &DistillTargets,
    temperature: f64,
) -> Result<(f64, f64)> {
    if student_hidden.len() != targets.hidden.len() {
        return Err(Error::Contract(format!(
            "student has {} hidden states, teacher {}",
            student_hidden.len(),
            targets.hidden.len()
        )));
    }
    let logit = kl_divergence(student_logits, &targets.logits, temperature)?;
    let mut rep = 0.0;
    for (s, t) in student_hidden.iter().zip(&targets.hidden) {
        rep += mse(s, t)?;
    }
    Ok((logit, rep / student_hidden.len().max(1) as f64))
}

/// Which terms enter the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossFlags {
    pub distill: bool,
}

/// `ℓ_MLM + ℓ_NSP (+ ℓ_rep + ℓ_logit)`, unweighted, summed in this order.
pub fn total_loss(mlm: f64, nsp: f64, rep: f64, logit: f64, flags: LossFlags) -> f64 {
    let base = mlm + nsp;
    if flags.distill {
        base + rep + logit
    } else {
        base
    }
}

struct KlOp {
    teacher_probs: Matrix,
    temperature: f64,
}

impl CustomOp for KlOp {
    fn name(&self) -> &'static str {
        "kl_divergence"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let t = self.temperature;
        let ps = softmax_rows(&inputs[0].scale(1.0 / t));
        let n = inputs[0].rows().max(1) as f64;
        let g = grad[(0, 0)] / (n * t);
        let d = ps
            .zip_map(&self.teacher_probs, "kl_divergence", |s, p| g * (s - p))
            .expect("shapes checked on forward");
        vec![d]
    }
}

/// Records `KL(softmax(teacher/T) ‖ softmax(student/T))` (row mean).
pub fn kl_op(tape: &mut Tape, student: Var, teacher: &Matrix, temperature: f64) -> Result<Var> {
    let value = kl_divergence(tape.value(student), teacher, temperature)?;
    Ok(tape.custom(
        &[student],
        Matrix::scalar(value),
        Box::new(KlOp {
            teacher_probs: softmax_rows(&teacher.scale(1.0 / temperature)),
            temperature,
        }),
    ))
}

/// Records the mean squared error against a constant target.
pub fn mse_op(tape: &mut Tape, student: Var, target: &Matrix) -> Result<Var> {
    let t = tape.leaf(target.clone());
    let d = tape.sub(student, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_outputs_give_zero() {
        let l = Matrix::from_rows(&[[0.1, 2.0, -1.0], [3.0, 0.0, 0.0]]);
        let h = vec![Matrix::filled(2, 4, 0.5); 3];
        let t = DistillTargets {
            logits: l.clone(),
            hidden: h.clone(),
        };
        assert_eq!(distill_losses(&l, &h, &t, 1.0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn constant_offset_gives_c_squared() {
        let s = vec![Matrix::filled(2, 3, 1.0), Matrix::filled(2, 3, 0.0)];
        let t = DistillTargets {
            logits: Matrix::zeros(2, 3),
            hidden: vec![Matrix::filled(2, 3, 1.0), Matrix::filled(2, 3, 0.5)],
        };
        let (_, rep) = distill_losses(&Matrix::zeros(2, 3), &s, &t, 1.0).unwrap();
        // one of two layers differs by 0.5
        assert!((rep - 0.25 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn layer_mismatch_is_a_contract_error() {
        let t = DistillTargets {
            logits: Matrix::zeros(1, 2),
            hidden: vec![Matrix::zeros(1, 2)],
        };
        assert!(matches!(
            distill_losses(&Matrix::zeros(1, 2), &[], &t, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn total_loss_cases() {
        let on = LossFlags { distill: true };
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, on), 0.0);
        assert_eq!(total_loss(0.5, 0.2, 0.1, 0.3, LossFlags::default()), 0.5 + 0.2);
        assert!((total_loss(0.5, 0.2, 0.1, 0.3, on) - 1.1).abs() < 1e-15);
    }
}
