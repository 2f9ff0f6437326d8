//! Training objective: source classification cross-entropy, local adversarial
//! binary cross-entropy, global adversarial focal loss, and their weighted
//! total.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorRef};

/// Probability clamp for the binary losses.
const P_EPS: f64 = 1e-12;
/// Floor under softmax probabilities before the log; inactive for any
/// realistically bounded logits.
const SOFTMAX_FLOOR: f64 = 1e-300;

pub const DEFAULT_LAMBDA_LOCAL: f64 = 0.1;
pub const DEFAULT_LAMBDA_GLOBAL: f64 = 0.01;
pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;

/// Mean cross-entropy of logits against (soft or hard) label distributions.
pub fn cls_loss(tape: &mut Tape, logits: TensorRef, labels: TensorRef) -> Result<TensorRef> {
    if tape.shape(logits) != tape.shape(labels) {
        return Err(Error::dimension("cls_loss", tape.shape(logits), tape.shape(labels)));
    }
    let rank = tape.shape(logits).len();
    let probs = tape.softmax(logits, rank - 1)?;
    let probs = tape.clamp(probs, SOFTMAX_FLOOR, 1.0);
    let logp = tape.log(probs)?;
    let weighted = tape.mul(labels, logp)?;
    let per_sample = tape.sum_axis(weighted, rank - 1)?;
    let mean = tape.mean(per_sample);
    Ok(tape.neg(mean))
}

fn pt_for_label(tape: &mut Tape, p: TensorRef, label: f64) -> Result<TensorRef> {
    let p = tape.clamp(p, P_EPS, 1.0 - P_EPS);
    if label >= 0.5 {
        Ok(p)
    } else {
        let n = tape.neg(p);
        Ok(tape.add_scalar(n, 1.0))
    }
}

/// Mean focal loss `-(1 - p_t)^gamma * log(p_t)` against a constant domain
/// label (1 = source, 0 = target).
pub fn focal_loss(tape: &mut Tape, p: TensorRef, label: f64, gamma_f: f64) -> Result<TensorRef> {
    if gamma_f < 0.0 {
        return Err(Error::contract("focal_loss", format!("gamma {} must be >= 0", gamma_f)));
    }
    let pt = pt_for_label(tape, p, label)?;
    let one_minus = tape.neg(pt);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let modulator = tape.pow_scalar(one_minus, gamma_f);
    let logp = tape.log(pt)?;
    let prod = tape.mul(modulator, logp)?;
    let mean = tape.mean(prod);
    Ok(tape.neg(mean))
}

/// Mean binary cross-entropy against a constant domain label. Kept separate
/// from [`focal_loss`] so the gamma = 0 equivalence is a real cross-check.
pub fn binary_cross_entropy(tape: &mut Tape, p: TensorRef, label: f64) -> Result<TensorRef> {
    let pt = pt_for_label(tape, p, label)?;
    let logp = tape.log(pt)?;
    let mean = tape.mean(logp);
    Ok(tape.neg(mean))
}

/// Local (binary CE) and global (focal) adversarial losses, each averaged
/// over the source (label 1) and target (label 0) halves.
pub fn adversarial_losses(
    tape: &mut Tape,
    local_src: TensorRef,
    local_tgt: TensorRef,
    global_src: TensorRef,
    global_tgt: TensorRef,
    gamma_f: f64,
) -> Result<(TensorRef, TensorRef)> {
    let ls = binary_cross_entropy(tape, local_src, 1.0)?;
    let lt = binary_cross_entropy(tape, local_tgt, 0.0)?;
    let sum_local = tape.add(ls, lt)?;
    let l_local = tape.scale(sum_local, 0.5);

    let gs = focal_loss(tape, global_src, 1.0, gamma_f)?;
    let gt = focal_loss(tape, global_tgt, 0.0, gamma_f)?;
    let sum_global = tape.add(gs, gt)?;
    let l_global = tape.scale(sum_global, 0.5);
    Ok((l_local, l_global))
}

/// `lambda_local * l_local + lambda_global * l_global + l_cls`, associated
/// exactly as written so the logged components re-sum bitwise.
pub fn total_loss(
    tape: &mut Tape,
    l_cls: TensorRef,
    l_local: TensorRef,
    l_global: TensorRef,
    lambda_local: f64,
    lambda_global: f64,
) -> Result<TensorRef> {
    let a = tape.scale(l_local, lambda_local);
    let b = tape.scale(l_global, lambda_global);
    let ab = tape.add(a, b)?;
    tape.add(ab, l_cls)
}

/// Recompute the total from scalar components with the same association as
/// [`total_loss`].
pub fn recompose_total(l_cls: f64, l_local: f64, l_global: f64, ll: f64, lg: f64) -> f64 {
    (ll * l_local + lg * l_global) + l_cls
}

/// One training step's loss components, serialized as a CSV row.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub step: usize,
    pub l_cls: f64,
    pub l_local: f64,
    pub l_global: f64,
    pub l_total: f64,
    pub lambda_local: f64,
    pub lambda_global: f64,
    pub lr: f64,
}

impl LossReport {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.l_cls, self.l_local, self.l_global, self.l_total];
        let names = ["l_cls", "l_local", "l_global", "l_total"];
        for (v, name) in parts.iter().zip(names) {
            if !v.is_finite() {
                return Err(Error::numeric("loss_report", format!("{name} is {v}")));
            }
            if *v < 0.0 {
                return Err(Error::numeric("loss_report", format!("{name} = {v} is negative")));
            }
        }
        let recomposed = recompose_total(
            self.l_cls,
            self.l_local,
            self.l_global,
            self.lambda_local,
            self.lambda_global,
        );
        if (recomposed - self.l_total).abs() > 1e-12 {
            return Err(Error::numeric(
                "loss_report",
                format!("additivity violated: {} vs {}", recomposed, self.l_total),
            ));
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "step,l_cls,l_local,l_global,l_total,lr"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_cls, self.l_local, self.l_global, self.l_total, self.lr
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn scalar(tape: &Tape, t: TensorRef) -> f64 {
        tape.value(t)[0]
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![0.0, 0.0], &[1, 2], false).unwrap();
        let labels = tape.leaf(vec![1.0, 0.0], &[1, 2], false).unwrap();
        let l = cls_loss(&mut tape, logits, labels).unwrap();
        assert!((scalar(&tape, l) - LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_is_near_zero() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![50.0, 0.0, 0.0], &[1, 3], false).unwrap();
        let labels = tape.leaf(vec![1.0, 0.0, 0.0], &[1, 3], false).unwrap();
        let l = cls_loss(&mut tape, logits, labels).unwrap();
        assert!(scalar(&tape, l) < 1e-10);
    }

    #[test]
    fn soft_label_hand_case() {
        // soft [0.7, 0, 0.3] vs logits [1, 0, 0] -> 0.8514
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![1.0, 0.0, 0.0], &[1, 3], false).unwrap();
        let labels = tape.leaf(vec![0.7, 0.0, 0.3], &[1, 3], false).unwrap();
        let l = cls_loss(&mut tape, logits, labels).unwrap();
        let z = 1.0f64.exp() + 2.0;
        let expect = 0.7 * (z.ln() - 1.0) + 0.3 * z.ln();
        assert!((scalar(&tape, l) - expect).abs() < 1e-12);
        assert!((scalar(&tape, l) - 0.8514).abs() < 1e-4);
    }

    #[test]
    fn focal_values() {
        let mut tape = Tape::new();
        let sure = tape.leaf(vec![1.0], &[1], false).unwrap();
        let l = focal_loss(&mut tape, sure, 1.0, 2.0).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-10);

        let half = tape.leaf(vec![0.5], &[1], false).unwrap();
        let l = focal_loss(&mut tape, half, 1.0, 2.0).unwrap();
        assert!((scalar(&tape, l) - 0.25 * LN_2).abs() < 1e-12);
        assert!((scalar(&tape, l) - 0.1733).abs() < 1e-4);
    }

    #[test]
    fn focal_gamma_zero_equals_bce() {
        let mut state = 0x9E3779B97F4A7C15u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            let p = next().clamp(1e-6, 1.0 - 1e-6);
            let y = if next() > 0.5 { 1.0 } else { 0.0 };
            let mut tape = Tape::new();
            let pt = tape.leaf(vec![p], &[1], false).unwrap();
            let f = focal_loss(&mut tape, pt, y, 0.0).unwrap();
            let b = binary_cross_entropy(&mut tape, pt, y).unwrap();
            assert!(
                (scalar(&tape, f) - scalar(&tape, b)).abs() < 1e-12,
                "p={p} y={y}"
            );
        }
    }

    #[test]
    fn adversarial_hand_values() {
        let mut tape = Tape::new();
        let half = tape.leaf(vec![0.5, 0.5], &[2, 1], false).unwrap();
        let (l_local, l_global) =
            adversarial_losses(&mut tape, half, half, half, half, 2.0).unwrap();
        assert!((scalar(&tape, l_local) - LN_2).abs() < 1e-12);
        assert!((scalar(&tape, l_global) - 0.25 * LN_2).abs() < 1e-12);

        // perfect discrimination: src -> 1, tgt -> 0
        let hi = tape.leaf(vec![1.0 - 1e-9], &[1], false).unwrap();
        let lo = tape.leaf(vec![1e-9], &[1], false).unwrap();
        let (l_local, l_global) = adversarial_losses(&mut tape, hi, lo, hi, lo, 2.0).unwrap();
        assert!(scalar(&tape, l_local) < 1e-6);
        assert!(scalar(&tape, l_global) < 1e-6);

        // swapped labels: worse than chance
        let (l_local, l_global) = adversarial_losses(&mut tape, lo, hi, lo, hi, 2.0).unwrap();
        assert!(scalar(&tape, l_local) > LN_2);
        assert!(scalar(&tape, l_global) > 0.25 * LN_2);
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::new();
        let one = tape.leaf(vec![1.0], &[1], false).unwrap();
        let t = total_loss(&mut tape, one, one, one, 0.1, 0.01).unwrap();
        assert!((scalar(&tape, t) - 1.11).abs() < 1e-12);

        let zero = tape.leaf(vec![0.0], &[1], false).unwrap();
        let t = total_loss(&mut tape, zero, zero, zero, 0.1, 0.01).unwrap();
        assert_eq!(scalar(&tape, t), 0.0);

        let c = tape.leaf(vec![0.5], &[1], false).unwrap();
        let l = tape.leaf(vec![LN_2], &[1], false).unwrap();
        let g = tape.leaf(vec![0.1733], &[1], false).unwrap();
        let t = total_loss(&mut tape, c, l, g, 0.1, 0.01).unwrap();
        assert!((scalar(&tape, t) - 0.57104).abs() < 1e-4);
    }

    #[test]
    fn report_validates_additivity() {
        let mut good = LossReport {
            step: 3,
            l_cls: 0.5,
            l_local: LN_2,
            l_global: 0.1733,
            l_total: recompose_total(0.5, LN_2, 0.1733, 0.1, 0.01),
            lambda_local: 0.1,
            lambda_global: 0.01,
            lr: 0.01,
        };
        assert!(good.validate().is_ok());
        good.l_total += 1e-9;
        assert!(good.validate().is_err());
        good.l_total = f64::NAN;
        assert!(good.validate().is_err());
    }
}
