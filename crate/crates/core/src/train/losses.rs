//! Loss functions and the halting rule.
//!
//! The functions here evaluate losses on plain arrays; training builds the
//! same quantities on the tape through [`crate::autodiff::Graph`].

use crate::error::{Error, Result};
use crate::recursion::Variant;

/// `u + 1` for `u ≥ 0`, `1 / (1 − u)` otherwise; positive and monotone.
pub fn stablemax_s(u: f64) -> f64 {
    if u >= 0.0 {
        u + 1.0
    } else {
        1.0 / (1.0 - u)
    }
}

/// Normalized stablemax of one row.
pub fn stablemax(row: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = row.iter().map(|&u| stablemax_s(u)).collect();
    let z: f64 = s.iter().sum();
    s.into_iter().map(|x| x / z).collect()
}

/// Mean of `−log p_target` over unmasked rows of `logits[rows × v]`.
pub fn stablemax_cross_entropy(logits: &[f64], v: usize, targets: &[usize], mask: Option<&[bool]>) -> Result<f64> {
    let rows = targets.len();
    if v == 0 || logits.len() != rows * v || mask.is_some_and(|m| m.len() != rows) {
        return Err(Error::Shape(format!(
            "{} logits, {rows} targets, vocab {v}",
            logits.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        if mask.is_some_and(|m| !m[r]) {
            continue;
        }
        if t >= v {
            return Err(Error::Vocab(format!("target {t} outside vocab {v}")));
        }
        let row = &logits[r * v..(r + 1) * v];
        let z: f64 = row.iter().map(|&u| stablemax_s(u)).sum();
        total += z.ln() - stablemax_s(row[t]).ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data("every position is masked".into()));
    }
    Ok(total / count as f64)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid binary cross-entropy of a logit against a target in `[0, 1]`.
pub fn bce_with_logit(x: f64, target: f64) -> f64 {
    x.max(0.0) - x * target + (-x.abs()).exp().ln_1p()
}

/// All unmasked positions equal.
pub fn sample_exact(pred: &[usize], target: &[usize], mask: Option<&[bool]>) -> bool {
    pred.iter()
        .zip(target)
        .enumerate()
        .all(|(i, (p, t))| p == t || mask.is_some_and(|m| !m[i]))
}

/// Mean BCE of the halting logit against per-sample exact match.
pub fn trm_halt_loss(q: &[f64], exact: &[bool]) -> Result<f64> {
    if q.len() != exact.len() || q.is_empty() {
        return Err(Error::Shape(format!(
            "{} halt logits for {} samples",
            q.len(),
            exact.len()
        )));
    }
    let total: f64 = q
        .iter()
        .zip(exact)
        .map(|(&x, &e)| bce_with_logit(x, if e { 1.0 } else { 0.0 }))
        .sum();
    Ok(total / q.len() as f64)
}

/// Bootstrapped continue target from the next step's Q-values `[halt, continue]`.
pub fn continue_target(next_q: [f64; 2], last_step: bool) -> f64 {
    if last_step {
        sigmoid(next_q[0])
    } else {
        sigmoid(next_q[0].max(next_q[1]))
    }
}

/// `0.5·BCE(q_halt, exact) + 0.5·BCE(q_continue, continue_target)`, batch mean.
pub fn hrm_act_losses(q: &[[f64; 2]], exact: &[bool], next_q: &[[f64; 2]], last_step: &[bool]) -> Result<f64> {
    let b = q.len();
    if b == 0 || exact.len() != b || next_q.len() != b || last_step.len() != b {
        return Err(Error::Shape("Q-value batch sizes disagree".into()));
    }
    let mut total = 0.0;
    for i in 0..b {
        let halt = bce_with_logit(q[i][0], if exact[i] { 1.0 } else { 0.0 });
        let cont = bce_with_logit(q[i][1], continue_target(next_q[i], last_step[i]));
        total += 0.5 * halt + 0.5 * cont;
    }
    Ok(total / b as f64)
}

/// Training-time halting: TRM-style variants stop when the logit is positive,
/// HRM when the halt Q-value beats the continue Q-value.
pub fn halting_decision(variant: Variant, q: &[f64]) -> bool {
    match variant {
        Variant::Hrm => q[0] > q[1],
        _ => q[0] > 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stablemax_examples() {
        let l = stablemax_cross_entropy(&[0.0, 0.0], 2, &[0], None).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let l = stablemax_cross_entropy(&[1.0, -1.0], 2, &[0], None).unwrap();
        assert!((l - 0.22314).abs() < 1e-5);
        assert!((l + 0.8f64.ln()).abs() < 1e-12);
        let p = stablemax(&[3.0, -2.0, 0.5, -0.1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn masked_rows_do_not_matter() {
        let targets = [1, 0];
        let mask = [true, false];
        let a = stablemax_cross_entropy(&[0.3, 0.7, 5.0, -5.0], 2, &targets, Some(&mask)).unwrap();
        let b = stablemax_cross_entropy(&[0.3, 0.7, -9.0, 2.0], 2, &targets, Some(&mask)).unwrap();
        assert_eq!(a, b);
        assert!(stablemax_cross_entropy(&[0.0, 0.0], 2, &[0], Some(&[false])).is_err());
    }

    #[test]
    fn halt_losses() {
        assert!((trm_halt_loss(&[0.0], &[true]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(trm_halt_loss(&[60.0], &[true]).unwrap() < 1e-20);
        assert!(!sample_exact(&[1, 2, 3], &[1, 2, 4], None));
        assert!(sample_exact(&[1, 2, 3], &[1, 2, 4], Some(&[true, true, false])));
        assert_eq!(continue_target([0.0, 5.0], true), 0.5);
        assert_eq!(continue_target([0.0, 5.0], false), sigmoid(5.0));
        let l = hrm_act_losses(&[[60.0, 0.0]], &[true], &[[0.0, 0.0]], &[true]).unwrap();
        assert!((l - 0.5 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn halting_thresholds() {
        assert!(halting_decision(Variant::Trm, &[0.1]));
        assert!(!halting_decision(Variant::Trm, &[-0.1]));
        assert!(!halting_decision(Variant::Hrm, &[0.2, 0.3]));
        assert!(halting_decision(Variant::Hrm, &[0.4, 0.3]));
    }
}
