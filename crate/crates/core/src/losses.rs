//! Text cross-entropy, per-pixel BCE, DICE and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_at, Tape, Var};
use crate::error::{invalid, Result};
use crate::geometry::BinaryMask;
use crate::tensor::Matrix;

/// Probability clamp used by BCE.
pub const BCE_EPS: f64 = 1e-7;
/// Default DICE smoothing.
pub const DICE_SMOOTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_lm: f64,
    pub lambda_mask: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_lm: 1.0, lambda_mask: 1.0, lambda_bce: 2.0, lambda_dice: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_lm, self.lambda_mask, self.lambda_bce, self.lambda_dice];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(invalid(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_lm: f64,
    pub l_bce: f64,
    pub l_dice: f64,
    pub l_mask: f64,
    pub total: f64,
}

pub fn combine(l_lm: f64, l_bce: f64, l_dice: f64, w: &LossWeights) -> LossBundle {
    let l_mask = w.lambda_bce * l_bce + w.lambda_dice * l_dice;
    let total = w.lambda_lm * l_lm + w.lambda_mask * l_mask;
    LossBundle { l_lm, l_bce, l_dice, l_mask, total }
}

/// Mean negative log-likelihood of `targets` over the positions where `supervised` is set.
pub fn text_ce(logits: &Matrix, targets: &[usize], supervised: &[bool]) -> Result<f64> {
    if targets.len() != logits.rows() || supervised.len() != logits.rows() {
        return Err(invalid("targets and supervision mask must have one entry per logit row"));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (t, (&target, &sup)) in targets.iter().zip(supervised).enumerate() {
        if !sup {
            continue;
        }
        if target >= logits.cols() {
            return Err(invalid(format!("target id {target} outside vocabulary of {}", logits.cols())));
        }
        total -= log_softmax_at(logits.row(t), target);
        n += 1;
    }
    if n == 0 {
        return Err(invalid("text_ce needs at least one supervised position"));
    }
    Ok(total / n as f64)
}

fn check_pred(pred: &Matrix, gt: &BinaryMask) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(invalid(format!("prediction {:?} vs mask {:?}", pred.shape(), gt.shape())));
    }
    Ok(())
}

fn target(gt: &BinaryMask) -> impl Iterator<Item = f64> + '_ {
    gt.bits().iter().map(|&b| if b { 1.0 } else { 0.0 })
}

pub fn bce(pred: &Matrix, gt: &BinaryMask) -> Result<f64> {
    check_pred(pred, gt)?;
    let n = pred.len().max(1) as f64;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target(gt))
        .map(|(&p, m)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            m * p.ln() + (1.0 - m) * (1.0 - p).ln()
        })
        .sum();
    Ok(-s / n)
}

pub fn bce_grad(pred: &Matrix, gt: &BinaryMask) -> Result<Matrix> {
    check_pred(pred, gt)?;
    let n = pred.len().max(1) as f64;
    let data = pred
        .data()
        .iter()
        .zip(target(gt))
        .map(|(&p, m)| {
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                return 0.0;
            }
            -(m / p - (1.0 - m) / (1.0 - p)) / n
        })
        .collect();
    Ok(Matrix::from_vec(pred.rows(), pred.cols(), data))
}

pub fn dice(pred: &Matrix, gt: &BinaryMask, smooth: f64) -> Result<f64> {
    check_pred(pred, gt)?;
    let (inter, sp, sm) = dice_sums(pred, gt);
    Ok(1.0 - (2.0 * inter + smooth) / (sp + sm + smooth))
}

fn dice_sums(pred: &Matrix, gt: &BinaryMask) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sm = 0.0;
    for (&p, m) in pred.data().iter().zip(target(gt)) {
        inter += p * m;
        sp += p;
        sm += m;
    }
    (inter, sp, sm)
}

pub fn dice_grad(pred: &Matrix, gt: &BinaryMask, smooth: f64) -> Result<Matrix> {
    check_pred(pred, gt)?;
    let (inter, sp, sm) = dice_sums(pred, gt);
    let num = 2.0 * inter + smooth;
    let den = sp + sm + smooth;
    let data = target(gt).map(|m| -(2.0 * m * den - num) / (den * den)).collect();
    Ok(Matrix::from_vec(pred.rows(), pred.cols(), data))
}

/// BCE as a tape op on a probability grid.
pub fn bce_var(tape: &mut Tape, pred: Var, gt: &BinaryMask) -> Result<Var> {
    let value = bce(tape.value(pred), gt)?;
    let gt = gt.clone();
    Ok(tape.custom(
        &[pred],
        Matrix::scalar(value),
        Box::new(move |g, _, p| vec![Some(bce_grad(p[0], &gt).expect("shape checked").scaled(g.item()))]),
    ))
}

/// DICE as a tape op on a probability grid.
pub fn dice_var(tape: &mut Tape, pred: Var, gt: &BinaryMask, smooth: f64) -> Result<Var> {
    let value = dice(tape.value(pred), gt, smooth)?;
    let gt = gt.clone();
    Ok(tape.custom(
        &[pred],
        Matrix::scalar(value),
        Box::new(move |g, _, p| vec![Some(dice_grad(p[0], &gt, smooth).expect("shape checked").scaled(g.item()))]),
    ))
}

/// Text cross-entropy as a tape op over the supervised rows of `logits`.
pub fn text_ce_var(tape: &mut Tape, logits: Var, targets: &[usize], supervised: &[bool]) -> Result<Var> {
    let (rows, vocab) = tape.shape(logits);
    if targets.len() != rows || supervised.len() != rows {
        return Err(invalid("targets and supervision mask must have one entry per logit row"));
    }
    let picked: Vec<usize> = (0..rows).filter(|&r| supervised[r]).collect();
    if picked.is_empty() {
        return Err(invalid("text_ce needs at least one supervised position"));
    }
    let tgt: Vec<usize> = picked.iter().map(|&r| targets[r]).collect();
    if let Some(&bad) = tgt.iter().find(|&&t| t >= vocab) {
        return Err(invalid(format!("target id {bad} outside vocabulary of {vocab}")));
    }
    let rows_var = gather_logit_rows(tape, logits, &picked);
    Ok(tape.cross_entropy(rows_var, &tgt))
}

fn gather_logit_rows(tape: &mut Tape, logits: Var, rows: &[usize]) -> Var {
    if rows.len() == tape.shape(logits).0 && rows.iter().enumerate().all(|(i, &r)| i == r) {
        return logits;
    }
    tape.gather_rows(logits, rows)
}

/// Weighted total on the tape; mirrors [`combine`].
pub fn combine_var(tape: &mut Tape, l_lm: Var, l_bce: Var, l_dice: Var, w: &LossWeights) -> Var {
    let b = tape.scale(l_bce, w.lambda_bce);
    let d = tape.scale(l_dice, w.lambda_dice);
    let mask = tape.add(b, d);
    let mask = tape.scale(mask, w.lambda_mask);
    let lm = tape.scale(l_lm, w.lambda_lm);
    tape.add(lm, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn text_ce_examples() {
        let uniform = Matrix::zeros(3, 4);
        let l = text_ce(&uniform, &[0, 1, 2], &[true, true, true]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let single = Matrix::row_vector(&[0.25f64.ln(), 0.75f64.ln()]);
        let l = text_ce(&single, &[0], &[true]).unwrap();
        assert!((l - 1.3862943611198906).abs() < 1e-12);
        let sharp = Matrix::row_vector(&[50.0, 0.0, 0.0]);
        assert!(text_ce(&sharp, &[0], &[true]).unwrap() < 1e-12);
        assert!(text_ce(&uniform, &[0, 1, 2], &[false; 3]).is_err());
        assert!(text_ce(&uniform, &[0, 9, 2], &[true; 3]).is_err());
    }

    #[test]
    fn bce_examples() {
        let gt = BinaryMask::from_fn(3, 3, |r, c| (r + c) % 2 == 0);
        let exact = Matrix::from_vec(3, 3, gt.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
        assert!(bce(&exact, &gt).unwrap() <= -(1.0 - BCE_EPS).ln() + 1e-15);
        let half = Matrix::filled(3, 3, 0.5);
        assert!((bce(&half, &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let one = BinaryMask::full(1, 1);
        assert!((bce(&Matrix::scalar(0.25), &one).unwrap() - 1.3862943611198906).abs() < 1e-12);
        assert!(bce(&half, &BinaryMask::full(2, 2)).is_err());
    }

    #[test]
    fn dice_examples() {
        let gt = BinaryMask::from_fn(4, 4, |r, _| r < 2);
        let exact = Matrix::from_vec(4, 4, gt.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
        assert_eq!(dice(&exact, &gt, 0.0).unwrap(), 0.0);
        let disjoint = exact.map(|v| 1.0 - v);
        assert_eq!(dice(&disjoint, &gt, 0.0).unwrap(), 1.0);
        let l = dice(&Matrix::filled(2, 2, 0.5), &BinaryMask::full(2, 2), 0.0).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-15);
        // empty vs empty stays finite with smoothing
        let l = dice(&Matrix::zeros(2, 2), &BinaryMask::empty(2, 2), DICE_SMOOTH).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
    }

    #[test]
    fn combine_examples() {
        let b = combine(0.5, 0.2, 0.4, &LossWeights::default());
        assert!((b.l_mask - 0.6).abs() < 1e-12);
        assert!((b.total - 1.1).abs() < 1e-12);
        let zero = LossWeights { lambda_lm: 0.0, lambda_mask: 0.0, lambda_bce: 0.0, lambda_dice: 0.0 };
        assert_eq!(combine(0.5, 0.2, 0.4, &zero).total, 0.0);
        let mut w = LossWeights::default();
        let before = combine(0.5, 0.2, 0.4, &w).total;
        w.lambda_bce *= 2.0;
        let after = combine(0.5, 0.2, 0.4, &w).total;
        assert!((after - before - 1.0 * 2.0 * 0.2).abs() < 1e-12);
        assert!(LossWeights { lambda_lm: -1.0, ..LossWeights::default() }.validate().is_err());
    }

    #[test]
    fn mask_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..5 {
            let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let pred = Matrix::uniform(h, w, 0.05, 0.95, &mut rng);
            let gt = BinaryMask::from_bits(h, w, (0..h * w).map(|_| rng.gen_bool(0.5)).collect()).unwrap();
            let g2 = gt.clone();
            let r = check_gradients(&[pred.clone()], move |t, v| bce_var(t, v[0], &g2).unwrap());
            assert!(r.max_rel_error < 1e-4, "bce {r:?}");
            let g2 = gt.clone();
            let r = check_gradients(&[pred], move |t, v| dice_var(t, v[0], &g2, DICE_SMOOTH).unwrap());
            assert!(r.max_rel_error < 1e-4, "dice {r:?}");
        }
    }

    #[test]
    fn tape_text_ce_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Matrix::randn(5, 7, 1.0, &mut rng);
        let targets = [1, 2, 3, 4, 5];
        let sup = [false, true, false, true, true];
        let mut t = Tape::new();
        let l = t.leaf(logits.clone());
        let v = text_ce_var(&mut t, l, &targets, &sup).unwrap();
        assert!((t.value(v).item() - text_ce(&logits, &targets, &sup).unwrap()).abs() < 1e-14);
    }
}
