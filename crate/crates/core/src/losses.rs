//! Binary cross entropy, Dice and Tversky similarity, and the Tversky loss.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;
pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// True/false positive/negative totals, either soft (probability-weighted)
/// or hard (integral).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConfusionCounts {
    pub true_pos: f64,
    pub false_pos: f64,
    pub false_neg: f64,
    pub true_neg: f64,
}

impl ConfusionCounts {
    pub fn total(&self) -> f64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// Recall; zero when there are no positives.
    pub fn sensitivity(&self) -> f64 {
        ratio_or_zero(self.true_pos, self.true_pos + self.false_neg)
    }

    pub fn specificity(&self) -> f64 {
        ratio_or_zero(self.true_neg, self.true_neg + self.false_pos)
    }

    /// Zero when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio_or_zero(self.true_pos, self.true_pos + self.false_pos)
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            true_pos: self.true_pos + o.true_pos,
            false_pos: self.false_pos + o.false_pos,
            false_neg: self.false_neg + o.false_neg,
            true_neg: self.true_neg + o.true_neg,
        }
    }
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Bce,
    Tversky,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Bce => "bce",
            LossKind::Tversky => "tversky",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bce" => Ok(LossKind::Bce),
            "tversky" => Ok(LossKind::Tversky),
            other => Err(Error::Config(format!("unknown loss {other:?} (bce|tversky)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub beta: f64,
    pub epsilon: f64,
}

impl LossSpec {
    pub fn bce() -> Self {
        Self {
            kind: LossKind::Bce,
            beta: DEFAULT_BETA,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn tversky() -> Self {
        Self {
            kind: LossKind::Tversky,
            ..Self::bce()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.kind == LossKind::Tversky && !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "tversky epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Records the loss of `pred` against `target` on `tape`.
    pub fn apply(&self, tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
        match self.kind {
            LossKind::Bce => bce_loss(tape, pred, target),
            LossKind::Tversky => tversky_loss(tape, pred, target, self.beta, self.epsilon),
        }
    }

    pub fn value(&self, pred: &Tensor, target: &Tensor) -> Result<f64> {
        match self.kind {
            LossKind::Bce => bce_value(pred, target),
            LossKind::Tversky => tversky_loss_value(pred, target, self.beta, self.epsilon),
        }
    }
}

fn check_same(op: &'static str, pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(
            op,
            format!(
                "prediction shape {:?} differs from target shape {:?}",
                pred.shape(),
                target.shape()
            ),
        ));
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// Mean per-pixel binary cross entropy.
pub fn bce_value(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("bce_loss", pred, target)?;
    let n = pred.len() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(total / n)
}

pub fn bce_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let p = tape.value(pred).clone();
    let value = bce_value(&p, target)?;
    let y = target.data().to_vec();
    let n = p.len() as f64;
    Ok(tape.custom(Tensor::scalar(value), vec![pred], move |g| {
        let grad = p
            .data()
            .iter()
            .zip(&y)
            .map(|(&p, &y)| {
                if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                    0.0
                } else {
                    g[0] * (-y / p + (1.0 - y) / (1.0 - p)) / n
                }
            })
            .collect();
        vec![grad]
    }))
}

/// Soft counts: `tp = Σ p·y`, `fp = Σ p·(1−y)`, `fn = Σ (1−p)·y`,
/// `tn = Σ (1−p)(1−y)`.
pub fn soft_confusion(pred: &Tensor, target: &Tensor) -> Result<ConfusionCounts> {
    check_same("soft_confusion", pred, target)?;
    let mut c = ConfusionCounts::default();
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        c.true_pos += p * y;
        c.false_pos += p * (1.0 - y);
        c.false_neg += (1.0 - p) * y;
        c.true_neg += (1.0 - p) * (1.0 - y);
    }
    Ok(c)
}

/// Dice similarity `2tp / (2tp + fp + fn)`; 1.0 when both masks are empty.
pub fn dsc(c: &ConfusionCounts) -> f64 {
    let den = 2.0 * c.true_pos + c.false_pos + c.false_neg;
    if den == 0.0 {
        1.0
    } else {
        2.0 * c.true_pos / den
    }
}

/// Tversky index `tp / (tp + β·fp + (1−β)·fn)`. A zero denominator yields 1.0
/// when `tp = fp = fn = 0` and 0.0 otherwise.
pub fn tversky_index(c: &ConfusionCounts, beta: f64) -> f64 {
    let den = c.true_pos + beta * c.false_pos + (1.0 - beta) * c.false_neg;
    if den == 0.0 {
        if c.true_pos == 0.0 && c.false_pos == 0.0 && c.false_neg == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        c.true_pos / den
    }
}

fn tversky_terms(c: &ConfusionCounts, beta: f64, eps: f64) -> (f64, f64) {
    let num = c.true_pos + eps;
    let den = c.true_pos + beta * c.false_pos + (1.0 - beta) * c.false_neg + eps;
    (num, den)
}

pub fn tversky_loss_value(pred: &Tensor, target: &Tensor, beta: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::invalid("tversky_loss", format!("epsilon {eps} must be positive")));
    }
    let c = soft_confusion(pred, target)?;
    let (num, den) = tversky_terms(&c, beta, eps);
    Ok(1.0 - num / den)
}

/// `1 − (tp+ε)/(tp + β·fp + (1−β)·fn + ε)` over soft counts pooled across the
/// whole tensor (the batch, when batched).
pub fn tversky_loss(tape: &mut Tape, pred: Var, target: &Tensor, beta: f64, eps: f64) -> Result<Var> {
    let p = tape.value(pred).clone();
    let value = tversky_loss_value(&p, target, beta, eps)?;
    let c = soft_confusion(&p, target)?;
    let (num, den) = tversky_terms(&c, beta, eps);
    // dL/dtp, dL/dfp, dL/dfn
    let d_tp = -(1.0 / den - num / (den * den));
    let d_fp = num * beta / (den * den);
    let d_fn = num * (1.0 - beta) / (den * den);
    let y = target.data().to_vec();
    Ok(tape.custom(Tensor::scalar(value), vec![pred], move |g| {
        let grad = y
            .iter()
            .map(|&y| g[0] * (y * d_tp + (1.0 - y) * d_fp - y * d_fn))
            .collect();
        vec![grad]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    fn counts(tp: f64, fp: f64, fn_: f64) -> ConfusionCounts {
        ConfusionCounts {
            true_pos: tp,
            false_pos: fp,
            false_neg: fn_,
            true_neg: 0.0,
        }
    }

    #[test]
    fn bce_examples() {
        let y = t(&[1.0, 0.0, 1.0, 0.0]);
        assert!(bce_value(&y, &y).unwrap() <= 2e-7);
        assert!((bce_value(&t(&[0.5]), &t(&[1.0])).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(bce_value(&t(&[1e-9]), &t(&[1.0])).unwrap(), -(1e-7f64).ln());
        assert!(bce_value(&t(&[0.5, 0.5]), &t(&[1.0])).is_err());
    }

    #[test]
    fn soft_confusion_examples() {
        let c = soft_confusion(&t(&[0.8, 0.4]), &t(&[1.0, 0.0])).unwrap();
        assert!((c.true_pos - 0.8).abs() < 1e-15);
        assert!((c.false_pos - 0.4).abs() < 1e-15);
        assert!((c.false_neg - 0.2).abs() < 1e-15);
        assert!((c.true_neg - 0.6).abs() < 1e-15);

        let c = soft_confusion(&t(&[1.0, 1.0, 0.0, 0.0]), &t(&[1.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(c, ConfusionCounts { true_pos: 1.0, false_pos: 1.0, false_neg: 1.0, true_neg: 1.0 });

        let c = soft_confusion(&t(&[0.3, 0.9]), &t(&[0.0, 0.0])).unwrap();
        assert_eq!((c.true_pos, c.false_neg), (0.0, 0.0));
    }

    #[test]
    fn dsc_examples() {
        assert_eq!(dsc(&counts(3.0, 0.0, 0.0)), 1.0);
        assert!((dsc(&counts(2.0, 1.0, 1.0)) - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(dsc(&counts(0.0, 2.0, 1.0)), 0.0);
        assert_eq!(dsc(&counts(0.0, 0.0, 0.0)), 1.0);
    }

    #[test]
    fn tversky_index_examples() {
        let c = counts(2.0, 1.0, 1.0);
        assert!((tversky_index(&c, 0.5) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(tversky_index(&c, 0.5), dsc(&c));
        for beta in [0.0, 0.3, 1.0] {
            assert_eq!(tversky_index(&counts(5.0, 0.0, 0.0), beta), 1.0);
        }
        let c = counts(3.0, 1.0, 7.0);
        assert_eq!(tversky_index(&c, 1.0), 3.0 / 4.0);
        assert_eq!(tversky_index(&counts(0.0, 0.0, 0.0), 0.2), 1.0);
        assert_eq!(tversky_index(&counts(0.0, 1.0, 0.0), 0.0), 0.0);
    }

    #[test]
    fn tversky_loss_examples() {
        let y = t(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(tversky_loss_value(&y, &y, 0.5, 1e-6).unwrap(), 0.0);
        let l = tversky_loss_value(&t(&[0.8, 0.4]), &t(&[1.0, 0.0]), 0.5, 1e-12).unwrap();
        assert!((l - (1.0 - 0.8 / 1.1)).abs() < 1e-10);
        let miss = t(&[0.0, 1.0, 1.0, 0.0]);
        assert!(tversky_loss_value(&miss, &y, 0.5, 1e-9).unwrap() > 1.0 - 1e-8);
        assert!(tversky_loss_value(&y, &y, 0.5, 0.0).is_err());
    }

    fn numeric_check(spec: LossSpec, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 24;
        let pred = Tensor::uniform(&[n], 0.05, 0.95, &mut rng);
        let target = Tensor::new(
            vec![n],
            (0..n).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let pv = tape.param(pred.clone());
        let l = spec.apply(&mut tape, pv, &target).unwrap();
        let g = tape.backward(l).unwrap();
        let analytic = g.get(pv).unwrap().to_vec();
        let h = 1e-5;
        (0..n)
            .map(|i| {
                let mut a = pred.clone();
                a.data_mut()[i] += h;
                let mut b = pred.clone();
                b.data_mut()[i] -= h;
                let num = (spec.value(&a, &target).unwrap() - spec.value(&b, &target).unwrap())
                    / (2.0 * h);
                (analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(1e-6)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..5 {
            assert!(numeric_check(LossSpec::tversky(), seed) < 1e-4);
            assert!(numeric_check(LossSpec { beta: 0.7, ..LossSpec::tversky() }, seed) < 1e-4);
            assert!(numeric_check(LossSpec::bce(), seed) < 1e-4);
        }
    }

    #[test]
    fn loss_spec_validation() {
        assert!(LossSpec { beta: 1.5, ..LossSpec::bce() }.validate().is_err());
        assert!(LossSpec { epsilon: 0.0, ..LossSpec::tversky() }.validate().is_err());
        assert!(LossSpec { epsilon: 0.0, ..LossSpec::bce() }.validate().is_ok());
        assert_eq!("Tversky".parse::<LossKind>().unwrap(), LossKind::Tversky);
        assert!("focal".parse::<LossKind>().is_err());
    }

    proptest! {
        #[test]
        fn tversky_half_equals_dsc(tp in 0.0f64..1e4, fp in 0.0f64..1e4, fn_ in 0.0f64..1e4) {
            let c = counts(tp, fp, fn_);
            prop_assert!((tversky_index(&c, 0.5) - dsc(&c)).abs() <= 1e-12);
        }

        #[test]
        fn dsc_symmetric_under_swap(tp in 0u32..500, fp in 0u32..500, fn_ in 0u32..500) {
            let a = counts(tp as f64, fp as f64, fn_ as f64);
            let b = counts(tp as f64, fn_ as f64, fp as f64);
            prop_assert_eq!(dsc(&a), dsc(&b));
        }

        #[test]
        fn tversky_monotone_in_errors(
            tp in 0.1f64..100.0, fp in 0.0f64..100.0, fn_ in 0.0f64..100.0,
            extra in 0.0f64..50.0, beta in 0.0f64..=1.0,
        ) {
            let base = tversky_index(&counts(tp, fp, fn_), beta);
            prop_assert!(tversky_index(&counts(tp, fp + extra, fn_), beta) <= base + 1e-15);
            prop_assert!(tversky_index(&counts(tp, fp, fn_ + extra), beta) <= base + 1e-15);
        }

        #[test]
        fn losses_non_negative(p in proptest::collection::vec(0.0f64..=1.0, 1..32), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = p.iter().map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
            let (p, y) = (t(&p), t(&y));
            prop_assert!(bce_value(&p, &y).unwrap() >= 0.0);
            prop_assert!(tversky_loss_value(&p, &y, 0.5, 1e-6).unwrap() >= -1e-15);
        }
    }
}
