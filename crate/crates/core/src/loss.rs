//! Multi-task detection loss with online hard negative mining.
//!
//! `total = cls_sum / N_cls + lambda * reg_sum / N_reg`, where the
//! classification sum runs over positives plus the mined negatives
//! (`N_cls` counts exactly those anchors), and the regression sum runs over
//! positives and all four offset components (`N_reg = max(n_pos, 1)`).

use std::fmt::Write as _;

use crate::assign::{Assignment, Label, RegressionTargets};
use crate::error::{Error, Result};

/// Hardest negatives kept when an image has no positive anchor.
pub const ZERO_POSITIVE_NEGATIVES: usize = 16;

/// Smooth L1 with transition at 1: `(value, derivative)`.
#[inline]
pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Two-class cross entropy on raw logits: `(value, d value / d logits)`.
#[inline]
pub fn softmax_ce(logits: [f64; 2], label: usize) -> (f64, [f64; 2]) {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    let p = [e0 / z, e1 / z];
    // softplus of the margin keeps tiny losses from rounding to zero
    let d = logits[1 - label] - logits[label];
    let value = d.max(0.0) + (-d.abs()).exp().ln_1p();
    let mut grad = p;
    grad[label] -= 1.0;
    (value, grad)
}

/// Picks the hardest negatives: `min(ratio * n_pos, n_neg)` of them, or
/// `min(16, n_neg)` when there are no positives. Ascending index order.
pub fn ohem_select(cls_losses: &[f64], assignment: &Assignment, ratio: usize) -> Vec<usize> {
    let mut negatives: Vec<usize> = assignment
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == Label::Negative)
        .map(|(i, _)| i)
        .collect();
    let n_pos = assignment.n_positive();
    let want = if n_pos == 0 {
        ZERO_POSITIVE_NEGATIVES
    } else {
        ratio.saturating_mul(n_pos)
    };
    let keep = want.min(negatives.len());
    negatives.sort_by(|&a, &b| cls_losses[b].total_cmp(&cls_losses[a]).then(a.cmp(&b)));
    negatives.truncate(keep);
    negatives.sort_unstable();
    negatives
}

#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub logits: &'a [[f64; 2]],
    pub offsets: &'a [[f64; 4]],
    pub assignment: &'a Assignment,
    pub targets: &'a RegressionTargets,
    pub lambda: f64,
    pub ohem_ratio: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub cls_term: f64,
    pub reg_term: f64,
    pub n_cls: usize,
    pub n_reg: usize,
    pub selected_negatives: Vec<usize>,
    pub grad_logits: Vec<[f64; 2]>,
    pub grad_offsets: Vec<[f64; 4]>,
}

impl LossOutput {
    pub fn n_positive(&self) -> usize {
        self.n_cls - self.selected_negatives.len()
    }
}

fn validate(input: &LossInputs<'_>) -> Result<()> {
    let n = input.assignment.n_anchors();
    if input.logits.len() != n || input.offsets.len() != n {
        return Err(Error::shape(
            "multitask_loss",
            format!(
                "{} logits, {} offsets, {} labels",
                input.logits.len(),
                input.offsets.len(),
                n
            ),
        ));
    }
    if input.lambda.is_nan() || input.lambda <= 0.0 {
        return Err(Error::Config(format!("lambda must be positive, got {}", input.lambda)));
    }
    if input.ohem_ratio < 1 {
        return Err(Error::Config("ohem_ratio must be >= 1".into()));
    }
    if input.targets.len() != input.assignment.n_positive()
        || input
            .targets
            .entries
            .iter()
            .any(|(a, _)| !input.assignment.labels().get(*a).is_some_and(|l| l.is_positive()))
    {
        return Err(Error::shape(
            "multitask_loss",
            "regression targets do not line up with positive anchors",
        ));
    }
    for (i, (l, o)) in input.logits.iter().zip(input.offsets).enumerate() {
        if l.iter().chain(o).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
    }
    Ok(())
}

pub fn multitask_loss(input: &LossInputs<'_>) -> Result<LossOutput> {
    validate(input)?;
    let n = input.assignment.n_anchors();
    let labels = input.assignment.labels();

    let mut ce = Vec::with_capacity(n);
    for (l, label) in input.logits.iter().zip(labels) {
        ce.push(softmax_ce(*l, usize::from(label.is_positive())));
    }
    let ce_values: Vec<f64> = ce.iter().map(|c| c.0).collect();
    let selected = ohem_select(&ce_values, input.assignment, input.ohem_ratio);

    let n_pos = input.assignment.n_positive();
    let n_cls = n_pos + selected.len();
    let n_reg = n_pos.max(1);

    let mut grad_logits = vec![[0.0; 2]; n];
    let mut grad_offsets = vec![[0.0; 4]; n];

    let mut cls_sum = 0.0;
    if n_cls > 0 {
        let inv = 1.0 / n_cls as f64;
        let mut take = |i: usize| {
            let (v, g) = ce[i];
            cls_sum += v;
            grad_logits[i] = [g[0] * inv, g[1] * inv];
        };
        for (i, l) in labels.iter().enumerate() {
            if l.is_positive() {
                take(i);
            }
        }
        for &i in &selected {
            take(i);
        }
    }
    let cls_term = if n_cls > 0 { cls_sum / n_cls as f64 } else { 0.0 };

    let mut reg_sum = 0.0;
    let scale = input.lambda / n_reg as f64;
    for &(i, target) in &input.targets.entries {
        for k in 0..4 {
            let (v, d) = smooth_l1(input.offsets[i][k] - target[k]);
            reg_sum += v;
            grad_offsets[i][k] = d * scale;
        }
    }
    let reg_term = reg_sum / n_reg as f64;

    Ok(LossOutput {
        total: cls_term + input.lambda * reg_term,
        cls_term,
        reg_term,
        n_cls,
        n_reg,
        selected_negatives: selected,
        grad_logits,
        grad_offsets,
    })
}

/// Per-step loss log row: `step,total,cls,reg,n_pos,n_neg_selected`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub n_pos: usize,
    pub n_neg_selected: usize,
}

pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,total,cls,reg,n_pos,n_neg_selected\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{:.9},{:.9},{:.9},{},{}",
            r.step, r.total, r.cls, r.reg, r.n_pos, r.n_neg_selected
        );
    }
    out
}
