//! Anchor-to-face assignment and regression target coding.
//!
//! Two matchers are provided. [`match_baseline`] is the single-shot reference:
//! every face claims its best anchor, then every remaining anchor above the
//! overlap threshold joins its best face. [`match_two_step`] runs the same first
//! step at a fixed 0.5 threshold and then grants faces with no anchor at that
//! threshold ("hard faces") up to `max_extra_anchors` of their highest-overlap
//! anchors, drawn from free anchors and the face's own forced match.
//!
//! All ties resolve to the lowest index, so assignments are deterministic.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{iou_matrix, BBox, IouMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Negative,
    Positive(usize),
}

impl Label {
    pub fn gt(self) -> Option<usize> {
        match self {
            Label::Positive(g) => Some(g),
            Label::Negative => None,
        }
    }

    pub fn is_positive(self) -> bool {
        matches!(self, Label::Positive(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    labels: Vec<Label>,
    per_gt: Vec<Vec<usize>>,
}

impl Assignment {
    /// Builds an assignment from per-anchor labels. Fails if a label names a
    /// face index outside `0..n_gt`.
    pub fn from_labels(labels: Vec<Label>, n_gt: usize) -> Result<Self> {
        let mut per_gt = vec![Vec::new(); n_gt];
        for (a, l) in labels.iter().enumerate() {
            if let Label::Positive(g) = *l {
                per_gt
                    .get_mut(g)
                    .ok_or_else(|| Error::Config(format!("anchor {a} labeled with gt {g} >= {n_gt}")))?
                    .push(a);
            }
        }
        Ok(Assignment { labels, per_gt })
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// Matched anchor indices per face, ascending.
    pub fn per_gt(&self) -> &[Vec<usize>] {
        &self.per_gt
    }

    pub fn n_anchors(&self) -> usize {
        self.labels.len()
    }

    pub fn n_positive(&self) -> usize {
        self.per_gt.iter().map(Vec::len).sum()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(a, l)| l.gt().map(|g| (a, g)))
    }

    /// CSV dump: `anchor_index,label,gt_index` (`gt_index` is -1 for negatives).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("anchor_index,label,gt_index\n");
        for (a, l) in self.labels.iter().enumerate() {
            let _ = match l {
                Label::Positive(g) => writeln!(out, "{a},positive,{g}"),
                Label::Negative => writeln!(out, "{a},negative,-1"),
            };
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub step1_iou: f64,
    pub max_extra_anchors: usize,
    pub step2_iou_floor: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            step1_iou: 0.5,
            max_extra_anchors: 4,
            step2_iou_floor: 0.1,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.step2_iou_floor
            && self.step2_iou_floor < self.step1_iou
            && self.step1_iou <= 1.0)
        {
            return Err(Error::Config(format!(
                "need 0 < step2_iou_floor ({}) < step1_iou ({}) <= 1",
                self.step2_iou_floor, self.step1_iou
            )));
        }
        Ok(())
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("iou threshold must lie in (0, 1), got {t}")))
    }
}

/// Single-shot reference matcher over anchor boxes.
pub fn match_baseline(anchors: &[BBox], gts: &[BBox], iou_thresh: f64) -> Result<Assignment> {
    if anchors.is_empty() {
        return Err(Error::EmptyGrid);
    }
    check_threshold(iou_thresh)?;
    let table = iou_matrix(gts, anchors)?;
    Ok(match_baseline_table(&table, iou_thresh))
}

/// Reference matcher over an explicit `gts x anchors` overlap table.
pub fn match_baseline_table(table: &IouMatrix, iou_thresh: f64) -> Assignment {
    let n_gt = table.rows();
    let n_anchor = table.cols();
    let mut labels = vec![Label::Negative; n_anchor];

    // Each face claims its best still-free anchor.
    for g in 0..n_gt {
        let mut best: Option<(usize, f64)> = None;
        for (a, &v) in table.row(g).iter().enumerate() {
            if v > 0.0 && labels[a] == Label::Negative && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((a, v));
            }
        }
        if let Some((a, _)) = best {
            labels[a] = Label::Positive(g);
        }
    }

    // Remaining anchors join their best face when above threshold.
    for (a, label) in labels.iter_mut().enumerate() {
        if label.is_positive() {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for g in 0..n_gt {
            let v = table.get(g, a);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= iou_thresh {
                *label = Label::Positive(g);
            }
        }
    }

    Assignment::from_labels(labels, n_gt).expect("labels index known faces")
}

/// Two-step matcher: reference matching at `step1_iou`, then up to
/// `max_extra_anchors` best anchors (overlap above `step2_iou_floor`) for
/// every face with no anchor at `step1_iou`.
pub fn match_two_step(anchors: &[BBox], gts: &[BBox], cfg: &MatchConfig) -> Result<Assignment> {
    if anchors.is_empty() {
        return Err(Error::EmptyGrid);
    }
    cfg.validate()?;
    let table = iou_matrix(gts, anchors)?;
    Ok(match_two_step_table(&table, cfg))
}

pub fn match_two_step_table(table: &IouMatrix, cfg: &MatchConfig) -> Assignment {
    let first = match_baseline_table(table, cfg.step1_iou);
    if cfg.max_extra_anchors == 0 {
        return first;
    }
    let n_gt = table.rows();
    let mut labels = first.labels;
    for (g, matched) in first.per_gt.iter().enumerate() {
        let row = table.row(g);
        // hard face: nothing reached the step-1 threshold, so at most the
        // forced best anchor is held
        if matched.iter().any(|&a| row[a] >= cfg.step1_iou) {
            continue;
        }
        let mut candidates: Vec<(usize, f64)> = row
            .iter()
            .enumerate()
            .filter(|&(a, &v)| {
                v > cfg.step2_iou_floor && labels[a].gt().is_none_or(|h| h == g)
            })
            .map(|(a, &v)| (a, v))
            .collect();
        candidates.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        for &(a, _) in candidates.iter().take(cfg.max_extra_anchors) {
            labels[a] = Label::Positive(g);
        }
    }
    Assignment::from_labels(labels, n_gt).expect("labels index known faces")
}

/// Offsets `(tx, ty, tw, th)` for every positive anchor, ascending anchor index.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTargets {
    pub entries: Vec<(usize, [f64; 4])>,
}

impl RegressionTargets {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Centre/log-size encoding of `target` relative to `anchor`, no variance scaling.
///
/// This pair with [`decode_offset`] is the single place the box
/// parameterization lives.
#[inline]
pub fn encode_offset(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

#[inline]
pub fn decode_offset(anchor: &BBox, t: [f64; 4]) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BBox::from_center(acx + t[0] * aw, acy + t[1] * ah, aw * t[2].exp(), ah * t[3].exp())
}

pub fn encode_targets(
    assignment: &Assignment,
    anchors: &[BBox],
    gts: &[BBox],
) -> Result<RegressionTargets> {
    if assignment.n_anchors() != anchors.len() {
        return Err(Error::shape(
            "encode_targets",
            format!("{} labels for {} anchors", assignment.n_anchors(), anchors.len()),
        ));
    }
    if assignment.per_gt().len() != gts.len() {
        return Err(Error::shape(
            "encode_targets",
            format!("assignment covers {} faces, got {}", assignment.per_gt().len(), gts.len()),
        ));
    }
    for (i, g) in gts.iter().enumerate() {
        g.validate(i)?;
    }
    let entries = assignment
        .positives()
        .map(|(a, g)| (a, encode_offset(&anchors[a], &gts[g])))
        .collect();
    Ok(RegressionTargets { entries })
}

/// Applies per-anchor offsets to every anchor.
pub fn decode_boxes(anchors: &[BBox], offsets: &[[f64; 4]]) -> Result<Vec<BBox>> {
    if anchors.len() != offsets.len() {
        return Err(Error::shape(
            "decode_boxes",
            format!("{} offsets for {} anchors", offsets.len(), anchors.len()),
        ));
    }
    anchors
        .iter()
        .zip(offsets)
        .enumerate()
        .map(|(i, (a, t))| {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index: i });
            }
            let b = decode_offset(a, *t);
            if b.is_valid() {
                Ok(b)
            } else {
                Err(Error::NonFinite { index: i })
            }
        })
        .collect()
}
