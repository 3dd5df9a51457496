//! Detection evaluation: greedy matching, precision/recall, all-points AP,
//! false-positive histograms, and CSV/SVG renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::decode::Detection;
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    /// Excluded from scoring: neither counted as a face nor able to produce a false positive.
    pub ignore: bool,
}

impl GroundTruth {
    pub fn new(bbox: BBox) -> Self {
        GroundTruth { bbox, ignore: false }
    }
}

/// Ground truths keyed by image name.
pub type GroundTruthSet = BTreeMap<String, Vec<GroundTruth>>;

/// Detections keyed by image name.
pub type DetectionSet = BTreeMap<String, Vec<Detection>>;

pub fn counted_faces(gts: &GroundTruthSet) -> usize {
    gts.values().flatten().filter(|g| !g.ignore).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Matched an ignored face; left out of every count.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredOutcome {
    pub image: String,
    pub det_index: usize,
    pub score: f64,
    pub outcome: Outcome,
}

impl ScoredOutcome {
    pub fn flag(score: f64, outcome: Outcome) -> Self {
        ScoredOutcome {
            image: String::new(),
            det_index: 0,
            score,
            outcome,
        }
    }
}

/// PASCAL-style greedy matching in descending score order (ties by image
/// name, then detection index).
///
/// A detection is a true positive when its best-overlap unmatched counted
/// face reaches `iou_thresh`; that face is then used up. Otherwise, if it
/// reaches `iou_thresh` against an ignored face, it is [`Outcome::Ignored`];
/// else it is a false positive.
pub fn match_detections(
    dets: &DetectionSet,
    gts: &GroundTruthSet,
    iou_thresh: f64,
) -> Result<Vec<ScoredOutcome>> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::Config(format!("iou threshold must lie in (0, 1), got {iou_thresh}")));
    }
    let mut order: Vec<(&str, usize, f64)> = Vec::new();
    for (name, list) in dets {
        if !gts.contains_key(name) {
            return Err(Error::UnknownImage(name.clone()));
        }
        for (i, d) in list.iter().enumerate() {
            order.push((name, i, d.score));
        }
    }
    order.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(b.0)).then(a.1.cmp(&b.1)));

    let mut used: BTreeMap<&str, Vec<bool>> =
        gts.iter().map(|(k, v)| (k.as_str(), vec![false; v.len()])).collect();
    let mut out = Vec::with_capacity(order.len());
    for (name, i, score) in order {
        let faces = &gts[name];
        let taken = used.get_mut(name).expect("image checked above");
        let det = &dets[name][i].bbox;
        let mut best: Option<(usize, f64)> = None;
        let mut ignored_hit = false;
        for (g, face) in faces.iter().enumerate() {
            let v = det.iou_unchecked(&face.bbox);
            if face.ignore {
                ignored_hit |= v >= iou_thresh;
            } else if !taken[g] && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        let outcome = match best {
            Some((g, v)) if v >= iou_thresh => {
                taken[g] = true;
                Outcome::TruePositive
            }
            _ if ignored_hit => Outcome::Ignored,
            _ => Outcome::FalsePositive,
        };
        out.push(ScoredOutcome {
            image: name.to_string(),
            det_index: i,
            score,
            outcome,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

/// Cumulative precision and recall at every counted prefix of `flags`.
pub fn pr_curve(flags: &[ScoredOutcome], n_gt: usize) -> Result<PrCurve> {
    if n_gt == 0 {
        return Err(Error::Config("precision/recall needs at least one counted face".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for f in flags {
        match f.outcome {
            Outcome::TruePositive => tp += 1,
            Outcome::FalsePositive => fp += 1,
            Outcome::Ignored => continue,
        }
        points.push(PrPoint {
            recall: tp as f64 / n_gt as f64,
            precision: tp as f64 / (tp + fp) as f64,
            score: f.score,
        });
    }
    Ok(PrCurve { points })
}

/// All-points interpolated AP: area under the monotone precision envelope.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let pts = &curve.points;
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    // sweep from the high-recall end, holding the running max precision
    for i in (0..pts.len()).rev() {
        envelope = envelope.max(pts[i].precision);
        let prev_recall = if i == 0 { 0.0 } else { pts[i - 1].recall };
        ap += (pts[i].recall - prev_recall) * envelope;
    }
    ap
}

/// Histogram of false-positive scores over half-open bins `[e_i, e_{i+1})`,
/// the last bin closed on the right.
pub fn count_false_positives(
    dets: &DetectionSet,
    gts: &GroundTruthSet,
    iou_thresh: f64,
    edges: &[f64],
) -> Result<Vec<usize>> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("bin edges must be increasing, at least two".into()));
    }
    let flags = match_detections(dets, gts, iou_thresh)?;
    Ok(fp_histogram(&flags, edges))
}

pub fn fp_histogram(flags: &[ScoredOutcome], edges: &[f64]) -> Vec<usize> {
    let n_bins = edges.len().saturating_sub(1);
    let mut counts = vec![0usize; n_bins];
    for f in flags.iter().filter(|f| f.outcome == Outcome::FalsePositive) {
        let s = f.score;
        if s < edges[0] || s > edges[n_bins] {
            continue;
        }
        let bin = (0..n_bins)
            .find(|&b| s < edges[b + 1])
            .unwrap_or(n_bins - 1);
        counts[bin] += 1;
    }
    counts
}

pub fn pr_csv(curve: &PrCurve) -> String {
    let mut out = String::from("recall,precision,score\n");
    for p in &curve.points {
        let _ = writeln!(out, "{:.6},{:.6},{:.6}", p.recall, p.precision, p.score);
    }
    out
}

pub fn histogram_csv(edges: &[f64], counts: &[usize]) -> String {
    let mut out = String::from("bin_lo,bin_hi,false_positives\n");
    for (w, c) in edges.windows(2).zip(counts) {
        let _ = writeln!(out, "{},{},{c}", w[0], w[1]);
    }
    out
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const M: f64 = 48.0;

fn svg_frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{y0}" stroke="black"/>"#,
        y0 = H - M,
        x1 = W - M
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    );
    s
}

fn px(v: f64) -> f64 {
    M + v * (W - 2.0 * M)
}

fn py(v: f64) -> f64 {
    H - M - v * (H - 2.0 * M)
}

/// Standalone SVG line chart of a precision/recall curve.
pub fn pr_svg(curve: &PrCurve, title: &str) -> String {
    let mut s = svg_frame(title, "recall", "precision");
    for t in [0.0, 0.5, 1.0] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#, px(t), H - M + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{t}</text>"#, M - 4.0, py(t) + 4.0);
    }
    let pts: Vec<String> = curve
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", px(p.recall), py(p.precision)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        pts.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

/// Standalone SVG bar chart of per-bin counts.
pub fn histogram_svg(edges: &[f64], counts: &[usize], title: &str) -> String {
    let mut s = svg_frame(title, "confidence score", "false positives");
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let n = counts.len().max(1) as f64;
    let bw = (W - 2.0 * M) / n;
    for (i, (&c, w)) in counts.iter().zip(edges.windows(2)).enumerate() {
        let h = c as f64 / max * (H - 2.0 * M);
        let x = M + i as f64 * bw;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="indianred"/>"#,
            x + 2.0,
            H - M - h,
            bw - 4.0,
            h
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{c}</text>"#, x + bw / 2.0, H - M - h - 4.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}-{}</text>"#,
            x + bw / 2.0,
            H - M + 16.0,
            w[0],
            w[1]
        );
    }
    s.push_str("</svg>\n");
    s
}
