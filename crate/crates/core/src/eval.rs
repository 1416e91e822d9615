//! Pooled precision-recall and ROC analysis, cut-off selection, hard
//! confusion statistics, centroid localization, connected components and
//! overlay rendering.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::ConfusionCounts;
use crate::pnm;
use crate::synth::{Axis, CropSpec, SegSample};
use crate::tensor::Tensor;
use crate::unet::Model;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One point per distinct score, thresholds strictly decreasing. A pixel is
/// predicted positive at threshold `t` when its score is `>= t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn check_labels(op: &'static str, scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(
            op,
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::invalid(op, "labels must be 0 or 1"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid(op, "scores contain nan"));
    }
    Ok(())
}

/// Cumulative `(threshold, tp, fp)` after admitting each distinct score,
/// highest first.
fn sweep(scores: &[f64], labels: &[f64]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp, fp));
    }
    out
}

pub fn pr_curve(scores: &[f64], labels: &[f64]) -> Result<PrCurve> {
    check_labels("pr_curve", scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1.0).count();
    if positives == 0 {
        return Err(Error::invalid("pr_curve", "no positive labels; curve undefined"));
    }
    let points = sweep(scores, labels)
        .into_iter()
        .map(|(threshold, tp, fp)| PrPoint {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
        })
        .collect();
    Ok(PrCurve { points })
}

/// Step integral: sum of recall increments times precision.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let mut prev = 0.0;
    let mut ap = 0.0;
    for p in &curve.points {
        ap += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    ap
}

pub fn roc_curve(scores: &[f64], labels: &[f64]) -> Result<Vec<RocPoint>> {
    check_labels("roc_curve", scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("roc_curve", "need both positive and negative labels"));
    }
    let mut pts = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    pts.extend(sweep(scores, labels).into_iter().map(|(threshold, tp, fp)| RocPoint {
        threshold,
        fpr: fp as f64 / neg as f64,
        tpr: tp as f64 / pos as f64,
    }));
    Ok(pts)
}

/// Probability that a random positive outranks a random negative, ties
/// counted as one half. Computed in exact integer arithmetic.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_labels("roc_auc", scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1.0).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("roc_auc", "need both positive and negative labels"));
    }
    // Walk score groups from the lowest up; accumulate twice the U statistic.
    let groups = sweep(scores, labels);
    let mut per_group = Vec::with_capacity(groups.len());
    let mut last = (0usize, 0usize);
    for &(_, tp, fp) in &groups {
        per_group.push(((tp - last.0) as u128, (fp - last.1) as u128));
        last = (tp, fp);
    }
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    for &(pg, ng) in per_group.iter().rev() {
        twice_u += 2 * pg * neg_below + pg * ng;
        neg_below += ng;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

fn f1(p: &PrPoint) -> f64 {
    if p.precision + p.recall > 0.0 {
        2.0 * p.precision * p.recall / (p.precision + p.recall)
    } else {
        0.0
    }
}

/// Threshold of maximal F1; ties go to the highest threshold.
pub fn optimal_cutoff(curve: &PrCurve) -> f64 {
    let mut best = &curve.points[0];
    for p in &curve.points[1..] {
        if f1(p) > f1(best) {
            best = p;
        }
    }
    best.threshold
}

/// `1` where `score >= cutoff`.
pub fn binarize(scores: &Tensor, cutoff: f64) -> Tensor {
    scores.map(|s| if s >= cutoff { 1.0 } else { 0.0 })
}

pub fn hard_confusion(pred: &Tensor, target: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(
            "hard_confusion",
            format!("shapes {:?} and {:?} differ", pred.shape(), target.shape()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let slot = match (p, t) {
            (1.0, 1.0) => &mut c.true_pos,
            (1.0, 0.0) => &mut c.false_pos,
            (0.0, 1.0) => &mut c.false_neg,
            (0.0, 0.0) => &mut c.true_neg,
            _ => return Err(Error::invalid("hard_confusion", "inputs must be binary")),
        };
        *slot += 1.0;
    }
    Ok(c)
}

/// `2tp / (2tp + fp + fn)`, zero when nothing is predicted or present.
pub fn dice_or_zero(c: &ConfusionCounts) -> f64 {
    let den = 2.0 * c.true_pos + c.false_pos + c.false_neg;
    if den > 0.0 {
        2.0 * c.true_pos / den
    } else {
        0.0
    }
}

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        _ => Err(Error::Rank {
            op: "mask",
            expected: "2 ([H,W]) or 3 ([1,H,W])",
            got: t.shape().to_vec(),
        }),
    }
}

fn centroid(mask: &Tensor) -> Option<(f64, f64)> {
    let w = *mask.shape().last()?;
    let (mut r, mut c, mut n) = (0.0, 0.0, 0usize);
    for (i, &v) in mask.data().iter().enumerate() {
        if v > 0.5 {
            r += (i / w) as f64;
            c += (i % w) as f64;
            n += 1;
        }
    }
    (n > 0).then(|| (r / n as f64, c / n as f64))
}

/// Euclidean distance in pixels between foreground centroids; `nan` when the
/// prediction is empty.
pub fn centroid_distance(gt: &Tensor, pred: &Tensor) -> Result<f64> {
    if plane(gt)? != plane(pred)? {
        return Err(Error::invalid(
            "centroid_distance",
            format!("shapes {:?} and {:?} differ", gt.shape(), pred.shape()),
        ));
    }
    let g = centroid(gt).ok_or_else(|| Error::invalid("centroid_distance", "empty ground truth"))?;
    Ok(match centroid(pred) {
        Some(p) => ((g.0 - p.0).powi(2) + (g.1 - p.1).powi(2)).sqrt(),
        None => f64::NAN,
    })
}

/// Keeps only the largest 4-connected foreground component. Equal sizes
/// resolve to the component whose first pixel comes first in row-major order.
pub fn largest_component(mask: &Tensor) -> Result<Tensor> {
    let (h, w) = plane(mask)?;
    let fg: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None;
    let mut queue = VecDeque::new();
    let mut next = 0;
    for start in 0..h * w {
        if !fg[start] || label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if fg[j] && label[j] == usize::MAX {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
        next += 1;
    }
    let keep = best.map(|(l, _)| l);
    let data = label
        .iter()
        .map(|&l| if Some(l) == keep { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(mask.shape().to_vec(), data)
}

/// Number of 4-connected foreground components.
pub fn component_count(mask: &Tensor) -> Result<usize> {
    let (h, w) = plane(mask)?;
    let mut seen: Vec<bool> = mask.data().iter().map(|&v| v <= 0.5).collect();
    let mut n = 0;
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        n += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            for (ok, j) in [
                (r > 0, i.wrapping_sub(w)),
                (r + 1 < h, i + w),
                (c > 0, i.wrapping_sub(1)),
                (c + 1 < w, i + 1),
            ] {
                if ok && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    Ok(n)
}

pub const TP_COLOR: [u8; 3] = [255, 255, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 255, 0];
pub const BAND_COLOR: [u8; 3] = [255, 255, 255];

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn count(&self, color: [u8; 3]) -> usize {
        self.pixels.iter().filter(|&&p| p == color).count()
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        pnm::write_ppm(path, self.rows, self.cols, &self.pixels)
    }
}

/// Colours prediction outcomes over the grayscale image. When `band` is
/// given, its first and last kept lines are drawn in white.
pub fn render_overlay(
    image: &Tensor,
    pred: &Tensor,
    gt: &Tensor,
    band: Option<&CropSpec>,
) -> Result<RgbImage> {
    let (h, w) = plane(image)?;
    if plane(pred)? != (h, w) || plane(gt)? != (h, w) {
        return Err(Error::invalid(
            "render_overlay",
            format!(
                "image {:?}, prediction {:?} and ground truth {:?} differ",
                image.shape(),
                pred.shape(),
                gt.shape()
            ),
        ));
    }
    let mut pixels: Vec<[u8; 3]> = image
        .data()
        .iter()
        .zip(pred.data())
        .zip(gt.data())
        .map(|((&v, &p), &g)| match (p > 0.5, g > 0.5) {
            (true, true) => TP_COLOR,
            (true, false) => FP_COLOR,
            (false, true) => FN_COLOR,
            (false, false) => {
                let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                [q, q, q]
            }
        })
        .collect();
    if let Some(b) = band {
        let last = b.offset + b.kept - 1;
        for i in 0..h * w {
            let (r, c) = (i / w, i % w);
            let line = match b.axis {
                Axis::Rows => r == b.offset || r == last,
                Axis::Cols => c == b.offset || c == last,
            };
            if line {
                pixels[i] = BAND_COLOR;
            }
        }
    }
    Ok(RgbImage {
        rows: h,
        cols: w,
        pixels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Keep only the largest component of each prediction before eDist.
    pub largest_component: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            largest_component: false,
            batch_size: 8,
        }
    }
}

/// Test-set statistics; undefined values are `nan`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub auc: f64,
    pub apr: f64,
    pub dice: f64,
    pub edist: f64,
    pub cutoff: f64,
}

impl EvalSummary {
    /// Every metric undefined, for cells that did not produce a model.
    pub fn failed() -> Self {
        Self {
            sensitivity: f64::NAN,
            specificity: f64::NAN,
            precision: f64::NAN,
            auc: f64::NAN,
            apr: f64::NAN,
            dice: f64::NAN,
            edist: f64::NAN,
            cutoff: f64::NAN,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub summary: EvalSummary,
    pub counts: ConfusionCounts,
    pub pr: Option<PrCurve>,
    pub roc: Option<Vec<RocPoint>>,
    /// Per-image binarized predictions at the cut-off.
    pub binarized: Vec<Tensor>,
}

/// Cut-off used when the pooled ground truth has no positives.
pub const FALLBACK_CUTOFF: f64 = 0.5;

/// Pools per-image scores against masks. A constant scorer has no usable
/// operating point and is binarized as all-negative.
pub fn evaluate_scores(scores: &[Tensor], masks: &[Tensor], opts: &EvalOptions) -> Result<Evaluation> {
    if scores.is_empty() {
        return Err(Error::invalid("evaluate", "empty test set"));
    }
    if scores.len() != masks.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} score maps for {} masks", scores.len(), masks.len()),
        ));
    }
    let mut s_all = Vec::new();
    let mut l_all = Vec::new();
    for (s, m) in scores.iter().zip(masks) {
        if s.shape() != m.shape() {
            return Err(Error::invalid(
                "evaluate",
                format!("scores {:?} and mask {:?} differ", s.shape(), m.shape()),
            ));
        }
        s_all.extend_from_slice(s.data());
        l_all.extend_from_slice(m.data());
    }
    let has_pos = l_all.contains(&1.0);
    let has_neg = l_all.contains(&0.0);
    let pr = if has_pos { Some(pr_curve(&s_all, &l_all)?) } else { None };
    let roc = if has_pos && has_neg { Some(roc_curve(&s_all, &l_all)?) } else { None };
    let auc = if has_pos && has_neg { roc_auc(&s_all, &l_all)? } else { f64::NAN };
    let apr = pr.as_ref().map_or(f64::NAN, average_precision);
    let constant = pr.as_ref().is_some_and(|c| c.points.len() == 1);
    let cutoff = pr.as_ref().map_or(FALLBACK_CUTOFF, optimal_cutoff);

    let binarized: Vec<Tensor> = scores
        .iter()
        .map(|s| {
            if constant {
                Tensor::zeros(s.shape())
            } else {
                binarize(s, cutoff)
            }
        })
        .collect();
    let mut counts = ConfusionCounts::default();
    for (b, m) in binarized.iter().zip(masks) {
        counts = counts + hard_confusion(b, m)?;
    }

    // Images without ground truth foreground carry no localization target.
    let mut dists = Vec::new();
    for (b, m) in binarized.iter().zip(masks) {
        if centroid(m).is_none() {
            continue;
        }
        let p = if opts.largest_component { largest_component(b)? } else { b.clone() };
        dists.push(centroid_distance(m, &p)?);
    }
    let edist = if dists.is_empty() {
        f64::NAN
    } else {
        dists.iter().sum::<f64>() / dists.len() as f64
    };
    Ok(Evaluation {
        summary: EvalSummary {
            sensitivity: counts.sensitivity(),
            specificity: counts.specificity(),
            precision: counts.precision(),
            auc,
            apr,
            dice: dice_or_zero(&counts),
            edist,
            cutoff,
        },
        counts,
        pr,
        roc,
        binarized,
    })
}

/// Inference over samples in batches; one `[1,H,W]` score map per sample.
pub fn predict_samples(model: &Model, samples: &[SegSample], batch_size: usize) -> Result<Vec<Tensor>> {
    let batch_size = batch_size.max(1);
    let chunks: Vec<Result<Vec<Tensor>>> = samples
        .par_chunks(batch_size)
        .map(|chunk| {
            let imgs: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
            let out = model.predict(&Tensor::stack(&imgs)?)?;
            (0..chunk.len()).map(|i| out.slice_outer(i)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(samples.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn evaluate_model(model: &Model, test: &[SegSample], opts: &EvalOptions) -> Result<(Evaluation, Vec<Tensor>)> {
    if test.is_empty() {
        return Err(Error::invalid("evaluate", "empty test set"));
    }
    let scores = predict_samples(model, test, opts.batch_size)?;
    let masks: Vec<Tensor> = test.iter().map(|s| s.mask.clone()).collect();
    Ok((evaluate_scores(&scores, &masks, opts)?, scores))
}

pub fn pr_csv(curve: &PrCurve) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.precision, p.recall);
    }
    s
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    s
}

/// A standalone SVG line plot of `(x, y)` points in the unit square.
pub fn curve_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (w, h, m) = (360.0, 360.0, 40.0);
    let px = |x: f64| m + x.clamp(0.0, 1.0) * (w - 2.0 * m);
    let py = |y: f64| h - m - y.clamp(0.0, 1.0) * (h - 2.0 * m);
    let path: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
        .collect();
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * m,
        h - 2.0 * m
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, xml_escape(title));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{}</text>"#, w / 2.0, h - 10.0, xml_escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" font-size="11" transform="rotate(-90 12 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        xml_escape(y_label)
    );
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#, path.join(" "));
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `pr.csv`, `pr.svg`, `roc.csv` and `roc.svg` (when defined) into `dir`.
pub fn write_curves(dir: &Path, eval: &Evaluation, title: &str) -> Result<()> {
    let put = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    if let Some(pr) = &eval.pr {
        put("pr.csv", pr_csv(pr))?;
        let pts: Vec<(f64, f64)> = pr.points.iter().map(|p| (p.recall, p.precision)).collect();
        put("pr.svg", curve_svg(&format!("{title} (aPr {:.4})", eval.summary.apr), "recall", "precision", &pts))?;
    }
    if let Some(roc) = &eval.roc {
        put("roc.csv", roc_csv(roc))?;
        let pts: Vec<(f64, f64)> = roc.iter().map(|p| (p.fpr, p.tpr)).collect();
        put("roc.svg", curve_svg(&format!("{title} (AUC {:.4})", eval.summary.auc), "false positive rate", "true positive rate", &pts))?;
    }
    Ok(())
}
