//! COCO-style box Average Precision.
//!
//! Matching is greedy in descending score order; AP is computed either as the
//! plain Riemann sum over PR points or with COCO's 101-point interpolation of
//! the precision envelope.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{BoundingBox, DatasetIndex, Split};
use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x2().min(b.x2()) - a.x.max(b.x);
    let ih = a.y2().min(b.y2()) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BoundingBox,
    pub score: f64,
}

impl Detection {
    fn check(&self) -> Option<String> {
        if !(0.0..=1.0).contains(&self.score) {
            return Some(format!("score {} outside [0, 1]", self.score));
        }
        self.bbox.check()
    }
}

pub fn parse_detections(raw: &[u8]) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = serde_json::from_slice(raw).map_err(|e| Error::from_json(&e, raw))?;
    for (index, d) in dets.iter().enumerate() {
        if let Some(reason) = d.check() {
            return Err(Error::InvalidDetection { index, reason });
        }
    }
    Ok(dets)
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&raw)
}

/// Indices of `scores` in processing order: descending score, ties kept in
/// insertion order.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Detection indices in processing order.
    pub order: Vec<usize>,
    /// TP flag per detection, indexed like the input.
    pub is_tp: Vec<bool>,
    /// Ground-truth index matched by each detection, indexed like the input.
    pub matched_gt: Vec<Option<usize>>,
}

impl MatchResult {
    /// TP flags in processing order.
    pub fn ordered_flags(&self) -> Vec<bool> {
        self.order.iter().map(|&i| self.is_tp[i]).collect()
    }
}

/// Greedy one-to-one matching for one image and one category.
///
/// Each detection, in descending score order, takes the still-unmatched
/// ground truth with the highest IoU ≥ `iou_threshold` (lowest index on ties).
pub fn match_detections(
    boxes: &[BoundingBox],
    scores: &[f64],
    gts: &[BoundingBox],
    iou_threshold: f64,
) -> MatchResult {
    assert_eq!(boxes.len(), scores.len());
    let order = score_order(scores);
    let ious: Vec<Vec<f64>> = boxes.iter().map(|d| gts.iter().map(|g| iou(d, g)).collect()).collect();
    match_with_ious(order, &ious, gts.len(), iou_threshold)
}

fn match_with_ious(order: Vec<usize>, ious: &[Vec<f64>], num_gt: usize, thr: f64) -> MatchResult {
    let mut taken = vec![false; num_gt];
    let mut is_tp = vec![false; ious.len()];
    let mut matched_gt = vec![None; ious.len()];
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, &v) in ious[d].iter().enumerate() {
            if taken[g] || v < thr {
                continue;
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            is_tp[d] = true;
            matched_gt[d] = Some(g);
        }
    }
    MatchResult { order, is_tp, matched_gt }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Precision/recall after each ranked detection; recall is non-decreasing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

/// Builds the PR curve from TP flags ordered by descending score.
/// `num_gt == 0` yields an empty curve.
pub fn precision_recall_curve(flags: &[bool], num_gt: usize) -> PrCurve {
    if num_gt == 0 {
        return PrCurve::default();
    }
    let mut tp = 0usize;
    let points = flags
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as usize;
            PrPoint {
                precision: tp as f64 / (i + 1) as f64,
                recall: tp as f64 / num_gt as f64,
            }
        })
        .collect();
    PrCurve { points }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApMode {
    /// Σ (R_n − R_{n−1}) P_n with R_0 = 0.
    Riemann,
    /// Mean of the precision envelope sampled at recall 0, 0.01, ..., 1.
    #[default]
    Coco101,
}

impl std::str::FromStr for ApMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "riemann" => Ok(ApMode::Riemann),
            "coco101" => Ok(ApMode::Coco101),
            other => Err(Error::Invalid(format!("unknown AP mode `{other}`"))),
        }
    }
}

pub fn average_precision(curve: &PrCurve, mode: ApMode) -> f64 {
    let pts = &curve.points;
    if pts.is_empty() {
        return 0.0;
    }
    match mode {
        ApMode::Riemann => {
            let mut prev_recall = 0.0;
            let mut ap = 0.0;
            for p in pts {
                ap += (p.recall - prev_recall) * p.precision;
                prev_recall = p.recall;
            }
            ap
        }
        ApMode::Coco101 => {
            let mut envelope: Vec<f64> = pts.iter().map(|p| p.precision).collect();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut sum = 0.0;
            let mut cursor = 0;
            for r in 0..=100 {
                let level = r as f64 / 100.0;
                while cursor < pts.len() && pts[cursor].recall < level {
                    cursor += 1;
                }
                if cursor == pts.len() {
                    break;
                }
                sum += envelope[cursor];
            }
            sum / 101.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mode: ApMode,
    /// Detections kept per (image, category), highest scores first.
    pub max_dets: usize,
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: ApMode::Coco101,
            max_dets: 100,
            iou_thresholds: coco_iou_thresholds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub iou_threshold: f64,
    /// AP per category id; categories without ground truth are absent.
    pub per_class: BTreeMap<u64, f64>,
    /// Mean over `per_class`.
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub split: Split,
    pub mode: ApMode,
    pub per_threshold: Vec<ThresholdAp>,
    /// Per category, the mean AP over all thresholds.
    pub per_class: BTreeMap<u64, f64>,
    /// Mean over thresholds, then over categories with ground truth.
    pub ap_50_95: f64,
}

impl ApResult {
    pub fn at(&self, iou_threshold: f64) -> Option<&ThresholdAp> {
        self.per_threshold
            .iter()
            .find(|t| (t.iou_threshold - iou_threshold).abs() < 1e-9)
    }
}

// Detections and ground truths of one (image, category) cell.
#[derive(Default)]
struct Cell {
    det_boxes: Vec<BoundingBox>,
    det_scores: Vec<f64>,
    // position of each detection in the global input order
    det_seq: Vec<usize>,
    gts: Vec<BoundingBox>,
}

pub fn coco_map(dets: &[Detection], index: &DatasetIndex, split: Split) -> Result<ApResult> {
    coco_map_with(dets, index, split, &EvalConfig::default())
}

/// Evaluates `dets` against the ground truth of `split`.
pub fn coco_map_with(
    dets: &[Detection],
    index: &DatasetIndex,
    split: Split,
    config: &EvalConfig,
) -> Result<ApResult> {
    // category -> image -> cell; BTreeMaps keep iteration deterministic
    let mut cells: BTreeMap<u64, BTreeMap<u64, Cell>> = BTreeMap::new();
    let mut num_gt: HashMap<u64, usize> = HashMap::new();
    for cat in index.categories() {
        cells.entry(cat.id).or_default();
    }
    for ann in index.annotations_in(split) {
        cells
            .entry(ann.category_id)
            .or_default()
            .entry(ann.image_id)
            .or_default()
            .gts
            .push(ann.bbox);
        *num_gt.entry(ann.category_id).or_default() += 1;
    }
    for (seq, d) in dets.iter().enumerate() {
        if let Some(reason) = d.check() {
            return Err(Error::InvalidDetection { index: seq, reason });
        }
        match index.image(d.image_id) {
            Some(img) if img.split == split => {}
            _ => return Err(Error::Reference { kind: "image", id: d.image_id }),
        }
        if index.category(d.category_id).is_none() {
            return Err(Error::Reference { kind: "category", id: d.category_id });
        }
        let cell = cells.entry(d.category_id).or_default().entry(d.image_id).or_default();
        cell.det_boxes.push(d.bbox);
        cell.det_scores.push(d.score);
        cell.det_seq.push(seq);
    }

    // Per-(image, category) cap, then IoU matrices once per cell.
    struct Prepared {
        scores: Vec<f64>,
        seq: Vec<usize>,
        order: Vec<usize>,
        ious: Vec<Vec<f64>>,
        num_gt: usize,
    }
    let mut prepared: BTreeMap<u64, Vec<Prepared>> = BTreeMap::new();
    for (&cat, images) in &cells {
        let list = prepared.entry(cat).or_default();
        for cell in images.values() {
            let mut order = score_order(&cell.det_scores);
            order.truncate(config.max_dets);
            let ious = cell
                .det_boxes
                .iter()
                .map(|d| cell.gts.iter().map(|g| iou(d, g)).collect())
                .collect();
            list.push(Prepared {
                scores: cell.det_scores.clone(),
                seq: cell.det_seq.clone(),
                order,
                ious,
                num_gt: cell.gts.len(),
            });
        }
    }

    let evaluated: Vec<u64> = prepared
        .keys()
        .copied()
        .filter(|c| num_gt.get(c).copied().unwrap_or(0) > 0)
        .collect();
    let jobs: Vec<(usize, u64)> = (0..config.iou_thresholds.len())
        .flat_map(|t| evaluated.iter().map(move |&c| (t, c)))
        .collect();

    let aps: Vec<f64> = jobs
        .par_iter()
        .map(|&(t, cat)| {
            let thr = config.iou_thresholds[t];
            // (score, global seq, tp)
            let mut ranked: Vec<(f64, usize, bool)> = Vec::new();
            for p in &prepared[&cat] {
                let m = match_with_ious(p.order.clone(), &p.ious, p.num_gt, thr);
                ranked.extend(p.order.iter().map(|&d| (p.scores[d], p.seq[d], m.is_tp[d])));
            }
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let flags: Vec<bool> = ranked.iter().map(|r| r.2).collect();
            let curve = precision_recall_curve(&flags, num_gt[&cat]);
            average_precision(&curve, config.mode)
        })
        .collect();

    let mut per_threshold = Vec::with_capacity(config.iou_thresholds.len());
    for (t, &thr) in config.iou_thresholds.iter().enumerate() {
        let per_class: BTreeMap<u64, f64> = evaluated
            .iter()
            .enumerate()
            .map(|(k, &c)| (c, aps[t * evaluated.len() + k]))
            .collect();
        per_threshold.push(ThresholdAp { iou_threshold: thr, mean: mean(per_class.values()), per_class });
    }
    let per_class: BTreeMap<u64, f64> = evaluated
        .iter()
        .map(|&c| (c, mean(per_threshold.iter().map(|t| &t.per_class[&c]))))
        .collect();
    let ap_50_95 = mean(per_class.values());

    Ok(ApResult { split, mode: config.mode, per_threshold, per_class, ap_50_95 })
}

fn mean<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
