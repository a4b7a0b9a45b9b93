//! Independent reference implementations and generators shared by the
//! integration tests. Nothing here calls into the code paths it checks.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use detagnostic_core::controller::{Action, ControllerConfig, EpochReport};
use detagnostic_core::dataset::{Annotation, BoundingBox, Category, DatasetIndex, ImageInfo, Split};
use detagnostic_core::eval::Detection;
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

// ---------------------------------------------------------------- evaluator

/// IoU via corner coordinates.
pub fn oracle_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.x, a.y, a.x + a.w, a.y + a.h);
    let (bx1, by1, bx2, by2) = (b.x, b.y, b.x + b.w, b.y + b.h);
    let w = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let h = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Greedy rule written from scratch: repeatedly take the highest-scoring
/// unprocessed detection (earliest on ties) and give it the best free gt.
/// Returns TP flags in processing order together with the processing order.
pub fn oracle_match(boxes: &[BoundingBox], scores: &[f64], gts: &[BoundingBox], thr: f64) -> (Vec<usize>, Vec<bool>) {
    let mut done = vec![false; boxes.len()];
    let mut free = vec![true; gts.len()];
    let mut order = Vec::new();
    let mut flags = Vec::new();
    for _ in 0..boxes.len() {
        let mut pick: Option<usize> = None;
        for i in 0..boxes.len() {
            if done[i] {
                continue;
            }
            match pick {
                None => pick = Some(i),
                Some(p) if scores[i] > scores[p] => pick = Some(i),
                _ => {}
            }
        }
        let d = pick.unwrap();
        done[d] = true;
        let mut best_g = None;
        let mut best_v = -1.0;
        for (g, gt) in gts.iter().enumerate() {
            let v = oracle_iou(&boxes[d], gt);
            if free[g] && v >= thr && v > best_v {
                best_v = v;
                best_g = Some(g);
            }
        }
        if let Some(g) = best_g {
            free[g] = false;
        }
        order.push(d);
        flags.push(best_g.is_some());
    }
    (order, flags)
}

/// 101-point interpolated AP: at each recall level take the max precision
/// among all ranks whose recall reaches that level.
pub fn oracle_coco101(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut pts = Vec::new();
    let mut tp = 0.0;
    for (n, f) in flags.iter().enumerate() {
        if *f {
            tp += 1.0;
        }
        pts.push((tp / (n as f64 + 1.0), tp / num_gt as f64));
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = pts.iter().filter(|p| p.1 >= level).map(|p| p.0).fold(0.0, f64::max);
        total += best;
    }
    total / 101.0
}

pub fn oracle_riemann(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0.0;
    let mut prev = 0.0;
    let mut ap = 0.0;
    for (n, f) in flags.iter().enumerate() {
        if *f {
            tp += 1.0;
        }
        let r = tp / num_gt as f64;
        ap += (r - prev) * (tp / (n as f64 + 1.0));
        prev = r;
    }
    ap
}

/// End-to-end AP@[0.5:0.95] over an instance: per class, per threshold,
/// match per image, rank all detections of the class by score (input order
/// on ties), interpolate; then average thresholds, then classes with gt.
pub fn oracle_map(index: &DatasetIndex, dets: &[Detection], split: Split, coco: bool) -> f64 {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut class_aps = Vec::new();
    for cat in index.categories() {
        let gts_of = |img: u64| -> Vec<BoundingBox> {
            index
                .annotations()
                .iter()
                .filter(|a| a.category_id == cat.id && a.image_id == img)
                .map(|a| a.bbox)
                .collect()
        };
        let images: Vec<u64> = index.images().iter().filter(|i| i.split == split).map(|i| i.id).collect();
        let num_gt: usize = images.iter().map(|&i| gts_of(i).len()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut per_thr = Vec::new();
        for &thr in &thresholds {
            // (score, input position, tp)
            let mut ranked = Vec::new();
            for &img in &images {
                let idx: Vec<usize> =
                    (0..dets.len()).filter(|&k| dets[k].image_id == img && dets[k].category_id == cat.id).collect();
                let boxes: Vec<BoundingBox> = idx.iter().map(|&k| dets[k].bbox).collect();
                let scores: Vec<f64> = idx.iter().map(|&k| dets[k].score).collect();
                let (order, flags) = oracle_match(&boxes, &scores, &gts_of(img), thr);
                for (o, f) in order.into_iter().zip(flags) {
                    ranked.push((scores[o], idx[o], f));
                }
            }
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let flags: Vec<bool> = ranked.iter().map(|r| r.2).collect();
            per_thr.push(if coco { oracle_coco101(&flags, num_gt) } else { oracle_riemann(&flags, num_gt) });
        }
        class_aps.push(per_thr.iter().sum::<f64>() / per_thr.len() as f64);
    }
    if class_aps.is_empty() {
        0.0
    } else {
        class_aps.iter().sum::<f64>() / class_aps.len() as f64
    }
}

/// Random box inside a `w`×`h` image on a coarse grid so that ties and
/// exact overlaps occur.
pub fn random_box<R: Rng>(rng: &mut R, w: f64, h: f64) -> BoundingBox {
    let bw = rng.gen_range(1..=8) as f64 * w / 16.0;
    let bh = rng.gen_range(1..=8) as f64 * h / 16.0;
    let x = rng.gen_range(0..=((w - bw) / (w / 16.0)) as u32) as f64 * w / 16.0;
    let y = rng.gen_range(0..=((h - bh) / (h / 16.0)) as u32) as f64 * h / 16.0;
    BoundingBox::new(x, y, bw, bh)
}

/// Detection near a ground-truth box, or a random box.
pub fn random_detection<R: Rng>(rng: &mut R, gts: &[BoundingBox], w: f64, h: f64) -> BoundingBox {
    if !gts.is_empty() && rng.gen_bool(0.7) {
        let g = gts[rng.gen_range(0..gts.len())];
        let jitter = |rng: &mut R, v: f64, span: f64| (v + rng.gen_range(-2..=2) as f64 * span / 32.0).max(0.0);
        let x = jitter(rng, g.x, w);
        let y = jitter(rng, g.y, h);
        let bw = (g.w + rng.gen_range(-2..=2) as f64 * w / 32.0).max(w / 32.0).min(w - x);
        let bh = (g.h + rng.gen_range(-2..=2) as f64 * h / 32.0).max(h / 32.0).min(h - y);
        if bw > 0.0 && bh > 0.0 {
            return BoundingBox::new(x, y, bw, bh);
        }
    }
    random_box(rng, w, h)
}

pub struct Instance {
    pub index: DatasetIndex,
    pub dets: Vec<Detection>,
}

/// Up to `max_images` images and `max_classes` classes; per (image, class)
/// up to `max_gts` ground truths and per image up to `max_dets` detections.
pub fn random_instance<R: Rng>(rng: &mut R, max_images: usize, max_classes: usize, max_gts: usize, max_dets: usize) -> Instance {
    let n_img = rng.gen_range(1..=max_images);
    let n_cls = rng.gen_range(1..=max_classes);
    let categories: Vec<Category> = (1..=n_cls as u64).map(|id| Category { id, name: format!("c{id}") }).collect();
    let mut images = Vec::new();
    let mut anns = Vec::new();
    let mut dets = Vec::new();
    let mut ann_id = 1;
    for img in 1..=n_img as u64 {
        let (w, h) = (rng.gen_range(4..=40) as f64 * 16.0, rng.gen_range(4..=40) as f64 * 16.0);
        images.push(ImageInfo { id: img, width: w, height: h, split: Split::Val });
        let mut per_class: BTreeMap<u64, Vec<BoundingBox>> = BTreeMap::new();
        for cat in &categories {
            let n = rng.gen_range(0..=max_gts);
            for _ in 0..n {
                let b = random_box(rng, w, h);
                anns.push(Annotation { id: ann_id, image_id: img, category_id: cat.id, bbox: b });
                ann_id += 1;
                per_class.entry(cat.id).or_default().push(b);
            }
        }
        let n_det = rng.gen_range(0..=max_dets);
        for _ in 0..n_det {
            let cat = categories[rng.gen_range(0..n_cls)].id;
            let gts = per_class.get(&cat).cloned().unwrap_or_default();
            // coarse scores produce ties
            let score = rng.gen_range(0..=20) as f64 / 20.0;
            dets.push(Detection { image_id: img, category_id: cat, bbox: random_detection(rng, &gts, w, h), score });
        }
    }
    Instance { index: DatasetIndex::new("random", images, categories, anns).unwrap(), dets }
}

// --------------------------------------------------------------- controller

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub action: Action,
    pub new_lr: Option<f64>,
    pub checkpoint: bool,
}

/// Step-by-step replay of plateau/stop rules with iteration patience.
/// Deliberately a flat loop over plain variables.
pub fn simulate(config: &ControllerConfig, tape: &[EpochReport]) -> Vec<Step> {
    let mut best: Option<f64> = None;
    let mut bad_epochs = 0u64;
    let mut bad_iters = 0u64;
    let mut out = Vec::new();
    for r in tape {
        let improved = best.map_or(true, |b| r.val_metric > b + config.min_delta);
        if improved {
            best = Some(r.val_metric);
            bad_epochs = 0;
            bad_iters = 0;
            out.push(Step { action: Action::Continue, new_lr: None, checkpoint: true });
            continue;
        }
        if r.epoch <= config.warmup_epochs {
            out.push(Step { action: Action::Continue, new_lr: None, checkpoint: false });
            continue;
        }
        bad_epochs += 1;
        bad_iters += r.iterations_in_epoch;
        if bad_epochs >= config.stop_patience && bad_iters >= config.stop_iteration_patience {
            out.push(Step { action: Action::Stop, new_lr: None, checkpoint: false });
            break;
        }
        if bad_epochs >= config.lr_patience && bad_iters >= config.lr_iteration_patience && r.current_lr > config.min_lr {
            let lr = (r.current_lr * config.lr_factor).max(config.min_lr);
            bad_epochs = 0;
            bad_iters = 0;
            out.push(Step { action: Action::ReduceLr, new_lr: Some(lr), checkpoint: false });
            continue;
        }
        out.push(Step { action: Action::Continue, new_lr: None, checkpoint: false });
    }
    out
}

/// Textbook epoch-only ReduceOnPlateau plus early stopping sharing one
/// "epochs without improvement" counter that a reduction resets.
pub struct ClassicScheduler {
    pub patience: u64,
    pub stop_patience: u64,
    pub factor: f64,
    pub min_lr: f64,
    pub threshold: f64,
    best: f64,
    wait: u64,
}

impl ClassicScheduler {
    pub fn new(patience: u64, stop_patience: u64, factor: f64, min_lr: f64, threshold: f64) -> Self {
        ClassicScheduler { patience, stop_patience, factor, min_lr, threshold, best: f64::NEG_INFINITY, wait: 0 }
    }

    /// Returns (stop, new_lr, improved).
    pub fn step(&mut self, metric: f64, lr: f64) -> (bool, Option<f64>, bool) {
        if metric > self.best + self.threshold || self.best == f64::NEG_INFINITY {
            self.best = metric;
            self.wait = 0;
            return (false, None, true);
        }
        self.wait += 1;
        if self.wait >= self.stop_patience {
            return (true, None, false);
        }
        if self.wait >= self.patience && lr > self.min_lr {
            self.wait = 0;
            return (false, Some((lr * self.factor).max(self.min_lr)), false);
        }
        (false, None, false)
    }
}

/// Metric tape with the given values; lr follows the tape's own decisions
/// only when a caller feeds it back, so it is fixed here.
pub fn tape_from(metrics: &[f64], iters: u64, lr: f64) -> Vec<EpochReport> {
    metrics
        .iter()
        .enumerate()
        .map(|(i, &m)| EpochReport { epoch: i as u64 + 1, iterations_in_epoch: iters, val_metric: m, current_lr: lr })
        .collect()
}

// ------------------------------------------------------------------ anchors

/// Plain Lloyd on squared Euclidean distance from given centroids until the
/// assignment stops changing. Returns (centroids, objective).
pub fn reference_lloyd(points: &[(f64, f64)], init: &[(f64, f64)], max_iters: usize) -> (Vec<(f64, f64)>, f64) {
    let d2 = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2);
    let nearest = |c: &[(f64, f64)], p: (f64, f64)| {
        let mut best = 0;
        for j in 1..c.len() {
            if d2(p, c[j]) < d2(p, c[best]) {
                best = j;
            }
        }
        best
    };
    let mut c = init.to_vec();
    let mut labels: Vec<usize> = points.iter().map(|&p| nearest(&c, p)).collect();
    for _ in 0..max_iters {
        for j in 0..c.len() {
            let members: Vec<_> = points.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| *p).collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                c[j] = (members.iter().map(|p| p.0).sum::<f64>() / n, members.iter().map(|p| p.1).sum::<f64>() / n);
            }
        }
        let next: Vec<usize> = points.iter().map(|&p| nearest(&c, p)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let obj = points.iter().zip(&labels).map(|(&p, &l)| d2(p, c[l])).sum();
    (c, obj)
}

/// Three log-normal-ish modes: small squares, wide boxes, tall boxes.
pub fn three_mode_mixture<R: Rng>(rng: &mut R, per_mode: usize) -> Vec<(f64, f64)> {
    let modes = [(24.0, 24.0), (160.0, 60.0), (50.0, 200.0)];
    let mut out = Vec::new();
    for &(w, h) in &modes {
        for _ in 0..per_mode {
            let sw: f64 = rng.gen_range(0.8..1.25);
            let sh: f64 = rng.gen_range(0.8..1.25);
            out.push((w * sw, h * sh));
        }
    }
    out
}

// ------------------------------------------------------------------- corpus

/// Reference corpus averages per model: [all, small datasets, small objects,
/// large datasets], percent.
pub fn reference_aggregates() -> BTreeMap<String, [f64; 4]> {
    let raw = std::fs::read(fixture("reference_aggregates.json")).unwrap();
    let v: BTreeMap<String, BTreeMap<String, f64>> = serde_json::from_slice(&raw).unwrap();
    v.into_iter()
        .map(|(m, cols)| {
            let c = |k: &str| cols[k];
            (m, [c("avg_ap"), c("small_datasets"), c("small_objects"), c("large_datasets")])
        })
        .collect()
}

/// Plain unweighted mean over the datasets whose name is in `subset`.
pub fn oracle_mean(ap_pct: &BTreeMap<String, f64>, subset: &[&str]) -> f64 {
    let vals: Vec<f64> = subset.iter().map(|d| ap_pct[*d]).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

pub const SMALL_DATASETS: [&str; 5] = ["BCCD", "Pothole", "WGISD1", "WGISD5", "Wildfire"];
pub const SMALL_OBJECTS: [&str; 4] = ["Aerial", "Dice", "MinneApple", "PCB"];
pub const LARGE_DATASETS: [&str; 2] = ["PKLOT", "UNO"];
