//! Anchor prior re-clustering from training-set box statistics.
//!
//! Boxes are rescaled to the model input resolution (independent x/y scale,
//! no aspect-ratio preservation), then clustered with seeded k-means++ and
//! Lloyd iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetIndex, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDims {
    pub w: f64,
    pub h: f64,
}

impl BoxDims {
    pub fn new(w: f64, h: f64) -> Self {
        BoxDims { w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// IoU of two boxes sharing a center.
pub fn centered_iou(a: BoxDims, b: BoxDims) -> f64 {
    let inter = a.w.min(b.w) * a.h.min(b.h);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// Squared Euclidean distance on (w, h).
    #[default]
    Euclidean,
    /// 1 − IoU of center-aligned boxes.
    Iou,
}

impl Distance {
    pub fn eval(self, a: BoxDims, b: BoxDims) -> f64 {
        match self {
            Distance::Euclidean => (a.w - b.w).powi(2) + (a.h - b.h).powi(2),
            Distance::Iou => 1.0 - centered_iou(a, b),
        }
    }
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Distance::Euclidean),
            "iou" => Ok(Distance::Iou),
            other => Err(Error::Invalid(format!("unknown distance `{other}`"))),
        }
    }
}

/// Box sizes of `split` mapped to `target` resolution; x and y are scaled
/// independently.
pub fn collect_box_dims(index: &DatasetIndex, target: (f64, f64), split: Split) -> Vec<BoxDims> {
    index
        .annotations_in(split)
        .map(|a| {
            let img = index.image(a.image_id).expect("validated reference");
            BoxDims::new(a.bbox.w * target.0 / img.width, a.bbox.h * target.1 / img.height)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    /// Sorted by area, ascending.
    pub anchors: Vec<BoxDims>,
    pub k: usize,
    /// Mean over boxes of the best centered IoU against any anchor.
    pub quality: f64,
    /// Contiguous ranges into `anchors`, one per detection head.
    pub head_groups: Vec<std::ops::Range<usize>>,
}

impl AnchorSet {
    pub fn from_anchors(mut anchors: Vec<BoxDims>, quality: f64) -> Self {
        sort_by_area(&mut anchors);
        let k = anchors.len();
        AnchorSet { anchors, k, quality, head_groups: vec![0..k] }
    }

    pub fn group(&self, head: usize) -> &[BoxDims] {
        &self.anchors[self.head_groups[head].clone()]
    }
}

fn sort_by_area(anchors: &mut [BoxDims]) {
    anchors.sort_by(|a, b| a.area().total_cmp(&b.area()).then(a.w.total_cmp(&b.w)));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub distance: Distance,
    pub seed: u64,
    pub max_iters: usize,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        KMeansConfig { k, distance: Distance::Euclidean, seed: 42, max_iters: 300 }
    }
}

/// Intermediate record of one clustering run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTrace {
    /// Input dims after canonical sorting.
    pub sorted_dims: Vec<BoxDims>,
    /// Centroids chosen by k-means++.
    pub initial_centroids: Vec<BoxDims>,
    /// Sum of point-to-centroid distances after every assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final centroids, unsorted.
    pub centroids: Vec<BoxDims>,
    pub assignment: Vec<usize>,
}

pub fn kmeans_cluster(dims: &[BoxDims], k: usize, distance: Distance, seed: u64) -> Result<AnchorSet> {
    let config = KMeansConfig { distance, seed, ..KMeansConfig::new(k) };
    kmeans_cluster_traced(dims, &config).map(|(set, _)| set)
}

pub fn kmeans_cluster_traced(dims: &[BoxDims], config: &KMeansConfig) -> Result<(AnchorSet, ClusterTrace)> {
    let k = config.k;
    if k == 0 {
        return Err(Error::Clustering("k must be at least 1".into()));
    }
    if dims.len() < k {
        return Err(Error::Clustering(format!("{} boxes for k = {k}", dims.len())));
    }
    if let Some(d) = dims.iter().find(|d| !(d.w > 0.0 && d.h > 0.0)) {
        return Err(Error::Clustering(format!("non-positive box dims {}x{}", d.w, d.h)));
    }

    // Canonical order makes the result independent of input permutation.
    let mut points = dims.to_vec();
    points.sort_by(|a, b| a.w.total_cmp(&b.w).then(a.h.total_cmp(&b.h)));

    let dist = config.distance;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let initial = plus_plus_init(&points, k, dist, &mut rng);

    let mut centroids = initial.clone();
    let mut assignment = assign(&points, &centroids, dist);
    let mut objective = vec![cost(&points, &centroids, &assignment, dist)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        centroids = update(&points, &centroids, &assignment, dist);
        let next = assign(&points, &centroids, dist);
        objective.push(cost(&points, &centroids, &next, dist));
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }

    let quality = anchor_quality(&points, &centroids);
    let set = AnchorSet::from_anchors(centroids.clone(), quality);
    let trace = ClusterTrace {
        sorted_dims: points,
        initial_centroids: initial,
        objective,
        iterations,
        converged,
        centroids,
        assignment,
    };
    Ok((set, trace))
}

fn plus_plus_init(points: &[BoxDims], k: usize, dist: Distance, rng: &mut ChaCha8Rng) -> Vec<BoxDims> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    let mut nearest: Vec<f64> = points.iter().map(|p| dist.eval(*p, centroids[0])).collect();
    while centroids.len() < k {
        let weights: Vec<f64> = match dist {
            Distance::Euclidean => nearest.clone(),
            Distance::Iou => nearest.iter().map(|d| d * d).collect(),
        };
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // float slack can run past the last positive weight
            while weights[chosen] <= 0.0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[pick];
        centroids.push(c);
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(dist.eval(*p, c));
        }
    }
    centroids
}

// Nearest centroid; ties go to the lower index.
fn assign(points: &[BoxDims], centroids: &[BoxDims], dist: Distance) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let d = dist.eval(*p, *c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

fn cost(points: &[BoxDims], centroids: &[BoxDims], assignment: &[usize], dist: Distance) -> f64 {
    points.iter().zip(assignment).map(|(p, &a)| dist.eval(*p, centroids[a])).sum()
}

// Member means. An empty cluster is re-seeded at the point farthest from its
// current centroid; that point is then no longer eligible for other repairs.
fn update(points: &[BoxDims], prev: &[BoxDims], assignment: &[usize], dist: Distance) -> Vec<BoxDims> {
    let k = prev.len();
    let mut sums = vec![(0.0, 0.0, 0usize); k];
    for (p, &a) in points.iter().zip(assignment) {
        sums[a].0 += p.w;
        sums[a].1 += p.h;
        sums[a].2 += 1;
    }
    let mut centroids: Vec<BoxDims> = sums
        .iter()
        .zip(prev)
        .map(|(&(w, h, n), old)| if n == 0 { *old } else { BoxDims::new(w / n as f64, h / n as f64) })
        .collect();
    let mut used = vec![false; points.len()];
    for j in 0..k {
        if sums[j].2 > 0 {
            continue;
        }
        let far = points
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, p)| (i, dist.eval(*p, centroids[assignment[i]])))
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = far {
            used[i] = true;
            centroids[j] = points[i];
        }
    }
    centroids
}

/// Mean over `dims` of the best centered IoU against any anchor.
pub fn anchor_quality(dims: &[BoxDims], anchors: &[BoxDims]) -> f64 {
    if dims.is_empty() || anchors.is_empty() {
        return 0.0;
    }
    let total: f64 = dims
        .iter()
        .map(|d| anchors.iter().map(|a| centered_iou(*d, *a)).fold(0.0, f64::max))
        .sum();
    total / dims.len() as f64
}

/// Splits the area-sorted anchors into `num_heads` contiguous groups of
/// `k / num_heads`, with the remainder added to the last group. Smaller
/// anchors land on earlier heads.
pub fn assign_to_heads(set: &AnchorSet, num_heads: usize) -> Result<AnchorSet> {
    let k = set.anchors.len();
    if num_heads == 0 {
        return Err(Error::Clustering("num_heads must be at least 1".into()));
    }
    if num_heads > k {
        return Err(Error::Clustering(format!("{num_heads} heads for {k} anchors")));
    }
    let mut anchors = set.anchors.clone();
    sort_by_area(&mut anchors);
    let base = k / num_heads;
    let head_groups = (0..num_heads)
        .map(|h| {
            let start = h * base;
            let end = if h + 1 == num_heads { k } else { start + base };
            start..end
        })
        .collect();
    Ok(AnchorSet { anchors, k, quality: set.quality, head_groups })
}
