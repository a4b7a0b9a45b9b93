//! Built-in dataset-agnostic model templates and training-plan instantiation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::anchors::{self, AnchorSet, Distance, KMeansConfig};
use crate::controller::ControllerConfig;
use crate::dataset::{self, DatasetIndex, DatasetStats, Split};
use crate::error::{Error, Result};

pub const PLAN_VERSION: u32 = 1;

pub const SSD: &str = "ssd-mobilenetv2";
pub const ATSS: &str = "atss-mobilenetv2";
pub const VFNET: &str = "vfnet-resnet50";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Fast,
    Medium,
    Accurate,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Fast => "fast",
            Regime::Medium => "medium",
            Regime::Accurate => "accurate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trick {
    AnchorRecluster,
    Multiscale,
    /// Deformable convolutions in the head; recorded as metadata only.
    ModifiedDcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub random_crop: bool,
    pub horizontal_flip: bool,
    pub photometric_distortion: bool,
}

impl AugmentationPlan {
    pub const STANDARD: AugmentationPlan =
        AugmentationPlan { random_crop: true, horizontal_flip: true, photometric_distortion: true };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorPolicy {
    pub k: usize,
    pub num_heads: usize,
    pub distance: Distance,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelTemplate {
    pub name: String,
    pub regime: Regime,
    pub input_resolution: (u32, u32),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiscale: Option<Vec<(u32, u32)>>,
    pub gflops: f64,
    pub pretrain_provenance: String,
    pub tricks: BTreeSet<Trick>,
    pub augmentation_plan: AugmentationPlan,
    pub scheduler_defaults: ControllerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_policy: Option<AnchorPolicy>,
}

impl ModelTemplate {
    pub fn has(&self, trick: Trick) -> bool {
        self.tricks.contains(&trick)
    }

    pub fn validate(&self) -> Result<()> {
        if self.has(Trick::AnchorRecluster) != self.anchor_policy.is_some() {
            return Err(Error::Invalid(format!(
                "template `{}`: anchor_policy must be present exactly when anchor_recluster is set",
                self.name
            )));
        }
        if self.input_resolution.0 == 0 || self.input_resolution.1 == 0 {
            return Err(Error::Invalid(format!("template `{}`: zero input resolution", self.name)));
        }
        self.scheduler_defaults.validate().map(|_| ())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("template serializes")
    }

    pub fn from_json(raw: &[u8]) -> Result<Self> {
        let t: ModelTemplate = serde_json::from_slice(raw).map_err(|e| Error::from_json(&e, raw))?;
        t.validate()?;
        Ok(t)
    }
}

// Base resolution scaled by ±7.5% and ±15%, rounded to a multiple of 32.
fn multiscale_around(base: (u32, u32)) -> Vec<(u32, u32)> {
    let snap = |v: f64| ((v / 32.0).round() as u32 * 32).max(32);
    [0.85, 0.925, 1.0, 1.075, 1.15]
        .iter()
        .map(|f| {
            if *f == 1.0 {
                base
            } else {
                (snap(base.0 as f64 * f), snap(base.1 as f64 * f))
            }
        })
        .collect()
}

/// The three registered templates, fast to accurate.
pub fn builtin_templates() -> Vec<ModelTemplate> {
    // Patience values are this toolkit's defaults; iteration patience is what
    // keeps short-epoch (small) datasets from stopping early.
    let scheduler = |lr_patience, lr_iters, stop_patience, stop_iters| ControllerConfig {
        lr_patience,
        lr_iteration_patience: lr_iters,
        stop_patience,
        stop_iteration_patience: stop_iters,
        ..ControllerConfig::default()
    };
    vec![
        ModelTemplate {
            name: SSD.into(),
            regime: Regime::Fast,
            input_resolution: (864, 864),
            multiscale: None,
            gflops: 9.36,
            pretrain_provenance: "ImageNet-21k → COCO".into(),
            tricks: BTreeSet::from([Trick::AnchorRecluster]),
            augmentation_plan: AugmentationPlan::STANDARD,
            scheduler_defaults: scheduler(5, 2000, 10, 4000),
            anchor_policy: Some(AnchorPolicy { k: 8, num_heads: 2, distance: Distance::Euclidean, seed: 42 }),
        },
        ModelTemplate {
            name: ATSS.into(),
            regime: Regime::Medium,
            input_resolution: (992, 736),
            multiscale: Some(multiscale_around((992, 736))),
            gflops: 20.86,
            pretrain_provenance: "ImageNet-21k → COCO".into(),
            tricks: BTreeSet::from([Trick::Multiscale]),
            augmentation_plan: AugmentationPlan::STANDARD,
            scheduler_defaults: scheduler(3, 1000, 8, 2000),
            anchor_policy: None,
        },
        ModelTemplate {
            name: VFNET.into(),
            regime: Regime::Accurate,
            input_resolution: (1344, 800),
            multiscale: Some(multiscale_around((1344, 800))),
            gflops: 347.78,
            pretrain_provenance: "COCO".into(),
            tricks: BTreeSet::from([Trick::Multiscale, Trick::ModifiedDcn]),
            augmentation_plan: AugmentationPlan::STANDARD,
            scheduler_defaults: scheduler(3, 1000, 8, 2000),
            anchor_policy: None,
        },
    ]
}

pub fn lookup(name: &str) -> Result<ModelTemplate> {
    builtin_templates()
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::TemplateNotFound(name.to_string()))
}

/// Independent x/y scale factors mapping an image onto `target`.
pub fn resize_factors(image: (f64, f64), target: (u32, u32)) -> Result<(f64, f64)> {
    if !(image.0 > 0.0 && image.1 > 0.0) {
        return Err(Error::Invalid(format!("image size {}x{} must be positive", image.0, image.1)));
    }
    Ok((target.0 as f64 / image.0, target.1 as f64 / image.1))
}

pub fn resize_geometry(image: (f64, f64), template: &ModelTemplate) -> Result<(f64, f64)> {
    resize_factors(image, template.input_resolution)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDataset {
    pub name: String,
    pub stats: DatasetStats,
}

/// Self-contained training plan for one (template, dataset) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingPlan {
    pub v: u32,
    pub template: String,
    pub regime: Regime,
    pub resolution: (u32, u32),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiscale: Option<Vec<(u32, u32)>>,
    pub pretrain_provenance: String,
    pub tricks: BTreeSet<Trick>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_policy: Option<AnchorPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<AnchorSet>,
    pub scheduler: ControllerConfig,
    pub augmentation: AugmentationPlan,
    pub dataset: PlanDataset,
}

impl TrainingPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(raw: &[u8]) -> Result<Self> {
        let plan: TrainingPlan = serde_json::from_slice(raw).map_err(|e| Error::from_json(&e, raw))?;
        if plan.v != PLAN_VERSION {
            return Err(Error::Invalid(format!("unsupported plan version {}", plan.v)));
        }
        if plan.anchors.is_some() && plan.anchor_policy.is_none() {
            return Err(Error::Invalid("plan has anchors but no anchor_policy".into()));
        }
        Ok(plan)
    }
}

/// Resolves `template` against a dataset. Anchor re-clustering, when the
/// template asks for it, uses train-split boxes at the template resolution.
pub fn instantiate(template: &ModelTemplate, index: &DatasetIndex) -> Result<TrainingPlan> {
    template.validate()?;
    if index.images_in(Split::Train).next().is_none() {
        return Err(Error::Invalid(format!("dataset `{}` has an empty train split", index.name())));
    }
    let anchors = match (&template.anchor_policy, template.has(Trick::AnchorRecluster)) {
        (Some(policy), true) => {
            let (w, h) = template.input_resolution;
            let dims = anchors::collect_box_dims(index, (w as f64, h as f64), Split::Train);
            let config = KMeansConfig {
                distance: policy.distance,
                seed: policy.seed,
                ..KMeansConfig::new(policy.k)
            };
            let (set, _) = anchors::kmeans_cluster_traced(&dims, &config)?;
            Some(anchors::assign_to_heads(&set, policy.num_heads)?)
        }
        _ => None,
    };
    Ok(TrainingPlan {
        v: PLAN_VERSION,
        template: template.name.clone(),
        regime: template.regime,
        resolution: template.input_resolution,
        multiscale: template.multiscale.clone(),
        pretrain_provenance: template.pretrain_provenance.clone(),
        tricks: template.tricks.clone(),
        anchor_policy: template.anchor_policy,
        anchors,
        scheduler: template.scheduler_defaults.clone(),
        augmentation: template.augmentation_plan,
        dataset: PlanDataset { name: index.name().to_string(), stats: dataset::compute_stats(index) },
    })
}
