//! Equal-weight aggregation of per-dataset AP across a corpus, and
//! leaderboard rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetStats, RegimeLabel, RegimeThresholds};
use crate::error::{Error, Result};

/// One model's results over a corpus. AP values are fractions in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub model_name: String,
    /// Size group used for leaderboard ordering (`fast`, `medium`, `accurate`, ...).
    pub group: Option<String>,
    pub per_dataset_ap: BTreeMap<String, f64>,
    pub regime: BTreeMap<String, RegimeLabel>,
}

impl CorpusRecord {
    pub fn new(
        model_name: impl Into<String>,
        per_dataset_ap: BTreeMap<String, f64>,
        regime: BTreeMap<String, RegimeLabel>,
    ) -> Result<Self> {
        for (name, &ap) in &per_dataset_ap {
            if !regime.contains_key(name) {
                return Err(Error::Invalid(format!("dataset `{name}` has no regime label")));
            }
            if !(0.0..=1.0).contains(&ap) {
                return Err(Error::Invalid(format!("AP {ap} for `{name}` outside [0, 1]")));
            }
        }
        Ok(CorpusRecord { model_name: model_name.into(), group: None, per_dataset_ap, regime })
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }
}

/// Corpus-level means, as fractions. Subset means are absent when the subset
/// is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetrics {
    pub avg_ap: f64,
    pub avg_ap_small_datasets: Option<f64>,
    pub avg_ap_small_objects: Option<f64>,
    pub avg_ap_large_datasets: Option<f64>,
}

impl CorpusMetrics {
    /// The four columns in percent.
    pub fn as_percent(&self) -> [Option<f64>; 4] {
        [
            Some(self.avg_ap),
            self.avg_ap_small_datasets,
            self.avg_ap_small_objects,
            self.avg_ap_large_datasets,
        ]
        .map(|v| v.map(|x| x * 100.0))
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Unweighted means over all datasets and over each regime subset.
pub fn aggregate(record: &CorpusRecord) -> Result<CorpusMetrics> {
    if record.per_dataset_ap.is_empty() {
        return Err(Error::Invalid(format!("record `{}` has no datasets", record.model_name)));
    }
    let subset = |pick: fn(&RegimeLabel) -> bool| {
        mean_of(
            record
                .per_dataset_ap
                .iter()
                .filter(|(name, _)| record.regime.get(*name).is_some_and(pick))
                .map(|(_, &ap)| ap),
        )
    };
    Ok(CorpusMetrics {
        avg_ap: mean_of(record.per_dataset_ap.values().copied()).expect("non-empty"),
        avg_ap_small_datasets: subset(|r| r.small_dataset),
        avg_ap_small_objects: subset(|r| r.small_object),
        avg_ap_large_datasets: subset(|r| r.large_dataset),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub model_name: String,
    pub group: Option<String>,
    pub metrics: CorpusMetrics,
    /// Per-dataset AP in percent, keyed by dataset name.
    pub per_dataset_pct: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Leaderboard {
    /// Dataset column order: small datasets, small-object datasets, large
    /// datasets, then anything unlabeled; alphabetical within each.
    pub datasets: Vec<String>,
    pub rows: Vec<LeaderboardRow>,
}

fn group_rank(group: Option<&str>) -> (u8, String) {
    match group {
        Some("fast") => (0, String::new()),
        Some("medium") => (1, String::new()),
        Some("accurate") => (2, String::new()),
        Some(other) => (3, other.to_string()),
        None => (4, String::new()),
    }
}

fn regime_rank(label: &RegimeLabel) -> u8 {
    if label.small_dataset {
        0
    } else if label.small_object {
        1
    } else if label.large_dataset {
        2
    } else {
        3
    }
}

/// Aggregates every record and orders rows by group, then `avg_ap`
/// descending, then model name.
pub fn render_leaderboard(records: &[CorpusRecord]) -> Result<Leaderboard> {
    let Some(first) = records.first() else {
        return Ok(Leaderboard::default());
    };
    let universe: BTreeSet<&String> = first.per_dataset_ap.keys().collect();
    for r in &records[1..] {
        let other: BTreeSet<&String> = r.per_dataset_ap.keys().collect();
        if other != universe {
            let missing: Vec<_> = universe.difference(&other).collect();
            let extra: Vec<_> = other.difference(&universe).collect();
            return Err(Error::DatasetMismatch(format!(
                "`{}` vs `{}`: missing {:?}, extra {:?}",
                first.model_name, r.model_name, missing, extra
            )));
        }
    }

    let mut datasets: Vec<String> = universe.into_iter().cloned().collect();
    datasets.sort_by_key(|d| (first.regime.get(d).map(regime_rank).unwrap_or(3), d.clone()));

    let mut rows = records
        .iter()
        .map(|r| {
            Ok(LeaderboardRow {
                model_name: r.model_name.clone(),
                group: r.group.clone(),
                metrics: aggregate(r)?,
                per_dataset_pct: r.per_dataset_ap.iter().map(|(k, v)| (k.clone(), v * 100.0)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        group_rank(a.group.as_deref())
            .cmp(&group_rank(b.group.as_deref()))
            .then(b.metrics.avg_ap.total_cmp(&a.metrics.avg_ap))
            .then(a.model_name.cmp(&b.model_name))
    });
    Ok(Leaderboard { datasets, rows })
}

/// Rounds half away from zero to one decimal, for display.
pub fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

impl Leaderboard {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut header = vec!["Model".to_string(), "Group".into(), "AVG AP".into()];
        header.extend(["small ds".into(), "small obj".into(), "large ds".into()]);
        header.extend(self.datasets.iter().cloned());
        let mut table: Vec<Vec<String>> = vec![header];
        for row in &self.rows {
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", round1(x)));
            let mut line = vec![row.model_name.clone(), row.group.clone().unwrap_or_default()];
            line.extend(row.metrics.as_percent().map(fmt));
            line.extend(self.datasets.iter().map(|d| fmt(row.per_dataset_pct.get(d).copied())));
            table.push(line);
        }
        let widths: Vec<usize> =
            (0..table[0].len()).map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        for (i, line) in table.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| if c < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
            }
        }
        out
    }
}

/// Regime overrides from a manifest; set fields replace computed flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegimeOverride {
    pub small_dataset: Option<bool>,
    pub small_object: Option<bool>,
    pub large_dataset: Option<bool>,
}

impl RegimeOverride {
    pub fn apply(&self, mut label: RegimeLabel) -> RegimeLabel {
        if let Some(v) = self.small_dataset {
            label.small_dataset = v;
        }
        if let Some(v) = self.small_object {
            label.small_object = v;
        }
        if let Some(v) = self.large_dataset {
            label.large_dataset = v;
        }
        label
    }
}

/// Where a manifest entry's annotations live: a `{train,val,test}.json`
/// directory, or explicit per-split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnnotationSource {
    Dir(PathBuf),
    Splits(BTreeMap<dataset::Split, PathBuf>),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<AnnotationSource>,
    /// Precomputed statistics, used instead of reading annotations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<DatasetStats>,
    #[serde(default)]
    pub regime: RegimeOverride,
}

/// Dataset name → entry.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorpusManifest {
    pub datasets: BTreeMap<String, ManifestEntry>,
}

impl CorpusManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: CorpusManifest =
            serde_json::from_slice(&raw).map_err(|e| Error::from_json(&e, &raw))?;
        // relative annotation paths are relative to the manifest
        let base = path.parent().unwrap_or(Path::new("."));
        for entry in manifest.datasets.values_mut() {
            match &mut entry.annotations {
                Some(AnnotationSource::Dir(p)) => *p = base.join(&*p),
                Some(AnnotationSource::Splits(m)) => m.values_mut().for_each(|p| *p = base.join(&*p)),
                None => {}
            }
        }
        Ok(manifest)
    }

    /// Resolves a regime label per dataset from stats or annotations, then
    /// applies overrides.
    pub fn regimes(&self, thresholds: &RegimeThresholds) -> Result<BTreeMap<String, RegimeLabel>> {
        self.datasets
            .iter()
            .map(|(name, entry)| {
                let stats = match (&entry.stats, &entry.annotations) {
                    (Some(s), _) => Some(s.clone()),
                    (None, Some(src)) => Some(dataset::compute_stats(&load_source(name, src)?)),
                    (None, None) => None,
                };
                let base = stats.map(|s| dataset::classify_regime(&s, thresholds)).unwrap_or_default();
                Ok((name.clone(), entry.regime.apply(base)))
            })
            .collect()
    }
}

fn load_source(name: &str, src: &AnnotationSource) -> Result<dataset::DatasetIndex> {
    match src {
        AnnotationSource::Dir(dir) => dataset::load_dataset_dir(dir),
        AnnotationSource::Splits(files) => {
            let mut acc: Option<dataset::DatasetIndex> = None;
            for (&split, path) in files {
                let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                let part = dataset::parse_coco_named(&raw, split, name)?;
                acc = Some(match acc {
                    Some(a) => a.merge(part)?,
                    None => part,
                });
            }
            acc.ok_or_else(|| Error::Invalid(format!("dataset `{name}` lists no annotation files")))
        }
    }
}

/// Results of one model in the tabular, percent-scale file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResults {
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    /// Dataset name → AP in percent.
    pub ap_pct: BTreeMap<String, f64>,
}

impl ModelResults {
    pub fn into_record(self, regimes: &BTreeMap<String, RegimeLabel>) -> Result<CorpusRecord> {
        let mut regime = BTreeMap::new();
        for name in self.ap_pct.keys() {
            let label = regimes
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("dataset `{name}` missing from manifest")))?;
            regime.insert(name.clone(), *label);
        }
        let aps = self.ap_pct.into_iter().map(|(k, v)| (k, v / 100.0)).collect();
        let mut record = CorpusRecord::new(self.model_name, aps, regime)?;
        record.group = self.group;
        Ok(record)
    }
}

pub fn parse_model_results(raw: &[u8]) -> Result<Vec<ModelResults>> {
    serde_json::from_slice(raw).map_err(|e| Error::from_json(&e, raw))
}

/// Reads evaluator outputs from a results directory.
///
/// `<dir>/<dataset>.json` files form one model named after the directory;
/// `<dir>/<model>/<dataset>.json` form one model per subdirectory. Each file
/// is an evaluator result whose `ap_50_95` is used.
pub fn load_results_dir(dir: impl AsRef<Path>) -> Result<Vec<ModelResults>> {
    let dir = dir.as_ref();
    let read_model = |model_dir: &Path, name: String| -> Result<Option<ModelResults>> {
        let mut ap_pct = BTreeMap::new();
        for entry in std::fs::read_dir(model_dir).map_err(|e| Error::io(model_dir, e))? {
            let path = entry.map_err(|e| Error::io(model_dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let result: crate::eval::ApResult =
                serde_json::from_slice(&raw).map_err(|e| Error::from_json(&e, &raw))?;
            let dataset = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            ap_pct.insert(dataset, result.ap_50_95 * 100.0);
        }
        Ok((!ap_pct.is_empty()).then_some(ModelResults { model_name: name, group: None, ap_pct }))
    };

    let mut subdirs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            subdirs.push(path);
        }
    }
    subdirs.sort();
    let mut out = Vec::new();
    let own_name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("model").to_string();
    if let Some(m) = read_model(dir, own_name)? {
        out.push(m);
    }
    for sub in subdirs {
        let name = sub.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if let Some(m) = read_model(&sub, name)? {
            out.push(m);
        }
    }
    Ok(out)
}
