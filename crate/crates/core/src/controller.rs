//! ReduceOnPlateau and early stopping with iteration patience.
//!
//! Both triggers require the epoch counter *and* the iteration counter since
//! the last improvement to reach their patience. On datasets with short
//! epochs the iteration patience keeps training alive for a minimum number of
//! optimizer steps; on large datasets the epoch patience dominates.
//!
//! The metric is maximized (validation AP).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    #[default]
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub metric_mode: MetricMode,
    /// Absolute improvement required over the best metric.
    pub min_delta: f64,
    pub lr_patience: u64,
    pub lr_iteration_patience: u64,
    pub lr_factor: f64,
    pub min_lr: f64,
    pub stop_patience: u64,
    pub stop_iteration_patience: u64,
    /// Leading epochs that never count towards patience.
    pub warmup_epochs: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            metric_mode: MetricMode::Max,
            min_delta: 1e-4,
            lr_patience: 3,
            lr_iteration_patience: 0,
            lr_factor: 0.1,
            min_lr: 1e-6,
            stop_patience: 10,
            stop_iteration_patience: 0,
            warmup_epochs: 0,
        }
    }
}

impl ControllerConfig {
    /// Classic epoch-only patience.
    pub fn classic(lr_patience: u64, stop_patience: u64) -> Self {
        ControllerConfig { lr_patience, stop_patience, ..Default::default() }
    }

    /// Checks hard constraints; soft ones come back as warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!("lr_factor {} not in (0, 1)", self.lr_factor)));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(Error::Config(format!("min_delta {} must be finite and >= 0", self.min_delta)));
        }
        if !(self.min_lr >= 0.0 && self.min_lr.is_finite()) {
            return Err(Error::Config(format!("min_lr {} must be finite and >= 0", self.min_lr)));
        }
        let mut warnings = Vec::new();
        if self.stop_patience < self.lr_patience {
            warnings.push(format!(
                "stop_patience ({}) < lr_patience ({}): training may stop before any LR reduction",
                self.stop_patience, self.lr_patience
            ));
        }
        Ok(warnings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: u64,
    pub iterations_in_epoch: u64,
    pub val_metric: f64,
    pub current_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ControllerState {
    pub best_metric: Option<f64>,
    pub best_epoch: u64,
    pub last_epoch: u64,
    pub epochs_since_improve: u64,
    pub iters_since_improve: u64,
    pub current_lr: Option<f64>,
    pub reductions_applied: u64,
    pub stopped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Continue,
    ReduceLr,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: Action,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub new_lr: Option<f64>,
    pub best_metric: f64,
    pub should_checkpoint: bool,
}

/// Applies one epoch report.
pub fn observe_epoch(
    state: &ControllerState,
    config: &ControllerConfig,
    report: &EpochReport,
) -> Result<(ControllerState, Decision)> {
    if state.stopped {
        return Err(Error::Stopped);
    }
    if report.epoch != state.last_epoch + 1 {
        return Err(Error::Sequence { expected: state.last_epoch + 1, got: report.epoch });
    }
    if report.iterations_in_epoch == 0 {
        return Err(Error::Invalid("iterations_in_epoch must be at least 1".into()));
    }
    if !report.val_metric.is_finite() {
        return Err(Error::Invalid(format!("val_metric {} is not finite", report.val_metric)));
    }

    let mut next = state.clone();
    next.last_epoch = report.epoch;
    next.current_lr = Some(report.current_lr);

    let improved = match state.best_metric {
        None => true,
        Some(best) => report.val_metric > best + config.min_delta,
    };
    if improved {
        next.best_metric = Some(report.val_metric);
        next.best_epoch = report.epoch;
        next.epochs_since_improve = 0;
        next.iters_since_improve = 0;
        let d = decision(&next, Action::Continue, None, true);
        return Ok((next, d));
    }
    if report.epoch <= config.warmup_epochs {
        return Ok((next.clone(), decision(&next, Action::Continue, None, false)));
    }

    next.epochs_since_improve += 1;
    next.iters_since_improve += report.iterations_in_epoch;

    let stop = next.epochs_since_improve >= config.stop_patience
        && next.iters_since_improve >= config.stop_iteration_patience;
    if stop {
        next.stopped = true;
        return Ok((next.clone(), decision(&next, Action::Stop, None, false)));
    }

    let reduce = next.epochs_since_improve >= config.lr_patience
        && next.iters_since_improve >= config.lr_iteration_patience
        && report.current_lr > config.min_lr;
    if reduce {
        let new_lr = (report.current_lr * config.lr_factor).max(config.min_lr);
        next.current_lr = Some(new_lr);
        next.reductions_applied += 1;
        next.epochs_since_improve = 0;
        next.iters_since_improve = 0;
        return Ok((next.clone(), decision(&next, Action::ReduceLr, Some(new_lr), false)));
    }

    Ok((next.clone(), decision(&next, Action::Continue, None, false)))
}

fn decision(state: &ControllerState, action: Action, new_lr: Option<f64>, should_checkpoint: bool) -> Decision {
    Decision {
        action,
        new_lr,
        best_metric: state.best_metric.unwrap_or(f64::NEG_INFINITY),
        should_checkpoint,
    }
}

/// Stateful wrapper around [`observe_epoch`]; single-writer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    config: ControllerConfig,
    state: ControllerState,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    v: u32,
    config: ControllerConfig,
    state: ControllerState,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Controller { config, state: ControllerState::default() })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn is_stopped(&self) -> bool {
        self.state.stopped
    }

    pub fn observe(&mut self, report: &EpochReport) -> Result<Decision> {
        let (state, decision) = observe_epoch(&self.state, &self.config, report)?;
        self.state = state;
        Ok(decision)
    }

    /// Versioned JSON snapshot of config and state.
    pub fn snapshot(&self) -> String {
        serde_json::to_string(&self.snapshot_value()).expect("snapshot serializes")
    }

    pub fn snapshot_value(&self) -> serde_json::Value {
        serde_json::to_value(Snapshot { v: SNAPSHOT_VERSION, config: self.config.clone(), state: self.state.clone() })
            .expect("snapshot serializes")
    }

    pub fn restore(raw: &[u8]) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_slice(raw).map_err(|e| Error::Snapshot(e.to_string()))?;
        Controller::restore_value(value)
    }

    pub fn restore_value(value: serde_json::Value) -> Result<Self> {
        let snap: Snapshot = serde_json::from_value(value).map_err(|e| Error::Snapshot(e.to_string()))?;
        if snap.v != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported snapshot version {}", snap.v)));
        }
        snap.config.validate().map_err(|e| Error::Snapshot(e.to_string()))?;
        Ok(Controller { config: snap.config, state: snap.state })
    }
}
