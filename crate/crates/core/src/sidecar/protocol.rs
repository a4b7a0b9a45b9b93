//! NDJSON wire protocol between a training process and the controller.
//!
//! Requests (one JSON object per line, dispatched on `kind`):
//!
//! ```text
//! {"kind":"hello","template":"ssd-mobilenetv2"}
//! {"kind":"hello","config":{"lr_patience":3}}
//! {"kind":"epoch_end","epoch":1,"iterations":120,"val_ap":0.41,"lr":0.01}
//! {"kind":"snapshot_request"}
//! {"kind":"bye"}
//! ```
//!
//! Every request line gets exactly one response line: `ack`, `decision`,
//! `snapshot` or `error`.

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::controller::{Controller, ControllerConfig, Decision, EpochReport};
use crate::dataset::{self, DatasetIndex, Split};
use crate::error::Error;
use crate::eval;
use crate::templates;

pub const MAX_LINE_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    #[serde(default)]
    pub template: Option<String>,
    /// Partial config; unset fields take defaults (or the template's).
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    /// Resume from a previously emitted snapshot.
    #[serde(default)]
    pub snapshot: Option<serde_json::Value>,
    #[serde(default)]
    pub session: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochEnd {
    pub epoch: u64,
    pub iterations: u64,
    #[serde(default)]
    pub val_ap: Option<f64>,
    pub lr: f64,
    /// Evaluator mode: COCO results file scored server-side against
    /// `annotations` instead of supplying `val_ap`.
    #[serde(default)]
    pub detections: Option<PathBuf>,
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    #[serde(default)]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Hello(Hello),
    EpochEnd(EpochEnd),
    SnapshotRequest,
    Bye,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadJson,
    BadSchema,
    BadSequence,
    Lifecycle,
    BadConfig,
    TooLong,
    EvalFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Response {
    Ack {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config: Option<ControllerConfig>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        warnings: Vec<String>,
    },
    Decision(Decision),
    Snapshot {
        snapshot: serde_json::Value,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl Response {
    fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Response::Error { code, message: message.into() }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Hello,
    EpochEnd,
    SnapshotRequest,
    Bye,
}

type Envelope = (Kind, serde_json::Map<String, serde_json::Value>);

/// Splits a line into its message kind and remaining fields.
pub fn parse_envelope(line: &str) -> Result<Envelope, Response> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Response::error(ErrorCode::BadJson, e.to_string()))?;
    let serde_json::Value::Object(mut obj) = value else {
        return Err(Response::error(ErrorCode::BadSchema, "(root): expected an object"));
    };
    let kind = match obj.remove("kind") {
        Some(serde_json::Value::String(k)) => k,
        Some(_) => return Err(Response::error(ErrorCode::BadSchema, "kind: expected a string")),
        None => return Err(Response::error(ErrorCode::BadSchema, "kind: missing field")),
    };
    let kind = match kind.as_str() {
        "hello" => Kind::Hello,
        "epoch_end" => Kind::EpochEnd,
        "snapshot_request" => Kind::SnapshotRequest,
        "bye" => Kind::Bye,
        other => {
            return Err(Response::error(ErrorCode::BadSchema, format!("kind: unknown message kind `{other}`")))
        }
    };
    Ok((kind, obj))
}

/// Validates the payload of an envelope against its kind's schema.
pub fn parse_payload((kind, obj): Envelope) -> Result<Request, Response> {
    fn payload<T: serde::de::DeserializeOwned>(
        obj: serde_json::Map<String, serde_json::Value>,
    ) -> Result<T, Response> {
        serde_path_to_error::deserialize(serde_json::Value::Object(obj)).map_err(|e| {
            let path = e.path().to_string();
            Response::error(ErrorCode::BadSchema, format!("{path}: {}", e.inner()))
        })
    }
    let empty = |obj: &serde_json::Map<String, serde_json::Value>| match obj.keys().next() {
        Some(k) => Err(Response::error(ErrorCode::BadSchema, format!("{k}: unexpected field"))),
        None => Ok(()),
    };
    match kind {
        Kind::Hello => payload(obj).map(Request::Hello),
        Kind::EpochEnd => payload(obj).map(Request::EpochEnd),
        Kind::SnapshotRequest => empty(&obj).map(|_| Request::SnapshotRequest),
        Kind::Bye => empty(&obj).map(|_| Request::Bye),
    }
}

/// Parses one request line into a typed message.
pub fn parse_request(line: &str) -> Result<Request, Response> {
    parse_payload(parse_envelope(line)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    AwaitHello,
    Active,
    Stopped,
    Closed,
}

/// Protocol state of one trainer connection.
#[derive(Debug)]
pub struct Session {
    id: String,
    phase: Phase,
    controller: Option<Controller>,
    gt_cache: HashMap<PathBuf, DatasetIndex>,
}

impl Session {
    pub fn new(default_id: impl Into<String>) -> Self {
        Session { id: default_id.into(), phase: Phase::AwaitHello, controller: None, gt_cache: HashMap::new() }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn is_closed(&self) -> bool {
        self.phase == Phase::Closed
    }

    /// True once a hello has been accepted and no bye was seen.
    pub fn is_open(&self) -> bool {
        matches!(self.phase, Phase::Active | Phase::Stopped)
    }

    pub fn controller(&self) -> Option<&Controller> {
        self.controller.as_ref()
    }

    /// Handles one request line, returning the response line (no newline).
    pub fn handle_line(&mut self, line: &str) -> String {
        self.respond(line).to_line()
    }

    pub fn respond(&mut self, line: &str) -> Response {
        if line.len() > MAX_LINE_BYTES {
            return Response::error(ErrorCode::TooLong, format!("line exceeds {MAX_LINE_BYTES} bytes"));
        }
        let envelope = match parse_envelope(line.trim_end_matches(['\r', '\n'])) {
            Ok(env) => env,
            Err(resp) => return resp,
        };
        if let Some(resp) = self.gate(envelope.0) {
            return resp;
        }
        match parse_payload(envelope) {
            Ok(req) => self.dispatch(req),
            Err(resp) => resp,
        }
    }

    // Sequencing is checked before the payload schema.
    fn gate(&self, kind: Kind) -> Option<Response> {
        match (self.phase, kind) {
            (Phase::Closed, _) => Some(Response::error(ErrorCode::Lifecycle, "session closed")),
            (Phase::AwaitHello, Kind::Hello) => None,
            (Phase::AwaitHello, _) => Some(Response::error(ErrorCode::BadSequence, "first message must be hello")),
            (_, Kind::Bye | Kind::SnapshotRequest) => None,
            (Phase::Stopped, _) => Some(Response::error(ErrorCode::Lifecycle, "training already stopped")),
            (Phase::Active, Kind::Hello) => Some(Response::error(ErrorCode::BadSequence, "duplicate hello")),
            (Phase::Active, Kind::EpochEnd) => None,
        }
    }

    fn dispatch(&mut self, req: Request) -> Response {
        match req {
            Request::Hello(h) => self.hello(h),
            Request::Bye => {
                self.phase = Phase::Closed;
                Response::Ack { session: None, config: None, warnings: vec![] }
            }
            Request::SnapshotRequest => {
                let c = self.controller.as_ref().expect("controller exists after hello");
                Response::Snapshot { snapshot: c.snapshot_value() }
            }
            Request::EpochEnd(e) => self.epoch_end(e),
        }
    }

    fn hello(&mut self, h: Hello) -> Response {
        let controller = match resolve_controller(&h) {
            Ok(c) => c,
            Err(resp) => return resp,
        };
        let warnings = controller.config().validate().unwrap_or_default();
        if let Some(id) = h.session {
            self.id = id;
        }
        self.phase = if controller.is_stopped() { Phase::Stopped } else { Phase::Active };
        let config = controller.config().clone();
        self.controller = Some(controller);
        Response::Ack { session: Some(self.id.clone()), config: Some(config), warnings }
    }

    fn epoch_end(&mut self, e: EpochEnd) -> Response {
        let val_ap = match (e.val_ap, &e.detections) {
            (Some(v), None) => v,
            (None, Some(dets)) => match self.evaluate(dets, e.annotations.as_ref(), e.split.unwrap_or(Split::Val)) {
                Ok(v) => v,
                Err(resp) => return resp,
            },
            (Some(_), Some(_)) => {
                return Response::error(ErrorCode::BadSchema, "val_ap: give either val_ap or detections, not both")
            }
            (None, None) => return Response::error(ErrorCode::BadSchema, "val_ap: missing field"),
        };
        let report = EpochReport {
            epoch: e.epoch,
            iterations_in_epoch: e.iterations,
            val_metric: val_ap,
            current_lr: e.lr,
        };
        let controller = self.controller.as_mut().expect("controller exists after hello");
        match controller.observe(&report) {
            Ok(d) => {
                if controller.is_stopped() {
                    self.phase = Phase::Stopped;
                }
                Response::Decision(d)
            }
            Err(err @ Error::Sequence { .. }) => Response::error(ErrorCode::BadSequence, err.to_string()),
            Err(err @ Error::Stopped) => Response::error(ErrorCode::Lifecycle, err.to_string()),
            Err(err) => Response::error(ErrorCode::BadSchema, err.to_string()),
        }
    }

    fn evaluate(&mut self, dets: &PathBuf, gt: Option<&PathBuf>, split: Split) -> Result<f64, Response> {
        let gt = gt.ok_or_else(|| Response::error(ErrorCode::BadSchema, "annotations: required with detections"))?;
        let fail = |e: Error| Response::error(ErrorCode::EvalFailed, e.to_string());
        if !self.gt_cache.contains_key(gt) {
            let index = dataset::load_coco(gt, split).map_err(fail)?;
            self.gt_cache.insert(gt.clone(), index);
        }
        let index = &self.gt_cache[gt];
        let detections = eval::load_detections(dets).map_err(fail)?;
        eval::coco_map(&detections, index, split).map(|r| r.ap_50_95).map_err(fail)
    }
}

fn resolve_controller(h: &Hello) -> Result<Controller, Response> {
    let bad = |m: String| Response::error(ErrorCode::BadConfig, m);
    if let Some(snap) = &h.snapshot {
        if h.template.is_some() || h.config.is_some() {
            return Err(Response::error(ErrorCode::BadSchema, "snapshot: cannot be combined with template/config"));
        }
        return Controller::restore_value(snap.clone()).map_err(|e| bad(e.to_string()));
    }
    let base = match &h.template {
        Some(name) => templates::lookup(name).map_err(|e| bad(e.to_string()))?.scheduler_defaults,
        None => ControllerConfig::default(),
    };
    let config = match &h.config {
        None => base,
        Some(overrides) => {
            let serde_json::Value::Object(over) = overrides else {
                return Err(Response::error(ErrorCode::BadSchema, "config: expected an object"));
            };
            let mut merged = serde_json::to_value(&base).expect("config serializes");
            let target = merged.as_object_mut().expect("config is an object");
            for (k, v) in over {
                target.insert(k.clone(), v.clone());
            }
            serde_path_to_error::deserialize::<_, ControllerConfig>(merged).map_err(|e| {
                Response::error(ErrorCode::BadSchema, format!("config.{}: {}", e.path(), e.inner()))
            })?
        }
    };
    Controller::new(config).map_err(|e| bad(e.to_string()))
}
