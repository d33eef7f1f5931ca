//! Wire protocol for the external tool clients (judge, generator, policy).
//!
//! Every exchange is a single JSON document each way. Schemas are strict:
//! unknown fields, missing fields, and wrong types are all rejected, and the
//! resulting error names the offending field so callers can mark a candidate
//! unscored instead of failing a trial. Field names are frozen in
//! `schemas/wire_protocol.json`, which doubles as a fixture for conformance
//! tests.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{decode_ppm, encode_ppm, Image};

/// Protocol version tag carried by every document.
pub const SCHEMA_VERSION: &str = "1";

// ---------------------------------------------------------------------------
// Documents
// ---------------------------------------------------------------------------

/// Request sent to the judge (assess/describe) and generator (generate)
/// endpoints. The image travels as base64-encoded PPM bytes.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ToolRequest {
    pub schema_version: String,
    pub task: String,
    pub image: String,
    pub prompt: String,
}

/// Head pose reported by the judge.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Pose {
    Frontal,
    Profile,
    Other,
    None,
}

/// Structured visual evidence returned by an `assess` call. Auxiliary
/// `attributes` are free-form context for prompts and logs; they never enter
/// the scalar evidence score.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VisualEvidence {
    pub schema_version: String,
    pub face_visible: bool,
    pub pose: Pose,
    pub components_complete: f64,
    pub artifacts_present: bool,
    pub artifact_severity: f64,
    pub artifact_descriptions: Vec<String>,
    pub confidence: f64,
    pub attributes: BTreeMap<String, String>,
}

impl VisualEvidence {
    /// Range-check the numeric fields (the schema enforces types only).
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("components_complete", self.components_complete),
            ("artifact_severity", self.artifact_severity),
            ("confidence", self.confidence),
        ] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::Schema(format!("field `{name}` out of range: {v}")));
            }
        }
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported schema_version `{}`",
                self.schema_version
            )));
        }
        Ok(())
    }
}

/// Attribute sheet returned by a `describe` call; feeds prompt composition.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AttributeDescription {
    pub schema_version: String,
    pub identity_cues: String,
    pub appearance: String,
    pub pose: String,
    pub lighting: String,
    pub background: String,
    pub quality_issues: String,
}

impl AttributeDescription {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported schema_version `{}`",
                self.schema_version
            )));
        }
        for (name, v) in [
            ("identity_cues", &self.identity_cues),
            ("appearance", &self.appearance),
            ("pose", &self.pose),
            ("lighting", &self.lighting),
            ("background", &self.background),
            ("quality_issues", &self.quality_issues),
        ] {
            if v.is_empty() {
                return Err(Error::Schema(format!("field `{name}` is empty")));
            }
        }
        Ok(())
    }
}

/// Response from a `generate` call: the restored image as base64 PPM.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GenerateResponse {
    pub schema_version: String,
    pub image: String,
}

/// State summary sent to the policy endpoint each loop iteration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PolicyRequest {
    pub schema_version: String,
    pub mode: String,
    pub relative_improvement: f64,
    pub fused_score: f64,
    pub fused_trend: f64,
    pub score_drop_from_best: f64,
    pub plausible: bool,
    pub stagnant: bool,
    pub switches_this_plateau: u64,
    pub steps_used: u64,
    pub steps_budget: u64,
    pub branches_used: u64,
    pub branches_budget: u64,
    pub refinements_used: u64,
    pub refinements_budget: u64,
}

/// Action document returned by the policy endpoint. Optional parameters are
/// interpreted per `action`; validation happens at execution.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PolicyResponse {
    pub schema_version: String,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_index: Option<u64>,
}

/// Base64-encode an image as PPM for transport.
pub fn encode_image_field(image: &Image) -> String {
    BASE64.encode(encode_ppm(image))
}

/// Decode a base64 PPM image field.
pub fn decode_image_field(field: &str) -> Result<Image> {
    let bytes = BASE64
        .decode(field)
        .map_err(|e| Error::Schema(format!("field `image` is not valid base64: {e}")))?;
    decode_ppm(&bytes)
}

/// Parse a response document strictly, surfacing serde's field-level message
/// (e.g. "missing field `confidence`").
pub fn parse_strict<'a, T: Deserialize<'a>>(json: &'a str) -> Result<T> {
    serde_json::from_str(json).map_err(|e| Error::Schema(e.to_string()))
}

// ---------------------------------------------------------------------------
// Transport
// ---------------------------------------------------------------------------

/// Transport-level failure, mapped by callers to judge-unavailable or
/// generation-unavailable.
#[derive(Clone, Debug)]
pub struct TransportError(pub String);

/// One request document in, one response document out.
pub trait Transport: Send + Sync {
    fn call(&self, request_json: &str) -> std::result::Result<String, TransportError>;
}

/// Counting semaphore bounding in-flight requests per endpoint.
struct Gate {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits), cv: Condvar::new() }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut p = self.permits.lock().expect("gate poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("gate poisoned");
        }
        *p -= 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.gate.permits.lock().expect("gate poisoned") += 1;
        self.gate.cv.notify_one();
    }
}

/// Endpoint configuration for a live HTTP transport.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EndpointConfig {
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

fn default_max_in_flight() -> usize {
    4
}

/// Blocking JSON-over-HTTP transport with retries and bounded concurrency.
pub struct HttpTransport {
    cfg: EndpointConfig,
    agent: ureq::Agent,
    gate: Arc<Gate>,
}

impl HttpTransport {
    pub fn new(cfg: EndpointConfig) -> Self {
        let agent_cfg = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build();
        let gate = Arc::new(Gate::new(cfg.max_in_flight.max(1)));
        Self { cfg, agent: agent_cfg.into(), gate }
    }
}

impl Transport for HttpTransport {
    fn call(&self, request_json: &str) -> std::result::Result<String, TransportError> {
        let _permit = self.gate.acquire();
        let mut last = String::new();
        for _ in 0..=self.cfg.retries {
            let attempt = self
                .agent
                .post(&self.cfg.url)
                .header("content-type", "application/json")
                .send(request_json);
            match attempt {
                Ok(mut resp) => match resp.body_mut().read_to_string() {
                    Ok(body) => return Ok(body),
                    Err(e) => last = format!("reading response body: {e}"),
                },
                Err(e) => last = e.to_string(),
            }
        }
        Err(TransportError(format!(
            "{} after {} attempts: {last}",
            self.cfg.url,
            self.cfg.retries + 1
        )))
    }
}

/// Replay transport for unit tests: pops pre-scripted response documents in
/// order and records every request it saw.
#[derive(Default)]
pub struct ScriptedTransport {
    responses: Mutex<VecDeque<String>>,
    requests: Mutex<Vec<String>>,
}

impl ScriptedTransport {
    pub fn new<I: IntoIterator<Item = String>>(responses: I) -> Self {
        Self {
            responses: Mutex::new(responses.into_iter().collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// All request documents received so far, in order.
    pub fn requests(&self) -> Vec<String> {
        self.requests.lock().expect("scripted transport poisoned").clone()
    }
}

impl Transport for ScriptedTransport {
    fn call(&self, request_json: &str) -> std::result::Result<String, TransportError> {
        self.requests
            .lock()
            .expect("scripted transport poisoned")
            .push(request_json.to_string());
        self.responses
            .lock()
            .expect("scripted transport poisoned")
            .pop_front()
            .ok_or_else(|| TransportError("script exhausted".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_evidence_json() -> String {
        serde_json::json!({
            "schema_version": "1",
            "face_visible": true,
            "pose": "frontal",
            "components_complete": 0.9,
            "artifacts_present": false,
            "artifact_severity": 0.0,
            "artifact_descriptions": [],
            "confidence": 0.8,
            "attributes": {"background": "slate"}
        })
        .to_string()
    }

    #[test]
    fn evidence_roundtrip_and_strictness() {
        let v: VisualEvidence = parse_strict(&sample_evidence_json()).unwrap();
        assert!(v.face_visible);
        assert_eq!(v.pose, Pose::Frontal);
        v.validate().unwrap();
        let back = serde_json::to_string(&v).unwrap();
        let again: VisualEvidence = parse_strict(&back).unwrap();
        assert_eq!(again, v);
    }

    #[test]
    fn missing_field_error_names_it() {
        let mut doc: serde_json::Value = serde_json::from_str(&sample_evidence_json()).unwrap();
        doc.as_object_mut().unwrap().remove("confidence");
        let err = parse_strict::<VisualEvidence>(&doc.to_string()).unwrap_err();
        match err {
            Error::Schema(msg) => assert!(msg.contains("confidence"), "got: {msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let mut doc: serde_json::Value = serde_json::from_str(&sample_evidence_json()).unwrap();
        doc.as_object_mut().unwrap().insert("extra".into(), serde_json::json!(1));
        let err = parse_strict::<VisualEvidence>(&doc.to_string()).unwrap_err();
        match err {
            Error::Schema(msg) => assert!(msg.contains("extra"), "got: {msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_type_rejected() {
        let mut doc: serde_json::Value = serde_json::from_str(&sample_evidence_json()).unwrap();
        doc.as_object_mut().unwrap().insert("confidence".into(), serde_json::json!("high"));
        assert!(matches!(parse_strict::<VisualEvidence>(&doc.to_string()), Err(Error::Schema(_))));
    }

    #[test]
    fn evidence_range_validation() {
        let mut v: VisualEvidence = parse_strict(&sample_evidence_json()).unwrap();
        v.confidence = 1.5;
        assert!(matches!(v.validate(), Err(Error::Schema(_))));
        v.confidence = f64::NAN;
        assert!(matches!(v.validate(), Err(Error::Schema(_))));
    }

    #[test]
    fn image_field_roundtrip() {
        let mut rng = crate::numerics::Rng::from_seed(7);
        let img = crate::image::synth_face(&mut rng, 16, 16);
        let field = encode_image_field(&img);
        let back = decode_image_field(&field).unwrap();
        assert_eq!(back.height(), 16);
        assert_eq!(back.width(), 16);
        // PPM quantizes to 8 bits; round trip is exact at that precision.
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert!(matches!(decode_image_field("@@not-base64@@"), Err(Error::Schema(_))));
    }

    #[test]
    fn scripted_transport_replays_in_order() {
        let t = ScriptedTransport::new(vec!["one".into(), "two".into()]);
        assert_eq!(t.call("req-a").unwrap(), "one");
        assert_eq!(t.call("req-b").unwrap(), "two");
        assert!(t.call("req-c").is_err());
        assert_eq!(t.requests(), vec!["req-a", "req-b", "req-c"]);
    }

    #[test]
    fn policy_documents_roundtrip() {
        let req = PolicyRequest {
            schema_version: SCHEMA_VERSION.into(),
            mode: "joint".into(),
            relative_improvement: 0.02,
            fused_score: 0.5,
            fused_trend: 0.01,
            score_drop_from_best: 0.0,
            plausible: true,
            stagnant: false,
            switches_this_plateau: 0,
            steps_used: 40,
            steps_budget: 4000,
            branches_used: 0,
            branches_budget: 5,
            refinements_used: 0,
            refinements_budget: 3,
        };
        let json = serde_json::to_string(&req).unwrap();
        assert_eq!(parse_strict::<PolicyRequest>(&json).unwrap(), req);
        let resp: PolicyResponse = parse_strict(
            r#"{"schema_version":"1","action":"continue","mode":"image_only","n_steps":20}"#,
        )
        .unwrap();
        assert_eq!(resp.action, "continue");
        assert_eq!(resp.n_steps, Some(20));
        assert_eq!(resp.checkpoint_id, None);
    }

    #[test]
    fn shipped_schema_file_matches_types() {
        // The schema file freezes field names; its embedded examples must
        // parse through the real types.
        let raw = include_str!("../schemas/wire_protocol.json");
        let doc: serde_json::Value = serde_json::from_str(raw).unwrap();
        let ex = &doc["examples"];
        parse_strict::<ToolRequest>(&ex["assess_request"].to_string()).unwrap();
        parse_strict::<VisualEvidence>(&ex["assess_response"].to_string()).unwrap()
            .validate()
            .unwrap();
        parse_strict::<ToolRequest>(&ex["describe_request"].to_string()).unwrap();
        parse_strict::<AttributeDescription>(&ex["describe_response"].to_string())
            .unwrap()
            .validate()
            .unwrap();
        parse_strict::<ToolRequest>(&ex["generate_request"].to_string()).unwrap();
        parse_strict::<GenerateResponse>(&ex["generate_response"].to_string()).unwrap();
        parse_strict::<PolicyRequest>(&ex["policy_request"].to_string()).unwrap();
        parse_strict::<PolicyResponse>(&ex["policy_response"].to_string()).unwrap();
    }
}
