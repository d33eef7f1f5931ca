//! Perception stage: a no-reference image-quality expert vector, the
//! multimodal judge client with structured evidence, evidence scoring, and
//! fusion into the scalar feedback signal that drives the attack loop.
//!
//! The quality metrics here are deliberately simple surrogates (sharpness,
//! saturation sanity, total-variation naturalness) behind the same interface
//! a pretrained scorer would use; fusion never needs to know which metrics
//! produced the vector. Nothing in this module ever sees the source image —
//! every signal is computed from the candidate alone.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{
    downsample_grid, synth_face_with_params, total_variation, FaceParams, Image,
    BACKGROUND_NAMES, BACKGROUND_PALETTES,
};
use crate::numerics::Rng;
use crate::wire::{
    decode_image_field, encode_image_field, parse_strict, AttributeDescription, Pose,
    ToolRequest, Transport, TransportError, VisualEvidence, SCHEMA_VERSION,
};

/// Default structured-assessment prompt sent with every `assess` request.
pub const DEFAULT_ASSESS_PROMPT: &str = "Inspect this noisy face reconstruction and return \
concrete visual evidence: whether exactly one human face is visible, head pose, completeness \
of key components, any artifacts with severity, and your confidence.";

/// Default captioning prompt for `describe` requests.
pub const DEFAULT_DESCRIBE_PROMPT: &str = "Describe the visible attributes of this face: \
identity cues, appearance, pose, lighting, background, and quality issues. Answer 'unknown' \
where uncertain.";

// ---------------------------------------------------------------------------
// NR-IQA expert vector
// ---------------------------------------------------------------------------

/// Scores from the no-reference metric set, each normalized to [0,1]
/// (higher = better).
#[derive(Clone, Debug, PartialEq)]
pub struct IqaVector {
    pub scores: Vec<f64>,
}

impl IqaVector {
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

/// Normalization bounds for the metric set, computed once from seeded clean
/// faces and noise images (`calibrate_iqa`) and then shipped in config.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct IqaCalibration {
    /// log10 Laplacian-response variance of a typical clean face; scores
    /// saturate at 1 here.
    pub sharp_log_hi: f64,
    /// Decades below `sharp_log_hi` over which sharpness falls to 0.
    pub sharp_decades: f64,
    /// Natural band of per-value total variation for clean content.
    pub tv_lo: f64,
    pub tv_hi: f64,
    /// Distance outside the band at which naturalness reaches 0.
    pub tv_falloff: f64,
    /// Per-value TV above which content is treated as noise-dominated.
    pub tv_gate: f64,
}

impl Default for IqaCalibration {
    // Frozen output of calibrate_iqa(0xCA11B, 200); regenerate with the
    // `calibrate` CLI subcommand.
    fn default() -> Self {
        Self {
            sharp_log_hi: -1.10,
            sharp_decades: 4.0,
            tv_lo: 0.0425,
            tv_hi: 0.0993,
            tv_falloff: 0.641,
            tv_gate: 0.420,
        }
    }
}

/// Variance of the 3×3 Laplacian response over interior pixels of a
/// grayscale plane; the standard blur/detail statistic.
fn laplacian_variance(gray: &[f64], h: usize, w: usize) -> f64 {
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut responses = Vec::with_capacity((h - 2) * (w - 2));
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let c = gray[i * w + j];
            let r = gray[(i - 1) * w + j] + gray[(i + 1) * w + j] + gray[i * w + j - 1]
                + gray[i * w + j + 1]
                - 4.0 * c;
            responses.push(r);
        }
    }
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    responses.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Per-value total variation — TV normalized by the number of values.
fn tv_rate(x: &Image) -> f64 {
    total_variation(x) / x.num_values() as f64
}

/// Built-in metric set:
/// m1 sharpness (log-scaled Laplacian-response variance),
/// m2 saturation sanity (1 − fraction of values railed at exactly 0 or 1),
/// m3 TV-naturalness (distance of per-value TV from the calibrated band).
pub fn iqa_score_with(x: &Image, cal: &IqaCalibration) -> IqaVector {
    let gray = x.to_grayscale();
    let var = laplacian_variance(&gray, x.height(), x.width());
    let m1 = clamp01(
        ((var.max(0.0) + 1e-12).log10() - (cal.sharp_log_hi - cal.sharp_decades))
            / cal.sharp_decades,
    );

    let clipped = x.clamped();
    let railed = clipped
        .as_slice()
        .iter()
        .filter(|&&v| v == 0.0 || v == 1.0)
        .count();
    let m2 = 1.0 - railed as f64 / clipped.num_values() as f64;

    let t = tv_rate(x);
    let m3 = if t < cal.tv_lo {
        clamp01(1.0 - (cal.tv_lo - t) / cal.tv_falloff)
    } else if t <= cal.tv_hi {
        1.0
    } else {
        clamp01(1.0 - (t - cal.tv_hi) / cal.tv_falloff)
    };

    IqaVector { scores: vec![m1, m2, m3] }
}

/// `iqa_score_with` under the shipped default calibration.
pub fn iqa_score(x: &Image) -> IqaVector {
    iqa_score_with(x, &IqaCalibration::default())
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

/// Recompute calibration bounds from `n_per_class` seeded clean faces and
/// clipped-Gaussian noise images. Deterministic in `seed`.
pub fn calibrate_iqa(seed: u64, n_per_class: usize) -> IqaCalibration {
    let rng = Rng::from_seed(seed);
    let mut face_logvars = Vec::with_capacity(n_per_class);
    let mut face_tvs = Vec::with_capacity(n_per_class);
    for i in 0..n_per_class {
        let mut r = rng.child(&format!("calibrate/face/{i}"));
        let img = crate::image::synth_face(&mut r, 16, 16);
        let gray = img.to_grayscale();
        face_logvars.push((laplacian_variance(&gray, 16, 16) + 1e-12).log10());
        face_tvs.push(tv_rate(&img));
    }
    let mut noise_tvs = Vec::with_capacity(n_per_class);
    for i in 0..n_per_class {
        let mut r = rng.child(&format!("calibrate/noise/{i}"));
        let data: Vec<f64> = (0..16 * 16 * 3)
            .map(|_| (0.5 + 0.5 * r.normal()).clamp(0.0, 1.0))
            .collect();
        let img = Image::from_planes(16, 16, data).expect("finite by construction");
        noise_tvs.push(tv_rate(&img));
    }
    face_logvars.sort_by(f64::total_cmp);
    face_tvs.sort_by(f64::total_cmp);
    noise_tvs.sort_by(f64::total_cmp);
    let tv_lo = percentile(&face_tvs, 0.05);
    let tv_hi = percentile(&face_tvs, 0.95);
    // Gate halfway between clean content and noise; severity ramps over the
    // same distance.
    let noise_lo = percentile(&noise_tvs, 0.05);
    let tv_gate = 0.5 * (tv_hi + noise_lo);
    let tv_falloff = (noise_lo - tv_hi).max(3.0 * (tv_hi - tv_lo)).max(0.02);
    IqaCalibration {
        sharp_log_hi: percentile(&face_logvars, 0.5),
        sharp_decades: 4.0,
        tv_lo,
        tv_hi,
        tv_falloff,
        tv_gate,
    }
}

// ---------------------------------------------------------------------------
// Evidence scoring and fusion
// ---------------------------------------------------------------------------

/// Scalar evidence from structured judge output: gated on face visibility,
/// scaled by confidence and completeness, discounted for artifacts.
pub fn evidence_score(v: &VisualEvidence) -> f64 {
    if !v.face_visible {
        return 0.0;
    }
    let artifact_discount = if v.artifacts_present {
        1.0 - 0.5 * v.artifact_severity
    } else {
        1.0
    };
    clamp01(v.confidence * v.components_complete * artifact_discount)
}

/// Fusion weights and the plausibility threshold.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct FusionWeights {
    pub w_q: f64,
    pub w_e: f64,
    pub tau_plaus: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { w_q: 0.4, w_e: 0.6, tau_plaus: 0.35 }
    }
}

impl FusionWeights {
    pub fn new(w_q: f64, w_e: f64, tau_plaus: f64) -> Result<Self> {
        if w_q < 0.0 || w_e < 0.0 || (w_q + w_e - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "fusion weights must be non-negative and sum to 1, got ({w_q}, {w_e})"
            )));
        }
        Ok(Self { w_q, w_e, tau_plaus })
    }
}

/// The fused feedback signal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusedFeedback {
    pub iqa_mean: f64,
    pub evidence: f64,
    pub fused: f64,
    pub plausible: bool,
}

/// fused = w_q·mean(q) + w_e·e; plausible additionally requires a visible
/// face, so a pretty but faceless frame never counts.
pub fn fuse(q: &IqaVector, e: f64, face_visible: bool, w: &FusionWeights) -> FusedFeedback {
    let iqa_mean = q.mean();
    let fused = w.w_q * iqa_mean + w.w_e * e;
    FusedFeedback { iqa_mean, evidence: e, fused, plausible: fused >= w.tau_plaus && face_visible }
}

/// Degraded fusion when the judge is unreachable: the evidence weight is
/// redistributed onto the quality term, and plausibility rests on the fused
/// score alone. Callers flag such candidates in provenance.
pub fn fuse_iqa_only(q: &IqaVector, w: &FusionWeights) -> FusedFeedback {
    let iqa_mean = q.mean();
    FusedFeedback { iqa_mean, evidence: 0.0, fused: iqa_mean, plausible: iqa_mean >= w.tau_plaus }
}

// ---------------------------------------------------------------------------
// Judge client
// ---------------------------------------------------------------------------

/// Client for the judge endpoint; shared across parallel sessions (the
/// transport bounds in-flight concurrency).
#[derive(Clone)]
pub struct JudgeClient {
    transport: Arc<dyn Transport>,
}

impl JudgeClient {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self { transport }
    }

    fn call(&self, task: &str, image: &Image, prompt: &str) -> Result<String> {
        let req = ToolRequest {
            schema_version: SCHEMA_VERSION.into(),
            task: task.into(),
            image: encode_image_field(image),
            prompt: prompt.into(),
        };
        let body = serde_json::to_string(&req).expect("request serialization is infallible");
        self.transport
            .call(&body)
            .map_err(|TransportError(msg)| Error::JudgeUnavailable(msg))
    }

    /// Structured visual assessment of a candidate.
    pub fn assess(&self, image: &Image, prompt: &str) -> Result<VisualEvidence> {
        let body = self.call("assess", image, prompt)?;
        let evidence: VisualEvidence = parse_strict(&body)?;
        evidence.validate()?;
        Ok(evidence)
    }

    /// Attribute sheet for prompt composition.
    pub fn describe(&self, image: &Image, prompt: &str) -> Result<AttributeDescription> {
        let body = self.call("describe", image, prompt)?;
        let desc: AttributeDescription = parse_strict(&body)?;
        desc.validate()?;
        Ok(desc)
    }
}

// ---------------------------------------------------------------------------
// Heuristic judge mock
// ---------------------------------------------------------------------------

/// Offline judge: template correlation against canonical face layouts (one
/// per background palette) plus noise statistics. Serves both `assess` and
/// `describe` over the real wire protocol so end-to-end runs exercise the
/// full client path.
pub struct HeuristicJudge {
    /// Mean-centered, unit-norm grayscale grids of the canonical face, one
    /// per background palette.
    templates: Vec<Vec<f64>>,
    cal: IqaCalibration,
    /// Correlation at which a face is deemed visible.
    pub corr_threshold: f64,
}

/// Mid-range face parameters used as the correlation template.
fn canonical_face_params(background: usize) -> FaceParams {
    FaceParams {
        background,
        cx: 0.5,
        cy: 0.5,
        ax: 0.30,
        ay: 0.38,
        skin: [0.72, 0.55, 0.45],
        eye_dx: 0.35,
        eye_dy: 0.24,
        eye_radius: 0.032,
        eye_shade: 0.12,
        mouth_dy: 0.28,
        mouth_half_width: 0.16,
        mouth_thickness: 0.05,
        mouth_curve: 0.05,
    }
}

fn center_unit(grid: &mut [f64]) -> bool {
    let mean = grid.iter().sum::<f64>() / grid.len() as f64;
    for v in grid.iter_mut() {
        *v -= mean;
    }
    let norm = grid.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return false;
    }
    for v in grid.iter_mut() {
        *v /= norm;
    }
    true
}

impl Default for HeuristicJudge {
    fn default() -> Self {
        Self::new(IqaCalibration::default())
    }
}

impl HeuristicJudge {
    pub fn new(cal: IqaCalibration) -> Self {
        let templates = (0..BACKGROUND_PALETTES.len())
            .map(|bg| {
                let face = synth_face_with_params(64, 64, &canonical_face_params(bg));
                let mut grid = downsample_grid(&face.to_grayscale(), 64, 64);
                let ok = center_unit(&mut grid);
                debug_assert!(ok, "canonical face cannot be constant");
                grid
            })
            .collect();
        Self { templates, cal, corr_threshold: 0.35 }
    }

    /// Best Pearson correlation between the candidate's grayscale grid and
    /// the canonical face templates across background palettes.
    pub fn template_correlation(&self, x: &Image) -> f64 {
        let mut grid = downsample_grid(&x.to_grayscale(), x.height(), x.width());
        if !center_unit(&mut grid) {
            return 0.0;
        }
        self.templates
            .iter()
            .map(|t| grid.iter().zip(t).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn assess_image(&self, x: &Image) -> VisualEvidence {
        let corr = self.template_correlation(x);
        let t = tv_rate(x);
        let face_visible = corr >= self.corr_threshold && t <= self.cal.tv_gate;
        let artifacts_present = t > self.cal.tv_hi;
        let artifact_severity = if artifacts_present {
            clamp01((t - self.cal.tv_hi) / self.cal.tv_falloff)
        } else {
            0.0
        };
        let mut attributes = std::collections::BTreeMap::new();
        attributes.insert("background".to_string(), self.background_name(x).to_string());
        attributes.insert("glasses".to_string(), "none".to_string());
        attributes.insert("hairstyle".to_string(), "unknown".to_string());
        attributes.insert("hair_color".to_string(), "unknown".to_string());
        attributes.insert("age_range".to_string(), "unknown".to_string());
        VisualEvidence {
            schema_version: SCHEMA_VERSION.into(),
            face_visible,
            pose: if face_visible { Pose::Frontal } else { Pose::None },
            components_complete: clamp01((corr - 0.2) / 0.6),
            artifacts_present,
            artifact_severity,
            artifact_descriptions: if artifacts_present {
                vec!["high-frequency speckle".into()]
            } else {
                vec![]
            },
            confidence: clamp01(0.25 + 0.75 * corr.max(0.0)),
            attributes,
        }
    }

    /// Nearest background palette by the (top, bottom) corner colors of the
    /// vertical gradient.
    fn background_index(&self, x: &Image) -> usize {
        let (h, w) = (x.height(), x.width());
        let corner = |i: usize, j: usize| -> [f64; 3] {
            [x.get(0, i, j), x.get(1, i, j), x.get(2, i, j)]
        };
        let avg = |a: [f64; 3], b: [f64; 3]| -> [f64; 3] {
            [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0]
        };
        let top = avg(corner(0, 0), corner(0, w - 1));
        let bottom = avg(corner(h - 1, 0), corner(h - 1, w - 1));
        let dist = |a: [f64; 3], b: [f64; 3]| -> f64 {
            (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum()
        };
        (0..BACKGROUND_PALETTES.len())
            .min_by(|&p, &q| {
                let dp = dist(top, BACKGROUND_PALETTES[p].0) + dist(bottom, BACKGROUND_PALETTES[p].1);
                let dq = dist(top, BACKGROUND_PALETTES[q].0) + dist(bottom, BACKGROUND_PALETTES[q].1);
                dp.total_cmp(&dq)
            })
            .expect("palette table non-empty")
    }

    fn background_name(&self, x: &Image) -> &'static str {
        BACKGROUND_NAMES[self.background_index(x)]
    }

    fn describe_image(&self, x: &Image) -> AttributeDescription {
        let corr = self.template_correlation(x);
        let t = tv_rate(x);
        // Mean color of the central face region, quoted so prompts carry a
        // concrete appearance cue.
        let (h, w) = (x.height(), x.width());
        let (mut r, mut g, mut b, mut n) = (0.0, 0.0, 0.0, 0.0);
        for i in (h * 2 / 5)..(h * 3 / 5).max(h * 2 / 5 + 1) {
            for j in (w * 2 / 5)..(w * 3 / 5).max(w * 2 / 5 + 1) {
                r += x.get(0, i, j);
                g += x.get(1, i, j);
                b += x.get(2, i, j);
                n += 1.0;
            }
        }
        let quality = if t > self.cal.tv_gate {
            "heavy speckle noise"
        } else if t > self.cal.tv_hi {
            "mild speckle noise"
        } else if t < self.cal.tv_lo {
            "overly smooth"
        } else {
            "clean"
        };
        AttributeDescription {
            schema_version: SCHEMA_VERSION.into(),
            identity_cues: "oval face with symmetric eyes".into(),
            appearance: format!(
                "skin tone near rgb({:.2}, {:.2}, {:.2})",
                r / n,
                g / n,
                b / n
            ),
            pose: if corr >= self.corr_threshold { "frontal" } else { "unknown" }.into(),
            lighting: "soft vertical gradient".into(),
            background: self.background_name(x).into(),
            quality_issues: quality.into(),
        }
    }
}

impl Transport for HeuristicJudge {
    fn call(&self, request_json: &str) -> std::result::Result<String, TransportError> {
        let req: ToolRequest = parse_strict(request_json)
            .map_err(|e| TransportError(format!("heuristic judge: bad request: {e}")))?;
        let image = decode_image_field(&req.image)
            .map_err(|e| TransportError(format!("heuristic judge: bad image: {e}")))?;
        let body = match req.task.as_str() {
            "assess" => serde_json::to_string(&self.assess_image(&image)),
            "describe" => serde_json::to_string(&self.describe_image(&image)),
            other => {
                return Err(TransportError(format!("heuristic judge: unsupported task `{other}`")))
            }
        };
        Ok(body.expect("response serialization is infallible"))
    }
}
