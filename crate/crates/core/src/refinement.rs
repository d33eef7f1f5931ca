//! Refinement stage: attribute description, restoration-prompt composition,
//! the generator client, and consistency-enforcing re-anchoring with an
//! accept/reject guard.
//!
//! The guard is the point of this module: a generated image is only trusted
//! if, after warm-starting a short joint-optimization burst from it, its
//! residual against the intercepted signal stays within `rho_acc` of the
//! source candidate's — anything else is treated as hallucination and
//! discarded without touching the pool. The generator client's type surface
//! takes only an image and a prompt; the intercepted observations are never
//! in reach.

use std::sync::Arc;

use crate::channel::WiretapObservation;
use crate::error::{Error, Result};
use crate::image::{synth_face, Image};
use crate::inversion::{loss, run_burst, OptimHyper, OptimState, UpdateMode};
use crate::numerics::{CMat, Rng};
use crate::perception::{
    evidence_score, fuse, fuse_iqa_only, iqa_score_with, FusionWeights, IqaCalibration,
    JudgeClient, DEFAULT_ASSESS_PROMPT,
};
use crate::semcom::EncoderHandle;
use crate::session::{Candidate, CandidatePool, CandidateScores};
use crate::wire::{
    decode_image_field, encode_image_field, parse_strict, GenerateResponse, ToolRequest,
    Transport, TransportError, SCHEMA_VERSION,
};

/// Fixed restoration directive; every composed prompt contains it verbatim.
pub const RESTORATION_DIRECTIVE: &str =
    "Restore this degraded photo faithfully. Do not add new details.";

/// Attribute fields longer than this are truncated before composition so
/// prompts stay bounded.
const MAX_FIELD_LEN: usize = 200;

/// Composed restoration prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct RestorationPrompt {
    pub text: String,
}

/// Deterministic template: directive, enumerated attributes, negative
/// instruction. Identical descriptions compose to identical prompts.
pub fn compose_prompt(c: &crate::wire::AttributeDescription) -> RestorationPrompt {
    let clip = |s: &str| -> String {
        if s.len() > MAX_FIELD_LEN {
            s.chars().take(MAX_FIELD_LEN).collect()
        } else {
            s.to_string()
        }
    };
    let text = format!(
        "{RESTORATION_DIRECTIVE} Identity cues: {}. Appearance: {}. Pose: {}. Lighting: {}. \
         Background: {}. Known quality issues: {}. Preserve every listed attribute; invent \
         nothing that is not visible.",
        clip(&c.identity_cues),
        clip(&c.appearance),
        clip(&c.pose),
        clip(&c.lighting),
        clip(&c.background),
        clip(&c.quality_issues),
    );
    RestorationPrompt { text }
}

// ---------------------------------------------------------------------------
// Generator client and mocks
// ---------------------------------------------------------------------------

/// Client for the generator endpoint. Failures are soft: refinement is
/// skipped, never fatal to a trial.
#[derive(Clone)]
pub struct GeneratorClient {
    transport: Arc<dyn Transport>,
}

impl GeneratorClient {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self { transport }
    }

    /// Reference-conditioned generation. The transport carries 8-bit PPM, so
    /// outputs live on the 1/255 lattice.
    pub fn generate(&self, image: &Image, prompt: &RestorationPrompt) -> Result<Image> {
        let req = ToolRequest {
            schema_version: SCHEMA_VERSION.into(),
            task: "generate".into(),
            image: encode_image_field(image),
            prompt: prompt.text.clone(),
        };
        let body = serde_json::to_string(&req).expect("request serialization is infallible");
        let resp = self
            .transport
            .call(&body)
            .map_err(|TransportError(msg)| Error::GenerationUnavailable(msg))?;
        let doc: GenerateResponse = parse_strict(&resp)
            .map_err(|e| Error::GenerationUnavailable(format!("bad response: {e}")))?;
        let out = decode_image_field(&doc.image)
            .map_err(|e| Error::GenerationUnavailable(format!("bad response image: {e}")))?;
        if !out.same_dims(image) {
            return Err(Error::GenerationUnavailable(format!(
                "generator changed dimensions: {}x{} -> {}x{}",
                image.height(),
                image.width(),
                out.height(),
                out.width()
            )));
        }
        Ok(out)
    }
}

/// Offline generator behaviors, selected by config string.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorMockKind {
    /// Returns the input unchanged (up to transport quantization).
    Identity,
    /// Gaussian blur then unsharp mask — a crude restoration stand-in.
    Denoise,
    /// Returns an unrelated seeded face — for hallucination-guard tests.
    Adversarial,
}

impl GeneratorMockKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(Self::Identity),
            "denoise" => Ok(Self::Denoise),
            "adversarial" => Ok(Self::Adversarial),
            other => Err(Error::Config(format!("unknown generator mock `{other}`"))),
        }
    }
}

/// Mock generator serving the real wire protocol.
pub struct MockGenerator {
    pub kind: GeneratorMockKind,
    /// Seed for the adversarial face.
    pub seed: u64,
}

/// Same-size separable Gaussian blur (σ = 1, 5 taps, replicate padding).
fn gauss_blur_same(x: &Image) -> Image {
    const K: [f64; 5] = [0.054_488, 0.244_201, 0.402_620, 0.244_201, 0.054_488];
    let (h, w) = (x.height(), x.width());
    let mut out = Image::zeros(h, w);
    let mut tmp = vec![0.0; h * w];
    for c in 0..crate::image::CHANNELS {
        let plane = x.plane(c);
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, k) in K.iter().enumerate() {
                    let jj = (j + t).saturating_sub(2).min(w - 1);
                    acc += k * plane[i * w + jj];
                }
                tmp[i * w + j] = acc;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, k) in K.iter().enumerate() {
                    let ii = (i + t).saturating_sub(2).min(h - 1);
                    acc += k * tmp[ii * w + j];
                }
                out.set(c, i, j, acc);
            }
        }
    }
    out
}

impl MockGenerator {
    fn apply(&self, x: &Image) -> Image {
        match self.kind {
            GeneratorMockKind::Identity => x.clone(),
            GeneratorMockKind::Denoise => {
                let b = gauss_blur_same(x);
                let bb = gauss_blur_same(&b);
                let mut out = Image::zeros(x.height(), x.width());
                for (o, (&v, &vv)) in out
                    .as_mut_slice()
                    .iter_mut()
                    .zip(b.as_slice().iter().zip(bb.as_slice()))
                {
                    *o = (v + 0.5 * (v - vv)).clamp(0.0, 1.0);
                }
                out
            }
            GeneratorMockKind::Adversarial => {
                let mut rng = Rng::from_seed(self.seed).child("adversarial-face");
                synth_face(&mut rng, x.height(), x.width())
            }
        }
    }
}

impl Transport for MockGenerator {
    fn call(&self, request_json: &str) -> std::result::Result<String, TransportError> {
        let req: ToolRequest = parse_strict(request_json)
            .map_err(|e| TransportError(format!("mock generator: bad request: {e}")))?;
        if req.task != "generate" {
            return Err(TransportError(format!(
                "mock generator: unsupported task `{}`",
                req.task
            )));
        }
        let image = decode_image_field(&req.image)
            .map_err(|e| TransportError(format!("mock generator: bad image: {e}")))?;
        let out = GenerateResponse {
            schema_version: SCHEMA_VERSION.into(),
            image: encode_image_field(&self.apply(&image)),
        };
        Ok(serde_json::to_string(&out).expect("response serialization is infallible"))
    }
}

// ---------------------------------------------------------------------------
// Re-anchoring
// ---------------------------------------------------------------------------

/// Re-anchoring knobs: burst length and the residual growth tolerance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReanchorConfig {
    pub k: usize,
    pub rho_acc: f64,
}

impl Default for ReanchorConfig {
    fn default() -> Self {
        Self { k: 40, rho_acc: 1.1 }
    }
}

/// Outcome of one refinement attempt; doubles as the audit record when the
/// attempt is rejected and its ephemeral session is discarded.
#[derive(Clone, Debug)]
pub struct RefinementOutcome {
    pub candidate_index: usize,
    pub generated: Image,
    /// Post-burst snapshot; present only on accept (it is the pool entry).
    pub refined: Option<Image>,
    /// Residual of the source candidate at hand-off.
    pub residual_source: f64,
    /// Residual of the generated image before the re-anchor burst.
    pub residual_before: f64,
    /// Residual after the burst (infinite if the burst aborted).
    pub residual_after: f64,
    pub accepted: bool,
    pub reason: String,
    /// Optimizer steps consumed; counts against the global step budget.
    pub steps_used: u64,
}

/// Warm-start a fresh ephemeral session from the generated image with the
/// best channel estimate, run a short joint burst against the observations,
/// and accept only if the residual stays within `rho_acc` of the source
/// candidate's and the post-burst snapshot remains perceptually plausible.
/// Accepted snapshots enter the pool as refined candidates (already scored);
/// rejected attempts leave the pool untouched.
#[allow(clippy::too_many_arguments)]
pub fn reanchor(
    pool: &mut CandidatePool,
    candidate_index: usize,
    generated: &Image,
    best_g: &CMat,
    obs: &WiretapObservation,
    enc: &EncoderHandle,
    hyper: OptimHyper,
    cfg: &ReanchorConfig,
    judge: &JudgeClient,
    weights: &FusionWeights,
    cal: &IqaCalibration,
) -> Result<RefinementOutcome> {
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("re-anchor burst length must be ≥ 1".into()));
    }
    let source = pool
        .get(candidate_index)
        .ok_or_else(|| Error::Session(format!("no pool candidate {candidate_index}")))?;
    let residual_source = source.data_residual;
    let (source_session, source_step) = (source.session_id, source.step_index);
    let (h, w) = enc.image_dims();
    if generated.height() != h || generated.width() != w {
        return Err(Error::DimensionMismatch(format!(
            "generated image is {}x{}, encoder expects {h}x{w}",
            generated.height(),
            generated.width()
        )));
    }

    let mut state = OptimState::new(generated.as_slice().to_vec(), best_g.clone(), hyper)?;
    let residual_before = loss(&state, obs, enc)?.data_residual;
    let burst = run_burst(&mut state, UpdateMode::Joint, cfg.k, obs, enc)?;
    let steps_used = burst.trace.len() as u64;

    let mut outcome = RefinementOutcome {
        candidate_index,
        generated: generated.clone(),
        refined: None,
        residual_source,
        residual_before,
        residual_after: f64::INFINITY,
        accepted: false,
        reason: String::new(),
        steps_used,
    };

    if burst.aborted || burst.trace.is_empty() {
        outcome.reason = "rejected: re-anchor burst aborted on non-finite values".into();
        return Ok(outcome);
    }
    // Residuals compare image against image: the post-burst snapshot is
    // re-measured after clipping, with its own refit channel estimate, the
    // same convention under which the source candidate was recorded.
    let snapshot = state.snapshot_image(enc)?;
    let snapshot_state = OptimState::new(snapshot.as_slice().to_vec(), state.g.clone(), hyper)?;
    let residual_after = loss(&snapshot_state, obs, enc)?.data_residual;
    outcome.residual_after = residual_after;

    let q = iqa_score_with(&snapshot, cal);
    let feedback = match judge.assess(&snapshot, DEFAULT_ASSESS_PROMPT) {
        Ok(evidence) => fuse(&q, evidence_score(&evidence), evidence.face_visible, weights),
        // Judge trouble degrades to quality-only scoring rather than
        // failing the refinement.
        Err(Error::JudgeUnavailable(_)) | Err(Error::Schema(_)) => fuse_iqa_only(&q, weights),
        Err(other) => return Err(other),
    };

    let bound = cfg.rho_acc * residual_source;
    if residual_after > bound {
        outcome.reason = format!(
            "rejected: residual {residual_after:.6e} exceeds {:.2}x source bound {bound:.6e}",
            cfg.rho_acc
        );
        return Ok(outcome);
    }
    if !feedback.plausible {
        outcome.reason = format!(
            "rejected: implausible after re-anchor (fused {:.3})",
            feedback.fused
        );
        return Ok(outcome);
    }

    pool.push(Candidate::refined(
        source_session,
        source_step,
        snapshot.clone(),
        residual_before,
        residual_after,
        CandidateScores { fused: feedback.fused, plausible: feedback.plausible },
    ));
    outcome.refined = Some(snapshot);
    outcome.accepted = true;
    outcome.reason = format!(
        "accepted: residual {residual_after:.6e} within {:.2}x source bound, fused {:.3}",
        cfg.rho_acc, feedback.fused
    );
    Ok(outcome)
}

/// Pick the refinement source: the highest fused score among scored entries
/// whose residual is within 2x of the pool minimum, skipping excluded
/// indices and already-refined entries.
pub fn select_candidate(pool: &CandidatePool, exclude: &[usize]) -> Option<usize> {
    let min_residual = pool
        .iter()
        .map(|c| c.data_residual)
        .fold(f64::INFINITY, f64::min);
    let gate = 2.0 * min_residual;
    (0..pool.len())
        .filter(|i| !exclude.contains(i))
        .filter_map(|i| {
            let c = pool.get(i).expect("index in range");
            if c.origin == crate::session::CandidateOrigin::Refined || c.data_residual > gate {
                return None;
            }
            c.scores().map(|s| (i, s.fused))
        })
        .max_by(|(_, a), (_, b)| a.total_cmp(b))
        .map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{transmit, ChannelConfig};
    use crate::image::{cosine_sim, embed, total_variation, ToyEmbedding};
    use crate::perception::HeuristicJudge;
    use crate::semcom::PowerNorm;
    use crate::session::SessionManager;
    use crate::wire::{AttributeDescription, ScriptedTransport};

    fn sample_description() -> AttributeDescription {
        AttributeDescription {
            schema_version: SCHEMA_VERSION.into(),
            identity_cues: "oval face".into(),
            appearance: "warm skin tone".into(),
            pose: "frontal".into(),
            lighting: "soft gradient".into(),
            background: "slate".into(),
            quality_issues: "mild noise".into(),
        }
    }

    #[test]
    fn compose_prompt_is_deterministic_and_verbatim() {
        let d = sample_description();
        let p1 = compose_prompt(&d);
        let p2 = compose_prompt(&d);
        assert_eq!(p1, p2);
        for field in [
            &d.identity_cues,
            &d.appearance,
            &d.pose,
            &d.lighting,
            &d.background,
            &d.quality_issues,
        ] {
            assert!(p1.text.contains(field.as_str()), "missing `{field}`");
        }
        assert!(p1.text.contains(RESTORATION_DIRECTIVE));
        // Bounded even for absurd inputs.
        let mut huge = sample_description();
        huge.appearance = "x".repeat(100_000);
        assert!(compose_prompt(&huge).text.len() < 2_000);
    }

    #[test]
    fn identity_mock_round_trips_bitwise() {
        let client = GeneratorClient::new(Arc::new(MockGenerator {
            kind: GeneratorMockKind::Identity,
            seed: 0,
        }));
        // Feed an image already on the 8-bit transport lattice so the wire
        // quantization is the identity.
        let mut rng = Rng::from_seed(3);
        let face = synth_face(&mut rng, 16, 16);
        let lattice = crate::image::decode_ppm(&crate::image::encode_ppm(&face)).unwrap();
        let out = client.generate(&lattice, &compose_prompt(&sample_description())).unwrap();
        assert_eq!(out, lattice);
    }

    #[test]
    fn denoise_mock_strictly_reduces_tv_on_noisy_faces() {
        let client = GeneratorClient::new(Arc::new(MockGenerator {
            kind: GeneratorMockKind::Denoise,
            seed: 0,
        }));
        let prompt = compose_prompt(&sample_description());
        let rng = Rng::from_seed(9);
        for i in 0..20 {
            let mut r = rng.child(&format!("pair/{i}"));
            let clean = synth_face(&mut r, 16, 16);
            let mut noisy = clean.clone();
            for v in noisy.as_mut_slice() {
                *v = (*v + 0.15 * r.normal()).clamp(0.0, 1.0);
            }
            let out = client.generate(&noisy, &prompt).unwrap();
            assert!(
                total_variation(&out) < total_variation(&noisy),
                "TV did not decrease on pair {i}"
            );
        }
    }

    #[test]
    fn adversarial_mock_breaks_identity() {
        let client = GeneratorClient::new(Arc::new(MockGenerator {
            kind: GeneratorMockKind::Adversarial,
            seed: 0xBAD2,
        }));
        let prompt = compose_prompt(&sample_description());
        let embedding = ToyEmbedding::default_from_seed(0xE0);
        let rng = Rng::from_seed(21);
        let total = 50;
        let mut broken = 0;
        for i in 0..total {
            let mut r = rng.child(&format!("face/{i}"));
            let input = synth_face(&mut r, 16, 16);
            let out = client.generate(&input, &prompt).unwrap();
            let cos = cosine_sim(&embed(&input, &embedding), &embed(&out, &embedding));
            if cos < 0.7 {
                broken += 1;
            }
        }
        assert!(broken as f64 >= 0.90 * total as f64, "broken = {broken}/{total}");
    }

    #[test]
    fn generator_failures_are_soft() {
        let client = GeneratorClient::new(Arc::new(ScriptedTransport::new(vec![
            r#"{"schema_version":"1"}"#.to_string(),
        ])));
        let img = Image::constant(8, 8, 0.5);
        let prompt = compose_prompt(&sample_description());
        // Malformed response document.
        assert!(matches!(
            client.generate(&img, &prompt),
            Err(Error::GenerationUnavailable(_))
        ));
        // Exhausted transport.
        assert!(matches!(
            client.generate(&img, &prompt),
            Err(Error::GenerationUnavailable(_))
        ));
    }

    /// A well-fit attack state to refine: long joint optimization at high
    /// SNR on a face-sized linear encoder.
    fn well_fit_setup(
        seed: u64,
        snr_db: f64,
    ) -> (EncoderHandle, WiretapObservation, SessionManager, u64, Image) {
        let enc = EncoderHandle::linear(16, 16, 2, 32, seed, PowerNorm::Global).unwrap();
        let rng = Rng::from_seed(seed ^ 0xD00D);
        let source = synth_face(&mut rng.child("source"), 16, 16);
        let cfg = ChannelConfig::new(2, 2, 2, snr_db).unwrap();
        let cw = enc.encode(&source).unwrap();
        let trans = transmit(&cw, &cfg, &mut rng.child("channel")).unwrap();
        let obs = trans.wiretap_observation(&cfg);
        let mut mgr = SessionManager::new(OptimHyper::default(), 5);
        let sid = mgr.spawn_root(&enc, 2, &mut rng.child("attack")).unwrap();
        for _ in 0..10 {
            mgr.run_session_burst(sid, UpdateMode::Joint, 40, &obs, &enc).unwrap();
        }
        (enc, obs, mgr, sid, source)
    }

    #[test]
    fn reanchor_accepts_identity_refinement_of_well_fit_candidate() {
        let (enc, obs, mut mgr, sid, _) = well_fit_setup(5, 30.0);
        // A scripted always-plausible judge keeps this test about the
        // residual bound alone.
        let judge = JudgeClient::new(Arc::new(ScriptedTransport::new(vec![serde_json::json!({
            "schema_version": "1",
            "face_visible": true,
            "pose": "frontal",
            "components_complete": 1.0,
            "artifacts_present": false,
            "artifact_severity": 0.0,
            "artifact_descriptions": [],
            "confidence": 1.0,
            "attributes": {}
        })
        .to_string()])));
        let best = mgr.pool().best_by_residual().unwrap();
        let candidate_image = mgr.pool().get(best).unwrap().image.clone();
        let g = mgr.session(sid).unwrap().state().g.clone();
        let pool_before = mgr.pool().clone();
        let outcome = reanchor(
            mgr.pool_mut(),
            best,
            &candidate_image,
            &g,
            &obs,
            &enc,
            OptimHyper::default(),
            &ReanchorConfig::default(),
            &judge,
            &FusionWeights::default(),
            &IqaCalibration::default(),
        )
        .unwrap();
        assert!(outcome.accepted, "reason: {}", outcome.reason);
        assert_eq!(mgr.pool().len(), pool_before.len() + 1);
        let refined = mgr.pool().get(mgr.pool().len() - 1).unwrap();
        assert_eq!(refined.origin, crate::session::CandidateOrigin::Refined);
        assert!(refined.refined_from_residual.is_some());
        assert!(refined.scores().is_some());
        assert_eq!(outcome.steps_used, 40);
    }

    #[test]
    fn reanchor_rejects_adversarial_candidates() {
        let total = 10;
        let mut rejected = 0;
        for seed in 0..total {
            let (enc, obs, mut mgr, sid, _) = well_fit_setup(100 + seed, 10.0);
            let judge = JudgeClient::new(Arc::new(HeuristicJudge::default()));
            let gen = GeneratorClient::new(Arc::new(MockGenerator {
                kind: GeneratorMockKind::Adversarial,
                seed: 0xBAD ^ seed,
            }));
            let best = mgr.pool().best_by_residual().unwrap();
            let candidate_image = mgr.pool().get(best).unwrap().image.clone();
            let generated = gen
                .generate(&candidate_image, &compose_prompt(&sample_description()))
                .unwrap();
            let g = mgr.session(sid).unwrap().state().g.clone();
            let pool_before = mgr.pool().clone();
            let outcome = reanchor(
                mgr.pool_mut(),
                best,
                &generated,
                &g,
                &obs,
                &enc,
                OptimHyper::default(),
                &ReanchorConfig::default(),
                &judge,
                &FusionWeights::default(),
                &IqaCalibration::default(),
            )
            .unwrap();
            if !outcome.accepted {
                rejected += 1;
                // Rejected refinements leave the pool bitwise unchanged.
                assert_eq!(mgr.pool(), &pool_before);
            }
        }
        assert!(rejected as f64 >= 0.9 * total as f64, "rejected = {rejected}/{total}");
    }

    #[test]
    fn reanchor_rejects_implausible_even_with_good_residual() {
        let (enc, obs, mut mgr, sid, _) = well_fit_setup(7, 30.0);
        // Judge scripted to declare no face regardless of the image.
        let judge = JudgeClient::new(Arc::new(ScriptedTransport::new(vec![serde_json::json!({
            "schema_version": "1",
            "face_visible": false,
            "pose": "none",
            "components_complete": 1.0,
            "artifacts_present": false,
            "artifact_severity": 0.0,
            "artifact_descriptions": [],
            "confidence": 1.0,
            "attributes": {}
        })
        .to_string()])));
        let best = mgr.pool().best_by_residual().unwrap();
        let candidate_image = mgr.pool().get(best).unwrap().image.clone();
        let g = mgr.session(sid).unwrap().state().g.clone();
        let pool_before = mgr.pool().clone();
        let outcome = reanchor(
            mgr.pool_mut(),
            best,
            &candidate_image,
            &g,
            &obs,
            &enc,
            OptimHyper::default(),
            &ReanchorConfig::default(),
            &judge,
            &FusionWeights::default(),
            &IqaCalibration::default(),
        )
        .unwrap();
        assert!(!outcome.accepted);
        assert!(outcome.reason.contains("implausible"), "{}", outcome.reason);
        assert_eq!(mgr.pool(), &pool_before);
    }

    #[test]
    fn select_candidate_prefers_fused_within_residual_gate() {
        let (enc, obs, mut mgr, sid, _) = well_fit_setup(13, 30.0);
        let _ = (&enc, &obs, sid);
        let n = mgr.pool().len();
        assert!(n >= 3);
        // Score two entries; the later (better-fit) one gets a lower fused
        // score but stays within the residual gate, so the higher fused wins
        // among gated, scored entries.
        let a = n - 2;
        let b = n - 1;
        mgr.pool_mut()
            .attach_scores(a, CandidateScores { fused: 0.9, plausible: true })
            .unwrap();
        mgr.pool_mut()
            .attach_scores(b, CandidateScores { fused: 0.5, plausible: true })
            .unwrap();
        assert_eq!(select_candidate(mgr.pool(), &[]), Some(a));
        assert_eq!(select_candidate(mgr.pool(), &[a]), Some(b));
        assert_eq!(select_candidate(mgr.pool(), &[a, b]), None);
    }
}
