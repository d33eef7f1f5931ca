//! Closed-loop attack controller: after every optimizer burst it snapshots a
//! candidate, scores it, summarizes the trajectory, and asks a policy for the
//! next action — continue, switch the update mode, roll back, terminate and
//! branch, refine a candidate, or finalize.
//!
//! Two policies ship: a deterministic rule table (the default everything is
//! tested against) and a remote policy speaking the frozen wire schema whose
//! invalid or unreachable responses fall back to the rule table, recorded in
//! the audit log. The rule table is an ordered first-match list; precedence
//! (budget stop, then keep-going, switch, rewind, branch, refine, default)
//! makes exactly one rule fire for every input.
//!
//! The attack context carries only what an eavesdropper has: the intercepted
//! observations, the public encoder, channel *statistics*, and budgets. No
//! channel realization and no source image exist in this module's types.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::sync::Arc;

use crate::channel::WiretapObservation;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::inversion::{OptimHyper, UpdateMode};
use crate::numerics::{CMat, Rng};
use crate::perception::{
    evidence_score, fuse, fuse_iqa_only, iqa_score_with, FusedFeedback, FusionWeights,
    IqaCalibration, JudgeClient, DEFAULT_ASSESS_PROMPT, DEFAULT_DESCRIBE_PROMPT,
};
use crate::refinement::{
    compose_prompt, reanchor, select_candidate, GeneratorClient, ReanchorConfig,
};
use crate::semcom::EncoderHandle;
use crate::session::{is_stagnant, CandidatePool, CandidateScores, SessionManager, StagnationConfig};
use crate::wire::{
    parse_strict, AttributeDescription, PolicyRequest, PolicyResponse, Transport, TransportError,
    SCHEMA_VERSION,
};

// ---------------------------------------------------------------------------
// Context, budgets, config
// ---------------------------------------------------------------------------

/// Hard resource limits for one attack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Budgets {
    /// Optimizer steps, counting discarded rollback segments and re-anchor
    /// bursts.
    pub max_steps: u64,
    /// Session branches beyond the root.
    pub max_branches: usize,
    /// Refinement attempts (accepted or not).
    pub max_refinements: u64,
}

impl Default for Budgets {
    fn default() -> Self {
        Self { max_steps: 4000, max_branches: 5, max_refinements: 3 }
    }
}

/// What the eavesdropper knows about the wiretap channel: its dimensions and
/// noise level, never a realization. Entries are modeled CN(0,1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WiretapStats {
    pub n_e: usize,
    pub n_t: usize,
    pub noise_var: f64,
}

impl WiretapStats {
    pub fn from_observation(obs: &WiretapObservation) -> Self {
        Self { n_e: obs.n_e, n_t: obs.n_t, noise_var: obs.noise_variance }
    }
}

/// Which policy drives the loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Rule,
    Llm,
}

/// Everything the attack loop may see. Holds observations, the public
/// encoder, channel statistics, and budgets — by construction there is no
/// field for the channel realization or the source image.
pub struct AttackContext<'a> {
    pub observations: &'a WiretapObservation,
    pub encoder: &'a EncoderHandle,
    pub stats: WiretapStats,
    pub budgets: Budgets,
    pub policy: PolicyKind,
}

/// External services the loop talks to. The generator and the policy
/// endpoint are optional; their absence disables refinement and forces the
/// rule policy respectively.
#[derive(Clone)]
pub struct AttackClients {
    pub judge: JudgeClient,
    pub generator: Option<GeneratorClient>,
    pub policy: Option<Arc<dyn Transport>>,
}

/// Loop tuning: optimizer hyperparameters, stagnation window, perception
/// fusion, re-anchoring, rule thresholds, and optional known-CSI grafting.
#[derive(Clone)]
pub struct AttackConfig {
    pub hyper: OptimHyper,
    pub stagnation: StagnationConfig,
    pub weights: FusionWeights,
    pub cal: IqaCalibration,
    pub reanchor: ReanchorConfig,
    pub rule: RulePolicyConfig,
    /// Seed branches from the best pool image instead of a blind restart.
    pub warm_branch: bool,
    /// Start every session's channel estimate here instead of a random draw.
    pub init_g: Option<CMat>,
    /// Never update the channel estimate (bursts are coerced to image-only).
    pub freeze_channel: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            hyper: OptimHyper::default(),
            stagnation: StagnationConfig::default(),
            weights: FusionWeights::default(),
            cal: IqaCalibration::default(),
            reanchor: ReanchorConfig::default(),
            rule: RulePolicyConfig::default(),
            warm_branch: false,
            init_g: None,
            freeze_channel: false,
        }
    }
}

// ---------------------------------------------------------------------------
// State summary and actions
// ---------------------------------------------------------------------------

/// Per-iteration digest of the trajectory, the input to every policy. The
/// wire request is a strict subset (`to_policy_request`); the two trailing
/// fields are resolved targets the rule policy needs and a remote policy is
/// deliberately not told (it must name targets itself, and illegal ones are
/// rejected).
#[derive(Clone, Debug, PartialEq)]
pub struct StateSummary {
    pub mode: UpdateMode,
    /// Relative loss drop over the last burst, (first − last)/first.
    pub relative_improvement: f64,
    pub fused_score: f64,
    /// Change of the fused score since the previous iteration.
    pub fused_trend: f64,
    /// Session-best fused score minus the current one (≥ 0).
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
    /// Checkpoint holding the session-best fused score (rollback target).
    pub best_checkpoint_id: Option<u64>,
    /// Candidate the loop would refine next (None: no generator or nothing
    /// eligible).
    pub refine_candidate: Option<u64>,
}

impl StateSummary {
    pub fn to_policy_request(&self) -> PolicyRequest {
        PolicyRequest {
            schema_version: SCHEMA_VERSION.into(),
            mode: self.mode.as_str().into(),
            relative_improvement: self.relative_improvement,
            fused_score: self.fused_score,
            fused_trend: self.fused_trend,
            score_drop_from_best: self.score_drop_from_best,
            plausible: self.plausible,
            stagnant: self.stagnant,
            switches_this_plateau: self.switches_this_plateau,
            steps_used: self.steps_used,
            steps_budget: self.steps_budget,
            branches_used: self.branches_used,
            branches_budget: self.branches_budget,
            refinements_used: self.refinements_used,
            refinements_budget: self.refinements_budget,
        }
    }
}

/// One controller decision.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Continue { mode: UpdateMode, n_steps: usize },
    Switch { mode: UpdateMode },
    Rollback { checkpoint_id: u64 },
    TerminateAndBranch,
    Refine { candidate_index: usize },
    Finalize,
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Continue { .. } => "continue",
            Action::Switch { .. } => "switch",
            Action::Rollback { .. } => "rollback",
            Action::TerminateAndBranch => "terminate_and_branch",
            Action::Refine { .. } => "refine",
            Action::Finalize => "finalize",
        }
    }
}

/// Burst lengths a policy may issue.
pub const POLICY_STEPS_MIN: u64 = 20;
pub const POLICY_STEPS_MAX: u64 = 80;

/// Mode rotation used by the switch rule.
pub fn next_mode(mode: UpdateMode) -> UpdateMode {
    match mode {
        UpdateMode::Joint => UpdateMode::ImageOnly,
        UpdateMode::ImageOnly => UpdateMode::ChannelOnly,
        UpdateMode::ChannelOnly => UpdateMode::Joint,
    }
}

// ---------------------------------------------------------------------------
// Rule policy
// ---------------------------------------------------------------------------

/// Thresholds of the rule table; config-exposed so experiments can sweep
/// them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RulePolicyConfig {
    /// Relative per-burst loss drop that still counts as progress.
    pub improvement_threshold: f64,
    /// Fused-score regression from the session best that triggers rollback.
    pub score_drop_threshold: f64,
    /// Burst length the rule policy issues.
    pub default_burst: usize,
    /// Mode switches tolerated per plateau before switching counts as
    /// exhausted (the cycle has two alternatives).
    pub max_switches_per_plateau: u64,
}

impl Default for RulePolicyConfig {
    fn default() -> Self {
        Self {
            improvement_threshold: 0.01,
            score_drop_threshold: 0.1,
            default_burst: 40,
            max_switches_per_plateau: 2,
        }
    }
}

/// Rule names, in precedence order; index 6 is the default.
pub const RULE_NAMES: [&str; 7] = [
    "finalize_on_spent_budget",
    "continue_while_improving",
    "switch_mode_on_plateau",
    "rollback_on_score_drop",
    "branch_on_dead_end",
    "refine_on_exhausted_plateau",
    "continue_default",
];

/// Exclusive firing conditions for every rule: entry k is true iff rule k is
/// the first whose raw condition holds, so exactly one entry is true for any
/// input (the last is the complement of the rest).
pub fn rule_table(s: &StateSummary, cfg: &RulePolicyConfig) -> [bool; 7] {
    let improving = s.relative_improvement > cfg.improvement_threshold;
    let raw = [
        s.steps_used >= s.steps_budget,
        improving && s.plausible,
        s.stagnant && s.plausible && s.switches_this_plateau < cfg.max_switches_per_plateau,
        s.score_drop_from_best > cfg.score_drop_threshold && s.best_checkpoint_id.is_some(),
        s.stagnant && !s.plausible && s.branches_used < s.branches_budget,
        s.stagnant
            && s.plausible
            && s.switches_this_plateau >= cfg.max_switches_per_plateau
            && s.refinements_used < s.refinements_budget
            && s.refine_candidate.is_some(),
    ];
    let mut out = [false; 7];
    let mut any = false;
    for (k, &c) in raw.iter().enumerate() {
        out[k] = c && !any;
        any |= c;
    }
    out[6] = !any;
    out
}

/// Deterministic total mapping from a state summary to an action; the heart
/// of the default controller.
pub fn rule_policy(s: &StateSummary, cfg: &RulePolicyConfig) -> Action {
    let fired = rule_table(s, cfg);
    let k = fired.iter().position(|&f| f).expect("rule table is total");
    match k {
        0 => Action::Finalize,
        1 => Action::Continue { mode: s.mode, n_steps: cfg.default_burst },
        2 => Action::Switch { mode: next_mode(s.mode) },
        3 => Action::Rollback {
            checkpoint_id: s.best_checkpoint_id.expect("guarded by rule condition"),
        },
        4 => Action::TerminateAndBranch,
        5 => Action::Refine {
            candidate_index: s.refine_candidate.expect("guarded by rule condition") as usize,
        },
        _ => Action::Continue { mode: s.mode, n_steps: cfg.default_burst },
    }
}

// ---------------------------------------------------------------------------
// Remote policy
// ---------------------------------------------------------------------------

/// Schema-level decoding of a policy response: action and mode names must be
/// known, required parameters present, burst lengths within the allowed
/// range. State-level legality (checkpoint existence etc.) is checked at
/// execution.
pub fn decode_action(doc: &PolicyResponse) -> std::result::Result<Action, String> {
    if doc.schema_version != SCHEMA_VERSION {
        return Err(format!("unsupported schema_version `{}`", doc.schema_version));
    }
    match doc.action.as_str() {
        "continue" => {
            let mode_name = doc.mode.as_deref().ok_or("continue requires `mode`")?;
            let mode = UpdateMode::from_name(mode_name)
                .ok_or_else(|| format!("unknown mode `{mode_name}`"))?;
            let n = doc.n_steps.ok_or("continue requires `n_steps`")?;
            if !(POLICY_STEPS_MIN..=POLICY_STEPS_MAX).contains(&n) {
                return Err(format!(
                    "n_steps {n} outside [{POLICY_STEPS_MIN}, {POLICY_STEPS_MAX}]"
                ));
            }
            Ok(Action::Continue { mode, n_steps: n as usize })
        }
        "switch" => {
            let mode_name = doc.mode.as_deref().ok_or("switch requires `mode`")?;
            let mode = UpdateMode::from_name(mode_name)
                .ok_or_else(|| format!("unknown mode `{mode_name}`"))?;
            Ok(Action::Switch { mode })
        }
        "rollback" => {
            let id = doc.checkpoint_id.ok_or("rollback requires `checkpoint_id`")?;
            Ok(Action::Rollback { checkpoint_id: id })
        }
        "terminate_and_branch" => Ok(Action::TerminateAndBranch),
        "refine" => {
            let idx = doc.candidate_index.ok_or("refine requires `candidate_index`")?;
            Ok(Action::Refine { candidate_index: idx as usize })
        }
        "finalize" => Ok(Action::Finalize),
        other => Err(format!("unknown action `{other}`")),
    }
}

/// Ask the remote policy for an action. Transport failures, malformed
/// documents, and schema-invalid actions fall back to the rule policy; the
/// returned reason (if any) records why.
pub fn llm_policy(
    summary: &StateSummary,
    transport: &dyn Transport,
    cfg: &RulePolicyConfig,
) -> (Action, Option<String>) {
    let req = summary.to_policy_request();
    let body = serde_json::to_string(&req).expect("request serialization is infallible");
    let raw = match transport.call(&body) {
        Ok(r) => r,
        Err(TransportError(e)) => {
            return (rule_policy(summary, cfg), Some(format!("policy transport failed: {e}")))
        }
    };
    let doc: PolicyResponse = match parse_strict(&raw) {
        Ok(d) => d,
        Err(e) => {
            return (
                rule_policy(summary, cfg),
                Some(format!("malformed action document: {e}")),
            )
        }
    };
    match decode_action(&doc) {
        Ok(a) => (a, None),
        Err(reason) => (rule_policy(summary, cfg), Some(format!("illegal action: {reason}"))),
    }
}

// ---------------------------------------------------------------------------
// Attack loop
// ---------------------------------------------------------------------------

/// One logged decision: the burst that preceded it, the summary that
/// justified it, and the action applied. Replaying the `action` sequence
/// under the same seed and clients reproduces the attack bitwise.
#[derive(Clone, Debug)]
pub struct AuditEvent {
    pub iteration: u64,
    pub session_id: u64,
    pub burst_mode: UpdateMode,
    pub burst_steps: u64,
    pub summary: StateSummary,
    pub action: Action,
    /// Why the remote policy's answer was replaced, when it was.
    pub fallback_reason: Option<String>,
    pub note: String,
}

/// Attack output: the selected reconstruction (None = attack failed), the
/// full candidate pool, the audit log, and the spent budgets.
#[derive(Clone, Debug)]
pub struct AttackResult {
    pub final_image: Option<Image>,
    pub selected_index: Option<usize>,
    pub pool: CandidatePool,
    pub audit: Vec<AuditEvent>,
    pub steps_used: u64,
    pub branches_used: u64,
    pub refinements_used: u64,
    /// Diagnostics when no image could be selected.
    pub failure_reason: Option<String>,
}

impl AttackResult {
    pub fn failed(&self) -> bool {
        self.final_image.is_none()
    }
}

/// Final answer: the highest fused score among scored candidates whose
/// residual is within 2x of the pool minimum. The residual gate keeps a
/// pretty hallucination from beating a faithful fit.
pub fn final_selection(pool: &CandidatePool) -> Option<usize> {
    let min_residual = pool.iter().map(|c| c.data_residual).fold(f64::INFINITY, f64::min);
    let gate = 2.0 * min_residual;
    (0..pool.len())
        .filter_map(|i| {
            let c = pool.get(i).expect("index in range");
            if c.data_residual > gate {
                return None;
            }
            c.scores().map(|s| (i, s.fused))
        })
        .max_by(|(_, a), (_, b)| a.total_cmp(b))
        .map(|(i, _)| i)
}

enum PolicySource {
    Rule,
    Llm(Arc<dyn Transport>),
    Script(VecDeque<Action>),
}

/// Run one closed-loop attack. The loop is burst → snapshot → perception →
/// policy → action, until a finalize decision or the step budget is spent.
pub fn run_attack(
    ctx: &AttackContext,
    clients: &AttackClients,
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<AttackResult> {
    let source = match ctx.policy {
        PolicyKind::Rule => PolicySource::Rule,
        PolicyKind::Llm => match &clients.policy {
            Some(t) => PolicySource::Llm(Arc::clone(t)),
            None => PolicySource::Rule,
        },
    };
    run_attack_with_source(ctx, clients, cfg, rng, source)
}

/// Re-execute a recorded action sequence under the same seed and clients;
/// the audit-completeness property says this reproduces the final image
/// bitwise.
pub fn replay_attack(
    ctx: &AttackContext,
    clients: &AttackClients,
    cfg: &AttackConfig,
    rng: &mut Rng,
    actions: &[Action],
) -> Result<AttackResult> {
    run_attack_with_source(
        ctx,
        clients,
        cfg,
        rng,
        PolicySource::Script(actions.iter().cloned().collect()),
    )
}

/// Safety net against pathological zero-step loops; budgets terminate every
/// healthy run far earlier.
const MAX_ITERATIONS: u64 = 100_000;

struct LoopState {
    mode: UpdateMode,
    next_burst: usize,
    switches_this_plateau: u64,
    refinements_used: u64,
    refine_steps: u64,
    refine_attempts: Vec<usize>,
    fused_prev: f64,
    /// Session-best fused score and the checkpoint that produced it.
    session_best: Option<(f64, u64)>,
    /// Fused score by checkpoint id, for rollback bookkeeping.
    fused_by_checkpoint: HashMap<u64, f64>,
}

fn run_attack_with_source(
    ctx: &AttackContext,
    clients: &AttackClients,
    cfg: &AttackConfig,
    rng: &mut Rng,
    mut source: PolicySource,
) -> Result<AttackResult> {
    let enc = ctx.encoder;
    let obs = ctx.observations;
    let mut mgr = SessionManager::new(cfg.hyper, ctx.budgets.max_branches);
    mgr.warm_branch = cfg.warm_branch;
    let mut sid = mgr.spawn_root(enc, ctx.stats.n_e, &mut rng.child("session/root"))?;
    if let Some(g) = &cfg.init_g {
        mgr.override_channel(sid, g.clone())?;
    }

    let initial_mode =
        if cfg.freeze_channel { UpdateMode::ImageOnly } else { UpdateMode::Joint };
    let mut st = LoopState {
        mode: initial_mode,
        next_burst: cfg.rule.default_burst,
        switches_this_plateau: 0,
        refinements_used: 0,
        refine_steps: 0,
        refine_attempts: Vec::new(),
        fused_prev: 0.0,
        session_best: None,
        fused_by_checkpoint: HashMap::new(),
    };
    let mut audit: Vec<AuditEvent> = Vec::new();
    let mut iteration = 0u64;
    let mut consecutive_empty_bursts = 0u32;

    loop {
        let spent = mgr.steps_spent() + st.refine_steps;
        if spent >= ctx.budgets.max_steps || iteration >= MAX_ITERATIONS {
            audit.push(AuditEvent {
                iteration,
                session_id: sid,
                burst_mode: st.mode,
                burst_steps: 0,
                summary: build_summary(
                    &mgr,
                    sid,
                    ctx,
                    cfg,
                    &st,
                    0.0,
                    false,
                    clients.generator.is_some(),
                ),
                action: Action::Finalize,
                fallback_reason: None,
                note: "step budget spent".into(),
            });
            break;
        }

        // Burst, clipped to the remaining budget.
        let n = st.next_burst.min((ctx.budgets.max_steps - spent) as usize).max(1);
        let burst = mgr.run_session_burst(sid, st.mode, n, obs, enc)?;
        let burst_steps = burst.trace.len() as u64;
        let burst_ok = !burst.aborted && !burst.trace.is_empty();
        let relative_improvement = match (burst.trace.first(), burst.trace.last()) {
            (Some(a), Some(b)) if a.total > 0.0 => (a.total - b.total) / a.total,
            _ => 0.0,
        };

        // A burst that dies on its first step consumes no budget; two in a
        // row on the same trajectory will not heal, so stop rather than
        // spin.
        if burst_steps == 0 {
            consecutive_empty_bursts += 1;
        } else {
            consecutive_empty_bursts = 0;
        }
        if consecutive_empty_bursts >= 2 {
            audit.push(AuditEvent {
                iteration,
                session_id: sid,
                burst_mode: st.mode,
                burst_steps,
                summary: build_summary(
                    &mgr,
                    sid,
                    ctx,
                    cfg,
                    &st,
                    relative_improvement,
                    burst_ok,
                    clients.generator.is_some(),
                ),
                action: Action::Finalize,
                fallback_reason: None,
                note: "repeated zero-step aborted bursts".into(),
            });
            break;
        }

        // Perception on the snapshot the burst just parked in the pool.
        let mut note = String::new();
        if burst_ok {
            let idx = mgr.pool().len() - 1;
            let image = mgr.pool().get(idx).expect("just pushed").image.clone();
            let feedback = score_image(&image, clients, cfg)?;
            mgr.pool_mut().attach_scores(
                idx,
                CandidateScores { fused: feedback.fused, plausible: feedback.plausible },
            )?;
            let chk_id = mgr
                .session(sid)?
                .checkpoints()
                .last()
                .expect("burst checkpointed")
                .id;
            st.fused_by_checkpoint.insert(chk_id, feedback.fused);
            if st.session_best.map_or(true, |(best, _)| feedback.fused > best) {
                st.session_best = Some((feedback.fused, chk_id));
            }
        } else {
            note = "burst aborted on non-finite values".into();
        }

        let summary = build_summary(
            &mgr,
            sid,
            ctx,
            cfg,
            &st,
            relative_improvement,
            burst_ok,
            clients.generator.is_some(),
        );
        st.fused_prev = summary.fused_score;
        if !summary.stagnant {
            st.switches_this_plateau = 0;
        }

        // Decide.
        let (mut action, mut fallback_reason) = match &mut source {
            PolicySource::Rule => (rule_policy(&summary, &cfg.rule), None),
            PolicySource::Llm(t) => llm_policy(&summary, t.as_ref(), &cfg.rule),
            PolicySource::Script(q) => match q.pop_front() {
                Some(a) => (a, None),
                None => (
                    rule_policy(&summary, &cfg.rule),
                    Some("replay script exhausted".into()),
                ),
            },
        };
        // State-level legality; an illegal action falls back to the rule
        // policy (and, if that is somehow also illegal, to a plain
        // continue).
        if let Err(why) = validate_action(&action, &mgr, sid, ctx, clients, &st) {
            let fb = rule_policy(&summary, &cfg.rule);
            let fb = if validate_action(&fb, &mgr, sid, ctx, clients, &st).is_ok() {
                fb
            } else {
                Action::Continue { mode: st.mode, n_steps: cfg.rule.default_burst }
            };
            fallback_reason = Some(match fallback_reason {
                Some(prior) => format!("{prior}; then illegal action: {why}"),
                None => format!("illegal action: {why}"),
            });
            action = fb;
        }

        // Execute.
        let mut finalize = false;
        match &action {
            Action::Continue { mode, n_steps } => {
                st.mode = coerce_mode(*mode, cfg);
                st.next_burst = *n_steps;
            }
            Action::Switch { mode } => {
                st.mode = coerce_mode(*mode, cfg);
                st.next_burst = cfg.rule.default_burst;
                st.switches_this_plateau += 1;
            }
            Action::Rollback { checkpoint_id } => {
                mgr.rollback(sid, *checkpoint_id)?;
                st.fused_prev =
                    st.fused_by_checkpoint.get(checkpoint_id).copied().unwrap_or(0.0);
                st.switches_this_plateau = 0;
                st.next_burst = cfg.rule.default_burst;
                note = format!("rolled back to checkpoint {checkpoint_id}");
            }
            Action::TerminateAndBranch => {
                mgr.terminate(sid)?;
                let k = mgr.branches_used();
                let new_sid = mgr.branch_from(sid, enc, &mut rng.child(&format!("branch/{k}")))?;
                if let Some(g) = &cfg.init_g {
                    mgr.override_channel(new_sid, g.clone())?;
                }
                note = format!("terminated session {sid}, branched to {new_sid}");
                sid = new_sid;
                st.mode = initial_mode;
                st.next_burst = cfg.rule.default_burst;
                st.switches_this_plateau = 0;
                st.fused_prev = 0.0;
                st.session_best = None;
            }
            Action::Refine { candidate_index } => {
                let outcome = execute_refine(
                    &mut mgr,
                    *candidate_index,
                    sid,
                    ctx,
                    clients,
                    cfg,
                    st.refine_steps,
                )?;
                st.refinements_used += 1;
                st.refine_attempts.push(*candidate_index);
                st.refine_steps += outcome.steps;
                st.next_burst = cfg.rule.default_burst;
                st.switches_this_plateau = 0;
                note = outcome.note;
            }
            Action::Finalize => {
                finalize = true;
                note = "finalize decision".into();
            }
        }

        audit.push(AuditEvent {
            iteration,
            session_id: sid,
            burst_mode: summary.mode,
            burst_steps,
            summary,
            action,
            fallback_reason,
            note,
        });
        iteration += 1;
        if finalize {
            break;
        }
    }

    let steps_used = mgr.steps_spent() + st.refine_steps;
    let selected = final_selection(mgr.pool());
    let (final_image, failure_reason) = match selected {
        Some(i) => (Some(mgr.pool().get(i).expect("selected index").image.clone()), None),
        None => (
            None,
            Some(format!(
                "no scored candidate to select: pool holds {} entries after {} iterations, \
                 {} steps",
                mgr.pool().len(),
                iteration,
                steps_used
            )),
        ),
    };
    Ok(AttackResult {
        final_image,
        selected_index: selected,
        pool: mgr.pool().clone(),
        audit,
        steps_used,
        branches_used: mgr.branches_used() as u64,
        refinements_used: st.refinements_used,
        failure_reason,
    })
}

/// Under a frozen channel estimate every burst is image-only.
fn coerce_mode(mode: UpdateMode, cfg: &AttackConfig) -> UpdateMode {
    if cfg.freeze_channel {
        UpdateMode::ImageOnly
    } else {
        mode
    }
}

/// Judge-backed scoring with quality-only degradation when the judge is
/// unreachable or off-schema.
fn score_image(
    image: &Image,
    clients: &AttackClients,
    cfg: &AttackConfig,
) -> Result<FusedFeedback> {
    let q = iqa_score_with(image, &cfg.cal);
    match clients.judge.assess(image, DEFAULT_ASSESS_PROMPT) {
        Ok(ev) => Ok(fuse(&q, evidence_score(&ev), ev.face_visible, &cfg.weights)),
        Err(Error::JudgeUnavailable(_)) | Err(Error::Schema(_)) => {
            Ok(fuse_iqa_only(&q, &cfg.weights))
        }
        Err(other) => Err(other),
    }
}

fn build_summary(
    mgr: &SessionManager,
    sid: u64,
    ctx: &AttackContext,
    cfg: &AttackConfig,
    st: &LoopState,
    relative_improvement: f64,
    burst_ok: bool,
    has_generator: bool,
) -> StateSummary {
    let session = mgr.session(sid).expect("current session exists");
    let stagnant = if burst_ok {
        is_stagnant(session.burst_end_losses(), &cfg.stagnation)
    } else {
        true
    };
    let (fused_score, plausible) = if burst_ok {
        let last = mgr.pool().get(mgr.pool().len() - 1).expect("scored this iteration");
        let s = last.scores().expect("scored this iteration");
        (s.fused, s.plausible)
    } else {
        (st.fused_prev, false)
    };
    let best = st.session_best.map(|(f, _)| f).unwrap_or(f64::NEG_INFINITY);
    let refine_candidate = if has_generator {
        select_candidate(mgr.pool(), &st.refine_attempts).map(|i| i as u64)
    } else {
        None
    };
    StateSummary {
        mode: st.mode,
        relative_improvement,
        fused_score,
        fused_trend: fused_score - st.fused_prev,
        score_drop_from_best: (best - fused_score).max(0.0),
        plausible,
        stagnant,
        switches_this_plateau: st.switches_this_plateau,
        steps_used: mgr.steps_spent() + st.refine_steps,
        steps_budget: ctx.budgets.max_steps,
        branches_used: mgr.branches_used() as u64,
        branches_budget: ctx.budgets.max_branches as u64,
        refinements_used: st.refinements_used,
        refinements_budget: ctx.budgets.max_refinements,
        best_checkpoint_id: st.session_best.map(|(_, id)| id),
        refine_candidate,
    }
}

fn validate_action(
    action: &Action,
    mgr: &SessionManager,
    sid: u64,
    ctx: &AttackContext,
    clients: &AttackClients,
    st: &LoopState,
) -> std::result::Result<(), String> {
    match action {
        Action::Continue { .. } | Action::Switch { .. } | Action::Finalize => Ok(()),
        Action::Rollback { checkpoint_id } => {
            let session = mgr.session(sid).map_err(|e| e.to_string())?;
            if session.checkpoints().iter().any(|c| c.id == *checkpoint_id) {
                Ok(())
            } else {
                Err(format!("checkpoint {checkpoint_id} not in session {sid}"))
            }
        }
        Action::TerminateAndBranch => {
            if mgr.branches_left() > 0 {
                Ok(())
            } else {
                Err("branch budget exhausted".into())
            }
        }
        Action::Refine { candidate_index } => {
            if clients.generator.is_none() {
                return Err("no generator client".into());
            }
            if st.refinements_used >= ctx.budgets.max_refinements {
                return Err("refinement budget exhausted".into());
            }
            if *candidate_index >= mgr.pool().len() {
                return Err(format!("candidate {candidate_index} not in pool"));
            }
            Ok(())
        }
    }
}

struct RefineExecution {
    steps: u64,
    note: String,
}

/// Describe → compose → generate → re-anchor. Generation failures are soft
/// (logged, attempt consumed); the re-anchor burst is clipped to the step
/// budget.
fn execute_refine(
    mgr: &mut SessionManager,
    candidate_index: usize,
    sid: u64,
    ctx: &AttackContext,
    clients: &AttackClients,
    cfg: &AttackConfig,
    refine_steps: u64,
) -> Result<RefineExecution> {
    let generator = clients.generator.as_ref().expect("validated");
    let remaining = ctx
        .budgets
        .max_steps
        .saturating_sub(mgr.steps_spent() + refine_steps);
    if remaining == 0 {
        return Ok(RefineExecution { steps: 0, note: "refine skipped: no steps left".into() });
    }
    let candidate = mgr
        .pool()
        .get(candidate_index)
        .ok_or_else(|| Error::Session(format!("no pool candidate {candidate_index}")))?;
    let image = candidate.image.clone();
    // Channel estimate co-adapted with the candidate, falling back to the
    // current session's.
    let best_g = mgr
        .session(candidate.session_id)
        .ok()
        .and_then(|s| {
            s.checkpoints()
                .iter()
                .find(|c| c.step_index == candidate.step_index)
                .map(|c| c.state.g.clone())
        })
        .unwrap_or_else(|| mgr.session(sid).expect("current session").state().g.clone());

    let description = match clients.judge.describe(&image, DEFAULT_DESCRIBE_PROMPT) {
        Ok(d) => d,
        // A mute judge degrades to an attribute-free restoration prompt.
        Err(Error::JudgeUnavailable(_)) | Err(Error::Schema(_)) => AttributeDescription {
            schema_version: SCHEMA_VERSION.into(),
            identity_cues: "unknown".into(),
            appearance: "unknown".into(),
            pose: "unknown".into(),
            lighting: "unknown".into(),
            background: "unknown".into(),
            quality_issues: "unknown".into(),
        },
        Err(other) => return Err(other),
    };
    let prompt = compose_prompt(&description);
    let generated = match generator.generate(&image, &prompt) {
        Ok(g) => g,
        Err(Error::GenerationUnavailable(why)) => {
            return Ok(RefineExecution { steps: 0, note: format!("generation failed: {why}") })
        }
        Err(other) => return Err(other),
    };
    let mut reanchor_cfg = cfg.reanchor;
    reanchor_cfg.k = reanchor_cfg.k.min(remaining as usize).max(1);
    let outcome = reanchor(
        mgr.pool_mut(),
        candidate_index,
        &generated,
        &best_g,
        ctx.observations,
        ctx.encoder,
        cfg.hyper,
        &reanchor_cfg,
        &clients.judge,
        &cfg.weights,
        &cfg.cal,
    )?;
    Ok(RefineExecution { steps: outcome.steps_used, note: outcome.reason })
}
