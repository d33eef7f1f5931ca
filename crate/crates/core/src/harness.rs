//! Experiment harness: configuration, baseline and attack runners, SNR
//! sweeps with resumable CSV output, and the finite-difference gradient
//! suite behind the `gradcheck` command.
//!
//! A sweep is a full factorial over methods × SNR grid × trials. Every
//! trial derives its randomness from the master seed and its own cell
//! coordinates, never from scheduling, so results are independent of the
//! worker count and a (config, master seed) pair pins every output byte.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{transmit, zf_receive, ChannelConfig, Transmission, WiretapObservation};
use crate::error::{Error, Result};
use crate::image::{read_image, synth_face, Image, ToyEmbedding};
use crate::inversion::{
    gradients, loss, prior_anchored_channel_estimate, OptimHyper, OptimState, UpdateMode,
    DEFAULT_ETA_G, DEFAULT_ETA_X, DEFAULT_LAMBDA_TV, PRIOR_ANCHOR_SAMPLES, TV_SMOOTHING,
};
use crate::metrics::{
    aggregate, eval_embedding, evaluate, read_reports_csv, write_reports_csv,
    write_summaries_csv, CellSummary, TrialReport,
};
use crate::numerics::{CMat, Rng};
use crate::orchestrator::{
    run_attack, AttackClients, AttackConfig, AttackContext, AttackResult, AuditEvent, Budgets,
    PolicyKind, RulePolicyConfig, WiretapStats,
};
use crate::perception::{FusionWeights, HeuristicJudge, IqaCalibration, JudgeClient};
use crate::refinement::{GeneratorClient, GeneratorMockKind, MockGenerator, ReanchorConfig};
use crate::semcom::{bob_decode, Codeword, EncoderHandle, PowerNorm};
use crate::session::{SessionManager, StagnationConfig};
use crate::wire::{parse_strict, EndpointConfig, HttpTransport, Transport};

/// Version tag every config document must carry.
pub const CONFIG_SCHEMA_VERSION: &str = "1";

/// Environment variables that override the corresponding client endpoint:
/// when set (non-empty), the named service is reached over HTTP at that URL
/// regardless of what the config file says.
pub const ENV_JUDGE_ENDPOINT: &str = "SEMTAP_JUDGE_URL";
pub const ENV_GENERATOR_ENDPOINT: &str = "SEMTAP_GENERATOR_URL";
pub const ENV_POLICY_ENDPOINT: &str = "SEMTAP_POLICY_URL";

// ---------------------------------------------------------------------------
// Methods
// ---------------------------------------------------------------------------

/// Every runnable method: the legitimate receiver, the two glass-box
/// inversion baselines, and the agentic attack variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MethodId {
    /// Legitimate receiver: ZF equalization with true H, then the decoder.
    Bob,
    /// Single-session blind joint inversion; no perception, no branching.
    MiaNocsi,
    /// Single-session image-only inversion with the channel estimate fixed
    /// to the true wiretap realization.
    MiaCsi,
    /// Full agentic loop with the generative-refinement action disabled.
    AgenticNorefine,
    /// Full agentic loop.
    Agentic,
    /// Full agentic loop with the channel estimate granted and frozen at the
    /// true wiretap realization.
    AgenticCsi,
}

impl MethodId {
    pub const ALL: [MethodId; 6] = [
        MethodId::Bob,
        MethodId::MiaNocsi,
        MethodId::MiaCsi,
        MethodId::AgenticNorefine,
        MethodId::Agentic,
        MethodId::AgenticCsi,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodId::Bob => "bob",
            MethodId::MiaNocsi => "mia_nocsi",
            MethodId::MiaCsi => "mia_csi",
            MethodId::AgenticNorefine => "agentic_norefine",
            MethodId::Agentic => "agentic",
            MethodId::AgenticCsi => "agentic_csi",
        }
    }

    pub fn from_name(name: &str) -> Option<MethodId> {
        MethodId::ALL.into_iter().find(|m| m.as_str() == name)
    }
}

impl std::fmt::Display for MethodId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

// ---------------------------------------------------------------------------
// Configuration document
// ---------------------------------------------------------------------------

/// Where trial source images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ImageSource {
    /// Seeded synthetic faces, a fresh draw per trial.
    Synthetic,
    /// A directory of `.ppm` files, cycled in file-name order by trial
    /// index.
    Directory { path: String },
}

impl Default for ImageSource {
    fn default() -> Self {
        ImageSource::Synthetic
    }
}

/// Deployed encoder description. The seed is part of the system under
/// attack and is shared by every trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    /// `linear` or `mlp`.
    pub kind: String,
    pub seed: u64,
    /// Hidden width; used by the MLP kind only.
    pub hidden: usize,
    /// `global` or `per_stream` power normalization.
    pub power_norm: String,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { kind: "linear".into(), seed: 7, hidden: 128, power_norm: "global".into() }
    }
}

/// One external client: exactly one of `mock` or `endpoint`. The `seed`
/// only matters for seeded mocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    #[serde(default)]
    pub mock: Option<String>,
    #[serde(default)]
    pub endpoint: Option<EndpointConfig>,
    #[serde(default)]
    pub seed: u64,
}

impl ClientSpec {
    fn mocked(name: &str) -> Self {
        Self { mock: Some(name.into()), endpoint: None, seed: 0 }
    }

    fn check_one_of(&self, which: &str) -> Result<()> {
        match (&self.mock, &self.endpoint) {
            (Some(_), Some(_)) => Err(Error::Config(format!(
                "client `{which}` sets both a mock and an endpoint; pick one"
            ))),
            (None, None) => Err(Error::Config(format!(
                "client `{which}` needs either a mock id or an endpoint"
            ))),
            _ => Ok(()),
        }
    }
}

/// The three external services the attack loop may consult.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientsSpec {
    /// Mock id `heuristic`, or an endpoint.
    pub judge: ClientSpec,
    /// Mock ids `identity`, `denoise`, `adversarial`, or `none` (disables
    /// refinement), or an endpoint.
    pub generator: ClientSpec,
    /// Mock id `rule` (built-in rule policy), or an endpoint.
    pub policy: ClientSpec,
}

impl Default for ClientsSpec {
    fn default() -> Self {
        Self {
            judge: ClientSpec::mocked("heuristic"),
            generator: ClientSpec::mocked("identity"),
            policy: ClientSpec::mocked("rule"),
        }
    }
}

/// Hard resource limits per trial. The step budget also serves as the fixed
/// step count of the single-session inversion baselines, so baselines and
/// attacks spend the same optimizer effort.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetsSpec {
    pub max_steps: u64,
    pub max_branches: usize,
    pub max_refinements: u64,
}

impl Default for BudgetsSpec {
    fn default() -> Self {
        let b = Budgets::default();
        Self {
            max_steps: b.max_steps,
            max_branches: b.max_branches,
            max_refinements: b.max_refinements,
        }
    }
}

/// Inversion loss weights and step sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub lambda_tv: f64,
    pub eta_x: f64,
    pub eta_g: f64,
    pub tv_smoothing: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            lambda_tv: DEFAULT_LAMBDA_TV,
            eta_x: DEFAULT_ETA_X,
            eta_g: DEFAULT_ETA_G,
            tv_smoothing: TV_SMOOTHING,
        }
    }
}

impl OptimizerSpec {
    pub fn to_hyper(self) -> OptimHyper {
        OptimHyper {
            lambda_tv: self.lambda_tv,
            eta_x: self.eta_x,
            eta_g: self.eta_g,
            tv_mu: self.tv_smoothing,
        }
    }
}

/// Plateau detection window and threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagnationSpec {
    pub window: usize,
    pub epsilon: f64,
}

impl Default for StagnationSpec {
    fn default() -> Self {
        Self { window: 5, epsilon: 1e-3 }
    }
}

/// Refinement re-anchoring knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReanchorSpec {
    /// Burst length of the consistency refit.
    pub refit_steps: usize,
    /// Acceptable residual growth factor over the source candidate.
    pub acceptance_ratio: f64,
}

impl Default for ReanchorSpec {
    fn default() -> Self {
        let r = ReanchorConfig::default();
        Self { refit_steps: r.k, acceptance_ratio: r.rho_acc }
    }
}

impl ReanchorSpec {
    pub fn to_config(self) -> ReanchorConfig {
        ReanchorConfig { k: self.refit_steps, rho_acc: self.acceptance_ratio }
    }
}

/// Rule-policy thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuleSpec {
    pub improvement_threshold: f64,
    pub score_drop_threshold: f64,
    pub default_burst: usize,
    pub max_switches_per_plateau: u64,
}

impl Default for RuleSpec {
    fn default() -> Self {
        let r = RulePolicyConfig::default();
        Self {
            improvement_threshold: r.improvement_threshold,
            score_drop_threshold: r.score_drop_threshold,
            default_burst: r.default_burst,
            max_switches_per_plateau: r.max_switches_per_plateau,
        }
    }
}

impl RuleSpec {
    pub fn to_config(self) -> RulePolicyConfig {
        RulePolicyConfig {
            improvement_threshold: self.improvement_threshold,
            score_drop_threshold: self.score_drop_threshold,
            default_burst: self.default_burst,
            max_switches_per_plateau: self.max_switches_per_plateau,
        }
    }
}

/// The experiment document. JSON on disk, versioned, and fully
/// self-describing: this struct plus the code version determines every
/// output byte of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: String,
    pub master_seed: u64,
    #[serde(default)]
    pub image: ImageSource,
    #[serde(default = "default_dim")]
    pub height: usize,
    #[serde(default = "default_dim")]
    pub width: usize,
    #[serde(default)]
    pub encoder: EncoderSpec,
    /// Bandwidth compression ratio as an exact fraction `[num, den]`;
    /// `N_t·T = N·num/den` must come out a positive integer.
    #[serde(default = "default_bcr")]
    pub bcr: [u64; 2],
    #[serde(default = "default_antennas")]
    pub n_t: usize,
    #[serde(default = "default_antennas")]
    pub n_r: usize,
    #[serde(default = "default_antennas")]
    pub n_e: usize,
    #[serde(default = "default_snr_grid")]
    pub snr_grid_db: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials_per_cell: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default)]
    pub clients: ClientsSpec,
    #[serde(default)]
    pub budgets: BudgetsSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub stagnation: StagnationSpec,
    #[serde(default)]
    pub fusion: FusionWeights,
    #[serde(default)]
    pub iqa_calibration: IqaCalibration,
    #[serde(default)]
    pub reanchor: ReanchorSpec,
    #[serde(default)]
    pub rule: RuleSpec,
    /// Branch sessions warm-start from the best checkpoint instead of a
    /// fresh random initialization.
    #[serde(default)]
    pub warm_branch: bool,
    /// Worker threads for trial-level parallelism; 0 means one per core.
    #[serde(default)]
    pub workers: usize,
    /// Record wall-clock per trial. Off by default so output bytes depend
    /// only on (config, master seed): the column then reads 0.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_dim() -> usize {
    16
}
fn default_bcr() -> [u64; 2] {
    [1, 12]
}
fn default_antennas() -> usize {
    2
}
fn default_snr_grid() -> Vec<f64> {
    vec![0.0, 5.0, 10.0, 20.0]
}
fn default_trials() -> u64 {
    20
}
fn default_methods() -> Vec<String> {
    MethodId::ALL.iter().map(|m| m.as_str().to_string()).collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::default_desk()
    }
}

impl ExperimentConfig {
    /// Shipped desk-scale defaults: 16×16×3 synthetic faces (N = 768),
    /// 2×2 antennas on both links, 1/12 bandwidth ratio (T = 32), SNR grid
    /// {0, 5, 10, 20} dB, 20 trials per cell, all methods, built-in mocks.
    pub fn default_desk() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION.into(),
            master_seed: 0xD35C,
            image: ImageSource::Synthetic,
            height: default_dim(),
            width: default_dim(),
            encoder: EncoderSpec::default(),
            bcr: default_bcr(),
            n_t: default_antennas(),
            n_r: default_antennas(),
            n_e: default_antennas(),
            snr_grid_db: default_snr_grid(),
            trials_per_cell: default_trials(),
            methods: default_methods(),
            clients: ClientsSpec::default(),
            budgets: BudgetsSpec::default(),
            optimizer: OptimizerSpec::default(),
            stagnation: StagnationSpec::default(),
            fusion: FusionWeights::default(),
            iqa_calibration: IqaCalibration::default(),
            reanchor: ReanchorSpec::default(),
            rule: RuleSpec::default(),
            warm_branch: false,
            workers: 0,
            record_wall_time: false,
        }
    }

    /// Tiny built-in configuration for the `demo` subcommand: three
    /// methods, two SNRs, two trials, a reduced step budget. Finishes in
    /// well under a minute on one core.
    pub fn demo() -> Self {
        let mut cfg = Self::default_desk();
        cfg.master_seed = 0xDE30;
        cfg.snr_grid_db = vec![10.0, 20.0];
        cfg.trials_per_cell = 2;
        cfg.methods = vec!["bob".into(), "mia_nocsi".into(), "agentic".into()];
        cfg.budgets.max_steps = 600;
        cfg
    }

    /// Parse and validate a JSON document.
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Self =
            parse_strict(json).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Number of image values N = 3·H·W.
    pub fn input_len(&self) -> usize {
        3 * self.height * self.width
    }

    /// Solve T from the exact bandwidth fraction; errors when the fraction
    /// does not yield a positive integer.
    pub fn time_slots(&self) -> Result<usize> {
        let [num, den] = self.bcr;
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("bcr fraction {num}/{den} must be positive")));
        }
        let n = self.input_len() as u64;
        let whole = n * num;
        let per_slot = den * self.n_t as u64;
        if per_slot == 0 || whole % per_slot != 0 || whole / per_slot == 0 {
            return Err(Error::Config(format!(
                "bcr {num}/{den} with N={n}, N_t={} gives a non-integer symbol count",
                self.n_t
            )));
        }
        Ok((whole / per_slot) as usize)
    }

    /// Parsed method list in config order.
    pub fn method_ids(&self) -> Result<Vec<MethodId>> {
        let mut out = Vec::with_capacity(self.methods.len());
        for name in &self.methods {
            out.push(
                MethodId::from_name(name)
                    .ok_or_else(|| Error::Config(format!("unknown method `{name}`")))?,
            );
        }
        Ok(out)
    }

    /// Every load-time invariant: schema version, dimensions, antenna
    /// constraints, bandwidth integrality, grids, weight sums, client
    /// specs, and module knob ranges.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema_version `{}` (expected `{CONFIG_SCHEMA_VERSION}`)",
                self.schema_version
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "image dims {}x{} too small; need at least 16x16",
                self.height, self.width
            )));
        }
        if self.n_t == 0 || self.n_e == 0 {
            return Err(Error::Config("antenna counts must be positive".into()));
        }
        if self.n_r < self.n_t {
            return Err(Error::Config(format!(
                "equalization needs N_r >= N_t, got N_r={}, N_t={}",
                self.n_r, self.n_t
            )));
        }
        self.time_slots()?;
        if self.snr_grid_db.is_empty() {
            return Err(Error::Config("snr_grid_db must not be empty".into()));
        }
        let mut seen_snr = HashSet::new();
        for &snr in &self.snr_grid_db {
            if !snr.is_finite() {
                return Err(Error::Config(format!("non-finite SNR {snr} in grid")));
            }
            if !seen_snr.insert(snr.to_bits()) {
                return Err(Error::Config(format!("duplicate SNR {snr} in grid")));
            }
        }
        if self.trials_per_cell == 0 {
            return Err(Error::Config("trials_per_cell must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("method list must not be empty".into()));
        }
        self.method_ids()?;
        let mut seen_m = HashSet::new();
        for name in &self.methods {
            if !seen_m.insert(name.clone()) {
                return Err(Error::Config(format!("duplicate method `{name}`")));
            }
        }
        match self.encoder.kind.as_str() {
            "linear" => {}
            "mlp" => {
                if self.encoder.hidden == 0 {
                    return Err(Error::Config("mlp encoder needs hidden >= 1".into()));
                }
            }
            other => return Err(Error::Config(format!("unknown encoder kind `{other}`"))),
        }
        if !matches!(self.encoder.power_norm.as_str(), "global" | "per_stream") {
            return Err(Error::Config(format!(
                "unknown power_norm `{}` (expected `global` or `per_stream`)",
                self.encoder.power_norm
            )));
        }
        if let ImageSource::Directory { path } = &self.image {
            if path.is_empty() {
                return Err(Error::Config("image directory path must not be empty".into()));
            }
        }
        if self.budgets.max_steps == 0 {
            return Err(Error::Config("budgets.max_steps must be at least 1".into()));
        }
        let o = &self.optimizer;
        for (name, v) in [
            ("lambda_tv", o.lambda_tv),
            ("eta_x", o.eta_x),
            ("eta_g", o.eta_g),
            ("tv_smoothing", o.tv_smoothing),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("optimizer.{name} must be finite and >= 0")));
            }
        }
        if o.tv_smoothing == 0.0 {
            return Err(Error::Config("optimizer.tv_smoothing must be positive".into()));
        }
        StagnationConfig::new(self.stagnation.window, self.stagnation.epsilon)
            .map_err(|e| Error::Config(format!("stagnation: {e}")))?;
        FusionWeights::new(self.fusion.w_q, self.fusion.w_e, self.fusion.tau_plaus)
            .map_err(|e| Error::Config(format!("fusion: {e}")))?;
        if self.reanchor.refit_steps == 0 || self.reanchor.refit_steps > 1000 {
            return Err(Error::Config("reanchor.refit_steps must be in 1..=1000".into()));
        }
        if !(self.reanchor.acceptance_ratio >= 1.0) || !self.reanchor.acceptance_ratio.is_finite()
        {
            return Err(Error::Config("reanchor.acceptance_ratio must be >= 1".into()));
        }
        if self.rule.default_burst == 0 || self.rule.default_burst > 1000 {
            return Err(Error::Config("rule.default_burst must be in 1..=1000".into()));
        }
        if !(self.rule.improvement_threshold >= 0.0) || !(self.rule.score_drop_threshold >= 0.0) {
            return Err(Error::Config("rule thresholds must be >= 0".into()));
        }
        let cal = &self.iqa_calibration;
        if !(cal.tv_lo <= cal.tv_hi) || !(cal.tv_falloff > 0.0) || !(cal.sharp_decades > 0.0) {
            return Err(Error::Config("iqa_calibration bounds are inconsistent".into()));
        }
        self.clients.judge.check_one_of("judge")?;
        self.clients.generator.check_one_of("generator")?;
        self.clients.policy.check_one_of("policy")?;
        if let Some(mock) = &self.clients.judge.mock {
            if mock != "heuristic" {
                return Err(Error::Config(format!("unknown judge mock `{mock}`")));
            }
        }
        if let Some(mock) = &self.clients.generator.mock {
            if mock != "none" {
                GeneratorMockKind::from_name(mock)
                    .map_err(|e| Error::Config(format!("generator mock: {e}")))?;
            }
        }
        if let Some(mock) = &self.clients.policy.mock {
            if mock != "rule" {
                return Err(Error::Config(format!("unknown policy mock `{mock}`")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trial runner
// ---------------------------------------------------------------------------

/// Output of one trial: the CSV row plus, for callers that want them, the
/// reconstruction, the source, and the attack transcript.
#[derive(Clone, Debug)]
pub struct TrialOutput {
    pub report: TrialReport,
    pub source: Option<Image>,
    pub reconstruction: Option<Image>,
    /// Present for the agentic methods.
    pub attack: Option<AttackResult>,
}

struct Executed {
    source: Image,
    reconstruction: Option<Image>,
    steps: u64,
    attack: Option<AttackResult>,
    /// Soft failure recorded by the attack loop (budget spent with nothing
    /// plausible, all bursts aborted, ...).
    failure: Option<String>,
}

/// Shared per-config state: the deployed encoder (built once so its decoder
/// cache is reused), resolved client transports, and the source listing.
/// `run` takes `&self` and is safe to call from parallel workers.
pub struct TrialRunner {
    cfg: ExperimentConfig,
    enc: EncoderHandle,
    embedding: ToyEmbedding,
    judge_transport: Arc<dyn Transport>,
    generator_transport: Option<Arc<dyn Transport>>,
    policy_transport: Option<Arc<dyn Transport>>,
    policy_kind: PolicyKind,
    /// Sorted `.ppm` listing for the directory source; empty for synthetic.
    source_files: Vec<PathBuf>,
}

/// Read an endpoint override from the environment.
fn endpoint_from_env(var: &str) -> Option<EndpointConfig> {
    match std::env::var(var) {
        Ok(url) if !url.is_empty() => Some(EndpointConfig {
            url,
            timeout_ms: 30_000,
            retries: 2,
            max_in_flight: 4,
        }),
        _ => None,
    }
}

/// Resolve one client spec to a transport, with the environment override
/// taking precedence, then an endpoint, then the given mock builder.
fn resolve_transport(
    spec: &ClientSpec,
    env_var: &str,
    mock: impl FnOnce(&str, u64) -> Result<Option<Arc<dyn Transport>>>,
) -> Result<Option<Arc<dyn Transport>>> {
    if let Some(ep) = endpoint_from_env(env_var) {
        return Ok(Some(Arc::new(HttpTransport::new(ep))));
    }
    if let Some(ep) = &spec.endpoint {
        return Ok(Some(Arc::new(HttpTransport::new(ep.clone()))));
    }
    let name = spec.mock.as_deref().expect("validated client spec");
    mock(name, spec.seed)
}

impl TrialRunner {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.time_slots()?;
        let norm = match cfg.encoder.power_norm.as_str() {
            "per_stream" => PowerNorm::PerStream,
            _ => PowerNorm::Global,
        };
        let enc = match cfg.encoder.kind.as_str() {
            "mlp" => EncoderHandle::mlp(
                cfg.height,
                cfg.width,
                cfg.n_t,
                t,
                cfg.encoder.hidden,
                cfg.encoder.seed,
                norm,
            )?,
            _ => EncoderHandle::linear(cfg.height, cfg.width, cfg.n_t, t, cfg.encoder.seed, norm)?,
        };
        let judge_transport = resolve_transport(&cfg.clients.judge, ENV_JUDGE_ENDPOINT, |_, _| {
            Ok(Some(Arc::new(HeuristicJudge::new(cfg.iqa_calibration)) as Arc<dyn Transport>))
        })?
        .expect("judge transport always resolves");
        let generator_transport =
            resolve_transport(&cfg.clients.generator, ENV_GENERATOR_ENDPOINT, |name, seed| {
                if name == "none" {
                    return Ok(None);
                }
                let kind = GeneratorMockKind::from_name(name)?;
                Ok(Some(Arc::new(MockGenerator { kind, seed }) as Arc<dyn Transport>))
            })?;
        let policy_transport =
            resolve_transport(&cfg.clients.policy, ENV_POLICY_ENDPOINT, |_, _| Ok(None))?;
        let policy_kind =
            if policy_transport.is_some() { PolicyKind::Llm } else { PolicyKind::Rule };
        let source_files = match &cfg.image {
            ImageSource::Synthetic => Vec::new(),
            ImageSource::Directory { path } => {
                let mut files: Vec<PathBuf> = fs::read_dir(path)
                    .map_err(|e| Error::Config(format!("image directory {path}: {e}")))?
                    .filter_map(|entry| entry.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|ext| ext == "ppm"))
                    .collect();
                files.sort();
                if files.is_empty() {
                    return Err(Error::Config(format!("image directory {path} has no .ppm files")));
                }
                files
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            enc,
            embedding: eval_embedding(),
            judge_transport,
            generator_transport,
            policy_transport,
            policy_kind,
            source_files,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &EncoderHandle {
        &self.enc
    }

    /// The trial's random stream, derived from the master seed and the cell
    /// coordinates alone.
    fn cell_rng(&self, method: MethodId, snr_db: f64, trial: u64) -> Rng {
        Rng::from_seed(self.cfg.master_seed).child(&format!("cell/{method}/{snr_db}/{trial}"))
    }

    /// The trial's source image: a fresh synthetic draw, or the trial-th
    /// file (cyclically, in name order) of the configured directory.
    pub fn source_image(&self, rng: &mut Rng, trial: u64) -> Result<Image> {
        match &self.cfg.image {
            ImageSource::Synthetic => Ok(synth_face(rng, self.cfg.height, self.cfg.width)),
            ImageSource::Directory { .. } => {
                let idx = (trial as usize) % self.source_files.len();
                let img = read_image(&self.source_files[idx])?;
                if img.height() != self.cfg.height || img.width() != self.cfg.width {
                    return Err(Error::Config(format!(
                        "source {} is {}x{}, config wants {}x{}",
                        self.source_files[idx].display(),
                        img.height(),
                        img.width(),
                        self.cfg.height,
                        self.cfg.width
                    )));
                }
                Ok(img)
            }
        }
    }

    /// Run one trial. Errors become failed rows, never aborts: the report's
    /// `status`/`reason` columns carry the outcome either way.
    pub fn run(&self, method: MethodId, snr_db: f64, trial: u64) -> TrialOutput {
        self.run_with_source(method, snr_db, trial, None)
    }

    /// Like `run`, with the source image supplied by the caller instead of
    /// drawn from the configured source.
    pub fn run_with_source(
        &self,
        method: MethodId,
        snr_db: f64,
        trial: u64,
        source: Option<&Image>,
    ) -> TrialOutput {
        let started = Instant::now();
        let mut rng = self.cell_rng(method, snr_db, trial);
        let seed = rng.seed();
        let blank = |status: &str, reason: String, steps: u64| TrialReport {
            method: method.as_str().into(),
            snr_db,
            trial,
            seed,
            psnr: 0.0,
            ms_ssim: 0.0,
            cosine: 0.0,
            success: false,
            steps,
            wall_ms: 0,
            status: status.into(),
            reason,
        };
        let mut out = match self.execute(method, snr_db, trial, &mut rng, source) {
            Ok(ex) => {
                let report = match (&ex.reconstruction, &ex.failure) {
                    (Some(img), None) => match evaluate(&ex.source, img, &self.embedding) {
                        Ok(m) => TrialReport {
                            psnr: m.psnr,
                            ms_ssim: m.ms_ssim,
                            cosine: m.cosine,
                            success: m.success,
                            status: "ok".into(),
                            reason: String::new(),
                            ..blank("ok", String::new(), ex.steps)
                        },
                        Err(e) => blank("failed", format!("evaluation: {e}"), ex.steps),
                    },
                    (_, Some(reason)) => blank("failed", reason.clone(), ex.steps),
                    (None, None) => blank("failed", "no reconstruction produced".into(), ex.steps),
                };
                TrialOutput {
                    report,
                    source: Some(ex.source),
                    reconstruction: ex.reconstruction,
                    attack: ex.attack,
                }
            }
            Err(e) => TrialOutput {
                report: blank("failed", e.to_string(), 0),
                source: None,
                reconstruction: None,
                attack: None,
            },
        };
        if self.cfg.record_wall_time {
            out.report.wall_ms = started.elapsed().as_millis() as u64;
        }
        out
    }

    fn execute(
        &self,
        method: MethodId,
        snr_db: f64,
        trial: u64,
        rng: &mut Rng,
        source: Option<&Image>,
    ) -> Result<Executed> {
        let source = match source {
            Some(img) => {
                if img.height() != self.cfg.height || img.width() != self.cfg.width {
                    return Err(Error::DimensionMismatch(format!(
                        "supplied source is {}x{}, config wants {}x{}",
                        img.height(),
                        img.width(),
                        self.cfg.height,
                        self.cfg.width
                    )));
                }
                img.clone()
            }
            None => self.source_image(&mut rng.child("source"), trial)?,
        };
        let ch = ChannelConfig::new(self.cfg.n_t, self.cfg.n_r, self.cfg.n_e, snr_db)?;
        let cw = self.enc.encode(&source)?;
        let trans = transmit(&cw, &ch, &mut rng.child("channel"))?;
        match method {
            MethodId::Bob => {
                let equalized = zf_receive(&trans, trans.legitimate_channel())?;
                let z_hat = Codeword::with_symbols(equalized, cw.raw_norms().to_vec());
                let dec = bob_decode(&self.enc, &z_hat)?;
                Ok(Executed {
                    source,
                    reconstruction: Some(dec.image),
                    steps: 0,
                    attack: None,
                    failure: None,
                })
            }
            MethodId::MiaNocsi => {
                let obs = trans.wiretap_observation(&ch);
                let (img, steps) = self.run_single_session(UpdateMode::Joint, None, &obs, rng)?;
                Ok(Executed { source, reconstruction: img, steps, attack: None, failure: None })
            }
            MethodId::MiaCsi => {
                let obs = trans.wiretap_observation(&ch);
                let (img, steps) = self.run_single_session(
                    UpdateMode::ImageOnly,
                    Some(trans.wiretap_channel().clone()),
                    &obs,
                    rng,
                )?;
                Ok(Executed { source, reconstruction: img, steps, attack: None, failure: None })
            }
            MethodId::AgenticNorefine | MethodId::Agentic | MethodId::AgenticCsi => {
                let obs = trans.wiretap_observation(&ch);
                let res = self.run_agentic(method, &obs, &trans, rng)?;
                Ok(Executed {
                    source,
                    reconstruction: res.final_image.clone(),
                    steps: res.steps_used,
                    failure: res.failure_reason.clone(),
                    attack: Some(res),
                })
            }
        }
    }

    /// Fixed-budget single-session inversion: the non-agentic baselines.
    /// Runs bursts until the step budget is spent (or the optimizer cannot
    /// proceed) and returns the pool's best candidate by data residual.
    fn run_single_session(
        &self,
        mode: UpdateMode,
        override_g: Option<CMat>,
        obs: &WiretapObservation,
        rng: &mut Rng,
    ) -> Result<(Option<Image>, u64)> {
        let mut mgr = SessionManager::new(self.cfg.optimizer.to_hyper(), 0);
        let sid = mgr.spawn_root(&self.enc, obs.n_e, &mut rng.child("attack"))?;
        if let Some(g) = override_g {
            mgr.override_channel(sid, g)?;
        }
        let budget = self.cfg.budgets.max_steps;
        loop {
            let spent = mgr.steps_spent();
            if spent >= budget {
                break;
            }
            let n = (self.cfg.rule.default_burst as u64).min(budget - spent) as usize;
            let burst = mgr.run_session_burst(sid, mode, n, obs, &self.enc)?;
            if burst.aborted {
                break;
            }
        }
        let img = mgr
            .pool()
            .best_by_residual()
            .and_then(|idx| mgr.pool().get(idx))
            .map(|c| c.image.clone());
        Ok((img, mgr.steps_spent()))
    }

    /// The agentic loop, in one of its three variants.
    fn run_agentic(
        &self,
        method: MethodId,
        obs: &WiretapObservation,
        trans: &Transmission,
        rng: &mut Rng,
    ) -> Result<AttackResult> {
        let budgets = Budgets {
            max_steps: self.cfg.budgets.max_steps,
            max_branches: self.cfg.budgets.max_branches,
            max_refinements: self.cfg.budgets.max_refinements,
        };
        let ctx = AttackContext {
            observations: obs,
            encoder: &self.enc,
            stats: WiretapStats::from_observation(obs),
            budgets,
            policy: self.policy_kind,
        };
        let generator = if method == MethodId::AgenticNorefine {
            None
        } else {
            self.generator_transport.clone().map(GeneratorClient::new)
        };
        let clients = AttackClients {
            judge: JudgeClient::new(self.judge_transport.clone()),
            generator,
            policy: self.policy_transport.clone(),
        };
        let mut acfg = AttackConfig {
            hyper: self.cfg.optimizer.to_hyper(),
            stagnation: StagnationConfig::new(self.cfg.stagnation.window, self.cfg.stagnation.epsilon)?,
            weights: self.cfg.fusion,
            cal: self.cfg.iqa_calibration,
            reanchor: self.cfg.reanchor.to_config(),
            rule: self.cfg.rule.to_config(),
            warm_branch: self.cfg.warm_branch,
            init_g: None,
            freeze_channel: false,
        };
        if method == MethodId::AgenticCsi {
            acfg.init_g = Some(trans.wiretap_channel().clone());
            acfg.freeze_channel = true;
        } else {
            // Blind variants anchor every session's starting channel on the
            // prior-mean estimate instead of a random draw; branches keep
            // their image-side diversity.
            acfg.init_g = Some(prior_anchored_channel_estimate(
                obs,
                &self.enc,
                PRIOR_ANCHOR_SAMPLES,
                &mut rng.child("prior"),
            )?);
        }
        run_attack(&ctx, &clients, &acfg, &mut rng.child("attack"))
    }
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

/// What a sweep did: the final row set (including resumed rows), the
/// aggregate cells, and bookkeeping counts.
#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<TrialReport>,
    pub cells: Vec<CellSummary>,
    /// Trials executed by this invocation.
    pub executed: usize,
    /// Trials found already recorded and skipped.
    pub skipped: usize,
    pub warnings: Vec<String>,
}

fn cell_key(method: &str, snr_db: f64, trial: u64) -> (String, u64, u64) {
    (method.to_string(), snr_db.to_bits(), trial)
}

/// Serialize rows to bytes and write them atomically (temp file + rename),
/// so an interrupted sweep never leaves a torn CSV behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn rows_to_bytes(rows: &[TrialReport]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_reports_csv(&mut buf, rows)?;
    Ok(buf)
}

fn cells_to_bytes(cells: &[CellSummary]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_summaries_csv(&mut buf, cells)?;
    Ok(buf)
}

/// Run the full factorial methods × SNR grid × trials, in parallel across
/// trials, and write one row per trial to `rows_path` plus per-cell
/// aggregates to `summary_path`.
///
/// Resumable: rows already present in `rows_path` for configured cells are
/// kept as-is and their trials are not re-run. The row file is rewritten in
/// factorial order on every invocation, so a resumed sweep converges to the
/// same bytes as an uninterrupted one. Progress goes to standard error.
pub fn sweep(cfg: &ExperimentConfig, rows_path: &Path, summary_path: &Path) -> Result<SweepOutcome> {
    let runner = TrialRunner::new(cfg)?;
    let methods = cfg.method_ids()?;
    let mut warnings = Vec::new();

    let mut cells: Vec<(MethodId, f64, u64)> = Vec::new();
    for &m in &methods {
        for &snr in &cfg.snr_grid_db {
            for trial in 0..cfg.trials_per_cell {
                cells.push((m, snr, trial));
            }
        }
    }
    let configured: HashSet<(String, u64, u64)> = cells
        .iter()
        .map(|(m, snr, trial)| cell_key(m.as_str(), *snr, *trial))
        .collect();

    let mut kept: Vec<TrialReport> = Vec::new();
    let mut done: HashSet<(String, u64, u64)> = HashSet::new();
    if rows_path.exists() {
        let existing = read_reports_csv(fs::File::open(rows_path)?)?;
        for row in existing {
            let key = cell_key(&row.method, row.snr_db, row.trial);
            if !configured.contains(&key) {
                warnings.push(format!(
                    "dropping row ({}, {} dB, trial {}) not in this config",
                    row.method, row.snr_db, row.trial
                ));
                continue;
            }
            if done.insert(key) {
                kept.push(row);
            } else {
                warnings.push(format!(
                    "dropping duplicate row ({}, {} dB, trial {})",
                    row.method, row.snr_db, row.trial
                ));
            }
        }
    }

    let todo: Vec<(MethodId, f64, u64)> = cells
        .iter()
        .copied()
        .filter(|(m, snr, trial)| !done.contains(&cell_key(m.as_str(), *snr, *trial)))
        .collect();
    eprintln!(
        "sweep: {} trials configured, {} already recorded, {} to run",
        cells.len(),
        kept.len(),
        todo.len()
    );

    let finished = AtomicUsize::new(0);
    let total = todo.len();
    let run_one = |&(method, snr, trial): &(MethodId, f64, u64)| -> TrialReport {
        let report = runner.run(method, snr, trial).report;
        let i = finished.fetch_add(1, Ordering::Relaxed) + 1;
        eprintln!(
            "sweep: [{i}/{total}] {method} snr={snr} trial={trial} -> {} ({})",
            report.status,
            if report.is_ok() {
                format!("cosine {:.3}", report.cosine)
            } else {
                report.reason.clone()
            }
        );
        report
    };
    let mut fresh: Vec<TrialReport> = if cfg.workers == 1 {
        todo.iter().map(run_one).collect()
    } else if cfg.workers == 0 {
        todo.par_iter().map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| todo.par_iter().map(run_one).collect())
    };

    let executed = fresh.len();
    let skipped = kept.len();
    let mut rows = kept;
    rows.append(&mut fresh);
    // Factorial output order regardless of scheduling or resume history.
    let method_order = |name: &str| methods.iter().position(|m| m.as_str() == name);
    let snr_order =
        |snr: f64| cfg.snr_grid_db.iter().position(|s| s.to_bits() == snr.to_bits());
    rows.sort_by_key(|r| (method_order(&r.method), snr_order(r.snr_db), r.trial));

    write_atomic(rows_path, &rows_to_bytes(&rows)?)?;
    let (cells_out, agg_warnings) = aggregate(&rows);
    warnings.extend(agg_warnings);
    write_atomic(summary_path, &cells_to_bytes(&cells_out)?)?;
    for w in &warnings {
        eprintln!("sweep: warning: {w}");
    }
    eprintln!(
        "sweep: wrote {} rows to {} and {} cells to {}",
        rows.len(),
        rows_path.display(),
        cells_out.len(),
        summary_path.display()
    );

    Ok(SweepOutcome { rows, cells: cells_out, executed, skipped, warnings })
}

// ---------------------------------------------------------------------------
// Audit rendering
// ---------------------------------------------------------------------------

/// Human-readable audit log, one line per loop iteration.
pub fn render_audit_log(audit: &[AuditEvent]) -> String {
    let mut out = String::new();
    for ev in audit {
        let s = &ev.summary;
        out.push_str(&format!(
            "iter={} session={} burst={}x{} fused={:.4} trend={:+.4} plausible={} stagnant={} \
             steps={}/{} action={}{}{}\n",
            ev.iteration,
            ev.session_id,
            ev.burst_mode.as_str(),
            ev.burst_steps,
            s.fused_score,
            s.fused_trend,
            s.plausible,
            s.stagnant,
            s.steps_used,
            s.steps_budget,
            ev.action.name(),
            match &ev.fallback_reason {
                Some(r) => format!(" fallback=\"{r}\""),
                None => String::new(),
            },
            if ev.note.is_empty() { String::new() } else { format!(" note=\"{}\"", ev.note) },
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Gradient check suite
// ---------------------------------------------------------------------------

/// Relative-error bound the analytic gradients must meet against central
/// finite differences.
pub const GRADCHECK_REL_TOL: f64 = 1e-5;

/// Central-difference step. Large enough to dominate f64 roundoff on
/// loss-scale values, small enough that the smoothed-TV curvature away from
/// kinks contributes nothing at this tolerance.
const GRADCHECK_FD_STEP: f64 = 1e-6;

/// Evaluation points keep adjacent image values at least this far apart so
/// finite differences never straddle a total-variation kink.
const GRADCHECK_MIN_NEIGHBOR_GAP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckInstance {
    pub encoder_kind: String,
    pub seed: u64,
    pub rel_err_x: f64,
    pub rel_err_g: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub instances: Vec<GradCheckInstance>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.instances
            .iter()
            .map(|i| i.rel_err_x.max(i.rel_err_g))
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.instances.is_empty()
            && self
                .instances
                .iter()
                .all(|i| i.rel_err_x < self.tolerance && i.rel_err_g < self.tolerance)
    }
}

/// Draw a tiny image whose neighboring values (the pairs total variation
/// compares) are separated by at least the configured gap.
fn separated_image(rng: &mut Rng, h: usize, w: usize) -> Image {
    'redraw: loop {
        let data: Vec<f64> = (0..3 * h * w).map(|_| rng.uniform()).collect();
        let img = Image::from_planes(h, w, data).expect("finite draw");
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    let v = img.get(c, i, j);
                    if i + 1 < h && (img.get(c, i + 1, j) - v).abs() < GRADCHECK_MIN_NEIGHBOR_GAP {
                        continue 'redraw;
                    }
                    if j + 1 < w && (img.get(c, i, j + 1) - v).abs() < GRADCHECK_MIN_NEIGHBOR_GAP {
                        continue 'redraw;
                    }
                }
            }
        }
        return img;
    }
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

/// One seeded tiny instance of the inversion loss (4×4×3 image, 2×2
/// antennas): compare analytic gradients for both variable groups against
/// central finite differences.
fn gradcheck_instance(kind: &str, seed: u64) -> Result<GradCheckInstance> {
    let (h, w, n_t, n_e, t) = (4usize, 4usize, 2usize, 2usize, 4usize);
    let enc = match kind {
        "mlp" => EncoderHandle::mlp(h, w, n_t, t, 16, 9000 + seed, PowerNorm::Global)?,
        _ => EncoderHandle::linear(h, w, n_t, t, 9000 + seed, PowerNorm::Global)?,
    };
    let rng = Rng::from_seed(0x6ADC ^ seed);
    let source = separated_image(&mut rng.child("source"), h, w);
    let ch = ChannelConfig::new(n_t, n_t, n_e, 10.0)?;
    let cw = enc.encode(&source)?;
    let trans = transmit(&cw, &ch, &mut rng.child("channel"))?;
    let obs = trans.wiretap_observation(&ch);

    let point = separated_image(&mut rng.child("point"), h, w);
    let mut g = CMat::zeros(n_e, n_t);
    let mut grng = rng.child("estimate");
    for entry in g.as_mut_slice() {
        *entry = grng.complex_gaussian(1.0);
    }
    let hyper = OptimHyper::default();
    let state = OptimState::new(point.as_slice().to_vec(), g.clone(), hyper)?;
    let (gx, gg) = gradients(&state, &obs, &enc)?;

    let eval = |x: &[f64], g: &CMat| -> Result<f64> {
        Ok(loss(&OptimState::new(x.to_vec(), g.clone(), hyper)?, &obs, &enc)?.total)
    };
    let hstep = GRADCHECK_FD_STEP;
    let mut fd_x = vec![0.0; gx.len()];
    for i in 0..gx.len() {
        let mut xp = point.as_slice().to_vec();
        let mut xm = xp.clone();
        xp[i] += hstep;
        xm[i] -= hstep;
        fd_x[i] = (eval(&xp, &g)? - eval(&xm, &g)?) / (2.0 * hstep);
    }
    let mut fd_g = Vec::with_capacity(2 * n_e * n_t);
    let mut an_g = Vec::with_capacity(2 * n_e * n_t);
    for i in 0..n_e {
        for j in 0..n_t {
            for part in 0..2 {
                let delta = if part == 0 {
                    num_complex::Complex::new(hstep, 0.0)
                } else {
                    num_complex::Complex::new(0.0, hstep)
                };
                let mut gp = g.clone();
                let mut gm = g.clone();
                gp[(i, j)] += delta;
                gm[(i, j)] -= delta;
                fd_g.push(
                    (eval(point.as_slice(), &gp)? - eval(point.as_slice(), &gm)?) / (2.0 * hstep),
                );
                an_g.push(if part == 0 { gg[(i, j)].re } else { gg[(i, j)].im });
            }
        }
    }
    Ok(GradCheckInstance {
        encoder_kind: kind.to_string(),
        seed,
        rel_err_x: rel_err(&gx, &fd_x),
        rel_err_g: rel_err(&an_g, &fd_g),
    })
}

/// Run the finite-difference suite: `instances_per_kind` seeded tiny
/// instances for each encoder kind.
pub fn gradcheck_suite(instances_per_kind: u64) -> Result<GradCheckReport> {
    let mut instances = Vec::new();
    for kind in ["linear", "mlp"] {
        for seed in 0..instances_per_kind {
            instances.push(gradcheck_instance(kind, seed)?);
        }
    }
    Ok(GradCheckReport { instances, tolerance: GRADCHECK_REL_TOL })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::write_image;

    /// Two methods × three SNRs × two trials with a 40-step budget: the
    /// smallest sweep that still exercises both runner families.
    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default_desk();
        cfg.master_seed = 0x7E57;
        cfg.snr_grid_db = vec![0.0, 10.0, 20.0];
        cfg.trials_per_cell = 2;
        cfg.methods = vec!["bob".into(), "mia_nocsi".into()];
        cfg.budgets.max_steps = 40;
        cfg.workers = 1;
        cfg
    }

    #[test]
    fn shipped_configs_validate_and_round_trip_through_json() {
        for cfg in [ExperimentConfig::default_desk(), ExperimentConfig::demo()] {
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_json(&cfg.to_json_pretty()).unwrap();
            assert_eq!(cfg, back);
        }
        // A minimal document picks up every default.
        let minimal = r#"{"schema_version":"1","master_seed":5}"#;
        let cfg = ExperimentConfig::from_json(minimal).unwrap();
        assert_eq!(cfg.height, 16);
        assert_eq!(cfg.bcr, [1, 12]);
        assert_eq!(cfg.trials_per_cell, 20);
        assert_eq!(cfg.time_slots().unwrap(), 32);
        // Unknown fields are rejected, not ignored.
        let bogus = r#"{"schema_version":"1","master_seed":5,"surprise":1}"#;
        assert!(ExperimentConfig::from_json(bogus).is_err());
    }

    #[test]
    fn validation_rejects_inconsistent_documents() {
        type Mutator = Box<dyn Fn(&mut ExperimentConfig)>;
        let cases: Vec<(&str, Mutator)> = vec![
            ("schema version", Box::new(|c| c.schema_version = "2".into())),
            ("non-integer symbol count", Box::new(|c| c.bcr = [1, 5])),
            ("zero bcr", Box::new(|c| c.bcr = [0, 12])),
            ("too few receive antennas", Box::new(|c| c.n_r = 1)),
            ("weights not summing to one", Box::new(|c| c.fusion.w_q = 0.5)),
            ("unknown method", Box::new(|c| c.methods = vec!["zzz".into()])),
            ("duplicate method", Box::new(|c| c.methods = vec!["bob".into(), "bob".into()])),
            ("empty snr grid", Box::new(|c| c.snr_grid_db.clear())),
            ("duplicate snr", Box::new(|c| c.snr_grid_db = vec![10.0, 10.0])),
            ("zero trials", Box::new(|c| c.trials_per_cell = 0)),
            ("unknown encoder kind", Box::new(|c| c.encoder.kind = "conv".into())),
            ("unknown power norm", Box::new(|c| c.encoder.power_norm = "weird".into())),
            ("unknown judge mock", Box::new(|c| c.clients.judge.mock = Some("other".into()))),
            ("unknown generator mock", Box::new(|c| c.clients.generator.mock = Some("x".into()))),
            (
                "mock and endpoint together",
                Box::new(|c| {
                    c.clients.policy.endpoint = Some(EndpointConfig {
                        url: "http://localhost:1".into(),
                        timeout_ms: 1,
                        retries: 0,
                        max_in_flight: 1,
                    })
                }),
            ),
            ("zero burst", Box::new(|c| c.rule.default_burst = 0)),
            ("shrinking acceptance ratio", Box::new(|c| c.reanchor.acceptance_ratio = 0.5)),
            ("zero step budget", Box::new(|c| c.budgets.max_steps = 0)),
            ("image too small", Box::new(|c| c.height = 8)),
            ("negative step size", Box::new(|c| c.optimizer.eta_x = -1.0)),
        ];
        for (what, mutate) in cases {
            let mut cfg = ExperimentConfig::default_desk();
            mutate(&mut cfg);
            assert!(cfg.validate().is_err(), "expected rejection: {what}");
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in MethodId::ALL {
            assert_eq!(MethodId::from_name(m.as_str()), Some(m));
        }
        assert_eq!(MethodId::from_name("eve"), None);
    }

    #[test]
    fn bob_reconstructs_nearly_losslessly_at_extreme_snr() {
        let mut cfg = tiny_cfg();
        cfg.bcr = [1, 1]; // full-bandwidth so the linear decode is exact
        let runner = TrialRunner::new(&cfg).unwrap();
        let out = runner.run(MethodId::Bob, 300.0, 0);
        assert_eq!(out.report.status, "ok", "reason: {}", out.report.reason);
        assert!(out.report.psnr > 50.0, "psnr {}", out.report.psnr);
    }

    #[test]
    fn trial_rows_are_bitwise_deterministic_and_cell_seeded() {
        let cfg = tiny_cfg();
        let a = TrialRunner::new(&cfg).unwrap().run(MethodId::MiaNocsi, 10.0, 1).report;
        let b = TrialRunner::new(&cfg).unwrap().run(MethodId::MiaNocsi, 10.0, 1).report;
        assert_eq!(rows_to_bytes(&[a.clone()]).unwrap(), rows_to_bytes(&[b]).unwrap());
        // Different cells draw different seeds.
        let c = TrialRunner::new(&cfg).unwrap().run(MethodId::MiaNocsi, 10.0, 0).report;
        assert_ne!(a.seed, c.seed);
    }

    #[test]
    fn sweep_writes_factorial_rows_and_consistent_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let rows_path = dir.path().join("rows.csv");
        let summary_path = dir.path().join("summary.csv");
        let cfg = tiny_cfg();
        let out = sweep(&cfg, &rows_path, &summary_path).unwrap();
        assert_eq!(out.rows.len(), 12);
        assert_eq!(out.executed, 12);
        assert_eq!(out.skipped, 0);
        let text = fs::read_to_string(&rows_path).unwrap();
        assert_eq!(text.lines().count(), 13, "12 data rows plus header");
        // The written aggregate equals one recomputed from the row file.
        let back = read_reports_csv(fs::File::open(&rows_path).unwrap()).unwrap();
        let (cells, _) = aggregate(&back);
        assert_eq!(cells_to_bytes(&cells).unwrap(), fs::read(&summary_path).unwrap());
    }

    #[test]
    fn sweep_resumes_by_scanning_existing_rows() {
        let dir = tempfile::tempdir().unwrap();
        let rows_path = dir.path().join("rows.csv");
        let summary_path = dir.path().join("summary.csv");
        let cfg = tiny_cfg();
        let first = sweep(&cfg, &rows_path, &summary_path).unwrap();

        // Doctor one row (sentinel PSNR), delete another, and relabel a
        // third with a method outside the config.
        let mut rows = first.rows.clone();
        rows[3].psnr = 123.456;
        let removed = rows.remove(7);
        rows[0].method = "zzz".into();
        fs::write(&rows_path, rows_to_bytes(&rows).unwrap()).unwrap();

        let second = sweep(&cfg, &rows_path, &summary_path).unwrap();
        // Only the deleted and the relabeled cells re-ran.
        assert_eq!(second.executed, 2);
        assert_eq!(second.skipped, 10);
        assert!(second.warnings.iter().any(|w| w.contains("zzz")));
        assert_eq!(second.rows.len(), 12);
        // The doctored row survived verbatim: its trial was not recomputed.
        let doctored = second
            .rows
            .iter()
            .find(|r| (r.psnr - 123.456).abs() < 1e-12)
            .expect("doctored row kept");
        assert_eq!(doctored.method, first.rows[3].method);
        // The deleted row was recomputed to its original value.
        let refilled = second
            .rows
            .iter()
            .find(|r| {
                r.method == removed.method
                    && r.snr_db.to_bits() == removed.snr_db.to_bits()
                    && r.trial == removed.trial
            })
            .expect("deleted row refilled");
        assert_eq!(
            rows_to_bytes(&[refilled.clone()]).unwrap(),
            rows_to_bytes(&[removed]).unwrap()
        );
    }

    #[test]
    fn worker_count_never_changes_sweep_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg1 = tiny_cfg();
        let mut cfg4 = tiny_cfg();
        cfg4.workers = 4;
        let r1 = dir.path().join("rows1.csv");
        let r4 = dir.path().join("rows4.csv");
        sweep(&cfg1, &r1, &dir.path().join("s1.csv")).unwrap();
        sweep(&cfg4, &r4, &dir.path().join("s4.csv")).unwrap();
        assert_eq!(fs::read(&r1).unwrap(), fs::read(&r4).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences_on_tiny_instances() {
        let report = gradcheck_suite(3).unwrap();
        assert_eq!(report.instances.len(), 6);
        assert!(
            report.passed(),
            "max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_err(),
            report.tolerance
        );
    }

    #[test]
    fn directory_sources_cycle_in_file_name_order() {
        let dir = tempfile::tempdir().unwrap();
        let rng = Rng::from_seed(99);
        let faces = [
            synth_face(&mut rng.child("a"), 16, 16),
            synth_face(&mut rng.child("b"), 16, 16),
        ];
        write_image(&faces[0], &dir.path().join("a.ppm")).unwrap();
        write_image(&faces[1], &dir.path().join("b.ppm")).unwrap();
        let mut cfg = tiny_cfg();
        cfg.image = ImageSource::Directory { path: dir.path().to_string_lossy().into_owned() };
        let runner = TrialRunner::new(&cfg).unwrap();
        let mut unused = Rng::from_seed(0);
        for (trial, expect) in [(0u64, 0usize), (1, 1), (2, 0), (3, 1)] {
            let img = runner.source_image(&mut unused, trial).unwrap();
            let on_disk = read_image(&dir.path().join(if expect == 0 { "a.ppm" } else { "b.ppm" }))
                .unwrap();
            assert_eq!(img.as_slice(), on_disk.as_slice(), "trial {trial}");
        }
    }

    #[test]
    fn mismatched_source_dimensions_become_failed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::from_seed(3);
        write_image(&synth_face(&mut rng, 20, 20), &dir.path().join("large.ppm")).unwrap();
        let mut cfg = tiny_cfg();
        cfg.image = ImageSource::Directory { path: dir.path().to_string_lossy().into_owned() };
        let runner = TrialRunner::new(&cfg).unwrap();
        let out = runner.run(MethodId::Bob, 10.0, 0);
        assert_eq!(out.report.status, "failed");
        assert!(out.report.reason.contains("config wants"), "reason: {}", out.report.reason);
    }

    #[test]
    fn attack_accepts_a_supplied_source_image() {
        let mut cfg = tiny_cfg();
        cfg.budgets.max_steps = 200;
        let runner = TrialRunner::new(&cfg).unwrap();
        let mut rng = Rng::from_seed(17);
        let face = synth_face(&mut rng, 16, 16);
        let out = runner.run_with_source(MethodId::Agentic, 20.0, 0, Some(&face));
        let attack = out.attack.expect("attack transcript");
        assert!(out.report.steps > 0);
        assert!(!attack.audit.is_empty());
        assert!(!render_audit_log(&attack.audit).is_empty());
    }

    #[test]
    fn endpoint_override_comes_from_the_environment() {
        let var = "SEMTAP_TEST_ENDPOINT_OVERRIDE";
        std::env::remove_var(var);
        assert!(endpoint_from_env(var).is_none());
        std::env::set_var(var, "http://localhost:9999/judge");
        let ep = endpoint_from_env(var).expect("override set");
        assert_eq!(ep.url, "http://localhost:9999/judge");
        std::env::set_var(var, "");
        assert!(endpoint_from_env(var).is_none());
        std::env::remove_var(var);
    }
}
