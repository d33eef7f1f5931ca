//! Session lifecycle for the optimization agent: checkpointing, rollback
//! with an audit trail, stagnation detection, tree-structured branching, and
//! the shared candidate pool.
//!
//! A session owns one `OptimState` and its loss history. Checkpoints are
//! full deep snapshots (moments and counters included) so a rollback — or a
//! decode from the on-disk form — resumes bitwise. The pool collects clipped
//! image snapshots from every healthy burst end; entries are append-only and
//! immutable except for a one-time perception score attachment.

use crate::channel::WiretapObservation;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::inversion::{loss, run_burst, BurstResult, OptimHyper, OptimState, UpdateMode};
use crate::numerics::{CMat, Rng, C64};
use crate::semcom::EncoderHandle;

// ---------------------------------------------------------------------------
// Stagnation
// ---------------------------------------------------------------------------

/// Sliding-window stagnation criterion over burst-end losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagnationConfig {
    pub window: usize,
    pub epsilon: f64,
}

impl Default for StagnationConfig {
    fn default() -> Self {
        Self { window: 5, epsilon: 1e-3 }
    }
}

impl StagnationConfig {
    pub fn new(window: usize, epsilon: f64) -> Result<Self> {
        if window < 2 {
            return Err(Error::InvalidArgument(format!("stagnation window {window} must be ≥ 2")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("stagnation epsilon {epsilon} must be > 0")));
        }
        Ok(Self { window, epsilon })
    }
}

/// True iff the history holds at least W records, the relative variation
/// (max−min)/max over the last W is below ε, and the last record sits at (or
/// above) the full-history minimum up to ε — i.e. the trajectory is neither
/// moving nor still improving on its best.
pub fn is_stagnant(history: &[f64], cfg: &StagnationConfig) -> bool {
    if history.len() < cfg.window {
        return false;
    }
    let tail = &history[history.len() - cfg.window..];
    let max = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = tail.iter().copied().fold(f64::INFINITY, f64::min);
    let rel = if max > 0.0 { (max - min) / max } else { 0.0 };
    if rel >= cfg.epsilon {
        return false;
    }
    let full_min = history.iter().copied().fold(f64::INFINITY, f64::min);
    let last = *history.last().expect("non-empty");
    last >= full_min * (1.0 - cfg.epsilon)
}

// ---------------------------------------------------------------------------
// Candidate pool
// ---------------------------------------------------------------------------

/// How a candidate entered the pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateOrigin {
    Raw,
    Refined,
}

/// Perception verdict attached to a candidate after assessment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateScores {
    pub fused: f64,
    pub plausible: bool,
}

/// One pool entry: a clipped image snapshot with provenance. Immutable once
/// written, except that perception scores attach exactly once.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub session_id: u64,
    pub step_index: u64,
    pub origin: CandidateOrigin,
    pub image: Image,
    pub data_residual: f64,
    /// For refined entries: the pre-re-anchor residual of the generated
    /// image, so provenance carries both sides of the accept decision.
    pub refined_from_residual: Option<f64>,
    scores: Option<CandidateScores>,
}

impl Candidate {
    pub fn scores(&self) -> Option<&CandidateScores> {
        self.scores.as_ref()
    }

    /// Refined entries arrive scored (the accept decision already consumed
    /// the perception verdict).
    pub(crate) fn refined(
        session_id: u64,
        step_index: u64,
        image: Image,
        residual_before: f64,
        residual_after: f64,
        scores: CandidateScores,
    ) -> Self {
        Self {
            session_id,
            step_index,
            origin: CandidateOrigin::Refined,
            image,
            data_residual: residual_after,
            refined_from_residual: Some(residual_before),
            scores: Some(scores),
        }
    }
}

/// Append-only candidate pool shared by all sessions of one attack.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidatePool {
    entries: Vec<Candidate>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> Option<&Candidate> {
        self.entries.get(idx)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Candidate> {
        self.entries.iter()
    }

    pub(crate) fn push(&mut self, c: Candidate) -> usize {
        self.entries.push(c);
        self.entries.len() - 1
    }

    /// Attach perception scores to an entry; each entry accepts them once.
    pub fn attach_scores(&mut self, idx: usize, scores: CandidateScores) -> Result<()> {
        let entry = self
            .entries
            .get_mut(idx)
            .ok_or_else(|| Error::Session(format!("no pool candidate {idx}")))?;
        if entry.scores.is_some() {
            return Err(Error::Session(format!("candidate {idx} already scored")));
        }
        entry.scores = Some(scores);
        Ok(())
    }

    /// Index of the lowest-data-residual entry.
    pub fn best_by_residual(&self) -> Option<usize> {
        self.entries
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.data_residual.total_cmp(&b.data_residual))
            .map(|(i, _)| i)
    }

    /// Index of the best entry by fused perception score (scored entries
    /// only), falling back to lowest residual when nothing is scored.
    pub fn best_by_fused(&self) -> Option<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.scores.map(|s| (i, s.fused)))
            .max_by(|(_, a), (_, b)| a.total_cmp(b))
            .map(|(i, _)| i)
            .or_else(|| self.best_by_residual())
    }
}

// ---------------------------------------------------------------------------
// Session
// ---------------------------------------------------------------------------

/// Deep snapshot of one session moment, sufficient to resume bitwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub id: u64,
    pub session_id: u64,
    pub step_index: u64,
    /// Loss at snapshot time (last recorded step), +inf before any step.
    pub loss: f64,
    /// Data residual (TV excluded) at the last burst end, +inf before any.
    pub data_residual: f64,
    pub state: OptimState,
    pub loss_history: Vec<f64>,
    pub burst_end_losses: Vec<f64>,
}

/// Audit record of a rollback: the loss segment that was discarded. Step
/// budgets count these steps as spent.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscardedSegment {
    pub session_id: u64,
    pub checkpoint_id: u64,
    /// Steps (from_step, to_step] were discarded.
    pub from_step: u64,
    pub to_step: u64,
    pub losses: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionStatus {
    Active,
    Terminated,
}

/// One resumable optimization trajectory.
#[derive(Clone, Debug)]
pub struct Session {
    pub id: u64,
    pub parent: Option<u64>,
    pub status: SessionStatus,
    state: OptimState,
    checkpoints: Vec<Checkpoint>,
    loss_history: Vec<f64>,
    burst_end_losses: Vec<f64>,
    total_steps: u64,
    /// Monotone count of steps physically executed; unlike `total_steps` it
    /// never rewinds, so budgets keep charging for discarded work.
    steps_run: u64,
    last_data_residual: f64,
    audit: Vec<DiscardedSegment>,
}

impl Session {
    fn new(id: u64, parent: Option<u64>, state: OptimState) -> Self {
        Self {
            id,
            parent,
            status: SessionStatus::Active,
            state,
            checkpoints: Vec::new(),
            loss_history: Vec::new(),
            burst_end_losses: Vec::new(),
            total_steps: 0,
            steps_run: 0,
            last_data_residual: f64::INFINITY,
            audit: Vec::new(),
        }
    }

    /// Rebuild a session from a decoded checkpoint (crash resume). The
    /// checkpoint becomes the session's first checkpoint.
    pub fn from_checkpoint(chk: Checkpoint, parent: Option<u64>) -> Self {
        let mut s = Self::new(chk.session_id, parent, chk.state.clone());
        s.loss_history = chk.loss_history.clone();
        s.burst_end_losses = chk.burst_end_losses.clone();
        s.total_steps = chk.step_index;
        s.steps_run = chk.step_index;
        s.last_data_residual = chk.data_residual;
        s.checkpoints.push(chk);
        s
    }

    pub fn state(&self) -> &OptimState {
        &self.state
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    /// Burst-end losses, the series the stagnation detector consumes.
    pub fn burst_end_losses(&self) -> &[f64] {
        &self.burst_end_losses
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn steps_run(&self) -> u64 {
        self.steps_run
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    pub fn audit(&self) -> &[DiscardedSegment] {
        &self.audit
    }

    pub fn last_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(f64::INFINITY)
    }
}

// ---------------------------------------------------------------------------
// Manager
// ---------------------------------------------------------------------------

/// Owns all sessions of one attack plus the shared pool and the branch
/// budget.
#[derive(Clone, Debug)]
pub struct SessionManager {
    sessions: Vec<Session>,
    pool: CandidatePool,
    hyper: OptimHyper,
    max_branches: usize,
    branches_used: usize,
    /// Restart branches from the best pool candidate instead of mid-gray.
    pub warm_branch: bool,
    next_session_id: u64,
    next_checkpoint_id: u64,
}

impl SessionManager {
    pub fn new(hyper: OptimHyper, max_branches: usize) -> Self {
        Self {
            sessions: Vec::new(),
            pool: CandidatePool::default(),
            hyper,
            max_branches,
            branches_used: 0,
            warm_branch: false,
            next_session_id: 0,
            next_checkpoint_id: 0,
        }
    }

    pub fn pool(&self) -> &CandidatePool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut CandidatePool {
        &mut self.pool
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn branches_used(&self) -> usize {
        self.branches_used
    }

    pub fn branches_left(&self) -> usize {
        self.max_branches - self.branches_used
    }

    pub fn session(&self, id: u64) -> Result<&Session> {
        self.sessions
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Session(format!("unknown session {id}")))
    }

    fn session_mut(&mut self, id: u64) -> Result<&mut Session> {
        self.sessions
            .iter_mut()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Session(format!("unknown session {id}")))
    }

    /// First session of an attack: blind init (does not consume the branch
    /// budget).
    pub fn spawn_root(&mut self, enc: &EncoderHandle, n_e: usize, rng: &mut Rng) -> Result<u64> {
        let state = OptimState::random_init(enc, n_e, self.hyper, rng)?;
        let id = self.next_session_id;
        self.next_session_id += 1;
        self.sessions.push(Session::new(id, None, state));
        Ok(id)
    }

    /// Branch a fresh trajectory off `parent`: fresh G̃ ~ CN(0,1), fresh x̃
    /// (mid-gray + jitter, or the best pool candidate when warm branching),
    /// zeroed moments. Refuses once the branch budget is spent.
    pub fn branch_from(&mut self, parent: u64, enc: &EncoderHandle, rng: &mut Rng) -> Result<u64> {
        if self.branches_used >= self.max_branches {
            return Err(Error::Session(format!(
                "branch budget exhausted ({} of {})",
                self.branches_used, self.max_branches
            )));
        }
        let n_e = self.session(parent)?.state.g.rows();
        let mut state = OptimState::random_init(enc, n_e, self.hyper, rng)?;
        if self.warm_branch {
            if let Some(best) = self.pool.best_by_residual() {
                let img = &self.pool.get(best).expect("index from pool").image;
                state.x.copy_from_slice(img.as_slice());
            }
        }
        self.branches_used += 1;
        let id = self.next_session_id;
        self.next_session_id += 1;
        self.sessions.push(Session::new(id, Some(parent), state));
        Ok(id)
    }

    pub fn terminate(&mut self, id: u64) -> Result<()> {
        self.session_mut(id)?.status = SessionStatus::Terminated;
        Ok(())
    }

    /// Replace a session's channel estimate in place (grafting known CSI
    /// onto a fresh session) and zero its channel moments so the optimizer
    /// restarts cleanly on the new estimate.
    pub fn override_channel(&mut self, id: u64, g: CMat) -> Result<()> {
        let session = self.session_mut(id)?;
        let old = &session.state.g;
        if g.rows() != old.rows() || g.cols() != old.cols() {
            return Err(Error::DimensionMismatch(format!(
                "channel override is {}x{}, session holds {}x{}",
                g.rows(),
                g.cols(),
                old.rows(),
                old.cols()
            )));
        }
        session.state.g = g;
        session.state.mg.fill(0.0);
        session.state.vg.fill(0.0);
        session.state.step_g = 0;
        Ok(())
    }

    /// Full deep snapshot of the session's current moment; also emits a
    /// clipped candidate into the pool. The candidate's residual is measured
    /// on its own clipped image (not the unclipped optimizer latent), so it
    /// is the value any later refit of that image competes against. Returns
    /// the checkpoint id.
    pub fn checkpoint(
        &mut self,
        id: u64,
        obs: &WiretapObservation,
        enc: &EncoderHandle,
    ) -> Result<u64> {
        let chk_id = self.next_checkpoint_id;
        self.next_checkpoint_id += 1;
        // Build everything before touching the pool to appease the borrows.
        let candidate = {
            let session = self.session_mut(id)?;
            if session.status != SessionStatus::Active {
                return Err(Error::Session(format!("session {id} is terminated")));
            }
            let chk = Checkpoint {
                id: chk_id,
                session_id: id,
                step_index: session.total_steps,
                loss: session.last_loss(),
                data_residual: session.last_data_residual,
                state: session.state.clone(),
                loss_history: session.loss_history.clone(),
                burst_end_losses: session.burst_end_losses.clone(),
            };
            let image = session.state.snapshot_image(enc)?;
            let image_state = OptimState::new(
                image.as_slice().to_vec(),
                session.state.g.clone(),
                session.state.hyper,
            )?;
            let image_residual = loss(&image_state, obs, enc)?.data_residual;
            let candidate = Candidate {
                session_id: id,
                step_index: session.total_steps,
                origin: CandidateOrigin::Raw,
                image,
                data_residual: image_residual,
                refined_from_residual: None,
                scores: None,
            };
            session.checkpoints.push(chk);
            candidate
        };
        self.pool.push(candidate);
        Ok(chk_id)
    }

    /// Restore the session to a checkpoint of its own, bitwise, recording
    /// the discarded loss segment in the audit trail.
    pub fn rollback(&mut self, id: u64, checkpoint_id: u64) -> Result<()> {
        let session = self.session_mut(id)?;
        let chk = session
            .checkpoints
            .iter()
            .find(|c| c.id == checkpoint_id)
            .cloned()
            .ok_or_else(|| {
                Error::Session(format!("checkpoint {checkpoint_id} not found in session {id}"))
            })?;
        // After an earlier rollback the session may sit behind a still-saved
        // later checkpoint; restoring "forward" then discards nothing.
        let cut = (chk.step_index as usize).min(session.loss_history.len());
        if session.total_steps > cut as u64 {
            session.audit.push(DiscardedSegment {
                session_id: id,
                checkpoint_id,
                from_step: cut as u64,
                to_step: session.total_steps,
                losses: session.loss_history[cut..].to_vec(),
            });
        }
        session.state = chk.state.clone();
        session.loss_history = chk.loss_history.clone();
        session.burst_end_losses = chk.burst_end_losses.clone();
        session.total_steps = chk.step_index;
        session.last_data_residual = chk.data_residual;
        Ok(())
    }

    /// Run an optimizer burst inside a session: appends per-step losses,
    /// records the burst-end loss, and auto-checkpoints at a healthy burst
    /// end (aborted bursts leave no checkpoint).
    pub fn run_session_burst(
        &mut self,
        id: u64,
        mode: UpdateMode,
        n_steps: usize,
        obs: &WiretapObservation,
        enc: &EncoderHandle,
    ) -> Result<BurstResult> {
        let session = self.session_mut(id)?;
        if session.status != SessionStatus::Active {
            return Err(Error::Session(format!("session {id} is terminated")));
        }
        let burst = run_burst(&mut session.state, mode, n_steps, obs, enc)?;
        for t in &burst.trace {
            session.loss_history.push(t.total);
            session.total_steps += 1;
            session.steps_run += 1;
        }
        if let Some(last) = burst.trace.last() {
            session.burst_end_losses.push(last.total);
            // Candidates carry the data residual alone (TV excluded).
            session.last_data_residual = last.data_residual;
        }
        if !burst.aborted && !burst.trace.is_empty() {
            self.checkpoint(id, obs, enc)?;
        }
        Ok(burst)
    }

    /// Sum of steps physically executed across all sessions; rollbacks do
    /// not refund their discarded segments.
    pub fn steps_spent(&self) -> u64 {
        self.sessions.iter().map(|s| s.steps_run).sum()
    }
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"SMCK";
const CHECKPOINT_VERSION: u32 = 1;

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Versioned binary layout: magic, version, ids, dimension header, then all
/// state as little-endian doubles. Bit-exact round trip.
pub fn encode_checkpoint(chk: &Checkpoint) -> Vec<u8> {
    let st = &chk.state;
    let (ne, nt) = (st.g.rows(), st.g.cols());
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_u64(&mut out, chk.session_id);
    push_u64(&mut out, chk.id);
    push_u64(&mut out, chk.step_index);
    push_f64(&mut out, chk.loss);
    push_f64(&mut out, chk.data_residual);
    push_u64(&mut out, st.x.len() as u64);
    push_u64(&mut out, ne as u64);
    push_u64(&mut out, nt as u64);
    push_f64(&mut out, st.hyper.lambda_tv);
    push_f64(&mut out, st.hyper.eta_x);
    push_f64(&mut out, st.hyper.eta_g);
    push_f64(&mut out, st.hyper.tv_mu);
    push_u64(&mut out, st.step_x);
    push_u64(&mut out, st.step_g);
    for v in st.x.iter().chain(&st.mx).chain(&st.vx) {
        push_f64(&mut out, *v);
    }
    for z in st.g.as_slice() {
        push_f64(&mut out, z.re);
        push_f64(&mut out, z.im);
    }
    for v in st.mg.iter().chain(&st.vg) {
        push_f64(&mut out, *v);
    }
    push_u64(&mut out, chk.loss_history.len() as u64);
    for v in &chk.loss_history {
        push_f64(&mut out, *v);
    }
    push_u64(&mut out, chk.burst_end_losses.len() as u64);
    for v in &chk.burst_end_losses {
        push_f64(&mut out, *v);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointDecode(format!(
                "truncated at byte {} (needed {} more)",
                self.pos, n
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointDecode("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointDecode(format!("unsupported version {version}")));
    }
    let session_id = r.u64()?;
    let id = r.u64()?;
    let step_index = r.u64()?;
    let loss = r.f64()?;
    let data_residual = r.f64()?;
    let n = r.u64()? as usize;
    let ne = r.u64()? as usize;
    let nt = r.u64()? as usize;
    let hyper = OptimHyper {
        lambda_tv: r.f64()?,
        eta_x: r.f64()?,
        eta_g: r.f64()?,
        tv_mu: r.f64()?,
    };
    let step_x = r.u64()?;
    let step_g = r.u64()?;
    let x = r.f64_vec(n)?;
    let mx = r.f64_vec(n)?;
    let vx = r.f64_vec(n)?;
    let mut g = CMat::zeros(ne, nt);
    for entry in g.as_mut_slice() {
        let re = r.f64()?;
        let im = r.f64()?;
        *entry = C64::new(re, im);
    }
    let mg = r.f64_vec(2 * ne * nt)?;
    let vg = r.f64_vec(2 * ne * nt)?;
    let hist_len = r.u64()? as usize;
    let loss_history = r.f64_vec(hist_len)?;
    let burst_len = r.u64()? as usize;
    let burst_end_losses = r.f64_vec(burst_len)?;
    if r.pos != bytes.len() {
        return Err(Error::CheckpointDecode(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    let state = OptimState { x, g, hyper, mx, vx, step_x, mg, vg, step_g };
    Ok(Checkpoint {
        id,
        session_id,
        step_index,
        loss,
        data_residual,
        state,
        loss_history,
        burst_end_losses,
    })
}
