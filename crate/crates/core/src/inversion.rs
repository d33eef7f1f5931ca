//! Numerical core of the blind inversion attack: the joint data-fit +
//! total-variation loss over (x̃, G̃), its analytic gradients, three update
//! modes, and a self-contained Adam optimizer designed for burst-resumable
//! operation.
//!
//! The image variable is optimized unconstrained and clipped to [0,1] only
//! when snapshots are taken — projecting during optimization would fight
//! Adam's moments. The channel estimate G̃ is complex; its gradient follows
//! the convention ∇ = ∂/∂Re + i·∂/∂Im, so `G̃ ← G̃ − η·∇` decreases the real
//! loss to first order.

use crate::channel::{wiretap_forward, WiretapObservation};
use crate::error::{Error, Result};
use crate::image::{
    synth_face, total_variation_smoothed, total_variation_smoothed_gradient, Image,
};
use crate::numerics::{CMat, CVec, Rng, C64};
use crate::semcom::{reshape_codeword, EncoderHandle};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Smoothing width of the differentiable total-variation term.
pub const TV_SMOOTHING: f64 = 1e-6;

/// Default step size for the image variable.
pub const DEFAULT_ETA_X: f64 = 5e-2;
/// Default (smaller) step size for the channel estimate.
pub const DEFAULT_ETA_G: f64 = 1e-2;
/// Default total-variation weight.
pub const DEFAULT_LAMBDA_TV: f64 = 5e-4;
/// Default number of optimizer steps per burst.
pub const DEFAULT_BURST_STEPS: usize = 40;

/// Default number of prior samples behind [`prior_anchored_channel_estimate`].
pub const PRIOR_ANCHOR_SAMPLES: usize = 64;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Which variable group a step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateMode {
    ImageOnly,
    ChannelOnly,
    Joint,
}

impl UpdateMode {
    pub const ALL: [UpdateMode; 3] = [UpdateMode::Joint, UpdateMode::ImageOnly, UpdateMode::ChannelOnly];

    pub fn as_str(&self) -> &'static str {
        match self {
            UpdateMode::ImageOnly => "image_only",
            UpdateMode::ChannelOnly => "channel_only",
            UpdateMode::Joint => "joint",
        }
    }

    pub fn from_name(name: &str) -> Option<UpdateMode> {
        match name {
            "image_only" => Some(UpdateMode::ImageOnly),
            "channel_only" => Some(UpdateMode::ChannelOnly),
            "joint" => Some(UpdateMode::Joint),
            _ => None,
        }
    }
}

/// Loss weights and step sizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimHyper {
    pub lambda_tv: f64,
    pub eta_x: f64,
    pub eta_g: f64,
    /// TV smoothing width; kept in the state so checkpoints pin it.
    pub tv_mu: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self { lambda_tv: DEFAULT_LAMBDA_TV, eta_x: DEFAULT_ETA_X, eta_g: DEFAULT_ETA_G, tv_mu: TV_SMOOTHING }
    }
}

/// Full optimizer state for one inversion session: both variable groups and
/// their Adam moments. Moments of a group not selected by the update mode
/// are bitwise frozen, including the step counters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    /// Image variable, channel-major, unconstrained.
    pub x: Vec<f64>,
    /// Channel estimate, N_e×N_t.
    pub g: CMat,
    pub hyper: OptimHyper,
    pub mx: Vec<f64>,
    pub vx: Vec<f64>,
    pub step_x: u64,
    /// Moments for G̃ over stacked (re, im) pairs, entry-major.
    pub mg: Vec<f64>,
    pub vg: Vec<f64>,
    pub step_g: u64,
}

impl OptimState {
    pub fn new(x: Vec<f64>, g: CMat, hyper: OptimHyper) -> Result<Self> {
        if !(hyper.eta_x >= 0.0) || !(hyper.eta_g >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rates must be non-negative (eta_x={}, eta_g={})",
                hyper.eta_x, hyper.eta_g
            )));
        }
        if !(hyper.lambda_tv >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda_tv must be ≥ 0, got {}", hyper.lambda_tv)));
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("initial image value {v}")));
        }
        let n = x.len();
        let ng = 2 * g.rows() * g.cols();
        Ok(Self {
            x,
            g,
            hyper,
            mx: vec![0.0; n],
            vx: vec![0.0; n],
            step_x: 0,
            mg: vec![0.0; ng],
            vg: vec![0.0; ng],
            step_g: 0,
        })
    }

    /// Fresh blind start: x̃ = 0.5 + N(0, 0.05²) per value, G̃ with i.i.d.
    /// CN(0,1) entries (the eavesdropper knows only the fading statistics).
    /// Draw order is image first, then channel.
    pub fn random_init(enc: &EncoderHandle, n_e: usize, hyper: OptimHyper, rng: &mut Rng) -> Result<Self> {
        let x = (0..enc.input_len()).map(|_| 0.5 + 0.05 * rng.normal()).collect();
        let mut g = CMat::zeros(n_e, enc.n_t());
        for entry in g.as_mut_slice() {
            *entry = rng.complex_gaussian(1.0);
        }
        Self::new(x, g, hyper)
    }

    /// Current image estimate as a clipped Image snapshot.
    pub fn snapshot_image(&self, enc: &EncoderHandle) -> Result<Image> {
        let (h, w) = enc.image_dims();
        Ok(Image::from_planes(h, w, self.x.clone())?.clamped())
    }
}

/// Channel-statistics-informed starting point for G̃, computed from the
/// observations alone (no channel realization crosses into this function).
///
/// Power normalization makes the transmitted slots approximately white, so
/// the received second moment satisfies `E[r·rᴴ] = G·Gᴴ + σ²·I`. The
/// principal square root of the debiased sample covariance therefore
/// recovers G up to a right-unitary factor; only that residual rotation is
/// left for the optimizer and the image prior to resolve. Falls back
/// gracefully when debiasing leaves little energy — the result is then
/// small and Adam grows it.
pub fn covariance_channel_init(obs: &WiretapObservation) -> Result<CMat> {
    let (n_e, n_t) = (obs.n_e, obs.n_t);
    if obs.received.is_empty() || n_e == 0 || n_t == 0 {
        return Err(Error::InvalidArgument(
            "covariance init needs at least one received slot".into(),
        ));
    }
    let mut cov = CMat::zeros(n_e, n_e);
    for r in &obs.received {
        if r.len() != n_e {
            return Err(Error::DimensionMismatch(format!(
                "received slot has {} entries, expected {n_e}",
                r.len()
            )));
        }
        for i in 0..n_e {
            for j in 0..n_e {
                cov[(i, j)] += r[i] * r[j].conj();
            }
        }
    }
    let t = obs.received.len() as f64;
    for i in 0..n_e {
        for j in 0..n_e {
            cov[(i, j)] /= C64::new(t, 0.0);
        }
        cov[(i, i)] -= C64::new(obs.noise_variance, 0.0);
    }
    // Principal square root via SVD (equals the eigen square root of the
    // positive part for a hermitian matrix).
    let m = nalgebra::DMatrix::from_fn(n_e, n_e, |i, j| cov[(i, j)]);
    let svd = m.svd(true, false);
    let u = svd.u.as_ref().expect("svd with u requested");
    let mut g = CMat::zeros(n_e, n_t);
    for j in 0..n_t.min(n_e) {
        let scale = svd.singular_values[j].max(0.0).sqrt();
        for i in 0..n_e {
            g[(i, j)] = u[(i, j)] * C64::new(scale, 0.0);
        }
    }
    Ok(g)
}

/// Blind channel estimate anchored on the attacker's source prior.
///
/// No pilots cross the wiretap link, but the glass-box encoder plus a prior
/// over sources makes every transmission partially predictable: averaging the
/// codewords of `n_prior` sampled prior images yields an expected slot
/// sequence `m_t` with `E[r_t] = G·m_t`, so least squares of the received
/// slots against `{m_t}` estimates `G` — *including* the rotation that
/// second-moment methods like [`covariance_channel_init`] can never see
/// (they identify `G` only up to a right-unitary factor). The residual error
/// scales with how far the actual source deviates from the prior mean, not
/// with any channel knowledge.
///
/// Draws prior images from `rng`; neither the transmitted image nor the
/// channel realization crosses into this function.
pub fn prior_anchored_channel_estimate(
    obs: &WiretapObservation,
    enc: &EncoderHandle,
    n_prior: usize,
    rng: &mut Rng,
) -> Result<CMat> {
    let (n_e, n_t, t) = (obs.n_e, obs.n_t, obs.received.len());
    if n_prior == 0 {
        return Err(Error::InvalidArgument("prior anchor needs at least one sample".into()));
    }
    if t == 0 {
        return Err(Error::InvalidArgument(
            "prior anchor needs at least one received slot".into(),
        ));
    }
    if enc.n_t() != n_t || enc.time_slots() != t {
        return Err(Error::DimensionMismatch(format!(
            "encoder emits {}x{} slots, observation holds {n_t}x{t}",
            enc.n_t(),
            enc.time_slots()
        )));
    }
    let (h, w) = enc.image_dims();
    if h < 16 || w < 16 {
        return Err(Error::InvalidArgument(format!(
            "prior anchor needs a face-sized encoder (≥16x16), got {h}x{w}"
        )));
    }
    let mut mean_slots = vec![CVec::zeros(n_t); t];
    let weight = C64::new(1.0 / n_prior as f64, 0.0);
    for _ in 0..n_prior {
        let sample = synth_face(rng, h, w);
        let cw = enc.encode(&sample)?;
        let slots = reshape_codeword(cw.symbols(), n_t, t)?;
        for (acc, s) in mean_slots.iter_mut().zip(&slots) {
            for i in 0..n_t {
                acc[i] += s[i] * weight;
            }
        }
    }
    // Normal equations Ĝ·(Σ m·mᴴ) = Σ r·mᴴ, with a tiny ridge so a
    // degenerate anchor sequence degrades gracefully instead of blowing up.
    let mut rm = CMat::zeros(n_e, n_t);
    let mut mm = CMat::zeros(n_t, n_t);
    for (r, m) in obs.received.iter().zip(&mean_slots) {
        if r.len() != n_e {
            return Err(Error::DimensionMismatch(format!(
                "received slot has {} entries, expected {n_e}",
                r.len()
            )));
        }
        for j in 0..n_t {
            let mj = m[j].conj();
            for i in 0..n_e {
                rm[(i, j)] += r[i] * mj;
            }
            for i in 0..n_t {
                mm[(i, j)] += m[i] * mj;
            }
        }
    }
    let trace: f64 = (0..n_t).map(|i| mm[(i, i)].re).sum();
    let ridge = (trace / n_t as f64).max(1.0) * 1e-9;
    for i in 0..n_t {
        mm[(i, i)] += C64::new(ridge, 0.0);
    }
    let mm_na = nalgebra::DMatrix::from_fn(n_t, n_t, |i, j| mm[(i, j)]);
    let inv = mm_na.try_inverse().ok_or_else(|| {
        Error::InvalidArgument("prior anchor normal equations are singular".into())
    })?;
    Ok(CMat::from_fn(n_e, n_t, |i, j| {
        (0..n_t).map(|k| rm[(i, k)] * inv[(k, j)]).sum()
    }))
}

/// Loss value split into its terms. `total = data_residual + tv_term`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub data_residual: f64,
    pub tv_term: f64,
}

/// A burst of sequential steps with its loss trace (loss recorded before
/// each update). `aborted` marks a NaN-guard stop: the trace is partial and
/// the state is left at the last finite point.
#[derive(Clone, Debug)]
pub struct BurstResult {
    pub trace: Vec<LossTerms>,
    pub aborted: bool,
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

fn image_of(state: &OptimState, enc: &EncoderHandle) -> Result<Image> {
    let (h, w) = enc.image_dims();
    Image::from_planes(h, w, state.x.clone())
}

/// Joint loss: Σ_t ‖G̃·s_t(x̃) − r_t‖² + λ_tv·TV(x̃), with s_t computed
/// through the full encoder (normalization included) and the smoothed TV.
pub fn loss(state: &OptimState, obs: &WiretapObservation, enc: &EncoderHandle) -> Result<LossTerms> {
    let cw = enc.encode_values(&state.x)?;
    let s = reshape_codeword(cw.symbols(), obs.n_t, obs.time_slots)?;
    let pred = wiretap_forward(&state.g, &s)?;
    let mut data_residual = 0.0;
    for (p, r) in pred.iter().zip(&obs.received) {
        data_residual += p.sub(r).norm_sq();
    }
    let img = image_of(state, enc)?;
    let tv_term = state.hyper.lambda_tv * total_variation_smoothed(&img, state.hyper.tv_mu);
    Ok(LossTerms { total: data_residual + tv_term, data_residual, tv_term })
}

/// Analytic gradients of the total loss: real gradient for x̃ and complex
/// (∂/∂Re + i·∂/∂Im) gradient for G̃. The G̃ data-term block is
/// `2·Σ_t (G̃s_t − r_t)·s_tᴴ`.
pub fn gradients(
    state: &OptimState,
    obs: &WiretapObservation,
    enc: &EncoderHandle,
) -> Result<(Vec<f64>, CMat)> {
    let (_, gx, gg) = loss_and_gradients(state, obs, enc)?;
    Ok((gx, gg))
}

fn loss_and_gradients(
    state: &OptimState,
    obs: &WiretapObservation,
    enc: &EncoderHandle,
) -> Result<(LossTerms, Vec<f64>, CMat)> {
    let cw = enc.encode_values(&state.x)?;
    let s = reshape_codeword(cw.symbols(), obs.n_t, obs.time_slots)?;
    let pred = wiretap_forward(&state.g, &s)?;
    let gh = state.g.hermitian();
    let mut data_residual = 0.0;
    let mut grad_g = CMat::zeros(state.g.rows(), state.g.cols());
    // Cotangent into the codeword: 2·G̃ᴴ·e_t per slot, flattened.
    let mut cotangent = CVec::zeros(cw.len());
    for (t, (p, r)) in pred.iter().zip(&obs.received).enumerate() {
        let e = p.sub(r);
        data_residual += e.norm_sq();
        let back = gh.matvec(&e);
        for i in 0..obs.n_t {
            cotangent[t * obs.n_t + i] = back[i] * 2.0;
        }
        let st = &s[t];
        for i in 0..state.g.rows() {
            for j in 0..state.g.cols() {
                grad_g[(i, j)] += e[i] * st[j].conj() * 2.0;
            }
        }
    }
    let mut grad_x = enc.encode_vjp_values(&state.x, &cotangent)?;
    let img = image_of(state, enc)?;
    let tv = total_variation_smoothed(&img, state.hyper.tv_mu);
    let tv_grad = total_variation_smoothed_gradient(&img, state.hyper.tv_mu);
    for (g, t) in grad_x.iter_mut().zip(&tv_grad) {
        *g += state.hyper.lambda_tv * t;
    }
    let terms = LossTerms {
        total: data_residual + state.hyper.lambda_tv * tv,
        data_residual,
        tv_term: state.hyper.lambda_tv * tv,
    };
    Ok((terms, grad_x, grad_g))
}

// ---------------------------------------------------------------------------
// Stepping
// ---------------------------------------------------------------------------

fn adam_update(var: &mut f64, m: &mut f64, v: &mut f64, grad: f64, eta: f64, step: u64) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * grad;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * grad * grad;
    let mh = *m / (1.0 - ADAM_BETA1.powi(step as i32));
    let vh = *v / (1.0 - ADAM_BETA2.powi(step as i32));
    *var -= eta * mh / (vh.sqrt() + ADAM_EPS);
}

/// One Adam step on the variable group(s) selected by `mode`. Returns the
/// loss evaluated before the update. Frozen groups are untouched bitwise,
/// moments and counters included.
pub fn step(
    state: &mut OptimState,
    mode: UpdateMode,
    obs: &WiretapObservation,
    enc: &EncoderHandle,
) -> Result<LossTerms> {
    let (terms, grad_x, grad_g) = loss_and_gradients(state, obs, enc)?;
    if !terms.total.is_finite() {
        return Err(Error::NonFinite(format!("loss value {}", terms.total)));
    }
    if grad_x.iter().any(|g| !g.is_finite())
        || grad_g.as_slice().iter().any(|g| !g.re.is_finite() || !g.im.is_finite())
    {
        return Err(Error::NonFinite("gradient overflow".into()));
    }
    if matches!(mode, UpdateMode::ImageOnly | UpdateMode::Joint) {
        state.step_x += 1;
        for i in 0..state.x.len() {
            adam_update(
                &mut state.x[i],
                &mut state.mx[i],
                &mut state.vx[i],
                grad_x[i],
                state.hyper.eta_x,
                state.step_x,
            );
        }
    }
    if matches!(mode, UpdateMode::ChannelOnly | UpdateMode::Joint) {
        state.step_g += 1;
        let cols = state.g.cols();
        for i in 0..state.g.rows() {
            for j in 0..cols {
                let idx = 2 * (i * cols + j);
                let c = grad_g[(i, j)];
                let entry = &mut state.g[(i, j)];
                let mut re = entry.re;
                let mut im = entry.im;
                adam_update(&mut re, &mut state.mg[idx], &mut state.vg[idx], c.re, state.hyper.eta_g, state.step_g);
                adam_update(&mut im, &mut state.mg[idx + 1], &mut state.vg[idx + 1], c.im, state.hyper.eta_g, state.step_g);
                *entry = C64::new(re, im);
            }
        }
    }
    Ok(terms)
}

/// Run `n_steps` sequential steps (1..=1000). A non-finite loss or gradient
/// — or a collapsed (degenerate) codeword — aborts the burst, returning the
/// partial trace with `aborted` set instead of poisoning the state.
pub fn run_burst(
    state: &mut OptimState,
    mode: UpdateMode,
    n_steps: usize,
    obs: &WiretapObservation,
    enc: &EncoderHandle,
) -> Result<BurstResult> {
    if n_steps == 0 || n_steps > 1000 {
        return Err(Error::InvalidArgument(format!("burst length {n_steps} not in 1..=1000")));
    }
    let mut trace = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        match step(state, mode, obs, enc) {
            Ok(terms) => trace.push(terms),
            Err(Error::NonFinite(_)) | Err(Error::DegenerateCodeword { .. }) => {
                return Ok(BurstResult { trace, aborted: true });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(BurstResult { trace, aborted: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{transmit, ChannelConfig};
    use crate::image::Image;
    use crate::numerics::{finite_diff_gradient, gradient_rel_error, sample_complex_gaussian};
    use crate::semcom::PowerNorm;

    const N_E: usize = 2;

    fn tiny_enc(seed: u64, mlp: bool) -> EncoderHandle {
        if mlp {
            EncoderHandle::mlp(2, 2, 2, 3, 10, seed, PowerNorm::Global).unwrap()
        } else {
            EncoderHandle::linear(2, 2, 2, 3, seed, PowerNorm::Global).unwrap()
        }
    }

    /// Build a seeded problem: true image, its transmission, and the
    /// eavesdropper's observation of it.
    fn tiny_problem(seed: u64, snr_db: f64, mlp: bool) -> (EncoderHandle, Image, crate::channel::Transmission, WiretapObservation) {
        let enc = tiny_enc(seed, mlp);
        let mut rng = Rng::from_seed(seed ^ 0x5eed);
        let x = Image::from_planes(2, 2, (0..12).map(|_| rng.uniform()).collect()).unwrap();
        let cfg = ChannelConfig::new(2, 2, N_E, snr_db).unwrap();
        let cw = enc.encode(&x).unwrap();
        let trans = transmit(&cw, &cfg, &mut rng).unwrap();
        let obs = trans.wiretap_observation(&cfg);
        (enc, x, trans, obs)
    }

    #[test]
    fn loss_zero_at_exact_noiseless_fit() {
        let (enc, x, trans, obs) = tiny_problem(1, 300.0, false);
        let hyper = OptimHyper { lambda_tv: 0.0, ..OptimHyper::default() };
        let state = OptimState::new(x.as_slice().to_vec(), trans.wiretap_channel().clone(), hyper).unwrap();
        let terms = loss(&state, &obs, &enc).unwrap();
        assert!(terms.total < 1e-9, "total {}", terms.total);
    }

    #[test]
    fn loss_zero_channel_equals_observation_power() {
        let (enc, x, _, obs) = tiny_problem(2, 10.0, false);
        let hyper = OptimHyper { lambda_tv: 0.0, ..OptimHyper::default() };
        let state = OptimState::new(x.as_slice().to_vec(), CMat::zeros(N_E, 2), hyper).unwrap();
        let terms = loss(&state, &obs, &enc).unwrap();
        let power: f64 = obs.received.iter().map(|r| r.norm_sq()).sum();
        assert!((terms.data_residual - power).abs() < 1e-12);
    }

    #[test]
    fn covariance_init_recovers_channel_gram() {
        // With unit-power symbols, E[r·rᴴ] = G·Gᴴ + σ²·I, so the square root
        // of the debiased sample covariance matches G up to a right-unitary
        // factor. Compare Gram matrices, which that factor cancels out of.
        let mut rng = Rng::from_seed(0xC0F4CE);
        let g = sample_complex_gaussian(&mut rng, N_E, 2, 1.0).unwrap();
        let sigma2 = 0.05;
        let slots = 4000;
        let mut received = Vec::with_capacity(slots);
        for _ in 0..slots {
            let s = CVec::from_vec((0..2).map(|_| rng.complex_gaussian(1.0)).collect());
            let mut r = g.matvec(&s);
            for v in r.as_mut_slice() {
                *v += rng.complex_gaussian(sigma2);
            }
            received.push(r);
        }
        let obs = WiretapObservation {
            received,
            n_e: N_E,
            n_t: 2,
            time_slots: slots,
            noise_variance: sigma2,
        };
        let init = covariance_channel_init(&obs).unwrap();
        assert_eq!(init.rows(), N_E);
        assert_eq!(init.cols(), 2);
        let gram_true = g.matmul(&g.hermitian());
        let gram_init = init.matmul(&init.hermitian());
        let rel = gram_init.sub(&gram_true).frob_norm() / gram_true.frob_norm();
        assert!(rel < 0.15, "relative Gram error {rel}");
    }

    #[test]
    fn covariance_init_beats_random_draws_on_real_codewords() {
        // Even from a short coherence block of actual (power-normalized)
        // codeword symbols, the statistics-based start lands closer to the
        // true channel Gram than fresh random draws do.
        let enc = EncoderHandle::linear(16, 16, 2, 32, 41, PowerNorm::Global).unwrap();
        for seed in 0..5u64 {
            let mut rng = Rng::from_seed(0xBEE5 ^ seed);
            let x = crate::image::synth_face(&mut rng, 16, 16);
            let cfg = ChannelConfig::new(2, 2, N_E, 20.0).unwrap();
            let cw = enc.encode(&x).unwrap();
            let trans = transmit(&cw, &cfg, &mut rng).unwrap();
            let obs = trans.wiretap_observation(&cfg);
            let gram_true = trans
                .wiretap_channel()
                .matmul(&trans.wiretap_channel().hermitian());
            let dist = |m: &CMat| m.matmul(&m.hermitian()).sub(&gram_true).frob_norm();
            let init = covariance_channel_init(&obs).unwrap();
            let d_init = dist(&init);
            let mut worse = 0;
            for draw in 0..5 {
                let mut dr = Rng::from_seed(0xD0_0D ^ seed ^ (draw << 8));
                let random = sample_complex_gaussian(&mut dr, N_E, 2, 1.0).unwrap();
                if dist(&random) > d_init {
                    worse += 1;
                }
            }
            assert!(worse >= 4, "seed {seed}: only {worse}/5 random draws were worse");
        }
    }

    #[test]
    fn covariance_init_rejects_empty_observation() {
        let obs = WiretapObservation {
            received: Vec::new(),
            n_e: N_E,
            n_t: 2,
            time_slots: 0,
            noise_variance: 0.1,
        };
        assert!(covariance_channel_init(&obs).is_err());
    }

    #[test]
    fn prior_anchor_estimate_lands_near_true_channel() {
        // The anchor pins the full channel — rotation included — so the raw
        // (not rotation-invariant) relative error must be small. Error is
        // dominated by source-vs-prior deviation; 0.25 is ~2x the worst case
        // observed over a broad seed scan at this operating point.
        let enc = EncoderHandle::linear(16, 16, 2, 32, 41, PowerNorm::Global).unwrap();
        for seed in 0..5u64 {
            let mut rng = Rng::from_seed(0xA5C0 + seed);
            let x = crate::image::synth_face(&mut rng, 16, 16);
            let cfg = ChannelConfig::new(2, 2, N_E, 20.0).unwrap();
            let cw = enc.encode(&x).unwrap();
            let trans = transmit(&cw, &cfg, &mut rng).unwrap();
            let obs = trans.wiretap_observation(&cfg);
            let mut prior_rng = Rng::from_seed(7700 + seed);
            let g_hat =
                prior_anchored_channel_estimate(&obs, &enc, PRIOR_ANCHOR_SAMPLES, &mut prior_rng)
                    .unwrap();
            let g = trans.wiretap_channel();
            let rel = g_hat.sub(g).frob_norm() / g.frob_norm();
            assert!(rel < 0.25, "seed {seed}: raw relative error {rel}");
        }
    }

    #[test]
    fn prior_anchor_estimate_rejects_mismatched_geometry() {
        let enc = EncoderHandle::linear(16, 16, 2, 32, 41, PowerNorm::Global).unwrap();
        let mut rng = Rng::from_seed(0xFACE5);
        let x = crate::image::synth_face(&mut rng, 16, 16);
        let cfg = ChannelConfig::new(2, 2, N_E, 10.0).unwrap();
        let cw = enc.encode(&x).unwrap();
        let trans = transmit(&cw, &cfg, &mut rng).unwrap();
        let obs = trans.wiretap_observation(&cfg);
        // Matching geometry works…
        assert!(prior_anchored_channel_estimate(&obs, &enc, 4, &mut rng).is_ok());
        // …but an encoder with a different slot count is refused,
        let other = EncoderHandle::linear(16, 16, 2, 16, 41, PowerNorm::Global).unwrap();
        assert!(prior_anchored_channel_estimate(&obs, &other, 4, &mut rng).is_err());
        // …as are zero prior samples,
        assert!(prior_anchored_channel_estimate(&obs, &enc, 0, &mut rng).is_err());
        // …and an encoder too small for the face prior.
        let (tiny, _, _, tiny_obs) = (tiny_enc(5, false), 0, 0, tiny_problem(5, 10.0, false).3);
        assert!(prior_anchored_channel_estimate(&tiny_obs, &tiny, 4, &mut rng).is_err());
    }

    #[test]
    fn loss_matches_bruteforce_recompute() {
        let (enc, _, _, obs) = tiny_problem(3, 10.0, false);
        let mut rng = Rng::from_seed(33);
        let x: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
        let g = sample_complex_gaussian(&mut rng, N_E, 2, 1.0).unwrap();
        let state = OptimState::new(x.clone(), g.clone(), OptimHyper::default()).unwrap();
        let terms = loss(&state, &obs, &enc).unwrap();
        // Independent recomputation, term by term.
        let cw = enc.encode_values(&x).unwrap();
        let mut data = 0.0;
        for t in 0..obs.time_slots {
            for i in 0..N_E {
                let mut pred = C64::new(0.0, 0.0);
                for j in 0..2 {
                    pred += g[(i, j)] * cw.symbols()[t * 2 + j];
                }
                data += (pred - obs.received[t][i]).norm_sqr();
            }
        }
        let img = Image::from_planes(2, 2, x).unwrap();
        let tv = total_variation_smoothed(&img, state.hyper.tv_mu);
        assert!((terms.data_residual - data).abs() < 1e-12);
        assert!((terms.total - (data + state.hyper.lambda_tv * tv)).abs() < 1e-12);
    }

    /// Flatten (x̃, G̃) into a stacked real parameter vector for the
    /// finite-difference oracle.
    fn pack(state: &OptimState) -> Vec<f64> {
        let mut p = state.x.clone();
        for z in state.g.as_slice() {
            p.push(z.re);
            p.push(z.im);
        }
        p
    }

    fn unpack(p: &[f64], n: usize, rows: usize, cols: usize, hyper: OptimHyper) -> OptimState {
        let x = p[..n].to_vec();
        let mut g = CMat::zeros(rows, cols);
        for (k, entry) in g.as_mut_slice().iter_mut().enumerate() {
            *entry = C64::new(p[n + 2 * k], p[n + 2 * k + 1]);
        }
        OptimState::new(x, g, hyper).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (k, mlp) in [false, true].into_iter().enumerate() {
            let (enc, _, _, obs) = tiny_problem(10 + k as u64, 10.0, mlp);
            let mut rng = Rng::from_seed(40 + k as u64);
            let x: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
            let g = sample_complex_gaussian(&mut rng, N_E, 2, 1.0).unwrap();
            let state = OptimState::new(x, g, OptimHyper::default()).unwrap();
            let (gx, gg) = gradients(&state, &obs, &enc).unwrap();
            let mut analytic = gx.clone();
            for z in gg.as_slice() {
                analytic.push(z.re);
                analytic.push(z.im);
            }
            let hyper = state.hyper;
            let f = |p: &[f64]| {
                let s = unpack(p, 12, N_E, 2, hyper);
                loss(&s, &obs, &enc).unwrap().total
            };
            let fd = finite_diff_gradient(&f, &pack(&state), 1e-5);
            let err = gradient_rel_error(&analytic, &fd);
            assert!(err < 1e-5, "mlp={mlp}: rel err {err}");
        }
    }

    #[test]
    fn gradients_vanish_at_global_minimum() {
        let (enc, x, trans, obs) = tiny_problem(5, 300.0, false);
        let hyper = OptimHyper { lambda_tv: 0.0, ..OptimHyper::default() };
        let state = OptimState::new(x.as_slice().to_vec(), trans.wiretap_channel().clone(), hyper).unwrap();
        let (gx, gg) = gradients(&state, &obs, &enc).unwrap();
        let nx = gx.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(nx < 1e-9, "image gradient norm {nx}");
        assert!(gg.frob_norm() < 1e-9, "channel gradient norm {}", gg.frob_norm());
    }

    #[test]
    fn channel_gradient_matches_closed_form() {
        let (enc, _, _, obs) = tiny_problem(6, 10.0, false);
        let mut rng = Rng::from_seed(60);
        let x: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
        let g = sample_complex_gaussian(&mut rng, N_E, 2, 1.0).unwrap();
        let state = OptimState::new(x.clone(), g.clone(), OptimHyper::default()).unwrap();
        let (_, gg) = gradients(&state, &obs, &enc).unwrap();
        // Oracle: explicit elementwise 2·Σ_t e_t·conj(s_t) loops.
        let cw = enc.encode_values(&x).unwrap();
        let mut oracle = CMat::zeros(N_E, 2);
        for t in 0..obs.time_slots {
            for i in 0..N_E {
                let mut pred = C64::new(0.0, 0.0);
                for j in 0..2 {
                    pred += g[(i, j)] * cw.symbols()[t * 2 + j];
                }
                let e = pred - obs.received[t][i];
                for j in 0..2 {
                    oracle[(i, j)] += e * cw.symbols()[t * 2 + j].conj() * 2.0;
                }
            }
        }
        assert!(gg.sub(&oracle).frob_norm() < 1e-10);
    }

    #[test]
    fn channel_only_step_freezes_image_group() {
        let (enc, _, _, obs) = tiny_problem(7, 10.0, false);
        let mut rng = Rng::from_seed(70);
        let mut state = OptimState::random_init(&enc, N_E, OptimHyper::default(), &mut rng).unwrap();
        let before_x = state.x.clone();
        let before_mx = state.mx.clone();
        step(&mut state, UpdateMode::ChannelOnly, &obs, &enc).unwrap();
        assert_eq!(state.x, before_x);
        assert_eq!(state.mx, before_mx);
        assert_eq!(state.step_x, 0);
        assert_eq!(state.step_g, 1);
    }

    #[test]
    fn image_only_converges_with_true_channel() {
        let (enc, _, trans, obs) = tiny_problem(8, 300.0, false);
        let hyper = OptimHyper { lambda_tv: 0.0, ..OptimHyper::default() };
        let mut rng = Rng::from_seed(80);
        let x0: Vec<f64> = (0..12).map(|_| 0.5 + 0.05 * rng.normal()).collect();
        let mut state = OptimState::new(x0, trans.wiretap_channel().clone(), hyper).unwrap();
        let initial = loss(&state, &obs, &enc).unwrap().data_residual;
        for _ in 0..200 {
            step(&mut state, UpdateMode::ImageOnly, &obs, &enc).unwrap();
        }
        let fin = loss(&state, &obs, &enc).unwrap().data_residual;
        assert!(fin < 0.1 * initial, "initial {initial}, final {fin}");
    }

    #[test]
    fn joint_with_zero_channel_rate_matches_image_only_on_x() {
        let (enc, _, _, obs) = tiny_problem(9, 10.0, false);
        let mut rng = Rng::from_seed(90);
        let base = OptimState::random_init(&enc, N_E, OptimHyper::default(), &mut rng).unwrap();
        let mut joint = base.clone();
        joint.hyper.eta_g = 0.0;
        let mut image_only = base;
        step(&mut joint, UpdateMode::Joint, &obs, &enc).unwrap();
        step(&mut image_only, UpdateMode::ImageOnly, &obs, &enc).unwrap();
        assert_eq!(joint.x, image_only.x);
    }

    #[test]
    fn burst_trace_has_step_count() {
        let (enc, _, _, obs) = tiny_problem(11, 10.0, false);
        let mut rng = Rng::from_seed(110);
        let mut state = OptimState::random_init(&enc, N_E, OptimHyper::default(), &mut rng).unwrap();
        let burst = run_burst(&mut state, UpdateMode::Joint, DEFAULT_BURST_STEPS, &obs, &enc).unwrap();
        assert_eq!(burst.trace.len(), 40);
        assert!(!burst.aborted);
        assert!(run_burst(&mut state, UpdateMode::Joint, 0, &obs, &enc).is_err());
        assert!(run_burst(&mut state, UpdateMode::Joint, 1001, &obs, &enc).is_err());
    }

    #[test]
    fn split_bursts_equal_whole_burst() {
        for mode in UpdateMode::ALL {
            let (enc, _, _, obs) = tiny_problem(12, 10.0, false);
            let mut rng = Rng::from_seed(120);
            let base = OptimState::random_init(&enc, N_E, OptimHyper::default(), &mut rng).unwrap();
            let mut whole = base.clone();
            let mut split = base;
            let w = run_burst(&mut whole, mode, 40, &obs, &enc).unwrap();
            let s1 = run_burst(&mut split, mode, 20, &obs, &enc).unwrap();
            let s2 = run_burst(&mut split, mode, 20, &obs, &enc).unwrap();
            assert_eq!(whole, split, "mode {mode:?}");
            let recombined: Vec<LossTerms> =
                s1.trace.iter().chain(&s2.trace).copied().collect();
            assert_eq!(w.trace, recombined, "mode {mode:?}");
        }
    }

    #[test]
    fn burst_flat_at_convergence() {
        // An exactly-converged state needs an exactly-zero residual: Adam is
        // scale-invariant, so any nonzero gradient eventually produces
        // η-sized drift. Build the observation from the forward model with
        // no noise at all.
        let (enc, x, trans, mut obs) = tiny_problem(13, 300.0, false);
        let cw = enc.encode(&x).unwrap();
        let s = reshape_codeword(cw.symbols(), obs.n_t, obs.time_slots).unwrap();
        obs.received = wiretap_forward(trans.wiretap_channel(), &s).unwrap();
        let hyper = OptimHyper { lambda_tv: 0.0, ..OptimHyper::default() };
        let mut state =
            OptimState::new(x.as_slice().to_vec(), trans.wiretap_channel().clone(), hyper).unwrap();
        let burst = run_burst(&mut state, UpdateMode::Joint, 10, &obs, &enc).unwrap();
        for t in &burst.trace {
            assert!(t.total < 1e-9);
        }
        let spread = burst.trace.iter().map(|t| t.total).fold(0.0, f64::max)
            - burst.trace.iter().map(|t| t.total).fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-9);
    }

    #[test]
    fn burst_aborts_on_poisoned_state() {
        let (enc, _, _, obs) = tiny_problem(14, 10.0, false);
        let mut rng = Rng::from_seed(140);
        let mut state = OptimState::random_init(&enc, N_E, OptimHyper::default(), &mut rng).unwrap();
        let good = run_burst(&mut state, UpdateMode::Joint, 3, &obs, &enc).unwrap();
        assert_eq!(good.trace.len(), 3);
        state.x[0] = f64::NAN;
        let snapshot = state.clone();
        let bad = run_burst(&mut state, UpdateMode::Joint, 5, &obs, &enc).unwrap();
        assert!(bad.aborted);
        assert!(bad.trace.is_empty());
        // State must not have been advanced past the poison point.
        assert_eq!(format!("{:?}", state.g), format!("{:?}", snapshot.g));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use crate::numerics::Rng;

        proptest! {
            /// Unit-modulus gauge: scaling the codeword by α and the channel
            /// estimate by conj(α) leaves every residual term unchanged.
            #[test]
            fn phase_gauge_invariance(seed in 0u64..100_000, theta in 0.0f64..std::f64::consts::TAU) {
                let mut rng = Rng::from_seed(seed);
                let g = sample_complex_gaussian(&mut rng, 2, 2, 1.0).unwrap();
                let s: Vec<CVec> = (0..3)
                    .map(|_| CVec::from_vec((0..2).map(|_| rng.complex_gaussian(1.0)).collect()))
                    .collect();
                let r: Vec<CVec> = (0..3)
                    .map(|_| CVec::from_vec((0..2).map(|_| rng.complex_gaussian(1.0)).collect()))
                    .collect();
                let alpha = C64::from_polar(1.0, theta);
                let pred = crate::channel::wiretap_forward(&g, &s).unwrap();
                let g2 = g.scale(alpha.conj());
                let s2: Vec<CVec> = s.iter().map(|v| v.scale(alpha)).collect();
                let pred2 = crate::channel::wiretap_forward(&g2, &s2).unwrap();
                for t in 0..3 {
                    let a = pred[t].sub(&r[t]).norm();
                    let b = pred2[t].sub(&r[t]).norm();
                    prop_assert!((a - b).abs() < 1e-10);
                }
            }

            /// Mode isolation: the unselected group is bitwise frozen.
            #[test]
            fn mode_isolation(seed in 0u64..50_000, image_side in proptest::bool::ANY) {
                let (enc, _, _, obs) = tiny_problem(seed % 97, 10.0, false);
                let mut rng = Rng::from_seed(seed);
                let mut state = OptimState::random_init(&enc, N_E, OptimHyper::default(), &mut rng).unwrap();
                let before = state.clone();
                if image_side {
                    step(&mut state, UpdateMode::ImageOnly, &obs, &enc).unwrap();
                    prop_assert_eq!(&state.g, &before.g);
                    prop_assert_eq!(&state.mg, &before.mg);
                    prop_assert_eq!(&state.vg, &before.vg);
                    prop_assert_eq!(state.step_g, before.step_g);
                } else {
                    step(&mut state, UpdateMode::ChannelOnly, &obs, &enc).unwrap();
                    prop_assert_eq!(&state.x, &before.x);
                    prop_assert_eq!(&state.mx, &before.mx);
                    prop_assert_eq!(&state.vx, &before.vx);
                    prop_assert_eq!(state.step_x, before.step_x);
                }
            }
        }
    }
}
