//! MIMO Rayleigh block-fading simulation for the legitimate and wiretap
//! links: fading and noise draws, SNR accounting, and zero-forcing
//! equalization.
//!
//! One `Transmission` is one coherence block: a single (H, G) pair held
//! constant over all T channel uses. SNR is transmit-referenced against the
//! unit per-symbol power leaving the encoder, so the noise variance at every
//! receive antenna is `10^(−SNR_dB/10)`.

use crate::error::{Error, Result};
use crate::numerics::{sample_complex_gaussian, solve_least_squares, CMat, CVec, Rng};
use crate::semcom::{reshape_codeword, Codeword};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Antenna counts and operating SNR for one link pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub n_t: usize,
    pub n_r: usize,
    pub n_e: usize,
    pub snr_db: f64,
    /// Eavesdropper link SNR; `None` means the same SNR as the legitimate
    /// link (a single shared SNR axis).
    pub eve_snr_db: Option<f64>,
}

impl ChannelConfig {
    pub fn new(n_t: usize, n_r: usize, n_e: usize, snr_db: f64) -> Result<Self> {
        if n_t == 0 || n_e == 0 {
            return Err(Error::InvalidArgument(format!(
                "antenna counts must be positive (N_t={n_t}, N_e={n_e})"
            )));
        }
        if n_r < n_t {
            return Err(Error::InvalidArgument(format!(
                "zero-forcing needs N_r ≥ N_t, got N_r={n_r}, N_t={n_t}"
            )));
        }
        Ok(Self { n_t, n_r, n_e, snr_db, eve_snr_db: None })
    }

    pub fn with_eve_snr(mut self, snr_db: f64) -> Self {
        self.eve_snr_db = Some(snr_db);
        self
    }

    /// Per-antenna noise variance on the legitimate link.
    pub fn noise_variance(&self) -> f64 {
        10f64.powf(-self.snr_db / 10.0)
    }

    /// Per-antenna noise variance on the wiretap link.
    pub fn eve_noise_variance(&self) -> f64 {
        10f64.powf(-self.eve_snr_db.unwrap_or(self.snr_db) / 10.0)
    }
}

// ---------------------------------------------------------------------------
// Transmission
// ---------------------------------------------------------------------------

/// One coherence block. Holds the drawn channel realizations and both
/// received sequences. The eavesdropper-side attack code never touches this
/// type; it works from [`WiretapObservation`], which carries no realization.
#[derive(Clone, Debug)]
pub struct Transmission {
    h: CMat,
    g: CMat,
    y: Vec<CVec>,
    r: Vec<CVec>,
    n_t: usize,
}

impl Transmission {
    /// Legitimate channel realization (receiver-side CSI).
    pub fn legitimate_channel(&self) -> &CMat {
        &self.h
    }

    /// Ground-truth wiretap channel. Only CSI-granted baselines and tests
    /// may read this; blind attack paths receive a [`WiretapObservation`].
    pub fn wiretap_channel(&self) -> &CMat {
        &self.g
    }

    pub fn received_legitimate(&self) -> &[CVec] {
        &self.y
    }

    pub fn received_wiretap(&self) -> &[CVec] {
        &self.r
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn time_slots(&self) -> usize {
        self.y.len()
    }

    /// Everything the eavesdropper legitimately has: the wiretap
    /// observations, the dimensions, and the statistical description of the
    /// link. No channel realization crosses this boundary.
    pub fn wiretap_observation(&self, cfg: &ChannelConfig) -> WiretapObservation {
        WiretapObservation {
            received: self.r.clone(),
            n_e: cfg.n_e,
            n_t: self.n_t,
            time_slots: self.y.len(),
            noise_variance: cfg.eve_noise_variance(),
        }
    }
}

/// The eavesdropper's view of one transmission: received vectors plus
/// dimensions and noise statistics. Deliberately contains no H and no G.
#[derive(Clone, Debug)]
pub struct WiretapObservation {
    pub received: Vec<CVec>,
    pub n_e: usize,
    pub n_t: usize,
    pub time_slots: usize,
    pub noise_variance: f64,
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Send a codeword through one coherence block. Draw order from `rng` is
/// fixed (H, G, then per-use noise for both links), so a trial seed pins the
/// whole transmission.
pub fn transmit(z: &Codeword, cfg: &ChannelConfig, rng: &mut Rng) -> Result<Transmission> {
    if z.len() % cfg.n_t != 0 {
        return Err(Error::DimensionMismatch(format!(
            "codeword length {} not divisible by N_t={}",
            z.len(),
            cfg.n_t
        )));
    }
    let t = z.len() / cfg.n_t;
    let s = reshape_codeword(z.symbols(), cfg.n_t, t)?;
    let h = sample_complex_gaussian(rng, cfg.n_r, cfg.n_t, 1.0)?;
    let g = sample_complex_gaussian(rng, cfg.n_e, cfg.n_t, 1.0)?;
    let sigma2_b = cfg.noise_variance();
    let sigma2_e = cfg.eve_noise_variance();
    let mut y = Vec::with_capacity(t);
    let mut r = Vec::with_capacity(t);
    for st in &s {
        let mut yt = h.matvec(st);
        for i in 0..cfg.n_r {
            yt[i] += rng.complex_gaussian(sigma2_b);
        }
        let mut rt = g.matvec(st);
        for i in 0..cfg.n_e {
            rt[i] += rng.complex_gaussian(sigma2_e);
        }
        y.push(yt);
        r.push(rt);
    }
    Ok(Transmission { h, g, y, r, n_t: cfg.n_t })
}

/// Zero-forcing equalization with receiver CSI: least-squares solve of `H`
/// against each received vector, concatenated back into codeword layout.
pub fn zf_receive(trans: &Transmission, h: &CMat) -> Result<CVec> {
    let mut out = Vec::with_capacity(trans.time_slots() * trans.n_t);
    for yt in &trans.y {
        let st = solve_least_squares(h, yt)?;
        out.extend_from_slice(st.as_slice());
    }
    Ok(CVec::from_vec(out))
}

/// Predicted wiretap observations `{G̃·s_t}` under a channel estimate. Pure;
/// the inversion module differentiates through it.
pub fn wiretap_forward(g_est: &CMat, s: &[CVec]) -> Result<Vec<CVec>> {
    for st in s {
        if st.len() != g_est.cols() {
            return Err(Error::DimensionMismatch(format!(
                "wiretap_forward: transmit vector length {} vs {} channel columns",
                st.len(),
                g_est.cols()
            )));
        }
    }
    Ok(s.iter().map(|st| g_est.matvec(st)).collect())
}
