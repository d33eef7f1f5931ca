//! Differentiable semantic encoders with power normalization, bandwidth
//! compression accounting, and the legitimate receiver's decoder.
//!
//! Two encoder families share one handle type: a seeded complex linear map
//! and a one-hidden-layer tanh MLP. Both end in an explicit power
//! normalization that is part of the forward map and is differentiated
//! through — gradients that treated it as a constant would not match the
//! true transmit chain.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, Dyn};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{sample_complex_gaussian, CMat, CVec, Rng, C64};

/// Codeword norm below which the encoder output is considered degenerate.
const DEGENERATE_NORM: f64 = 1e-30;

/// Iteration budget for the MLP decoder-by-inversion.
const MLP_DECODE_STEPS: usize = 400;
const MLP_DECODE_LR: f64 = 5e-2;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Linear,
    Mlp,
}

/// Granularity of the transmit power constraint. Global normalizes the whole
/// codeword to average power 1; per-stream normalizes each antenna stream
/// separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PowerNorm {
    #[default]
    Global,
    PerStream,
}

/// Normalized codeword of length `N_t·T`, plus the pre-normalization norms
/// (one value for global normalization, `N_t` for per-stream). The norms are
/// side information available only to the legitimate receiver; an
/// eavesdropper reconstructs the scale through its own forward model.
#[derive(Clone, Debug, PartialEq)]
pub struct Codeword {
    symbols: CVec,
    raw_norms: Vec<f64>,
}

impl Codeword {
    pub fn with_symbols(symbols: CVec, raw_norms: Vec<f64>) -> Self {
        Self { symbols, raw_norms }
    }

    pub fn symbols(&self) -> &CVec {
        &self.symbols
    }

    pub fn raw_norms(&self) -> &[f64] {
        &self.raw_norms
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Average per-symbol power `(1/(N_t·T))·Σ|z_i|²`.
    pub fn average_power(&self) -> f64 {
        self.symbols.norm_sq() / self.len() as f64
    }
}

/// Outcome flags attached to a decoded image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeFlags {
    /// The linear system had fewer independent equations than unknowns; the
    /// result is the minimum-norm solution.
    pub underdetermined: bool,
    /// The equalized codeword was (numerically) zero.
    pub degenerate_input: bool,
    /// The iterative decoder spent its budget without meeting its residual
    /// target; the best iterate is returned anyway.
    pub budget_exhausted: bool,
}

#[derive(Clone, Debug)]
pub struct DecodedImage {
    pub image: Image,
    pub flags: DecodeFlags,
}

/// An instantiated semantic encoder. Immutable after construction; encode
/// and its vector-Jacobian product are pure functions of the handle.
#[derive(Clone, Debug)]
pub struct EncoderHandle {
    kind: EncoderKind,
    n: usize,
    n_t: usize,
    t: usize,
    seed: u64,
    hidden: usize,
    norm: PowerNorm,
    height: usize,
    width: usize,
    /// Linear: M×N complex weights.
    w: Option<CMat>,
    /// MLP: hidden×N real weights (row-major) and M×hidden complex weights.
    u: Option<Vec<f64>>,
    v: Option<CMat>,
    /// Cached SVD of the stacked real system used by the linear decoder.
    decode_svd: Arc<OnceLock<nalgebra::linalg::SVD<f64, Dyn, Dyn>>>,
}

impl EncoderHandle {
    /// Seeded linear encoder: `z_raw = W·vec(x)` with `W` entries i.i.d.
    /// complex Gaussian of variance `1/N`.
    pub fn linear(height: usize, width: usize, n_t: usize, t: usize, seed: u64, norm: PowerNorm) -> Result<Self> {
        let n = 3 * height * width;
        Self::validate_dims(n, n_t, t)?;
        let m = n_t * t;
        let mut rng = Rng::from_seed(seed).child("encoder-linear-weights");
        let w = sample_complex_gaussian(&mut rng, m, n, 1.0 / n as f64)?;
        Ok(Self {
            kind: EncoderKind::Linear,
            n,
            n_t,
            t,
            seed,
            hidden: 0,
            norm,
            height,
            width,
            w: Some(w),
            u: None,
            v: None,
            decode_svd: Arc::new(OnceLock::new()),
        })
    }

    /// Seeded MLP encoder: `z_raw = V·tanh(U·vec(x))` with real `U`
    /// (entries N(0, 1/N)) and complex `V` (variance `1/hidden`).
    pub fn mlp(
        height: usize,
        width: usize,
        n_t: usize,
        t: usize,
        hidden: usize,
        seed: u64,
        norm: PowerNorm,
    ) -> Result<Self> {
        let n = 3 * height * width;
        Self::validate_dims(n, n_t, t)?;
        if hidden == 0 {
            return Err(Error::InvalidArgument("mlp hidden width must be positive".into()));
        }
        let m = n_t * t;
        let mut ru = Rng::from_seed(seed).child("encoder-mlp-u");
        let scale = (1.0 / n as f64).sqrt();
        let u: Vec<f64> = (0..hidden * n).map(|_| scale * ru.normal()).collect();
        let mut rv = Rng::from_seed(seed).child("encoder-mlp-v");
        let v = sample_complex_gaussian(&mut rv, m, hidden, 1.0 / hidden as f64)?;
        Ok(Self {
            kind: EncoderKind::Mlp,
            n,
            n_t,
            t,
            seed,
            hidden,
            norm,
            height,
            width,
            w: None,
            u: Some(u),
            v: Some(v),
            decode_svd: Arc::new(OnceLock::new()),
        })
    }

    fn validate_dims(n: usize, n_t: usize, t: usize) -> Result<()> {
        if n == 0 || n_t == 0 || t == 0 {
            return Err(Error::InvalidArgument(format!(
                "encoder dims must be positive (N={n}, N_t={n_t}, T={t})"
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn input_len(&self) -> usize {
        self.n
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn time_slots(&self) -> usize {
        self.t
    }

    pub fn out_len(&self) -> usize {
        self.n_t * self.t
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn power_norm(&self) -> PowerNorm {
        self.norm
    }

    /// Bandwidth compression ratio `N_t·T / N`.
    pub fn bcr(&self) -> f64 {
        self.out_len() as f64 / self.n as f64
    }

    /// Linear weight matrix (panics for MLP handles); test oracles use this
    /// to recompute the forward map independently.
    pub fn linear_weights(&self) -> &CMat {
        self.w.as_ref().expect("linear encoder")
    }

    fn raw_forward(&self, x: &[f64]) -> CVec {
        match self.kind {
            EncoderKind::Linear => {
                let w = self.w.as_ref().expect("linear weights");
                let mut out = CVec::zeros(self.out_len());
                for i in 0..w.rows() {
                    let mut acc = C64::new(0.0, 0.0);
                    for (wij, xj) in w.row(i).iter().zip(x) {
                        acc += wij * xj;
                    }
                    out[i] = acc;
                }
                out
            }
            EncoderKind::Mlp => {
                let u = self.u.as_ref().expect("mlp U");
                let v = self.v.as_ref().expect("mlp V");
                let mut act = vec![0.0; self.hidden];
                for (k, a) in act.iter_mut().enumerate() {
                    let row = &u[k * self.n..(k + 1) * self.n];
                    *a = row.iter().zip(x).map(|(uij, xj)| uij * xj).sum::<f64>().tanh();
                }
                let mut out = CVec::zeros(self.out_len());
                for i in 0..v.rows() {
                    let mut acc = C64::new(0.0, 0.0);
                    for (vik, ak) in v.row(i).iter().zip(&act) {
                        acc += vik * ak;
                    }
                    out[i] = acc;
                }
                out
            }
        }
    }

    /// Encode a flattened image buffer (channel-major, length N).
    pub fn encode_values(&self, x: &[f64]) -> Result<Codeword> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "encode: input has {} values, encoder expects {}",
                x.len(),
                self.n
            )));
        }
        let raw = self.raw_forward(x);
        let m = self.out_len();
        match self.norm {
            PowerNorm::Global => {
                let h = raw.norm();
                if h < DEGENERATE_NORM {
                    return Err(Error::DegenerateCodeword { norm: h });
                }
                let scale = (m as f64).sqrt() / h;
                Ok(Codeword { symbols: raw.scale(C64::new(scale, 0.0)), raw_norms: vec![h] })
            }
            PowerNorm::PerStream => {
                let mut symbols = CVec::zeros(m);
                let mut norms = vec![0.0; self.n_t];
                for i in 0..self.n_t {
                    let mut h2 = 0.0;
                    for t in 0..self.t {
                        h2 += raw[t * self.n_t + i].norm_sqr();
                    }
                    let h = h2.sqrt();
                    if h < DEGENERATE_NORM {
                        return Err(Error::DegenerateCodeword { norm: h });
                    }
                    norms[i] = h;
                    let scale = (self.t as f64).sqrt() / h;
                    for t in 0..self.t {
                        symbols[t * self.n_t + i] = raw[t * self.n_t + i] * scale;
                    }
                }
                Ok(Codeword { symbols, raw_norms: norms })
            }
        }
    }

    /// Encode an image. Normalization (global or per-stream) is part of the
    /// forward map.
    pub fn encode(&self, x: &Image) -> Result<Codeword> {
        self.encode_values(x.as_slice())
    }

    /// Vector-Jacobian product of the full forward map (including the
    /// normalization): gradient of `Re⟨cotangent, encode(x)⟩` w.r.t. the
    /// flattened image values.
    pub fn encode_vjp_values(&self, x: &[f64], cotangent: &CVec) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "encode_vjp: input has {} values, encoder expects {}",
                x.len(),
                self.n
            )));
        }
        if cotangent.len() != self.out_len() {
            return Err(Error::DimensionMismatch(format!(
                "encode_vjp: cotangent has {} entries, expected {}",
                cotangent.len(),
                self.out_len()
            )));
        }
        let raw = self.raw_forward(x);
        let m = self.out_len();
        // Pull the cotangent back through the normalization. For z = c·r/h
        // with h = ‖r‖ (per group), the adjoint is
        //   ũ = (c/h)·(u − r·Re⟨r,u⟩/h²)
        // applied per normalization group.
        let mut eff = CVec::zeros(m);
        match self.norm {
            PowerNorm::Global => {
                let h = raw.norm();
                if h < DEGENERATE_NORM {
                    return Err(Error::DegenerateCodeword { norm: h });
                }
                let c = (m as f64).sqrt();
                let ru = raw.inner(cotangent).re; // Re Σ conj(r_i)·u_i
                for i in 0..m {
                    eff[i] = (cotangent[i] - raw[i] * (ru / (h * h))) * (c / h);
                }
            }
            PowerNorm::PerStream => {
                let c = (self.t as f64).sqrt();
                for i in 0..self.n_t {
                    let mut h2 = 0.0;
                    let mut ru = 0.0;
                    for t in 0..self.t {
                        let idx = t * self.n_t + i;
                        h2 += raw[idx].norm_sqr();
                        ru += (raw[idx].conj() * cotangent[idx]).re;
                    }
                    let h = h2.sqrt();
                    if h < DEGENERATE_NORM {
                        return Err(Error::DegenerateCodeword { norm: h });
                    }
                    for t in 0..self.t {
                        let idx = t * self.n_t + i;
                        eff[idx] = (cotangent[idx] - raw[idx] * (ru / h2)) * (c / h);
                    }
                }
            }
        }
        // Back through the unnormalized map.
        match self.kind {
            EncoderKind::Linear => {
                let w = self.w.as_ref().expect("linear weights");
                let mut grad = vec![0.0; self.n];
                for i in 0..w.rows() {
                    let e = eff[i];
                    for (j, wij) in w.row(i).iter().enumerate() {
                        // d Re(conj(e)·w_ij·x_j) / d x_j = Re(conj(e)·w_ij)
                        grad[j] += (e.conj() * wij).re;
                    }
                }
                Ok(grad)
            }
            EncoderKind::Mlp => {
                let u = self.u.as_ref().expect("mlp U");
                let v = self.v.as_ref().expect("mlp V");
                let mut act = vec![0.0; self.hidden];
                for (k, a) in act.iter_mut().enumerate() {
                    let row = &u[k * self.n..(k + 1) * self.n];
                    *a = row.iter().zip(x).map(|(uij, xj)| uij * xj).sum::<f64>().tanh();
                }
                let mut grad_act = vec![0.0; self.hidden];
                for i in 0..v.rows() {
                    let e = eff[i];
                    for (k, vik) in v.row(i).iter().enumerate() {
                        grad_act[k] += (e.conj() * vik).re;
                    }
                }
                let mut grad = vec![0.0; self.n];
                for k in 0..self.hidden {
                    let g = grad_act[k] * (1.0 - act[k] * act[k]);
                    let row = &u[k * self.n..(k + 1) * self.n];
                    for (j, uij) in row.iter().enumerate() {
                        grad[j] += g * uij;
                    }
                }
                Ok(grad)
            }
        }
    }

    pub fn encode_vjp(&self, x: &Image, cotangent: &CVec) -> Result<Vec<f64>> {
        self.encode_vjp_values(x.as_slice(), cotangent)
    }
}

// ---------------------------------------------------------------------------
// Codeword reshaping
// ---------------------------------------------------------------------------

/// Split a codeword into transmit vectors: `s_t[i] = z[t·N_t + i]`.
pub fn reshape_codeword(z: &CVec, n_t: usize, t: usize) -> Result<Vec<CVec>> {
    if z.len() != n_t * t {
        return Err(Error::DimensionMismatch(format!(
            "reshape: codeword length {} != {}·{}",
            z.len(),
            n_t,
            t
        )));
    }
    Ok((0..t)
        .map(|ti| CVec::from_vec(z.as_slice()[ti * n_t..(ti + 1) * n_t].to_vec()))
        .collect())
}

/// Inverse of [`reshape_codeword`].
pub fn flatten_codeword(vectors: &[CVec]) -> CVec {
    let mut out = Vec::new();
    for v in vectors {
        out.extend_from_slice(v.as_slice());
    }
    CVec::from_vec(out)
}

// ---------------------------------------------------------------------------
// Bandwidth compression accounting
// ---------------------------------------------------------------------------

/// Solve `T` from `BCR = N_t·T / N`. `T` must come out a positive integer;
/// configurations that don't divide exactly are rejected.
pub fn solve_time_slots(bcr: f64, n: usize, n_t: usize) -> Result<usize> {
    if !(bcr > 0.0) || n == 0 || n_t == 0 {
        return Err(Error::InvalidArgument(format!(
            "bandwidth ratio inputs must be positive (bcr={bcr}, N={n}, N_t={n_t})"
        )));
    }
    let t_real = bcr * n as f64 / n_t as f64;
    let t = t_real.round();
    if t < 1.0 || (t_real - t).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "bcr {bcr} with N={n}, N_t={n_t} gives non-integer T={t_real}"
        )));
    }
    Ok(t as usize)
}

// ---------------------------------------------------------------------------
// Legitimate receiver
// ---------------------------------------------------------------------------

/// Undo the power normalization using the receiver-side raw norms.
fn descale(enc: &EncoderHandle, z: &Codeword) -> CVec {
    let m = enc.out_len();
    let mut out = CVec::zeros(m);
    match enc.power_norm() {
        PowerNorm::Global => {
            let scale = z.raw_norms[0] / (m as f64).sqrt();
            for i in 0..m {
                out[i] = z.symbols[i] * scale;
            }
        }
        PowerNorm::PerStream => {
            let c = (enc.time_slots() as f64).sqrt();
            for i in 0..enc.n_t() {
                let scale = z.raw_norms[i] / c;
                for t in 0..enc.time_slots() {
                    let idx = t * enc.n_t() + i;
                    out[idx] = z.symbols[idx] * scale;
                }
            }
        }
    }
    out
}

/// Decode an equalized codeword at the legitimate receiver.
///
/// Linear encoders invert the stacked real system `[Re W; Im W]·x ≈
/// [Re ẑ_raw; Im ẑ_raw]` by SVD (minimum-norm solution when the system is
/// underdetermined, which the flags report). MLP encoders run a fixed-budget
/// gradient inversion of the forward map. Either way the result is clipped
/// to [0,1].
pub fn bob_decode(enc: &EncoderHandle, z: &Codeword) -> Result<DecodedImage> {
    if z.len() != enc.out_len() {
        return Err(Error::DimensionMismatch(format!(
            "bob_decode: codeword length {} != {}",
            z.len(),
            enc.out_len()
        )));
    }
    let (h, w) = enc.image_dims();
    let mut flags = DecodeFlags::default();
    if z.symbols.norm_sq() < DEGENERATE_NORM {
        flags.degenerate_input = true;
    }
    match enc.kind() {
        EncoderKind::Linear => {
            let m = enc.out_len();
            let n = enc.input_len();
            let svd = enc.decode_svd.get_or_init(|| {
                let wmat = enc.linear_weights();
                let stacked = DMatrix::from_fn(2 * m, n, |i, j| {
                    if i < m {
                        wmat[(i, j)].re
                    } else {
                        wmat[(i - m, j)].im
                    }
                });
                stacked.svd(true, true)
            });
            let smax = svd.singular_values.max();
            if smax < DEGENERATE_NORM {
                return Err(Error::SingularMatrix { ratio: 0.0 });
            }
            let eps = smax * 1e-12;
            let rank = svd.singular_values.iter().filter(|s| **s > eps).count();
            if rank < n {
                flags.underdetermined = true;
            }
            let raw = descale(enc, z);
            let b = DMatrix::from_fn(2 * m, 1, |i, _| if i < m { raw[i].re } else { raw[i - m].im });
            let sol = svd.solve(&b, eps).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let data: Vec<f64> = (0..n).map(|i| sol[(i, 0)].clamp(0.0, 1.0)).collect();
            Ok(DecodedImage { image: Image::from_planes(h, w, data)?, flags })
        }
        EncoderKind::Mlp => {
            // Decoder-by-inversion in the normalized domain: minimize
            // ‖encode(x) − ẑ‖² with Adam from a mid-gray start.
            let n = enc.input_len();
            let mut x = vec![0.5; n];
            let mut m1 = vec![0.0; n];
            let mut m2 = vec![0.0; n];
            let (b1, b2, eps) = (0.9, 0.999, 1e-8);
            let mut best = x.clone();
            let mut best_loss = f64::INFINITY;
            for step in 1..=MLP_DECODE_STEPS {
                let cw = enc.encode_values(&x)?;
                let resid = cw.symbols().sub(&z.symbols);
                let loss = resid.norm_sq();
                if loss < best_loss {
                    best_loss = loss;
                    best.copy_from_slice(&x);
                }
                // d‖g(x) − ẑ‖²/dx via the encoder vjp with cotangent 2·resid.
                let grad = enc.encode_vjp_values(&x, &resid.scale(C64::new(2.0, 0.0)))?;
                for i in 0..n {
                    m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
                    m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
                    let mh = m1[i] / (1.0 - b1.powi(step as i32));
                    let vh = m2[i] / (1.0 - b2.powi(step as i32));
                    x[i] -= MLP_DECODE_LR * mh / (vh.sqrt() + eps);
                }
            }
            if best_loss > 1e-4 * enc.out_len() as f64 {
                flags.budget_exhausted = true;
            }
            let data: Vec<f64> = best.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            Ok(DecodedImage { image: Image::from_planes(h, w, data)?, flags })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::psnr;
    use crate::numerics::{finite_diff_gradient, gradient_rel_error};

    fn seeded_values(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = Rng::from_seed(seed);
        (0..n).map(|_| rng.uniform()).collect()
    }

    fn tiny_linear(norm: PowerNorm) -> EncoderHandle {
        // N = 3·2·2 = 12, N_t = 2, T = 3 → M = 6.
        EncoderHandle::linear(2, 2, 2, 3, 400, norm).unwrap()
    }

    fn tiny_mlp(norm: PowerNorm) -> EncoderHandle {
        EncoderHandle::mlp(2, 2, 2, 3, 10, 401, norm).unwrap()
    }

    #[test]
    fn codeword_power_is_unit() {
        for enc in [tiny_linear(PowerNorm::Global), tiny_mlp(PowerNorm::Global)] {
            let cw = enc.encode_values(&seeded_values(1, 12)).unwrap();
            assert!((cw.average_power() - 1.0).abs() < 1e-9);
        }
        // Per-stream: each stream at unit average power too.
        let enc = tiny_linear(PowerNorm::PerStream);
        let cw = enc.encode_values(&seeded_values(2, 12)).unwrap();
        for i in 0..2 {
            let p: f64 =
                (0..3).map(|t| cw.symbols()[t * 2 + i].norm_sqr()).sum::<f64>() / 3.0;
            assert!((p - 1.0).abs() < 1e-9);
        }
        assert!((cw.average_power() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn linear_encode_invariant_to_positive_scaling() {
        let enc = tiny_linear(PowerNorm::Global);
        let x = seeded_values(3, 12);
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a = enc.encode_values(&x).unwrap();
        let b = enc.encode_values(&x2).unwrap();
        for i in 0..a.len() {
            assert!((a.symbols()[i] - b.symbols()[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn encode_matches_bruteforce_recompute() {
        let enc = tiny_linear(PowerNorm::Global);
        let x = seeded_values(4, 12);
        // Independent path: explicit multiply + normalization.
        let w = enc.linear_weights();
        let mut raw = vec![C64::new(0.0, 0.0); 6];
        for i in 0..6 {
            for j in 0..12 {
                raw[i] += w[(i, j)] * x[j];
            }
        }
        let h = raw.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let scale = 6f64.sqrt() / h;
        let cw = enc.encode_values(&x).unwrap();
        for i in 0..6 {
            assert!((cw.symbols()[i] - raw[i] * scale).norm() < 1e-12);
        }
    }

    #[test]
    fn encode_rejects_degenerate_input() {
        let enc = tiny_linear(PowerNorm::Global);
        assert!(matches!(
            enc.encode_values(&vec![0.0; 12]),
            Err(Error::DegenerateCodeword { .. })
        ));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for (k, enc) in [
            tiny_linear(PowerNorm::Global),
            tiny_linear(PowerNorm::PerStream),
            tiny_mlp(PowerNorm::Global),
            tiny_mlp(PowerNorm::PerStream),
        ]
        .iter()
        .enumerate()
        {
            let x = seeded_values(10 + k as u64, 12);
            let mut crng = Rng::from_seed(20 + k as u64);
            let u = CVec::from_vec((0..6).map(|_| crng.complex_gaussian(1.0)).collect());
            let analytic = enc.encode_vjp_values(&x, &u).unwrap();
            let f = |v: &[f64]| {
                let cw = enc.encode_values(v).unwrap();
                u.inner(cw.symbols()).re
            };
            let fd = finite_diff_gradient(&f, &x, 1e-5);
            let err = gradient_rel_error(&analytic, &fd);
            assert!(err < 1e-5, "encoder {k}: rel err {err}");
        }
    }

    #[test]
    fn vjp_zero_cotangent_is_zero() {
        let enc = tiny_mlp(PowerNorm::Global);
        let g = enc.encode_vjp_values(&seeded_values(5, 12), &CVec::zeros(6)).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vjp_linear_in_cotangent() {
        let enc = tiny_linear(PowerNorm::Global);
        let x = seeded_values(6, 12);
        let mut crng = Rng::from_seed(7);
        let u = CVec::from_vec((0..6).map(|_| crng.complex_gaussian(1.0)).collect());
        let g1 = enc.encode_vjp_values(&x, &u).unwrap();
        let g2 = enc.encode_vjp_values(&x, &u.scale(C64::new(2.0, 0.0))).unwrap();
        for i in 0..12 {
            assert!((g2[i] - 2.0 * g1[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn reshape_layout_and_roundtrip() {
        let z = CVec::from_vec(vec![
            C64::new(1.0, 0.0),
            C64::new(2.0, 0.0),
            C64::new(3.0, 0.0),
            C64::new(4.0, 0.0),
        ]);
        let s = reshape_codeword(&z, 2, 2).unwrap();
        assert_eq!(s[0].as_slice(), &z.as_slice()[..2]);
        assert_eq!(s[1].as_slice(), &z.as_slice()[2..]);
        assert_eq!(flatten_codeword(&s), z);
        assert!(reshape_codeword(&z, 3, 2).is_err());
    }

    #[test]
    fn time_slot_solving() {
        assert_eq!(solve_time_slots(1.0 / 12.0, 768, 2).unwrap(), 32);
        assert_eq!(solve_time_slots(1.0, 12, 2).unwrap(), 6);
        assert!(solve_time_slots(0.1, 768, 2).is_err());
        assert!(solve_time_slots(0.0, 768, 2).is_err());
    }

    #[test]
    fn bob_decodes_noiseless_linear_exactly() {
        // M = N/2 complex symbols gives exactly N real equations.
        let enc = EncoderHandle::linear(2, 2, 2, 3, 402, PowerNorm::Global).unwrap();
        let x = Image::from_planes(2, 2, seeded_values(8, 12)).unwrap();
        let cw = enc.encode(&x).unwrap();
        let decoded = bob_decode(&enc, &cw).unwrap();
        assert!(!decoded.flags.underdetermined);
        assert!(psnr(&x, &decoded.image).unwrap() > 50.0);
        // Overdetermined variant.
        let enc2 = EncoderHandle::linear(2, 2, 2, 6, 403, PowerNorm::Global).unwrap();
        let cw2 = enc2.encode(&x).unwrap();
        let dec2 = bob_decode(&enc2, &cw2).unwrap();
        assert!(psnr(&x, &dec2.image).unwrap() > 50.0);
    }

    #[test]
    fn bob_flags_underdetermined_system() {
        // M = 2 complex → 4 real equations for 12 unknowns.
        let enc = EncoderHandle::linear(2, 2, 2, 1, 404, PowerNorm::Global).unwrap();
        let x = Image::from_planes(2, 2, seeded_values(9, 12)).unwrap();
        let cw = enc.encode(&x).unwrap();
        let decoded = bob_decode(&enc, &cw).unwrap();
        assert!(decoded.flags.underdetermined);
    }

    #[test]
    fn bob_flags_zero_input() {
        let enc = tiny_linear(PowerNorm::Global);
        let z = Codeword::with_symbols(CVec::zeros(6), vec![1.0]);
        let decoded = bob_decode(&enc, &z).unwrap();
        assert!(decoded.flags.degenerate_input);
    }

    #[test]
    fn bob_decode_deterministic() {
        let enc = tiny_mlp(PowerNorm::Global);
        let x = Image::from_planes(2, 2, seeded_values(10, 12)).unwrap();
        let cw = enc.encode(&x).unwrap();
        let a = bob_decode(&enc, &cw).unwrap();
        let b = bob_decode(&enc, &cw).unwrap();
        assert_eq!(a.image, b.image);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use crate::numerics::Rng;

        proptest! {
            /// Every codeword leaving encode has unit average power.
            #[test]
            fn power_contract(seed in 0u64..50_000, mlp in proptest::bool::ANY) {
                let enc = if mlp {
                    tiny_mlp(PowerNorm::Global)
                } else {
                    tiny_linear(PowerNorm::Global)
                };
                let x = seeded_values(seed, 12);
                // A uniform draw is never the all-zero image.
                let cw = enc.encode_values(&x).unwrap();
                prop_assert!((cw.average_power() - 1.0).abs() < 1e-9);
            }

            /// flatten ∘ reshape is the identity, bitwise.
            #[test]
            fn reshape_roundtrip(seed in 0u64..50_000, n_t in 1usize..5, t in 1usize..6) {
                let mut rng = Rng::from_seed(seed);
                let z = CVec::from_vec(
                    (0..n_t * t).map(|_| rng.complex_gaussian(1.0)).collect(),
                );
                let s = reshape_codeword(&z, n_t, t).unwrap();
                prop_assert_eq!(flatten_codeword(&s), z);
            }
        }
    }
}
