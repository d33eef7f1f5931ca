//! Real image tensors and everything measured on them: total variation,
//! reference metrics (PSNR, MS-SSIM), a toy identity embedding, synthetic
//! face generation, and PPM file I/O.
//!
//! Images are 3-channel, stored as channel-major planes of `f64` in the
//! nominal range [0,1]. Out-of-range values are representable (optimizers
//! produce them); clipping is always an explicit call, never silent.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Fixed channel count. Everything in the pipeline is RGB.
pub const CHANNELS: usize = 3;

/// PSNR reported for an exact match (MSE clamped to 1e-10, i.e. a 100 dB cap).
pub const PSNR_CAP_DB: f64 = 100.0;

/// Downsampling grid used by the toy identity embedding.
pub const EMBED_GRID: usize = 16;

// ---------------------------------------------------------------------------
// Image tensor
// ---------------------------------------------------------------------------

/// 3-channel image, channel-major: `data[c*H*W + i*W + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; CHANNELS * height * width] }
    }

    /// Build from a channel-major buffer. Length must be `3·H·W` and every
    /// value finite.
    pub fn from_planes(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::DimensionMismatch(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                CHANNELS * height * width
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image pixel value {v}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Total number of scalar values, `3·H·W`.
    pub fn num_values(&self) -> usize {
        self.data.len()
    }

    /// Flattened channel-major view; this ordering is the `vec(x)` every
    /// encoder consumes.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[c * self.height * self.width + i * self.width + j]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        self.data[c * self.height * self.width + i * self.width + j] = v;
    }

    /// Copy with every value clipped to [0,1]. The only place clipping
    /// happens.
    pub fn clamped(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Luma grayscale (Rec. 601 weights), one value per pixel.
    pub fn to_grayscale(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        (0..n).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect()
    }
}

// ---------------------------------------------------------------------------
// Total variation
// ---------------------------------------------------------------------------

/// Anisotropic total variation: per channel, the sum of absolute horizontal
/// and vertical neighbor differences.
pub fn total_variation(x: &Image) -> f64 {
    let (h, w) = (x.height(), x.width());
    let mut tv = 0.0;
    for c in 0..CHANNELS {
        let p = x.plane(c);
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    tv += (p[i * w + j] - p[i * w + j + 1]).abs();
                }
                if i + 1 < h {
                    tv += (p[i * w + j] - p[(i + 1) * w + j]).abs();
                }
            }
        }
    }
    tv
}

/// Smoothed total variation: each |d| term becomes sqrt(d² + mu²), which is
/// differentiable everywhere. Used wherever TV feeds a gradient; plain
/// [`total_variation`] is the reporting definition.
pub fn total_variation_smoothed(x: &Image, mu: f64) -> f64 {
    let (h, w) = (x.height(), x.width());
    let mu2 = mu * mu;
    let mut tv = 0.0;
    for c in 0..CHANNELS {
        let p = x.plane(c);
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    let d = p[i * w + j] - p[i * w + j + 1];
                    tv += (d * d + mu2).sqrt();
                }
                if i + 1 < h {
                    let d = p[i * w + j] - p[(i + 1) * w + j];
                    tv += (d * d + mu2).sqrt();
                }
            }
        }
    }
    tv
}

/// Gradient of [`total_variation_smoothed`] w.r.t. every pixel, in the same
/// channel-major layout as `Image::as_slice`.
pub fn total_variation_smoothed_gradient(x: &Image, mu: f64) -> Vec<f64> {
    let (h, w) = (x.height(), x.width());
    let mu2 = mu * mu;
    let mut grad = vec![0.0; x.num_values()];
    for c in 0..CHANNELS {
        let p = x.plane(c);
        let base = c * h * w;
        for i in 0..h {
            for j in 0..w {
                let a = i * w + j;
                if j + 1 < w {
                    let b = i * w + j + 1;
                    let d = p[a] - p[b];
                    let s = d / (d * d + mu2).sqrt();
                    grad[base + a] += s;
                    grad[base + b] -= s;
                }
                if i + 1 < h {
                    let b = (i + 1) * w + j;
                    let d = p[a] - p[b];
                    let s = d / (d * d + mu2).sqrt();
                    grad[base + a] += s;
                    grad[base + b] -= s;
                }
            }
        }
    }
    grad
}

// ---------------------------------------------------------------------------
// PSNR
// ---------------------------------------------------------------------------

/// Peak signal-to-noise ratio in dB against peak 1.0. MSE is clamped below
/// at 1e-10, so identical images report exactly [`PSNR_CAP_DB`].
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    if !x.same_dims(y) {
        return Err(Error::DimensionMismatch(format!(
            "psnr: {}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    let mse = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.num_values() as f64;
    Ok(10.0 * (1.0 / mse.max(1e-10)).log10())
}

// ---------------------------------------------------------------------------
// MS-SSIM
// ---------------------------------------------------------------------------

/// Standard five-scale weights.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian filter of an h×w plane. Output is
/// (h-10)×(w-10).
fn gauss_filter(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let win = gaussian_window();
    let wh = h;
    let ww = w - (SSIM_WINDOW - 1);
    // Horizontal pass.
    let mut tmp = vec![0.0; wh * ww];
    for i in 0..wh {
        for j in 0..ww {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * p[i * w + j + k];
            }
            tmp[i * ww + j] = acc;
        }
    }
    // Vertical pass.
    let oh = h - (SSIM_WINDOW - 1);
    let mut out = vec![0.0; oh * ww];
    for i in 0..oh {
        for j in 0..ww {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * tmp[(i + k) * ww + j];
            }
            out[i * ww + j] = acc;
        }
    }
    (out, oh, ww)
}

/// Mean luminance term and mean contrast-structure term of one plane pair.
fn ssim_plane_terms(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, f64) {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (mu_x, oh, ow) = gauss_filter(x, h, w);
    let (mu_y, _, _) = gauss_filter(y, h, w);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (m_xx, _, _) = gauss_filter(&xx, h, w);
    let (m_yy, _, _) = gauss_filter(&yy, h, w);
    let (m_xy, _, _) = gauss_filter(&xy, h, w);
    let n = oh * ow;
    let mut lum = 0.0;
    let mut cs = 0.0;
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = (m_xx[i] - mx * mx).max(0.0);
        let vy = (m_yy[i] - my * my).max(0.0);
        let cxy = m_xy[i] - mx * my;
        lum += (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        cs += (2.0 * cxy + c2) / (vx + vy + c2);
    }
    (lum / n as f64, cs / n as f64)
}

/// 2x2 average-pool downsampling (odd trailing row/column dropped).
fn downsample_plane(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = 0.25
                * (p[2 * i * w + 2 * j]
                    + p[2 * i * w + 2 * j + 1]
                    + p[(2 * i + 1) * w + 2 * j]
                    + p[(2 * i + 1) * w + 2 * j + 1]);
        }
    }
    (out, oh, ow)
}

/// Largest feasible scale count (≤5) for the given dimensions.
pub fn ms_ssim_max_scales(height: usize, width: usize) -> usize {
    let mut s = 0;
    while s < 5 && height.min(width) >= (1usize << s) * SSIM_WINDOW {
        s += 1;
    }
    s
}

/// Multi-scale SSIM with an explicit scale count; errors if the images are
/// too small for it (`min(H,W) ≥ 2^(scales−1)·11` required).
pub fn ms_ssim_with_scales(x: &Image, y: &Image, scales: usize) -> Result<f64> {
    if !x.same_dims(y) {
        return Err(Error::DimensionMismatch(format!(
            "ms_ssim: {}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    if scales == 0 || scales > 5 {
        return Err(Error::InvalidArgument(format!("ms_ssim: scale count {scales} not in 1..=5")));
    }
    let min_dim = x.height().min(x.width());
    let need = (1usize << (scales - 1)) * SSIM_WINDOW;
    if min_dim < need {
        return Err(Error::InvalidArgument(format!(
            "ms_ssim: min dimension {min_dim} below {need} required for {scales} scales"
        )));
    }
    // Renormalize the standard weights over the scales actually used.
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let mut score = 1.0;
    // Per-channel planes, downsampled as we walk the scales.
    let mut planes: Vec<(Vec<f64>, Vec<f64>)> =
        (0..CHANNELS).map(|c| (x.plane(c).to_vec(), y.plane(c).to_vec())).collect();
    let (mut h, mut w) = (x.height(), x.width());
    for s in 0..scales {
        let mut lum_mean = 0.0;
        let mut cs_mean = 0.0;
        for (px, py) in &planes {
            let (l, cs) = ssim_plane_terms(px, py, h, w);
            lum_mean += l / CHANNELS as f64;
            cs_mean += cs / CHANNELS as f64;
        }
        let weight = MS_SSIM_WEIGHTS[s] / wsum;
        let factor = if s + 1 == scales { (lum_mean * cs_mean).clamp(0.0, 1.0) } else { cs_mean.clamp(0.0, 1.0) };
        score *= factor.powf(weight);
        if s + 1 < scales {
            let mut next_dims = (h, w);
            for pair in planes.iter_mut() {
                let (dx, nh, nw) = downsample_plane(&pair.0, h, w);
                let (dy, _, _) = downsample_plane(&pair.1, h, w);
                *pair = (dx, dy);
                next_dims = (nh, nw);
            }
            (h, w) = next_dims;
        }
    }
    Ok(score)
}

/// Multi-scale SSIM at the largest feasible scale count for the image size
/// (weights renormalized). Errors only when even a single scale does not fit.
pub fn ms_ssim(x: &Image, y: &Image) -> Result<f64> {
    let scales = ms_ssim_max_scales(x.height(), x.width());
    if scales == 0 {
        return Err(Error::InvalidArgument(format!(
            "ms_ssim: image {}x{} smaller than the {SSIM_WINDOW}-tap window",
            x.height(),
            x.width()
        )));
    }
    ms_ssim_with_scales(x, y, scales)
}

// ---------------------------------------------------------------------------
// Toy identity embedding
// ---------------------------------------------------------------------------

/// Fixed random projection used as a cheap stand-in for a learned identity
/// embedding. The image is converted to grayscale, block-averaged onto a
/// 16×16 grid, mean-centered, then linearly projected and unit-normalized.
///
/// Centering matters: without it every non-negative image would land in a
/// narrow cone and cosines would say nothing. This is a deterministic
/// structural fingerprint, NOT a face recognizer, and claims no validity as
/// one; it only gives the pipeline a reproducible success criterion.
#[derive(Clone, Debug)]
pub struct ToyEmbedding {
    dim: usize,
    seed: u64,
    /// dim × 256 projection, row-major.
    proj: Vec<f64>,
}

impl ToyEmbedding {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be positive".into()));
        }
        let mut rng = Rng::from_seed(seed).child("toy-embedding-projection");
        let n = EMBED_GRID * EMBED_GRID;
        let proj = (0..dim * n).map(|_| rng.normal()).collect();
        Ok(Self { dim, seed, proj })
    }

    /// Default 128-dimensional embedding.
    pub fn default_from_seed(seed: u64) -> Self {
        Self::new(128, seed).expect("positive dim")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Embedding vector. `degenerate` marks images whose centered downsample
/// projected to (numerically) zero — e.g. constant images; such vectors
/// compare as cosine 0 against everything.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

/// Block-average a grayscale plane onto the 16×16 embedding grid. Cells are
/// integer partitions of the pixel grid; images smaller than the grid reuse
/// pixels across cells.
pub(crate) fn downsample_grid(gray: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; EMBED_GRID * EMBED_GRID];
    for u in 0..EMBED_GRID {
        let r0 = (u * h) / EMBED_GRID;
        let r1 = (((u + 1) * h) / EMBED_GRID).max(r0 + 1).min(h.max(r0 + 1));
        for v in 0..EMBED_GRID {
            let c0 = (v * w) / EMBED_GRID;
            let c1 = (((v + 1) * w) / EMBED_GRID).max(c0 + 1).min(w.max(c0 + 1));
            let mut acc = 0.0;
            let mut count = 0.0;
            for i in r0..r1 {
                for j in c0..c1 {
                    acc += gray[i.min(h - 1) * w + j.min(w - 1)];
                    count += 1.0;
                }
            }
            out[u * EMBED_GRID + v] = acc / count;
        }
    }
    out
}

pub fn embed(x: &Image, e: &ToyEmbedding) -> Embedding {
    let gray = x.to_grayscale();
    let mut grid = downsample_grid(&gray, x.height(), x.width());
    let mean = grid.iter().sum::<f64>() / grid.len() as f64;
    for g in grid.iter_mut() {
        *g -= mean;
    }
    let n = EMBED_GRID * EMBED_GRID;
    let mut out = vec![0.0; e.dim];
    for (k, o) in out.iter_mut().enumerate() {
        let row = &e.proj[k * n..(k + 1) * n];
        *o = row.iter().zip(&grid).map(|(p, g)| p * g).sum();
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Embedding { values: vec![0.0; e.dim], degenerate: true };
    }
    for o in out.iter_mut() {
        *o /= norm;
    }
    Embedding { values: out, degenerate: false }
}

/// Cosine similarity of two embeddings; 0 if either is degenerate.
pub fn cosine_sim(a: &Embedding, b: &Embedding) -> f64 {
    assert_eq!(a.values.len(), b.values.len(), "cosine_sim: dim mismatch");
    if a.degenerate || b.degenerate {
        return 0.0;
    }
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x * y)
        .sum::<f64>()
        .clamp(-1.0, 1.0)
}

// ---------------------------------------------------------------------------
// Synthetic faces
// ---------------------------------------------------------------------------

/// Background palette classes: (top RGB, bottom RGB) of a vertical gradient.
/// The class is recoverable from the rendered corners, which downstream
/// heuristics rely on. Palettes are spread across distinct luminance bands
/// so identities stay distinguishable even after grayscale conversion.
pub const BACKGROUND_PALETTES: [([f64; 3], [f64; 3]); 4] = [
    ([0.10, 0.14, 0.22], [0.24, 0.28, 0.38]), // slate (dark, cool)
    ([0.22, 0.38, 0.24], [0.42, 0.58, 0.42]), // sage (mid, green)
    ([0.62, 0.55, 0.38], [0.85, 0.78, 0.58]), // sand (bright, warm)
    ([0.40, 0.26, 0.46], [0.62, 0.44, 0.68]), // plum (mid, purple)
];

/// Human-readable names for the background classes, indexed like
/// [`BACKGROUND_PALETTES`].
pub const BACKGROUND_NAMES: [&str; 4] = ["slate", "sage", "sand", "plum"];

/// Geometry and colors of one synthetic face. All positions and sizes are
/// fractions of the image dimensions, so the same params render consistently
/// at any resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceParams {
    /// Index into [`BACKGROUND_PALETTES`].
    pub background: usize,
    /// Head ellipse center as fractions of (width, height).
    pub cx: f64,
    pub cy: f64,
    /// Head semi-axes as fractions of width / height.
    pub ax: f64,
    pub ay: f64,
    pub skin: [f64; 3],
    /// Eye offsets in ellipse-normalized coordinates (so the eye centers sit
    /// at normalized radius sqrt(dx²+dy²) < 1 by construction).
    pub eye_dx: f64,
    pub eye_dy: f64,
    /// Eye disk radius as a fraction of min(H, W).
    pub eye_radius: f64,
    pub eye_shade: f64,
    /// Mouth vertical offset (ellipse-normalized, downward), half-width as a
    /// fraction of the horizontal semi-axis, thickness as a fraction of
    /// height, and curvature as a fraction of height.
    pub mouth_dy: f64,
    pub mouth_half_width: f64,
    pub mouth_thickness: f64,
    pub mouth_curve: f64,
}

impl FaceParams {
    /// Draw parameters from their documented ranges:
    /// background uniform over the 4 palettes; center in [0.42,0.58]²;
    /// semi-axes ax ∈ [0.22,0.38], ay ∈ [0.30,0.46]; skin tones spanning a
    /// wide luminance range; eye offsets dx ∈ [0.25,0.45], dy ∈ [0.15,0.32]
    /// (normalized radius ≤ 0.56, keeping eyes inside the head); eye radius
    /// ∈ [0.02,0.05]; mouth dy ∈ [0.35,0.55], half-width ∈ [0.25,0.45],
    /// thickness ∈ [0.015,0.03], curve ∈ [0.0,0.04]. The ranges are wide on
    /// purpose: identity separation downstream relies on the generator
    /// producing genuinely distinguishable faces.
    pub fn sample(rng: &mut Rng) -> FaceParams {
        let background = ((rng.uniform() * 4.0) as usize).min(3);
        let r = rng.uniform_in(0.50, 0.95);
        let g = r * rng.uniform_in(0.65, 0.85);
        let b = g * rng.uniform_in(0.60, 0.90);
        FaceParams {
            background,
            cx: rng.uniform_in(0.42, 0.58),
            cy: rng.uniform_in(0.42, 0.58),
            ax: rng.uniform_in(0.22, 0.38),
            ay: rng.uniform_in(0.30, 0.46),
            skin: [r, g, b],
            eye_dx: rng.uniform_in(0.25, 0.45),
            eye_dy: rng.uniform_in(0.15, 0.32),
            eye_radius: rng.uniform_in(0.02, 0.05),
            eye_shade: rng.uniform_in(0.05, 0.15),
            mouth_dy: rng.uniform_in(0.35, 0.55),
            mouth_half_width: rng.uniform_in(0.25, 0.45),
            mouth_thickness: rng.uniform_in(0.015, 0.03),
            mouth_curve: rng.uniform_in(0.0, 0.04),
        }
    }
}

/// Render a face from explicit parameters. Deterministic.
pub fn synth_face_with_params(n_h: usize, n_w: usize, p: &FaceParams) -> Image {
    assert!(n_h >= 16 && n_w >= 16, "synth_face requires at least 16x16");
    let (top, bottom) = BACKGROUND_PALETTES[p.background % BACKGROUND_PALETTES.len()];
    let mut img = Image::zeros(n_h, n_w);
    let (fw, fh) = (n_w as f64, n_h as f64);
    let (cx, cy) = (p.cx * fw, p.cy * fh);
    let (a, b) = (p.ax * fw, p.ay * fh);
    let eye_r = p.eye_radius * fw.min(fh);
    let eye_y = cy - p.eye_dy * b;
    let eye_x = [cx - p.eye_dx * a, cx + p.eye_dx * a];
    let mouth_y = cy + p.mouth_dy * b;
    let mouth_hw = p.mouth_half_width * a;
    let mouth_t = p.mouth_thickness * fh;
    for i in 0..n_h {
        let t = i as f64 / (n_h - 1).max(1) as f64;
        let bg = [
            top[0] + t * (bottom[0] - top[0]),
            top[1] + t * (bottom[1] - top[1]),
            top[2] + t * (bottom[2] - top[2]),
        ];
        for j in 0..n_w {
            let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
            let nx = (px - cx) / a;
            let ny = (py - cy) / b;
            let rho2 = nx * nx + ny * ny;
            let mut rgb = bg;
            if rho2 <= 1.0 {
                // Skin with gentle radial shading toward the outline.
                let shade = 1.0 - 0.15 * rho2;
                rgb = [p.skin[0] * shade, p.skin[1] * shade, p.skin[2] * shade];
                for ex in eye_x {
                    let d2 = (px - ex) * (px - ex) + (py - eye_y) * (py - eye_y);
                    if d2 <= eye_r * eye_r {
                        rgb = [p.eye_shade, p.eye_shade, p.eye_shade];
                    }
                }
                let mx = px - cx;
                if mx.abs() <= mouth_hw {
                    let arc = mouth_y + p.mouth_curve * fh * (mx / mouth_hw) * (mx / mouth_hw);
                    if (py - arc).abs() <= mouth_t {
                        rgb = [0.55, 0.18, 0.20];
                    }
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                img.set(c, i, j, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Sample face parameters from `rng` and render. Same rng state → identical
/// image, bit for bit.
pub fn synth_face(rng: &mut Rng, n_h: usize, n_w: usize) -> Image {
    let params = FaceParams::sample(rng);
    synth_face_with_params(n_h, n_w, &params)
}

// ---------------------------------------------------------------------------
// PPM I/O
// ---------------------------------------------------------------------------

/// Encode as binary PPM (P6, 8-bit). Values are clamped to [0,1] and rounded
/// to [0,255].
pub fn encode_ppm(x: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", x.width(), x.height()).into_bytes();
    for i in 0..x.height() {
        for j in 0..x.width() {
            for c in 0..CHANNELS {
                out.push((x.get(c, i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

struct PpmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PpmCursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::PpmParse { offset: self.pos, message: message.into() }
    }

    /// Skip whitespace and `#` comments (to end of line).
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_int(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected an ASCII integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits are utf8")
            .parse()
            .map_err(|e| self.err(format!("integer out of range: {e}")))
    }
}

/// Decode a binary PPM (P6, 8-bit, maxval 255).
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut cur = PpmCursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(cur.err("unsupported magic, expected P6"));
    }
    cur.pos = 2;
    let width = cur.read_int()?;
    let height = cur.read_int()?;
    let maxval = cur.read_int()?;
    if maxval != 255 {
        return Err(cur.err(format!("unsupported maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("missing whitespace after maxval"));
    }
    cur.pos += 1;
    let expected = width * height * CHANNELS;
    let actual = bytes.len() - cur.pos;
    if actual < expected {
        return Err(cur.err(format!("truncated payload: expected {expected} bytes, found {actual}")));
    }
    let payload = &bytes[cur.pos..cur.pos + expected];
    let mut img = Image::zeros(height, width);
    for i in 0..height {
        for j in 0..width {
            for c in 0..CHANNELS {
                let v = payload[(i * width + j) * CHANNELS + c] as f64 / 255.0;
                img.set(c, i, j, v);
            }
        }
    }
    Ok(img)
}

pub fn write_image(x: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(x))?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_ppm(&std::fs::read(path)?)
}
