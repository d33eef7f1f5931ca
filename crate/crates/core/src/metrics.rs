//! Post-hoc evaluation against the ground-truth source: reference metrics,
//! the surrogate identity similarity, and per-cell aggregation with binomial
//! confidence intervals.
//!
//! Everything here compares a reconstruction to the source image, so nothing
//! here is reachable from the attack loop's types — evaluation is strictly
//! for the experiment harness. The "success" column is a *surrogate
//! eavesdropping success rate* built on the toy embedding; it claims no
//! face-recognition validity.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{cosine_sim, embed, ms_ssim, psnr, Image, ToyEmbedding};

/// Cosine similarity at or above which a trial counts as a successful
/// eavesdrop.
pub const SUCCESS_COSINE_THRESHOLD: f64 = 0.7;

/// Two-sided 95% normal quantile used by the Wilson interval.
pub const WILSON_Z: f64 = 1.959964;

/// Embedding seed shared by all evaluations, so cosines are comparable
/// across methods and runs.
pub const EVAL_EMBEDDING_SEED: u64 = 0xE0;

/// The evaluator's embedding instance.
pub fn eval_embedding() -> ToyEmbedding {
    ToyEmbedding::default_from_seed(EVAL_EMBEDDING_SEED)
}

/// Reference metrics of one reconstruction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub psnr: f64,
    pub ms_ssim: f64,
    pub cosine: f64,
    pub success: bool,
}

/// Compare a reconstruction against the source. Deterministic; errors on a
/// dimension mismatch. An exact match reports the capped PSNR and succeeds.
pub fn evaluate(x_source: &Image, x_hat: &Image, embedding: &ToyEmbedding) -> Result<EvalMetrics> {
    if !x_source.same_dims(x_hat) {
        return Err(Error::DimensionMismatch(format!(
            "evaluate: source {}x{} vs reconstruction {}x{}",
            x_source.height(),
            x_source.width(),
            x_hat.height(),
            x_hat.width()
        )));
    }
    let psnr = psnr(x_source, x_hat)?;
    let ms_ssim = ms_ssim(x_source, x_hat)?;
    let cosine = cosine_sim(&embed(x_source, embedding), &embed(x_hat, embedding));
    Ok(EvalMetrics { psnr, ms_ssim, cosine, success: cosine >= SUCCESS_COSINE_THRESHOLD })
}

/// One experiment row; the field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub method: String,
    pub snr_db: f64,
    pub trial: u64,
    pub seed: u64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub cosine: f64,
    pub success: bool,
    pub steps: u64,
    pub wall_ms: u64,
    /// "ok" or "failed".
    pub status: String,
    /// Failure diagnostics; empty on success.
    pub reason: String,
}

impl TrialReport {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Per-(method, SNR) summary over completed trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub snr_db: f64,
    pub count: u64,
    pub mean_psnr: f64,
    pub mean_ms_ssim: f64,
    pub mean_cosine: f64,
    /// Surrogate eavesdropping success rate.
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Wilson score interval for k successes out of n at normal quantile z. The
/// boundary cases are pinned exactly: k = 0 has a 0 lower bound and k = n a
/// 1 upper bound.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    assert!(n > 0, "wilson interval needs at least one observation");
    assert!(k <= n, "successes exceed observations");
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    let low = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if k == n { 1.0 } else { (center + half).min(1.0) };
    (low, high)
}

/// Group completed trials by (method, SNR) and summarize each cell. Cells
/// present in the input but containing no completed trial are omitted, with
/// a warning string per omission. Input order never matters: rows are
/// re-sorted internally before any accumulation.
pub fn aggregate(reports: &[TrialReport]) -> (Vec<CellSummary>, Vec<String>) {
    // Stable cell keys: method name plus the exact bits of the SNR.
    let mut cells: Vec<(String, u64)> = reports
        .iter()
        .map(|r| (r.method.clone(), r.snr_db.to_bits()))
        .collect();
    cells.sort();
    cells.dedup();

    let mut summaries = Vec::new();
    let mut warnings = Vec::new();
    for (method, snr_bits) in cells {
        let snr_db = f64::from_bits(snr_bits);
        let mut rows: Vec<&TrialReport> = reports
            .iter()
            .filter(|r| r.method == method && r.snr_db.to_bits() == snr_bits && r.is_ok())
            .collect();
        if rows.is_empty() {
            warnings.push(format!(
                "cell ({method}, {snr_db} dB) has no completed trials; omitted"
            ));
            continue;
        }
        rows.sort_by_key(|r| (r.trial, r.seed));
        let n = rows.len() as u64;
        let k = rows.iter().filter(|r| r.success).count() as u64;
        let mean = |f: &dyn Fn(&TrialReport) -> f64| -> f64 {
            rows.iter().map(|r| f(r)).sum::<f64>() / n as f64
        };
        let (ci_low, ci_high) = wilson_interval(k, n, WILSON_Z);
        summaries.push(CellSummary {
            method,
            snr_db,
            count: n,
            mean_psnr: mean(&|r| r.psnr),
            mean_ms_ssim: mean(&|r| r.ms_ssim),
            mean_cosine: mean(&|r| r.cosine),
            success_rate: k as f64 / n as f64,
            ci_low,
            ci_high,
        });
    }
    (summaries, warnings)
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Write trial rows with a header. Floats serialize as shortest
/// round-trippable decimals, so reading the file back is lossless.
pub fn write_reports_csv<W: Write>(w: W, reports: &[TrialReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in reports {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_reports_csv<R: Read>(r: R) -> Result<Vec<TrialReport>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row.map_err(csv_err)?);
    }
    Ok(out)
}

pub fn write_summaries_csv<W: Write>(w: W, cells: &[CellSummary]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for c in cells {
        out.serialize(c).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
