//! Desk-scale simulator and attack library for eavesdropping on joint
//! source-channel coded image transmission over a MIMO Rayleigh wiretap
//! channel.
//!
//! The crate is organized around the attack pipeline:
//!
//! - [`numerics`] — complex linear algebra, seeded RNG, finite-difference
//!   gradient oracle.
//! - [`image`] — image tensors, total variation, reference metrics, the toy
//!   identity embedding, synthetic sources, and PPM I/O.
//! - [`semcom`] — differentiable semantic encoders with power normalization
//!   and the legitimate receiver's decoder.
//! - [`channel`] — MIMO Rayleigh block fading, AWGN, and ZF equalization.
//! - [`inversion`] — the joint image/channel inversion loss, its gradients,
//!   and a resumable Adam optimizer with three update modes.
//! - [`session`] — session lifecycle: checkpoints, rollback, stagnation
//!   detection, branching, and the shared candidate pool.
//! - [`wire`] — the JSON wire protocol shared by the judge, generator, and
//!   policy clients, plus scripted and heuristic mocks.
//! - [`perception`] — no-reference quality scoring, structured visual
//!   evidence, and score fusion.
//! - [`refinement`] — attribute description, restoration prompts, generative
//!   refinement, and consistency-enforcing re-anchoring.
//! - [`orchestrator`] — the closed-loop attack controller and its policies.
//! - [`metrics`] — post-hoc evaluation against ground truth (never visible
//!   to the attacker).
//! - [`harness`] — experiment configuration, baselines, SNR sweeps, and CSV
//!   output.

pub mod channel;
pub mod error;
pub mod harness;
pub mod image;
pub mod inversion;
pub mod metrics;
pub mod numerics;
pub mod orchestrator;
pub mod perception;
pub mod refinement;
pub mod semcom;
pub mod session;
pub mod wire;

pub use error::{Error, Result};
