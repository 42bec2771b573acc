//! Few-shot segmentation with prototype matching and recurrent mask refinement.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`] — a minimal differentiable-tensor substrate (dense tensors,
//!   an eager autodiff graph, and a finite-difference gradient checker);
//! * [`data`] — a synthetic multi-class shape corpus, episodic sampling, and
//!   moment-based affine pre-alignment;
//! * [`encoder`], [`cre`], [`proto`], [`refine`] — the model: a small conv
//!   encoder, context-relation feature encoding, masked-average prototypes
//!   with a cosine head, and the recurrent mask-refinement loop;
//! * [`train`], [`metrics`] — the episodic training loop with Adam, and
//!   Dice-score evaluation protocols;
//! * [`checkpoint`] — manifest + raw-payload model serialization.

pub mod checkpoint;
pub mod cre;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod numerics;
pub mod proto;
pub mod refine;
pub mod train;

pub use error::Error;

/// Convenient crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
