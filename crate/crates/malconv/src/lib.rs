//! A raw-byte executable classifier built from scratch.
//!
//! The model eats whole files as byte sequences: a learned byte embedding
//! feeds two parallel strided 1D convolutions, one of which gates the other
//! through a sigmoid; global temporal max pooling collapses the time axis,
//! and a small fully connected head produces benign/malicious logits. All
//! forward and backward passes are written by hand and verified against
//! central finite differences.
//!
//! Around the model:
//! * [`pe`] parses the Windows PE layout far enough to attribute file
//!   offsets to named sections, and builds minimal valid PE files.
//! * [`corpus`] generates labeled synthetic PE corpora with planted byte
//!   motifs, and loads `path,label` manifests.
//! * [`train`] holds the SGD training loop (Nesterov momentum, exponential
//!   learning-rate decay, DeCov regularization), evaluation metrics, triage
//!   ranking, and checkpoint persistence.
//! * [`explain`] computes sparse class-activation maps and maps them onto
//!   PE sections.
//! * [`diagnostics`] collects pre-gating convolution responses and emits
//!   kernel density estimates for comparison against a unit Gaussian.

pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod explain;
pub mod model;
pub mod pe;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
