//! Style-conditioned CTC text line recognition.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] - dense tensors plus a define-by-run reverse-mode tape
//! * [`ctc`] - CTC loss (log-domain forward/backward), greedy decoding, and a
//!   brute-force path-enumeration reference
//! * [`net`] - the convolutional + multiscale BLSTM recognizer
//! * [`tsb`] - transcription style block: per-document embeddings driving an
//!   AdaIN head
//! * [`synth`] - deterministic synthetic line-image dataset generator where
//!   "styles" are alphabet permutations
//! * [`train`] - Adam training loop, evaluation, checkpoints
//! * [`adapt`] - L-BFGS few-shot estimation of a style embedding for an
//!   unseen document
//! * [`analysis`] - substitution statistics, embedding-space PCA/MDS, and
//!   embedding-distance vs output-distance correlation
//!
//! Everything is deterministic given seeds: same inputs, same seeds, same
//! thread count or not, byte-identical outputs.

pub mod adapt;
pub mod analysis;
pub mod ctc;
pub mod error;
pub mod net;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod tsb;

pub use error::{Error, Result};
