//! Single-utterance test-time adaptation for CTC sequence models.
//!
//! A source model trained on clean synthetic speech-like features is
//! adapted, one utterance at a time and without labels, by minimizing a
//! temperature-smoothed combination of per-frame entropy (blank-dominant
//! frames excluded) and class confusion, updating only a selected subset of
//! parameters and resetting to the source weights between utterances.
//!
//! Crate layout:
//! - [`graph`]: reverse-mode differentiation over dense matrices
//! - [`model`]: the toy CTC acoustic model and source training
//! - [`losses`]: entropy / class-confusion / CTC objectives
//! - [`adapt`]: the episodic adaptation loop and AdamW
//! - [`eval`]: greedy CTC decoding and WER/WERR
//! - [`corpus`]: synthetic corpora with controllable covariate shift
//! - [`harness`]: experiment runs, sweeps, and report files

pub mod adapt;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod vocab;

mod ctc;

pub use adapt::{run_adaptation, sdpl_adapt, suta_adapt, AdaptConfig, AdaptMethod, AdaptTrace};
pub use corpus::{add_gaussian_noise, generate_corpus, load_corpus, save_corpus, CorpusSpec, Utterance};
pub use error::{Error, Result};
pub use eval::{greedy_ctc_decode, wer, werr, Transcript, WerReport};
pub use graph::{Graph, NodeId};
pub use losses::{combined_loss, ctc_loss, mcc_loss, softmax_temperature, CombinedLoss, EntropyNorm, ProbMatrix};
pub use matrix::Matrix;
pub use model::{partition_params, train_source, ModelConfig, ModelState, ParamPartition, BLANK_INDEX};
pub use optim::{adamw_step, AdamWParams, OptState};
