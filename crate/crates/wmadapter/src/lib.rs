//! Watermarking toolkit for latent image decoders.
//!
//! A lightweight contextual adapter attaches to the hook sites of a latent
//! decoder and imprints arbitrary 48-bit keys during decoding. The crate
//! ships the full desk-scale machinery around it: a trainable toy
//! autoencoder host, HiDDeN-style post-hoc pretraining (the knowledge-
//! transfer source), the composite training objective, stage-1 training and
//! the three stage-2 finetuning strategies, deterministic robustness
//! attacks, and the evaluation/tracing harness.

pub mod adapter;
pub mod attacks;
pub mod config;
pub mod data;
pub mod decoder;
pub mod djpeg;
pub mod error;
pub mod eval;
pub mod images;
pub mod io;
pub mod keys;
pub mod losses;
pub mod nn;
pub mod pipelines;
pub mod posthoc;

pub use adapter::{AdapterVariant, Fuser, FuserSpec, WmAdapter};
pub use attacks::{apply_attack, AttackKind, AttackSpec};
pub use config::RunConfig;
pub use data::{Corpus, CorpusSpec};
pub use decoder::{DecoderConfig, HookSite, HookedDecoder, InjectorSet, ToyDecoder, ToyEncoder};
pub use error::{Error, Result};
pub use eval::{bit_accuracy, fid, match_key, psnr, ssim, UserPool};
pub use images::{ImageBatch, LatentBatch};
pub use keys::{random_key, BitLogits, WatermarkKey, KEY_BITS};
pub use losses::{LossReport, LossWeights, Stage};
pub use pipelines::{FinetuneStrategy, InferenceBundle, InferenceSession, StrategyTag, TrainState};
pub use posthoc::{PosthocConfig, WmEncoder, WmExtractor};
