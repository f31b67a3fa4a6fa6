//! Spatially-conditioned keyword spotting for small microphone arrays.
//!
//! The crate covers the full pipeline: WAV and manifest I/O, STFT and
//! filterbank features, image-source room simulation, a GSC beamformer
//! baseline, a small reverse-mode autodiff engine, the keyword models,
//! training, streaming inference and evaluation.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod gsc;
pub mod net;
pub mod pipeline;
pub mod roomsim;
pub mod stream;
pub mod synth;
pub mod tensor;
pub mod train;

pub use audio::{AudioClip, DatasetManifest, ManifestEntry, RenderRecord, Split};
pub use dsp::{ComplexSpectrogram, FbankConfig, StftConfig};
pub use error::{Error, Result};
pub use pipeline::{ExperimentConfig, System, SystemSpec};
pub use roomsim::{ArrayGeometry, RoomSpec, SceneSpec, ZoneScheme};
