//! Latent-space n-gram conditional memory for small causal decoders.
//!
//! Hidden states are discretized into sign bits, packed into per-route
//! symbols, and the last `n` symbols of each route address a learned table.
//! Retrieved rows are gated against the current hidden state and added back
//! to the residual stream. Routing is trained with a surrogate gradient.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;
pub mod codec;
pub mod memory;
pub mod surrogate;
pub mod readout;
pub mod params;
pub mod lngram;
pub mod model;
pub mod train;
pub mod corpus;
pub mod checkpoint;
pub mod analysis;
pub mod bench;
pub mod config;
pub mod experiment;
pub mod gradcheck;

pub use codec::{discretize, pack_routes, BitGrid, CodecParams, SymbolGrid};
pub use error::{LngramError, Result};
pub use lngram::{lngram_forward, LngramCache, LngramConfig, LngramParams, LngramStepState};
pub use model::{Decoder, DecoderConfig, DecodeSession, LayerStates};
pub use memory::{compute_address, retrieve_all, MemoryTable, MultiTableBank, TableAddress, TableResidency};
pub use numerics::{ProbVector, Real, RealMatrix};
pub use params::{ParamCounts, ParamGroup};
pub use readout::{GateMode, GateTrace, ReadoutParams};
pub use surrogate::{backprop_routing, surrogate_grad, SurrogateConfig, SurrogateMode};
pub use config::{config_hash, RunConfig};
pub use corpus::{gen_corpus, Corpus, CorpusSpec, EntitySpan};
pub use train::{eval_ppl, train_loop, PplReport, StepLog, TrainConfig};
pub use experiment::{matched_baseline, run_toy, ToyConfig, ToyReport, ToyRun};
