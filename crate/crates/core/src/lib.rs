//! Hierarchical speculative decoding over early-exit transformer backends.
//!
//! A draft exit layer proposes tokens, an intermediate exit layer tentatively
//! accepts or early-rejects them, and the full model periodically verifies the
//! tentative buffer. Under greedy acceptance the committed output is identical
//! to plain autoregressive decoding at the final layer.
//!
//! Two backends are provided: [`ToyTransformer`], a small seeded decoder-only
//! transformer with real KV tensors, and [`SyntheticModel`], a closed-form
//! layered oracle with a controllable per-layer agreement profile. Every layer
//! evaluation is accounted in a [`CostLedger`].

pub mod cost;
pub mod decode;
mod error;
pub mod hash;
pub mod model;
pub mod state;
pub mod synthetic;

pub use cost::{
    ledger_from_trace, relative_throughput, verification_wall_ratio, CostLedger, Phase,
    PhaseCost, ThroughputReport,
};
pub use decode::{
    generate_next, hispec_decode, hispec_decode_with, leading_substring_verify,
    selfspec_decode, selfspec_decode_with, top_predictions, vanilla_decode,
    default_exit_layers, AcceptancePolicy, BonusMode, DEFAULT_DRAFT_LEN, DEFAULT_WINDOW, DecodeObserver, DecodeOptions,
    DecodeOutput, DecodeSession, DecodeTrace, HiSpecConfig, PassRecord, Provenance,
    SelfSpecConfig, TentativeBuffer, TraceEvent, TraceStats, VerifyOutcome, VerifyPoint,
};
pub use error::{Error, Result};
pub use model::{
    HiddenState, LayerRange, ModelBackend, ModelConfig, TokenDistribution, TokenId,
    ToyTransformer,
};
pub use state::{consistency_check, ConsistencyReport, LayerDiscrepancy, LayeredState};
pub use synthetic::{
    calibrate_preset, AgreementProfile, LayerCoupling, SyntheticModel, SyntheticModelSpec,
    PRESET_NAMES,
};
