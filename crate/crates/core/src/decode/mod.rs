//! Vanilla, single-level self-speculative, and hierarchical speculative
//! decoding over any [`ModelBackend`].

mod engine;
mod session;
mod trace;

use serde::{Deserialize, Serialize};

use crate::cost::CostLedger;
use crate::error::{Error, Result};
use crate::model::{ModelBackend, TokenId};
use crate::state::LayeredState;

pub use engine::{
    hispec_decode, hispec_decode_with, selfspec_decode, selfspec_decode_with, vanilla_decode,
};
pub use session::{
    generate_next, leading_substring_verify, top_predictions, BonusMode, DecodeSession,
    VerifyOutcome,
};
pub use trace::{
    DecodeTrace, PassRecord, Provenance, TentativeBuffer, TraceEvent, TraceStats,
};

/// Which tokens a verifier accepts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptancePolicy {
    /// Accept only the verifier's argmax. The only lossless mode.
    #[default]
    Greedy,
    /// Accept any of the verifier's `k` highest-logit tokens. Lossy.
    TopK(usize),
}

impl AcceptancePolicy {
    pub fn is_lossless(&self) -> bool {
        matches!(self, AcceptancePolicy::Greedy | AcceptancePolicy::TopK(1))
    }

    /// Clamps `k` to what the backend can distinguish.
    pub(crate) fn effective(self, backend: &dyn ModelBackend) -> Self {
        match self {
            AcceptancePolicy::TopK(k) => {
                let cap = backend.max_top_k().unwrap_or(k).min(backend.vocab_size());
                match k.min(cap) {
                    0 | 1 => AcceptancePolicy::Greedy,
                    k => AcceptancePolicy::TopK(k),
                }
            }
            AcceptancePolicy::Greedy => AcceptancePolicy::Greedy,
        }
    }

    fn validate(&self) -> Result<()> {
        if let AcceptancePolicy::TopK(0) = self {
            return Err(Error::config("acceptance_policy", "top-k needs k >= 1"));
        }
        Ok(())
    }
}

/// Parameters of hierarchical speculative decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiSpecConfig {
    /// Exit layer proposing draft tokens.
    pub draft_layer: usize,
    /// Exit layer tentatively verifying drafts.
    pub verify_layer: usize,
    /// Final layer; must equal the backend depth.
    pub full_layer: usize,
    /// Tokens proposed per draft step.
    pub draft_len: usize,
    /// Tentatively accepted tokens that trigger full-model verification.
    pub window: usize,
    pub policy: AcceptancePolicy,
    pub max_new_tokens: usize,
    pub eos_token: Option<TokenId>,
}

pub const DEFAULT_DRAFT_LEN: usize = 2;
pub const DEFAULT_WINDOW: usize = 4;

/// Default `(draft, intermediate)` exits for a model of `n_layers`: about an
/// eighth and a quarter of the depth, clamped so `1 <= d < i < n_layers`.
pub fn default_exit_layers(n_layers: usize) -> (usize, usize) {
    let verify = n_layers.div_ceil(4).clamp(2, n_layers.saturating_sub(1).max(2));
    let draft = n_layers.div_ceil(8).clamp(1, verify - 1);
    (draft, verify)
}

impl HiSpecConfig {
    pub fn with_defaults(n_layers: usize, max_new_tokens: usize) -> Self {
        let (draft_layer, verify_layer) = default_exit_layers(n_layers);
        Self {
            draft_layer,
            verify_layer,
            full_layer: n_layers,
            draft_len: DEFAULT_DRAFT_LEN,
            window: DEFAULT_WINDOW,
            policy: AcceptancePolicy::Greedy,
            max_new_tokens,
            eos_token: None,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.full_layer != n_layers {
            return Err(Error::config(
                "full_layer",
                format!("full layer {} must equal backend depth {n_layers}", self.full_layer),
            ));
        }
        if !(1 <= self.draft_layer && self.draft_layer < self.verify_layer && self.verify_layer < self.full_layer) {
            return Err(Error::config(
                "layers",
                format!(
                    "need 1 <= L_d < L_i < L_f, got {} / {} / {}",
                    self.draft_layer, self.verify_layer, self.full_layer
                ),
            ));
        }
        if self.draft_len == 0 {
            return Err(Error::config("draft_len", "N_d must be >= 1"));
        }
        if self.window == 0 {
            return Err(Error::config("window", "N_i must be >= 1"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens", "max_new_tokens must be >= 1"));
        }
        self.policy.validate()
    }
}

/// Parameters of single-level early-exit self-speculation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfSpecConfig {
    pub draft_layer: usize,
    pub full_layer: usize,
    pub draft_len: usize,
    pub policy: AcceptancePolicy,
    pub max_new_tokens: usize,
    pub eos_token: Option<TokenId>,
}

impl SelfSpecConfig {
    pub fn new(n_layers: usize, draft_layer: usize, draft_len: usize, max_new_tokens: usize) -> Self {
        Self {
            draft_layer,
            full_layer: n_layers,
            draft_len,
            policy: AcceptancePolicy::Greedy,
            max_new_tokens,
            eos_token: None,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.full_layer != n_layers {
            return Err(Error::config("full_layer", "full layer must equal backend depth"));
        }
        if !(1 <= self.draft_layer && self.draft_layer < self.full_layer) {
            return Err(Error::config("layers", "need 1 <= L_d < L_f"));
        }
        if self.draft_len == 0 {
            return Err(Error::config("draft_len", "N_d must be >= 1"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens", "max_new_tokens must be >= 1"));
        }
        self.policy.validate()
    }
}

/// Where a consistency observer is called relative to full-model verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyPoint {
    /// State holds the committed context plus every tentative position.
    BeforeTarget,
    /// Verification, pruning and commit are done.
    AfterTarget,
}

/// Hook invoked at every full-model verification boundary.
pub trait DecodeObserver {
    fn at_target_boundary(
        &mut self,
        point: VerifyPoint,
        backend: &dyn ModelBackend,
        state: &LayeredState,
        tokens: &[TokenId],
    );
}

impl DecodeObserver for () {
    fn at_target_boundary(&mut self, _: VerifyPoint, _: &dyn ModelBackend, _: &LayeredState, _: &[TokenId]) {}
}

impl<F> DecodeObserver for F
where
    F: FnMut(VerifyPoint, &dyn ModelBackend, &LayeredState, &[TokenId]),
{
    fn at_target_boundary(
        &mut self,
        point: VerifyPoint,
        backend: &dyn ModelBackend,
        state: &LayeredState,
        tokens: &[TokenId],
    ) {
        self(point, backend, state, tokens)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Count computations per (layer, position, context) in the state.
    pub record_computes: bool,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// Newly generated tokens, prompt excluded.
    pub tokens: Vec<TokenId>,
    pub trace: DecodeTrace,
    pub ledger: CostLedger,
    /// Final state, pruned back to the committed sequence.
    pub state: LayeredState,
}

impl DecodeOutput {
    pub fn stats(&self) -> TraceStats {
        self.trace.stats()
    }
}
