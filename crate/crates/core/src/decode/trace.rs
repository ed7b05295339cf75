use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::cost::Phase;
use crate::model::{LayerRange, TokenId};

/// One forward pass: `layers` evaluated over `positions`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassRecord {
    pub phase: Phase,
    pub layers: LayerRange,
    pub positions: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Prefill {
        passes: Vec<PassRecord>,
    },
    /// Plain autoregressive steps at a single exit layer.
    Generate {
        layer: usize,
        passes: Vec<PassRecord>,
        tokens: Vec<TokenId>,
    },
    /// Draft tokens `S` proposed by the draft layer.
    DraftStep {
        start_position: usize,
        passes: Vec<PassRecord>,
        tokens: Vec<TokenId>,
    },
    /// Intermediate verification: accepted prefix and the optional verifier
    /// token emitted at the first mismatch.
    IntermediateVerify {
        passes: Vec<PassRecord>,
        proposed: usize,
        accepted: Vec<TokenId>,
        bonus: Option<TokenId>,
    },
    /// Full-model verification of the tentative buffer (or, without an
    /// intermediate level, of the draft directly).
    TargetVerify {
        passes: Vec<PassRecord>,
        candidates: usize,
        accepted: Vec<TokenId>,
        bonus: Option<TokenId>,
        flushed: usize,
    },
    Commit {
        tokens: Vec<TokenId>,
    },
}

impl TraceEvent {
    pub fn passes(&self) -> &[PassRecord] {
        match self {
            TraceEvent::Prefill { passes }
            | TraceEvent::Generate { passes, .. }
            | TraceEvent::DraftStep { passes, .. }
            | TraceEvent::IntermediateVerify { passes, .. }
            | TraceEvent::TargetVerify { passes, .. } => passes,
            TraceEvent::Commit { .. } => &[],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub events: Vec<TraceEvent>,
}

/// Counts derived from a trace.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStats {
    pub drafted: usize,
    pub intermediate_proposed: usize,
    pub intermediate_accepted: usize,
    /// Draft tokens the intermediate verifier actually judged: the accepted
    /// prefix plus the first rejected token.
    pub intermediate_evaluated: usize,
    pub intermediate_bonus: usize,
    pub target_candidates: usize,
    pub target_evaluated: usize,
    pub target_accepted: usize,
    pub target_passes: usize,
    pub target_mismatches: usize,
    pub flushed: usize,
}

impl TraceStats {
    pub fn merge(&mut self, o: &TraceStats) {
        self.drafted += o.drafted;
        self.intermediate_proposed += o.intermediate_proposed;
        self.intermediate_accepted += o.intermediate_accepted;
        self.intermediate_evaluated += o.intermediate_evaluated;
        self.intermediate_bonus += o.intermediate_bonus;
        self.target_candidates += o.target_candidates;
        self.target_evaluated += o.target_evaluated;
        self.target_accepted += o.target_accepted;
        self.target_passes += o.target_passes;
        self.target_mismatches += o.target_mismatches;
        self.flushed += o.flushed;
    }

    /// Fraction of judged draft tokens the intermediate verifier accepted.
    /// Tokens behind a rejection are discarded unjudged and not counted.
    pub fn intermediate_acceptance(&self) -> Option<f64> {
        (self.intermediate_evaluated > 0)
            .then(|| self.intermediate_accepted as f64 / self.intermediate_evaluated as f64)
    }

    /// Fraction of judged tentative tokens the full model accepted. Tokens
    /// flushed behind a mismatch are counted in `flushed` instead.
    pub fn target_acceptance(&self) -> Option<f64> {
        (self.target_evaluated > 0)
            .then(|| self.target_accepted as f64 / self.target_evaluated as f64)
    }
}

impl DecodeTrace {
    pub(crate) fn push(&mut self, event: TraceEvent) {
        self.events.push(event);
    }

    /// Concatenation of all committed tokens.
    pub fn committed_tokens(&self) -> Vec<TokenId> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Commit { tokens } => Some(tokens.as_slice()),
                _ => None,
            })
            .flatten()
            .copied()
            .collect()
    }

    pub fn stats(&self) -> TraceStats {
        let mut s = TraceStats::default();
        for e in &self.events {
            match e {
                TraceEvent::DraftStep { tokens, .. } => s.drafted += tokens.len(),
                TraceEvent::IntermediateVerify {
                    proposed,
                    accepted,
                    bonus,
                    ..
                } => {
                    s.intermediate_proposed += proposed;
                    s.intermediate_accepted += accepted.len();
                    s.intermediate_evaluated += accepted.len() + usize::from(bonus.is_some());
                    s.intermediate_bonus += usize::from(bonus.is_some());
                }
                TraceEvent::TargetVerify {
                    candidates,
                    accepted,
                    bonus,
                    flushed,
                    ..
                } => {
                    s.target_passes += 1;
                    s.target_candidates += candidates;
                    s.target_accepted += accepted.len();
                    s.target_evaluated += accepted.len() + usize::from(bonus.is_some());
                    s.target_mismatches += usize::from(bonus.is_some());
                    s.flushed += flushed;
                }
                _ => {}
            }
        }
        s
    }
}

/// Where a tentatively accepted token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    DraftAcceptedByIntermediate,
    EmittedByIntermediate,
}

/// Tokens accepted by the intermediate verifier and not yet committed by the
/// full model.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TentativeBuffer {
    entries: Vec<(TokenId, Provenance)>,
}

impl TentativeBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, token: TokenId, provenance: Provenance) {
        self.entries.push((token, provenance));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries.iter().map(|(t, _)| *t)
    }

    pub fn entries(&self) -> &[(TokenId, Provenance)] {
        &self.entries
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.entries.iter().any(|(t, _)| *t == token)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}
