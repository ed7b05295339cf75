//! Two-metric cost model.
//!
//! `sequential_depth_units` counts layers traversed per forward pass no
//! matter how many positions the pass covers; it is the latency proxy, so a
//! parallel verification pass over a whole draft costs the same as one token.
//! `position_layer_units` counts layers times positions and stands in for
//! compute. Prefill is tracked separately and excluded from throughput.

use serde::{Deserialize, Serialize};

use crate::decode::DecodeTrace;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Draft,
    IntermediateVerify,
    TargetVerify,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::Prefill,
        Phase::Draft,
        Phase::IntermediateVerify,
        Phase::TargetVerify,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub sequential_depth_units: u64,
    pub position_layer_units: u64,
    pub pass_count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    phases: [PhaseCost; 4],
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accounts one forward pass over `layers` layers and `positions`
    /// positions. Empty passes are ignored.
    pub fn record_pass(&mut self, phase: Phase, layers: usize, positions: usize) {
        if layers == 0 || positions == 0 {
            return;
        }
        let p = &mut self.phases[phase.index()];
        p.sequential_depth_units += layers as u64;
        p.position_layer_units += (layers * positions) as u64;
        p.pass_count += 1;
    }

    pub fn phase(&self, phase: Phase) -> PhaseCost {
        self.phases[phase.index()]
    }

    fn sum(&self, include_prefill: bool, f: impl Fn(&PhaseCost) -> u64) -> u64 {
        Phase::ALL
            .iter()
            .filter(|&&p| include_prefill || p != Phase::Prefill)
            .map(|&p| f(&self.phases[p.index()]))
            .sum()
    }

    /// Decode-time latency proxy (prefill excluded).
    pub fn sequential_units(&self) -> u64 {
        self.sum(false, |p| p.sequential_depth_units)
    }

    /// Decode-time compute proxy (prefill excluded).
    pub fn position_layer_units(&self) -> u64 {
        self.sum(false, |p| p.position_layer_units)
    }

    pub fn total_sequential_units(&self) -> u64 {
        self.sum(true, |p| p.sequential_depth_units)
    }

    pub fn total_position_layer_units(&self) -> u64 {
        self.sum(true, |p| p.position_layer_units)
    }

    pub fn pass_count(&self) -> u64 {
        self.sum(true, |p| p.pass_count)
    }

    pub fn merge(&mut self, other: &CostLedger) {
        for (a, b) in self.phases.iter_mut().zip(&other.phases) {
            a.sequential_depth_units += b.sequential_depth_units;
            a.position_layer_units += b.position_layer_units;
            a.pass_count += b.pass_count;
        }
    }
}

/// Rebuilds the ledger of a decode from its trace alone.
pub fn ledger_from_trace(trace: &DecodeTrace) -> CostLedger {
    let mut ledger = CostLedger::new();
    for pass in trace.events.iter().flat_map(|e| e.passes()) {
        ledger.record_pass(pass.phase, pass.layers.len(), pass.positions.len());
    }
    ledger
}

/// Target verification cost per pass over draft cost per token. A
/// verification pass covers `positions_per_verify` positions in parallel,
/// which leaves its sequential depth unchanged, so the ratio is
/// `target_layers / draft_layers`. This is a structural proxy for the
/// verification wall, not a latency prediction.
pub fn verification_wall_ratio(
    draft_layers: usize,
    target_layers: usize,
    positions_per_verify: usize,
) -> Result<f64> {
    if draft_layers == 0 || target_layers == 0 || positions_per_verify == 0 {
        return Err(Error::UndefinedRatio(
            "layer and position counts must be positive".into(),
        ));
    }
    let mut draft = CostLedger::new();
    draft.record_pass(Phase::Draft, draft_layers, 1);
    let mut verify = CostLedger::new();
    verify.record_pass(Phase::TargetVerify, target_layers, positions_per_verify);
    Ok(verify.sequential_units() as f64 / draft.sequential_units() as f64)
}

/// `(subject tokens / subject units) / (baseline tokens / baseline units)`
/// using decode-time sequential units.
pub fn relative_throughput(
    subject: (&CostLedger, usize),
    baseline: (&CostLedger, usize),
) -> Result<f64> {
    let (s_ledger, s_tokens) = subject;
    let (b_ledger, b_tokens) = baseline;
    if b_tokens == 0 {
        return Err(Error::UndefinedRatio("baseline committed no tokens".into()));
    }
    if s_ledger.sequential_units() == 0 || b_ledger.sequential_units() == 0 {
        return Err(Error::UndefinedRatio("ledger has zero decode cost".into()));
    }
    let s = s_tokens as f64 / s_ledger.sequential_units() as f64;
    let b = b_tokens as f64 / b_ledger.sequential_units() as f64;
    Ok(s / b)
}

/// Aggregated outcome of one or more decodes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub committed_tokens: usize,
    pub sequential_units: u64,
    pub position_layer_units: u64,
    pub tokens_per_sequential_unit: f64,
    pub relative_throughput: Option<f64>,
    pub acceptance_rate_intermediate: Option<f64>,
    pub acceptance_rate_target: Option<f64>,
    pub flushed_tokens: usize,
}

impl ThroughputReport {
    pub fn from_ledger(ledger: &CostLedger, committed_tokens: usize) -> Self {
        let seq = ledger.sequential_units();
        Self {
            committed_tokens,
            sequential_units: seq,
            position_layer_units: ledger.position_layer_units(),
            tokens_per_sequential_unit: if seq == 0 {
                0.0
            } else {
                committed_tokens as f64 / seq as f64
            },
            ..Self::default()
        }
    }

    pub fn with_baseline(mut self, baseline: &CostLedger, baseline_tokens: usize, ledger: &CostLedger) -> Result<Self> {
        self.relative_throughput = Some(relative_throughput(
            (ledger, self.committed_tokens),
            (baseline, baseline_tokens),
        )?);
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_pass_arithmetic() {
        let mut l = CostLedger::new();
        l.record_pass(Phase::Draft, 4, 1);
        assert_eq!(l.phase(Phase::Draft).sequential_depth_units, 4);
        assert_eq!(l.phase(Phase::Draft).position_layer_units, 4);
        l.record_pass(Phase::TargetVerify, 24, 5);
        assert_eq!(l.phase(Phase::TargetVerify).sequential_depth_units, 24);
        assert_eq!(l.phase(Phase::TargetVerify).position_layer_units, 120);
        assert_eq!(l.pass_count(), 2);
    }

    #[test]
    fn vanilla_ten_tokens() {
        let mut l = CostLedger::new();
        for _ in 0..10 {
            l.record_pass(Phase::TargetVerify, 32, 1);
        }
        assert_eq!(l.sequential_units(), 320);
    }

    #[test]
    fn prefill_excluded_from_decode_totals() {
        let mut l = CostLedger::new();
        l.record_pass(Phase::Prefill, 32, 10);
        l.record_pass(Phase::Draft, 4, 1);
        assert_eq!(l.sequential_units(), 4);
        assert_eq!(l.total_sequential_units(), 36);
        assert_eq!(l.total_position_layer_units(), 324);
    }

    #[test]
    fn wall_ratio() {
        assert_eq!(verification_wall_ratio(4, 32, 7).unwrap(), 8.0);
        assert_eq!(verification_wall_ratio(12, 12, 3).unwrap(), 1.0);
        let mut prev = 0.0;
        for t in 5..100 {
            let r = verification_wall_ratio(4, t, 6).unwrap();
            assert!(r > prev);
            prev = r;
        }
        assert!(verification_wall_ratio(0, 4, 1).is_err());
    }

    #[test]
    fn relative_throughput_identity_and_errors() {
        let mut l = CostLedger::new();
        l.record_pass(Phase::Draft, 3, 2);
        assert_eq!(relative_throughput((&l, 5), (&l, 5)).unwrap(), 1.0);
        assert!(relative_throughput((&l, 5), (&l, 0)).is_err());
        assert!(relative_throughput((&CostLedger::new(), 5), (&l, 5)).is_err());
    }
}
