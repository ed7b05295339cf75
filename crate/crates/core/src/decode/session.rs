use std::ops::Range;

use crate::cost::{CostLedger, Phase};
use crate::error::{Error, Result};
use crate::model::{HiddenState, LayerRange, ModelBackend, TokenDistribution, TokenId};
use crate::state::LayeredState;

use super::trace::{DecodeTrace, PassRecord, TraceEvent};
use super::{AcceptancePolicy, DecodeOptions};

/// Tokens a verifier accepts at one position: the argmax under greedy, the
/// `k` highest-logit tokens under top-k (ties to the lowest id).
pub fn top_predictions(dist: &TokenDistribution, policy: AcceptancePolicy) -> Vec<TokenId> {
    match policy {
        AcceptancePolicy::Greedy => vec![dist.argmax()],
        AcceptancePolicy::TopK(k) => {
            let mut ranked = dist.ranked();
            ranked.truncate(k.max(1));
            ranked
        }
    }
}

/// One decode over a backend: the token sequence (committed context plus any
/// tentative tokens), the layered state, and the cost accounting.
pub struct DecodeSession<'a> {
    backend: &'a dyn ModelBackend,
    state: LayeredState,
    seq: Vec<TokenId>,
    ledger: CostLedger,
    trace: DecodeTrace,
    pending: Vec<PassRecord>,
}

impl<'a> DecodeSession<'a> {
    /// `exit_layers` are the layers whose hidden states are buffered so later
    /// passes can resume from them.
    pub fn new(
        backend: &'a dyn ModelBackend,
        prompt: &[TokenId],
        exit_layers: &[usize],
        options: DecodeOptions,
    ) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::config("prompt", "prompt must contain at least one token"));
        }
        if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= backend.vocab_size()) {
            return Err(Error::config(
                "prompt",
                format!("token id {bad} outside vocabulary of {}", backend.vocab_size()),
            ));
        }
        let mut state = backend.new_state(exit_layers)?;
        if options.record_computes {
            state = state.with_compute_log();
        }
        Ok(Self {
            backend,
            state,
            seq: prompt.to_vec(),
            ledger: CostLedger::new(),
            trace: DecodeTrace::default(),
            pending: Vec::new(),
        })
    }

    pub fn backend(&self) -> &'a dyn ModelBackend {
        self.backend
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.seq
    }

    pub fn state(&self) -> &LayeredState {
        &self.state
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn trace(&self) -> &DecodeTrace {
        &self.trace
    }

    pub(crate) fn push_token(&mut self, token: TokenId) {
        self.seq.push(token);
    }

    pub(crate) fn truncate_tokens(&mut self, len: usize) {
        self.seq.truncate(len);
    }

    pub(crate) fn state_mut(&mut self) -> &mut LayeredState {
        &mut self.state
    }

    pub(crate) fn emit(&mut self, event: TraceEvent) {
        self.trace.push(event);
    }

    /// Passes run since the last call.
    pub(crate) fn take_passes(&mut self) -> Vec<PassRecord> {
        std::mem::take(&mut self.pending)
    }

    pub(crate) fn into_parts(self) -> (Vec<TokenId>, DecodeTrace, CostLedger, LayeredState) {
        (self.seq, self.trace, self.ledger, self.state)
    }

    /// Computes every prompt position except the last through all layers
    /// and commits them.
    pub fn prefill(&mut self) -> Result<()> {
        let upto = self.seq.len() - 1;
        self.catch_up(self.backend.n_layers(), upto, Phase::Prefill)?;
        let passes = self.take_passes();
        self.emit(TraceEvent::Prefill { passes });
        self.state.commit(upto)
    }

    fn run(&mut self, layers: LayerRange, positions: Range<usize>, phase: Phase) -> Result<Vec<HiddenState>> {
        let hidden = self
            .backend
            .forward_range(layers, &self.seq, positions.clone(), &mut self.state)?;
        self.ledger.record_pass(phase, layers.len(), positions.len());
        self.pending.push(PassRecord {
            phase,
            layers,
            positions,
        });
        Ok(hidden)
    }

    /// Brings layers `1..=layer` up to `upto` positions. Layer groups are
    /// delimited by the buffered exit layers; adjacent groups at the same fill
    /// length run as one pass. Returns hidden states at `layer` for the
    /// positions computed by the final pass.
    pub(crate) fn catch_up(&mut self, layer: usize, upto: usize, phase: Phase) -> Result<Vec<HiddenState>> {
        let mut bounds: Vec<usize> = self
            .state
            .exit_layers()
            .iter()
            .copied()
            .filter(|&l| l < layer)
            .collect();
        bounds.push(layer);

        let mut groups: Vec<LayerRange> = Vec::new();
        let mut start = 1;
        for end in bounds {
            let range = LayerRange::new(start, end)?;
            let fill = self.state.filled_len(start);
            match groups.last_mut() {
                Some(prev) if self.state.filled_len(prev.start()) == fill => {
                    *prev = LayerRange::new(prev.start(), end)?;
                }
                _ => groups.push(range),
            }
            start = end + 1;
        }

        let mut last = Vec::new();
        for range in groups {
            let from = self.state.filled_len(range.start());
            if from > upto {
                return Err(Error::alignment(
                    range.start(),
                    upto,
                    format!("layer already filled to {from}"),
                ));
            }
            last = if from < upto {
                self.run(range, from..upto, phase)?
            } else {
                Vec::new()
            };
        }
        Ok(last)
    }

    /// Hidden state of `layer` at `position`, from `fresh` or the buffer.
    fn hidden_at(&self, layer: usize, position: usize, fresh: &[HiddenState]) -> Result<HiddenState> {
        if let Some(first) = fresh.first() {
            if position >= first.position && position < first.position + fresh.len() {
                return Ok(fresh[position - first.position].clone());
            }
        }
        self.state.hidden(layer, position).map(|v| HiddenState {
            position,
            layer,
            values: v.to_vec(),
        })
    }

    fn predict(&self, layer: usize, position: usize, fresh: &[HiddenState]) -> Result<TokenDistribution> {
        let hidden = self.hidden_at(layer, position, fresh)?;
        self.backend.exit_logits(&hidden)
    }
}

/// Greedily appends `n` tokens using layers `1..=layer`, extending the state
/// tentatively at those layers. Passes are accounted under `phase`.
pub fn generate_next(
    session: &mut DecodeSession<'_>,
    layer: usize,
    n: usize,
    phase: Phase,
) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = session.seq.len();
        if len > session.backend.max_seq_len() {
            return Err(Error::Capacity {
                required: len,
                capacity: session.backend.max_seq_len(),
            });
        }
        let fresh = session.catch_up(layer, len, phase)?;
        let token = session.predict(layer, len - 1, &fresh)?.argmax();
        session.seq.push(token);
        out.push(token);
    }
    Ok(out)
}

/// Whether verification emits a verifier token when every draft token is
/// accepted. A mismatch always yields one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BonusMode {
    /// Only at the first mismatch; free, since that prediction is already
    /// computed by the verification pass.
    OnMismatch,
    /// Also after full acceptance, which costs an extra position through
    /// the verifier's layers.
    Always,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOutcome {
    pub accepted: Vec<TokenId>,
    pub bonus: Option<TokenId>,
    /// Number of draft tokens examined.
    pub proposed: usize,
}

impl VerifyOutcome {
    pub fn mismatched(&self) -> bool {
        self.accepted.len() < self.proposed
    }
}

/// Verifies the draft `tokens[draft_start..]` against `verifier_layer` in one
/// pass over the draft positions, accepting the longest prefix whose tokens
/// are all among the verifier's top predictions. Rejected tokens are removed
/// from the sequence and their positions pruned at every layer. The bonus
/// token, if any, is returned but not appended.
pub fn leading_substring_verify(
    session: &mut DecodeSession<'_>,
    draft_start: usize,
    verifier_layer: usize,
    policy: AcceptancePolicy,
    bonus_mode: BonusMode,
    phase: Phase,
) -> Result<VerifyOutcome> {
    let len = session.seq.len();
    if draft_start == 0 || draft_start > len {
        return Err(Error::alignment(
            verifier_layer,
            draft_start,
            "draft must follow a non-empty context",
        ));
    }
    let draft: Vec<TokenId> = session.seq[draft_start..].to_vec();
    let fresh = session.catch_up(verifier_layer, len - 1, phase)?;

    let mut accepted = Vec::with_capacity(draft.len());
    let mut bonus = None;
    for (i, &token) in draft.iter().enumerate() {
        let dist = session.predict(verifier_layer, draft_start - 1 + i, &fresh)?;
        if top_predictions(&dist, policy).contains(&token) {
            accepted.push(token);
        } else {
            bonus = Some(dist.argmax());
            break;
        }
    }

    if bonus.is_some() {
        let keep = draft_start + accepted.len();
        session.state.rollback_to(keep)?;
        session.seq.truncate(keep);
    } else if bonus_mode == BonusMode::Always {
        let fresh = session.catch_up(verifier_layer, len, phase)?;
        bonus = Some(session.predict(verifier_layer, len - 1, &fresh)?.argmax());
    }

    Ok(VerifyOutcome {
        accepted,
        bonus,
        proposed: draft.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{AgreementProfile, SyntheticModel, SyntheticModelSpec};

    fn synth(seed: u64, alpha: Vec<f64>) -> SyntheticModel {
        let profile = AgreementProfile::from_values(alpha).unwrap();
        SyntheticModel::new(SyntheticModelSpec::new(32, seed, profile)).unwrap()
    }

    fn dist(logits: Vec<f64>) -> TokenDistribution {
        TokenDistribution {
            logits,
            position: 0,
            source_layer: 1,
        }
    }

    #[test]
    fn top_predictions_tie_break_and_top_k() {
        let d = dist(vec![0.1, 3.0, 3.0, -1.0]);
        assert_eq!(top_predictions(&d, AcceptancePolicy::Greedy), vec![1]);
        let mut two = top_predictions(&d, AcceptancePolicy::TopK(2));
        two.sort();
        assert_eq!(two, vec![1, 2]);
        let mut all = top_predictions(&d, AcceptancePolicy::TopK(4));
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn generate_next_matches_closed_form_and_advances_fill() {
        let m = synth(3, vec![0.3, 0.5, 0.8, 1.0]);
        let prompt = [4, 9, 1];
        let mut s = DecodeSession::new(&m, &prompt, &[1, 2], DecodeOptions::default()).unwrap();
        s.prefill().unwrap();
        assert_eq!(s.state().filled_len(1), 2);
        let out = generate_next(&mut s, 1, 2, Phase::Draft).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(s.state().filled_len(1), 4);
        assert_eq!(s.state().filled_len(2), 2);

        let mut ctx = prompt.to_vec();
        for &t in &out {
            assert_eq!(t, m.predict_token(1, &ctx));
            ctx.push(t);
        }
    }

    #[test]
    fn generate_next_at_full_layer_is_vanilla_next() {
        let m = synth(5, vec![0.1, 0.2, 0.3, 1.0]);
        let prompt = [2, 2, 7];
        let mut s = DecodeSession::new(&m, &prompt, &[], DecodeOptions::default()).unwrap();
        s.prefill().unwrap();
        let t = generate_next(&mut s, 4, 1, Phase::TargetVerify).unwrap();
        assert_eq!(t, vec![m.predict_token(4, &prompt)]);
    }

    #[test]
    fn empty_draft_yields_verifier_next_token() {
        let m = synth(5, vec![0.1, 0.2, 0.3, 1.0]);
        let prompt = [2, 2, 7];
        let mut s = DecodeSession::new(&m, &prompt, &[1, 2], DecodeOptions::default()).unwrap();
        s.prefill().unwrap();
        let out = leading_substring_verify(&mut s, 3, 2, AcceptancePolicy::Greedy, BonusMode::Always, Phase::IntermediateVerify)
            .unwrap();
        assert!(out.accepted.is_empty());
        assert_eq!(out.bonus, Some(m.predict_token(2, &prompt)));
    }

    #[test]
    fn full_agreement_accepts_whole_draft() {
        let m = synth(8, vec![1.0; 4]);
        let prompt = [1, 2, 3];
        let mut s = DecodeSession::new(&m, &prompt, &[1, 2], DecodeOptions::default()).unwrap();
        s.prefill().unwrap();
        let draft = generate_next(&mut s, 1, 3, Phase::Draft).unwrap();
        let out = leading_substring_verify(&mut s, 3, 2, AcceptancePolicy::Greedy, BonusMode::Always, Phase::IntermediateVerify)
            .unwrap();
        assert_eq!(out.accepted, draft);
        let mut ctx = prompt.to_vec();
        ctx.extend(&draft);
        assert_eq!(out.bonus, Some(m.predict_token(2, &ctx)));
        // Without bonus-on-accept the verifier touches only the draft positions.
        let mut s = DecodeSession::new(&m, &prompt, &[1, 2], DecodeOptions::default()).unwrap();
        s.prefill().unwrap();
        generate_next(&mut s, 1, 3, Phase::Draft).unwrap();
        let out = leading_substring_verify(&mut s, 3, 2, AcceptancePolicy::Greedy, BonusMode::OnMismatch, Phase::IntermediateVerify)
            .unwrap();
        assert_eq!(out.bonus, None);
        assert_eq!(s.state().filled_len(2), 5);
    }

    /// Accepted length of `draft` after `prefix` at `layer`, enumerated one
    /// position at a time from the closed-form predictor.
    fn brute_force_accepted(m: &SyntheticModel, layer: usize, prefix: &[TokenId], draft: &[TokenId]) -> (usize, Option<TokenId>) {
        let mut ctx = prefix.to_vec();
        for (i, &t) in draft.iter().enumerate() {
            let want = m.predict_token(layer, &ctx);
            if want != t {
                return (i, Some(want));
            }
            ctx.push(t);
        }
        (draft.len(), None)
    }

    #[test]
    fn leading_substring_matches_brute_force_oracle() {
        let m = synth(7, vec![0.2, 0.5, 0.7, 1.0]);
        let mut histogram = [0usize; 5];
        for p in 0..200u32 {
            let prompt = [p % 32, (p * 7 + 3) % 32, (p / 3) % 32];
            let mut s = DecodeSession::new(&m, &prompt, &[1, 2], DecodeOptions::default()).unwrap();
            s.prefill().unwrap();
            let draft = generate_next(&mut s, 1, 4, Phase::Draft).unwrap();
            let out = leading_substring_verify(&mut s, 3, 2, AcceptancePolicy::Greedy, BonusMode::OnMismatch, Phase::IntermediateVerify)
                .unwrap();
            let (n, bonus) = brute_force_accepted(&m, 2, &prompt, &draft);
            assert_eq!(out.accepted.len(), n, "prompt {prompt:?}");
            assert_eq!(out.bonus, bonus);
            assert_eq!(s.tokens().len(), 3 + n);
            // The newest token is only fed once a bonus is appended after it.
            let fill = 3 + n - usize::from(bonus.is_none());
            assert_eq!(s.state().filled_len(1), fill);
            assert_eq!(s.state().filled_len(2), fill);
            histogram[n] += 1;
        }
        // Both early rejection and full acceptance occur.
        assert!(histogram[0] > 0 && histogram[4] > 0, "{histogram:?}");
    }

    #[test]
    fn seed7_fixed_prefix_snapshot() {
        let m = synth(7, vec![0.2, 0.5, 0.7, 1.0]);
        let prompt = [1, 2, 3, 4];
        let draft = [
            m.predict_token(1, &[1, 2, 3, 4]),
            0,
            0,
            0,
        ];
        let mut s = DecodeSession::new(&m, &prompt, &[1, 2], DecodeOptions::default()).unwrap();
        s.prefill().unwrap();
        for &t in &draft {
            s.push_token(t);
        }
        let out = leading_substring_verify(&mut s, 4, 2, AcceptancePolicy::Greedy, BonusMode::OnMismatch, Phase::IntermediateVerify)
            .unwrap();
        let (n, _) = brute_force_accepted(&m, 2, &prompt, &draft);
        assert_eq!(out.accepted.len(), n);
        assert_eq!(n, SEED7_ACCEPTED);
    }

    const SEED7_ACCEPTED: usize = 1;

    #[test]
    fn verify_rejects_misaligned_start() {
        let m = synth(1, vec![0.5, 0.5, 0.5, 1.0]);
        let mut s = DecodeSession::new(&m, &[1, 2], &[1, 2], DecodeOptions::default()).unwrap();
        s.prefill().unwrap();
        assert!(leading_substring_verify(&mut s, 0, 2, AcceptancePolicy::Greedy, BonusMode::OnMismatch, Phase::IntermediateVerify).is_err());
        assert!(leading_substring_verify(&mut s, 5, 2, AcceptancePolicy::Greedy, BonusMode::OnMismatch, Phase::IntermediateVerify).is_err());
    }

    #[test]
    fn session_rejects_empty_and_out_of_vocab_prompts() {
        let m = synth(1, vec![0.5, 0.5, 0.5, 1.0]);
        assert!(DecodeSession::new(&m, &[], &[], DecodeOptions::default()).is_err());
        assert!(DecodeSession::new(&m, &[99], &[], DecodeOptions::default()).is_err());
    }
}
