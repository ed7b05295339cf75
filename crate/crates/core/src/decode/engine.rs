use crate::cost::Phase;
use crate::error::{Error, Result};
use crate::model::{ModelBackend, TokenId};

use super::session::{generate_next, leading_substring_verify, BonusMode, DecodeSession};
use super::trace::{Provenance, TentativeBuffer, TraceEvent};
use super::{DecodeObserver, DecodeOptions, DecodeOutput, HiSpecConfig, SelfSpecConfig, VerifyPoint};

fn check_capacity(backend: &dyn ModelBackend, prompt: &[TokenId], max_new: usize) -> Result<()> {
    let required = prompt.len() + max_new;
    if required > backend.max_seq_len() {
        return Err(Error::Capacity {
            required,
            capacity: backend.max_seq_len(),
        });
    }
    Ok(())
}

/// Truncates `tokens` just after the first `eos`, if present.
fn cut_at_eos(tokens: &mut Vec<TokenId>, eos: Option<TokenId>) -> bool {
    match eos.and_then(|e| tokens.iter().position(|&t| t == e)) {
        Some(i) => {
            tokens.truncate(i + 1);
            true
        }
        None => false,
    }
}

/// Drops anything tentative so the state covers exactly the committed
/// sequence minus its last token, which is never fed.
fn finish(mut session: DecodeSession<'_>, prompt_len: usize, committed: usize) -> Result<DecodeOutput> {
    let total = prompt_len + committed;
    session.truncate_tokens(total);
    session.state_mut().rollback_to(total - 1)?;
    session.state_mut().commit(total - 1)?;
    let (seq, trace, ledger, state) = session.into_parts();
    Ok(DecodeOutput {
        tokens: seq[prompt_len..].to_vec(),
        trace,
        ledger,
        state,
    })
}

/// Greedy autoregressive decoding at `layer` (the full model when `None`).
pub fn vanilla_decode(
    backend: &dyn ModelBackend,
    prompt: &[TokenId],
    max_new_tokens: usize,
    layer: Option<usize>,
    eos_token: Option<TokenId>,
) -> Result<DecodeOutput> {
    let layer = layer.unwrap_or(backend.n_layers());
    if layer == 0 || layer > backend.n_layers() {
        return Err(Error::config("layer", format!("exit layer {layer} outside 1..={}", backend.n_layers())));
    }
    check_capacity(backend, prompt, max_new_tokens)?;
    let mut session = DecodeSession::new(backend, prompt, &[], DecodeOptions::default())?;
    // Prefill only the layers this decode uses.
    let upto = prompt.len() - 1;
    session.catch_up(layer, upto, Phase::Prefill)?;
    let passes = session.take_passes();
    session.emit(TraceEvent::Prefill { passes });

    let mut committed = 0;
    while committed < max_new_tokens {
        let token = generate_next(&mut session, layer, 1, Phase::TargetVerify)?;
        let passes = session.take_passes();
        session.emit(TraceEvent::Generate {
            layer,
            passes,
            tokens: token.clone(),
        });
        session.emit(TraceEvent::Commit {
            tokens: token.clone(),
        });
        committed += 1;
        if eos_token == Some(token[0]) {
            break;
        }
    }
    let total = prompt.len() + committed;
    let (seq, trace, ledger, mut state) = session.into_parts();
    // Only a full-depth decode verifies anything.
    if layer == backend.n_layers() {
        state.commit(total - 1)?;
    }
    Ok(DecodeOutput {
        tokens: seq[prompt.len()..].to_vec(),
        trace,
        ledger,
        state,
    })
}

pub fn selfspec_decode(
    backend: &dyn ModelBackend,
    prompt: &[TokenId],
    config: &SelfSpecConfig,
) -> Result<DecodeOutput> {
    selfspec_decode_with(backend, prompt, config, DecodeOptions::default(), &mut ())
}

/// Single-level early-exit speculation: draft at `draft_layer`, verify the
/// draft directly with the full model, commit the accepted prefix plus the
/// full model's token at the first mismatch.
pub fn selfspec_decode_with(
    backend: &dyn ModelBackend,
    prompt: &[TokenId],
    config: &SelfSpecConfig,
    options: DecodeOptions,
    observer: &mut dyn DecodeObserver,
) -> Result<DecodeOutput> {
    config.validate(backend.n_layers())?;
    check_capacity(backend, prompt, config.max_new_tokens)?;
    let policy = config.policy.effective(backend);
    let full = config.full_layer;
    let mut session = DecodeSession::new(backend, prompt, &[config.draft_layer], options)?;
    session.prefill()?;

    let mut committed = 0;
    while committed < config.max_new_tokens {
        let n = config.draft_len.min(config.max_new_tokens - committed);
        let start = session.tokens().len();
        let drafted = generate_next(&mut session, config.draft_layer, n, Phase::Draft)?;
        let passes = session.take_passes();
        session.emit(TraceEvent::DraftStep {
            start_position: start,
            passes,
            tokens: drafted,
        });

        observer.at_target_boundary(VerifyPoint::BeforeTarget, backend, session.state(), session.tokens());
        let outcome = leading_substring_verify(&mut session, start, full, policy, BonusMode::OnMismatch, Phase::TargetVerify)?;
        let mut commit = outcome.accepted.clone();
        if let Some(b) = outcome.bonus {
            session.push_token(b);
            commit.push(b);
        }
        let flushed = if outcome.mismatched() {
            outcome.proposed - outcome.accepted.len()
        } else {
            0
        };
        let stop = cut_at_eos(&mut commit, config.eos_token);
        committed += commit.len();
        let passes = session.take_passes();
        session.emit(TraceEvent::TargetVerify {
            passes,
            candidates: outcome.proposed,
            accepted: outcome.accepted,
            bonus: outcome.bonus,
            flushed,
        });
        session.emit(TraceEvent::Commit { tokens: commit });
        let total = prompt.len() + committed;
        session.truncate_tokens(total);
        session.state_mut().rollback_to(total - 1)?;
        session.state_mut().commit(total - 1)?;
        observer.at_target_boundary(VerifyPoint::AfterTarget, backend, session.state(), session.tokens());
        if stop {
            break;
        }
    }
    finish(session, prompt.len(), committed)
}

pub fn hispec_decode(
    backend: &dyn ModelBackend,
    prompt: &[TokenId],
    config: &HiSpecConfig,
) -> Result<DecodeOutput> {
    hispec_decode_with(backend, prompt, config, DecodeOptions::default(), &mut ())
}

/// Hierarchical speculative decoding.
///
/// Each round drafts `draft_len` tokens at the draft layer on the committed
/// context plus the tentative buffer, then verifies them at the intermediate
/// layer: accepted tokens join the buffer and the first mismatch is replaced
/// by the intermediate layer's own token. Once the buffer holds `window`
/// tokens (or an end of sequence is pending) the full model verifies it left
/// to right, committing accepted tokens; on the first mismatch it commits its
/// own token and the rest of the buffer is flushed.
pub fn hispec_decode_with(
    backend: &dyn ModelBackend,
    prompt: &[TokenId],
    config: &HiSpecConfig,
    options: DecodeOptions,
    observer: &mut dyn DecodeObserver,
) -> Result<DecodeOutput> {
    config.validate(backend.n_layers())?;
    check_capacity(backend, prompt, config.max_new_tokens)?;
    let policy = config.policy.effective(backend);
    let mut session = DecodeSession::new(
        backend,
        prompt,
        &[config.draft_layer, config.verify_layer],
        options,
    )?;
    session.prefill()?;

    let mut buffer = TentativeBuffer::new();
    let mut committed = 0;
    while committed < config.max_new_tokens {
        loop {
            let eos_pending = config.eos_token.is_some_and(|e| buffer.contains(e));
            let room = config.max_new_tokens - committed - buffer.len();
            if buffer.len() >= config.window || eos_pending || room == 0 {
                break;
            }
            let n = config.draft_len.min(room);
            let start = session.tokens().len();
            let drafted = generate_next(&mut session, config.draft_layer, n, Phase::Draft)?;
            let passes = session.take_passes();
            session.emit(TraceEvent::DraftStep {
                start_position: start,
                passes,
                tokens: drafted,
            });

            let outcome = leading_substring_verify(
                &mut session,
                start,
                config.verify_layer,
                policy,
                BonusMode::OnMismatch,
                Phase::IntermediateVerify,
            )?;
            for &t in &outcome.accepted {
                buffer.push(t, Provenance::DraftAcceptedByIntermediate);
            }
            if let Some(b) = outcome.bonus {
                session.push_token(b);
                buffer.push(b, Provenance::EmittedByIntermediate);
            }
            debug_assert!(buffer.len() <= config.window + config.draft_len);
            let passes = session.take_passes();
            session.emit(TraceEvent::IntermediateVerify {
                passes,
                proposed: outcome.proposed,
                accepted: outcome.accepted,
                bonus: outcome.bonus,
            });
        }

        observer.at_target_boundary(VerifyPoint::BeforeTarget, backend, session.state(), session.tokens());
        let buffer_start = session.tokens().len() - buffer.len();
        let outcome = leading_substring_verify(
            &mut session,
            buffer_start,
            config.full_layer,
            policy,
            BonusMode::OnMismatch,
            Phase::TargetVerify,
        )?;
        let mut commit = outcome.accepted.clone();
        if let Some(b) = outcome.bonus {
            session.push_token(b);
            commit.push(b);
        }
        let flushed = if outcome.mismatched() {
            buffer.len() - outcome.accepted.len()
        } else {
            0
        };
        buffer.clear();
        let stop = cut_at_eos(&mut commit, config.eos_token);
        committed += commit.len();
        let passes = session.take_passes();
        session.emit(TraceEvent::TargetVerify {
            passes,
            candidates: outcome.proposed,
            accepted: outcome.accepted,
            bonus: outcome.bonus,
            flushed,
        });
        session.emit(TraceEvent::Commit { tokens: commit });

        let total = prompt.len() + committed;
        session.truncate_tokens(total);
        session.state_mut().rollback_to(total - 1)?;
        session.state_mut().commit(total - 1)?;
        observer.at_target_boundary(VerifyPoint::AfterTarget, backend, session.state(), session.tokens());
        if stop {
            break;
        }
    }
    finish(session, prompt.len(), committed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::relative_throughput;
    use crate::decode::AcceptancePolicy;
    use crate::synthetic::{AgreementProfile, SyntheticModel, SyntheticModelSpec};

    fn synth(alpha: Vec<f64>) -> SyntheticModel {
        let profile = AgreementProfile::from_values(alpha).unwrap();
        SyntheticModel::new(SyntheticModelSpec::new(64, 21, profile)).unwrap()
    }

    fn profile(n: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
        (1..=n).map(|l| if l == n { 1.0 } else { f(l) }).collect()
    }

    fn hispec_32(max_new: usize) -> HiSpecConfig {
        HiSpecConfig {
            draft_layer: 4,
            verify_layer: 8,
            ..HiSpecConfig::with_defaults(32, max_new)
        }
    }

    #[test]
    fn vanilla_cost_is_n_times_depth() {
        let m = synth(profile(32, |_| 0.5));
        let out = vanilla_decode(&m, &[1, 2, 3], 10, None, None).unwrap();
        assert_eq!(out.tokens.len(), 10);
        assert_eq!(out.ledger.sequential_units(), 320);
        let again = vanilla_decode(&m, &[1, 2, 3], 10, None, None).unwrap();
        assert_eq!(out.tokens, again.tokens);
    }

    #[test]
    fn vanilla_at_fully_agreeing_exit_matches_full_model() {
        let m = synth(profile(8, |l| if l >= 3 { 1.0 } else { 0.2 }));
        let a = vanilla_decode(&m, &[5, 6], 20, Some(3), None).unwrap();
        let b = vanilla_decode(&m, &[5, 6], 20, None, None).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn selfspec_all_accept_round_cost() {
        let m = synth(vec![1.0; 32]);
        let cfg = SelfSpecConfig::new(32, 4, 2, 20);
        let out = selfspec_decode(&m, &[1, 2, 3], &cfg).unwrap();
        assert_eq!(out.tokens, vanilla_decode(&m, &[1, 2, 3], 20, None, None).unwrap().tokens);
        // 10 rounds of N_d * L_d + (L_f - L_d).
        assert_eq!(out.ledger.sequential_units(), 10 * (2 * 4 + 28));
        assert_eq!(out.stats().target_accepted, 20);
    }

    #[test]
    fn selfspec_zero_agreement_commits_one_token_per_round() {
        let m = synth(profile(16, |_| 0.0));
        let cfg = SelfSpecConfig::new(16, 2, 3, 12);
        let out = selfspec_decode(&m, &[4, 4], &cfg).unwrap();
        assert_eq!(out.tokens, vanilla_decode(&m, &[4, 4], 12, None, None).unwrap().tokens);
        assert_eq!(out.stats().target_passes, 12);
        assert_eq!(out.stats().target_accepted, 0);
    }

    #[test]
    fn hispec_all_accept_throughput() {
        let m = synth(vec![1.0; 32]);
        let prompt = [3, 1, 4, 1, 5];
        let out = hispec_decode(&m, &prompt, &hispec_32(64)).unwrap();
        let van = vanilla_decode(&m, &prompt, 64, None, None).unwrap();
        assert_eq!(out.tokens, van.tokens);
        // Per 4 tokens: 4 draft passes of 4 layers, 2 intermediate passes of 4,
        // one target pass of 24.
        assert_eq!(out.ledger.sequential_units(), 16 * 48);
        assert_eq!(out.stats().target_passes, 16);
        assert_eq!(out.stats().flushed, 0);
        let ratio = relative_throughput((&out.ledger, 64), (&van.ledger, 64)).unwrap();
        assert!((ratio - 8.0 / 3.0).abs() < 1e-12);
        assert!(ratio > 1.5);
    }

    #[test]
    fn hispec_draft_never_agrees_but_intermediate_always_does() {
        let m = synth(profile(16, |l| if l >= 4 { 1.0 } else { 0.0 }));
        let cfg = HiSpecConfig {
            draft_layer: 2,
            verify_layer: 4,
            ..HiSpecConfig::with_defaults(16, 30)
        };
        let out = hispec_decode(&m, &[9, 9, 9], &cfg).unwrap();
        assert_eq!(out.tokens, vanilla_decode(&m, &[9, 9, 9], 30, None, None).unwrap().tokens);
        let s = out.stats();
        assert_eq!(s.intermediate_accepted, 0);
        for e in &out.trace.events {
            if let TraceEvent::IntermediateVerify { accepted, bonus, .. } = e {
                assert!(accepted.is_empty() && bonus.is_some());
            }
        }
        assert_eq!(s.target_accepted, s.target_candidates);
        assert_eq!(s.flushed, 0);
    }

    #[test]
    fn zero_agreement_draft_cannot_beat_vanilla() {
        let m = synth(profile(32, |_| 0.0));
        let prompt = [7, 7];
        let van = vanilla_decode(&m, &prompt, 40, None, None).unwrap();
        let hs = hispec_decode(&m, &prompt, &hispec_32(40)).unwrap();
        let ss = selfspec_decode(&m, &prompt, &SelfSpecConfig::new(32, 4, 2, 40)).unwrap();
        for out in [&hs, &ss] {
            assert_eq!(out.tokens, van.tokens);
            assert!(relative_throughput((&out.ledger, 40), (&van.ledger, 40)).unwrap() <= 1.0);
        }
    }

    #[test]
    fn eos_stops_decoding_after_commit() {
        let m = synth(profile(8, |l| l as f64 / 8.0));
        let prompt = [1, 2];
        let van = vanilla_decode(&m, &prompt, 40, None, None).unwrap();
        let eos = van.tokens[6];
        let first = van.tokens.iter().position(|&t| t == eos).unwrap();
        let expect = &van.tokens[..=first];
        let van_eos = vanilla_decode(&m, &prompt, 40, None, Some(eos)).unwrap();
        assert_eq!(van_eos.tokens, expect);
        let cfg = HiSpecConfig {
            eos_token: Some(eos),
            ..HiSpecConfig::with_defaults(8, 40)
        };
        assert_eq!(hispec_decode(&m, &prompt, &cfg).unwrap().tokens, expect);
        let ss = SelfSpecConfig {
            eos_token: Some(eos),
            ..SelfSpecConfig::new(8, 1, 3, 40)
        };
        assert_eq!(selfspec_decode(&m, &prompt, &ss).unwrap().tokens, expect);
    }

    #[test]
    fn budget_is_exact_for_every_window() {
        let m = synth(profile(12, |l| l as f64 / 12.0));
        for max_new in 1..12 {
            for window in 1..6 {
                let cfg = HiSpecConfig {
                    window,
                    draft_len: 3,
                    ..HiSpecConfig::with_defaults(12, max_new)
                };
                let out = hispec_decode(&m, &[2, 3], &cfg).unwrap();
                assert_eq!(out.tokens.len(), max_new);
                assert_eq!(out.trace.committed_tokens(), out.tokens);
            }
        }
    }

    #[test]
    fn config_and_capacity_errors() {
        let m = synth(vec![1.0; 8]);
        let bad = HiSpecConfig {
            draft_layer: 3,
            verify_layer: 3,
            ..HiSpecConfig::with_defaults(8, 4)
        };
        assert!(matches!(hispec_decode(&m, &[1], &bad), Err(Error::Config { .. })));
        let bad = HiSpecConfig {
            full_layer: 7,
            ..HiSpecConfig::with_defaults(8, 4)
        };
        assert!(matches!(hispec_decode(&m, &[1], &bad), Err(Error::Config { .. })));
        let bad = HiSpecConfig {
            policy: AcceptancePolicy::TopK(0),
            ..HiSpecConfig::with_defaults(8, 4)
        };
        assert!(hispec_decode(&m, &[1], &bad).is_err());
        let huge = HiSpecConfig::with_defaults(8, 5000);
        assert!(matches!(hispec_decode(&m, &[1], &huge), Err(Error::Capacity { .. })));
        assert!(matches!(vanilla_decode(&m, &[1], 5000, None, None), Err(Error::Capacity { .. })));
        assert!(vanilla_decode(&m, &[1], 4, Some(9), None).is_err());
    }

    #[test]
    fn default_placement() {
        use crate::decode::default_exit_layers;
        assert_eq!(default_exit_layers(32), (4, 8));
        assert_eq!(default_exit_layers(48), (6, 12));
        assert_eq!(default_exit_layers(80), (10, 20));
        assert_eq!(default_exit_layers(3), (1, 2));
        assert_eq!(default_exit_layers(4), (1, 2));
        assert_eq!(default_exit_layers(9), (2, 3));
    }

    #[test]
    fn top_k_is_clamped_for_one_hot_backend() {
        let m = synth(profile(8, |_| 0.3));
        let greedy = HiSpecConfig::with_defaults(8, 16);
        let topk = HiSpecConfig {
            policy: AcceptancePolicy::TopK(5),
            ..greedy.clone()
        };
        let a = hispec_decode(&m, &[1, 2], &greedy).unwrap();
        let b = hispec_decode(&m, &[1, 2], &topk).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }
}
