mod common;

use common::random_case;
use hispec_core::{
    consistency_check, hispec_decode_with, selfspec_decode_with, DecodeOptions, LayeredState,
    ModelBackend, SelfSpecConfig, TokenId, VerifyPoint,
};
use proptest::prelude::*;

struct Checker {
    boundaries: usize,
    failures: Vec<String>,
}

impl Checker {
    fn observe(&mut self, point: VerifyPoint, backend: &dyn ModelBackend, state: &LayeredState, tokens: &[TokenId]) {
        self.boundaries += 1;
        let report = consistency_check(state, backend, tokens);
        if !report.is_clean() {
            self.failures.push(format!("{point:?}: {:?}", report.offenders().collect::<Vec<_>>()));
        }
        if let Err(e) = state.check_invariants() {
            self.failures.push(format!("{point:?}: {e}"));
        }
    }
}

fn assert_settled(state: &LayeredState, total: usize) -> Result<(), TestCaseError> {
    for layer in 1..=state.n_layers() {
        prop_assert_eq!(state.tentative_len(layer), 0, "layer {}", layer);
        prop_assert_eq!(state.filled_len(layer), total - 1, "layer {}", layer);
    }
    prop_assert_eq!(state.committed_len(), total - 1);
    prop_assert!(state.redundant_computes().is_empty(), "{:?}", state.redundant_computes());
    for layer in 1..=state.n_layers() {
        for p in 0..total - 1 {
            prop_assert_eq!(state.compute_count(layer, p), Some(1));
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn hispec_state_is_consistent_at_every_boundary(seed in any::<u64>()) {
        let case = random_case(seed, 10, 40);
        let mut checker = Checker { boundaries: 0, failures: Vec::new() };
        let mut obs = |p: VerifyPoint, b: &dyn ModelBackend, s: &LayeredState, t: &[TokenId]| checker.observe(p, b, s, t);
        let out = hispec_decode_with(
            case.backend.as_ref(),
            &case.prompt,
            &case.config,
            DecodeOptions { record_computes: true },
            &mut obs,
        )
        .unwrap();
        prop_assert!(checker.failures.is_empty(), "{}: {:?}", case.label, checker.failures);
        prop_assert_eq!(checker.boundaries, 2 * out.stats().target_passes);
        prop_assert!(consistency_check(&out.state, case.backend.as_ref(), &out.state.tokens().to_vec()).is_clean());
        assert_settled(&out.state, case.prompt.len() + out.tokens.len())?;
        // Every computation is either live in the final state or was pruned.
        let live = (1..=out.state.n_layers()).map(|l| out.state.filled_len(l) as u64).sum::<u64>();
        let discarded = out.state.discarded_computes().unwrap();
        prop_assert_eq!(out.state.total_computes(), Some(live + discarded));
        prop_assert_eq!(out.ledger.total_position_layer_units(), live + discarded);
    }

    #[test]
    fn selfspec_state_is_consistent_at_every_boundary(seed in any::<u64>()) {
        let case = random_case(seed, 10, 30);
        let cfg = SelfSpecConfig {
            eos_token: case.config.eos_token,
            ..SelfSpecConfig::new(case.config.full_layer, case.config.draft_layer, case.config.draft_len, case.config.max_new_tokens)
        };
        let mut checker = Checker { boundaries: 0, failures: Vec::new() };
        let mut obs = |p: VerifyPoint, b: &dyn ModelBackend, s: &LayeredState, t: &[TokenId]| checker.observe(p, b, s, t);
        let out = selfspec_decode_with(case.backend.as_ref(), &case.prompt, &cfg, DecodeOptions { record_computes: true }, &mut obs)
            .unwrap();
        prop_assert!(checker.failures.is_empty(), "{}: {:?}", case.label, checker.failures);
        assert_settled(&out.state, case.prompt.len() + out.tokens.len())?;
    }
}
