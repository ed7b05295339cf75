//! Per-prompt state consistency and losslessness check.

use hispec_core::{
    consistency_check, hispec_decode_with, vanilla_decode, DecodeOptions, HiSpecConfig,
    ModelBackend, TokenId, VerifyPoint,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub prompt: usize,
    pub prompt_len: usize,
    pub boundaries: usize,
    pub max_abs_discrepancy: f64,
    pub redundant_computes: usize,
    pub discarded_computes: u64,
    pub matches_vanilla: bool,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_abs_discrepancy == 0.0 && self.redundant_computes == 0 && self.matches_vanilla
    }
}

pub fn check_prompt(
    backend: &dyn ModelBackend,
    index: usize,
    prompt: &[TokenId],
    config: &HiSpecConfig,
) -> Result<CheckRow, CliError> {
    let mut boundaries = 0;
    let mut worst = 0.0f64;
    let mut observe = |_: VerifyPoint, b: &dyn ModelBackend, state: &hispec_core::LayeredState, tokens: &[TokenId]| {
        boundaries += 1;
        worst = worst.max(consistency_check(state, b, tokens).max_abs());
    };
    let out = hispec_decode_with(
        backend,
        prompt,
        config,
        DecodeOptions { record_computes: true },
        &mut observe,
    )?;
    let reference = vanilla_decode(backend, prompt, config.max_new_tokens, None, config.eos_token)?;
    Ok(CheckRow {
        prompt: index,
        prompt_len: prompt.len(),
        boundaries,
        max_abs_discrepancy: worst,
        redundant_computes: out.state.redundant_computes().len(),
        discarded_computes: out.state.discarded_computes().unwrap_or(0),
        matches_vanilla: out.tokens == reference.tokens,
    })
}

pub fn check_all(
    backend: &dyn ModelBackend,
    prompts: &[Vec<TokenId>],
    config: &HiSpecConfig,
) -> Result<Vec<CheckRow>, CliError> {
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| check_prompt(backend, i, p, config))
        .collect()
}
