//! Closed-form layered oracle with a controllable per-layer agreement profile.
//!
//! The final layer's token after a context is `t* = H(seed, window) mod V`,
//! where `window` is the last `w` context tokens. Layer `l` emits `t*` when a
//! uniform draw `U` falls below `alpha(l)` and otherwise emits a decoy that is
//! never `t*`. All hashing goes through [`crate::hash::mix64`]:
//!
//! ```text
//! h      = fold(mix64(seed ^ TAG_CONTEXT), window tokens...)   fold(h,t) = mix64(h ^ t)
//! t*     = mix64(h ^ TAG_TARGET) mod V
//! U      = top53(mix64(h ^ TAG_AGREE)) / 2^53                  (nested coupling)
//!        = top53(mix64(h ^ mix64(TAG_LAYER ^ l))) / 2^53       (independent coupling)
//! decoy  = d + (d >= t*),  d = mix64(h ^ TAG_DECOY) mod (V - 1)
//! ```
//!
//! With nested coupling one draw is shared by all layers, so a layer that is
//! right implies every deeper layer with higher agreement is right too. The
//! decoy depends only on the context, so wrong layers agree with each other.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{fold, mix64, unit_interval};
use crate::model::{check_span, HiddenState, LayerRange, ModelBackend, TokenDistribution, TokenId};
use crate::state::{Extension, KvBlock, LayeredState};

pub const TAG_CONTEXT: u64 = 0x6374_785F_6861_7368; // "ctx_hash"
pub const TAG_TARGET: u64 = 0x7461_7267_6574_5F74; // "target_t"
pub const TAG_AGREE: u64 = 0x6167_7265_655F_7531; // "agree_u1"
pub const TAG_LAYER: u64 = 0x6C61_7965_725F_7461; // "layer_ta"
pub const TAG_DECOY: u64 = 0x6465_636F_795F_746B; // "decoy_tk"

pub const PRESET_NAMES: [&str; 2] = ["fig3-69", "llama70b-sharegpt"];

/// Per-layer probability that a layer's greedy token equals the final layer's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AgreementProfile {
    alpha: Vec<f64>,
}

impl TryFrom<Vec<f64>> for AgreementProfile {
    type Error = Error;

    fn try_from(alpha: Vec<f64>) -> Result<Self> {
        Self::from_values(alpha)
    }
}

impl From<AgreementProfile> for Vec<f64> {
    fn from(p: AgreementProfile) -> Self {
        p.alpha
    }
}

impl AgreementProfile {
    /// Explicit values for layers `1..=n`; the last must be 1.
    pub fn from_values(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::config("agreement_profile", "profile is empty"));
        }
        if let Some((i, a)) = alpha
            .iter()
            .enumerate()
            .find(|(_, a)| !(0.0..=1.0).contains(*a))
        {
            return Err(Error::config(
                "agreement_profile",
                format!("alpha({}) = {a} outside [0, 1]", i + 1),
            ));
        }
        if *alpha.last().unwrap() != 1.0 {
            return Err(Error::config(
                "agreement_profile",
                "the final layer must agree with itself (alpha = 1)",
            ));
        }
        Ok(Self { alpha })
    }

    /// Same agreement at every layer below the last.
    pub fn constant(n_layers: usize, alpha: f64) -> Result<Self> {
        let mut v = vec![alpha; n_layers];
        if let Some(last) = v.last_mut() {
            *last = 1.0;
        }
        Self::from_values(v)
    }

    /// Piecewise-linear interpolation through `anchors` (layer, alpha), with
    /// an implicit anchor `(0, 0.0)` and `(n_layers, 1.0)`.
    pub fn interpolated(n_layers: usize, anchors: &BTreeMap<usize, f64>) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::config("n_layers", "n_layers must be positive"));
        }
        let mut points: BTreeMap<usize, f64> = BTreeMap::new();
        points.insert(0, 0.0);
        for (&l, &a) in anchors {
            if l == 0 || l > n_layers {
                return Err(Error::config(
                    "agreement_profile",
                    format!("anchor layer {l} outside 1..={n_layers}"),
                ));
            }
            points.insert(l, a);
        }
        match points.get(&n_layers) {
            Some(&a) if a != 1.0 => {
                return Err(Error::config(
                    "agreement_profile",
                    "the final layer must agree with itself (alpha = 1)",
                ))
            }
            _ => {
                points.insert(n_layers, 1.0);
            }
        }
        let pts: Vec<(usize, f64)> = points.into_iter().collect();
        let alpha = (1..=n_layers)
            .map(|l| {
                let hi = pts.iter().position(|&(pl, _)| pl >= l).expect("last anchor is n_layers");
                let (l1, a1) = pts[hi];
                if l1 == l {
                    return a1;
                }
                let (l0, a0) = pts[hi - 1];
                a0 + (a1 - a0) * (l - l0) as f64 / (l1 - l0) as f64
            })
            .collect();
        Self::from_values(alpha)
    }

    /// Each layer removes the same fraction of the remaining disagreement:
    /// `alpha(l) = 1 - (1 - anchor_alpha)^(l / anchor_layer)`, pinned to 1 at
    /// the final layer.
    pub fn geometric(n_layers: usize, anchor_layer: usize, anchor_alpha: f64) -> Result<Self> {
        if anchor_layer == 0 || anchor_layer >= n_layers {
            return Err(Error::config(
                "agreement_profile",
                format!("anchor layer {anchor_layer} must lie in 1..{n_layers}"),
            ));
        }
        if !(0.0..1.0).contains(&anchor_alpha) {
            return Err(Error::config("agreement_profile", "anchor alpha must be in [0, 1)"));
        }
        let miss = 1.0 - anchor_alpha;
        let mut alpha: Vec<f64> = (1..=n_layers)
            .map(|l| {
                if l == anchor_layer {
                    anchor_alpha
                } else {
                    1.0 - miss.powf(l as f64 / anchor_layer as f64)
                }
            })
            .collect();
        *alpha.last_mut().unwrap() = 1.0;
        Self::from_values(alpha)
    }

    pub fn n_layers(&self) -> usize {
        self.alpha.len()
    }

    /// Agreement at `layer` (1-based).
    pub fn at(&self, layer: usize) -> f64 {
        self.alpha[layer - 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha
    }

    pub fn is_monotone(&self) -> bool {
        self.alpha.windows(2).all(|w| w[0] <= w[1])
    }
}

/// How the per-layer agreement draws relate across layers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerCoupling {
    /// One draw per context shared by all layers.
    #[default]
    Nested,
    /// An independent draw per (context, layer).
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModelSpec {
    pub vocab_size: usize,
    pub seed: u64,
    pub agreement: AgreementProfile,
    #[serde(default = "default_window")]
    pub context_window: usize,
    #[serde(default)]
    pub coupling: LayerCoupling,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
}

fn default_window() -> usize {
    4
}

fn default_max_seq_len() -> usize {
    4096
}

impl SyntheticModelSpec {
    pub fn new(vocab_size: usize, seed: u64, agreement: AgreementProfile) -> Self {
        Self {
            vocab_size,
            seed,
            agreement,
            context_window: default_window(),
            coupling: LayerCoupling::default(),
            max_seq_len: default_max_seq_len(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.agreement.n_layers()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers() < 3 {
            return Err(Error::config("n_layers", "n_layers must be >= 3"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "vocab_size must be >= 2"));
        }
        if self.context_window == 0 {
            return Err(Error::config("context_window", "context_window must be positive"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config("max_seq_len", "max_seq_len must be positive"));
        }
        Ok(())
    }
}

/// Builds a named calibrated spec. `n_layers` overrides the depth of
/// `fig3-69` (default 32); `llama70b-sharegpt` is fixed at 80 layers.
///
/// * `fig3-69`: geometric profile with `alpha(ceil(L/4)) = 0.69`.
/// * `llama70b-sharegpt`: `alpha(10) = 0.397`, `alpha(20) = 0.581`, linear in
///   between and toward `(0, 0)` and `(80, 1)`.
pub fn calibrate_preset(name: &str, n_layers: Option<usize>) -> Result<SyntheticModelSpec> {
    let agreement = match name {
        "fig3-69" => {
            let n = n_layers.unwrap_or(32);
            if n < 3 {
                return Err(Error::config("n_layers", "n_layers must be >= 3"));
            }
            AgreementProfile::geometric(n, n.div_ceil(4), 0.69)?
        }
        "llama70b-sharegpt" => {
            if n_layers.is_some_and(|n| n != 80) {
                return Err(Error::config(
                    "n_layers",
                    "preset llama70b-sharegpt is defined for 80 layers",
                ));
            }
            AgreementProfile::interpolated(80, &BTreeMap::from([(10, 0.397), (20, 0.581)]))?
        }
        other => {
            return Err(Error::UnknownPreset {
                name: other.to_string(),
                available: PRESET_NAMES.join(", "),
            })
        }
    };
    Ok(SyntheticModelSpec::new(128, 0, agreement))
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    spec: SyntheticModelSpec,
}

impl SyntheticModel {
    pub fn new(spec: SyntheticModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &SyntheticModelSpec {
        &self.spec
    }

    /// Hash of the trailing window of `context`.
    pub fn context_hash(&self, context: &[TokenId]) -> u64 {
        let start = context.len().saturating_sub(self.spec.context_window);
        context[start..]
            .iter()
            .fold(mix64(self.spec.seed ^ TAG_CONTEXT), |h, &t| fold(h, t))
    }

    /// Final-layer token after a context with hash `h`.
    pub fn target_token(&self, h: u64) -> TokenId {
        (mix64(h ^ TAG_TARGET) % self.spec.vocab_size as u64) as TokenId
    }

    fn agreement_draw(&self, h: u64, layer: usize) -> f64 {
        match self.spec.coupling {
            LayerCoupling::Nested => unit_interval(mix64(h ^ TAG_AGREE)),
            LayerCoupling::Independent => unit_interval(mix64(h ^ mix64(TAG_LAYER ^ layer as u64))),
        }
    }

    fn decoy(&self, h: u64, target: TokenId) -> TokenId {
        let d = (mix64(h ^ TAG_DECOY) % (self.spec.vocab_size as u64 - 1)) as TokenId;
        if d >= target {
            d + 1
        } else {
            d
        }
    }

    fn token_for_hash(&self, layer: usize, h: u64) -> TokenId {
        let target = self.target_token(h);
        if layer >= self.spec.n_layers() || self.agreement_draw(h, layer) < self.spec.agreement.at(layer) {
            target
        } else {
            self.decoy(h, target)
        }
    }

    /// Greedy token of `layer` after `context`.
    pub fn predict_token(&self, layer: usize, context: &[TokenId]) -> TokenId {
        self.token_for_hash(layer, self.context_hash(context))
    }

    /// One-hot next-token distribution of `layer` after `context`.
    pub fn predict(&self, layer: usize, context: &[TokenId]) -> TokenDistribution {
        let token = self.predict_token(layer, context);
        TokenDistribution {
            logits: self.one_hot(token),
            position: context.len().saturating_sub(1),
            source_layer: layer,
        }
    }

    fn one_hot(&self, token: TokenId) -> Vec<f64> {
        let mut v = vec![0.0; self.spec.vocab_size];
        v[token as usize] = 1.0;
        v
    }
}

impl ModelBackend for SyntheticModel {
    fn n_layers(&self) -> usize {
        self.spec.n_layers()
    }

    fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.spec.max_seq_len
    }

    fn hidden_width(&self) -> usize {
        self.spec.vocab_size
    }

    fn max_top_k(&self) -> Option<usize> {
        Some(1)
    }

    /// Bookkeeping-only forward pass: each KV entry is `[token]` / `[context
    /// hash]` and each hidden state is the one-hot prediction of its layer.
    fn forward_range(
        &self,
        range: LayerRange,
        tokens: &[TokenId],
        span: Range<usize>,
        state: &mut LayeredState,
    ) -> Result<Vec<HiddenState>> {
        check_span(self, range, tokens, &span)?;
        state.check_forward(range, &span)?;
        if span.is_empty() {
            return Ok(Vec::new());
        }
        let hashes: Vec<u64> = span.clone().map(|p| self.context_hash(&tokens[..=p])).collect();

        let mut ext = Extension::new(range, span.clone(), tokens[span.clone()].to_vec());
        for layer in range.layers() {
            let mut kv = KvBlock::with_capacity(1, span.len());
            for (p, &h) in span.clone().zip(&hashes) {
                kv.keys.push(f64::from(tokens[p]));
                kv.values.push((h >> 11) as f64);
            }
            ext.kv.push(kv);
            if state.is_exit(layer) {
                let values = hashes
                    .iter()
                    .flat_map(|&h| self.one_hot(self.token_for_hash(layer, h)))
                    .collect();
                ext.push_hidden(layer, values);
            }
        }
        state.extend(ext)?;

        Ok(span
            .zip(&hashes)
            .map(|(position, &h)| HiddenState {
                position,
                layer: range.end(),
                values: self.one_hot(self.token_for_hash(range.end(), h)),
            })
            .collect())
    }

    fn exit_logits(&self, hidden: &HiddenState) -> Result<TokenDistribution> {
        if hidden.values.len() != self.spec.vocab_size {
            return Err(Error::Shape {
                expected: self.spec.vocab_size,
                actual: hidden.values.len(),
            });
        }
        Ok(TokenDistribution {
            logits: hidden.values.clone(),
            position: hidden.position,
            source_layer: hidden.layer,
        })
    }
}
