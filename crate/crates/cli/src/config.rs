//! Declarative experiment configuration (JSON).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use hispec_core::{
    calibrate_preset, default_exit_layers, AcceptancePolicy, AgreementProfile, LayerCoupling,
    ModelBackend, ModelConfig, SyntheticModel, SyntheticModelSpec, TokenId, ToyTransformer,
    DEFAULT_DRAFT_LEN, DEFAULT_WINDOW,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub backend: BackendSpec,
    /// Empty means the default hierarchical configuration.
    #[serde(default)]
    pub strategies: Vec<StrategySpec>,
    #[serde(default)]
    pub prompts: PromptSpec,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub eos_token: Option<TokenId>,
    #[serde(default)]
    pub policy: AcceptancePolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ablation: Option<AblationSpec>,
    #[serde(default)]
    pub wall: Option<WallSpec>,
}

fn default_max_new() -> usize {
    64
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Synthetic {
        /// Preset name; mutually exclusive with `profile` and `anchors`.
        #[serde(default)]
        preset: Option<String>,
        #[serde(default)]
        n_layers: Option<usize>,
        /// Explicit per-layer agreement, layers 1..=n.
        #[serde(default)]
        profile: Option<Vec<f64>>,
        /// Sparse `layer -> alpha` anchors, linearly interpolated. Keys are
        /// layer numbers as JSON strings.
        #[serde(default)]
        anchors: Option<BTreeMap<String, f64>>,
        #[serde(default)]
        vocab_size: Option<usize>,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        context_window: Option<usize>,
        #[serde(default)]
        coupling: Option<LayerCoupling>,
    },
    Toy(ModelConfig),
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Synthetic {
            preset: Some("fig3-69".into()),
            n_layers: None,
            profile: None,
            anchors: None,
            vocab_size: None,
            seed: None,
            context_window: None,
            coupling: None,
        }
    }
}

impl BackendSpec {
    pub fn build(&self) -> Result<Arc<dyn ModelBackend>, CliError> {
        match self {
            BackendSpec::Toy(cfg) => Ok(Arc::new(ToyTransformer::new(cfg.clone())?)),
            BackendSpec::Synthetic {
                preset,
                n_layers,
                profile,
                anchors,
                vocab_size,
                seed,
                context_window,
                coupling,
            } => {
                let sources = [preset.is_some(), profile.is_some(), anchors.is_some()];
                let mut spec = match (preset, profile, anchors) {
                    (Some(name), None, None) => calibrate_preset(name, *n_layers)?,
                    (None, Some(values), None) => {
                        if n_layers.is_some_and(|n| n != values.len()) {
                            return Err(CliError::config("n_layers does not match the profile length"));
                        }
                        SyntheticModelSpec::new(128, 0, AgreementProfile::from_values(values.clone())?)
                    }
                    (None, None, Some(points)) => {
                        let n = n_layers.ok_or_else(|| CliError::config("anchors need n_layers"))?;
                        let points = points
                            .iter()
                            .map(|(k, &v)| {
                                k.trim()
                                    .parse::<usize>()
                                    .map(|l| (l, v))
                                    .map_err(|_| CliError::config(format!("anchor key {k:?} is not a layer number")))
                            })
                            .collect::<Result<BTreeMap<_, _>, _>>()?;
                        SyntheticModelSpec::new(128, 0, AgreementProfile::interpolated(n, &points)?)
                    }
                    _ => {
                        let n = sources.iter().filter(|&&s| s).count();
                        return Err(CliError::config(format!(
                            "synthetic backend needs exactly one of preset, profile, anchors (got {n})"
                        )));
                    }
                };
                if let Some(v) = vocab_size {
                    spec.vocab_size = *v;
                }
                if let Some(s) = seed {
                    spec.seed = *s;
                }
                if let Some(w) = context_window {
                    spec.context_window = *w;
                }
                if let Some(c) = coupling {
                    spec.coupling = *c;
                }
                Ok(Arc::new(SyntheticModel::new(spec)?))
            }
        }
    }
}

/// Layer choices for a grid axis: an explicit list or every valid layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerGrid {
    List(Vec<usize>),
    Keyword(GridKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKeyword {
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategySpec {
    Vanilla,
    Selfspec {
        #[serde(default)]
        draft_layers: Option<LayerGrid>,
        #[serde(default = "default_draft_lens")]
        draft_len: Vec<usize>,
    },
    Hispec {
        #[serde(default)]
        draft_layers: Option<LayerGrid>,
        #[serde(default)]
        verify_layers: Option<LayerGrid>,
        #[serde(default = "default_draft_lens")]
        draft_len: Vec<usize>,
        #[serde(default = "default_windows")]
        window: Vec<usize>,
    },
}

fn default_draft_lens() -> Vec<usize> {
    vec![DEFAULT_DRAFT_LEN]
}

fn default_windows() -> Vec<usize> {
    vec![DEFAULT_WINDOW]
}

impl StrategySpec {
    pub fn default_hispec() -> Self {
        StrategySpec::Hispec {
            draft_layers: None,
            verify_layers: None,
            draft_len: default_draft_lens(),
            window: default_windows(),
        }
    }
}

/// Expands a grid axis. `None` means the default placement value.
pub(crate) fn expand(grid: &Option<LayerGrid>, default: usize, n_layers: usize) -> Vec<usize> {
    match grid {
        None => vec![default],
        Some(LayerGrid::List(v)) => v.clone(),
        Some(LayerGrid::Keyword(GridKeyword::All)) => (1..n_layers).collect(),
    }
}

pub(crate) fn default_layers(n_layers: usize) -> (usize, usize) {
    default_exit_layers(n_layers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    #[serde(default = "default_prompt_count")]
    pub count: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Plain-text file, one prompt per non-empty line, tokenized bytewise.
    #[serde(default)]
    pub text_file: Option<String>,
}

fn default_prompt_count() -> usize {
    32
}

fn default_min_len() -> usize {
    4
}

fn default_max_len() -> usize {
    16
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            count: default_prompt_count(),
            min_len: default_min_len(),
            max_len: default_max_len(),
            text_file: None,
        }
    }
}

/// Byte-level tokenizer shim: each byte maps to `byte % vocab_size`.
pub fn tokenize_bytes(text: &str, vocab_size: usize) -> Vec<TokenId> {
    text.bytes().map(|b| (b as usize % vocab_size) as TokenId).collect()
}

/// Seeded random prompts with lengths uniform in `min_len..=max_len`.
pub fn random_prompts(spec: &PromptSpec, vocab_size: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.count)
        .map(|_| {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            (0..len).map(|_| rng.gen_range(0..vocab_size) as TokenId).collect()
        })
        .collect()
}

impl PromptSpec {
    fn validate(&self) -> Result<(), CliError> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(CliError::config("prompts: need 1 <= min_len <= max_len"));
        }
        Ok(())
    }

    pub fn load(&self, vocab_size: usize, seed: u64, base: Option<&Path>) -> Result<Vec<Vec<TokenId>>, CliError> {
        match &self.text_file {
            None => Ok(random_prompts(self, vocab_size, seed)),
            Some(path) => {
                let path = match base {
                    Some(dir) if Path::new(path).is_relative() => dir.join(path),
                    _ => Path::new(path).to_path_buf(),
                };
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::config(format!("cannot read prompt file {}: {e}", path.display())))?;
                let prompts: Vec<_> = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| tokenize_bytes(l, vocab_size))
                    .collect();
                if prompts.is_empty() {
                    return Err(CliError::config("prompt file has no non-empty lines"));
                }
                Ok(prompts)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationParameter {
    DraftLen,
    Window,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub parameter: AblationParameter,
    pub values: Vec<usize>,
}

/// A named model depth for the verification-wall table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDepth {
    pub name: String,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallGroup {
    pub target: NamedDepth,
    pub drafts: Vec<NamedDepth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallSpec {
    pub groups: Vec<WallGroup>,
    #[serde(default = "default_positions")]
    pub positions_per_verify: usize,
}

fn default_positions() -> usize {
    DEFAULT_WINDOW
}

impl ExperimentConfig {
    /// Parses JSON, reporting syntax and type errors with their line number.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            CliError::config(format!("line {}, column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.max_new_tokens == 0 {
            return Err(CliError::config("max_new_tokens must be >= 1"));
        }
        if let AcceptancePolicy::TopK(0) = self.policy {
            return Err(CliError::config("policy: top-k needs k >= 1"));
        }
        self.prompts.validate()
    }

    pub fn strategies(&self) -> Vec<StrategySpec> {
        if self.strategies.is_empty() {
            vec![StrategySpec::default_hispec()]
        } else {
            self.strategies.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_runs_default_hispec_on_fig3_preset() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg.strategies(), vec![StrategySpec::default_hispec()]);
        assert_eq!(cfg.backend.build().unwrap().n_layers(), 32);
        assert_eq!(cfg.max_new_tokens, 64);
    }

    #[test]
    fn parse_error_names_line() {
        let err = ExperimentConfig::from_json("{\n  \"seed\": 1,\n  \"max_new_tokens\": \"x\"\n}").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = ExperimentConfig::from_json("{\n\n  \"bogus\": 1\n}").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn strategy_grids_parse() {
        let cfg = ExperimentConfig::from_json(
            r#"{"strategies": [
                {"kind": "vanilla"},
                {"kind": "selfspec", "draft_layers": "all"},
                {"kind": "hispec", "draft_layers": [2, 4], "verify_layers": "all", "window": [2, 4]}
            ]}"#,
        )
        .unwrap();
        assert_eq!(cfg.strategies.len(), 3);
        assert_eq!(expand(&Some(LayerGrid::Keyword(GridKeyword::All)), 1, 5), vec![1, 2, 3, 4]);
    }

    #[test]
    fn backend_variants() {
        let toy: ExperimentConfig = ExperimentConfig::from_json(
            r#"{"backend": {"kind": "toy", "n_layers": 4, "d_model": 8, "n_heads": 2,
                "vocab_size": 16, "max_seq_len": 64, "seed": 3}}"#,
        )
        .unwrap();
        assert_eq!(toy.backend.build().unwrap().n_layers(), 4);
        let anchors = ExperimentConfig::from_json(
            r#"{"backend": {"kind": "synthetic", "n_layers": 10, "anchors": {"5": 0.5}}}"#,
        )
        .unwrap();
        assert_eq!(anchors.backend.build().unwrap().n_layers(), 10);
        let both = ExperimentConfig::from_json(
            r#"{"backend": {"kind": "synthetic", "preset": "fig3-69", "profile": [0.5, 1.0]}}"#,
        )
        .unwrap();
        assert!(both.backend.build().is_err());
        let unknown = ExperimentConfig::from_json(r#"{"backend": {"kind": "synthetic", "preset": "nope"}}"#).unwrap();
        assert!(unknown.backend.build().err().unwrap().to_string().contains("fig3-69"));
    }

    #[test]
    fn byte_tokenizer_and_prompts() {
        assert_eq!(tokenize_bytes("AB", 64), vec![65 % 64, 66 % 64]);
        let spec = PromptSpec { count: 5, min_len: 2, max_len: 3, text_file: None };
        let a = random_prompts(&spec, 10, 4);
        assert_eq!(a, random_prompts(&spec, 10, 4));
        assert!(a.iter().all(|p| (2..=3).contains(&p.len()) && p.iter().all(|&t| t < 10)));
    }
}

/// Parses `1,2,4` or an inclusive range `1..8`. Empty input is an empty list.
pub fn parse_values(text: &str) -> Result<Vec<usize>, CliError> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|e| CliError::config(format!("bad value {s:?}: {e}")))
    };
    if let Some((a, b)) = text.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        return Ok((a..=b).collect());
    }
    text.split(',').map(num).collect()
}

#[cfg(test)]
mod value_tests {
    use super::parse_values;

    #[test]
    fn value_lists() {
        assert_eq!(parse_values("1,2, 4").unwrap(), vec![1, 2, 4]);
        assert_eq!(parse_values("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_values("5..2").unwrap(), Vec::<usize>::new());
        assert!(parse_values("").unwrap().is_empty());
        assert!(parse_values("x").is_err());
    }
}
