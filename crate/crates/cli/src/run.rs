//! Grid evaluation: each parameter point decodes every prompt and is
//! aggregated into one result row.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use hispec_core::{
    hispec_decode, relative_throughput, selfspec_decode, vanilla_decode, CostLedger,
    HiSpecConfig, ModelBackend, SelfSpecConfig, TokenId, TraceStats,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{default_layers, expand, AblationParameter, ExperimentConfig, StrategySpec};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Vanilla,
    Selfspec,
    Hispec,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Selfspec => "selfspec",
            Strategy::Hispec => "hispec",
        })
    }
}

/// One parameter point. Field order is the report sort order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Point {
    pub strategy: Strategy,
    pub draft_layer: Option<usize>,
    pub verify_layer: Option<usize>,
    pub draft_len: Option<usize>,
    pub window: Option<usize>,
}

impl Point {
    pub fn vanilla() -> Self {
        Self {
            strategy: Strategy::Vanilla,
            draft_layer: None,
            verify_layer: None,
            draft_len: None,
            window: None,
        }
    }

    pub fn selfspec(draft_layer: usize, draft_len: usize) -> Self {
        Self {
            strategy: Strategy::Selfspec,
            draft_layer: Some(draft_layer),
            draft_len: Some(draft_len),
            ..Self::vanilla()
        }
    }

    pub fn hispec(draft_layer: usize, verify_layer: usize, draft_len: usize, window: usize) -> Self {
        Self {
            strategy: Strategy::Hispec,
            draft_layer: Some(draft_layer),
            verify_layer: Some(verify_layer),
            draft_len: Some(draft_len),
            window: Some(window),
        }
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
        write!(
            f,
            "{} L_d={} L_i={} N_d={} N_i={}",
            self.strategy,
            show(self.draft_layer),
            show(self.verify_layer),
            show(self.draft_len),
            show(self.window)
        )
    }
}

/// Aggregate over all prompts of one point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub strategy: Strategy,
    #[serde(rename = "L_d")]
    pub draft_layer: Option<usize>,
    #[serde(rename = "L_i")]
    pub verify_layer: Option<usize>,
    #[serde(rename = "L_f")]
    pub full_layer: usize,
    #[serde(rename = "N_d")]
    pub draft_len: Option<usize>,
    #[serde(rename = "N_i")]
    pub window: Option<usize>,
    pub prompts: usize,
    pub committed_tokens: usize,
    pub seq_units: u64,
    pub pos_layer_units: u64,
    pub acc_rate_intermediate: Option<f64>,
    pub acc_rate_target: Option<f64>,
    pub flushed: usize,
    pub rel_throughput: Option<f64>,
}

impl Row {
    pub fn point(&self) -> Point {
        Point {
            strategy: self.strategy,
            draft_layer: self.draft_layer,
            verify_layer: self.verify_layer,
            draft_len: self.draft_len,
            window: self.window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped {
    pub point: Point,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunResult {
    pub rows: Vec<Row>,
    pub skipped: Vec<Skipped>,
}

/// Everything a grid evaluation needs, resolved from a config.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub backend: Arc<dyn ModelBackend>,
    pub prompts: Vec<Vec<TokenId>>,
}

struct Totals {
    committed: usize,
    ledger: CostLedger,
    stats: TraceStats,
}

impl Experiment {
    /// `base_dir` resolves relative prompt-file paths.
    pub fn new(config: ExperimentConfig, base_dir: Option<&Path>) -> Result<Self, CliError> {
        let backend = config.backend.build()?;
        let prompts = config.prompts.load(backend.vocab_size(), config.seed, base_dir)?;
        Ok(Self {
            config,
            backend,
            prompts,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.backend.n_layers()
    }

    fn validate_point(&self, p: &Point) -> Result<(), String> {
        let n = self.n_layers();
        let res = match p.strategy {
            Strategy::Vanilla => Ok(()),
            Strategy::Selfspec => self.selfspec_config(p).validate(n),
            Strategy::Hispec => self.hispec_config(p).validate(n),
        };
        res.map_err(|e| e.to_string())
    }

    pub fn hispec_config(&self, p: &Point) -> HiSpecConfig {
        let n = self.n_layers();
        HiSpecConfig {
            draft_layer: p.draft_layer.unwrap_or(0),
            verify_layer: p.verify_layer.unwrap_or(0),
            full_layer: n,
            draft_len: p.draft_len.unwrap_or(0),
            window: p.window.unwrap_or(0),
            policy: self.config.policy,
            max_new_tokens: self.config.max_new_tokens,
            eos_token: self.config.eos_token,
        }
    }

    fn selfspec_config(&self, p: &Point) -> SelfSpecConfig {
        SelfSpecConfig {
            policy: self.config.policy,
            eos_token: self.config.eos_token,
            ..SelfSpecConfig::new(
                self.n_layers(),
                p.draft_layer.unwrap_or(0),
                p.draft_len.unwrap_or(0),
                self.config.max_new_tokens,
            )
        }
    }

    fn evaluate(&self, p: &Point) -> Result<Totals, CliError> {
        let b = self.backend.as_ref();
        let mut totals = Totals {
            committed: 0,
            ledger: CostLedger::new(),
            stats: TraceStats::default(),
        };
        for prompt in &self.prompts {
            let out = match p.strategy {
                Strategy::Vanilla => vanilla_decode(b, prompt, self.config.max_new_tokens, None, self.config.eos_token)?,
                Strategy::Selfspec => selfspec_decode(b, prompt, &self.selfspec_config(p))?,
                Strategy::Hispec => hispec_decode(b, prompt, &self.hispec_config(p))?,
            };
            totals.committed += out.tokens.len();
            totals.ledger.merge(&out.ledger);
            totals.stats.merge(&out.stats());
        }
        Ok(totals)
    }

    fn row(&self, p: &Point, t: &Totals, baseline: &Totals) -> Result<Row, CliError> {
        let rel = relative_throughput((&t.ledger, t.committed), (&baseline.ledger, baseline.committed))?;
        Ok(Row {
            strategy: p.strategy,
            draft_layer: p.draft_layer,
            verify_layer: p.verify_layer,
            full_layer: self.n_layers(),
            draft_len: p.draft_len,
            window: p.window,
            prompts: self.prompts.len(),
            committed_tokens: t.committed,
            seq_units: t.ledger.sequential_units(),
            pos_layer_units: t.ledger.position_layer_units(),
            acc_rate_intermediate: match p.strategy {
                Strategy::Hispec => t.stats.intermediate_acceptance(),
                _ => None,
            },
            acc_rate_target: match p.strategy {
                Strategy::Vanilla => None,
                _ => t.stats.target_acceptance(),
            },
            flushed: t.stats.flushed,
            rel_throughput: Some(rel),
        })
    }

    /// Evaluates `points` concurrently; rows come back in sorted point order
    /// regardless of scheduling. Invalid points are skipped with a reason.
    pub fn run_points(&self, points: impl IntoIterator<Item = Point>) -> Result<RunResult, CliError> {
        let unique: BTreeSet<Point> = points.into_iter().collect();
        let mut valid = Vec::new();
        let mut skipped = Vec::new();
        for p in unique {
            match self.validate_point(&p) {
                Ok(()) => valid.push(p),
                Err(reason) => {
                    log::warn!("skipping {p}: {reason}");
                    skipped.push(Skipped { point: p, reason });
                }
            }
        }
        if valid.is_empty() {
            return Ok(RunResult { rows: Vec::new(), skipped });
        }
        let baseline = self.evaluate(&Point::vanilla())?;
        let rows = valid
            .par_iter()
            .map(|p| {
                let totals = if p.strategy == Strategy::Vanilla {
                    return self.row(p, &baseline, &baseline);
                } else {
                    self.evaluate(p)?
                };
                self.row(p, &totals, &baseline)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RunResult { rows, skipped })
    }

    /// Every grid point named by the configured strategies.
    pub fn sweep_points(&self) -> Vec<Point> {
        let n = self.n_layers();
        let (dd, di) = default_layers(n);
        let mut points = Vec::new();
        for s in self.config.strategies() {
            match s {
                StrategySpec::Vanilla => points.push(Point::vanilla()),
                StrategySpec::Selfspec { draft_layers, draft_len } => {
                    for ld in expand(&draft_layers, dd, n) {
                        for &nd in &draft_len {
                            points.push(Point::selfspec(ld, nd));
                        }
                    }
                }
                StrategySpec::Hispec {
                    draft_layers,
                    verify_layers,
                    draft_len,
                    window,
                } => {
                    let all_verify = matches!(verify_layers, Some(crate::config::LayerGrid::Keyword(_)));
                    for ld in expand(&draft_layers, dd, n) {
                        // "all" for the verifier means every layer above the draft.
                        let lis = if all_verify {
                            ((ld + 1)..n).collect()
                        } else {
                            expand(&verify_layers, di, n)
                        };
                        for li in lis {
                            for &nd in &draft_len {
                                for &ni in &window {
                                    points.push(Point::hispec(ld, li, nd, ni));
                                }
                            }
                        }
                    }
                }
            }
        }
        points
    }

    pub fn run_sweep(&self) -> Result<RunResult, CliError> {
        self.run_points(self.sweep_points())
    }

    /// Varies one parameter of the first hierarchical point in the config
    /// (the default placement when none is given).
    pub fn run_ablation(&self, parameter: AblationParameter, values: &[usize]) -> Result<RunResult, CliError> {
        let base = self
            .sweep_points()
            .into_iter()
            .find(|p| p.strategy == Strategy::Hispec)
            .unwrap_or_else(|| {
                let (d, i) = default_layers(self.n_layers());
                Point::hispec(d, i, hispec_core::DEFAULT_DRAFT_LEN, hispec_core::DEFAULT_WINDOW)
            });
        let points = values.iter().map(|&v| match parameter {
            AblationParameter::DraftLen => Point { draft_len: Some(v), ..base },
            AblationParameter::Window => Point { window: Some(v), ..base },
        });
        self.run_points(points)
    }

    /// Strategy comparison; with no strategies configured, compares vanilla,
    /// single-level speculation and the hierarchical default.
    pub fn run_compare(&self) -> Result<RunResult, CliError> {
        if self.config.strategies.is_empty() {
            let (d, i) = default_layers(self.n_layers());
            return self.run_points([
                Point::vanilla(),
                Point::selfspec(d, hispec_core::DEFAULT_DRAFT_LEN),
                Point::hispec(d, i, hispec_core::DEFAULT_DRAFT_LEN, hispec_core::DEFAULT_WINDOW),
            ]);
        }
        self.run_sweep()
    }
}
