//! Structural verification-wall table for pairs of model depths.

use hispec_core::verification_wall_ratio;
use serde::Serialize;

use crate::config::{NamedDepth, WallGroup, WallSpec};
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WallRow {
    pub group: String,
    pub target: String,
    pub target_layers: usize,
    pub draft: String,
    pub draft_layers: usize,
    pub positions_per_verify: usize,
    pub ratio: f64,
}

fn depth(name: &str, layers: usize) -> NamedDepth {
    NamedDepth { name: name.into(), layers }
}

/// Published layer counts of two model families.
pub fn default_spec() -> WallSpec {
    let opt = [depth("opt-1.3b", 24), depth("opt-2.7b", 32), depth("opt-6.7b", 32)];
    let llama = [depth("llama-3.2-1b", 16), depth("llama-3.2-3b", 28), depth("llama-3.1-8b", 32)];
    WallSpec {
        groups: vec![
            WallGroup { target: depth("opt-66b", 64), drafts: opt.to_vec() },
            WallGroup { target: depth("llama-3.1-70b", 80), drafts: llama.to_vec() },
            WallGroup { target: depth("llama-3.1-405b", 126), drafts: llama.to_vec() },
        ],
        positions_per_verify: hispec_core::DEFAULT_WINDOW,
    }
}

pub fn wall_table(spec: &WallSpec) -> Result<Vec<WallRow>, CliError> {
    let mut rows = Vec::new();
    for g in &spec.groups {
        for d in &g.drafts {
            rows.push(WallRow {
                group: g.target.name.clone(),
                target: g.target.name.clone(),
                target_layers: g.target.layers,
                draft: d.name.clone(),
                draft_layers: d.layers,
                positions_per_verify: spec.positions_per_verify,
                ratio: verification_wall_ratio(d.layers, g.target.layers, spec.positions_per_verify)?,
            });
        }
    }
    Ok(rows)
}

/// `(min, max)` ratio over the table.
pub fn ratio_range(rows: &[WallRow]) -> Option<(f64, f64)> {
    let first = rows.first()?.ratio;
    Some(rows.iter().fold((first, first), |(lo, hi), r| (lo.min(r.ratio), hi.max(r.ratio))))
}
