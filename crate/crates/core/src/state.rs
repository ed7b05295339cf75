//! Layered KV cache and exit-layer hidden-state buffers.
//!
//! Speculation expands the state tentatively and verification prunes it back.
//! Every layer keeps a growable array with an explicit fill length; pruning is
//! truncation. Positions below the commit mark belong to tokens the full model
//! has verified and can no longer be pruned.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::hash;
use crate::model::{LayerRange, ModelBackend, TokenId};

/// Keys and values produced by one layer for a run of positions, flattened
/// row-major with `width` values per position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvBlock {
    pub width: usize,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

impl KvBlock {
    pub fn with_capacity(width: usize, positions: usize) -> Self {
        Self {
            width,
            keys: Vec::with_capacity(width * positions),
            values: Vec::with_capacity(width * positions),
        }
    }

    pub fn positions(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.keys.len() / self.width
        }
    }
}

/// A batch of new entries for `layers` x `positions`.
#[derive(Debug, Clone)]
pub struct Extension {
    pub layers: LayerRange,
    pub positions: Range<usize>,
    /// Tokens occupying `positions`. Recorded when `layers` starts at layer 1,
    /// otherwise checked against the recorded occupants.
    pub tokens: Vec<TokenId>,
    /// One block per layer in `layers`, in order.
    pub kv: Vec<KvBlock>,
    /// Hidden states for every buffered exit layer inside `layers`.
    pub hidden: Vec<(usize, Vec<f64>)>,
}

impl Extension {
    pub fn new(layers: LayerRange, positions: Range<usize>, tokens: Vec<TokenId>) -> Self {
        Self {
            layers,
            positions,
            tokens,
            kv: Vec::with_capacity(layers.len()),
            hidden: Vec::new(),
        }
    }

    pub fn push_hidden(&mut self, layer: usize, values: Vec<f64>) {
        self.hidden.push((layer, values));
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct LayerKv {
    width: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    len: usize,
}

impl LayerKv {
    fn truncate(&mut self, len: usize) {
        self.keys.truncate(len * self.width);
        self.values.truncate(len * self.width);
        self.len = len;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct HiddenBuffer {
    width: usize,
    values: Vec<f64>,
    len: usize,
}

/// Counts forward computations per `(layer, position, prefix)`, where the
/// prefix hash identifies the exact token context a position was computed in.
#[derive(Debug, Clone, Default, PartialEq)]
struct ComputeLog {
    counts: HashMap<(usize, usize, u64), u32>,
    total: u64,
    discarded: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredState {
    n_layers: usize,
    exits: Vec<usize>,
    layers: Vec<LayerKv>,
    hidden: BTreeMap<usize, HiddenBuffer>,
    tokens: Vec<TokenId>,
    prefix_hashes: Vec<u64>,
    committed: usize,
    log: Option<ComputeLog>,
}

impl LayeredState {
    /// Empty state for a model with `n_layers` layers buffering hidden states
    /// at `exit_layers`.
    pub fn new(n_layers: usize, exit_layers: &[usize]) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::config("n_layers", "n_layers must be positive"));
        }
        let mut exits = exit_layers.to_vec();
        exits.sort_unstable();
        exits.dedup();
        if let Some(&bad) = exits.iter().find(|&&l| l == 0 || l > n_layers) {
            return Err(Error::config(
                "exit_layers",
                format!("exit layer {bad} outside 1..={n_layers}"),
            ));
        }
        let hidden = exits.iter().map(|&l| (l, HiddenBuffer::default())).collect();
        Ok(Self {
            n_layers,
            exits,
            layers: vec![LayerKv::default(); n_layers],
            hidden,
            tokens: Vec::new(),
            prefix_hashes: Vec::new(),
            committed: 0,
            log: None,
        })
    }

    /// Enables per-(layer, position, context) compute counting.
    pub fn with_compute_log(mut self) -> Self {
        self.log = Some(ComputeLog::default());
        self
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn exit_layers(&self) -> &[usize] {
        &self.exits
    }

    pub fn is_exit(&self, layer: usize) -> bool {
        self.hidden.contains_key(&layer)
    }

    /// Number of positions with KV entries at `layer` (1-based).
    pub fn filled_len(&self, layer: usize) -> usize {
        self.layers[layer - 1].len
    }

    pub fn hidden_len(&self, layer: usize) -> Option<usize> {
        self.hidden.get(&layer).map(|b| b.len)
    }

    /// Positions verified by the full model; they cannot be pruned.
    pub fn committed_len(&self) -> usize {
        self.committed
    }

    pub fn tentative_len(&self, layer: usize) -> usize {
        self.filled_len(layer).saturating_sub(self.committed)
    }

    /// Tokens occupying the positions filled at layer 1.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.len == 0)
    }

    pub fn hidden(&self, layer: usize, position: usize) -> Result<&[f64]> {
        let buf = self.hidden.get(&layer).ok_or_else(|| {
            Error::alignment(layer, position, "no hidden-state buffer at this layer")
        })?;
        if position >= buf.len {
            return Err(Error::alignment(layer, position, "hidden state not computed"));
        }
        Ok(&buf.values[position * buf.width..(position + 1) * buf.width])
    }

    /// Keys and values of `layer` for positions `0..len`.
    pub fn kv_prefix(&self, layer: usize, len: usize) -> (&[f64], &[f64]) {
        let kv = &self.layers[layer - 1];
        let n = len.min(kv.len) * kv.width;
        (&kv.keys[..n], &kv.values[..n])
    }

    /// Key and value of one entry.
    pub fn kv(&self, layer: usize, position: usize) -> Option<(&[f64], &[f64])> {
        let kv = &self.layers[layer - 1];
        (position < kv.len).then(|| {
            let r = position * kv.width..(position + 1) * kv.width;
            (&kv.keys[r.clone()], &kv.values[r])
        })
    }

    /// Mutable access to one key row, for fault injection.
    pub fn key_mut(&mut self, layer: usize, position: usize) -> Option<&mut [f64]> {
        let kv = &mut self.layers[layer - 1];
        (position < kv.len).then(|| &mut kv.keys[position * kv.width..(position + 1) * kv.width])
    }

    /// Checks the preconditions of computing `range` over `span`.
    pub fn check_forward(&self, range: LayerRange, span: &Range<usize>) -> Result<()> {
        range.check_within(self.n_layers)?;
        for layer in range.layers() {
            let filled = self.filled_len(layer);
            if filled != span.start {
                return Err(Error::alignment(
                    layer,
                    span.start,
                    format!("layer is filled to {filled}, span must start there"),
                ));
            }
        }
        if range.start() > 1 && !span.is_empty() {
            let below = range.start() - 1;
            match self.hidden_len(below) {
                None => {
                    return Err(Error::alignment(
                        below,
                        span.start,
                        "no hidden-state buffer to resume from",
                    ))
                }
                Some(len) if len < span.end => {
                    return Err(Error::alignment(
                        below,
                        len.max(span.start),
                        "prerequisite hidden state missing",
                    ))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Appends tentative entries. Positions must start at the fill length of
    /// every layer in the extension.
    pub fn extend(&mut self, ext: Extension) -> Result<()> {
        let Extension {
            layers,
            positions,
            tokens,
            kv,
            hidden,
        } = ext;
        self.check_forward(layers, &positions)?;
        let count = positions.len();
        if tokens.len() != count {
            return Err(Error::alignment(
                layers.start(),
                positions.start,
                format!("{} tokens supplied for {count} positions", tokens.len()),
            ));
        }
        if kv.len() != layers.len() {
            return Err(Error::alignment(
                layers.start(),
                positions.start,
                format!("{} KV blocks for {} layers", kv.len(), layers.len()),
            ));
        }
        for (layer, block) in layers.layers().zip(&kv) {
            let existing = &self.layers[layer - 1];
            if block.positions() != count && !(count == 0 && block.keys.is_empty()) {
                return Err(Error::alignment(layer, positions.start, "KV block length mismatch"));
            }
            if block.values.len() != block.keys.len() {
                return Err(Error::alignment(layer, positions.start, "key/value length mismatch"));
            }
            if existing.len > 0 && existing.width != block.width {
                return Err(Error::alignment(layer, positions.start, "KV width changed"));
            }
        }
        let expected_exits: Vec<usize> = self
            .exits
            .iter()
            .copied()
            .filter(|&l| layers.contains(l))
            .collect();
        let given: Vec<usize> = hidden.iter().map(|(l, _)| *l).collect();
        if given != expected_exits {
            return Err(Error::alignment(
                layers.end(),
                positions.start,
                format!("hidden states supplied for {given:?}, buffered exits in range are {expected_exits:?}"),
            ));
        }
        for (layer, values) in &hidden {
            let buf = &self.hidden[layer];
            if count > 0 && values.len() % count != 0 {
                return Err(Error::alignment(*layer, positions.start, "ragged hidden block"));
            }
            if buf.len > 0 && count > 0 && values.len() / count != buf.width {
                return Err(Error::alignment(*layer, positions.start, "hidden width changed"));
            }
        }
        if layers.start() > 1 {
            if let Some(i) = tokens
                .iter()
                .zip(&self.tokens[positions.clone()])
                .position(|(a, b)| a != b)
            {
                return Err(Error::alignment(
                    layers.start(),
                    positions.start + i,
                    "token differs from the one occupying this position",
                ));
            }
        }
        if count == 0 {
            return Ok(());
        }

        if layers.start() == 1 {
            let mut h = self.prefix_hashes.last().copied().unwrap_or(hash::GOLDEN_GAMMA);
            for &t in &tokens {
                h = hash::fold(h, t);
                self.prefix_hashes.push(h);
            }
            self.tokens.extend(&tokens);
        }
        for (layer, block) in layers.layers().zip(kv) {
            let dst = &mut self.layers[layer - 1];
            dst.width = block.width;
            dst.keys.extend(block.keys);
            dst.values.extend(block.values);
            dst.len += count;
        }
        for (layer, values) in hidden {
            let buf = self.hidden.get_mut(&layer).expect("checked above");
            buf.width = values.len() / count;
            buf.values.extend(values);
            buf.len += count;
        }
        if let Some(log) = &mut self.log {
            for layer in layers.layers() {
                for p in positions.clone() {
                    *log.counts.entry((layer, p, self.prefix_hashes[p])).or_default() += 1;
                    log.total += 1;
                }
            }
        }
        Ok(())
    }

    /// Drops every entry at positions `>= keep_len` for the layers in
    /// `layers`, including buffered hidden states and, for layer 1, the
    /// recorded occupant tokens.
    pub fn prune_to(&mut self, layers: LayerRange, keep_len: usize) -> Result<()> {
        layers.check_within(self.n_layers)?;
        if keep_len < self.committed {
            return Err(Error::Protocol(format!(
                "cannot prune to {keep_len}: positions below {} are committed",
                self.committed
            )));
        }
        for layer in layers.layers() {
            if keep_len > self.filled_len(layer) {
                return Err(Error::alignment(
                    layer,
                    keep_len,
                    format!("cannot prune to {keep_len}, layer only filled to {}", self.filled_len(layer)),
                ));
            }
        }
        for layer in layers.layers() {
            if let Some(log) = self.log.as_mut() {
                // A pruned entry's work is wasted; recomputing it later in the
                // same context is a fresh computation, not a redundant one.
                for p in keep_len..self.layers[layer - 1].len {
                    if let Some(c) = log.counts.get_mut(&(layer, p, self.prefix_hashes[p])) {
                        log.discarded += u64::from(*c);
                        *c = 0;
                    }
                }
            }
            self.layers[layer - 1].truncate(keep_len);
            if let Some(buf) = self.hidden.get_mut(&layer) {
                buf.values.truncate(keep_len * buf.width);
                buf.len = buf.len.min(keep_len);
            }
        }
        if layers.start() == 1 {
            self.tokens.truncate(keep_len);
            self.prefix_hashes.truncate(keep_len);
        }
        Ok(())
    }

    /// Prunes every layer filled beyond `keep_len` down to it.
    pub fn rollback_to(&mut self, keep_len: usize) -> Result<()> {
        if keep_len < self.committed {
            return Err(Error::Protocol(format!(
                "cannot roll back to {keep_len}: positions below {} are committed",
                self.committed
            )));
        }
        // Layers are pruned top-down so the monotone fill invariant holds after
        // every step.
        for layer in (1..=self.n_layers).rev() {
            if self.filled_len(layer) > keep_len {
                self.prune_to(LayerRange::new(layer, layer)?, keep_len)?;
            }
        }
        if self.tokens.len() > keep_len {
            self.tokens.truncate(keep_len);
            self.prefix_hashes.truncate(keep_len);
        }
        Ok(())
    }

    /// Marks positions `0..len` as verified by the full model.
    pub fn commit(&mut self, len: usize) -> Result<()> {
        if len < self.committed {
            return Err(Error::Protocol(format!(
                "commit mark cannot move back from {} to {len}",
                self.committed
            )));
        }
        if let Some(layer) = (1..=self.n_layers).find(|&l| self.filled_len(l) < len) {
            return Err(Error::alignment(
                layer,
                self.filled_len(layer),
                format!("cannot commit {len} positions before they are computed"),
            ));
        }
        self.committed = len;
        Ok(())
    }

    /// Fill lengths must be non-increasing with depth: lower layers may run
    /// ahead of deeper ones, never behind.
    pub fn check_invariants(&self) -> Result<()> {
        for layer in 2..=self.n_layers {
            if self.filled_len(layer) > self.filled_len(layer - 1) {
                return Err(Error::alignment(
                    layer,
                    self.filled_len(layer - 1),
                    "deeper layer filled beyond a shallower one",
                ));
            }
        }
        for (&layer, buf) in &self.hidden {
            if buf.len != self.filled_len(layer) {
                return Err(Error::alignment(
                    layer,
                    buf.len.min(self.filled_len(layer)),
                    "hidden buffer out of step with KV",
                ));
            }
        }
        if self.tokens.len() != self.filled_len(1) {
            return Err(Error::alignment(1, self.tokens.len(), "occupant tokens out of step"));
        }
        Ok(())
    }

    /// Whether compute counting is enabled.
    pub fn has_compute_log(&self) -> bool {
        self.log.is_some()
    }

    /// Total layer-position computations performed so far.
    pub fn total_computes(&self) -> Option<u64> {
        self.log.as_ref().map(|l| l.total)
    }

    /// Layer-position computations whose results were later pruned.
    pub fn discarded_computes(&self) -> Option<u64> {
        self.log.as_ref().map(|l| l.discarded)
    }

    /// Number of times the live `(layer, position)` entry was computed in its
    /// current token context since it was last pruned.
    pub fn compute_count(&self, layer: usize, position: usize) -> Option<u32> {
        let log = self.log.as_ref()?;
        let h = *self.prefix_hashes.get(position)?;
        Some(log.counts.get(&(layer, position, h)).copied().unwrap_or(0))
    }

    /// Every filled `(layer, position, count)` whose count in its current
    /// context is not exactly one. Empty when each live entry was computed
    /// once and never recomputed.
    pub fn redundant_computes(&self) -> Vec<(usize, usize, u32)> {
        let mut out = Vec::new();
        if self.log.is_none() {
            return out;
        }
        for layer in 1..=self.n_layers {
            for p in 0..self.filled_len(layer) {
                let c = self.compute_count(layer, p).unwrap_or(0);
                if c != 1 {
                    out.push((layer, p, c));
                }
            }
        }
        out
    }
}

/// Maximum absolute discrepancy found at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiscrepancy {
    pub layer: usize,
    pub positions_checked: usize,
    pub kv_max_abs: f64,
    /// `None` when the layer has no hidden-state buffer.
    pub hidden_max_abs: Option<f64>,
    /// Position of the largest discrepancy, if any is nonzero.
    pub worst_position: Option<usize>,
}

impl LayerDiscrepancy {
    pub fn max_abs(&self) -> f64 {
        self.kv_max_abs.max(self.hidden_max_abs.unwrap_or(0.0))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConsistencyReport {
    pub layers: Vec<LayerDiscrepancy>,
}

impl ConsistencyReport {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.layers.iter().map(LayerDiscrepancy::max_abs).fold(0.0, f64::max)
    }

    pub fn is_clean(&self) -> bool {
        self.layers.iter().all(|l| l.max_abs() == 0.0)
    }

    /// Layers with a nonzero discrepancy.
    pub fn offenders(&self) -> impl Iterator<Item = &LayerDiscrepancy> {
        self.layers.iter().filter(|l| l.max_abs() != 0.0)
    }
}

fn abs_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d.is_nan() {
        f64::INFINITY
    } else {
        d
    }
}

fn max_row_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| abs_diff(*x, *y)).fold(0.0, f64::max)
}

/// Recomputes every cached KV entry and buffered hidden state of `state` from
/// `tokens` with a single monolithic forward pass and reports the largest
/// absolute discrepancy per layer. Layers with no entries are omitted.
pub fn consistency_check(
    state: &LayeredState,
    backend: &dyn ModelBackend,
    tokens: &[TokenId],
) -> ConsistencyReport {
    let filled = state.filled_len(1);
    if filled == 0 {
        return ConsistencyReport::default();
    }
    let usable = filled.min(tokens.len());
    let reference = (|| -> Result<LayeredState> {
        let mut fresh = backend.new_state(state.exit_layers())?;
        if usable > 0 {
            backend.forward_range(
                LayerRange::through(state.n_layers())?,
                tokens,
                0..usable,
                &mut fresh,
            )?;
        }
        Ok(fresh)
    })();

    let mut report = ConsistencyReport::default();
    for layer in 1..=state.n_layers() {
        let len = state.filled_len(layer);
        if len == 0 {
            continue;
        }
        let mut entry = LayerDiscrepancy {
            layer,
            positions_checked: len,
            kv_max_abs: 0.0,
            hidden_max_abs: state.is_exit(layer).then_some(0.0),
            worst_position: None,
        };
        let mut worst = 0.0;
        for p in 0..len {
            let (kv_d, hid_d) = match &reference {
                Ok(fresh) if p < usable => {
                    let (k, v) = state.kv(layer, p).expect("within fill");
                    let kv_d = match fresh.kv(layer, p) {
                        Some((rk, rv)) => max_row_diff(k, rk).max(max_row_diff(v, rv)),
                        None => f64::INFINITY,
                    };
                    let hid_d = if state.is_exit(layer) {
                        match (state.hidden(layer, p), fresh.hidden(layer, p)) {
                            (Ok(a), Ok(b)) => max_row_diff(a, b),
                            _ => f64::INFINITY,
                        }
                    } else {
                        0.0
                    };
                    (kv_d, hid_d)
                }
                _ => (f64::INFINITY, state.is_exit(layer).then_some(f64::INFINITY).unwrap_or(0.0)),
            };
            entry.kv_max_abs = entry.kv_max_abs.max(kv_d);
            if let Some(h) = entry.hidden_max_abs.as_mut() {
                *h = h.max(hid_d);
            }
            if kv_d.max(hid_d) > worst {
                worst = kv_d.max(hid_d);
                entry.worst_position = Some(p);
            }
        }
        report.layers.push(entry);
    }
    report
}
