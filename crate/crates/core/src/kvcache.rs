//! KV cache with holes.
//!
//! When a head is predicted inactive for a token, its K and V for that token
//! are never computed. A later token that activates the head needs them, so
//! the cache tracks presence per (head, token) and plans refills. Three
//! strategies are supported:
//! * per-request: every head's misses are refilled by their own sparse QKV
//!   call, re-sending the token rows each time;
//! * merged: all misses join the current token's sparse QKV call, so each
//!   token row is masked once;
//! * merged with prefetch: additionally refill inactive heads whose backlog
//!   makes it worthwhile now, while many of their rows are in the batch anyway.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::RingValue;
use crate::sparse::SparsityMask;
use crate::transport::{phase, CostLedger};
use crate::sharing::PartyId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheStrategy {
    #[serde(rename = "pr")]
    PerRequest,
    #[serde(rename = "mr")]
    Merged,
    #[default]
    #[serde(rename = "mr+prefetch")]
    MergedPrefetch,
}

impl CacheStrategy {
    pub const ALL: [CacheStrategy; 3] = [CacheStrategy::PerRequest, CacheStrategy::Merged, CacheStrategy::MergedPrefetch];

    pub fn name(self) -> &'static str {
        match self {
            CacheStrategy::PerRequest => "pr",
            CacheStrategy::Merged => "mr",
            CacheStrategy::MergedPrefetch => "mr+prefetch",
        }
    }
}

/// Cost parameters of the prefetch rule: `w` elements of head weights
/// (K and V together by default) and `x` elements per token row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefetchPolicy {
    pub w: u64,
    pub x: u64,
}

impl PrefetchPolicy {
    pub fn new(w: u64, x: u64) -> Result<Self> {
        if w == 0 || x == 0 {
            return Err(Error::Config("prefetch policy needs w > 0 and x > 0".into()));
        }
        Ok(PrefetchPolicy { w, x })
    }

    /// K and V projections of one head: `hidden × 2·head_dim`.
    pub fn joint(hidden: usize, head_dim: usize) -> Self {
        PrefetchPolicy { w: (hidden * 2 * head_dim) as u64, x: hidden as u64 }
    }

    /// `L₂ > w/x + max(0, L₂ − L₁)`, evaluated without rounding.
    pub fn should_prefetch(&self, l2: u64, l1: u64) -> bool {
        let extra_rows = l2.saturating_sub(l1);
        (l2 as u128) * (self.x as u128) > (self.w as u128) + (extra_rows as u128) * (self.x as u128)
    }

    /// Extra elements a prefetch of `l2` rows costs now.
    pub fn extra_cost(&self, l2: u64, l1: u64) -> u64 {
        2 * (self.w + self.x * l2.saturating_sub(l1))
    }

    /// Elements a prefetch of `l2` rows saves later.
    pub fn saved_cost(&self, l2: u64) -> u64 {
        2 * l2 * self.x
    }
}

/// Heads to prefetch among `(head, L₂)` candidates.
pub fn prefetch_select(miss_counts: &[(usize, u64)], l1: u64, policy: &PrefetchPolicy) -> Vec<usize> {
    miss_counts.iter().filter(|&&(_, l2)| policy.should_prefetch(l2, l1)).map(|&(g, _)| g).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MissRequest {
    pub layer: usize,
    pub head: usize,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergedBatch {
    pub per_head: BTreeMap<usize, Vec<usize>>,
    pub union: Vec<usize>,
}

/// Deduplicate misses per head and collect the union of their tokens.
pub fn merge_requests(misses: &[MissRequest]) -> Result<MergedBatch> {
    let Some(first) = misses.first() else {
        return Ok(MergedBatch::default());
    };
    let mut per_head: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut union = BTreeSet::new();
    for m in misses {
        if m.layer != first.layer {
            return Err(Error::contract(format!("miss requests from layers {} and {}", first.layer, m.layer)));
        }
        per_head.entry(m.head).or_default().extend(&m.tokens);
        union.extend(&m.tokens);
    }
    Ok(MergedBatch {
        per_head: per_head.into_iter().map(|(g, t)| (g, t.into_iter().collect())).collect(),
        union: union.into_iter().collect(),
    })
}

/// Which (head, token) pairs of one layer have K and V.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Presence {
    heads: usize,
    bits: Vec<Vec<bool>>,
}

impl Presence {
    pub fn new(heads: usize) -> Self {
        Presence { heads, bits: vec![Vec::new(); heads] }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn is_present(&self, head: usize, token: usize) -> bool {
        self.bits[head].get(token).copied().unwrap_or(false)
    }

    pub fn set(&mut self, head: usize, token: usize) {
        let row = &mut self.bits[head];
        if row.len() <= token {
            row.resize(token + 1, false);
        }
        row[token] = true;
    }

    pub fn missing(&self, head: usize, tokens: Range<usize>) -> Vec<usize> {
        tokens.filter(|&t| !self.is_present(head, t)).collect()
    }
}

/// Split requested `(head, token)` entries into hits and per-head misses.
pub fn lookup(
    presence: &Presence,
    layer: usize,
    heads: &[usize],
    tokens: Range<usize>,
) -> (Vec<(usize, usize)>, Vec<MissRequest>) {
    let mut hits = Vec::new();
    let mut misses = Vec::new();
    for &g in heads {
        let mut missing = Vec::new();
        for t in tokens.clone() {
            if presence.is_present(g, t) {
                hits.push((g, t));
            } else {
                missing.push(t);
            }
        }
        if !missing.is_empty() {
            misses.push(MissRequest { layer, head: g, tokens: missing });
        }
    }
    (hits, misses)
}

/// Shared K/V rows of one layer, keyed by (head, token) in the shuffled head
/// order, plus the layer inputs needed to recompute missing entries.
#[derive(Clone, Debug)]
pub struct LayerStore {
    pub presence: Presence,
    pub k: HashMap<(usize, usize), Vec<RingValue>>,
    pub v: HashMap<(usize, usize), Vec<RingValue>>,
    pub inputs: Vec<Vec<RingValue>>,
}

impl LayerStore {
    pub fn new(heads: usize) -> Self {
        LayerStore { presence: Presence::new(heads), k: HashMap::new(), v: HashMap::new(), inputs: Vec::new() }
    }

    pub fn insert(&mut self, head: usize, token: usize, k: Vec<RingValue>, v: Vec<RingValue>) {
        self.presence.set(head, token);
        self.k.insert((head, token), k);
        self.v.insert((head, token), v);
    }
}

#[derive(Clone, Debug)]
pub struct KvStore {
    pub layers: Vec<LayerStore>,
    pub party: PartyId,
}

impl KvStore {
    pub fn new(party: PartyId, layers: usize, heads: usize) -> Self {
        KvStore { layers: (0..layers).map(|_| LayerStore::new(heads)).collect(), party }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum CellKind {
    /// Current token on an active head: Q, K and V.
    Qkv,
    /// K and V only: a hole being refilled or prefetched.
    Kv,
}

/// What one sparse QKV call computes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QkvBatch {
    /// (token, head) → kind.
    pub cells: BTreeMap<(usize, usize), CellKind>,
}

impl QkvBatch {
    pub fn add(&mut self, token: usize, head: usize, kind: CellKind) {
        let e = self.cells.entry((token, head)).or_insert(kind);
        if kind == CellKind::Qkv {
            *e = CellKind::Qkv;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.cells.keys().map(|&(t, _)| t).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Element-level output mask over `tokens × (heads · 3d)`, head-major
    /// `[Q | K | V]` column blocks.
    pub fn element_mask(&self, tokens: &[usize], heads: usize, d: usize) -> SparsityMask {
        let pos: HashMap<usize, usize> = tokens.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let mut m = SparsityMask::zeros(tokens.len(), heads * 3 * d);
        for (&(t, g), &kind) in &self.cells {
            let r = pos[&t];
            let start = if kind == CellKind::Qkv { 0 } else { d };
            for c in g * 3 * d + start..(g + 1) * 3 * d {
                m.set(r, c, true);
            }
        }
        m
    }

    /// Head-level connected components: (tokens, heads with Q needed flag).
    pub fn components(&self) -> Vec<(Vec<usize>, Vec<(usize, bool)>)> {
        let tokens = self.tokens();
        let heads: Vec<usize> = self.cells.keys().map(|&(_, g)| g).collect::<BTreeSet<_>>().into_iter().collect();
        let tpos: HashMap<usize, usize> = tokens.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let hpos: HashMap<usize, usize> = heads.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        let with_q: BTreeSet<usize> =
            self.cells.iter().filter(|(_, &k)| k == CellKind::Qkv).map(|(&(_, g), _)| g).collect();
        let mask = SparsityMask::from_positions(
            tokens.len(),
            heads.len(),
            &self.cells.keys().map(|&(t, g)| (tpos[&t], hpos[&g])).collect::<Vec<_>>(),
        )
        .expect("positions are in range");
        crate::sparse::partition_components(&mask)
            .components
            .into_iter()
            .map(|c| {
                let rows = c.rows.iter().map(|&i| tokens[i]).collect();
                let cols = c
                    .cols
                    .iter()
                    .map(|&j| {
                        let g = heads[j];
                        (g, with_q.contains(&g))
                    })
                    .collect();
                (rows, cols)
            })
            .collect()
    }
}

/// The sparse QKV work for one step of one layer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepPlan {
    pub batch: Vec<usize>,
    /// Heads active for at least one batch token.
    pub active_heads: Vec<usize>,
    pub main: QkvBatch,
    /// Per-request refills, each run as its own call.
    pub separate: Vec<MissRequest>,
    pub prefetched: Vec<usize>,
    /// History misses of active heads.
    pub misses: usize,
    /// Distinct history tokens refilled alongside the batch.
    pub merged_rows: usize,
}

/// Plan one step. `active[i][g]` says whether head `g` is active for batch
/// token `batch.start + i`.
pub fn plan_step(
    presence: &Presence,
    layer: usize,
    batch: Range<usize>,
    active: &[Vec<bool>],
    strategy: CacheStrategy,
    policy: &PrefetchPolicy,
) -> Result<StepPlan> {
    let heads = presence.heads();
    if active.len() != batch.len() || active.iter().any(|a| a.len() != heads) {
        return Err(Error::shape("activation pattern must be batch × heads"));
    }
    let mut plan = StepPlan { batch: batch.clone().collect(), ..StepPlan::default() };
    let t0 = batch.start;
    // last batch token at which each head is active
    let last_active: Vec<Option<usize>> =
        (0..heads).map(|g| (0..active.len()).rev().find(|&i| active[i][g]).map(|i| t0 + i)).collect();
    plan.active_heads = (0..heads).filter(|&g| last_active[g].is_some()).collect();

    for (i, row) in active.iter().enumerate() {
        for (g, &on) in row.iter().enumerate() {
            let t = t0 + i;
            match last_active[g] {
                _ if on => plan.main.add(t, g, CellKind::Qkv),
                // in-batch hole before a later active token of the same head
                Some(last) if t < last => plan.main.add(t, g, CellKind::Kv),
                _ => {}
            }
        }
    }

    let (_, misses) = lookup(presence, layer, &plan.active_heads, 0..t0);
    plan.misses = misses.iter().map(|m| m.tokens.len()).sum();
    let l1 = misses.iter().map(|m| m.tokens.len() as u64).max().unwrap_or(0);
    match strategy {
        CacheStrategy::PerRequest => plan.separate = misses,
        CacheStrategy::Merged | CacheStrategy::MergedPrefetch => {
            let merged = merge_requests(&misses)?;
            for (g, tokens) in &merged.per_head {
                for &t in tokens {
                    plan.main.add(t, *g, CellKind::Kv);
                }
            }
            if strategy == CacheStrategy::MergedPrefetch {
                let candidates: Vec<(usize, u64)> = (0..heads)
                    .filter(|g| last_active[*g].is_none())
                    .map(|g| (g, presence.missing(g, 0..t0).len() as u64))
                    .collect();
                plan.prefetched = prefetch_select(&candidates, l1, policy);
                for &g in &plan.prefetched {
                    for t in presence.missing(g, 0..t0) {
                        plan.main.add(t, g, CellKind::Kv);
                    }
                }
            }
        }
    }
    plan.merged_rows = plan.main.tokens().iter().filter(|&&t| t < t0).count();
    Ok(plan)
}

/// Elements (both parties) of a sparse QKV call, split into (QKV, refill)
/// phases. Token rows cost `hidden` each, head columns `hidden · (2d or 3d)`.
pub fn qkv_batch_cost(batch: &QkvBatch, batch_tokens: &Range<usize>, active_heads: &[usize], hidden: usize, d: usize) -> (u64, u64) {
    let (mut qkv, mut refill) = (0u64, 0u64);
    for (rows, cols) in batch.components() {
        for t in rows {
            *(if batch_tokens.contains(&t) { &mut qkv } else { &mut refill }) += hidden as u64;
        }
        for (g, q) in cols {
            let width = if q { 3 * d } else { 2 * d };
            *(if active_heads.contains(&g) { &mut qkv } else { &mut refill }) += (hidden * width) as u64;
        }
    }
    (2 * qkv, 2 * refill)
}

/// Elements of one per-request refill: the head's miss rows plus its K/V
/// weight columns.
pub fn request_cost(req: &MissRequest, hidden: usize, d: usize) -> u64 {
    2 * (hidden * (req.tokens.len() + 2 * d)) as u64
}

/// Per-token head activity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadTrace {
    pub heads: usize,
    pub active: Vec<Vec<bool>>,
}

impl HeadTrace {
    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn activation_rate(&self) -> f64 {
        let on: usize = self.active.iter().map(|r| r.iter().filter(|&&b| b).count()).sum();
        on as f64 / (self.len() * self.heads).max(1) as f64
    }
}

/// Shape of a synthetic head-activity trace. Each head alternates between
/// long active and long inactive stretches with uniformly drawn lengths,
/// starting at a random phase; active stretches are broken by short gaps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceShape {
    pub on: (usize, usize),
    pub off: (usize, usize),
    /// Per-token chance of a short gap while active.
    pub gap_prob: f64,
    pub gap: (usize, usize),
}

impl Default for TraceShape {
    /// Roughly half the heads active at any time, with inactive stretches
    /// well past the prefetch break-even of a 128-wide head.
    fn default() -> Self {
        TraceShape { on: (450, 650), off: (350, 550), gap_prob: 0.05, gap: (1, 3) }
    }
}

pub fn synthetic_head_trace(tokens: usize, heads: usize, shape: &TraceShape, seed: u64) -> HeadTrace {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha20Rng, (lo, hi): (usize, usize)| rng.random_range(lo.max(1)..=hi.max(lo.max(1)));
    let mut columns = Vec::with_capacity(heads);
    for _ in 0..heads {
        let mut col = Vec::with_capacity(tokens + shape.gap.1);
        let mut on = rng.random_bool(0.5);
        let first = if on { shape.on } else { shape.off };
        let mut left = rng.random_range(1..=first.1.max(1));
        while col.len() < tokens {
            if on && rng.random_bool(shape.gap_prob) {
                let g = draw(&mut rng, shape.gap);
                col.extend(std::iter::repeat_n(false, g));
            } else {
                col.push(on);
            }
            left -= 1;
            if left == 0 {
                on = !on;
                left = draw(&mut rng, if on { shape.on } else { shape.off });
            }
        }
        col.truncate(tokens);
        columns.push(col);
    }
    HeadTrace { heads, active: (0..tokens).map(|t| columns.iter().map(|c| c[t]).collect()).collect() }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub token: usize,
    pub active_heads: usize,
    pub misses: usize,
    pub merged_rows: usize,
    pub prefetched: usize,
    pub delta: u64,
}

#[derive(Clone, Debug)]
pub struct TraceReport {
    pub strategy: CacheStrategy,
    pub rows: Vec<TraceRow>,
    pub ledger: CostLedger,
}

impl TraceReport {
    pub fn refill_elements(&self) -> u64 {
        self.ledger.phase(phase::CACHE_REFILL).total_elements()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("token,active_heads,misses,merged_batch,prefetched_heads,ledger_delta\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.token, r.active_heads, r.misses, r.merged_rows, r.prefetched, r.delta);
        }
        s
    }
}

/// Counting-mode replay of a decode trace for one layer: plans every step,
/// charges the sparse QKV traffic, and updates presence, without touching
/// any data.
pub fn simulate_trace(
    trace: &HeadTrace,
    strategy: CacheStrategy,
    policy: &PrefetchPolicy,
    hidden: usize,
    d: usize,
) -> Result<TraceReport> {
    let mut presence = Presence::new(trace.heads);
    let mut ledger = CostLedger::new();
    let mut rows = Vec::with_capacity(trace.len());
    for (t, act) in trace.active.iter().enumerate() {
        let plan = plan_step(&presence, 0, t..t + 1, std::slice::from_ref(act), strategy, policy)?;
        let (qkv, mut refill) = qkv_batch_cost(&plan.main, &(t..t + 1), &plan.active_heads, hidden, d);
        for req in &plan.separate {
            refill += request_cost(req, hidden, d);
            for &tok in &req.tokens {
                presence.set(req.head, tok);
            }
        }
        for &(tok, g) in plan.main.cells.keys() {
            presence.set(g, tok);
        }
        charge_split(&mut ledger, phase::QKV, qkv, !plan.main.is_empty());
        charge_split(&mut ledger, phase::CACHE_REFILL, refill, false);
        ledger.add_round(phase::CACHE_REFILL, plan.separate.len() as u64);
        rows.push(TraceRow {
            token: t,
            active_heads: plan.active_heads.len(),
            misses: plan.misses,
            merged_rows: plan.merged_rows,
            prefetched: plan.prefetched.len(),
            delta: qkv + refill,
        });
    }
    Ok(TraceReport { strategy, rows, ledger })
}

fn charge_split(ledger: &mut CostLedger, label: &str, total: u64, round: bool) {
    ledger.charge(PartyId::One, label, total / 2);
    ledger.charge(PartyId::Two, label, total - total / 2);
    if round {
        ledger.add_round(label, 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefetch_threshold_examples() {
        let p = PrefetchPolicy::new(524_288, 4096).unwrap();
        assert!(p.should_prefetch(150, 200));
        assert!(!p.should_prefetch(100, 200));
        assert!(!p.should_prefetch(128, 200));
        assert!(p.should_prefetch(129, 200));
        assert!(!p.should_prefetch(100_000, 0));
    }

    #[test]
    fn lookup_and_merge() {
        let mut pres = Presence::new(2);
        pres.set(0, 0);
        pres.set(0, 2);
        let (hits, misses) = lookup(&pres, 0, &[0], 0..4);
        assert_eq!(hits, vec![(0, 0), (0, 2)]);
        assert_eq!(misses[0].tokens, vec![1, 3]);

        let merged = merge_requests(&[
            MissRequest { layer: 0, head: 1, tokens: vec![3, 5] },
            MissRequest { layer: 0, head: 3, tokens: vec![5, 7] },
            MissRequest { layer: 0, head: 3, tokens: vec![5] },
        ])
        .unwrap();
        assert_eq!(merged.union, vec![3, 5, 7]);
        assert_eq!(merged.per_head[&3], vec![5, 7]);
        assert!(merge_requests(&[
            MissRequest { layer: 0, head: 1, tokens: vec![3] },
            MissRequest { layer: 1, head: 1, tokens: vec![3] },
        ])
        .is_err());
    }

    #[test]
    fn head_level_cost_matches_element_mask() {
        let mut b = QkvBatch::default();
        b.add(5, 0, CellKind::Qkv);
        b.add(5, 2, CellKind::Qkv);
        b.add(1, 0, CellKind::Kv);
        b.add(3, 1, CellKind::Kv);
        b.add(3, 3, CellKind::Kv);
        let (hidden, d) = (16, 4);
        let (q, r) = qkv_batch_cost(&b, &(5..6), &[0, 2], hidden, d);
        let tokens = b.tokens();
        let mask = b.element_mask(&tokens, 4, d);
        assert_eq!(q + r, crate::sparse::cost::somm(&mask, hidden));
    }

    #[test]
    fn prefill_holes_are_filled_in_batch() {
        let pres = Presence::new(2);
        let active = vec![vec![false, true], vec![true, false], vec![false, false]];
        let plan = plan_step(&pres, 0, 0..3, &active, CacheStrategy::Merged, &PrefetchPolicy::joint(8, 2)).unwrap();
        assert_eq!(plan.main.cells.get(&(0, 0)), Some(&CellKind::Kv));
        assert_eq!(plan.main.cells.get(&(1, 0)), Some(&CellKind::Qkv));
        assert_eq!(plan.main.cells.get(&(1, 1)), None);
        assert_eq!(plan.main.cells.get(&(2, 0)), None);
    }
}
