//! Two-party inference of the toy transformer: setup shuffles, sparse MHA
//! with the KV-cache planner, sparse FFN, and a greedy decode loop.

use std::collections::HashMap;
use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dealer::ShuffleCorrelation;
use crate::error::{Error, Result};
use crate::ideal::{eval, kind, Output};
use crate::kvcache::{plan_step, CacheStrategy, CellKind, KvStore, PrefetchPolicy, QkvBatch, StepPlan};
use crate::model::EncodedModel;
use crate::predictor::{oracle_ffn, oracle_heads, predict_mpc, SharedPredictor};
use crate::protocols::{run_two_party, MatmulJob, Nonlinear, OpStats, RunConfig, Session};
use crate::ring::{RingMatrix, RingValue};
use crate::sharing::{share_with_rng, Order, PartyId, ShareMatrix};
use crate::sparse::{
    apply_dp_perturbation, pi_simm, pi_somm_attributed, pi_spgemm, pi_spgemm_input, reveal_shuffled_mask,
    Attribution, SparsityMask,
};
use crate::transport::{phase, CostLedger};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Beaver products everywhere, every neuron and head evaluated.
    Dense,
    /// Revealed masks, but one inner product per needed output.
    #[serde(rename = "spgemm")]
    SpGemm,
    /// Revealed masks with batched sparse products.
    #[default]
    Sparse,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Dense, Backend::SpGemm, Backend::Sparse];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Dense => "dense",
            Backend::SpGemm => "spgemm",
            Backend::Sparse => "sparse",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStructure {
    /// Every token of a step keeps the same neurons.
    #[default]
    Column,
    /// Each token draws its own neurons.
    Elementwise,
    /// Each token keeps aligned blocks of `head_dim` neurons.
    Head,
}

/// Where the sparsity masks come from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source", deny_unknown_fields)]
pub enum SparsitySource {
    /// The secure low-rank predictors.
    Predictor,
    /// Exact masks from the plaintext activations (still pays for the
    /// predictor so costs stay comparable).
    Oracle,
    /// Random masks with fixed sparsity, for cost studies.
    Synthetic { ffn_sparsity: f64, mha_sparsity: f64, structure: MaskStructure },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMode {
    pub backend: Backend,
    pub sparsity: SparsitySource,
    pub cache: CacheStrategy,
    /// `None` picks the joint K+V weight cost of the model.
    pub prefetch: Option<PrefetchPolicy>,
    /// Privacy budget for the FFN mask counts; infinity turns it off.
    pub dp_epsilon: f64,
    /// Head-output norm at or below which the oracle calls a head inactive.
    pub oracle_delta: f64,
}

impl Default for RunMode {
    fn default() -> Self {
        RunMode {
            backend: Backend::Sparse,
            sparsity: SparsitySource::Predictor,
            cache: CacheStrategy::default(),
            prefetch: None,
            dp_epsilon: f64::INFINITY,
            oracle_delta: 0.0,
        }
    }
}

impl RunMode {
    pub fn dense() -> Self {
        RunMode { backend: Backend::Dense, ..RunMode::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let SparsitySource::Synthetic { ffn_sparsity, mha_sparsity, .. } = self.sparsity {
            for (name, v) in [("ffn_sparsity", ffn_sparsity), ("mha_sparsity", mha_sparsity)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
                }
            }
        }
        if self.dp_epsilon.is_nan() || self.dp_epsilon <= 0.0 {
            return Err(Error::Config(format!("dp epsilon must be positive, got {}", self.dp_epsilon)));
        }
        if !self.oracle_delta.is_finite() || self.oracle_delta < 0.0 {
            return Err(Error::Config("oracle delta must be a non-negative number".into()));
        }
        Ok(())
    }
}

/// One party's share of a layer.
#[derive(Clone, Debug)]
pub struct PartyLayer {
    pub w_qkv: ShareMatrix,
    pub b_qkv: Vec<RingValue>,
    pub w_o: ShareMatrix,
    pub b_o: Vec<RingValue>,
    pub w1: ShareMatrix,
    pub b1: Vec<RingValue>,
    pub w2: ShareMatrix,
    pub b2: Vec<RingValue>,
    pub ffn_predictor: SharedPredictor,
    pub mha_predictor: SharedPredictor,
}

#[derive(Clone, Debug)]
pub struct PartyModel {
    pub layers: Vec<PartyLayer>,
    pub w_lm: ShareMatrix,
}

fn split_row(v: &[RingValue], rng: &mut ChaCha20Rng) -> (Vec<RingValue>, Vec<RingValue>) {
    let (a, b) = share_with_rng(&RingMatrix::row_vector(v.to_vec()), rng);
    (a.values.into_data(), b.values.into_data())
}

/// Secret-share every weight the parties compute on. Layer norms, embeddings
/// and the reference weights stay with the hub.
pub fn share_model(model: &EncodedModel, seed: u64) -> [PartyModel; 2] {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7765_6967_6874);
    let mut out: [PartyModel; 2] = std::array::from_fn(|_| PartyModel {
        layers: Vec::new(),
        w_lm: ShareMatrix::zeros(PartyId::One, 0, 0),
    });
    for l in &model.layers {
        let (qa, qb) = share_with_rng(&l.w_qkv, &mut rng);
        let (bqa, bqb) = split_row(&l.b_qkv, &mut rng);
        let (oa, ob) = share_with_rng(&l.w_o, &mut rng);
        let (boa, bob) = split_row(&l.b_o, &mut rng);
        let (w1a, w1b) = share_with_rng(&l.w1, &mut rng);
        let (b1a, b1b) = split_row(&l.b1, &mut rng);
        let (w2a, w2b) = share_with_rng(&l.w2, &mut rng);
        let (b2a, b2b) = split_row(&l.b2, &mut rng);
        let [fa, fb] = l.ffn_predictor.share(&mut rng);
        let [ma, mb] = l.mha_predictor.share(&mut rng);
        out[0].layers.push(PartyLayer {
            w_qkv: qa,
            b_qkv: bqa,
            w_o: oa,
            b_o: boa,
            w1: w1a,
            b1: b1a,
            w2: w2a,
            b2: b2a,
            ffn_predictor: fa,
            mha_predictor: ma,
        });
        out[1].layers.push(PartyLayer {
            w_qkv: qb,
            b_qkv: bqb,
            w_o: ob,
            b_o: bob,
            w1: w1b,
            b1: b1b,
            w2: w2b,
            b2: b2b,
            ffn_predictor: fb,
            mha_predictor: mb,
        });
    }
    let (la, lb) = share_with_rng(&model.w_lm, &mut rng);
    out[0].w_lm = la;
    out[1].w_lm = lb;
    out
}

/// Public per-layer facts of one step (both parties see the same).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerStep {
    pub active_heads: usize,
    pub head_cells: usize,
    pub misses: usize,
    pub prefetched: usize,
    pub merged_rows: usize,
    pub separate_requests: usize,
    pub ffn_nnz: usize,
    pub ffn_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub tokens: Range<usize>,
    pub layers: Vec<LayerStep>,
    /// Both parties' cost of this step.
    pub ledger: CostLedger,
}

pub struct InferenceOutput {
    /// Last-row logits of every step.
    pub logits: Vec<RingMatrix>,
    pub tokens: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub ledger: CostLedger,
    pub stats: [OpStats; 2],
}

impl InferenceOutput {
    pub fn setup_elements(&self) -> u64 {
        self.ledger.phase(phase::SETUP).total_elements()
    }
}

struct PartyResult {
    logits: Vec<Vec<RingValue>>,
    tokens: Vec<RingValue>,
    steps: Vec<(Range<usize>, Vec<LayerStep>, CostLedger)>,
}

/// Run greedy decoding: one prefill step over `prompt`, then `gen` decode
/// steps each consuming the previously generated token.
pub fn run_inference(
    model: &EncodedModel,
    prompt: &[usize],
    gen: usize,
    mode: &RunMode,
    cfg: &RunConfig,
) -> Result<InferenceOutput> {
    mode.validate()?;
    model.config.validate()?;
    if prompt.is_empty() {
        return Err(Error::Config("prompt must not be empty".into()));
    }
    if prompt.len() + gen > model.config.max_positions {
        return Err(Error::Config(format!(
            "prompt ({}) plus generated tokens ({gen}) exceed max_positions ({})",
            prompt.len(),
            model.config.max_positions
        )));
    }
    if let Some(&bad) = prompt.iter().find(|&&t| t >= model.config.vocab) {
        return Err(Error::Config(format!("prompt token {bad} outside the vocabulary")));
    }
    let shares = share_model(model, cfg.seed);
    let ids = RingMatrix::column(prompt.iter().map(|&t| RingValue(t as u64)).collect());
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x636c_6965_6e74);
    let (p1, p2) = share_with_rng(&ids, &mut rng);
    let prompt_shares = [p1.values.into_data(), p2.values.into_data()];

    let run = run_two_party(cfg, |s| {
        let me = s.party().index();
        let mut engine = PartyEngine::new(s, model, &shares[me], mode, cfg.seed)?;
        engine.decode(s, &prompt_shares[me], gen)
    })?;

    let [r1, r2] = &run.outputs;
    let add = |a: &[RingValue], b: &[RingValue]| -> Vec<RingValue> {
        let mask = model.codec.mask();
        a.iter().zip(b).map(|(&x, &y)| RingValue((x + y).0 & mask)).collect()
    };
    let logits = r1
        .logits
        .iter()
        .zip(&r2.logits)
        .map(|(a, b)| RingMatrix::new(1, model.config.vocab, add(a, b)))
        .collect::<Result<Vec<_>>>()?;
    let tokens = add(&r1.tokens, &r2.tokens).into_iter().map(|v| v.0 as usize).collect();
    let mut steps = Vec::new();
    let mut prev = CostLedger::new();
    for ((range, layers, l1), (_, _, l2)) in r1.steps.iter().zip(&r2.steps) {
        let cum = CostLedger::merge_parties(l1, l2)?;
        steps.push(StepRecord { tokens: range.clone(), layers: layers.clone(), ledger: cum.delta_since(&prev) });
        prev = cum;
    }
    Ok(InferenceOutput { logits, tokens, steps, ledger: run.ledger, stats: run.stats })
}

struct LayerState {
    heads: Option<ShuffleCorrelation>,
    ffn: Option<ShuffleCorrelation>,
}

struct PartyEngine<'a> {
    model: &'a EncodedModel,
    weights: PartyModel,
    mode: &'a RunMode,
    policy: PrefetchPolicy,
    layers: Vec<LayerState>,
    store: KvStore,
    seed: u64,
}

#[derive(Clone, Copy)]
enum MaskKind {
    Heads,
    Ffn,
}

fn concat(parts: &[RingMatrix]) -> Vec<RingValue> {
    parts.iter().flat_map(|m| m.data().iter().copied()).collect()
}

fn split(values: &[RingValue], shapes: &[(usize, usize)]) -> Result<Vec<RingMatrix>> {
    let mut off = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let m = RingMatrix::new(r, c, values[off..off + r * c].to_vec());
            off += r * c;
            m
        })
        .collect()
}

/// Reshape a share's values, keeping its party.
fn reshaped(x: &ShareMatrix, rows: usize, cols: usize) -> Result<ShareMatrix> {
    Ok(ShareMatrix::new(x.party, x.values.clone().reshape(rows, cols)?))
}

/// Deterministic synthetic selection of `keep` of `n` items.
fn synthetic_pick(seed: u64, salt: &[u64], n: usize, keep: usize) -> Vec<usize> {
    let mut key = seed;
    for &s in salt {
        key = key.rotate_left(17) ^ s.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(key);
    let mut v = sample(&mut rng, n, keep).into_vec();
    v.sort_unstable();
    v
}

impl<'a> PartyEngine<'a> {
    fn new(s: &mut Session, model: &'a EncodedModel, weights: &PartyModel, mode: &'a RunMode, seed: u64) -> Result<Self> {
        let c = &model.config;
        let policy = mode.prefetch.unwrap_or_else(|| PrefetchPolicy::joint(c.hidden, c.head_dim));
        let mut weights = weights.clone();
        let mut layers = Vec::with_capacity(c.layers);
        for l in weights.layers.iter_mut() {
            if mode.backend == Backend::Dense {
                layers.push(LayerState { heads: None, ffn: None });
                continue;
            }
            let st = s.in_phase(phase::SETUP, |s| Self::shuffle_layer(s, model, l))?;
            layers.push(st);
        }
        Ok(PartyEngine {
            model,
            weights,
            mode,
            policy,
            layers,
            store: KvStore::new(s.party(), c.layers, c.heads),
            seed,
        })
    }

    /// Permute the head blocks of W_qkv / W_o and the neurons of W1 / W2 with
    /// fresh hidden permutations, so revealed masks index shuffled positions.
    fn shuffle_layer(s: &mut Session, model: &EncodedModel, l: &mut PartyLayer) -> Result<LayerState> {
        let c = &model.config;
        let (h, hh, d, f) = (c.hidden, c.heads, c.head_dim, c.ffn);
        let heads = s.new_shuffle(hh)?;
        let ffn = s.new_shuffle(f)?;

        // W_qkv with its bias as an extra row; head g owns columns g·3d..(g+1)·3d.
        let mut wb = l.w_qkv.values.clone().into_data();
        wb.extend(&l.b_qkv);
        let wb = ShareMatrix::new(s.party(), RingMatrix::new(h + 1, 3 * hh * d, wb)?).transpose();
        let blocks = s.pi_shuffle(&reshaped(&wb, hh, 3 * d * (h + 1))?, &heads)?;
        let back = reshaped(&blocks, 3 * hh * d, h + 1)?.values.transpose();
        l.w_qkv = ShareMatrix::new(s.party(), RingMatrix::new(h, 3 * hh * d, back.data()[..h * 3 * hh * d].to_vec())?)
            .with_orders(Order::Original, Order::Shuffled(heads.id));
        l.b_qkv = back.row(h).to_vec();

        let wo = s.pi_shuffle(&reshaped(&l.w_o, hh, d * h)?, &heads)?;
        l.w_o = reshaped(&wo, hh * d, h)?.with_orders(Order::Shuffled(heads.id), Order::Original);

        let mut w1b = l.w1.values.clone().into_data();
        w1b.extend(&l.b1);
        let w1b = ShareMatrix::new(s.party(), RingMatrix::new(h + 1, f, w1b)?).transpose();
        let w1s = s.pi_shuffle(&w1b, &ffn)?.values.transpose();
        l.w1 = ShareMatrix::new(s.party(), RingMatrix::new(h, f, w1s.data()[..h * f].to_vec())?)
            .with_orders(Order::Original, Order::Shuffled(ffn.id));
        l.b1 = w1s.row(h).to_vec();

        l.w2 = s.pi_shuffle(&l.w2, &ffn)?;
        Ok(LayerState { heads: Some(heads), ffn: Some(ffn) })
    }

    fn decode(&mut self, s: &mut Session, prompt: &[RingValue], gen: usize) -> Result<PartyResult> {
        let mut out = PartyResult { logits: Vec::new(), tokens: Vec::new(), steps: Vec::new() };
        let mut ids = prompt.to_vec();
        let mut start = 0;
        for _ in 0..=gen {
            let range = start..start + ids.len();
            let (logits, next, layers) = self.step(s, &ids, range.clone())?;
            out.logits.push(logits);
            out.tokens.push(next);
            out.steps.push((range, layers, s.ledger().clone()));
            start += ids.len();
            ids = vec![next];
        }
        Ok(out)
    }

    fn step(
        &mut self,
        s: &mut Session,
        ids: &[RingValue],
        range: Range<usize>,
    ) -> Result<(Vec<RingValue>, RingValue, Vec<LayerStep>)> {
        let model = self.model;
        let c = &model.config;
        let b = ids.len();
        let start = range.start;
        let x = s.in_phase(phase::OTHERS, |s| {
            let out = s.ideal_call(
                kind::EMBEDDING,
                ids.to_vec(),
                (b * c.hidden) as u64,
                0,
                Output::Shared,
                Box::new(move |ids| {
                    let ids: Vec<usize> = ids.iter().map(|v| v.0 as usize).collect();
                    Ok(model.embed_rows(&ids, start)?.into_data())
                }),
            )?;
            Ok(ShareMatrix::new(s.party(), RingMatrix::new(b, c.hidden, out)?))
        })?;
        let mut x = x;
        let mut records = Vec::with_capacity(c.layers);
        for li in 0..c.layers {
            let mut rec = LayerStep::default();
            x = self.mha(s, li, &x, range.clone(), &mut rec)?;
            x = self.ffn(s, li, &x, range.clone(), &mut rec)?;
            records.push(rec);
        }
        let (logits, next) = s.in_phase(phase::OTHERS, |s| {
            let last = x.select_rows(&[b - 1]);
            let (g, be) = &model.ln_final;
            let lf = s.ideal_nonlinear(&last, Nonlinear::LayerNorm { gamma: g, beta: be, eps: c.layernorm_eps })?;
            let z = s.pi_matmul(&lf, &self.weights.w_lm)?;
            let logits = s.truncate(&z)?;
            let codec = s.codec();
            let vocab = c.vocab;
            let next = s.ideal_call(
                kind::ARGMAX,
                logits.values.data().to_vec(),
                vocab as u64,
                0,
                Output::Shared,
                Box::new(move |v| Ok(eval::argmax(&codec, &v, vocab))),
            )?;
            Ok((logits.values.into_data(), next[0]))
        })?;
        Ok((logits, next, records))
    }

    fn layernorm(&self, s: &mut Session, x: &ShareMatrix, params: &(Vec<f64>, Vec<f64>)) -> Result<ShareMatrix> {
        let eps = self.model.config.layernorm_eps;
        s.in_phase(phase::OTHERS, |s| {
            s.ideal_nonlinear(x, Nonlinear::LayerNorm { gamma: &params.0, beta: &params.1, eps })
        })
    }

    /// Replace predicted masks by oracle or synthetic ones inside the hub.
    /// `input` is what the hub needs to compute the oracle.
    fn inject(
        &self,
        s: &mut Session,
        li: usize,
        what: MaskKind,
        predicted: ShareMatrix,
        input: Vec<RingValue>,
        range: Range<usize>,
    ) -> Result<ShareMatrix> {
        let model = self.model;
        let c = &model.config;
        let codec = model.codec;
        let (rows, cols) = predicted.shape();
        let eval: crate::ideal::Eval<'_> = match (self.mode.sparsity, what) {
            (SparsitySource::Predictor, _) => return Ok(predicted),
            (SparsitySource::Oracle, MaskKind::Ffn) => Box::new(move |a| {
                let a = RingMatrix::new(rows, c.hidden, a)?;
                let u = model.ffn_preactivation(li, &a)?;
                Ok(oracle_ffn(&codec, &u).bits.into_iter().map(|b| RingValue(b as u64)).collect())
            }),
            (SparsitySource::Oracle, MaskKind::Heads) => {
                let delta = self.mode.oracle_delta;
                Box::new(move |a| {
                    let a_all = RingMatrix::new(a.len() / c.hidden, c.hidden, a)?;
                    let heads = model.attention_heads(li, &a_all, rows)?;
                    Ok(oracle_heads(&codec, &heads, c.heads, delta).bits.into_iter().map(|b| RingValue(b as u64)).collect())
                })
            }
            (SparsitySource::Synthetic { ffn_sparsity, mha_sparsity, structure }, what) => {
                let seed = self.seed;
                Box::new(move |_| {
                    let (sparsity, tag) = match what {
                        MaskKind::Ffn => (ffn_sparsity, 1),
                        MaskKind::Heads => (mha_sparsity, 2),
                    };
                    let ffn = matches!(what, MaskKind::Ffn);
                    let block = if ffn && structure == MaskStructure::Head { c.head_dim } else { 1 };
                    let units = cols / block;
                    let keep = ((1.0 - sparsity) * units as f64).round() as usize;
                    let mut bits = vec![RingValue::ZERO; rows * cols];
                    let shared = ffn && structure == MaskStructure::Column;
                    for (i, t) in range.clone().enumerate() {
                        let salt = if shared { [tag, li as u64, range.start as u64] } else { [tag, li as u64, t as u64] };
                        for u in synthetic_pick(seed, &salt, units, keep) {
                            for j in u * block..(u + 1) * block {
                                bits[i * cols + j] = RingValue(1);
                            }
                        }
                    }
                    Ok(bits)
                })
            }
        };
        let out = s.ideal_call(kind::MASK_INJECTION, input, 0, 0, Output::Shared, eval)?;
        Ok(predicted.map_values(RingMatrix::new(rows, cols, out)?))
    }

    /// Secure product restricted to `mask`, by backend.
    fn masked_product(
        &self,
        s: &mut Session,
        x: &ShareMatrix,
        y: &ShareMatrix,
        mask: &SparsityMask,
        attribution: Option<&Attribution>,
    ) -> Result<ShareMatrix> {
        if mask.nnz() == 0 {
            return Ok(ShareMatrix::zeros(s.party(), mask.rows(), mask.cols()).with_orders(x.row_order, y.col_order));
        }
        match self.mode.backend {
            Backend::SpGemm => pi_spgemm(s, x, y, mask),
            _ => pi_somm_attributed(s, x, y, mask, attribution),
        }
    }

    fn sparse_input_product(&self, s: &mut Session, x: &ShareMatrix, y: &ShareMatrix, mask: &SparsityMask) -> Result<ShareMatrix> {
        if mask.nnz() == 0 {
            return Ok(ShareMatrix::zeros(s.party(), x.rows(), y.cols()).with_orders(x.row_order, y.col_order));
        }
        match self.mode.backend {
            Backend::SpGemm => pi_spgemm_input(s, x, y, mask),
            _ => pi_simm(s, x, y, mask),
        }
    }

    fn mha(
        &mut self,
        s: &mut Session,
        li: usize,
        x: &ShareMatrix,
        range: Range<usize>,
        rec: &mut LayerStep,
    ) -> Result<ShareMatrix> {
        let model = self.model;
        let c = &model.config;
        let (hh, d) = (c.heads, c.head_dim);
        let lw = &model.layers[li];
        let a = self.layernorm(s, x, &lw.ln1)?;
        for i in 0..a.rows() {
            self.store.layers[li].inputs.push(a.values.row(i).to_vec());
        }

        let active: Vec<Vec<bool>> = match self.mode.backend {
            Backend::Dense => vec![vec![true; hh]; range.len()],
            _ => self.head_mask(s, li, &a, range.clone())?,
        };

        let mut q: HashMap<(usize, usize), Vec<RingValue>> = HashMap::new();
        if self.mode.backend == Backend::Dense {
            let w = &self.weights.layers[li];
            let qkv = s.in_phase(phase::QKV, |s| {
                let z = s.pi_matmul(&a, &w.w_qkv)?;
                let z = s.truncate(&z)?;
                s.add_row_broadcast(&z, &w.b_qkv)
            })?;
            let mut batch = QkvBatch::default();
            for t in range.clone() {
                for g in 0..hh {
                    batch.add(t, g, CellKind::Qkv);
                }
            }
            self.store_cells(li, &batch, &range.clone().collect::<Vec<_>>(), &qkv.values, &mut q);
        } else {
            let plan = plan_step(&self.store.layers[li].presence, li, range.clone(), &active, self.mode.cache, &self.policy)?;
            rec.misses = plan.misses;
            rec.prefetched = plan.prefetched.len();
            rec.merged_rows = plan.merged_rows;
            rec.separate_requests = plan.separate.len();
            self.run_plan(s, li, &plan, range.clone(), &mut q)?;
        }
        rec.active_heads = (0..hh).filter(|&g| active.iter().any(|r| r[g])).count();
        rec.head_cells = active.iter().flatten().filter(|&&on| on).count();

        let attn = self.attention(s, li, range.clone(), &active, &q)?;
        let w = &self.weights.layers[li];
        let attn = ShareMatrix::new(s.party(), attn).with_orders(Order::Original, w.w_o.row_order);
        let y = s.in_phase(phase::OUTPUT, |s| {
            let z = match self.mode.backend {
                Backend::Dense => s.pi_matmul(&attn, &w.w_o)?,
                _ => {
                    let mask = SparsityMask::from_fn(range.len(), hh * d, |i, col| active[i][col / d])
                        .with_orders(Order::Original, w.w_o.row_order);
                    self.sparse_input_product(s, &attn, &w.w_o, &mask)?
                }
            };
            let z = s.truncate(&z)?;
            s.add_row_broadcast(&z, &w.b_o)
        })?;
        s.pi_linear(x, Some(&y), RingValue(1), RingValue(1), RingValue::ZERO)
    }

    /// Predict, override if configured, shuffle and reveal the head mask.
    /// Returns `active[i][g]` over shuffled head indices.
    fn head_mask(&self, s: &mut Session, li: usize, a: &ShareMatrix, range: Range<usize>) -> Result<Vec<Vec<bool>>> {
        let hh = self.model.config.heads;
        let pred = predict_mpc(s, a, &self.weights.layers[li].mha_predictor)?;
        let history: Vec<RingValue> = self.store.layers[li].inputs.iter().flatten().copied().collect();
        let corr = self.layers[li].heads.as_ref().expect("sparse backends shuffle heads");
        s.in_phase(phase::PREDICTOR, |s| {
            let pred = self.inject(s, li, MaskKind::Heads, pred, history, range.clone())?;
            let m = reveal_shuffled_mask(s, &pred.transpose(), corr)?;
            Ok((0..range.len()).map(|i| (0..hh).map(|g| m.get(g, i)).collect()).collect())
        })
    }

    /// Execute the planned sparse QKV products and store the results.
    fn run_plan(
        &mut self,
        s: &mut Session,
        li: usize,
        plan: &StepPlan,
        range: Range<usize>,
        q: &mut HashMap<(usize, usize), Vec<RingValue>>,
    ) -> Result<()> {
        let c = &self.model.config;
        let (h, hh, d) = (c.hidden, c.heads, c.head_dim);
        let w = self.weights.layers[li].w_qkv.clone();
        let gather = |store: &KvStore, tokens: &[usize]| -> Result<ShareMatrix> {
            let rows: Vec<RingValue> = tokens.iter().flat_map(|&t| store.layers[li].inputs[t].iter().copied()).collect();
            Ok(ShareMatrix::new(store.party, RingMatrix::new(tokens.len(), h, rows)?))
        };

        let tokens = plan.main.tokens();
        if !tokens.is_empty() {
            let xs = gather(&self.store, &tokens)?;
            let mask = plan.main.element_mask(&tokens, hh, d).with_orders(Order::Original, w.col_order);
            let label = |main: bool| if main { phase::QKV } else { phase::CACHE_REFILL }.to_string();
            let attr = Attribution {
                rows: tokens.iter().map(|t| label(range.contains(t))).collect(),
                cols: (0..3 * hh * d).map(|col| label(plan.active_heads.contains(&(col / (3 * d))))).collect(),
            };
            let z = s.in_phase(phase::QKV, |s| self.masked_product(s, &xs, &w, &mask, Some(&attr)))?;
            // Truncate this step's cells and the refilled history separately so
            // each lands in its phase.
            let fresh = |t: usize, g: usize| range.contains(&t) && plan.active_heads.contains(&g);
            let z = self.finish_cells(s, li, &plan.main, &tokens, z, fresh)?;
            self.store_cells(li, &plan.main, &tokens, &z, q);
        }
        for req in &plan.separate {
            let xs = gather(&self.store, &req.tokens)?;
            let g = req.head;
            let mask = SparsityMask::from_fn(req.tokens.len(), 3 * hh * d, |_, col| col / (3 * d) == g && col % (3 * d) >= d)
                .with_orders(Order::Original, w.col_order);
            let mut batch = QkvBatch::default();
            for &t in &req.tokens {
                batch.add(t, g, CellKind::Kv);
            }
            let z = s.in_phase(phase::CACHE_REFILL, |s| self.masked_product(s, &xs, &w, &mask, None))?;
            let z = self.finish_cells(s, li, &batch, &req.tokens, z, |_, _| false)?;
            self.store_cells(li, &batch, &req.tokens, &z, q);
        }
        Ok(())
    }

    /// Truncate and add the bias to every computed cell of `z`.
    fn finish_cells(
        &self,
        s: &mut Session,
        li: usize,
        batch: &QkvBatch,
        tokens: &[usize],
        z: ShareMatrix,
        fresh: impl Fn(usize, usize) -> bool,
    ) -> Result<RingMatrix> {
        let d = self.model.config.head_dim;
        let bias = &self.weights.layers[li].b_qkv;
        let row_of: HashMap<usize, usize> = tokens.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let mut groups: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
        for (&(t, g), &k) in &batch.cells {
            let first = if k == CellKind::Qkv { 0 } else { d };
            let which = fresh(t, g) as usize;
            groups[which].extend((g * 3 * d + first..(g + 1) * 3 * d).map(|col| (row_of[&t], col)));
        }
        let mut out = z.values;
        for (which, cells) in groups.iter().enumerate() {
            if cells.is_empty() {
                continue;
            }
            let label = if which == 1 { phase::QKV } else { phase::CACHE_REFILL };
            let vals: Vec<RingValue> = cells.iter().map(|&(i, col)| out.get(i, col)).collect();
            let vals = s.in_phase(label, |s| s.truncate_values(&vals))?;
            for (&(i, col), v) in cells.iter().zip(vals) {
                out.set(i, col, v + bias[col]);
            }
        }
        Ok(out)
    }

    fn store_cells(
        &mut self,
        li: usize,
        batch: &QkvBatch,
        tokens: &[usize],
        z: &RingMatrix,
        q: &mut HashMap<(usize, usize), Vec<RingValue>>,
    ) {
        let d = self.model.config.head_dim;
        let row_of: HashMap<usize, usize> = tokens.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        for (&(t, g), &k) in &batch.cells {
            let row = z.row(row_of[&t]);
            let base = g * 3 * d;
            if k == CellKind::Qkv {
                q.insert((t, g), row[base..base + d].to_vec());
            }
            self.store.layers[li].insert(g, t, row[base + d..base + 2 * d].to_vec(), row[base + 2 * d..base + 3 * d].to_vec());
        }
    }

    /// Causal attention of every active (token, head) pair. Returns the
    /// `batch × heads·d` head outputs, zero for inactive pairs.
    fn attention(
        &self,
        s: &mut Session,
        li: usize,
        range: Range<usize>,
        active: &[Vec<bool>],
        q: &HashMap<(usize, usize), Vec<RingValue>>,
    ) -> Result<RingMatrix> {
        let c = &self.model.config;
        let (hh, d) = (c.heads, c.head_dim);
        let store = &self.store.layers[li];
        let t0 = range.start;
        struct Head {
            g: usize,
            rows: Vec<usize>,
            len: usize,
            q: RingMatrix,
            kt: RingMatrix,
            v: RingMatrix,
        }
        let mut heads = Vec::new();
        for g in 0..hh {
            let rows: Vec<usize> = (0..range.len()).filter(|&i| active[i][g]).collect();
            let Some(&last) = rows.last() else { continue };
            let len = t0 + last + 1;
            let fetch = |map: &HashMap<(usize, usize), Vec<RingValue>>| -> Result<RingMatrix> {
                let mut data = Vec::with_capacity(len * d);
                for t in 0..len {
                    let v = map
                        .get(&(g, t))
                        .ok_or_else(|| Error::contract(format!("layer {li}: head {g} has no K/V for token {t}")))?;
                    data.extend(v);
                }
                RingMatrix::new(len, d, data)
            };
            let qd: Vec<RingValue> = rows.iter().flat_map(|&i| q[&(t0 + i, g)].iter().copied()).collect();
            heads.push(Head {
                g,
                q: RingMatrix::new(rows.len(), d, qd)?,
                kt: fetch(&store.k)?.transpose(),
                v: fetch(&store.v)?,
                rows,
                len,
            });
        }
        let mut out = RingMatrix::zeros(range.len(), hh * d);
        if heads.is_empty() {
            return Ok(out);
        }

        let scores = s.in_phase(phase::MATMUL, |s| {
            let jobs: Vec<MatmulJob<'_>> = heads.iter().map(|h| (&h.q, &h.kt)).collect();
            let z = s.pi_matmul_batch(&jobs, None)?;
            s.truncate_values(&concat(&z))
        })?;

        let codec = s.codec();
        let shapes: Vec<(usize, usize)> = heads.iter().map(|h| (h.rows.len(), h.len)).collect();
        let valid: Vec<Vec<usize>> = heads.iter().map(|h| h.rows.iter().map(|&i| t0 + i + 1).collect()).collect();
        let elements: u64 = valid.iter().flatten().map(|&v| v as u64).sum();
        let rows: u64 = valid.iter().map(|v| v.len() as u64).sum();
        let probs = s.in_phase(phase::SOFTMAX, |s| {
            let shapes = shapes.clone();
            s.ideal_call(
                kind::SOFTMAX,
                scores,
                elements,
                rows,
                Output::Shared,
                Box::new(move |x| {
                    let mut out = Vec::with_capacity(x.len());
                    let mut off = 0;
                    for ((r, len), valid) in shapes.iter().zip(&valid) {
                        out.extend(eval::softmax(&codec, &x[off..off + r * len], *len, Some(valid))?);
                        off += r * len;
                    }
                    Ok(out)
                }),
            )
        })?;
        let probs = split(&probs, &shapes)?;

        let ctx = s.in_phase(phase::MATMUL, |s| {
            let jobs: Vec<MatmulJob<'_>> = heads.iter().zip(&probs).map(|(h, p)| (p, &h.v)).collect();
            let z = s.pi_matmul_batch(&jobs, None)?;
            s.truncate_values(&concat(&z))
        })?;
        let ctx = split(&ctx, &heads.iter().map(|h| (h.rows.len(), d)).collect::<Vec<_>>())?;
        for (h, o) in heads.iter().zip(&ctx) {
            for (a, &i) in h.rows.iter().enumerate() {
                for j in 0..d {
                    out.set(i, h.g * d + j, o.get(a, j));
                }
            }
        }
        Ok(out)
    }

    fn ffn(
        &mut self,
        s: &mut Session,
        li: usize,
        x: &ShareMatrix,
        range: Range<usize>,
        rec: &mut LayerStep,
    ) -> Result<ShareMatrix> {
        let model = self.model;
        let f = model.config.ffn;
        let a = self.layernorm(s, x, &model.layers[li].ln2)?;
        let w = &self.weights.layers[li];
        rec.ffn_width = range.len() * f;

        let y = if self.mode.backend == Backend::Dense {
            let u = s.in_phase(phase::FC1, |s| {
                let z = s.pi_matmul(&a, &w.w1)?;
                let z = s.truncate(&z)?;
                s.add_row_broadcast(&z, &w.b1)
            })?;
            let r = s.in_phase(phase::RELU, |s| s.ideal_nonlinear(&u, Nonlinear::Relu))?;
            rec.ffn_nnz = range.len() * f;
            s.in_phase(phase::FC2, |s| s.pi_matmul(&r, &w.w2))?
        } else {
            let pred = predict_mpc(s, &a, &w.ffn_predictor)?;
            let corr = self.layers[li].ffn.as_ref().expect("sparse backends shuffle neurons");
            let eps = self.mode.dp_epsilon;
            let mask = s.in_phase(phase::PREDICTOR, |s| {
                let pred = self.inject(s, li, MaskKind::Ffn, pred, a.values.data().to_vec(), range.clone())?;
                let pred = apply_dp_perturbation(s, &pred, eps)?;
                Ok(reveal_shuffled_mask(s, &pred.transpose(), corr)?.transpose())
            })?;
            rec.ffn_nnz = mask.nnz();

            let u = s.in_phase(phase::FC1, |s| self.masked_product(s, &a, &w.w1, &mask, None))?;
            let cells: Vec<(usize, usize)> = mask.positions().collect();
            let mut r = RingMatrix::zeros(range.len(), f);
            if !cells.is_empty() {
                let vals: Vec<RingValue> = cells.iter().map(|&(i, j)| u.values.get(i, j)).collect();
                let vals = s.in_phase(phase::FC1, |s| s.truncate_values(&vals))?;
                let vals: Vec<RingValue> = vals.iter().zip(&cells).map(|(&v, &(_, j))| v + w.b1[j]).collect();
                let n = vals.len();
                let v = ShareMatrix::new(s.party(), RingMatrix::new(1, n, vals)?);
                let act = s.in_phase(phase::RELU, |s| s.ideal_nonlinear(&v, Nonlinear::Relu))?;
                for (&(i, j), &val) in cells.iter().zip(act.values.data()) {
                    r.set(i, j, val);
                }
            }
            let r = u.map_values(r);
            s.in_phase(phase::FC2, |s| self.sparse_input_product(s, &r, &w.w2, &mask))?
        };
        let y = s.in_phase(phase::FC2, |s| {
            let z = s.truncate(&y)?;
            s.add_row_broadcast(&z, &w.b2)
        })?;
        s.pi_linear(x, Some(&y), RingValue(1), RingValue(1), RingValue::ZERO)
    }
}
