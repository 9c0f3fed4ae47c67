//! Party-side protocol session and the dense secure primitives: linear maps,
//! Beaver matrix products, truncation, oblivious shuffle and the ideal
//! non-linear calls.
//!
//! Runs are SPMD: the same closure executes on both party threads and every
//! protocol step draws the next sequence number, which keys both the dealer
//! material and the hub calls. Any divergence in control flow between the two
//! parties surfaces as a desync error at the next exchange.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dealer::{Dealer, Material, OfflineTally, Request, SharedDealer, ShuffleCorrelation, ShuffleMasks, TripleShare};
use crate::error::{Error, Result};
use crate::ideal::{self, eval, Hub, IdealCostModel, Output};
use crate::perm::Permutation;
use crate::ring::{FixedPointCodec, RingMatrix, RingValue};
use crate::sharing::{Order, PartyId, ShareMatrix};
use crate::transport::{link, phase, CostLedger, Envelope, PartyEndpoint, TranscriptEntry, TranscriptMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    /// Dealer pair plus an exact carry correction: no error, one opening.
    #[default]
    Pair,
    /// Each party shifts its own share: no communication, off by one with
    /// small probability.
    Local,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub codec: FixedPointCodec,
    pub costs: IdealCostModel,
    pub truncation: TruncationMode,
    pub transcript: TranscriptMode,
    pub triple_budget: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            codec: FixedPointCodec::default(),
            costs: IdealCostModel::default(),
            truncation: TruncationMode::Pair,
            transcript: TranscriptMode::Off,
            triple_budget: None,
        }
    }
}

impl RunConfig {
    pub fn seeded(seed: u64) -> Self {
        RunConfig { seed, ..RunConfig::default() }
    }

    pub fn dealer(&self) -> Arc<SharedDealer> {
        let mut d = Dealer::new(self.seed, self.codec);
        if let Some(b) = self.triple_budget {
            d = d.with_triple_budget(b);
        }
        SharedDealer::new(d)
    }
}

/// Operation counters kept by each party.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpStats {
    pub matmul_calls: u64,
    pub triples: u64,
    /// Output entries of secure products, i.e. inner products evaluated.
    pub dot_products: u64,
    /// Scalar multiplications implied by the secure products (`a·n·b`).
    pub scalar_mults: u64,
    pub shuffles: u64,
    pub truncated: u64,
    /// Per ideal kind: (calls, elements, rows).
    pub ideal: BTreeMap<String, (u64, u64, u64)>,
}

impl OpStats {
    pub fn ideal_calls(&self, kind: &str) -> u64 {
        self.ideal.get(kind).map_or(0, |c| c.0)
    }

    pub fn ideal_rows(&self, kind: &str) -> u64 {
        self.ideal.get(kind).map_or(0, |c| c.2)
    }
}

pub struct Session {
    party: PartyId,
    endpoint: PartyEndpoint,
    dealer: Arc<SharedDealer>,
    hub: Arc<Hub>,
    codec: FixedPointCodec,
    costs: Arc<IdealCostModel>,
    truncation: TruncationMode,
    seq: u64,
    phase: String,
    used: HashSet<u64>,
    stats: OpStats,
}

pub struct RunOutput<T> {
    pub outputs: [T; 2],
    pub ledger: CostLedger,
    pub party_ledgers: [CostLedger; 2],
    pub transcripts: [Vec<TranscriptEntry>; 2],
    pub offline: OfflineTally,
    pub stats: [OpStats; 2],
    pub dealer: Arc<SharedDealer>,
}

/// Run `f` on both parties and collect outputs, ledgers and transcripts.
pub fn run_two_party<T, F>(cfg: &RunConfig, f: F) -> Result<RunOutput<T>>
where
    T: Send,
    F: Fn(&mut Session) -> Result<T> + Sync,
{
    run_two_party_with(cfg, cfg.dealer(), f)
}

pub fn run_two_party_with<T, F>(cfg: &RunConfig, dealer: Arc<SharedDealer>, f: F) -> Result<RunOutput<T>>
where
    T: Send,
    F: Fn(&mut Session) -> Result<T> + Sync,
{
    let hub = Arc::new(Hub::new(cfg.seed, cfg.codec));
    let costs = Arc::new(cfg.costs.clone());
    let (e1, e2) = link(cfg.transcript);
    let party_run = |endpoint: PartyEndpoint| {
        let mut s = Session {
            party: endpoint.party(),
            endpoint,
            dealer: dealer.clone(),
            hub: hub.clone(),
            codec: cfg.codec,
            costs: costs.clone(),
            truncation: cfg.truncation,
            seq: 0,
            phase: phase::DEFAULT.to_string(),
            used: HashSet::new(),
            stats: OpStats::default(),
        };
        let out = f(&mut s);
        if out.is_err() {
            hub.abort();
        }
        let (ledger, transcript) = s.endpoint.into_parts();
        (out, ledger, transcript, s.stats)
    };
    let (r1, r2) = std::thread::scope(|scope| {
        let h1 = scope.spawn(|| party_run(e1));
        let h2 = scope.spawn(|| party_run(e2));
        (h1.join().expect("party 1 panicked"), h2.join().expect("party 2 panicked"))
    });
    let (o1, l1, t1, s1) = r1;
    let (o2, l2, t2, s2) = r2;
    let (o1, o2) = match (o1, o2) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(Error::PeerAborted), Err(e)) | (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    let ledger = CostLedger::merge_parties(&l1, &l2)?;
    Ok(RunOutput {
        outputs: [o1, o2],
        ledger,
        party_ledgers: [l1, l2],
        transcripts: [t1, t2],
        offline: dealer.tally(),
        stats: [s1, s2],
        dealer,
    })
}

impl<T> RunOutput<T> {
    pub fn map<U>(self, f: impl Fn(T) -> U) -> RunOutput<U> {
        let [a, b] = self.outputs;
        RunOutput {
            outputs: [f(a), f(b)],
            ledger: self.ledger,
            party_ledgers: self.party_ledgers,
            transcripts: self.transcripts,
            offline: self.offline,
            stats: self.stats,
            dealer: self.dealer,
        }
    }
}

impl RunOutput<ShareMatrix> {
    pub fn reconstruct(&self) -> Result<RingMatrix> {
        crate::sharing::reconstruct(&self.outputs[0], &self.outputs[1])
    }
}

impl RunOutput<Vec<RingValue>> {
    pub fn reconstruct(&self) -> Vec<RingValue> {
        self.outputs[0].iter().zip(&self.outputs[1]).map(|(&a, &b)| a + b).collect()
    }
}

/// Linear-algebra job for a batched secure product: `x · y`.
pub type MatmulJob<'a> = (&'a RingMatrix, &'a RingMatrix);

pub enum Nonlinear<'a> {
    /// 1 iff value > delta.
    Compare { delta: f64 },
    Relu,
    /// Row-wise softmax; `valid[r]` limits row `r` to its first entries.
    Softmax { valid: Option<&'a [usize]> },
    LayerNorm { gamma: &'a [f64], beta: &'a [f64], eps: f64 },
}

impl Nonlinear<'_> {
    pub fn kind(&self) -> &'static str {
        match self {
            Nonlinear::Compare { .. } => ideal::kind::COMPARE,
            Nonlinear::Relu => ideal::kind::RELU,
            Nonlinear::Softmax { .. } => ideal::kind::SOFTMAX,
            Nonlinear::LayerNorm { .. } => ideal::kind::LAYERNORM,
        }
    }
}

impl Session {
    pub fn party(&self) -> PartyId {
        self.party
    }

    pub fn codec(&self) -> FixedPointCodec {
        self.codec
    }

    pub fn costs(&self) -> &IdealCostModel {
        &self.costs
    }

    pub fn stats(&self) -> &OpStats {
        &self.stats
    }

    pub fn ledger(&self) -> &CostLedger {
        self.endpoint.ledger()
    }

    pub fn rounds_so_far(&self) -> u64 {
        self.endpoint.rounds_so_far()
    }

    pub fn phase(&self) -> &str {
        &self.phase
    }

    /// Switch the ledger label; returns the previous one.
    pub fn set_phase(&mut self, label: &str) -> String {
        std::mem::replace(&mut self.phase, label.to_string())
    }

    pub fn in_phase<T>(&mut self, label: &str, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let prev = self.set_phase(label);
        let out = f(self);
        self.phase = prev;
        out
    }

    /// Harness access to the dealer, e.g. to look up a hidden permutation.
    pub fn dealer(&self) -> &SharedDealer {
        &self.dealer
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn fetch(&mut self, req: Request) -> Result<Material> {
        let key = self.next_seq();
        self.dealer.fetch(self.party, key, req)
    }

    fn mark_used(&mut self, id: u64) -> Result<()> {
        if !self.used.insert(id) {
            return Err(Error::Reuse(id));
        }
        Ok(())
    }

    fn exchange(&mut self, payload: Vec<RingValue>, env: Envelope) -> Result<Vec<RingValue>> {
        let raw = payload.into_iter().map(|v| v.0).collect();
        let phase = self.phase.clone();
        let got = self.endpoint.exchange_with(raw, &phase, env)?;
        Ok(got.into_iter().map(RingValue).collect())
    }

    /// Publish a shared vector to both parties.
    pub fn open_values(&mut self, values: &[RingValue]) -> Result<Vec<RingValue>> {
        let env = Envelope::new("open").segment("open", values.len());
        let peer = self.exchange(values.to_vec(), env)?;
        let mask = self.codec.mask();
        Ok(values.iter().zip(&peer).map(|(&a, &b)| RingValue((a + b).0 & mask)).collect())
    }

    pub fn open(&mut self, x: &ShareMatrix) -> Result<RingMatrix> {
        let v = self.open_values(x.values.data())?;
        RingMatrix::new(x.rows(), x.cols(), v)
    }

    /// `a·x + b·y + c` on shares; the public constant is added by one party
    /// only. No communication.
    pub fn pi_linear(
        &self,
        x: &ShareMatrix,
        y: Option<&ShareMatrix>,
        a: RingValue,
        b: RingValue,
        c: RingValue,
    ) -> Result<ShareMatrix> {
        let mut z = x.values.scale(a);
        if let Some(y) = y {
            if y.row_order != x.row_order || y.col_order != x.col_order {
                return Err(Error::OrderMismatch("linear combination of differently ordered shares".into()));
            }
            z.add_assign(&y.values.scale(b))?;
        }
        if self.party.holds_public() {
            z = z.map(|v| v + c);
        }
        Ok(x.map_values(z))
    }

    /// Add a public matrix (e.g. a bias broadcast over rows) to a share.
    pub fn add_public(&self, x: &ShareMatrix, m: &RingMatrix) -> Result<ShareMatrix> {
        if !self.party.holds_public() {
            return Ok(x.clone());
        }
        Ok(x.map_values(x.values.add(m)?))
    }

    /// Add a shared row vector to every row of `x`.
    pub fn add_row_broadcast(&self, x: &ShareMatrix, row: &[RingValue]) -> Result<ShareMatrix> {
        if row.len() != x.cols() {
            return Err(Error::shape(format!("bias of length {} for {} columns", row.len(), x.cols())));
        }
        let mut out = x.values.clone();
        for r in 0..out.rows() {
            for (v, &b) in out.row_mut(r).iter_mut().zip(row) {
                *v += b;
            }
        }
        Ok(x.map_values(out))
    }

    /// Secure matrix product with one Beaver triple: one round and
    /// `a·n + n·b` elements per party.
    pub fn pi_matmul(&mut self, x: &ShareMatrix, y: &ShareMatrix) -> Result<ShareMatrix> {
        if x.col_order != y.row_order {
            return Err(Error::OrderMismatch("inner dimensions are in different orders".into()));
        }
        let mut out = self.pi_matmul_batch(&[(&x.values, &y.values)], None)?;
        Ok(ShareMatrix {
            party: self.party,
            values: out.pop().unwrap(),
            row_order: x.row_order,
            col_order: y.col_order,
        })
    }

    /// Several independent products in one round. `env` may describe the
    /// payload layout (per job: the masked left operand, then the masked
    /// right operand) for attribution and transcripts.
    pub fn pi_matmul_batch(&mut self, jobs: &[MatmulJob<'_>], env: Option<Envelope>) -> Result<Vec<RingMatrix>> {
        for (x, y) in jobs {
            if x.cols() != y.rows() {
                return Err(Error::shape(format!(
                    "secure matmul {}x{} by {}x{}",
                    x.rows(),
                    x.cols(),
                    y.rows(),
                    y.cols()
                )));
            }
        }
        if jobs.is_empty() {
            return Ok(Vec::new());
        }
        let shapes: Vec<_> = jobs.iter().map(|(x, y)| (x.rows(), x.cols(), y.cols())).collect();
        let triples = match self.fetch(Request::Triples(shapes))? {
            Material::Triples(t) => t,
            _ => unreachable!("dealer answers a triple request with triples"),
        };
        let id = triples[0].id;
        self.mark_used(id)?;

        let mut payload = Vec::new();
        let mut default_env = Envelope::new("beaver").artifact(id);
        for ((x, y), t) in jobs.iter().zip(&triples) {
            payload.extend(x.sub(&t.a)?.into_data());
            payload.extend(y.sub(&t.b)?.into_data());
            default_env = default_env.segment("D", x.len()).segment("E", y.len());
        }
        let env = match env {
            Some(mut e) => {
                e.artifacts.push(id);
                e
            }
            None => default_env,
        };
        let peer = self.exchange(payload.clone(), env)?;
        let opened: Vec<RingValue> = payload.iter().zip(&peer).map(|(&a, &b)| a + b).collect();

        let mut offset = 0;
        let mut opened_de = Vec::with_capacity(jobs.len());
        for (x, y) in jobs {
            let d = RingMatrix::new(x.rows(), x.cols(), opened[offset..offset + x.len()].to_vec())?;
            offset += x.len();
            let e = RingMatrix::new(y.rows(), y.cols(), opened[offset..offset + y.len()].to_vec())?;
            offset += y.len();
            opened_de.push((d, e));
        }

        let holds_public = self.party.holds_public();
        let combine = |(t, (d, e)): (&TripleShare, &(RingMatrix, RingMatrix))| -> Result<RingMatrix> {
            // Z = C + D·B + A·E (+ D·E for the public holder)
            let mut z = t.c.clone();
            let b = if holds_public { t.b.add(e)? } else { t.b.clone() };
            z.add_assign(&d.matmul(&b)?)?;
            z.add_assign(&t.a.matmul(e)?)?;
            Ok(z)
        };
        #[cfg(feature = "parallel")]
        let results: Vec<RingMatrix> = {
            use rayon::prelude::*;
            triples.par_iter().zip(opened_de.par_iter()).map(combine).collect::<Result<_>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<RingMatrix> = triples.iter().zip(opened_de.iter()).map(combine).collect::<Result<_>>()?;

        self.stats.matmul_calls += 1;
        self.stats.triples += jobs.len() as u64;
        for (a, n, b) in jobs.iter().map(|(x, y)| (x.rows(), x.cols(), y.cols())) {
            self.stats.dot_products += (a * b) as u64;
            self.stats.scalar_mults += (a * n * b) as u64;
        }
        Ok(results)
    }

    /// Elementwise product of two shared vectors.
    pub fn pi_hadamard(&mut self, x: &[RingValue], y: &[RingValue]) -> Result<Vec<RingValue>> {
        if x.len() != y.len() {
            return Err(Error::shape(format!("hadamard of lengths {} and {}", x.len(), y.len())));
        }
        let t = match self.fetch(Request::Hadamard(x.len()))? {
            Material::Triples(mut t) => t.remove(0),
            _ => unreachable!(),
        };
        self.mark_used(t.id)?;
        let (a, b, c) = (t.a.data(), t.b.data(), t.c.data());
        let mut payload: Vec<RingValue> = x.iter().zip(a).map(|(&x, &a)| x - a).collect();
        payload.extend(y.iter().zip(b).map(|(&y, &b)| y - b));
        let env = Envelope::new("hadamard").segment("D", x.len()).segment("E", y.len()).artifact(t.id);
        let peer = self.exchange(payload.clone(), env)?;
        let n = x.len();
        let open: Vec<RingValue> = payload.iter().zip(&peer).map(|(&p, &q)| p + q).collect();
        let (d, e) = open.split_at(n);
        let public = self.party.holds_public();
        self.stats.triples += 1;
        Ok((0..n)
            .map(|i| {
                let mut z = c[i] + d[i] * b[i] + a[i] * e[i];
                if public {
                    z += d[i] * e[i];
                }
                z
            })
            .collect())
    }

    /// Fixed-point rescaling of a product: divide by `2^f`.
    pub fn truncate(&mut self, z: &ShareMatrix) -> Result<ShareMatrix> {
        let v = self.truncate_values(z.values.data())?;
        Ok(z.map_values(RingMatrix::new(z.rows(), z.cols(), v)?))
    }

    pub fn truncate_values(&mut self, z: &[RingValue]) -> Result<Vec<RingValue>> {
        let codec = self.codec;
        let f = codec.frac();
        if f == 0 || z.is_empty() {
            return Ok(z.to_vec());
        }
        self.stats.truncated += z.len() as u64;
        match self.truncation {
            TruncationMode::Local => Ok(z
                .iter()
                .map(|&v| {
                    if self.party.is_first() {
                        RingValue(codec.reduce(v).0 >> f)
                    } else {
                        codec.reduce(-RingValue(codec.reduce(-v).0 >> f))
                    }
                })
                .collect()),
            TruncationMode::Pair => self.truncate_exact(z),
        }
    }

    fn truncate_exact(&mut self, z: &[RingValue]) -> Result<Vec<RingValue>> {
        let codec = self.codec;
        let (k, f) = (codec.bits(), codec.frac());
        let pair = match self.fetch(Request::Truncation(z.len()))? {
            Material::Truncation(p) => p,
            _ => unreachable!(),
        };
        self.mark_used(pair.id)?;
        let public = self.party.holds_public();
        let bias = RingValue(1u64 << (k - 2));
        let masked: Vec<RingValue> = z
            .iter()
            .zip(&pair.r)
            .map(|(&v, &r)| if public { v + bias + r } else { v + r })
            .collect();
        let env = Envelope::new("truncate").segment("masked", z.len()).artifact(pair.id);
        let peer = self.exchange(masked.clone(), env)?;
        let lo_mask = (1u64 << f) - 1;
        let c: Vec<u64> = masked.iter().zip(&peer).map(|(&a, &b)| codec.reduce(a + b).0).collect();

        let mut carry_in: Vec<RingValue> =
            c.iter().map(|&c| if public { RingValue(c & lo_mask) } else { RingValue::ZERO }).collect();
        carry_in.extend_from_slice(&pair.r_lo);
        let n = z.len() as u64;
        let carry = self.ideal_call(
            ideal::kind::TRUNCATION_CARRY,
            carry_in,
            n,
            0,
            Output::Shared,
            Box::new(|v| Ok(eval::truncation_carry(&v))),
        )?;
        let offset = RingValue(1u64 << (k - 2 - f));
        Ok(c.iter()
            .zip(&pair.r_hi)
            .zip(&carry)
            .map(|((&c, &rh), &b)| {
                let base = if public { RingValue(c >> f) - offset } else { RingValue::ZERO };
                codec.reduce(base - rh - b)
            })
            .collect())
    }

    /// Shares of a dealer-drawn 0/1 vector whose weight follows the
    /// flip-count mechanism. Returns the shares and the weight, which only
    /// the dealer and test harnesses should look at.
    pub fn dp_flips(&mut self, n: usize, epsilon: f64, delta: f64) -> Result<(Vec<RingValue>, u64)> {
        match self.fetch(Request::DpFlips { n, epsilon, delta })? {
            Material::Flips { id, bits, weight } => {
                self.mark_used(id)?;
                Ok((bits, weight))
            }
            _ => unreachable!(),
        }
    }

    /// Fresh shuffle correlation over `n` items.
    pub fn new_shuffle(&mut self, n: usize) -> Result<ShuffleCorrelation> {
        self.new_shuffle_inner(n, None)
    }

    /// Shuffle correlation with a chosen hidden permutation. Test harness use.
    pub fn new_shuffle_with(&mut self, pi: Permutation) -> Result<ShuffleCorrelation> {
        self.new_shuffle_inner(pi.len(), Some(pi))
    }

    fn new_shuffle_inner(&mut self, n: usize, pi: Option<Permutation>) -> Result<ShuffleCorrelation> {
        match self.fetch(Request::Shuffle { n, pi })? {
            Material::Shuffle(c) => Ok(c),
            _ => unreachable!(),
        }
    }

    pub fn shuffle_masks(&mut self, corr: &ShuffleCorrelation, width: usize, inverse: bool) -> Result<ShuffleMasks> {
        match self.fetch(Request::ShuffleMasks { corr_id: corr.id, width, inverse })? {
            Material::Masks(m) => Ok(m),
            _ => unreachable!(),
        }
    }

    /// Obliviously permute the rows of `x` by the correlation's hidden
    /// permutation. One round, `rows·cols` elements per party.
    pub fn pi_shuffle(&mut self, x: &ShareMatrix, corr: &ShuffleCorrelation) -> Result<ShareMatrix> {
        let masks = self.shuffle_masks(corr, x.cols(), false)?;
        self.pi_shuffle_with_masks(x, corr, &masks)
    }

    /// Inverse of [`Session::pi_shuffle`] for the same correlation.
    pub fn pi_unshuffle(&mut self, z: &ShareMatrix, corr: &ShuffleCorrelation) -> Result<ShareMatrix> {
        let masks = self.shuffle_masks(corr, z.cols(), true)?;
        self.pi_shuffle_with_masks(z, corr, &masks)
    }

    /// Shuffle (or unshuffle, per `masks.inverse`) with explicit masks. Masks
    /// are single-use: presenting the same masks twice is a reuse error.
    pub fn pi_shuffle_with_masks(
        &mut self,
        x: &ShareMatrix,
        corr: &ShuffleCorrelation,
        masks: &ShuffleMasks,
    ) -> Result<ShareMatrix> {
        if x.rows() != corr.len() {
            return Err(Error::shape(format!("shuffle of {} items with a length-{} correlation", x.rows(), corr.len())));
        }
        if masks.corr_id != corr.id || masks.a.shape() != x.values.shape() {
            return Err(Error::contract("shuffle masks do not belong to this correlation and shape"));
        }
        let (expected, result) = if masks.inverse {
            (Order::Shuffled(corr.id), Order::Original)
        } else {
            (Order::Original, Order::Shuffled(corr.id))
        };
        if x.row_order != expected {
            return Err(Error::OrderMismatch(format!(
                "rows are {:?}, expected {:?} for this shuffle direction",
                x.row_order, expected
            )));
        }
        self.mark_used(masks.id)?;
        let (send_perm, recv_perm) = corr.sub_permutations(masks.inverse);
        let y = send_perm.apply_rows(&x.values).add(&masks.a)?;
        let env = Envelope::new(if masks.inverse { "unshuffle" } else { "shuffle" })
            .segment("masked", y.len())
            .artifact(masks.id);
        let peer = self.exchange(y.into_data(), env)?;
        let peer = RingMatrix::new(x.rows(), x.cols(), peer)?;
        let z = recv_perm.apply_rows(&peer).sub(&masks.b)?;
        self.stats.shuffles += 1;
        Ok(ShareMatrix { party: self.party, values: z, row_order: result, col_order: x.col_order })
    }

    /// Evaluate a non-linear function through the hub and charge its cost.
    pub fn ideal_nonlinear(&mut self, v: &ShareMatrix, kind: Nonlinear<'_>) -> Result<ShareMatrix> {
        let codec = self.codec;
        let (rows, cols) = v.shape();
        let (elements, charged_rows) = match &kind {
            Nonlinear::Softmax { valid: Some(valid) } => {
                if valid.len() != rows {
                    return Err(Error::shape("softmax valid lengths must cover every row"));
                }
                (valid.iter().map(|&n| n.min(cols) as u64).sum(), rows as u64)
            }
            Nonlinear::Softmax { valid: None } | Nonlinear::LayerNorm { .. } => ((rows * cols) as u64, rows as u64),
            _ => ((rows * cols) as u64, 0),
        };
        if let Nonlinear::LayerNorm { gamma, beta, .. } = &kind {
            if gamma.len() != cols || beta.len() != cols {
                return Err(Error::shape("layernorm parameters must match the row width"));
            }
        }
        let label = kind.kind();
        let eval: ideal::Eval<'_> = match kind {
            Nonlinear::Compare { delta } => {
                let d = codec.encode(delta)?;
                Box::new(move |x| Ok(eval::compare(&codec, &x, d)))
            }
            Nonlinear::Relu => Box::new(move |x| Ok(eval::relu(&codec, &x))),
            Nonlinear::Softmax { valid } => Box::new(move |x| eval::softmax(&codec, &x, cols, valid)),
            Nonlinear::LayerNorm { gamma, beta, eps } => {
                Box::new(move |x| eval::layernorm(&codec, &x, gamma, beta, eps))
            }
        };
        let out = self.ideal_call(label, v.values.data().to_vec(), elements, charged_rows, Output::Shared, eval)?;
        Ok(v.map_values(RingMatrix::new(rows, cols, out)?))
    }

    /// Generic hub call. `elements`/`rows` feed the cost model entry of `kind`.
    pub fn ideal_call(
        &mut self,
        kind: &str,
        input: Vec<RingValue>,
        elements: u64,
        rows: u64,
        output: Output,
        eval: ideal::Eval<'_>,
    ) -> Result<Vec<RingValue>> {
        let entry = self.costs.entry(kind)?;
        let total = entry.charge(elements, rows);
        let mine = if self.party.is_first() { total - total / 2 } else { total / 2 };
        let phase = self.phase.clone();
        let ledger = self.endpoint.ledger_mut();
        ledger.charge(self.party, &phase, mine);
        ledger.add_round(&phase, entry.rounds);
        let e = self.stats.ideal.entry(kind.to_string()).or_default();
        e.0 += 1;
        e.1 += elements;
        e.2 += rows;
        let key = self.next_seq();
        self.hub.call(self.party, key, kind, input, output, eval)
    }
}
