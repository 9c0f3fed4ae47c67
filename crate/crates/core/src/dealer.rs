//! Trusted dealer: produces every piece of correlated randomness the online
//! protocols consume.
//!
//! Each artifact is generated from its own ChaCha stream `(seed, id)`, so the
//! material for a given id does not depend on the order in which artifacts are
//! requested. In a networked run the id is the protocol sequence number both
//! parties agree on; standalone callers get ids from an internal counter.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Geometric};

use crate::error::{Error, Result};
use crate::perm::Permutation;
use crate::ring::{FixedPointCodec, RingMatrix, RingValue};
use crate::sharing::{share_with_rng, PartyId};

/// One party's part of a Beaver triple. For matrix triples `c = a·b`; for
/// elementwise triples `a`, `b`, `c` have equal shapes and `c = a ⊙ b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripleShare {
    pub id: u64,
    pub a: RingMatrix,
    pub b: RingMatrix,
    pub c: RingMatrix,
}

/// Both parties' parts of one triple, as handed out by [`Dealer::deal_beaver`].
#[derive(Clone, Debug)]
pub struct BeaverTriple {
    pub id: u64,
    pub a_shape: (usize, usize),
    pub b_shape: (usize, usize),
    shares: [TripleShare; 2],
    consumed: bool,
}

impl BeaverTriple {
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Hand out the shares. A triple can be consumed exactly once.
    pub fn consume(&mut self) -> Result<(TripleShare, TripleShare)> {
        if std::mem::replace(&mut self.consumed, true) {
            return Err(Error::Reuse(self.id));
        }
        Ok((self.shares[0].clone(), self.shares[1].clone()))
    }

    /// Harness view of the reconstructed `(A, B, C)`.
    pub fn reveal(&self) -> (RingMatrix, RingMatrix, RingMatrix) {
        let [s1, s2] = &self.shares;
        (
            s1.a.add(&s2.a).unwrap(),
            s1.b.add(&s2.b).unwrap(),
            s1.c.add(&s2.c).unwrap(),
        )
    }
}

/// One party's reusable half of a shuffle correlation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShuffleCorrelation {
    pub id: u64,
    pub party: PartyId,
    pub rho: Permutation,
    pub tau: Permutation,
}

impl ShuffleCorrelation {
    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    /// `(τ, ρ)` for the forward direction or, for the inverse, `(ρ⁻¹, τ⁻¹)`.
    pub fn sub_permutations(&self, inverse: bool) -> (Permutation, Permutation) {
        if inverse {
            (self.rho.inverse(), self.tau.inverse())
        } else {
            (self.tau.clone(), self.rho.clone())
        }
    }
}

/// Fresh one-time masks for a single use of a shuffle correlation over `n`
/// items of `width` ring elements each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShuffleMasks {
    pub id: u64,
    pub corr_id: u64,
    pub inverse: bool,
    pub a: RingMatrix,
    pub b: RingMatrix,
}

/// Shares of `r`, `r >> f` and `r mod 2^f` for dealer-sampled `r`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TruncationPair {
    pub id: u64,
    pub frac: u32,
    pub r: Vec<RingValue>,
    pub r_hi: Vec<RingValue>,
    pub r_lo: Vec<RingValue>,
}

impl TruncationPair {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// Requests a party can make of the dealer during a run.
#[derive(Clone, Debug, PartialEq)]
pub enum Request {
    /// One matrix triple per `(a, n, b)` shape: `a×n` times `n×b`.
    Triples(Vec<(usize, usize, usize)>),
    Hadamard(usize),
    Shuffle { n: usize, pi: Option<Permutation> },
    ShuffleMasks { corr_id: u64, width: usize, inverse: bool },
    Truncation(usize),
    /// A 0/1 vector of length `n` whose weight is drawn from the flip-count
    /// mechanism at privacy budget `epsilon`.
    DpFlips { n: usize, epsilon: f64, delta: f64 },
}

impl Request {
    fn kind(&self) -> &'static str {
        match self {
            Request::Triples(_) => "triples",
            Request::Hadamard(_) => "hadamard",
            Request::Shuffle { .. } => "shuffle",
            Request::ShuffleMasks { .. } => "shuffle-masks",
            Request::Truncation(_) => "truncation",
            Request::DpFlips { .. } => "dp-flips",
        }
    }
}

/// A single party's material for one request.
#[derive(Clone, Debug, PartialEq)]
pub enum Material {
    Triples(Vec<TripleShare>),
    Shuffle(ShuffleCorrelation),
    Masks(ShuffleMasks),
    Truncation(TruncationPair),
    Flips { id: u64, bits: Vec<RingValue>, weight: u64 },
}

impl Material {
    /// Ring elements (or permutation indices) shipped to the party.
    pub fn element_count(&self) -> u64 {
        let n = match self {
            Material::Triples(ts) => ts.iter().map(|t| t.a.len() + t.b.len() + t.c.len()).sum(),
            Material::Shuffle(c) => 2 * c.len(),
            Material::Masks(m) => m.a.len() + m.b.len(),
            Material::Truncation(t) => 3 * t.len(),
            Material::Flips { bits, .. } => bits.len(),
        };
        n as u64
    }
}

#[derive(Clone, Debug)]
struct CorrelationState {
    pi: Permutation,
    rho: [Permutation; 2],
    tau: [Permutation; 2],
}

/// Per-party totals of offline material, kept apart from online traffic.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OfflineTally {
    pub elements: [u64; 2],
    pub artifacts: u64,
    pub triples: u64,
}

pub struct Dealer {
    seed: u64,
    codec: FixedPointCodec,
    next_id: u64,
    correlations: HashMap<u64, CorrelationState>,
    triple_budget: Option<u64>,
    tally: OfflineTally,
}

/// Offset that keeps counter-assigned ids clear of sequence-keyed ids.
const STANDALONE_ID_BASE: u64 = 1 << 62;

impl Dealer {
    pub fn new(seed: u64, codec: FixedPointCodec) -> Self {
        Dealer {
            seed,
            codec,
            next_id: STANDALONE_ID_BASE,
            correlations: HashMap::new(),
            triple_budget: None,
            tally: OfflineTally::default(),
        }
    }

    /// Cap the number of triples the dealer will ever produce.
    pub fn with_triple_budget(mut self, budget: u64) -> Self {
        self.triple_budget = Some(budget);
        self
    }

    pub fn codec(&self) -> FixedPointCodec {
        self.codec
    }

    pub fn tally(&self) -> &OfflineTally {
        &self.tally
    }

    fn rng_for(&self, id: u64) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    /// Harness-only access to the hidden permutation of a correlation.
    pub fn permutation(&self, corr_id: u64) -> Option<&Permutation> {
        self.correlations.get(&corr_id).map(|c| &c.pi)
    }

    pub fn deal_beaver(
        &mut self,
        a_shape: (usize, usize),
        b_shape: (usize, usize),
        count: usize,
    ) -> Result<Vec<BeaverTriple>> {
        if a_shape.1 != b_shape.0 {
            return Err(Error::shape(format!(
                "triple shapes {a_shape:?} and {b_shape:?} are incompatible"
            )));
        }
        (0..count)
            .map(|_| {
                let id = self.fresh_id();
                let [s1, s2] = self.triples_at(id, &[(a_shape.0, a_shape.1, b_shape.1)])?;
                let (s1, s2) = (s1.into_iter().next().unwrap(), s2.into_iter().next().unwrap());
                Ok(BeaverTriple { id, a_shape, b_shape, shares: [s1, s2], consumed: false })
            })
            .collect()
    }

    pub fn deal_shuffle(&mut self, n: usize) -> Result<(ShuffleCorrelation, ShuffleCorrelation)> {
        let id = self.fresh_id();
        let [a, b] = self.shuffle_at(id, n, None)?;
        Ok((a, b))
    }

    /// Like [`Dealer::deal_shuffle`] but with a caller-chosen hidden
    /// permutation. Test harness use only.
    pub fn deal_shuffle_with(&mut self, pi: Permutation) -> Result<(ShuffleCorrelation, ShuffleCorrelation)> {
        let id = self.fresh_id();
        let [a, b] = self.shuffle_at(id, pi.len(), Some(pi))?;
        Ok((a, b))
    }

    pub fn deal_shuffle_masks(
        &mut self,
        corr_id: u64,
        width: usize,
        inverse: bool,
    ) -> Result<(ShuffleMasks, ShuffleMasks)> {
        let id = self.fresh_id();
        let [a, b] = self.masks_at(id, corr_id, width, inverse)?;
        Ok((a, b))
    }

    pub fn deal_truncation(&mut self, count: usize) -> (TruncationPair, TruncationPair) {
        let id = self.fresh_id();
        let [a, b] = self.truncation_at(id, count, None);
        (a, b)
    }

    /// Truncation pairs around caller-chosen `r` values. Test harness use only.
    pub fn deal_truncation_with(&mut self, r: &[RingValue]) -> (TruncationPair, TruncationPair) {
        let id = self.fresh_id();
        let [a, b] = self.truncation_at(id, r.len(), Some(r));
        (a, b)
    }

    /// Serve a keyed request, returning both parties' material.
    pub fn deal_at(&mut self, id: u64, req: &Request) -> Result<[Material; 2]> {
        let out = match req {
            Request::Triples(shapes) => self.triples_at(id, shapes)?.map(Material::Triples),
            Request::Hadamard(n) => self.hadamard_at(id, *n)?.map(|t| Material::Triples(vec![t])),
            Request::Shuffle { n, pi } => self.shuffle_at(id, *n, pi.clone())?.map(Material::Shuffle),
            Request::ShuffleMasks { corr_id, width, inverse } => {
                self.masks_at(id, *corr_id, *width, *inverse)?.map(Material::Masks)
            }
            Request::Truncation(n) => self.truncation_at(id, *n, None).map(Material::Truncation),
            Request::DpFlips { n, epsilon, delta } => {
                let mut rng = self.rng_for(id);
                let weight = flip_count(*epsilon, *delta, *n, &mut rng);
                let bits = random_weight_vector(*n, weight, &mut rng);
                let (s1, s2) = share_with_rng(&RingMatrix::row_vector(bits), &mut rng);
                [
                    Material::Flips { id, bits: s1.values.into_data(), weight: weight as u64 },
                    Material::Flips { id, bits: s2.values.into_data(), weight: weight as u64 },
                ]
            }
        };
        self.tally.artifacts += 1;
        for (p, m) in out.iter().enumerate() {
            self.tally.elements[p] += m.element_count();
        }
        Ok(out)
    }

    fn charge_triples(&mut self, count: u64) -> Result<()> {
        if let Some(budget) = self.triple_budget {
            if self.tally.triples + count > budget {
                return Err(Error::DealerExhausted(format!(
                    "triple budget of {budget} exceeded"
                )));
            }
        }
        self.tally.triples += count;
        Ok(())
    }

    fn triples_at(&mut self, id: u64, shapes: &[(usize, usize, usize)]) -> Result<[Vec<TripleShare>; 2]> {
        self.charge_triples(shapes.len() as u64)?;
        let mut rng = self.rng_for(id);
        let mut out = [Vec::with_capacity(shapes.len()), Vec::with_capacity(shapes.len())];
        for &(a, n, b) in shapes {
            let am = random_matrix(a, n, &mut rng);
            let bm = random_matrix(n, b, &mut rng);
            let cm = am.matmul(&bm)?;
            let (a1, a2) = share_with_rng(&am, &mut rng);
            let (b1, b2) = share_with_rng(&bm, &mut rng);
            let (c1, c2) = share_with_rng(&cm, &mut rng);
            out[0].push(TripleShare { id, a: a1.values, b: b1.values, c: c1.values });
            out[1].push(TripleShare { id, a: a2.values, b: b2.values, c: c2.values });
        }
        Ok(out)
    }

    fn hadamard_at(&mut self, id: u64, n: usize) -> Result<[TripleShare; 2]> {
        self.charge_triples(1)?;
        let mut rng = self.rng_for(id);
        let am = random_matrix(1, n, &mut rng);
        let bm = random_matrix(1, n, &mut rng);
        let cm = am.hadamard(&bm)?;
        let (a1, a2) = share_with_rng(&am, &mut rng);
        let (b1, b2) = share_with_rng(&bm, &mut rng);
        let (c1, c2) = share_with_rng(&cm, &mut rng);
        Ok([
            TripleShare { id, a: a1.values, b: b1.values, c: c1.values },
            TripleShare { id, a: a2.values, b: b2.values, c: c2.values },
        ])
    }

    fn shuffle_at(&mut self, id: u64, n: usize, pi: Option<Permutation>) -> Result<[ShuffleCorrelation; 2]> {
        if n == 0 {
            return Err(Error::contract("shuffle length must be at least 1"));
        }
        let mut rng = self.rng_for(id);
        let pi = match pi {
            Some(p) if p.len() != n => {
                return Err(Error::shape(format!("permutation of length {} for n = {n}", p.len())))
            }
            Some(p) => p,
            None => Permutation::random(n, &mut rng),
        };
        let tau = [Permutation::random(n, &mut rng), Permutation::random(n, &mut rng)];
        // ρ₁ ∘ τ₂ = ρ₂ ∘ τ₁ = π
        let rho = [pi.compose(&tau[1].inverse()), pi.compose(&tau[0].inverse())];
        let corr = |p: usize| ShuffleCorrelation {
            id,
            party: PartyId::BOTH[p],
            rho: rho[p].clone(),
            tau: tau[p].clone(),
        };
        let out = [corr(0), corr(1)];
        self.correlations.insert(id, CorrelationState { pi, rho, tau });
        Ok(out)
    }

    fn masks_at(&mut self, id: u64, corr_id: u64, width: usize, inverse: bool) -> Result<[ShuffleMasks; 2]> {
        let state = self
            .correlations
            .get(&corr_id)
            .ok_or_else(|| Error::contract(format!("unknown shuffle correlation {corr_id}")))?;
        // Receiving-side permutation of each party for this direction.
        let recv: [Permutation; 2] = if inverse {
            [state.tau[0].inverse(), state.tau[1].inverse()]
        } else {
            [state.rho[0].clone(), state.rho[1].clone()]
        };
        let n = state.pi.len();
        let mut rng = self.rng_for(id);
        let a1 = random_matrix(n, width, &mut rng);
        let a2 = random_matrix(n, width, &mut rng);
        let c = random_matrix(n, width, &mut rng);
        let b1 = recv[0].apply_rows(&a2).add(&c)?;
        let b2 = recv[1].apply_rows(&a1).sub(&c)?;
        Ok([
            ShuffleMasks { id, corr_id, inverse, a: a1, b: b1 },
            ShuffleMasks { id, corr_id, inverse, a: a2, b: b2 },
        ])
    }

    fn truncation_at(&mut self, id: u64, count: usize, fixed: Option<&[RingValue]>) -> [TruncationPair; 2] {
        let codec = self.codec;
        let frac = codec.frac();
        let mut rng = self.rng_for(id);
        let r_bound_bits = codec.bits() - 1;
        let r: Vec<RingValue> = match fixed {
            Some(v) => v.to_vec(),
            None => (0..count)
                .map(|_| RingValue(rng.random::<u64>() & ((1u64 << r_bound_bits) - 1)))
                .collect(),
        };
        let hi: Vec<RingValue> = r.iter().map(|v| RingValue(v.0 >> frac)).collect();
        let lo_mask = if frac == 0 { 0 } else { (1u64 << frac) - 1 };
        let lo: Vec<RingValue> = r.iter().map(|v| RingValue(v.0 & lo_mask)).collect();
        let mut split = |v: Vec<RingValue>| {
            let (a, b) = share_with_rng(&RingMatrix::row_vector(v), &mut rng);
            (a.values.into_data(), b.values.into_data())
        };
        let (r1, r2) = split(r);
        let (h1, h2) = split(hi);
        let (l1, l2) = split(lo);
        [
            TruncationPair { id, frac, r: r1, r_hi: h1, r_lo: l1 },
            TruncationPair { id, frac, r: r2, r_hi: h2, r_lo: l2 },
        ]
    }
}

fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> RingMatrix {
    RingMatrix::from_fn(rows, cols, |_, _| RingValue(rng.random()))
}

/// Additive offset of the flip-count mechanism: large enough that the
/// shifted discrete-Laplace draw is negative with probability at most `delta`.
pub fn flip_offset(epsilon: f64, delta: f64) -> f64 {
    ((1.0 / epsilon) * (1.0 / (2.0 * delta)).ln()).ceil()
}

/// Number of positions to force to one: `offset + DLap(1/ε)`, clamped to
/// `[0, n]`. `DLap` is sampled as the difference of two geometric draws.
pub fn flip_count<R: Rng + ?Sized>(epsilon: f64, delta: f64, n: usize, rng: &mut R) -> usize {
    if !epsilon.is_finite() {
        return 0;
    }
    let p = 1.0 - (-epsilon).exp();
    let geo = Geometric::new(p).expect("valid success probability");
    let noise = geo.sample(rng) as f64 - geo.sample(rng) as f64;
    (flip_offset(epsilon, delta) + noise).clamp(0.0, n as f64) as usize
}

/// 0/1 vector of length `n` with exactly `weight` ones at uniform positions.
pub fn random_weight_vector<R: Rng + ?Sized>(n: usize, weight: usize, rng: &mut R) -> Vec<RingValue> {
    let mut bits = vec![RingValue::ZERO; n];
    for i in rand::seq::index::sample(rng, n, weight.min(n)) {
        bits[i] = RingValue::ONE;
    }
    bits
}

/// Thread-safe front of the dealer for a two-party run. The first party to
/// ask for a key triggers generation of both halves; the second collects its
/// half after the requests are compared for agreement.
pub struct SharedDealer {
    state: Mutex<SharedState>,
}

struct SharedState {
    dealer: Dealer,
    pending: HashMap<u64, (Request, Material)>,
    recording: Option<Vec<CachedArtifact>>,
    replay: Option<HashMap<u64, CachedArtifact>>,
}

#[derive(Clone, Debug)]
struct CachedArtifact {
    key: u64,
    req: Request,
    materials: [Material; 2],
}

impl SharedDealer {
    pub fn new(dealer: Dealer) -> Arc<Self> {
        Arc::new(SharedDealer {
            state: Mutex::new(SharedState { dealer, pending: HashMap::new(), recording: None, replay: None }),
        })
    }

    pub fn fetch(&self, party: PartyId, key: u64, req: Request) -> Result<Material> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((peer_req, material)) = st.pending.remove(&key) {
            if peer_req != req {
                return Err(Error::Desync(format!(
                    "dealer request {key}: party {party} asked for {} but peer asked for {}",
                    req.kind(),
                    peer_req.kind()
                )));
            }
            return Ok(material);
        }
        let [m1, m2] = match st.replay.as_ref().and_then(|r| r.get(&key)) {
            Some(cached) => {
                if cached.req != req {
                    return Err(Error::Cache(format!("cached artifact {key} does not match request")));
                }
                let materials = cached.materials.clone();
                if let Material::Shuffle(c) = &materials[0] {
                    // the hidden permutation is not cached; rebuild it from the halves
                    let other = match &materials[1] {
                        Material::Shuffle(o) => o,
                        _ => return Err(Error::Cache("corrupt shuffle artifact".into())),
                    };
                    let pi = c.rho.compose(&other.tau);
                    st.dealer.correlations.insert(
                        key,
                        CorrelationState {
                            pi,
                            rho: [c.rho.clone(), other.rho.clone()],
                            tau: [c.tau.clone(), other.tau.clone()],
                        },
                    );
                }
                st.dealer.tally.artifacts += 1;
                for (p, m) in materials.iter().enumerate() {
                    st.dealer.tally.elements[p] += m.element_count();
                }
                materials
            }
            None if st.replay.is_some() => {
                return Err(Error::Cache(format!("material cache has no artifact for request {key}")));
            }
            None => {
                let out = st.dealer.deal_at(key, &req)?;
                if let Some(rec) = st.recording.as_mut() {
                    rec.push(CachedArtifact { key, req: req.clone(), materials: out.clone() });
                }
                out
            }
        };
        let (mine, theirs) = match party {
            PartyId::One => (m1, m2),
            PartyId::Two => (m2, m1),
        };
        st.pending.insert(key, (req, theirs));
        Ok(mine)
    }

    pub fn with_dealer<T>(&self, f: impl FnOnce(&Dealer) -> T) -> T {
        let st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        f(&st.dealer)
    }

    pub fn tally(&self) -> OfflineTally {
        self.with_dealer(|d| d.tally.clone())
    }

    pub fn start_recording(&self) {
        self.state.lock().unwrap().recording = Some(Vec::new());
    }

    /// Serve every request from a previously written cache file.
    pub fn load_cache(&self, path: &Path, scenario_hash: u64, seed: u64) -> Result<()> {
        let artifacts = read_cache(path, scenario_hash, seed)?;
        let map = artifacts.into_iter().map(|a| (a.key, a)).collect();
        self.state.lock().unwrap().replay = Some(map);
        Ok(())
    }

    pub fn save_cache(&self, path: &Path, scenario_hash: u64, seed: u64) -> Result<()> {
        let st = self.state.lock().unwrap();
        let rec = st
            .recording
            .as_ref()
            .ok_or_else(|| Error::Cache("dealer was not recording".into()))?;
        write_cache(path, scenario_hash, seed, rec)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"SPMC";
const CACHE_VERSION: u32 = 1;

fn write_cache(path: &Path, scenario_hash: u64, seed: u64, artifacts: &[CachedArtifact]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_u32::<LittleEndian>(CACHE_VERSION)?;
    w.write_u64::<LittleEndian>(scenario_hash)?;
    w.write_u64::<LittleEndian>(seed)?;
    w.write_u64::<LittleEndian>(artifacts.len() as u64)?;
    for art in artifacts {
        w.write_u64::<LittleEndian>(art.key)?;
        write_request(&mut w, &art.req)?;
        for m in &art.materials {
            write_material(&mut w, m)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_cache(path: &Path, scenario_hash: u64, seed: u64) -> Result<Vec<CachedArtifact>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Cache("not a material cache file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CACHE_VERSION {
        return Err(Error::Cache(format!("unsupported cache version {version}")));
    }
    let (h, s) = (r.read_u64::<LittleEndian>()?, r.read_u64::<LittleEndian>()?);
    if h != scenario_hash || s != seed {
        return Err(Error::Cache("cache was written for a different scenario or seed".into()));
    }
    let count = r.read_u64::<LittleEndian>()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let key = r.read_u64::<LittleEndian>()?;
        let req = read_request(&mut r)?;
        let materials = [read_material(&mut r)?, read_material(&mut r)?];
        out.push(CachedArtifact { key, req, materials });
    }
    Ok(out)
}

fn write_usize<W: Write>(w: &mut W, v: usize) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(v as u64)
}

fn read_usize<R: Read>(r: &mut R) -> std::io::Result<usize> {
    Ok(r.read_u64::<LittleEndian>()? as usize)
}

fn write_perm<W: Write>(w: &mut W, p: &Permutation) -> std::io::Result<()> {
    write_usize(w, p.len())?;
    p.as_slice().iter().try_for_each(|&i| w.write_u32::<LittleEndian>(i as u32))
}

fn read_perm<R: Read>(r: &mut R) -> Result<Permutation> {
    let n = read_usize(r)?;
    let v = (0..n).map(|_| r.read_u32::<LittleEndian>().map(|i| i as usize)).collect::<std::io::Result<_>>()?;
    Permutation::new(v).map_err(|_| Error::Cache("corrupt permutation".into()))
}

fn write_values<W: Write>(w: &mut W, v: &[RingValue]) -> std::io::Result<()> {
    write_usize(w, v.len())?;
    v.iter().try_for_each(|x| w.write_u64::<LittleEndian>(x.0))
}

fn read_values<R: Read>(r: &mut R) -> std::io::Result<Vec<RingValue>> {
    let n = read_usize(r)?;
    (0..n).map(|_| r.read_u64::<LittleEndian>().map(RingValue)).collect()
}

fn write_matrix<W: Write>(w: &mut W, m: &RingMatrix) -> std::io::Result<()> {
    write_usize(w, m.rows())?;
    write_usize(w, m.cols())?;
    write_values(w, m.data())
}

fn read_matrix<R: Read>(r: &mut R) -> Result<RingMatrix> {
    let rows = read_usize(r)?;
    let cols = read_usize(r)?;
    RingMatrix::new(rows, cols, read_values(r)?).map_err(|_| Error::Cache("corrupt matrix".into()))
}

fn write_request<W: Write>(w: &mut W, req: &Request) -> std::io::Result<()> {
    match req {
        Request::Triples(shapes) => {
            w.write_u8(0)?;
            write_usize(w, shapes.len())?;
            for &(a, n, b) in shapes {
                write_usize(w, a)?;
                write_usize(w, n)?;
                write_usize(w, b)?;
            }
        }
        Request::Hadamard(n) => {
            w.write_u8(1)?;
            write_usize(w, *n)?;
        }
        Request::Shuffle { n, pi } => {
            w.write_u8(2)?;
            write_usize(w, *n)?;
            w.write_u8(pi.is_some() as u8)?;
            if let Some(p) = pi {
                write_perm(w, p)?;
            }
        }
        Request::ShuffleMasks { corr_id, width, inverse } => {
            w.write_u8(3)?;
            w.write_u64::<LittleEndian>(*corr_id)?;
            write_usize(w, *width)?;
            w.write_u8(*inverse as u8)?;
        }
        Request::Truncation(n) => {
            w.write_u8(4)?;
            write_usize(w, *n)?;
        }
        Request::DpFlips { n, epsilon, delta } => {
            w.write_u8(5)?;
            write_usize(w, *n)?;
            w.write_f64::<LittleEndian>(*epsilon)?;
            w.write_f64::<LittleEndian>(*delta)?;
        }
    }
    Ok(())
}

fn read_request<R: Read>(r: &mut R) -> Result<Request> {
    Ok(match r.read_u8()? {
        0 => {
            let n = read_usize(r)?;
            let mut shapes = Vec::with_capacity(n);
            for _ in 0..n {
                shapes.push((read_usize(r)?, read_usize(r)?, read_usize(r)?));
            }
            Request::Triples(shapes)
        }
        1 => Request::Hadamard(read_usize(r)?),
        2 => {
            let n = read_usize(r)?;
            let pi = if r.read_u8()? == 1 { Some(read_perm(r)?) } else { None };
            Request::Shuffle { n, pi }
        }
        3 => Request::ShuffleMasks {
            corr_id: r.read_u64::<LittleEndian>()?,
            width: read_usize(r)?,
            inverse: r.read_u8()? == 1,
        },
        4 => Request::Truncation(read_usize(r)?),
        5 => Request::DpFlips {
            n: read_usize(r)?,
            epsilon: r.read_f64::<LittleEndian>()?,
            delta: r.read_f64::<LittleEndian>()?,
        },
        t => return Err(Error::Cache(format!("unknown request tag {t}"))),
    })
}

fn write_material<W: Write>(w: &mut W, m: &Material) -> std::io::Result<()> {
    match m {
        Material::Triples(ts) => {
            w.write_u8(0)?;
            write_usize(w, ts.len())?;
            for t in ts {
                w.write_u64::<LittleEndian>(t.id)?;
                write_matrix(w, &t.a)?;
                write_matrix(w, &t.b)?;
                write_matrix(w, &t.c)?;
            }
        }
        Material::Shuffle(c) => {
            w.write_u8(1)?;
            w.write_u64::<LittleEndian>(c.id)?;
            w.write_u8(c.party.index() as u8)?;
            write_perm(w, &c.rho)?;
            write_perm(w, &c.tau)?;
        }
        Material::Masks(m) => {
            w.write_u8(2)?;
            w.write_u64::<LittleEndian>(m.id)?;
            w.write_u64::<LittleEndian>(m.corr_id)?;
            w.write_u8(m.inverse as u8)?;
            write_matrix(w, &m.a)?;
            write_matrix(w, &m.b)?;
        }
        Material::Truncation(t) => {
            w.write_u8(3)?;
            w.write_u64::<LittleEndian>(t.id)?;
            w.write_u32::<LittleEndian>(t.frac)?;
            write_values(w, &t.r)?;
            write_values(w, &t.r_hi)?;
            write_values(w, &t.r_lo)?;
        }
        Material::Flips { id, bits, weight } => {
            w.write_u8(4)?;
            w.write_u64::<LittleEndian>(*id)?;
            w.write_u64::<LittleEndian>(*weight)?;
            write_values(w, bits)?;
        }
    }
    Ok(())
}

fn read_material<R: Read>(r: &mut R) -> Result<Material> {
    Ok(match r.read_u8()? {
        0 => {
            let n = read_usize(r)?;
            let mut ts = Vec::with_capacity(n);
            for _ in 0..n {
                let id = r.read_u64::<LittleEndian>()?;
                ts.push(TripleShare { id, a: read_matrix(r)?, b: read_matrix(r)?, c: read_matrix(r)? });
            }
            Material::Triples(ts)
        }
        1 => {
            let id = r.read_u64::<LittleEndian>()?;
            let party = if r.read_u8()? == 0 { PartyId::One } else { PartyId::Two };
            Material::Shuffle(ShuffleCorrelation { id, party, rho: read_perm(r)?, tau: read_perm(r)? })
        }
        2 => Material::Masks(ShuffleMasks {
            id: r.read_u64::<LittleEndian>()?,
            corr_id: r.read_u64::<LittleEndian>()?,
            inverse: r.read_u8()? == 1,
            a: read_matrix(r)?,
            b: read_matrix(r)?,
        }),
        3 => Material::Truncation(TruncationPair {
            id: r.read_u64::<LittleEndian>()?,
            frac: r.read_u32::<LittleEndian>()?,
            r: read_values(r)?,
            r_hi: read_values(r)?,
            r_lo: read_values(r)?,
        }),
        4 => Material::Flips {
            id: r.read_u64::<LittleEndian>()?,
            weight: r.read_u64::<LittleEndian>()?,
            bits: read_values(r)?,
        },
        t => return Err(Error::Cache(format!("unknown material tag {t}"))),
    })
}
