//! Dealer-assisted ideal functionalities for the non-linear layers.
//!
//! Both parties deposit their shares with a trusted hub, which reconstructs
//! the input, evaluates the function exactly in plaintext, and hands back a
//! fresh sharing of the result. The communication a real protocol would need
//! is charged to the ledger from an [`IdealCostModel`] instead of being sent.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Condvar, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::{FixedPointCodec, RingValue};
use crate::sharing::PartyId;

/// Charged cost of one functionality: `per_element · elements + per_row · rows`
/// ring elements in total (split evenly between the parties) and `rounds`
/// synchronization rounds per invocation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostEntry {
    pub per_element: u64,
    pub per_row: u64,
    pub rounds: u64,
}

impl CostEntry {
    pub const fn new(per_element: u64, per_row: u64, rounds: u64) -> Self {
        CostEntry { per_element, per_row, rounds }
    }

    pub fn charge(&self, elements: u64, rows: u64) -> u64 {
        self.per_element * elements + self.per_row * rows
    }
}

/// Kind names understood by the engine.
pub mod kind {
    pub const COMPARE: &str = "compare";
    pub const RELU: &str = "relu";
    pub const SOFTMAX: &str = "softmax";
    pub const LAYERNORM: &str = "layernorm";
    pub const ARGMAX: &str = "argmax";
    pub const EMBEDDING: &str = "embedding";
    pub const TRUNCATION_CARRY: &str = "truncation_carry";
    pub const MASK_INJECTION: &str = "mask_injection";
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdealCostModel {
    entries: BTreeMap<String, CostEntry>,
}

/// Elements charged per secure comparison unless configured otherwise.
pub const DEFAULT_COMPARE_COST: u64 = 64;

impl Default for IdealCostModel {
    fn default() -> Self {
        let c = DEFAULT_COMPARE_COST;
        let entries = [
            (kind::COMPARE, CostEntry::new(c, 0, 7)),
            (kind::RELU, CostEntry::new(c, 0, 7)),
            (kind::SOFTMAX, CostEntry::new(2 * c, c, 20)),
            (kind::LAYERNORM, CostEntry::new(c, c, 20)),
            (kind::ARGMAX, CostEntry::new(c, 0, 12)),
            (kind::EMBEDDING, CostEntry::new(0, 0, 0)),
            (kind::TRUNCATION_CARRY, CostEntry::new(0, 0, 0)),
            (kind::MASK_INJECTION, CostEntry::new(0, 0, 0)),
        ];
        IdealCostModel { entries: entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect() }
    }
}

impl IdealCostModel {
    pub fn empty() -> Self {
        IdealCostModel { entries: BTreeMap::new() }
    }

    /// Default model with the comparison cost (and the ReLU cost, which is one
    /// comparison per element) set to `c`.
    pub fn with_compare_cost(c: u64) -> Self {
        let mut m = IdealCostModel::default();
        m.entries.get_mut(kind::COMPARE).unwrap().per_element = c;
        m.entries.get_mut(kind::RELU).unwrap().per_element = c;
        m
    }

    /// Parse a `kind = { per_element = .., per_row = .., rounds = .. }` table.
    /// Entries not mentioned keep their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let parsed: BTreeMap<String, CostEntry> =
            toml::from_str(text).map_err(|e| Error::Config(format!("cost model: {e}")))?;
        let mut m = IdealCostModel::default();
        m.entries.extend(parsed);
        Ok(m)
    }

    pub fn set(&mut self, kind: &str, entry: CostEntry) {
        self.entries.insert(kind.to_string(), entry);
    }

    pub fn entry(&self, kind: &str) -> Result<CostEntry> {
        self.entries.get(kind).copied().ok_or_else(|| Error::UnknownKind(kind.to_string()))
    }

    pub fn compare_cost(&self) -> u64 {
        self.entries.get(kind::COMPARE).map_or(0, |e| e.per_element)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &CostEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Whether the hub reshares the result or opens it to both parties.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    Shared,
    Public,
}

pub type Eval<'a> = Box<dyn FnOnce(Vec<RingValue>) -> Result<Vec<RingValue>> + Send + 'a>;

struct Slot {
    label: String,
    first: Option<(PartyId, Vec<RingValue>)>,
    results: [Option<std::result::Result<Vec<RingValue>, String>>; 2],
}

#[derive(Default)]
struct HubState {
    slots: HashMap<u64, Slot>,
    aborted: bool,
}

pub struct Hub {
    seed: u64,
    codec: FixedPointCodec,
    state: Mutex<HubState>,
    cv: Condvar,
}

impl Hub {
    pub fn new(seed: u64, codec: FixedPointCodec) -> Self {
        Hub { seed, codec, state: Mutex::new(HubState::default()), cv: Condvar::new() }
    }

    /// Wake every waiting party with a [`Error::PeerAborted`].
    pub fn abort(&self) {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).aborted = true;
        self.cv.notify_all();
    }

    /// Deposit `input` for call `key`. The party that arrives second runs its
    /// `eval` on the reconstructed input; both then receive their share of the
    /// output.
    pub fn call<'a>(
        &self,
        party: PartyId,
        key: u64,
        label: &str,
        input: Vec<RingValue>,
        output: Output,
        eval: Eval<'a>,
    ) -> Result<Vec<RingValue>> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if st.aborted {
            return Err(Error::PeerAborted);
        }
        match st.slots.get_mut(&key) {
            None => {
                st.slots.insert(
                    key,
                    Slot { label: label.to_string(), first: Some((party, input)), results: [None, None] },
                );
            }
            Some(slot) => {
                if slot.label != label {
                    let msg = format!("ideal call {key}: {label} vs {}", slot.label);
                    slot.results = [Some(Err(msg.clone())), Some(Err(msg.clone()))];
                    self.cv.notify_all();
                    return Err(Error::Desync(msg));
                }
                let (_, peer_input) = slot.first.take().expect("first deposit present");
                if peer_input.len() != input.len() {
                    let msg = format!("ideal call {key}: input lengths {} vs {}", input.len(), peer_input.len());
                    slot.results = [Some(Err(msg.clone())), Some(Err(msg.clone()))];
                    self.cv.notify_all();
                    return Err(Error::Desync(msg));
                }
                let mask = self.codec.mask();
                let secret: Vec<RingValue> =
                    input.iter().zip(&peer_input).map(|(&a, &b)| RingValue((a + b).0 & mask)).collect();
                slot.results = match eval(secret) {
                    Ok(value) => {
                        let (s1, s2) = match output {
                            Output::Public => (value.clone(), value),
                            Output::Shared => self.reshare(key, &value),
                        };
                        [Some(Ok(s1)), Some(Ok(s2))]
                    }
                    Err(e) => [Some(Err(e.to_string())), Some(Err(e.to_string()))],
                };
                self.cv.notify_all();
            }
        }
        loop {
            if st.aborted {
                return Err(Error::PeerAborted);
            }
            let slot = st.slots.get_mut(&key).expect("slot present until both collect");
            if let Some(res) = slot.results[party.index()].take() {
                if slot.results.iter().all(Option::is_none) {
                    st.slots.remove(&key);
                }
                return res.map_err(|msg| match msg {
                    m if m.starts_with("ideal call") => Error::Desync(m),
                    m => Error::Contract(m),
                });
            }
            st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn reshare(&self, key: u64, value: &[RingValue]) -> (Vec<RingValue>, Vec<RingValue>) {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed ^ 0x6875_625f_7368_6172);
        rng.set_stream(key);
        let r: Vec<RingValue> = value.iter().map(|_| RingValue(rng.random())).collect();
        let other = value.iter().zip(&r).map(|(&v, &r)| v - r).collect();
        (r, other)
    }
}

/// Plaintext kernels evaluated by the hub. Inputs and outputs are fixed-point
/// ring values.
pub mod eval {
    use super::*;

    /// 1 (as a ring integer, not fixed-point) iff `v > delta`, strictly.
    pub fn compare(codec: &FixedPointCodec, values: &[RingValue], delta: RingValue) -> Vec<RingValue> {
        let d = codec.signed(delta);
        values.iter().map(|&v| RingValue((codec.signed(v) > d) as u64)).collect()
    }

    pub fn relu(codec: &FixedPointCodec, values: &[RingValue]) -> Vec<RingValue> {
        values
            .iter()
            .map(|&v| if codec.signed(v) > 0 { codec.reduce(v) } else { RingValue::ZERO })
            .collect()
    }

    /// Row-wise softmax over a `rows × cols` block. Row `r` only looks at its
    /// first `valid[r]` entries (causal masking); the rest are set to zero.
    pub fn softmax(
        codec: &FixedPointCodec,
        values: &[RingValue],
        cols: usize,
        valid: Option<&[usize]>,
    ) -> Result<Vec<RingValue>> {
        let mut out = vec![RingValue::ZERO; values.len()];
        if cols == 0 {
            return Ok(out);
        }
        for (r, (row, dst)) in values.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let n = valid.map_or(cols, |v| v[r].min(cols));
            if n == 0 {
                continue;
            }
            let xs: Vec<f64> = row[..n].iter().map(|&v| codec.decode(v)).collect();
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (d, e) in dst.iter_mut().zip(exps) {
                *d = codec.encode(e / sum)?;
            }
        }
        Ok(out)
    }

    pub fn layernorm(
        codec: &FixedPointCodec,
        values: &[RingValue],
        gamma: &[f64],
        beta: &[f64],
        eps: f64,
    ) -> Result<Vec<RingValue>> {
        let cols = gamma.len();
        let mut out = Vec::with_capacity(values.len());
        for row in values.chunks(cols) {
            let xs: Vec<f64> = row.iter().map(|&v| codec.decode(v)).collect();
            let mean = xs.iter().sum::<f64>() / cols as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, x) in xs.iter().enumerate() {
                out.push(codec.encode((x - mean) * inv * gamma[j] + beta[j])?);
            }
        }
        Ok(out)
    }

    /// Index of the largest value in each row; ties go to the lowest index.
    pub fn argmax(codec: &FixedPointCodec, values: &[RingValue], cols: usize) -> Vec<RingValue> {
        values
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if codec.signed(v) > codec.signed(row[best]) {
                        best = j;
                    }
                }
                RingValue(best as u64)
            })
            .collect()
    }

    /// Carry bit of the exact truncation: input is `[c_lo…, r_lo…]`, output
    /// `[c_lo < r_lo]` per element.
    pub fn truncation_carry(values: &[RingValue]) -> Vec<RingValue> {
        let n = values.len() / 2;
        (0..n).map(|i| RingValue((values[i].0 < values[n + i].0) as u64)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn compare_is_strict() {
        let c = FixedPointCodec::default();
        let zero = RingValue::ZERO;
        let vals = [c.encode(0.3).unwrap(), zero, c.encode(-1.0).unwrap()];
        assert_eq!(eval::compare(&c, &vals, zero), vec![RingValue(1), RingValue(0), RingValue(0)]);
    }

    #[test]
    fn relu_and_softmax() {
        let c = FixedPointCodec::default();
        assert_eq!(eval::relu(&c, &[c.encode(-2.0).unwrap()]), vec![RingValue::ZERO]);
        let out = eval::softmax(&c, &[RingValue::ZERO; 4], 4, None).unwrap();
        for v in out {
            assert!((c.decode(v) - 0.25).abs() <= 2f64.powi(-16));
        }
        let out = eval::softmax(&c, &[RingValue::ZERO; 4], 2, Some(&[1, 2])).unwrap();
        assert_eq!(c.decode_slice(&out), vec![1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn layernorm_normalizes() {
        let c = FixedPointCodec::default();
        let x = c.encode_slice(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = c.decode_slice(&eval::layernorm(&c, &x, &[1.0; 4], &[0.0; 4], 1e-5).unwrap());
        assert!(y.iter().sum::<f64>().abs() < 1e-3);
        assert!((y[3] - 1.3416).abs() < 1e-3);
    }

    #[test]
    fn cost_model_from_toml() {
        let m = IdealCostModel::from_toml_str("compare = { per_element = 32, rounds = 3 }\n").unwrap();
        assert_eq!(m.compare_cost(), 32);
        assert_eq!(m.entry("relu").unwrap().per_element, DEFAULT_COMPARE_COST);
        assert!(matches!(IdealCostModel::empty().entry("relu"), Err(Error::UnknownKind(_))));
        assert!(IdealCostModel::from_toml_str("compare = { per_elem = 1 }").is_err());
    }

    #[test]
    fn hub_reconstructs_and_reshares() {
        let codec = FixedPointCodec::default();
        let hub = Arc::new(Hub::new(1, codec));
        let run = |party: PartyId, share: u64| {
            let hub = hub.clone();
            std::thread::spawn(move || {
                hub.call(
                    party,
                    9,
                    "double",
                    vec![RingValue(share)],
                    Output::Shared,
                    Box::new(|v| Ok(v.iter().map(|&x| x + x).collect())),
                )
                .unwrap()
            })
        };
        let a = run(PartyId::One, 40);
        let b = run(PartyId::Two, 2);
        let (a, b) = (a.join().unwrap(), b.join().unwrap());
        assert_eq!(a[0] + b[0], RingValue(84));
    }

    #[test]
    fn hub_abort_releases_waiters() {
        let hub = Arc::new(Hub::new(1, FixedPointCodec::default()));
        let h = hub.clone();
        let t = std::thread::spawn(move || {
            h.call(PartyId::One, 1, "x", vec![], Output::Shared, Box::new(Ok))
        });
        std::thread::sleep(std::time::Duration::from_millis(20));
        hub.abort();
        assert!(matches!(t.join().unwrap(), Err(Error::PeerAborted)));
    }
}
