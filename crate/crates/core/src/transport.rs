//! Simulated point-to-point link between the two parties plus the ledger that
//! counts what crosses it.
//!
//! Each party owns a [`PartyEndpoint`]. An exchange sends the local payload and
//! blocks until the peer's payload for the same round arrives; the message
//! header carries the round number and phase label so that parties that drift
//! out of step fail loudly instead of mixing up payloads.

use std::fmt;
use std::sync::mpsc::{channel, Receiver, Sender};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::sharing::PartyId;

/// Phase labels used by the engine. The ledger accepts any label.
pub mod phase {
    pub const QKV: &str = "QKV";
    pub const MATMUL: &str = "MatMul";
    pub const SOFTMAX: &str = "Softmax";
    pub const OUTPUT: &str = "Output";
    pub const FC1: &str = "FC1";
    pub const RELU: &str = "ReLU";
    pub const FC2: &str = "FC2";
    pub const OTHERS: &str = "Others";
    pub const PREDICTOR: &str = "Predictor";
    pub const CACHE_REFILL: &str = "CacheRefill";
    /// One-time weight preparation; reported but excluded from online totals.
    pub const SETUP: &str = "Setup";
    pub const DEFAULT: &str = "Default";

    pub fn is_offline(label: &str) -> bool {
        label == SETUP
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PhaseCost {
    pub elements: [u64; 2],
    pub rounds: u64,
}

impl PhaseCost {
    pub fn total_elements(&self) -> u64 {
        self.elements[0] + self.elements[1]
    }
}

/// Elements sent per party and synchronization rounds, grouped by phase label
/// in first-use order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostLedger {
    phases: IndexMap<String, PhaseCost>,
}

impl CostLedger {
    pub fn new() -> Self {
        CostLedger::default()
    }

    fn entry(&mut self, phase: &str) -> &mut PhaseCost {
        if !self.phases.contains_key(phase) {
            self.phases.insert(phase.to_string(), PhaseCost::default());
        }
        self.phases.get_mut(phase).unwrap()
    }

    pub fn charge(&mut self, party: PartyId, phase: &str, elements: u64) {
        self.entry(phase).elements[party.index()] += elements;
    }

    pub fn add_round(&mut self, phase: &str, rounds: u64) {
        self.entry(phase).rounds += rounds;
    }

    pub fn phase(&self, label: &str) -> PhaseCost {
        self.phases.get(label).copied().unwrap_or_default()
    }

    pub fn phases(&self) -> impl Iterator<Item = (&str, &PhaseCost)> {
        self.phases.iter().map(|(k, v)| (k.as_str(), v))
    }

    fn online(&self) -> impl Iterator<Item = &PhaseCost> {
        self.phases.iter().filter(|(k, _)| !phase::is_offline(k)).map(|(_, v)| v)
    }

    /// Online elements sent by both parties.
    pub fn total_elements(&self) -> u64 {
        self.online().map(PhaseCost::total_elements).sum()
    }

    pub fn party_elements(&self, party: PartyId) -> u64 {
        self.online().map(|p| p.elements[party.index()]).sum()
    }

    pub fn total_rounds(&self) -> u64 {
        self.online().map(|p| p.rounds).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.values().all(|p| *p == PhaseCost::default())
    }

    /// Combine the per-party ledgers of one run: elements add up, rounds are
    /// shared and must agree.
    pub fn merge_parties(p1: &CostLedger, p2: &CostLedger) -> Result<CostLedger> {
        let mut out = CostLedger::new();
        for (label, c) in p1.phases().chain(p2.phases()) {
            let e = out.entry(label);
            e.elements[0] += c.elements[0];
            e.elements[1] += c.elements[1];
        }
        for (label, c) in p1.phases() {
            if p2.phase(label).rounds != c.rounds {
                return Err(Error::Desync(format!(
                    "parties disagree on round count in phase {label}: {} vs {}",
                    c.rounds,
                    p2.phase(label).rounds
                )));
            }
            out.entry(label).rounds = c.rounds;
        }
        Ok(out)
    }

    /// Accumulate another ledger (e.g. a later run segment) into this one.
    pub fn absorb(&mut self, other: &CostLedger) {
        for (label, c) in other.phases() {
            let e = self.entry(label);
            e.elements[0] += c.elements[0];
            e.elements[1] += c.elements[1];
            e.rounds += c.rounds;
        }
    }

    /// Cost accrued since `earlier`, which must be a snapshot of this ledger.
    pub fn delta_since(&self, earlier: &CostLedger) -> CostLedger {
        let mut out = CostLedger::new();
        for (label, c) in self.phases() {
            let b = earlier.phase(label);
            let d = PhaseCost {
                elements: [c.elements[0] - b.elements[0], c.elements[1] - b.elements[1]],
                rounds: c.rounds - b.rounds,
            };
            if d != PhaseCost::default() {
                out.phases.insert(label.to_string(), d);
            }
        }
        out
    }
}

/// A named link-speed preset for the wall-time estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bandwidth {
    pub name: &'static str,
    pub bits_per_second: f64,
}

impl Bandwidth {
    pub const PRESETS: [Bandwidth; 4] = [
        Bandwidth { name: "100Mbps", bits_per_second: 100e6 },
        Bandwidth { name: "500Mbps", bits_per_second: 500e6 },
        Bandwidth { name: "1Gbps", bits_per_second: 1e9 },
        Bandwidth { name: "5Gbps", bits_per_second: 5e9 },
    ];

    pub fn preset(name: &str) -> Result<Bandwidth> {
        Bandwidth::PRESETS
            .iter()
            .find(|b| b.name.eq_ignore_ascii_case(name))
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown bandwidth preset {name:?} (expected one of 100Mbps, 500Mbps, 1Gbps, 5Gbps)"
                ))
            })
    }
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

/// `rounds · RTT + bytes / bandwidth`.
pub fn wall_time(rounds: u64, bytes: u64, bandwidth: Bandwidth, rtt_seconds: f64) -> f64 {
    rounds as f64 * rtt_seconds + bytes as f64 * 8.0 / bandwidth.bits_per_second
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TranscriptMode {
    #[default]
    Off,
    /// Record message structure only.
    Shape,
    /// Record structure and payloads.
    Full,
}

/// One sent message as seen by its sender.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub round: u64,
    pub phase: String,
    pub label: String,
    /// Named pieces of the payload and their lengths, in order.
    pub segments: Vec<(String, usize)>,
    /// Dealer artifacts consumed by the protocol step that sent this message.
    pub artifacts: Vec<u64>,
    pub payload: Option<Vec<u64>>,
}

impl TranscriptEntry {
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug)]
struct Message {
    round: u64,
    phase: String,
    payload: Vec<u64>,
}

/// Describes an outgoing message for ledger attribution and transcripts.
#[derive(Clone, Debug, Default)]
pub struct Envelope {
    pub label: String,
    pub segments: Vec<(String, usize)>,
    /// Optional per-segment phase overrides, parallel to `segments`.
    pub phases: Option<Vec<String>>,
    pub artifacts: Vec<u64>,
}

impl Envelope {
    pub fn new(label: impl Into<String>) -> Self {
        Envelope { label: label.into(), ..Default::default() }
    }

    pub fn segment(mut self, name: impl Into<String>, len: usize) -> Self {
        self.segments.push((name.into(), len));
        self
    }

    pub fn artifact(mut self, id: u64) -> Self {
        self.artifacts.push(id);
        self
    }
}

pub struct PartyEndpoint {
    party: PartyId,
    tx: Sender<Message>,
    rx: Receiver<Message>,
    round: u64,
    ledger: CostLedger,
    transcript_mode: TranscriptMode,
    transcript: Vec<TranscriptEntry>,
}

/// A connected pair of endpoints.
pub fn link(mode: TranscriptMode) -> (PartyEndpoint, PartyEndpoint) {
    let (tx12, rx12) = channel();
    let (tx21, rx21) = channel();
    let mk = |party, tx, rx| PartyEndpoint {
        party,
        tx,
        rx,
        round: 0,
        ledger: CostLedger::new(),
        transcript_mode: mode,
        transcript: Vec::new(),
    };
    (mk(PartyId::One, tx12, rx21), mk(PartyId::Two, tx21, rx12))
}

impl PartyEndpoint {
    pub fn party(&self) -> PartyId {
        self.party
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut CostLedger {
        &mut self.ledger
    }

    pub fn rounds_so_far(&self) -> u64 {
        self.round
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn into_parts(self) -> (CostLedger, Vec<TranscriptEntry>) {
        (self.ledger, self.transcript)
    }

    /// Send `payload`, receive the peer's payload for the same round.
    pub fn exchange(&mut self, payload: Vec<u64>, phase_label: &str) -> Result<Vec<u64>> {
        let len = payload.len();
        self.exchange_with(payload, phase_label, Envelope::new("data").segment("data", len))
    }

    /// Like [`PartyEndpoint::exchange`], with explicit segment attribution.
    /// Segment lengths must add up to the payload length.
    pub fn exchange_with(&mut self, payload: Vec<u64>, phase_label: &str, env: Envelope) -> Result<Vec<u64>> {
        let seg_total: usize = env.segments.iter().map(|s| s.1).sum();
        if seg_total != payload.len() {
            return Err(Error::contract(format!(
                "envelope describes {seg_total} elements but payload has {}",
                payload.len()
            )));
        }
        self.round += 1;
        match &env.phases {
            Some(phases) => {
                for ((_, len), ph) in env.segments.iter().zip(phases) {
                    self.ledger.charge(self.party, ph, *len as u64);
                }
            }
            None => self.ledger.charge(self.party, phase_label, payload.len() as u64),
        }
        self.ledger.add_round(phase_label, 1);
        if self.transcript_mode != TranscriptMode::Off {
            self.transcript.push(TranscriptEntry {
                round: self.round,
                phase: phase_label.to_string(),
                label: env.label,
                segments: env.segments,
                artifacts: env.artifacts,
                payload: (self.transcript_mode == TranscriptMode::Full).then(|| payload.clone()),
            });
        }
        self.tx
            .send(Message { round: self.round, phase: phase_label.to_string(), payload })
            .map_err(|_| Error::PeerAborted)?;
        let msg = self.rx.recv().map_err(|_| Error::PeerAborted)?;
        if msg.round != self.round || msg.phase != phase_label {
            return Err(Error::Desync(format!(
                "party {} at round {} phase {phase_label} received round {} phase {}",
                self.party, self.round, msg.round, msg.phase
            )));
        }
        Ok(msg.payload)
    }
}
