//! Low-rank activation predictor: `σ(W₂(W₁x + b₁) + b₂) > δ`, evaluated in
//! plaintext fixed point or under secret sharing.
//!
//! The plaintext path mirrors the secure one operation for operation (same
//! ring products, same floor truncation), so the two agree bit for bit.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::protocols::{Nonlinear, Session};
use crate::ring::{FixedPointCodec, RingMatrix, RingValue};
use crate::sharing::{share_with_rng, PartyId, ShareMatrix};
use crate::transport::phase;

/// Predictor parameters in real numbers. `w1` is `r×h`, `w2` is `o×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorWeights {
    pub h: usize,
    pub r: usize,
    pub o: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub delta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Neuron,
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionResult {
    /// `tokens × o`, row-major.
    pub bits: Vec<u8>,
    pub tokens: usize,
    pub granularity: Granularity,
}

impl PredictionResult {
    pub fn width(&self) -> usize {
        self.bits.len().checked_div(self.tokens).unwrap_or(0)
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            1.0 - self.ones() as f64 / self.bits.len() as f64
        }
    }

    pub fn from_ring(m: &RingMatrix, granularity: Granularity) -> Result<Self> {
        let mut bits = Vec::with_capacity(m.len());
        for (position, v) in m.data().iter().enumerate() {
            match v.0 {
                0 | 1 => bits.push(v.0 as u8),
                value => return Err(Error::NonBinary { position, value }),
            }
        }
        Ok(PredictionResult { bits, tokens: m.rows(), granularity })
    }
}

impl PredictorWeights {
    pub fn new(
        (h, r, o): (usize, usize, usize),
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
        delta: f64,
    ) -> Result<Self> {
        let w = PredictorWeights { h, r, o, w1, b1, w2, b2, delta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, r, o) = (self.h, self.r, self.o);
        if r == 0 || r >= h.min(o) {
            return Err(Error::Config(format!("predictor rank {r} must be below min(h, o) = {}", h.min(o))));
        }
        let lens = [(self.w1.len(), r * h, "W1"), (self.b1.len(), r, "b1"), (self.w2.len(), o * r, "W2"), (self.b2.len(), o, "b2")];
        for (got, want, name) in lens {
            if got != want {
                return Err(Error::Config(format!("predictor {name}: {got} values, expected {want}")));
            }
        }
        let all = self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2);
        if !self.delta.is_finite() || all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("predictor weights must be finite".into()));
        }
        Ok(())
    }

    /// Text format: a header line `h r o delta frac`, then W1, b1, W2, b2 as
    /// whitespace-separated reals in row-major order.
    pub fn to_text(&self, frac: u32) -> String {
        let mut s = format!("{} {} {} {} {}\n", self.h, self.r, self.o, self.delta, frac);
        for block in [&self.w1, &self.b1, &self.w2, &self.b2] {
            let line: Vec<String> = block.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// Parse [`PredictorWeights::to_text`] output. Returns the weights and
    /// the fractional precision recorded in the header.
    pub fn parse(text: &str) -> Result<(Self, u32)> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Config("predictor file is empty".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Config("predictor header must be `h r o delta frac`".into()));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|e| Error::Config(format!("predictor header: {e}")));
        let (h, r, o) = (dim(fields[0])?, dim(fields[1])?, dim(fields[2])?);
        let delta: f64 = fields[3].parse().map_err(|e| Error::Config(format!("predictor delta: {e}")))?;
        let frac: u32 = fields[4].parse().map_err(|e| Error::Config(format!("predictor frac: {e}")))?;
        let mut values = Vec::new();
        for l in lines {
            for tok in l.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|e| Error::Config(format!("predictor value {tok:?}: {e}")))?);
            }
        }
        let want = r * h + r + o * r + o;
        if values.len() != want {
            return Err(Error::Config(format!("predictor file has {} values, expected {want}", values.len())));
        }
        let mut it = values.into_iter();
        let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<f64>>();
        let (w1, b1, w2, b2) = (take(r * h), take(r), take(o * r), take(o));
        Ok((PredictorWeights::new((h, r, o), w1, b1, w2, b2, delta)?, frac))
    }

    pub fn load(path: &Path) -> Result<(Self, u32)> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Random weights with entries drawn from `N(0, scale²)`.
    pub fn random(h: usize, r: usize, o: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, scale).map_err(|e| Error::Config(e.to_string()))?;
        let mut draw = |k: usize| (0..k).map(|_| n.sample(&mut rng)).collect::<Vec<f64>>();
        let (w1, b1, w2, b2) = (draw(r * h), draw(r), draw(o * r), draw(o));
        PredictorWeights::new((h, r, o), w1, b1, w2, b2, 0.0)
    }

    /// Encoded, transposed operands: `W1ᵀ` (h×r), `b1`, `W2ᵀ` (r×o), `b2`.
    pub fn encode(&self, codec: &FixedPointCodec) -> Result<EncodedPredictor> {
        let w1 = RingMatrix::encode(codec, self.r, self.h, &self.w1)?.transpose();
        let w2 = RingMatrix::encode(codec, self.o, self.r, &self.w2)?.transpose();
        Ok(EncodedPredictor {
            w1t: w1,
            b1: codec.encode_slice(&self.b1)?,
            w2t: w2,
            b2: codec.encode_slice(&self.b2)?,
            delta: self.delta,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPredictor {
    pub w1t: RingMatrix,
    pub b1: Vec<RingValue>,
    pub w2t: RingMatrix,
    pub b2: Vec<RingValue>,
    pub delta: f64,
}

/// One party's share of the predictor.
#[derive(Clone, Debug)]
pub struct SharedPredictor {
    pub w1t: ShareMatrix,
    pub b1: Vec<RingValue>,
    pub w2t: ShareMatrix,
    pub b2: Vec<RingValue>,
    pub delta: f64,
}

impl EncodedPredictor {
    pub fn share<R: Rng + ?Sized>(&self, rng: &mut R) -> [SharedPredictor; 2] {
        let (w1a, w1b) = share_with_rng(&self.w1t, rng);
        let (w2a, w2b) = share_with_rng(&self.w2t, rng);
        let (b1a, b1b) = share_with_rng(&RingMatrix::row_vector(self.b1.clone()), rng);
        let (b2a, b2b) = share_with_rng(&RingMatrix::row_vector(self.b2.clone()), rng);
        [
            SharedPredictor {
                w1t: w1a,
                b1: b1a.values.into_data(),
                w2t: w2a,
                b2: b2a.values.into_data(),
                delta: self.delta,
            },
            SharedPredictor {
                w1t: w1b,
                b1: b1b.values.into_data(),
                w2t: w2b,
                b2: b2b.values.into_data(),
                delta: self.delta,
            },
        ]
    }

    /// Pre-threshold scores for each row of `x` (tokens × h, encoded).
    pub fn scores(&self, codec: &FixedPointCodec, x: &RingMatrix) -> Result<RingMatrix> {
        let z1 = add_row(&x.matmul(&self.w1t)?.map(|v| codec.truncate(v)), &self.b1);
        Ok(add_row(&z1.matmul(&self.w2t)?.map(|v| codec.truncate(v)), &self.b2))
    }
}

fn add_row(m: &RingMatrix, row: &[RingValue]) -> RingMatrix {
    RingMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) + row[j])
}

/// Plaintext fixed-point prediction for each row of `x` (tokens × h).
pub fn predict_plain(
    w: &EncodedPredictor,
    codec: &FixedPointCodec,
    x: &RingMatrix,
    granularity: Granularity,
) -> Result<PredictionResult> {
    if x.cols() != w.w1t.rows() {
        return Err(Error::shape(format!("predictor expects width {}, got {}", w.w1t.rows(), x.cols())));
    }
    let threshold = codec.encode(w.delta)?;
    let s = w.scores(codec, x)?;
    let t = codec.signed(threshold);
    let bits = s.data().iter().map(|&v| (codec.signed(v) > t) as u8).collect();
    Ok(PredictionResult { bits, tokens: x.rows(), granularity })
}

/// Secure prediction; all traffic is charged to the predictor phase.
/// Returns shares of a 0/1 matrix (tokens × o), integer-valued.
pub fn predict_mpc(session: &mut Session, x: &ShareMatrix, w: &SharedPredictor) -> Result<ShareMatrix> {
    if x.cols() != w.w1t.rows() {
        return Err(Error::shape(format!("predictor expects width {}, got {}", w.w1t.rows(), x.cols())));
    }
    session.in_phase(phase::PREDICTOR, |s| {
        let z1 = s.pi_matmul(x, &w.w1t)?;
        let z1 = s.truncate(&z1)?;
        let z1 = s.add_row_broadcast(&z1, &w.b1)?;
        let z2 = s.pi_matmul(&z1, &w.w2t)?;
        let z2 = s.truncate(&z2)?;
        let z2 = s.add_row_broadcast(&z2, &w.b2)?;
        s.ideal_nonlinear(&z2, Nonlinear::Compare { delta: w.delta })
    })
}

/// Ground-truth activity of FFN neurons: 1 where the pre-activation is
/// strictly positive, i.e. where ReLU outputs a nonzero value.
pub fn oracle_ffn(codec: &FixedPointCodec, pre_activation: &RingMatrix) -> PredictionResult {
    PredictionResult {
        bits: pre_activation.data().iter().map(|&v| (codec.signed(v) > 0) as u8).collect(),
        tokens: pre_activation.rows(),
        granularity: Granularity::Neuron,
    }
}

/// Ground-truth activity of attention heads: 1 where the L2 norm of the
/// head's output slice (columns `g·d .. (g+1)·d`) exceeds `delta`.
pub fn oracle_heads(codec: &FixedPointCodec, head_outputs: &RingMatrix, heads: usize, delta: f64) -> PredictionResult {
    let d = head_outputs.cols() / heads.max(1);
    let mut bits = Vec::with_capacity(head_outputs.rows() * heads);
    for t in 0..head_outputs.rows() {
        let row = head_outputs.row(t);
        for g in 0..heads {
            let norm = row[g * d..(g + 1) * d].iter().map(|&v| codec.decode(v).powi(2)).sum::<f64>().sqrt();
            bits.push((norm > delta) as u8);
        }
    }
    PredictionResult { bits, tokens: head_outputs.rows(), granularity: Granularity::Head }
}

/// Precision and recall of `pred` against `truth`. A vacuous ratio (nothing
/// predicted, or nothing to find) counts as 1.
pub fn precision_recall(pred: &PredictionResult, truth: &PredictionResult) -> Result<(f64, f64)> {
    if pred.bits.len() != truth.bits.len() {
        return Err(Error::shape(format!("{} predicted bits vs {} true bits", pred.bits.len(), truth.bits.len())));
    }
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.bits.iter().zip(&truth.bits) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok((ratio(tp, tp + fp), ratio(tp, tp + fneg)))
}

/// Pick the share belonging to `party`.
pub fn mine(party: PartyId, pair: &[SharedPredictor; 2]) -> &SharedPredictor {
    &pair[party.index()]
}
