//! Toy transformer: configuration, random weights with a ReLU-sparse FFN and
//! matching low-rank predictors, and a plaintext fixed-point reference that
//! replays the secure pipeline operation for operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ideal::eval;
use crate::predictor::{
    oracle_ffn, oracle_heads, precision_recall, predict_plain, EncodedPredictor, Granularity, PredictorWeights,
};
use crate::ring::{FixedPointCodec, RingMatrix, RingValue};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn: usize,
    pub layers: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub ffn_predictor_rank: usize,
    pub mha_predictor_rank: usize,
    /// Constant added to the FC1 bias; negative values make most neurons
    /// inactive, like a trained ReLU model.
    pub ffn_bias_shift: f64,
    /// Relative size of the full-rank part of FC1 the predictor cannot see.
    pub predictor_noise: f64,
    /// Bias of the head predictor's output; shifts how many heads it keeps.
    pub head_predictor_bias: f64,
    pub layernorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            hidden: 256,
            heads: 8,
            head_dim: 32,
            ffn: 1024,
            layers: 2,
            vocab: 128,
            max_positions: 256,
            ffn_predictor_rank: 32,
            mha_predictor_rank: 4,
            ffn_bias_shift: -1.28,
            predictor_noise: 0.3,
            head_predictor_bias: 0.0,
            layernorm_eps: 1e-5,
        }
    }

    /// Smaller dims for quick tests.
    pub fn tiny() -> Self {
        ModelConfig {
            hidden: 32,
            heads: 4,
            head_dim: 8,
            ffn: 64,
            layers: 2,
            vocab: 16,
            max_positions: 64,
            ffn_predictor_rank: 8,
            mha_predictor_rank: 2,
            ..ModelConfig::toy()
        }
    }

    pub fn qkv_width(&self) -> usize {
        3 * self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn", self.ffn),
            ("layers", self.layers),
            ("vocab", self.vocab),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.heads * self.head_dim != self.hidden {
            return Err(Error::Config(format!(
                "model: heads × head_dim = {} but hidden = {}",
                self.heads * self.head_dim,
                self.hidden
            )));
        }
        if self.ffn_predictor_rank == 0 || self.ffn_predictor_rank >= self.hidden.min(self.ffn) {
            return Err(Error::Config("model.ffn_predictor_rank must be in 1..min(hidden, ffn)".into()));
        }
        if self.mha_predictor_rank == 0 || self.mha_predictor_rank >= self.hidden.min(self.heads) {
            return Err(Error::Config("model.mha_predictor_rank must be in 1..min(hidden, heads)".into()));
        }
        Ok(())
    }
}

/// Real-valued weights of one layer. Matrices are row-major and laid out
/// for `x · W` with activations as rows. QKV columns are head-major
/// `[Q_g | K_g | V_g]` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1: (Vec<f64>, Vec<f64>),
    pub w_qkv: Vec<f64>,
    pub b_qkv: Vec<f64>,
    pub w_o: Vec<f64>,
    pub b_o: Vec<f64>,
    pub ln2: (Vec<f64>, Vec<f64>),
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub ffn_predictor: PredictorWeights,
    pub mha_predictor: PredictorWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embed: Vec<f64>,
    pub positions: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub ln_final: (Vec<f64>, Vec<f64>),
    pub w_lm: Vec<f64>,
}

fn normal_vec(rng: &mut ChaCha20Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn matmul_f64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let x = a[i * k + l];
            for j in 0..n {
                out[i * n + j] += x * b[l * n + j];
            }
        }
    }
    out
}

fn transpose_f64(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl ModelWeights {
    /// Random model. FC1 is low rank plus noise, and the FFN predictor is
    /// built from its low-rank factors, so prediction quality is controlled
    /// by `predictor_noise`.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let c = config;
        let (h, qkv, f) = (c.hidden, c.qkv_width(), c.ffn);
        let ones = vec![1.0; h];
        let zeros = vec![0.0; h];
        let embed = normal_vec(&mut rng, c.vocab * h, 1.0);
        let positions = normal_vec(&mut rng, c.max_positions * h, 0.1);
        let mut layers = Vec::with_capacity(c.layers);
        for _ in 0..c.layers {
            let r = c.ffn_predictor_rank;
            let a = normal_vec(&mut rng, h * r, (1.0 / h as f64).sqrt());
            let b = normal_vec(&mut rng, r * f, (1.0 / r as f64).sqrt());
            let noise = normal_vec(&mut rng, h * f, c.predictor_noise / (h as f64).sqrt());
            let w1: Vec<f64> = matmul_f64(&a, &b, h, r, f).iter().zip(&noise).map(|(x, n)| x + n).collect();
            let b1: Vec<f64> = normal_vec(&mut rng, f, 0.05).iter().map(|v| v + c.ffn_bias_shift).collect();
            let ffn_predictor =
                PredictorWeights::new((h, r, f), transpose_f64(&a, h, r), vec![0.0; r], transpose_f64(&b, r, f), b1.clone(), 0.0)?;

            let rm = c.mha_predictor_rank;
            let mut mha_predictor = PredictorWeights::new(
                (h, rm, c.heads),
                normal_vec(&mut rng, rm * h, (1.0 / h as f64).sqrt()),
                vec![0.0; rm],
                normal_vec(&mut rng, c.heads * rm, (1.0 / rm as f64).sqrt()),
                vec![c.head_predictor_bias; c.heads],
                0.0,
            )?;
            mha_predictor.delta = 0.0;

            layers.push(LayerWeights {
                ln1: (ones.clone(), zeros.clone()),
                w_qkv: normal_vec(&mut rng, h * qkv, (1.0 / h as f64).sqrt()),
                b_qkv: normal_vec(&mut rng, qkv, 0.02),
                w_o: normal_vec(&mut rng, h * h, (0.5 / h as f64).sqrt()),
                b_o: normal_vec(&mut rng, h, 0.02),
                ln2: (ones.clone(), zeros.clone()),
                w1,
                b1,
                w2: normal_vec(&mut rng, f * h, (2.0 / f as f64).sqrt()),
                b2: normal_vec(&mut rng, h, 0.02),
                ffn_predictor,
                mha_predictor,
            });
        }
        Ok(ModelWeights {
            config: config.clone(),
            embed,
            positions,
            layers,
            ln_final: (ones, zeros),
            w_lm: normal_vec(&mut rng, h * c.vocab, (1.0 / h as f64).sqrt()),
        })
    }

    /// Fixed-point form. The attention scale `1/√d` is folded into the Q
    /// columns and bias.
    pub fn encode(&self, codec: &FixedPointCodec) -> Result<EncodedModel> {
        let c = &self.config;
        let (h, qkv, f, d) = (c.hidden, c.qkv_width(), c.ffn, c.head_dim);
        let scale = 1.0 / (d as f64).sqrt();
        let is_q = |col: usize| col % (3 * d) < d;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w_qkv: Vec<f64> =
                    l.w_qkv.iter().enumerate().map(|(k, &v)| if is_q(k % qkv) { v * scale } else { v }).collect();
                let b_qkv: Vec<f64> =
                    l.b_qkv.iter().enumerate().map(|(k, &v)| if is_q(k) { v * scale } else { v }).collect();
                Ok(EncodedLayer {
                    ln1: l.ln1.clone(),
                    w_qkv: RingMatrix::encode(codec, h, qkv, &w_qkv)?,
                    b_qkv: codec.encode_slice(&b_qkv)?,
                    w_o: RingMatrix::encode(codec, h, h, &l.w_o)?,
                    b_o: codec.encode_slice(&l.b_o)?,
                    ln2: l.ln2.clone(),
                    w1: RingMatrix::encode(codec, h, f, &l.w1)?,
                    b1: codec.encode_slice(&l.b1)?,
                    w2: RingMatrix::encode(codec, f, h, &l.w2)?,
                    b2: codec.encode_slice(&l.b2)?,
                    ffn_predictor: l.ffn_predictor.encode(codec)?,
                    mha_predictor: l.mha_predictor.encode(codec)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedModel {
            config: c.clone(),
            codec: *codec,
            embed: RingMatrix::encode(codec, c.vocab, h, &self.embed)?,
            positions: RingMatrix::encode(codec, c.max_positions, h, &self.positions)?,
            layers,
            ln_final: self.ln_final.clone(),
            w_lm: RingMatrix::encode(codec, h, c.vocab, &self.w_lm)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedLayer {
    pub ln1: (Vec<f64>, Vec<f64>),
    pub w_qkv: RingMatrix,
    pub b_qkv: Vec<RingValue>,
    pub w_o: RingMatrix,
    pub b_o: Vec<RingValue>,
    pub ln2: (Vec<f64>, Vec<f64>),
    pub w1: RingMatrix,
    pub b1: Vec<RingValue>,
    pub w2: RingMatrix,
    pub b2: Vec<RingValue>,
    pub ffn_predictor: EncodedPredictor,
    pub mha_predictor: EncodedPredictor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedModel {
    pub config: ModelConfig,
    pub codec: FixedPointCodec,
    pub embed: RingMatrix,
    pub positions: RingMatrix,
    pub layers: Vec<EncodedLayer>,
    pub ln_final: (Vec<f64>, Vec<f64>),
    pub w_lm: RingMatrix,
}

/// `trunc(x · W) + b`, the fixed-point linear layer every secure product
/// reduces to.
pub fn linear(codec: &FixedPointCodec, x: &RingMatrix, w: &RingMatrix, b: Option<&[RingValue]>) -> Result<RingMatrix> {
    let z = x.matmul(w)?.map(|v| codec.truncate(v));
    Ok(match b {
        Some(b) => RingMatrix::from_fn(z.rows(), z.cols(), |i, j| z.get(i, j) + b[j]),
        None => z,
    })
}

pub fn layernorm(codec: &FixedPointCodec, x: &RingMatrix, params: &(Vec<f64>, Vec<f64>), eps: f64) -> Result<RingMatrix> {
    RingMatrix::new(x.rows(), x.cols(), eval::layernorm(codec, x.data(), &params.0, &params.1, eps)?)
}

impl EncodedModel {
    /// Embedding rows for tokens at positions `start..`.
    pub fn embed_rows(&self, ids: &[usize], start: usize) -> Result<RingMatrix> {
        let h = self.config.hidden;
        let mut data = Vec::with_capacity(ids.len() * h);
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.config.vocab || start + i >= self.config.max_positions {
                return Err(Error::contract(format!("token {id} at position {} out of range", start + i)));
            }
            data.extend(self.embed.row(id).iter().zip(self.positions.row(start + i)).map(|(&a, &b)| a + b));
        }
        RingMatrix::new(ids.len(), h, data)
    }

    /// FC1 pre-activations for layer-normed rows `a`.
    pub fn ffn_preactivation(&self, layer: usize, a: &RingMatrix) -> Result<RingMatrix> {
        let l = &self.layers[layer];
        linear(&self.codec, a, &l.w1, Some(&l.b1))
    }

    /// Per-head attention outputs (`rows × heads·d`, original head order) for
    /// the last `batch` of the layer-normed rows `a_all`, attending causally.
    pub fn attention_heads(&self, layer: usize, a_all: &RingMatrix, batch: usize) -> Result<RingMatrix> {
        let codec = &self.codec;
        let c = &self.config;
        let (d, total) = (c.head_dim, a_all.rows());
        let t0 = total - batch;
        let qkv = linear(codec, a_all, &self.layers[layer].w_qkv, Some(&self.layers[layer].b_qkv))?;
        let mut out = RingMatrix::zeros(batch, c.heads * d);
        for g in 0..c.heads {
            let block = |off: usize, rows: std::ops::Range<usize>| {
                RingMatrix::from_fn(rows.len(), d, |i, j| qkv.get(rows.start + i, g * 3 * d + off + j))
            };
            let q = block(0, t0..total);
            let k = block(d, 0..total);
            let v = block(2 * d, 0..total);
            let scores = q.matmul(&k.transpose())?.map(|x| codec.truncate(x));
            let valid: Vec<usize> = (t0..total).map(|t| t + 1).collect();
            let p = RingMatrix::new(batch, total, eval::softmax(codec, scores.data(), total, Some(&valid))?)?;
            let o = p.matmul(&v)?.map(|x| codec.truncate(x));
            for i in 0..batch {
                for j in 0..d {
                    out.set(i, g * d + j, o.get(i, j));
                }
            }
        }
        Ok(out)
    }
}

/// What a plaintext run saw: per-step logits, generated tokens, and the
/// layer-normed attention and FFN inputs of every token, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTrace {
    pub logits: Vec<RingMatrix>,
    pub tokens: Vec<usize>,
    pub attn_inputs: Vec<RingMatrix>,
    pub ffn_inputs: Vec<RingMatrix>,
}

/// Plaintext greedy decoding with dense layers, in the same fixed-point
/// arithmetic as the secure engine.
pub fn reference_trace(model: &EncodedModel, prompt: &[usize], gen: usize) -> Result<ReferenceTrace> {
    let codec = &model.codec;
    let c = &model.config;
    let eps = c.layernorm_eps;
    let empty = RingMatrix::zeros(0, c.hidden);
    let mut tr = ReferenceTrace {
        logits: Vec::new(),
        tokens: Vec::new(),
        attn_inputs: vec![empty.clone(); c.layers],
        ffn_inputs: vec![empty; c.layers],
    };
    let mut ids = prompt.to_vec();
    let mut start = 0;
    for _ in 0..=gen {
        let mut x = model.embed_rows(&ids, start)?;
        for (li, l) in model.layers.iter().enumerate() {
            let a = layernorm(codec, &x, &l.ln1, eps)?;
            tr.attn_inputs[li] = RingMatrix::vstack(&[&tr.attn_inputs[li], &a])?;
            let heads = model.attention_heads(li, &tr.attn_inputs[li], a.rows())?;
            x = x.add(&linear(codec, &heads, &l.w_o, Some(&l.b_o))?)?;
            let a2 = layernorm(codec, &x, &l.ln2, eps)?;
            tr.ffn_inputs[li] = RingMatrix::vstack(&[&tr.ffn_inputs[li], &a2])?;
            let u = linear(codec, &a2, &l.w1, Some(&l.b1))?;
            let r = RingMatrix::new(u.rows(), u.cols(), eval::relu(codec, u.data()))?;
            x = x.add(&linear(codec, &r, &l.w2, Some(&l.b2))?)?;
        }
        let last = x.select_rows(&[x.rows() - 1]);
        let lf = layernorm(codec, &last, &model.ln_final, eps)?;
        let logits = linear(codec, &lf, &model.w_lm, None)?;
        let next = eval::argmax(codec, logits.data(), c.vocab)[0].0 as usize;
        tr.logits.push(logits);
        tr.tokens.push(next);
        start += ids.len();
        ids = vec![next];
    }
    Ok(tr)
}

/// Logits and tokens of [`reference_trace`].
pub fn reference_decode(model: &EncodedModel, prompt: &[usize], gen: usize) -> Result<(Vec<RingMatrix>, Vec<usize>)> {
    let tr = reference_trace(model, prompt, gen)?;
    Ok((tr.logits, tr.tokens))
}

/// Precision and recall of both predictors against the exact masks along a
/// plaintext run: `(ffn, heads)`, each averaged over layers.
pub fn predictor_quality(model: &EncodedModel, trace: &ReferenceTrace, oracle_delta: f64) -> Result<((f64, f64), (f64, f64))> {
    let codec = &model.codec;
    let c = &model.config;
    let (mut ffn, mut heads) = ((0.0, 0.0), (0.0, 0.0));
    for (li, l) in model.layers.iter().enumerate() {
        let a2 = &trace.ffn_inputs[li];
        let truth = oracle_ffn(codec, &model.ffn_preactivation(li, a2)?);
        let (p, r) = precision_recall(&predict_plain(&l.ffn_predictor, codec, a2, Granularity::Neuron)?, &truth)?;
        ffn = (ffn.0 + p, ffn.1 + r);
        let a = &trace.attn_inputs[li];
        let truth = oracle_heads(codec, &model.attention_heads(li, a, a.rows())?, c.heads, oracle_delta);
        let (p, r) = precision_recall(&predict_plain(&l.mha_predictor, codec, a, Granularity::Head)?, &truth)?;
        heads = (heads.0 + p, heads.1 + r);
    }
    let n = c.layers as f64;
    Ok(((ffn.0 / n, ffn.1 / n), (heads.0 / n, heads.1 / n)))
}

/// Deterministic prompt of `len` token ids.
pub fn random_prompt(vocab: usize, len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x70_72_6f_6d_70_74);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}
