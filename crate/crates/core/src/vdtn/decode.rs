use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::features::{concat_rows, embed_inputs_cached, VideoFeatureMode, VisualInputs};
use crate::nn::{sinusoidal_pe, transformer_forward, LayerNorm, ModelConfig, ModelParams};
use crate::state::{END_STATE_ID, STATE_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStrategy {
    Greedy,
    Beam,
}

impl std::str::FromStr for DecodeStrategy {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeStrategy::Greedy),
            "beam" => Ok(DecodeStrategy::Beam),
            other => Err(crate::Error::config(format!(
                "unknown decode strategy {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub beam_size: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::Beam,
            beam_size: 5,
            max_len: 60,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            beam_size: 1,
            max_len,
        }
    }
}

/// Per-layer key/value rows for the already-processed prefix plus any
/// decoded suffix rows owned by one hypothesis.
struct EncoderCache {
    /// (keys, values) per layer over the encoder prefix, full width.
    layers: Vec<(Array2<f64>, Array2<f64>)>,
    enc_len: usize,
    /// Context token count; state positions continue the context stream.
    ctx_len: usize,
}

#[derive(Clone, Default)]
struct SuffixKv {
    /// Per layer: decoded rows' (key, value) pairs.
    layers: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

fn layer_norm_row(ln: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + crate::nn::layers::LN_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * ln.gain[i] + ln.bias[i])
        .collect()
}

/// Advances one decoded token through the stack, appending its keys and
/// values to the hypothesis cache, and returns the top-layer output row.
fn advance_row(
    x0: Vec<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
    enc: &EncoderCache,
    suffix: &mut SuffixKv,
) -> Vec<f64> {
    let d = cfg.d;
    let n_heads = cfg.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = x0;
    for (li, block) in params.blocks.iter().enumerate() {
        let q = block.wq.forward_row(&x);
        let k = block.wk.forward_row(&x);
        let v = block.wv.forward_row(&x);
        suffix.layers[li].push((k, v));

        let (enc_k, enc_v) = &enc.layers[li];
        let own = &suffix.layers[li];
        let total = enc.enc_len + own.len();
        let mut ctx = vec![0.0; d];
        let mut scores = vec![0.0; total];
        for h in 0..n_heads {
            let lo = h * dh;
            let hi = lo + dh;
            let qh = &q[lo..hi];
            let mut max = f64::NEG_INFINITY;
            for (j, score) in scores.iter_mut().enumerate() {
                let key = if j < enc.enc_len {
                    &enc_k.row(j).to_slice().expect("contiguous row")[lo..hi]
                } else {
                    &own[j - enc.enc_len].0[lo..hi]
                };
                let mut dot = 0.0;
                for (a, b) in qh.iter().zip(key) {
                    dot += a * b;
                }
                *score = dot * scale;
                max = max.max(*score);
            }
            let mut sum = 0.0;
            for score in scores.iter_mut() {
                *score = (*score - max).exp();
                sum += *score;
            }
            for (j, score) in scores.iter().enumerate() {
                let p = score / sum;
                let value = if j < enc.enc_len {
                    &enc_v.row(j).to_slice().expect("contiguous row")[lo..hi]
                } else {
                    &own[j - enc.enc_len].1[lo..hi]
                };
                for (c, vv) in ctx[lo..hi].iter_mut().zip(value) {
                    *c += p * vv;
                }
            }
        }
        let attn_out = block.wo.forward_row(&ctx);
        let res1: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
        let x1 = layer_norm_row(&block.ln1, &res1);
        let hidden: Vec<f64> = block
            .ff1
            .forward_row(&x1)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let ff_out = block.ff2.forward_row(&hidden);
        let res2: Vec<f64> = x1.iter().zip(&ff_out).map(|(a, b)| a + b).collect();
        x = layer_norm_row(&block.ln2, &res2);
    }
    x
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

fn token_row(token: u32, position: usize, params: &ModelParams, d: usize) -> Vec<f64> {
    let pe = sinusoidal_pe(&[position], d);
    params
        .embedding
        .row(token as usize)
        .iter()
        .zip(pe.row(0))
        .map(|(e, p)| e + p)
        .collect()
}

/// Builds the encoder prefix cache with one full forward pass.
fn encode_prefix(
    visual: &VisualInputs,
    x_ctx: &[u32],
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: VideoFeatureMode,
) -> Result<EncoderCache> {
    let (z_v, z_ctx, _) = embed_inputs_cached(visual, x_ctx, params, mode)?;
    let z = concat_rows(&[&z_v, &z_ctx]);
    let enc_len = z.nrows();
    let trace = transformer_forward(&z, enc_len, params, cfg.n_heads, None)?;
    let layers = (0..params.blocks.len())
        .map(|i| trace.layer_kv(i))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(EncoderCache {
        layers,
        enc_len,
        ctx_len: x_ctx.len(),
    })
}

struct Hypothesis {
    tokens: Vec<u32>,
    score: f64,
    suffix: SuffixKv,
}

fn fresh_suffix(n_layers: usize) -> SuffixKv {
    SuffixKv {
        layers: vec![Vec::new(); n_layers],
    }
}

/// Step the `STATE`-prefixed hypothesis by one token; returns logprobs for
/// the next position. The STATE token sits at position `ctx_len`, decoded
/// tokens continue from there, matching the training-side positions.
fn step_logprobs(
    hyp_tokens: &[u32],
    suffix: &mut SuffixKv,
    enc: &EncoderCache,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Vec<f64> {
    let k = suffix.layers[0].len();
    let token = if k == 0 { STATE_ID } else { hyp_tokens[k - 1] };
    let row = token_row(token, enc.ctx_len + k, params, cfg.d);
    let out = advance_row(row, params, cfg, enc, suffix);
    let logits = params.state_head.forward_row(&out);
    log_softmax(&logits)
}

/// Decodes a state token sequence. Greedy follows the argmax chain; beam
/// search keeps `beam_size` hypotheses by summed log-probability and seeds
/// its finished pool with the greedy rollout, so the returned hypothesis
/// never scores below greedy. Returns the tokens (without the terminator)
/// and the cumulative log-probability.
pub fn decode_state(
    visual: &VisualInputs,
    x_ctx: &[u32],
    params: &ModelParams,
    cfg: &ModelConfig,
    dcfg: &DecodeConfig,
    mode: VideoFeatureMode,
) -> Result<(Vec<u32>, f64)> {
    let enc = encode_prefix(visual, x_ctx, params, cfg, mode)?;
    let greedy = run_greedy(&enc, params, cfg, dcfg.max_len);
    match dcfg.strategy {
        DecodeStrategy::Greedy => Ok((greedy.0, greedy.1)),
        DecodeStrategy::Beam => Ok(run_beam(&enc, params, cfg, dcfg, greedy)),
    }
}

type Decoded = (Vec<u32>, f64, bool);

fn run_greedy(
    enc: &EncoderCache,
    params: &ModelParams,
    cfg: &ModelConfig,
    max_len: usize,
) -> Decoded {
    let mut suffix = fresh_suffix(params.blocks.len());
    let mut tokens: Vec<u32> = Vec::new();
    let mut score = 0.0;
    for _ in 0..max_len {
        let logprobs = step_logprobs(&tokens, &mut suffix, enc, params, cfg);
        let (best, lp) = argmax(&logprobs);
        score += lp;
        if best == END_STATE_ID {
            return (tokens, score, true);
        }
        tokens.push(best);
    }
    (tokens, score, false)
}

fn argmax(logprobs: &[f64]) -> (u32, f64) {
    let mut best = 0usize;
    for (i, v) in logprobs.iter().enumerate() {
        if *v > logprobs[best] {
            best = i;
        }
    }
    (best as u32, logprobs[best])
}

fn top_k(logprobs: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<u32> = (0..logprobs.len() as u32).collect();
    idx.sort_by(|a, b| {
        logprobs[*b as usize]
            .partial_cmp(&logprobs[*a as usize])
            .unwrap()
            .then(a.cmp(b))
    });
    idx.truncate(k);
    idx.into_iter().map(|i| (i, logprobs[i as usize])).collect()
}

fn run_beam(
    enc: &EncoderCache,
    params: &ModelParams,
    cfg: &ModelConfig,
    dcfg: &DecodeConfig,
    greedy: Decoded,
) -> (Vec<u32>, f64) {
    let beam_size = dcfg.beam_size.max(1);
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    let mut incomplete: Vec<(Vec<u32>, f64)> = Vec::new();
    if greedy.2 {
        finished.push((greedy.0, greedy.1));
    } else {
        incomplete.push((greedy.0, greedy.1));
    }

    let mut live: Vec<Hypothesis> = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        suffix: fresh_suffix(params.blocks.len()),
    }];

    for _ in 0..dcfg.max_len {
        if live.is_empty() {
            break;
        }
        // (hyp index, token, new score)
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        for (hi, hyp) in live.iter_mut().enumerate() {
            let logprobs = step_logprobs(&hyp.tokens, &mut hyp.suffix, enc, params, cfg);
            for (tok, lp) in top_k(&logprobs, beam_size) {
                candidates.push((hi, tok, hyp.score + lp));
            }
        }
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.0.cmp(&b.0))
        });
        candidates.truncate(beam_size);

        let mut next: Vec<Hypothesis> = Vec::new();
        for (hi, tok, score) in candidates {
            if tok == END_STATE_ID {
                finished.push((live[hi].tokens.clone(), score));
                continue;
            }
            let mut tokens = live[hi].tokens.clone();
            tokens.push(tok);
            next.push(Hypothesis {
                tokens,
                score,
                suffix: live[hi].suffix.clone(),
            });
        }
        live = next;
    }
    for hyp in live {
        incomplete.push((hyp.tokens, hyp.score));
    }

    let best_of = |pool: Vec<(Vec<u32>, f64)>| -> Option<(Vec<u32>, f64)> {
        pool.into_iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
    };
    best_of(finished)
        .or_else(|| best_of(incomplete))
        .unwrap_or((Vec::new(), 0.0))
}
