use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{relu, relu_backward, LayerNormCache};
use super::{BlockParams, ModelParams};
use crate::error::{Error, Result};

/// Seeded dropout for the two residual branches. `None` means evaluation.
pub struct DropoutCtx {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl DropoutCtx {
    fn mask(&mut self, shape: (usize, usize)) -> Option<Array2<f64>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.rate;
        Some(Array2::from_shape_fn(shape, |_| {
            if self.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        }))
    }
}

fn apply_mask(x: &Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x.clone(),
    }
}

pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Post-softmax attention weights, one L x L matrix per head.
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

pub struct BlockCache {
    attn: AttentionCache,
    drop1: Option<Array2<f64>>,
    ln1: LayerNormCache,
    x1: Array2<f64>,
    ff_hidden_pre: Array2<f64>,
    drop2: Option<Array2<f64>>,
    ln2: LayerNormCache,
}

/// Everything retained by a training forward pass; `output` rows at video
/// positions are the representations consumed by the denoising heads.
pub struct ForwardTrace {
    pub output: Array2<f64>,
    pub(crate) blocks: Vec<BlockCache>,
}

impl ForwardTrace {
    /// Key/value matrices of one layer, used to seed incremental decoding.
    pub(crate) fn layer_kv(&self, layer: usize) -> (&Array2<f64>, &Array2<f64>) {
        let cache = &self.blocks[layer].attn;
        (&cache.k, &cache.v)
    }
}

/// Prefix-causal attention: keys below `enc_len` are visible to everyone;
/// later positions are visible only at or before the query position.
#[inline]
fn allowed(query: usize, key: usize, enc_len: usize) -> bool {
    key < enc_len || key <= query
}

impl BlockParams {
    fn attention_forward(
        &self,
        x: &Array2<f64>,
        enc_len: usize,
        n_heads: usize,
    ) -> (Array2<f64>, AttentionCache) {
        let (l, d) = x.dim();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);

        let mut ctx = Array2::zeros((l, d));
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            for qi in 0..l {
                let mut row = scores.row_mut(qi);
                for ki in 0..l {
                    if !allowed(qi, ki, enc_len) {
                        row[ki] = f64::NEG_INFINITY;
                    }
                }
                softmax_row_inplace(&mut row);
            }
            ctx.slice_mut(cols).assign(&scores.dot(&vh));
            probs.push(scores);
        }
        let out = self.wo.forward(&ctx);
        (
            out,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    fn attention_backward(
        &self,
        cache: &AttentionCache,
        dout: &Array2<f64>,
        n_heads: usize,
        grad: &mut BlockParams,
    ) -> Array2<f64> {
        let (l, d) = cache.x.dim();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let dctx = self.wo.backward(&cache.ctx, dout, &mut grad.wo);
        let mut dq = Array2::zeros((l, d));
        let mut dk = Array2::zeros((l, d));
        let mut dv = Array2::zeros((l, d));
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let vh = cache.v.slice(cols);
            let probs = &cache.probs[h];
            let dctx_h = dctx.slice(cols);

            let dprobs = dctx_h.dot(&vh.t());
            dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));

            // Softmax backward per row; masked entries carry zero probability.
            let mut dscores = dprobs;
            for (mut drow, prow) in dscores.rows_mut().into_iter().zip(probs.rows()) {
                let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                for (dv_, p) in drow.iter_mut().zip(prow.iter()) {
                    *dv_ = p * (*dv_ - dot);
                }
            }
            dscores *= scale;
            dq.slice_mut(cols).assign(&dscores.dot(&kh));
            dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
        }
        let mut dx = self.wq.backward(&cache.x, &dq, &mut grad.wq);
        dx += &self.wk.backward(&cache.x, &dk, &mut grad.wk);
        dx += &self.wv.backward(&cache.x, &dv, &mut grad.wv);
        dx
    }

    fn forward(
        &self,
        x: &Array2<f64>,
        enc_len: usize,
        n_heads: usize,
        dropout: &mut Option<DropoutCtx>,
    ) -> (Array2<f64>, BlockCache) {
        let (attn_out, attn_cache) = self.attention_forward(x, enc_len, n_heads);
        let drop1 = dropout.as_mut().and_then(|ctx| ctx.mask(attn_out.dim()));
        let res1 = x + &apply_mask(&attn_out, &drop1);
        let (x1, ln1_cache) = self.ln1.forward(&res1);

        let ff_hidden_pre = self.ff1.forward(&x1);
        let ff_out = self.ff2.forward(&relu(&ff_hidden_pre));
        let drop2 = dropout.as_mut().and_then(|ctx| ctx.mask(ff_out.dim()));
        let res2 = &x1 + &apply_mask(&ff_out, &drop2);
        let (out, ln2_cache) = self.ln2.forward(&res2);

        (
            out,
            BlockCache {
                attn: attn_cache,
                drop1,
                ln1: ln1_cache,
                x1,
                ff_hidden_pre,
                drop2,
                ln2: ln2_cache,
            },
        )
    }

    fn backward(
        &self,
        cache: &BlockCache,
        dout: &Array2<f64>,
        n_heads: usize,
        grad: &mut BlockParams,
    ) -> Array2<f64> {
        let dres2 = self.ln2.backward(&cache.ln2, dout, &mut grad.ln2);
        let dff_out = apply_mask(&dres2, &cache.drop2);
        let hidden = relu(&cache.ff_hidden_pre);
        let dhidden = self.ff2.backward(&hidden, &dff_out, &mut grad.ff2);
        let dpre = relu_backward(&cache.ff_hidden_pre, &dhidden);
        let mut dx1 = self.ff1.backward(&cache.x1, &dpre, &mut grad.ff1);
        dx1 += &dres2;

        let dres1 = self.ln1.backward(&cache.ln1, &dx1, &mut grad.ln1);
        let dattn = apply_mask(&dres1, &cache.drop1);
        let mut dx = self.attention_backward(&cache.attn, &dattn, n_heads, grad);
        dx += &dres1;
        dx
    }
}

fn softmax_row_inplace(row: &mut ndarray::ArrayViewMut1<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Runs the post-norm block stack over `z`. With zero layers the output is
/// the input unchanged. Non-finite activations abort with the layer index.
pub fn transformer_forward(
    z: &Array2<f64>,
    enc_len: usize,
    params: &ModelParams,
    n_heads: usize,
    mut dropout: Option<DropoutCtx>,
) -> Result<ForwardTrace> {
    let mut x = z.clone();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (i, block) in params.blocks.iter().enumerate() {
        let (out, cache) = block.forward(&x, enc_len, n_heads, &mut dropout);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(
                format!("transformer block {i}"),
                "non-finite activations",
            ));
        }
        blocks.push(cache);
        x = out;
    }
    Ok(ForwardTrace { output: x, blocks })
}

/// Backpropagates `dout` through the stack, accumulating parameter
/// gradients, and returns the gradient at the stack input.
pub fn transformer_backward(
    trace: &ForwardTrace,
    dout: &Array2<f64>,
    params: &ModelParams,
    n_heads: usize,
    grad: &mut ModelParams,
) -> Array2<f64> {
    let mut dx = dout.clone();
    for (i, cache) in trace.blocks.iter().enumerate().rev() {
        dx = params.blocks[i].backward(cache, &dx, n_heads, &mut grad.blocks[i]);
    }
    dx
}
