use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::VisualInputs;
use crate::nn::{embedding_forward, AdamCore, Linear, LrSchedule};
use crate::parallel;
use crate::rng;
use crate::state::{DialogueState, Slot};
use rand::Rng;

/// A recurrent tracker with fixed-vocabulary classification heads: one
/// presence head per object class, one categorical head per (class, slot)
/// with an extra "absent" value, and categorical start/end heads over frame
/// indices. `use_attention` pools the encoder states per output head with
/// learned queries instead of reading the final hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RnnTrackerConfig {
    pub d: usize,
    pub use_video: bool,
    pub use_dialogue: bool,
    pub use_attention: bool,
    pub epochs: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl RnnTrackerConfig {
    pub fn new(use_video: bool, use_dialogue: bool, use_attention: bool) -> Self {
        RnnTrackerConfig {
            d: 128,
            use_video,
            use_dialogue,
            use_attention,
            epochs: 10,
            peak_lr: 1e-3,
            batch_size: 8,
            seed: 17,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_video && !self.use_dialogue {
            return Err(Error::config(
                "the recurrent tracker needs at least one of video or dialogue inputs",
            ));
        }
        Ok(())
    }
}

/// One turn prepared for the tracker.
pub struct RnnExample {
    pub visual: Arc<VisualInputs>,
    pub x_ctx: Vec<u32>,
    pub gold: DialogueState,
}

/// Slot-head layout: values of the slot plus a trailing "absent" class.
fn slot_width(universe_values: usize) -> usize {
    universe_values + 1
}

pub struct RnnParams {
    embedding: Array2<f64>,
    bb_proj: Linear,
    cnn_proj: Linear,
    w_x: Array2<f64>,
    w_h: Array2<f64>,
    b_x: Array1<f64>,
    b_h: Array1<f64>,
    /// One query per output head (attention variant only).
    queries: Array2<f64>,
    presence_w: Array2<f64>,
    presence_b: Array1<f64>,
    /// Per slot: ((num_classes * width) x d) weights, block row per class.
    slot_w: Vec<Array2<f64>>,
    slot_b: Vec<Array1<f64>>,
    start_head: Linear,
    end_head: Linear,
}

struct Dims {
    d: usize,
    num_classes: usize,
    num_frames: usize,
    slot_widths: [usize; 4],
    n_heads: usize,
}

impl Dims {
    fn head_of_presence(&self, class: usize) -> usize {
        class
    }
    fn head_of_slot(&self, slot_ix: usize, class: usize) -> usize {
        self.num_classes * (1 + slot_ix) + class
    }
    fn head_of_start(&self) -> usize {
        self.num_classes * 5
    }
    fn head_of_end(&self) -> usize {
        self.num_classes * 5 + 1
    }
}

pub struct RnnTracker {
    pub config: RnnTrackerConfig,
    params: RnnParams,
    dims: Dims,
    slot_values: Vec<Vec<String>>,
}

impl RnnParams {
    fn init(dims: &Dims, vocab_size: usize, d_cnn: usize, seed: u64) -> RnnParams {
        let d = dims.d;
        let glorot = |name: &str, rows: usize, cols: usize| -> Array2<f64> {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let mut r = rng::stream(seed, "rnn-init", &[rng::derive_seed(0, name, &[])]);
            Array2::from_shape_fn((rows, cols), |_| r.random_range(-limit..limit))
        };
        let linear = |name: &str, rows: usize, cols: usize| Linear {
            w: glorot(name, rows, cols),
            b: Array1::zeros(cols),
        };
        RnnParams {
            embedding: glorot("embedding", vocab_size, d),
            bb_proj: linear("bb_proj", 4, d),
            cnn_proj: linear("cnn_proj", d_cnn, d),
            w_x: glorot("w_x", d, 3 * d),
            w_h: glorot("w_h", d, 3 * d),
            b_x: Array1::zeros(3 * d),
            b_h: Array1::zeros(3 * d),
            queries: glorot("queries", dims.n_heads, d),
            presence_w: glorot("presence_w", dims.num_classes, d),
            presence_b: Array1::zeros(dims.num_classes),
            slot_w: (0..4)
                .map(|s| {
                    glorot(
                        &format!("slot_w{s}"),
                        dims.num_classes * dims.slot_widths[s],
                        d,
                    )
                })
                .collect(),
            slot_b: (0..4)
                .map(|s| Array1::zeros(dims.num_classes * dims.slot_widths[s]))
                .collect(),
            start_head: linear("start_head", d, dims.num_frames + 1),
            end_head: linear("end_head", d, dims.num_frames + 1),
        }
    }

    fn flat_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        macro_rules! push {
            ($name:expr, $arr:expr) => {
                out.push(($name.to_string(), $arr.as_slice_mut().expect("contiguous")));
            };
        }
        push!("embedding", self.embedding);
        push!("bb_proj.w", self.bb_proj.w);
        push!("bb_proj.b", self.bb_proj.b);
        push!("cnn_proj.w", self.cnn_proj.w);
        push!("cnn_proj.b", self.cnn_proj.b);
        push!("w_x", self.w_x);
        push!("w_h", self.w_h);
        push!("b_x", self.b_x);
        push!("b_h", self.b_h);
        push!("queries", self.queries);
        push!("presence_w", self.presence_w);
        push!("presence_b", self.presence_b);
        for (s, w) in self.slot_w.iter_mut().enumerate() {
            out.push((format!("slot_w{s}"), w.as_slice_mut().expect("contiguous")));
        }
        for (s, b) in self.slot_b.iter_mut().enumerate() {
            out.push((format!("slot_b{s}"), b.as_slice_mut().expect("contiguous")));
        }
        push!("start_head.w", self.start_head.w);
        push!("start_head.b", self.start_head.b);
        push!("end_head.w", self.end_head.w);
        push!("end_head.b", self.end_head.b);
        out
    }

    fn flat(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        macro_rules! push {
            ($name:expr, $arr:expr) => {
                out.push(($name.to_string(), $arr.as_slice().expect("contiguous")));
            };
        }
        push!("embedding", self.embedding);
        push!("bb_proj.w", self.bb_proj.w);
        push!("bb_proj.b", self.bb_proj.b);
        push!("cnn_proj.w", self.cnn_proj.w);
        push!("cnn_proj.b", self.cnn_proj.b);
        push!("w_x", self.w_x);
        push!("w_h", self.w_h);
        push!("b_x", self.b_x);
        push!("b_h", self.b_h);
        push!("queries", self.queries);
        push!("presence_w", self.presence_w);
        push!("presence_b", self.presence_b);
        for (s, w) in self.slot_w.iter().enumerate() {
            out.push((format!("slot_w{s}"), w.as_slice().expect("contiguous")));
        }
        for (s, b) in self.slot_b.iter().enumerate() {
            out.push((format!("slot_b{s}"), b.as_slice().expect("contiguous")));
        }
        push!("start_head.w", self.start_head.w);
        push!("start_head.b", self.start_head.b);
        push!("end_head.w", self.end_head.w);
        push!("end_head.b", self.end_head.b);
        out
    }

    fn zeros_like(&self, dims: &Dims, vocab_size: usize, d_cnn: usize) -> RnnParams {
        let mut z = RnnParams::init(dims, vocab_size, d_cnn, 0);
        for (_, t) in z.flat_mut() {
            for v in t {
                *v = 0.0;
            }
        }
        z
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// GRU forward over a sequence of input rows; returns all hidden states.
struct GruTrace {
    xs: Array2<f64>,
    hs: Array2<f64>,
    gates: Vec<(Array1<f64>, Array1<f64>, Array1<f64>, Array1<f64>)>, // r, z, n, hn_lin
}

fn gru_forward(params: &RnnParams, xs: &Array2<f64>) -> GruTrace {
    let (l, d) = xs.dim();
    let mut hs = Array2::zeros((l, d));
    let mut gates = Vec::with_capacity(l);
    let mut h = Array1::<f64>::zeros(d);
    for t in 0..l {
        let x = xs.row(t);
        let xg = x.dot(&params.w_x) + &params.b_x;
        let hg = h.dot(&params.w_h) + &params.b_h;
        let r = Array1::from_shape_fn(d, |i| sigmoid(xg[i] + hg[i]));
        let z = Array1::from_shape_fn(d, |i| sigmoid(xg[d + i] + hg[d + i]));
        let hn_lin = Array1::from_shape_fn(d, |i| hg[2 * d + i]);
        let n = Array1::from_shape_fn(d, |i| (xg[2 * d + i] + r[i] * hn_lin[i]).tanh());
        let h_next = Array1::from_shape_fn(d, |i| (1.0 - z[i]) * n[i] + z[i] * h[i]);
        hs.row_mut(t).assign(&h_next);
        gates.push((r, z, n, hn_lin));
        h = h_next;
    }
    GruTrace {
        xs: xs.clone(),
        hs,
        gates,
    }
}

/// BPTT given d(hidden state) per step; returns d(inputs).
fn gru_backward(
    params: &RnnParams,
    trace: &GruTrace,
    dhs: &Array2<f64>,
    grads: &mut RnnParams,
) -> Array2<f64> {
    let (l, d) = trace.xs.dim();
    let mut dxs = Array2::zeros((l, d));
    let mut dh_next = Array1::<f64>::zeros(d);
    for t in (0..l).rev() {
        let (r, z, n, hn_lin) = &trace.gates[t];
        let h_prev = if t == 0 {
            Array1::zeros(d)
        } else {
            trace.hs.row(t - 1).to_owned()
        };
        let dh = &dh_next + &dhs.row(t);

        let dz = Array1::from_shape_fn(d, |i| dh[i] * (h_prev[i] - n[i]));
        let dn = Array1::from_shape_fn(d, |i| dh[i] * (1.0 - z[i]));
        let mut dh_prev = Array1::from_shape_fn(d, |i| dh[i] * z[i]);

        let dn_pre = Array1::from_shape_fn(d, |i| dn[i] * (1.0 - n[i] * n[i]));
        let dr = Array1::from_shape_fn(d, |i| dn_pre[i] * hn_lin[i]);
        let dhn_lin = Array1::from_shape_fn(d, |i| dn_pre[i] * r[i]);
        let dr_pre = Array1::from_shape_fn(d, |i| dr[i] * r[i] * (1.0 - r[i]));
        let dz_pre = Array1::from_shape_fn(d, |i| dz[i] * z[i] * (1.0 - z[i]));

        // Gate pre-activation gradient layout: [r, z, n].
        let mut dxg = Array1::<f64>::zeros(3 * d);
        let mut dhg = Array1::<f64>::zeros(3 * d);
        for i in 0..d {
            dxg[i] = dr_pre[i];
            dxg[d + i] = dz_pre[i];
            dxg[2 * d + i] = dn_pre[i];
            dhg[i] = dr_pre[i];
            dhg[d + i] = dz_pre[i];
            dhg[2 * d + i] = dhn_lin[i];
        }

        let x = trace.xs.row(t);
        for i in 0..d {
            for g in 0..3 * d {
                grads.w_x[[i, g]] += x[i] * dxg[g];
                grads.w_h[[i, g]] += h_prev[i] * dhg[g];
            }
        }
        grads.b_x += &dxg;
        grads.b_h += &dhg;

        dxs.row_mut(t).assign(&params.w_x.dot(&dxg));
        dh_prev += &params.w_h.dot(&dhg);
        dh_next = dh_prev;
    }
    dxs
}

/// Builds the input row sequence: projected video rows, then embedded
/// dialogue tokens, per the enabled streams.
fn input_sequence(
    params: &RnnParams,
    cfg: &RnnTrackerConfig,
    example: &RnnExample,
) -> (Array2<f64>, InputCache) {
    let d = params.embedding.ncols();
    let mut parts: Vec<Array2<f64>> = Vec::new();
    let mut cache = InputCache {
        bb_pre: None,
        cnn_pre: None,
        video_rows: 0,
    };
    if cfg.use_video {
        let mut z = embedding_forward(&params.embedding, &example.visual.x_obj);
        let bb_pre = params.bb_proj.forward(&example.visual.x_bb);
        z += &bb_pre.mapv(|v| v.max(0.0));
        let cnn_pre = params.cnn_proj.forward(&example.visual.x_cnn);
        z += &cnn_pre.mapv(|v| v.max(0.0));
        cache.bb_pre = Some(bb_pre);
        cache.cnn_pre = Some(cnn_pre);
        cache.video_rows = z.nrows();
        parts.push(z);
    }
    if cfg.use_dialogue {
        parts.push(embedding_forward(&params.embedding, &example.x_ctx));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let xs = ndarray::concatenate(Axis(0), &views).unwrap_or_else(|_| Array2::zeros((0, d)));
    (xs, cache)
}

struct InputCache {
    bb_pre: Option<Array2<f64>>,
    cnn_pre: Option<Array2<f64>>,
    video_rows: usize,
}

struct Readout {
    /// One pooled row per output head.
    pooled: Array2<f64>,
    probs: Option<Array2<f64>>,
}

fn readout_forward(params: &RnnParams, dims: &Dims, hs: &Array2<f64>, use_attention: bool) -> Readout {
    if !use_attention {
        let last = hs.row(hs.nrows() - 1);
        let mut pooled = Array2::zeros((dims.n_heads, dims.d));
        for mut row in pooled.rows_mut() {
            row.assign(&last);
        }
        return Readout {
            pooled,
            probs: None,
        };
    }
    let scale = 1.0 / (dims.d as f64).sqrt();
    let mut scores = params.queries.dot(&hs.t());
    scores *= scale;
    for mut row in scores.rows_mut() {
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
    let pooled = scores.dot(hs);
    Readout {
        pooled,
        probs: Some(scores),
    }
}

fn readout_backward(
    params: &RnnParams,
    dims: &Dims,
    hs: &Array2<f64>,
    readout: &Readout,
    dpooled: &Array2<f64>,
    grads: &mut RnnParams,
) -> Array2<f64> {
    match &readout.probs {
        None => {
            let mut dhs = Array2::zeros(hs.raw_dim());
            let last = hs.nrows() - 1;
            let summed = dpooled.sum_axis(Axis(0));
            let mut row = dhs.row_mut(last);
            row += &summed;
            dhs
        }
        Some(probs) => {
            let scale = 1.0 / (dims.d as f64).sqrt();
            let mut dhs = probs.t().dot(dpooled);
            let dprobs = dpooled.dot(&hs.t());
            let mut dscores = dprobs;
            for (mut drow, prow) in dscores.rows_mut().into_iter().zip(probs.rows()) {
                let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                for (dv, p) in drow.iter_mut().zip(prow.iter()) {
                    *dv = p * (*dv - dot);
                }
            }
            dscores *= scale;
            grads.queries += &dscores.dot(hs);
            dhs += &dscores.t().dot(&params.queries);
            dhs
        }
    }
}

struct TurnTargets {
    presence: Vec<f64>,
    /// (slot index, class, value index) for gold-present classes.
    slots: Vec<(usize, usize, usize)>,
    start: usize,
    end: usize,
}

fn targets_for(gold: &DialogueState, dims: &Dims, slot_values: &[Vec<String>]) -> TurnTargets {
    let mut presence = vec![0.0; dims.num_classes];
    let mut slots = Vec::new();
    for class in gold.classes() {
        presence[class as usize] = 1.0;
        for (s, slot) in Slot::ALL.iter().enumerate() {
            let value_ix = match gold.triples.get(&(class, *slot)) {
                Some(v) => slot_values[s].iter().position(|x| x == v).unwrap_or(0),
                None => dims.slot_widths[s] - 1, // absent class
            };
            slots.push((s, class as usize, value_ix));
        }
    }
    let (start, end) = gold.window.unwrap_or((1, dims.num_frames as u32));
    TurnTargets {
        presence,
        slots,
        start: start as usize,
        end: end as usize,
    }
}

/// Cross-entropy on a logit row; returns (loss, dlogits).
fn ce_row(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

fn forward_backward(
    params: &RnnParams,
    dims: &Dims,
    cfg: &RnnTrackerConfig,
    slot_values: &[Vec<String>],
    example: &RnnExample,
    grads: &mut RnnParams,
) -> f64 {
    let (xs, input_cache) = input_sequence(params, cfg, example);
    if xs.nrows() == 0 {
        return 0.0;
    }
    let trace = gru_forward(params, &xs);
    let readout = readout_forward(params, dims, &trace.hs, cfg.use_attention);
    let targets = targets_for(&example.gold, dims, slot_values);

    let mut dpooled = Array2::zeros(readout.pooled.raw_dim());
    let mut loss = 0.0;

    // Presence: mean binary cross-entropy over classes.
    let c = dims.num_classes as f64;
    for class in 0..dims.num_classes {
        let head = dims.head_of_presence(class);
        let pooled = readout.pooled.row(head);
        let logit: f64 = pooled.dot(&params.presence_w.row(class)) + params.presence_b[class];
        let t = targets.presence[class];
        loss += (logit.max(0.0) - logit * t + (1.0 + (-logit.abs()).exp()).ln()) / c;
        let dlogit = (sigmoid(logit) - t) / c;
        grads.presence_b[class] += dlogit;
        let mut gw = grads.presence_w.row_mut(class);
        gw.scaled_add(dlogit, &pooled);
        let mut dp = dpooled.row_mut(head);
        dp.scaled_add(dlogit, &params.presence_w.row(class));
    }

    // Slot values: mean cross-entropy over gold-present (class, slot) heads.
    if !targets.slots.is_empty() {
        let denom = targets.slots.len() as f64;
        for (s, class, value_ix) in &targets.slots {
            let width = dims.slot_widths[*s];
            let head = dims.head_of_slot(*s, *class);
            let pooled = readout.pooled.row(head);
            let base = class * width;
            let logits: Vec<f64> = (0..width)
                .map(|v| pooled.dot(&params.slot_w[*s].row(base + v)) + params.slot_b[*s][base + v])
                .collect();
            let (l, dlogits) = ce_row(&logits, *value_ix);
            loss += l / denom;
            for (v, dl) in dlogits.iter().enumerate() {
                let dl = dl / denom;
                grads.slot_b[*s][base + v] += dl;
                let mut gw = grads.slot_w[*s].row_mut(base + v);
                gw.scaled_add(dl, &pooled);
                let mut dp = dpooled.row_mut(head);
                dp.scaled_add(dl, &params.slot_w[*s].row(base + v));
            }
        }
    }

    // Temporal heads.
    for (head, linear, grad_linear, target) in [
        (
            dims.head_of_start(),
            &params.start_head,
            &mut grads.start_head,
            targets.start,
        ),
        (
            dims.head_of_end(),
            &params.end_head,
            &mut grads.end_head,
            targets.end,
        ),
    ] {
        let pooled = readout.pooled.row(head).to_owned().insert_axis(Axis(0));
        let logits = linear.forward(&pooled);
        let row: Vec<f64> = logits.row(0).to_vec();
        let (l, dlogits) = ce_row(&row, target);
        loss += l / 2.0;
        let mut dl = Array2::zeros((1, row.len()));
        for (j, v) in dlogits.iter().enumerate() {
            dl[[0, j]] = v / 2.0;
        }
        let dp = linear.backward(&pooled, &dl, grad_linear);
        let mut dpl = dpooled.row_mut(head);
        dpl += &dp.row(0);
    }

    // Back through readout, GRU, and input embeddings.
    let dhs = readout_backward(params, dims, &trace.hs, &readout, &dpooled, grads);
    let dxs = gru_backward(params, &trace, &dhs, grads);

    let v = input_cache.video_rows;
    if cfg.use_video {
        let dz = dxs.slice(ndarray::s![..v, ..]).to_owned();
        crate::nn::embedding_backward(&mut grads.embedding, &example.visual.x_obj, &dz);
        if let Some(pre) = &input_cache.bb_pre {
            let mut dpre = dz.clone();
            dpre.zip_mut_with(pre, |g, p| {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            });
            params
                .bb_proj
                .backward(&example.visual.x_bb, &dpre, &mut grads.bb_proj);
        }
        if let Some(pre) = &input_cache.cnn_pre {
            let mut dpre = dz.clone();
            dpre.zip_mut_with(pre, |g, p| {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            });
            params
                .cnn_proj
                .backward(&example.visual.x_cnn, &dpre, &mut grads.cnn_proj);
        }
    }
    if cfg.use_dialogue {
        let dz = dxs.slice(ndarray::s![v.., ..]).to_owned();
        crate::nn::embedding_backward(&mut grads.embedding, &example.x_ctx, &dz);
    }
    loss
}

impl RnnTracker {
    /// Trains on prepared examples; deterministic in the config seed.
    pub fn train(
        examples: &[RnnExample],
        cfg: RnnTrackerConfig,
        num_classes: usize,
        num_frames: u32,
        vocab_size: usize,
        d_cnn: usize,
        slot_values: Vec<Vec<String>>,
    ) -> Result<RnnTracker> {
        cfg.validate()?;
        if examples.is_empty() {
            return Err(Error::config("no training examples"));
        }
        let slot_widths = [
            slot_width(slot_values[0].len()),
            slot_width(slot_values[1].len()),
            slot_width(slot_values[2].len()),
            slot_width(slot_values[3].len()),
        ];
        let dims = Dims {
            d: cfg.d,
            num_classes,
            num_frames: num_frames as usize,
            slot_widths,
            n_heads: num_classes * 5 + 2,
        };
        let mut params = RnnParams::init(&dims, vocab_size, d_cnn, cfg.seed);
        let mut adam = AdamCore::new();
        let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
        let schedule = LrSchedule::new(
            cfg.peak_lr,
            steps_per_epoch,
            steps_per_epoch * cfg.epochs.max(2),
        );

        let mut order: Vec<usize> = (0..examples.len()).collect();
        for epoch in 0..cfg.epochs {
            let mut r = rng::stream(cfg.seed, "rnn-shuffle", &[epoch as u64]);
            for i in (1..order.len()).rev() {
                let j = r.random_range(0..=i);
                order.swap(i, j);
            }
            for batch in order.chunks(cfg.batch_size) {
                let partials = parallel::map_slice(batch, |ix| {
                    let mut grads = params.zeros_like(&dims, vocab_size, d_cnn);
                    let loss = forward_backward(
                        &params,
                        &dims,
                        &cfg,
                        &slot_values,
                        &examples[*ix],
                        &mut grads,
                    );
                    (loss, grads)
                });
                let mut total = params.zeros_like(&dims, vocab_size, d_cnn);
                for (_, g) in &partials {
                    for ((_, a), (_, b)) in total.flat_mut().into_iter().zip(g.flat()) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += *y / batch.len() as f64;
                        }
                    }
                }
                let mut p_flat = params.flat_mut();
                let t_flat = total.flat();
                adam.step(&mut p_flat, &t_flat, &schedule)?;
            }
        }
        Ok(RnnTracker {
            config: cfg,
            params,
            dims,
            slot_values,
        })
    }

    /// Threshold rule: presence strictly above 0.5 after the sigmoid.
    pub fn predict(&self, example: &RnnExample) -> DialogueState {
        let (xs, _) = input_sequence(&self.params, &self.config, example);
        if xs.nrows() == 0 {
            return DialogueState::new();
        }
        let trace = gru_forward(&self.params, &xs);
        let readout = readout_forward(&self.params, &self.dims, &trace.hs, self.config.use_attention);

        let mut state = DialogueState::new();
        for class in 0..self.dims.num_classes {
            let head = self.dims.head_of_presence(class);
            let pooled = readout.pooled.row(head);
            let logit: f64 =
                pooled.dot(&self.params.presence_w.row(class)) + self.params.presence_b[class];
            if sigmoid(logit) <= 0.5 {
                continue;
            }
            for (s, slot) in Slot::ALL.iter().enumerate() {
                let width = self.dims.slot_widths[s];
                let head = self.dims.head_of_slot(s, class);
                let pooled = readout.pooled.row(head);
                let base = class * width;
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for v in 0..width {
                    let logit = pooled.dot(&self.params.slot_w[s].row(base + v))
                        + self.params.slot_b[s][base + v];
                    if logit > best_v {
                        best_v = logit;
                        best = v;
                    }
                }
                if best < self.slot_values[s].len() {
                    state.insert(class as u32, *slot, self.slot_values[s][best].clone());
                }
            }
        }
        let pooled_start = readout
            .pooled
            .row(self.dims.head_of_start())
            .to_owned()
            .insert_axis(Axis(0));
        let start_logits = self.params.start_head.forward(&pooled_start);
        let pooled_end = readout
            .pooled
            .row(self.dims.head_of_end())
            .to_owned()
            .insert_axis(Axis(0));
        let end_logits = self.params.end_head.forward(&pooled_end);
        let arg = |row: ndarray::ArrayView1<f64>| -> usize {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        };
        let start = arg(start_logits.row(0)) as u32;
        let end = arg(end_logits.row(0)) as u32;
        if 1 <= start && start < end {
            state.window = Some((start, end));
        }
        state
    }

    /// Attention weights per head sum to one; exposed for tests.
    pub fn attention_row_sums(&self, example: &RnnExample) -> Option<Vec<f64>> {
        let (xs, _) = input_sequence(&self.params, &self.config, example);
        let trace = gru_forward(&self.params, &xs);
        let readout = readout_forward(&self.params, &self.dims, &trace.hs, self.config.use_attention);
        readout
            .probs
            .map(|p| p.rows().into_iter().map(|r| r.sum()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::{generate_dialogue, question_lexicon};
    use crate::features::build_visual_inputs;
    use crate::scene::{
        build_universe, generate_scene, perceive, segment_features, PerceptionConfig,
    };
    use crate::state::{build_context, ContextWindowConfig, StateVocabulary};

    fn make_examples(n: usize) -> (Vec<RnnExample>, usize, u32, usize, usize, Vec<Vec<String>>) {
        let u = build_universe(24).unwrap();
        let vocab = StateVocabulary::build(&u, 40, &question_lexicon());
        let mut examples = Vec::new();
        for i in 0..n {
            let scene = generate_scene(&u, 40, 3, 500 + i as u64).unwrap();
            let dialogue = generate_dialogue(&scene, &u, 600 + i as u64).unwrap();
            let perceived = perceive(&scene, &u, &PerceptionConfig::perfect(1), 4, 10);
            let feats = segment_features(&scene, 10, 8, 1).unwrap();
            let visual = Arc::new(build_visual_inputs(&perceived, &feats, &vocab).unwrap());
            let mut completed: Vec<(Vec<String>, String)> = Vec::new();
            for (t, turn) in dialogue.turns.iter().enumerate().take(3) {
                let ctx = build_context(
                    &completed,
                    &turn.question,
                    &DialogueState::new(),
                    t + 1,
                    &ContextWindowConfig {
                        use_prior_state: false,
                        max_turns: 10,
                    },
                    &u,
                    true,
                )
                .unwrap();
                examples.push(RnnExample {
                    visual: Arc::clone(&visual),
                    x_ctx: vocab.encode(&ctx),
                    gold: turn.gold_state.clone(),
                });
                completed.push((turn.question.clone(), turn.answer.clone()));
            }
        }
        let slot_values: Vec<Vec<String>> = Slot::ALL
            .iter()
            .map(|s| u.slot_values(*s).to_vec())
            .collect();
        (examples, 24, 40, vocab.len(), 8, slot_values)
    }

    fn tiny_cfg(use_video: bool, use_dialogue: bool, use_attention: bool) -> RnnTrackerConfig {
        RnnTrackerConfig {
            d: 16,
            use_video,
            use_dialogue,
            use_attention,
            epochs: 2,
            peak_lr: 2e-3,
            batch_size: 4,
            seed: 3,
        }
    }

    #[test]
    fn needs_at_least_one_stream() {
        assert!(tiny_cfg(false, false, false).validate().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (examples, classes, frames, vocab, d_cnn, slot_values) = make_examples(1);
        let cfg = tiny_cfg(true, true, true);
        let dims = Dims {
            d: cfg.d,
            num_classes: classes,
            num_frames: frames as usize,
            slot_widths: [4, 10, 3, 6],
            n_heads: classes * 5 + 2,
        };
        let params = RnnParams::init(&dims, vocab, d_cnn, 7);
        let mut grads = params.zeros_like(&dims, vocab, d_cnn);
        forward_backward(&params, &dims, &cfg, &slot_values, &examples[0], &mut grads);

        let loss_of = |p: &RnnParams| {
            let mut scratch = p.zeros_like(&dims, vocab, d_cnn);
            forward_backward(p, &dims, &cfg, &slot_values, &examples[0], &mut scratch)
        };
        let h = 1e-5;
        for (name, idx) in [
            ("w_x", 33usize),
            ("w_h", 71),
            ("queries", 129),
            ("presence_w", 17),
            ("slot_w1", 45),
            ("start_head.w", 23),
            ("embedding", 50),
        ] {
            let analytic = {
                let flats = grads.flat();
                let (_, g) = flats.iter().find(|(n, _)| n == name).unwrap();
                g[idx]
            };
            let mut up = RnnParams::init(&dims, vocab, d_cnn, 7);
            for (n, t) in up.flat_mut() {
                if n == name {
                    t[idx] += h;
                }
            }
            let mut down = RnnParams::init(&dims, vocab, d_cnn, 7);
            for (n, t) in down.flat_mut() {
                if n == name {
                    t[idx] -= h;
                }
            }
            let fd = (loss_of(&up) - loss_of(&down)) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1.0);
            assert!(rel < 1e-5, "{name}[{idx}]: fd {fd} vs analytic {analytic}");
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let (examples, classes, frames, vocab, d_cnn, slot_values) = make_examples(2);
        let tracker = RnnTracker::train(
            &examples,
            tiny_cfg(true, true, true),
            classes,
            frames,
            vocab,
            d_cnn,
            slot_values,
        )
        .unwrap();
        let sums = tracker.attention_row_sums(&examples[0]).unwrap();
        for s in sums {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn presence_threshold_is_strict() {
        // A zero-parameter tracker has presence logits 0 -> sigmoid 0.5,
        // which must NOT cross the strict threshold.
        let (examples, classes, frames, vocab, d_cnn, slot_values) = make_examples(1);
        let cfg = tiny_cfg(true, true, false);
        let dims = Dims {
            d: cfg.d,
            num_classes: classes,
            num_frames: frames as usize,
            slot_widths: [4, 10, 3, 6],
            n_heads: classes * 5 + 2,
        };
        let mut params = RnnParams::init(&dims, vocab, d_cnn, 7);
        params.presence_w.fill(0.0);
        params.presence_b.fill(0.0);
        let tracker = RnnTracker {
            config: cfg,
            params,
            dims,
            slot_values,
        };
        let state = tracker.predict(&examples[0]);
        assert!(state.triples.is_empty(), "sigmoid(0) = 0.5 must be excluded");
    }

    #[test]
    fn dialogue_variant_beats_video_only_on_slot_f1() {
        let (examples, classes, frames, vocab, d_cnn, slot_values) = make_examples(10);
        let (train, test) = examples.split_at(24);
        let train_cfg = RnnTrackerConfig {
            epochs: 14,
            ..tiny_cfg(true, false, false)
        };
        let video_only = RnnTracker::train(
            &train.iter().map(clone_example).collect::<Vec<_>>(),
            train_cfg,
            classes,
            frames,
            vocab,
            d_cnn,
            slot_values.clone(),
        )
        .unwrap();
        let dialogue_cfg = RnnTrackerConfig {
            epochs: 14,
            ..tiny_cfg(false, true, false)
        };
        let dialogue_only = RnnTracker::train(
            &train.iter().map(clone_example).collect::<Vec<_>>(),
            dialogue_cfg,
            classes,
            frames,
            vocab,
            d_cnn,
            slot_values,
        )
        .unwrap();

        let score = |tracker: &RnnTracker| -> f64 {
            let aligned: Vec<crate::metrics::AlignedTurn> = test
                .iter()
                .enumerate()
                .map(|(i, ex)| crate::metrics::AlignedTurn {
                    dialogue_id: format!("t{i}"),
                    turn: 1 + i % 3,
                    gold: ex.gold.clone(),
                    pred: Some(tracker.predict(ex)),
                })
                .collect();
            let report =
                crate::metrics::compute_report(&aligned, &crate::metrics::MetricConfig::default());
            report.slot_triple.f1 + report.joint_acc
        };
        let v = score(&video_only);
        let d = score(&dialogue_only);
        assert!(
            d >= v,
            "dialogue variant ({d:.3}) should not trail video-only ({v:.3})"
        );
    }

    fn clone_example(e: &RnnExample) -> RnnExample {
        RnnExample {
            visual: Arc::clone(&e.visual),
            x_ctx: e.x_ctx.clone(),
            gold: e.gold.clone(),
        }
    }
}
