use std::collections::HashMap;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::train::{prepare_scenes, PreparedScene};
use super::{evaluate, ExperimentConfig, PriorStateSource};
use crate::dialogue::{AnswerVocabulary, Dataset};
use crate::error::{Error, Result};
use crate::features::{concat_rows, embed_inputs_cached, RowKind, VideoFeatureMode, VisualInputs};
use crate::nn::{
    embedding_backward, label_smoothed_nll, transformer_backward, transformer_forward, Adam,
    DropoutCtx, LrSchedule, ModelConfig, ModelParams,
};
use crate::parallel;
use crate::rng;
use crate::state::{build_context, ContextWindowConfig, DialogueState};

/// Which dialogue states filter the visual rows fed to the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSource {
    None,
    PredictedNoTime,
    PredictedFull,
    Oracle,
}

impl FromStr for StateSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(StateSource::None),
            "pred-no-time" | "predicted_no_time" => Ok(StateSource::PredictedNoTime),
            "pred" | "predicted_full" => Ok(StateSource::PredictedFull),
            "oracle" => Ok(StateSource::Oracle),
            other => Err(Error::config(format!("unknown state source {other:?}"))),
        }
    }
}

impl StateSource {
    pub fn needs_tracker(self) -> bool {
        matches!(self, StateSource::PredictedNoTime | StateSource::PredictedFull)
    }
}

/// Response-classifier configuration; capacity stays fixed so accuracy
/// differences reflect the state filtering, not model size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseTaskConfig {
    pub state_source: StateSource,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub seed: u64,
}

impl ResponseTaskConfig {
    pub fn new(state_source: StateSource) -> Self {
        ResponseTaskConfig {
            state_source,
            d: 128,
            n_layers: 2,
            n_heads: 8,
            epochs: 10,
            batch_size: 8,
            peak_lr: 1e-3,
            seed: 23,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseOutcome {
    pub state_source: StateSource,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    /// Turns whose filtered row set was empty and fell back to frame rows.
    pub fallback_turns: usize,
    pub test_turns: usize,
}

struct ResponseExample {
    visual: VisualInputs,
    x_ctx: Vec<u32>,
    answer: usize,
}

/// Keeps the visual rows selected by the state: object rows whose class
/// appears in the triples and (full filtering) whose frame lies inside the
/// window. An empty selection falls back to the frame-separator rows.
fn filter_visual(
    visual: &VisualInputs,
    state: Option<&DialogueState>,
    use_window: bool,
    fallback_count: &mut usize,
) -> VisualInputs {
    let Some(state) = state else {
        return visual.clone();
    };
    let classes = state.classes();
    let window = if use_window { state.window } else { None };
    let mut keep: Vec<usize> = visual
        .rows
        .iter()
        .enumerate()
        .filter(|(_, info)| match info.kind {
            RowKind::Object { class, .. } => {
                let class_ok = classes.binary_search(&class).is_ok();
                let frame_ok = window
                    .map(|(s, e)| s <= info.frame && info.frame <= e)
                    .unwrap_or(true);
                class_ok && frame_ok
            }
            _ => false,
        })
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        *fallback_count += 1;
        keep = visual
            .rows
            .iter()
            .enumerate()
            .filter(|(_, info)| matches!(info.kind, RowKind::Frame))
            .map(|(i, _)| i)
            .collect();
    }
    subset_rows(visual, &keep)
}

fn subset_rows(visual: &VisualInputs, keep: &[usize]) -> VisualInputs {
    let mut x_obj = Vec::with_capacity(keep.len());
    let mut x_bb = Array2::zeros((keep.len(), visual.x_bb.ncols()));
    let mut x_cnn = Array2::zeros((keep.len(), visual.x_cnn.ncols()));
    let mut rows = Vec::with_capacity(keep.len());
    for (dst, src) in keep.iter().enumerate() {
        x_obj.push(visual.x_obj[*src]);
        x_bb.row_mut(dst).assign(&visual.x_bb.row(*src));
        x_cnn.row_mut(dst).assign(&visual.x_cnn.row(*src));
        rows.push(visual.rows[*src]);
    }
    VisualInputs {
        x_obj,
        x_bb,
        x_cnn,
        rows,
        n_obj: visual.n_obj,
        n_segments: visual.n_segments,
    }
}

/// Decoded states for every turn of a split, keyed by (dialogue, turn).
fn predicted_states(
    tracker: &ModelParams,
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    scenes: &HashMap<String, PreparedScene>,
    split: &str,
) -> Result<HashMap<(String, usize), DialogueState>> {
    let (_, records) = evaluate(
        tracker,
        cfg,
        dataset,
        scenes,
        split,
        PriorStateSource::Predicted,
        &cfg.decode_config(),
    )?;
    Ok(records
        .into_iter()
        .map(|r| ((r.dialogue_id, r.turn), r.parsed_state))
        .collect())
}

fn build_examples(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    scenes: &HashMap<String, PreparedScene>,
    rcfg: &ResponseTaskConfig,
    tracker: Option<&ModelParams>,
    split: &str,
    fallback_count: &mut usize,
) -> Result<Vec<ResponseExample>> {
    let predicted = match (rcfg.state_source.needs_tracker(), tracker) {
        (true, Some(tracker)) => Some(predicted_states(tracker, cfg, dataset, scenes, split)?),
        (true, None) => {
            return Err(Error::config(
                "predicted state filtering needs a tracker checkpoint",
            ))
        }
        _ => None,
    };
    let window_cfg = ContextWindowConfig {
        use_prior_state: false,
        max_turns: 1,
    };
    let mut out = Vec::new();
    for dialogue in dataset.split(split)? {
        let scene = &scenes[&dialogue.scene_id];
        let mut completed: Vec<(Vec<String>, String)> = Vec::new();
        for (t, turn) in dialogue.turns.iter().enumerate() {
            let state: Option<DialogueState> = match rcfg.state_source {
                StateSource::None => None,
                StateSource::Oracle => Some(turn.gold_state.clone()),
                StateSource::PredictedFull | StateSource::PredictedNoTime => Some(
                    predicted
                        .as_ref()
                        .unwrap()
                        .get(&(dialogue.dialogue_id.clone(), t + 1))
                        .cloned()
                        .unwrap_or_default(),
                ),
            };
            let use_window = rcfg.state_source == StateSource::PredictedFull
                || rcfg.state_source == StateSource::Oracle;
            let visual = filter_visual(&scene.visual, state.as_ref(), use_window, fallback_count);
            let ctx_tokens = build_context(
                &completed,
                &turn.question,
                &DialogueState::new(),
                t + 1,
                &window_cfg,
                &dataset.universe,
                cfg.include_time,
            )?;
            let answer = AnswerVocabulary::index_of(&turn.answer).ok_or_else(|| {
                Error::generation(format!("answer {:?} outside the vocabulary", turn.answer))
            })?;
            out.push(ResponseExample {
                visual,
                x_ctx: dataset.vocab.encode(&ctx_tokens),
                answer,
            });
            completed.push((turn.question.clone(), turn.answer.clone()));
        }
    }
    Ok(out)
}

fn response_model_config(rcfg: &ResponseTaskConfig, cfg: &ExperimentConfig, vocab: usize) -> ModelConfig {
    ModelConfig {
        d: rcfg.d,
        n_layers: rcfg.n_layers,
        n_heads: rcfg.n_heads,
        d_cnn: cfg.d_cnn,
        vocab_size: vocab,
        max_decode_len: 1,
        label_smoothing: 0.0,
        dropout: 0.1,
    }
}

/// Forward pass: embedded filtered rows and context under full attention,
/// mean-pooled into the answer head. Returns per-answer logits plus the
/// caches needed for the backward pass.
fn response_logits(
    example: &ResponseExample,
    params: &ModelParams,
    model_cfg: &ModelConfig,
    dropout: Option<DropoutCtx>,
) -> Result<(Vec<f64>, crate::nn::ForwardTrace, crate::features::EmbedCache, Array2<f64>)> {
    let (z_v, z_ctx, cache) =
        embed_inputs_cached(&example.visual, &example.x_ctx, params, VideoFeatureMode::BbCnn)?;
    let z = concat_rows(&[&z_v, &z_ctx]);
    let total = z.nrows();
    let trace = transformer_forward(&z, total, params, model_cfg.n_heads, dropout)?;
    let pooled = trace
        .output
        .mean_axis(Axis(0))
        .expect("non-empty sequence")
        .insert_axis(Axis(0));
    let logits = params.state_head.forward(&pooled);
    Ok((logits.row(0).to_vec(), trace, cache, pooled))
}

fn response_step(
    example: &ResponseExample,
    params: &ModelParams,
    model_cfg: &ModelConfig,
    dropout_seed: u64,
    grads: &mut ModelParams,
) -> Result<f64> {
    let dropout = (model_cfg.dropout > 0.0).then(|| DropoutCtx {
        rate: model_cfg.dropout,
        rng: rng::stream(dropout_seed, "resp-dropout", &[]),
    });
    let (logits, trace, cache, pooled) = response_logits(example, params, model_cfg, dropout)?;
    let logits_m = Array2::from_shape_vec((1, logits.len()), logits).expect("row");
    let (loss, dlogits) = label_smoothed_nll(&logits_m, &[example.answer as u32], 0.0, None)?;
    let dpooled = params
        .state_head
        .backward(&pooled, &dlogits, &mut grads.state_head);

    let total = trace.output.nrows();
    let mut doutput = Array2::zeros(trace.output.raw_dim());
    let scale = 1.0 / total as f64;
    for mut row in doutput.rows_mut() {
        row.assign(&dpooled.row(0));
        row.mapv_inplace(|v| v * scale);
    }
    let dz = transformer_backward(&trace, &doutput, params, model_cfg.n_heads, grads);
    let l_v = example.visual.l_obj();
    let dz_v = dz.slice(ndarray::s![..l_v, ..]).to_owned();
    let dz_ctx = dz.slice(ndarray::s![l_v.., ..]).to_owned();
    crate::features::embed_backward_visual(
        &example.visual,
        &cache,
        &dz_v,
        params,
        VideoFeatureMode::BbCnn,
        grads,
    );
    embedding_backward(&mut grads.embedding, &example.x_ctx, &dz_ctx);
    Ok(loss)
}

fn accuracy(examples: &[ResponseExample], params: &ModelParams, model_cfg: &ModelConfig) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits = parallel::map_slice(examples, |ex| -> Result<bool> {
        let (logits, _, _, _) = response_logits(ex, params, model_cfg, None)?;
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        Ok(best == ex.answer)
    });
    let mut correct = 0usize;
    for h in hits {
        if h? {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Expected accuracy of an untrained classifier: the mean probability the
/// fresh model assigns to the gold answer. With near-zero initial logits
/// this sits at chance level, 1/|answers|.
pub fn chance_level(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    rcfg: &ResponseTaskConfig,
) -> Result<f64> {
    let scenes = prepare_scenes(dataset, cfg)?;
    let model_cfg = response_model_config(rcfg, cfg, dataset.vocab.len());
    let params = ModelParams::init(&model_cfg, AnswerVocabulary::len(), rcfg.seed)?;
    let mut fallback = 0usize;
    let examples = build_examples(dataset, cfg, &scenes, rcfg, None, "test", &mut fallback)?;
    let probs = parallel::map_slice(&examples, |ex| -> Result<f64> {
        let (logits, _, _, _) = response_logits(ex, &params, &model_cfg, None)?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok((logits[ex.answer] - lse).exp())
    });
    let mut total = 0.0;
    for p in probs {
        total += p?;
    }
    Ok(total / examples.len() as f64)
}

/// Trains the answer classifier on state-filtered features and reports
/// train/test accuracy.
pub fn response_task(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    rcfg: &ResponseTaskConfig,
    tracker: Option<&ModelParams>,
    mut progress: impl FnMut(usize, f64),
) -> Result<ResponseOutcome> {
    let scenes = prepare_scenes(dataset, cfg)?;
    let mut fallback = 0usize;
    let train_examples =
        build_examples(dataset, cfg, &scenes, rcfg, tracker, "train", &mut fallback)?;
    let test_examples = build_examples(dataset, cfg, &scenes, rcfg, tracker, "test", &mut fallback)?;
    if train_examples.is_empty() {
        return Err(Error::config("no response training examples"));
    }

    let model_cfg = response_model_config(rcfg, cfg, dataset.vocab.len());
    let mut params = ModelParams::init(&model_cfg, AnswerVocabulary::len(), rcfg.seed)?;
    let mut adam = Adam::new(&params);
    let steps_per_epoch = train_examples.len().div_ceil(rcfg.batch_size);
    let schedule = LrSchedule::new(
        rcfg.peak_lr,
        steps_per_epoch,
        steps_per_epoch * rcfg.epochs.max(2),
    );

    let mut order: Vec<usize> = (0..train_examples.len()).collect();
    for epoch in 0..rcfg.epochs {
        let mut shuffle_rng = rng::stream(rcfg.seed, "resp-shuffle", &[epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(rcfg.batch_size) {
            let results = parallel::map_slice(batch, |ix| {
                let mut grads = params.zeros_like();
                let loss = response_step(
                    &train_examples[*ix],
                    &params,
                    &model_cfg,
                    rng::derive_seed(rcfg.seed, "resp-drop", &[epoch as u64, *ix as u64]),
                    &mut grads,
                )?;
                Ok::<_, Error>((loss, grads))
            });
            let mut total = params.zeros_like();
            for r in results {
                let (loss, grads) = r?;
                epoch_loss += loss;
                total.accumulate(&grads);
            }
            total.scale(1.0 / batch.len() as f64);
            adam.step(&mut params, &total, &schedule)?;
        }
        progress(epoch + 1, epoch_loss / train_examples.len() as f64);
    }

    Ok(ResponseOutcome {
        state_source: rcfg.state_source,
        test_accuracy: accuracy(&test_examples, &params, &model_cfg)?,
        train_accuracy: accuracy(&train_examples, &params, &model_cfg)?,
        fallback_turns: fallback,
        test_turns: test_examples.len(),
    })
}
