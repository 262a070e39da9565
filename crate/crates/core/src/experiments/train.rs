use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::dialogue::Dataset;
use crate::error::{Error, Result};
use crate::features::{build_visual_inputs, VisualInputs};
use crate::nn::{Adam, LrSchedule, ModelParams};
use crate::parallel;
use crate::rng;
use crate::scene::{perceive, segment_features};
use crate::state::{build_context, flatten_state, DialogueState, END_STATE_ID};
use crate::vdtn::{self, training_step, SelfSupervision, TrainingExample};

/// Featurized scene shared by every turn over that scene.
pub struct PreparedScene {
    pub visual: Arc<VisualInputs>,
    /// Ground-truth boxes aligned with the visual object rows (tracking
    /// supervision).
    pub oracle_boxes: Arc<Array2<f64>>,
}

/// One teacher-forced turn: indices into the scene cache plus token ids.
pub struct TurnExample {
    pub scene_id: String,
    pub dialogue_id: String,
    pub turn: usize,
    pub x_ctx: Vec<u32>,
    pub gold: Vec<u32>,
}

/// Runs perception and segment featurization over every scene in the
/// dataset, in parallel.
pub fn prepare_scenes(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<HashMap<String, PreparedScene>> {
    let ids: Vec<&String> = dataset.scenes.keys().collect();
    let prepared = parallel::map_slice(&ids, |id| -> Result<(String, PreparedScene)> {
        let scene = &dataset.scenes[*id];
        let perceived = perceive(
            scene,
            &dataset.universe,
            &cfg.perception(),
            cfg.n_obj,
            cfg.n_stride,
        );
        let feats = segment_features(scene, cfg.n_stride, cfg.d_cnn, cfg.feature_seed)?;
        let visual = build_visual_inputs(&perceived, &feats, &dataset.vocab)?;
        let rows = crate::vdtn::object_row_indices(&visual);
        let mut oracle = Array2::zeros((rows.len(), 4));
        for (i, row) in rows.iter().enumerate() {
            let info = visual.rows[*row];
            if let crate::features::RowKind::Object { source, .. } = info.kind {
                let truth = scene.objects[source].box_at(info.frame);
                for (j, v) in truth.coords().iter().enumerate() {
                    oracle[[i, j]] = *v;
                }
            }
        }
        Ok((
            (*id).clone(),
            PreparedScene {
                visual: Arc::new(visual),
                oracle_boxes: Arc::new(oracle),
            },
        ))
    });
    let mut map = HashMap::new();
    for item in prepared {
        let (id, scene) = item?;
        map.insert(id, scene);
    }
    Ok(map)
}

/// Builds the teacher-forced examples for a split: context with the gold
/// prior state, gold target tokens ending in `END_STATE`.
pub fn build_turn_examples(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    split: &str,
) -> Result<Vec<TurnExample>> {
    let window_cfg = cfg.context_window();
    let mut out = Vec::new();
    for dialogue in dataset.split(split)? {
        let mut completed: Vec<(Vec<String>, String)> = Vec::new();
        let mut prior = DialogueState::new();
        for (t, turn) in dialogue.turns.iter().enumerate() {
            let ctx_tokens = build_context(
                &completed,
                &turn.question,
                &prior,
                t + 1,
                &window_cfg,
                &dataset.universe,
                cfg.include_time,
            )?;
            let mut gold_tokens =
                flatten_state(&turn.gold_state, cfg.include_time, &dataset.universe)?;
            gold_tokens.push(crate::state::END_STATE.to_string());
            out.push(TurnExample {
                scene_id: dialogue.scene_id.clone(),
                dialogue_id: dialogue.dialogue_id.clone(),
                turn: t + 1,
                x_ctx: dataset.vocab.encode(&ctx_tokens),
                gold: dataset.vocab.encode(&gold_tokens),
            });
            completed.push((turn.question.clone(), turn.answer.clone()));
            prior = turn.gold_state.clone();
        }
    }
    for ex in &out {
        if ex.gold.last() != Some(&END_STATE_ID) {
            return Err(Error::generation("gold sequence must end with END_STATE"));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_dst: f64,
    pub val_dst: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_val_dst: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
    /// Training stopped early on a numeric fault; `params` is the last
    /// checkpoint that validated.
    pub aborted: Option<String>,
}

/// Teacher-forced training with the gold prior state in every context.
/// Batch gradients evaluate in parallel and reduce in index order, so runs
/// are bit-reproducible at any thread count. The returned parameters are
/// the best-validation snapshot.
pub fn train(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    scenes: &HashMap<String, PreparedScene>,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    let model_cfg = cfg.model_config(dataset.vocab.len());
    model_cfg.validate()?;
    let mut params = ModelParams::init(&model_cfg, model_cfg.vocab_size, cfg.seed)?;
    let mut adam = Adam::new(&params);

    let train_examples = build_turn_examples(dataset, cfg, "train")?;
    let val_examples = build_turn_examples(dataset, cfg, "val")?;
    if train_examples.is_empty() {
        return Err(Error::config("empty training split"));
    }
    let steps_per_epoch = train_examples.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule::new(
        cfg.peak_lr,
        steps_per_epoch,
        steps_per_epoch * cfg.epochs.max(2),
    );
    let opts = cfg.train_options();
    let needs_oracle = opts.self_supervision == SelfSupervision::ObjTracking;

    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_examples.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = rng::stream(cfg.seed, "epoch-shuffle", &[epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_total = 0.0;
        let mut epoch_dst = 0.0;
        let mut last_lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = parallel::map_slice(batch, |ix| {
                let example = &train_examples[*ix];
                let scene = &scenes[&example.scene_id];
                let mut grads = params.zeros_like();
                let oracle = needs_oracle.then(|| scene.oracle_boxes.as_ref());
                let report = training_step(
                    &TrainingExample {
                        visual: &scene.visual,
                        x_ctx: &example.x_ctx,
                        gold: &example.gold,
                        oracle_boxes: oracle,
                    },
                    &params,
                    &model_cfg,
                    &opts,
                    rng::derive_seed(cfg.seed, "mask", &[epoch as u64, *ix as u64]),
                    rng::derive_seed(cfg.seed, "drop", &[epoch as u64, *ix as u64]),
                    &mut grads,
                );
                report.map(|r| (r, grads))
            });
            let mut total_grads = params.zeros_like();
            let mut batch_fault: Option<String> = None;
            for result in results {
                match result {
                    Ok((report, grads)) => {
                        if !report.total.is_finite() {
                            batch_fault = Some("non-finite training loss".into());
                            break;
                        }
                        epoch_total += report.total;
                        epoch_dst += report.dst;
                        total_grads.accumulate(&grads);
                    }
                    Err(e) => {
                        batch_fault = Some(e.to_string());
                        break;
                    }
                }
            }
            if let Some(fault) = batch_fault {
                return Ok(abort_outcome(best, history, fault, params));
            }
            total_grads.scale(1.0 / batch.len() as f64);
            match adam.step(&mut params, &total_grads, &schedule) {
                Ok(lr) => last_lr = lr,
                Err(e) => return Ok(abort_outcome(best, history, e.to_string(), params)),
            }
        }

        let val_dst = validation_dst(&val_examples, scenes, &params, &model_cfg, cfg)?;
        let stats = EpochStats {
            epoch: epoch + 1,
            train_loss: epoch_total / train_examples.len() as f64,
            train_dst: epoch_dst / train_examples.len() as f64,
            val_dst,
            lr: last_lr,
        };
        progress(&stats);
        history.push(stats);
        if !val_dst.is_finite() {
            return Ok(abort_outcome(best, history, "non-finite validation loss".into(), params));
        }
        if best.as_ref().map(|(v, _, _)| val_dst < *v).unwrap_or(true) {
            best = Some((val_dst, epoch + 1, params.clone()));
        }
    }

    let (best_val_dst, best_epoch, best_params) =
        best.unwrap_or((f64::INFINITY, 0, params.clone()));
    Ok(TrainOutcome {
        params: best_params,
        best_val_dst,
        best_epoch,
        history,
        aborted: None,
    })
}

fn abort_outcome(
    best: Option<(f64, usize, ModelParams)>,
    history: Vec<EpochStats>,
    fault: String,
    fallback: ModelParams,
) -> TrainOutcome {
    let (best_val_dst, best_epoch, params) = best.unwrap_or((f64::INFINITY, 0, fallback));
    TrainOutcome {
        params,
        best_val_dst,
        best_epoch,
        history,
        aborted: Some(fault),
    }
}

/// Average teacher-forced state loss on a split (no dropout, no masking).
pub fn validation_dst(
    examples: &[TurnExample],
    scenes: &HashMap<String, PreparedScene>,
    params: &ModelParams,
    model_cfg: &crate::nn::ModelConfig,
    cfg: &ExperimentConfig,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::INFINITY);
    }
    let losses = parallel::map_slice(examples, |example| {
        let scene = &scenes[&example.scene_id];
        vdtn::dst_loss(
            &scene.visual,
            &example.x_ctx,
            &example.gold,
            params,
            model_cfg,
            cfg.features,
        )
    });
    let mut total = 0.0;
    for loss in losses {
        total += loss?;
    }
    Ok(total / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::{write_dataset, DataGenConfig};

    fn tiny_dataset() -> (tempfile::TempDir, Dataset) {
        let tmp = tempfile::tempdir().unwrap();
        let mut gen = DataGenConfig::new(4, 2, 2);
        gen.num_classes = 30;
        gen.num_frames = 40;
        gen.min_objects = 3;
        gen.max_objects = 4;
        write_dataset(tmp.path(), &gen).unwrap();
        let ds = crate::dialogue::load_dataset(tmp.path()).unwrap();
        (tmp, ds)
    }

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            d: 16,
            n_heads: 2,
            d_cnn: 8,
            epochs: 2,
            batch_size: 4,
            n_obj: 4,
            n_stride: 10,
            dropout: 0.0,
            detection_recall: 1.0,
            class_confusion_rate: 0.0,
            box_noise_sigma: 0.0,
            max_decode_len: 40,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        let (_tmp, ds) = tiny_dataset();
        let cfg = tiny_cfg();
        let scenes = prepare_scenes(&ds, &cfg).unwrap();
        let a = train(&ds, &cfg, &scenes, |_| {}).unwrap();
        let b = train(&ds, &cfg, &scenes, |_| {}).unwrap();
        assert!(a.aborted.is_none());
        assert_eq!(a.history.len(), 2);
        assert_eq!(a.best_val_dst, b.best_val_dst, "training must be reproducible");
        assert_eq!(a.params, b.params);
        assert!(a.params.all_finite());
    }

    #[test]
    fn gold_sequences_end_with_terminator() {
        let (_tmp, ds) = tiny_dataset();
        let cfg = tiny_cfg();
        let examples = build_turn_examples(&ds, &cfg, "train").unwrap();
        assert_eq!(examples.len(), 40);
        for ex in &examples {
            assert_eq!(*ex.gold.last().unwrap(), END_STATE_ID);
            assert!(!ex.x_ctx.is_empty());
        }
    }

    #[test]
    fn context_uses_gold_prior_from_second_turn() {
        let (_tmp, ds) = tiny_dataset();
        let cfg = tiny_cfg();
        let examples = build_turn_examples(&ds, &cfg, "train").unwrap();
        let prior_id = ds.vocab.id(crate::state::PRIOR_STATE);
        for ex in &examples {
            let has_prior = ex.x_ctx.contains(&prior_id);
            assert_eq!(has_prior, ex.turn > 1, "turn {}", ex.turn);
        }
    }
}
