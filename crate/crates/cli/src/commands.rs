use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use mmdst_core::baselines::{
    object_all_predict, object_random_predict, state_prior_predict, RnnExample, RnnTracker,
    RnnTrackerConfig, TfIdfIndex,
};
use mmdst_core::dialogue::{load_dataset, write_dataset, DataGenConfig, Dataset};
use mmdst_core::experiments::{
    evaluate, parse_grid, prepare_scenes, render_grid, response_task, run_ablation_grid, train,
    ExperimentConfig, PredictionRecord, PriorStateSource, ResponseTaskConfig, StateSource,
};
use mmdst_core::metrics::{compute_report, render_table, AlignedTurn, MetricConfig, MetricsReport};
use mmdst_core::nn::{load_checkpoint, save_checkpoint, ModelParams};
use mmdst_core::state::{build_context, ContextWindowConfig, DialogueState, Slot};
use mmdst_core::vdtn::{DecodeConfig, DecodeStrategy};
use mmdst_core::{Error, Result};

pub const REPORT_SCHEMA: &str = "mmdst-report-v1";

/// `MMDST_SEED` overrides configured seeds for smoke tests.
fn seed_override() -> Option<u64> {
    std::env::var("MMDST_SEED").ok().and_then(|v| v.parse().ok())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_kv_text(&std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed_override() {
        eprintln!("MMDST_SEED={seed} overrides the configured seed");
        cfg.seed = seed;
        cfg.perception_seed = seed;
        cfg.feature_seed = seed;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for r in records {
        writeln!(file, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn gen(
    out: &Path,
    dialogues: usize,
    val: usize,
    test: usize,
    frames: u32,
    classes: usize,
    seed: u64,
    min_objects: usize,
    max_objects: usize,
) -> Result<()> {
    let mut cfg = DataGenConfig::new(dialogues, val, test);
    cfg.num_frames = frames;
    cfg.num_classes = classes;
    cfg.seed = seed_override().unwrap_or(seed);
    cfg.min_objects = min_objects;
    cfg.max_objects = max_objects;
    let manifest = write_dataset(out, &cfg)?;
    println!(
        "wrote dataset to {} (checksum {})",
        out.display(),
        manifest.checksum
    );
    for (split, counts) in &manifest.counts {
        println!("  {split}: {} dialogues, {} turns", counts.dialogues, counts.turns);
    }
    Ok(())
}

pub fn train(data: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let dataset = load_dataset(data)?;
    let scenes = prepare_scenes(&dataset, &cfg)?;
    println!(
        "training: {} train dialogues, vocab {}, fingerprint {}",
        dataset.split("train")?.len(),
        dataset.vocab.len(),
        cfg.fingerprint()
    );
    let outcome = train::run(&dataset, &cfg, &scenes)?;

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config"), cfg.to_kv_text())?;
    let sidecar_metrics = serde_json::json!({
        "schema_version": REPORT_SCHEMA,
        "best_val_dst": outcome.best_val_dst,
        "best_epoch": outcome.best_epoch,
        "aborted": outcome.aborted,
        "experiment_config": cfg.to_kv_text(),
    });
    save_checkpoint(
        &out.join("checkpoints").join("best"),
        &outcome.params,
        &cfg.model_config(dataset.vocab.len()),
        dataset.vocab.len(),
        &dataset.vocab.content_hash(),
        outcome.best_epoch,
        sidecar_metrics,
    )?;
    write_json(
        &out.join("report.json"),
        &serde_json::json!({
            "schema_version": REPORT_SCHEMA,
            "kind": "train",
            "best_val_dst": outcome.best_val_dst,
            "best_epoch": outcome.best_epoch,
            "aborted": outcome.aborted,
            "history": outcome.history,
        }),
    )?;
    if let Some(fault) = &outcome.aborted {
        eprintln!("training aborted early: {fault}; kept the last good checkpoint");
    }
    println!(
        "best checkpoint: epoch {} with validation state loss {:.4}",
        outcome.best_epoch, outcome.best_val_dst
    );
    Ok(())
}

mod train {
    use super::*;
    pub fn run(
        dataset: &Dataset,
        cfg: &ExperimentConfig,
        scenes: &HashMap<String, mmdst_core::experiments::PreparedScene>,
    ) -> Result<mmdst_core::experiments::TrainOutcome> {
        mmdst_core::experiments::train(dataset, cfg, scenes, |stats| {
            println!(
                "epoch {:>3}: train {:.4} (dst {:.4})  val dst {:.4}  lr {:.2e}",
                stats.epoch, stats.train_loss, stats.train_dst, stats.val_dst, stats.lr
            );
        })
    }
}

/// Loads a checkpoint plus the experiment config embedded in its sidecar,
/// validating the vocabulary hash against the dataset.
fn load_tracker(ckpt: &Path, dataset: &Dataset) -> Result<(ModelParams, ExperimentConfig)> {
    let (params, sidecar) = load_checkpoint(ckpt)?;
    if sidecar.vocab_hash != dataset.vocab.content_hash() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary hash {} does not match the dataset ({})",
            sidecar.vocab_hash,
            dataset.vocab.content_hash()
        )));
    }
    let kv = sidecar
        .metrics
        .get("experiment_config")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks an embedded experiment config".into()))?;
    Ok((params, ExperimentConfig::from_kv_text(kv)?))
}

pub fn eval(
    ckpt: &Path,
    data: &Path,
    split: &str,
    prior: &str,
    decode: &str,
    out: &Path,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let (params, mut cfg) = load_tracker(ckpt, &dataset)?;
    let prior = PriorStateSource::from_str(prior)?;
    cfg.decode = DecodeStrategy::from_str(decode)?;
    let decode_cfg = cfg.decode_config();
    let scenes = prepare_scenes(&dataset, &cfg)?;
    let (report, records) = evaluate(&params, &cfg, &dataset, &scenes, split, prior, &decode_cfg)?;

    std::fs::create_dir_all(out)?;
    write_predictions(&out.join("predictions.jsonl"), &records)?;
    write_json(
        &out.join("report.json"),
        &serde_json::json!({
            "schema_version": REPORT_SCHEMA,
            "kind": "eval",
            "split": split,
            "prior": prior.to_string(),
            "decode": decode,
            "metrics": report,
        }),
    )?;
    let label = format!("tracker ({prior} prior, {decode})");
    print!("{}", render_table(&[(label, &report)]));
    Ok(())
}

fn rnn_examples(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    scenes: &HashMap<String, mmdst_core::experiments::PreparedScene>,
    split: &str,
) -> Result<(Vec<RnnExample>, Vec<(String, usize, DialogueState)>)> {
    // Recurrent baselines read raw dialogue history without prior states.
    let window_cfg = ContextWindowConfig {
        use_prior_state: false,
        max_turns: 10,
    };
    let mut examples = Vec::new();
    let mut keys = Vec::new();
    for dialogue in dataset.split(split)? {
        let scene = &scenes[&dialogue.scene_id];
        let mut completed: Vec<(Vec<String>, String)> = Vec::new();
        for (t, turn) in dialogue.turns.iter().enumerate() {
            let ctx = build_context(
                &completed,
                &turn.question,
                &DialogueState::new(),
                t + 1,
                &window_cfg,
                &dataset.universe,
                cfg.include_time,
            )?;
            examples.push(RnnExample {
                visual: Arc::clone(&scene.visual),
                x_ctx: dataset.vocab.encode(&ctx),
                gold: turn.gold_state.clone(),
            });
            keys.push((dialogue.dialogue_id.clone(), t + 1, turn.gold_state.clone()));
            completed.push((turn.question.clone(), turn.answer.clone()));
        }
    }
    Ok((examples, keys))
}

pub fn baseline(
    name: &str,
    data: &Path,
    split: &str,
    config: Option<&Path>,
    epochs: usize,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let dataset = load_dataset(data)?;
    let scenes = prepare_scenes(&dataset, &cfg)?;
    let num_frames = dataset.num_frames();

    // Build one prediction per (dialogue, turn) of the evaluation split.
    let golds: Vec<(String, usize, DialogueState)> = dataset
        .split(split)?
        .iter()
        .flat_map(|d| {
            d.turns
                .iter()
                .enumerate()
                .map(move |(t, turn)| (d.dialogue_id.clone(), t + 1, turn.gold_state.clone()))
        })
        .collect();

    let predictions: Vec<DialogueState> = match name {
        "q-retrieval" => {
            let index = TfIdfIndex::build(dataset.split("train")?)?;
            dataset
                .split(split)?
                .iter()
                .flat_map(|d| d.turns.iter())
                .map(|turn| index.predict(&turn.question).cloned())
                .collect::<Result<Vec<_>>>()?
        }
        "state-prior" => {
            let prior = state_prior_predict(dataset.split("train")?)?;
            vec![prior; golds.len()]
        }
        "object-random" => dataset
            .split(split)?
            .iter()
            .flat_map(|d| {
                let scene = &dataset.scenes[&d.scene_id];
                let perceived = mmdst_core::scene::perceive(
                    scene,
                    &dataset.universe,
                    &cfg.perception(),
                    cfg.n_obj,
                    cfg.n_stride,
                );
                d.turns.iter().enumerate().map(move |(t, _)| {
                    object_random_predict(
                        &perceived,
                        &dataset.universe,
                        num_frames,
                        cfg.seed + t as u64,
                    )
                })
            })
            .collect(),
        "object-all" => dataset
            .split(split)?
            .iter()
            .flat_map(|d| {
                let scene = &dataset.scenes[&d.scene_id];
                let perceived = mmdst_core::scene::perceive(
                    scene,
                    &dataset.universe,
                    &cfg.perception(),
                    cfg.n_obj,
                    cfg.n_stride,
                );
                let state = object_all_predict(&perceived, &dataset.universe, num_frames);
                d.turns.iter().map(move |_| state.clone())
            })
            .collect(),
        rnn if rnn.starts_with("rnn") => {
            let (use_video, use_dialogue, use_attention) = match rnn {
                "rnn-v" => (true, false, false),
                "rnn-d" => (false, true, false),
                "rnn-vd" => (true, true, false),
                "rnn-vd-att" => (true, true, true),
                other => return Err(Error::config(format!("unknown baseline {other:?}"))),
            };
            let mut rnn_cfg = RnnTrackerConfig::new(use_video, use_dialogue, use_attention);
            rnn_cfg.epochs = epochs;
            rnn_cfg.seed = cfg.seed;
            let (train_examples, _) = rnn_examples(&dataset, &cfg, &scenes, "train")?;
            let slot_values: Vec<Vec<String>> = Slot::ALL
                .iter()
                .map(|s| dataset.universe.slot_values(*s).to_vec())
                .collect();
            let tracker = RnnTracker::train(
                &train_examples,
                rnn_cfg,
                dataset.universe.num_classes(),
                num_frames,
                dataset.vocab.len(),
                cfg.d_cnn,
                slot_values,
            )?;
            let (eval_examples, _) = rnn_examples(&dataset, &cfg, &scenes, split)?;
            eval_examples.iter().map(|ex| tracker.predict(ex)).collect()
        }
        other => return Err(Error::config(format!("unknown baseline {other:?}"))),
    };

    let aligned: Vec<AlignedTurn> = golds
        .iter()
        .zip(&predictions)
        .map(|((dialogue_id, turn, gold), pred)| AlignedTurn {
            dialogue_id: dialogue_id.clone(),
            turn: *turn,
            gold: gold.clone(),
            pred: Some(pred.clone()),
        })
        .collect();
    let metric_cfg = MetricConfig {
        iou_thresholds: vec![0.5, 0.7],
        include_time: cfg.include_time,
    };
    let report = compute_report(&aligned, &metric_cfg);

    std::fs::create_dir_all(out)?;
    let records: Vec<PredictionRecord> = golds
        .iter()
        .zip(&predictions)
        .map(|((dialogue_id, turn, _), pred)| PredictionRecord {
            dialogue_id: dialogue_id.clone(),
            turn: *turn,
            tokens: Vec::new(),
            parsed_state: pred.clone(),
            score: 0.0,
            strategy: name.to_string(),
        })
        .collect();
    write_predictions(&out.join("predictions.jsonl"), &records)?;
    write_json(
        &out.join("report.json"),
        &serde_json::json!({
            "schema_version": REPORT_SCHEMA,
            "kind": "baseline",
            "name": name,
            "split": split,
            "metrics": report,
        }),
    )?;
    print!("{}", render_table(&[(name.to_string(), &report)]));
    Ok(())
}

pub fn ablate(
    grid: &Path,
    data: &Path,
    config: Option<&Path>,
    split: &str,
    out: &Path,
) -> Result<()> {
    let base = load_config(config)?;
    let dataset = load_dataset(data)?;
    let cells = parse_grid(&std::fs::read_to_string(grid)?, &base)?;
    println!("running {} grid cells", cells.len());
    let outcomes = run_ablation_grid(&dataset, &cells, split, |i, cell, err| match err {
        None => {
            let label: Vec<String> = cell.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("cell {}/{}: {}", i + 1, cells.len(), label.join(" "));
        }
        Some(e) => eprintln!("cell {} failed: {e}", i + 1),
    });
    std::fs::create_dir_all(out)?;
    write_json(
        &out.join("report.json"),
        &serde_json::json!({
            "schema_version": REPORT_SCHEMA,
            "kind": "ablate",
            "split": split,
            "cells": outcomes,
        }),
    )?;
    let table = render_grid(&outcomes);
    std::fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn respond(
    states: &str,
    data: &Path,
    ckpt: Option<&Path>,
    config: Option<&Path>,
    epochs: usize,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let dataset = load_dataset(data)?;
    let source = StateSource::from_str(states)?;
    let tracker = match (source.needs_tracker(), ckpt) {
        (true, Some(path)) => Some(load_tracker(path, &dataset)?.0),
        (true, None) => {
            return Err(Error::config(
                "predicted state filtering requires --ckpt with a tracker checkpoint",
            ))
        }
        _ => None,
    };
    let mut rcfg = ResponseTaskConfig::new(source);
    rcfg.epochs = epochs;
    if let Some(seed) = seed_override() {
        rcfg.seed = seed;
    }
    let outcome = response_task(&dataset, &cfg, &rcfg, tracker.as_ref(), |epoch, loss| {
        println!("respond epoch {epoch:>3}: train loss {loss:.4}");
    })?;
    std::fs::create_dir_all(out)?;
    write_json(
        &out.join("report.json"),
        &serde_json::json!({
            "schema_version": REPORT_SCHEMA,
            "kind": "respond",
            "outcome": outcome,
        }),
    )?;
    println!(
        "response accuracy ({states}): test {:.3} train {:.3} ({} fallback turns)",
        outcome.test_accuracy, outcome.train_accuracy, outcome.fallback_turns
    );
    Ok(())
}

pub fn inspect(path: &Path) -> Result<()> {
    if path.join("manifest.json").exists() {
        let dataset = load_dataset(path)?;
        println!("dataset at {}", path.display());
        println!("  classes: {}", dataset.universe.num_classes());
        println!("  frames per video: {}", dataset.num_frames());
        println!("  vocabulary: {} tokens", dataset.vocab.len());
        println!("  checksum: {}", dataset.manifest.checksum);
        for (split, counts) in &dataset.manifest.counts {
            println!("  {split}: {} dialogues / {} turns", counts.dialogues, counts.turns);
        }
        return Ok(());
    }
    if path.join("checkpoint.json").exists() {
        let (params, sidecar) = load_checkpoint(path)?;
        println!("checkpoint at {}", path.display());
        println!("  version: {}", sidecar.version);
        println!("  step: {}", sidecar.step);
        println!("  parameters: {}", params.num_parameters());
        println!("  vocab hash: {}", sidecar.vocab_hash);
        return Ok(());
    }
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let schema = value
            .get("schema_version")
            .and_then(|v| v.as_str())
            .unwrap_or("unknown");
        let kind = value.get("kind").and_then(|v| v.as_str()).unwrap_or("unknown");
        println!("report at {} (schema {schema}, kind {kind})", path.display());
        if let Some(m) = value.get("metrics") {
            if let Ok(report) = serde_json::from_value::<MetricsReport>(m.clone()) {
                print!("{}", render_table(&[("report".to_string(), &report)]));
            }
        }
        return Ok(());
    }
    Err(Error::config(format!(
        "nothing inspectable at {}",
        path.display()
    )))
}
