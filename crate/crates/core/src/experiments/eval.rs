use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::train::PreparedScene;
use super::ExperimentConfig;
use crate::dialogue::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{compute_report, AlignedTurn, MetricConfig, MetricsReport};
use crate::nn::ModelParams;
use crate::parallel;
use crate::state::{build_context, parse_state, DialogueState};
use crate::vdtn::{decode_state, DecodeConfig};

/// Where the turn-(t-1) state in the context comes from at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorStateSource {
    Predicted,
    Oracle,
}

impl FromStr for PriorStateSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(PriorStateSource::Predicted),
            "oracle" => Ok(PriorStateSource::Oracle),
            other => Err(Error::config(format!("unknown prior source {other:?}"))),
        }
    }
}

impl fmt::Display for PriorStateSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorStateSource::Predicted => "predicted",
            PriorStateSource::Oracle => "oracle",
        })
    }
}

/// One decoded turn, as written to `predictions.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dialogue_id: String,
    pub turn: usize,
    pub tokens: Vec<String>,
    pub parsed_state: DialogueState,
    pub score: f64,
    pub strategy: String,
}

/// Turn-by-turn rollout over a split. In predicted mode the context's prior
/// state is the model's own parsed prediction from the previous turn; in
/// oracle mode it is the gold state. Dialogues roll out in parallel; turns
/// within a dialogue stay sequential.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    scenes: &HashMap<String, PreparedScene>,
    split: &str,
    prior_source: PriorStateSource,
    decode_cfg: &DecodeConfig,
) -> Result<(MetricsReport, Vec<PredictionRecord>)> {
    let model_cfg = cfg.model_config(dataset.vocab.len());
    let window_cfg = cfg.context_window();
    let dialogues = dataset.split(split)?;
    let num_frames = dataset.num_frames();
    let strategy = format!("{:?}", decode_cfg.strategy).to_lowercase();

    let per_dialogue = parallel::map_slice(dialogues, |dialogue| -> Result<Vec<(AlignedTurn, PredictionRecord)>> {
        let scene = scenes
            .get(&dialogue.scene_id)
            .ok_or_else(|| Error::config(format!("scene {} not prepared", dialogue.scene_id)))?;
        let mut completed: Vec<(Vec<String>, String)> = Vec::new();
        let mut predicted_prior = DialogueState::new();
        let mut gold_prior = DialogueState::new();
        let mut out = Vec::with_capacity(dialogue.turns.len());
        for (t, turn) in dialogue.turns.iter().enumerate() {
            let prior = match prior_source {
                PriorStateSource::Predicted => &predicted_prior,
                PriorStateSource::Oracle => &gold_prior,
            };
            let ctx_tokens = build_context(
                &completed,
                &turn.question,
                prior,
                t + 1,
                &window_cfg,
                &dataset.universe,
                cfg.include_time,
            )?;
            let x_ctx = dataset.vocab.encode(&ctx_tokens);
            let (token_ids, score) = decode_state(
                &scene.visual,
                &x_ctx,
                params,
                &model_cfg,
                decode_cfg,
                cfg.features,
            )?;
            let tokens = dataset.vocab.decode(&token_ids);
            let (parsed, _notes) =
                parse_state(&tokens, cfg.include_time, &dataset.universe, num_frames);

            out.push((
                AlignedTurn {
                    dialogue_id: dialogue.dialogue_id.clone(),
                    turn: t + 1,
                    gold: turn.gold_state.clone(),
                    pred: Some(parsed.clone()),
                },
                PredictionRecord {
                    dialogue_id: dialogue.dialogue_id.clone(),
                    turn: t + 1,
                    tokens,
                    parsed_state: parsed.clone(),
                    score,
                    strategy: strategy.clone(),
                },
            ));
            completed.push((turn.question.clone(), turn.answer.clone()));
            predicted_prior = parsed;
            gold_prior = turn.gold_state.clone();
        }
        Ok(out)
    });

    let mut aligned = Vec::new();
    let mut records = Vec::new();
    for result in per_dialogue {
        for (turn, record) in result? {
            aligned.push(turn);
            records.push(record);
        }
    }
    let metric_cfg = MetricConfig {
        iou_thresholds: vec![0.5, 0.7],
        include_time: cfg.include_time,
    };
    Ok((compute_report(&aligned, &metric_cfg), records))
}
