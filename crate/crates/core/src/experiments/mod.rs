//! Training loops, rollout evaluation, the ablation grid, and the
//! downstream response-prediction task.

mod ablate;
mod eval;
mod respond;
mod train;

pub use ablate::{parse_grid, render_grid, run_ablation_grid, CellOutcome, GridCell};
pub use eval::{evaluate, PredictionRecord, PriorStateSource};
pub use respond::{chance_level, response_task, ResponseOutcome, ResponseTaskConfig, StateSource};
pub use train::{prepare_scenes, train, EpochStats, PreparedScene, TrainOutcome, TurnExample};

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::VideoFeatureMode;
use crate::nn::{LossKind, ModelConfig};
use crate::scene::PerceptionConfig;
use crate::state::ContextWindowConfig;
use crate::vdtn::{DecodeConfig, DecodeStrategy, SelfSupervision};

/// Full experiment description, serialized as a flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_cnn: usize,
    pub max_decode_len: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub seed: u64,
    pub features: VideoFeatureMode,
    pub self_supervision: SelfSupervision,
    pub loss_kind: LossKind,
    pub lambda: f64,
    pub p_obj: f64,
    pub p_seg: f64,
    pub use_prior_state: bool,
    pub max_turns: usize,
    pub include_time: bool,
    pub n_obj: usize,
    pub n_stride: u32,
    pub detection_recall: f64,
    pub class_confusion_rate: f64,
    pub box_noise_sigma: f64,
    pub perception_seed: u64,
    pub feature_seed: u64,
    pub prior_state_source: PriorStateSource,
    pub decode: DecodeStrategy,
    pub beam_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            d: 128,
            n_layers: 1,
            n_heads: 8,
            d_cnn: 64,
            max_decode_len: 60,
            label_smoothing: 0.1,
            dropout: 0.1,
            epochs: 40,
            batch_size: 8,
            peak_lr: 1e-3,
            seed: 1,
            features: VideoFeatureMode::BbCnn,
            self_supervision: SelfSupervision::Seg,
            loss_kind: LossKind::L1,
            lambda: 1.0,
            p_obj: 0.15,
            p_seg: 0.15,
            use_prior_state: true,
            max_turns: 1,
            include_time: true,
            n_obj: 10,
            n_stride: 12,
            detection_recall: 0.9,
            class_confusion_rate: 0.05,
            box_noise_sigma: 0.02,
            perception_seed: 7,
            feature_seed: 7,
            prior_state_source: PriorStateSource::Predicted,
            decode: DecodeStrategy::Beam,
            beam_size: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_cnn: self.d_cnn,
            vocab_size,
            max_decode_len: self.max_decode_len,
            label_smoothing: self.label_smoothing,
            dropout: self.dropout,
        }
    }

    pub fn perception(&self) -> PerceptionConfig {
        PerceptionConfig {
            detection_recall: self.detection_recall,
            class_confusion_rate: self.class_confusion_rate,
            box_noise_sigma: self.box_noise_sigma,
            seed: self.perception_seed,
        }
    }

    pub fn context_window(&self) -> ContextWindowConfig {
        ContextWindowConfig {
            use_prior_state: self.use_prior_state,
            max_turns: self.max_turns,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            strategy: self.decode,
            beam_size: self.beam_size,
            max_len: self.max_decode_len,
        }
    }

    pub fn train_options(&self) -> crate::vdtn::TrainOptions {
        crate::vdtn::TrainOptions {
            self_supervision: self.self_supervision,
            loss_kind: self.loss_kind,
            lambda: self.lambda,
            p_obj: self.p_obj,
            p_seg: self.p_seg,
            feature_mode: self.features,
        }
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "d" => self.d = parse(v, key)?,
            "n_layers" => self.n_layers = parse(v, key)?,
            "n_heads" => self.n_heads = parse(v, key)?,
            "d_cnn" => self.d_cnn = parse(v, key)?,
            "max_decode_len" => self.max_decode_len = parse(v, key)?,
            "label_smoothing" => self.label_smoothing = parse(v, key)?,
            "dropout" => self.dropout = parse(v, key)?,
            "epochs" => self.epochs = parse(v, key)?,
            "batch_size" => self.batch_size = parse(v, key)?,
            "peak_lr" => self.peak_lr = parse(v, key)?,
            "seed" => self.seed = parse(v, key)?,
            "features" => self.features = VideoFeatureMode::from_str(v)?,
            "self_supervision" => self.self_supervision = SelfSupervision::from_str(v)?,
            "loss_kind" => self.loss_kind = LossKind::from_str(v)?,
            "lambda" => self.lambda = parse(v, key)?,
            "p_obj" => self.p_obj = parse(v, key)?,
            "p_seg" => self.p_seg = parse(v, key)?,
            "use_prior_state" => self.use_prior_state = parse(v, key)?,
            "max_turns" => self.max_turns = parse(v, key)?,
            "include_time" => self.include_time = parse(v, key)?,
            "n_obj" => self.n_obj = parse(v, key)?,
            "n_stride" => self.n_stride = parse(v, key)?,
            "detection_recall" => self.detection_recall = parse(v, key)?,
            "class_confusion_rate" => self.class_confusion_rate = parse(v, key)?,
            "box_noise_sigma" => self.box_noise_sigma = parse(v, key)?,
            "perception_seed" => self.perception_seed = parse(v, key)?,
            "feature_seed" => self.feature_seed = parse(v, key)?,
            "prior_state_source" => self.prior_state_source = PriorStateSource::from_str(v)?,
            "decode" => self.decode = DecodeStrategy::from_str(v)?,
            "beam_size" => self.beam_size = parse(v, key)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` document (`#` starts a comment).
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", ln + 1)))?;
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        let enum_str = |v: serde_json::Value| v.as_str().expect("string enum").to_string();
        let mut pairs: Vec<(String, String)> = vec![
            ("d".into(), self.d.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_cnn".into(), self.d_cnn.to_string()),
            ("max_decode_len".into(), self.max_decode_len.to_string()),
            ("label_smoothing".into(), self.label_smoothing.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("peak_lr".into(), self.peak_lr.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("features".into(), self.features.to_string()),
            (
                "self_supervision".into(),
                enum_str(serde_json::to_value(self.self_supervision).unwrap()),
            ),
            (
                "loss_kind".into(),
                enum_str(serde_json::to_value(self.loss_kind).unwrap()),
            ),
            ("lambda".into(), self.lambda.to_string()),
            ("p_obj".into(), self.p_obj.to_string()),
            ("p_seg".into(), self.p_seg.to_string()),
            ("use_prior_state".into(), self.use_prior_state.to_string()),
            ("max_turns".into(), self.max_turns.to_string()),
            ("include_time".into(), self.include_time.to_string()),
            ("n_obj".into(), self.n_obj.to_string()),
            ("n_stride".into(), self.n_stride.to_string()),
            ("detection_recall".into(), self.detection_recall.to_string()),
            (
                "class_confusion_rate".into(),
                self.class_confusion_rate.to_string(),
            ),
            ("box_noise_sigma".into(), self.box_noise_sigma.to_string()),
            ("perception_seed".into(), self.perception_seed.to_string()),
            ("feature_seed".into(), self.feature_seed.to_string()),
            (
                "prior_state_source".into(),
                self.prior_state_source.to_string(),
            ),
            (
                "decode".into(),
                enum_str(serde_json::to_value(self.decode).unwrap()),
            ),
            ("beam_size".into(), self.beam_size.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Stable fingerprint of the full configuration.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_kv_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Keys whose values differ from `base` (ablation-cell labelling).
    pub fn overrides_from(&self, base: &ExperimentConfig) -> BTreeMap<String, String> {
        let mine = kv_map(&self.to_kv_text());
        let theirs = kv_map(&base.to_kv_text());
        mine.into_iter()
            .filter(|(k, v)| theirs.get(k) != Some(v))
            .collect()
    }
}

fn kv_map(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn parse<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}
