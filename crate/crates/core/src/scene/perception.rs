use serde::{Deserialize, Serialize};

use super::{AttributeUniverse, BBox, SceneSpec};
use crate::rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Fidelity of the simulated detector. `detection_recall = 1`,
/// `class_confusion_rate = 0`, `box_noise_sigma = 0` is perfect perception.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionConfig {
    pub detection_recall: f64,
    pub class_confusion_rate: f64,
    pub box_noise_sigma: f64,
    pub seed: u64,
}

impl PerceptionConfig {
    pub fn perfect(seed: u64) -> Self {
        PerceptionConfig {
            detection_recall: 1.0,
            class_confusion_rate: 0.0,
            box_noise_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let probs_ok = (0.0..=1.0).contains(&self.detection_recall)
            && (0.0..=1.0).contains(&self.class_confusion_rate);
        if !probs_ok || self.box_noise_sigma < 0.0 {
            return Err(crate::Error::config(format!(
                "invalid perception config: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_index: u32,
    pub bbox: BBox,
    /// Index of the scene object this detection came from (not visible to
    /// models; used for oracle box lookups).
    pub source: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceivedFrame {
    pub frame: u32,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceivedVideo {
    pub n_obj: usize,
    pub n_stride: u32,
    pub frames: Vec<PerceivedFrame>,
}

/// The sampling grid: frames 1, 1 + stride, 1 + 2*stride, ... up to the
/// last frame.
pub fn sampled_frames(num_frames: u32, n_stride: u32) -> Vec<u32> {
    (1..=num_frames).step_by(n_stride as usize).collect()
}

/// Runs the simulated detector over the sampling grid.
///
/// Each true object flips one detection coin per (frame, object), so a run
/// at lower recall emits a subset of a run at higher recall under the same
/// seed. Confused classes are drawn uniformly among the other classes, and
/// box noise is re-clamped to a valid box shape.
pub fn perceive(
    scene: &SceneSpec,
    universe: &AttributeUniverse,
    cfg: &PerceptionConfig,
    n_obj: usize,
    n_stride: u32,
) -> PerceivedVideo {
    assert!(n_stride >= 1, "n_stride must be at least 1");
    let num_classes = universe.num_classes() as u32;
    let frames = sampled_frames(scene.num_frames, n_stride)
        .into_iter()
        .map(|frame| {
            let mut detections = Vec::new();
            for (source, obj) in scene.objects.iter().enumerate() {
                let mut coin = rng::stream(
                    cfg.seed,
                    "perceive",
                    &[scene.rng_seed, u64::from(frame), source as u64],
                );
                let detect: f64 = coin.random();
                if detect >= cfg.detection_recall {
                    continue;
                }
                let confuse: f64 = coin.random();
                let class_index = if confuse < cfg.class_confusion_rate && num_classes > 1 {
                    let other = coin.random_range(0..num_classes - 1);
                    if other >= obj.class_index {
                        other + 1
                    } else {
                        other
                    }
                } else {
                    obj.class_index
                };
                let truth = obj.box_at(frame);
                let bbox = if cfg.box_noise_sigma > 0.0 {
                    let normal = Normal::new(0.0, cfg.box_noise_sigma).unwrap();
                    clamp_box(BBox {
                        x1: truth.x1 + normal.sample(&mut coin),
                        y1: truth.y1 + normal.sample(&mut coin),
                        x2: truth.x2 + normal.sample(&mut coin),
                        y2: truth.y2 + normal.sample(&mut coin),
                    })
                } else {
                    truth
                };
                detections.push(Detection {
                    class_index,
                    bbox,
                    source,
                });
            }
            detections.sort_by_key(|d| (d.class_index, d.source));
            detections.truncate(n_obj);
            PerceivedFrame { frame, detections }
        })
        .collect();

    PerceivedVideo {
        n_obj,
        n_stride,
        frames,
    }
}

/// Clamps to the unit square while keeping `x1 < x2` and `y1 < y2`.
fn clamp_box(b: BBox) -> BBox {
    let (x1, x2) = order_axis(b.x1, b.x2);
    let (y1, y2) = order_axis(b.y1, b.y2);
    BBox { x1, y1, x2, y2 }
}

fn order_axis(a: f64, b: f64) -> (f64, f64) {
    let lo = a.clamp(0.0, 1.0);
    let hi = b.clamp(0.0, 1.0);
    let (mut lo, mut hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    if lo >= hi {
        // Degenerate after clamping; open a minimal gap inside [0, 1].
        if hi + 1e-6 <= 1.0 {
            hi += 1e-6;
        } else {
            lo -= 1e-6;
        }
    }
    (lo, hi)
}
