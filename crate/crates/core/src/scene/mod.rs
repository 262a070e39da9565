//! Synthetic video scenes and the simulated perception front-end.
//!
//! Scenes hold a handful of attribute-typed objects, each with a
//! piecewise-linear box trajectory and a timeline of action events. A
//! parametric perception model re-emits those objects per sampled frame with
//! controllable recall, class confusion, and box noise, standing in for a
//! pretrained detector; segment-level feature vectors stand in for a frozen
//! video backbone.

mod perception;
mod segment;
mod universe;

pub use perception::{perceive, sampled_frames, Detection, PerceivedFrame, PerceivedVideo, PerceptionConfig};
pub use segment::{segment_features, segment_span, SEGMENT_NOISE_SCALE};
pub use universe::{build_universe, AttributeUniverse, Attributes, DEFAULT_CLASS_COUNT, FULL_CLASS_COUNT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::state::Slot;
use rand::seq::SliceRandom;
use rand::Rng;

/// Action vocabulary for object timelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Rotate,
    Slide,
    Fly,
    Contain,
    NoAction,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [
        ActionKind::Rotate,
        ActionKind::Slide,
        ActionKind::Fly,
        ActionKind::Contain,
        ActionKind::NoAction,
    ];

    /// True when the event translates the object's box.
    pub fn moves(self) -> bool {
        matches!(self, ActionKind::Slide | ActionKind::Fly)
    }

    /// Progressive form used as a system answer ("rotating", "no_action", ...).
    pub fn gerund(self) -> &'static str {
        match self {
            ActionKind::Rotate => "rotating",
            ActionKind::Slide => "sliding",
            ActionKind::Fly => "flying",
            ActionKind::Contain => "containing",
            ActionKind::NoAction => "no_action",
        }
    }

    /// Noun used inside questions ("during the cube 's second rotation").
    pub fn noun(self) -> &'static str {
        match self {
            ActionKind::Rotate => "rotation",
            ActionKind::Slide => "slide",
            ActionKind::Fly => "flight",
            ActionKind::Contain => "containment",
            ActionKind::NoAction => "rest",
        }
    }

    pub(crate) fn index(self) -> u64 {
        ActionKind::ALL.iter().position(|k| *k == self).unwrap() as u64
    }
}

/// One action of an object, active over frames `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionEvent {
    pub kind: ActionKind,
    pub start: u32,
    pub end: u32,
}

impl ActionEvent {
    pub fn overlaps(&self, start: u32, end: u32) -> bool {
        self.start <= end && start <= self.end
    }
}

/// Axis-aligned box with coordinates normalized to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        0.0 <= self.x1 && self.x1 < self.x2 && self.x2 <= 1.0 && 0.0 <= self.y1 && self.y1 < self.y2 && self.y2 <= 1.0
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    fn lerp(a: &BBox, b: &BBox, t: f64) -> BBox {
        BBox {
            x1: a.x1 + (b.x1 - a.x1) * t,
            y1: a.y1 + (b.y1 - a.y1) * t,
            x2: a.x2 + (b.x2 - a.x2) * t,
            y2: a.y2 + (b.y2 - a.y2) * t,
        }
    }
}

/// Trajectory sample; boxes between keyframes are linearly interpolated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_index: u32,
    pub attributes: Attributes,
    pub actions: Vec<ActionEvent>,
    pub trajectory_keyframes: Vec<Keyframe>,
}

impl SceneObject {
    /// Box at a 1-based frame, interpolated from the keyframe track.
    pub fn box_at(&self, frame: u32) -> BBox {
        let kfs = &self.trajectory_keyframes;
        if frame <= kfs[0].frame {
            return kfs[0].bbox;
        }
        if frame >= kfs[kfs.len() - 1].frame {
            return kfs[kfs.len() - 1].bbox;
        }
        let hi = kfs.partition_point(|k| k.frame <= frame);
        let (a, b) = (&kfs[hi - 1], &kfs[hi]);
        if a.frame == frame {
            return a.bbox;
        }
        let t = f64::from(frame - a.frame) / f64::from(b.frame - a.frame);
        BBox::lerp(&a.bbox, &b.bbox, t)
    }

    /// Distinct action kinds overlapping `[start, end]`; an idle object
    /// counts as doing `no_action`.
    pub fn kinds_in_window(&self, start: u32, end: u32) -> Vec<ActionKind> {
        let mut kinds: Vec<ActionKind> = self
            .actions
            .iter()
            .filter(|e| e.overlaps(start, end))
            .map(|e| e.kind)
            .collect();
        kinds.sort();
        kinds.dedup();
        if kinds.is_empty() {
            kinds.push(ActionKind::NoAction);
        }
        kinds
    }

    /// Value of a discrete slot for this object's class.
    pub fn slot_value(&self, slot: Slot) -> &str {
        self.attributes.get(slot)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    pub num_frames: u32,
    /// Keyframe tracks are interpolated with this rule (always "linear").
    pub interpolation: String,
    pub objects: Vec<SceneObject>,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn object_by_class(&self, class_index: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.class_index == class_index)
    }

    pub fn class_set(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.objects.iter().map(|o| o.class_index).collect();
        v.sort_unstable();
        v
    }
}

/// Box half-extent by size label; objects stay square.
fn half_extent(size: &str) -> f64 {
    match size {
        "small" => 0.05,
        "medium" => 0.08,
        _ => 0.11,
    }
}

/// Generates a scene with `num_objects` distinct classes and 1-4 action
/// events per object. Slide/fly events translate the box between random
/// positions; other kinds leave it in place. Fully determined by `seed`.
pub fn generate_scene(
    universe: &AttributeUniverse,
    num_frames: u32,
    num_objects: usize,
    seed: u64,
) -> Result<SceneSpec> {
    if num_objects > universe.classes.len() {
        return Err(Error::generation(format!(
            "requested {num_objects} objects but the universe has only {} classes",
            universe.classes.len()
        )));
    }
    if num_frames < 2 {
        return Err(Error::generation("a scene needs at least 2 frames"));
    }
    if num_objects < 2 {
        return Err(Error::generation("a scene needs at least 2 objects"));
    }

    let mut rng = rng::stream(seed, "scene", &[u64::from(num_frames), num_objects as u64]);

    let mut class_indices: Vec<u32> = (0..universe.classes.len() as u32).collect();
    class_indices.shuffle(&mut rng);
    let mut chosen: Vec<u32> = class_indices.into_iter().take(num_objects).collect();
    chosen.sort_unstable();

    let mut objects = Vec::with_capacity(num_objects);
    for class_index in chosen {
        let attributes = universe.classes[class_index as usize].clone();
        let half = half_extent(&attributes.size);

        // 1-4 non-overlapping events from sorted distinct cut points.
        let max_events = (usize::try_from(num_frames).unwrap() / 2).clamp(1, 4);
        let n_events = rng.random_range(1..=max_events);
        let mut cuts = sample_distinct(&mut rng, 2 * n_events, num_frames);
        cuts.sort_unstable();
        let actions: Vec<ActionEvent> = cuts
            .chunks(2)
            .map(|pair| ActionEvent {
                kind: ActionKind::ALL[rng.random_range(0..ActionKind::ALL.len())],
                start: pair[0],
                end: pair[1],
            })
            .collect();

        let sample_center = |rng: &mut rand_chacha::ChaCha8Rng| {
            (
                rng.random_range(half..=1.0 - half),
                rng.random_range(half..=1.0 - half),
            )
        };
        let box_from_center = |(cx, cy): (f64, f64)| BBox {
            x1: cx - half,
            y1: cy - half,
            x2: cx + half,
            y2: cy + half,
        };

        let mut keyframes = vec![Keyframe {
            frame: 1,
            bbox: box_from_center(sample_center(&mut rng)),
        }];
        for event in &actions {
            if event.kind.moves() {
                let at_start = keyframes.last().unwrap().bbox;
                if keyframes.last().unwrap().frame != event.start {
                    keyframes.push(Keyframe {
                        frame: event.start,
                        bbox: at_start,
                    });
                }
                keyframes.push(Keyframe {
                    frame: event.end,
                    bbox: box_from_center(sample_center(&mut rng)),
                });
            }
        }

        objects.push(SceneObject {
            class_index,
            attributes,
            actions,
            trajectory_keyframes: keyframes,
        });
    }

    Ok(SceneSpec {
        scene_id: format!("scene_{seed:016x}"),
        num_frames,
        interpolation: "linear".to_string(),
        objects,
        rng_seed: seed,
    })
}

/// `count` distinct values from `1..=max`.
fn sample_distinct(rng: &mut rand_chacha::ChaCha8Rng, count: usize, max: u32) -> Vec<u32> {
    debug_assert!(count as u32 <= max);
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count {
        let v = rng.random_range(1..=max);
        if !picked.contains(&v) {
            picked.push(v);
        }
    }
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    fn universe() -> AttributeUniverse {
        build_universe(FULL_CLASS_COUNT).unwrap()
    }

    #[test]
    fn scene_is_deterministic() {
        let u = universe();
        let a = generate_scene(&u, 300, 8, 7).unwrap();
        let b = generate_scene(&u, 300, 8, 7).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap(),
            "same seed must reproduce byte-identical scenes"
        );
    }

    #[test]
    fn too_many_objects_is_an_error() {
        let u = build_universe(5).unwrap();
        assert!(generate_scene(&u, 300, 6, 1).is_err());
    }

    #[test]
    fn every_frame_box_is_valid() {
        let u = universe();
        let scene = generate_scene(&u, 300, 8, 7).unwrap();
        for obj in &scene.objects {
            for frame in 1..=scene.num_frames {
                let b = obj.box_at(frame);
                assert!(b.is_valid(), "invalid box {b:?} at frame {frame}");
            }
        }
    }

    #[test]
    fn class_indices_are_distinct() {
        let u = universe();
        for seed in 0..20 {
            let scene = generate_scene(&u, 120, 6, seed).unwrap();
            let classes = scene.class_set();
            let mut dedup = classes.clone();
            dedup.dedup();
            assert_eq!(classes, dedup);
        }
    }

    #[test]
    fn action_events_are_sorted_and_disjoint() {
        let u = universe();
        for seed in 0..20 {
            let scene = generate_scene(&u, 120, 6, seed).unwrap();
            for obj in &scene.objects {
                for e in &obj.actions {
                    assert!(1 <= e.start && e.start < e.end && e.end <= scene.num_frames);
                }
                for pair in obj.actions.windows(2) {
                    assert!(pair[0].end < pair[1].start, "events overlap: {pair:?}");
                }
            }
        }
    }

    #[test]
    fn idle_window_reads_as_no_action() {
        let u = universe();
        let scene = generate_scene(&u, 300, 4, 3).unwrap();
        let obj = &scene.objects[0];
        // A window before the first event (if any room) must be idle.
        if obj.actions[0].start > 2 {
            let kinds = obj.kinds_in_window(1, obj.actions[0].start - 1);
            assert_eq!(kinds, vec![ActionKind::NoAction]);
        }
    }
}
