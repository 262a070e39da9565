use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{ActionKind, SceneSpec};

/// Answers a system can give: counts 0..=10, booleans, and action words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnswerVocabulary;

impl AnswerVocabulary {
    pub const ACTION_ANSWERS: [&'static str; 4] = ["rotating", "sliding", "flying", "no_action"];

    pub fn tokens() -> Vec<String> {
        let mut v: Vec<String> = (0..=10).map(|n| n.to_string()).collect();
        v.push("TRUE".to_string());
        v.push("FALSE".to_string());
        v.extend(Self::ACTION_ANSWERS.iter().map(|s| s.to_string()));
        v
    }

    pub fn len() -> usize {
        17
    }

    pub fn contains(token: &str) -> bool {
        Self::index_of(token).is_some()
    }

    pub fn index_of(token: &str) -> Option<usize> {
        Self::tokens().iter().position(|t| t == token)
    }
}

/// Side relations evaluated from box centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Front,
}

impl Side {
    pub fn phrase(self) -> &'static [&'static str] {
        match self {
            Side::Left => &["left"],
            Side::Right => &["right"],
            Side::Front => &["in", "front"],
        }
    }
}

/// Executable form of a question; objects are referenced by class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum QuestionProgram {
    /// How many objects perform `kind` inside the window.
    CountAction { kind: ActionKind, window: (u32, u32) },
    /// Does the referenced object perform `kind` inside the window?
    ExistsAction {
        class: u32,
        kind: ActionKind,
        window: (u32, u32),
    },
    /// Do the two referenced objects perform the same set of action kinds?
    SameActionSet {
        class_a: u32,
        class_b: u32,
        window: (u32, u32),
    },
    /// Which action is the referenced object performing?
    WhatDoing { class: u32, window: (u32, u32) },
    /// How many other objects sit on `side` of the referenced object at the
    /// window's midpoint frame?
    SpatialCount {
        class: u32,
        side: Side,
        window: (u32, u32),
    },
}

impl QuestionProgram {
    pub fn window(&self) -> (u32, u32) {
        match self {
            QuestionProgram::CountAction { window, .. }
            | QuestionProgram::ExistsAction { window, .. }
            | QuestionProgram::SameActionSet { window, .. }
            | QuestionProgram::WhatDoing { window, .. }
            | QuestionProgram::SpatialCount { window, .. } => *window,
        }
    }

    pub fn with_window(&self, window: (u32, u32)) -> QuestionProgram {
        let mut p = self.clone();
        match &mut p {
            QuestionProgram::CountAction { window: w, .. }
            | QuestionProgram::ExistsAction { window: w, .. }
            | QuestionProgram::SameActionSet { window: w, .. }
            | QuestionProgram::WhatDoing { window: w, .. }
            | QuestionProgram::SpatialCount { window: w, .. } => *w = window,
        }
        p
    }
}

fn bool_token(b: bool) -> String {
    if b {
        "TRUE".into()
    } else {
        "FALSE".into()
    }
}

fn count_token(n: usize) -> String {
    n.min(10).to_string()
}

/// Executes a program against the true scene; answers are exact.
pub fn execute_question(scene: &SceneSpec, program: &QuestionProgram) -> Result<String> {
    let (start, end) = program.window();
    if !(1 <= start && start < end && end <= scene.num_frames) {
        return Err(Error::Execution(format!(
            "window [{start}, {end}] invalid for a {}-frame scene",
            scene.num_frames
        )));
    }
    let lookup = |class: u32| {
        scene
            .object_by_class(class)
            .ok_or_else(|| Error::Execution(format!("class {class} not present in scene")))
    };

    match program {
        QuestionProgram::CountAction { kind, window } => {
            let n = scene
                .objects
                .iter()
                .filter(|o| o.kinds_in_window(window.0, window.1).contains(kind))
                .count();
            Ok(count_token(n))
        }
        QuestionProgram::ExistsAction { class, kind, window } => {
            let obj = lookup(*class)?;
            Ok(bool_token(
                obj.kinds_in_window(window.0, window.1).contains(kind),
            ))
        }
        QuestionProgram::SameActionSet {
            class_a,
            class_b,
            window,
        } => {
            let a = lookup(*class_a)?;
            let b = lookup(*class_b)?;
            Ok(bool_token(
                a.kinds_in_window(window.0, window.1) == b.kinds_in_window(window.0, window.1),
            ))
        }
        QuestionProgram::WhatDoing { class, window } => {
            let obj = lookup(*class)?;
            // The dominant kind: largest overlap with the window, earliest
            // event breaking ties; an idle object answers no_action.
            let mut best: Option<(u32, u32, ActionKind)> = None;
            for event in &obj.actions {
                if !event.overlaps(window.0, window.1) {
                    continue;
                }
                let overlap = event.end.min(window.1) - event.start.max(window.0);
                let key = (overlap, u32::MAX - event.start);
                if best.map(|(o, s, _)| (o, s) < key).unwrap_or(true) {
                    best = Some((key.0, key.1, event.kind));
                }
            }
            Ok(best
                .map(|(_, _, kind)| kind.gerund().to_string())
                .unwrap_or_else(|| ActionKind::NoAction.gerund().to_string()))
        }
        QuestionProgram::SpatialCount { class, side, window } => {
            let anchor = lookup(*class)?;
            let mid = (window.0 + window.1) / 2;
            let (ax, ay) = anchor.box_at(mid).center();
            let n = scene
                .objects
                .iter()
                .filter(|o| o.class_index != *class)
                .filter(|o| {
                    let (x, y) = o.box_at(mid).center();
                    match side {
                        Side::Left => x < ax,
                        Side::Right => x > ax,
                        Side::Front => y > ay,
                    }
                })
                .count();
            Ok(count_token(n))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{ActionEvent, Attributes, BBox, Keyframe, SceneObject, SceneSpec};

    fn object(class: u32, x: f64, y: f64, actions: Vec<ActionEvent>) -> SceneObject {
        SceneObject {
            class_index: class,
            attributes: Attributes {
                size: "small".into(),
                color: "red".into(),
                material: "metal".into(),
                shape: "cube".into(),
            },
            actions,
            trajectory_keyframes: vec![Keyframe {
                frame: 1,
                bbox: BBox {
                    x1: x,
                    y1: y,
                    x2: x + 0.1,
                    y2: y + 0.1,
                },
            }],
        }
    }

    fn scene() -> SceneSpec {
        SceneSpec {
            scene_id: "s".into(),
            num_frames: 100,
            interpolation: "linear".into(),
            objects: vec![
                object(
                    3,
                    0.1,
                    0.1,
                    vec![ActionEvent {
                        kind: ActionKind::Fly,
                        start: 10,
                        end: 40,
                    }],
                ),
                object(
                    7,
                    0.5,
                    0.5,
                    vec![ActionEvent {
                        kind: ActionKind::Rotate,
                        start: 20,
                        end: 60,
                    }],
                ),
                object(
                    9,
                    0.8,
                    0.2,
                    vec![ActionEvent {
                        kind: ActionKind::Fly,
                        start: 15,
                        end: 35,
                    }],
                ),
            ],
            rng_seed: 0,
        }
    }

    #[test]
    fn exists_true_by_construction() {
        let s = scene();
        let p = QuestionProgram::ExistsAction {
            class: 3,
            kind: ActionKind::Fly,
            window: (1, 50),
        };
        assert_eq!(execute_question(&s, &p).unwrap(), "TRUE");
    }

    #[test]
    fn count_over_empty_match_is_zero() {
        let s = scene();
        let p = QuestionProgram::CountAction {
            kind: ActionKind::Slide,
            window: (1, 100),
        };
        assert_eq!(execute_question(&s, &p).unwrap(), "0");
    }

    #[test]
    fn what_doing_single_event() {
        let s = scene();
        let p = QuestionProgram::WhatDoing {
            class: 7,
            window: (20, 60),
        };
        assert_eq!(execute_question(&s, &p).unwrap(), "rotating");
        let idle = QuestionProgram::WhatDoing {
            class: 7,
            window: (70, 100),
        };
        assert_eq!(execute_question(&s, &idle).unwrap(), "no_action");
    }

    #[test]
    fn spatial_count_uses_midpoint_centers() {
        let s = scene();
        let p = QuestionProgram::SpatialCount {
            class: 7,
            side: Side::Left,
            window: (1, 100),
        };
        // Object 3 sits at x ~ 0.15, object 9 at ~ 0.85, anchor at ~ 0.55.
        assert_eq!(execute_question(&s, &p).unwrap(), "1");
        let right = QuestionProgram::SpatialCount {
            class: 7,
            side: Side::Right,
            window: (1, 100),
        };
        assert_eq!(execute_question(&s, &right).unwrap(), "1");
    }

    #[test]
    fn malformed_programs_error() {
        let s = scene();
        let bad_class = QuestionProgram::WhatDoing {
            class: 42,
            window: (1, 50),
        };
        assert!(execute_question(&s, &bad_class).is_err());
        let bad_window = QuestionProgram::CountAction {
            kind: ActionKind::Fly,
            window: (50, 50),
        };
        assert!(execute_question(&s, &bad_window).is_err());
        let oversized = QuestionProgram::CountAction {
            kind: ActionKind::Fly,
            window: (1, 101),
        };
        assert!(execute_question(&s, &oversized).is_err());
    }

    #[test]
    fn counts_clamp_at_ten() {
        let mut s = scene();
        s.objects = (0..14)
            .map(|i| {
                object(
                    i,
                    0.1,
                    0.1,
                    vec![ActionEvent {
                        kind: ActionKind::Fly,
                        start: 1,
                        end: 99,
                    }],
                )
            })
            .collect();
        let p = QuestionProgram::CountAction {
            kind: ActionKind::Fly,
            window: (1, 100),
        };
        assert_eq!(execute_question(&s, &p).unwrap(), "10");
    }

    #[test]
    fn answer_vocabulary_is_closed() {
        assert_eq!(AnswerVocabulary::tokens().len(), AnswerVocabulary::len());
        assert!(AnswerVocabulary::contains("7"));
        assert!(AnswerVocabulary::contains("TRUE"));
        assert!(AnswerVocabulary::contains("no_action"));
        assert!(!AnswerVocabulary::contains("containing"));
        assert!(!AnswerVocabulary::contains("11"));
    }
}
