use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::program::{execute_question, AnswerVocabulary, QuestionProgram, Side};
use crate::error::{Error, Result};
use crate::rng;
use crate::scene::{ActionKind, AttributeUniverse, SceneObject, SceneSpec};
use crate::state::{DialogueState, Slot};

pub const TURNS_PER_DIALOGUE: usize = 10;

/// How the turn's temporal window was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    WholeVideo,
    UntilNow,
    EventAnchored,
    Carried,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub question: Vec<String>,
    pub answer: String,
    #[serde(rename = "state")]
    pub gold_state: DialogueState,
    pub window_kind: WindowKind,
    #[serde(skip)]
    pub program: Option<QuestionProgram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub scene_id: String,
    pub turns: Vec<Turn>,
}

/// Words the template library can emit, excluding attribute values, object
/// tokens, and digits (those come from the universe and the frame range).
pub fn question_lexicon() -> Vec<String> {
    let mut words: Vec<&str> = vec![
        "how", "many", "objects", "things", "are", "is", "there", "a", "the", "and", "do",
        "perform", "same", "set", "of", "activities", "what", "doing", "left", "right", "in",
        "front", "it", "thing", "throughout", "whole", "video", ",", "?", "up", "until", "now",
        "during", "'s", "about", "earlier", "mentioned", "first", "second", "third", "fourth",
    ];
    for kind in ActionKind::ALL {
        words.push(kind.gerund());
        words.push(kind.noun());
    }
    let mut out: Vec<String> = words.into_iter().map(|w| w.to_string()).collect();
    out.extend(AnswerVocabulary::tokens());
    out.sort();
    out.dedup();
    out
}

/// A rendered object reference: the phrase tokens and the attribute subset
/// it names (which becomes the turn's mention event).
struct Reference {
    class_index: u32,
    tokens: Vec<String>,
    named_attrs: Vec<(Slot, String)>,
}

struct GenState<'a> {
    scene: &'a SceneSpec,
    rng: ChaCha8Rng,
    cumulative: DialogueState,
    mentioned: Vec<u32>,
    prev_window: Option<(u32, u32)>,
    prev_program: Option<QuestionProgram>,
}

impl<'a> GenState<'a> {
    fn object(&self, class: u32) -> &'a SceneObject {
        self.scene.object_by_class(class).expect("class from scene")
    }

    /// All attribute subsets of size `size`, canonical order.
    fn subsets(size: usize) -> Vec<Vec<Slot>> {
        let mut out = Vec::new();
        let n = Slot::ALL.len();
        for mask in 1u32..(1 << n) {
            if mask.count_ones() as usize != size {
                continue;
            }
            let subset: Vec<Slot> = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| Slot::ALL[i])
                .collect();
            out.push(subset);
        }
        out
    }

    /// Minimal attribute subsets that pick `target` uniquely among
    /// `candidates`; the smallest size with any unique subset wins.
    fn minimal_subsets(candidates: &[&SceneObject], target: &SceneObject) -> Vec<Vec<Slot>> {
        for size in 1..=Slot::ALL.len() {
            let unique: Vec<Vec<Slot>> = Self::subsets(size)
                .into_iter()
                .filter(|subset| {
                    let matches = candidates
                        .iter()
                        .filter(|o| {
                            subset
                                .iter()
                                .all(|s| o.slot_value(*s) == target.slot_value(*s))
                        })
                        .count();
                    matches == 1
                })
                .collect();
            if !unique.is_empty() {
                return unique;
            }
        }
        Vec::new()
    }

    fn render_attrs(object: &SceneObject, subset: &[Slot]) -> (Vec<String>, Vec<(Slot, String)>) {
        let mut tokens = Vec::new();
        let mut named = Vec::new();
        for slot in Slot::ALL {
            if subset.contains(&slot) {
                tokens.push(object.slot_value(slot).to_string());
                named.push((slot, object.slot_value(slot).to_string()));
            }
        }
        // The shape word doubles as the head noun; otherwise "thing".
        if !subset.contains(&Slot::Shape) {
            tokens.push("thing".to_string());
        }
        (tokens, named)
    }

    /// A fresh reference: "the <attrs> <shape|thing>", unique in the scene.
    fn fresh_reference(&mut self, class: u32) -> Reference {
        let target = self.object(class);
        let all: Vec<&SceneObject> = self.scene.objects.iter().collect();
        let options = Self::minimal_subsets(&all, target);
        let subset = options[self.rng.random_range(0..options.len())].clone();
        let (attr_tokens, named) = Self::render_attrs(target, &subset);
        let mut tokens = vec!["the".to_string()];
        tokens.extend(attr_tokens);
        Reference {
            class_index: class,
            tokens,
            named_attrs: named,
        }
    }

    /// Re-reference: "the earlier mentioned <attrs> <shape|thing>", unique
    /// among the objects mentioned so far.
    fn re_reference(&mut self) -> Option<Reference> {
        if self.mentioned.is_empty() {
            return None;
        }
        let class = self.mentioned[self.rng.random_range(0..self.mentioned.len())];
        let target = self.object(class);
        let mentioned_objs: Vec<&SceneObject> =
            self.mentioned.iter().map(|c| self.object(*c)).collect();
        let options = Self::minimal_subsets(&mentioned_objs, target);
        if options.is_empty() {
            return None;
        }
        let subset = options[self.rng.random_range(0..options.len())].clone();
        let (attr_tokens, named) = Self::render_attrs(target, &subset);
        let mut tokens = vec!["the".into(), "earlier".into(), "mentioned".into()];
        tokens.extend(attr_tokens);
        Some(Reference {
            class_index: class,
            tokens,
            named_attrs: named,
        })
    }

    fn reference(&mut self, exclude: Option<u32>) -> Reference {
        let reuse = self.rng.random::<f64>() < 0.5;
        if reuse {
            if let Some(r) = self.re_reference() {
                if Some(r.class_index) != exclude {
                    return r;
                }
            }
        }
        let classes: Vec<u32> = self
            .scene
            .objects
            .iter()
            .map(|o| o.class_index)
            .filter(|c| Some(*c) != exclude)
            .collect();
        let class = classes[self.rng.random_range(0..classes.len())];
        self.fresh_reference(class)
    }

    fn record_mention(&mut self, reference: &Reference) {
        for (slot, value) in &reference.named_attrs {
            self.cumulative
                .insert(reference.class_index, *slot, value.clone());
        }
        if !self.mentioned.contains(&reference.class_index) {
            self.mentioned.push(reference.class_index);
        }
    }

    /// Window phrase tokens plus the window itself. Event-anchored windows
    /// introduce (and record) an anchor reference.
    fn sample_window(&mut self, turn: usize) -> (WindowKind, (u32, u32), Vec<String>) {
        let t = self.scene.num_frames;
        let roll: f64 = self.rng.random();
        if roll < 0.35 {
            (
                WindowKind::WholeVideo,
                (1, t),
                vec![
                    "throughout".into(),
                    "the".into(),
                    "whole".into(),
                    "video".into(),
                    ",".into(),
                ],
            )
        } else if roll < 0.6 {
            let end = ((turn as u32) * t / TURNS_PER_DIALOGUE as u32).max(2).min(t);
            (
                WindowKind::UntilNow,
                (1, end),
                vec!["up".into(), "until".into(), "now".into(), ",".into()],
            )
        } else {
            let anchor = self.reference(None);
            let obj = self.object(anchor.class_index);
            let event_ix = self.rng.random_range(0..obj.actions.len());
            let event = obj.actions[event_ix];
            let ordinal_among_kind = obj.actions[..=event_ix]
                .iter()
                .filter(|e| e.kind == event.kind)
                .count();
            let ordinal = ["first", "second", "third", "fourth"][ordinal_among_kind - 1];
            let mut tokens = vec!["during".to_string()];
            tokens.extend(anchor.tokens.clone());
            tokens.push("'s".into());
            tokens.push(ordinal.into());
            tokens.push(event.kind.noun().into());
            tokens.push(",".into());
            self.record_mention(&anchor);
            (WindowKind::EventAnchored, (event.start, event.end), tokens)
        }
    }

    fn random_kind(&mut self) -> ActionKind {
        ActionKind::ALL[self.rng.random_range(0..ActionKind::ALL.len())]
    }

    fn random_side(&mut self) -> Side {
        [Side::Left, Side::Right, Side::Front][self.rng.random_range(0..3)]
    }
}

/// Generates a 10-turn dialogue with gold states and exact answers.
pub fn generate_dialogue(
    scene: &SceneSpec,
    universe: &AttributeUniverse,
    seed: u64,
) -> Result<Dialogue> {
    let _ = universe; // referring expressions derive from scene attributes
    if scene.objects.len() < 2 {
        return Err(Error::generation(
            "dialogue generation needs a scene with at least 2 objects",
        ));
    }
    let mut gen = GenState {
        scene,
        rng: rng::stream(seed, "dialogue", &[scene.rng_seed]),
        cumulative: DialogueState::new(),
        mentioned: Vec::new(),
        prev_window: None,
        prev_program: None,
    };

    let mut turns = Vec::with_capacity(TURNS_PER_DIALOGUE);
    for turn_index in 1..=TURNS_PER_DIALOGUE {
        let turn = generate_turn(&mut gen, turn_index)?;
        turns.push(turn);
    }

    Ok(Dialogue {
        dialogue_id: format!("dlg_{seed:016x}"),
        scene_id: scene.scene_id.clone(),
        turns,
    })
}

fn generate_turn(gen: &mut GenState, turn_index: usize) -> Result<Turn> {
    // A carried turn reuses the previous program with a tweak; otherwise a
    // fresh template is sampled. A rejected draw (answer outside the closed
    // answer vocabulary) rolls back any mentions it recorded and resamples.
    for _attempt in 0..24 {
        let saved_cumulative = gen.cumulative.clone();
        let saved_mentioned = gen.mentioned.clone();
        let carried = turn_index > 1 && gen.prev_program.is_some() && gen.rng.random::<f64>() < 0.25;
        let candidate = if carried {
            carried_turn(gen)
        } else {
            fresh_turn(gen, turn_index)
        };
        let answer = candidate.as_ref().and_then(|(_, program, _)| {
            execute_question(gen.scene, program)
                .ok()
                .filter(|a| AnswerVocabulary::contains(a))
        });
        let (Some((question, program, window_kind)), Some(answer)) = (candidate, answer) else {
            gen.cumulative = saved_cumulative;
            gen.mentioned = saved_mentioned;
            continue;
        };
        let window = program.window();
        let mut gold = gen.cumulative.clone();
        gold.window = Some(window);
        gen.prev_window = Some(window);
        gen.prev_program = Some(program.clone());
        return Ok(Turn {
            question,
            answer,
            gold_state: gold,
            window_kind,
            program: Some(program),
        });
    }
    Err(Error::generation(format!(
        "could not draw a valid turn {turn_index}"
    )))
}

type TurnDraw = (Vec<String>, QuestionProgram, WindowKind);

fn carried_turn(gen: &mut GenState) -> Option<TurnDraw> {
    let prev = gen.prev_program.clone()?;
    let prev_window = gen.prev_window?;
    let t = gen.scene.num_frames;
    match prev {
        // "how about <side> of it ?" keeps the window, changes the side.
        QuestionProgram::SpatialCount { class, side, window } => {
            let new_side = match side {
                Side::Left => Side::Right,
                Side::Right => Side::Front,
                Side::Front => Side::Left,
            };
            let mut q: Vec<String> = vec!["how".into(), "about".into()];
            q.extend(new_side.phrase().iter().map(|w| w.to_string()));
            q.extend(["of".into(), "it".into(), "?".into()]);
            Some((
                q,
                QuestionProgram::SpatialCount {
                    class,
                    side: new_side,
                    window,
                },
                WindowKind::Carried,
            ))
        }
        // "what about up until now ?" keeps the start, extends the end.
        _ => {
            if prev_window.0 >= t {
                return None;
            }
            let q: Vec<String> = ["what", "about", "up", "until", "now", "?"]
                .iter()
                .map(|w| w.to_string())
                .collect();
            Some((
                q,
                prev.with_window((prev_window.0, t)),
                WindowKind::Carried,
            ))
        }
    }
}

fn fresh_turn(gen: &mut GenState, turn_index: usize) -> Option<TurnDraw> {
    let (window_kind, window, mut tokens) = gen.sample_window(turn_index);
    let template: f64 = gen.rng.random();
    let program = if template < 0.25 {
        let kind = gen.random_kind();
        tokens.extend(
            ["how", "many", "objects", "are"]
                .iter()
                .map(|w| w.to_string()),
        );
        tokens.push(kind.gerund().into());
        tokens.push("?".into());
        QuestionProgram::CountAction { kind, window }
    } else if template < 0.45 {
        let kind = gen.random_kind();
        let reference = gen.reference(None);
        tokens.extend(["is", "there", "a"].iter().map(|w| w.to_string()));
        tokens.push(kind.gerund().into());
        tokens.extend(reference.tokens.iter().skip(1).cloned()); // drop "the"
        tokens.push("?".into());
        gen.record_mention(&reference);
        QuestionProgram::ExistsAction {
            class: reference.class_index,
            kind,
            window,
        }
    } else if template < 0.6 {
        let first = gen.reference(None);
        gen.record_mention(&first);
        let second = gen.reference(Some(first.class_index));
        gen.record_mention(&second);
        tokens.push("do".into());
        tokens.extend(first.tokens.iter().cloned());
        tokens.push("and".into());
        tokens.extend(second.tokens.iter().cloned());
        tokens.extend(
            ["perform", "the", "same", "set", "of", "activities", "?"]
                .iter()
                .map(|w| w.to_string()),
        );
        QuestionProgram::SameActionSet {
            class_a: first.class_index,
            class_b: second.class_index,
            window,
        }
    } else if template < 0.8 {
        let reference = gen.reference(None);
        gen.record_mention(&reference);
        tokens.extend(["what", "is"].iter().map(|w| w.to_string()));
        tokens.extend(reference.tokens.iter().cloned());
        tokens.push("doing".into());
        tokens.push("?".into());
        QuestionProgram::WhatDoing {
            class: reference.class_index,
            window,
        }
    } else {
        let reference = gen.reference(None);
        gen.record_mention(&reference);
        let side = gen.random_side();
        tokens.extend(["how", "many", "things", "are"].iter().map(|w| w.to_string()));
        tokens.extend(side.phrase().iter().map(|w| w.to_string()));
        tokens.push("of".into());
        tokens.extend(reference.tokens.iter().cloned());
        tokens.push("?".into());
        QuestionProgram::SpatialCount {
            class: reference.class_index,
            side,
            window,
        }
    };
    Some((tokens, program, window_kind))
}
