//! The multimodal dialogue-state data model: canonical flattening of a
//! state to a token sequence, the error-tolerant inverse parser, the shared
//! token vocabulary, and the Markov prior-state context builder.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scene::AttributeUniverse;

/// Discrete slots tracked per object, in canonical flattening order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Size,
    Color,
    Material,
    Shape,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Size, Slot::Color, Slot::Material, Slot::Shape];

    pub fn token(self) -> &'static str {
        match self {
            Slot::Size => "size",
            Slot::Color => "color",
            Slot::Material => "material",
            Slot::Shape => "shape",
        }
    }

    pub fn from_token(token: &str) -> Option<Slot> {
        Slot::ALL.iter().copied().find(|s| s.token() == token)
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Special tokens with reserved ids 0..=6.
pub const SPECIALS: [&str; 7] = ["USR", "SYS", "PRIOR_STATE", "STATE", "END_STATE", "PAD", "UNK"];

pub const USR: &str = "USR";
pub const SYS: &str = "SYS";
pub const PRIOR_STATE: &str = "PRIOR_STATE";
pub const STATE: &str = "STATE";
pub const END_STATE: &str = "END_STATE";
pub const PAD: &str = "PAD";
pub const UNK: &str = "UNK";

pub const USR_ID: u32 = 0;
pub const SYS_ID: u32 = 1;
pub const PRIOR_STATE_ID: u32 = 2;
pub const STATE_ID: u32 = 3;
pub const END_STATE_ID: u32 = 4;
pub const PAD_ID: u32 = 5;
pub const UNK_ID: u32 = 6;

/// Per-turn multimodal dialogue state: an optional temporal window plus a
/// map from (object class, slot) to the established value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "StateWire", try_from = "StateWire")]
pub struct DialogueState {
    pub window: Option<(u32, u32)>,
    pub triples: BTreeMap<(u32, Slot), String>,
}

impl DialogueState {
    pub fn new() -> Self {
        DialogueState::default()
    }

    pub fn with_window(start: u32, end: u32) -> Self {
        DialogueState {
            window: Some((start, end)),
            triples: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, class_index: u32, slot: Slot, value: impl Into<String>) {
        self.triples.insert((class_index, slot), value.into());
    }

    /// Object classes mentioned by the triples, ascending.
    pub fn classes(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.triples.keys().map(|(c, _)| *c).collect();
        v.dedup();
        v
    }

    /// Slot assignment of one object, in canonical slot order.
    pub fn object_slots(&self, class_index: u32) -> Vec<(Slot, &str)> {
        Slot::ALL
            .iter()
            .filter_map(|s| {
                self.triples
                    .get(&(class_index, *s))
                    .map(|v| (*s, v.as_str()))
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_none() && self.triples.is_empty()
    }
}

/// Wire form used in JSONL files: `{start, end, triples: [[class, slot, value]]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateWire {
    pub start: Option<u32>,
    pub end: Option<u32>,
    pub triples: Vec<(u32, Slot, String)>,
}

impl From<DialogueState> for StateWire {
    fn from(s: DialogueState) -> StateWire {
        StateWire {
            start: s.window.map(|w| w.0),
            end: s.window.map(|w| w.1),
            triples: s
                .triples
                .into_iter()
                .map(|((c, slot), v)| (c, slot, v))
                .collect(),
        }
    }
}

impl TryFrom<StateWire> for DialogueState {
    type Error = String;

    fn try_from(w: StateWire) -> std::result::Result<DialogueState, String> {
        let window = match (w.start, w.end) {
            (Some(s), Some(e)) => Some((s, e)),
            (None, None) => None,
            _ => return Err("start and end must be present together".into()),
        };
        let mut triples = BTreeMap::new();
        for (c, slot, v) in w.triples {
            triples.insert((c, slot), v);
        }
        Ok(DialogueState { window, triples })
    }
}

/// How much raw dialogue accompanies the flattened prior state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindowConfig {
    pub use_prior_state: bool,
    pub max_turns: usize,
}

impl Default for ContextWindowConfig {
    fn default() -> Self {
        ContextWindowConfig {
            use_prior_state: true,
            max_turns: 1,
        }
    }
}

/// Canonical flattening: optional `start <frame> end <frame>`, then objects
/// ascending by class index, each as `OBJ<k>` followed by its present slots
/// in (size, color, material, shape) order as `slot value` pairs.
pub fn flatten_state(
    state: &DialogueState,
    include_time: bool,
    universe: &AttributeUniverse,
) -> Result<Vec<String>> {
    let mut out = Vec::new();
    if include_time {
        if let Some((start, end)) = state.window {
            out.push("start".to_string());
            out.push(start.to_string());
            out.push("end".to_string());
            out.push(end.to_string());
        }
    }
    for class in state.classes() {
        out.push(obj_token(class));
        for (slot, value) in state.object_slots(class) {
            if !universe.is_valid_value(slot, value) {
                return Err(Error::Serialization(format!(
                    "value {value:?} is not in the {slot} vocabulary"
                )));
            }
            out.push(slot.token().to_string());
            out.push(value.to_string());
        }
    }
    Ok(out)
}

pub fn obj_token(class_index: u32) -> String {
    format!("OBJ{class_index}")
}

pub fn frame_sep_token(order: usize) -> String {
    format!("FRAME{order}")
}

fn parse_obj_token(token: &str) -> Option<u32> {
    token.strip_prefix("OBJ").and_then(|rest| rest.parse().ok())
}

/// Error-tolerant inverse of [`flatten_state`]. Never fails: unknown or
/// ill-placed tokens are skipped, later (object, slot) pairs overwrite
/// earlier ones, and an invalid window is dropped. Recovery notes describe
/// what was discarded.
pub fn parse_state(
    tokens: &[String],
    include_time: bool,
    universe: &AttributeUniverse,
    max_frames: u32,
) -> (DialogueState, Vec<String>) {
    let mut state = DialogueState::new();
    let mut notes = Vec::new();
    let mut start: Option<u32> = None;
    let mut end: Option<u32> = None;
    let mut current_class: Option<u32> = None;
    let num_classes = universe.num_classes() as u32;

    let mut i = 0;
    while i < tokens.len() {
        let tok = tokens[i].as_str();
        if tok == "start" || tok == "end" {
            let value = tokens.get(i + 1).and_then(|t| t.parse::<u32>().ok());
            match value {
                Some(_) if !include_time => {
                    notes.push(format!("temporal slot {tok} ignored (time disabled)"));
                    i += 2;
                }
                Some(v) if (1..=max_frames).contains(&v) => {
                    if tok == "start" {
                        start = Some(v);
                    } else {
                        end = Some(v);
                    }
                    i += 2;
                }
                Some(v) => {
                    notes.push(format!("frame {v} out of range for slot {tok}"));
                    i += 2;
                }
                None => {
                    notes.push(format!("slot {tok} missing a frame value"));
                    i += 1;
                }
            }
            continue;
        }
        if let Some(class) = parse_obj_token(tok) {
            if class < num_classes {
                current_class = Some(class);
            } else {
                notes.push(format!("unknown object class token {tok}"));
                current_class = None;
            }
            i += 1;
            continue;
        }
        if let Some(slot) = Slot::from_token(tok) {
            let value = tokens.get(i + 1);
            match (current_class, value) {
                (Some(class), Some(v)) if universe.is_valid_value(slot, v) => {
                    state.insert(class, slot, v.clone());
                    i += 2;
                }
                (Some(_), Some(v)) => {
                    notes.push(format!("value {v:?} invalid for slot {slot}"));
                    i += 2;
                }
                (Some(_), None) => {
                    notes.push(format!("slot {slot} missing a value"));
                    i += 1;
                }
                (None, _) => {
                    notes.push(format!("slot {slot} appeared before any object token"));
                    i += 1;
                }
            }
            continue;
        }
        notes.push(format!("skipped token {tok:?}"));
        i += 1;
    }

    if include_time {
        match (start, end) {
            (Some(s), Some(e)) if s < e => state.window = Some((s, e)),
            (Some(s), Some(e)) => notes.push(format!("window [{s}, {e}] dropped: start >= end")),
            (None, None) => {}
            _ => notes.push("incomplete window dropped".to_string()),
        }
    }
    (state, notes)
}

/// Builds the dialogue-side model input for one turn.
///
/// Layout: `PRIOR_STATE` + flattened prior state (turns after the first,
/// when enabled), then the last `max_turns` completed `USR q SYS a` pairs,
/// then `USR` + the current question.
pub fn build_context(
    completed_turns: &[(Vec<String>, String)],
    current_question: &[String],
    prior_state: &DialogueState,
    turn_index: usize,
    cfg: &ContextWindowConfig,
    universe: &AttributeUniverse,
    include_time: bool,
) -> Result<Vec<String>> {
    assert!(turn_index >= 1, "turn_index is 1-based");
    assert_eq!(
        completed_turns.len(),
        turn_index - 1,
        "completed turns must cover exactly the turns before turn_index"
    );
    let mut out = Vec::new();
    if cfg.use_prior_state && turn_index > 1 {
        out.push(PRIOR_STATE.to_string());
        out.extend(flatten_state(prior_state, include_time, universe)?);
    }
    let keep = cfg.max_turns.min(completed_turns.len());
    for (question, answer) in &completed_turns[completed_turns.len() - keep..] {
        out.push(USR.to_string());
        out.extend(question.iter().cloned());
        out.push(SYS.to_string());
        out.push(answer.clone());
    }
    out.push(USR.to_string());
    out.extend(current_question.iter().cloned());
    Ok(out)
}

/// Bijective token <-> id map shared by video identity tokens, dialogue
/// words, and state tokens. Specials occupy ids 0..=6.
#[derive(Debug, Clone)]
pub struct StateVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl StateVocabulary {
    /// Assembles the vocabulary for a dataset: specials, state grammar
    /// tokens, integer frame tokens up to `max_frames`, object and frame
    /// separator tokens, then the sorted word list.
    pub fn build(universe: &AttributeUniverse, max_frames: u32, words: &[String]) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for slot in Slot::ALL {
            tokens.push(slot.token().to_string());
        }
        tokens.push("start".to_string());
        tokens.push("end".to_string());
        for values in [
            &universe.sizes,
            &universe.colors,
            &universe.materials,
            &universe.shapes,
        ] {
            tokens.extend(values.iter().cloned());
        }
        // Integer tokens serve both frame indices and count answers (0..=10).
        for n in 0..=max_frames.max(10) {
            tokens.push(n.to_string());
        }
        for class in 0..universe.num_classes() {
            tokens.push(obj_token(class as u32));
        }
        for m in 1..=max_frames as usize {
            tokens.push(frame_sep_token(m));
        }
        let mut extra: Vec<String> = words.to_vec();
        extra.sort();
        extra.dedup();
        tokens.extend(extra);

        let mut seen = HashMap::new();
        let mut unique = Vec::new();
        for tok in tokens {
            if !seen.contains_key(&tok) {
                seen.insert(tok.clone(), unique.len() as u32);
                unique.push(tok);
            }
        }
        StateVocabulary {
            tokens: unique,
            index: seen,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn try_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|id| self.token(*id).to_string()).collect()
    }

    /// Plain-text form: one token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < SPECIALS.len() {
            return Err(Error::Serialization("vocabulary too short".into()));
        }
        for (i, special) in SPECIALS.iter().enumerate() {
            if tokens[i] != *special {
                return Err(Error::Serialization(format!(
                    "special token {special} missing at id {i}"
                )));
            }
        }
        let mut index = HashMap::new();
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Serialization(format!("duplicate token {tok:?}")));
            }
        }
        Ok(StateVocabulary { tokens, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Hash of the serialized vocabulary, stored in checkpoints.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::build_universe;
    use proptest::prelude::*;

    fn universe() -> AttributeUniverse {
        build_universe(270).unwrap()
    }

    fn to_tokens(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn flatten_matches_worked_examples() {
        let u = universe();
        let mut s = DialogueState::new();
        s.insert(4, Slot::Shape, "cube");
        s.insert(24, Slot::Size, "small");
        s.insert(24, Slot::Color, "red");
        assert_eq!(
            flatten_state(&s, false, &u).unwrap().join(" "),
            "OBJ4 shape cube OBJ24 size small color red"
        );

        let mut t = DialogueState::with_window(102, 138);
        t.insert(21, Slot::Shape, "cube");
        t.insert(165, Slot::Color, "brown");
        assert_eq!(
            flatten_state(&t, true, &u).unwrap().join(" "),
            "start 102 end 138 OBJ21 shape cube OBJ165 color brown"
        );
    }

    #[test]
    fn empty_state_flattens_to_nothing() {
        let u = universe();
        assert!(flatten_state(&DialogueState::new(), false, &u)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn invalid_value_is_a_serialization_error() {
        let u = universe();
        let mut s = DialogueState::new();
        s.insert(4, Slot::Shape, "pyramid");
        assert!(flatten_state(&s, false, &u).is_err());
    }

    #[test]
    fn parse_applies_overwrite_rule() {
        let u = universe();
        let (s, _) = parse_state(&to_tokens("OBJ4 shape cube shape sphere"), false, &u, 300);
        assert_eq!(s.triples.len(), 1);
        assert_eq!(s.triples[&(4, Slot::Shape)], "sphere");
    }

    #[test]
    fn parse_drops_inverted_window() {
        let u = universe();
        let (s, notes) = parse_state(
            &to_tokens("start 200 end 100 OBJ4 shape cube"),
            true,
            &u,
            300,
        );
        assert_eq!(s.window, None);
        assert_eq!(s.triples[&(4, Slot::Shape)], "cube");
        assert!(notes.iter().any(|n| n.contains("dropped")));
    }

    #[test]
    fn parse_survives_garbage() {
        let u = universe();
        let (s, _) = parse_state(
            &to_tokens("STATE blue OBJ999 color shape OBJ4 color red start banana"),
            true,
            &u,
            300,
        );
        assert_eq!(s.triples.len(), 1);
        assert_eq!(s.triples[&(4, Slot::Color)], "red");
    }

    #[test]
    fn context_layout_matches_contract() {
        let u = universe();
        let mut prior = DialogueState::with_window(1, 30);
        prior.insert(4, Slot::Color, "red");
        let completed = vec![
            (to_tokens("how many things fly ?"), "2".to_string()),
            (to_tokens("what about now ?"), "3".to_string()),
        ];
        let cfg = ContextWindowConfig {
            use_prior_state: true,
            max_turns: 1,
        };
        let ctx = build_context(
            &completed,
            &to_tokens("is it rotating ?"),
            &prior,
            3,
            &cfg,
            &u,
            true,
        )
        .unwrap();
        assert_eq!(
            ctx.join(" "),
            "PRIOR_STATE start 1 end 30 OBJ4 color red USR what about now ? SYS 3 USR is it rotating ?"
        );
    }

    #[test]
    fn turn_one_context_is_question_only() {
        let u = universe();
        let cfg = ContextWindowConfig {
            use_prior_state: true,
            max_turns: 0,
        };
        let ctx = build_context(
            &[],
            &to_tokens("how many cubes ?"),
            &DialogueState::new(),
            1,
            &cfg,
            &u,
            true,
        )
        .unwrap();
        assert_eq!(ctx.join(" "), "USR how many cubes ?");
    }

    #[test]
    fn no_prior_full_history_variant() {
        let u = universe();
        let completed = vec![(to_tokens("q one ?"), "1".to_string())];
        let cfg = ContextWindowConfig {
            use_prior_state: false,
            max_turns: 10,
        };
        let ctx = build_context(
            &completed,
            &to_tokens("q two ?"),
            &DialogueState::new(),
            2,
            &cfg,
            &u,
            true,
        )
        .unwrap();
        assert_eq!(ctx.join(" "), "USR q one ? SYS 1 USR q two ?");
    }

    #[test]
    fn vocabulary_bijection_and_specials() {
        let u = universe();
        let vocab = StateVocabulary::build(&u, 300, &["how".into(), "many".into()]);
        for (i, special) in SPECIALS.iter().enumerate() {
            assert_eq!(vocab.id(special), i as u32);
        }
        for id in 0..vocab.len() as u32 {
            assert_eq!(vocab.id(vocab.token(id)), id);
        }
        assert_eq!(vocab.id("nonexistent-token"), UNK_ID);
    }

    #[test]
    fn vocabulary_roundtrips_through_text() {
        let u = universe();
        let vocab = StateVocabulary::build(&u, 50, &["alpha".into()]);
        let text = vocab.to_text();
        let reloaded = StateVocabulary::from_text(&text).unwrap();
        assert_eq!(vocab.to_text(), reloaded.to_text());
        assert_eq!(vocab.content_hash(), reloaded.content_hash());
    }

    fn arb_state(universe: &AttributeUniverse) -> impl Strategy<Value = DialogueState> + '_ {
        let class_count = universe.num_classes() as u32;
        (
            proptest::option::of((1u32..=299, 1u32..=299)),
            proptest::collection::vec((0..class_count, 0usize..4, 0usize..16), 0..12),
        )
            .prop_map(move |(win, raw)| {
                let mut s = DialogueState::new();
                if let Some((a, b)) = win {
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    s.window = Some((lo, (hi + 1).min(300).max(lo + 1)));
                }
                for (class, slot_ix, value_ix) in raw {
                    let slot = Slot::ALL[slot_ix];
                    let values = universe.slot_values(slot);
                    let value = values[value_ix % values.len()].clone();
                    s.insert(class, slot, value);
                }
                s
            })
    }

    proptest! {
        #[test]
        fn flatten_parse_roundtrip(seed_state in arb_state(&build_universe(270).unwrap())) {
            let u = universe();
            for include_time in [true, false] {
                let mut expected = seed_state.clone();
                if !include_time {
                    expected.window = None;
                }
                let tokens = flatten_state(&expected, include_time, &u).unwrap();
                let (parsed, notes) = parse_state(&tokens, include_time, &u, 300);
                prop_assert!(notes.is_empty(), "roundtrip produced notes: {notes:?}");
                prop_assert_eq!(parsed, expected);
            }
        }

        #[test]
        fn parser_is_total_on_fuzzed_tokens(ids in proptest::collection::vec(0u32..900, 0..40)) {
            let u = universe();
            let vocab = StateVocabulary::build(&u, 300, &["how".into(), "many".into(), "?".into()]);
            let tokens: Vec<String> = ids
                .into_iter()
                .map(|id| vocab.token(id % vocab.len() as u32).to_string())
                .collect();
            let (state, _) = parse_state(&tokens, true, &u, 300);
            if let Some((s, e)) = state.window {
                prop_assert!(1 <= s && s < e && e <= 300);
            }
            for ((class, slot), value) in &state.triples {
                prop_assert!(*class < 270);
                prop_assert!(u.is_valid_value(*slot, value));
            }
        }
    }
}
