use std::collections::HashMap;

use rand::Rng;

use crate::dialogue::Dialogue;
use crate::error::{Error, Result};
use crate::rng;
use crate::scene::{AttributeUniverse, PerceivedVideo};
use crate::state::{DialogueState, Slot};

/// The constant state-prior predictor: the most frequent training triple
/// plus the most frequent training window, emitted for every test turn.
pub fn state_prior_predict(train: &[Dialogue]) -> Result<DialogueState> {
    if train.is_empty() {
        return Err(Error::config("state prior needs a non-empty training split"));
    }
    let mut triple_counts: HashMap<(u32, Slot, String), usize> = HashMap::new();
    let mut window_counts: HashMap<(u32, u32), usize> = HashMap::new();
    for dialogue in train {
        for turn in &dialogue.turns {
            for ((class, slot), value) in &turn.gold_state.triples {
                *triple_counts
                    .entry((*class, *slot, value.clone()))
                    .or_insert(0) += 1;
            }
            if let Some(window) = turn.gold_state.window {
                *window_counts.entry(window).or_insert(0) += 1;
            }
        }
    }

    let mut state = DialogueState::new();
    if let Some(((class, slot, value), _)) = triple_counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
    {
        state.insert(class, slot, value);
    }
    state.window = window_counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .map(|(w, _)| w);
    Ok(state)
}

/// Classes the perception module reported anywhere in the video, ascending.
pub fn detected_classes(perceived: &PerceivedVideo) -> Vec<u32> {
    let mut classes: Vec<u32> = perceived
        .frames
        .iter()
        .flat_map(|f| f.detections.iter().map(|d| d.class_index))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// One uniformly drawn detected class with one uniformly drawn (slot,
/// value) implied by its class; window spans the whole video.
pub fn object_random_predict(
    perceived: &PerceivedVideo,
    universe: &AttributeUniverse,
    num_frames: u32,
    seed: u64,
) -> DialogueState {
    let classes = detected_classes(perceived);
    let mut state = DialogueState::with_window(1, num_frames);
    if classes.is_empty() {
        return DialogueState::new();
    }
    let mut r = rng::stream(seed, "object-random", &[]);
    let class = classes[r.random_range(0..classes.len())];
    let slot = Slot::ALL[r.random_range(0..Slot::ALL.len())];
    let value = universe.classes[class as usize].get(slot).to_string();
    state.insert(class, slot, value);
    state
}

/// Every detected class with all four (slot, value) pairs implied by its
/// class; window spans the whole video.
pub fn object_all_predict(
    perceived: &PerceivedVideo,
    universe: &AttributeUniverse,
    num_frames: u32,
) -> DialogueState {
    let classes = detected_classes(perceived);
    if classes.is_empty() {
        return DialogueState::new();
    }
    let mut state = DialogueState::with_window(1, num_frames);
    for class in classes {
        for slot in Slot::ALL {
            let value = universe.classes[class as usize].get(slot).to_string();
            state.insert(class, slot, value);
        }
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::generate_dialogue;
    use crate::scene::{build_universe, generate_scene, perceive, PerceptionConfig};

    #[test]
    fn state_prior_matches_brute_force_recount() {
        let u = build_universe(60).unwrap();
        let dialogues: Vec<Dialogue> = (0..6)
            .map(|i| {
                let scene = generate_scene(&u, 60, 4, 300 + i).unwrap();
                generate_dialogue(&scene, &u, 400 + i).unwrap()
            })
            .collect();
        let prior = state_prior_predict(&dialogues).unwrap();

        // Independent recount.
        let mut best_triple: Option<((u32, Slot, String), usize)> = None;
        let mut counts: HashMap<(u32, Slot, String), usize> = HashMap::new();
        for d in &dialogues {
            for t in &d.turns {
                for ((c, s), v) in &t.gold_state.triples {
                    *counts.entry((*c, *s, v.clone())).or_insert(0) += 1;
                }
            }
        }
        for (key, count) in counts {
            let better = match &best_triple {
                None => true,
                Some((bk, bc)) => count > *bc || (count == *bc && key < *bk),
            };
            if better {
                best_triple = Some((key, count));
            }
        }
        let ((class, slot, value), _) = best_triple.unwrap();
        assert_eq!(prior.triples.len(), 1);
        assert_eq!(prior.triples[&(class, slot)], value);
    }

    #[test]
    fn prior_is_constant_and_dominant_triple_wins() {
        let u = build_universe(60).unwrap();
        // A synthetic split where one triple dominates by construction.
        let mut d1 = generate_dialogue(&generate_scene(&u, 60, 4, 1).unwrap(), &u, 1).unwrap();
        for turn in &mut d1.turns {
            turn.gold_state.triples.clear();
            turn.gold_state.insert(1, Slot::Color, "blue");
        }
        let prior = state_prior_predict(&[d1]).unwrap();
        assert_eq!(prior.triples[&(1, Slot::Color)], "blue");
    }

    #[test]
    fn object_all_includes_every_detected_class() {
        let u = build_universe(60).unwrap();
        let scene = generate_scene(&u, 60, 5, 9).unwrap();
        let perceived = perceive(&scene, &u, &PerceptionConfig::perfect(0), 10, 12);
        let state = object_all_predict(&perceived, &u, 60);
        assert_eq!(state.classes().len(), 5);
        for class in state.classes() {
            assert_eq!(state.object_slots(class).len(), 4);
            let truth = &scene.object_by_class(class).unwrap().attributes;
            for (slot, value) in state.object_slots(class) {
                assert_eq!(value, truth.get(slot));
            }
        }
        assert_eq!(state.window, Some((1, 60)));
    }

    #[test]
    fn object_random_emits_exactly_one_triple() {
        let u = build_universe(60).unwrap();
        let scene = generate_scene(&u, 60, 5, 9).unwrap();
        let perceived = perceive(&scene, &u, &PerceptionConfig::perfect(0), 10, 12);
        for seed in 0..10 {
            let state = object_random_predict(&perceived, &u, 60, seed);
            assert_eq!(state.triples.len(), 1);
        }
    }

    #[test]
    fn zero_detections_yield_empty_state() {
        let u = build_universe(60).unwrap();
        let scene = generate_scene(&u, 60, 5, 9).unwrap();
        let cfg = PerceptionConfig {
            detection_recall: 0.0,
            class_confusion_rate: 0.0,
            box_noise_sigma: 0.0,
            seed: 0,
        };
        let perceived = perceive(&scene, &u, &cfg, 10, 12);
        assert!(object_random_predict(&perceived, &u, 60, 1).is_empty());
        assert!(object_all_predict(&perceived, &u, 60).is_empty());
    }
}
