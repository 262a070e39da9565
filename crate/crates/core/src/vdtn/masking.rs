use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::features::{RowKind, VisualInputs};
use crate::rng;

/// Rows and segments chosen for denoising. Adjacency rules: an object row
/// masked at frame m blocks the same row at frames m-1 and m+1; a masked
/// segment blocks its neighbours. Frame-separator and pad rows never mask.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskPlan {
    /// (segment index, row-in-frame) pairs whose boxes are zeroed.
    pub object_rows: BTreeSet<(usize, usize)>,
    /// Segment indices whose stacked feature rows are zeroed.
    pub segments: BTreeSet<usize>,
    /// For each masked segment, the one stacked row (0..=n_obj) that
    /// contributes to the reconstruction loss.
    pub segment_pick: BTreeMap<usize, usize>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.object_rows.is_empty() && self.segments.is_empty()
    }
}

/// Samples a plan by greedy left-to-right rejection: a candidate is masked
/// with its probability only when the same row (or the neighbouring
/// segment) was not masked in the previous frame.
pub fn make_mask_plan(visual: &VisualInputs, p_obj: f64, p_seg: f64, seed: u64) -> MaskPlan {
    let mut plan = MaskPlan::default();
    let mut rng = rng::stream(seed, "mask-plan", &[]);

    if p_obj > 0.0 {
        for m in 0..visual.n_segments {
            for j in 1..=visual.n_obj {
                let row = &visual.rows[visual.row_index(m, j)];
                if !matches!(row.kind, RowKind::Object { .. }) {
                    continue;
                }
                if m > 0 && plan.object_rows.contains(&(m - 1, j)) {
                    continue;
                }
                if rng.random::<f64>() < p_obj {
                    plan.object_rows.insert((m, j));
                }
            }
        }
    }

    if p_seg > 0.0 {
        for m in 0..visual.n_segments {
            if m > 0 && plan.segments.contains(&(m - 1)) {
                continue;
            }
            if rng.random::<f64>() < p_seg {
                plan.segments.insert(m);
                let pick = rng.random_range(0..=visual.n_obj);
                plan.segment_pick.insert(m, pick);
            }
        }
    }
    plan
}

/// Copies the inputs with masked object rows' boxes and masked segments'
/// feature rows zeroed. The caller keeps the original as the target.
pub fn apply_plan(visual: &VisualInputs, plan: &MaskPlan) -> VisualInputs {
    let mut masked = visual.clone();
    for (m, j) in &plan.object_rows {
        let idx = visual.row_index(*m, *j);
        masked.x_bb.row_mut(idx).fill(0.0);
    }
    for m in &plan.segments {
        for j in 0..=visual.n_obj {
            masked.x_cnn.row_mut(visual.row_index(*m, j)).fill(0.0);
        }
    }
    masked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::build_visual_inputs;
    use crate::scene::{
        build_universe, generate_scene, perceive, segment_features, PerceptionConfig,
    };
    use crate::state::StateVocabulary;

    fn fixture() -> VisualInputs {
        let u = build_universe(270).unwrap();
        let scene = generate_scene(&u, 300, 8, 7).unwrap();
        let perceived = perceive(&scene, &u, &PerceptionConfig::perfect(0), 10, 12);
        let feats = segment_features(&scene, 12, 16, 0).unwrap();
        let vocab = StateVocabulary::build(&u, 300, &[]);
        build_visual_inputs(&perceived, &feats, &vocab).unwrap()
    }

    fn check_plan(visual: &VisualInputs, plan: &MaskPlan) {
        for (m, j) in &plan.object_rows {
            assert!(!plan.object_rows.contains(&(m + 1, *j)), "adjacent frames mask row {j}");
            let kind = visual.rows[visual.row_index(*m, *j)].kind;
            assert!(matches!(kind, RowKind::Object { .. }), "masked a non-object row");
        }
        for m in &plan.segments {
            assert!(!plan.segments.contains(&(m + 1)), "adjacent segments masked");
            assert!(plan.segment_pick[m] <= visual.n_obj);
        }
    }

    #[test]
    fn zero_probability_gives_empty_plan() {
        let visual = fixture();
        let plan = make_mask_plan(&visual, 0.0, 0.0, 3);
        assert!(plan.is_empty());
    }

    #[test]
    fn full_probability_gives_alternating_pattern() {
        let visual = fixture();
        for seed in 0..1000 {
            let plan = make_mask_plan(&visual, 1.0, 1.0, seed);
            check_plan(&visual, &plan);
            // p = 1 masks every second segment exactly.
            for m in 0..visual.n_segments {
                assert_eq!(plan.segments.contains(&m), m % 2 == 0);
            }
        }
    }

    #[test]
    fn sampled_plans_respect_adjacency() {
        let visual = fixture();
        for seed in 0..2000 {
            let plan = make_mask_plan(&visual, 0.15, 0.15, seed);
            check_plan(&visual, &plan);
        }
    }

    #[test]
    fn plans_are_deterministic() {
        let visual = fixture();
        assert_eq!(
            make_mask_plan(&visual, 0.3, 0.3, 11),
            make_mask_plan(&visual, 0.3, 0.3, 11)
        );
    }

    #[test]
    fn apply_plan_zeroes_only_planned_rows() {
        let visual = fixture();
        let plan = make_mask_plan(&visual, 0.3, 0.3, 11);
        assert!(!plan.is_empty());
        let masked = apply_plan(&visual, &plan);
        for (m, j) in &plan.object_rows {
            let idx = visual.row_index(*m, *j);
            assert!(masked.x_bb.row(idx).iter().all(|v| *v == 0.0));
        }
        for m in 0..visual.n_segments {
            let idx = visual.row_index(m, 0);
            let zeroed = masked.x_cnn.row(idx).iter().all(|v| *v == 0.0);
            assert_eq!(zeroed, plan.segments.contains(&m));
        }
        // Identity tokens are untouched by masking.
        assert_eq!(masked.x_obj, visual.x_obj);
    }
}
