//! Evaluation suite: joint accuracies with IoU gating on the temporal
//! window, micro-averaged component precision/recall/F1 at several
//! granularities, and per-turn-position breakdowns.

use std::collections::BTreeMap;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::parallel;
use crate::state::{DialogueState, Slot};

/// Thresholds and whether temporal slots participate at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub iou_thresholds: Vec<f64>,
    pub include_time: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            iou_thresholds: vec![0.5, 0.7],
            include_time: true,
        }
    }
}

/// One gold turn paired with the aligned prediction, if any.
#[derive(Debug, Clone)]
pub struct AlignedTurn {
    pub dialogue_id: String,
    pub turn: usize,
    pub gold: DialogueState,
    pub pred: Option<DialogueState>,
}

/// IoU of two closed frame intervals, treating `[s, e]` as a span of length
/// `e - s`. Degenerate intervals (start >= end) score 0.
pub fn interval_iou(a: (u32, u32), b: (u32, u32)) -> f64 {
    if a.0 >= a.1 || b.0 >= b.1 {
        return 0.0;
    }
    let inter_lo = a.0.max(b.0);
    let inter_hi = a.1.min(b.1);
    let inter = f64::from(inter_hi.saturating_sub(inter_lo));
    let len_a = f64::from(a.1 - a.0);
    let len_b = f64::from(b.1 - b.0);
    let union = len_a + len_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn window_iou(pred: Option<(u32, u32)>, gold: Option<(u32, u32)>) -> f64 {
    match (pred, gold) {
        (Some(p), Some(g)) => interval_iou(p, g),
        _ => 0.0,
    }
}

/// Micro-averaged true/false positive/negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrfCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Add for PrfCounts {
    type Output = PrfCounts;
    fn add(self, rhs: PrfCounts) -> PrfCounts {
        PrfCounts {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            fn_: self.fn_ + rhs.fn_,
        }
    }
}

impl PrfCounts {
    fn from_sets<T: Ord>(pred: &[T], gold: &[T]) -> PrfCounts {
        let tp = pred.iter().filter(|p| gold.binary_search(p).is_ok()).count() as u64;
        PrfCounts {
            tp,
            fp: pred.len() as u64 - tp,
            fn_: gold.len() as u64 - tp,
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn report(&self) -> Prf {
        Prf {
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy behind an IoU gate at threshold `p` (strict inequality).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouAccuracy {
    pub p: f64,
    pub accuracy: f64,
}

/// Associative per-turn tally; the pooled report is a fold of these.
#[derive(Debug, Clone, Default, PartialEq)]
struct Tally {
    turns: u64,
    missing: u64,
    joint_hits: u64,
    iou_hits: Vec<u64>,
    identity: PrfCounts,
    slot_triple: PrfCounts,
    complete_state: PrfCounts,
    per_slot: [PrfCounts; 4],
}

impl Tally {
    fn new(num_thresholds: usize) -> Tally {
        Tally {
            iou_hits: vec![0; num_thresholds],
            ..Tally::default()
        }
    }

    fn absorb(&mut self, other: &Tally) {
        self.turns += other.turns;
        self.missing += other.missing;
        self.joint_hits += other.joint_hits;
        for (a, b) in self.iou_hits.iter_mut().zip(&other.iou_hits) {
            *a += b;
        }
        self.identity = self.identity + other.identity;
        self.slot_triple = self.slot_triple + other.slot_triple;
        self.complete_state = self.complete_state + other.complete_state;
        for (a, b) in self.per_slot.iter_mut().zip(&other.per_slot) {
            *a = *a + *b;
        }
    }
}

fn tally_turn(aligned: &AlignedTurn, cfg: &MetricConfig) -> Tally {
    let mut t = Tally::new(cfg.iou_thresholds.len());
    t.turns = 1;

    let empty = DialogueState::new();
    let pred = match &aligned.pred {
        Some(p) => p,
        None => {
            t.missing = 1;
            &empty
        }
    };
    let gold = &aligned.gold;

    let triples_match = pred.triples == gold.triples;
    if triples_match {
        t.joint_hits = 1;
        if cfg.include_time {
            let iou = window_iou(pred.window, gold.window);
            for (hit, p) in t.iou_hits.iter_mut().zip(&cfg.iou_thresholds) {
                if iou > *p {
                    *hit = 1;
                }
            }
        }
    }

    t.identity = PrfCounts::from_sets(&pred.classes(), &gold.classes());

    let triple_vec = |s: &DialogueState| -> Vec<(u32, Slot, String)> {
        s.triples
            .iter()
            .map(|((c, slot), v)| (*c, *slot, v.clone()))
            .collect()
    };
    t.slot_triple = PrfCounts::from_sets(&triple_vec(pred), &triple_vec(gold));

    // Complete state: an object is a true positive only when its whole slot
    // assignment matches gold.
    let pred_classes = pred.classes();
    let gold_classes = gold.classes();
    let complete_tp = pred_classes
        .iter()
        .filter(|c| {
            gold_classes.binary_search(c).is_ok() && pred.object_slots(**c) == gold.object_slots(**c)
        })
        .count() as u64;
    t.complete_state = PrfCounts {
        tp: complete_tp,
        fp: pred_classes.len() as u64 - complete_tp,
        fn_: gold_classes.len() as u64 - complete_tp,
    };

    for (i, slot) in Slot::ALL.iter().enumerate() {
        let restrict = |s: &DialogueState| -> Vec<(u32, String)> {
            s.triples
                .iter()
                .filter(|((_, sl), _)| sl == slot)
                .map(|((c, _), v)| (*c, v.clone()))
                .collect()
        };
        t.per_slot[i] = PrfCounts::from_sets(&restrict(pred), &restrict(gold));
    }
    t
}

/// Metrics for one turn-position bucket (or the pooled average row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    /// 1-based turn position; `None` marks the pooled "Average" row.
    pub position: Option<usize>,
    pub num_turns: u64,
    pub joint_acc: f64,
    pub joint_acc_iou: Option<Vec<IouAccuracy>>,
    pub identity: Prf,
    pub slot_triple: Prf,
    pub complete_state: Prf,
}

/// Full evaluation report over a prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_turns: u64,
    pub missing_predictions: u64,
    pub joint_acc: f64,
    /// `None` when temporal slots are disabled (IoU columns are N/A).
    pub joint_acc_iou: Option<Vec<IouAccuracy>>,
    pub identity: Prf,
    pub slot_triple: Prf,
    pub complete_state: Prf,
    pub per_slot: BTreeMap<Slot, Prf>,
    pub per_turn: Vec<BreakdownRow>,
}

fn tally_to_row(t: &Tally, cfg: &MetricConfig, position: Option<usize>) -> BreakdownRow {
    BreakdownRow {
        position,
        num_turns: t.turns,
        joint_acc: ratio(t.joint_hits, t.turns),
        joint_acc_iou: cfg.include_time.then(|| {
            cfg.iou_thresholds
                .iter()
                .zip(&t.iou_hits)
                .map(|(p, hits)| IouAccuracy {
                    p: *p,
                    accuracy: ratio(*hits, t.turns),
                })
                .collect()
        }),
        identity: t.identity.report(),
        slot_triple: t.slot_triple.report(),
        complete_state: t.complete_state.report(),
    }
}

/// Pools every metric over the aligned turns, plus a per-turn-position
/// breakdown for positions 1..=10.
pub fn compute_report(aligned: &[AlignedTurn], cfg: &MetricConfig) -> MetricsReport {
    let tallies = parallel::map_slice(aligned, |turn| (turn.turn, tally_turn(turn, cfg)));

    let mut total = Tally::new(cfg.iou_thresholds.len());
    let mut buckets: BTreeMap<usize, Tally> = BTreeMap::new();
    for (position, t) in &tallies {
        total.absorb(t);
        buckets
            .entry(*position)
            .or_insert_with(|| Tally::new(cfg.iou_thresholds.len()))
            .absorb(t);
    }

    let mut per_turn: Vec<BreakdownRow> = buckets
        .iter()
        .map(|(pos, t)| tally_to_row(t, cfg, Some(*pos)))
        .collect();
    per_turn.push(tally_to_row(&total, cfg, None));

    let pooled = tally_to_row(&total, cfg, None);
    let mut per_slot = BTreeMap::new();
    for (i, slot) in Slot::ALL.iter().enumerate() {
        per_slot.insert(*slot, total.per_slot[i].report());
    }

    MetricsReport {
        num_turns: total.turns,
        missing_predictions: total.missing,
        joint_acc: pooled.joint_acc,
        joint_acc_iou: pooled.joint_acc_iou.clone(),
        identity: pooled.identity,
        slot_triple: pooled.slot_triple,
        complete_state: pooled.complete_state,
        per_slot,
        per_turn,
    }
}

impl MetricsReport {
    /// Accuracy behind the gate at threshold `p`, if reported.
    pub fn iou_at(&self, p: f64) -> Option<f64> {
        self.joint_acc_iou.as_ref().and_then(|gates| {
            gates
                .iter()
                .find(|g| (g.p - p).abs() < 1e-9)
                .map(|g| g.accuracy)
        })
    }
}

/// Renders a fixed-width comparison table, one row per labelled report.
pub fn render_table(rows: &[(String, &MetricsReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "Model", "IdentF1", "SlotF1", "StateF1", "JointAcc", "IoU@0.5", "IoU@0.7"
    ));
    out.push_str(&"-".repeat(88));
    out.push('\n');
    for (name, report) in rows {
        let iou05 = report
            .iou_at(0.5)
            .map_or("N/A".to_string(), |v| format!("{:.3}", v));
        let iou07 = report
            .iou_at(0.7)
            .map_or("N/A".to_string(), |v| format!("{:.3}", v));
        out.push_str(&format!(
            "{:<28} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9} {:>9}\n",
            name,
            report.identity.f1,
            report.slot_triple.f1,
            report.complete_state.f1,
            report.joint_acc,
            iou05,
            iou07
        ));
    }
    out
}
