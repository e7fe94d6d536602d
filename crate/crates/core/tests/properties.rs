use std::convert::Infallible;

use proptest::prelude::*;

use scenequery_core::dsl::{parse, Arity, Predicate, PredicateCatalog, Query, RegionGraph, Variable};
use scenequery_core::exec::{evaluate, evaluate_naive, PredicateEvaluator};
use scenequery_core::scene::{AttributeRecord, FrameRecord, ObjectRecord, RelationshipRecord, SceneTables};
use scenequery_core::select::{
    disagreement_score, phase_for, run_selection, CandidateVotes, Labeler, Phase, SelectionConfig,
};
use scenequery_core::TupleView;

const UNARY: [&str; 4] = ["car", "person", "red", "large"];
const BINARY: [&str; 2] = ["near", "behind"];

struct Stored;

impl PredicateCatalog for Stored {
    fn arity_of(&self, name: &str) -> Option<Arity> {
        if UNARY.contains(&name) {
            Some(Arity::Unary)
        } else if BINARY.contains(&name) {
            Some(Arity::Binary)
        } else {
            None
        }
    }
}

impl PredicateEvaluator for Stored {
    type Error = Infallible;

    fn holds(&self, name: &str, t: &TupleView<'_>) -> Result<bool, Infallible> {
        Ok(match t.o1 {
            None => t.o0.oname == name || t.o0.anames.contains(name),
            Some(_) => t.o0_o1_rnames.contains(name),
        })
    }
}

/// Raw predicates over variables 0..3, renumbered by first appearance so the
/// variables are contiguous.
fn query() -> impl Strategy<Value = Query> {
    let pred = prop_oneof![
        (0..UNARY.len(), 0..3u32).prop_map(|(n, a)| (UNARY[n], vec![a])),
        (0..BINARY.len(), 0..3u32, 1..3u32).prop_map(|(n, a, d)| (BINARY[n], vec![a, (a + d) % 3])),
    ];
    let graph = (prop::collection::vec(pred, 1..4), 1..4u32);
    prop::collection::vec(graph, 1..4).prop_filter_map("invalid query", |raw| {
        let mut order: Vec<u32> = Vec::new();
        let mut graphs = Vec::new();
        for (preds, duration) in raw {
            let mut predicates: Vec<Predicate> = Vec::new();
            for (name, args) in preds {
                let args = args
                    .into_iter()
                    .map(|a| {
                        let i = order.iter().position(|&o| o == a).unwrap_or_else(|| {
                            order.push(a);
                            order.len() - 1
                        });
                        Variable(i as u32)
                    })
                    .collect();
                let p = Predicate { name: name.to_string(), args };
                if !predicates.contains(&p) {
                    predicates.push(p);
                }
            }
            graphs.push(RegionGraph { predicates, duration });
        }
        Query::new(graphs).ok()
    })
}

/// Up to two videos of up to four frames with up to three objects each.
fn tables() -> impl Strategy<Value = SceneTables> {
    let object = (0..2usize, prop::collection::vec(0..2usize, 0..2));
    let frame = (prop::collection::vec(object, 1..4), prop::collection::vec((0..3u32, 0..3u32, 0..2usize), 0..4));
    let video = prop::collection::vec(frame, 1..5);
    prop::collection::vec(video, 1..3).prop_map(|videos| {
        let mut t = SceneTables::new(100, 100);
        for (vid, frames) in videos.into_iter().enumerate() {
            let vid = vid as u32;
            for (fid, (objects, rels)) in frames.into_iter().enumerate() {
                let fid = fid as u32;
                t.insert_frame(FrameRecord { vid, fid, image_ref: None }).unwrap();
                let n = objects.len() as u32;
                for (oid, (class, attrs)) in objects.into_iter().enumerate() {
                    let oid = oid as u32;
                    let rec = ObjectRecord { vid, fid, oid, oname: UNARY[class].into(), x1: 0, y1: 0, x2: 10, y2: 10 };
                    t.insert_object(rec).unwrap();
                    for a in attrs {
                        t.insert_attribute(AttributeRecord { vid, fid, oid, aname: UNARY[2 + a].into() }).unwrap();
                    }
                }
                for (a, b, r) in rels {
                    if a < n && b < n && a != b {
                        // Duplicate rows are rejected; ignoring them keeps the table valid.
                        let _ = t.insert_relationship(RelationshipRecord {
                            vid,
                            fid,
                            oid1: a,
                            rname: BINARY[r].into(),
                            oid2: b,
                        });
                    }
                }
            }
        }
        t
    })
}

struct Random {
    votes: Vec<Vec<bool>>,
    truth: Vec<bool>,
}

impl CandidateVotes for Random {
    fn candidate_count(&self) -> usize {
        self.votes[0].len()
    }
    fn is_dummy(&self, c: usize) -> bool {
        c + 1 == self.candidate_count()
    }
    fn votes(&mut self, unit: usize) -> Vec<bool> {
        self.votes[unit].clone()
    }
}

impl Labeler for Random {
    fn label(&mut self, unit: usize, _: Phase) -> Option<bool> {
        Some(self.truth[unit])
    }
}

proptest! {
    #[test]
    fn printing_then_parsing_is_identity(q in query()) {
        prop_assert_eq!(parse(&q.to_string()).unwrap(), q);
    }

    #[test]
    fn fast_and_naive_evaluation_agree(q in query(), t in tables()) {
        prop_assert_eq!(evaluate(&q, &t, &Stored).unwrap(), evaluate_naive(&q, &t, &Stored).unwrap());
    }

    #[test]
    fn phase_follows_label_counts(p in 0..30usize, n in 0..30usize, m in 0..10usize) {
        let phase = phase_for(p, n, m);
        if p < n {
            prop_assert_eq!(phase, Phase::PositiveSeek);
        } else if n < m {
            prop_assert_eq!(phase, Phase::NegativeSeek);
        } else {
            prop_assert_eq!(phase, Phase::Disagreement);
        }
    }

    #[test]
    fn disagreement_ignores_weight_scale(
        votes in prop::collection::vec(any::<bool>(), 1..8),
        raw in prop::collection::vec(0.01..1.0f64, 8),
        scale in 0.1..100.0f64,
    ) {
        let w = &raw[..votes.len()];
        let scaled: Vec<f64> = w.iter().map(|x| x * scale).collect();
        let a = disagreement_score(&votes, w);
        prop_assert!((0.0..=0.25).contains(&a));
        prop_assert!((a - disagreement_score(&votes, &scaled)).abs() < 1e-12);
    }

    #[test]
    fn selection_is_deterministic(
        rows in prop::collection::vec((prop::collection::vec(any::<bool>(), 3), any::<bool>()), 1..60),
        seed in any::<u64>(),
        budget in 1..25usize,
    ) {
        let (mut votes, truth): (Vec<Vec<bool>>, Vec<bool>) = rows.into_iter().unzip();
        for v in &mut votes {
            v.push(true);
        }
        let cfg = SelectionConfig { budget, seed, samples_per_iteration: 10, ..Default::default() };
        let run = || {
            let mut v = Random { votes: votes.clone(), truth: truth.clone() };
            let mut l = Random { votes: votes.clone(), truth: truth.clone() };
            run_selection(truth.len(), &mut v, &mut l, None, &cfg)
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.labels_used, budget.min(truth.len()));
        prop_assert_eq!(a, b);
    }
}
