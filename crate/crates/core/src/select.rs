//! Budgeted active-learning selection among UDF candidates.
//!
//! Each iteration samples `samples_per_iteration` units from the unlabeled
//! pool and picks one of them for labeling:
//!
//! * fewer positives than negatives: the unit most likely to be positive;
//! * otherwise, fewer than `min_negatives` negatives: the unit most likely
//!   to be negative;
//! * otherwise the unit on which the weighted candidates disagree most.
//!
//! "Most likely" first asks an optional vision-language hint and takes the
//! lowest-id unit it agrees on; failing that, the extreme of the weighted
//! positive vote share. After every label each candidate's weight becomes
//! its F1 on the labeled set. The winner is the highest weight; ties prefer
//! non-dummy candidates, then the lowest index.
//!
//! Pool units are plain indices; callers keep them in unit-id order so
//! "lowest index" means "lowest unit id".

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::metrics::f1_from_counts;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Phase {
    PositiveSeek,
    NegativeSeek,
    Disagreement,
}

/// The phase rule, a pure function of the label counts.
pub fn phase_for(positives: usize, negatives: usize, min_negatives: usize) -> Phase {
    if positives < negatives {
        Phase::PositiveSeek
    } else if negatives < min_negatives {
        Phase::NegativeSeek
    } else {
        Phase::Disagreement
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SelectionConfig {
    /// Labels to spend.
    pub budget: usize,
    pub samples_per_iteration: usize,
    /// Negatives to collect before the disagreement phase.
    pub min_negatives: usize,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { budget: 20, samples_per_iteration: 100, min_negatives: 5, seed: 0 }
    }
}

/// Candidate predictions, one vote per candidate per unit.
pub trait CandidateVotes {
    fn candidate_count(&self) -> usize;
    fn is_dummy(&self, candidate: usize) -> bool;
    fn votes(&mut self, unit: usize) -> Vec<bool>;
}

/// Ground-truth source. `None` means the unit could not be labeled.
pub trait Labeler {
    fn label(&mut self, unit: usize, phase: Phase) -> Option<bool>;
}

/// Cheap automatic opinion consulted before falling back to candidate votes.
pub trait VlmHint {
    fn verdict(&mut self, unit: usize) -> Option<bool>;
}

/// Weighted share of candidates voting `true`. Falls back to equal weights
/// when all weights are zero.
pub fn positive_share(votes: &[bool], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        if votes.is_empty() {
            return 0.0;
        }
        return votes.iter().filter(|&&v| v).count() as f64 / votes.len() as f64;
    }
    votes.iter().zip(weights).filter(|(&v, _)| v).map(|(_, w)| w).sum::<f64>() / total
}

/// Weighted-vote variance `p(1 - p)`, in `[0, 0.25]`.
pub fn disagreement_score(votes: &[bool], weights: &[f64]) -> f64 {
    let p = positive_share(votes, weights);
    p * (1.0 - p)
}

/// Index into `units` (ascending ids) of the unit most likely to have label
/// `positive`.
pub fn likelihood_rank(
    units: &[usize],
    votes: &[Vec<bool>],
    weights: &[f64],
    vlm: Option<&mut (dyn VlmHint + '_)>,
    positive: bool,
) -> (usize, bool) {
    if let Some(vlm) = vlm {
        for (i, &u) in units.iter().enumerate() {
            if vlm.verdict(u) == Some(positive) {
                return (i, true);
            }
        }
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, v) in votes.iter().enumerate() {
        let p = positive_share(v, weights);
        let score = if positive { p } else { -p };
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    (best, false)
}

/// F1 of one candidate on the labeled units.
pub fn f1_score(labeled: &[(bool, Vec<bool>)], candidate: usize) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (label, votes) in labeled {
        match (votes[candidate], *label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    f1_from_counts(tp, fp, fn_)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IterationRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub unit: usize,
    /// `None` when the labeler could not label the unit.
    pub label: Option<bool>,
    /// The unit was picked on the vision-language hint.
    pub hinted: bool,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SelectionReport {
    pub chosen: usize,
    pub labels_used: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub final_weights: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
    pub warnings: Vec<String>,
}

/// Highest weight, then non-dummy, then lowest index.
pub fn choose(weights: &[f64], is_dummy: impl Fn(usize) -> bool) -> usize {
    let mut best = 0;
    for i in 1..weights.len() {
        let better = weights[i] > weights[best] || (weights[i] == weights[best] && is_dummy(best) && !is_dummy(i));
        if better {
            best = i;
        }
    }
    best
}

/// Incremental selection state, one label at a time.
pub struct Session {
    cfg: SelectionConfig,
    rng: ChaCha8Rng,
    unlabeled: Vec<usize>,
    labeled: Vec<(bool, Vec<bool>)>,
    weights: Vec<f64>,
    report: SelectionReport,
}

/// A unit picked for labeling, waiting for its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Pending {
    pub unit: usize,
    pub phase: Phase,
    pub hinted: bool,
    votes: Vec<bool>,
}

impl Session {
    pub fn new(pool_size: usize, candidates: usize, cfg: SelectionConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let weights = vec![1.0 / candidates.max(1) as f64; candidates];
        Self {
            cfg,
            rng,
            unlabeled: (0..pool_size).collect(),
            labeled: Vec::new(),
            weights: weights.clone(),
            report: SelectionReport {
                chosen: 0,
                labels_used: 0,
                positives: Vec::new(),
                negatives: Vec::new(),
                final_weights: weights,
                iterations: Vec::new(),
                warnings: Vec::new(),
            },
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn phase(&self) -> Phase {
        phase_for(self.report.positives.len(), self.report.negatives.len(), self.cfg.min_negatives)
    }

    pub fn is_finished(&self) -> bool {
        self.report.labels_used >= self.cfg.budget || self.unlabeled.is_empty()
    }

    pub fn report(&self) -> &SelectionReport {
        &self.report
    }

    /// Samples from the pool and picks the next unit to label.
    pub fn next(&mut self, votes: &mut dyn CandidateVotes, vlm: Option<&mut (dyn VlmHint + '_)>) -> Option<Pending> {
        if self.is_finished() {
            return None;
        }
        let k = self.cfg.samples_per_iteration.min(self.unlabeled.len());
        let mut sample: Vec<usize> =
            index::sample(&mut self.rng, self.unlabeled.len(), k).into_iter().map(|i| self.unlabeled[i]).collect();
        sample.sort_unstable();
        let sample_votes: Vec<Vec<bool>> = sample.iter().map(|&u| votes.votes(u)).collect();
        let phase = self.phase();
        let (pick, hinted) = match phase {
            Phase::PositiveSeek => likelihood_rank(&sample, &sample_votes, &self.weights, vlm, true),
            Phase::NegativeSeek => likelihood_rank(&sample, &sample_votes, &self.weights, vlm, false),
            Phase::Disagreement => {
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for (i, v) in sample_votes.iter().enumerate() {
                    let s = disagreement_score(v, &self.weights);
                    if s > best_score {
                        best = i;
                        best_score = s;
                    }
                }
                (best, false)
            }
        };
        Some(Pending { unit: sample[pick], phase, hinted, votes: sample_votes[pick].clone() })
    }

    /// Records the outcome for a pending unit. `None` skips it without
    /// spending budget; the unit leaves the pool either way.
    pub fn resolve(&mut self, pending: Pending, label: Option<bool>) {
        if let Ok(pos) = self.unlabeled.binary_search(&pending.unit) {
            self.unlabeled.remove(pos);
        }
        if let Some(label) = label {
            if label {
                self.report.positives.push(pending.unit);
            } else {
                self.report.negatives.push(pending.unit);
            }
            self.labeled.push((label, pending.votes));
            self.report.labels_used += 1;
            self.weights = (0..self.weights.len()).map(|c| f1_score(&self.labeled, c)).collect();
        }
        let iteration = self.report.iterations.len();
        self.report.iterations.push(IterationRecord {
            iteration,
            phase: pending.phase,
            unit: pending.unit,
            label,
            hinted: pending.hinted,
            weights: self.weights.clone(),
        });
    }

    /// Picks the winner and returns the final report.
    pub fn finish(mut self, is_dummy: impl Fn(usize) -> bool) -> SelectionReport {
        let n = self.weights.len();
        self.report.final_weights = self.weights.clone();
        if self.report.labels_used == 0 {
            self.report.chosen = (0..n).rev().find(|&c| is_dummy(c)).unwrap_or(0);
            self.report.warnings.push(String::from("no labels collected; falling back to the dummy candidate"));
        } else {
            self.report.chosen = choose(&self.weights, &is_dummy);
        }
        let skipped = self.report.iterations.iter().filter(|r| r.label.is_none()).count();
        if skipped > 0 {
            self.report.warnings.push(format!("{skipped} unit(s) skipped by the labeler"));
        }
        self.report
    }
}

/// Runs a whole selection with a synchronous labeler.
pub fn run_selection(
    pool_size: usize,
    votes: &mut dyn CandidateVotes,
    labeler: &mut dyn Labeler,
    mut vlm: Option<&mut (dyn VlmHint + '_)>,
    cfg: &SelectionConfig,
) -> SelectionReport {
    let mut session = Session::new(pool_size, votes.candidate_count(), cfg.clone());
    while let Some(p) = session.next(votes, vlm.as_deref_mut()) {
        let label = labeler.label(p.unit, p.phase);
        session.resolve(p, label);
    }
    session.finish(|c| votes.is_dummy(c))
}
