//! Query evaluation over scene tables.
//!
//! A video matches when there is one injective binding of query variables to
//! object ids and, for each region graph in order, a window of at least
//! `duration` consecutive frames on which every predicate of that graph holds.
//! Windows are strictly ordered (`end_j < start_{j+1}`) and need not touch.
//!
//! [`evaluate`] caches each predicate's per-frame truth vector per object
//! binding and places windows greedily (earliest possible end first, which is
//! optimal for ordered placement). [`evaluate_naive`] enumerates every
//! binding and every ordered window tuple and calls the evaluator directly;
//! it exists as a reference for testing.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::dsl::{validate, PredicateCatalog, Query, UnresolvedPredicate};
use crate::scene::{FrameIdx, ObjectId, SceneTables, TupleView, UnitId, VideoId};

/// Evaluates named predicates on tuple views.
pub trait PredicateEvaluator: PredicateCatalog {
    type Error;

    fn holds(&self, name: &str, tuple: &TupleView<'_>) -> Result<bool, Self::Error>;
}

/// Ceiling on binding x window-tuple combinations for [`evaluate_naive`].
pub const NAIVE_LIMIT: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExecError<E> {
    Unresolved(UnresolvedPredicate),
    Eval { unit: UnitId, predicate: String, source: E },
    TooLarge { combinations: u64, limit: u64 },
}

impl<E: fmt::Display> fmt::Display for ExecError<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecError::Unresolved(u) => write!(f, "{u}"),
            ExecError::Eval { unit, predicate, source } => {
                write!(f, "evaluating {predicate} on {unit} failed: {source}")
            }
            ExecError::TooLarge { combinations, limit } => {
                write!(f, "{combinations} binding/window combinations exceed the limit of {limit}")
            }
        }
    }
}

impl<E: fmt::Debug + fmt::Display> core::error::Error for ExecError<E> {}

/// Proof that a video matches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchWitness {
    pub vid: VideoId,
    /// `assignment[i]` is the object bound to variable `o{i}`.
    pub assignment: Vec<ObjectId>,
    /// Inclusive `(start, end)` frame window per region graph.
    pub windows: Vec<(FrameIdx, FrameIdx)>,
}

fn ensure_resolved<E>(query: &Query, catalog: &dyn PredicateCatalog) -> Result<(), ExecError<E>> {
    match validate(query, catalog).into_iter().next() {
        Some(u) => Err(ExecError::Unresolved(u)),
        None => Ok(()),
    }
}

fn unit_for(vid: VideoId, fid: FrameIdx, args: &[crate::dsl::Variable], assignment: &[ObjectId]) -> UnitId {
    let o0 = assignment[args[0].0 as usize];
    match args.get(1) {
        Some(v) => UnitId::pair(vid, fid, o0, assignment[v.0 as usize]),
        None => UnitId::object(vid, fid, o0),
    }
}

fn eval_unit<P: PredicateEvaluator>(
    tables: &SceneTables,
    eval: &P,
    name: &str,
    unit: UnitId,
) -> Result<bool, ExecError<P::Error>> {
    match tables.tuple(unit) {
        None => Ok(false),
        Some(view) => eval
            .holds(name, &view)
            .map_err(|source| ExecError::Eval { unit, predicate: String::from(name), source }),
    }
}

/// Calls `f` with every injective assignment of `k` objects, in
/// lexicographic order of object positions. Stops early when `f` returns
/// `Ok(true)`.
fn for_each_assignment<E>(
    objects: &[ObjectId],
    k: usize,
    f: &mut dyn FnMut(&[ObjectId]) -> Result<bool, E>,
) -> Result<bool, E> {
    fn rec<E>(
        objects: &[ObjectId],
        k: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<ObjectId>,
        f: &mut dyn FnMut(&[ObjectId]) -> Result<bool, E>,
    ) -> Result<bool, E> {
        if cur.len() == k {
            return f(cur);
        }
        for i in 0..objects.len() {
            if used[i] {
                continue;
            }
            used[i] = true;
            cur.push(objects[i]);
            let done = rec(objects, k, used, cur, f)?;
            cur.pop();
            used[i] = false;
            if done {
                return Ok(true);
            }
        }
        Ok(false)
    }
    if objects.len() < k {
        return Ok(false);
    }
    let mut used = vec![false; objects.len()];
    let mut cur = Vec::with_capacity(k);
    rec(objects, k, &mut used, &mut cur, f)
}

type MaskKey = (usize, ObjectId, Option<ObjectId>);

/// Looks for a witness in one video using cached truth vectors.
pub fn find_witness<P: PredicateEvaluator>(
    query: &Query,
    tables: &SceneTables,
    eval: &P,
    vid: VideoId,
) -> Result<Option<MatchWitness>, ExecError<P::Error>> {
    let frames = tables.frame_count(vid) as usize;
    let objects = tables.video_objects(vid);
    let k = query.variable_count();
    let total: usize = query.graphs.iter().map(|g| g.duration as usize).sum();
    if frames < total {
        return Ok(None);
    }

    // Distinct predicate names get a small index for mask keys.
    let mut names: Vec<&str> = Vec::new();
    for p in query.predicates() {
        if !names.contains(&p.name.as_str()) {
            names.push(p.name.as_str());
        }
    }
    let mut masks: BTreeMap<MaskKey, Vec<bool>> = BTreeMap::new();
    let mut witness = None;

    let mut try_assignment = |assignment: &[ObjectId]| -> Result<bool, ExecError<P::Error>> {
        let mut start = 0usize;
        let mut windows = Vec::with_capacity(query.graphs.len());
        for graph in &query.graphs {
            // Make sure every predicate mask for this binding exists.
            let mut keys = Vec::with_capacity(graph.predicates.len());
            for p in &graph.predicates {
                let idx = names.iter().position(|n| *n == p.name).expect("indexed above");
                let o0 = assignment[p.args[0].0 as usize];
                let o1 = p.args.get(1).map(|v| assignment[v.0 as usize]);
                let key = (idx, o0, o1);
                if !masks.contains_key(&key) {
                    let mut mask = Vec::with_capacity(frames);
                    for fid in 0..frames as FrameIdx {
                        let unit = unit_for(vid, fid, &p.args, assignment);
                        mask.push(eval_unit(tables, eval, &p.name, unit)?);
                    }
                    masks.insert(key, mask);
                }
                keys.push(key);
            }
            let need = graph.duration as usize;
            let mut run = 0usize;
            let mut found = None;
            for fid in start..frames {
                if keys.iter().all(|key| masks[key][fid]) {
                    run += 1;
                    if run == need {
                        found = Some(fid);
                        break;
                    }
                } else {
                    run = 0;
                }
            }
            match found {
                Some(end) => {
                    windows.push(((end + 1 - need) as FrameIdx, end as FrameIdx));
                    start = end + 1;
                }
                None => return Ok(false),
            }
        }
        witness = Some(MatchWitness { vid, assignment: assignment.to_vec(), windows });
        Ok(true)
    };
    for_each_assignment(&objects, k, &mut try_assignment)?;
    Ok(witness)
}

/// Returns the ids of all matching videos.
pub fn evaluate<P: PredicateEvaluator>(
    query: &Query,
    tables: &SceneTables,
    eval: &P,
) -> Result<BTreeSet<VideoId>, ExecError<P::Error>> {
    ensure_resolved(query, eval)?;
    let mut out = BTreeSet::new();
    for vid in tables.videos() {
        if find_witness(query, tables, eval, vid)?.is_some() {
            out.insert(vid);
        }
    }
    Ok(out)
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

fn permutations(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    (n - k + 1..=n).fold(1u64, |acc, x| acc.saturating_mul(x))
}

/// Number of (binding, ordered window tuple) combinations the reference
/// evaluator would visit over the whole store.
pub fn naive_combinations(query: &Query, tables: &SceneTables) -> u64 {
    let k = query.variable_count() as u64;
    let g = query.graphs.len() as u64;
    let total: u64 = query.graphs.iter().map(|gr| gr.duration as u64).sum();
    let mut sum = 0u64;
    for vid in tables.videos() {
        let frames = tables.frame_count(vid) as u64;
        if frames < total {
            continue;
        }
        // Placing g ordered blocks of fixed lengths into `frames` slots.
        let windows = binomial(frames - total + g, g);
        let perms = permutations(tables.video_objects(vid).len() as u64, k);
        sum = sum.saturating_add(perms.saturating_mul(windows));
    }
    sum
}

/// Reference evaluator: exhaustive over bindings and window tuples.
///
/// Refuses inputs with more than [`NAIVE_LIMIT`] combinations.
pub fn evaluate_naive<P: PredicateEvaluator>(
    query: &Query,
    tables: &SceneTables,
    eval: &P,
) -> Result<BTreeSet<VideoId>, ExecError<P::Error>> {
    ensure_resolved(query, eval)?;
    let combinations = naive_combinations(query, tables);
    if combinations > NAIVE_LIMIT {
        return Err(ExecError::TooLarge { combinations, limit: NAIVE_LIMIT });
    }
    let mut out = BTreeSet::new();
    for vid in tables.videos() {
        let frames = tables.frame_count(vid);
        let objects = tables.video_objects(vid);
        let k = query.variable_count();
        let mut check = |assignment: &[ObjectId]| -> Result<bool, ExecError<P::Error>> {
            let mut starts = vec![0 as FrameIdx; query.graphs.len()];
            windows_match(query, tables, eval, vid, frames, assignment, 0, 0, &mut starts)
        };
        if for_each_assignment(&objects, k, &mut check)? {
            out.insert(vid);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn windows_match<P: PredicateEvaluator>(
    query: &Query,
    tables: &SceneTables,
    eval: &P,
    vid: VideoId,
    frames: u32,
    assignment: &[ObjectId],
    graph: usize,
    earliest: FrameIdx,
    starts: &mut Vec<FrameIdx>,
) -> Result<bool, ExecError<P::Error>> {
    if graph == query.graphs.len() {
        for (g, &s) in query.graphs.iter().zip(starts.iter()) {
            for fid in s..s + g.duration {
                for p in &g.predicates {
                    let unit = unit_for(vid, fid, &p.args, assignment);
                    if !eval_unit(tables, eval, &p.name, unit)? {
                        return Ok(false);
                    }
                }
            }
        }
        return Ok(true);
    }
    let d = query.graphs[graph].duration;
    let mut s = earliest;
    while s + d <= frames {
        starts[graph] = s;
        if windows_match(query, tables, eval, vid, frames, assignment, graph + 1, s + d, starts)? {
            return Ok(true);
        }
        s += 1;
    }
    Ok(false)
}
