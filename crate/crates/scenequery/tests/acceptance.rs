//! Acceptance suite: one PASS/FAIL line per criterion, then a determinism
//! check that reruns every criterion and compares the structured reports.
//!
//! Run with `cargo test -p scenequery --test acceptance -- --nocapture`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use scenequery::features::{build_features, fnv1a};
use scenequery::modelgen::{train_classifier, DistillConfig};
use scenequery::materialize::{default_description, materialize_udf, register_stored_concepts};
use scenequery::orchestrator::{OracleLabeler, PipelineConfig};
use scenequery::registry::{make_dummy, ParameterSpec, Registry, UdfCandidate, UdfEnv, UdfKind, UdfSignature};
use scenequery::testkit::{
    concept_truth, generate, generate_exact, random_query, rule_definitions, GroundTruth, NoisyHint, Planted,
    PlantedPool, Synthetic, SyntheticSpec, TruthLabeler,
};
use scenequery_core::dsl::{parse, Arity, PredicateCatalog, Query, RegionGraph};
use scenequery_core::exec::{evaluate, evaluate_naive, naive_combinations, NAIVE_LIMIT};
use scenequery_core::metrics::{set_f1, Confusion};
use scenequery_core::mlp::{class_weights, Mlp};
use scenequery_core::select::{run_selection, SelectionConfig};
use scenequery_core::{PredicateEvaluator, TupleView};

const ROUND_TRIP_QUERIES: usize = 1000;
const ROUND_TRIP_LIMIT: Duration = Duration::from_secs(5);
const EXECUTOR_QUERIES: usize = 30;
const EXECUTOR_LIMIT: Duration = Duration::from_secs(60);
const MATERIALIZE_LIMIT: Duration = Duration::from_secs(30);
const DUMMY_QUERIES: usize = 10;
const GRADIENT_TOLERANCE: f64 = 1e-4;
const GRADIENT_STEP: f64 = 1e-5;
const GRADIENT_LIMIT: Duration = Duration::from_secs(10);
const LEARNABILITY_F1: f64 = 0.95;
const LEARNABILITY_SEEDS: u64 = 10;
const LEARNABILITY_TRAIN: usize = 200;
const LEARNABILITY_LIMIT: Duration = Duration::from_secs(60);
const SELECTION_SEEDS: u64 = 50;
const SELECTION_BUDGET: usize = 20;
const SELECTION_OF_BEST: f64 = 0.8;
const SELECTION_SHARE: f64 = 0.8;
const SELECTION_LIMIT: Duration = Duration::from_secs(120);
const FALLBACK_SHARE: f64 = 0.6;
const FALLBACK_POOL: usize = 2000;
const FALLBACK_POSITIVE_RATE: f64 = 0.05;
const FALLBACK_HINT_NOISE: f64 = 0.1;
const E2E_WITH_GENERATION: f64 = 0.9;
const E2E_WITHOUT_GENERATION: f64 = 0.6;
const E2E_VLM_NOISE: f64 = 0.05;
const E2E_LIMIT: Duration = Duration::from_secs(300);

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
    report: Value,
}

fn outcome(name: &'static str, passed: bool, detail: String, report: Value) -> Outcome {
    Outcome { name, passed, detail, report }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            o.passed = false;
            o.detail = format!("{}; took {:.1?} over the {:?} limit", o.detail, elapsed, limit);
        }
    }
    (o, elapsed)
}

fn seed42() -> Synthetic {
    generate_exact(&SyntheticSpec::default(), 42)
}

fn concept_names() -> Vec<(String, Arity)> {
    rule_definitions().into_iter().map(|(n, (a, _))| (n, a)).collect()
}

fn dsl_round_trip() -> Outcome {
    let names: [(&str, Arity); 8] = [
        ("car", Arity::Unary),
        ("truck", Arity::Unary),
        ("red", Arity::Unary),
        ("x_1", Arity::Unary),
        ("Person", Arity::Unary),
        ("near", Arity::Binary),
        ("left_of", Arity::Binary),
        ("far", Arity::Binary),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut failures = Vec::new();
    let mut digest = 0u64;
    for i in 0..ROUND_TRIP_QUERIES {
        let q = random_query(&mut rng, &names, 4, 4, 500);
        let text = q.to_string();
        digest ^= fnv1a(text.as_bytes()).rotate_left((i % 64) as u32);
        match parse(&text) {
            Ok(back) if back == q => {}
            Ok(back) => failures.push(format!("{text} reparsed as {back}")),
            Err(e) => failures.push(format!("{text}: {e}")),
        }
    }
    outcome(
        "dsl_round_trip",
        failures.is_empty(),
        format!("{}/{} queries round-trip", ROUND_TRIP_QUERIES - failures.len(), ROUND_TRIP_QUERIES),
        json!({ "failures": failures, "digest": digest }),
    )
}

fn executor_equivalence() -> Outcome {
    let s = seed42();
    let names = concept_names();
    let names: Vec<(&str, Arity)> = names.iter().map(|(n, a)| (n.as_str(), *a)).collect();
    let truth = GroundTruth { latents: &s.latents };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = Vec::new();
    let mut sizes = Vec::new();
    let mut redrawn = 0;
    for _ in 0..EXECUTOR_QUERIES {
        // Redraw queries the exhaustive reference would refuse.
        let q = loop {
            let q = random_query(&mut rng, &names, 3, 3, 12);
            if naive_combinations(&q, &s.tables) <= NAIVE_LIMIT {
                break q;
            }
            redrawn += 1;
        };
        let fast = evaluate(&q, &s.tables, &truth).expect("ground truth covers every concept");
        let slow = evaluate_naive(&q, &s.tables, &truth).expect("ground truth covers every concept");
        sizes.push(fast.len());
        if fast != slow {
            mismatches.push(json!({ "query": q.to_string(), "fast": fast, "naive": slow }));
        }
    }
    let non_empty = sizes.iter().filter(|&&n| n > 0).count();
    outcome(
        "executor_equivalence",
        mismatches.is_empty(),
        format!("{}/{} queries agree ({non_empty} with matches, {redrawn} oversized draws skipped)", EXECUTOR_QUERIES - mismatches.len(), EXECUTOR_QUERIES),
        json!({ "mismatches": mismatches, "result_sizes": sizes, "redrawn": redrawn }),
    )
}

fn program(name: &str, arity: Arity, script: &str, params: &[(&str, f64, f64, f64)]) -> UdfCandidate {
    let sig = UdfSignature::new(name, arity, &format!("Whether {name}")).expect("valid signature");
    let params: Vec<ParameterSpec> =
        params.iter().map(|&(n, default, min, max)| ParameterSpec { name: n.into(), default, min, max }).collect();
    let bound = params.iter().map(|p| p.default).collect();
    UdfCandidate {
        signature: sig,
        interpretation: script.into(),
        kind: UdfKind::Program { script: script.into(), params, bound, allow_pixels: false },
    }
}

fn materialization_equivalence() -> Outcome {
    let s = seed42();
    let store = s.store();
    let registry = Registry::new();
    register_stored_concepts(&store, &registry).expect("stored concepts register");
    let env = UdfEnv::default();
    let centroid_gap = "let dx = (o0_x1 + o0_x2 - o1_x1 - o1_x2) / 2.0; let dy = (o0_y1 + o0_y2 - o1_y1 - o1_y2) / 2.0; let diag = (width * width + height * height).to_float().sqrt();";
    let cases = [
        (
            program("close_to", Arity::Binary, &format!("{centroid_gap} (dx * dx + dy * dy).sqrt() < 0.2 * diag"), &[]),
            "Duration((car(o0), close_to(o0, o1)), 8)",
        ),
        (
            program("far_from", Arity::Binary, &format!("{centroid_gap} (dx * dx + dy * dy).sqrt() > ratio * diag"), &[(
                "ratio", 0.5, 0.3, 0.7,
            )]),
            "(truck(o0), far_from(o0, o1)); Duration((truck(o0), left_of(o0, o1)), 4)",
        ),
        (program("higher_than", Arity::Binary, "o0_y1 + o0_y2 < o1_y1 + o1_y2", &[]), "Duration((person(o0), higher_than(o0, o1)), 10)"),
        (program("right_side_of", Arity::Binary, "o0_x1 >= o1_x2", &[]), "Duration((right_side_of(o0, o1), bicycle(o1)), 6)"),
        (program("lower_half", Arity::Unary, "o0_y2 * 2 > height", &[]), "Duration((lower_half(o0), car(o0)), 12)"),
    ];
    let mut rows = Vec::new();
    let mut mismatches = Vec::new();
    for (udf, text) in cases {
        let name = udf.signature.name.clone();
        registry.register(udf).expect("fresh name");
        let q = parse(text).expect("fixed query parses");
        let before = {
            let catalog = registry.snapshot();
            let tables = store.read();
            evaluate(&q, &tables, &catalog.bind(&env)).expect("program evaluates")
        };
        let n = materialize_udf(&store, &registry, &name, &env).expect("materializes");
        let after = {
            let catalog = registry.snapshot();
            let tables = store.read();
            evaluate(&q, &tables, &catalog.bind(&env)).expect("lookup evaluates")
        };
        rows.push(json!({ "udf": name, "rows": n, "matched": before }));
        if before != after {
            mismatches.push(json!({ "udf": name, "before": before, "after": after }));
        }
    }
    outcome(
        "materialization_equivalence",
        mismatches.is_empty(),
        format!("{}/5 programs give identical results after materializing", 5 - mismatches.len()),
        json!({ "udfs": rows, "mismatches": mismatches }),
    )
}

/// Registry entries first, the concept rules for everything else.
struct Overlay<'a> {
    registry: scenequery::registry::Bound<'a>,
    truth: GroundTruth<'a>,
}

impl PredicateCatalog for Overlay<'_> {
    fn arity_of(&self, name: &str) -> Option<Arity> {
        self.registry.arity_of(name).or_else(|| self.truth.arity_of(name))
    }
}

impl PredicateEvaluator for Overlay<'_> {
    type Error = String;

    fn holds(&self, name: &str, t: &TupleView<'_>) -> Result<bool, String> {
        if self.registry.arity_of(name).is_some() {
            self.registry.holds(name, t).map_err(|e| e.to_string())
        } else {
            self.truth.holds(name, t).map_err(|e| match e {})
        }
    }
}

/// The first predicate (missing ones preferred) whose removal keeps every
/// variable and every graph non-empty.
fn removable(q: &Query, prefer: &[String]) -> Option<(usize, usize)> {
    let vars = q.variables();
    let mut spots: Vec<(usize, usize)> = Vec::new();
    for (g, graph) in q.graphs.iter().enumerate() {
        for p in 0..graph.predicates.len() {
            spots.push((g, p));
        }
    }
    spots.sort_by_key(|&(g, p)| !prefer.contains(&q.graphs[g].predicates[p].name));
    spots.into_iter().find(|&(g, p)| {
        let rest = without(q, g, p);
        q.graphs[g].predicates.len() > 1 && rest.is_some_and(|r| r.variables() == vars)
    })
}

fn without(q: &Query, g: usize, p: usize) -> Option<Query> {
    let mut graphs: Vec<RegionGraph> = q.graphs.clone();
    graphs[g].predicates.remove(p);
    Query::new(graphs).ok()
}

fn dummy_semantics() -> Outcome {
    let s = generate(&SyntheticSpec::default()).expect("a seed with positives exists");
    let env = UdfEnv::default();
    let names = concept_names();
    let names: Vec<(&str, Arity)> = names.iter().map(|(n, a)| (n.as_str(), *a)).collect();
    // Declared queries first, then seeded random ones. Queries where every
    // predicate is alone in its graph are skipped: removing one would leave
    // an empty graph, which the language cannot express.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let declared = s.declaration.queries.iter().map(|q| (parse(&q.dsl).expect("declared query parses"), q.missing.clone()));
    let random = std::iter::repeat_with(move || (random_query(&mut rng, &names, 3, 2, 10), Vec::new()));
    let mut cases = Vec::new();
    let mut failures = Vec::new();
    let mut skipped = Vec::new();
    for (q, missing) in declared.chain(random) {
        if cases.len() == DUMMY_QUERIES {
            break;
        }
        let Some((g, p)) = removable(&q, &missing) else {
            skipped.push(q.to_string());
            continue;
        };
        let target = q.graphs[g].predicates[p].clone();
        // Rename so the dummy cannot collide with a rule of the same name.
        let dummy_name = format!("dummy_{}", target.name);
        let mut renamed = q.clone();
        renamed.graphs[g].predicates[p].name = dummy_name.clone();
        let desc = default_description(&dummy_name, target.arity(), false);
        let sig = UdfSignature::new(&dummy_name, target.arity(), &desc).expect("valid signature");
        let registry = Registry::new();
        registry.register(make_dummy(&sig)).expect("fresh name");
        let catalog = registry.snapshot();
        let eval = Overlay { registry: catalog.bind(&env), truth: GroundTruth { latents: &s.latents } };
        let dummied = evaluate(&renamed, &s.tables, &eval).expect("evaluates");
        let removed = evaluate(&without(&q, g, p).expect("checked removable"), &s.tables, &eval).expect("evaluates");
        let kept = evaluate(&q, &s.tables, &eval).expect("evaluates");
        if dummied != removed {
            failures.push(format!("{q}: dummy {dummied:?} vs removed {removed:?}"));
        }
        cases.push(json!({ "query": q.to_string(), "predicate": target.to_string(), "with": kept, "dummied": dummied, "removed": removed }));
    }
    outcome(
        "dummy_semantics",
        failures.is_empty() && cases.len() == DUMMY_QUERIES,
        format!(
            "{}/{} queries: dummy equals removal ({} skipped with no removable predicate)",
            cases.len() - failures.len(),
            DUMMY_QUERIES,
            skipped.len()
        ),
        json!({ "cases": cases, "failures": failures, "skipped": skipped }),
    )
}

fn gradient_check() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checks = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let xs: Vec<Vec<f64>> = (0..24).map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<bool> = (0..24).map(|_| rng.gen_bool(0.4)).collect();
        let w = class_weights(&ys);
        let model = Mlp::init(10, 16, seed);
        let (_, grad) = model.loss_and_gradient(&xs, &ys, w);
        for _ in 0..5 {
            let i = rng.gen_range(0..model.params().len());
            let mut plus = model.clone();
            plus.params_mut()[i] += GRADIENT_STEP;
            let mut minus = model.clone();
            minus.params_mut()[i] -= GRADIENT_STEP;
            let numeric = (plus.loss(&xs, &ys, w) - minus.loss(&xs, &ys, w)) / (2.0 * GRADIENT_STEP);
            let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-8);
            worst = worst.max(rel);
            checks.push(json!({ "seed": seed, "param": i, "analytic": grad[i], "numeric": numeric }));
        }
    }
    outcome(
        "gradient_check",
        worst < GRADIENT_TOLERANCE,
        format!("worst relative error {worst:.2e} over 15 coordinates (tolerance {GRADIENT_TOLERANCE:e})"),
        json!({ "checks": checks }),
    )
}

fn learnability() -> Outcome {
    let mut f1s = Vec::new();
    for seed in 0..LEARNABILITY_SEEDS {
        let s = generate_exact(&SyntheticSpec::default(), 100 + seed);
        let extractor = s.extractor();
        let (units, truth) = concept_truth(&s, "color_red").expect("known concept");
        let mut order: Vec<usize> = (0..units.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let features: Vec<Vec<f64>> = units
            .iter()
            .map(|&u| build_features(&s.tables.tuple(u).expect("eligible"), &extractor, None).expect("synthetic features"))
            .collect();
        let (train, held_out) = order.split_at(LEARNABILITY_TRAIN);
        let xs: Vec<Vec<f64>> = train.iter().map(|&i| features[i].clone()).collect();
        let ys: Vec<bool> = train.iter().map(|&i| truth[i]).collect();
        let cfg = DistillConfig { seed, ..Default::default() };
        let model = train_classifier(&xs, &ys, &cfg).expect("trains");
        let f1 = Confusion::from_pairs(held_out.iter().map(|&i| (model.mlp.probability(&features[i]) >= model.threshold, truth[i]))).f1();
        f1s.push(f1);
    }
    let min = f1s.iter().cloned().fold(1.0, f64::min);
    outcome(
        "distilled_model_learnability",
        min >= LEARNABILITY_F1,
        format!("held-out F1 min {min:.3} over {LEARNABILITY_SEEDS} seeds (need >= {LEARNABILITY_F1})"),
        json!({ "f1": f1s }),
    )
}

fn selection_quality() -> Outcome {
    let s = seed42();
    let (_, truth) = concept_truth(&s, "near").expect("known concept");
    let kinds = [Planted::Accuracy(0.95), Planted::Accuracy(0.8), Planted::Accuracy(0.6), Planted::Dummy, Planted::Random(0.5)];
    let mut good = 0;
    let mut runs = Vec::new();
    for seed in 0..SELECTION_SEEDS {
        let mut pool = PlantedPool::new(truth.clone(), &kinds, seed);
        let f1 = pool.true_f1();
        let cfg = SelectionConfig { budget: SELECTION_BUDGET, seed, ..Default::default() };
        let r = run_selection(truth.len(), &mut pool, &mut TruthLabeler(&truth), None, &cfg);
        let best = f1.iter().cloned().fold(0.0, f64::max);
        if f1[r.chosen] >= SELECTION_OF_BEST * best {
            good += 1;
        }
        runs.push(json!({ "seed": seed, "chosen": r.chosen, "true_f1": f1, "weights": r.final_weights }));
    }
    let share = good as f64 / SELECTION_SEEDS as f64;
    outcome(
        "selection_quality",
        share >= SELECTION_SHARE,
        format!("chosen within {SELECTION_OF_BEST} of best in {good}/{SELECTION_SEEDS} seeds (need >= {SELECTION_SHARE})"),
        json!({ "runs": runs }),
    )
}

fn dummy_fallback() -> Outcome {
    let mut kinds = vec![Planted::Random(FALLBACK_POSITIVE_RATE); 4];
    kinds.push(Planted::Dummy);
    let mut picked = 0;
    let mut runs = Vec::new();
    for seed in 0..SELECTION_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfa11);
        let truth: Vec<bool> = (0..FALLBACK_POOL).map(|_| rng.gen_bool(FALLBACK_POSITIVE_RATE)).collect();
        let mut pool = PlantedPool::new(truth.clone(), &kinds, seed);
        let mut hint = NoisyHint { truth: &truth, flip_rate: FALLBACK_HINT_NOISE, seed };
        let cfg = SelectionConfig { budget: SELECTION_BUDGET, seed, ..Default::default() };
        let r = run_selection(truth.len(), &mut pool, &mut TruthLabeler(&truth), Some(&mut hint), &cfg);
        if kinds[r.chosen] == Planted::Dummy {
            picked += 1;
        }
        runs.push(json!({ "seed": seed, "chosen": r.chosen, "positives": r.positives.len(), "weights": r.final_weights }));
    }
    let share = picked as f64 / SELECTION_SEEDS as f64;
    outcome(
        "dummy_fallback",
        share >= FALLBACK_SHARE,
        format!("dummy chosen in {picked}/{SELECTION_SEEDS} seeds (need >= {FALLBACK_SHARE})"),
        json!({ "runs": runs }),
    )
}

fn end_to_end() -> Outcome {
    let s = generate(&SyntheticSpec::default()).expect("a seed with positives exists");
    let mut means = Vec::new();
    let mut reports = Vec::new();
    for generation in [true, false] {
        let engine = s.engine(E2E_VLM_NOISE, 7).expect("engine builds");
        let cfg = PipelineConfig { generation, seed: 42, ..Default::default() };
        let mut labeler = OracleLabeler(s.oracle(0.0, 0));
        let mut f1s = Vec::new();
        for q in &s.declaration.queries {
            let r = engine.run_query(&q.text, &cfg, &mut labeler).expect("query runs");
            f1s.push(set_f1(&r.matched, &q.positives));
            reports.push(serde_json::from_str::<Value>(&r.canonical_json()).expect("json"));
        }
        means.push(f1s.iter().sum::<f64>() / f1s.len() as f64);
    }
    let (on, off) = (means[0], means[1]);
    outcome(
        "end_to_end_self_enhancement",
        on >= E2E_WITH_GENERATION && off <= E2E_WITHOUT_GENERATION,
        format!(
            "mean F1 {on:.3} with generation (need >= {E2E_WITH_GENERATION}), {off:.3} without (need <= {E2E_WITHOUT_GENERATION}); dataset seed {}",
            s.declaration.final_seed
        ),
        json!({ "mean_f1": means, "results": reports }),
    )
}

type Criterion = (fn() -> Outcome, Option<Duration>);

fn criteria() -> Vec<Criterion> {
    vec![
        (dsl_round_trip, Some(ROUND_TRIP_LIMIT)),
        (executor_equivalence, Some(EXECUTOR_LIMIT)),
        (materialization_equivalence, Some(MATERIALIZE_LIMIT)),
        (dummy_semantics, None),
        (gradient_check, Some(GRADIENT_LIMIT)),
        (learnability, Some(LEARNABILITY_LIMIT)),
        (selection_quality, Some(SELECTION_LIMIT)),
        (dummy_fallback, None),
        (end_to_end, Some(E2E_LIMIT)),
    ]
}

#[test]
fn acceptance() {
    let mut first = Vec::new();
    let mut failed = Vec::new();
    for (f, limit) in criteria() {
        let (o, elapsed) = timed(limit, f);
        println!("{} {}: {} ({:.2?})", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail, elapsed);
        if !o.passed {
            failed.push(o.name);
        }
        first.push((o.name, serde_json::to_string(&o.report).expect("report serializes")));
    }
    let mut differing = Vec::new();
    for ((f, _), (name, report)) in criteria().into_iter().zip(&first) {
        if serde_json::to_string(&f().report).expect("report serializes") != *report {
            differing.push(*name);
        }
    }
    let deterministic = differing.is_empty();
    println!(
        "{} determinism: {}",
        if deterministic { "PASS" } else { "FAIL" },
        if deterministic { format!("{} reports identical on rerun", first.len()) } else { format!("reports differ: {differing:?}") }
    );
    if !deterministic {
        failed.push("determinism");
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
