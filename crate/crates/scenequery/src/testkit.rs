//! Deterministic synthetic datasets with ground-truth concept rules, oracle
//! labelers, and scripted model fixtures.

use std::collections::{BTreeMap, BTreeSet};
use std::convert::Infallible;
use std::path::Path;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use scenequery_core::dsl::{parse, Arity, Predicate, PredicateCatalog, Query, RegionGraph};
use scenequery_core::exec::evaluate;
use scenequery_core::scene::{
    ActiveDomains, AttributeRecord, FrameRecord, ObjectId, ObjectRecord, RelationshipRecord, RowCounts, VideoId,
};
use scenequery_core::metrics::Confusion;
use scenequery_core::select::{CandidateVotes, Labeler, Phase, VlmHint};
use scenequery_core::{BBox, PredicateEvaluator, SceneTables, TupleView, UnitId};

use crate::features::{fnv1a, SyntheticExtractor};
use crate::llm::{Gateway, MockClient, MockScript, TemplateId, VisionOracle};
use crate::orchestrator::{default_extractors, Engine, PipelineError};
use crate::storage::{frame_image_path, Manifest, StorageError, Store};

pub const ONAMES: [&str; 4] = ["car", "truck", "person", "bicycle"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "gray"];
pub const SHAPES: [&str; 3] = ["cube", "sphere", "cylinder"];

/// Relationship and attribute concepts present as rows in generated data.
pub const STORED_RELATIONSHIPS: [&str; 2] = ["left_of", "front_of"];
pub const STORED_ATTRIBUTES: [&str; 5] = ["location_left", "location_top", "color_gray", "color_blue", "shape_cube"];
/// Concepts with a rule but no rows; queries over them need new UDFs.
pub const HIDDEN_CONCEPTS: [&str; 8] =
    ["near", "far", "behind", "right_of", "color_red", "color_green", "shape_sphere", "shape_cylinder"];

#[derive(Debug, thiserror::Error)]
pub enum TestkitError {
    #[error("no rule for concept {0:?}")]
    UnknownConcept(String),
    #[error("{0}")]
    Storage(#[from] StorageError),
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("no seed in {first}..{last} gives every query a positive video")]
    NoSeed { first: u64, last: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_videos: u32,
    pub n_frames: u32,
    pub n_objects: u32,
    pub width: u32,
    pub height: u32,
    pub render_images: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { seed: 42, n_videos: 10, n_frames: 64, n_objects: 5, width: 320, height: 240, render_images: false }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectLatent {
    pub vid: VideoId,
    pub oid: ObjectId,
    pub color: String,
    pub shape: String,
}

impl ObjectLatent {
    pub fn tokens(&self) -> Vec<String> {
        vec![format!("color_{}", self.color), format!("shape_{}", self.shape)]
    }
}

pub type Latents = BTreeMap<(VideoId, ObjectId), ObjectLatent>;

/// Definition text of every rule, by concept name.
pub fn rule_definitions() -> BTreeMap<String, (Arity, String)> {
    let mut m = BTreeMap::new();
    let mut put = |n: &str, a, d: &str| {
        m.insert(n.to_string(), (a, d.to_string()));
    };
    put("near", Arity::Binary, "centroid distance < 0.2 * frame diagonal");
    put("far", Arity::Binary, "centroid distance > 0.5 * frame diagonal");
    put("left_of", Arity::Binary, "o0.x2 <= o1.x1");
    put("right_of", Arity::Binary, "o0.x1 >= o1.x2");
    put("behind", Arity::Binary, "centroid y of o0 < centroid y of o1");
    put("front_of", Arity::Binary, "centroid y of o0 > centroid y of o1");
    put("location_left", Arity::Unary, "centroid x < width / 2");
    put("location_top", Arity::Unary, "centroid y < height / 2");
    for c in COLORS {
        put(&format!("color_{c}"), Arity::Unary, &format!("latent color is {c}"));
    }
    for s in SHAPES {
        put(&format!("shape_{s}"), Arity::Unary, &format!("latent shape is {s}"));
    }
    m
}

fn centroid_distance(a: BBox, b: BBox) -> f64 {
    let (ax, ay) = a.centroid();
    let (bx, by) = b.centroid();
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

/// Evaluates `concept` by its rule. `None` for unknown concepts or an arity
/// mismatch. Class names count as unary concepts.
pub fn rule_holds(concept: &str, t: &TupleView<'_>, latents: &Latents) -> Option<bool> {
    let diag = ((t.width as f64).powi(2) + (t.height as f64).powi(2)).sqrt();
    let a = t.o0.bbox;
    let (ax, ay) = a.centroid();
    if let Some(o1) = &t.o1 {
        let b = o1.bbox;
        let (_, by) = b.centroid();
        return match concept {
            "near" => Some(centroid_distance(a, b) < 0.2 * diag),
            "far" => Some(centroid_distance(a, b) > 0.5 * diag),
            "left_of" => Some(a.x2 <= b.x1),
            "right_of" => Some(a.x1 >= b.x2),
            "behind" => Some(ay < by),
            "front_of" => Some(ay > by),
            _ => None,
        };
    }
    let latent = latents.get(&(t.unit.vid, t.o0.oid));
    match concept {
        "location_left" => Some(ax < t.width as f64 / 2.0),
        "location_top" => Some(ay < t.height as f64 / 2.0),
        c if ONAMES.contains(&c) => Some(t.o0.oname == c),
        c => {
            if let Some(color) = c.strip_prefix("color_").filter(|x| COLORS.contains(x)) {
                Some(latent.is_some_and(|l| l.color == color))
            } else if let Some(shape) = c.strip_prefix("shape_").filter(|x| SHAPES.contains(x)) {
                Some(latent.is_some_and(|l| l.shape == shape))
            } else {
                None
            }
        }
    }
}

pub fn concept_arity(concept: &str) -> Option<Arity> {
    if ONAMES.contains(&concept) {
        return Some(Arity::Unary);
    }
    rule_definitions().get(concept).map(|(a, _)| *a)
}

/// Evaluates every concept straight from its rule; the reference for
/// ground-truth query results.
pub struct GroundTruth<'a> {
    pub latents: &'a Latents,
}

impl PredicateCatalog for GroundTruth<'_> {
    fn arity_of(&self, name: &str) -> Option<Arity> {
        concept_arity(name)
    }
}

impl PredicateEvaluator for GroundTruth<'_> {
    type Error = Infallible;

    fn holds(&self, name: &str, tuple: &TupleView<'_>) -> Result<bool, Infallible> {
        Ok(rule_holds(name, tuple, self.latents).unwrap_or(false))
    }
}

/// A natural-language query with its intended DSL translation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub text: String,
    pub dsl: String,
    /// Predicates with no stored rows.
    pub missing: Vec<String>,
    pub positives: BTreeSet<VideoId>,
}

pub const QUERIES: [(&str, &str); 10] = [
    (
        "A car stays near a truck for 16 frames",
        "Duration((car(o0), truck(o1), near(o0, o1)), 16)",
    ),
    (
        "Two objects start far apart and later stay near each other for 10 frames",
        "(far(o0, o1)); Duration((near(o0, o1)), 10)",
    ),
    (
        "A red object stays behind a blue object for 20 frames",
        "Duration((color_red(o0), color_blue(o1), behind(o0, o1)), 20)",
    ),
    (
        "A green sphere stays on the left side of the frame for 30 frames",
        "Duration((color_green(o0), shape_sphere(o0), location_left(o0)), 30)",
    ),
    (
        "A person is right of a car, and later the person is behind and near the car",
        "(person(o0), car(o1), right_of(o0, o1)); (behind(o0, o1), near(o0, o1))",
    ),
    (
        "A gray cylinder is near a bicycle for 5 frames",
        "Duration((color_gray(o0), shape_cylinder(o0), bicycle(o1), near(o0, o1)), 5)",
    ),
    (
        "A red cube is far from a green object",
        "(color_red(o0), shape_cube(o0), color_green(o1), far(o0, o1))",
    ),
    (
        "A truck stays behind and near another object for 20 frames",
        "Duration((truck(o0), behind(o0, o1), near(o0, o1)), 20)",
    ),
    (
        "A sphere in the top half is right of a cylinder for 10 frames",
        "Duration((shape_sphere(o0), location_top(o0), shape_cylinder(o1), right_of(o0, o1)), 10)",
    ),
    (
        "A blue object is near a red object and later far from it",
        "(color_blue(o0), color_red(o1), near(o0, o1)); (far(o0, o1))",
    ),
];

fn stored_concepts() -> BTreeSet<&'static str> {
    ONAMES.iter().chain(&STORED_RELATIONSHIPS).chain(&STORED_ATTRIBUTES).copied().collect()
}

/// Ground-truth declaration written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Declaration {
    pub requested_seed: u64,
    pub final_seed: u64,
    pub spec: SyntheticSpec,
    pub counts: RowCounts,
    pub domains: ActiveDomains,
    pub rules: BTreeMap<String, (Arity, String)>,
    pub stored: Vec<String>,
    pub hidden: Vec<String>,
    pub latents: Vec<ObjectLatent>,
    pub queries: Vec<SyntheticQuery>,
}

impl Declaration {
    pub fn latent_map(&self) -> Latents {
        self.latents.iter().map(|l| ((l.vid, l.oid), l.clone())).collect()
    }

    pub fn load(path: &Path) -> Result<Self, TestkitError> {
        let err = |m: String| TestkitError::File { path: path.display().to_string(), message: m };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

pub struct Synthetic {
    pub tables: SceneTables,
    pub latents: Latents,
    pub declaration: Declaration,
    images: Vec<((VideoId, u32), RgbImage)>,
}

struct Track {
    oname: &'static str,
    w: f64,
    h: f64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

fn bounce(pos: &mut f64, vel: &mut f64, hi: f64) {
    *pos += *vel;
    if *pos < 0.0 {
        *pos = -*pos;
        *vel = -*vel;
    }
    if *pos > hi {
        *pos = 2.0 * hi - *pos;
        *vel = -*vel;
    }
}

fn color_rgb(color: &str) -> Rgb<u8> {
    match color {
        "red" => Rgb([200, 40, 40]),
        "green" => Rgb([40, 170, 60]),
        "blue" => Rgb([50, 70, 210]),
        _ => Rgb([128, 128, 128]),
    }
}

/// Generates from exactly `seed`, without the positive-rate check.
pub fn generate_exact(spec: &SyntheticSpec, seed: u64) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let mut tables = SceneTables::new(spec.width, spec.height);
    let mut latents = Latents::new();
    let mut images = Vec::new();
    let mut domains = ActiveDomains::default();
    let mut frames = Vec::new();
    let mut objects = Vec::new();
    for vid in 0..spec.n_videos {
        let mut tracks: Vec<Track> = (0..spec.n_objects)
            .map(|oid| {
                let oname = *ONAMES.choose(&mut rng).expect("non-empty");
                let color = COLORS.choose(&mut rng).expect("non-empty").to_string();
                let shape = SHAPES.choose(&mut rng).expect("non-empty").to_string();
                latents.insert((vid, oid), ObjectLatent { vid, oid, color, shape });
                let w = rng.gen_range(0.06..0.16) * fw;
                let h = rng.gen_range(0.08..0.2) * fh;
                Track {
                    oname,
                    w,
                    h,
                    x: rng.gen_range(0.0..fw - w),
                    y: rng.gen_range(0.0..fh - h),
                    vx: rng.gen_range(-0.012..0.012) * fw,
                    vy: rng.gen_range(-0.012..0.012) * fh,
                }
            })
            .collect();
        for fid in 0..spec.n_frames {
            let image_ref = spec.render_images.then(|| frame_image_path(vid, fid));
            frames.push(FrameRecord { vid, fid, image_ref });
            let mut canvas = spec.render_images.then(|| RgbImage::from_pixel(spec.width, spec.height, Rgb([235, 235, 230])));
            for (oid, t) in tracks.iter_mut().enumerate() {
                let oid = oid as ObjectId;
                let x1 = (t.x.round() as i32).clamp(0, spec.width as i32 - 2);
                let y1 = (t.y.round() as i32).clamp(0, spec.height as i32 - 2);
                let x2 = ((t.x + t.w).round() as i32).clamp(x1 + 1, spec.width as i32);
                let y2 = ((t.y + t.h).round() as i32).clamp(y1 + 1, spec.height as i32);
                objects.push(ObjectRecord { vid, fid, oid, oname: t.oname.into(), x1, y1, x2, y2 });
                domains.onames.insert(t.oname.to_string());
                if let Some(img) = canvas.as_mut() {
                    let c = color_rgb(&latents[&(vid, oid)].color);
                    for y in y1..y2 {
                        for x in x1..x2 {
                            img.put_pixel(x as u32, y as u32, c);
                        }
                    }
                }
                bounce(&mut t.x, &mut t.vx, fw - t.w);
                bounce(&mut t.y, &mut t.vy, fh - t.h);
            }
            if let Some(img) = canvas {
                images.push(((vid, fid), img));
            }
        }
    }
    let (frame_rows, object_rows) = (frames.len(), objects.len());
    for f in frames {
        tables.insert_frame(f).expect("generated frames are unique");
    }
    for o in objects {
        tables.insert_object(o).expect("generated boxes are valid");
    }
    let mut rels = Vec::new();
    let mut attrs = Vec::new();
    for u in tables.eligible_units(Arity::Binary, None) {
        let t = tables.tuple(u).expect("eligible");
        for r in STORED_RELATIONSHIPS {
            if rule_holds(r, &t, &latents) == Some(true) {
                rels.push(RelationshipRecord { vid: u.vid, fid: u.fid, oid1: u.o0, rname: r.into(), oid2: u.o1.expect("pair") });
                domains.rnames.insert(r.into());
            }
        }
    }
    for u in tables.eligible_units(Arity::Unary, None) {
        let t = tables.tuple(u).expect("eligible");
        for a in STORED_ATTRIBUTES {
            if rule_holds(a, &t, &latents) == Some(true) {
                attrs.push(AttributeRecord { vid: u.vid, fid: u.fid, oid: u.o0, aname: a.into() });
                domains.anames.insert(a.into());
            }
        }
    }
    let counts = RowCounts { frames: frame_rows, objects: object_rows, relationships: rels.len(), attributes: attrs.len() };
    for r in rels {
        tables.insert_relationship(r).expect("rule rows are consistent");
    }
    for a in attrs {
        tables.insert_attribute(a).expect("rule rows are consistent");
    }

    let stored = stored_concepts();
    let queries = QUERIES
        .iter()
        .map(|(text, dsl)| {
            let q = parse(dsl).expect("built-in queries parse");
            let mut missing: Vec<String> = Vec::new();
            for p in q.predicates() {
                if !stored.contains(p.name.as_str()) && !missing.contains(&p.name) {
                    missing.push(p.name.clone());
                }
            }
            let positives =
                evaluate(&q, &tables, &GroundTruth { latents: &latents }).expect("built-in queries use known concepts");
            SyntheticQuery { text: text.to_string(), dsl: q.to_string(), missing, positives }
        })
        .collect();
    let declaration = Declaration {
        requested_seed: spec.seed,
        final_seed: seed,
        spec: spec.clone(),
        counts,
        domains,
        rules: rule_definitions(),
        stored: STORED_RELATIONSHIPS.iter().chain(&STORED_ATTRIBUTES).map(|s| s.to_string()).collect(),
        hidden: HIDDEN_CONCEPTS.iter().map(|s| s.to_string()).collect(),
        latents: latents.values().cloned().collect(),
        queries,
    };
    Synthetic { tables, latents, declaration, images }
}

/// Generates from `spec.seed`, moving to the next seed until every built-in
/// query matches at least 5% of the videos.
pub fn generate(spec: &SyntheticSpec) -> Result<Synthetic, TestkitError> {
    let need = (spec.n_videos as f64 * 0.05).ceil().max(1.0) as usize;
    for seed in spec.seed..spec.seed.saturating_add(1000) {
        let s = generate_exact(spec, seed);
        if s.declaration.queries.iter().all(|q| q.positives.len() >= need) {
            return Ok(s);
        }
    }
    Err(TestkitError::NoSeed { first: spec.seed, last: spec.seed.saturating_add(999) })
}

pub const DECLARATION_FILE: &str = "declaration.json";
pub const FIXTURES_FILE: &str = "fixtures.json";

impl Synthetic {
    pub fn store(&self) -> Store {
        let mut store = Store::from_tables(self.tables.clone(), None);
        store.set_manifest(self.manifest());
        for ((vid, fid), img) in &self.images {
            store.pin_image(*vid, *fid, img.clone());
        }
        store
    }

    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::standard(self.tables.width(), self.tables.height());
        for (name, (arity, _)) in rule_definitions() {
            if self.declaration.stored.contains(&name) {
                m.descriptions.insert(name.clone(), describe(&name, arity));
            }
        }
        m
    }

    pub fn extractor(&self) -> SyntheticExtractor {
        extractor_for(&self.latents, self.declaration.final_seed)
    }

    pub fn oracle(&self, flip_rate: f64, seed: u64) -> RuleOracle {
        RuleOracle::new(Arc::new(self.tables.clone()), Arc::new(self.latents.clone()), flip_rate, seed)
    }

    /// A mock model answering from the fixtures, with the rule oracle as its
    /// vision model.
    pub fn mock_client(&self, vlm_flip_rate: f64, vlm_seed: u64) -> MockClient {
        MockClient::new(mock_fixtures(&self.declaration.queries)).with_vision(Arc::new(self.oracle(vlm_flip_rate, vlm_seed)))
    }

    pub fn engine(&self, vlm_flip_rate: f64, vlm_seed: u64) -> Result<Engine, PipelineError> {
        let gateway = Gateway::new(Arc::new(self.mock_client(vlm_flip_rate, vlm_seed)));
        Engine::new(self.store(), gateway, default_extractors(Some(&self.declaration)))
    }

    /// Writes the dataset, the declaration, and mock fixtures into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), TestkitError> {
        let store = self.store();
        store.save(dir)?;
        for ((vid, fid), img) in &self.images {
            let path = dir.join(frame_image_path(*vid, *fid));
            let parent = path.parent().expect("nested path");
            std::fs::create_dir_all(parent).map_err(|source| StorageError::Io { path: parent.into(), source })?;
            img.save(&path).map_err(|e| StorageError::Image { path: path.clone(), message: e.to_string() })?;
        }
        let json = |v: String, name: &str| {
            let path = dir.join(name);
            std::fs::write(&path, v + "\n").map_err(|source| StorageError::Io { path, source })
        };
        json(serde_json::to_string_pretty(&self.declaration).expect("serializes"), DECLARATION_FILE)?;
        json(serde_json::to_string_pretty(&mock_fixtures(&self.declaration.queries)).expect("serializes"), FIXTURES_FILE)?;
        Ok(())
    }
}

pub fn extractor_for(latents: &Latents, seed: u64) -> SyntheticExtractor {
    SyntheticExtractor::new(seed, latents.iter().map(|(k, l)| (*k, l.tokens())).collect())
}

fn describe(name: &str, arity: Arity) -> String {
    let spaced = name.replace('_', " ");
    match arity {
        Arity::Unary => format!("Whether o0 is {spaced}"),
        Arity::Binary => format!("Whether o0 is {spaced} o1"),
    }
}

/// Rule-backed labels, optionally corrupted by a seeded per-unit flip.
#[derive(Clone)]
pub struct RuleOracle {
    tables: Arc<SceneTables>,
    latents: Arc<Latents>,
    pub flip_rate: f64,
    pub seed: u64,
}

fn unit_uniform(seed: u64, concept: &str, unit: UnitId) -> f64 {
    let mut z = fnv1a(format!("{seed}|{concept}|{unit}").as_bytes());
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

impl RuleOracle {
    pub fn new(tables: Arc<SceneTables>, latents: Arc<Latents>, flip_rate: f64, seed: u64) -> Self {
        Self { tables, latents, flip_rate, seed }
    }

    pub fn truth(&self, concept: &str, unit: UnitId) -> Option<bool> {
        let t = self.tables.tuple(unit)?;
        rule_holds(concept, &t, &self.latents)
    }

    pub fn label(&self, concept: &str, unit: UnitId) -> Option<bool> {
        let truth = self.truth(concept, unit)?;
        Some(truth ^ (unit_uniform(self.seed, concept, unit) < self.flip_rate))
    }

    /// Checks that `concept` has a rule.
    pub fn for_concept(&self, concept: &str) -> Result<ConceptOracle, TestkitError> {
        if concept_arity(concept).is_none() {
            return Err(TestkitError::UnknownConcept(concept.into()));
        }
        Ok(ConceptOracle { oracle: self.clone(), concept: concept.into() })
    }
}

impl VisionOracle for RuleOracle {
    fn verdict(&self, concept: &str, unit: UnitId) -> Option<bool> {
        self.label(concept, unit)
    }
}

/// A [`RuleOracle`] bound to one concept.
#[derive(Clone)]
pub struct ConceptOracle {
    pub oracle: RuleOracle,
    pub concept: String,
}

impl ConceptOracle {
    pub fn label(&self, unit: UnitId) -> Option<bool> {
        self.oracle.label(&self.concept, unit)
    }
}

const CENTROID_PRELUDE: &str = "let dx = (o0_x1 + o0_x2 - o1_x1 - o1_x2) / 2.0;\nlet dy = (o0_y1 + o0_y2 - o1_y1 - o1_y2) / 2.0;\nlet diag = (width * width + height * height).to_float().sqrt();\n";

fn program(interpretation: &str, script: &str) -> serde_json::Value {
    serde_json::json!({"semantic_interpretation": interpretation, "function_implementation": script})
}

fn program_with(interpretation: &str, script: &str, kwargs: serde_json::Value) -> serde_json::Value {
    serde_json::json!({"semantic_interpretation": interpretation, "function_implementation": script, "kwargs": kwargs})
}

fn answer(items: Vec<serde_json::Value>) -> String {
    format!("```json\n{}\n```", serde_json::to_string_pretty(&serde_json::json!({ "answer": items })).expect("json"))
}

/// Scripted candidate programs for a hidden concept, plus repair answers
/// keyed by candidate index. Exactly one candidate follows the rule for
/// geometric concepts; latent concepts get only flawed programs.
pub fn program_fixtures(concept: &str) -> (String, Vec<(usize, String)>) {
    let d = |s: &str| format!("{CENTROID_PRELUDE}{s}");
    let dist = "(dx * dx + dy * dy).sqrt()";
    let (items, repairs) = match concept {
        "near" => (
            vec![
                program("the two bounding boxes overlap", "o0_x1 < o1_x2 && o1_x1 < o0_x2 && o0_y1 < o1_y2 && o1_y1 < o0_y2"),
                program("centroids closer than a fifth of the frame diagonal", &d(&format!("{dist} < 0.2 * diag"))),
                program_with(
                    "centroid distance below a tunable fraction of the diagonal",
                    &d(&format!("{dist} < ratio * diag")),
                    serde_json::json!({"ratio": {"min": 0.05, "max": 0.6, "default": 0.35}}),
                ),
                program("boxes close relative to their size", "abs_gap < 10"),
                program("horizontally close", &d("dx.abs() < 0.2 * width")),
            ],
            vec![(3, answer(vec![program("gap between box edges is small", "(o1_x1 - o0_x2).abs() < 0.1 * width || (o0_x1 - o1_x2).abs() < 0.1 * width")]))],
        ),
        "far" => (
            vec![
                program("centroids more than half the diagonal apart", &d(&format!("{dist} > 0.5 * diag"))),
                program("centroids more than 0.3 of the diagonal apart", &d(&format!("{dist} > 0.3 * diag"))),
                program("no horizontal overlap", "!(o0_x1 < o1_x2 && o1_x1 < o0_x2)"),
                program("distance score", &d(&format!("{dist} - 0.5 * diag"))),
            ],
            vec![(3, answer(vec![program("horizontally far apart", &d("dx.abs() > 0.5 * width"))]))],
        ),
        "behind" => (
            vec![
                program("o0 lies entirely above o1 in the image", "o0_y2 < o1_y1"),
                program("top edge of o0 is higher than that of o1", "o0_y1 < o1_y1"),
                program("o1 is in front of o0", "\"front_of\" in o1_o0_rnames"),
                program_with(
                    "centroid of o0 higher by a margin",
                    "(o0_y1 + o0_y2) / 2.0 + margin * height < (o1_y1 + o1_y2) / 2.0",
                    serde_json::json!({"margin": {"min": 0.0, "max": 0.3, "default": 0.1}}),
                ),
            ],
            vec![],
        ),
        "right_of" => (
            vec![
                program("centroid of o0 is to the right of o1's centroid", "o0_x1 + o0_x2 > o1_x1 + o1_x2"),
                program("o0 is left of o1 according to stored relationships", "\"left_of\" in o0_o1_rnames"),
                program("o0 starts where o1 ends", "o0_x1 >= o1_x2"),
            ],
            vec![],
        ),
        c if c.starts_with("color_") => (
            vec![
                program("neither gray nor blue", "!(\"color_gray\" in o0_anames) && !(\"color_blue\" in o0_anames)"),
                program("cars are usually painted this color", "o0_oname == \"car\""),
                program("objects in the upper half", "(o0_y1 + o0_y2) / 2 < height / 2"),
            ],
            vec![],
        ),
        c if c.starts_with("shape_") => (
            vec![
                program("not a cube", "!(\"shape_cube\" in o0_anames)"),
                program("wider than tall", "o0_x2 - o0_x1 > o0_y2 - o0_y1"),
                program("people are round", "o0_oname == \"person\""),
            ],
            vec![],
        ),
        _ => (vec![], vec![]),
    };
    (answer(items), repairs)
}

/// Mock responses for the built-in queries and hidden concepts.
pub fn mock_fixtures(queries: &[SyntheticQuery]) -> MockScript {
    let mut m = MockClient::new(MockScript::new());
    for q in queries {
        m.push(TemplateId::ParseQuery, &q.text, [format!("PARSE_YES\n{}", q.dsl)]);
    }
    for c in HIDDEN_CONCEPTS {
        let (programs, repairs) = program_fixtures(c);
        m.push(TemplateId::GeneratePrograms, c, [programs]);
        for (i, r) in repairs {
            m.push(TemplateId::GeneratePrograms, &format!("{c}#repair{i}"), [r]);
        }
        let kind = if c.starts_with("color_") || c.starts_with("shape_") { "modelUDF" } else { "programUDF" };
        m.push(TemplateId::DecideUdfType, c, [kind]);
    }
    m.push(TemplateId::FilterObjectClasses, "*", [answer(ONAMES.iter().map(|n| serde_json::json!(n)).collect())]);
    m.script().clone()
}

/// A simulated candidate for selection experiments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Planted {
    /// Agrees with the truth on each unit with this probability.
    Accuracy(f64),
    /// Votes true with this probability, ignoring the truth.
    Random(f64),
    Dummy,
}

/// Precomputed votes of planted candidates over a labeled pool.
#[derive(Clone, Debug)]
pub struct PlantedPool {
    pub truth: Vec<bool>,
    pub kinds: Vec<Planted>,
    /// `votes[unit][candidate]`.
    pub votes: Vec<Vec<bool>>,
}

impl PlantedPool {
    pub fn new(truth: Vec<bool>, kinds: &[Planted], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let votes = truth
            .iter()
            .map(|&t| {
                kinds
                    .iter()
                    .map(|k| match *k {
                        Planted::Accuracy(a) => t == rng.gen_bool(a),
                        Planted::Random(p) => rng.gen_bool(p),
                        Planted::Dummy => true,
                    })
                    .collect()
            })
            .collect();
        Self { truth, kinds: kinds.to_vec(), votes }
    }

    /// F1 of each candidate against the truth over the whole pool.
    pub fn true_f1(&self) -> Vec<f64> {
        (0..self.kinds.len())
            .map(|c| Confusion::from_pairs(self.votes.iter().zip(&self.truth).map(|(v, &t)| (v[c], t))).f1())
            .collect()
    }
}

impl CandidateVotes for PlantedPool {
    fn candidate_count(&self) -> usize {
        self.kinds.len()
    }

    fn is_dummy(&self, candidate: usize) -> bool {
        self.kinds[candidate] == Planted::Dummy
    }

    fn votes(&mut self, unit: usize) -> Vec<bool> {
        self.votes[unit].clone()
    }
}

/// Answers with the pool's truth.
pub struct TruthLabeler<'a>(pub &'a [bool]);

impl Labeler for TruthLabeler<'_> {
    fn label(&mut self, unit: usize, _phase: Phase) -> Option<bool> {
        self.0.get(unit).copied()
    }
}

/// A vision-model stand-in over a pool: the truth, flipped on a seeded
/// fraction of units.
pub struct NoisyHint<'a> {
    pub truth: &'a [bool],
    pub flip_rate: f64,
    pub seed: u64,
}

impl VlmHint for NoisyHint<'_> {
    fn verdict(&mut self, unit: usize) -> Option<bool> {
        let t = *self.truth.get(unit)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (unit as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        Some(t ^ rng.gen_bool(self.flip_rate))
    }
}

/// Truth of `concept` on every eligible unit, in canonical order.
pub fn concept_truth(s: &Synthetic, concept: &str) -> Result<(Vec<UnitId>, Vec<bool>), TestkitError> {
    let arity = concept_arity(concept).ok_or_else(|| TestkitError::UnknownConcept(concept.into()))?;
    let units = s.tables.eligible_units(arity, None);
    let truth = units
        .iter()
        .map(|&u| s.tables.tuple(u).and_then(|t| rule_holds(concept, &t, &s.latents)).unwrap_or(false))
        .collect();
    Ok((units, truth))
}

/// A random query over `names` with at most `max_vars` variables, built
/// graph by graph so variables stay contiguous.
pub fn random_query(rng: &mut impl Rng, names: &[(&str, Arity)], max_vars: u32, max_graphs: usize, max_duration: u32) -> Query {
    let n_vars = rng.gen_range(1..=max_vars.max(1));
    let n_graphs = rng.gen_range(1..=max_graphs.max(1));
    let unary: Vec<&str> = names.iter().filter(|(_, a)| *a == Arity::Unary).map(|(n, _)| *n).collect();
    let binary: Vec<&str> = names.iter().filter(|(_, a)| *a == Arity::Binary).map(|(n, _)| *n).collect();
    let mut graphs = Vec::with_capacity(n_graphs);
    for _ in 0..n_graphs {
        let mut preds: Vec<Predicate> = Vec::new();
        for _ in 0..rng.gen_range(1..=3) {
            let p = if n_vars >= 2 && !binary.is_empty() && (unary.is_empty() || rng.gen_bool(0.4)) {
                let a = rng.gen_range(0..n_vars);
                let mut b = rng.gen_range(0..n_vars - 1);
                if b >= a {
                    b += 1;
                }
                Predicate::binary(binary.choose(rng).expect("non-empty"), a, b)
            } else {
                Predicate::unary(unary.choose(rng).expect("needs a unary name"), rng.gen_range(0..n_vars))
            };
            if !preds.contains(&p) {
                preds.push(p);
            }
        }
        let duration = if rng.gen_bool(0.5) { 1 } else { rng.gen_range(2..=max_duration.max(2)) };
        graphs.push(RegionGraph { predicates: preds, duration });
    }
    // Every variable must appear; pin the unused ones with a unary predicate.
    let used: BTreeSet<u32> = graphs.iter().flat_map(|g| g.predicates.iter().flat_map(|p| p.args.iter().map(|v| v.0))).collect();
    for v in 0..n_vars {
        if !used.contains(&v) {
            let name = unary.choose(rng).expect("needs a unary name");
            let g = rng.gen_range(0..graphs.len());
            let p = Predicate::unary(name, v);
            if !graphs[g].predicates.contains(&p) {
                graphs[g].predicates.push(p);
            }
        }
    }
    Query::new(graphs).expect("generated queries are well formed")
}
