//! The end-to-end pipeline: translate, generate missing UDFs, select one per
//! predicate with labels, materialize it, and execute the query.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use scenequery_core::dsl::{parse, ParseError};
use scenequery_core::exec::evaluate;
use scenequery_core::scene::VideoId;
use scenequery_core::select::{CandidateVotes, Phase, SelectionConfig, SelectionReport, Session, VlmHint};
use scenequery_core::{SceneTables, UnitId};

use crate::features::{fnv1a, ExtractorSet, MeanColorExtractor, SyntheticExtractor};
use crate::llm::{Gateway, LlmError, TranslationOutcome, UdfType, DEFAULT_FPS, DEFAULT_MAX_RETRIES};
use crate::materialize::{materialize_udf, prepopulate, register_stored_concepts, MaterializeError};
use crate::modelgen::{distill, DistillConfig, DistillReport};
use crate::programgen::{generate, GenerationReport, ProgramGenConfig};
use crate::registry::{eval_udf, make_dummy, Registry, RegistryError, UdfCandidate, UdfEnv, UdfSignature};
use crate::storage::{ImageSource, StorageError, Store};
use crate::testkit::{extractor_for, Declaration, RuleOracle};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Program,
    Model,
    Llm,
    #[default]
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub strategy: Strategy,
    pub selection: SelectionConfig,
    pub programgen: ProgramGenConfig,
    pub distill: DistillConfig,
    pub fps: f64,
    pub max_retries: usize,
    /// When false, every missing predicate becomes a dummy.
    pub generation: bool,
    /// Consult the vision model before candidate votes when seeking a class.
    pub vlm_hint: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Both,
            selection: SelectionConfig::default(),
            programgen: ProgramGenConfig::default(),
            distill: DistillConfig::default(),
            fps: DEFAULT_FPS,
            max_retries: DEFAULT_MAX_RETRIES,
            generation: true,
            vlm_hint: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Llm(#[from] LlmError),
    #[error("translated query does not parse: {0}")]
    Parse(#[from] ParseError),
    #[error("executing the query: {0}")]
    Exec(String),
    #[error("{0}")]
    Materialize(#[from] MaterializeError),
    #[error("{0}")]
    Registry(#[from] RegistryError),
    #[error("{0}")]
    Storage(#[from] StorageError),
    #[error("{name} was proposed again after it was built")]
    RepeatedProposal { name: String },
    #[error("configuration: {0}")]
    Config(String),
}

/// Supplies ground-truth labels during selection.
pub trait UnitLabeler: Send {
    fn label(&mut self, signature: &UdfSignature, unit: UnitId, phase: Phase) -> Option<bool>;

    /// Called after every selection iteration.
    fn observe(&mut self, _signature: &UdfSignature, _candidates: &[String], _report: &SelectionReport) {}
}

/// Labels from the testkit's concept rules.
pub struct OracleLabeler(pub RuleOracle);

impl UnitLabeler for OracleLabeler {
    fn label(&mut self, signature: &UdfSignature, unit: UnitId, _phase: Phase) -> Option<bool> {
        self.0.label(&signature.name, unit)
    }
}

/// Labels from the vision model.
pub struct VlmLabeler {
    pub gateway: Gateway,
    pub store: Arc<Store>,
    pub images: Option<Arc<dyn ImageSource>>,
}

impl UnitLabeler for VlmLabeler {
    fn label(&mut self, signature: &UdfSignature, unit: UnitId, _phase: Phase) -> Option<bool> {
        let tables = self.store.read();
        let view = tables.tuple(unit)?;
        self.gateway.vlm_label(&view, signature, self.images.as_deref()).ok()
    }
}

/// What happened while building one missing UDF.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedUdf {
    pub name: String,
    pub signature: String,
    pub description: String,
    pub kind: String,
    pub chosen: String,
    pub is_dummy: bool,
    pub candidates: Vec<String>,
    pub programgen: Option<GenerationReport>,
    pub distill: Option<DistillReport>,
    pub selection: Option<SelectionReport>,
    /// The labeled units behind `selection`, in labeling order.
    pub labeled_units: Vec<(UnitId, bool)>,
    pub materialized_rows: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub translate_ms: u128,
    pub generate_ms: u128,
    pub select_ms: u128,
    pub materialize_ms: u128,
    pub execute_ms: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub text: String,
    pub dsl: String,
    pub matched: BTreeSet<VideoId>,
    pub translation_retries: usize,
    pub udfs: Vec<GeneratedUdf>,
    pub warnings: Vec<String>,
    pub timings: Timings,
}

impl QueryResult {
    /// JSON without wall-clock timings; identical across identical runs.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("result serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("timings");
        }
        serde_json::to_string_pretty(&v).expect("value serializes")
    }
}

/// Everything a query runs against.
#[derive(Clone)]
pub struct Engine {
    pub store: Arc<Store>,
    pub registry: Arc<Registry>,
    pub env: UdfEnv,
    pub gateway: Gateway,
}

/// Extractors for a dataset: the synthetic extractor (using latent tokens
/// when a testkit declaration is available) and the pixel mean-colour one.
pub fn default_extractors(declaration: Option<&Declaration>) -> ExtractorSet {
    let synthetic = match declaration {
        Some(d) => extractor_for(&d.latent_map(), d.final_seed),
        None => SyntheticExtractor::new(0, BTreeMap::new()),
    };
    ExtractorSet::default().with(Arc::new(synthetic)).with(Arc::new(MeanColorExtractor))
}

impl Engine {
    /// Registers value lookups for every stored concept, then evaluates and
    /// materializes the manifest's program UDFs.
    pub fn new(store: Store, gateway: Gateway, extractors: ExtractorSet) -> Result<Self, PipelineError> {
        let store = Arc::new(store);
        let images: Option<Arc<dyn ImageSource>> = if store.has_images() { Some(store.clone()) } else { None };
        let env = UdfEnv { images, extractors, ..Default::default() };
        let registry = Arc::new(Registry::new());
        prepopulate(&store, &registry, &env)?;
        register_stored_concepts(&store, &registry)?;
        Ok(Self { store, registry, env, gateway })
    }

    fn execute(&self, dsl: &str) -> Result<BTreeSet<VideoId>, PipelineError> {
        let query = parse(dsl)?;
        let catalog = self.registry.snapshot();
        let bound = catalog.bind(&self.env);
        let tables = self.store.read();
        evaluate(&query, &tables, &bound).map_err(|e| PipelineError::Exec(e.to_string()))
    }

    pub fn run_query(
        &self,
        text: &str,
        cfg: &PipelineConfig,
        labeler: &mut dyn UnitLabeler,
    ) -> Result<QueryResult, PipelineError> {
        let gateway = Gateway { max_retries: cfg.max_retries, fps: cfg.fps, ..self.gateway.clone() };
        let mut timings = Timings::default();
        let mut built: Vec<GeneratedUdf> = Vec::new();
        let mut warnings = Vec::new();
        let mut retries = 0;
        loop {
            let start = Instant::now();
            let t = gateway.translate_query(text, &self.registry)?;
            timings.translate_ms += start.elapsed().as_millis();
            retries += t.retries;
            match t.outcome {
                TranslationOutcome::Dsl(dsl) => {
                    let start = Instant::now();
                    let matched = self.execute(&dsl)?;
                    timings.execute_ms += start.elapsed().as_millis();
                    for u in built.iter().filter(|u| u.is_dummy) {
                        warnings.push(format!("{} fell back to the dummy UDF and is effectively removed", u.name));
                    }
                    return Ok(QueryResult {
                        text: text.into(),
                        dsl,
                        matched,
                        translation_retries: retries,
                        udfs: built,
                        warnings,
                        timings,
                    });
                }
                TranslationOutcome::Proposals(proposals) => {
                    for p in proposals {
                        let sig = p.to_signature();
                        if built.iter().any(|u| u.name == sig.name) {
                            return Err(PipelineError::RepeatedProposal { name: sig.name });
                        }
                        if self.registry.contains(&sig.name) {
                            continue;
                        }
                        built.push(self.build_udf(&sig, cfg, &gateway, labeler, &mut timings)?);
                    }
                }
            }
        }
    }

    fn build_udf(
        &self,
        sig: &UdfSignature,
        cfg: &PipelineConfig,
        gateway: &Gateway,
        labeler: &mut dyn UnitLabeler,
        timings: &mut Timings,
    ) -> Result<GeneratedUdf, PipelineError> {
        let seed = cfg.seed ^ fnv1a(sig.name.as_bytes());
        let mut warnings = Vec::new();
        let mut programgen = None;
        let mut distilled = None;
        let mut candidates: Vec<UdfCandidate> = Vec::new();
        let start = Instant::now();
        if cfg.generation {
            let (programs, models) = match cfg.strategy {
                Strategy::Program => (true, false),
                Strategy::Model => (false, true),
                Strategy::Both => (true, true),
                Strategy::Llm => match gateway.decide_udf_type(sig, &self.store.active_domains()) {
                    Ok(UdfType::Program) => (true, false),
                    Ok(UdfType::Model) => (false, true),
                    Err(e) => {
                        warnings.push(format!("UDF type decision failed ({e}); generating programs"));
                        (true, false)
                    }
                },
            };
            if programs {
                let pcfg = ProgramGenConfig { seed, ..cfg.programgen.clone() };
                match generate(sig, &self.store, &pcfg, gateway, &self.env) {
                    Ok(g) => {
                        candidates.extend(g.candidates);
                        programgen = Some(g.report);
                    }
                    Err(e) => warnings.push(format!("program generation: {e}")),
                }
            }
            if models {
                let dcfg = DistillConfig { seed, ..cfg.distill.clone() };
                match distill(sig, &self.store, &dcfg, gateway, &self.env) {
                    Ok(d) => {
                        candidates.push(d.candidate);
                        distilled = Some(d.report);
                    }
                    Err(e) => warnings.push(format!("model distillation: {e}")),
                }
            }
        }
        timings.generate_ms += start.elapsed().as_millis();
        if candidates.is_empty() && cfg.generation {
            warnings.push(format!("no candidate besides the dummy for {}", sig.name));
        }
        candidates.push(make_dummy(sig));
        let summaries: Vec<String> = candidates.iter().map(UdfCandidate::summary).collect();

        let start = Instant::now();
        let (chosen, selection, labeled_units) = if candidates.len() == 1 {
            (0, None, Vec::new())
        } else {
            let scfg = SelectionConfig { seed, ..cfg.selection.clone() };
            let (report, labeled) = self.select(sig, &candidates, &summaries, &scfg, cfg.vlm_hint, gateway, labeler);
            warnings.extend(report.warnings.iter().cloned());
            (report.chosen, Some(report), labeled)
        };
        timings.select_ms += start.elapsed().as_millis();

        let winner = candidates.swap_remove(chosen);
        let out_kind = winner.kind.label().to_string();
        let chosen_summary = winner.summary();
        let is_dummy = winner.is_dummy();
        self.registry.register(winner)?;
        let start = Instant::now();
        let rows = materialize_udf(&self.store, &self.registry, &sig.name, &self.env)?;
        timings.materialize_ms += start.elapsed().as_millis();
        Ok(GeneratedUdf {
            name: sig.name.clone(),
            signature: sig.text(),
            description: sig.description.clone(),
            kind: out_kind,
            chosen: chosen_summary,
            is_dummy,
            candidates: summaries,
            programgen,
            distill: distilled,
            selection,
            labeled_units,
            materialized_rows: rows,
            warnings,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn select(
        &self,
        sig: &UdfSignature,
        candidates: &[UdfCandidate],
        summaries: &[String],
        cfg: &SelectionConfig,
        use_hint: bool,
        gateway: &Gateway,
        labeler: &mut dyn UnitLabeler,
    ) -> (SelectionReport, Vec<(UnitId, bool)>) {
        let tables = self.store.read();
        let pool = tables.eligible_units(sig.arity, None);
        let mut votes = PoolVotes { tables: &tables, pool: &pool, candidates, env: &self.env, cache: HashMap::new() };
        let mut hint = VisionHint { tables: &tables, pool: &pool, sig, gateway, env: &self.env, cache: HashMap::new() };
        let mut session = Session::new(pool.len(), candidates.len(), cfg.clone());
        let mut labeled = Vec::new();
        loop {
            let pending = session.next(&mut votes, if use_hint { Some(&mut hint as &mut dyn VlmHint) } else { None });
            let Some(p) = pending else { break };
            let unit = pool[p.unit];
            let label = labeler.label(sig, unit, p.phase);
            if let Some(l) = label {
                labeled.push((unit, l));
            }
            session.resolve(p, label);
            labeler.observe(sig, summaries, session.report());
        }
        (session.finish(|c| candidates[c].is_dummy()), labeled)
    }
}

struct PoolVotes<'a> {
    tables: &'a SceneTables,
    pool: &'a [UnitId],
    candidates: &'a [UdfCandidate],
    env: &'a UdfEnv,
    cache: HashMap<usize, Vec<bool>>,
}

impl CandidateVotes for PoolVotes<'_> {
    fn candidate_count(&self) -> usize {
        self.candidates.len()
    }

    fn is_dummy(&self, candidate: usize) -> bool {
        self.candidates[candidate].is_dummy()
    }

    /// A candidate that fails on a unit votes false.
    fn votes(&mut self, unit: usize) -> Vec<bool> {
        if let Some(v) = self.cache.get(&unit) {
            return v.clone();
        }
        let v: Vec<bool> = match self.tables.tuple(self.pool[unit]) {
            Some(view) => self.candidates.iter().map(|c| eval_udf(c, &view, self.env).unwrap_or(false)).collect(),
            None => vec![false; self.candidates.len()],
        };
        self.cache.insert(unit, v.clone());
        v
    }
}

struct VisionHint<'a> {
    tables: &'a SceneTables,
    pool: &'a [UnitId],
    sig: &'a UdfSignature,
    gateway: &'a Gateway,
    env: &'a UdfEnv,
    cache: HashMap<usize, Option<bool>>,
}

impl VlmHint for VisionHint<'_> {
    fn verdict(&mut self, unit: usize) -> Option<bool> {
        if let Some(v) = self.cache.get(&unit) {
            return *v;
        }
        let v = self
            .tables
            .tuple(self.pool[unit])
            .and_then(|view| self.gateway.vlm_label(&view, self.sig, self.env.images.as_deref()).ok());
        self.cache.insert(unit, v);
        v
    }
}
