//! Language and vision-language model access: prompt templates, clients,
//! response parsing, and the retry-with-feedback loops.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use scenequery_core::dsl::{self, Arity};
use scenequery_core::scene::ActiveDomains;
use scenequery_core::{TupleView, UnitId};

use crate::materialize::default_description;
use crate::registry::{is_identifier, ParameterSpec, Registry, UdfSignature};
use crate::storage::{frame_patch, ImageSource, Mask};

pub const DEFAULT_MAX_RETRIES: usize = 5;
pub const DEFAULT_FPS: f64 = 24.0;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum LlmError {
    #[error("template {template}: {message}")]
    Template { template: &'static str, message: String },
    #[error("model transport: {0}")]
    Transport(String),
    #[error("no scripted response for {template} / {concept:?}")]
    NoScript { template: String, concept: String },
    #[error("{operation} gave no usable answer after {attempts} attempt(s); last error: {last_error}")]
    Exhausted { operation: &'static str, attempts: usize, last_error: String },
    #[error("vision model: {0}")]
    Vision(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ParseQuery,
    ProposeUdfs,
    GeneratePrograms,
    DecideUdfType,
    FilterObjectClasses,
    VlmLabelAttribute,
    VlmLabelRelationship,
}

const DSL_CONTEXT: &str = include_str!("../prompts/dsl_context.txt");

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::ParseQuery,
        TemplateId::ProposeUdfs,
        TemplateId::GeneratePrograms,
        TemplateId::DecideUdfType,
        TemplateId::FilterObjectClasses,
        TemplateId::VlmLabelAttribute,
        TemplateId::VlmLabelRelationship,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::ParseQuery => "parse_query",
            TemplateId::ProposeUdfs => "propose_udfs",
            TemplateId::GeneratePrograms => "generate_programs",
            TemplateId::DecideUdfType => "decide_udf_type",
            TemplateId::FilterObjectClasses => "filter_object_classes",
            TemplateId::VlmLabelAttribute => "vlm_label_attribute",
            TemplateId::VlmLabelRelationship => "vlm_label_relationship",
        }
    }

    pub fn source(self) -> &'static str {
        match self {
            TemplateId::ParseQuery => include_str!("../prompts/parse_query.txt"),
            TemplateId::ProposeUdfs => include_str!("../prompts/propose_udfs.txt"),
            TemplateId::GeneratePrograms => include_str!("../prompts/generate_programs.txt"),
            TemplateId::DecideUdfType => include_str!("../prompts/decide_udf_type.txt"),
            TemplateId::FilterObjectClasses => include_str!("../prompts/filter_object_classes.txt"),
            TemplateId::VlmLabelAttribute => include_str!("../prompts/vlm_label_attribute.txt"),
            TemplateId::VlmLabelRelationship => include_str!("../prompts/vlm_label_relationship.txt"),
        }
    }

    /// Slot names the caller must fill, in first-use order.
    pub fn slots(self) -> Vec<String> {
        let text = self.expanded();
        let mut out: Vec<String> = Vec::new();
        for name in placeholders(&text) {
            if !out.iter().any(|n| n == name) {
                out.push(name.to_string());
            }
        }
        out
    }

    fn expanded(self) -> String {
        self.source().replace("{{dsl_context}}", DSL_CONTEXT.trim_end())
    }
}

fn placeholders(text: &str) -> impl Iterator<Item = &str> {
    text.match_indices("{{").filter_map(move |(i, _)| {
        let rest = &text[i + 2..];
        rest.find("}}").map(|j| &rest[..j])
    })
}

/// Fills every `{{slot}}` of `id`. Missing or unknown slots are errors.
pub fn render(id: TemplateId, slots: &[(&str, &str)]) -> Result<String, LlmError> {
    let text = id.expanded();
    let err = |message: String| LlmError::Template { template: id.as_str(), message };
    let wanted = id.slots();
    for (k, _) in slots {
        if !wanted.iter().any(|w| w == k) {
            return Err(err(format!("unknown slot {k:?}")));
        }
    }
    let mut out = String::with_capacity(text.len() * 2);
    let mut rest = text.as_str();
    while let Some(i) = rest.find("{{") {
        out.push_str(&rest[..i]);
        let after = &rest[i + 2..];
        let j = after.find("}}").ok_or_else(|| err("unterminated slot".into()))?;
        let name = &after[..j];
        let value = slots.iter().find(|(k, _)| *k == name).ok_or_else(|| err(format!("slot {name:?} not filled")))?;
        out.push_str(value.1);
        rest = &after[j + 2..];
    }
    out.push_str(rest);
    Ok(out.trim_end().to_string())
}

/// A text completion request. `concept` names what the request is about (the
/// query text, or a UDF name) so scripted clients can key on it.
#[derive(Clone, Copy, Debug)]
pub struct Completion<'a> {
    pub template: TemplateId,
    pub concept: &'a str,
    pub prompt: &'a str,
}

#[derive(Clone, Copy, Debug)]
pub struct VisionRequest<'a> {
    pub concept: &'a str,
    pub unit: UnitId,
    pub prompt: &'a str,
    pub image_png: Option<&'a [u8]>,
}

pub trait ModelClient: Send + Sync {
    fn identity(&self) -> String;
    fn complete(&self, req: &Completion<'_>) -> Result<String, LlmError>;
    fn label_image(&self, req: &VisionRequest<'_>) -> Result<bool, LlmError>;
}

/// Ground truth behind a scripted vision model.
pub trait VisionOracle: Send + Sync {
    fn verdict(&self, concept: &str, unit: UnitId) -> Option<bool>;
}

/// Scripted responses: template id → concept → responses in call order.
/// The concept `*` matches any concept without its own entry.
pub type MockScript = BTreeMap<String, BTreeMap<String, Vec<String>>>;

/// Replays scripted responses. Each (template, concept) key has its own
/// cursor; once the list is exhausted the last response repeats.
pub struct MockClient {
    script: MockScript,
    cursors: Mutex<BTreeMap<(String, String), usize>>,
    vision: Option<Arc<dyn VisionOracle>>,
}

impl MockClient {
    pub fn new(script: MockScript) -> Self {
        Self { script, cursors: Mutex::default(), vision: None }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::Transport(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| LlmError::Transport(format!("{}: {e}", path.display())))
    }

    pub fn with_vision(mut self, oracle: Arc<dyn VisionOracle>) -> Self {
        self.vision = Some(oracle);
        self
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    /// Appends responses for one key.
    pub fn push(&mut self, template: TemplateId, concept: &str, responses: impl IntoIterator<Item = impl Into<String>>) {
        self.script
            .entry(template.as_str().into())
            .or_default()
            .entry(concept.into())
            .or_default()
            .extend(responses.into_iter().map(Into::into));
    }
}

impl ModelClient for MockClient {
    fn identity(&self) -> String {
        "mock".into()
    }

    fn complete(&self, req: &Completion<'_>) -> Result<String, LlmError> {
        let t = req.template.as_str();
        let missing = || LlmError::NoScript { template: t.into(), concept: req.concept.into() };
        let by_concept = self.script.get(t).ok_or_else(missing)?;
        let (key, list) = match by_concept.get(req.concept) {
            Some(list) => (req.concept, list),
            None => ("*", by_concept.get("*").ok_or_else(missing)?),
        };
        if list.is_empty() {
            return Err(missing());
        }
        let mut cursors = self.cursors.lock().expect("mock cursor lock");
        let i = cursors.entry((t.into(), key.into())).or_insert(0);
        let out = list[(*i).min(list.len() - 1)].clone();
        *i += 1;
        Ok(out)
    }

    fn label_image(&self, req: &VisionRequest<'_>) -> Result<bool, LlmError> {
        let oracle = self.vision.as_ref().ok_or_else(|| LlmError::Vision("mock has no vision oracle".into()))?;
        oracle
            .verdict(req.concept, req.unit)
            .ok_or_else(|| LlmError::Vision(format!("no verdict for {} on {}", req.concept, req.unit)))
    }
}

#[derive(Clone, Debug)]
pub struct HttpConfig {
    /// Base URL of a chat-completions service, e.g. `https://host/v1`.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpConfig {
    /// Reads `SCENEQUERY_LLM_ENDPOINT`, `SCENEQUERY_LLM_MODEL`,
    /// `SCENEQUERY_LLM_API_KEY`, and `SCENEQUERY_LLM_TIMEOUT_SECS`.
    pub fn from_env() -> Result<Self, LlmError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let endpoint = var("SCENEQUERY_LLM_ENDPOINT")
            .ok_or_else(|| LlmError::Transport("SCENEQUERY_LLM_ENDPOINT is not set".into()))?;
        let model = var("SCENEQUERY_LLM_MODEL").unwrap_or_else(|| "gpt-4o".into());
        let secs = match var("SCENEQUERY_LLM_TIMEOUT_SECS") {
            Some(s) => s.parse::<u64>().map_err(|_| LlmError::Transport(format!("bad timeout {s:?}")))?,
            None => 60,
        };
        Ok(Self { endpoint, model, api_key: var("SCENEQUERY_LLM_API_KEY"), timeout: Duration::from_secs(secs) })
    }
}

/// OpenAI-style chat-completions client.
pub struct HttpClient {
    agent: ureq::Agent,
    cfg: HttpConfig,
}

impl HttpClient {
    pub fn new(cfg: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(cfg.timeout)).build().into();
        Self { agent, cfg }
    }

    fn url(&self) -> String {
        let base = self.cfg.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }

    fn chat(&self, content: Value) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.cfg.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        });
        let mut req = self.agent.post(&self.url()).header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let reply: Value = req
            .send_json(&body)
            .map_err(|e| LlmError::Transport(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Transport(format!("response has no message content: {reply}")))
    }
}

impl ModelClient for HttpClient {
    fn identity(&self) -> String {
        format!("http:{}", self.cfg.model)
    }

    fn complete(&self, req: &Completion<'_>) -> Result<String, LlmError> {
        self.chat(Value::String(req.prompt.into()))
    }

    fn label_image(&self, req: &VisionRequest<'_>) -> Result<bool, LlmError> {
        let mut parts = vec![serde_json::json!({"type": "text", "text": req.prompt})];
        if let Some(png) = req.image_png {
            let url = format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(png));
            parts.push(serde_json::json!({"type": "image_url", "image_url": {"url": url}}));
        }
        let answer = self.chat(Value::Array(parts))?;
        parse_yes_no(&answer).ok_or_else(|| LlmError::Vision(format!("expected yes or no, got {answer:?}")))
    }
}

pub fn parse_yes_no(answer: &str) -> Option<bool> {
    let a = answer.trim().trim_start_matches(|c: char| !c.is_ascii_alphabetic()).to_ascii_lowercase();
    if a.starts_with("yes") || a.starts_with("true") {
        Some(true)
    } else if a.starts_with("no") || a.starts_with("false") {
        Some(false)
    } else {
        None
    }
}

/// A UDF the query needs but the registry lacks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub signature: String,
    pub description: String,
}

impl Proposal {
    pub fn to_signature(&self) -> UdfSignature {
        UdfSignature::parse(&self.signature, &self.description).expect("proposals are validated when built")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationOutcome {
    Dsl(String),
    Proposals(Vec<Proposal>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Translation {
    pub outcome: TranslationOutcome,
    /// Rejected model answers before the accepted one.
    pub retries: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UdfType {
    Program,
    Model,
}

/// One program candidate as the model wrote it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawProgram {
    pub interpretation: String,
    pub script: String,
    pub params: Vec<ParameterSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProgramBatch {
    pub candidates: Vec<RawProgram>,
    /// Answer entries dropped as malformed.
    pub dropped: usize,
    pub retries: usize,
}

/// Everything the program-generation prompt is built from.
#[derive(Clone, Copy, Debug)]
pub struct ProgramRequest<'a> {
    pub signature: &'a UdfSignature,
    pub rewritten: &'a str,
    pub schema_doc: &'a str,
    pub domains: &'a ActiveDomains,
    pub k: usize,
    pub allow_params: bool,
    pub allow_pixels: bool,
}

fn with_feedback(prompt: &str, history: &[(String, String)]) -> String {
    let mut out = prompt.to_string();
    for (answer, error) in history {
        out.push_str("\n\nYour previous answer was:\n");
        out.push_str(answer.trim());
        out.push_str("\nIt was rejected: ");
        out.push_str(error);
        out.push_str("\nPlease try again.");
    }
    out
}

fn strip_fences(text: &str) -> String {
    text.lines().filter(|l| !l.trim_start().starts_with("```")).collect::<Vec<_>>().join("\n").trim().to_string()
}

/// Finds the JSON object in a model answer, tolerating fences and chatter.
pub fn extract_json(text: &str) -> Option<Value> {
    if let Ok(v) = serde_json::from_str(text.trim()) {
        return Some(v);
    }
    let unfenced = strip_fences(text);
    if let Ok(v) = serde_json::from_str(&unfenced) {
        return Some(v);
    }
    let (a, b) = (unfenced.find('{')?, unfenced.rfind('}')?);
    serde_json::from_str(unfenced.get(a..=b)?).ok()
}

fn answer_list(text: &str) -> Result<Vec<Value>, String> {
    let v = extract_json(text).ok_or("answer is not JSON")?;
    match v.get("answer") {
        Some(Value::Array(items)) => Ok(items.clone()),
        _ => Err("expected an object with an \"answer\" list".into()),
    }
}

fn sorted_list(names: &BTreeSet<String>) -> String {
    names.iter().map(|n| format!("'{n}'")).collect::<Vec<_>>().join(", ")
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

enum ParseAnswer {
    Dsl(String),
    Missing(Vec<Proposal>),
    No,
}

fn interpret_parse(answer: &str, registry: &Registry) -> Result<ParseAnswer, String> {
    if answer.contains("PARSE_NO") {
        return Ok(ParseAnswer::No);
    }
    let body = match answer.find("PARSE_YES") {
        Some(i) => &answer[i + "PARSE_YES".len()..],
        None => answer,
    };
    let text = strip_fences(body).lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
    if text.is_empty() {
        return Err("no DSL query found after PARSE_YES".into());
    }
    let query = dsl::parse(&text).map_err(|e| format!("syntax error: {e}"))?;
    let unresolved = dsl::validate(&query, &registry.snapshot());
    if let Some(u) = unresolved.iter().find(|u| u.registered_arity.is_some()) {
        return Err(u.to_string());
    }
    if unresolved.is_empty() {
        return Ok(ParseAnswer::Dsl(query.to_string()));
    }
    let mut proposals = Vec::new();
    for u in unresolved {
        let description = default_description(&u.name, u.arity, false);
        let sig = UdfSignature::new(&u.name, u.arity, &description).map_err(|e| e.to_string())?;
        if !proposals.iter().any(|p: &Proposal| p.signature.starts_with(&format!("{}(", u.name))) {
            proposals.push(Proposal { signature: sig.text(), description });
        }
    }
    if proposals.iter().map(|p| p.to_signature().name).collect::<BTreeSet<_>>().len() != proposals.len() {
        return Err("a new predicate is used with inconsistent argument counts".into());
    }
    Ok(ParseAnswer::Missing(proposals))
}

fn interpret_proposals(answer: &str, registry: &Registry) -> Result<Vec<Proposal>, String> {
    let mut out: Vec<Proposal> = Vec::new();
    for item in answer_list(answer)? {
        let sig = item.get("signature").and_then(Value::as_str).ok_or("proposal without a signature")?;
        let desc = item.get("description").and_then(Value::as_str).ok_or("proposal without a description")?;
        let parsed = UdfSignature::parse(sig, desc).map_err(|e| e.to_string())?;
        if registry.contains(&parsed.name) {
            return Err(format!("{} is already available; propose only new functions", parsed.name));
        }
        if out.iter().any(|p| p.to_signature().name == parsed.name) {
            continue;
        }
        out.push(Proposal { signature: parsed.text(), description: parsed.description });
    }
    if out.is_empty() {
        return Err("no functions proposed".into());
    }
    Ok(out)
}

fn number(v: &Value, key: &str) -> Result<f64, String> {
    v.get(key).and_then(Value::as_f64).ok_or_else(|| format!("parameter field {key:?} missing or not a number"))
}

fn interpret_program(item: &Value, allow_params: bool) -> Result<RawProgram, String> {
    let text = |keys: &[&str]| keys.iter().find_map(|k| item.get(*k).and_then(Value::as_str)).map(str::to_string);
    let interpretation = text(&["semantic_interpretation", "interpretation"]).ok_or("missing semantic_interpretation")?;
    let script = strip_fences(&text(&["function_implementation", "script"]).ok_or("missing function_implementation")?);
    if script.is_empty() {
        return Err("empty function_implementation".into());
    }
    let mut params = Vec::new();
    match item.get("kwargs") {
        None | Some(Value::Null) => {}
        Some(Value::Object(map)) => {
            for (name, spec) in map {
                if !is_identifier(name) {
                    return Err(format!("parameter name {name:?} is not an identifier"));
                }
                let p = ParameterSpec {
                    name: name.clone(),
                    default: number(spec, "default")?,
                    min: number(spec, "min")?,
                    max: number(spec, "max")?,
                };
                p.check().map_err(|e| e.to_string())?;
                params.push(p);
            }
        }
        Some(_) => return Err("kwargs must be an object".into()),
    }
    if !allow_params && !params.is_empty() {
        return Err("parameters are not allowed for this task".into());
    }
    Ok(RawProgram { interpretation, script, params })
}

fn interpret_udf_type(answer: &str) -> Result<UdfType, String> {
    let norm: String = answer.chars().filter(char::is_ascii_alphanumeric).collect::<String>().to_ascii_lowercase();
    match (norm.contains("programudf"), norm.contains("modeludf")) {
        (true, false) => Ok(UdfType::Program),
        (false, true) => Ok(UdfType::Model),
        _ => Err(format!("expected exactly one of programUDF or modelUDF, got {:?}", answer.trim())),
    }
}

/// The model-facing side of the pipeline.
#[derive(Clone)]
pub struct Gateway {
    pub client: Arc<dyn ModelClient>,
    pub max_retries: usize,
    pub fps: f64,
}

impl Gateway {
    pub fn new(client: Arc<dyn ModelClient>) -> Self {
        Self { client, max_retries: DEFAULT_MAX_RETRIES, fps: DEFAULT_FPS }
    }

    /// Runs `template` until `interpret` accepts an answer, feeding each
    /// rejection back into the next prompt.
    fn ask<T>(
        &self,
        operation: &'static str,
        template: TemplateId,
        concept: &str,
        prompt: &str,
        mut interpret: impl FnMut(&str) -> Result<T, String>,
    ) -> Result<(T, usize), LlmError> {
        let mut history: Vec<(String, String)> = Vec::new();
        for attempt in 0..self.max_retries.max(1) {
            let full = with_feedback(prompt, &history);
            let answer = self.client.complete(&Completion { template, concept, prompt: &full })?;
            match interpret(&answer) {
                Ok(v) => return Ok((v, attempt)),
                Err(e) => history.push((answer, e)),
            }
        }
        let last_error = history.pop().map(|(_, e)| e).unwrap_or_default();
        Err(LlmError::Exhausted { operation, attempts: self.max_retries.max(1), last_error })
    }

    fn dsl_prompt(&self, template: TemplateId, nl: &str, registry: &Registry) -> Result<String, LlmError> {
        let fps = format!("{}", self.fps);
        render(template, &[("fps", &fps), ("functions", &registry.description_block()), ("query", nl)])
    }

    /// Translates `nl` into a DSL query over `registry`, or lists the UDFs
    /// the query would need.
    pub fn translate_query(&self, nl: &str, registry: &Registry) -> Result<Translation, LlmError> {
        let prompt = self.dsl_prompt(TemplateId::ParseQuery, nl, registry)?;
        let (answer, retries) =
            self.ask("query translation", TemplateId::ParseQuery, nl, &prompt, |a| interpret_parse(a, registry))?;
        let outcome = match answer {
            ParseAnswer::Dsl(text) => TranslationOutcome::Dsl(text),
            ParseAnswer::Missing(p) => TranslationOutcome::Proposals(p),
            ParseAnswer::No => {
                let prompt = self.dsl_prompt(TemplateId::ProposeUdfs, nl, registry)?;
                let (p, more) = self.ask("UDF proposal", TemplateId::ProposeUdfs, nl, &prompt, |a| {
                    interpret_proposals(a, registry)
                })?;
                return Ok(Translation { outcome: TranslationOutcome::Proposals(p), retries: retries + more });
            }
        };
        Ok(Translation { outcome, retries })
    }

    fn program_prompt(&self, req: &ProgramRequest<'_>, k: usize) -> Result<String, LlmError> {
        let desc = &req.signature.description;
        let result = desc.strip_prefix("Whether ").unwrap_or(desc);
        let params_rule = if req.allow_params {
            "- The script may use named numeric parameters for thresholds. Declare each one in kwargs with its minimum, maximum, and default value; it is then readable as a float variable of the same name. Leave kwargs empty if no parameter is needed."
        } else {
            "- The script must not use parameters; leave kwargs empty."
        };
        render(
            TemplateId::GeneratePrograms,
            &[
                ("k", &k.to_string()),
                ("rewritten_signature", req.rewritten),
                ("task", &lower_first(desc)),
                ("schema", req.schema_doc),
                ("onames", &sorted_list(&req.domains.onames)),
                ("anames", &sorted_list(&req.domains.anames)),
                ("rnames", &sorted_list(&req.domains.rnames)),
                ("result", result),
                ("params_rule", params_rule),
            ],
        )
    }

    /// Asks for `req.k` program candidates keyed by the UDF name.
    pub fn request_program_candidates(&self, req: &ProgramRequest<'_>) -> Result<ProgramBatch, LlmError> {
        let prompt = self.program_prompt(req, req.k.max(1))?;
        let ((candidates, dropped), retries) = self.ask(
            "program generation",
            TemplateId::GeneratePrograms,
            &req.signature.name,
            &prompt,
            |answer| {
                let items = answer_list(answer)?;
                let mut kept = Vec::new();
                let mut errors = Vec::new();
                for item in &items {
                    match interpret_program(item, req.allow_params) {
                        Ok(p) => kept.push(p),
                        Err(e) => errors.push(e),
                    }
                }
                if kept.is_empty() {
                    return Err(format!("no usable candidate: {}", errors.join("; ")));
                }
                let dropped = errors.len() + kept.len().saturating_sub(req.k);
                kept.truncate(req.k);
                Ok((kept, dropped))
            },
        )?;
        Ok(ProgramBatch { candidates, dropped, retries })
    }

    /// Asks for one corrected version of candidate `index` given the failed
    /// attempts so far. The request is keyed `name#repair<index>`.
    pub fn repair_program(
        &self,
        req: &ProgramRequest<'_>,
        index: usize,
        failures: &[(RawProgram, String)],
    ) -> Result<RawProgram, LlmError> {
        let mut prompt = self.program_prompt(req, 1)?;
        for (p, e) in failures {
            prompt.push_str("\n\nThis script failed:\n");
            prompt.push_str(&p.script);
            prompt.push_str("\nError: ");
            prompt.push_str(e);
            prompt.push_str("\nReturn one corrected candidate in the same format.");
        }
        let concept = format!("{}#repair{index}", req.signature.name);
        let (p, _) = self.ask("program repair", TemplateId::GeneratePrograms, &concept, &prompt, |answer| {
            let items = answer_list(answer)?;
            let first = items.first().ok_or("empty answer list")?;
            interpret_program(first, req.allow_params)
        })?;
        Ok(p)
    }

    pub fn decide_udf_type(&self, signature: &UdfSignature, domains: &ActiveDomains) -> Result<UdfType, LlmError> {
        let mut concepts: BTreeSet<String> = domains.onames.clone();
        concepts.extend(domains.anames.iter().cloned());
        concepts.extend(domains.rnames.iter().cloned());
        let prompt = render(
            TemplateId::DecideUdfType,
            &[("description", &signature.description), ("concepts", &sorted_list(&concepts))],
        )?;
        self.ask("UDF type decision", TemplateId::DecideUdfType, &signature.name, &prompt, interpret_udf_type)
            .map(|(t, _)| t)
    }

    /// Object classes the model considers relevant; all of `onames` when the
    /// answer is unusable or names no known class.
    pub fn relevant_object_classes(&self, signature: &UdfSignature, onames: &BTreeSet<String>) -> BTreeSet<String> {
        let Ok(prompt) = render(
            TemplateId::FilterObjectClasses,
            &[("onames", &sorted_list(onames)), ("signature", &signature.text()), ("description", &signature.description)],
        ) else {
            return onames.clone();
        };
        let answer = self.client.complete(&Completion {
            template: TemplateId::FilterObjectClasses,
            concept: &signature.name,
            prompt: &prompt,
        });
        let picked: BTreeSet<String> = answer
            .ok()
            .and_then(|a| answer_list(&a).ok())
            .unwrap_or_default()
            .iter()
            .filter_map(Value::as_str)
            .filter(|c| onames.contains(*c))
            .map(str::to_string)
            .collect();
        if picked.is_empty() {
            onames.clone()
        } else {
            picked
        }
    }

    /// Asks the vision model whether `signature` holds on `tuple`.
    pub fn vlm_label(
        &self,
        tuple: &TupleView<'_>,
        signature: &UdfSignature,
        images: Option<&dyn ImageSource>,
    ) -> Result<bool, LlmError> {
        let prompt = vlm_prompt(tuple, signature)?;
        let png = match (images, tuple.image_ref) {
            (Some(src), Some(_)) => Some(unit_png(tuple, src)?),
            _ => None,
        };
        let req = VisionRequest {
            concept: &signature.name,
            unit: tuple.unit,
            prompt: &prompt,
            image_png: png.as_deref(),
        };
        let mut last = LlmError::Vision("no attempt made".into());
        for _ in 0..self.max_retries.max(1) {
            match self.client.label_image(&req) {
                Ok(v) => return Ok(v),
                Err(e) => last = e,
            }
        }
        Err(last)
    }
}

pub fn vlm_prompt(tuple: &TupleView<'_>, signature: &UdfSignature) -> Result<String, LlmError> {
    let b0 = tuple.o0.bbox;
    match (&tuple.o1, signature.arity) {
        (None, Arity::Unary) => render(
            TemplateId::VlmLabelAttribute,
            &[("o0_oname", tuple.o0.oname), ("description", &signature.description)],
        ),
        (Some(o1), Arity::Binary) => {
            let b1 = o1.bbox;
            let n = |v: i32| v.to_string();
            let vals = [n(b0.x1), n(b0.y1), n(b0.x2), n(b0.y2), n(b1.x1), n(b1.y1), n(b1.x2), n(b1.y2)];
            render(
                TemplateId::VlmLabelRelationship,
                &[
                    ("o0_oname", tuple.o0.oname),
                    ("o0_x1", &vals[0]),
                    ("o0_y1", &vals[1]),
                    ("o0_x2", &vals[2]),
                    ("o0_y2", &vals[3]),
                    ("o1_oname", o1.oname),
                    ("o1_x1", &vals[4]),
                    ("o1_y1", &vals[5]),
                    ("o1_x2", &vals[6]),
                    ("o1_y2", &vals[7]),
                    ("description", &signature.description),
                ],
            )
        }
        _ => Err(LlmError::Vision(format!("{} does not fit unit {}", signature.text(), tuple.unit))),
    }
}

/// PNG of the unit's patch: the object crop, or the pair with overlays.
pub fn unit_png(tuple: &TupleView<'_>, images: &dyn ImageSource) -> Result<Vec<u8>, LlmError> {
    let frame = images.frame_image(tuple.unit.vid, tuple.unit.fid).map_err(|e| LlmError::Vision(e.to_string()))?;
    let mut boxes = vec![tuple.o0.bbox];
    if let Some(o1) = &tuple.o1 {
        boxes.push(o1.bbox);
    }
    let patch = frame_patch(&frame, &boxes, boxes.len() == 2, Mask::None).map_err(|e| LlmError::Vision(e.to_string()))?;
    let mut out = Cursor::new(Vec::new());
    patch.write_to(&mut out, image::ImageFormat::Png).map_err(|e| LlmError::Vision(e.to_string()))?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::UdfCandidate;

    fn registry(names: &[(&str, Arity)]) -> Registry {
        let r = Registry::new();
        for &(n, a) in names {
            let desc = default_description(n, a, false);
            r.register(UdfCandidate::value_lookup(UdfSignature::new(n, a, &desc).unwrap())).unwrap();
        }
        r
    }

    fn gateway(mock: MockClient) -> Gateway {
        Gateway::new(Arc::new(mock))
    }

    #[test]
    fn every_template_renders_with_its_slots() {
        for id in TemplateId::ALL {
            let names = id.slots();
            let slots: Vec<(&str, &str)> = names.iter().map(|s| (s.as_str(), "X")).collect();
            let text = render(id, &slots).unwrap();
            assert!(!text.contains("{{"), "{}", id.as_str());
        }
        assert!(render(TemplateId::DecideUdfType, &[("description", "d")]).is_err());
    }

    #[test]
    fn attribute_prompt_has_one_box() {
        assert_eq!(TemplateId::VlmLabelAttribute.slots(), vec!["o0_oname", "description"]);
        assert!(TemplateId::VlmLabelRelationship.slots().iter().any(|s| s == "o1_x1"));
    }

    #[test]
    fn translation_paths() {
        let q = "A car is initially far from a truck";
        let reg = registry(&[("car", Arity::Unary), ("truck", Arity::Unary), ("far", Arity::Binary)]);
        let mut m = MockClient::new(MockScript::new());
        m.push(TemplateId::ParseQuery, q, ["PARSE_YES\n(car(o0), truck(o1), far(o0, o1)); Duration((near(o0, o1)), 240)"]);
        let t = gateway(m).translate_query(q, &reg).unwrap();
        assert_eq!(
            t.outcome,
            TranslationOutcome::Proposals(vec![Proposal {
                signature: "near(o0, o1)".into(),
                description: "Whether o0 is near o1".into()
            }])
        );

        let mut m = MockClient::new(MockScript::new());
        m.push(TemplateId::ParseQuery, q, ["PARSE_YES (car(o0), truck(o1)", "PARSE_YES\n```\n(car(o0), truck(o1), far(o0, o1))\n```"]);
        let t = gateway(m).translate_query(q, &reg).unwrap();
        assert_eq!(t.outcome, TranslationOutcome::Dsl("(car(o0), truck(o1), far(o0, o1))".into()));
        assert_eq!(t.retries, 1);

        let mut m = MockClient::new(MockScript::new());
        m.push(TemplateId::ParseQuery, q, ["PARSE_YES (car(o0, o1))"]);
        assert!(matches!(gateway(m).translate_query(q, &reg), Err(LlmError::Exhausted { attempts: 5, .. })));

        let mut m = MockClient::new(MockScript::new());
        m.push(TemplateId::ParseQuery, q, ["PARSE_NO"]);
        m.push(
            TemplateId::ProposeUdfs,
            q,
            [
                r#"{"answer": [{"signature": "far(o0, o1)", "description": "Whether o0 is far from o1"}]}"#,
                r#"```json
{"answer": [{"signature": "behind(o0, o1)", "description": "Whether o0 is behind o1"}]}
```
TERMINATE"#,
            ],
        );
        let t = gateway(m).translate_query(q, &reg).unwrap();
        assert_eq!(t.retries, 1);
        assert!(matches!(&t.outcome, TranslationOutcome::Proposals(p) if p[0].signature == "behind(o0, o1)"));
    }

    fn program_request<'a>(sig: &'a UdfSignature, d: &'a ActiveDomains) -> ProgramRequest<'a> {
        ProgramRequest { signature: sig, rewritten: "behind(...)", schema_doc: "cols", domains: d, k: 10, allow_params: true, allow_pixels: false }
    }

    #[test]
    fn program_candidates_parse_and_validate() {
        let sig = UdfSignature::new("behind", Arity::Binary, "Whether o0 is behind o1").unwrap();
        let d = ActiveDomains::default();
        let mut m = MockClient::new(MockScript::new());
        m.push(
            TemplateId::GeneratePrograms,
            "behind",
            [r#"{"answer": [
                {"semantic_interpretation": "centroid", "function_implementation": "(o0_y1 + o0_y2) < (o1_y1 + o1_y2)"},
                {"semantic_interpretation": "bottom edge", "function_implementation": "o0_y2 < o1_y2", "kwargs": {}},
                {"semantic_interpretation": "margin", "function_implementation": "o0_y2 + margin * height < o1_y2",
                 "kwargs": {"margin": {"min": 0, "max": 0.5, "default": 0.1}}},
                {"semantic_interpretation": "bad", "function_implementation": "true",
                 "kwargs": {"m": {"min": 1, "max": 0, "default": 0.5}}},
                {"function_implementation": "true"}
            ]}"#],
        );
        let b = gateway(m).request_program_candidates(&program_request(&sig, &d)).unwrap();
        assert_eq!(b.candidates.len(), 3);
        assert_eq!(b.dropped, 2);
        assert_eq!(b.candidates[2].params, vec![ParameterSpec { name: "margin".into(), default: 0.1, min: 0.0, max: 0.5 }]);
        assert!(b.candidates[0].params.is_empty());
    }

    #[test]
    fn udf_type_and_classes() {
        let sig = UdfSignature::new("eating", Arity::Binary, "Whether o0 is eating o1").unwrap();
        let mut m = MockClient::new(MockScript::new());
        m.push(TemplateId::DecideUdfType, "eating", [" ModelUDF."]);
        m.push(TemplateId::DecideUdfType, "*", ["maybe"]);
        m.push(TemplateId::FilterObjectClasses, "eating", [r#"{"answer": ["person", "food", "sandwich", "dish"]}"#, r#"{"answer": ["spaceship"]}"#]);
        let g = gateway(m);
        assert_eq!(g.decide_udf_type(&sig, &ActiveDomains::default()).unwrap(), UdfType::Model);
        let other = UdfSignature::new("near", Arity::Binary, "Whether o0 is near o1").unwrap();
        assert!(matches!(g.decide_udf_type(&other, &ActiveDomains::default()), Err(LlmError::Exhausted { .. })));
        let onames: BTreeSet<String> =
            ["person", "food", "sandwich", "dish", "door", "laptop"].iter().map(|s| s.to_string()).collect();
        let want: BTreeSet<String> = ["person", "food", "sandwich", "dish"].iter().map(|s| s.to_string()).collect();
        assert_eq!(g.relevant_object_classes(&sig, &onames), want);
        assert_eq!(g.relevant_object_classes(&sig, &onames), onames);
    }

    #[test]
    fn yes_no() {
        assert_eq!(parse_yes_no("Yes."), Some(true));
        assert_eq!(parse_yes_no(" no, it is not"), Some(false));
        assert_eq!(parse_yes_no("unclear"), None);
    }
}
