//! UDF definitions, the registry, and evaluation of every UDF kind.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use scenequery_core::dsl::{Arity, PredicateCatalog};
use scenequery_core::mlp::Mlp;
use scenequery_core::{PredicateEvaluator, TupleView};

use crate::features::{build_features, ExtractorSet, FeatureError};
use crate::sandbox::{self, Limits, Program, SandboxError};
use crate::storage::ImageSource;

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("a UDF named {0:?} is already registered")]
    Duplicate(String),
    #[error("no UDF named {0:?}")]
    Unknown(String),
    #[error("invalid signature {0:?}: expected name(o0) or name(o0, o1)")]
    Signature(String),
    #[error("description of {name} must start with \"Whether\": {description:?}")]
    Description { name: String, description: String },
    #[error("parameter {name}: need min <= default <= max, got {min} / {default} / {max}")]
    ParameterRange { name: String, min: f64, default: f64, max: f64 },
    #[error("parameter {name} bound to {value}, outside [{min}, {max}]")]
    ParameterBound { name: String, value: f64, min: f64, max: f64 },
    #[error("{0}")]
    Sandbox(#[from] SandboxError),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("model artifact line {line}: {message}")]
    Artifact { line: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum UdfError {
    #[error("{name} takes {expected} object(s), unit has {found}")]
    Arity { name: String, expected: usize, found: usize },
    #[error("{0}")]
    Sandbox(#[from] SandboxError),
    #[error("{0}")]
    Features(#[from] FeatureError),
    #[error("no UDF named {0:?}")]
    Unknown(String),
}

pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UdfSignature {
    pub name: String,
    pub arity: Arity,
    pub description: String,
}

impl UdfSignature {
    pub fn new(name: &str, arity: Arity, description: &str) -> Result<Self, RegistryError> {
        if !is_identifier(name) {
            return Err(RegistryError::Signature(name.to_string()));
        }
        if !description.starts_with("Whether") {
            return Err(RegistryError::Description { name: name.into(), description: description.into() });
        }
        Ok(Self { name: name.into(), arity, description: description.into() })
    }

    /// Parses `name(o0)` / `name(o0, o1)`.
    pub fn parse(text: &str, description: &str) -> Result<Self, RegistryError> {
        let bad = || RegistryError::Signature(text.to_string());
        let text = text.trim();
        let open = text.find('(').ok_or_else(bad)?;
        let inner = text[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let args: Vec<&str> = inner.split(',').map(str::trim).collect();
        let arity = match args.as_slice() {
            ["o0"] => Arity::Unary,
            ["o0", "o1"] => Arity::Binary,
            _ => return Err(bad()),
        };
        Self::new(text[..open].trim(), arity, description.trim())
    }

    pub fn text(&self) -> String {
        match self.arity {
            Arity::Unary => format!("{}(o0)", self.name),
            Arity::Binary => format!("{}(o0, o1)", self.name),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub default: f64,
    pub min: f64,
    pub max: f64,
}

impl ParameterSpec {
    pub fn check(&self) -> Result<(), RegistryError> {
        let ok = self.min.is_finite()
            && self.max.is_finite()
            && self.default.is_finite()
            && self.min <= self.default
            && self.default <= self.max;
        if ok {
            Ok(())
        } else {
            Err(RegistryError::ParameterRange {
                name: self.name.clone(),
                min: self.min,
                default: self.default,
                max: self.max,
            })
        }
    }
}

/// A trained classifier plus what it needs at inference time.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArtifact {
    pub extractor: String,
    pub threshold: f64,
    pub mlp: Mlp,
}

pub const ARTIFACT_HEADER: &str = "scenequery-mlp 1";

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

impl ModelArtifact {
    /// Text form: header, `extractor`, `threshold`, `dims in hidden 1`, then
    /// `w1` with one row per hidden unit, `b1`, `w2`, `b2` on one line each.
    pub fn to_text(&self) -> String {
        let (d, h) = (self.mlp.input_dim(), self.mlp.hidden_dim());
        let p = self.mlp.params();
        let mut s = format!(
            "{ARTIFACT_HEADER}\nextractor {}\nthreshold {}\ndims {d} {h} 1\nw1\n",
            self.extractor, self.threshold
        );
        for j in 0..h {
            s.push_str(&join(&p[j * d..(j + 1) * d]));
            s.push('\n');
        }
        let b1 = h * d;
        s.push_str(&format!("b1\n{}\nw2\n{}\nb2\n{}\n", join(&p[b1..b1 + h]), join(&p[b1 + h..b1 + 2 * h]), p[b1 + 2 * h]));
        s
    }

    pub fn from_text(text: &str) -> Result<Self, RegistryError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines.next().ok_or(RegistryError::Artifact { line: 0, message: format!("missing {what}") })
        };
        let err = |line: usize, message: String| RegistryError::Artifact { line, message };
        let (n, header) = next("header")?;
        if header != ARTIFACT_HEADER {
            return Err(err(n, format!("unknown header {header:?}")));
        }
        let field = |(n, l): (usize, &str), key: &str| -> Result<String, RegistryError> {
            l.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| err(n, format!("expected {key}")))
        };
        let extractor = field(next("extractor")?, "extractor")?;
        let t = next("threshold")?;
        let threshold: f64 = field(t, "threshold")?.parse().map_err(|_| err(t.0, "bad threshold".into()))?;
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(err(t.0, format!("threshold {threshold} outside (0, 1)")));
        }
        let dl = next("dims")?;
        let dims: Vec<usize> = field(dl, "dims")?
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| err(dl.0, "bad dims".into())))
            .collect::<Result<_, _>>()?;
        let (d, h) = match dims.as_slice() {
            [d, h, 1] if *d > 0 && *h > 0 => (*d, *h),
            _ => return Err(err(dl.0, "dims must be `in hidden 1`".into())),
        };
        let mut params = Vec::with_capacity(Mlp::param_count(d, h));
        let mut section = |name: &str, rows: usize, width: usize, params: &mut Vec<f64>| -> Result<(), RegistryError> {
            let (n, l) = next(name)?;
            if l != name {
                return Err(err(n, format!("expected section {name}")));
            }
            for _ in 0..rows {
                let (n, l) = next(name)?;
                let row: Vec<f64> = l
                    .split_whitespace()
                    .map(|x| x.parse::<f64>().map_err(|_| err(n, format!("bad number {x:?}"))))
                    .collect::<Result<_, _>>()?;
                if row.len() != width {
                    return Err(err(n, format!("{name} row has {} values, expected {width}", row.len())));
                }
                params.extend(row);
            }
            Ok(())
        };
        section("w1", h, d, &mut params)?;
        section("b1", 1, h, &mut params)?;
        section("w2", 1, h, &mut params)?;
        section("b2", 1, 1, &mut params)?;
        let mlp = Mlp::from_params(d, h, params).ok_or_else(|| err(0, "parameter count mismatch".into()))?;
        Ok(Self { extractor, threshold, mlp })
    }
}

impl Serialize for ModelArtifact {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_text())
    }
}

impl<'de> Deserialize<'de> for ModelArtifact {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        ModelArtifact::from_text(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UdfKind {
    /// Membership of `lookup` in the tuple's class name, attribute names, or
    /// subject-to-target relationship names.
    ValueLookup { lookup: String },
    Program {
        script: String,
        params: Vec<ParameterSpec>,
        /// One value per entry of `params`, same order.
        bound: Vec<f64>,
        allow_pixels: bool,
    },
    DistilledModel { model: ModelArtifact },
    Dummy,
}

impl UdfKind {
    pub fn label(&self) -> &'static str {
        match self {
            UdfKind::ValueLookup { .. } => "value_lookup",
            UdfKind::Program { .. } => "program",
            UdfKind::DistilledModel { .. } => "distilled_model",
            UdfKind::Dummy => "dummy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdfCandidate {
    pub signature: UdfSignature,
    #[serde(default)]
    pub interpretation: String,
    #[serde(flatten)]
    pub kind: UdfKind,
}

impl UdfCandidate {
    pub fn value_lookup(signature: UdfSignature) -> Self {
        let lookup = signature.name.clone();
        Self { signature, interpretation: String::new(), kind: UdfKind::ValueLookup { lookup } }
    }

    pub fn is_dummy(&self) -> bool {
        matches!(self.kind, UdfKind::Dummy)
    }

    /// Checks that the populated fields fit the kind.
    pub fn check(&self) -> Result<(), RegistryError> {
        if let UdfKind::Program { script, params, bound, allow_pixels } = &self.kind {
            for p in params {
                p.check()?;
            }
            if bound.len() != params.len() {
                return Err(RegistryError::ParameterRange {
                    name: format!("{} bound values", bound.len()),
                    min: 0.0,
                    default: bound.len() as f64,
                    max: params.len() as f64,
                });
            }
            for (p, &v) in params.iter().zip(bound) {
                if !(p.min..=p.max).contains(&v) {
                    return Err(RegistryError::ParameterBound { name: p.name.clone(), value: v, min: p.min, max: p.max });
                }
            }
            let binding = self.binding();
            Program { script, arity: self.signature.arity, params: &binding, allow_pixels: *allow_pixels }.check()?;
        }
        Ok(())
    }

    /// Bound parameter values by name (programs only).
    pub fn binding(&self) -> Vec<(String, f64)> {
        match &self.kind {
            UdfKind::Program { params, bound, .. } => {
                params.iter().zip(bound).map(|(p, &v)| (p.name.clone(), v)).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Short human-readable description for reports.
    pub fn summary(&self) -> String {
        let mut s = format!("{} [{}]", self.signature.name, self.kind.label());
        if !self.interpretation.is_empty() {
            s.push_str(": ");
            s.push_str(&self.interpretation);
        }
        let b = self.binding();
        if !b.is_empty() {
            let parts: Vec<String> = b.iter().map(|(n, v)| format!("{n}={v}")).collect();
            s.push_str(&format!(" ({})", parts.join(", ")));
        }
        s
    }

    /// Writes a program UDF as `<name>.rhai` plus `<name>.json` metadata.
    pub fn save_program(&self, dir: &Path) -> Result<PathBuf, RegistryError> {
        let UdfKind::Program { script, params, bound, allow_pixels } = &self.kind else {
            return Err(RegistryError::File { path: dir.into(), message: "only program UDFs are stored as scripts".into() });
        };
        let file_err = |path: &Path| {
            let path = path.to_path_buf();
            move |e: std::io::Error| RegistryError::File { path, message: e.to_string() }
        };
        fs::create_dir_all(dir).map_err(file_err(dir))?;
        let name = &self.signature.name;
        let script_path = dir.join(format!("{name}.rhai"));
        fs::write(&script_path, script).map_err(file_err(&script_path))?;
        let meta = ProgramFile {
            signature: self.signature.clone(),
            interpretation: self.interpretation.clone(),
            script: format!("{name}.rhai"),
            params: params.clone(),
            bound: bound.clone(),
            allow_pixels: *allow_pixels,
        };
        let meta_path = dir.join(format!("{name}.json"));
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n";
        fs::write(&meta_path, text).map_err(file_err(&meta_path))?;
        Ok(meta_path)
    }

    pub fn load_program(meta_path: &Path) -> Result<Self, RegistryError> {
        let file_err = |path: &Path, message: String| RegistryError::File { path: path.to_path_buf(), message };
        let text = fs::read_to_string(meta_path).map_err(|e| file_err(meta_path, e.to_string()))?;
        let meta: ProgramFile = serde_json::from_str(&text).map_err(|e| file_err(meta_path, e.to_string()))?;
        let script_path = meta_path.parent().unwrap_or(Path::new(".")).join(&meta.script);
        let script = fs::read_to_string(&script_path).map_err(|e| file_err(&script_path, e.to_string()))?;
        let udf = Self {
            signature: UdfSignature::new(&meta.signature.name, meta.signature.arity, &meta.signature.description)?,
            interpretation: meta.interpretation,
            kind: UdfKind::Program { script, params: meta.params, bound: meta.bound, allow_pixels: meta.allow_pixels },
        };
        udf.check()?;
        Ok(udf)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ProgramFile {
    signature: UdfSignature,
    #[serde(default)]
    interpretation: String,
    script: String,
    #[serde(default)]
    params: Vec<ParameterSpec>,
    #[serde(default)]
    bound: Vec<f64>,
    #[serde(default)]
    allow_pixels: bool,
}

pub fn make_dummy(signature: &UdfSignature) -> UdfCandidate {
    UdfCandidate {
        signature: signature.clone(),
        interpretation: "always true; equivalent to dropping the predicate".into(),
        kind: UdfKind::Dummy,
    }
}

/// What UDF evaluation may need besides the tuple.
#[derive(Clone, Default)]
pub struct UdfEnv {
    pub images: Option<Arc<dyn ImageSource>>,
    pub extractors: ExtractorSet,
    pub limits: Limits,
}

pub fn eval_udf(udf: &UdfCandidate, tuple: &TupleView<'_>, env: &UdfEnv) -> Result<bool, UdfError> {
    let sig = &udf.signature;
    if tuple.arity() != sig.arity {
        return Err(UdfError::Arity { name: sig.name.clone(), expected: sig.arity.count(), found: tuple.arity().count() });
    }
    match &udf.kind {
        UdfKind::ValueLookup { lookup } => Ok(match sig.arity {
            Arity::Unary => tuple.o0.oname == lookup || tuple.o0.anames.contains(lookup),
            Arity::Binary => tuple.o0_o1_rnames.contains(lookup),
        }),
        UdfKind::Dummy => Ok(true),
        UdfKind::Program { script, allow_pixels, .. } => {
            let binding = udf.binding();
            let program = Program { script, arity: sig.arity, params: &binding, allow_pixels: *allow_pixels };
            Ok(program.run(tuple, env.images.clone(), &env.limits)?)
        }
        UdfKind::DistilledModel { model } => {
            let extractor = env.extractors.get(&model.extractor)?;
            let x = build_features(tuple, extractor.as_ref(), env.images.as_deref())?;
            Ok(model.mlp.probability(&x) >= model.threshold)
        }
    }
}

/// Registered UDFs by name, remembering registration order.
#[derive(Default)]
pub struct Registry {
    inner: RwLock<(BTreeMap<String, Arc<UdfCandidate>>, Vec<String>)>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, udf: UdfCandidate) -> Result<(), RegistryError> {
        udf.check()?;
        let mut g = self.inner.write().unwrap_or_else(|e| e.into_inner());
        let name = udf.signature.name.clone();
        if g.0.contains_key(&name) {
            return Err(RegistryError::Duplicate(name));
        }
        g.0.insert(name.clone(), Arc::new(udf));
        g.1.push(name);
        Ok(())
    }

    pub fn lookup(&self, name: &str) -> Option<Arc<UdfCandidate>> {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).0.get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.lookup(name).is_some()
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries in registration order.
    pub fn entries(&self) -> Vec<Arc<UdfCandidate>> {
        let g = self.inner.read().unwrap_or_else(|e| e.into_inner());
        g.1.iter().map(|n| g.0[n].clone()).collect()
    }

    /// Swaps `name` for a value lookup of the same signature.
    pub fn replace_with_lookup(&self, name: &str) -> Result<(), RegistryError> {
        let mut g = self.inner.write().unwrap_or_else(|e| e.into_inner());
        let entry = g.0.get_mut(name).ok_or_else(|| RegistryError::Unknown(name.into()))?;
        *entry = Arc::new(UdfCandidate::value_lookup(entry.signature.clone()));
        Ok(())
    }

    /// One `name(args): description` line per UDF, for prompts.
    pub fn description_block(&self) -> String {
        self.entries()
            .iter()
            .map(|u| format!("{}: {}", u.signature.text(), u.signature.description))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// A frozen copy for query evaluation.
    pub fn snapshot(&self) -> Catalog {
        Catalog(self.inner.read().unwrap_or_else(|e| e.into_inner()).0.clone())
    }
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries().iter().map(|u| u.summary())).finish()
    }
}

/// Immutable name-to-UDF map.
#[derive(Clone, Debug, Default)]
pub struct Catalog(pub BTreeMap<String, Arc<UdfCandidate>>);

impl Catalog {
    pub fn with(mut self, udf: UdfCandidate) -> Self {
        self.0.insert(udf.signature.name.clone(), Arc::new(udf));
        self
    }

    pub fn bind<'a>(&'a self, env: &'a UdfEnv) -> Bound<'a> {
        Bound { catalog: self, env }
    }
}

impl PredicateCatalog for Catalog {
    fn arity_of(&self, name: &str) -> Option<Arity> {
        self.0.get(name).map(|u| u.signature.arity)
    }
}

/// A catalog with an evaluation environment, ready for the executor.
#[derive(Clone, Copy)]
pub struct Bound<'a> {
    catalog: &'a Catalog,
    env: &'a UdfEnv,
}

impl PredicateCatalog for Bound<'_> {
    fn arity_of(&self, name: &str) -> Option<Arity> {
        self.catalog.arity_of(name)
    }
}

impl PredicateEvaluator for Bound<'_> {
    type Error = UdfError;

    fn holds(&self, name: &str, tuple: &TupleView<'_>) -> Result<bool, UdfError> {
        let udf = self.catalog.0.get(name).ok_or_else(|| UdfError::Unknown(name.into()))?;
        eval_udf(udf, tuple, self.env)
    }
}

/// Column list of the rewritten signature, for docs and prompts.
pub fn column_list(arity: Arity) -> &'static [&'static str] {
    sandbox::columns(arity)
}
