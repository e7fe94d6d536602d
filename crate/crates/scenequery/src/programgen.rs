//! Program-based UDF candidates: prompt preparation, syntax verification
//! with repair, and parameter instantiation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use scenequery_core::dsl::Arity;
use scenequery_core::UnitId;

use crate::features::fnv1a;
use crate::llm::{Gateway, LlmError, ProgramRequest, RawProgram};
use crate::registry::{eval_udf, UdfCandidate, UdfEnv, UdfKind, UdfSignature};
use crate::sandbox::columns;
use crate::storage::{StorageError, Store};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProgramGenConfig {
    pub k: usize,
    pub allow_pixels: bool,
    pub allow_params: bool,
    pub n_param_samples: usize,
    pub syntax_sample_size: usize,
    pub max_trials: usize,
    pub seed: u64,
}

impl Default for ProgramGenConfig {
    fn default() -> Self {
        Self { k: 10, allow_pixels: false, allow_params: true, n_param_samples: 5, syntax_sample_size: 10, max_trials: 5, seed: 0 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProgramGenError {
    #[error("cannot rewrite {0:?}: expected name(o0) or name(o0, o1)")]
    Signature(String),
    #[error("{0}")]
    Llm(#[from] LlmError),
    #[error("{0}")]
    Storage(#[from] StorageError),
    #[error("no program candidate for {name} survived verification")]
    NoCandidates { name: String },
}

/// Rewrites `name(o0[, o1])` into the column-level argument list the sandbox
/// binds. Already-rewritten text is refused.
pub fn rewrite_signature(signature: &str, allow_pixels: bool) -> Result<String, ProgramGenError> {
    let bad = || ProgramGenError::Signature(signature.to_string());
    let s = signature.trim();
    let open = s.find('(').ok_or_else(bad)?;
    let inner = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
    let args: Vec<&str> = inner.split(',').map(str::trim).collect();
    let arity = match args.as_slice() {
        ["o0"] => Arity::Unary,
        ["o0", "o1"] => Arity::Binary,
        _ => return Err(bad()),
    };
    let cols: Vec<&str> = columns(arity).iter().copied().filter(|c| allow_pixels || *c != "img").collect();
    Ok(format!("{}({})", &s[..open], cols.join(", ")))
}

fn column_doc(col: &str) -> String {
    match col {
        "img" => "- img: Image. The frame's pixels. img.width() and img.height() give its size; img.pixel(x, y) returns [r, g, b] integers; img.mean_rgb(x1, y1, x2, y2) returns the mean [r, g, b] over a box as floats.".into(),
        "height" => "- height: int. Frame height in pixels.".into(),
        "width" => "- width: int. Frame width in pixels.".into(),
        "o0_o1_rnames" => "- o0_o1_rnames: array of strings. Relationship names from o0 to o1.".into(),
        "o1_o0_rnames" => "- o1_o0_rnames: array of strings. Relationship names from o1 to o0.".into(),
        c => {
            let (obj, field) = c.split_once('_').expect("object column");
            match field {
                "oname" => format!("- {c}: string. Object class of {obj}."),
                "anames" => format!("- {c}: array of strings. Attribute names of {obj}."),
                "x1" => format!("- {c}: int. Left edge of {obj}'s bounding box."),
                "y1" => format!("- {c}: int. Top edge of {obj}'s bounding box."),
                "x2" => format!("- {c}: int. Right edge of {obj}'s bounding box."),
                _ => format!("- {c}: int. Bottom edge of {obj}'s bounding box."),
            }
        }
    }
}

/// One line per variable a script of this arity can read.
pub fn schema_doc(arity: Arity, allow_pixels: bool) -> String {
    columns(arity)
        .iter()
        .filter(|c| allow_pixels || **c != "img")
        .map(|c| column_doc(c))
        .collect::<Vec<_>>()
        .join("\n")
}

fn with_defaults(sig: &UdfSignature, raw: &RawProgram, allow_pixels: bool) -> UdfCandidate {
    UdfCandidate {
        signature: sig.clone(),
        interpretation: raw.interpretation.clone(),
        kind: UdfKind::Program {
            script: raw.script.clone(),
            params: raw.params.clone(),
            bound: raw.params.iter().map(|p| p.default).collect(),
            allow_pixels,
        },
    }
}

/// Compiles `raw` and runs it with default parameters on every sample.
pub fn verify_syntax(
    sig: &UdfSignature,
    raw: &RawProgram,
    store: &Store,
    samples: &[UnitId],
    env: &UdfEnv,
    allow_pixels: bool,
) -> Result<(), String> {
    let udf = with_defaults(sig, raw, allow_pixels);
    udf.check().map_err(|e| e.to_string())?;
    let tables = store.read();
    for &u in samples {
        let view = tables.tuple(u).ok_or_else(|| format!("sample {u} vanished"))?;
        eval_udf(&udf, &view, env).map_err(|e| format!("on sample {u}: {e}"))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum Verification {
    Verified { program: RawProgram, trials: usize },
    Discarded { reason: String, trials: usize },
}

/// Candidates that survived verification, plus what happened to the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub name: String,
    pub requested: usize,
    pub dropped_unparseable: usize,
    pub outcomes: Vec<Verification>,
    pub concrete: usize,
}

pub struct Generated {
    pub candidates: Vec<UdfCandidate>,
    pub report: GenerationReport,
}

/// Verifies candidate `index`, asking for a repaired version after each
/// failure until `max_trials` attempts have been made.
#[allow(clippy::too_many_arguments)]
fn verify_with_repair(
    index: usize,
    first: RawProgram,
    req: &ProgramRequest<'_>,
    store: &Store,
    samples: &[UnitId],
    env: &UdfEnv,
    cfg: &ProgramGenConfig,
    gateway: &Gateway,
) -> Verification {
    let mut failures: Vec<(RawProgram, String)> = Vec::new();
    let mut current = first;
    for trial in 1..=cfg.max_trials.max(1) {
        match verify_syntax(req.signature, &current, store, samples, env, cfg.allow_pixels) {
            Ok(()) => return Verification::Verified { program: current, trials: trial },
            Err(e) => failures.push((current.clone(), e)),
        }
        if trial == cfg.max_trials.max(1) {
            break;
        }
        match gateway.repair_program(req, index, &failures) {
            Ok(next) => current = next,
            Err(e) => {
                return Verification::Discarded { reason: format!("repair failed: {e}"), trials: trial };
            }
        }
    }
    let reason = failures.pop().map(|(_, e)| e).unwrap_or_default();
    Verification::Discarded { reason, trials: cfg.max_trials.max(1) }
}

/// Binds parameters: all defaults, then `n_param_samples` joint uniform draws.
pub fn instantiate_parameters(
    sig: &UdfSignature,
    raw: &RawProgram,
    cfg: &ProgramGenConfig,
    index: usize,
) -> Vec<UdfCandidate> {
    let base = with_defaults(sig, raw, cfg.allow_pixels);
    if raw.params.is_empty() {
        return vec![base];
    }
    let seed = cfg.seed ^ fnv1a(sig.name.as_bytes()) ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![base];
    for _ in 0..cfg.n_param_samples {
        let bound = raw
            .params
            .iter()
            .map(|p| if p.max > p.min { rng.gen_range(p.min..=p.max) } else { p.min })
            .collect();
        out.push(UdfCandidate {
            signature: sig.clone(),
            interpretation: raw.interpretation.clone(),
            kind: UdfKind::Program { script: raw.script.clone(), params: raw.params.clone(), bound, allow_pixels: cfg.allow_pixels },
        });
    }
    out
}

/// Requests, verifies, and instantiates program candidates for `sig`.
pub fn generate(
    sig: &UdfSignature,
    store: &Store,
    cfg: &ProgramGenConfig,
    gateway: &Gateway,
    env: &UdfEnv,
) -> Result<Generated, ProgramGenError> {
    let rewritten = rewrite_signature(&sig.text(), cfg.allow_pixels)?;
    let schema = schema_doc(sig.arity, cfg.allow_pixels);
    let domains = store.active_domains();
    let req = ProgramRequest {
        signature: sig,
        rewritten: &rewritten,
        schema_doc: &schema,
        domains: &domains,
        k: cfg.k.max(1),
        allow_params: cfg.allow_params,
        allow_pixels: cfg.allow_pixels,
    };
    let batch = gateway.request_program_candidates(&req)?;
    let samples = store.sample_tuples(sig.arity, cfg.syntax_sample_size.max(1), None, cfg.seed)?;
    let mut outcomes = Vec::new();
    let mut candidates = Vec::new();
    for (i, raw) in batch.candidates.into_iter().enumerate() {
        let outcome = verify_with_repair(i, raw, &req, store, &samples, env, cfg, gateway);
        if let Verification::Verified { program, .. } = &outcome {
            candidates.extend(instantiate_parameters(sig, program, cfg, i));
        }
        outcomes.push(outcome);
    }
    if candidates.is_empty() {
        return Err(ProgramGenError::NoCandidates { name: sig.name.clone() });
    }
    let report = GenerationReport {
        name: sig.name.clone(),
        requested: cfg.k,
        dropped_unparseable: batch.dropped,
        outcomes,
        concrete: candidates.len(),
    };
    Ok(Generated { candidates, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::ParameterSpec;

    #[test]
    fn rewriting() {
        let r = rewrite_signature("behind(o0, o1)", false).unwrap();
        assert!(r.starts_with("behind(o0_oname, o0_x1,"));
        assert!(r.ends_with("o0_o1_rnames, o1_o0_rnames, height, width)"));
        assert_eq!(rewrite_signature("red(o0)", true).unwrap(), "red(img, o0_oname, o0_x1, o0_y1, o0_x2, o0_y2, o0_anames, height, width)");
        assert!(rewrite_signature(&r, false).is_err());
    }

    #[test]
    fn instantiation_counts_and_determinism() {
        let sig = UdfSignature::new("behind", Arity::Binary, "Whether o0 is behind o1").unwrap();
        let cfg = ProgramGenConfig::default();
        let plain = RawProgram { interpretation: "c".into(), script: "true".into(), params: vec![] };
        assert_eq!(instantiate_parameters(&sig, &plain, &cfg, 0).len(), 1);
        let p = |n: &str| ParameterSpec { name: n.into(), default: 0.1, min: 0.0, max: 0.5 };
        let one = RawProgram { params: vec![p("margin")], ..plain.clone() };
        let two = RawProgram { params: vec![p("a"), p("b")], ..plain };
        assert_eq!(instantiate_parameters(&sig, &one, &cfg, 0).len(), 6);
        let a = instantiate_parameters(&sig, &two, &cfg, 3);
        assert_eq!(a.len(), 6);
        assert_eq!(a, instantiate_parameters(&sig, &two, &cfg, 3));
        for c in &a {
            c.check().unwrap();
        }
    }

    #[test]
    fn schema_lists_columns() {
        let d = schema_doc(Arity::Unary, false);
        assert_eq!(d.lines().count(), 8);
        assert!(!d.contains("img"));
        assert!(schema_doc(Arity::Binary, true).contains("img.mean_rgb"));
    }
}
