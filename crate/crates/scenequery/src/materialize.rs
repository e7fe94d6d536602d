//! Turning UDFs into stored rows, and the lookups that read them back.

use std::path::Path;
use std::thread;

use scenequery_core::dsl::Arity;
use scenequery_core::scene::{AttributeRecord, RelationshipRecord};
use scenequery_core::{SceneTables, UnitId};

use crate::registry::{eval_udf, Registry, RegistryError, UdfCandidate, UdfEnv, UdfError, UdfKind, UdfSignature};
use crate::storage::{Store, StorageError};

#[derive(Debug, thiserror::Error)]
pub enum MaterializeError {
    #[error("no UDF named {0:?}")]
    Unknown(String),
    #[error("{0} is already materialized")]
    AlreadyMaterialized(String),
    #[error("{0} already names stored rows")]
    NameCollision(String),
    #[error("evaluating {name} on {unit}: {source}")]
    Eval { name: String, unit: UnitId, source: UdfError },
    #[error("{0}")]
    Storage(#[from] StorageError),
    #[error("{0}")]
    Registry(#[from] RegistryError),
}

fn workers(units: usize) -> usize {
    let cpus = thread::available_parallelism().map_or(1, |n| n.get());
    cpus.min(8).min(units / 512 + 1)
}

/// Evaluates `udf` on every unit; results come back in unit order.
pub fn evaluate_all(
    tables: &SceneTables,
    udf: &UdfCandidate,
    units: &[UnitId],
    env: &UdfEnv,
) -> Result<Vec<bool>, (UnitId, UdfError)> {
    let eval = |chunk: &[UnitId]| -> Result<Vec<bool>, (UnitId, UdfError)> {
        chunk
            .iter()
            .map(|&u| match tables.tuple(u) {
                Some(view) => eval_udf(udf, &view, env).map_err(|e| (u, e)),
                None => Ok(false),
            })
            .collect()
    };
    let n = workers(units.len());
    if n <= 1 {
        return eval(units);
    }
    let size = units.len().div_ceil(n);
    thread::scope(|s| {
        let handles: Vec<_> = units.chunks(size).map(|c| s.spawn(move || eval(c))).collect();
        let mut out = Vec::with_capacity(units.len());
        for h in handles {
            out.extend(h.join().expect("evaluation thread panicked")?);
        }
        Ok(out)
    })
}

/// Evaluates `name` once per eligible unit, stores one row per true result,
/// and swaps the registry entry for a value lookup. Returns rows inserted.
pub fn materialize_udf(store: &Store, registry: &Registry, name: &str, env: &UdfEnv) -> Result<usize, MaterializeError> {
    let udf = registry.lookup(name).ok_or_else(|| MaterializeError::Unknown(name.into()))?;
    if matches!(udf.kind, UdfKind::ValueLookup { .. }) {
        return Err(MaterializeError::AlreadyMaterialized(name.into()));
    }
    let arity = udf.signature.arity;
    let hits: Vec<UnitId> = {
        let tables = store.read();
        let d = tables.active_domains();
        if d.onames.contains(name) || d.anames.contains(name) || d.rnames.contains(name) {
            return Err(MaterializeError::NameCollision(name.into()));
        }
        let units = tables.eligible_units(arity, None);
        let results = evaluate_all(&tables, &udf, &units, env)
            .map_err(|(unit, source)| MaterializeError::Eval { name: name.into(), unit, source })?;
        units.into_iter().zip(results).filter(|(_, r)| *r).map(|(u, _)| u).collect()
    };
    store.write(|t| -> Result<(), StorageError> {
        for u in &hits {
            match (arity, u.o1) {
                (Arity::Binary, Some(o1)) => t.insert_relationship(RelationshipRecord {
                    vid: u.vid,
                    fid: u.fid,
                    oid1: u.o0,
                    rname: name.into(),
                    oid2: o1,
                })?,
                _ => t.insert_attribute(AttributeRecord { vid: u.vid, fid: u.fid, oid: u.o0, aname: name.into() })?,
            }
        }
        Ok(())
    })?;
    registry.replace_with_lookup(name)?;
    Ok(hits.len())
}

fn spaced(name: &str) -> String {
    name.replace('_', " ")
}

/// Fallback description for a stored concept.
pub fn default_description(name: &str, arity: Arity, is_class: bool) -> String {
    match (arity, is_class) {
        (Arity::Unary, true) => format!("Whether o0 is a {}", spaced(name)),
        (Arity::Unary, false) => format!("Whether o0 is {}", spaced(name)),
        (Arity::Binary, _) => format!("Whether o0 is {} o1", spaced(name)),
    }
}

/// Registers a value lookup for every class, attribute, and relationship
/// name in the store, skipping names already registered.
pub fn register_stored_concepts(store: &Store, registry: &Registry) -> Result<usize, RegistryError> {
    let d = store.active_domains();
    let described = &store.manifest().descriptions;
    let mut added = 0;
    let groups = [(&d.onames, Arity::Unary, true), (&d.anames, Arity::Unary, false), (&d.rnames, Arity::Binary, false)];
    for (names, arity, is_class) in groups {
        for n in names {
            if registry.contains(n) {
                continue;
            }
            let desc = described.get(n).cloned().unwrap_or_else(|| default_description(n, arity, is_class));
            registry.register(UdfCandidate::value_lookup(UdfSignature::new(n, arity, &desc)?))?;
            added += 1;
        }
    }
    Ok(added)
}

/// Loads the manifest's program UDFs, registers and materializes each.
pub fn prepopulate(store: &Store, registry: &Registry, env: &UdfEnv) -> Result<Vec<(String, usize)>, MaterializeError> {
    let root = store.root().unwrap_or(Path::new(".")).to_path_buf();
    let mut out = Vec::new();
    for rel in &store.manifest().udfs {
        let udf = UdfCandidate::load_program(&root.join(rel))?;
        let name = udf.signature.name.clone();
        registry.register(udf)?;
        let rows = materialize_udf(store, registry, &name, env)?;
        out.push((name, rows));
    }
    Ok(out)
}
