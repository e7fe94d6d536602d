use std::time::Duration;

use scenequery::materialize::register_stored_concepts;
use scenequery::registry::{
    eval_udf, make_dummy, ParameterSpec, Registry, RegistryError, UdfCandidate, UdfEnv, UdfError, UdfKind, UdfSignature,
};
use scenequery::sandbox::{Limits, SandboxError};
use scenequery::testkit::{generate_exact, SyntheticSpec};
use scenequery_core::dsl::{parse, validate, Arity};
use scenequery_core::exec::evaluate;
use scenequery_core::UnitId;

fn program(name: &str, arity: Arity, script: &str) -> UdfCandidate {
    let desc = if arity == Arity::Unary { format!("Whether o0 is {name}") } else { format!("Whether o0 is {name} o1") };
    UdfCandidate {
        signature: UdfSignature::new(name, arity, &desc).unwrap(),
        interpretation: String::new(),
        kind: UdfKind::Program { script: script.into(), params: vec![], bound: vec![], allow_pixels: false },
    }
}

#[test]
fn stored_concepts_become_prompt_lines() {
    let s = generate_exact(&SyntheticSpec { n_videos: 2, n_frames: 8, ..Default::default() }, 3);
    let store = s.store();
    let r = Registry::new();
    let added = register_stored_concepts(&store, &r).unwrap();
    let d = store.active_domains();
    assert_eq!(added, d.onames.len() + d.anames.len() + d.rnames.len());
    assert_eq!(register_stored_concepts(&store, &r).unwrap(), 0);
    let block = r.description_block();
    let lines: Vec<&str> = block.lines().collect();
    assert_eq!(lines.len(), added);
    assert!(lines.contains(&"car(o0): Whether o0 is a car"));
    assert!(lines.iter().any(|l| l.starts_with("left_of(o0, o1): Whether o0 ")));
    for l in lines {
        let (sig, desc) = l.split_once(": ").unwrap();
        assert!(desc.starts_with("Whether"), "{l}");
        UdfSignature::parse(sig, desc).unwrap();
    }
}

#[test]
fn value_lookups_agree_with_the_tables() {
    let s = generate_exact(&SyntheticSpec { n_videos: 2, n_frames: 8, ..Default::default() }, 3);
    let car = UdfCandidate::value_lookup(UdfSignature::new("car", Arity::Unary, "Whether o0 is a car").unwrap());
    let left = UdfCandidate::value_lookup(UdfSignature::new("left_of", Arity::Binary, "Whether o0 is left of o1").unwrap());
    let env = UdfEnv::default();
    for u in s.tables.eligible_units(Arity::Unary, None) {
        let t = s.tables.tuple(u).unwrap();
        assert_eq!(eval_udf(&car, &t, &env).unwrap(), t.o0.oname == "car");
    }
    for u in s.tables.eligible_units(Arity::Binary, None) {
        let t = s.tables.tuple(u).unwrap();
        assert_eq!(eval_udf(&left, &t, &env).unwrap(), t.o0_o1_rnames.contains("left_of"));
        assert!(eval_udf(&make_dummy(&left.signature), &t, &env).unwrap());
    }
}

#[test]
fn catalog_drives_the_executor() {
    let s = generate_exact(&SyntheticSpec { n_videos: 4, n_frames: 16, ..Default::default() }, 3);
    let store = s.store();
    let r = Registry::new();
    register_stored_concepts(&store, &r).unwrap();
    let q = parse("(car(o0), lower(o0))").unwrap();
    let missing = validate(&q, &r.snapshot());
    assert_eq!(missing.len(), 1);
    assert_eq!(missing[0].name, "lower");

    r.register(program("lower", Arity::Unary, "o0_y1 >= height / 2")).unwrap();
    assert!(validate(&q, &r.snapshot()).is_empty());
    let env = UdfEnv::default();
    let catalog = r.snapshot();
    let got = evaluate(&q, &s.tables, &catalog.bind(&env)).unwrap();
    let want = s
        .tables
        .eligible_units(Arity::Unary, None)
        .into_iter()
        .filter(|&u| {
            let t = s.tables.tuple(u).unwrap();
            t.o0.oname == "car" && t.o0.bbox.y1 as u32 >= s.tables.height() / 2
        })
        .map(|u| u.vid)
        .collect();
    assert_eq!(got, want);
}

#[test]
fn runaway_and_failing_scripts_are_typed() {
    let s = generate_exact(&SyntheticSpec { n_videos: 1, n_frames: 2, ..Default::default() }, 3);
    let t = s.tables.tuple(UnitId::object(0, 0, 0)).unwrap();
    let env = UdfEnv { limits: Limits { timeout: Duration::from_millis(50) }, ..Default::default() };
    let spin = program("spin", Arity::Unary, "loop { }");
    assert!(matches!(eval_udf(&spin, &t, &env), Err(UdfError::Sandbox(SandboxError::Timeout(_)))));
    let num = program("num", Arity::Unary, "o0_x1 + 1");
    assert!(matches!(eval_udf(&num, &t, &env), Err(UdfError::Sandbox(SandboxError::NotBoolean(_)))));
    let missing = program("missing", Arity::Unary, "o1_x1 > 0");
    assert!(matches!(missing.check(), Err(RegistryError::Sandbox(_))) || eval_udf(&missing, &t, &env).is_err());
}

#[test]
fn saved_programs_reload_and_edits_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let mut far = program("far_apart", Arity::Binary, "let dx = o0_x1 - o1_x1;\ndx * dx > ratio * width * width");
    far.kind = UdfKind::Program {
        script: "let dx = o0_x1 - o1_x1;\ndx * dx > ratio * width * width".into(),
        params: vec![ParameterSpec { name: "ratio".into(), default: 0.25, min: 0.0, max: 1.0 }],
        bound: vec![0.5],
        allow_pixels: false,
    };
    far.check().unwrap();
    let meta = far.save_program(dir.path()).unwrap();
    assert_eq!(UdfCandidate::load_program(&meta).unwrap(), far);

    let text = std::fs::read_to_string(&meta).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["bound"] = serde_json::json!([2.0]);
    std::fs::write(&meta, v.to_string()).unwrap();
    assert!(matches!(UdfCandidate::load_program(&meta), Err(RegistryError::ParameterBound { .. })));

    assert!(make_dummy(&far.signature).save_program(dir.path()).is_err());
}

#[test]
fn registry_rejects_duplicates_and_keeps_registration_order() {
    let r = Registry::new();
    r.register(program("b_rel", Arity::Binary, "true")).unwrap();
    r.register(program("a_attr", Arity::Unary, "true")).unwrap();
    assert!(matches!(r.register(program("a_attr", Arity::Unary, "false")), Err(RegistryError::Duplicate(_))));
    let names: Vec<String> = r.entries().iter().map(|u| u.signature.name.clone()).collect();
    assert_eq!(names, ["b_rel", "a_attr"]);
    r.replace_with_lookup("a_attr").unwrap();
    assert!(matches!(r.lookup("a_attr").unwrap().kind, UdfKind::ValueLookup { ref lookup } if lookup == "a_attr"));
    assert!(matches!(r.replace_with_lookup("zzz"), Err(RegistryError::Unknown(_))));
}
