use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use scenequery::llm::{Gateway, HttpClient, HttpConfig, MockClient, ModelClient};
use scenequery::orchestrator::{
    default_extractors, Engine, OracleLabeler, PipelineConfig, QueryResult, Strategy, UnitLabeler, VlmLabeler,
};
use scenequery::registry::UdfSignature;
use scenequery::server::{serve, AppState};
use scenequery::storage::{ImageSource, Store};
use scenequery::testkit::{generate, Declaration, RuleOracle, SyntheticSpec, DECLARATION_FILE};
use scenequery_core::select::Phase;
use scenequery_core::UnitId;

#[derive(Parser)]
#[command(name = "scenequery", version, about = "Query videos through scene graphs, generating missing predicates on demand")]
struct Cli {
    #[arg(long, value_enum, global = true, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LabelerKind {
    Oracle,
    Interactive,
    Vlm,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Mock model script (JSON). Without it the HTTP client reads SCENEQUERY_LLM_* variables.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Flip rate of the rule-based vision model used with --fixtures.
    #[arg(long, default_value_t = 0.0)]
    vlm_noise: f64,
    /// Pipeline configuration (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset, check it, and materialize its stored program UDFs.
    Ingest { manifest: PathBuf },
    /// Run one natural-language query.
    Query {
        text: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        strategy: Option<Strategy>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, value_enum, default_value_t = LabelerKind::Oracle)]
        labeler: LabelerKind,
        #[arg(long)]
        seed: Option<u64>,
        /// Replace every missing predicate with the dummy UDF.
        #[arg(long)]
        no_generation: bool,
        /// Also write the full result as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Serve the labeling HTTP API.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Generate a synthetic dataset with its declaration and mock fixtures.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        videos: u32,
        #[arg(long, default_value_t = 64)]
        frames: u32,
        #[arg(long, default_value_t = 5)]
        objects: u32,
        /// Also render flat-coloured frames.
        #[arg(long)]
        images: bool,
    },
    /// Summarize a saved query result.
    Report { result: PathBuf },
}

fn declaration_near(manifest: &Path) -> Result<Option<Declaration>> {
    let path = manifest.parent().unwrap_or(Path::new(".")).join(DECLARATION_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(Declaration::load(&path)?))
}

fn rule_oracle(store: &Store, decl: &Declaration, flip: f64, seed: u64) -> RuleOracle {
    RuleOracle::new(Arc::new(store.read().clone()), Arc::new(decl.latent_map()), flip, seed)
}

fn load_config(args: &ModelArgs) -> Result<PipelineConfig> {
    Ok(match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

fn open_engine(data: &Path, args: &ModelArgs) -> Result<(Engine, Option<Declaration>)> {
    let store = Store::ingest(data).with_context(|| format!("loading {}", data.display()))?;
    let decl = declaration_near(data)?;
    let client: Arc<dyn ModelClient> = match &args.fixtures {
        Some(path) => {
            let mut mock = MockClient::from_file(path)?;
            if let Some(d) = &decl {
                mock = mock.with_vision(Arc::new(rule_oracle(&store, d, args.vlm_noise, 0)));
            }
            Arc::new(mock)
        }
        None => Arc::new(HttpClient::new(HttpConfig::from_env()?)),
    };
    let engine = Engine::new(store, Gateway::new(client), default_extractors(decl.as_ref()))?;
    Ok((engine, decl))
}

/// Asks on the terminal: y, n, or s to skip.
struct TerminalLabeler;

impl UnitLabeler for TerminalLabeler {
    fn label(&mut self, sig: &UdfSignature, unit: UnitId, phase: Phase) -> Option<bool> {
        let stdin = std::io::stdin();
        loop {
            print!("{} ({}) on {unit} [{phase:?}]? [y/n/s] ", sig.text(), sig.description);
            std::io::stdout().flush().ok();
            let mut line = String::new();
            if stdin.lock().read_line(&mut line).ok()? == 0 {
                return None;
            }
            match line.trim() {
                "y" | "Y" => return Some(true),
                "n" | "N" => return Some(false),
                "s" | "S" => return None,
                _ => println!("answer y, n or s"),
            }
        }
    }
}

fn print_result(r: &QueryResult, format: Format) {
    if format == Format::Json {
        println!("{}", serde_json::to_string_pretty(r).expect("result serializes"));
        return;
    }
    println!("query: {}", r.text);
    println!("dsl:   {}", r.dsl);
    for u in &r.udfs {
        let labels = u.selection.as_ref().map_or(0, |s| s.labels_used);
        println!("udf:   {} ({} candidates, {labels} labels) -> {}", u.signature, u.candidates.len(), u.chosen);
    }
    for w in &r.warnings {
        println!("warning: {w}");
    }
    let ids: Vec<String> = r.matched.iter().map(u32::to_string).collect();
    println!("matched {} video(s): {}", r.matched.len(), ids.join(" "));
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest { manifest } => {
            let store = Store::ingest(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
            let decl = declaration_near(&manifest)?;
            let engine = Engine::new(store, Gateway::new(Arc::new(MockClient::new(Default::default()))), default_extractors(decl.as_ref()))?;
            let counts = engine.store.read().counts().clone();
            let domains = engine.store.active_domains();
            let udfs: Vec<String> = engine.registry.entries().iter().map(|u| u.summary()).collect();
            if cli.format == Format::Json {
                println!("{}", serde_json::to_string_pretty(&json!({ "counts": counts, "domains": domains, "udfs": udfs }))?);
            } else {
                println!(
                    "frames {} objects {} relationships {} attributes {}",
                    counts.frames, counts.objects, counts.relationships, counts.attributes
                );
                println!("object classes: {}", domains.onames.iter().cloned().collect::<Vec<_>>().join(", "));
                println!("udfs: {}", udfs.len());
                for u in udfs {
                    println!("  {u}");
                }
            }
        }
        Command::Query { text, data, strategy, budget, labeler, seed, no_generation, out, model } => {
            let mut cfg = load_config(&model)?;
            if let Some(s) = strategy {
                cfg.strategy = s;
            }
            if let Some(b) = budget {
                cfg.selection.budget = b;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if no_generation {
                cfg.generation = false;
            }
            let (engine, decl) = open_engine(&data, &model)?;
            let mut labeler: Box<dyn UnitLabeler> = match labeler {
                LabelerKind::Oracle => {
                    let Some(d) = &decl else {
                        bail!("the oracle labeler needs {DECLARATION_FILE} next to the manifest");
                    };
                    Box::new(OracleLabeler(rule_oracle(&engine.store, d, 0.0, 0)))
                }
                LabelerKind::Interactive => Box::new(TerminalLabeler),
                LabelerKind::Vlm => {
                    let images: Option<Arc<dyn ImageSource>> = engine.env.images.clone();
                    Box::new(VlmLabeler { gateway: engine.gateway.clone(), store: engine.store.clone(), images })
                }
            };
            let result = engine.run_query(&text, &cfg, labeler.as_mut())?;
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&result)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            print_result(&result, cli.format);
        }
        Command::Serve { data, host, port, model } => {
            let cfg = load_config(&model)?;
            let (engine, _) = open_engine(&data, &model)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                serve(AppState::new(engine, cfg), listener).await?;
                anyhow::Ok(())
            })?;
        }
        Command::Synth { out, seed, videos, frames, objects, images } => {
            let spec = SyntheticSpec {
                seed,
                n_videos: videos,
                n_frames: frames,
                n_objects: objects,
                render_images: images,
                ..Default::default()
            };
            let s = generate(&spec)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            s.write(&out)?;
            if cli.format == Format::Json {
                println!("{}", serde_json::to_string_pretty(&s.declaration)?);
            } else {
                println!("wrote {} (seed {} -> {})", out.display(), s.declaration.requested_seed, s.declaration.final_seed);
                for q in &s.declaration.queries {
                    println!("  {:>2} positives  {}", q.positives.len(), q.text);
                }
            }
        }
        Command::Report { result } => {
            let text = std::fs::read_to_string(&result).with_context(|| format!("reading {}", result.display()))?;
            let r: QueryResult = serde_json::from_str(&text).with_context(|| format!("parsing {}", result.display()))?;
            print_result(&r, cli.format);
        }
    }
    Ok(())
}
