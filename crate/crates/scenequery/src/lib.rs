pub mod features;
pub mod llm;
pub mod materialize;
pub mod modelgen;
pub mod orchestrator;
pub mod programgen;
pub mod registry;
pub mod sandbox;
pub mod server;
pub mod storage;
pub mod testkit;
