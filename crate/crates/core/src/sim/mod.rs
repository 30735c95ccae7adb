//! Running, recording and replaying marketplace simulations.

pub mod config;
pub mod driver;
pub mod replay;
pub mod report;
pub mod transcript;

pub use config::{AgentSpec, BackendConfig, ConfigError, FieldError, SimConfig};
pub use driver::{run_simulation, Execution, Market, OutputPaths, RunArtifacts, RunOutcome, SimError, Simulation};
pub use replay::{replay_records, replay_text, ReplayError, ReplaySummary};
pub use report::{ExplanationEntry, Report, RunStats};
pub use transcript::{parse_transcript, ActionOutcome, ActionView, MessageStatus, PromptView, ResponseView, TranscriptRecord};
