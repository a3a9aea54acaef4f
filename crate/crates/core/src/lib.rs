//! Residential EV charging simulation with a bidirectional charger, an expert
//! baseline, a small rule language for policies, and a driver that evolves
//! policies through a text-completion operator.

pub mod baseline;
pub mod evolve;
pub mod ledger;
pub mod market_data;
pub mod policy;
pub mod rewards;
pub mod sim;

pub use baseline::{baseline_decide, BaselineConfig, BaselinePolicy};
pub use market_data::{load_trace, synthetic_trace, ColumnMapping, EnvTrace, SyntheticSpec};
pub use policy::{guardrail_wrap, Policy, PolicyHandle, PolicyProgram, PolicyRegistry, ProgramMode};
pub use rewards::{RewardConfig, RewardMode};
pub use sim::{run_episode, BatteryConfig, ConnectionSession, EpisodeConfig, EpisodeReport, Observation};
