//! Shipped scenarios, Monte Carlo campaigns and their file outputs.

pub mod campaign;
pub mod collision;
pub mod config;
pub mod integrator;
pub mod io;
pub mod stats;

pub use campaign::{
    estimate_safety_probability, prepare, run_campaign, run_replicate, CampaignReport, Prepared,
    ReplicateOutcome, StepRecord,
};
pub use collision::{build_collision_scenario, CollisionPolicy, CollisionScenario, SwarmEstimator};
pub use config::{ControllerMode, ScenarioConfig, ScenarioKind};
pub use integrator::{build_integrator_scenario, IntegratorScenario};
pub use stats::{wilson_interval, SafetyEstimate, Z_95};
