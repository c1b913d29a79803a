pub mod actuation;
pub mod baselines;
pub mod clock;
pub mod context;
pub mod eval;
pub mod gateway;
pub mod guardrail;
pub mod memory;
pub mod registry;
pub mod session;
pub mod sim;
pub mod telemetry;
pub mod tuner;
