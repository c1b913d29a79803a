//! Deterministic simulated host for desk-scale verification.

mod host;
mod surface;

pub use host::{simulate_raw, simulate_window, SimHost, SimState, SimWindow, TruthRecord};
pub use surface::{
    grid_values, region_holds, BoundSurface, CompareOp, Condition, Coupling, Effect, IpcBias, IpcModel,
    ResponseSurface, Shape, SurfaceError, Trap, AMBIENT_KNOBS,
};

use crate::registry::Registry;

/// Scenario files shipped with the crate, by name.
pub const SCENARIOS: [(&str, &str); 11] = [
    ("quadratic8", include_str!("../../data/scenarios/quadratic8.toml")),
    ("coupled16", include_str!("../../data/scenarios/coupled16.toml")),
    ("trap8", include_str!("../../data/scenarios/trap8.toml")),
    ("proxy_mislead8", include_str!("../../data/scenarios/proxy_mislead8.toml")),
    ("dims1", include_str!("../../data/scenarios/dims1.toml")),
    ("dims2", include_str!("../../data/scenarios/dims2.toml")),
    ("dims4", include_str!("../../data/scenarios/dims4.toml")),
    ("dims8", include_str!("../../data/scenarios/dims8.toml")),
    ("dims16", include_str!("../../data/scenarios/dims16.toml")),
    ("dims32", include_str!("../../data/scenarios/dims32.toml")),
    ("dims41", include_str!("../../data/scenarios/dims41.toml")),
];

pub fn scenario_text(name: &str) -> Option<&'static str> {
    SCENARIOS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Loads a shipped scenario by name, or a surface file when `name_or_path`
/// is not a shipped name.
pub fn load_surface(name_or_path: &str, registry: &Registry) -> Result<BoundSurface, SurfaceError> {
    let text = match scenario_text(name_or_path) {
        Some(t) => t.to_string(),
        None => std::fs::read_to_string(name_or_path)
            .map_err(|e| SurfaceError::Parse(format!("{name_or_path}: {e}")))?,
    };
    ResponseSurface::parse(&text)?.bind(registry)
}
