//! Benchmark catalog and world construction.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dynamics::{
    equilibrium_speed, DynamicsError, DynamicsSettings, IdmParams, Inflow, NoiseModel,
    RouteProgress, VehicleId, VehicleKind, VehicleState, World, DEFAULT_DT, DEFAULT_VEHICLE_LENGTH,
};
use crate::network::{
    build_figure_eight, build_merge, build_ring, NetworkError, NetworkSpec, Topology,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown scenario {0:?}")]
    Unknown(String),
    #[error("{vehicles} vehicles do not fit on a {length:.2} m route")]
    TooManyVehicles { vehicles: u32, length: f64 },
    #[error("override: {0}")]
    Override(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkParams {
    pub ring_length: f64,
    pub loop_radius: f64,
    pub highway_length: f64,
    pub ramp_length: f64,
    pub speed_limit: f64,
}

impl Default for NetworkParams {
    fn default() -> Self {
        NetworkParams {
            ring_length: 230.0,
            loop_radius: 30.0,
            highway_length: 400.0,
            ramp_length: 200.0,
            speed_limit: 30.0,
        }
    }
}

/// Pipeline stages that can be switched off for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Features {
    pub perception: bool,
    pub memory: bool,
    pub collaboration: bool,
}

impl Default for Features {
    fn default() -> Self {
        Features {
            perception: true,
            memory: true,
            collaboration: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CavPlacement {
    /// Spread through the ring order at a fixed stride.
    Even,
    /// Consecutive, starting at position 0.
    Clustered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSettings {
    /// Radius of the perceived neighbourhood (m).
    pub sensing_horizon: f64,
    pub max_rounds: u32,
    /// Append a run-summary experience to the memory after each run.
    pub memory_writeback: bool,
}

impl Default for AgentSettings {
    fn default() -> Self {
        AgentSettings {
            sensing_horizon: 100.0,
            max_rounds: 3,
            memory_writeback: false,
        }
    }
}

/// Upper bound on the failsafe's braking assumption (m/s^2); far beyond
/// any car, and small enough that the failsafe arithmetic cannot overflow.
pub const MAX_B_MAX: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gating {
    pub approach_window: f64,
    pub stop_margin: f64,
    pub platoon_gap: f64,
    pub b_max: f64,
    pub failsafe: bool,
}

impl Default for Gating {
    fn default() -> Self {
        let d = DynamicsSettings::default();
        Gating {
            approach_window: d.approach_window,
            stop_margin: d.stop_margin,
            platoon_gap: d.platoon_gap,
            b_max: d.b_max,
            failsafe: d.failsafe,
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub topology: Topology,
    /// Simulated duration (s).
    pub horizon: f64,
    pub dt: f64,
    /// Pure-IDM prefix excluded from metrics (s).
    pub warmup: f64,
    /// Time between planner refreshes after the warmup (s).
    pub replan_interval: f64,
    pub humans: u32,
    pub cavs: u32,
    /// Share of highway arrivals that are CAVs (merge only).
    pub penetration: f64,
    /// Arrival rates (veh/h, merge only).
    pub highway_inflow: f64,
    pub ramp_inflow: f64,
    pub entry_speed: f64,
    pub network: NetworkParams,
    pub vehicle_length: f64,
    pub noise_std: f64,
    pub noise_hold: f64,
    pub seed: u64,
    pub features: Features,
    pub cav_placement: CavPlacement,
    pub agent: AgentSettings,
    pub gating: Gating,
}

impl ScenarioConfig {
    fn base(name: &str, topology: Topology, horizon: f64) -> Self {
        ScenarioConfig {
            name: name.to_string(),
            topology,
            horizon,
            dt: DEFAULT_DT,
            warmup: 20.0,
            replan_interval: 10.0,
            humans: 0,
            cavs: 0,
            penetration: 0.0,
            highway_inflow: 0.0,
            ramp_inflow: 0.0,
            entry_speed: 20.0,
            network: NetworkParams::default(),
            vehicle_length: DEFAULT_VEHICLE_LENGTH,
            noise_std: 0.2,
            noise_hold: 2.0,
            seed: 0,
            features: Features::default(),
            cav_placement: CavPlacement::Even,
            agent: AgentSettings::default(),
            gating: Gating::default(),
        }
    }

    fn closed(name: &str, topology: Topology, humans: u32, cavs: u32) -> Self {
        ScenarioConfig {
            humans,
            cavs,
            ..Self::base(name, topology, 150.0)
        }
    }

    fn merge(name: &str, penetration: f64) -> Self {
        ScenarioConfig {
            penetration,
            highway_inflow: 2000.0,
            ramp_inflow: 200.0,
            ..Self::base(name, Topology::Merge, 75.0)
        }
    }

    /// Same scenario with every CAV replaced by a human driver.
    pub fn all_human(&self) -> Self {
        ScenarioConfig {
            humans: self.humans + self.cavs,
            cavs: 0,
            penetration: 0.0,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ScenarioConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn total_vehicles(&self) -> u32 {
        self.humans + self.cavs
    }

    pub fn steps(&self) -> u64 {
        (self.horizon / self.dt).round() as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup / self.dt).round() as u64
    }

    pub fn replan_steps(&self) -> u64 {
        ((self.replan_interval / self.dt).round() as u64).max(1)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.warmup >= 0.0 && self.horizon > self.warmup && self.horizon.is_finite()) {
            return bad(format!(
                "need horizon > warmup >= 0, got {} / {}",
                self.horizon, self.warmup
            ));
        }
        if !(self.replan_interval > 0.0) {
            return bad("replan interval must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.penetration) {
            return bad(format!(
                "penetration must be in [0, 1], got {}",
                self.penetration
            ));
        }
        if self.highway_inflow < 0.0 || self.ramp_inflow < 0.0 || self.entry_speed <= 0.0 {
            return bad("inflow rates must be >= 0 and entry speed > 0".into());
        }
        if !(self.vehicle_length > 0.0) || self.noise_std < 0.0 || !(self.noise_hold > 0.0) {
            return bad("vehicle length and noise hold must be > 0, noise std >= 0".into());
        }
        if self.agent.max_rounds == 0 || !(self.agent.sensing_horizon >= 0.0) {
            return bad("max_rounds must be >= 1 and sensing horizon >= 0".into());
        }
        let g = &self.gating;
        if !(g.b_max > 0.0 && g.b_max <= MAX_B_MAX) {
            return bad(format!(
                "b_max must be in (0, {MAX_B_MAX}], got {}",
                g.b_max
            ));
        }
        if !(g.approach_window >= 0.0 && g.stop_margin >= 0.0 && g.platoon_gap >= 0.0) {
            return bad("gating distances must be >= 0".into());
        }
        if self.topology == Topology::Merge && self.total_vehicles() > 0 {
            return bad("merge scenarios take a penetration rate, not vehicle counts".into());
        }
        Ok(())
    }

    pub fn build_network(&self) -> Result<NetworkSpec, ScenarioError> {
        let p = &self.network;
        Ok(match self.topology {
            Topology::Ring => build_ring(p.ring_length, p.speed_limit)?,
            Topology::FigureEight => build_figure_eight(p.loop_radius, p.speed_limit)?,
            Topology::Merge => build_merge(p.highway_length, p.ramp_length, p.speed_limit)?,
        })
    }

    pub fn dynamics_settings(&self) -> DynamicsSettings {
        DynamicsSettings {
            b_max: self.gating.b_max,
            approach_window: self.gating.approach_window,
            stop_margin: self.gating.stop_margin,
            platoon_gap: self.gating.platoon_gap,
            failsafe: self.gating.failsafe,
            noise: NoiseModel {
                std: self.noise_std,
                hold: self.noise_hold,
                seed: self.seed,
            },
        }
    }

    /// Ring-order indices that hold CAVs.
    pub fn cav_slots(&self) -> Vec<u32> {
        let (n, c) = (self.total_vehicles(), self.cavs);
        if c == 0 {
            return Vec::new();
        }
        match self.cav_placement {
            CavPlacement::Clustered => (0..c).collect(),
            CavPlacement::Even => {
                let stride = n.div_ceil(c);
                if stride * (c - 1) < n {
                    (0..c).map(|k| k * stride).collect()
                } else {
                    (0..c)
                        .map(|k| (k as u64 * n as u64 / c as u64) as u32)
                        .collect()
                }
            }
        }
    }

    /// Applies a JSON object on top of this config. Nested objects merge
    /// key by key; unknown keys are errors.
    pub fn with_overrides(&self, overrides: &str) -> Result<Self, ScenarioError> {
        let patch: Value =
            serde_json::from_str(overrides).map_err(|e| ScenarioError::Override(e.to_string()))?;
        if !patch.is_object() {
            return Err(ScenarioError::Override("expected a JSON object".into()));
        }
        let mut base = serde_json::to_value(self).expect("config serialises");
        merge_json(&mut base, patch);
        let out: ScenarioConfig =
            serde_json::from_value(base).map_err(|e| ScenarioError::Override(e.to_string()))?;
        out.validate()?;
        Ok(out)
    }
}

fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// The eleven benchmark configurations.
pub fn catalog() -> Vec<ScenarioConfig> {
    vec![
        ScenarioConfig::closed("FE 0", Topology::FigureEight, 13, 1),
        ScenarioConfig::closed("FE 1", Topology::FigureEight, 7, 7),
        ScenarioConfig::closed("FE 2", Topology::FigureEight, 0, 14),
        ScenarioConfig::closed("Ring 0", Topology::Ring, 21, 1),
        ScenarioConfig::closed("Ring 1", Topology::Ring, 19, 3),
        ScenarioConfig::closed("Ring 2", Topology::Ring, 11, 11),
        ScenarioConfig::merge("Merge 0", 0.10),
        ScenarioConfig::merge("Merge 1", 0.25),
        ScenarioConfig::merge("Merge 2", 1.0 / 3.0),
        ScenarioConfig::merge("Merge 3", 0.50),
        ScenarioConfig::merge("Merge 4", 0.90),
    ]
}

fn normalise(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Looks a scenario up by name, ignoring case, spaces and punctuation.
pub fn find(name: &str) -> Result<ScenarioConfig, ScenarioError> {
    let key = normalise(name);
    catalog()
        .into_iter()
        .find(|c| normalise(&c.name) == key)
        .ok_or_else(|| ScenarioError::Unknown(name.to_string()))
}

/// Builds the initial world. Closed networks start evenly spaced at the
/// equilibrium speed of the mean gap; merges start empty with seeded
/// arrival streams.
pub fn instantiate(config: &ScenarioConfig) -> Result<World, ScenarioError> {
    config.validate()?;
    let net = Arc::new(config.build_network()?);
    let limit = net.speed_limit();
    let human = IdmParams::human(limit);
    let mut world = World::new(Arc::clone(&net), config.dynamics_settings());

    if config.topology == Topology::Merge {
        for (route, rate, cav_probability) in [
            (0, config.highway_inflow, config.penetration),
            (1, config.ramp_inflow, 0.0),
        ] {
            world.add_inflow(Inflow {
                route,
                vehicles_per_hour: rate,
                cav_probability,
                entry_speed: config.entry_speed,
                vehicle_length: config.vehicle_length,
            });
        }
        return Ok(world);
    }

    let n = config.total_vehicles();
    let length = net.routes[0].length();
    if n == 0 {
        return Ok(world);
    }
    if length <= n as f64 * (config.vehicle_length + human.s0) {
        return Err(ScenarioError::TooManyVehicles {
            vehicles: n,
            length,
        });
    }
    let speed = equilibrium_speed(&human, length / n as f64 - config.vehicle_length)?;
    let cavs = config.cav_slots();
    for i in 0..n {
        let kind = if cavs.contains(&i) {
            VehicleKind::Cav
        } else {
            VehicleKind::Human
        };
        world.add_vehicle(VehicleState {
            id: VehicleId(i),
            route: 0,
            progress: RouteProgress::slot(i, n),
            speed,
            length: config.vehicle_length,
            kind,
            active_params: human,
        })?;
    }
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_interleaving() {
        assert_eq!(find("Ring 1").unwrap().cav_slots(), vec![0, 8, 16]);
        assert_eq!(
            find("FE 1").unwrap().cav_slots(),
            vec![0, 2, 4, 6, 8, 10, 12]
        );
        assert_eq!(find("ring2").unwrap().cav_slots().len(), 11);
        let odd = ScenarioConfig {
            humans: 4,
            cavs: 6,
            ..find("Ring 0").unwrap()
        };
        let slots = odd.cav_slots();
        assert_eq!(slots.len(), 6);
        assert!(slots.iter().all(|&s| s < 10));
        let clustered = ScenarioConfig {
            cav_placement: CavPlacement::Clustered,
            ..find("Ring 1").unwrap()
        };
        assert_eq!(clustered.cav_slots(), vec![0, 1, 2]);
    }

    #[test]
    fn lookup_is_forgiving() {
        assert_eq!(find("merge_4").unwrap().name, "Merge 4");
        assert!(matches!(find("Ring 9"), Err(ScenarioError::Unknown(_))));
    }

    #[test]
    fn overrides_merge_nested_fields() {
        let c = find("Ring 0")
            .unwrap()
            .with_overrides(r#"{"seed": 7, "network": {"ring_length": 260}}"#)
            .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.network.ring_length, 260.0);
        assert_eq!(c.network.speed_limit, 30.0);
        assert!(find("Ring 0")
            .unwrap()
            .with_overrides(r#"{"sed": 7}"#)
            .is_err());
        assert!(find("Ring 0")
            .unwrap()
            .with_overrides(r#"{"horizon": 10}"#)
            .is_err());
    }

    #[test]
    fn merge_starts_empty() {
        let w = instantiate(&find("Merge 1").unwrap()).unwrap();
        assert!(w.vehicles().is_empty());
    }

    #[test]
    fn capacity_is_checked() {
        let c = ScenarioConfig {
            humans: 50,
            cavs: 0,
            ..find("Ring 0").unwrap()
        };
        assert!(matches!(
            instantiate(&c),
            Err(ScenarioError::TooManyVehicles { .. })
        ));
    }
}
