//! Per-CAV decision pipeline: perception renders the scene as text, memory
//! supplies past guidance, collaboration allocates roles over a shared
//! message pool, reasoning turns role and scene into an IDM planner, and
//! execution installs it.

mod collaboration;
mod memory;
mod perception;
mod reasoning;
mod scripted;
pub mod templates;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{IdmParams, VehicleId, FIXED_COMFORT_DECEL, FIXED_DELTA, FIXED_TIME_HEADWAY};
use crate::llm_client::{CallContext, ChatTurn, LlmError, Transcript};

pub use collaboration::{
    brainstorm, parse_assignment_block, render_assignment_block, scripted_allocation, solo_role,
    BrainstormOutcome, Message, MessagePool, Seat, TERMINATOR,
};
pub use memory::{Experience, MemoryError, MemoryStore};
pub use perception::{perceive, EgoState, Neighbor, SceneDescription, SceneParseError};
pub use reasoning::{
    build_reason_prompt, reason, ReasonOutcome, ReasonRequest, MAX_REASON_RETRIES,
};
pub use scripted::{
    scripted_backend_policy, ScriptedBackend, FE_FOLLOWER_A_MAX, FE_FOLLOWER_S0, FE_LEADER_V0,
    MERGE_FREE_A_MAX, RING_AHEAD_OFFSET,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("unknown vehicle {0}")]
    UnknownVehicle(VehicleId),
    #[error("brainstorm needs at least one CAV and one round")]
    EmptyBrainstorm,
}

/// Behaviour a CAV adopts after collaboration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Leader,
    Follower,
    WaveDampener,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Leader, Role::Follower, Role::WaveDampener];

    pub fn tag(self) -> &'static str {
        match self {
            Role::Leader => "leader",
            Role::Follower => "follower",
            Role::WaveDampener => "wave_dampener",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.tag() == tag.trim())
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub vehicle_id: VehicleId,
    pub role: Role,
    pub rationale: String,
}

/// Upper bound on planner acceleration (m/s^2).
pub const PLANNER_MAX_A: f64 = 3.0;
pub const PLANNER_MIN_S0: f64 = 0.5;
pub const PLANNER_MAX_S0: f64 = 10.0;
/// Smallest positive value a clamped v0 or a_max can take.
pub const PLANNER_FLOOR: f64 = 0.1;

/// The tunable IDM triple produced by reasoning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerSpec {
    pub v0: f64,
    pub a_max: f64,
    pub s0: f64,
}

impl PlannerSpec {
    /// Forces the triple into `0 < v0 <= speed_limit`, `0 < a_max <= 3`,
    /// `0.5 <= s0 <= 10`. Returns whether anything changed.
    pub fn clamp(self, speed_limit: f64) -> (PlannerSpec, bool) {
        let fix = |x: f64, lo: f64, hi: f64| if x.is_nan() { lo } else { x.clamp(lo, hi) };
        let out = PlannerSpec {
            v0: fix(self.v0, PLANNER_FLOOR.min(speed_limit), speed_limit),
            a_max: fix(self.a_max, PLANNER_FLOOR, PLANNER_MAX_A),
            s0: fix(self.s0, PLANNER_MIN_S0, PLANNER_MAX_S0),
        };
        (out, out != self)
    }

    pub fn in_bounds(&self, speed_limit: f64) -> bool {
        self.v0 > 0.0
            && self.v0 <= speed_limit
            && self.a_max > 0.0
            && self.a_max <= PLANNER_MAX_A
            && (PLANNER_MIN_S0..=PLANNER_MAX_S0).contains(&self.s0)
    }

    pub fn human(speed_limit: f64) -> PlannerSpec {
        let h = IdmParams::human(speed_limit);
        PlannerSpec {
            v0: h.v0,
            a_max: h.a_max,
            s0: h.s0,
        }
    }
}

/// The IDM constants every planner shares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedIdm {
    pub time_headway: f64,
    pub b: f64,
    pub delta: f64,
}

impl Default for FixedIdm {
    fn default() -> Self {
        FixedIdm {
            time_headway: FIXED_TIME_HEADWAY,
            b: FIXED_COMFORT_DECEL,
            delta: FIXED_DELTA,
        }
    }
}

/// Merges a planner with the fixed constants into full IDM parameters.
pub fn execute(planner: &PlannerSpec, fixed: &FixedIdm) -> IdmParams {
    IdmParams {
        v0: planner.v0,
        time_headway: fixed.time_headway,
        a_max: planner.a_max,
        b: fixed.b,
        delta: fixed.delta,
        s0: planner.s0,
    }
}

/// Anything that can answer a chat transcript. Implementations log what
/// they exchange into `log` if they talk to something external.
pub trait ReasonBackend: Send + Sync {
    fn complete(
        &self,
        ctx: &CallContext<'_>,
        turns: &[ChatTurn],
        log: &mut Transcript,
    ) -> Result<String, LlmError>;
}

impl<B: ReasonBackend + ?Sized> ReasonBackend for Box<B> {
    fn complete(
        &self,
        ctx: &CallContext<'_>,
        turns: &[ChatTurn],
        log: &mut Transcript,
    ) -> Result<String, LlmError> {
        (**self).complete(ctx, turns, log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn execute_merges_fixed_constants() {
        let p = execute(
            &PlannerSpec {
                v0: 30.0,
                a_max: 1.0,
                s0: 2.0,
            },
            &FixedIdm::default(),
        );
        assert_eq!(p, IdmParams::human(30.0));
        assert_eq!(p, execute(&PlannerSpec::human(30.0), &FixedIdm::default()));
    }

    #[test]
    fn clamp_bounds() {
        let (p, changed) = PlannerSpec {
            v0: 99.0,
            a_max: 1.0,
            s0: 2.0,
        }
        .clamp(30.0);
        assert!(changed);
        assert_eq!(p.v0, 30.0);
        let (p, _) = PlannerSpec {
            v0: -1.0,
            a_max: 0.0,
            s0: 50.0,
        }
        .clamp(30.0);
        assert!(p.in_bounds(30.0));
        assert_eq!(p.s0, PLANNER_MAX_S0);
        let (p, _) = PlannerSpec {
            v0: f64::NAN,
            a_max: 9.0,
            s0: 0.0,
        }
        .clamp(30.0);
        assert!(p.in_bounds(30.0));
    }

    #[test]
    fn role_tags_round_trip() {
        for r in Role::ALL {
            assert_eq!(Role::from_tag(r.tag()), Some(r));
        }
        assert_eq!(Role::from_tag("captain"), None);
    }
}
