//! Deterministic stand-in for the language model. It answers the same
//! prompts a remote model gets, reading everything it needs back out of
//! the prompt text.

use std::collections::BTreeMap;

use super::collaboration::{render_assignment_block, scripted_allocation};
use super::perception::SceneDescription;
use super::{PlannerSpec, ReasonBackend, Role};
use crate::dynamics::{desired_gap, IdmParams, VehicleId};
use crate::llm_client::{CallContext, ChatRole, ChatTurn, LlmError, Transcript};
use crate::network::Topology;

/// Pace of the figure-eight queue leader (m/s).
pub const FE_LEADER_V0: f64 = 7.0;
pub const FE_FOLLOWER_A_MAX: f64 = 2.6;
pub const FE_FOLLOWER_S0: f64 = 0.5;
/// Ring dampers cruise this much above the mean speed seen ahead (m/s).
pub const RING_AHEAD_OFFSET: f64 = 0.5;
/// Floor for any reduced desired speed (m/s).
pub const MIN_DAMPED_V0: f64 = 2.0;
/// Merge dampers pull away this briskly once the way ahead clears.
pub const MERGE_FREE_A_MAX: f64 = 3.0;

/// Leader speed if the ego is closing on a slower leader or is inside its
/// desired gap.
fn congested(scene: &SceneDescription) -> Option<f64> {
    let e = &scene.ego;
    let (gap, vl) = (e.headway?, e.leader_speed?);
    let human = IdmParams::human(scene.speed_limit);
    (vl < e.speed - 1.0 || gap < desired_gap(&human, e.speed, e.speed - vl)).then_some(vl)
}

fn dampener(scene: &SceneDescription) -> PlannerSpec {
    let limit = scene.speed_limit;
    let human = PlannerSpec::human(limit);
    let jam = congested(scene);
    if scene.topology == Topology::Merge {
        return match jam {
            Some(_) => human,
            None => PlannerSpec {
                a_max: MERGE_FREE_A_MAX,
                ..human
            },
        };
    }
    if let Some(vl) = jam {
        return PlannerSpec {
            v0: vl.max(MIN_DAMPED_V0).min(limit),
            ..human
        };
    }
    let ahead: Vec<f64> = scene
        .neighbors
        .iter()
        .filter(|n| n.gap > 0.0 && Some(n.id) != scene.ego.leader)
        .map(|n| n.speed)
        .collect();
    if ahead.is_empty() {
        return human;
    }
    let mean = ahead.iter().sum::<f64>() / ahead.len() as f64;
    PlannerSpec {
        v0: (mean + RING_AHEAD_OFFSET).max(MIN_DAMPED_V0).min(limit),
        ..human
    }
}

/// The planner the scripted backend chooses for `role` in `scene`.
pub fn scripted_backend_policy(role: Role, scene: &SceneDescription) -> PlannerSpec {
    let limit = scene.speed_limit;
    match role {
        Role::Leader => PlannerSpec {
            v0: FE_LEADER_V0.min(limit),
            ..PlannerSpec::human(limit)
        },
        Role::Follower => PlannerSpec {
            v0: limit,
            a_max: FE_FOLLOWER_A_MAX,
            s0: FE_FOLLOWER_S0,
        },
        Role::WaveDampener => dampener(scene),
    }
}

fn role_note(role: Role) -> &'static str {
    match role {
        Role::Leader => "I head the queue and keep a steady, moderate pace.",
        Role::Follower => "I stay tight behind the vehicle ahead so we cross as one group.",
        Role::WaveDampener => "I absorb speed waves instead of passing them on.",
    }
}

fn scene_note(scene: &SceneDescription) -> String {
    match (scene.ego.leader, scene.ego.headway, scene.ego.leader_speed) {
        (Some(l), Some(gap), Some(vl)) => format!(
            "{} is {:.2} m ahead at {:.2} m/s; I am at {:.2} m/s with {} vehicles in view.",
            l,
            gap,
            vl,
            scene.ego.speed,
            scene.neighbors.len()
        ),
        _ => format!("No leader in view; I am at {:.2} m/s.", scene.ego.speed),
    }
}

fn answer_reason(prompt: &str) -> Result<String, LlmError> {
    let role = prompt
        .lines()
        .find_map(|l| l.trim().strip_prefix("Role:"))
        .and_then(Role::from_tag)
        .ok_or_else(|| LlmError::Response("scripted backend: prompt has no role".into()))?;
    let scene = SceneDescription::parse(prompt)
        .map_err(|e| LlmError::Response(format!("scripted backend: {e}")))?;
    let planner = scripted_backend_policy(role, &scene);
    let motion = if scene.topology != Topology::Merge && congested(&scene).is_some() {
        "Traffic ahead is congested, so I approach the leader slowly."
    } else {
        "The way ahead is moving, so I follow the leader closely."
    };
    Ok(format!(
        "## 1. Role clarification\n{}\n## 2. Scene understanding\n{}\n## 3. Motion instruction\n{}\n## 4. Planner generation\n{}",
        role_note(role),
        scene_note(&scene),
        motion,
        serde_json::to_string(&planner).expect("planner serialises"),
    ))
}

fn field<'a>(prompt: &'a str, prefix: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.trim().strip_prefix(prefix))
        .map(str::trim)
}

fn answer_brainstorm(prompt: &str) -> Result<String, LlmError> {
    let bad = |what: &str| LlmError::Response(format!("scripted backend: prompt has no {what}"));
    let ego: VehicleId = field(prompt, "You are ")
        .and_then(|s| s.split('.').next())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("ego"))?;
    let participants: Vec<VehicleId> = field(prompt, "You are ")
        .and_then(|s| s.split_once("Participants in speaking order:"))
        .map(|(_, p)| {
            p.trim_end_matches('.')
                .split(',')
                .filter_map(|x| x.trim().trim_end_matches('.').parse().ok())
                .collect()
        })
        .ok_or_else(|| bad("participants"))?;
    let topology = field(prompt, "Scenario:")
        .and_then(|s| s.split(';').next())
        .and_then(Topology::from_tag)
        .ok_or_else(|| bad("scenario"))?;
    let arc: f64 = field(prompt, "Your position: arc=")
        .and_then(|s| s.split_whitespace().next())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("position"))?;

    if topology != Topology::FigureEight {
        let positions: Vec<(VehicleId, f64)> = participants.iter().map(|&id| (id, 0.0)).collect();
        return Ok(format!(
            "{ego} here. Proposal: every CAV damps waves: no hard braking, match slower traffic ahead, close gaps gently.\n{}",
            render_assignment_block(&scripted_allocation(topology, &positions))
        ));
    }

    let mut known: BTreeMap<VehicleId, f64> = BTreeMap::new();
    let mut words = prompt.split_whitespace().peekable();
    let mut prev = "";
    while let Some(w) = words.next() {
        if w == "reporting" {
            if let (Ok(id), Some(next)) = (prev.parse::<VehicleId>(), words.peek()) {
                if let Some(x) = next.strip_prefix("arc=").and_then(|x| x.parse().ok()) {
                    known.insert(id, x);
                }
            }
        }
        prev = w;
    }
    known.insert(ego, arc);
    let report = format!("{ego} reporting arc={arc:.2} m.");
    if participants.iter().all(|p| known.contains_key(p)) {
        let positions: Vec<(VehicleId, f64)> =
            participants.iter().map(|p| (*p, known[p])).collect();
        Ok(format!(
            "{report} All positions are in: the front-most CAV leads, everyone else follows it closely.\n{}",
            render_assignment_block(&scripted_allocation(topology, &positions))
        ))
    } else {
        Ok(format!(
            "{report} Proposal: form one queue behind the front-most CAV and cross the intersection together."
        ))
    }
}

/// Answers brainstorm and reasoning prompts with the scripted policies.
/// Stateless, so one instance can serve any number of runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedBackend;

impl ScriptedBackend {
    /// Answers a bare transcript; used by stub servers in tests.
    pub fn answer(&self, turns: &[ChatTurn]) -> Result<String, LlmError> {
        let users = turns.iter().rev().filter(|t| t.role == ChatRole::User);
        for t in users {
            if t.content.contains("[REASON]") {
                return answer_reason(&t.content);
            }
            if t.content.contains("[BRAINSTORM]") {
                return answer_brainstorm(&t.content);
            }
        }
        Err(LlmError::Response(
            "scripted backend: unrecognised prompt".into(),
        ))
    }
}

impl ReasonBackend for ScriptedBackend {
    fn complete(
        &self,
        _ctx: &CallContext<'_>,
        turns: &[ChatTurn],
        _log: &mut Transcript,
    ) -> Result<String, LlmError> {
        self.answer(turns)
    }
}
