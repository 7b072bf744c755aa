use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::memory::Experience;
use super::perception::SceneDescription;
use super::templates;
use super::{AgentError, ReasonBackend, Role, RoleAssignment};
use crate::dynamics::VehicleId;
use crate::llm_client::{CallContext, ChatTurn, Transcript};
use crate::network::Topology;

/// Marks a message as carrying the agreed role table.
pub const TERMINATOR: &str = "[ROLES FINAL]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub sender: VehicleId,
    pub round: u32,
    pub content: String,
}

/// Public channel shared by all CAVs of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MessagePool {
    pub messages: Vec<Message>,
    pub assignments: Vec<RoleAssignment>,
}

impl MessagePool {
    pub fn publish(&mut self, sender: VehicleId, round: u32, content: impl Into<String>) {
        self.messages.push(Message {
            sender,
            round,
            content: content.into(),
        });
    }

    pub fn render(&self) -> String {
        if self.messages.is_empty() {
            return "(empty)".to_string();
        }
        self.messages
            .iter()
            .map(|m| format!("[round {}] {}: {}", m.round, m.sender, m.content.trim()))
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

/// One participant in a brainstorm.
#[derive(Debug, Clone, PartialEq)]
pub struct Seat {
    pub id: VehicleId,
    /// Arc position on its route when the brainstorm starts.
    pub arc: f64,
    pub scene: SceneDescription,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrainstormOutcome {
    pub assignments: Vec<RoleAssignment>,
    /// Rounds started before termination.
    pub rounds: u32,
    /// No valid role table appeared; the scripted allocation was used.
    pub fell_back: bool,
    pub transport_failures: u32,
}

/// Role every CAV takes when there is no collaboration at all. Without a
/// discussion nobody can claim the single leader seat, so all CAVs damp.
pub fn solo_role(_topology: Topology) -> Role {
    Role::WaveDampener
}

/// Deterministic allocation from positions alone: on the figure-eight the
/// front-most CAV leads and the rest follow; elsewhere everyone damps.
pub fn scripted_allocation(
    topology: Topology,
    positions: &[(VehicleId, f64)],
) -> Vec<RoleAssignment> {
    match topology {
        Topology::FigureEight => {
            let leader = positions
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|p| p.0);
            positions
                .iter()
                .map(|&(id, _)| {
                    if Some(id) == leader {
                        RoleAssignment {
                            vehicle_id: id,
                            role: Role::Leader,
                            rationale: "front-most CAV, sets a steady pace for the queue".into(),
                        }
                    } else {
                        RoleAssignment {
                            vehicle_id: id,
                            role: Role::Follower,
                            rationale: format!(
                                "close up behind {} and cross with the queue",
                                leader.expect("non-empty")
                            ),
                        }
                    }
                })
                .collect()
        }
        Topology::Ring | Topology::Merge => positions
            .iter()
            .map(|&(id, _)| RoleAssignment {
                vehicle_id: id,
                role: Role::WaveDampener,
                rationale: "absorb stop-and-go waves instead of amplifying them".into(),
            })
            .collect(),
    }
}

pub fn render_assignment_block(assignments: &[RoleAssignment]) -> String {
    let mut out = format!("{TERMINATOR}\n```roles\n");
    for a in assignments {
        out.push_str(&format!("{}: {} | {}\n", a.vehicle_id, a.role, a.rationale));
    }
    out.push_str("```");
    out
}

/// Parses the fenced table after the terminator. `None` unless the text
/// holds the terminator and a table naming exactly the `expected` CAVs
/// once each with at most `max_leaders` leaders.
pub fn parse_assignment_block(
    text: &str,
    expected: &[VehicleId],
    max_leaders: usize,
) -> Option<Vec<RoleAssignment>> {
    let after = &text[text.find(TERMINATOR)? + TERMINATOR.len()..];
    let fence = after.find("```")?;
    let body = &after[fence + 3..];
    let body = &body[body.find('\n')? + 1..];
    let body = &body[..body.find("```")?];

    let mut out = Vec::new();
    for line in body.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (id, rest) = line.split_once(':')?;
        let (role, rationale) = rest.split_once('|').unwrap_or((rest, ""));
        out.push(RoleAssignment {
            vehicle_id: id.trim().parse().ok()?,
            role: Role::from_tag(role)?,
            rationale: rationale.trim().to_string(),
        });
    }
    let named: BTreeSet<VehicleId> = out.iter().map(|a| a.vehicle_id).collect();
    let wanted: BTreeSet<VehicleId> = expected.iter().copied().collect();
    let leaders = out.iter().filter(|a| a.role == Role::Leader).count();
    if named != wanted || out.len() != expected.len() || leaders > max_leaders {
        return None;
    }
    // report in speaking order
    out.sort_by_key(|a| expected.iter().position(|&e| e == a.vehicle_id));
    Some(out)
}

fn experience_text(experiences: &[&Experience]) -> String {
    if experiences.is_empty() {
        return "(none)".to_string();
    }
    experiences
        .iter()
        .map(|e| format!("- {}", e.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub(super) fn brainstorm_prompt(
    seat: &Seat,
    seats: &[Seat],
    pool: &MessagePool,
    experiences: &[&Experience],
    round: u32,
    max_rounds: u32,
) -> Vec<ChatTurn> {
    let participants: Vec<String> = seats.iter().map(|s| s.id.to_string()).collect();
    let user = templates::fill(
        templates::BRAINSTORM,
        &[
            ("round", &round.to_string()),
            ("max_rounds", &max_rounds.to_string()),
            ("ego", &seat.id.to_string()),
            ("participants", &participants.join(", ")),
            ("scenario", seat.scene.topology.tag()),
            ("speed_limit", &format!("{:.2}", seat.scene.speed_limit)),
            ("arc", &format!("{:.2}", seat.arc)),
            ("scene", &seat.scene.render()),
            ("experiences", &experience_text(experiences)),
            ("pool", &pool.render()),
            ("terminator", TERMINATOR),
        ],
    );
    vec![ChatTurn::system(templates::SYSTEM), ChatTurn::user(user)]
}

/// Round-robin discussion over the pool until some message carries a valid
/// role table or `max_rounds` pass, whichever comes first.
pub fn brainstorm(
    seats: &[Seat],
    pool: &mut MessagePool,
    backend: &dyn ReasonBackend,
    experiences: &[&Experience],
    max_rounds: u32,
    run_id: &str,
    log: &mut Transcript,
) -> Result<BrainstormOutcome, AgentError> {
    if seats.is_empty() || max_rounds == 0 {
        return Err(AgentError::EmptyBrainstorm);
    }
    let topology = seats[0].scene.topology;
    let ids: Vec<VehicleId> = seats.iter().map(|s| s.id).collect();
    let max_leaders = if seats[0].scene.route_length.is_some() {
        1
    } else {
        usize::MAX
    };
    let mut transport_failures = 0;

    for round in 1..=max_rounds {
        for seat in seats {
            let turns = brainstorm_prompt(seat, seats, pool, experiences, round, max_rounds);
            let agent_id = seat.id.to_string();
            let stage = format!("brainstorm_r{round}");
            let ctx = CallContext {
                run_id,
                agent_id: &agent_id,
                stage: &stage,
            };
            let content = match backend.complete(&ctx, &turns, log) {
                Ok(text) => text,
                Err(e) => {
                    transport_failures += 1;
                    format!("(no reply: {e})")
                }
            };
            let table = parse_assignment_block(&content, &ids, max_leaders);
            pool.publish(seat.id, round, content);
            if let Some(assignments) = table {
                pool.assignments = assignments.clone();
                return Ok(BrainstormOutcome {
                    assignments,
                    rounds: round,
                    fell_back: false,
                    transport_failures,
                });
            }
        }
    }
    let positions: Vec<(VehicleId, f64)> = seats.iter().map(|s| (s.id, s.arc)).collect();
    let assignments = scripted_allocation(topology, &positions);
    pool.assignments = assignments.clone();
    Ok(BrainstormOutcome {
        assignments,
        rounds: max_rounds,
        fell_back: true,
        transport_failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: u32) -> Vec<VehicleId> {
        (0..n).map(VehicleId).collect()
    }

    #[test]
    fn block_round_trips() {
        let a = scripted_allocation(
            Topology::FigureEight,
            &[
                (VehicleId(0), 10.0),
                (VehicleId(1), 50.0),
                (VehicleId(2), 30.0),
            ],
        );
        assert_eq!(a[1].role, Role::Leader);
        let text = format!("we agree.\n{}", render_assignment_block(&a));
        assert_eq!(parse_assignment_block(&text, &ids(3), 1), Some(a));
    }

    #[test]
    fn block_rejects_bad_tables() {
        let two_leaders = format!("{TERMINATOR}\n```roles\nveh_0: leader\nveh_1: leader\n```");
        assert_eq!(parse_assignment_block(&two_leaders, &ids(2), 1), None);
        let missing = format!("{TERMINATOR}\n```\nveh_0: follower | x\n```");
        assert_eq!(parse_assignment_block(&missing, &ids(2), 1), None);
        let unknown_role = format!("{TERMINATOR}\n```\nveh_0: pilot | x\n```");
        assert_eq!(parse_assignment_block(&unknown_role, &ids(1), 1), None);
        assert_eq!(
            parse_assignment_block("```\nveh_0: leader\n```", &ids(1), 1),
            None
        );
    }

    #[test]
    fn pool_renders_in_order() {
        let mut pool = MessagePool::default();
        assert_eq!(pool.render(), "(empty)");
        pool.publish(VehicleId(3), 1, "hi");
        pool.publish(VehicleId(1), 1, "hello");
        assert_eq!(
            pool.render(),
            "[round 1] veh_3: hi\n\n[round 1] veh_1: hello"
        );
    }
}
