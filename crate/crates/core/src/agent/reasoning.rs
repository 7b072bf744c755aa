use super::memory::Experience;
use super::perception::SceneDescription;
use super::scripted::scripted_backend_policy;
use super::templates;
use super::{PlannerSpec, ReasonBackend, Role};
use crate::llm_client::{extract_planner_json, CallContext, ChatTurn, Transcript};

/// Extra attempts after an answer without a usable planner.
pub const MAX_REASON_RETRIES: u32 = 2;

#[derive(Debug, Clone, Copy)]
pub struct ReasonRequest<'a> {
    pub role: Role,
    pub rationale: &'a str,
    pub scene: &'a SceneDescription,
    pub experiences: &'a [&'a Experience],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReasonOutcome {
    /// Always within planner bounds.
    pub planner: PlannerSpec,
    /// The scripted default was used instead of a backend answer.
    pub fell_back: bool,
    pub parse_failures: u32,
    pub transport_failure: bool,
    /// The backend answer needed clamping.
    pub clamped: bool,
}

pub fn build_reason_prompt(req: &ReasonRequest<'_>) -> Vec<ChatTurn> {
    let experiences = if req.experiences.is_empty() {
        "(none)".to_string()
    } else {
        req.experiences
            .iter()
            .map(|e| format!("- {}", e.text))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let user = templates::fill(
        templates::REASON,
        &[
            ("scenario", req.scene.topology.tag()),
            ("speed_limit", &format!("{:.2}", req.scene.speed_limit)),
            ("role", req.role.tag()),
            (
                "rationale",
                if req.rationale.is_empty() {
                    "(none)"
                } else {
                    req.rationale
                },
            ),
            ("scene", &req.scene.render()),
            ("experiences", &experiences),
        ],
    );
    vec![ChatTurn::system(templates::SYSTEM), ChatTurn::user(user)]
}

/// Runs the four-stage prompt and returns a bounded planner. Never fails:
/// unusable or missing answers end in the role's scripted default.
pub fn reason(
    req: &ReasonRequest<'_>,
    backend: &dyn ReasonBackend,
    run_id: &str,
    agent_id: &str,
    log: &mut Transcript,
) -> ReasonOutcome {
    let limit = req.scene.speed_limit;
    let ctx = CallContext {
        run_id,
        agent_id,
        stage: "reason",
    };
    let mut turns = build_reason_prompt(req);
    let mut parse_failures = 0;
    let mut transport_failure = false;

    for _ in 0..=MAX_REASON_RETRIES {
        let text = match backend.complete(&ctx, &turns, log) {
            Ok(t) => t,
            Err(_) => {
                transport_failure = true;
                break;
            }
        };
        match extract_planner_json(&text) {
            Ok(raw) => {
                let (planner, clamped) = raw.clamp(limit);
                return ReasonOutcome {
                    planner,
                    fell_back: false,
                    parse_failures,
                    transport_failure,
                    clamped,
                };
            }
            Err(_) => {
                parse_failures += 1;
                turns.push(ChatTurn::assistant(if text.trim().is_empty() {
                    "(empty)".to_string()
                } else {
                    text
                }));
                turns.push(ChatTurn::user(templates::RETRY));
            }
        }
    }
    let (planner, _) = scripted_backend_policy(req.role, req.scene).clamp(limit);
    ReasonOutcome {
        planner,
        fell_back: true,
        parse_failures,
        transport_failure,
        clamped: false,
    }
}
