//! Plugging in a backend of your own. This one wraps the scripted backend,
//! records every exchange, then the recording is replayed.

use comal::agent::{ReasonBackend, ScriptedBackend};
use comal::harness::run;
use comal::llm_client::{CallContext, ChatTurn, LlmError, ReplayBackend, Transcript};
use comal::scenario::find;
use serde_json::json;

/// Answers like the scripted backend but logs like a remote one.
struct Recording;

impl ReasonBackend for Recording {
    fn complete(
        &self,
        ctx: &CallContext<'_>,
        turns: &[ChatTurn],
        log: &mut Transcript,
    ) -> Result<String, LlmError> {
        let started = std::time::Instant::now();
        let out = ScriptedBackend.answer(turns);
        log.record(
            ctx,
            json!({ "messages": turns }),
            out.as_deref(),
            started.elapsed(),
        );
        out
    }
}

fn main() {
    let cfg = find("Ring 1").unwrap();
    let recorded = run(&cfg, &Recording).unwrap();
    let first = &recorded.transcript.entries()[0];
    println!(
        "{} exchanges recorded; the first, {} / {}, answered:\n",
        recorded.transcript.len(),
        first.agent_id,
        first.stage
    );
    println!("{}\n", first.response_text().unwrap());

    let replay = ReplayBackend::new(&recorded.transcript);
    let replayed = run(&cfg, &replay).unwrap();
    println!(
        "replayed planners identical: {}",
        replayed.planners == recorded.planners
    );
    println!(
        "avg {:.4} vs {:.4}, std {:.4} vs {:.4}",
        recorded.avg_speed, replayed.avg_speed, recorded.speed_std, replayed.speed_std
    );
}
