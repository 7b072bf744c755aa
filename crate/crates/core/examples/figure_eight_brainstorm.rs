//! The figure-eight brainstorm: seven CAVs talk over the message pool,
//! agree on one leader, and cross the intersection as a queue.

use comal::agent::ScriptedBackend;
use comal::harness::run;
use comal::scenario::find;

fn main() {
    let cfg = find("FE 1").unwrap();
    let full = run(&cfg, &ScriptedBackend).unwrap();
    println!("{}\n", full.messages.render());
    for a in &full.roles {
        println!("{}: {} ({})", a.vehicle_id, a.role, a.rationale);
    }

    let mut solo = cfg.clone();
    solo.features.collaboration = false;
    let solo = run(&solo, &ScriptedBackend).unwrap();
    let human = run(&cfg.all_human(), &ScriptedBackend).unwrap();
    println!("\n             avg    std");
    for (name, r) in [
        ("all human", &human),
        ("no collab", &solo),
        ("brainstorm", &full),
    ] {
        println!("{name:<10} {:>6.2} {:>6.2}", r.avg_speed, r.speed_std);
    }
}
