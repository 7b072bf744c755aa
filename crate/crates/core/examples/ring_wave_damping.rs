//! Three wave-dampening CAVs on the ring against the all-human baseline.

use comal::agent::ScriptedBackend;
use comal::harness::run;
use comal::scenario::find;

fn main() {
    let cfg = find("Ring 1").unwrap();
    println!("seed   human avg/std    with CAVs avg/std");
    for seed in 0..5 {
        let h = run(&cfg.all_human().with_seed(seed), &ScriptedBackend).unwrap();
        let c = run(&cfg.with_seed(seed), &ScriptedBackend).unwrap();
        println!(
            "{seed:>4}   {:>5.2} / {:<5.2}     {:>5.2} / {:<5.2}",
            h.avg_speed, h.speed_std, c.avg_speed, c.speed_std
        );
    }
    let r = run(&cfg, &ScriptedBackend).unwrap();
    println!("\nplanners installed for seed 0 at t = 20 s:");
    for p in r.planners.iter().filter(|p| p.time == cfg.warmup) {
        println!(
            "  {} {}: v0 {:.2}  a_max {:.2}  s0 {:.2}",
            p.vehicle_id, p.role, p.planner.v0, p.planner.a_max, p.planner.s0
        );
    }
}
