//! Car-following physics without any agents: IDM accelerations, the ring's
//! equilibrium, and a noisy ring drifting into stop-and-go traffic.

use comal::dynamics::{equilibrium_speed, idm_accel, IdmParams};
use comal::scenario::{find, instantiate};

fn main() {
    let human = IdmParams::human(30.0);
    for (v, dv, s) in [(5.0, 0.0, 10.0), (10.0, -6.0, 20.0), (10.0, 5.0, 8.0)] {
        println!(
            "a(v={v}, dv={dv}, s={s}) = {:+.4} m/s^2",
            idm_accel(&human, v, dv, s).unwrap()
        );
    }

    let cfg = find("Ring 0").unwrap().all_human();
    let gap = cfg.network.ring_length / cfg.total_vehicles() as f64 - cfg.vehicle_length;
    println!(
        "\n22 cars on a 230 m ring: gap {gap:.3} m, equilibrium {:.4} m/s",
        equilibrium_speed(&human, gap).unwrap()
    );

    let mut world = instantiate(&cfg).unwrap();
    println!("\n  t (s)   min v   max v");
    for k in 1..=cfg.steps() {
        world.step(cfg.dt).unwrap();
        if k % 150 == 0 {
            let speeds = world.vehicles().iter().map(|v| v.speed);
            let (lo, hi) = speeds.fold((f64::MAX, 0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
            println!("{:>7.0} {lo:>7.2} {hi:>7.2}", world.time());
        }
    }
}
