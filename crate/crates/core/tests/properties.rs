use std::sync::atomic::{AtomicUsize, Ordering};

use proptest::prelude::*;

use comal::agent::{
    brainstorm, perceive, MessagePool, PlannerSpec, ReasonBackend, Role, SceneDescription, Seat,
};
use comal::dynamics::{VehicleId, VehicleKind, World};
use comal::harness::{metrics, TrajectorySample};
use comal::llm_client::{extract_planner_json, CallContext, ChatTurn, LlmError, Transcript};
use comal::scenario::{find, instantiate, ScenarioConfig};

fn world_after(name: &str, seed: u64, steps: u32) -> (ScenarioConfig, World) {
    let cfg = find(name).unwrap().with_seed(seed);
    let mut w = instantiate(&cfg).unwrap();
    for _ in 0..steps {
        w.step(cfg.dt).unwrap();
    }
    (cfg, w)
}

struct Cycle {
    answers: Vec<Option<String>>,
    calls: AtomicUsize,
}

impl ReasonBackend for Cycle {
    fn complete(
        &self,
        _: &CallContext<'_>,
        _: &[ChatTurn],
        _: &mut Transcript,
    ) -> Result<String, LlmError> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        self.answers[i % self.answers.len()]
            .clone()
            .ok_or_else(|| LlmError::Transport("down".into()))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn perceive_is_pure(
        name in prop::sample::select(vec!["Ring 1", "FE 1", "Ring 2"]),
        seed in 0u64..1000,
        steps in 0u32..400,
        horizon in 0.0f64..300.0,
    ) {
        let (_, world) = world_after(name, seed, steps);
        let before = world.vehicles().to_vec();
        for v in world.vehicles() {
            let a = perceive(&world, v.id, horizon).unwrap();
            let b = perceive(&world, v.id, horizon).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.neighbors.iter().all(|n| n.id != v.id && n.gap.abs() <= horizon));
            prop_assert!(a.neighbors.windows(2).all(|w| w[0].gap <= w[1].gap));
        }
        prop_assert_eq!(world.vehicles(), &before[..]);
    }

    #[test]
    fn scene_text_round_trips(seed in 0u64..1000, steps in 0u32..300) {
        let (_, world) = world_after("Ring 2", seed, steps);
        for v in world.vehicles() {
            let scene = perceive(&world, v.id, 100.0).unwrap();
            let text = scene.render();
            let back = SceneDescription::parse(&text).unwrap();
            prop_assert_eq!(back.render(), text);
            let blind = scene.blind().render();
            prop_assert_eq!(SceneDescription::parse(&blind).unwrap().render(), blind);
        }
    }

    #[test]
    fn failsafe_keeps_ring_runs_physical(seed in 0u64..10_000, noise in 0.0f64..50.0, humans in 5u32..30) {
        let cfg = ScenarioConfig { humans, cavs: 0, noise_std: noise, ..find("Ring 0").unwrap() }.with_seed(seed);
        let mut w = instantiate(&cfg).unwrap();
        for _ in 0..600 {
            w.step(cfg.dt).unwrap();
            for i in 0..w.vehicles().len() {
                prop_assert!(w.leader_index(i).is_none_or(|(_, gap)| gap > 0.0));
            }
            prop_assert!(w.vehicles().iter().all(|v| v.speed >= 0.0 && v.speed.is_finite()));
        }
    }

    #[test]
    fn clamp_always_lands_in_bounds(
        v0 in prop::num::f64::ANY,
        a in prop::num::f64::ANY,
        s0 in prop::num::f64::ANY,
        limit in 0.5f64..60.0,
    ) {
        let (p, changed) = PlannerSpec { v0, a_max: a, s0 }.clamp(limit);
        prop_assert!(p.in_bounds(limit), "{p:?}");
        let raw = PlannerSpec { v0, a_max: a, s0 };
        prop_assert_eq!(changed, raw != p);
    }

    #[test]
    fn parser_never_panics(text in ".{0,200}") {
        let _ = extract_planner_json(&text);
    }

    #[test]
    fn parser_finds_embedded_planner(
        v0 in -100.0f64..100.0,
        a in -10.0f64..10.0,
        s0 in -20.0f64..20.0,
        before in "[a-z ,.]{0,40}",
        after in "[a-z ,.]{0,40}",
        fenced in any::<bool>(),
    ) {
        let obj = serde_json::json!({ "v0": v0, "a_max": a, "s0": s0 }).to_string();
        let body = if fenced { format!("```json\n{obj}\n```") } else { obj };
        let text = format!("{before}{{\"draft\": 1}} {body} {after}");
        prop_assert_eq!(extract_planner_json(&text).unwrap(), PlannerSpec { v0, a_max: a, s0 });
    }

    #[test]
    fn brainstorm_terminates(
        answers in prop::collection::vec(prop::option::weighted(0.8, ".{0,80}"), 1..6),
        max_rounds in 1u32..5,
        seed in 0u64..100,
    ) {
        let (_, world) = world_after("FE 1", seed, 200);
        let seats: Vec<Seat> = world
            .vehicles()
            .iter()
            .enumerate()
            .filter(|(_, v)| v.kind == VehicleKind::Cav)
            .map(|(i, v)| Seat { id: v.id, arc: world.arc_of(i), scene: perceive(&world, v.id, 100.0).unwrap() })
            .collect();
        let backend = Cycle { answers, calls: AtomicUsize::new(0) };
        let out = brainstorm(&seats, &mut MessagePool::default(), &backend, &[], max_rounds, "p", &mut Transcript::new()).unwrap();
        prop_assert!(out.rounds <= max_rounds);
        prop_assert!(backend.calls.load(Ordering::SeqCst) <= seats.len() * max_rounds as usize);
        let ids: Vec<VehicleId> = out.assignments.iter().map(|a| a.vehicle_id).collect();
        prop_assert_eq!(ids, seats.iter().map(|s| s.id).collect::<Vec<_>>());
        prop_assert!(out.assignments.iter().filter(|a| a.role == Role::Leader).count() <= 1);
    }

    #[test]
    fn metrics_bounds(speeds in prop::collection::vec(0.0f64..40.0, 1..200), shift in 0.0f64..10.0) {
        let samples = |xs: &[f64]| -> Vec<TrajectorySample> {
            xs.iter()
                .enumerate()
                .map(|(i, &speed)| TrajectorySample { time: i as f64, vehicle_id: VehicleId(0), position: 0.0, speed })
                .collect()
        };
        let (m, s) = metrics(&samples(&speeds), 0.0).unwrap();
        let lo = speeds.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = speeds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s >= 0.0 && m >= lo - 1e-9 && m <= hi + 1e-9);
        let moved: Vec<f64> = speeds.iter().map(|x| x + shift).collect();
        let (m2, s2) = metrics(&samples(&moved), 0.0).unwrap();
        prop_assert!((m2 - m - shift).abs() < 1e-9 && (s2 - s).abs() < 1e-9);
    }
}
