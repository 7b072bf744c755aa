//! Run orchestration, metrics, export and multi-seed sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    brainstorm, execute, perceive, reason, solo_role, AgentError, Experience, FixedIdm,
    MemoryError, MemoryStore, MessagePool, PlannerSpec, ReasonBackend, ReasonRequest, Role,
    RoleAssignment, SceneDescription, Seat,
};
use crate::dynamics::{DynamicsError, VehicleId, VehicleKind, World};
use crate::llm_client::Transcript;
use crate::scenario::{instantiate, ScenarioConfig, ScenarioError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("no samples after the warmup")]
    EmptySamples,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("sweep needs at least one seed")]
    NoSeeds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub time: f64,
    pub vehicle_id: VehicleId,
    /// Arc position on the vehicle's route (m).
    pub position: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFlags {
    /// The brainstorm never produced a valid role table.
    pub brainstorm_fallback: bool,
    pub brainstorm_rounds: u32,
    /// Planner requests answered by the scripted default.
    pub reason_fallbacks: u32,
    pub parse_failures: u32,
    pub transport_failures: u32,
    /// Backend planners that had to be clamped into bounds.
    pub clamped_planners: u32,
    /// Set when the run stopped on a collision.
    pub collision: Option<String>,
}

/// One installed planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerRecord {
    pub time: f64,
    pub vehicle_id: VehicleId,
    pub role: Role,
    pub planner: PlannerSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    pub avg_speed: f64,
    pub speed_std: f64,
    pub samples: Vec<TrajectorySample>,
    pub flags: RunFlags,
    pub roles: Vec<RoleAssignment>,
    pub planners: Vec<PlannerRecord>,
    pub messages: MessagePool,
    pub transcript: Transcript,
    pub config: ScenarioConfig,
}

impl RunResult {
    pub fn collided(&self) -> bool {
        self.flags.collision.is_some()
    }
}

/// Mean and population standard deviation of every speed sampled at or
/// after `warmup`, pooled over vehicles and time.
pub fn metrics(samples: &[TrajectorySample], warmup: f64) -> Result<(f64, f64), HarnessError> {
    let speeds: Vec<f64> = samples
        .iter()
        .filter(|s| s.time >= warmup - 1e-9)
        .map(|s| s.speed)
        .collect();
    if speeds.is_empty() {
        return Err(HarnessError::EmptySamples);
    }
    let n = speeds.len() as f64;
    let mean = speeds.iter().sum::<f64>() / n;
    let var = speeds.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

pub fn run_id(config: &ScenarioConfig) -> String {
    let slug: String = config
        .name
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect();
    format!("{slug}-seed{}", config.seed)
}

fn record(world: &World, samples: &mut Vec<TrajectorySample>) {
    let time = world.time();
    for (i, v) in world.vehicles().iter().enumerate() {
        samples.push(TrajectorySample {
            time,
            vehicle_id: v.id,
            position: world.arc_of(i),
            speed: v.speed,
        });
    }
}

/// Per-run agent state.
struct Pipeline<'a> {
    config: &'a ScenarioConfig,
    backend: &'a dyn ReasonBackend,
    memory: &'a MemoryStore,
    run_id: String,
    roles: BTreeMap<VehicleId, RoleAssignment>,
    planners: Vec<PlannerRecord>,
    messages: MessagePool,
    transcript: Transcript,
    flags: RunFlags,
}

impl<'a> Pipeline<'a> {
    fn scene(&self, world: &World, id: VehicleId) -> Result<SceneDescription, AgentError> {
        let scene = perceive(world, id, self.config.agent.sensing_horizon)?;
        Ok(if self.config.features.perception {
            scene
        } else {
            scene.blind()
        })
    }

    fn recall(&self, role: Option<Role>) -> Vec<&'a Experience> {
        let memory: &'a MemoryStore = self.memory;
        if self.config.features.memory {
            memory.recall(self.config.topology, role)
        } else {
            Vec::new()
        }
    }

    fn cavs(world: &World) -> Vec<VehicleId> {
        world
            .vehicles()
            .iter()
            .filter(|v| v.kind == VehicleKind::Cav)
            .map(|v| v.id)
            .collect()
    }

    fn allocate(&mut self, world: &World) -> Result<(), AgentError> {
        let cavs = Self::cavs(world);
        if cavs.is_empty() {
            return Ok(());
        }
        let assignments = if self.config.features.collaboration {
            let seats = cavs
                .iter()
                .map(|&id| {
                    let idx = world.index_of(id).expect("listed vehicle exists");
                    Ok(Seat {
                        id,
                        arc: world.arc_of(idx),
                        scene: self.scene(world, id)?,
                    })
                })
                .collect::<Result<Vec<_>, AgentError>>()?;
            let experiences = self.recall(None);
            let outcome = brainstorm(
                &seats,
                &mut self.messages,
                self.backend,
                &experiences,
                self.config.agent.max_rounds,
                &self.run_id,
                &mut self.transcript,
            )?;
            self.flags.brainstorm_fallback = outcome.fell_back;
            self.flags.brainstorm_rounds = outcome.rounds;
            self.flags.transport_failures += outcome.transport_failures;
            outcome.assignments
        } else {
            let role = solo_role(self.config.topology);
            cavs.iter()
                .map(|&id| RoleAssignment {
                    vehicle_id: id,
                    role,
                    rationale: "no collaboration; acting alone".into(),
                })
                .collect()
        };
        for a in assignments {
            self.roles.insert(a.vehicle_id, a);
        }
        Ok(())
    }

    fn replan(&mut self, world: &mut World) -> Result<(), HarnessError> {
        let fixed = FixedIdm::default();
        for id in Self::cavs(world) {
            let assignment = self.roles.entry(id).or_insert_with(|| RoleAssignment {
                vehicle_id: id,
                role: solo_role(self.config.topology),
                rationale: "arrived after the brainstorm; default role".into(),
            });
            let (role, rationale) = (assignment.role, assignment.rationale.clone());
            let scene = self.scene(world, id)?;
            let experiences = self.recall(Some(role));
            let req = ReasonRequest {
                role,
                rationale: &rationale,
                scene: &scene,
                experiences: &experiences,
            };
            let agent_id = id.to_string();
            let out = reason(
                &req,
                self.backend,
                &self.run_id,
                &agent_id,
                &mut self.transcript,
            );
            self.flags.reason_fallbacks += u32::from(out.fell_back);
            self.flags.parse_failures += out.parse_failures;
            self.flags.transport_failures += u32::from(out.transport_failure);
            self.flags.clamped_planners += u32::from(out.clamped);
            world.set_params(id, execute(&out.planner, &fixed))?;
            self.planners.push(PlannerRecord {
                time: world.time(),
                vehicle_id: id,
                role,
                planner: out.planner,
            });
        }
        Ok(())
    }
}

/// Runs one scenario with the built-in memory.
pub fn run(
    config: &ScenarioConfig,
    backend: &dyn ReasonBackend,
) -> Result<RunResult, HarnessError> {
    let mut memory = MemoryStore::builtin();
    run_with_memory(config, backend, &mut memory, None)
}

/// Runs one scenario. With `agent.memory_writeback` set, a summary of the
/// run is appended to `memory` (and written under `memory_dir` if given).
pub fn run_with_memory(
    config: &ScenarioConfig,
    backend: &dyn ReasonBackend,
    memory: &mut MemoryStore,
    memory_dir: Option<&Path>,
) -> Result<RunResult, HarnessError> {
    let mut world = instantiate(config)?;
    let steps = config.steps();
    let warmup = config.warmup_steps();
    let replan = config.replan_steps();
    let mut samples = Vec::new();
    record(&world, &mut samples);

    let mut pipe = Pipeline {
        config,
        backend,
        memory,
        run_id: run_id(config),
        roles: BTreeMap::new(),
        planners: Vec::new(),
        messages: MessagePool::default(),
        transcript: Transcript::new(),
        flags: RunFlags::default(),
    };

    let mut allocated = false;
    for k in 0..steps {
        if k >= warmup && (k - warmup).is_multiple_of(replan) {
            if !allocated {
                pipe.allocate(&world)?;
                allocated = true;
            }
            pipe.replan(&mut world)?;
        }
        match world.step(config.dt) {
            Ok(_) => record(&world, &mut samples),
            Err(e @ DynamicsError::Collision { .. }) => {
                pipe.flags.collision = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }

    let (avg_speed, speed_std) = match metrics(&samples, config.warmup) {
        Ok(m) => m,
        Err(_) if pipe.flags.collision.is_some() => (0.0, 0.0),
        Err(e) => return Err(e),
    };
    let Pipeline {
        roles,
        planners,
        messages,
        transcript,
        flags,
        run_id,
        ..
    } = pipe;
    let roles: Vec<RoleAssignment> = roles.into_values().collect();

    if config.agent.memory_writeback {
        let mix: Vec<String> = Role::ALL
            .iter()
            .map(|r| (r, roles.iter().filter(|a| a.role == *r).count()))
            .filter(|(_, n)| *n > 0)
            .map(|(r, n)| format!("{n} {r}"))
            .collect();
        let text = format!(
            "{} (seed {}): average speed {:.2} m/s, speed std {:.2} m/s with roles [{}].",
            config.name,
            config.seed,
            avg_speed,
            speed_std,
            mix.join(", ")
        );
        memory.append(
            Experience {
                scenario_tag: config.topology,
                role_tag: None,
                text,
            },
            memory_dir,
        )?;
    }

    Ok(RunResult {
        run_id,
        seed: config.seed,
        avg_speed,
        speed_std,
        samples,
        flags,
        roles,
        planners,
        messages,
        transcript,
        config: config.clone(),
    })
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    run_id: &'a str,
    scenario: &'a str,
    seed: u64,
    avg_speed: f64,
    speed_std: f64,
    flags: &'a RunFlags,
    roles: &'a [RoleAssignment],
    config: &'a ScenarioConfig,
}

pub fn metrics_json(result: &RunResult) -> String {
    let doc = MetricsDoc {
        run_id: &result.run_id,
        scenario: &result.config.name,
        seed: result.seed,
        avg_speed: result.avg_speed,
        speed_std: result.speed_std,
        flags: &result.flags,
        roles: &result.roles,
        config: &result.config,
    };
    serde_json::to_string_pretty(&doc).expect("metrics serialise")
}

pub fn trajectories_csv(samples: &[TrajectorySample]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in samples {
        w.serialize(s)?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<TrajectorySample>, HarnessError> {
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

/// Writes `metrics.json`, `trajectories.csv` and, when the backend logged
/// anything, `transcript.jsonl`. Files are staged under temporary names and
/// renamed only once all of them are written.
pub fn export(result: &RunResult, dir: &Path) -> Result<(), HarnessError> {
    let io = |path: &Path, source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;

    let mut files: Vec<(&str, Vec<u8>)> = vec![
        ("metrics.json", metrics_json(result).into_bytes()),
        (
            "trajectories.csv",
            trajectories_csv(&result.samples).map_err(|source| HarnessError::Csv {
                path: dir.join("trajectories.csv"),
                source,
            })?,
        ),
    ];
    if !result.transcript.is_empty() {
        files.push((
            "transcript.jsonl",
            result.transcript.to_jsonl().into_bytes(),
        ));
    }

    let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
    let outcome = (|| {
        for (name, bytes) in &files {
            let tmp = dir.join(format!(".{name}.tmp"));
            staged.push((tmp.clone(), dir.join(name)));
            let mut f = std::fs::File::create(&tmp).map_err(|e| io(&tmp, e))?;
            f.write_all(bytes).map_err(|e| io(&tmp, e))?;
            f.sync_all().map_err(|e| io(&tmp, e))?;
        }
        for (tmp, dest) in &staged {
            std::fs::rename(tmp, dest).map_err(|e| io(dest, e))?;
        }
        Ok(())
    })();
    if outcome.is_err() {
        for (tmp, _) in &staged {
            let _ = std::fs::remove_file(tmp);
        }
    }
    outcome
}

/// Aggregate of one scenario variant over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub scenario: String,
    pub penetration: Option<f64>,
    pub seeds: Vec<u64>,
    pub avgs: Vec<f64>,
    pub stds: Vec<f64>,
    /// Per-run failures as "seed N: message".
    pub errors: Vec<String>,
    pub avg_mean: f64,
    pub avg_se: f64,
    pub std_mean: f64,
    pub std_se: f64,
}

impl SweepCell {
    pub fn failed(&self) -> bool {
        self.avgs.is_empty()
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("scenario,penetration,runs,failed_runs,avg_mean,avg_se,std_mean,std_se\n");
        for c in &self.cells {
            let pen = c.penetration.map_or(String::new(), |p| p.to_string());
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.scenario,
                pen,
                c.avgs.len(),
                c.errors.len(),
                c.avg_mean,
                c.avg_se,
                c.std_mean,
                c.std_se
            )
            .unwrap();
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<12} {:>6} {:>5} {:>18} {:>18}\n",
            "scenario", "pen", "runs", "avg (m/s)", "std (m/s)"
        );
        for c in &self.cells {
            let pen = c.penetration.map_or("-".to_string(), |p| format!("{p:.3}"));
            if c.failed() {
                writeln!(
                    out,
                    "{:<12} {:>6} {:>5} {:>37}",
                    c.scenario, pen, 0, "FAILED"
                )
                .unwrap();
                continue;
            }
            writeln!(
                out,
                "{:<12} {:>6} {:>5} {:>9.3} ± {:<6.3} {:>9.3} ± {:<6.3}",
                c.scenario,
                pen,
                c.avgs.len(),
                c.avg_mean,
                c.avg_se,
                c.std_mean,
                c.std_se
            )
            .unwrap();
        }
        out
    }
}

/// Runs every template (each merge template once per penetration, if any
/// are given) for
/// every seed, in parallel. A failing run is recorded in its cell and the
/// sweep carries on.
pub fn sweep(
    templates: &[ScenarioConfig],
    seeds: &[u64],
    penetrations: &[f64],
    backend: &dyn ReasonBackend,
) -> Result<SweepTable, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::NoSeeds);
    }
    let mut variants: Vec<(ScenarioConfig, Option<f64>)> = Vec::new();
    for t in templates {
        let merge = t.topology == crate::network::Topology::Merge;
        if !merge {
            variants.push((t.clone(), None));
        } else if penetrations.is_empty() {
            variants.push((t.clone(), Some(t.penetration)));
        } else {
            for &p in penetrations {
                variants.push((
                    ScenarioConfig {
                        penetration: p,
                        ..t.clone()
                    },
                    Some(p),
                ));
            }
        }
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    type Job = (usize, u64, Result<(f64, f64), String>);
    let outcomes: Vec<Job> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let cfg = variants[v].0.with_seed(seed);
            let out = match run(&cfg, backend) {
                Ok(r) => match r.flags.collision {
                    Some(c) => Err(c),
                    None => Ok((r.avg_speed, r.speed_std)),
                },
                Err(e) => Err(e.to_string()),
            };
            (v, seed, out)
        })
        .collect();

    let cells = variants
        .iter()
        .enumerate()
        .map(|(v, (cfg, pen))| {
            let mut cell = SweepCell {
                scenario: cfg.name.clone(),
                penetration: *pen,
                seeds: seeds.to_vec(),
                avgs: Vec::new(),
                stds: Vec::new(),
                errors: Vec::new(),
                avg_mean: f64::NAN,
                avg_se: f64::NAN,
                std_mean: f64::NAN,
                std_se: f64::NAN,
            };
            for (_, seed, out) in outcomes.iter().filter(|o| o.0 == v) {
                match out {
                    Ok((a, s)) => {
                        cell.avgs.push(*a);
                        cell.stds.push(*s);
                    }
                    Err(e) => cell.errors.push(format!("seed {seed}: {e}")),
                }
            }
            (cell.avg_mean, cell.avg_se) = mean_se(&cell.avgs);
            (cell.std_mean, cell.std_se) = mean_se(&cell.stds);
            cell
        })
        .collect();
    Ok(SweepTable { cells })
}
