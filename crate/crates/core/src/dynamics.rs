//! Longitudinal vehicle dynamics.
//!
//! Every vehicle follows the Intelligent Driver Model. Humans get a held
//! Gaussian acceleration disturbance, CAVs are noise-free. Speeds are
//! capped by a kinematic failsafe after an explicit Euler update, and
//! conflict points (the figure-eight crossing, the merge junction) are
//! gated first-come-first-served. A close follower of a granted vehicle
//! rides on its grant, so standing queues discharge as platoons.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{ArcDistance, LanePosition, NetworkSpec, Route, RouteIdx};

/// Desired time headway shared by every planner (s).
pub const FIXED_TIME_HEADWAY: f64 = 1.0;
/// Comfortable deceleration shared by every planner (m/s^2).
pub const FIXED_COMFORT_DECEL: f64 = 1.5;
/// IDM acceleration exponent shared by every planner.
pub const FIXED_DELTA: f64 = 4.0;
pub const HUMAN_A_MAX: f64 = 1.0;
pub const HUMAN_S0: f64 = 2.0;
pub const DEFAULT_DT: f64 = 0.1;
pub const DEFAULT_VEHICLE_LENGTH: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid IDM parameters: {0}")]
    InvalidParams(String),
    #[error("non-positive bumper gap {gap} m")]
    NonPositiveGap { gap: f64 },
    #[error("gap {gap} m does not exceed s0 = {s0} m; no moving equilibrium")]
    NoEquilibrium { gap: f64, s0: f64 },
    #[error("collision at t = {time:.1} s: vehicle {follower} ran into {leader} (gap {gap:.3} m)")]
    Collision {
        time: f64,
        follower: VehicleId,
        leader: VehicleId,
        gap: f64,
    },
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
    #[error("vehicle {0} already exists")]
    DuplicateVehicle(VehicleId),
    #[error("vehicle {0}: {1}")]
    BadVehicle(VehicleId, String),
}

/// The six IDM constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired speed (m/s).
    pub v0: f64,
    /// Desired time headway (s).
    #[serde(rename = "T")]
    pub time_headway: f64,
    /// Maximum acceleration (m/s^2).
    pub a_max: f64,
    /// Comfortable deceleration (m/s^2).
    pub b: f64,
    pub delta: f64,
    /// Minimum standstill spacing (m).
    pub s0: f64,
}

impl IdmParams {
    pub fn new(
        v0: f64,
        time_headway: f64,
        a_max: f64,
        b: f64,
        delta: f64,
        s0: f64,
    ) -> Result<Self, DynamicsError> {
        let p = IdmParams {
            v0,
            time_headway,
            a_max,
            b,
            delta,
            s0,
        };
        p.validate()?;
        Ok(p)
    }

    /// Human defaults for a road with the given speed limit.
    pub fn human(speed_limit: f64) -> Self {
        IdmParams {
            v0: speed_limit,
            time_headway: FIXED_TIME_HEADWAY,
            a_max: HUMAN_A_MAX,
            b: FIXED_COMFORT_DECEL,
            delta: FIXED_DELTA,
            s0: HUMAN_S0,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let fields = [
            ("v0", self.v0),
            ("T", self.time_headway),
            ("a_max", self.a_max),
            ("b", self.b),
            ("delta", self.delta),
            ("s0", self.s0),
        ];
        for (name, value) in fields {
            if !(value > 0.0 && value.is_finite()) {
                return Err(DynamicsError::InvalidParams(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        if self.delta < 1.0 {
            return Err(DynamicsError::InvalidParams(format!(
                "delta must be >= 1, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Dynamic desired gap s*(v, dv); `dv` is ego speed minus leader speed.
pub fn desired_gap(p: &IdmParams, v: f64, dv: f64) -> f64 {
    let dynamic = v * p.time_headway + v * dv / (2.0 * (p.a_max * p.b).sqrt());
    p.s0 + dynamic.max(0.0)
}

/// IDM acceleration for speed `v`, approach rate `dv` and bumper gap `s`.
pub fn idm_accel(p: &IdmParams, v: f64, dv: f64, s: f64) -> Result<f64, DynamicsError> {
    if !(s > 0.0) {
        return Err(DynamicsError::NonPositiveGap { gap: s });
    }
    let interaction = desired_gap(p, v, dv) / s;
    Ok(p.a_max * (1.0 - (v / p.v0).powf(p.delta) - interaction * interaction))
}

/// IDM acceleration with nothing ahead.
pub fn free_accel(p: &IdmParams, v: f64) -> f64 {
    p.a_max * (1.0 - (v / p.v0).powf(p.delta))
}

/// Speed at which a vehicle holding bumper gap `gap` behind an equally
/// fast leader neither accelerates nor brakes.
pub fn equilibrium_speed(p: &IdmParams, gap: f64) -> Result<f64, DynamicsError> {
    if !(gap > p.s0) {
        return Err(DynamicsError::NoEquilibrium { gap, s0: p.s0 });
    }
    let accel = |v: f64| idm_accel(p, v, 0.0, gap).expect("gap > s0 > 0");
    let (mut lo, mut hi) = (0.0_f64, p.v0);
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let a = accel(mid);
        if a.abs() < 1e-10 && hi - lo < 1e-12 {
            break;
        }
        if a > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi <= lo {
            break;
        }
    }
    Ok(mid)
}

/// Largest speed not above `v` that still lets the ego stop behind a
/// leader braking at `b_max`, after travelling one step at that speed.
pub fn failsafe_speed(v: f64, gap: f64, leader_speed: f64, dt: f64, b_max: f64) -> f64 {
    let gap = gap.max(0.0);
    let bt = b_max * dt;
    let numer = leader_speed * leader_speed + 2.0 * b_max * gap;
    // rationalised root of v^2 + 2 b dt v = leader^2 + 2 b gap
    let v_safe = numer / (bt + (bt * bt + numer).sqrt());
    v.min(v_safe)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl std::fmt::Display for VehicleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "veh_{}", self.0)
    }
}

impl std::str::FromStr for VehicleId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim().trim_start_matches("veh_").parse().map(VehicleId)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleKind {
    Human,
    Cav,
}

impl VehicleKind {
    pub fn tag(self) -> &'static str {
        match self {
            VehicleKind::Human => "human",
            VehicleKind::Cav => "cav",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "human" => Some(VehicleKind::Human),
            "cav" => Some(VehicleKind::Cav),
            _ => None,
        }
    }
}

/// Where a vehicle is along its route.
///
/// Stored as a starting slot `slot / slots` of a cyclic route plus the
/// distance travelled since placement. Gaps between vehicles that share
/// `slots` are computed from the integer slot difference, so identical
/// motion keeps identical gaps bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteProgress {
    pub slot: u32,
    pub slots: u32,
    pub travelled: f64,
}

impl RouteProgress {
    pub fn at(arc: f64) -> Self {
        RouteProgress {
            slot: 0,
            slots: 1,
            travelled: arc,
        }
    }

    pub fn slot(slot: u32, slots: u32) -> Self {
        RouteProgress {
            slot,
            slots: slots.max(1),
            travelled: 0.0,
        }
    }

    fn anchor(&self, route: &Route) -> f64 {
        if self.slots <= 1 {
            0.0
        } else {
            route.length() * f64::from(self.slot) / f64::from(self.slots)
        }
    }

    pub fn arc(&self, route: &Route) -> f64 {
        route.wrap(self.anchor(route) + self.travelled)
    }

    /// Forward distance from `self` to `other` on the same route.
    fn ahead(&self, other: &RouteProgress, route: &Route) -> ArcDistance {
        if route.cyclic && self.slots == other.slots && self.slots > 1 {
            let n = self.slots;
            let ds = (other.slot + n - self.slot) % n;
            let base = route.length() * f64::from(ds) / f64::from(n);
            ArcDistance::Ahead(
                (base + (other.travelled - self.travelled)).rem_euclid(route.length()),
            )
        } else {
            route.forward(self.arc(route), other.arc(route))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub route: RouteIdx,
    pub progress: RouteProgress,
    pub speed: f64,
    pub length: f64,
    pub kind: VehicleKind,
    pub active_params: IdmParams,
}

impl VehicleState {
    pub fn arc(&self, net: &NetworkSpec) -> f64 {
        self.progress.arc(&net.routes[self.route])
    }

    pub fn position(&self, net: &NetworkSpec) -> LanePosition {
        net.lane_position(self.route, self.arc(net))
            .expect("vehicle arc lies on its route")
    }
}

/// Held Gaussian acceleration disturbance for human drivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Standard deviation (m/s^2).
    pub std: f64,
    /// How long each sample is held before redrawing (s).
    pub hold: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            std: 0.2,
            hold: 2.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn stream(&self, id: VehicleId) -> NoiseStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::from(id.0));
        NoiseStream {
            rng,
            value: 0.0,
            left: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    value: f64,
    left: u32,
}

impl NoiseStream {
    pub fn sample(&mut self, std: f64, steps_per_hold: u32) -> f64 {
        if self.left == 0 {
            let z: f64 = self.rng.sample(StandardNormal);
            self.value = std * z;
            self.left = steps_per_hold.max(1);
        }
        self.left -= 1;
        self.value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSettings {
    /// Braking capability assumed by the failsafe (m/s^2).
    pub b_max: f64,
    /// Distance before a conflict point at which a vehicle requests it (m).
    pub approach_window: f64,
    /// Stop line offset before a conflict point (m).
    pub stop_margin: f64,
    /// A follower this close behind a granted vehicle on the same approach
    /// joins its grant (m); zero disables chaining.
    pub platoon_gap: f64,
    /// Cap speeds so a vehicle can always stop behind its leader. Off,
    /// noisy humans can run into each other and the step reports it.
    pub failsafe: bool,
    pub noise: NoiseModel,
}

impl Default for DynamicsSettings {
    fn default() -> Self {
        DynamicsSettings {
            b_max: 4.5,
            approach_window: 10.0,
            stop_margin: DEFAULT_VEHICLE_LENGTH,
            platoon_gap: 10.0,
            failsafe: true,
            noise: NoiseModel::default(),
        }
    }
}

/// Poisson arrival stream at the start of an open route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inflow {
    pub route: RouteIdx,
    pub vehicles_per_hour: f64,
    /// Probability that an arrival is a CAV.
    pub cav_probability: f64,
    /// Speed cap for inserted vehicles (m/s).
    pub entry_speed: f64,
    pub vehicle_length: f64,
}

#[derive(Debug, Clone)]
struct InflowState {
    spec: Inflow,
    rng: ChaCha8Rng,
    next_arrival: f64,
    backlog: VecDeque<VehicleKind>,
}

impl InflowState {
    fn new(spec: Inflow, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut s = InflowState {
            spec,
            rng,
            next_arrival: 0.0,
            backlog: VecDeque::new(),
        };
        s.next_arrival = s.gap_draw();
        s
    }

    fn gap_draw(&mut self) -> f64 {
        let rate = self.spec.vehicles_per_hour / 3600.0;
        if rate <= 0.0 {
            return f64::INFINITY;
        }
        let u: f64 = self.rng.random();
        -(1.0 - u).ln() / rate
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Request {
    vehicle: VehicleId,
    approach: usize,
}

/// FIFO of vehicles asking for one conflict point. The longest prefix
/// sharing the head's approach holds the point.
#[derive(Debug, Clone, Default)]
struct ConflictQueue {
    requests: Vec<Request>,
    granted: usize,
}

impl ConflictQueue {
    fn regrant(&mut self) {
        self.granted = match self.requests.first() {
            None => 0,
            Some(head) => self
                .requests
                .iter()
                .take_while(|r| r.approach == head.approach)
                .count(),
        };
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub inserted: Vec<VehicleId>,
    pub removed: Vec<VehicleId>,
}

/// Mutable simulation state: vehicles, RNG streams and conflict queues.
#[derive(Debug, Clone)]
pub struct World {
    network: Arc<NetworkSpec>,
    settings: DynamicsSettings,
    vehicles: Vec<VehicleState>,
    noise: BTreeMap<VehicleId, NoiseStream>,
    conflicts: Vec<ConflictQueue>,
    inflows: Vec<InflowState>,
    time: f64,
    steps: u64,
    next_id: u32,
}

/// Effective obstacle ahead of a vehicle: gap and its speed.
#[derive(Debug, Clone, Copy)]
struct Obstacle {
    gap: f64,
    speed: f64,
    leader: Option<usize>,
}

impl World {
    pub fn new(network: Arc<NetworkSpec>, settings: DynamicsSettings) -> Self {
        let conflicts = vec![ConflictQueue::default(); network.conflict_points.len()];
        World {
            network,
            settings,
            vehicles: Vec::new(),
            noise: BTreeMap::new(),
            conflicts,
            inflows: Vec::new(),
            time: 0.0,
            steps: 0,
            next_id: 0,
        }
    }

    pub fn network(&self) -> &Arc<NetworkSpec> {
        &self.network
    }

    pub fn settings(&self) -> &DynamicsSettings {
        &self.settings
    }

    pub fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn index_of(&self, id: VehicleId) -> Option<usize> {
        self.vehicles.iter().position(|v| v.id == id)
    }

    pub fn vehicle(&self, id: VehicleId) -> Option<&VehicleState> {
        self.index_of(id).map(|i| &self.vehicles[i])
    }

    pub fn arc_of(&self, idx: usize) -> f64 {
        self.vehicles[idx].arc(&self.network)
    }

    /// Adds a vehicle. Ids must be unique.
    pub fn add_vehicle(&mut self, vehicle: VehicleState) -> Result<(), DynamicsError> {
        if self.index_of(vehicle.id).is_some() {
            return Err(DynamicsError::DuplicateVehicle(vehicle.id));
        }
        if self.network.routes.get(vehicle.route).is_none() {
            return Err(DynamicsError::BadVehicle(
                vehicle.id,
                "unknown route".into(),
            ));
        }
        if !(vehicle.length > 0.0) || !(vehicle.speed >= 0.0) {
            return Err(DynamicsError::BadVehicle(
                vehicle.id,
                "length must be positive and speed non-negative".into(),
            ));
        }
        vehicle.active_params.validate()?;
        if vehicle.kind == VehicleKind::Human {
            self.noise
                .insert(vehicle.id, self.settings.noise.stream(vehicle.id));
        }
        self.next_id = self.next_id.max(vehicle.id.0 + 1);
        self.vehicles.push(vehicle);
        Ok(())
    }

    pub fn add_inflow(&mut self, inflow: Inflow) {
        let stream = (1u64 << 40) + self.inflows.len() as u64;
        self.inflows
            .push(InflowState::new(inflow, self.settings.noise.seed, stream));
    }

    /// Installs new IDM parameters; takes effect from the next step.
    pub fn set_params(&mut self, id: VehicleId, params: IdmParams) -> Result<(), DynamicsError> {
        params.validate()?;
        let idx = self
            .index_of(id)
            .ok_or_else(|| DynamicsError::BadVehicle(id, "not in world".into()))?;
        self.vehicles[idx].active_params = params;
        Ok(())
    }

    /// Vehicles currently holding conflict point `point`.
    pub fn conflict_holders(&self, point: usize) -> Vec<VehicleId> {
        self.conflicts
            .get(point)
            .map(|q| q.requests[..q.granted].iter().map(|r| r.vehicle).collect())
            .unwrap_or_default()
    }

    /// Forward distance from vehicle `from` to vehicle `to` along `from`'s route.
    pub fn distance_between(&self, from: usize, to: usize) -> Option<f64> {
        let (a, b) = (&self.vehicles[from], &self.vehicles[to]);
        let route = &self.network.routes[a.route];
        if a.route == b.route {
            return a.progress.ahead(&b.progress, route).ahead();
        }
        let pos = b.position(&self.network);
        let b_arc = self.network.route_arc(a.route, &pos)?;
        route.forward(a.arc(&self.network), b_arc).ahead()
    }

    /// Index of the vehicle directly ahead of `idx` and the bumper gap.
    pub fn leader_index(&self, idx: usize) -> Option<(usize, f64)> {
        let ego = &self.vehicles[idx];
        let route = &self.network.routes[ego.route];
        let mut best: Option<(usize, f64)> = None;
        for j in 0..self.vehicles.len() {
            if j == idx {
                continue;
            }
            if let Some(d) = self.distance_between(idx, j) {
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
        }
        match best {
            Some((j, d)) => Some((j, d - self.vehicles[j].length)),
            None if route.cyclic => Some((idx, route.length() - ego.length)),
            None => None,
        }
    }

    /// Nearest conflict approach ahead of a vehicle: (point, approach, distance).
    fn next_conflict(&self, idx: usize) -> Option<(usize, usize, f64)> {
        let v = &self.vehicles[idx];
        let route = &self.network.routes[v.route];
        let arc = v.arc(&self.network);
        let mut best: Option<(usize, usize, f64)> = None;
        for (pi, cp) in self.network.conflict_points.iter().enumerate() {
            for (ai, ap) in cp.approaches.iter().enumerate() {
                if ap.route != v.route {
                    continue;
                }
                if let Some(d) = route.forward(arc, ap.arc).ahead() {
                    if best.is_none_or(|(_, _, bd)| d < bd) {
                        best = Some((pi, ai, d));
                    }
                }
            }
        }
        best
    }

    fn has_cleared(&self, req: &Request, point: usize) -> bool {
        let Some(idx) = self.index_of(req.vehicle) else {
            return true;
        };
        let v = &self.vehicles[idx];
        let ap = self.network.conflict_points[point].approaches[req.approach];
        let route = &self.network.routes[v.route];
        match route.forward(ap.arc, v.arc(&self.network)) {
            ArcDistance::Ahead(passed) => {
                passed >= v.length && (!route.cyclic || passed < 0.5 * route.length())
            }
            ArcDistance::NotAhead => false,
        }
    }

    fn update_conflicts(&mut self) {
        for point in 0..self.conflicts.len() {
            let queue = std::mem::take(&mut self.conflicts[point]);
            let requests = queue
                .requests
                .into_iter()
                .filter(|r| !self.has_cleared(r, point))
                .collect();
            self.conflicts[point] = ConflictQueue {
                requests,
                granted: 0,
            };
        }
        let mut fresh: Vec<(usize, f64, VehicleId, usize)> = Vec::new();
        for idx in 0..self.vehicles.len() {
            let Some((point, approach, d)) = self.next_conflict(idx) else {
                continue;
            };
            let id = self.vehicles[idx].id;
            let queued = self.conflicts[point]
                .requests
                .iter()
                .any(|r| r.vehicle == id);
            if d <= self.settings.approach_window && !queued {
                fresh.push((point, d, id, approach));
            }
        }
        fresh.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.cmp(&b.2)));
        for (point, _, vehicle, approach) in fresh {
            self.conflicts[point]
                .requests
                .push(Request { vehicle, approach });
        }
        for q in &mut self.conflicts {
            q.regrant();
        }
        if self.settings.platoon_gap > 0.0 {
            self.chain_platoons();
        }
    }

    /// Lets close followers of granted vehicles join the grant, nearest first.
    fn chain_platoons(&mut self) {
        for point in 0..self.conflicts.len() {
            loop {
                let mut joined = false;
                for idx in 0..self.vehicles.len() {
                    let id = self.vehicles[idx].id;
                    let q = &self.conflicts[point];
                    if q.requests.iter().any(|r| r.vehicle == id) {
                        continue;
                    }
                    let Some((p, approach, _)) = self.next_conflict(idx) else {
                        continue;
                    };
                    if p != point {
                        continue;
                    }
                    let Some((j, gap)) = self.leader_index(idx) else {
                        continue;
                    };
                    if j == idx || gap > self.settings.platoon_gap {
                        continue;
                    }
                    let lead = self.vehicles[j].id;
                    let Some(pos) = q.requests[..q.granted]
                        .iter()
                        .position(|r| r.vehicle == lead && r.approach == approach)
                    else {
                        continue;
                    };
                    let q = &mut self.conflicts[point];
                    q.requests.insert(
                        pos + 1,
                        Request {
                            vehicle: id,
                            approach,
                        },
                    );
                    q.regrant();
                    joined = true;
                }
                if !joined {
                    break;
                }
            }
        }
    }

    /// Stopped virtual obstacle at a conflict point the vehicle may not enter.
    fn conflict_obstacle(&self, idx: usize) -> Option<Obstacle> {
        let (point, approach, d) = self.next_conflict(idx)?;
        let q = &self.conflicts[point];
        if q.requests.is_empty() {
            return None;
        }
        let id = self.vehicles[idx].id;
        let open = match q.requests.iter().position(|r| r.vehicle == id) {
            Some(i) => i < q.granted,
            None => q.granted == q.requests.len() && q.requests[0].approach == approach,
        };
        if open {
            return None;
        }
        Some(Obstacle {
            gap: (d - self.settings.stop_margin).max(MIN_OBSTACLE_GAP),
            speed: 0.0,
            leader: None,
        })
    }

    fn obstacle(&self, idx: usize) -> Option<Obstacle> {
        let real = self.leader_index(idx).map(|(j, gap)| Obstacle {
            gap,
            speed: self.vehicles[j].speed,
            leader: Some(j),
        });
        match (real, self.conflict_obstacle(idx)) {
            (Some(r), Some(c)) => Some(if c.gap < r.gap { c } else { r }),
            (r, c) => r.or(c),
        }
    }

    fn check_collisions(&self) -> Result<(), DynamicsError> {
        for idx in 0..self.vehicles.len() {
            if let Some((j, gap)) = self.leader_index(idx) {
                if j != idx && gap <= 0.0 {
                    return Err(DynamicsError::Collision {
                        time: self.time,
                        follower: self.vehicles[idx].id,
                        leader: self.vehicles[j].id,
                        gap,
                    });
                }
            }
        }
        Ok(())
    }

    fn steps_per_hold(&self, dt: f64) -> u32 {
        ((self.settings.noise.hold / dt).round() as u32).max(1)
    }

    /// Advances the world by one explicit Euler step.
    pub fn step(&mut self, dt: f64) -> Result<StepReport, DynamicsError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(DynamicsError::BadStep(dt));
        }
        self.update_conflicts();
        let hold = self.steps_per_hold(dt);
        let std = self.settings.noise.std;
        let b_max = self.settings.b_max;

        let mut new_speeds = Vec::with_capacity(self.vehicles.len());
        for idx in 0..self.vehicles.len() {
            let v = &self.vehicles[idx];
            let p = &v.active_params;
            let obstacle = self.obstacle(idx);
            if let Some(Obstacle {
                gap,
                leader: Some(j),
                ..
            }) = obstacle
            {
                if gap <= 0.0 && j != idx {
                    return Err(DynamicsError::Collision {
                        time: self.time,
                        follower: v.id,
                        leader: self.vehicles[j].id,
                        gap,
                    });
                }
            }
            let mut accel = match obstacle {
                Some(o) => idm_accel(p, v.speed, v.speed - o.speed, o.gap)?,
                None => free_accel(p, v.speed),
            };
            if v.kind == VehicleKind::Human && std > 0.0 {
                if let Some(stream) = self.noise.get_mut(&v.id) {
                    accel += stream.sample(std, hold);
                }
            }
            let mut speed = (v.speed + accel * dt).max(0.0);
            if let Some(o) = obstacle.filter(|_| self.settings.failsafe) {
                speed = failsafe_speed(speed, o.gap, o.speed, dt, b_max);
            }
            new_speeds.push(speed);
        }
        for (v, speed) in self.vehicles.iter_mut().zip(new_speeds) {
            v.speed = speed;
            v.progress.travelled += speed * dt;
        }

        let mut report = StepReport::default();
        let net = Arc::clone(&self.network);
        self.vehicles.retain(|v| {
            let route = &net.routes[v.route];
            let gone = !route.cyclic && v.progress.arc(route) >= route.length();
            if gone {
                report.removed.push(v.id);
            }
            !gone
        });
        for id in &report.removed {
            self.noise.remove(id);
        }

        self.time = (self.steps + 1) as f64 * dt;
        self.steps += 1;
        report.inserted = self.process_inflows()?;
        self.check_collisions()?;
        Ok(report)
    }

    fn process_inflows(&mut self) -> Result<Vec<VehicleId>, DynamicsError> {
        let mut inserted = Vec::new();
        for k in 0..self.inflows.len() {
            while self.inflows[k].next_arrival <= self.time {
                let cav = {
                    let s = &mut self.inflows[k];
                    let u: f64 = s.rng.random();
                    u < s.spec.cav_probability
                };
                let s = &mut self.inflows[k];
                s.backlog.push_back(if cav {
                    VehicleKind::Cav
                } else {
                    VehicleKind::Human
                });
                let dt_next = s.gap_draw();
                s.next_arrival += dt_next;
            }
            while let Some(&kind) = self.inflows[k].backlog.front() {
                let spec = self.inflows[k].spec;
                let Some(speed) = self.entry_speed(&spec) else {
                    break;
                };
                self.inflows[k].backlog.pop_front();
                let id = VehicleId(self.next_id);
                let params = IdmParams::human(self.network.speed_limit());
                self.add_vehicle(VehicleState {
                    id,
                    route: spec.route,
                    progress: RouteProgress::at(0.0),
                    speed,
                    length: spec.vehicle_length,
                    kind,
                    active_params: params,
                })?;
                inserted.push(id);
            }
        }
        Ok(inserted)
    }

    /// Speed a new vehicle can enter with at the head of `spec.route`, or
    /// `None` while the entrance is blocked.
    fn entry_speed(&self, spec: &Inflow) -> Option<f64> {
        let route = &self.network.routes[spec.route];
        let mut nearest: Option<(f64, f64)> = None;
        for v in &self.vehicles {
            let pos = v.position(&self.network);
            let Some(arc) = self.network.route_arc(spec.route, &pos) else {
                continue;
            };
            if let Some(d) = route.forward(0.0, arc).ahead() {
                if nearest.is_none_or(|(nd, _)| d < nd) {
                    nearest = Some((d - v.length, v.speed));
                }
            }
        }
        let params = IdmParams::human(self.network.speed_limit());
        match nearest {
            None => Some(spec.entry_speed),
            Some((gap, leader_speed)) => {
                if gap <= params.s0 + ENTRY_CLEARANCE {
                    return None;
                }
                let eq = equilibrium_speed(&params, gap).ok()?;
                let v = spec
                    .entry_speed
                    .min(eq.max(leader_speed.min(spec.entry_speed)));
                Some(failsafe_speed(
                    v,
                    gap,
                    leader_speed,
                    DEFAULT_DT,
                    self.settings.b_max,
                ))
            }
        }
    }
}

/// Extra room beyond s0 required before a queued arrival may enter (m).
const ENTRY_CLEARANCE: f64 = 1.0;
const MIN_OBSTACLE_GAP: f64 = 0.01;

/// Advances `world` by one step; see [`World::step`].
pub fn step(world: &mut World, dt: f64) -> Result<StepReport, DynamicsError> {
    world.step(dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_merge, build_ring, leader_of};

    fn ref_params() -> IdmParams {
        IdmParams::new(30.0, 1.0, 1.0, 1.5, 4.0, 2.0).unwrap()
    }

    fn ring_world(n: u32, length: f64, speed: f64, std: f64) -> World {
        let net = Arc::new(build_ring(length, 30.0).unwrap());
        let settings = DynamicsSettings {
            noise: NoiseModel {
                std,
                hold: 2.0,
                seed: 7,
            },
            ..Default::default()
        };
        let mut w = World::new(net, settings);
        for i in 0..n {
            w.add_vehicle(VehicleState {
                id: VehicleId(i),
                route: 0,
                progress: RouteProgress::slot(i, n),
                speed,
                length: 5.0,
                kind: VehicleKind::Human,
                active_params: IdmParams::human(30.0),
            })
            .unwrap();
        }
        w
    }

    #[test]
    fn desired_gap_cases() {
        let p = ref_params();
        assert_eq!(desired_gap(&p, 0.0, 0.0), 2.0);
        assert_eq!(desired_gap(&p, 5.0, 0.0), 7.0);
        // the max(0, .) clamp binds
        assert_eq!(desired_gap(&p, 10.0, -6.0), 2.0);
    }

    #[test]
    fn accel_at_standstill_spacing_is_zero() {
        let p = ref_params();
        assert_eq!(idm_accel(&p, 0.0, 0.0, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn accel_rejects_non_positive_gap() {
        let p = ref_params();
        assert!(matches!(
            idm_accel(&p, 3.0, 0.0, 0.0),
            Err(DynamicsError::NonPositiveGap { .. })
        ));
        assert!(idm_accel(&p, 3.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn accel_at_desired_speed_approaches_zero_from_below() {
        let p = ref_params();
        let mut last = f64::NEG_INFINITY;
        for s in [10.0, 100.0, 1e3, 1e5, 1e7] {
            let a = idm_accel(&p, 30.0, 0.0, s).unwrap();
            assert!(a < 0.0);
            assert!(a > last);
            last = a;
        }
        assert!(last > -1e-9);
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(IdmParams::new(0.0, 1.0, 1.0, 1.5, 4.0, 2.0).is_err());
        assert!(IdmParams::new(30.0, 1.0, 1.0, 1.5, 0.5, 2.0).is_err());
        assert!(IdmParams::new(30.0, 1.0, -1.0, 1.5, 4.0, 2.0).is_err());
    }

    #[test]
    fn equilibrium_limits() {
        let p = ref_params();
        let far = equilibrium_speed(&p, 1e6).unwrap();
        assert!((far - 30.0).abs() < 1e-2);
        let near = equilibrium_speed(&p, 2.0 + 1e-9).unwrap();
        assert!(near < 1e-6);
        assert!(equilibrium_speed(&p, 2.0).is_err());
        assert!(equilibrium_speed(&p, 1.0).is_err());
    }

    #[test]
    fn failsafe_cases() {
        assert_eq!(failsafe_speed(10.0, 1e6, 0.0, 0.1, 4.5), 10.0);
        assert_eq!(failsafe_speed(10.0, 0.0, 0.0, 0.1, 4.5), 0.0);
        assert_eq!(failsafe_speed(10.0, 2.0, 10.0, 0.1, 4.5), 10.0);
    }

    #[test]
    fn uniform_ring_is_a_fixed_point() {
        let p = IdmParams::human(30.0);
        let gap = 230.0 / 22.0 - 5.0;
        let v = equilibrium_speed(&p, gap).unwrap();
        let mut w = ring_world(22, 230.0, v, 0.0);
        let before: Vec<f64> = (0..22).map(|i| w.arc_of(i)).collect();
        w.step(0.1).unwrap();
        for (i, veh) in w.vehicles().iter().enumerate() {
            assert_eq!(veh.speed, w.vehicles()[0].speed);
            let moved = (w.arc_of(i) - before[i]).rem_euclid(230.0);
            assert!((moved - v * 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn free_start_accelerates_at_a_max() {
        let net = Arc::new(build_merge(600.0, 100.0, 30.0).unwrap());
        let mut w = World::new(
            net,
            DynamicsSettings {
                noise: NoiseModel {
                    std: 0.0,
                    ..Default::default()
                },
                ..Default::default()
            },
        );
        w.add_vehicle(VehicleState {
            id: VehicleId(0),
            route: 0,
            progress: RouteProgress::at(10.0),
            speed: 0.0,
            length: 5.0,
            kind: VehicleKind::Human,
            active_params: IdmParams::human(30.0),
        })
        .unwrap();
        w.step(0.1).unwrap();
        assert!((w.vehicles()[0].speed - 0.1).abs() < 1e-15);
        assert!(leader_of(&w, VehicleId(0)).is_none());
    }

    #[test]
    fn seeded_replay_is_bit_identical() {
        let run = || {
            let mut w = ring_world(22, 230.0, 3.0, 0.2);
            let mut trace = Vec::new();
            for _ in 0..100 {
                w.step(0.1).unwrap();
                trace.extend(
                    w.vehicles()
                        .iter()
                        .map(|v| (v.speed.to_bits(), v.progress.travelled.to_bits())),
                );
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn vehicles_leave_open_routes_at_sink() {
        let net = Arc::new(build_merge(600.0, 100.0, 30.0).unwrap());
        let mut w = World::new(net, DynamicsSettings::default());
        w.add_vehicle(VehicleState {
            id: VehicleId(3),
            route: 0,
            progress: RouteProgress::at(599.5),
            speed: 20.0,
            length: 5.0,
            kind: VehicleKind::Cav,
            active_params: IdmParams::human(30.0),
        })
        .unwrap();
        let report = w.step(0.1).unwrap();
        assert_eq!(report.removed, vec![VehicleId(3)]);
        assert!(w.vehicles().is_empty());
    }

    #[test]
    fn merge_inflow_is_seeded() {
        let build = |seed| {
            let net = Arc::new(build_merge(600.0, 100.0, 30.0).unwrap());
            let mut w = World::new(
                net,
                DynamicsSettings {
                    noise: NoiseModel {
                        seed,
                        ..Default::default()
                    },
                    ..Default::default()
                },
            );
            w.add_inflow(Inflow {
                route: 0,
                vehicles_per_hour: 2000.0,
                cav_probability: 0.5,
                entry_speed: 10.0,
                vehicle_length: 5.0,
            });
            let mut ids = Vec::new();
            for _ in 0..300 {
                ids.extend(w.step(0.1).unwrap().inserted);
            }
            let kinds: Vec<_> = w.vehicles().iter().map(|v| v.kind).collect();
            (ids, kinds)
        };
        let a = build(1);
        assert_eq!(a, build(1));
        assert!(a.0.len() > 5);
        assert_ne!(a, build(2));
    }

    #[test]
    fn collision_is_reported_not_repaired() {
        let mut w = ring_world(2, 230.0, 0.0, 0.0);
        w.vehicles[1].progress = RouteProgress::slot(0, 2);
        w.vehicles[1].progress.travelled = 3.0;
        assert!(matches!(w.step(0.1), Err(DynamicsError::Collision { .. })));
    }

    fn crossing_world(platoon_gap: f64) -> World {
        let net = Arc::new(crate::network::build_figure_eight(30.0, 30.0).unwrap());
        let len = net.routes[0].length();
        let other = net.conflict_points[0].approaches[1].arc;
        let settings = DynamicsSettings {
            platoon_gap,
            noise: NoiseModel {
                std: 0.0,
                ..NoiseModel::default()
            },
            ..DynamicsSettings::default()
        };
        let mut w = World::new(net, settings);
        for (id, arc) in [(0, len - 6.0), (1, len - 15.0), (2, other - 8.0)] {
            w.add_vehicle(VehicleState {
                id: VehicleId(id),
                route: 0,
                progress: RouteProgress::at(arc),
                speed: 0.0,
                length: 5.0,
                kind: VehicleKind::Human,
                active_params: IdmParams::human(30.0),
            })
            .unwrap();
        }
        w
    }

    #[test]
    fn close_follower_joins_the_grant() {
        let mut w = crossing_world(10.0);
        w.step(0.1).unwrap();
        assert_eq!(w.conflict_holders(0), vec![VehicleId(0), VehicleId(1)]);

        let mut w = crossing_world(0.0);
        w.step(0.1).unwrap();
        assert_eq!(w.conflict_holders(0), vec![VehicleId(0)]);
    }
}
