//! Road-network geometry for the ring, figure-eight and merge benchmarks.
//!
//! A [`NetworkSpec`] is a set of single-lane [`Edge`]s chained into
//! [`Route`]s. Routes are either cyclic (ring, figure-eight) or open
//! (merge). Places where two approaches share physical space are recorded
//! as [`ConflictPoint`]s; the dynamics layer gates access to them.
//!
//! Networks are immutable once built and can be shared freely.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{VehicleId, World};

pub type EdgeIdx = usize;
pub type RouteIdx = usize;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("unknown edge `{0}`")]
    UnknownEdge(String),
    #[error("route `{route}` is empty")]
    EmptyRoute { route: String },
    #[error("route `{route}`: edge `{from}` does not connect to `{to}`")]
    Disconnected {
        route: String,
        from: String,
        to: String,
    },
    #[error("route `{route}` is marked cyclic but does not close")]
    NotClosed { route: String },
    #[error("route `{route}` visits edge `{edge}` twice")]
    RepeatedEdge { route: String, edge: String },
    #[error("position is not on route {route}")]
    NotOnRoute { route: RouteIdx },
    #[error("route index {0} out of range")]
    UnknownRoute(RouteIdx),
    #[error("conflict point `{id}` references an invalid approach")]
    BadConflict { id: String },
    #[error("invalid network document: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which benchmark family a network belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Ring,
    FigureEight,
    Merge,
}

impl Topology {
    pub fn tag(self) -> &'static str {
        match self {
            Topology::Ring => "ring",
            Topology::FigureEight => "figure_eight",
            Topology::Merge => "merge",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "ring" => Some(Topology::Ring),
            "figure_eight" => Some(Topology::FigureEight),
            "merge" => Some(Topology::Merge),
            _ => None,
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Planar centreline of an edge, used for drawing and geometry checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EdgeShape {
    Line {
        from: [f64; 2],
        to: [f64; 2],
    },
    /// Circular arc; `sweep` is signed (positive = counter-clockwise).
    Arc {
        center: [f64; 2],
        radius: f64,
        start_angle: f64,
        sweep: f64,
    },
}

impl EdgeShape {
    fn arc_length(&self) -> f64 {
        match self {
            EdgeShape::Line { from, to } => (to[0] - from[0]).hypot(to[1] - from[1]),
            EdgeShape::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Point at `fraction` in [0, 1] of the way along the shape.
    pub fn point_at(&self, fraction: f64) -> [f64; 2] {
        match self {
            EdgeShape::Line { from, to } => [
                from[0] + (to[0] - from[0]) * fraction,
                from[1] + (to[1] - from[1]) * fraction,
            ],
            EdgeShape::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let angle = start_angle + sweep * fraction;
                [
                    center[0] + radius * angle.cos(),
                    center[1] + radius * angle.sin(),
                ]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length: f64,
    pub speed_limit: f64,
    pub shape: EdgeShape,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Route {
    pub id: String,
    pub edge_ids: Vec<String>,
    pub cyclic: bool,
    #[serde(skip)]
    edges: Vec<EdgeIdx>,
    /// Arc position at which each edge starts.
    #[serde(skip)]
    starts: Vec<f64>,
    #[serde(skip)]
    length: f64,
}

impl Route {
    pub fn new(id: impl Into<String>, edge_ids: &[&str], cyclic: bool) -> Self {
        Route {
            id: id.into(),
            edge_ids: edge_ids.iter().map(|s| s.to_string()).collect(),
            cyclic,
            edges: Vec::new(),
            starts: Vec::new(),
            length: 0.0,
        }
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn edges(&self) -> &[EdgeIdx] {
        &self.edges
    }

    pub fn last_edge(&self) -> EdgeIdx {
        *self.edges.last().expect("validated routes are non-empty")
    }

    /// Arc position where `edge` starts on this route, if the route uses it.
    pub fn edge_start(&self, edge: EdgeIdx) -> Option<f64> {
        self.edges
            .iter()
            .position(|&e| e == edge)
            .map(|i| self.starts[i])
    }

    /// Forward distance from arc `from` to arc `to`.
    pub fn forward(&self, from: f64, to: f64) -> ArcDistance {
        let d = to - from;
        if self.cyclic {
            ArcDistance::Ahead(d.rem_euclid(self.length))
        } else if d >= 0.0 {
            ArcDistance::Ahead(d)
        } else {
            ArcDistance::NotAhead
        }
    }

    /// Normalise an arc coordinate onto the route (wraps cyclic routes).
    pub fn wrap(&self, arc: f64) -> f64 {
        if self.cyclic {
            arc.rem_euclid(self.length)
        } else {
            arc
        }
    }
}

/// A point on a specific edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LanePosition {
    pub edge: EdgeIdx,
    pub offset: f64,
}

/// Result of measuring forward along a route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArcDistance {
    Ahead(f64),
    /// The target lies behind the origin on an open route.
    NotAhead,
}

impl ArcDistance {
    pub fn ahead(self) -> Option<f64> {
        match self {
            ArcDistance::Ahead(d) => Some(d),
            ArcDistance::NotAhead => None,
        }
    }
}

/// One way into a conflict point: the route and the arc position on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictApproach {
    pub route: RouteIdx,
    pub arc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictPoint {
    pub id: String,
    pub approaches: Vec<ConflictApproach>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub topology: Topology,
    pub edges: Vec<Edge>,
    pub routes: Vec<Route>,
    pub conflict_points: Vec<ConflictPoint>,
}

impl NetworkSpec {
    /// Validates the pieces and resolves route edge references.
    pub fn new(
        topology: Topology,
        edges: Vec<Edge>,
        routes: Vec<Route>,
        conflict_points: Vec<ConflictPoint>,
    ) -> Result<Self, NetworkError> {
        let mut spec = NetworkSpec {
            topology,
            edges,
            routes,
            conflict_points,
        };
        spec.resolve()?;
        Ok(spec)
    }

    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let mut spec: NetworkSpec = serde_json::from_str(text)?;
        spec.resolve()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network specs always serialize")
    }

    fn resolve(&mut self) -> Result<(), NetworkError> {
        for edge in &self.edges {
            positive("edge length", edge.length)?;
            positive("edge speed limit", edge.speed_limit)?;
        }
        for route in &mut self.routes {
            if route.edge_ids.is_empty() {
                return Err(NetworkError::EmptyRoute {
                    route: route.id.clone(),
                });
            }
            let mut idx = Vec::with_capacity(route.edge_ids.len());
            for id in &route.edge_ids {
                let i = self
                    .edges
                    .iter()
                    .position(|e| &e.id == id)
                    .ok_or_else(|| NetworkError::UnknownEdge(id.clone()))?;
                if idx.contains(&i) {
                    return Err(NetworkError::RepeatedEdge {
                        route: route.id.clone(),
                        edge: id.clone(),
                    });
                }
                idx.push(i);
            }
            for pair in idx.windows(2) {
                let (a, b) = (&self.edges[pair[0]], &self.edges[pair[1]]);
                if a.to != b.from {
                    return Err(NetworkError::Disconnected {
                        route: route.id.clone(),
                        from: a.id.clone(),
                        to: b.id.clone(),
                    });
                }
            }
            if route.cyclic {
                let (first, last) = (&self.edges[idx[0]], &self.edges[*idx.last().unwrap()]);
                if last.to != first.from {
                    return Err(NetworkError::NotClosed {
                        route: route.id.clone(),
                    });
                }
            }
            let mut starts = Vec::with_capacity(idx.len());
            let mut total = 0.0;
            for &i in &idx {
                starts.push(total);
                total += self.edges[i].length;
            }
            route.edges = idx;
            route.starts = starts;
            route.length = total;
        }
        for cp in &self.conflict_points {
            let valid = cp.approaches.len() >= 2
                && cp.approaches.iter().all(|a| {
                    self.routes
                        .get(a.route)
                        .is_some_and(|r| a.arc >= 0.0 && a.arc < r.length)
                });
            if !valid {
                return Err(NetworkError::BadConflict { id: cp.id.clone() });
            }
        }
        Ok(())
    }

    pub fn route(&self, idx: RouteIdx) -> Result<&Route, NetworkError> {
        self.routes.get(idx).ok_or(NetworkError::UnknownRoute(idx))
    }

    pub fn edge_index(&self, id: &str) -> Option<EdgeIdx> {
        self.edges.iter().position(|e| e.id == id)
    }

    /// Highest posted speed anywhere on the network.
    pub fn speed_limit(&self) -> f64 {
        self.edges.iter().map(|e| e.speed_limit).fold(0.0, f64::max)
    }

    pub fn is_closed(&self) -> bool {
        self.routes.iter().all(|r| r.cyclic)
    }

    /// Lane position of an arc coordinate on `route`.
    pub fn lane_position(&self, route: RouteIdx, arc: f64) -> Result<LanePosition, NetworkError> {
        let r = self.route(route)?;
        let arc = r.wrap(arc);
        if !(0.0..r.length).contains(&arc) {
            return Err(NetworkError::NotOnRoute { route });
        }
        let i = r.starts.partition_point(|&s| s <= arc) - 1;
        Ok(LanePosition {
            edge: r.edges[i],
            offset: arc - r.starts[i],
        })
    }

    /// Arc coordinate of a lane position on `route`, if the route uses that edge.
    pub fn route_arc(&self, route: RouteIdx, pos: &LanePosition) -> Option<f64> {
        let r = self.routes.get(route)?;
        let edge = self.edges.get(pos.edge)?;
        if !(0.0..edge.length).contains(&pos.offset) {
            return None;
        }
        r.edge_start(pos.edge).map(|s| s + pos.offset)
    }

    /// Forward distance along `route` from one lane position to another.
    ///
    /// Cyclic routes always give a distance in `[0, length)`; on open
    /// routes a target behind the origin yields [`ArcDistance::NotAhead`].
    pub fn arc_distance(
        &self,
        from: &LanePosition,
        to: &LanePosition,
        route: RouteIdx,
    ) -> Result<ArcDistance, NetworkError> {
        let a = self
            .route_arc(route, from)
            .ok_or(NetworkError::NotOnRoute { route })?;
        let b = self
            .route_arc(route, to)
            .ok_or(NetworkError::NotOnRoute { route })?;
        Ok(self.routes[route].forward(a, b))
    }

    /// Planar coordinates of an arc position.
    pub fn point_at(&self, route: RouteIdx, arc: f64) -> Result<[f64; 2], NetworkError> {
        let pos = self.lane_position(route, arc)?;
        let edge = &self.edges[pos.edge];
        Ok(edge.shape.point_at(pos.offset / edge.length))
    }
}

fn positive(what: &'static str, value: f64) -> Result<(), NetworkError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(NetworkError::NonPositive { what, value })
    }
}

fn edge(id: &str, from: &str, to: &str, speed_limit: f64, shape: EdgeShape) -> Edge {
    Edge {
        id: id.into(),
        from: from.into(),
        to: to.into(),
        length: shape.arc_length(),
        speed_limit,
        shape,
    }
}

/// Single closed loop of circumference `length`.
pub fn build_ring(length: f64, speed_limit: f64) -> Result<NetworkSpec, NetworkError> {
    positive("ring length", length)?;
    positive("speed limit", speed_limit)?;
    let radius = length / (2.0 * PI);
    let mut ring = edge(
        "ring",
        "n0",
        "n0",
        speed_limit,
        EdgeShape::Arc {
            center: [0.0, 0.0],
            radius,
            start_angle: -PI / 2.0,
            sweep: 2.0 * PI,
        },
    );
    // keep the exact requested length rather than r * 2pi roundoff
    ring.length = length;
    NetworkSpec::new(
        Topology::Ring,
        vec![ring],
        vec![Route::new("loop", &["ring"], true)],
        Vec::new(),
    )
}

/// Two tangent-joined loops of radius `loop_radius` crossing at the origin.
///
/// The crossing diagonals run along y = x and y = -x and touch each loop
/// tangentially, so each loop contributes a 270 degree arc and each
/// diagonal half has length `loop_radius`. Total length is
/// `3 pi r + 4 r`.
pub fn build_figure_eight(loop_radius: f64, speed_limit: f64) -> Result<NetworkSpec, NetworkError> {
    positive("loop radius", loop_radius)?;
    positive("speed limit", speed_limit)?;
    let r = loop_radius;
    let c = r * std::f64::consts::SQRT_2;
    let h = c / 2.0;
    let edges = vec![
        edge(
            "d1_upper",
            "x",
            "a_in",
            speed_limit,
            EdgeShape::Line {
                from: [0.0, 0.0],
                to: [h, h],
            },
        ),
        edge(
            "loop_a",
            "a_in",
            "a_out",
            speed_limit,
            EdgeShape::Arc {
                center: [0.0, c],
                radius: r,
                start_angle: -PI / 4.0,
                sweep: 1.5 * PI,
            },
        ),
        edge(
            "d2_upper",
            "a_out",
            "x",
            speed_limit,
            EdgeShape::Line {
                from: [-h, h],
                to: [0.0, 0.0],
            },
        ),
        edge(
            "d2_lower",
            "x",
            "b_in",
            speed_limit,
            EdgeShape::Line {
                from: [0.0, 0.0],
                to: [h, -h],
            },
        ),
        edge(
            "loop_b",
            "b_in",
            "b_out",
            speed_limit,
            EdgeShape::Arc {
                center: [0.0, -c],
                radius: r,
                start_angle: PI / 4.0,
                sweep: -1.5 * PI,
            },
        ),
        edge(
            "d1_lower",
            "b_out",
            "x",
            speed_limit,
            EdgeShape::Line {
                from: [-h, -h],
                to: [0.0, 0.0],
            },
        ),
    ];
    let route = Route::new(
        "eight",
        &[
            "d1_upper", "loop_a", "d2_upper", "d2_lower", "loop_b", "d1_lower",
        ],
        true,
    );
    let second_crossing = edges[0].length + edges[1].length + edges[2].length;
    NetworkSpec::new(
        Topology::FigureEight,
        edges,
        vec![route],
        vec![ConflictPoint {
            id: "crossing".into(),
            approaches: vec![
                ConflictApproach { route: 0, arc: 0.0 },
                ConflictApproach {
                    route: 0,
                    arc: second_crossing,
                },
            ],
        }],
    )
}

/// Highway with an on-ramp joining at two thirds of its length.
pub fn build_merge(
    highway_length: f64,
    ramp_length: f64,
    speed_limit: f64,
) -> Result<NetworkSpec, NetworkError> {
    positive("highway length", highway_length)?;
    build_merge_with_junction(
        highway_length,
        ramp_length,
        highway_length * 2.0 / 3.0,
        speed_limit,
    )
}

/// Merge network with an explicit junction position along the highway.
pub fn build_merge_with_junction(
    highway_length: f64,
    ramp_length: f64,
    junction: f64,
    speed_limit: f64,
) -> Result<NetworkSpec, NetworkError> {
    positive("highway length", highway_length)?;
    positive("ramp length", ramp_length)?;
    positive("junction position", junction)?;
    positive("downstream length", highway_length - junction)?;
    positive("speed limit", speed_limit)?;
    let angle = 15f64.to_radians();
    let edges = vec![
        edge(
            "highway_up",
            "highway_src",
            "junction",
            speed_limit,
            EdgeShape::Line {
                from: [0.0, 0.0],
                to: [junction, 0.0],
            },
        ),
        edge(
            "ramp",
            "ramp_src",
            "junction",
            speed_limit,
            EdgeShape::Line {
                from: [
                    junction - ramp_length * angle.cos(),
                    -ramp_length * angle.sin(),
                ],
                to: [junction, 0.0],
            },
        ),
        edge(
            "downstream",
            "junction",
            "sink",
            speed_limit,
            EdgeShape::Line {
                from: [junction, 0.0],
                to: [highway_length, 0.0],
            },
        ),
    ];
    let ramp_arc = edges[1].length;
    let junction_arc = edges[0].length;
    NetworkSpec::new(
        Topology::Merge,
        edges,
        vec![
            Route::new("highway", &["highway_up", "downstream"], false),
            Route::new("on_ramp", &["ramp", "downstream"], false),
        ],
        vec![ConflictPoint {
            id: "junction".into(),
            approaches: vec![
                ConflictApproach {
                    route: 0,
                    arc: junction_arc,
                },
                ConflictApproach {
                    route: 1,
                    arc: ramp_arc,
                },
            ],
        }],
    )
}

/// Nearest vehicle ahead of `ego` and the bumper-to-bumper gap to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    pub id: VehicleId,
    pub gap: f64,
}

/// Finds the vehicle directly ahead of `ego` along its route.
///
/// On a cyclic route a lone vehicle leads itself with gap
/// `route length - own length`. Returns `None` on open routes when
/// nothing is ahead, or when `ego` is unknown.
pub fn leader_of(world: &World, ego: VehicleId) -> Option<Leader> {
    let idx = world.index_of(ego)?;
    world.leader_index(idx).map(|(li, gap)| Leader {
        id: world.vehicles()[li].id,
        gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_has_exact_length() {
        let net = build_ring(230.0, 30.0).unwrap();
        assert_eq!(net.routes.len(), 1);
        assert!(net.routes[0].cyclic);
        assert_eq!(net.routes[0].length(), 230.0);
        assert!(net.conflict_points.is_empty());
    }

    #[test]
    fn ring_wraps_forward_distance() {
        let net = build_ring(100.0, 30.0).unwrap();
        let from = net.lane_position(0, 90.0).unwrap();
        let to = net.lane_position(0, 10.0).unwrap();
        assert_eq!(
            net.arc_distance(&from, &to, 0).unwrap(),
            ArcDistance::Ahead(20.0)
        );

        let net = build_ring(230.0, 30.0).unwrap();
        let from = net.lane_position(0, 225.0).unwrap();
        let to = net.lane_position(0, 5.0).unwrap();
        assert_eq!(
            net.arc_distance(&from, &to, 0).unwrap(),
            ArcDistance::Ahead(10.0)
        );
        assert_eq!(
            net.arc_distance(&from, &from, 0).unwrap(),
            ArcDistance::Ahead(0.0)
        );
    }

    #[test]
    fn rejects_non_positive_dimensions() {
        assert!(build_ring(0.0, 30.0).is_err());
        assert!(build_ring(-5.0, 30.0).is_err());
        assert!(build_figure_eight(-1.0, 30.0).is_err());
        assert!(build_merge(600.0, 0.0, 30.0).is_err());
        assert!(build_merge(0.0, 100.0, 30.0).is_err());
    }

    #[test]
    fn figure_eight_single_conflict_on_route() {
        let net = build_figure_eight(30.0, 30.0).unwrap();
        assert_eq!(net.conflict_points.len(), 1);
        let r = &net.routes[0];
        let expected = 3.0 * PI * 30.0 + 4.0 * 30.0;
        assert!((r.length() - expected).abs() < 1e-9);
        for a in &net.conflict_points[0].approaches {
            assert_eq!(a.route, 0);
            assert!(a.arc >= 0.0 && a.arc < r.length());
        }
    }

    #[test]
    fn merge_routes_share_sink() {
        let net = build_merge(600.0, 100.0, 30.0).unwrap();
        assert_eq!(net.routes.len(), 2);
        let (hw, ramp) = (&net.routes[0], &net.routes[1]);
        assert!(!hw.cyclic && !ramp.cyclic);
        assert_eq!(hw.last_edge(), ramp.last_edge());
        assert!((hw.length() - 600.0).abs() < 1e-9);
        assert!((net.conflict_points[0].approaches[0].arc - 400.0).abs() < 1e-9);
    }

    #[test]
    fn open_route_reports_not_ahead() {
        let net = build_merge(600.0, 100.0, 30.0).unwrap();
        let a = net.lane_position(0, 300.0).unwrap();
        let b = net.lane_position(0, 100.0).unwrap();
        assert_eq!(net.arc_distance(&a, &b, 0).unwrap(), ArcDistance::NotAhead);
        assert_eq!(
            net.arc_distance(&b, &a, 0).unwrap(),
            ArcDistance::Ahead(200.0)
        );
    }

    #[test]
    fn off_route_position_is_an_error() {
        let net = build_merge(600.0, 100.0, 30.0).unwrap();
        let on_ramp = net.lane_position(1, 50.0).unwrap();
        let hw = net.lane_position(0, 10.0).unwrap();
        assert!(matches!(
            net.arc_distance(&hw, &on_ramp, 0),
            Err(NetworkError::NotOnRoute { .. })
        ));
    }

    #[test]
    fn json_round_trip_keeps_resolution() {
        let net = build_figure_eight(30.0, 30.0).unwrap();
        let back = NetworkSpec::from_json(&net.to_json()).unwrap();
        assert_eq!(back.routes[0].length(), net.routes[0].length());
        assert_eq!(back.routes[0].edges(), net.routes[0].edges());
        assert_eq!(back.conflict_points, net.conflict_points);
    }

    #[test]
    fn disconnected_route_is_rejected() {
        let net = build_figure_eight(30.0, 30.0).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&net.to_json()).unwrap();
        doc["routes"][0]["edge_ids"] = serde_json::json!(["d1_upper", "d2_upper"]);
        doc["routes"][0]["cyclic"] = serde_json::json!(false);
        assert!(matches!(
            NetworkSpec::from_json(&doc.to_string()),
            Err(NetworkError::Disconnected { .. })
        ));
    }
}
