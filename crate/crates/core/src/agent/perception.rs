use thiserror::Error;

use super::AgentError;
use crate::dynamics::{VehicleId, VehicleKind, World};
use crate::network::Topology;

#[derive(Debug, Clone, PartialEq)]
pub struct EgoState {
    pub id: VehicleId,
    pub speed: f64,
    /// Bumper gap to the leader; `None` when nobody is ahead.
    pub headway: Option<f64>,
    pub leader: Option<VehicleId>,
    pub leader_speed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: VehicleId,
    pub kind: VehicleKind,
    /// Signed bumper gap along the ego route; negative means behind.
    pub gap: f64,
    pub speed: f64,
}

/// What one CAV knows about its surroundings, renderable as the v1 text
/// template and parseable back from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDescription {
    pub topology: Topology,
    /// Total length of a cyclic route; `None` on open routes.
    pub route_length: Option<f64>,
    pub speed_limit: f64,
    pub intersections: usize,
    pub ego: EgoState,
    /// Sorted by gap ascending.
    pub neighbors: Vec<Neighbor>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SceneParseError {
    #[error("missing {0} line")]
    MissingLine(&'static str),
    #[error("bad field {field}: {value:?}")]
    BadField { field: String, value: String },
}

/// Renders the surroundings of `ego` as seen within `horizon` metres.
pub fn perceive(
    world: &World,
    ego: VehicleId,
    horizon: f64,
) -> Result<SceneDescription, AgentError> {
    let idx = world.index_of(ego).ok_or(AgentError::UnknownVehicle(ego))?;
    let net = world.network();
    let me = &world.vehicles()[idx];
    let route = &net.routes[me.route];

    let (headway, leader, leader_speed) = match world.leader_index(idx) {
        Some((j, gap)) if j != idx => {
            let l = &world.vehicles()[j];
            (Some(gap), Some(l.id), Some(l.speed))
        }
        _ => (None, None, None),
    };

    let mut neighbors = Vec::new();
    for (j, other) in world.vehicles().iter().enumerate() {
        if j == idx {
            continue;
        }
        let ahead = world.distance_between(idx, j).map(|d| d - other.length);
        let behind = world.distance_between(j, idx).map(|d| d - me.length);
        let gap = match (ahead, behind) {
            (Some(a), Some(b)) if a <= b => a,
            (Some(_), Some(b)) => -b,
            (Some(a), None) => a,
            (None, Some(b)) => -b,
            (None, None) => continue,
        };
        if gap.abs() <= horizon {
            neighbors.push(Neighbor {
                id: other.id,
                kind: other.kind,
                gap,
                speed: other.speed,
            });
        }
    }
    neighbors.sort_by(|a, b| a.gap.total_cmp(&b.gap).then(a.id.cmp(&b.id)));

    Ok(SceneDescription {
        topology: net.topology,
        route_length: route.cyclic.then(|| route.length()),
        speed_limit: net.speed_limit(),
        intersections: net.conflict_points.len(),
        ego: EgoState {
            id: me.id,
            speed: me.speed,
            headway,
            leader,
            leader_speed,
        },
        neighbors,
    })
}

fn opt(v: Option<f64>, unit: &str) -> String {
    match v {
        Some(x) => format!("{x:.2}{unit}"),
        None => "n/a".to_string(),
    }
}

impl SceneDescription {
    pub fn map_text(&self) -> String {
        let length = match self.route_length {
            Some(l) => format!("{l:.2} m (cyclic)"),
            None => "open".to_string(),
        };
        format!(
            "[MAP] scenario={}; route_length={}; speed_limit={:.2} m/s; intersections={}",
            self.topology.tag(),
            length,
            self.speed_limit,
            self.intersections
        )
    }

    pub fn ego_text(&self) -> String {
        let e = &self.ego;
        format!(
            "[EGO] id={}; speed={:.2} m/s; headway={}; leader={}; leader_speed={}",
            e.id,
            e.speed,
            opt(e.headway, " m"),
            e.leader.map_or("none".to_string(), |l| l.to_string()),
            opt(e.leader_speed, " m/s"),
        )
    }

    pub fn neighbors_text(&self) -> String {
        if self.neighbors.is_empty() {
            return "[NEIGHBORS] none".to_string();
        }
        let items: Vec<String> = self
            .neighbors
            .iter()
            .map(|n| {
                format!(
                    "{}:{} gap={:.2} m speed={:.2} m/s",
                    n.id,
                    n.kind.tag(),
                    n.gap,
                    n.speed
                )
            })
            .collect();
        format!("[NEIGHBORS] {}", items.join("; "))
    }

    pub fn render(&self) -> String {
        format!(
            "{}\n{}\n{}",
            self.map_text(),
            self.ego_text(),
            self.neighbors_text()
        )
    }

    /// The scene with everything beyond the ego's own speed removed.
    pub fn blind(&self) -> SceneDescription {
        SceneDescription {
            ego: EgoState {
                headway: None,
                leader: None,
                leader_speed: None,
                ..self.ego.clone()
            },
            neighbors: Vec::new(),
            ..self.clone()
        }
    }

    /// Reads the three template lines back out of arbitrary text.
    pub fn parse(text: &str) -> Result<SceneDescription, SceneParseError> {
        let line = |tag: &'static str| {
            text.lines()
                .map(str::trim)
                .find_map(|l| l.strip_prefix(tag))
                .map(str::trim)
                .ok_or(SceneParseError::MissingLine(tag))
        };
        let map = fields(line("[MAP]")?);
        let ego = fields(line("[EGO]")?);
        let neighbors_line = line("[NEIGHBORS]")?;

        let topology = Topology::from_tag(get(&map, "scenario")?)
            .ok_or_else(|| bad("scenario", get(&map, "scenario").unwrap_or_default()))?;
        let length = get(&map, "route_length")?;
        let route_length = if length == "open" {
            None
        } else {
            Some(number(
                "route_length",
                length.strip_suffix("(cyclic)").unwrap_or(length),
            )?)
        };
        let leader = get(&ego, "leader")?;
        let scene = SceneDescription {
            topology,
            route_length,
            speed_limit: number("speed_limit", get(&map, "speed_limit")?)?,
            intersections: get(&map, "intersections")?.parse().map_err(|_| {
                bad(
                    "intersections",
                    get(&map, "intersections").unwrap_or_default(),
                )
            })?,
            ego: EgoState {
                id: vehicle("id", get(&ego, "id")?)?,
                speed: number("speed", get(&ego, "speed")?)?,
                headway: optional("headway", get(&ego, "headway")?)?,
                leader: if leader == "none" {
                    None
                } else {
                    Some(vehicle("leader", leader)?)
                },
                leader_speed: optional("leader_speed", get(&ego, "leader_speed")?)?,
            },
            neighbors: if neighbors_line == "none" {
                Vec::new()
            } else {
                neighbors_line
                    .split(';')
                    .map(parse_neighbor)
                    .collect::<Result<_, _>>()?
            },
        };
        Ok(scene)
    }
}

fn bad(field: &str, value: &str) -> SceneParseError {
    SceneParseError::BadField {
        field: field.to_string(),
        value: value.to_string(),
    }
}

fn fields(line: &str) -> Vec<(&str, &str)> {
    line.split(';')
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect()
}

fn get<'a>(fields: &[(&str, &'a str)], key: &str) -> Result<&'a str, SceneParseError> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| bad(key, ""))
}

fn number(field: &str, value: &str) -> Result<f64, SceneParseError> {
    let v = value.trim();
    let v = v
        .strip_suffix("m/s")
        .or_else(|| v.strip_suffix('m'))
        .unwrap_or(v);
    v.trim()
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| bad(field, value))
}

fn optional(field: &str, value: &str) -> Result<Option<f64>, SceneParseError> {
    if value == "n/a" {
        Ok(None)
    } else {
        number(field, value).map(Some)
    }
}

fn vehicle(field: &str, value: &str) -> Result<VehicleId, SceneParseError> {
    value.parse().map_err(|_| bad(field, value))
}

fn parse_neighbor(item: &str) -> Result<Neighbor, SceneParseError> {
    let item = item.trim();
    let mut parts = item.split_whitespace();
    let head = parts.next().ok_or_else(|| bad("neighbor", item))?;
    let (id, kind) = head.split_once(':').ok_or_else(|| bad("neighbor", item))?;
    let rest: Vec<&str> = parts.collect();
    let rest = rest.join(" ");
    let gap = rest
        .split_once("gap=")
        .and_then(|(_, r)| r.split_once(" m"))
        .ok_or_else(|| bad("neighbor gap", item))?
        .0;
    let speed = rest
        .split_once("speed=")
        .and_then(|(_, r)| r.split_once(" m/s"))
        .ok_or_else(|| bad("neighbor speed", item))?
        .0;
    Ok(Neighbor {
        id: vehicle("neighbor id", id)?,
        kind: VehicleKind::from_tag(kind).ok_or_else(|| bad("neighbor kind", kind))?,
        gap: number("neighbor gap", gap)?,
        speed: number("neighbor speed", speed)?,
    })
}
