use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Role;
use crate::network::Topology;

/// A piece of stored driving guidance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experience {
    pub scenario_tag: Topology,
    #[serde(default)]
    pub role_tag: Option<Role>,
    pub text: String,
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

const BUILTIN: &[(&str, &str)] = &[
    (
        "figure_eight_follower.json",
        include_str!("../../memory/figure_eight_follower.json"),
    ),
    (
        "figure_eight_leader.json",
        include_str!("../../memory/figure_eight_leader.json"),
    ),
    (
        "figure_eight_queue.json",
        include_str!("../../memory/figure_eight_queue.json"),
    ),
    (
        "merge_dampener.json",
        include_str!("../../memory/merge_dampener.json"),
    ),
    (
        "ring_dampener.json",
        include_str!("../../memory/ring_dampener.json"),
    ),
    (
        "ring_general.json",
        include_str!("../../memory/ring_general.json"),
    ),
];

/// Ordered collection of experiences, one JSON document each on disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryStore {
    experiences: Vec<Experience>,
}

impl MemoryStore {
    pub fn new(experiences: Vec<Experience>) -> Self {
        MemoryStore { experiences }
    }

    /// The experiences shipped with the crate.
    pub fn builtin() -> Self {
        let experiences = BUILTIN
            .iter()
            .map(|(name, text)| {
                serde_json::from_str(text).unwrap_or_else(|e| panic!("builtin memory {name}: {e}"))
            })
            .collect();
        MemoryStore { experiences }
    }

    /// Loads every `*.json` file in `dir`, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self, MemoryError> {
        let io = |path: &Path, source| MemoryError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut experiences = Vec::with_capacity(paths.len());
        for path in paths {
            let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
            let exp = serde_json::from_str(&text).map_err(|source| MemoryError::Json {
                path: path.clone(),
                source,
            })?;
            experiences.push(exp);
        }
        Ok(MemoryStore { experiences })
    }

    pub fn experiences(&self) -> &[Experience] {
        &self.experiences
    }

    pub fn is_empty(&self) -> bool {
        self.experiences.is_empty()
    }

    /// Experiences for `scenario`, those tagged with `role` first; order is
    /// otherwise preserved.
    pub fn recall(&self, scenario: Topology, role: Option<Role>) -> Vec<&Experience> {
        let matching = self
            .experiences
            .iter()
            .filter(|e| e.scenario_tag == scenario);
        let (mut first, rest): (Vec<_>, Vec<_>) =
            matching.partition(|e| role.is_some() && e.role_tag == role);
        first.extend(rest);
        first
    }

    /// Adds an experience and, if `dir` is given, writes it as a new file.
    pub fn append(&mut self, exp: Experience, dir: Option<&Path>) -> Result<(), MemoryError> {
        if let Some(dir) = dir {
            let path = dir.join(format!(
                "{:04}_{}.json",
                self.experiences.len(),
                exp.scenario_tag.tag()
            ));
            let text = serde_json::to_string_pretty(&exp).expect("experience serialises");
            std::fs::write(&path, text).map_err(|source| MemoryError::Io { path, source })?;
        }
        self.experiences.push(exp);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp(tag: Topology, role: Option<Role>, text: &str) -> Experience {
        Experience {
            scenario_tag: tag,
            role_tag: role,
            text: text.into(),
        }
    }

    #[test]
    fn empty_store_recalls_nothing() {
        assert!(MemoryStore::default()
            .recall(Topology::Ring, None)
            .is_empty());
    }

    #[test]
    fn filters_by_scenario() {
        let store = MemoryStore::new(vec![
            exp(Topology::Ring, None, "r"),
            exp(Topology::Merge, None, "m"),
        ]);
        let got = store.recall(Topology::Ring, None);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].text, "r");
    }

    #[test]
    fn role_matches_come_first() {
        let store = MemoryStore::new(vec![
            exp(Topology::Ring, None, "plain"),
            exp(Topology::Ring, Some(Role::Leader), "lead"),
        ]);
        let got = store.recall(Topology::Ring, Some(Role::Leader));
        assert_eq!(got[0].text, "lead");
        assert_eq!(got[1].text, "plain");
    }

    #[test]
    fn builtin_covers_every_topology() {
        let store = MemoryStore::builtin();
        for t in [Topology::Ring, Topology::FigureEight, Topology::Merge] {
            assert!(!store.recall(t, None).is_empty());
        }
    }

    #[test]
    fn append_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = MemoryStore::default();
        store
            .append(exp(Topology::Merge, None, "summary"), Some(dir.path()))
            .unwrap();
        assert_eq!(MemoryStore::load_dir(dir.path()).unwrap(), store);
    }
}
