//! Built-in spec files.

use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub summary: &'static str,
    pub text: &'static str,
}

pub const ENTRIES: &[CatalogEntry] = &[
    CatalogEntry {
        name: "double_integrator",
        summary: "x1' = x2, x2' = u1; flat output x1",
        text: include_str!("../catalog/double_integrator.flat"),
    },
    CatalogEntry {
        name: "pendulum",
        summary: "torque-driven pendulum; flat output the angle",
        text: include_str!("../catalog/pendulum.flat"),
    },
    CatalogEntry {
        name: "planar_mass_point",
        summary: "point mass with two forces; flat output the position",
        text: include_str!("../catalog/planar_mass_point.flat"),
    },
    CatalogEntry {
        name: "unicycle",
        summary: "kinematic unicycle; flat output the position, singular at rest",
        text: include_str!("../catalog/unicycle.flat"),
    },
    CatalogEntry {
        name: "broken_phi_fixture",
        summary: "double integrator with a defective candidate (x2 = 2 y')",
        text: include_str!("../catalog/broken_phi_fixture.flat"),
    },
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CatalogError {
    #[error("unknown catalog entry `{0}`")]
    UnknownCatalogEntry(String),
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
}

pub fn get(name: &str) -> Result<&'static CatalogEntry, CatalogError> {
    ENTRIES
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| CatalogError::UnknownCatalogEntry(name.to_string()))
}

/// Writes `<dir>/<name>.flat` and returns its path.
pub fn write_entry(name: &str, dir: &Path) -> Result<PathBuf, CatalogError> {
    let entry = get(name)?;
    let path = dir.join(format!("{}.flat", entry.name));
    std::fs::write(&path, entry.text).map_err(|e| CatalogError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec_file::{load_spec, parse_spec};

    #[test]
    fn every_entry_parses_and_is_named_after_itself() {
        assert_eq!(ENTRIES.len(), 5);
        for e in ENTRIES {
            let spec = parse_spec(e.text).unwrap_or_else(|err| panic!("{}: {err}", e.name));
            assert_eq!(spec.name.as_deref(), Some(e.name));
            assert!(spec.plan.is_some());
        }
    }

    #[test]
    fn written_entry_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_entry("pendulum", dir.path()).unwrap();
        assert!(path.ends_with("pendulum.flat"));
        let spec = load_spec(&path).unwrap();
        assert_eq!((spec.system.n(), spec.flat.r()), (2, 1));
    }

    #[test]
    fn unknown_entry() {
        assert_eq!(
            get("nonexistent"),
            Err(CatalogError::UnknownCatalogEntry("nonexistent".into()))
        );
    }
}
