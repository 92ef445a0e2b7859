//! Labeled keypoints as CSV rows `shape_id,keypoint_id,x,y,z`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use super::mesh::Point3;
use super::GeometryError;

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub id: String,
    pub position: Point3,
}

/// Keypoints of one shape; ids are unique within the set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeypointSet {
    pub shape_id: String,
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn get(&self, id: &str) -> Option<&Keypoint> {
        self.points.iter().find(|k| k.id == id)
    }
}

/// Parses CSV text into one set per shape id, in order of first appearance
/// of each id within the file. A header row starting with `shape_id` is
/// skipped.
pub fn parse_keypoints(text: &str) -> Result<BTreeMap<String, KeypointSet>, GeometryError> {
    let mut sets: BTreeMap<String, KeypointSet> = BTreeMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let row = raw.trim();
        if row.is_empty() || row.starts_with('#') || row.starts_with("shape_id") {
            continue;
        }
        let cols: Vec<&str> = row.split(',').map(str::trim).collect();
        if cols.len() != 5 {
            return Err(GeometryError::Parse {
                line,
                message: format!("expected 5 columns, got {}", cols.len()),
            });
        }
        let mut xyz = [0.0; 3];
        for k in 0..3 {
            xyz[k] = cols[2 + k].parse().map_err(|_| GeometryError::Parse {
                line,
                message: format!("bad coordinate '{}'", cols[2 + k]),
            })?;
        }
        if !seen.insert((cols[0].to_string(), cols[1].to_string())) {
            return Err(GeometryError::Parse {
                line,
                message: format!("duplicate keypoint id '{}' for shape '{}'", cols[1], cols[0]),
            });
        }
        sets.entry(cols[0].to_string())
            .or_insert_with(|| KeypointSet {
                shape_id: cols[0].to_string(),
                points: Vec::new(),
            })
            .points
            .push(Keypoint {
                id: cols[1].to_string(),
                position: xyz,
            });
    }
    Ok(sets)
}

pub fn read_keypoints(path: &Path) -> Result<BTreeMap<String, KeypointSet>, GeometryError> {
    let text = std::fs::read_to_string(path).map_err(|e| GeometryError::Io(path.display().to_string(), e))?;
    parse_keypoints(&text)
}

pub fn write_keypoints(sets: &[&KeypointSet]) -> String {
    let mut s = String::from("shape_id,keypoint_id,x,y,z\n");
    for set in sets {
        for k in &set.points {
            let p = k.position;
            let _ = writeln!(s, "{},{},{},{},{}", set.shape_id, k.id, p[0], p[1], p[2]);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_reject_duplicates() {
        let text = "shape_id,keypoint_id,x,y,z\na,0,1,2,3\na,1,0,0,0\nb,0,1,1,1\n";
        let sets = parse_keypoints(text).unwrap();
        assert_eq!(sets["a"].points.len(), 2);
        assert_eq!(sets["b"].get("0").unwrap().position, [1.0, 1.0, 1.0]);
        assert!(parse_keypoints("a,0,1,2,3\na,0,1,2,3\n").is_err());
        assert!(parse_keypoints("a,0,1,2\n").is_err());
    }
}
