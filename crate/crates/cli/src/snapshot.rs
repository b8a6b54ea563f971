//! Snapshot CSV files: header `tau,particle,x0,x1`, one row per particle.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const HEADER: [&str; 4] = ["tau", "particle", "x0", "x1"];

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    tau: usize,
    particle: usize,
    x0: f64,
    x1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub tau: usize,
    pub positions: Vec<Vec<f64>>,
}

pub fn write_snapshot(path: &Path, tau: usize, positions: &[Vec<f64>]) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    if positions.is_empty() {
        w.write_record(HEADER).map_err(io)?;
    }
    for (i, p) in positions.iter().enumerate() {
        if p.len() != 2 {
            return Err(CliError::Validation(format!("snapshot rows must be 2D, particle {i} has {}", p.len())));
        }
        w.serialize(Row { tau, particle: i, x0: p[0], x1: p[1] }).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot, CliError> {
    let bad = |msg: String| CliError::Snapshot { path: path.into(), msg };
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(HEADER) {
        return Err(bad(format!("expected header {}, found {}", HEADER.join(","), header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut tau = None;
    let mut positions = Vec::new();
    for (k, row) in r.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        if *tau.get_or_insert(row.tau) != row.tau {
            return Err(bad(format!("row {k} has tau {} in a snapshot of tau {}", row.tau, tau.unwrap())));
        }
        if row.particle != k {
            return Err(bad(format!("row {k} lists particle {}", row.particle)));
        }
        positions.push(vec![row.x0, row.x1]);
    }
    Ok(Snapshot { tau: tau.unwrap_or(0), positions })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let pos = vec![vec![0.1, -2.5e-7], vec![1.0 / 3.0, 4.0], vec![-0.0, 1e300]];
        write_snapshot(&path, 12, &pos).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("tau,particle,x0,x1\n"));
        let snap = read_snapshot(&path).unwrap();
        assert_eq!(snap.tau, 12);
        assert_eq!(snap.positions, pos);
    }

    #[test]
    fn empty_snapshot_keeps_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        write_snapshot(&path, 0, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "tau,particle,x0,x1\n");
        assert!(read_snapshot(&path).unwrap().positions.is_empty());
    }

    #[test]
    fn rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        std::fs::write(&path, "t,i,x,y\n0,0,1,2\n").unwrap();
        assert!(matches!(read_snapshot(&path), Err(CliError::Snapshot { .. })));
    }
}
