//! Versioned binary snapshots of height-field states.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"WLSN"            4 bytes
//! version u32               currently 1
//! n_s, n_phi u32            grid dimensions
//! topology u8               0 disk, 1 annulus
//! axisymmetric u8
//! chart_hash u64            FNV-1a of the chart parameters
//! t f64                     flow time of the snapshot
//! w  n_s * n_phi * f64      raw node values
//! checksum u64              FNV-1a of everything above
//! ```

use std::fmt;
use std::io::{Read, Write};
use willab_core::grid::{Field, ParamGrid, Topology};

pub const MAGIC: &[u8; 4] = b"WLSN";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum SnapshotError {
    VersionMismatch { expected: String, found: String },
    CorruptSnapshot(String),
    Io(std::io::Error),
}

impl fmt::Display for SnapshotError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::VersionMismatch { expected, found } => {
                write!(f, "snapshot version mismatch: expected {expected}, found {found}")
            }
            Self::CorruptSnapshot(msg) => write!(f, "corrupt snapshot: {msg}"),
            Self::Io(e) => write!(f, "snapshot io: {e}"),
        }
    }
}

impl std::error::Error for SnapshotError {}

impl From<std::io::Error> for SnapshotError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub grid: ParamGrid,
    pub chart_hash: u64,
    pub t: f64,
    pub values: Vec<f64>,
}

pub fn write_snapshot<W: Write>(mut out: W, snap: &Snapshot) -> Result<(), SnapshotError> {
    let mut buf = Vec::with_capacity(40 + 8 * snap.values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(snap.grid.n_s as u32).to_le_bytes());
    buf.extend_from_slice(&(snap.grid.n_phi as u32).to_le_bytes());
    buf.push(match snap.grid.topology {
        Topology::Disk => 0,
        Topology::Annulus => 1,
    });
    buf.push(snap.grid.axisymmetric as u8);
    buf.extend_from_slice(&snap.chart_hash.to_le_bytes());
    buf.extend_from_slice(&snap.t.to_le_bytes());
    for v in &snap.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_snapshot<R: Read>(mut input: R) -> Result<Snapshot, SnapshotError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    if buf.len() < 40 + 8 {
        return Err(SnapshotError::CorruptSnapshot(format!(
            "file too short: {} bytes",
            buf.len()
        )));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let checksum = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != checksum {
        return Err(SnapshotError::CorruptSnapshot("checksum mismatch".into()));
    }
    if &body[0..4] != MAGIC {
        return Err(SnapshotError::VersionMismatch {
            expected: format!("magic {MAGIC:?}"),
            found: format!("{:?}", &body[0..4]),
        });
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(SnapshotError::VersionMismatch {
            expected: format!("version {VERSION}"),
            found: format!("version {version}"),
        });
    }
    let n_s = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let n_phi = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let topology = match body[16] {
        0 => Topology::Disk,
        1 => Topology::Annulus,
        other => {
            return Err(SnapshotError::CorruptSnapshot(format!("unknown topology tag {other}")))
        }
    };
    let axisymmetric = body[17] != 0;
    let chart_hash = u64::from_le_bytes(body[18..26].try_into().unwrap());
    let t = f64::from_le_bytes(body[26..34].try_into().unwrap());
    let expected = 34 + 8 * n_s * n_phi;
    if body.len() != expected {
        return Err(SnapshotError::CorruptSnapshot(format!(
            "payload length {} does not match dims {n_s} x {n_phi}",
            body.len()
        )));
    }
    let mut values = Vec::with_capacity(n_s * n_phi);
    for chunk in body[34..].chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let grid = ParamGrid { topology, n_s, n_phi, axisymmetric };
    Ok(Snapshot { grid, chart_hash, t, values })
}

/// Check that a snapshot belongs to the expected grid/chart.
pub fn check_compatible(snap: &Snapshot, grid: &ParamGrid, chart_hash: u64) -> Result<(), SnapshotError> {
    if &snap.grid != grid {
        return Err(SnapshotError::VersionMismatch {
            expected: format!("grid {} x {} {:?}", grid.n_s, grid.n_phi, grid.topology),
            found: format!(
                "grid {} x {} {:?}",
                snap.grid.n_s, snap.grid.n_phi, snap.grid.topology
            ),
        });
    }
    if snap.chart_hash != chart_hash {
        return Err(SnapshotError::VersionMismatch {
            expected: format!("chart {chart_hash:016x}"),
            found: format!("chart {:016x}", snap.chart_hash),
        });
    }
    Ok(())
}

pub fn field_from(snap: &Snapshot) -> Field<f64> {
    Field { n_s: snap.grid.n_s, n_phi: snap.grid.n_phi, data: snap.values.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Snapshot {
        Snapshot {
            grid: ParamGrid::new(Topology::Disk, 16, 1, true).unwrap(),
            chart_hash: 0xdead_beef,
            t: 1.25,
            values: (0..16).map(|i| (i as f64) * 0.5 - 3.0).collect(),
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let snap = sample();
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &snap).unwrap();
        let back = read_snapshot(&buf[..]).unwrap();
        assert_eq!(snap, back);
        // and writing the decoded snapshot reproduces the bytes
        let mut buf2 = Vec::new();
        write_snapshot(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn truncation_is_detected() {
        let snap = sample();
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &snap).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_snapshot(&buf[..]).unwrap_err(),
            SnapshotError::CorruptSnapshot(_)
        ));
    }

    #[test]
    fn flipped_bit_is_detected() {
        let snap = sample();
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &snap).unwrap();
        buf[45] ^= 0x10;
        assert!(matches!(
            read_snapshot(&buf[..]).unwrap_err(),
            SnapshotError::CorruptSnapshot(_)
        ));
    }

    #[test]
    fn wrong_grid_is_a_version_mismatch() {
        let snap = sample();
        let other = ParamGrid::new(Topology::Disk, 24, 1, true).unwrap();
        assert!(matches!(
            check_compatible(&snap, &other, snap.chart_hash).unwrap_err(),
            SnapshotError::VersionMismatch { .. }
        ));
        assert!(check_compatible(&snap, &snap.grid.clone(), snap.chart_hash).is_ok());
        assert!(matches!(
            check_compatible(&snap, &snap.grid.clone(), 7).unwrap_err(),
            SnapshotError::VersionMismatch { .. }
        ));
    }
}
