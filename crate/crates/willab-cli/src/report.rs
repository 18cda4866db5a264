//! Run reports, CSV/JSON-lines emission, and atomic file writes.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use willab_core::flow::{FlowSample, FlowTrace};
use willab_core::Real;

pub const JSONL_SCHEMA_VERSION: u32 = 1;

/// Summary of one dispatch, written as `report.json` next to the outputs.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config_hash: String,
    pub artifact_version: &'static str,
    pub schema_version: u32,
    pub status: String,
    pub wall_ms: u128,
    pub payload: serde_json::Value,
}

pub fn config_hash(canonical: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Write bytes atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_report(dir: &Path, report: &RunReport) -> std::io::Result<PathBuf> {
    let path = dir.join("report.json");
    let body = serde_json::to_string_pretty(report).expect("report serialization");
    write_atomic(&path, body.as_bytes())?;
    Ok(path)
}

/// Flow trace time series; columns documented in the README.
pub fn trace_csv(trace: &FlowTrace<Real>) -> String {
    let mut out = String::from(
        "t,energy,grad_norm,willmore_grad_norm,dissipation,res_b1,res_b2,dt,step\n",
    );
    for s in &trace.samples {
        out.push_str(&sample_row(s));
    }
    out
}

fn sample_row(s: &FlowSample<Real>) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}\n",
        s.t,
        s.energy,
        s.grad_norm,
        s.willmore_grad_norm,
        s.dissipation,
        s.res_b1,
        s.res_b2,
        s.dt,
        s.step_index
    )
}

/// `(a, b)` pair dump, e.g. for fit samples.
pub fn pairs_csv(header: (&str, &str), pairs: &[(Real, Real)]) -> String {
    let mut out = format!("{},{}\n", header.0, header.1);
    for (a, b) in pairs {
        out.push_str(&format!("{a},{b}\n"));
    }
    out
}

/// One JSON-lines record with the schema version stamped in.
pub fn jsonl_record<T: Serialize>(kind: &str, value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("jsonl serialization");
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("record".into(), serde_json::Value::String(kind.into()));
        map.insert("schema_version".into(), serde_json::Value::from(JSONL_SCHEMA_VERSION));
    } else {
        v = serde_json::json!({
            "record": kind,
            "schema_version": JSONL_SCHEMA_VERSION,
            "value": v,
        });
    }
    let mut line = serde_json::to_string(&v).expect("jsonl line");
    line.push('\n');
    line
}
