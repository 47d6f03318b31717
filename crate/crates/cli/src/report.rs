//! Report assembly, determinism hashing and atomic file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::experiments::Series;

/// Keys left out of the determinism hash.
const VOLATILE: [&str; 2] = ["timestamp", "determinism_hash"];

/// SHA-256 of the pretty-printed report without the volatile keys.
pub fn determinism_hash(report: &Value) -> String {
    let mut stable = report.clone();
    if let Value::Object(map) = &mut stable {
        for k in VOLATILE {
            map.remove(k);
        }
    }
    let bytes = serde_json::to_vec_pretty(&stable).expect("json values serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Attach the timestamp and the hash; map keys stay sorted.
pub fn finalize(mut body: Map<String, Value>) -> Value {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    body.insert("timestamp".into(), json!(now));
    let mut report = Value::Object(body);
    let hash = determinism_hash(&report);
    report["determinism_hash"] = json!(hash);
    report
}

/// Write through a sibling temporary file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("report");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("cannot create {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("cannot move report into {}", path.display()))?;
    Ok(())
}

pub fn write_series(dir: &Path, stem: &str, series: &Series) -> Result<PathBuf> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&series.headers)?;
    for row in &series.rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
    let path = dir.join(format!("{stem}.{}.csv", series.name));
    write_atomic(&path, &bytes)?;
    Ok(path)
}

pub fn write_report(dir: &Path, stem: &str, report: &Value) -> Result<PathBuf> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    let path = dir.join(format!("{stem}.json"));
    write_atomic(&path, &bytes)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_timestamp() {
        let mut a = Map::new();
        a.insert("x".into(), json!(1.5));
        let r1 = finalize(a.clone());
        let mut r2 = r1.clone();
        r2["timestamp"] = json!(12345);
        assert_eq!(determinism_hash(&r1), determinism_hash(&r2));
        assert_eq!(r1["determinism_hash"].as_str().unwrap().len(), 64);
        r2["x"] = json!(2.5);
        assert_ne!(determinism_hash(&r1), determinism_hash(&r2));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
