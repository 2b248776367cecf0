use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FieldSample, Galaxy, SimError, SimulatorConfig};

/// Sidecar record written next to each field CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub phi: f64,
    pub seed: u64,
    pub label: String,
    pub index: u64,
    pub count: usize,
    pub config_hash: String,
}

/// Writes `<stem>.csv` (header `x1,x2,d,log_m`) and `<stem>.meta.toml`.
pub fn write_field(dir: &Path, stem: &str, field: &FieldSample, cfg: &SimulatorConfig) -> Result<(), SimError> {
    let mut csv = String::from("x1,x2,d,log_m\n");
    for g in &field.galaxies {
        writeln!(csv, "{},{},{},{}", g.x1, g.x2, g.d, g.log_m).expect("string write");
    }
    fs::write(dir.join(format!("{stem}.csv")), csv)?;

    let (seed, label, index) = field.origin.clone().unwrap_or((0, String::new(), 0));
    let meta = FieldMeta {
        phi: field.phi,
        seed,
        label,
        index,
        count: field.len(),
        config_hash: cfg.hash(),
    };
    let text = toml::to_string(&meta).map_err(|e| SimError::Parse(e.to_string()))?;
    fs::write(dir.join(format!("{stem}.meta.toml")), text)?;
    Ok(())
}

pub fn read_field_csv(path: &Path) -> Result<Vec<Galaxy>, SimError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("x1,x2,d,log_m") => {}
        other => return Err(SimError::Parse(format!("unexpected header {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let vals = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| SimError::Parse(format!("row {}: {e}", i + 1)))?;
            match vals.as_slice() {
                &[x1, x2, d, log_m] => Ok(Galaxy { x1, x2, d, log_m }),
                _ => Err(SimError::Parse(format!("row {} has {} columns", i + 1, vals.len()))),
            }
        })
        .collect()
}

pub fn read_field_meta(path: &Path) -> Result<FieldMeta, SimError> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| SimError::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::simulate_indexed;

    #[test]
    fn dump_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SimulatorConfig::desk();
        let f = simulate_indexed(&cfg, 5, "sim", 2, None).unwrap();
        write_field(dir.path(), "field_0002", &f, &cfg).unwrap();
        let text = fs::read_to_string(dir.path().join("field_0002.csv")).unwrap();
        assert!(text.starts_with("x1,x2,d,log_m\n"));
        let back = read_field_csv(&dir.path().join("field_0002.csv")).unwrap();
        assert_eq!(back, f.galaxies);
        let meta = read_field_meta(&dir.path().join("field_0002.meta.toml")).unwrap();
        assert_eq!(meta.phi, f.phi);
        assert_eq!(meta.seed, 5);
        assert_eq!(meta.index, 2);
        assert_eq!(meta.count, f.len());
        assert_eq!(meta.config_hash, cfg.hash());
    }

    #[test]
    fn bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_field_csv(&p), Err(SimError::Parse(_))));
    }
}
