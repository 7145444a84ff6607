//! Deterministic run outputs.
//!
//! Every command writes three files into its output directory:
//! `results.csv` (tabular data), `report.json` (the command's typed
//! summary), and `manifest.json` (provenance: scenario hash, seed,
//! thread count, output digests, and wall-clock stage timings).
//! Numbers are written with the shortest round-trip decimal form, so
//! reruns with the same seed produce byte-identical CSV and report
//! files; timings are quarantined in the manifest, which is the only
//! file allowed to differ between reruns.

use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::scenario::hex_digest;

pub struct RunWriter {
    out_dir: PathBuf,
    command: String,
    scenario_name: String,
    scenario_sha256: String,
    master_seed: u64,
    threads: usize,
    stage_timings_ms: Vec<(String, u64)>,
    outputs: Vec<(String, String)>,
    stage_start: Instant,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    scenario_name: &'a str,
    scenario_sha256: &'a str,
    toolkit_version: &'a str,
    master_seed: u64,
    threads: usize,
    stage_timings_ms: &'a [(String, u64)],
    outputs: &'a [(String, String)],
}

impl RunWriter {
    pub fn new(
        out_dir: &Path,
        command: &str,
        scenario_name: &str,
        scenario_sha256: &str,
        master_seed: u64,
        threads: usize,
    ) -> std::io::Result<Self> {
        fs::create_dir_all(out_dir)?;
        Ok(RunWriter {
            out_dir: out_dir.to_path_buf(),
            command: command.to_string(),
            scenario_name: scenario_name.to_string(),
            scenario_sha256: scenario_sha256.to_string(),
            master_seed,
            threads,
            stage_timings_ms: Vec::new(),
            outputs: Vec::new(),
            stage_start: Instant::now(),
        })
    }

    /// Records wall time since the previous stage mark under `label`.
    pub fn mark_stage(&mut self, label: &str) {
        let elapsed = self.stage_start.elapsed().as_millis() as u64;
        self.stage_timings_ms.push((label.to_string(), elapsed));
        self.stage_start = Instant::now();
    }

    /// Writes `results.csv` from a header row plus formatted records.
    pub fn write_csv(&mut self, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
        let path = self.out_dir.join("results.csv");
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header)?;
        for row in rows {
            writer.write_record(row)?;
        }
        let bytes = writer.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        self.outputs.push(("results.csv".to_string(), hex_digest(&bytes)));
        fs::write(path, bytes)
    }

    /// Writes `report.json` from the command's typed summary.
    pub fn write_report<T: Serialize>(&mut self, report: &T) -> std::io::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(report)?;
        bytes.push(b'\n');
        self.outputs.push(("report.json".to_string(), hex_digest(&bytes)));
        fs::write(self.out_dir.join("report.json"), bytes)
    }

    /// Writes `manifest.json` and consumes the writer.
    pub fn finish(mut self) -> std::io::Result<()> {
        self.mark_stage("write-outputs");
        let manifest = Manifest {
            command: &self.command,
            scenario_name: &self.scenario_name,
            scenario_sha256: &self.scenario_sha256,
            toolkit_version: env!("CARGO_PKG_VERSION"),
            master_seed: self.master_seed,
            threads: self.threads,
            stage_timings_ms: &self.stage_timings_ms,
            outputs: &self.outputs,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(self.out_dir.join("manifest.json"), bytes)
    }
}

/// Shortest round-trip decimal form; the same bits always print the
/// same bytes, which is what makes the CSV outputs reproducible.
pub fn fmt(v: f64) -> String {
    format!("{}", v)
}
