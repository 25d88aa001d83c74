//! Run directory layout, verdict lines and the JSON side files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Settings;
use crate::CliError;

/// Outcome of one in-run check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, pass: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            pass,
            detail,
        }
    }

    pub fn line(&self) -> String {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        format!("{tag} {}: {}", self.name, self.detail)
    }
}

/// What an experiment hands back for the summary files.
#[derive(Debug, Clone)]
pub struct Report {
    pub checks: Vec<Check>,
    /// Deterministic summary values (no wall-clock data unless the
    /// experiment measures time).
    pub summary: Value,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Buffered writer for `name`, handed to `body`.
    pub fn write<F>(&self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
    {
        let mut w = BufWriter::new(File::create(self.path(name))?);
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, name: &str, value: &Value) -> Result<(), CliError> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(|e| CliError::Io(e.into()))?;
            writeln!(w)?;
            Ok(())
        })
    }
}

fn unix_seconds(t: SystemTime) -> f64 {
    t.duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub fn settings_json(s: &Settings) -> Value {
    json!({
        "experiment": s.experiment.name(),
        "system": format!("{:?}", s.system),
        "noise": format!("{:?}", s.noise),
        "seeds": s.seeds,
        "eta": s.eta,
        "t0": s.t0,
        "horizon": s.horizon,
        "forgetting": s.forgetting,
        "probe_scale": s.probe_scale,
        "initial_gain": format!("{:?}", s.initial_gain),
        "iterations": s.iterations,
        "sigmas": s.sigmas,
        "dims": s.dims,
        "targets": s.targets,
        "zo": format!("{:?}", s.zo),
    })
}

pub fn write_summary(dir: &RunDir, settings: &Settings, report: &Report) -> Result<(), CliError> {
    dir.write_json(
        "summary.json",
        &json!({
            "settings": settings_json(settings),
            "checks": report.checks,
            "passed": report.passed(),
            "summary": report.summary,
        }),
    )
}

pub fn write_metadata(
    dir: &RunDir,
    started: SystemTime,
    finished: SystemTime,
) -> Result<(), CliError> {
    dir.write_json(
        "metadata.json",
        &json!({
            "started_unix": unix_seconds(started),
            "finished_unix": unix_seconds(finished),
            "elapsed_s": finished.duration_since(started).map_or(0.0, |d| d.as_secs_f64()),
            "version": env!("CARGO_PKG_VERSION"),
            "parallel": deepo::par::is_parallel(),
        }),
    )
}

pub fn write_diagnostics(
    dir: &RunDir,
    settings: &Settings,
    err: &CliError,
) -> Result<(), CliError> {
    let seed = match err {
        CliError::Numerical { seed, .. } => *seed,
        _ => None,
    };
    dir.write_json(
        "diagnostics.json",
        &json!({
            "error": err.to_string(),
            "detail": format!("{err:?}"),
            "seed": seed,
            "settings": settings_json(settings),
        }),
    )
}
