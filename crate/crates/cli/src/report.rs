//! Report assembly and emission: `report.json`, CSV tables and
//! `manifest.json` in `<out>/<subcommand>/`.
//!
//! Reports and tables are pure functions of the resolved configuration;
//! timestamps, timings and thread counts live in the manifest only.

use crate::config::RunConfig;
use crate::CliError;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Partial,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// The accepted region, e.g. "<= 0.12".
    pub accept: String,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SectionError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Section {
    pub name: String,
    pub status: Status,
    pub error: Option<SectionError>,
    pub checks: Vec<Check>,
    pub result: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub subcommand: String,
    pub status: Status,
    pub checks_passed: bool,
    pub config_hash: String,
    pub seed: u64,
    pub sections: Vec<Section>,
}

/// A CSV table; the first row is the header.
#[derive(Debug, Clone)]
pub struct Table {
    pub file: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(file: &str, header: &[&str]) -> Self {
        Self {
            file: file.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(cells);
    }
}

/// Format any displayable value as a CSV cell. `f64` uses the shortest
/// round-trip representation, which is deterministic.
pub fn cell<T: Display>(v: T) -> String {
    v.to_string()
}

/// Per-section collector for checks and tables.
#[derive(Default)]
pub struct Ctx {
    checks: Vec<Check>,
    tables: Vec<Table>,
}

impl Ctx {
    pub fn check(&mut self, name: impl Into<String>, value: f64, accept: impl Into<String>, pass: bool) {
        self.checks.push(Check {
            name: name.into(),
            value,
            accept: accept.into(),
            pass,
        });
    }

    pub fn at_most(&mut self, name: impl Into<String>, value: f64, bound: f64) {
        self.check(name, value, format!("<= {bound}"), value <= bound);
    }

    pub fn holds(&mut self, name: impl Into<String>, ok: bool) {
        self.check(name, ok as u8 as f64, "== 1", ok);
    }

    pub fn table(&mut self, t: Table) {
        self.tables.push(t);
    }
}

/// Accumulates sections for one subcommand run.
pub struct Run {
    subcommand: String,
    sections: Vec<Section>,
    tables: Vec<Table>,
    timings: Vec<(String, f64)>,
}

fn error_code(e: &lorentz_core::Error) -> String {
    let dbg = format!("{e:?}");
    dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
}

impl Run {
    pub fn new(subcommand: &str) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            sections: Vec::new(),
            tables: Vec::new(),
            timings: Vec::new(),
        }
    }

    /// Run one section. On error the section is marked failed and `None`
    /// is returned so that dependent sections can be skipped.
    pub fn section<T: Serialize>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Ctx) -> lorentz_core::Result<T>,
    ) -> Option<T> {
        let t0 = Instant::now();
        let mut ctx = Ctx::default();
        let out = f(&mut ctx);
        self.timings.push((name.to_string(), t0.elapsed().as_secs_f64()));
        match out {
            Ok(v) => {
                let result = serde_json::to_value(&v).unwrap_or_else(|e| Value::String(format!("unserializable: {e}")));
                self.sections.push(Section {
                    name: name.to_string(),
                    status: Status::Ok,
                    error: None,
                    checks: ctx.checks,
                    result,
                });
                self.tables.extend(ctx.tables);
                Some(v)
            }
            Err(e) => {
                self.fail(name, error_code(&e), e.to_string());
                None
            }
        }
    }

    pub fn failed(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name && s.status == Status::Failed)
    }

    /// Record a section that could not run because an input is missing.
    pub fn skip(&mut self, name: &str, needs: &str) {
        self.fail(name, "DependencyFailed".into(), format!("requires section `{needs}`"));
    }

    fn fail(&mut self, name: &str, code: String, message: String) {
        self.sections.push(Section {
            name: name.to_string(),
            status: Status::Failed,
            error: Some(SectionError { code, message }),
            checks: Vec::new(),
            result: Value::Null,
        });
    }

    pub fn finish(self, hash: String, seed: u64) -> Finished {
        let failed = self.sections.iter().filter(|s| s.status == Status::Failed).count();
        let status = match failed {
            0 => Status::Ok,
            n if n == self.sections.len() => Status::Failed,
            _ => Status::Partial,
        };
        let checks_passed = self.sections.iter().flat_map(|s| &s.checks).all(|c| c.pass);
        Finished {
            report: Report {
                subcommand: self.subcommand,
                status,
                checks_passed,
                config_hash: hash,
                seed,
                sections: self.sections,
            },
            tables: self.tables,
            timings: self.timings,
        }
    }
}

pub struct Finished {
    pub report: Report,
    pub tables: Vec<Table>,
    pub timings: Vec<(String, f64)>,
}

impl Finished {
    /// 0 ok, 3 a section failed, 4 a check failed.
    pub fn exit_code(&self) -> i32 {
        if self.report.status != Status::Ok {
            3
        } else if !self.report.checks_passed {
            4
        } else {
            0
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    subcommand: &'a str,
    config_source: Option<String>,
    config_hash: &'a str,
    seed: u64,
    threads: usize,
    started_unix: f64,
    wall_seconds: f64,
    section_seconds: Vec<(String, f64)>,
    files: Vec<String>,
    config: &'a RunConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Emission<'a> {
    pub dir: PathBuf,
    pub config: &'a RunConfig,
    pub config_source: Option<&'a Path>,
    pub started: SystemTime,
    pub clock: Instant,
}

impl Emission<'_> {
    pub fn write(&self, done: &Finished) -> Result<Vec<PathBuf>, CliError> {
        let io = |p: &Path, e: &dyn Display| CliError::Io(format!("{}: {e}", p.display()));
        std::fs::create_dir_all(&self.dir).map_err(|e| io(&self.dir, &e))?;
        let mut files = Vec::new();
        let report = self.dir.join("report.json");
        let body = serde_json::to_string_pretty(&done.report).map_err(|e| io(&report, &e))?;
        std::fs::write(&report, body + "\n").map_err(|e| io(&report, &e))?;
        files.push(report);
        for t in &done.tables {
            let path = self.dir.join(&t.file);
            let mut w = csv::Writer::from_path(&path).map_err(|e| io(&path, &e))?;
            w.write_record(&t.header).map_err(|e| io(&path, &e))?;
            for r in &t.rows {
                w.write_record(r).map_err(|e| io(&path, &e))?;
            }
            w.flush().map_err(|e| io(&path, &e))?;
            files.push(path);
        }
        let manifest_path = self.dir.join("manifest.json");
        let names = files
            .iter()
            .chain(std::iter::once(&manifest_path))
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        let m = Manifest {
            tool: "lorentz",
            version: env!("CARGO_PKG_VERSION"),
            core_version: lorentz_core::VERSION,
            subcommand: &done.report.subcommand,
            config_source: self.config_source.map(|p| p.display().to_string()),
            config_hash: &done.report.config_hash,
            seed: self.config.seed,
            threads: rayon::current_num_threads(),
            started_unix: self.started.duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
            wall_seconds: self.clock.elapsed().as_secs_f64(),
            section_seconds: done.timings.clone(),
            files: names,
            config: self.config,
        };
        let body = serde_json::to_string_pretty(&m).map_err(|e| io(&manifest_path, &e))?;
        std::fs::write(&manifest_path, body + "\n").map_err(|e| io(&manifest_path, &e))?;
        files.push(manifest_path);
        Ok(files)
    }
}
