//! Run directories: resolved config, manifest, event stream and log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use bridgekit::{Error, Result};
use chrono::{SecondsFormat, Utc};
use log::{Level, LevelFilter, Log, Metadata, Record};
use serde_json::{json, Value};

struct Sinks {
    events: File,
    log: File,
}

/// Logs to stderr and, once a run directory is open, to its event stream
/// and plain-text log.
pub struct RunLogger {
    level: LevelFilter,
    sinks: Mutex<Option<Sinks>>,
}

static LOGGER: std::sync::OnceLock<RunLogger> = std::sync::OnceLock::new();

pub fn init_logging(level: LevelFilter) {
    let logger = LOGGER.get_or_init(|| RunLogger {
        level,
        sinks: Mutex::new(None),
    });
    if log::set_logger(logger).is_ok() {
        log::set_max_level(level);
    }
}

fn attach(events: File, log: File) {
    if let Some(l) = LOGGER.get() {
        *l.sinks.lock().unwrap() = Some(Sinks { events, log });
    }
}

fn detach() {
    if let Some(l) = LOGGER.get() {
        l.sinks.lock().unwrap().take();
    }
}

impl Log for RunLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let msg = record.args().to_string();
        eprintln!("[{}] {msg}", record.level().as_str().to_lowercase());
        if let Some(s) = self.sinks.lock().unwrap().as_mut() {
            let ts = Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true);
            let _ = writeln!(s.log, "{ts} {:<5} {msg}", record.level());
            let ev = json!({"ts": ts, "level": record.level().as_str(), "event": "log", "message": msg});
            let _ = writeln!(s.events, "{ev}");
        }
    }

    fn flush(&self) {
        if let Some(s) = self.sinks.lock().unwrap().as_mut() {
            let _ = s.events.flush();
            let _ = s.log.flush();
        }
    }
}

/// A timestamped directory recording one invocation.
pub struct RunDir {
    pub path: PathBuf,
    command: String,
    started: String,
    artifacts: Vec<(String, String)>,
    events: PathBuf,
}

pub const CONFIG_FILE: &str = "resolved-config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const LOG_FILE: &str = "run.log";

impl RunDir {
    /// Creates `<root>/<UTC timestamp>-<command>`, adding a numeric suffix
    /// if that name is taken.
    pub fn create(root: &Path, command: &str) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let stamp = Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
        let mut path = root.join(format!("{stamp}-{command}"));
        let mut n = 1;
        loop {
            match std::fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    path = root.join(format!("{stamp}-{command}-{n}"));
                    n += 1;
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Self::open(path, command)
    }

    /// Records into an existing run directory, appending to its logs.
    pub fn reopen(path: &Path, command: &str) -> Result<Self> {
        if !path.is_dir() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
            ));
        }
        Self::open(path.to_path_buf(), command)
    }

    fn open(path: PathBuf, command: &str) -> Result<Self> {
        let append = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))
        };
        let events = path.join(EVENTS_FILE);
        attach(append(&events)?, append(&path.join(LOG_FILE))?);
        let mut run = Self {
            path,
            command: command.to_string(),
            started: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            artifacts: Vec::new(),
            events,
        };
        run.register(EVENTS_FILE, "event stream (JSON Lines)");
        run.register(LOG_FILE, "human-readable log");
        run.event("start", json!({"command": command}))?;
        Ok(run)
    }

    /// Lists an artifact in the manifest; relative paths are inside the run.
    pub fn register(&mut self, path: impl AsRef<Path>, what: &str) {
        let p = path.as_ref().to_string_lossy().into_owned();
        if !self.artifacts.iter().any(|(a, _)| *a == p) {
            self.artifacts.push((p, what.to_string()));
        }
    }

    pub fn write(&mut self, name: &str, contents: &str, what: &str) -> Result<PathBuf> {
        let p = self.path.join(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        self.register(name, what);
        Ok(p)
    }

    pub fn event(&self, event: &str, data: Value) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&self.events)
            .map_err(|e| Error::io(&self.events, e))?;
        let ts = Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true);
        let line = json!({"ts": ts, "level": Level::Info.as_str(), "event": event, "data": data});
        writeln!(f, "{line}").map_err(|e| Error::io(&self.events, e))
    }

    /// Writes the manifest and detaches the log sinks.
    pub fn finish(mut self, status: &str, extra: Value) -> Result<()> {
        self.event("finish", json!({"status": status}))?;
        self.register(MANIFEST_FILE, "this manifest");
        let artifacts: Vec<Value> = self
            .artifacts
            .iter()
            .map(|(p, w)| json!({"path": p, "description": w}))
            .collect();
        let manifest = json!({
            "command": self.command,
            "started": self.started,
            "finished": Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            "status": status,
            "artifacts": artifacts,
            "details": extra,
        });
        log::logger().flush();
        detach();
        let p = self.path.join(MANIFEST_FILE);
        std::fs::write(
            &p,
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )
        .map_err(|e| Error::io(&p, e))
    }
}
