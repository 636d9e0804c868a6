//! One JSON line per run, appended next to the run's outputs.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

pub const FILE_NAME: &str = "runs.jsonl";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: &'static str,
    pub started_unix_ms: u128,
    pub seed: Option<u64>,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Wall-clock seconds per phase, plus `total`.
    pub timings: BTreeMap<String, f64>,
    pub summary: Value,
}

pub struct Recorder {
    manifest: RunManifest,
    start: Instant,
    phase: Instant,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
        Recorder {
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                tool_version: env!("CARGO_PKG_VERSION"),
                started_unix_ms: started,
                seed: None,
                config: Value::Null,
                inputs: Vec::new(),
                outputs: Vec::new(),
                timings: BTreeMap::new(),
                summary: Value::Null,
            },
            start: Instant::now(),
            phase: Instant::now(),
        }
    }

    pub fn config(&mut self, config: impl Serialize, seed: Option<u64>) {
        self.manifest.config = serde_json::to_value(config).unwrap_or(Value::Null);
        self.manifest.seed = seed;
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.to_path_buf());
    }

    /// Closes the current phase under `name`.
    pub fn phase(&mut self, name: &str) {
        let now = Instant::now();
        self.manifest.timings.insert(name.to_string(), (now - self.phase).as_secs_f64());
        self.phase = now;
    }

    pub fn summary(&mut self, summary: Value) {
        self.manifest.summary = summary;
    }

    /// Appends the manifest line to `path`.
    pub fn finish(mut self, path: &Path) -> std::io::Result<()> {
        self.manifest.timings.insert("total".into(), self.start.elapsed().as_secs_f64());
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut line = serde_json::to_string(&self.manifest)?;
        line.push('\n');
        // A single write keeps concurrent appenders from interleaving lines.
        OpenOptions::new().create(true).append(true).open(path)?.write_all(line.as_bytes())
    }
}

/// Default manifest location: `runs.jsonl` in the directory holding `output`.
/// Output directories get it in their parent, where it cannot be mistaken
/// for a Landmark JSONL file.
pub fn beside(output: &Path) -> PathBuf {
    output.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")).join(FILE_NAME)
}
