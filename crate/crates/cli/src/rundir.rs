//! Layout and ownership of a run directory.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::config::{RunConfig, Task};
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOCK_FILE: &str = "run.lock";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOG_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "metrics.json";
pub const METRIC_DUMP_FILE: &str = "metric.csv";

pub struct RunDir {
    pub root: PathBuf,
}

/// Exclusive ownership of a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl RunDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> CliResult<Self> {
        if !root.join(CONFIG_FILE).is_file() {
            return Err(CliError::Runtime(format!("{} is not a run directory", root.display())));
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn lock(&self) -> CliResult<RunLock> {
        let path = self.path(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| CliError::io(&path, e))?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Runtime(format!(
                "{} is owned by another process (remove {} if that process is gone)",
                self.root.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }

    pub fn write_config(&self, cfg: &RunConfig) -> CliResult<()> {
        let path = self.path(CONFIG_FILE);
        fs::write(&path, cfg.to_text()).map_err(|e| CliError::io(&path, e))
    }

    pub fn read_config(&self) -> CliResult<RunConfig> {
        let path = self.path(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let probe = RunConfig::parse(&text, Task::Nlot)?;
        RunConfig::parse(&text, probe.task())
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.path(CHECKPOINT_DIR)
    }

    pub fn has_checkpoint(&self) -> bool {
        self.checkpoint().join(lagot::checkpoint::MANIFEST_FILE).is_file()
    }

    /// Writes a checkpoint next to the current one and swaps it in.
    pub fn save_checkpoint<F>(&self, save: F) -> lagot::Result<()>
    where
        F: FnOnce(&Path) -> lagot::Result<()>,
    {
        let tmp = self.path("checkpoint.tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        save(&tmp)?;
        let dst = self.checkpoint();
        if dst.exists() {
            fs::remove_dir_all(&dst)?;
        }
        Ok(fs::rename(&tmp, &dst)?)
    }

    /// Drops log records at or past `next` (their step index, under
    /// `counter`), which a resumed run will produce again.
    pub fn truncate_log(&self, counter: &str, next: u64) -> CliResult<()> {
        let path = self.path(LOG_FILE);
        let Ok(file) = File::open(&path) else { return Ok(()) };
        let mut kept = String::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| CliError::io(&path, e))?;
            let keep = serde_json::from_str::<Value>(&line)
                .ok()
                .and_then(|v| v.get(counter).and_then(Value::as_u64))
                .is_some_and(|s| s < next);
            if keep {
                kept.push_str(&line);
                kept.push('\n');
            }
        }
        fs::write(&path, kept).map_err(|e| CliError::io(&path, e))
    }

    pub fn log(&self) -> CliResult<MetricsLog> {
        let path = self.path(LOG_FILE);
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(MetricsLog { file })
    }

    pub fn read_summary(&self) -> CliResult<Map<String, Value>> {
        let path = self.path(SUMMARY_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => match serde_json::from_str(&text)? {
                Value::Object(m) => Ok(m),
                _ => Err(CliError::Runtime(format!("{} is not a JSON object", path.display()))),
            },
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Map::new()),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }

    /// Merges `entries` into the summary file.
    pub fn update_summary(&self, entries: Map<String, Value>) -> CliResult<()> {
        let mut summary = self.read_summary()?;
        summary.extend(entries);
        let path = self.path(SUMMARY_FILE);
        let text = serde_json::to_string_pretty(&Value::Object(summary))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}

/// Append-only JSON-lines log.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    pub fn append(&mut self, record: &Value) -> lagot::Result<()> {
        let line = serde_json::to_string(record)?;
        Ok(writeln!(self.file, "{line}")?)
    }
}
