//! JSON reports under `reports/`. Each report embeds the resolved run config;
//! wall-clock times go only to a sibling `.meta.json` so that reports of
//! identical runs stay byte-identical.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{io_error, CliError, CliResult};

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    config: &'a RunConfig,
    result: &'a T,
}

#[derive(Serialize)]
struct Meta<'a> {
    command: &'a str,
    version: &'a str,
    started_unix_ms: u128,
    finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Times one command and writes its report pair.
pub struct Reporter {
    started: u128,
    command: String,
}

impl Reporter {
    pub fn start(command: &str) -> Self {
        Reporter {
            started: now_ms(),
            command: command.to_string(),
        }
    }

    pub fn write(&self, out: &Path, name: &str, config: &RunConfig, result: &impl Serialize) -> CliResult<PathBuf> {
        let dir = out.join("reports");
        let path = dir.join(format!("{name}.json"));
        write_json(&path, &Report { config, result })?;
        let meta = Meta {
            command: &self.command,
            version: env!("CARGO_PKG_VERSION"),
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
        };
        write_json(&dir.join(format!("{name}.meta.json")), &meta)?;
        Ok(path)
    }
}
