//! Per-run output directory and logging.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{Context, Result};
use log::LevelFilter;

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "run.log";

/// Creates `<root>/<command>-<timestamp>-<hash>`, or `explicit` when given,
/// and writes the resolved configuration into it.
pub fn create_run_dir(root: &Path, explicit: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let command = cfg.command.map(|c| c.name()).unwrap_or("run");
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let base = format!("{command}-{stamp}-{}", cfg.hash());
            let mut dir = root.join(&base);
            let mut n = 2;
            while dir.exists() {
                dir = root.join(format!("{base}-{n}"));
                n += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))?;
    Ok(dir)
}

/// Writes every log line to stderr and to the run's log file.
struct Tee {
    file: Option<Mutex<File>>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stderr().write_all(buf)?;
        if let Some(f) = &self.file {
            f.lock().expect("log file lock").write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        if let Some(f) = &self.file {
            f.lock().expect("log file lock").flush()?;
        }
        io::stderr().flush()
    }
}

pub fn init_logging(level: LevelFilter, log_file: Option<&Path>) -> Result<()> {
    let file = match log_file {
        Some(p) => Some(Mutex::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => None,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp_secs()
        .target(env_logger::Target::Pipe(Box::new(Tee { file })))
        .try_init()
        .ok();
    Ok(())
}

/// The error chain joined by `: `, skipping causes already spelled out by
/// the message that wraps them.
pub fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}
