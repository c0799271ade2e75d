//! Run directories: one fresh directory per invocation holding the resolved config,
//! the artifacts and a deterministic log.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.resolved";
pub const LOG_FILE: &str = "log.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub struct RunDir {
    path: PathBuf,
    log: String,
}

impl RunDir {
    /// Creates `<out>/<command>-<UTC timestamp>-<config digest>`, adding a numeric
    /// suffix rather than reusing an existing directory, and echoes the config into it.
    pub fn create(out: &Path, command: &str, cfg: &RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(out)?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{command}-{stamp}-{}", cfg.digest());
        let mut path = out.join(&base);
        let mut suffix = 1;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                    suffix += 1;
                    path = out.join(format!("{base}-{suffix}"));
                }
                Err(e) => return Err(e.into()),
            }
        }
        fs::write(path.join(CONFIG_FILE), cfg.render())?;
        println!("run_dir: {}", path.display());
        Ok(Self { path, log: String::new() })
    }

    /// Prints a line and records it in the run log.
    pub fn say(&mut self, line: impl AsRef<str>) {
        println!("{}", line.as_ref());
        self.log.push_str(line.as_ref());
        self.log.push('\n');
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.file(name);
        fs::write(&p, bytes)?;
        Ok(p)
    }

    /// Logs the SHA-256 of an artifact already written into the run directory.
    pub fn record_digest(&mut self, name: &str) -> Result<(), CliError> {
        let d = file_digest(&self.file(name))?;
        self.say(format!("digest {name} {d}"));
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf, CliError> {
        fs::write(self.path.join(LOG_FILE), &self.log)?;
        Ok(self.path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_runs_never_share_a_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let a = RunDir::create(tmp.path(), "gen-data", &cfg).unwrap().finish().unwrap();
        let b = RunDir::create(tmp.path(), "gen-data", &cfg).unwrap().finish().unwrap();
        assert_ne!(a, b);
        let name = a.file_name().unwrap().to_string_lossy().to_string();
        assert!(name.starts_with("gen-data-") && name.contains(&cfg.digest()), "{name}");
        let echoed = fs::read_to_string(a.join(CONFIG_FILE)).unwrap();
        assert_eq!(RunConfig::parse(&echoed).unwrap(), cfg);
    }

    #[test]
    fn log_collects_said_lines() {
        let tmp = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(tmp.path(), "x", &RunConfig::default()).unwrap();
        run.say("one");
        run.write("a.bin", b"abc").unwrap();
        run.record_digest("a.bin").unwrap();
        let dir = run.finish().unwrap();
        let log = fs::read_to_string(dir.join(LOG_FILE)).unwrap();
        assert_eq!(log, format!("one\ndigest a.bin {}\n", sha256_hex(b"abc")));
    }
}
