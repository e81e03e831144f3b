//! Digests, file writes and the `runs/<timestamp>-<hash>/` layout.

use std::path::{Path, PathBuf};

use hybrid_core::error::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Staged};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e)).stage("read")?;
    Ok(sha256_hex(&bytes))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from).stage("serialize")?;
    s.push('\n');
    Ok(s)
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).stage("write")?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e)).stage("write")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write(path, to_json(value)?)
}

/// A fresh `<out>/<UTC timestamp>-<config hash>` directory holding
/// `config.json`.
pub fn create_run_dir(cfg: &RunConfig, kind: &str) -> Result<PathBuf, CliError> {
    let json = to_json(cfg)?;
    let hash = &sha256_hex(format!("{kind}\n{json}").as_bytes())[..10];
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = cfg.out.join(format!("{stamp}-{hash}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = PathBuf::from(format!("{}-{n}", base.display()));
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).stage("write")?;
    write(&dir.join("config.json"), json)?;
    log::info!("{kind} run directory {}", dir.display());
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn run_dirs_do_not_collide() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig { out: tmp.path().to_path_buf(), ..RunConfig::default() };
        let a = create_run_dir(&cfg, "train").unwrap();
        let b = create_run_dir(&cfg, "train").unwrap();
        assert_ne!(a, b);
        let back: RunConfig = serde_json::from_str(&std::fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
