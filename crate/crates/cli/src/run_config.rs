//! `key = value` run files: every training key plus file paths.
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the directory of the file they appear in. Values given
//! on the command line are applied afterwards and win.

use std::path::{Path, PathBuf};

use relmem::config::TrainConfig;
use relmem::{Error, Result};

pub const PATH_KEYS: &[&str] = &["train", "dev", "test", "embeddings", "contextual", "checkpoint", "report"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub contextual: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Paths {
    fn slot(&mut self, key: &str) -> Option<&mut Option<PathBuf>> {
        Some(match key {
            "train" => &mut self.train,
            "dev" => &mut self.dev,
            "test" => &mut self.test,
            "embeddings" => &mut self.embeddings,
            "contextual" => &mut self.contextual,
            "checkpoint" => &mut self.checkpoint,
            "report" => &mut self.report,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, &path.display().to_string(), base)
    }

    pub fn parse(text: &str, source: &str, base: &Path) -> Result<Self> {
        let mut rc = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.to_string(),
                line: n + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            rc.set_relative(key.trim(), value.trim(), base).map_err(|e| Error::Parse {
                path: source.to_string(),
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(rc)
    }

    /// Sets one key; paths are taken as given.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_relative(key, value, Path::new(""))
    }

    fn set_relative(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        match self.paths.slot(key) {
            Some(slot) => {
                *slot = if value.is_empty() { None } else { Some(base.join(value)) };
                Ok(())
            }
            None => self.train.set(key, value),
        }
    }

    /// Every key this file format accepts.
    pub fn keys() -> Vec<&'static str> {
        PATH_KEYS.iter().chain(relmem::config::KEYS).copied().collect()
    }

    /// Checks the named inputs are present and readable and the outputs'
    /// directories exist.
    pub fn check_paths(&self, required: &[&str]) -> Result<()> {
        let p = &self.paths;
        let inputs = [
            ("train", &p.train),
            ("dev", &p.dev),
            ("test", &p.test),
            ("embeddings", &p.embeddings),
            ("contextual", &p.contextual),
        ];
        for (key, path) in inputs {
            match path {
                Some(path) if !path.is_file() => {
                    return Err(Error::Config(format!("{key} file {} does not exist", path.display())));
                }
                None if required.contains(&key) => return Err(Error::Config(format!("missing `{key}` path"))),
                _ => {}
            }
        }
        for (key, path) in [("checkpoint", &p.checkpoint), ("report", &p.report)] {
            match path {
                Some(path) => {
                    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
                    if !dir.is_dir() {
                        return Err(Error::Config(format!("{key} directory {} does not exist", dir.display())));
                    }
                }
                None if required.contains(&key) => return Err(Error::Config(format!("missing `{key}` path"))),
                None => {}
            }
        }
        self.train.validate()
    }
}
