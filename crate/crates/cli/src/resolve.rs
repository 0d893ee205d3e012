//! Flag > config file > default resolution, recording every resolved value
//! for the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use learned_ilu::config::ConfigFile;
use learned_ilu::{Error, Result};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

pub struct Resolver {
    file: ConfigFile,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(path: Option<&Path>, known: &[&str]) -> Result<Self> {
        let file = match path {
            Some(p) => ConfigFile::load(p).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("cannot read config {}: {io}", p.display())),
                other => other,
            })?,
            None => ConfigFile::default(),
        };
        file.reject_unknown(known)?;
        Ok(Self {
            file,
            resolved: BTreeMap::new(),
        })
    }

    fn raw(&self, key: &str, flag: Option<String>) -> Option<String> {
        flag.or_else(|| self.file.get_str(key).map(str::to_string))
    }

    fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T> {
        raw.parse()
            .map_err(|_| Error::Config(format!("invalid value `{raw}` for `{key}`")))
    }

    pub fn value<T: FromStr>(&mut self, key: &str, flag: Option<String>, default: &str) -> Result<T> {
        let raw = self.raw(key, flag).unwrap_or_else(|| default.to_string());
        let v = Self::parse(key, &raw)?;
        self.resolved.insert(key.to_string(), raw);
        Ok(v)
    }

    pub fn optional<T: FromStr>(&mut self, key: &str, flag: Option<String>) -> Result<Option<T>> {
        match self.raw(key, flag) {
            Some(raw) => {
                let v = Self::parse(key, &raw)?;
                self.resolved.insert(key.to_string(), raw);
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    pub fn required(&mut self, key: &str, flag: Option<String>) -> Result<PathBuf> {
        self.optional(key, flag)?
            .ok_or_else(|| Error::Config(format!("missing required `--{}`", key.replace('_', "-"))))
    }

    /// A boolean switch: set on the command line, or `true`/`false` in the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        let v = if flag {
            true
        } else {
            self.file.get::<bool>(key)?.unwrap_or(false)
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn record(&mut self, key: &str, value: impl ToString) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    pub fn write_manifest(&self, dir: &Path, command: &str) -> Result<()> {
        let doc = serde_json::json!({
            "format_version": MANIFEST_VERSION,
            "command": command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "config": self.resolved,
        });
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }
}
