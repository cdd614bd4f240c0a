//! `key=value` run configuration: flags override the file, the file
//! overrides built-in defaults, and every resolved value is recorded.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, (String, usize)>,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    /// Reads `path` if given. Blank lines and lines starting with `#` are skipped.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut r = Self::default();
        let Some(path) = path else {
            return Ok(r);
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::parse(format!("{}: line {}: expected key=value", path.display(), i + 1)));
            };
            let key = k.trim().replace('_', "-");
            if r.file.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(CliError::parse(format!("{}: line {}: '{key}' set twice", path.display(), i + 1)));
            }
        }
        Ok(r)
    }

    fn file_value<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        let Some((v, line)) = self.file.get(key) else {
            return Ok(None);
        };
        self.used.insert(key.to_string());
        v.parse()
            .map(Some)
            .map_err(|e| CliError::parse(format!("config line {line}: bad value '{v}' for {key}: {e}")))
    }

    fn record(&mut self, key: &str, value: String) {
        self.resolved.insert(key.to_string(), value);
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let file = self.file_value(key)?;
        let v = flag.or(file).unwrap_or(default);
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        let file = self.file_value(key)?;
        let v = flag.or(file);
        self.record(key, v.as_ref().map(|v| v.to_string()).unwrap_or_default());
        Ok(v)
    }

    pub fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        self.optional(key, flag)?.ok_or_else(|| CliError::usage(format!("missing required setting --{key}")))
    }

    /// Like [`Resolver::get`] but for a default that depends on other settings.
    pub fn get_or_else<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: impl FnOnce() -> T,
    ) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let file = self.file_value(key)?;
        let v = flag.or(file).unwrap_or_else(default);
        self.record(key, v.to_string());
        Ok(v)
    }

    /// Fails on file keys that no setting consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        match self.file.iter().find(|(k, _)| !self.used.contains(*k)) {
            Some((k, (_, line))) => Err(CliError::parse(format!("config line {line}: unknown key '{k}'"))),
            None => Ok(()),
        }
    }

    pub fn render(&self, command: &str) -> String {
        let mut out = format!("command={command}\n");
        for (k, v) in &self.resolved {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}
