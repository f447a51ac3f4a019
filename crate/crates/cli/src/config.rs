//! Run configuration: CLI flag > config file > `DRDA_SEED` (seeds only) >
//! built-in default. Every lookup is recorded so the resolved run can be
//! echoed next to its outputs.

use std::collections::BTreeMap;
use std::path::Path;

use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Flag,
    File,
    Env,
    Default,
}

impl Source {
    fn label(self) -> &'static str {
        match self {
            Source::Flag => "flag",
            Source::File => "config",
            Source::Env => "env",
            Source::Default => "default",
        }
    }
}

pub trait ConfigValue: Sized + Clone {
    fn from_toml(v: &Value) -> Option<Self>;
    fn to_toml(&self) -> Value;
}

impl ConfigValue for usize {
    fn from_toml(v: &Value) -> Option<Self> {
        v.as_integer().and_then(|i| usize::try_from(i).ok())
    }
    fn to_toml(&self) -> Value {
        Value::Integer(*self as i64)
    }
}

impl ConfigValue for u64 {
    fn from_toml(v: &Value) -> Option<Self> {
        v.as_integer().and_then(|i| u64::try_from(i).ok())
    }
    fn to_toml(&self) -> Value {
        // TOML integers are signed; larger seeds are kept as strings.
        i64::try_from(*self).map_or_else(|_| Value::String(self.to_string()), Value::Integer)
    }
}

impl ConfigValue for f64 {
    fn from_toml(v: &Value) -> Option<Self> {
        v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
    }
    fn to_toml(&self) -> Value {
        Value::Float(*self)
    }
}

impl ConfigValue for bool {
    fn from_toml(v: &Value) -> Option<Self> {
        v.as_bool()
    }
    fn to_toml(&self) -> Value {
        Value::Boolean(*self)
    }
}

impl ConfigValue for String {
    fn from_toml(v: &Value) -> Option<Self> {
        v.as_str().map(str::to_string)
    }
    fn to_toml(&self) -> Value {
        Value::String(self.clone())
    }
}

impl ConfigValue for Vec<usize> {
    fn from_toml(v: &Value) -> Option<Self> {
        v.as_array()?.iter().map(usize::from_toml).collect()
    }
    fn to_toml(&self) -> Value {
        Value::Array(self.iter().map(|x| x.to_toml()).collect())
    }
}

impl ConfigValue for Vec<String> {
    fn from_toml(v: &Value) -> Option<Self> {
        v.as_array()?.iter().map(String::from_toml).collect()
    }
    fn to_toml(&self) -> Value {
        Value::Array(self.iter().map(|x| x.to_toml()).collect())
    }
}

pub struct Resolver {
    file: Table,
    resolved: BTreeMap<String, (Value, Source)>,
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> Result<Self, CliError> {
        let file = match config {
            None => Table::new(),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            }
        };
        Ok(Resolver {
            file,
            resolved: BTreeMap::new(),
        })
    }

    fn record<T: ConfigValue>(&mut self, key: &str, v: T, src: Source) -> T {
        self.resolved.insert(key.to_string(), (v.to_toml(), src));
        v
    }

    fn file_value<T: ConfigValue>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => T::from_toml(v)
                .map(Some)
                .ok_or_else(|| CliError::Usage(format!("config key {key:?} has the wrong type"))),
        }
    }

    /// Resolve `key` from the flag, the config file, or `default`.
    pub fn get<T: ConfigValue>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        if let Some(v) = flag {
            return Ok(self.record(key, v, Source::Flag));
        }
        if let Some(v) = self.file_value(key)? {
            return Ok(self.record(key, v, Source::File));
        }
        Ok(self.record(key, default, Source::Default))
    }

    /// Like [`Resolver::get`] but with no default: a missing value is a usage error.
    pub fn require<T: ConfigValue>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError> {
        if let Some(v) = flag {
            return Ok(self.record(key, v, Source::Flag));
        }
        if let Some(v) = self.file_value(key)? {
            return Ok(self.record(key, v, Source::File));
        }
        Err(CliError::Usage(format!("--{} is required (flag or config key {key:?})", key.replace('_', "-"))))
    }

    /// An optional setting: recorded only when given.
    pub fn optional<T: ConfigValue>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        if let Some(v) = flag {
            return Ok(Some(self.record(key, v, Source::Flag)));
        }
        if let Some(v) = self.file_value(key)? {
            return Ok(Some(self.record(key, v, Source::File)));
        }
        Ok(None)
    }

    /// Seeds additionally fall back to the `DRDA_SEED` environment variable.
    pub fn seed(&mut self, flag: Option<u64>, default: u64) -> Result<u64, CliError> {
        if let Some(v) = flag {
            return Ok(self.record("seed", v, Source::Flag));
        }
        if let Some(v) = self.file_value::<u64>("seed")? {
            return Ok(self.record("seed", v, Source::File));
        }
        if let Ok(s) = std::env::var("DRDA_SEED") {
            let v: u64 = s
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("DRDA_SEED={s:?} is not an unsigned integer")))?;
            return Ok(self.record("seed", v, Source::Env));
        }
        Ok(self.record("seed", default, Source::Default))
    }

    /// Resolved keys as TOML with the source of each value in a comment.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for (k, (v, src)) in &self.resolved {
            out.push_str(&format!("{k} = {v} # {}\n", src.label()));
        }
        out
    }

    /// Print the resolved configuration to stderr.
    pub fn announce(&self, command: &str) {
        eprintln!("drda {command}: resolved configuration");
        for (k, (v, src)) in &self.resolved {
            eprintln!("  {k} = {v} ({})", src.label());
        }
    }

    pub fn echo(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_toml()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "alpha = 2.5\nsteps = 10\naugs = [3, 4]\n").unwrap();
        let mut r = Resolver::new(Some(&path)).unwrap();
        assert_eq!(r.get("alpha", Some(1.0), 5.0).unwrap(), 1.0);
        assert_eq!(r.get("steps", None, 99usize).unwrap(), 10);
        assert_eq!(r.get("augs", None, Vec::<usize>::new()).unwrap(), vec![3usize, 4]);
        assert_eq!(r.get("beam", None, 5usize).unwrap(), 5);
        assert!(r.require::<usize>("prime", None).is_err());
        let echoed = r.to_toml();
        assert!(echoed.contains("alpha = 1.0 # flag"));
        assert!(echoed.contains("steps = 10 # config"));
        assert!(echoed.contains("beam = 5 # default"));
        assert!(echoed.parse::<Table>().is_ok());
    }

    #[test]
    fn wrong_type_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "steps = \"many\"\n").unwrap();
        let mut r = Resolver::new(Some(&path)).unwrap();
        assert!(matches!(r.get("steps", None, 1usize), Err(CliError::Usage(_))));
    }
}
