//! Flat `key = value` run configuration.
//!
//! Every parameter is looked up in three places, first hit wins: the command
//! line flag, the `--config` file, the built-in default. Each resolved value
//! is remembered so the run can write a manifest that reproduces it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Display};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use advlab_core::SourceKind;

use crate::CliError;

pub const MANIFEST: &str = "manifest";

#[derive(Debug)]
pub struct Resolver {
    command: &'static str,
    file: BTreeMap<String, String>,
    seen: BTreeSet<String>,
    resolved: Vec<(String, String)>,
}

fn parse_file(text: &str, path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{}:{}: expected `key = value`, found `{line}`",
                path.display(),
                n + 1
            )));
        };
        map.insert(key.trim().replace('-', "_"), value.trim().to_string());
    }
    Ok(map)
}

impl Resolver {
    pub fn new(command: &'static str, config: Option<&Path>) -> Result<Self, CliError> {
        let file = match config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
                parse_file(&text, path)?
            }
            None => BTreeMap::new(),
        };
        if let Some(cmd) = file.get("command") {
            if cmd != command {
                return Err(CliError::Usage(format!(
                    "config was written for `{cmd}`, not `{command}`"
                )));
            }
        }
        Ok(Self {
            command,
            file,
            seen: BTreeSet::from(["command".to_string()]),
            resolved: Vec::new(),
        })
    }

    /// Resolves `key` from the flag, the config file or `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<String>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.resolve(key, flag, Some(default))
    }

    /// Like [`Resolver::get`] for a parameter that has no default.
    pub fn require<T>(&mut self, key: &str, flag: Option<String>) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.resolve(key, flag, None)
    }

    fn resolve<T>(&mut self, key: &str, flag: Option<String>, default: Option<T>) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.seen.insert(key.to_string());
        let value = match flag.as_deref().or(self.file.get(key).map(String::as_str)) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| CliError::Usage(format!("invalid value `{raw}` for {key}: {e}")))?,
            None => default
                .ok_or_else(|| CliError::Usage(format!("missing required parameter `{key}`")))?,
        };
        self.resolved.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    /// Fails on config keys that no parameter of this command consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.seen.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "unknown config keys for `{}`: {}",
                self.command,
                unknown.join(", ")
            )))
        }
    }

    pub fn manifest(&self) -> String {
        let mut out = format!("command = {}\n", self.command);
        for (k, v) in &self.resolved {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write_manifest(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST);
        std::fs::write(&path, self.manifest()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// Comma-separated, nonempty list of perturbation sources.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceList(pub Vec<SourceKind>);

impl SourceList {
    pub fn all() -> Self {
        Self(SourceKind::ALL.to_vec())
    }
}

impl FromStr for SourceList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let kinds = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<SourceKind>().map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        if kinds.is_empty() {
            let names: Vec<&str> = SourceKind::ALL.iter().map(|k| k.name()).collect();
            return Err(format!("no sources given; valid names are {}", names.join(", ")));
        }
        Ok(Self(kinds))
    }
}

impl Display for SourceList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|k| k.name()).collect();
        f.write_str(&names.join(","))
    }
}

/// A real number or `none`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaybeReal(pub Option<f64>);

impl FromStr for MaybeReal {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(Self(None));
        }
        s.parse::<f64>()
            .map(|v| Self(Some(v)))
            .map_err(|e| format!("expected a real or `none`: {e}"))
    }
}

impl Display for MaybeReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => v.fmt(f),
            None => f.write_str("none"),
        }
    }
}

/// Schedule family; its magnitude comes from the `alpha` or `beta` key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    EqualMultiplier,
    EqualPerturbation,
}

impl FromStr for ScheduleKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "equal-multiplier" => Ok(Self::EqualMultiplier),
            "equal-perturbation" => Ok(Self::EqualPerturbation),
            other => Err(format!(
                "unknown schedule `{other}`; valid names are equal-multiplier, equal-perturbation"
            )),
        }
    }
}

impl Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EqualMultiplier => "equal-multiplier",
            Self::EqualPerturbation => "equal-perturbation",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolver(text: &str) -> Resolver {
        Resolver {
            command: "attack",
            file: parse_file(text, Path::new("cfg")).unwrap(),
            seen: BTreeSet::from(["command".to_string()]),
            resolved: Vec::new(),
        }
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let mut r = resolver("# comment\nbeta = 0.5\nmax-iterations = 7\n");
        assert_eq!(r.get::<f64>("beta", Some("2".into()), 1.0).unwrap(), 2.0);
        assert_eq!(r.get::<usize>("max_iterations", None, 250).unwrap(), 7);
        assert_eq!(r.get::<f64>("alpha", None, 5e-4).unwrap(), 5e-4);
        r.finish().unwrap();
        assert_eq!(
            r.manifest(),
            "command = attack\nbeta = 2\nmax_iterations = 7\nalpha = 0.0005\n"
        );
    }

    #[test]
    fn manifest_round_trips() {
        let mut r = resolver("");
        r.get("sources", Some("ce,logit".into()), SourceList::all()).unwrap();
        r.get("epsilon", None, MaybeReal(None)).unwrap();
        r.get("rate", None, 0.1f64 + 0.2).unwrap();
        let mut again = resolver(&r.manifest());
        assert_eq!(again.get("sources", None, SourceList::all()).unwrap().0.len(), 2);
        assert_eq!(again.get("epsilon", None, MaybeReal(Some(1.0))).unwrap(), MaybeReal(None));
        assert_eq!(again.get("rate", None, 0.0f64).unwrap(), 0.1 + 0.2);
        again.finish().unwrap();
    }

    #[test]
    fn bad_inputs_are_usage_errors() {
        assert!(parse_file("novalue\n", Path::new("c")).is_err());
        let mut r = resolver("typo = 1\n");
        assert!(matches!(r.finish(), Err(CliError::Usage(_))));
        assert!(r.get::<SourceList>("sources", Some("ce,bogus".into()), SourceList::all()).is_err());
        assert!(r.get::<SourceList>("sources", Some(",".into()), SourceList::all()).is_err());
        assert!(r.require::<String>("model", None).is_err());
        assert_eq!(r.require::<String>("model", Some("m.txt".into())).unwrap(), "m.txt");
    }
}
