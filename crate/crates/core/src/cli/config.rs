use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every key a config file may set. Keys mirror the long flag names with
/// dashes replaced by underscores.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out",
    "quiet",
    "data",
    "manifest",
    "set",
    "synthetic",
    "ratio",
    "count",
    "size",
    "preset",
    "depth_multiple",
    "width_multiple",
    "input_size",
    "classes",
    "epochs",
    "batch",
    "lr",
    "lr_final_fraction",
    "reduction",
    "pos_weight",
    "sample_weight",
    "lambda_obj",
    "lambda_cls",
    "lambda_box",
    "anchor_ratio_threshold",
    "weight_seed",
    "checkpoint",
    "input",
    "conf",
    "iou",
    "max_det",
    "overlay",
    "frames",
];

/// Flat `key = value` settings with `#` comments. Flags win over file
/// values, which win over defaults; every lookup is remembered so the
/// fully resolved set can be echoed back.
#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    pub fn parse(text: &str) -> Result<Self> {
        let mut file = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config("config", format!("line {}: expected `key = value`", n + 1))
            })?;
            let key = k.trim().replace('-', "_");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::config(
                    &key,
                    format!("unknown key on line {}", n + 1),
                ));
            }
            if file.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(&key, format!("set twice (line {})", n + 1)));
            }
        }
        Ok(Self {
            file,
            resolved: Vec::new(),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        }
    }

    fn record(&mut self, key: &str, value: String) {
        if let Some(slot) = self.resolved.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value;
        } else {
            self.resolved.push((key.to_string(), value));
        }
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.file.get(key) {
            None => Ok(None),
            Some(v) if v.is_empty() => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    /// True when the key came from a flag or the config file.
    pub fn is_explicit<T>(&self, key: &str, flag: &Option<T>) -> bool {
        flag.is_some() || self.file.get(key).is_some_and(|v| !v.is_empty())
    }

    pub fn value<T: FromStr + ToString>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn optional<T: FromStr + ToString>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        self.record(key, v.as_ref().map(ToString::to_string).unwrap_or_default());
        Ok(v)
    }

    pub fn flag(&mut self, key: &str, flag: bool) -> Result<bool> {
        let v = flag || self.from_file::<bool>(key)?.unwrap_or(false);
        self.record(key, v.to_string());
        Ok(v)
    }

    /// The resolved settings in the config-file format.
    pub fn echo(&self, command: &str) -> String {
        let mut out = format!("# resolved configuration for `firedet {command}`\n");
        for (k, v) in &self.resolved {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flag_file_default() {
        let mut r = Resolver::parse("# comment\nepochs = 7  # trailing\nlr=0.01\n").unwrap();
        assert_eq!(r.value("epochs", None, 200usize).unwrap(), 7);
        assert_eq!(r.value("lr", Some(0.5), 0.001).unwrap(), 0.5);
        assert_eq!(r.value("batch", None, 64usize).unwrap(), 64);
        assert_eq!(r.optional::<f64>("lr_final_fraction", None).unwrap(), None);
        let echo = r.echo("train");
        assert!(echo.contains("epochs = 7\nlr = 0.5\nbatch = 64\nlr_final_fraction = \n"));
    }

    #[test]
    fn echo_reparses_to_same_values() {
        let mut r = Resolver::parse("").unwrap();
        r.value("ratio", None, 0.5f64).unwrap();
        r.value("preset", None, "n".to_string()).unwrap();
        r.optional::<String>("manifest", None).unwrap();
        let mut again = Resolver::parse(&r.echo("x")).unwrap();
        assert_eq!(again.value("ratio", None, 0.9f64).unwrap(), 0.5);
        assert_eq!(again.optional::<String>("manifest", None).unwrap(), None);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(Resolver::parse("bogus = 1").is_err());
        assert!(Resolver::parse("epochs 5").is_err());
        assert!(Resolver::parse("epochs = 1\nepochs = 2").is_err());
        let mut r = Resolver::parse("epochs = many").unwrap();
        assert!(
            matches!(r.value("epochs", None, 1usize), Err(Error::Config { field, .. }) if field == "epochs")
        );
    }
}
