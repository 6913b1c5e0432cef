use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PRECIP_VARIABLE: &str = "tp";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Ingested,
    Synthetic,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Ingested => "ingested",
            Provenance::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ingested" => Ok(Provenance::Ingested),
            "synthetic" => Ok(Provenance::Synthetic),
            other => Err(Error::invalid(format!("unknown provenance `{other}`"))),
        }
    }
}

/// Grid geometry, variable roster and date coverage of a dataset.
///
/// When `months` is non-empty only dates falling in those calendar months
/// belong to the dataset (e.g. `6,7,8,9` for June–September seasons); the
/// remaining dates split into contiguous season blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub variables: Vec<String>,
    pub date_start: NaiveDate,
    pub date_end: NaiveDate,
    pub city: String,
    pub provenance: Provenance,
    pub months: Vec<u32>,
    pub precip_variable: String,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if self.variables.is_empty() {
            return Err(Error::invalid("manifest declares no variables"));
        }
        for (i, v) in self.variables.iter().enumerate() {
            if v.is_empty() || v.contains(',') {
                return Err(Error::invalid(format!("invalid variable name `{v}`")));
            }
            if self.variables[..i].contains(v) {
                return Err(Error::invalid(format!("duplicate variable `{v}`")));
            }
        }
        if self.date_end < self.date_start {
            return Err(Error::invalid("date_end precedes date_start"));
        }
        if let Some(m) = self.months.iter().find(|m| !(1..=12).contains(*m)) {
            return Err(Error::invalid(format!("invalid month {m}")));
        }
        Ok(())
    }

    /// Every date the dataset must cover, ascending.
    pub fn dates(&self) -> Vec<NaiveDate> {
        self.date_start
            .iter_days()
            .take_while(|d| *d <= self.date_end)
            .filter(|d| self.months.is_empty() || self.months.contains(&d.month()))
            .collect()
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v == name)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut kv = KeyValues::parse(text, origin)?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let date = |kv: &mut KeyValues, key: &str| -> Result<NaiveDate> {
            let (line, v) = kv.take_required(key)?;
            NaiveDate::parse_from_str(&v, "%Y-%m-%d")
                .map_err(|e| parse_err(line, format!("{key}: {e}")))
        };
        let date_start = date(&mut kv, "date_start")?;
        let date_end = date(&mut kv, "date_end")?;
        let manifest = Self {
            grid_rows: kv.take_parsed("grid_rows")?,
            grid_cols: kv.take_parsed("grid_cols")?,
            variables: split_list(&kv.take_required("variables")?.1),
            date_start,
            date_end,
            city: kv.take_required("city")?.1,
            provenance: kv.take_parsed("provenance")?,
            months: match kv.take("months") {
                Some((line, v)) => split_list(&v)
                    .iter()
                    .map(|m| m.parse().map_err(|e| parse_err(line, format!("months: {e}"))))
                    .collect::<Result<_>>()?,
                None => Vec::new(),
            },
            precip_variable: kv
                .take("precip_variable")
                .map(|(_, v)| v)
                .unwrap_or_else(|| DEFAULT_PRECIP_VARIABLE.to_string()),
        };
        kv.finish()?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string())?;
        Ok(())
    }
}

impl fmt::Display for DatasetManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "grid_rows={}", self.grid_rows)?;
        writeln!(f, "grid_cols={}", self.grid_cols)?;
        writeln!(f, "variables={}", self.variables.join(","))?;
        writeln!(f, "date_start={}", self.date_start)?;
        writeln!(f, "date_end={}", self.date_end)?;
        writeln!(f, "city={}", self.city)?;
        writeln!(f, "provenance={}", self.provenance)?;
        if !self.months.is_empty() {
            let m: Vec<String> = self.months.iter().map(u32::to_string).collect();
            writeln!(f, "months={}", m.join(","))?;
        }
        writeln!(f, "precip_variable={}", self.precip_variable)
    }
}

/// Comma-separated items, trimmed, empties dropped.
pub fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(String::from)
        .collect()
}

/// Flat `key=value` text: one pair per line, `#` starts a comment, blank
/// lines ignored. Keys must be unique and every key must be consumed.
#[derive(Debug)]
pub struct KeyValues {
    origin: std::path::PathBuf,
    entries: Vec<(usize, String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    message: format!("expected key=value, got `{line}`"),
                });
            };
            let key = k.trim().to_string();
            if entries.iter().any(|(_, existing, _)| *existing == key) {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
            entries.push((i + 1, key, v.trim().to_string()));
        }
        Ok(Self {
            origin: origin.to_path_buf(),
            entries,
        })
    }

    pub fn take(&mut self, key: &str) -> Option<(usize, String)> {
        let pos = self.entries.iter().position(|(_, k, _)| k == key)?;
        let (line, _, v) = self.entries.remove(pos);
        Some((line, v))
    }

    pub fn take_required(&mut self, key: &str) -> Result<(usize, String)> {
        self.take(key).ok_or_else(|| Error::Parse {
            path: self.origin.clone(),
            line: 0,
            message: format!("missing required key `{key}`"),
        })
    }

    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let (line, v) = self.take_required(key)?;
        v.parse().map_err(|e| Error::Parse {
            path: self.origin.clone(),
            line,
            message: format!("{key}: {e}"),
        })
    }

    pub fn take_parsed_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.take(key) {
            Some((line, v)) => v.parse().map_err(|e| Error::Parse {
                path: self.origin.clone(),
                line,
                message: format!("{key}: {e}"),
            }),
            None => Ok(default),
        }
    }

    /// Remaining `(line, key, value)` entries in file order.
    pub fn into_entries(self) -> Vec<(usize, String, String)> {
        self.entries
    }

    /// Fails on any key that was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.first() {
            Some((line, key, _)) => Err(Error::Parse {
                path: self.origin,
                line: *line,
                message: format!("unknown key `{key}`"),
            }),
            None => Ok(()),
        }
    }
}
