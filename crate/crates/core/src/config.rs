//! TOML run configuration with `dotted.key=value` overrides.
//!
//! Override values are parsed as TOML literals; anything that does not parse
//! (for example a bare path) is taken as a string.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{CkmError, Result};

/// Parses `key.path=value` and writes it into `table`, creating
/// intermediate tables as needed.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CkmError::InvalidConfig(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CkmError::InvalidConfig(format!("override `{spec}` has an empty key")));
    }
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            CkmError::InvalidConfig(format!("override `{key}`: `{part}` is not a table"))
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Reads an optional TOML file, applies overrides and deserializes.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            text.parse::<Table>()
                .map_err(|e| CkmError::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    from_table(table)
}

pub fn from_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let table = text
        .parse::<Table>()
        .map_err(|e| CkmError::InvalidConfig(e.to_string()))?;
    from_table(table)
}

fn from_table<T: DeserializeOwned>(table: Table) -> Result<T> {
    T::deserialize(table).map_err(|e| CkmError::InvalidConfig(e.to_string()))
}

/// Serializes a resolved configuration for echoing next to run outputs.
pub fn to_toml<T: Serialize>(cfg: &T) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| CkmError::InvalidConfig(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize, Serialize, PartialEq, Default)]
    #[serde(default)]
    struct Inner {
        rate: f64,
        name: String,
    }

    #[derive(Debug, Deserialize, Serialize, PartialEq, Default)]
    #[serde(default)]
    struct Outer {
        steps: u64,
        inner: Inner,
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let mut t: Table = "steps = 3\n[inner]\nrate = 0.5\n".parse().unwrap();
        apply_override(&mut t, "inner.rate=1e-3").unwrap();
        apply_override(&mut t, "inner.name=runs/a b").unwrap();
        apply_override(&mut t, "steps=10").unwrap();
        let o: Outer = from_table(t).unwrap();
        assert_eq!(o.steps, 10);
        assert_eq!(o.inner.rate, 1e-3);
        assert_eq!(o.inner.name, "runs/a b");
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let mut t = Table::new();
        assert!(apply_override(&mut t, "novalue").is_err());
        apply_override(&mut t, "steps=1").unwrap();
        assert!(apply_override(&mut t, "steps.x=1").is_err());
        let r: Result<Outer> = from_str("steps = \"many\"");
        assert!(matches!(r, Err(CkmError::InvalidConfig(_))));
    }

    #[test]
    fn echo_round_trips() {
        let o = Outer {
            steps: 7,
            inner: Inner {
                rate: 0.25,
                name: "x".into(),
            },
        };
        let back: Outer = from_str(&to_toml(&o).unwrap()).unwrap();
        assert_eq!(back, o);
    }
}
