//! Config resolution: file, then `--set key=value` overrides.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use hcci_nmpc::config::ExperimentConfig;
use toml::{Table, Value};

/// Parses `v` as a TOML value, falling back to a bare string.
fn parse_value(v: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()))
}

pub fn set(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').map(str::trim).collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| anyhow!("empty config key"))?;
    let mut t = table;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{p}` in `{key}` is not a section"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .with_context(|| format!("override `{s}` must look like key.path=value"))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

pub fn resolve(file: Option<&Path>, overrides: Vec<(String, Value)>) -> Result<ExperimentConfig> {
    let mut table = match file {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    for (k, v) in overrides {
        set(&mut table, &k, v)?;
    }
    let text = toml::to_string(&table)?;
    ExperimentConfig::from_toml(&text).map_err(|e| anyhow!("{e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_override_wins() {
        let o = vec![parse_assignment("controller.horizon=4").unwrap(), parse_assignment("seed = 3").unwrap()];
        let c = resolve(None, o).unwrap();
        assert_eq!((c.controller.horizon, c.seed), (4, 3));
    }

    #[test]
    fn strings_need_no_quotes() {
        let c = resolve(None, vec![parse_assignment("output_dir=/tmp/x y").unwrap()]).unwrap();
        assert_eq!(c.output_dir, Path::new("/tmp/x y"));
    }

    #[test]
    fn bad_keys_are_reported() {
        assert!(parse_assignment("horizon").is_err());
        let e = resolve(None, vec![parse_assignment("controller.horizon_len=4").unwrap()]).unwrap_err();
        assert!(e.to_string().contains("horizon_len"), "{e}");
        assert!(resolve(None, vec![parse_assignment("seed=1").unwrap(), parse_assignment("seed.x=1").unwrap()]).is_err());
    }
}
