use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lrvd::config::{RunConfig, VERSION};
use serde_json::{json, Value};

pub struct LoadedConfig {
    pub raw: Value,
    pub resolved: RunConfig,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let raw: Value = serde_json::from_str(&text)
        .map_err(lrvd::LrvdError::from)
        .with_context(|| format!("config {} is not valid JSON", path.display()))?;
    let resolved = RunConfig::from_value(&raw).with_context(|| format!("invalid config {}", path.display()))?;
    Ok(LoadedConfig { raw, resolved })
}

pub fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Header shared by every summary.json: version, command and the config
/// both as given and as resolved with defaults.
pub fn summary(command: &str, config: Option<&LoadedConfig>, extra: Value) -> Value {
    let mut s = json!({
        "version": VERSION,
        "command": command,
    });
    if let Some(c) = config {
        s["config_input"] = c.raw.clone();
        s["config"] = c.resolved.to_value();
    }
    if let (Some(obj), Value::Object(more)) = (s.as_object_mut(), extra) {
        obj.extend(more);
    }
    s
}

pub fn write_json(dir: &Path, name: &str, value: &Value) -> Result<()> {
    write(dir, name, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn parse_k_list(spec: &str) -> Result<Vec<usize>> {
    let ks = split_list(spec)
        .map(|s| s.parse::<usize>().with_context(|| format!("invalid sample count {s:?} in --k")))
        .collect::<Result<Vec<_>>>()?;
    if ks.is_empty() {
        bail!(lrvd::LrvdError::InvalidArgument("k list is empty".into()));
    }
    Ok(ks)
}

pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let seeds = split_list(spec)
        .map(|s| s.parse::<u64>().with_context(|| format!("invalid seed {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("seed list is empty");
    }
    Ok(seeds)
}

/// `a,b,c` or an inclusive integer range `lo..hi`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo: i64 = lo.trim().parse().with_context(|| format!("invalid range start in grid {spec:?}"))?;
        let hi: i64 = hi.trim().parse().with_context(|| format!("invalid range end in grid {spec:?}"))?;
        if lo > hi {
            bail!("grid range {spec:?} is empty");
        }
        return Ok((lo..=hi).map(|v| v as f64).collect());
    }
    let grid = split_list(spec)
        .map(|s| s.parse::<f64>().with_context(|| format!("invalid grid value {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    if grid.is_empty() {
        bail!("grid is empty");
    }
    Ok(grid)
}

fn split_list(spec: &str) -> impl Iterator<Item = &str> {
    spec.split(',').map(str::trim).filter(|s| !s.is_empty())
}
