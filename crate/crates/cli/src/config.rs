//! Config files: TOML with the run parameters at the top level and three
//! CLI-only sections (`[output]`, `[probe]`, `[sweep]`).

use std::path::{Path, PathBuf};

use fedcac_core::RunConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSettings {
    /// Every artifact is written inside this directory.
    pub dir: PathBuf,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSettings {
    /// The two clients compared by the angle probe.
    pub client_a: usize,
    pub client_b: usize,
    /// Client whose sensitivity the heatmap probe exports.
    pub client: usize,
    /// Layer for the heatmap probe; defaults to the classifier weights.
    pub layer: Option<String>,
    /// Use the planted class layout (clients `2g`, `2g+1` share classes
    /// `{g, g+1}`) instead of the configured partition. The overlap study
    /// always uses it.
    pub planted: bool,
    /// With the planted layout, make every odd client an exact copy of its
    /// even neighbour.
    pub duplicate_pairs: bool,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            client_a: 0,
            client_b: 1,
            client: 0,
            layer: None,
            planted: false,
            duplicate_pairs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    /// Seeds per value: `seed, seed + 1, ...`.
    pub seeds: u64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self { seeds: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub run: RunConfig,
    pub output: OutputSettings,
    pub probe: ProbeSettings,
    pub sweep: SweepSettings,
}

/// Reads `path`, applies `key=value` overrides, and splits the result into
/// the run config and the CLI sections. Every failure here is a usage error.
pub fn load(path: &Path, overrides: &[String]) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut table: Table = toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("cannot parse config {}: {e}", path.display())))?;
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    from_table(table)
}

pub fn from_table(mut table: Table) -> Result<LoadedConfig, CliError> {
    let output = section(&mut table, "output")?;
    let probe = section(&mut table, "probe")?;
    let sweep = section(&mut table, "sweep")?;
    let run: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    Ok(LoadedConfig { run, output, probe, sweep })
}

fn section<T: for<'de> Deserialize<'de> + Default>(table: &mut Table, name: &str) -> Result<T, CliError> {
    match table.remove(name) {
        None => Ok(T::default()),
        Some(v) => v
            .try_into()
            .map_err(|e| CliError::Usage(format!("invalid [{name}] section: {e}"))),
    }
}

/// `a.b.c=value`. The value is read as a TOML literal when it parses as one
/// (`0.5`, `true`, `[64, 64]`, `"x"`) and as a bare string otherwise
/// (`fixed_number:3`, `dirichlet`).
pub fn apply_override(table: &mut Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{item}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override `{item}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));

    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut cursor = table;
    for p in parents {
        let entry = cursor.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{item}`: `{p}` is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
