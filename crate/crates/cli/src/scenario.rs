//! Scenario files: a TOML document with `[sim]` (mirroring `SimConfig`, including
//! `[sim.tx_schedule]`), `[adversary]`, `[output]` and `[checks]`. Unknown keys are errors.

use std::path::{Path, PathBuf};

use carnot::net_sim::{AdversarySpec, SimConfig};
use carnot::verifier::Checks;
use serde::Deserialize;
use toml::{Table, Value};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub sim: SimConfig,
    #[serde(default = "honest")]
    pub adversary: AdversarySpec,
    #[serde(default)]
    pub output: Output,
    #[serde(default)]
    pub checks: Checks,
}

fn honest() -> AdversarySpec {
    AdversarySpec::Honest
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Output {
    pub dir: PathBuf,
    pub trace: String,
    pub verdict: String,
    pub metrics_json: String,
    pub metrics_csv: String,
}

impl Default for Output {
    fn default() -> Self {
        Output {
            dir: PathBuf::from("out"),
            trace: "trace.ndjson".into(),
            verdict: "verdict.json".into(),
            metrics_json: "metrics.json".into(),
            metrics_csv: "metrics.csv".into(),
        }
    }
}

/// Top-level tables; a bare override key such as `n` is looked up under `sim`.
const SECTIONS: [&str; 4] = ["sim", "adversary", "output", "checks"];

pub fn load_table(path: &Path) -> Result<Table, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.parse::<Table>().map_err(|e| format!("{}: {e}", path.display()))
}

/// Parses `KEY=VALUE`. The value is read as a TOML literal when it parses as one and as a
/// plain string otherwise, so `variant=Carnot1` and `n=7` both work.
pub fn parse_override(s: &str) -> Result<(String, Value), String> {
    let (key, raw) = s.split_once('=').ok_or_else(|| format!("override {s:?} is not KEY=VALUE"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(format!("override {s:?} has an empty key"));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key.to_string(), value))
}

pub fn apply_override(table: &mut Table, key: &str, value: Value) -> Result<(), String> {
    let mut path: Vec<&str> = key.split('.').collect();
    if !SECTIONS.contains(&path[0]) || path.len() == 1 {
        path.insert(0, "sim");
    }
    let (last, parents) = path.split_last().expect("nonempty");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| format!("override {key}: {p} is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn from_table(table: Table) -> Result<Scenario, String> {
    let scenario: Scenario = Value::Table(table).try_into().map_err(|e: toml::de::Error| e.to_string())?;
    scenario.adversary.build(&scenario.sim).map_err(|e| e.to_string())?;
    scenario.sim.validate().map_err(|e| e.to_string())?;
    Ok(scenario)
}
