//! Conversions between Python-facing values and core types that do not
//! need an interpreter.

use pickteach::scenario::bundled;
use pickteach::sim::{Scenario, Vec3};
use pickteach::teaching::RoundRecord;
use serde_json::{json, Value};

/// A bundled scenario name or a scenario as JSON text.
pub fn scenario_from(text: &str) -> Result<Scenario, String> {
    if let Some((scenario, _)) = bundled(text) {
        return Ok(scenario);
    }
    if !text.trim_start().starts_with('{') {
        return Err(format!("no bundled scenario `{text}`"));
    }
    let scenario: Scenario = serde_json::from_str(text).map_err(|e| format!("scenario: {e}"))?;
    scenario.validate().map_err(|e| format!("scenario: {e}"))?;
    Ok(scenario)
}

pub fn vec3(x: &[f64]) -> Result<Vec3, String> {
    match x {
        [a, b, c] => Ok(Vec3::new(*a, *b, *c)),
        _ => Err(format!("expected 3 coordinates, got {}", x.len())),
    }
}

/// The parts of a round a script usually wants, without the full state log.
pub fn round_summary(record: &RoundRecord) -> Value {
    json!({
        "scenario": record.scenario.name,
        "seed": record.config.seed,
        "outcome": record.outcome(),
        "execution_time": record.duration(),
        "corrections": record.corrections.len(),
        "events": record.log.events,
        "aspects": record.aspects,
    })
}
