//! The versioned JSON envelope written as `report.json`.

use hamcheck_core::verify::Verdict;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::{AlphaRecord, Command, RunOutput, RunResult, StageError};

pub const SCHEMA_VERSION: &str = "1.0.0";

/// The shipped schema, for validation by consumers and tests.
pub const SCHEMA: &str = include_str!("../schema/report.schema.json");

/// Fields holding wall-clock time; everything else is a function of the
/// configuration.
pub const TIMESTAMP_FIELDS: &[&str] = &["generated_at"];

const NOTES: &[&str] = &[
    "The cost-comparison inequality is checked on a finite sampled family of admissible trajectories, not on every trajectory in the tube.",
    "The Lipschitz constant of the flow-sheet inverse is a finite-difference estimate reported as evidence, not a proven bound.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngRecord {
    pub algorithm: String,
    pub perturbation_seed: u64,
    pub competitor_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: String,
    pub tool: String,
    pub tool_version: String,
    pub command: Command,
    pub generated_at: String,
    pub problem: String,
    pub config: RunConfig,
    pub rng: RngRecord,
    pub alpha: Option<AlphaRecord>,
    pub status: String,
    pub exit_code: i32,
    pub verdict: Option<Verdict>,
    pub result: Option<RunResult>,
    pub error: Option<StageError>,
    pub notes: Vec<String>,
}

impl Report {
    fn envelope(command: Command, config: &RunConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.into(),
            tool: env!("CARGO_PKG_NAME").into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command,
            generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            problem: config.problem.name.clone(),
            config: config.clone(),
            rng: RngRecord {
                algorithm: "ChaCha8".into(),
                perturbation_seed: config.perturbation.seed,
                competitor_seed: config.competitors.seed,
            },
            alpha: None,
            status: String::new(),
            exit_code: 1,
            verdict: None,
            result: None,
            error: None,
            notes: NOTES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn from_output(out: &RunOutput, config: &RunConfig) -> Self {
        let mut r = Self::envelope(out.command, config);
        r.alpha = Some(out.alpha.clone());
        r.status = out.status().into();
        r.exit_code = out.exit_code;
        if let RunResult::Verification(v) = &out.result {
            r.verdict = Some(v.verdict.clone());
        }
        r.result = Some(out.result.clone());
        r
    }

    pub fn from_error(command: Command, config: &RunConfig, error: StageError) -> Self {
        let mut r = Self::envelope(command, config);
        r.status = "error".into();
        r.error = Some(error);
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Replace every timestamp field of a serialized report with a fixed marker.
pub fn mask_timestamps(json: &str) -> Result<String, serde_json::Error> {
    let mut v: serde_json::Value = serde_json::from_str(json)?;
    if let Some(obj) = v.as_object_mut() {
        for key in TIMESTAMP_FIELDS {
            if obj.contains_key(*key) {
                obj.insert((*key).into(), "<masked>".into());
            }
        }
    }
    serde_json::to_string_pretty(&v)
}
