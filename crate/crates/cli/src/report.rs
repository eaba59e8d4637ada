//! Run reports: one JSON object per line, appended to the output file.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sprint_core::flow::FlowReport;
use sprint_core::gradcheck::SuiteRow;
use sprint_core::{DecodePath, TokenId};

use crate::config::{config_error, RunConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub fingerprint: String,
    pub seed: u64,
    pub timestamp: String,
    /// The full configuration, so the report can be re-executed alone.
    /// Absent for `compare`, whose inputs are other reports.
    pub config: Option<RunConfig>,
    pub result: CommandResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CommandResult {
    Generate(GenerateRecord),
    Compare(CompareRecord),
    Gradcheck(GradcheckRecord),
    Pack(PackRecord),
    Moesim(MoeSimRecord),
    Flow(FlowRecord),
}

impl CommandResult {
    /// The result with timing fields cleared, for replay comparisons.
    pub fn deterministic(&self) -> CommandResult {
        let mut out = self.clone();
        match &mut out {
            CommandResult::Generate(g) => g.wall_ns = 0,
            CommandResult::Compare(c) => c.wall_ratio = 0.0,
            CommandResult::Flow(f) => f.train_ns = 0,
            CommandResult::Gradcheck(_) | CommandResult::Pack(_) | CommandResult::Moesim(_) => {}
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRecord {
    pub label: String,
    pub run: usize,
    pub path: DecodePath,
    pub num_params: usize,
    pub prompt: Vec<TokenId>,
    /// Generated ids after the prompt.
    pub tokens: Vec<TokenId>,
    pub nfe: u64,
    pub attended: u64,
    pub wall_ns: u64,
    pub per_block_steps: Vec<usize>,
    pub acceptances: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAgreement {
    pub run: usize,
    pub agreement: f64,
    /// First generated position where the two outputs differ.
    pub first_divergence: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRecord {
    pub a: String,
    pub b: String,
    pub pairs: Vec<PairAgreement>,
    /// Mean exact-match rate over the pairs.
    pub agreement: f64,
    /// `Σ b / Σ a` over the pairs.
    pub nfe_ratio: f64,
    pub attended_ratio: f64,
    pub wall_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRecord {
    pub rows: Vec<SuiteRow>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackRecord {
    pub samples: usize,
    pub sequences: usize,
    pub capacity: usize,
    pub tokens: usize,
    pub padding: usize,
    pub naive_padding: usize,
    pub batch_max_padding: usize,
    pub utilization: f64,
    /// Per sequence: `(sample id, offset, length)`.
    pub layout: Vec<Vec<(u64, usize, usize)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeSimRecord {
    pub initial_gap: f64,
    pub final_gap: f64,
    pub final_load: Vec<f64>,
    pub final_bias: Vec<f64>,
    /// Max-load gap after every update, starting with the unbiased batch.
    pub gaps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub report: FlowReport,
    pub train_ns: u64,
}

impl RunReport {
    pub fn new(
        command: &str,
        config: Option<&RunConfig>,
        fingerprint: String,
        seed: u64,
        result: CommandResult,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            fingerprint,
            seed,
            timestamp: chrono::Utc::now().to_rfc3339(),
            config: config.cloned(),
            result,
        }
    }
}

/// Appends reports as JSON lines.
pub fn append(path: &Path, reports: &[RunReport]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in reports {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read(path: &Path) -> anyhow::Result<Vec<RunReport>> {
    let f = std::fs::File::open(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RunReport =
            serde_json::from_str(&line).map_err(|e| config_error(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(config_error(format!(
                "{}:{}: schema version {} (expected {SCHEMA_VERSION})",
                path.display(),
                i + 1,
                r.schema_version
            )));
        }
        out.push(r);
    }
    Ok(out)
}
