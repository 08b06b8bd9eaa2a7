//! Canonical machine-readable payloads embedded in prompts. Every
//! prompt carries one fenced JSON block with the structured facts the
//! request is about; offline backends parse the block instead of the
//! prose, and response parsers accept fenced or bare JSON.

use crate::target::{Direction, ParamSchema, ScalarValue, WorkloadSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Direction of a parameter change recommended or observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeDirection {
    Increase,
    Decrease,
}

impl ChangeDirection {
    pub fn opposite(self) -> Self {
        match self {
            ChangeDirection::Increase => ChangeDirection::Decrease,
            ChangeDirection::Decrease => ChangeDirection::Increase,
        }
    }
}

/// Claimed effect of moving the parameter in the given direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    Improves,
    Degrades,
}

/// The machine-checkable claim attached to an insight.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub param: String,
    pub direction: ChangeDirection,
    pub metric: String,
    pub effect: Effect,
}

/// What the session is optimizing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLine {
    pub metric: String,
    pub direction: Direction,
}

/// One node as shown to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub id: String,
    pub config: BTreeMap<String, ScalarValue>,
    pub value: Option<f64>,
}

/// One frontier entry for node selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeLine {
    pub id: String,
    pub value: Option<f64>,
}

/// An insight as shown to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightLine {
    pub id: String,
    pub text: String,
    pub confidence: f64,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub prediction: Option<Prediction>,
}

/// Hard constraints candidates must respect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintsLine {
    /// Absolute cap in MB on the sum of memory-tagged parameters.
    pub cap_mb: f64,
    pub memory_params: Vec<String>,
    pub blacklist: Vec<String>,
    pub user_constraints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposePayload {
    pub task: TaskLine,
    pub schema: ParamSchema,
    pub node: NodeSummary,
    pub insights: Vec<InsightLine>,
    pub branching: u32,
    pub workload: WorkloadSpec,
    pub constraints: ConstraintsLine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectPayload {
    pub task: TaskLine,
    pub frontier: Vec<NodeLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WantedMetric {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub unit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizePayload {
    pub samples: Vec<String>,
    pub wanted_metrics: Vec<WantedMetric>,
    pub system_info: String,
    /// Failure notes from earlier synthesis attempts, newest last.
    #[serde(default)]
    pub failures: Vec<String>,
}

/// One parent-to-child benchmark outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceLine {
    pub node_id: String,
    pub parent_node: String,
    pub changes: Vec<ParamChange>,
    pub metric: String,
    pub parent_value: f64,
    pub child_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamChange {
    pub param: String,
    pub from: ScalarValue,
    pub to: ScalarValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightsPayload {
    pub task: TaskLine,
    pub target_system: String,
    pub workload: String,
    pub experiences: Vec<ExperienceLine>,
    /// Already-known insights, so the model can avoid duplicates.
    #[serde(default)]
    pub existing: Vec<InsightLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceLine {
    pub before_node: String,
    pub after_node: String,
    pub param: String,
    pub param_before: ScalarValue,
    pub param_after: ScalarValue,
    pub metric_before: f64,
    pub metric_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteCandidateLine {
    pub insight: InsightLine,
    pub evidence: Vec<EvidenceLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotePayload {
    pub task: TaskLine,
    pub candidates: Vec<VoteCandidateLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPayload {
    pub schema: ParamSchema,
    pub constraints: ConstraintsLine,
    pub candidates: Vec<BTreeMap<String, ScalarValue>>,
}

/// Render a value as the fenced JSON block embedded in prompts.
pub fn to_fenced_json<T: Serialize>(value: &T) -> String {
    let body = serde_json::to_string_pretty(value).expect("payloads are plain data");
    format!("```json\n{body}\n```")
}

/// The contents of the last fenced JSON block in `text`, if any.
pub fn last_fenced_json(text: &str) -> Option<&str> {
    let open = text.rfind("```json")?;
    let after = &text[open + "```json".len()..];
    let end = after.find("```")?;
    Some(after[..end].trim())
}

/// Parse the payload block out of a prompt (or any text carrying one).
pub fn parse_embedded<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    let block = last_fenced_json(text).ok_or("no fenced JSON block found")?;
    serde_json::from_str(block).map_err(|e| e.to_string())
}

/// Parse a response that is either a fenced JSON block or bare JSON.
pub fn parse_response<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    if let Some(block) = last_fenced_json(text) {
        return serde_json::from_str(block).map_err(|e| e.to_string());
    }
    serde_json::from_str(text.trim()).map_err(|e| e.to_string())
}

/// Best-effort scalar from a plain string: int, then real, then bool,
/// then text.
pub fn scalar_from_str(s: &str) -> ScalarValue {
    if let Ok(v) = s.parse::<i64>() {
        return ScalarValue::Int(v);
    }
    if let Ok(v) = s.parse::<f64>() {
        return ScalarValue::Real(v);
    }
    if let Ok(v) = s.parse::<bool>() {
        return ScalarValue::Bool(v);
    }
    ScalarValue::Text(s.to_string())
}
