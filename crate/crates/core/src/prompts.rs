//! Prompt construction. Templates are plain-text resources with
//! `{TASK}`, `{NODE}`, `{DIGESTS}`, `{INSIGHTS}`, `{CONSTRAINTS}` and
//! `{PAYLOAD}` placeholders; each builder fills the ones its template
//! uses. The payload block carries the same facts in canonical JSON,
//! which is what the offline backends parse.

use crate::llm::payload::{
    to_fenced_json, FilterPayload, InsightsPayload, ProposePayload, SelectPayload,
    SynthesizePayload, VotePayload,
};
use crate::target::Direction;

const PROPOSE: &str = include_str!("prompts/propose.txt");
const SELECT: &str = include_str!("prompts/select.txt");
const SYNTHESIZE: &str = include_str!("prompts/synthesize.txt");
const INSIGHTS: &str = include_str!("prompts/insights.txt");
const VOTE: &str = include_str!("prompts/vote.txt");
const FILTER: &str = include_str!("prompts/filter.txt");

fn direction_verb(direction: Direction) -> &'static str {
    match direction {
        Direction::Maximize => "maximize",
        Direction::Minimize => "minimize",
    }
}

fn or_none(lines: Vec<String>) -> String {
    if lines.is_empty() {
        "(none)".to_string()
    } else {
        lines.join("\n")
    }
}

pub fn propose_prompt(p: &ProposePayload) -> String {
    let task = format!(
        "{} {} on workload {} (branching factor {})",
        direction_verb(p.task.direction),
        p.task.metric,
        p.workload.name,
        p.branching
    );
    let node = format!(
        "{}: {} (measured {})",
        p.node.id,
        summarize_config(&p.node.config),
        p.node
            .value
            .map(|v| v.to_string())
            .unwrap_or_else(|| "n/a".into())
    );
    let insights = or_none(
        p.insights
            .iter()
            .map(|i| format!("- [{}] {} (confidence {:.2})", i.id, i.text, i.confidence))
            .collect(),
    );
    let mut constraint_lines = vec![format!(
        "- memory-tagged parameters ({}) must sum to at most {} MB",
        p.constraints.memory_params.join(", "),
        p.constraints.cap_mb
    )];
    if !p.constraints.blacklist.is_empty() {
        constraint_lines.push(format!(
            "- do not change: {}",
            p.constraints.blacklist.join(", ")
        ));
    }
    for c in &p.constraints.user_constraints {
        constraint_lines.push(format!("- {c}"));
    }
    PROPOSE
        .replace("{TASK}", &task)
        .replace("{NODE}", &node)
        .replace("{INSIGHTS}", &insights)
        .replace("{CONSTRAINTS}", &constraint_lines.join("\n"))
        .replace("{PAYLOAD}", &to_fenced_json(p))
}

pub fn select_prompt(p: &SelectPayload) -> String {
    let task = format!("{} {}", direction_verb(p.task.direction), p.task.metric);
    let digests = or_none(
        p.frontier
            .iter()
            .map(|n| {
                format!(
                    "- {}: {}={}",
                    n.id,
                    p.task.metric,
                    n.value.map(|v| v.to_string()).unwrap_or_else(|| "n/a".into())
                )
            })
            .collect(),
    );
    SELECT
        .replace("{TASK}", &task)
        .replace("{DIGESTS}", &digests)
        .replace("{PAYLOAD}", &to_fenced_json(p))
}

pub fn synthesize_prompt(p: &SynthesizePayload) -> String {
    let task = format!(
        "extract metrics [{}] from {}",
        p.wanted_metrics
            .iter()
            .map(|m| m.name.as_str())
            .collect::<Vec<_>>()
            .join(", "),
        p.system_info
    );
    let samples = or_none(
        p.samples
            .iter()
            .map(|s| format!("---\n{s}"))
            .collect(),
    );
    let failures = or_none(p.failures.iter().map(|f| format!("- {f}")).collect());
    SYNTHESIZE
        .replace("{TASK}", &task)
        .replace("{DIGESTS}", &samples)
        .replace("{CONSTRAINTS}", &failures)
        .replace("{PAYLOAD}", &to_fenced_json(p))
}

pub fn insights_prompt(p: &InsightsPayload) -> String {
    let task = format!(
        "{} {} on {} ({})",
        direction_verb(p.task.direction),
        p.task.metric,
        p.target_system,
        p.workload
    );
    let experiences = or_none(
        p.experiences
            .iter()
            .map(|e| {
                let changes: Vec<String> = e
                    .changes
                    .iter()
                    .map(|c| format!("{} {} -> {}", c.param, c.from, c.to))
                    .collect();
                format!(
                    "- {} from {}: {}; {} {} -> {}",
                    e.node_id,
                    e.parent_node,
                    changes.join(", "),
                    e.metric,
                    e.parent_value,
                    e.child_value
                )
            })
            .collect(),
    );
    let existing = or_none(
        p.existing
            .iter()
            .map(|i| format!("- [{}] {}", i.id, i.text))
            .collect(),
    );
    INSIGHTS
        .replace("{TASK}", &task)
        .replace("{DIGESTS}", &experiences)
        .replace("{INSIGHTS}", &existing)
        .replace("{PAYLOAD}", &to_fenced_json(p))
}

pub fn vote_prompt(p: &VotePayload) -> String {
    let task = format!("{} {}", direction_verb(p.task.direction), p.task.metric);
    let insights = or_none(
        p.candidates
            .iter()
            .map(|c| {
                let pairs: Vec<String> = c
                    .evidence
                    .iter()
                    .map(|e| {
                        format!(
                            "{} {} -> {} moved {} {} -> {}",
                            e.param,
                            e.param_before,
                            e.param_after,
                            p.task.metric,
                            e.metric_before,
                            e.metric_after
                        )
                    })
                    .collect();
                format!(
                    "- [{}] {}\n  evidence: {}",
                    c.insight.id,
                    c.insight.text,
                    if pairs.is_empty() {
                        "(none)".to_string()
                    } else {
                        pairs.join("; ")
                    }
                )
            })
            .collect(),
    );
    VOTE.replace("{TASK}", &task)
        .replace("{INSIGHTS}", &insights)
        .replace("{PAYLOAD}", &to_fenced_json(p))
}

pub fn filter_prompt(p: &FilterPayload) -> String {
    let task = format!("screen {} candidate configurations", p.candidates.len());
    let mut constraint_lines = vec![format!(
        "- memory-tagged parameters ({}) must sum to at most {} MB",
        p.constraints.memory_params.join(", "),
        p.constraints.cap_mb
    )];
    if !p.constraints.blacklist.is_empty() {
        constraint_lines.push(format!(
            "- do not change: {}",
            p.constraints.blacklist.join(", ")
        ));
    }
    for c in &p.constraints.user_constraints {
        constraint_lines.push(format!("- {c}"));
    }
    FILTER
        .replace("{TASK}", &task)
        .replace("{CONSTRAINTS}", &constraint_lines.join("\n"))
        .replace("{PAYLOAD}", &to_fenced_json(p))
}

fn summarize_config(
    config: &std::collections::BTreeMap<String, crate::target::ScalarValue>,
) -> String {
    config
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::payload::{ConstraintsLine, NodeLine, NodeSummary, TaskLine, WantedMetric};
    use crate::target::{simkv_manifest, WorkloadSpec};

    #[test]
    fn every_placeholder_is_filled() {
        let schema = simkv_manifest().schema.clone();
        let p = ProposePayload {
            task: TaskLine {
                metric: "throughput_kops".into(),
                direction: Direction::Maximize,
            },
            schema: schema.clone(),
            node: NodeSummary {
                id: "n0000".into(),
                config: schema.default_configuration().values,
                value: Some(74.6),
            },
            insights: vec![],
            branching: 3,
            workload: WorkloadSpec {
                name: "fillrandom".into(),
                write_fraction: 1.0,
                op_count: 1000,
                extra: Default::default(),
            },
            constraints: ConstraintsLine {
                cap_mb: 819.2,
                memory_params: vec!["write_buffer_mb".into()],
                blacklist: vec![],
                user_constraints: vec![],
            },
        };
        let prompt = propose_prompt(&p);
        for placeholder in ["{TASK}", "{NODE}", "{INSIGHTS}", "{CONSTRAINTS}", "{PAYLOAD}"] {
            assert!(!prompt.contains(placeholder), "unfilled {placeholder}");
        }
        assert!(prompt.contains("```json"));
    }

    #[test]
    fn select_prompt_lists_frontier_values() {
        let p = SelectPayload {
            task: TaskLine {
                metric: "throughput_kops".into(),
                direction: Direction::Maximize,
            },
            frontier: vec![NodeLine {
                id: "n0004".into(),
                value: Some(235.5),
            }],
        };
        let prompt = select_prompt(&p);
        assert!(prompt.contains("n0004"));
        assert!(prompt.contains("235.5"));
        assert!(!prompt.contains("{DIGESTS}"));
    }

    #[test]
    fn synthesize_prompt_carries_failure_notes() {
        let p = SynthesizePayload {
            samples: vec!["throughput_kops=74.6".into()],
            wanted_metrics: vec![WantedMetric {
                name: "throughput_kops".into(),
                description: String::new(),
                unit: None,
            }],
            system_info: "simkv".into(),
            failures: vec!["attempt 1: pattern had no capture group".into()],
        };
        let prompt = synthesize_prompt(&p);
        assert!(prompt.contains("attempt 1: pattern had no capture group"));
    }
}
