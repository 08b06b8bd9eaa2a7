//! The Searcher agent: a tree over configurations. Each node is one
//! benchmarked (or rejected) configuration; children are proposed by
//! the model from retrieved insights, screened by a constraint filter
//! and mechanical validation, and the next node to expand is picked
//! from the frontier of benchmarked leaves.

use crate::extract::PerformanceDigest;
use crate::llm::payload::{
    parse_response, FilterPayload, ProposePayload, SelectPayload, TaskLine,
};
use crate::llm::{Gateway, LlmError, LlmRequest, RequestKind, TokenLedger};
use crate::prompts;
use crate::target::{
    scalar_eq, Configuration, Direction, ParamKind, ResourceSpec, ScalarValue, WorkloadSpec,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeStatus {
    /// Created but not yet screened or run.
    Proposed,
    /// Screened out before execution; counts toward the error rate.
    Rejected,
    /// Ran to completion with a digest.
    Benchmarked,
    /// Ran but produced no usable result; counts toward the error rate.
    Failed,
    /// Benchmarked and later chosen for expansion.
    Selected,
}

/// One point in the search tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningNode {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub config: Configuration,
    pub workload: WorkloadSpec,
    pub resources: ResourceSpec,
    /// Present exactly when the node is benchmarked or selected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<PerformanceDigest>,
    pub depth: u32,
    pub status: NodeStatus,
    /// Iteration that created the node; 0 is the baseline.
    pub iteration: u32,
}

/// Benchmarked leaves beyond this count are pruned, worst target value
/// first, to keep selection prompts bounded.
pub const FRONTIER_CAP: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {id} is {status:?}, expected {expected:?}")]
    WrongStatus {
        id: String,
        status: NodeStatus,
        expected: NodeStatus,
    },
}

/// The search tree plus its per-iteration best-value history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    pub nodes: BTreeMap<String, TuningNode>,
    pub root_id: String,
    pub frontier: BTreeSet<String>,
    /// (iteration, best target value so far); nondecreasing in value.
    pub best_per_iteration: Vec<(u32, f64)>,
    pub target_metric: String,
    pub direction: Direction,
    next_node: u64,
}

impl SearchTree {
    /// A tree whose root is the given (typically default) configuration,
    /// still unbenchmarked.
    pub fn new(
        config: Configuration,
        workload: WorkloadSpec,
        resources: ResourceSpec,
        target_metric: impl Into<String>,
        direction: Direction,
    ) -> Self {
        let mut tree = SearchTree {
            nodes: BTreeMap::new(),
            root_id: String::new(),
            frontier: BTreeSet::new(),
            best_per_iteration: Vec::new(),
            target_metric: target_metric.into(),
            direction,
            next_node: 0,
        };
        let id = tree.mint_id();
        tree.root_id = id.clone();
        tree.nodes.insert(
            id.clone(),
            TuningNode {
                id,
                parent_id: None,
                config,
                workload,
                resources,
                digest: None,
                depth: 0,
                status: NodeStatus::Proposed,
                iteration: 0,
            },
        );
        tree
    }

    fn mint_id(&mut self) -> String {
        let id = format!("n{:04}", self.next_node);
        self.next_node += 1;
        id
    }

    pub fn node(&self, id: &str) -> Option<&TuningNode> {
        self.nodes.get(id)
    }

    /// The node's target-metric reading, when benchmarked.
    pub fn node_value(&self, id: &str) -> Option<f64> {
        self.nodes
            .get(id)?
            .digest
            .as_ref()?
            .value_of(&self.target_metric)
    }

    /// Add a proposed child under `parent_id`, inheriting its workload
    /// and resources. Returns the new node id.
    pub fn add_child(
        &mut self,
        parent_id: &str,
        config: Configuration,
        iteration: u32,
    ) -> Result<String, TreeError> {
        let parent = self
            .nodes
            .get(parent_id)
            .ok_or_else(|| TreeError::UnknownNode(parent_id.to_string()))?;
        let depth = parent.depth + 1;
        let workload = parent.workload.clone();
        let resources = parent.resources.clone();
        let mut config = config;
        config.parent_id = Some(parent_id.to_string());
        let id = self.mint_id();
        self.nodes.insert(
            id.clone(),
            TuningNode {
                id: id.clone(),
                parent_id: Some(parent_id.to_string()),
                config,
                workload,
                resources,
                digest: None,
                depth,
                status: NodeStatus::Proposed,
                iteration,
            },
        );
        Ok(id)
    }

    pub fn mark_benchmarked(
        &mut self,
        id: &str,
        digest: PerformanceDigest,
    ) -> Result<(), TreeError> {
        let node = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| TreeError::UnknownNode(id.to_string()))?;
        node.digest = Some(digest);
        node.status = NodeStatus::Benchmarked;
        self.frontier.insert(id.to_string());
        self.prune_frontier();
        Ok(())
    }

    pub fn mark_failed(&mut self, id: &str) -> Result<(), TreeError> {
        let node = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| TreeError::UnknownNode(id.to_string()))?;
        node.digest = None;
        node.status = NodeStatus::Failed;
        Ok(())
    }

    pub fn mark_rejected(&mut self, id: &str) -> Result<(), TreeError> {
        let node = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| TreeError::UnknownNode(id.to_string()))?;
        node.status = NodeStatus::Rejected;
        Ok(())
    }

    /// Choose a frontier node for expansion; it leaves the frontier.
    pub fn mark_selected(&mut self, id: &str) -> Result<(), TreeError> {
        if !self.frontier.contains(id) {
            return Err(TreeError::UnknownNode(id.to_string()));
        }
        let node = self.nodes.get_mut(id).expect("frontier ids are nodes");
        node.status = NodeStatus::Selected;
        self.frontier.remove(id);
        Ok(())
    }

    fn prune_frontier(&mut self) {
        while self.frontier.len() > FRONTIER_CAP {
            let worst = self
                .frontier
                .iter()
                .min_by(|a, b| {
                    let va = self.node_value(a).unwrap_or(f64::NEG_INFINITY);
                    let vb = self.node_value(b).unwrap_or(f64::NEG_INFINITY);
                    let (ga, gb) = match self.direction {
                        Direction::Maximize => (va, vb),
                        Direction::Minimize => (-va, -vb),
                    };
                    ga.partial_cmp(&gb)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        // among equally bad leaves, drop the newest
                        .then_with(|| b.cmp(a))
                })
                .cloned();
            match worst {
                Some(id) => self.frontier.remove(&id),
                None => break,
            };
        }
    }

    /// Nodes holding a digest, i.e. with a measured target value.
    fn measured(&self) -> impl Iterator<Item = &TuningNode> {
        self.nodes.values().filter(|n| n.digest.is_some())
    }

    /// The best measured node; ties break toward the smaller id.
    pub fn best_node(&self) -> Option<&TuningNode> {
        let metric = &self.target_metric;
        self.measured()
            .filter_map(|n| n.digest.as_ref()?.value_of(metric).map(|v| (v, n)))
            .min_by(|(va, na), (vb, nb)| {
                let (ga, gb) = match self.direction {
                    Direction::Maximize => (-va, -vb),
                    Direction::Minimize => (*va, *vb),
                };
                ga.partial_cmp(&gb)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| na.id.cmp(&nb.id))
            })
            .map(|(_, n)| n)
    }

    /// Append this iteration's running-best entry. Returns the value,
    /// or None when nothing has been measured yet.
    pub fn record_iteration_best(&mut self, iteration: u32) -> Option<f64> {
        let best = self.best_node().and_then(|n| {
            n.digest.as_ref().unwrap().value_of(&self.target_metric)
        })?;
        self.best_per_iteration.push((iteration, best));
        Some(best)
    }

    /// Index of the last completed iteration (0 if only the baseline
    /// has run).
    pub fn completed_iterations(&self) -> u32 {
        self.best_per_iteration
            .last()
            .map(|(it, _)| *it)
            .unwrap_or(0)
    }

    /// Nodes that were rejected before execution or failed during it.
    pub fn error_count(&self) -> u64 {
        self.nodes
            .values()
            .filter(|n| matches!(n.status, NodeStatus::Rejected | NodeStatus::Failed))
            .count() as u64
    }

    /// Does any node already carry this configuration?
    pub fn has_config(&self, candidate: &Configuration) -> bool {
        self.nodes.values().any(|n| same_settings(&n.config, candidate))
    }

    /// Structural self-check: acyclic parent links with correct depths,
    /// digests exactly on benchmarked/selected nodes, frontier members
    /// benchmarked, best series nondecreasing.
    pub fn check(&self) -> Result<(), String> {
        let root = self
            .nodes
            .get(&self.root_id)
            .ok_or("root id missing from node map")?;
        if root.parent_id.is_some() || root.depth != 0 {
            return Err("root must have no parent and depth 0".into());
        }
        for node in self.nodes.values() {
            match &node.parent_id {
                None if node.id != self.root_id => {
                    return Err(format!("{} has no parent but is not the root", node.id));
                }
                Some(pid) => {
                    let parent = self
                        .nodes
                        .get(pid)
                        .ok_or(format!("{} points at unknown parent {pid}", node.id))?;
                    if node.depth != parent.depth + 1 {
                        return Err(format!("{} depth is not parent depth + 1", node.id));
                    }
                }
                None => {}
            }
            let has_digest = node.digest.is_some();
            let should = matches!(node.status, NodeStatus::Benchmarked | NodeStatus::Selected);
            if has_digest != should {
                return Err(format!(
                    "{} digest presence disagrees with status {:?}",
                    node.id, node.status
                ));
            }
        }
        for id in &self.frontier {
            match self.nodes.get(id) {
                Some(n) if n.status == NodeStatus::Benchmarked => {}
                _ => return Err(format!("frontier entry {id} is not a benchmarked node")),
            }
        }
        for pair in self.best_per_iteration.windows(2) {
            if self.direction.better(pair[0].1, pair[1].1) {
                return Err("best_per_iteration regressed".into());
            }
        }
        Ok(())
    }
}

/// Do two configurations pin the same settings? Int/Real aliases of
/// the same number count as equal.
pub fn same_settings(a: &Configuration, b: &Configuration) -> bool {
    a.values.len() == b.values.len()
        && a.values
            .iter()
            .all(|(k, v)| b.values.get(k).is_some_and(|c| scalar_eq(v, c)))
}

/// Ask the model for child configurations of `payload.node`. A
/// malformed response is retried once; a second failure (or a
/// transport-level error) falls back to deterministic perturbation.
/// Budget and transcript exhaustion propagate.
pub fn propose_children(
    gateway: &Gateway,
    payload: &ProposePayload,
) -> Result<Vec<Configuration>, LlmError> {
    let request = LlmRequest::new(RequestKind::ProposeChildren, prompts::propose_prompt(payload));
    let base = Configuration {
        values: payload.node.config.clone(),
        parent_id: Some(payload.node.id.clone()),
    };
    for _attempt in 0..2 {
        match gateway.complete(&request) {
            Ok(response) => {
                match parse_response::<Vec<BTreeMap<String, ScalarValue>>>(&response.text) {
                    Ok(maps) => {
                        let children = maps
                            .into_iter()
                            .take(payload.branching as usize)
                            .map(|overrides| {
                                let mut config = base.clone();
                                for (k, v) in overrides {
                                    config.values.insert(k, v);
                                }
                                config
                            })
                            .collect();
                        return Ok(children);
                    }
                    Err(_) => continue,
                }
            }
            Err(
                err @ (LlmError::BudgetExceeded { .. } | LlmError::TranscriptExhausted { .. }),
            ) => return Err(err),
            Err(_) => break,
        }
    }
    Ok(perturbation_fallback(payload))
}

/// The deterministic proposal fallback: take the top `branching`
/// numeric parameters named by the insights (schema order when they
/// name none), and move each one toward its range midpoint by doubling
/// or halving.
pub fn perturbation_fallback(payload: &ProposePayload) -> Vec<Configuration> {
    let schema = &payload.schema;
    let numeric: Vec<&String> = schema
        .params
        .iter()
        .filter(|(_, def)| def.is_numeric())
        .map(|(name, _)| name)
        .collect();
    let mut ordered: Vec<&String> = Vec::new();
    for insight in &payload.insights {
        for name in &numeric {
            if ordered.contains(name) {
                continue;
            }
            let in_prediction = insight
                .prediction
                .as_ref()
                .is_some_and(|p| &p.param == *name);
            if in_prediction || insight.text.contains(name.as_str()) {
                ordered.push(name);
            }
        }
    }
    for name in &numeric {
        if !ordered.contains(name) {
            ordered.push(name);
        }
    }

    let mut children = Vec::new();
    for name in ordered.into_iter().take(payload.branching as usize) {
        let def = &schema.params[name];
        let current = match payload.node.config.get(name).and_then(ScalarValue::as_f64) {
            Some(v) => v,
            None => match def.default.as_f64() {
                Some(v) => v,
                None => continue,
            },
        };
        let perturbed = match &def.kind {
            ParamKind::Integer { min, max } => {
                let mid = (*min + *max) as f64 / 2.0;
                let moved = if current < mid { current * 2.0 } else { current / 2.0 };
                ScalarValue::Int((moved.floor() as i64).clamp(*min, *max))
            }
            ParamKind::Real { min, max } => {
                let mid = (min + max) / 2.0;
                let moved = if current < mid { current * 2.0 } else { current / 2.0 };
                ScalarValue::Real(moved.clamp(*min, *max))
            }
            _ => continue,
        };
        if perturbed.as_f64() == Some(current) {
            continue;
        }
        let mut config = Configuration {
            values: payload.node.config.clone(),
            parent_id: Some(payload.node.id.clone()),
        };
        config.values.insert(name.clone(), perturbed);
        children.push(config);
    }
    children
}

#[derive(Deserialize)]
struct KeepList {
    keep: Vec<usize>,
}

/// First-layer screening: ask the model which candidate indices honor
/// the user constraints. With no constraints (or no candidates) every
/// index passes without a call; a malformed response keeps all, since
/// mechanical validation still guards execution.
pub fn filter_constraints(
    gateway: &Gateway,
    payload: &FilterPayload,
) -> Result<Vec<usize>, LlmError> {
    let all: Vec<usize> = (0..payload.candidates.len()).collect();
    if payload.constraints.user_constraints.is_empty() || payload.candidates.is_empty() {
        return Ok(all);
    }
    let request = LlmRequest::new(RequestKind::FilterConstraints, prompts::filter_prompt(payload));
    let response = match gateway.complete(&request) {
        Ok(r) => r,
        Err(err @ (LlmError::BudgetExceeded { .. } | LlmError::TranscriptExhausted { .. })) => {
            return Err(err)
        }
        Err(_) => return Ok(all),
    };
    match parse_response::<KeepList>(&response.text) {
        Ok(list) => {
            let mut keep: Vec<usize> = list
                .keep
                .into_iter()
                .filter(|i| *i < payload.candidates.len())
                .collect();
            keep.sort_unstable();
            keep.dedup();
            Ok(keep)
        }
        Err(_) => Ok(all),
    }
}

/// Pick the next frontier node to expand. A single-node frontier
/// short-circuits without a call. The response may be prose; it counts
/// as an answer when exactly one frontier id appears in it, otherwise
/// the argmax of the target metric (ties toward the smaller id) is
/// used. Budget and transcript exhaustion propagate.
pub fn select_next(
    gateway: &Gateway,
    tree: &SearchTree,
    task: &TaskLine,
) -> Result<String, LlmError> {
    let mut frontier: Vec<&String> = tree.frontier.iter().collect();
    assert!(!frontier.is_empty(), "select_next needs a non-empty frontier");
    if frontier.len() == 1 {
        return Ok(frontier[0].clone());
    }

    let payload = SelectPayload {
        task: task.clone(),
        frontier: frontier
            .iter()
            .map(|id| crate::llm::payload::NodeLine {
                id: (*id).clone(),
                value: tree.node_value(id),
            })
            .collect(),
    };
    let request = LlmRequest::new(RequestKind::SelectNode, prompts::select_prompt(&payload));
    let named = match gateway.complete(&request) {
        Ok(response) => {
            let tokens: BTreeSet<&str> = response
                .text
                .split(|c: char| !c.is_ascii_alphanumeric())
                .filter(|t| !t.is_empty())
                .collect();
            let mentioned: Vec<&String> = frontier
                .iter()
                .copied()
                .filter(|id| tokens.contains(id.as_str()))
                .collect();
            (mentioned.len() == 1).then(|| mentioned[0].clone())
        }
        Err(err @ (LlmError::BudgetExceeded { .. } | LlmError::TranscriptExhausted { .. })) => {
            return Err(err)
        }
        Err(_) => None,
    };
    if let Some(id) = named {
        return Ok(id);
    }

    frontier.sort();
    let best = frontier
        .into_iter()
        .min_by(|a, b| {
            let va = tree.node_value(a).unwrap_or(f64::NEG_INFINITY);
            let vb = tree.node_value(b).unwrap_or(f64::NEG_INFINITY);
            let (ga, gb) = match tree.direction {
                Direction::Maximize => (-va, -vb),
                Direction::Minimize => (va, vb),
            };
            ga.partial_cmp(&gb)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.cmp(b))
        })
        .expect("frontier checked non-empty");
    Ok(best.clone())
}

/// Why a session stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TokenBudget,
    TimeBudget,
    MaxIterations,
    Convergence,
    /// No frontier node left to expand.
    Exhausted,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::TokenBudget => "token budget",
            StopReason::TimeBudget => "time budget",
            StopReason::MaxIterations => "max iterations",
            StopReason::Convergence => "convergence",
            StopReason::Exhausted => "frontier exhausted",
        })
    }
}

/// The session's stopping limits; any absent budget never fires.
#[derive(Debug, Clone, Copy, Default)]
pub struct Budgets {
    pub token_budget: Option<u64>,
    pub time_budget_s: Option<f64>,
    pub max_iterations: Option<u32>,
}

const CONVERGENCE_WINDOW: usize = 3;
const CONVERGENCE_GAIN: f64 = 0.01;

/// Has the best-value series improved by less than 1% over its last
/// three entries? Non-positive reference values never converge.
pub fn converged(series: &[f64], direction: Direction) -> bool {
    if series.len() < CONVERGENCE_WINDOW {
        return false;
    }
    let window = &series[series.len() - CONVERGENCE_WINDOW..];
    let (first, last) = (window[0], window[CONVERGENCE_WINDOW - 1]);
    let reference = match direction {
        Direction::Maximize => first,
        Direction::Minimize => last,
    };
    if reference <= 0.0 {
        return false;
    }
    direction.improvement(first, last) < CONVERGENCE_GAIN
}

/// Decide whether the loop should stop, checking the budgets in a
/// fixed order: tokens, then wall-clock time, then iteration count,
/// then convergence of the best-value series.
pub fn check_termination(
    tree: &SearchTree,
    ledger: &TokenLedger,
    budgets: &Budgets,
    elapsed_s: f64,
) -> Option<StopReason> {
    if let Some(budget) = budgets.token_budget {
        if ledger.total >= budget {
            return Some(StopReason::TokenBudget);
        }
    }
    if let Some(budget) = budgets.time_budget_s {
        if elapsed_s >= budget {
            return Some(StopReason::TimeBudget);
        }
    }
    if let Some(max) = budgets.max_iterations {
        if tree.completed_iterations() >= max {
            return Some(StopReason::MaxIterations);
        }
    }
    let series: Vec<f64> = tree.best_per_iteration.iter().map(|(_, v)| *v).collect();
    if converged(&series, tree.direction) {
        return Some(StopReason::Convergence);
    }
    None
}
