//! The orchestrator. One session owns the search tree, the insight
//! memory, the LLM gateway, and the benchmark executor, and drives the
//! two cycles: Cycle A proposes, screens, benchmarks, and digests
//! candidate configurations; Cycle B turns the round's outcomes into
//! insight votes and new insights. Every piece of state is persisted
//! under the session directory after each iteration, so a session can
//! be interrupted, resumed, and replayed.

mod metrics;
pub mod persist;

pub use metrics::{compute_metrics, DegenerateBaseline, Metrics};

use crate::extract::extract_digest;
use crate::llm::payload::{
    parse_response, ChangeDirection, ConstraintsLine, EvidenceLine, ExperienceLine, FilterPayload,
    InsightLine, InsightsPayload, NodeSummary, ParamChange, ProposePayload, TaskLine,
    VoteCandidateLine, VotePayload,
};
use crate::llm::{
    Gateway, GreedyBackend, HttpBackend, LlmBackend, LlmError, LlmRequest, RequestKind,
    ScriptedBackend, TokenLedger, TranscriptEntry,
};
use crate::memory::{
    generate_insights, load_document, validate_vote, Insight, MemoryStore, VoteCheck,
    VoteDirection,
};
use crate::prompts;
use crate::sandbox::{BenchmarkTask, Executor, RunStatus};
use crate::search::{
    check_termination, filter_constraints, propose_children, same_settings, select_next, Budgets,
    SearchTree, StopReason, TreeError,
};
use crate::target::{
    resolve_adapter, scalar_eq, validate_config_with_cap, Configuration, Direction, ParamSchema,
    ResourceSpec, TargetAdapter, WorkloadSpec, MEMORY_CAP_FACTOR,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

/// Which completion provider a session talks to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BackendChoice {
    #[serde(rename = "http")]
    Http,
    #[default]
    #[serde(rename = "greedy-mock")]
    GreedyMock,
    #[serde(rename = "scripted")]
    Scripted,
}

/// Everything that defines one tuning session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Adapter name (`simkv`) or path to an adapter manifest.
    pub target: String,
    pub workload: WorkloadSpec,
    pub resources: ResourceSpec,
    pub target_metric: String,
    pub direction: Direction,
    #[serde(default = "default_branching")]
    pub branching: u32,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub token_budget: Option<u64>,
    #[serde(default)]
    pub time_budget_s: Option<f64>,
    #[serde(default)]
    pub max_iterations: Option<u32>,
    /// Parameters the tuner must never change from their defaults.
    #[serde(default)]
    pub blacklist: BTreeSet<String>,
    /// Free-text constraints screened by the model (layer 1).
    #[serde(default)]
    pub user_constraints: Vec<String>,
    #[serde(default = "default_cap_factor")]
    pub budget_cap_factor: f64,
    /// Echoed into session.json; the offline pipeline is deterministic
    /// without it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backend: BackendChoice,
    /// Cross-session long-term memory document; loaded at start when
    /// present, rewritten at the end of the session.
    #[serde(default)]
    pub ltm_path: Option<PathBuf>,
    /// Prerecorded transcript for the scripted backend.
    #[serde(default)]
    pub transcript_path: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Model name forwarded to the HTTP backend.
    #[serde(default)]
    pub model: Option<String>,
}

fn default_branching() -> u32 {
    3
}

fn default_top_k() -> usize {
    8
}

fn default_cap_factor() -> f64 {
    MEMORY_CAP_FACTOR
}

fn default_parallelism() -> usize {
    2
}

impl SessionConfig {
    pub fn check(&self) -> Result<(), String> {
        if !(1..=5).contains(&self.branching) {
            return Err(format!("branching {} outside [1, 5]", self.branching));
        }
        if self.top_k == 0 {
            return Err("top_k must be at least 1".into());
        }
        if !(self.budget_cap_factor > 0.0 && self.budget_cap_factor <= 1.0) {
            return Err(format!(
                "budget_cap_factor {} outside (0, 1]",
                self.budget_cap_factor
            ));
        }
        if let Some(t) = self.time_budget_s {
            if t <= 0.0 {
                return Err(format!("time_budget_s {t} must be positive"));
            }
        }
        self.workload.check()?;
        self.resources.check()?;
        Ok(())
    }
}

/// One row of the report's per-iteration table; all columns are
/// cumulative through that iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: u32,
    pub best_so_far: f64,
    pub cumulative_tokens: u64,
    pub errors_so_far: u64,
}

/// The standardized session outcome. Deliberately free of wall-clock
/// fields so a resumed session can reproduce it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub mpg: f64,
    pub tc95: u64,
    pub te: f64,
    pub twer: f64,
    pub best_config: Configuration,
    pub best_value: f64,
    pub iterations: u32,
    pub per_iteration: Vec<IterationRow>,
    pub stop_reason: StopReason,
}

#[derive(Debug, Error)]
pub enum SessionError {
    /// The session configuration itself is invalid.
    #[error("config: {0}")]
    Config(String),
    /// Adapter or backend could not be resolved.
    #[error("setup: {0}")]
    Setup(String),
    /// The baseline benchmark did not produce a usable digest.
    #[error("baseline: {0}")]
    Baseline(String),
    /// A scripted replay ran out of recorded responses.
    #[error("transcript mismatch: ran out of {0} entries")]
    TranscriptMismatch(String),
    #[error("session io: {0}")]
    Io(#[from] std::io::Error),
    #[error("persisted state unusable: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Metrics(#[from] DegenerateBaseline),
    #[error("internal: {0}")]
    Internal(String),
}

impl From<TreeError> for SessionError {
    fn from(e: TreeError) -> Self {
        SessionError::Internal(e.to_string())
    }
}

impl From<crate::memory::MemoryIoError> for SessionError {
    fn from(e: crate::memory::MemoryIoError) -> Self {
        SessionError::Corrupt(e.to_string())
    }
}

/// Run a session from scratch into `dir` (created if missing).
pub fn run_session(config: &SessionConfig, dir: &Path) -> Result<SessionReport, SessionError> {
    run_session_impl(config, dir, false)
}

/// Continue an interrupted session from the state persisted in `dir`.
/// With deterministic backends the final report is identical to what
/// the uninterrupted run would have produced.
pub fn resume_session(config: &SessionConfig, dir: &Path) -> Result<SessionReport, SessionError> {
    run_session_impl(config, dir, true)
}

fn build_backend(
    config: &SessionConfig,
    consumed: Option<&BTreeMap<RequestKind, usize>>,
) -> Result<Box<dyn LlmBackend>, SessionError> {
    match config.backend {
        BackendChoice::GreedyMock => Ok(Box::new(GreedyBackend::new())),
        BackendChoice::Http => {
            let model = config.model.clone().unwrap_or_else(|| "default".into());
            let backend =
                HttpBackend::from_env(model).map_err(|e| SessionError::Setup(e.to_string()))?;
            Ok(Box::new(backend))
        }
        BackendChoice::Scripted => {
            let path = config.transcript_path.as_ref().ok_or_else(|| {
                SessionError::Setup("scripted backend needs transcript_path".into())
            })?;
            let backend =
                ScriptedBackend::from_path(path).map_err(|e| SessionError::Setup(e.to_string()))?;
            if let Some(counts) = consumed {
                backend.skip(counts);
            }
            Ok(Box::new(backend))
        }
    }
}

fn constraints_line(config: &SessionConfig, schema: &ParamSchema) -> ConstraintsLine {
    ConstraintsLine {
        cap_mb: config.budget_cap_factor * config.resources.memory_mb as f64,
        memory_params: schema
            .params
            .iter()
            .filter(|(_, def)| def.tags.contains("memory-mb"))
            .map(|(name, _)| name.clone())
            .collect(),
        blacklist: config.blacklist.iter().cloned().collect(),
        user_constraints: config.user_constraints.clone(),
    }
}

fn insight_line(insight: &Insight) -> InsightLine {
    InsightLine {
        id: insight.id.clone(),
        text: insight.text.clone(),
        confidence: insight.confidence,
        tags: insight.tags.iter().cloned().collect(),
        prediction: insight.prediction.clone(),
    }
}

/// The free-text handle insights are retrieved against.
fn retrieval_context(config: &SessionConfig) -> String {
    let verb = match config.direction {
        Direction::Maximize => "maximize",
        Direction::Minimize => "minimize",
    };
    format!(
        "{verb} {} on {} workload {}",
        config.target_metric, config.target, config.workload.name
    )
}

/// Parameter settings that differ between a parent and child config.
fn diff_changes(parent: &Configuration, child: &Configuration) -> Vec<ParamChange> {
    parent
        .values
        .iter()
        .filter_map(|(name, from)| {
            let to = child.values.get(name)?;
            if scalar_eq(from, to) {
                return None;
            }
            Some(ParamChange {
                param: name.clone(),
                from: from.clone(),
                to: to.clone(),
            })
        })
        .collect()
}

/// Pair each retrieved insight with this round's qualifying evidence:
/// benchmarked children whose value of the insight's parameter changed
/// (for predictions, only moves in the predicted direction count).
fn build_evidence(
    tree: &SearchTree,
    parent_id: &str,
    benchmarked: &[String],
    retrieved: &[Insight],
    schema: &ParamSchema,
) -> Vec<(Insight, Vec<EvidenceLine>)> {
    let parent = match tree.node(parent_id) {
        Some(n) => n,
        None => return vec![],
    };
    let parent_value = match tree.node_value(parent_id) {
        Some(v) => v,
        None => return vec![],
    };
    let mut out = Vec::new();
    for insight in retrieved {
        let params: Vec<String> = match &insight.prediction {
            Some(p) => vec![p.param.clone()],
            None => schema
                .params
                .keys()
                .filter(|name| insight.text.contains(name.as_str()))
                .cloned()
                .collect(),
        };
        let mut pairs = Vec::new();
        for child_id in benchmarked {
            let (Some(child), Some(child_value)) =
                (tree.node(child_id), tree.node_value(child_id))
            else {
                continue;
            };
            for param in &params {
                let (Some(before), Some(after)) =
                    (parent.config.get(param), child.config.get(param))
                else {
                    continue;
                };
                if scalar_eq(before, after) {
                    continue;
                }
                if let Some(pred) = &insight.prediction {
                    let (Some(f), Some(t)) = (before.as_f64(), after.as_f64()) else {
                        continue;
                    };
                    let moved = if t > f {
                        ChangeDirection::Increase
                    } else {
                        ChangeDirection::Decrease
                    };
                    if moved != pred.direction {
                        continue;
                    }
                }
                pairs.push(EvidenceLine {
                    before_node: parent_id.to_string(),
                    after_node: child_id.clone(),
                    param: param.clone(),
                    param_before: before.clone(),
                    param_after: after.clone(),
                    metric_before: parent_value,
                    metric_after: child_value,
                });
            }
        }
        if !pairs.is_empty() {
            out.push((insight.clone(), pairs));
        }
    }
    out
}

#[derive(Deserialize)]
struct VoteDecision {
    insight_id: String,
    vote: VoteDirection,
}

/// One VoteInsights call; a malformed response simply casts no votes.
fn vote_insights(gateway: &Gateway, payload: &VotePayload) -> Result<Vec<VoteDecision>, LlmError> {
    let request = LlmRequest::new(RequestKind::VoteInsights, prompts::vote_prompt(payload));
    let response = gateway.complete(&request)?;
    Ok(parse_response(&response.text).unwrap_or_default())
}

fn persist_all(
    dir: &Path,
    tree: &SearchTree,
    memory: &MemoryStore,
    gateway: &Gateway,
    elapsed_s: f64,
) -> Result<(), SessionError> {
    persist::write_json(&dir.join(persist::TREE_FILE), tree)?;
    persist::write_json(&dir.join(persist::STM_FILE), &memory.stm_document())?;
    persist::write_json(&dir.join(persist::LTM_FILE), &memory.ltm_document())?;
    persist::write_json(&dir.join(persist::LEDGER_FILE), &gateway.ledger())?;
    persist::write_json(&dir.join(persist::TRANSCRIPT_FILE), &gateway.transcript())?;
    persist::write_vote_log(&dir.join(persist::VOTE_LOG_FILE), memory.vote_log())?;
    persist::write_json(
        &dir.join(persist::PROGRESS_FILE),
        &persist::Progress { elapsed_s },
    )?;
    Ok(())
}

fn run_session_impl(
    config: &SessionConfig,
    dir: &Path,
    resume: bool,
) -> Result<SessionReport, SessionError> {
    config.check().map_err(SessionError::Config)?;
    let adapter: Arc<dyn TargetAdapter> = Arc::from(
        resolve_adapter(&config.target).map_err(|e| SessionError::Setup(e.to_string()))?,
    );
    let manifest = adapter.manifest().clone();
    let schema = manifest.schema.clone();
    if !manifest.metrics.contains_key(&config.target_metric) {
        return Err(SessionError::Setup(format!(
            "adapter {} does not expose metric {}",
            manifest.name, config.target_metric
        )));
    }

    fs::create_dir_all(dir.join(persist::NODES_DIR))?;

    let (mut tree, mut memory, base_elapsed, restored) = if resume {
        let tree: SearchTree = persist::read_json(&dir.join(persist::TREE_FILE))?;
        let stm = persist::read_json(&dir.join(persist::STM_FILE))?;
        let ltm = persist::read_json(&dir.join(persist::LTM_FILE))?;
        let mut memory = MemoryStore::from_documents(Some(stm), Some(ltm));
        memory.restore_vote_log(persist::read_vote_log(&dir.join(persist::VOTE_LOG_FILE))?);
        let ledger: TokenLedger = persist::read_json(&dir.join(persist::LEDGER_FILE))?;
        let transcript: Vec<TranscriptEntry> =
            persist::read_json(&dir.join(persist::TRANSCRIPT_FILE))?;
        let progress: persist::Progress = persist::read_json(&dir.join(persist::PROGRESS_FILE))?;
        (tree, memory, progress.elapsed_s, Some((ledger, transcript)))
    } else {
        let tree = SearchTree::new(
            schema.default_configuration(),
            config.workload.clone(),
            config.resources.clone(),
            &config.target_metric,
            config.direction,
        );
        let mut memory = MemoryStore::new();
        if let Some(path) = &config.ltm_path {
            if path.exists() {
                memory = MemoryStore::from_documents(None, Some(load_document(path)?));
            }
        }
        persist::write_json(&dir.join(persist::LTM_START_FILE), &memory.ltm_document())?;
        (tree, memory, 0.0, None)
    };

    let consumed: Option<BTreeMap<RequestKind, usize>> = restored.as_ref().map(|(_, t)| {
        let mut counts = BTreeMap::new();
        for entry in t {
            *counts.entry(entry.kind).or_insert(0) += 1;
        }
        counts
    });
    let backend = build_backend(config, consumed.as_ref())?;
    let gateway = Gateway::new(backend, config.token_budget);
    if let Some((ledger, transcript)) = restored {
        gateway.restore(ledger, transcript, tree.completed_iterations());
    }

    persist::write_json(&dir.join(persist::SESSION_FILE), config)?;
    let executor = Executor::new(adapter, dir.join(persist::NODES_DIR));
    let started = Instant::now();

    let task_line = TaskLine {
        metric: config.target_metric.clone(),
        direction: config.direction,
    };
    let budgets = Budgets {
        token_budget: config.token_budget,
        time_budget_s: config.time_budget_s,
        max_iterations: config.max_iterations,
    };
    let constraints = constraints_line(config, &schema);
    let context = retrieval_context(config);

    // baseline: benchmark the default configuration as the root
    if tree.node(&tree.root_id).is_some_and(|n| n.digest.is_none()) {
        gateway.set_iteration(0);
        let root_id = tree.root_id.clone();
        let root_config = tree.node(&root_id).unwrap().config.clone();
        let verdict = validate_config_with_cap(
            &root_config,
            &schema,
            &config.resources,
            &config.blacklist,
            config.budget_cap_factor,
        );
        if !verdict.ok {
            let reasons: Vec<String> = verdict
                .violations
                .iter()
                .map(|v| format!("{} {}: {}", v.kind, v.param, v.detail))
                .collect();
            return Err(SessionError::Baseline(format!(
                "default configuration fails validation: {}",
                reasons.join("; ")
            )));
        }
        let task = BenchmarkTask::new(
            &root_id,
            root_config,
            config.workload.clone(),
            config.resources.clone(),
            &verdict,
        );
        let raw = executor.run_task(&task);
        let digest = extract_digest(&gateway, &manifest, &raw, &root_id, &config.target_metric);
        persist::write_json(&executor.node_dir(&root_id).join("digest.json"), &digest)?;
        if raw.exit_status != RunStatus::Ok {
            return Err(SessionError::Baseline(format!(
                "baseline run ended with status {}",
                raw.exit_status
            )));
        }
        if digest.value_of(&config.target_metric).is_none() {
            return Err(SessionError::Baseline(format!(
                "baseline digest has no value for {}",
                config.target_metric
            )));
        }
        tree.mark_benchmarked(&root_id, digest)?;
        tree.record_iteration_best(0);
    }

    let stop_reason = 'run: loop {
        let elapsed = base_elapsed + started.elapsed().as_secs_f64();
        persist_all(dir, &tree, &memory, &gateway, elapsed)?;
        if let Some(reason) = check_termination(&tree, &gateway.ledger(), &budgets, elapsed) {
            break 'run reason;
        }
        if tree.frontier.is_empty() {
            break 'run StopReason::Exhausted;
        }
        let iteration = tree.completed_iterations() + 1;
        gateway.set_iteration(iteration);

        // ---- Cycle A ----
        let selected_id = match select_next(&gateway, &tree, &task_line) {
            Ok(id) => id,
            Err(LlmError::BudgetExceeded { .. }) => break 'run StopReason::TokenBudget,
            Err(LlmError::TranscriptExhausted { kind }) => {
                return Err(SessionError::TranscriptMismatch(format!("{kind:?}")))
            }
            Err(e) => return Err(SessionError::Internal(e.to_string())),
        };
        tree.mark_selected(&selected_id)?;
        let selected_config = tree.node(&selected_id).unwrap().config.clone();

        let retrieved = memory.retrieve(&context, config.top_k);
        let payload = ProposePayload {
            task: task_line.clone(),
            schema: schema.clone(),
            node: NodeSummary {
                id: selected_id.clone(),
                config: selected_config.values.clone(),
                value: tree.node_value(&selected_id),
            },
            insights: retrieved.iter().map(insight_line).collect(),
            branching: config.branching,
            workload: config.workload.clone(),
            constraints: constraints.clone(),
        };
        let proposals = match propose_children(&gateway, &payload) {
            Ok(p) => p,
            Err(LlmError::BudgetExceeded { .. }) => break 'run StopReason::TokenBudget,
            Err(LlmError::TranscriptExhausted { kind }) => {
                return Err(SessionError::TranscriptMismatch(format!("{kind:?}")))
            }
            Err(e) => return Err(SessionError::Internal(e.to_string())),
        };
        let mut candidates: Vec<Configuration> = Vec::new();
        for proposal in proposals {
            if tree.has_config(&proposal)
                || candidates.iter().any(|c| same_settings(c, &proposal))
            {
                continue;
            }
            candidates.push(proposal);
        }

        let keep: BTreeSet<usize> = {
            let filter_payload = FilterPayload {
                schema: schema.clone(),
                constraints: constraints.clone(),
                candidates: candidates.iter().map(|c| c.values.clone()).collect(),
            };
            match filter_constraints(&gateway, &filter_payload) {
                Ok(kept) => kept.into_iter().collect(),
                Err(LlmError::BudgetExceeded { .. }) => break 'run StopReason::TokenBudget,
                Err(LlmError::TranscriptExhausted { kind }) => {
                    return Err(SessionError::TranscriptMismatch(format!("{kind:?}")))
                }
                Err(e) => return Err(SessionError::Internal(e.to_string())),
            }
        };

        let mut tasks: Vec<BenchmarkTask> = Vec::new();
        for (idx, candidate) in candidates.into_iter().enumerate() {
            let node_id = tree.add_child(&selected_id, candidate, iteration)?;
            let node_config = tree.node(&node_id).unwrap().config.clone();
            if !keep.contains(&idx) {
                tree.mark_rejected(&node_id)?;
                continue;
            }
            let verdict = validate_config_with_cap(
                &node_config,
                &schema,
                &config.resources,
                &config.blacklist,
                config.budget_cap_factor,
            );
            if !verdict.ok {
                tree.mark_rejected(&node_id)?;
                continue;
            }
            tasks.push(BenchmarkTask::new(
                &node_id,
                node_config,
                config.workload.clone(),
                config.resources.clone(),
                &verdict,
            ));
        }

        let outputs = executor.run_batch(&tasks, config.parallelism);
        let mut benchmarked: Vec<String> = Vec::new();
        for task in &tasks {
            let raw = &outputs[&task.node_id];
            let digest =
                extract_digest(&gateway, &manifest, raw, &task.node_id, &config.target_metric);
            persist::write_json(&executor.node_dir(&task.node_id).join("digest.json"), &digest)?;
            if raw.exit_status == RunStatus::Ok
                && digest.value_of(&config.target_metric).is_some()
            {
                tree.mark_benchmarked(&task.node_id, digest)?;
                benchmarked.push(task.node_id.clone());
            } else {
                tree.mark_failed(&task.node_id)?;
            }
        }
        tree.record_iteration_best(iteration);

        // ---- Cycle B ----
        // First let the new evidence vote on the insights that guided
        // this round, then distill fresh insights from the outcomes.
        'cycle_b: {
            let evidence = build_evidence(&tree, &selected_id, &benchmarked, &retrieved, &schema);
            if !evidence.is_empty() {
                let vote_payload = VotePayload {
                    task: task_line.clone(),
                    candidates: evidence
                        .iter()
                        .map(|(insight, pairs)| VoteCandidateLine {
                            insight: insight_line(insight),
                            evidence: pairs.clone(),
                        })
                        .collect(),
                };
                match vote_insights(&gateway, &vote_payload) {
                    Ok(decisions) => {
                        let mut voted: BTreeSet<String> = BTreeSet::new();
                        for decision in decisions {
                            if !voted.insert(decision.insight_id.clone()) {
                                continue;
                            }
                            let Some((_, pairs)) =
                                evidence.iter().find(|(i, _)| i.id == decision.insight_id)
                            else {
                                continue;
                            };
                            let Some(current) = memory.insight(&decision.insight_id) else {
                                continue;
                            };
                            let node_ids: Vec<String> =
                                pairs.iter().map(|p| p.after_node.clone()).collect();
                            match validate_vote(current, decision.vote, pairs, config.direction) {
                                VoteCheck::Accepted => {
                                    memory.vote(&decision.insight_id, decision.vote, node_ids, true);
                                }
                                VoteCheck::Unvalidated => {
                                    memory.vote(
                                        &decision.insight_id,
                                        decision.vote,
                                        node_ids,
                                        false,
                                    );
                                }
                                VoteCheck::Rejected | VoteCheck::NoEvidence => {
                                    memory.reject_vote(&decision.insight_id, decision.vote, node_ids);
                                }
                            }
                        }
                    }
                    Err(LlmError::BudgetExceeded { .. }) => break 'cycle_b,
                    Err(LlmError::TranscriptExhausted { kind }) => {
                        return Err(SessionError::TranscriptMismatch(format!("{kind:?}")))
                    }
                    Err(_) => {}
                }
            }

            let parent_value = tree.node_value(&selected_id).unwrap_or_default();
            let experiences: Vec<ExperienceLine> = benchmarked
                .iter()
                .filter_map(|child_id| {
                    let child = tree.node(child_id)?;
                    Some(ExperienceLine {
                        node_id: child_id.clone(),
                        parent_node: selected_id.clone(),
                        changes: diff_changes(&selected_config, &child.config),
                        metric: config.target_metric.clone(),
                        parent_value,
                        child_value: tree.node_value(child_id)?,
                    })
                })
                .collect();
            let measured = tree.nodes.values().filter(|n| n.digest.is_some()).count();
            if experiences.is_empty() || measured < 2 {
                break 'cycle_b;
            }
            let insights_payload = InsightsPayload {
                task: task_line.clone(),
                target_system: config.target.clone(),
                workload: config.workload.name.clone(),
                experiences,
                existing: memory.all().map(insight_line).collect(),
            };
            match generate_insights(&gateway, &insights_payload) {
                Ok(drafts) => {
                    memory.absorb(drafts, &benchmarked);
                }
                Err(LlmError::TranscriptExhausted { kind }) => {
                    return Err(SessionError::TranscriptMismatch(format!("{kind:?}")))
                }
                Err(_) => {}
            }
        }
    };

    // ---- report ----
    let ledger = gateway.ledger();
    let baseline = tree
        .node_value(&tree.root_id)
        .ok_or_else(|| SessionError::Internal("root has no measured value".into()))?;
    let metrics = compute_metrics(&tree, &ledger, tree.error_count(), baseline)?;
    let best = tree
        .best_node()
        .ok_or_else(|| SessionError::Internal("no benchmarked node".into()))?;
    let best_id = best.id.clone();
    let best_config = best.config.clone();
    let best_value = tree
        .node_value(&best_id)
        .ok_or_else(|| SessionError::Internal("best node has no value".into()))?;
    let per_iteration = tree
        .best_per_iteration
        .iter()
        .map(|(iteration, best_so_far)| IterationRow {
            iteration: *iteration,
            best_so_far: *best_so_far,
            cumulative_tokens: ledger.cumulative_through(*iteration),
            errors_so_far: tree
                .nodes
                .values()
                .filter(|n| {
                    n.iteration <= *iteration
                        && matches!(
                            n.status,
                            crate::search::NodeStatus::Rejected | crate::search::NodeStatus::Failed
                        )
                })
                .count() as u64,
        })
        .collect();
    let report = SessionReport {
        mpg: metrics.mpg,
        tc95: metrics.tc95,
        te: metrics.te,
        twer: metrics.twer,
        best_config,
        best_value,
        iterations: tree.completed_iterations(),
        per_iteration,
        stop_reason,
    };

    let elapsed = base_elapsed + started.elapsed().as_secs_f64();
    persist_all(dir, &tree, &memory, &gateway, elapsed)?;
    persist::write_json(&dir.join(persist::REPORT_FILE), &report)?;
    if let Some(path) = &config.ltm_path {
        memory.save_ltm(path)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> SessionConfig {
        SessionConfig {
            target: "simkv".into(),
            workload: WorkloadSpec {
                name: "fillrandom".into(),
                write_fraction: 1.0,
                op_count: 100_000,
                extra: Default::default(),
            },
            resources: ResourceSpec {
                cpu_cores: 2,
                memory_mb: 1024,
                time_limit_s: 30,
            },
            target_metric: "throughput_kops".into(),
            direction: Direction::Maximize,
            branching: 3,
            top_k: 8,
            token_budget: None,
            time_budget_s: None,
            max_iterations: None,
            blacklist: BTreeSet::new(),
            user_constraints: vec![],
            budget_cap_factor: 0.8,
            seed: 0,
            backend: BackendChoice::GreedyMock,
            ltm_path: None,
            transcript_path: None,
            parallelism: 2,
            model: None,
        }
    }

    #[test]
    fn config_bounds_are_enforced() {
        let mut config = base_config();
        config.branching = 0;
        assert!(config.check().is_err());
        config.branching = 6;
        assert!(config.check().is_err());
        config.branching = 5;
        config.top_k = 0;
        assert!(config.check().is_err());
        config.top_k = 1;
        config.budget_cap_factor = 0.0;
        assert!(config.check().is_err());
        config.budget_cap_factor = 1.0;
        assert!(config.check().is_ok());
        // a zero token budget is legal: the session stops right after
        // the baseline
        config.token_budget = Some(0);
        assert!(config.check().is_ok());
    }

    #[test]
    fn config_defaults_fill_in() {
        let parsed: SessionConfig = serde_json::from_str(
            r#"{
                "target": "simkv",
                "workload": {"name": "fillrandom", "write_fraction": 1.0, "op_count": 1000},
                "resources": {"cpu_cores": 2, "memory_mb": 1024, "time_limit_s": 30},
                "target_metric": "throughput_kops",
                "direction": "maximize"
            }"#,
        )
        .unwrap();
        assert_eq!(parsed.branching, 3);
        assert_eq!(parsed.top_k, 8);
        assert_eq!(parsed.budget_cap_factor, 0.8);
        assert_eq!(parsed.backend, BackendChoice::GreedyMock);
        assert_eq!(parsed.parallelism, 2);
        assert!(parsed.token_budget.is_none());
    }

    #[test]
    fn zero_token_budget_stops_after_the_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = base_config();
        config.token_budget = Some(0);
        let report = run_session(&config, dir.path()).unwrap();
        assert_eq!(report.stop_reason, StopReason::TokenBudget);
        assert_eq!(report.iterations, 0);
        assert_eq!(report.mpg, 0.0);
        assert_eq!(report.te, 0.0);
        assert_eq!(report.twer, 0.0);
        assert_eq!(report.per_iteration.len(), 1);
        assert!((report.best_value - 74.61601777930623).abs() < 1e-9);
    }

    #[test]
    fn single_iteration_cap_records_one_expansion() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = base_config();
        config.max_iterations = Some(1);
        let report = run_session(&config, dir.path()).unwrap();
        assert_eq!(report.stop_reason, StopReason::MaxIterations);
        assert_eq!(report.iterations, 1);
        assert_eq!(report.per_iteration.len(), 2);
        assert!(report.best_value > report.per_iteration[0].best_so_far);
    }

    #[test]
    fn greedy_session_converges_to_the_grid_optimum() {
        let dir = tempfile::tempdir().unwrap();
        let config = base_config();
        let report = run_session(&config, dir.path()).unwrap();
        assert_eq!(report.stop_reason, StopReason::Convergence);
        assert!((report.best_value - 303.56681822788676).abs() < 1e-9);
        assert!(report.mpg > 3.0);
        assert!(report.tc95 > 0);

        // the tree on disk is structurally sound and the selected path
        // never regresses
        let tree: SearchTree =
            persist::read_json(&dir.path().join(persist::TREE_FILE)).unwrap();
        tree.check().unwrap();
        let mut selected: Vec<(String, f64)> = tree
            .nodes
            .values()
            .filter(|n| n.status == crate::search::NodeStatus::Selected)
            .map(|n| (n.id.clone(), tree.node_value(&n.id).unwrap()))
            .collect();
        selected.sort_by(|a, b| a.0.cmp(&b.0));
        assert!(selected.windows(2).all(|w| w[0].1 <= w[1].1));

        // every expected artifact of the session directory exists
        for file in [
            persist::SESSION_FILE,
            persist::TREE_FILE,
            persist::STM_FILE,
            persist::LTM_FILE,
            persist::LEDGER_FILE,
            persist::REPORT_FILE,
            persist::TRANSCRIPT_FILE,
            persist::VOTE_LOG_FILE,
            persist::PROGRESS_FILE,
        ] {
            assert!(dir.path().join(file).exists(), "missing {file}");
        }
        assert!(dir.path().join("nodes/n0000/stdout.txt").exists());
        assert!(dir.path().join("nodes/n0000/digest.json").exists());
    }

    #[test]
    fn interrupted_and_resumed_session_reports_identically() {
        let full_dir = tempfile::tempdir().unwrap();
        let config = base_config();
        run_session(&config, full_dir.path()).unwrap();
        let full_report = fs::read(full_dir.path().join(persist::REPORT_FILE)).unwrap();

        let split_dir = tempfile::tempdir().unwrap();
        let mut interrupted = config.clone();
        interrupted.max_iterations = Some(2);
        run_session(&interrupted, split_dir.path()).unwrap();
        resume_session(&config, split_dir.path()).unwrap();
        let resumed_report = fs::read(split_dir.path().join(persist::REPORT_FILE)).unwrap();
        assert_eq!(full_report, resumed_report);
    }

    #[test]
    fn unknown_target_is_a_setup_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = base_config();
        config.target = "no-such-system".into();
        let err = run_session(&config, dir.path()).unwrap_err();
        assert!(matches!(err, SessionError::Setup(_)));
    }

    #[test]
    fn scripted_backend_without_transcript_is_a_setup_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = base_config();
        config.backend = BackendChoice::Scripted;
        let err = run_session(&config, dir.path()).unwrap_err();
        assert!(matches!(err, SessionError::Setup(_)));
    }
}

