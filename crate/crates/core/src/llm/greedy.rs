//! Deterministic offline backend. Parses the structured payload block
//! out of each prompt and answers with a simple greedy policy, so whole
//! sessions run reproducibly with no model in the loop.
//!
//! Proposal policy: apply every retrieved insight at once (one combined
//! candidate), then each insight alone, then fill remaining slots by
//! perturbing schema parameters ranked by workload affinity. Step sizes
//! scale with insight confidence: below 0.8 the value doubles or halves
//! (moves that would breach a range or the memory cap are skipped),
//! at 0.8 and above it jumps straight to the cap-aware extreme.

use super::payload::{
    parse_embedded, scalar_from_str, to_fenced_json, ChangeDirection, Effect, FilterPayload,
    InsightsPayload, ProposePayload, SelectPayload, SynthesizePayload, VotePayload,
};
use super::{estimate_tokens, LlmBackend, LlmError, LlmRequest, LlmResponse, RequestKind};
use crate::target::{Direction, ParamKind, ScalarValue};
use serde_json::json;
use std::collections::{BTreeMap, BTreeSet};

pub struct GreedyBackend;

impl GreedyBackend {
    pub fn new() -> Self {
        GreedyBackend
    }
}

impl Default for GreedyBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl LlmBackend for GreedyBackend {
    fn id(&self) -> &str {
        "greedy-mock"
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let text = match request.kind {
            RequestKind::ProposeChildren => propose(embedded(&request.prompt)?),
            RequestKind::SelectNode => select(embedded(&request.prompt)?),
            RequestKind::SynthesizeExtraction => synthesize(embedded(&request.prompt)?),
            RequestKind::GenerateInsights => insights(embedded(&request.prompt)?),
            RequestKind::VoteInsights => vote(embedded(&request.prompt)?),
            RequestKind::FilterConstraints => filter(embedded(&request.prompt)?),
        };
        Ok(LlmResponse {
            tokens_in: estimate_tokens(&request.prompt),
            tokens_out: estimate_tokens(&text),
            backend_id: self.id().to_string(),
            text,
        })
    }
}

fn embedded<T: serde::de::DeserializeOwned>(prompt: &str) -> Result<T, LlmError> {
    parse_embedded(prompt).map_err(|e| LlmError::InvalidRequest(format!("bad payload: {e}")))
}

/// A single parameter adjustment derived from one insight.
#[derive(Debug, Clone)]
enum Move {
    Step(ChangeDirection),
    Set(ScalarValue),
}

fn improvement(direction: Direction, before: f64, after: f64) -> f64 {
    direction.improvement(before, after)
}

fn numeric_range(kind: &ParamKind) -> Option<(f64, f64, bool)> {
    match kind {
        ParamKind::Integer { min, max } => Some((*min as f64, *max as f64, true)),
        ParamKind::Real { min, max } => Some((*min, *max, false)),
        _ => None,
    }
}

fn mem_sum(values: &BTreeMap<String, ScalarValue>, memory_params: &[String]) -> f64 {
    memory_params
        .iter()
        .filter_map(|p| values.get(p).and_then(|v| v.as_f64()))
        .sum()
}

/// Extract the first `param=value` mention naming a schema parameter.
fn setting_in_text(text: &str, payload: &ProposePayload) -> Option<(String, ScalarValue)> {
    parse_setting(text, |p| payload.schema.params.contains_key(p))
}

fn parse_setting(text: &str, known: impl Fn(&str) -> bool) -> Option<(String, ScalarValue)> {
    let re = regex::Regex::new(r"([A-Za-z_][A-Za-z0-9_]*)=([A-Za-z0-9_.+-]+)").unwrap();
    for cap in re.captures_iter(text) {
        let param = cap.get(1).unwrap().as_str();
        if known(param) {
            return Some((param.to_string(), scalar_from_str(cap.get(2).unwrap().as_str())));
        }
    }
    None
}

/// Turn the retrieved insights into per-parameter moves, highest score
/// first, one move per parameter.
fn derive_moves(p: &ProposePayload) -> Vec<(String, Move, f64)> {
    let mut out = Vec::new();
    let mut claimed: BTreeSet<String> = BTreeSet::new();
    for ins in &p.insights {
        let (param, mv) = match &ins.prediction {
            Some(pred) => {
                if pred.metric != p.task.metric {
                    continue;
                }
                let dir = match pred.effect {
                    Effect::Improves => pred.direction,
                    Effect::Degrades => pred.direction.opposite(),
                };
                (pred.param.clone(), Move::Step(dir))
            }
            None => {
                // Free-text advice is only actionable as "param=value";
                // warnings about bad settings carry no target value.
                if ins.text.contains("degrad") {
                    continue;
                }
                match setting_in_text(&ins.text, p) {
                    Some((param, value)) => (param, Move::Set(value)),
                    None => continue,
                }
            }
        };
        if claimed.insert(param.clone()) {
            out.push((param, mv, ins.confidence));
        }
    }
    out
}

/// Apply one move against `values`, honoring ranges, the memory cap and
/// the blacklist. Returns the new value, or None when the move is a
/// no-op or would violate a constraint.
fn apply_move(
    values: &BTreeMap<String, ScalarValue>,
    param: &str,
    mv: &Move,
    confidence: f64,
    p: &ProposePayload,
) -> Option<ScalarValue> {
    if p.constraints.blacklist.iter().any(|b| b == param) {
        return None;
    }
    let def = p.schema.params.get(param)?;
    let current = values.get(param)?;
    match mv {
        Move::Set(v) => {
            if !def.accepts(v) {
                return None;
            }
            if let (Some(a), Some(b)) = (current.as_f64(), v.as_f64()) {
                if a == b {
                    return None;
                }
            } else if current == v {
                return None;
            }
            Some(v.clone())
        }
        Move::Step(dir) => {
            let (min, max, is_int) = numeric_range(&def.kind)?;
            let cur = current.as_f64()?;
            let is_mem = p.constraints.memory_params.iter().any(|m| m == param);
            let other_mem = mem_sum(values, &p.constraints.memory_params)
                - if is_mem { cur } else { 0.0 };
            let next = if confidence >= 0.8 {
                // Confident insight: jump to the extreme the cap allows.
                let mut target = match dir {
                    ChangeDirection::Increase => max,
                    ChangeDirection::Decrease => min,
                };
                if is_mem && matches!(dir, ChangeDirection::Increase) {
                    target = target.min((p.constraints.cap_mb - other_mem).floor());
                }
                target.clamp(min, max)
            } else {
                // Tentative insight: double or halve, skip on violation.
                let stepped = match dir {
                    ChangeDirection::Increase => cur * 2.0,
                    ChangeDirection::Decrease => cur / 2.0,
                };
                let stepped = stepped.clamp(min, max);
                if is_mem && other_mem + stepped > p.constraints.cap_mb {
                    return None;
                }
                stepped
            };
            let next = if is_int { next.floor() } else { next };
            match dir {
                ChangeDirection::Increase if next <= cur => return None,
                ChangeDirection::Decrease if next >= cur => return None,
                _ => {}
            }
            Some(if is_int {
                ScalarValue::Int(next as i64)
            } else {
                ScalarValue::Real(next)
            })
        }
    }
}

/// Schema parameters ordered by affinity with the workload: write-path
/// knobs first for write-heavy workloads, read-path knobs first
/// otherwise, untagged in between, alphabetical within a tier.
fn affinity_order(p: &ProposePayload) -> Vec<String> {
    let write_heavy = p.workload.write_fraction >= 0.5;
    let mut names: Vec<(u8, String)> = p
        .schema
        .params
        .iter()
        .map(|(name, def)| {
            let writes = def.tags.contains("write-path");
            let reads = def.tags.contains("read-path");
            let tier = if write_heavy {
                if writes {
                    0
                } else if !reads {
                    1
                } else {
                    2
                }
            } else if reads {
                0
            } else if !writes {
                1
            } else {
                2
            };
            (tier, name.clone())
        })
        .collect();
    names.sort();
    names.into_iter().map(|(_, n)| n).collect()
}

/// The default exploratory move for a parameter no insight covers.
fn fill_move(
    values: &BTreeMap<String, ScalarValue>,
    param: &str,
    p: &ProposePayload,
) -> Option<ScalarValue> {
    let def = p.schema.params.get(param)?;
    match &def.kind {
        ParamKind::Integer { .. } | ParamKind::Real { .. } => {
            apply_move(values, param, &Move::Step(ChangeDirection::Increase), 0.0, p)
        }
        ParamKind::Enum { values: options } => {
            let current = values.get(param)?;
            let cur = current.as_str()?;
            options
                .iter()
                .find(|v| v.as_str() != cur)
                .map(|v| ScalarValue::Text(v.clone()))
        }
        ParamKind::Boolean => {
            let current = values.get(param)?;
            match current {
                ScalarValue::Bool(b) => Some(ScalarValue::Bool(!b)),
                _ => None,
            }
        }
    }
}

fn propose(p: ProposePayload) -> String {
    let branching = p.branching.max(1) as usize;
    let base = &p.node.config;
    let moves = derive_moves(&p);

    let mut emitted: Vec<BTreeMap<String, ScalarValue>> = Vec::new();
    let mut touched: BTreeSet<String> = BTreeSet::new();

    // One candidate applying every insight cumulatively.
    let mut combo = base.clone();
    let mut combo_params: Vec<String> = Vec::new();
    for (param, mv, conf) in &moves {
        if let Some(v) = apply_move(&combo, param, mv, *conf, &p) {
            combo.insert(param.clone(), v);
            combo_params.push(param.clone());
        }
    }
    if combo_params.len() > 1 && combo != *base {
        emitted.push(combo);
        touched.extend(combo_params);
    }

    // Each insight alone.
    for (param, mv, conf) in &moves {
        if emitted.len() >= branching {
            break;
        }
        if let Some(v) = apply_move(base, param, mv, *conf, &p) {
            let mut cfg = base.clone();
            cfg.insert(param.clone(), v);
            if cfg != *base && !emitted.contains(&cfg) {
                emitted.push(cfg);
                touched.insert(param.clone());
            }
        }
    }

    // Exploratory perturbations for untouched parameters.
    for param in affinity_order(&p) {
        if emitted.len() >= branching {
            break;
        }
        if touched.contains(&param) || p.constraints.blacklist.iter().any(|b| *b == param) {
            continue;
        }
        if let Some(v) = fill_move(base, &param, &p) {
            let mut cfg = base.clone();
            cfg.insert(param.clone(), v);
            if cfg != *base && !emitted.contains(&cfg) {
                emitted.push(cfg);
            }
        }
    }

    emitted.truncate(branching);
    format!("proposed configurations:\n{}", to_fenced_json(&emitted))
}

fn select(p: SelectPayload) -> String {
    let mut best: Option<(&str, f64)> = None;
    for node in &p.frontier {
        let Some(v) = node.value else { continue };
        let better = match best {
            None => true,
            Some((bid, bv)) => match p.task.direction {
                Direction::Maximize => v > bv || (v == bv && node.id.as_str() < bid),
                Direction::Minimize => v < bv || (v == bv && node.id.as_str() < bid),
            },
        };
        if better {
            best = Some((&node.id, v));
        }
    }
    match best {
        Some((id, _)) => id.to_string(),
        None => String::new(),
    }
}

fn synthesize(p: SynthesizePayload) -> String {
    let rules: Vec<serde_json::Value> = p
        .wanted_metrics
        .iter()
        .map(|m| {
            json!({
                "metric": m.name,
                "source": "stdout",
                "pattern": format!("{}[=:]\\s*([-+0-9.eE]+)", regex::escape(&m.name)),
                "unit": m.unit,
                "scale": 1.0,
            })
        })
        .collect();
    format!("extraction spec:\n{}", to_fenced_json(&json!({ "rules": rules })))
}

fn insights(p: InsightsPayload) -> String {
    // key -> (draft, confidence); key is the prediction tuple for
    // numeric advice and the literal text otherwise.
    let mut drafts: BTreeMap<String, (serde_json::Value, f64)> = BTreeMap::new();
    for ex in &p.experiences {
        if ex.changes.len() != 1 {
            continue;
        }
        let ch = &ex.changes[0];
        let rel = improvement(p.task.direction, ex.parent_value, ex.child_value);
        if rel.abs() < 0.005 {
            continue;
        }
        let confidence = 0.5 + (rel.abs() / 4.0).min(0.25);
        let improved = rel > 0.0;
        let (key, text, prediction) = match (ch.from.as_f64(), ch.to.as_f64()) {
            (Some(from), Some(to)) if from != to => {
                let changed = if to > from {
                    ChangeDirection::Increase
                } else {
                    ChangeDirection::Decrease
                };
                let dir = if improved { changed } else { changed.opposite() };
                let word = match dir {
                    ChangeDirection::Increase => "increasing",
                    ChangeDirection::Decrease => "decreasing",
                };
                let text = format!("{word} {} improves {}", ch.param, ex.metric);
                let pred = json!({
                    "param": ch.param,
                    "direction": dir,
                    "metric": ex.metric,
                    "effect": "improves",
                });
                (pred.to_string(), text, pred)
            }
            _ => {
                let verb = if improved { "improves" } else { "degrades" };
                let text = format!("setting {}={} {verb} {}", ch.param, ch.to, ex.metric);
                (text.clone(), text, serde_json::Value::Null)
            }
        };
        let draft = json!({
            "text": text,
            "prediction": prediction,
            "initial_confidence": confidence,
            "tags": [p.target_system, p.workload],
            "source_nodes": [ex.node_id],
        });
        match drafts.get(&key) {
            Some((_, existing)) if *existing >= confidence => {}
            _ => {
                drafts.insert(key, (draft, confidence));
            }
        }
    }
    let list: Vec<serde_json::Value> = drafts.into_values().map(|(d, _)| d).collect();
    format!("observations:\n{}", to_fenced_json(&list))
}

fn vote(p: VotePayload) -> String {
    let mut out: Vec<serde_json::Value> = Vec::new();
    for cand in &p.candidates {
        let ins = &cand.insight;
        let target_setting = if ins.prediction.is_none() {
            parse_setting(&ins.text, |_| true)
        } else {
            None
        };
        let mut support = 0u32;
        let mut oppose = 0u32;
        for ev in &cand.evidence {
            let improved = improvement(p.task.direction, ev.metric_before, ev.metric_after) > 0.0;
            let supports = match &ins.prediction {
                Some(pred) => {
                    let (Some(from), Some(to)) = (ev.param_before.as_f64(), ev.param_after.as_f64())
                    else {
                        continue;
                    };
                    if from == to {
                        continue;
                    }
                    let moved = if to > from {
                        ChangeDirection::Increase
                    } else {
                        ChangeDirection::Decrease
                    };
                    let claims_improve = matches!(pred.effect, Effect::Improves);
                    if moved == pred.direction {
                        improved == claims_improve
                    } else {
                        improved != claims_improve
                    }
                }
                None => {
                    let Some((_, ref wanted)) = target_setting else { continue };
                    let toward = match (ev.param_after.as_f64(), wanted.as_f64()) {
                        (Some(a), Some(w)) => a == w,
                        _ => ev.param_after == *wanted,
                    };
                    let claims_improve = !ins.text.contains("degrad");
                    if toward {
                        improved == claims_improve
                    } else {
                        improved != claims_improve
                    }
                }
            };
            if supports {
                support += 1;
            } else {
                oppose += 1;
            }
        }
        if support > oppose {
            out.push(json!({"insight_id": ins.id, "vote": "up"}));
        } else if oppose > support {
            out.push(json!({"insight_id": ins.id, "vote": "down"}));
        }
    }
    format!("votes:\n{}", to_fenced_json(&out))
}

fn filter(p: FilterPayload) -> String {
    let acceptable = |values: &BTreeMap<String, ScalarValue>| -> bool {
        for (name, value) in values {
            let Some(def) = p.schema.params.get(name) else {
                return false;
            };
            if !def.accepts(value) {
                return false;
            }
            if p.constraints.blacklist.iter().any(|b| b == name) {
                if let (Some(a), Some(b)) = (value.as_f64(), def.default.as_f64()) {
                    if a != b {
                        return false;
                    }
                } else if *value != def.default {
                    return false;
                }
            }
        }
        mem_sum(values, &p.constraints.memory_params) <= p.constraints.cap_mb
    };
    let keep: Vec<usize> = p
        .candidates
        .iter()
        .enumerate()
        .filter(|(_, values)| acceptable(values))
        .map(|(i, _)| i)
        .collect();
    format!("kept candidates:\n{}", to_fenced_json(&json!({ "keep": keep })))
}
