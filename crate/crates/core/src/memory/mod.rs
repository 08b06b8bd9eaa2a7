//! The Reflector agent: a two-tier insight memory. Fresh observations
//! enter the short-term tier, get voted up or down as later benchmarks
//! confirm or contradict them, and graduate to the long-term tier once
//! their confidence and track record hold up. Retrieval ranks insights
//! by lexical similarity to the current tuning context, weighted by
//! confidence.

use crate::llm::payload::{
    parse_response, EvidenceLine, InsightsPayload, Prediction,
};
pub use crate::llm::payload::{ChangeDirection, Effect};
use crate::llm::{Gateway, LlmError, LlmRequest, RequestKind};
use crate::prompts;
use crate::target::Direction;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

/// Which memory tier an insight lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "STM")]
    Stm,
    #[serde(rename = "LTM")]
    Ltm,
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tier::Stm => "STM",
            Tier::Ltm => "LTM",
        })
    }
}

/// One piece of distilled tuning experience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insight {
    pub id: String,
    pub text: String,
    /// Machine-checkable claim; free-text insights carry none and skip
    /// vote validation.
    #[serde(default)]
    pub prediction: Option<Prediction>,
    pub confidence: f64,
    pub tier: Tier,
    pub upvotes: u32,
    pub downvotes: u32,
    pub source_nodes: Vec<String>,
    #[serde(default)]
    pub tags: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteDirection {
    Up,
    Down,
}

/// Audit record of one vote attempt, accepted or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub insight_id: String,
    pub vote: VoteDirection,
    pub node_ids: Vec<String>,
    pub accepted: bool,
    /// False when the insight had no structured prediction to check.
    pub validated: bool,
}

/// Tier movement caused by a vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    Promoted,
    Demoted,
    Discarded,
}

/// Result of applying one accepted vote.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteOutcome {
    pub confidence: f64,
    pub transition: Option<Transition>,
}

/// The confidence update rule. Upvotes move a fifth of the way to 1,
/// downvotes keep four fifths.
pub fn apply_vote(confidence: f64, vote: VoteDirection) -> f64 {
    match vote {
        VoteDirection::Up => confidence + 0.2 * (1.0 - confidence),
        VoteDirection::Down => 0.8 * confidence,
    }
}

const PROMOTE_CONFIDENCE: f64 = 0.8;
const PROMOTE_UPVOTES: u32 = 3;
const DISCARD_CONFIDENCE: f64 = 0.2;
const DEMOTE_CONFIDENCE: f64 = 0.5;

/// What checking a vote against benchmark evidence concluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoteCheck {
    /// The evidence majority agrees with the vote.
    Accepted,
    /// The evidence majority contradicts the vote.
    Rejected,
    /// No evidence pair moved the parameter in the predicted direction.
    NoEvidence,
    /// The insight has no structured prediction to check against.
    Unvalidated,
}

/// Check a vote against evidence pairs. Only pairs where the parameter
/// moved in the predicted direction count; an upvote needs a majority
/// of them showing the predicted effect, a downvote a majority showing
/// the opposite.
pub fn validate_vote(
    insight: &Insight,
    vote: VoteDirection,
    evidence: &[EvidenceLine],
    metric_direction: Direction,
) -> VoteCheck {
    let Some(pred) = &insight.prediction else {
        return VoteCheck::Unvalidated;
    };
    let mut support = 0u32;
    let mut oppose = 0u32;
    for pair in evidence {
        let (Some(from), Some(to)) = (pair.param_before.as_f64(), pair.param_after.as_f64())
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
        if moved != pred.direction {
            continue;
        }
        let improved = metric_direction.improvement(pair.metric_before, pair.metric_after) > 0.0;
        let claims_improvement = matches!(pred.effect, Effect::Improves);
        if improved == claims_improvement {
            support += 1;
        } else {
            oppose += 1;
        }
    }
    if support == 0 && oppose == 0 {
        return VoteCheck::NoEvidence;
    }
    let accepted = match vote {
        VoteDirection::Up => support > oppose,
        VoteDirection::Down => oppose > support,
    };
    if accepted {
        VoteCheck::Accepted
    } else {
        VoteCheck::Rejected
    }
}

/// An insight candidate as drafted by the model, before it is admitted
/// into memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightDraft {
    pub text: String,
    #[serde(default)]
    pub prediction: Option<Prediction>,
    #[serde(default = "default_draft_confidence")]
    pub initial_confidence: f64,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub source_nodes: Vec<String>,
}

fn default_draft_confidence() -> f64 {
    0.5
}

/// Ask the model for insight drafts from this round's experiences. A
/// malformed response yields an empty list; only gateway-level errors
/// (budget, transport) propagate.
pub fn generate_insights(
    gateway: &Gateway,
    payload: &InsightsPayload,
) -> Result<Vec<InsightDraft>, LlmError> {
    let request = LlmRequest::new(
        RequestKind::GenerateInsights,
        prompts::insights_prompt(payload),
    );
    let response = gateway.complete(&request)?;
    Ok(parse_response::<Vec<InsightDraft>>(&response.text).unwrap_or_default())
}

/// Scores how related an insight is to a context string.
pub trait SimilarityScorer: Send + Sync {
    fn score(&self, context: &str, insight: &Insight) -> f64;
}

/// Word-set Jaccard similarity over the insight's text and tags.
pub struct JaccardScorer;

fn tokens(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

impl SimilarityScorer for JaccardScorer {
    fn score(&self, context: &str, insight: &Insight) -> f64 {
        let a = tokens(context);
        let mut b = tokens(&insight.text);
        for tag in &insight.tags {
            b.extend(tokens(tag));
        }
        let intersection = a.intersection(&b).count();
        let union = a.union(&b).count();
        if union == 0 {
            0.0
        } else {
            intersection as f64 / union as f64
        }
    }
}

/// How similarity and confidence combine into a retrieval score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalWeighting {
    /// similarity x confidence (the default).
    ConfidenceProduct,
    SimilarityOnly,
}

/// Serialized form of one memory tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryDocument {
    pub next_id: u64,
    pub insights: Vec<Insight>,
}

#[derive(Debug, Error)]
pub enum MemoryIoError {
    #[error("could not read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("could not write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} is not a memory document: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

/// The layered insight store.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    stm: Vec<Insight>,
    ltm: Vec<Insight>,
    vote_log: Vec<VoteRecord>,
    next_id: u64,
}

enum MatchKey<'a> {
    Pred(&'a Prediction),
    Text(&'a str),
}

fn match_key<'a>(prediction: &'a Option<Prediction>, text: &'a str) -> MatchKey<'a> {
    match prediction {
        Some(p) => MatchKey::Pred(p),
        None => MatchKey::Text(text),
    }
}

fn same_claim(a: &Insight, prediction: &Option<Prediction>, text: &str) -> bool {
    match (match_key(&a.prediction, &a.text), match_key(prediction, text)) {
        (MatchKey::Pred(x), MatchKey::Pred(y)) => x == y,
        (MatchKey::Text(x), MatchKey::Text(y)) => x == y,
        _ => false,
    }
}

impl MemoryStore {
    pub fn new() -> Self {
        MemoryStore {
            stm: Vec::new(),
            ltm: Vec::new(),
            vote_log: Vec::new(),
            next_id: 1,
        }
    }

    /// Rebuild a store from persisted tiers; either may be absent.
    pub fn from_documents(stm: Option<MemoryDocument>, ltm: Option<MemoryDocument>) -> Self {
        let mut store = MemoryStore::new();
        if let Some(doc) = ltm {
            store.next_id = store.next_id.max(doc.next_id);
            store.ltm = doc.insights;
        }
        if let Some(doc) = stm {
            store.next_id = store.next_id.max(doc.next_id);
            store.stm = doc.insights;
        }
        store
    }

    pub fn stm(&self) -> &[Insight] {
        &self.stm
    }

    pub fn ltm(&self) -> &[Insight] {
        &self.ltm
    }

    pub fn vote_log(&self) -> &[VoteRecord] {
        &self.vote_log
    }

    pub fn restore_vote_log(&mut self, records: Vec<VoteRecord>) {
        self.vote_log = records;
    }

    pub fn insight(&self, id: &str) -> Option<&Insight> {
        self.stm
            .iter()
            .chain(self.ltm.iter())
            .find(|i| i.id == id)
    }

    pub fn all(&self) -> impl Iterator<Item = &Insight> {
        self.stm.iter().chain(self.ltm.iter())
    }

    pub fn len(&self) -> usize {
        self.stm.len() + self.ltm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stm.is_empty() && self.ltm.is_empty()
    }

    fn mint_id(&mut self) -> String {
        let id = format!("i{:04}", self.next_id);
        self.next_id += 1;
        id
    }

    /// Admit drafts into short-term memory: clamp confidence into
    /// [0.1, 0.9], drop drafts that duplicate a long-term insight,
    /// merge duplicates (same prediction, or same text when there is
    /// none) into the existing entry keeping the higher confidence.
    /// Returns the ids of newly created insights.
    pub fn absorb(&mut self, drafts: Vec<InsightDraft>, fallback_sources: &[String]) -> Vec<String> {
        let mut created = Vec::new();
        for draft in drafts {
            if draft.text.trim().is_empty() {
                continue;
            }
            let confidence = draft.initial_confidence.clamp(0.1, 0.9);
            let sources: Vec<String> = if draft.source_nodes.is_empty() {
                fallback_sources.to_vec()
            } else {
                draft.source_nodes.clone()
            };
            if sources.is_empty() {
                continue;
            }
            if self
                .ltm
                .iter()
                .any(|i| same_claim(i, &draft.prediction, &draft.text))
            {
                continue;
            }
            if let Some(existing) = self
                .stm
                .iter_mut()
                .find(|i| same_claim(i, &draft.prediction, &draft.text))
            {
                existing.confidence = existing.confidence.max(confidence);
                for s in sources {
                    if !existing.source_nodes.contains(&s) {
                        existing.source_nodes.push(s);
                    }
                }
                existing.tags.extend(draft.tags.iter().cloned());
                continue;
            }
            let id = self.mint_id();
            created.push(id.clone());
            self.stm.push(Insight {
                id,
                text: draft.text,
                prediction: draft.prediction,
                confidence,
                tier: Tier::Stm,
                upvotes: 0,
                downvotes: 0,
                source_nodes: sources,
                tags: draft.tags.into_iter().collect(),
            });
        }
        created
    }

    /// Apply an accepted vote: update confidence and counters, then
    /// promote, demote, or discard per the tier rules. Returns None
    /// for unknown ids.
    pub fn vote(
        &mut self,
        insight_id: &str,
        vote: VoteDirection,
        node_ids: Vec<String>,
        validated: bool,
    ) -> Option<VoteOutcome> {
        let (tier, idx) = self.locate(insight_id)?;
        let list = match tier {
            Tier::Stm => &mut self.stm,
            Tier::Ltm => &mut self.ltm,
        };
        let insight = &mut list[idx];
        insight.confidence = apply_vote(insight.confidence, vote);
        match vote {
            VoteDirection::Up => insight.upvotes += 1,
            VoteDirection::Down => insight.downvotes += 1,
        }
        let confidence = insight.confidence;
        let transition = match tier {
            Tier::Stm if confidence < DISCARD_CONFIDENCE => {
                self.stm.remove(idx);
                Some(Transition::Discarded)
            }
            Tier::Stm
                if confidence >= PROMOTE_CONFIDENCE && insight.upvotes >= PROMOTE_UPVOTES =>
            {
                let mut insight = self.stm.remove(idx);
                insight.tier = Tier::Ltm;
                self.ltm.push(insight);
                Some(Transition::Promoted)
            }
            Tier::Ltm if confidence < DEMOTE_CONFIDENCE => {
                let mut insight = self.ltm.remove(idx);
                insight.tier = Tier::Stm;
                self.stm.push(insight);
                Some(Transition::Demoted)
            }
            _ => None,
        };
        self.vote_log.push(VoteRecord {
            insight_id: insight_id.to_string(),
            vote,
            node_ids,
            accepted: true,
            validated,
        });
        Some(VoteOutcome {
            confidence,
            transition,
        })
    }

    /// Record a vote that failed validation; nothing is applied.
    pub fn reject_vote(&mut self, insight_id: &str, vote: VoteDirection, node_ids: Vec<String>) {
        self.vote_log.push(VoteRecord {
            insight_id: insight_id.to_string(),
            vote,
            node_ids,
            accepted: false,
            validated: true,
        });
    }

    fn locate(&self, insight_id: &str) -> Option<(Tier, usize)> {
        if let Some(idx) = self.stm.iter().position(|i| i.id == insight_id) {
            return Some((Tier::Stm, idx));
        }
        self.ltm
            .iter()
            .position(|i| i.id == insight_id)
            .map(|idx| (Tier::Ltm, idx))
    }

    /// Top-k insights for a context, scored by the default Jaccard
    /// similarity weighted by confidence; ties break on id.
    pub fn retrieve(&self, context: &str, k: usize) -> Vec<Insight> {
        self.retrieve_with(context, k, &JaccardScorer, RetrievalWeighting::ConfidenceProduct)
    }

    pub fn retrieve_with(
        &self,
        context: &str,
        k: usize,
        scorer: &dyn SimilarityScorer,
        weighting: RetrievalWeighting,
    ) -> Vec<Insight> {
        let mut scored: Vec<(f64, &Insight)> = self
            .all()
            .map(|insight| {
                let mut score = scorer.score(context, insight);
                if weighting == RetrievalWeighting::ConfidenceProduct {
                    score *= insight.confidence;
                }
                (score, insight)
            })
            .collect();
        scored.sort_by(|(sa, ia), (sb, ib)| {
            sb.partial_cmp(sa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| ia.id.cmp(&ib.id))
        });
        scored.into_iter().take(k).map(|(_, i)| i.clone()).collect()
    }

    pub fn stm_document(&self) -> MemoryDocument {
        MemoryDocument {
            next_id: self.next_id,
            insights: self.stm.clone(),
        }
    }

    pub fn ltm_document(&self) -> MemoryDocument {
        MemoryDocument {
            next_id: self.next_id,
            insights: self.ltm.clone(),
        }
    }

    pub fn save_ltm(&self, path: &Path) -> Result<(), MemoryIoError> {
        save_document(&self.ltm_document(), path)
    }
}

pub fn save_document(doc: &MemoryDocument, path: &Path) -> Result<(), MemoryIoError> {
    let body = serde_json::to_string_pretty(doc).expect("insights are plain data");
    std::fs::write(path, body).map_err(|e| MemoryIoError::Write {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_document(path: &Path) -> Result<MemoryDocument, MemoryIoError> {
    let text = std::fs::read_to_string(path).map_err(|e| MemoryIoError::Read {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| MemoryIoError::Parse {
        path: path.display().to_string(),
        source: e,
    })
}
