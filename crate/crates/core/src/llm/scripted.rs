//! Transcript-replay backend. Entries are keyed by (kind, sequence
//! number) rather than by prompt content, so replays survive prompt
//! wording changes and resumed sessions can fast-forward.

use super::{LlmBackend, LlmError, LlmRequest, LlmResponse, RequestKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

/// One recorded completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub kind: RequestKind,
    pub text: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

pub struct ScriptedBackend {
    /// Recorded texts and token counts, grouped per request kind in
    /// their original order.
    by_kind: BTreeMap<RequestKind, Vec<TranscriptEntry>>,
    cursors: Mutex<BTreeMap<RequestKind, usize>>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<TranscriptEntry>) -> Self {
        let mut by_kind: BTreeMap<RequestKind, Vec<TranscriptEntry>> = BTreeMap::new();
        for entry in entries {
            by_kind.entry(entry.kind).or_default().push(entry);
        }
        ScriptedBackend {
            by_kind,
            cursors: Mutex::new(BTreeMap::new()),
        }
    }

    /// Load a transcript file: a JSON array of entries.
    pub fn from_path(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Transport(format!("read transcript {}: {e}", path.display())))?;
        let entries: Vec<TranscriptEntry> = serde_json::from_str(&text)
            .map_err(|e| LlmError::MalformedResponse(format!("parse transcript: {e}")))?;
        Ok(Self::new(entries))
    }

    /// Fast-forward the per-kind cursors past already-consumed entries,
    /// used when resuming a session that recorded `counts` completions.
    pub fn skip(&self, counts: &BTreeMap<RequestKind, usize>) {
        let mut cursors = self.cursors.lock().unwrap();
        for (kind, n) in counts {
            *cursors.entry(*kind).or_insert(0) += n;
        }
    }
}

impl LlmBackend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let mut cursors = self.cursors.lock().unwrap();
        let cursor = cursors.entry(request.kind).or_insert(0);
        let entry = self
            .by_kind
            .get(&request.kind)
            .and_then(|entries| entries.get(*cursor))
            .ok_or(LlmError::TranscriptExhausted { kind: request.kind })?;
        *cursor += 1;
        Ok(LlmResponse {
            text: entry.text.clone(),
            tokens_in: entry.tokens_in,
            tokens_out: entry.tokens_out,
            backend_id: "scripted".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(kind: RequestKind, text: &str) -> TranscriptEntry {
        TranscriptEntry {
            kind,
            text: text.into(),
            tokens_in: 10,
            tokens_out: 5,
        }
    }

    fn request(kind: RequestKind) -> LlmRequest {
        LlmRequest::new(kind, "prompt")
    }

    #[test]
    fn replays_in_per_kind_order() {
        let backend = ScriptedBackend::new(vec![
            entry(RequestKind::ProposeChildren, "first"),
            entry(RequestKind::GenerateInsights, "other"),
            entry(RequestKind::ProposeChildren, "second"),
        ]);
        let r1 = backend.complete(&request(RequestKind::ProposeChildren)).unwrap();
        let r2 = backend.complete(&request(RequestKind::GenerateInsights)).unwrap();
        let r3 = backend.complete(&request(RequestKind::ProposeChildren)).unwrap();
        assert_eq!(r1.text, "first");
        assert_eq!(r2.text, "other");
        assert_eq!(r3.text, "second");
        assert_eq!(r1.tokens_in, 10);
        assert_eq!(r1.tokens_out, 5);
    }

    #[test]
    fn exhaustion_is_an_error() {
        let backend = ScriptedBackend::new(vec![entry(RequestKind::SelectNode, "n1")]);
        backend.complete(&request(RequestKind::SelectNode)).unwrap();
        let err = backend.complete(&request(RequestKind::SelectNode)).unwrap_err();
        assert!(matches!(
            err,
            LlmError::TranscriptExhausted {
                kind: RequestKind::SelectNode
            }
        ));
    }

    #[test]
    fn skip_fast_forwards_cursors() {
        let backend = ScriptedBackend::new(vec![
            entry(RequestKind::VoteInsights, "a"),
            entry(RequestKind::VoteInsights, "b"),
            entry(RequestKind::VoteInsights, "c"),
        ]);
        backend.skip(&[(RequestKind::VoteInsights, 2)].into());
        let r = backend.complete(&request(RequestKind::VoteInsights)).unwrap();
        assert_eq!(r.text, "c");
    }

    #[test]
    fn transcript_json_round_trips() {
        let entries = vec![
            entry(RequestKind::ProposeChildren, "alpha"),
            entry(RequestKind::FilterConstraints, "beta"),
        ];
        let json = serde_json::to_string(&entries).unwrap();
        assert!(json.contains("\"propose_children\""));
        let back: Vec<TranscriptEntry> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, entries);
    }
}
