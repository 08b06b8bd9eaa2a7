//! The four standardized session metrics: max performance gain,
//! token cost to 95% of peak, token efficiency, and token-weighted
//! error rate.

use crate::llm::TokenLedger;
use crate::search::SearchTree;
use crate::target::Direction;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Relative gain of the best value over the baseline.
    pub mpg: f64,
    /// Cumulative tokens through the first iteration whose best-so-far
    /// is within 5% of the final best.
    pub tc95: u64,
    /// Gain per 1,000 tokens of tc95; 0 when tc95 is 0.
    pub te: f64,
    /// Rejected-or-failed nodes per 1,000 total tokens; 0 when no
    /// tokens were spent.
    pub twer: f64,
}

#[derive(Debug, Error, PartialEq)]
#[error("baseline value {0} is not positive, relative gain is undefined")]
pub struct DegenerateBaseline(pub f64);

/// Compute the report metrics from the finished tree and ledger. For
/// minimize-direction targets the gain uses the reciprocal ratio and
/// "within 5% of peak" becomes best ≤ final/0.95.
pub fn compute_metrics(
    tree: &SearchTree,
    ledger: &TokenLedger,
    error_count: u64,
    baseline: f64,
) -> Result<Metrics, DegenerateBaseline> {
    if baseline <= 0.0 {
        return Err(DegenerateBaseline(baseline));
    }
    let direction = tree.direction;
    let final_best = tree
        .best_per_iteration
        .last()
        .map(|(_, v)| *v)
        .unwrap_or(baseline);
    let mpg = direction.improvement(baseline, final_best);

    let reached = |value: f64| match direction {
        Direction::Maximize => value >= 0.95 * final_best,
        Direction::Minimize => value <= final_best / 0.95,
    };
    let tc95 = tree
        .best_per_iteration
        .iter()
        .find(|(_, v)| reached(*v))
        .map(|(iteration, _)| ledger.cumulative_through(*iteration))
        .unwrap_or(ledger.total);

    let te = if tc95 > 0 {
        mpg / (tc95 as f64 / 1000.0)
    } else {
        0.0
    };
    let twer = if ledger.total > 0 {
        error_count as f64 / (ledger.total as f64 / 1000.0)
    } else {
        0.0
    };
    Ok(Metrics {
        mpg,
        tc95,
        te,
        twer,
    })
}
