//! End-to-end acceptance checks. Each test covers one headline
//! guarantee of the framework and prints a PASS line when it holds;
//! tolerances are pinned in the assertions.

use agenttune::extract::{build_digest, extract_digest};
use agenttune::llm::payload::{ChangeDirection, Effect, EvidenceLine, Prediction};
use agenttune::llm::{
    Agent, Gateway, RequestKind, ScriptedBackend, TokenLedger, TranscriptEntry,
};
use agenttune::memory::{
    save_document, validate_vote, Insight, InsightDraft, MemoryDocument, MemoryStore, Tier,
    Transition, VoteCheck, VoteDirection,
};
use agenttune::sandbox::{RawBenchmarkOutput, RunStatus};
use agenttune::search::{converged, NodeStatus, SearchTree, StopReason};
use agenttune::session::persist;
use agenttune::session::{compute_metrics, BackendChoice};
use agenttune::target::{
    simkv_evaluate, simkv_manifest, Direction, ResourceSpec, ScalarValue,
    WorkloadSpec,
};
use agenttune::{run_session, resume_session, SessionConfig, SessionReport};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::process::Command;
use std::time::Instant;

fn workload() -> WorkloadSpec {
    WorkloadSpec {
        name: "fillrandom".into(),
        write_fraction: 1.0,
        op_count: 100_000,
        extra: BTreeMap::new(),
    }
}

fn resources() -> ResourceSpec {
    ResourceSpec {
        cpu_cores: 2,
        memory_mb: 1024,
        time_limit_s: 30,
    }
}

fn session_config() -> SessionConfig {
    SessionConfig {
        target: "simkv".into(),
        workload: workload(),
        resources: resources(),
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

fn raw_with_stdout(stdout: String) -> RawBenchmarkOutput {
    RawBenchmarkOutput {
        stdout,
        log_files: BTreeMap::new(),
        monitor_samples: vec![],
        exit_status: RunStatus::Ok,
    }
}

fn value_digest(node_id: &str, value: f64) -> agenttune::extract::PerformanceDigest {
    let mut values = BTreeMap::new();
    values.insert("throughput_kops".to_string(), value);
    build_digest(
        node_id,
        "throughput_kops",
        &values,
        &BTreeMap::new(),
        vec![],
        &raw_with_stdout(format!("throughput_kops={value}\n")),
    )
}

#[test]
fn a1_metric_arithmetic_consistency() {
    let started = Instant::now();
    let mut tree = SearchTree::new(
        simkv_manifest().schema.default_configuration(),
        workload(),
        resources(),
        "throughput_kops",
        Direction::Maximize,
    );
    let root = tree.root_id.clone();
    tree.mark_benchmarked(&root, value_digest(&root, 1.0)).unwrap();
    tree.record_iteration_best(0);

    let mut mid = simkv_manifest().schema.default_configuration();
    mid.set("write_buffer_mb", ScalarValue::Int(128));
    let mid_id = tree.add_child(&root, mid, 1).unwrap();
    tree.mark_benchmarked(&mid_id, value_digest(&mid_id, 5.0)).unwrap();
    tree.record_iteration_best(1);

    let mut top = simkv_manifest().schema.default_configuration();
    top.set("write_buffer_mb", ScalarValue::Int(512));
    let top_id = tree.add_child(&mid_id, top, 2).unwrap();
    tree.mark_benchmarked(&top_id, value_digest(&top_id, 6.75)).unwrap();
    tree.record_iteration_best(2);

    let mut ledger = TokenLedger::default();
    ledger.record(1, Agent::Searcher, 26_000);
    ledger.record(2, Agent::Searcher, 30_000);

    let metrics = compute_metrics(&tree, &ledger, 0, 1.0).unwrap();
    assert_eq!(metrics.mpg, 5.75, "mpg must be exact");
    assert_eq!(metrics.tc95, 56_000);
    assert!(
        (metrics.te - 0.1027).abs() <= 0.003,
        "te {} outside 0.1027 +/- 0.003",
        metrics.te
    );
    assert!(started.elapsed().as_secs_f64() < 1.0);
    println!("PASS  metric quadruple: mpg 5.75 exact, te {:.4} within 0.1027 +/- 0.003", metrics.te);
}

#[test]
fn a2_simulated_convergence_within_twelve_benchmarks() {
    let started = Instant::now();

    // independent oracle: exhaustive power-of-two grid under the cap
    let cap_mb = 0.8 * 1024.0;
    let mut grid_best = f64::NEG_INFINITY;
    for wb_exp in 3..=10u32 {
        for bc_exp in 3..=10u32 {
            for bg in 1..=8i64 {
                for compression in ["none", "snappy", "zstd"] {
                    let wb = 1i64 << wb_exp;
                    let bc = 1i64 << bc_exp;
                    if (wb + bc) as f64 > cap_mb {
                        continue;
                    }
                    let mut config = simkv_manifest().schema.default_configuration();
                    config.set("write_buffer_mb", ScalarValue::Int(wb));
                    config.set("block_cache_mb", ScalarValue::Int(bc));
                    config.set("background_jobs", ScalarValue::Int(bg));
                    config.set("compression", ScalarValue::Text(compression.into()));
                    let metrics = simkv_evaluate(&config, &workload(), &resources()).unwrap();
                    grid_best = grid_best.max(metrics["throughput_kops"]);
                }
            }
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let report = run_session(&session_config(), dir.path()).unwrap();
    assert!(
        report.best_value >= 0.95 * grid_best,
        "best {} below 95% of grid optimum {}",
        report.best_value,
        grid_best
    );

    // walk benchmarked nodes in creation order; 95% of the optimum must
    // be reached by the twelfth
    let tree: SearchTree = persist::read_json(&dir.path().join(persist::TREE_FILE)).unwrap();
    let mut reached_at = None;
    let mut benchmarked = 0usize;
    for node in tree.nodes.values() {
        let Some(digest) = &node.digest else { continue };
        benchmarked += 1;
        if digest.value_of("throughput_kops").unwrap() >= 0.95 * grid_best {
            reached_at = Some(benchmarked);
            break;
        }
    }
    let reached_at = reached_at.expect("no benchmarked node reached 95% of the optimum");
    assert!(
        reached_at <= 12,
        "95% of the optimum first reached at benchmarked node {reached_at}"
    );
    assert_eq!(report.stop_reason, StopReason::Convergence);
    assert!(started.elapsed().as_secs_f64() < 60.0);
    println!(
        "PASS  simulated convergence: best {:.4} >= 95% of grid optimum {:.4}, reached at benchmarked node {} of 12",
        report.best_value, grid_best, reached_at
    );
}

#[test]
fn a3_convergence_rule_on_reference_series() {
    assert!(converged(&[100.0, 100.5, 100.9, 100.95], Direction::Maximize));
    assert!(!converged(&[100.0, 150.0, 290.0], Direction::Maximize));
    println!("PASS  termination: [100, 100.5, 100.9, 100.95] stops, [100, 150, 290] continues");
}

#[test]
fn a4_insight_confidence_lifecycle() {
    let mut memory = MemoryStore::new();
    let ids = memory.absorb(
        vec![InsightDraft {
            text: "increasing write_buffer_mb improves throughput_kops".into(),
            prediction: Some(Prediction {
                param: "write_buffer_mb".into(),
                direction: ChangeDirection::Increase,
                metric: "throughput_kops".into(),
                effect: Effect::Improves,
            }),
            initial_confidence: 0.5,
            tags: vec![],
            source_nodes: vec!["n0001".into()],
        }],
        &[],
    );
    let id = ids[0].clone();

    let expected = [0.6, 0.68, 0.744, 0.7952];
    for (i, want) in expected.iter().enumerate() {
        let outcome = memory
            .vote(&id, VoteDirection::Up, vec![format!("n{:04}", i + 2)], true)
            .unwrap();
        assert!(
            (outcome.confidence - want).abs() <= 1e-9,
            "vote {}: confidence {} != {}",
            i + 1,
            outcome.confidence,
            want
        );
        assert_eq!(outcome.transition, None, "no promotion before 0.8");
        assert_eq!(memory.insight(&id).unwrap().tier, Tier::Stm);
    }

    let fifth = memory
        .vote(&id, VoteDirection::Up, vec!["n0006".into()], true)
        .unwrap();
    assert_eq!(fifth.transition, Some(Transition::Promoted));
    let promoted = memory.insight(&id).unwrap();
    assert_eq!(promoted.tier, Tier::Ltm);
    assert!(promoted.confidence >= 0.8 && promoted.upvotes >= 3);

    // a downvote contradicted by the observed delta is rejected and
    // leaves confidence alone
    let before = promoted.confidence;
    let evidence = vec![EvidenceLine {
        before_node: "n0000".into(),
        after_node: "n0007".into(),
        param: "write_buffer_mb".into(),
        param_before: ScalarValue::Int(64),
        param_after: ScalarValue::Int(512),
        metric_before: 74.62,
        metric_after: 254.65,
    }];
    let check = validate_vote(
        memory.insight(&id).unwrap(),
        VoteDirection::Down,
        &evidence,
        Direction::Maximize,
    );
    assert_eq!(check, VoteCheck::Rejected);
    memory.reject_vote(&id, VoteDirection::Down, vec!["n0007".into()]);
    assert_eq!(memory.insight(&id).unwrap().confidence, before);
    let last = memory.vote_log().last().unwrap();
    assert!(!last.accepted);
    println!("PASS  insight lifecycle: 0.6 / 0.68 / 0.744 / 0.7952, promotion on the fifth upvote, contradicted downvote rejected");
}

fn test_tokens(text: &str) -> BTreeSet<String> {
    let mut tokens = BTreeSet::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_ascii_alphanumeric() {
            current.push(c.to_ascii_lowercase());
        } else if !current.is_empty() {
            tokens.insert(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.insert(current);
    }
    tokens
}

#[test]
fn a5_retrieval_matches_brute_force() {
    let subjects = [
        "write_buffer_mb", "block_cache_mb", "background_jobs", "compression",
        "memtable flush", "compaction pressure", "read amplification", "point lookups",
        "bloom filters", "wal sync", "level sizing", "range scans",
        "cache eviction", "write stalls", "space amplification", "key ordering",
        "snapshot reads", "batch commits", "prefix seek", "cold start",
    ];
    let mut memory = MemoryStore::new();
    let drafts = subjects
        .iter()
        .enumerate()
        .map(|(i, subject)| InsightDraft {
            text: format!(
                "{} {} affects throughput_kops under heavy write workloads",
                if i % 2 == 0 { "increasing" } else { "reducing" },
                subject
            ),
            prediction: None,
            initial_confidence: 0.15 + 0.035 * i as f64,
            tags: if i % 3 == 0 {
                vec!["fillrandom".to_string()]
            } else {
                vec![]
            },
            source_nodes: vec![format!("n{i:04}")],
        })
        .collect::<Vec<_>>();
    let ids = memory.absorb(drafts, &[]);
    assert_eq!(ids.len(), 20);

    let context = "maximize throughput_kops on simkv workload fillrandom with increasing write pressure";
    let context_tokens = test_tokens(context);
    let mut scored: Vec<(f64, String)> = memory
        .all()
        .map(|insight| {
            let mut insight_tokens = test_tokens(&insight.text);
            for tag in &insight.tags {
                insight_tokens.extend(test_tokens(tag));
            }
            let union = context_tokens.union(&insight_tokens).count();
            let inter = context_tokens.intersection(&insight_tokens).count();
            let jaccard = if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            };
            (jaccard * insight.confidence, insight.id.clone())
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));

    for k in [1usize, 8, 20] {
        let got: Vec<String> = memory
            .retrieve(context, k)
            .into_iter()
            .map(|i| i.id)
            .collect();
        let want: Vec<String> = scored.iter().take(k).map(|(_, id)| id.clone()).collect();
        assert_eq!(got, want, "retrieve({k}) diverged from brute force");
    }
    println!("PASS  retrieval: top-k equals brute-force (jaccard x confidence, id) for k in {{1, 8, 20}}");
}

#[test]
fn a6_extraction_fallback_and_anomaly_regeneration() {
    let manifest = simkv_manifest();

    // three malformed extraction specs force the fixed-parser fallback
    let mut config = manifest.schema.default_configuration();
    config.set("write_buffer_mb", ScalarValue::Int(512));
    config.set("background_jobs", ScalarValue::Int(4));
    config.set("block_cache_mb", ScalarValue::Int(256));
    let values = simkv_evaluate(&config, &workload(), &resources()).unwrap();
    let stdout = format!(
        "throughput_kops={}\np99_us={}\n",
        values["throughput_kops"], values["p99_us"]
    );
    let malformed = (0..3)
        .map(|_| TranscriptEntry {
            kind: RequestKind::SynthesizeExtraction,
            text: "these are not the rules you are looking for".into(),
            tokens_in: 40,
            tokens_out: 10,
        })
        .collect();
    let gateway = Gateway::new(Box::new(ScriptedBackend::new(malformed)), None);
    let digest = extract_digest(
        &gateway,
        manifest,
        &raw_with_stdout(stdout),
        "n0001",
        "throughput_kops",
    );
    assert_eq!(
        digest.value_of("throughput_kops"),
        Some(values["throughput_kops"]),
        "fallback digest must equal the closed-form value exactly"
    );
    assert_eq!(gateway.transcript().len(), 3, "three synthesis attempts");

    // an implausible value triggers exactly one regeneration, then the
    // anomaly is recorded
    let spec_text = r#"{"rules": [
        {"metric": "throughput_kops", "source": "stdout", "pattern": "throughput_kops=([-+0-9.eE]+)"},
        {"metric": "p99_us", "source": "stdout", "pattern": "p99_us=([-+0-9.eE]+)"}
    ]}"#;
    let entries = (0..2)
        .map(|_| TranscriptEntry {
            kind: RequestKind::SynthesizeExtraction,
            text: spec_text.to_string(),
            tokens_in: 40,
            tokens_out: 60,
        })
        .collect();
    let gateway = Gateway::new(Box::new(ScriptedBackend::new(entries)), None);
    let digest = extract_digest(
        &gateway,
        manifest,
        &raw_with_stdout("throughput_kops=1000000000\np99_us=0.2\n".into()),
        "n0002",
        "throughput_kops",
    );
    assert_eq!(
        gateway.transcript().len(),
        2,
        "exactly one regeneration after the implausible value"
    );
    assert_eq!(digest.value_of("throughput_kops"), Some(1.0e9));
    assert!(
        !digest.anomalies.is_empty(),
        "implausible throughput must be recorded as an anomaly"
    );
    println!("PASS  extraction: triple-malformed falls back to fixed parsers exactly; 1e9 throughput regenerated once then flagged");
}

#[test]
fn a7_validation_gate_rejects_crafted_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let candidates = r#"[
        {"wal_mb": 1},
        {"write_buffer_mb": 4096},
        {"compression": "zstd"},
        {"write_buffer_mb": 564, "block_cache_mb": 256}
    ]"#;
    let transcript = vec![TranscriptEntry {
        kind: RequestKind::ProposeChildren,
        text: candidates.to_string(),
        tokens_in: 100,
        tokens_out: 50,
    }];
    let transcript_path = dir.path().join("canned.json");
    fs::write(
        &transcript_path,
        serde_json::to_string_pretty(&transcript).unwrap(),
    )
    .unwrap();

    let mut config = session_config();
    config.backend = BackendChoice::Scripted;
    config.transcript_path = Some(transcript_path);
    config.branching = 4;
    config.blacklist = BTreeSet::from(["compression".to_string()]);

    let session_dir = dir.path().join("session");
    let report = run_session(&config, &session_dir).unwrap();

    // none of the four candidates reached the executor
    let node_dirs: Vec<_> = fs::read_dir(session_dir.join(persist::NODES_DIR))
        .unwrap()
        .collect();
    assert_eq!(node_dirs.len(), 1, "only the baseline node was executed");

    let tree: SearchTree = persist::read_json(&session_dir.join(persist::TREE_FILE)).unwrap();
    let rejected = tree
        .nodes
        .values()
        .filter(|n| n.status == NodeStatus::Rejected)
        .count();
    assert_eq!(rejected, 4, "unknown key, out-of-range, blacklisted, cap breach");

    let ledger: TokenLedger = persist::read_json(&session_dir.join(persist::LEDGER_FILE)).unwrap();
    assert_eq!(ledger.total, 150);
    assert_eq!(report.twer, 4.0 / (150.0 / 1000.0), "all four count against the ledger");
    println!("PASS  validation gate: 4 crafted candidates rejected pre-execution, twer {:.4}", report.twer);
}

fn first_reach_iteration(report: &SessionReport) -> u32 {
    let final_best = report.per_iteration.last().unwrap().best_so_far;
    report
        .per_iteration
        .iter()
        .find(|row| row.best_so_far >= 0.95 * final_best)
        .unwrap()
        .iteration
}

#[test]
fn a8_preseeded_memory_converges_in_fewer_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let ltm_path = dir.path().join("ltm.json");
    let insights = vec![
        Insight {
            id: "i0001".into(),
            text: "increasing write_buffer_mb improves throughput_kops".into(),
            prediction: Some(Prediction {
                param: "write_buffer_mb".into(),
                direction: ChangeDirection::Increase,
                metric: "throughput_kops".into(),
                effect: Effect::Improves,
            }),
            confidence: 0.85,
            tier: Tier::Ltm,
            upvotes: 3,
            downvotes: 0,
            source_nodes: vec!["seed".into()],
            tags: BTreeSet::from(["fillrandom".to_string(), "simkv".to_string()]),
        },
        Insight {
            id: "i0002".into(),
            text: "increasing background_jobs improves throughput_kops".into(),
            prediction: Some(Prediction {
                param: "background_jobs".into(),
                direction: ChangeDirection::Increase,
                metric: "throughput_kops".into(),
                effect: Effect::Improves,
            }),
            confidence: 0.85,
            tier: Tier::Ltm,
            upvotes: 3,
            downvotes: 0,
            source_nodes: vec!["seed".into()],
            tags: BTreeSet::from(["fillrandom".to_string(), "simkv".to_string()]),
        },
    ];
    save_document(
        &MemoryDocument {
            next_id: 3,
            insights,
        },
        &ltm_path,
    )
    .unwrap();

    let mut preseeded = session_config();
    preseeded.max_iterations = Some(3);
    preseeded.ltm_path = Some(ltm_path);
    let preseeded_report = run_session(&preseeded, &dir.path().join("preseeded")).unwrap();

    let mut empty = session_config();
    empty.max_iterations = Some(3);
    let empty_report = run_session(&empty, &dir.path().join("empty")).unwrap();

    let pre_reach = first_reach_iteration(&preseeded_report);
    let empty_reach = first_reach_iteration(&empty_report);
    assert!(
        pre_reach < empty_reach,
        "preseeded reached 95% of its final best at iteration {pre_reach}, empty at {empty_reach}"
    );
    println!(
        "PASS  preseeded memory: 95% of final best at iteration {} vs {} from empty memory",
        pre_reach, empty_reach
    );
}

#[test]
fn a9_interrupt_resume_and_replay_verify() {
    let config = session_config();

    let full_dir = tempfile::tempdir().unwrap();
    run_session(&config, full_dir.path()).unwrap();
    let full_report = fs::read(full_dir.path().join(persist::REPORT_FILE)).unwrap();

    let split_dir = tempfile::tempdir().unwrap();
    let mut interrupted = config.clone();
    interrupted.max_iterations = Some(2);
    run_session(&interrupted, split_dir.path()).unwrap();
    resume_session(&config, split_dir.path()).unwrap();
    let resumed_report = fs::read(split_dir.path().join(persist::REPORT_FILE)).unwrap();
    assert_eq!(full_report, resumed_report, "resume must reproduce the run byte for byte");

    for dir in [full_dir.path(), split_dir.path()] {
        let status = Command::new(env!("CARGO_BIN_EXE_agenttune"))
            .args(["replay", dir.to_str().unwrap(), "--verify"])
            .output()
            .expect("replay invocation");
        assert!(
            status.status.success(),
            "replay --verify failed on {}: {}",
            dir.display(),
            String::from_utf8_lossy(&status.stdout)
        );
    }
    println!("PASS  resume is byte-identical and replay --verify exits 0");
}
