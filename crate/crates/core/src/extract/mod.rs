//! The Extractor agent: turns raw benchmark output into a structured
//! performance digest. It asks the model for a declarative extraction
//! spec, checks and applies it mechanically, feeds failures back for up
//! to three attempts plus one anomaly-triggered regeneration, and falls
//! back to the adapter's fixed parsers when synthesis cannot be trusted.

use crate::llm::payload::{parse_response, SynthesizePayload, WantedMetric};
use crate::llm::{Gateway, LlmRequest, RequestKind};
use crate::prompts;
use crate::sandbox::{RawBenchmarkOutput, RunStatus};
use crate::target::AdapterManifest;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Where a rule reads its text from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleSource {
    Stdout,
    /// A log file whose name matches the given pattern.
    Log(String),
}

impl fmt::Display for RuleSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleSource::Stdout => f.write_str("stdout"),
            RuleSource::Log(p) => write!(f, "log:{p}"),
        }
    }
}

impl Serialize for RuleSource {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for RuleSource {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s == "stdout" {
            Ok(RuleSource::Stdout)
        } else if let Some(pattern) = s.strip_prefix("log:") {
            Ok(RuleSource::Log(pattern.to_string()))
        } else {
            Err(D::Error::custom(format!(
                "source must be \"stdout\" or \"log:<pattern>\", got {s:?}"
            )))
        }
    }
}

fn default_scale() -> f64 {
    1.0
}

/// One declarative extraction rule: a regex with exactly one capture
/// group that yields the metric's numeric value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRule {
    pub metric: String,
    pub source: RuleSource,
    pub pattern: String,
    #[serde(default)]
    pub unit: Option<String>,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSpec {
    pub rules: Vec<ExtractionRule>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("spec has no rules")]
    Empty,
    #[error("metric {0} appears in more than one rule")]
    DuplicateMetric(String),
    #[error("rule for {metric}: pattern does not compile: {reason}")]
    BadPattern { metric: String, reason: String },
    #[error("rule for {metric}: pattern must have exactly one capture group")]
    WrongCaptureCount { metric: String },
    #[error("no rule covers wanted metric {0}")]
    MissingMetric(String),
    #[error("rule for {metric}: non-finite scale")]
    BadScale { metric: String },
}

impl ExtractionSpec {
    /// Validate the spec mechanically against the set of wanted metrics.
    pub fn check(&self, wanted: &[String]) -> Result<(), SpecError> {
        if self.rules.is_empty() {
            return Err(SpecError::Empty);
        }
        let mut seen = std::collections::BTreeSet::new();
        for rule in &self.rules {
            if !seen.insert(rule.metric.clone()) {
                return Err(SpecError::DuplicateMetric(rule.metric.clone()));
            }
            let re = regex::Regex::new(&rule.pattern).map_err(|e| SpecError::BadPattern {
                metric: rule.metric.clone(),
                reason: e.to_string(),
            })?;
            if re.captures_len() != 2 {
                return Err(SpecError::WrongCaptureCount {
                    metric: rule.metric.clone(),
                });
            }
            if !rule.scale.is_finite() {
                return Err(SpecError::BadScale {
                    metric: rule.metric.clone(),
                });
            }
        }
        for name in wanted {
            if !seen.contains(name) {
                return Err(SpecError::MissingMetric(name.clone()));
            }
        }
        Ok(())
    }
}

/// A rule that did not produce a value.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtractionIssue {
    /// The pattern matched nothing in its source.
    Gap { metric: String },
    /// The capture matched but was not a number.
    ParseFailure { metric: String, captured: String },
}

impl fmt::Display for ExtractionIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtractionIssue::Gap { metric } => {
                write!(f, "metric {metric}: no match in its source")
            }
            ExtractionIssue::ParseFailure { metric, captured } => {
                write!(f, "metric {metric}: captured {captured:?} is not a number")
            }
        }
    }
}

/// Apply a checked spec to raw output. The first match of each pattern
/// wins; every rule either yields a value or an issue.
pub fn apply_spec(
    spec: &ExtractionSpec,
    raw: &RawBenchmarkOutput,
) -> (BTreeMap<String, f64>, Vec<ExtractionIssue>) {
    let mut values = BTreeMap::new();
    let mut issues = Vec::new();
    for rule in &spec.rules {
        let Ok(re) = regex::Regex::new(&rule.pattern) else {
            issues.push(ExtractionIssue::Gap {
                metric: rule.metric.clone(),
            });
            continue;
        };
        let text: Option<&str> = match &rule.source {
            RuleSource::Stdout => Some(raw.stdout.as_str()),
            RuleSource::Log(pattern) => {
                let name_re = regex::Regex::new(pattern).ok();
                raw.log_files
                    .iter()
                    .find(|(name, _)| match &name_re {
                        Some(re) => re.is_match(name),
                        None => name.contains(pattern.as_str()),
                    })
                    .map(|(_, body)| body.as_str())
            }
        };
        let captured = text.and_then(|t| re.captures(t));
        match captured {
            None => issues.push(ExtractionIssue::Gap {
                metric: rule.metric.clone(),
            }),
            Some(caps) => {
                let text = caps.get(1).map(|m| m.as_str()).unwrap_or_default();
                match text.parse::<f64>() {
                    Ok(v) => {
                        values.insert(rule.metric.clone(), v * rule.scale);
                    }
                    Err(_) => issues.push(ExtractionIssue::ParseFailure {
                        metric: rule.metric.clone(),
                        captured: text.to_string(),
                    }),
                }
            }
        }
    }
    (values, issues)
}

/// Flag non-finite values and values outside the manifest's plausible
/// ranges. Returns human-readable anomaly notes in metric order.
pub fn check_values(
    values: &BTreeMap<String, f64>,
    plausibility: &BTreeMap<String, crate::target::PlausibleRange>,
) -> Vec<String> {
    let mut anomalies = Vec::new();
    for (metric, value) in values {
        if !value.is_finite() {
            anomalies.push(format!("metric {metric}: value {value} is not finite"));
            continue;
        }
        if let Some(range) = plausibility.get(metric) {
            if !range.contains(*value) {
                anomalies.push(format!(
                    "metric {metric}: value {value} outside plausible range [{}, {}]",
                    range.min, range.max
                ));
            }
        }
    }
    anomalies
}

/// One extracted metric with its unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    #[serde(default)]
    pub unit: Option<String>,
}

/// The distilled outcome of one benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceDigest {
    pub metrics: BTreeMap<String, MetricValue>,
    pub summary: String,
    pub anomalies: Vec<String>,
    pub source_node: String,
}

impl PerformanceDigest {
    pub fn value_of(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).map(|m| m.value)
    }
}

/// Assemble a digest from extracted values. Failed runs keep their
/// metric map empty; successful runs with monitor samples gain summary
/// resource-usage entries.
pub fn build_digest(
    node_id: &str,
    target_metric: &str,
    values: &BTreeMap<String, f64>,
    units: &BTreeMap<String, Option<String>>,
    anomalies: Vec<String>,
    raw: &RawBenchmarkOutput,
) -> PerformanceDigest {
    let mut metrics = BTreeMap::new();
    if raw.exit_status == RunStatus::Ok {
        for (name, value) in values {
            metrics.insert(
                name.clone(),
                MetricValue {
                    value: *value,
                    unit: units.get(name).cloned().flatten(),
                },
            );
        }
        if !raw.monitor_samples.is_empty() {
            let n = raw.monitor_samples.len() as f64;
            let cpu_sum: f64 = raw.monitor_samples.iter().map(|s| s.cpu_pct).sum();
            let cpu_max = raw
                .monitor_samples
                .iter()
                .map(|s| s.cpu_pct)
                .fold(f64::NEG_INFINITY, f64::max);
            let mem_max = raw
                .monitor_samples
                .iter()
                .map(|s| s.mem_mb)
                .fold(f64::NEG_INFINITY, f64::max);
            metrics.insert(
                "monitor_cpu_mean_pct".into(),
                MetricValue { value: cpu_sum / n, unit: Some("pct".into()) },
            );
            metrics.insert(
                "monitor_cpu_max_pct".into(),
                MetricValue { value: cpu_max, unit: Some("pct".into()) },
            );
            metrics.insert(
                "monitor_mem_max_mb".into(),
                MetricValue { value: mem_max, unit: Some("mb".into()) },
            );
        }
    }
    let target_text = if raw.exit_status == RunStatus::Ok {
        values
            .get(target_metric)
            .map(|v| v.to_string())
            .unwrap_or_else(|| "n/a".into())
    } else {
        "n/a".into()
    };
    let summary = format!(
        "{target_metric}={target_text}; exit={}; anomalies={}",
        raw.exit_status,
        anomalies.len()
    );
    PerformanceDigest {
        metrics,
        summary,
        anomalies,
        source_node: node_id.to_string(),
    }
}

/// Attempt budget for spec synthesis before falling back.
pub const MAX_SYNTH_ATTEMPTS: u32 = 3;

fn stdout_excerpt(raw: &RawBenchmarkOutput) -> Vec<String> {
    let mut samples = Vec::new();
    let head: String = raw.stdout.chars().take(1200).collect();
    samples.push(head);
    for (name, body) in raw.log_files.iter().take(2) {
        let head: String = body.chars().take(400).collect();
        samples.push(format!("[{name}]\n{head}"));
    }
    samples
}

fn fixed_parser_values(
    manifest: &AdapterManifest,
    raw: &RawBenchmarkOutput,
) -> BTreeMap<String, f64> {
    let mut values = BTreeMap::new();
    for (metric, parser) in &manifest.fixed_parsers {
        let Ok(re) = regex::Regex::new(&parser.pattern) else {
            continue;
        };
        if let Some(caps) = re.captures(&raw.stdout) {
            if let Some(m) = caps.get(1) {
                if let Ok(v) = m.as_str().parse::<f64>() {
                    values.insert(metric.clone(), v * parser.scale);
                }
            }
        }
    }
    values
}

/// Run the full extraction pipeline for one benchmark output: spec
/// synthesis with self-correction, then the fixed-parser fallback.
/// Budget exhaustion or transport failure also routes to the fallback,
/// so a digest always comes back.
pub fn extract_digest(
    gateway: &Gateway,
    manifest: &AdapterManifest,
    raw: &RawBenchmarkOutput,
    node_id: &str,
    target_metric: &str,
) -> PerformanceDigest {
    let units: BTreeMap<String, Option<String>> = manifest
        .metrics
        .iter()
        .map(|(name, spec)| {
            let unit = if spec.unit.is_empty() {
                None
            } else {
                Some(spec.unit.clone())
            };
            (name.clone(), unit)
        })
        .collect();

    if raw.exit_status != RunStatus::Ok {
        return build_digest(node_id, target_metric, &BTreeMap::new(), &units, Vec::new(), raw);
    }

    let wanted: Vec<WantedMetric> = manifest
        .metrics
        .iter()
        .map(|(name, spec)| WantedMetric {
            name: name.clone(),
            description: spec.description.clone(),
            unit: units.get(name).cloned().flatten(),
        })
        .collect();
    let wanted_names: Vec<String> = wanted.iter().map(|m| m.name.clone()).collect();

    let mut failures: Vec<String> = Vec::new();
    let mut failed_attempts = 0u32;
    let mut anomaly_regens = 0u32;

    let extracted = loop {
        if failed_attempts >= MAX_SYNTH_ATTEMPTS {
            break None;
        }
        let payload = SynthesizePayload {
            samples: stdout_excerpt(raw),
            wanted_metrics: wanted.clone(),
            system_info: manifest.name.clone(),
            failures: failures.clone(),
        };
        let request = LlmRequest::new(
            RequestKind::SynthesizeExtraction,
            prompts::synthesize_prompt(&payload),
        );
        let response = match gateway.complete(&request) {
            Ok(r) => r,
            // Out of tokens or out of retries: go straight to the
            // fixed parsers instead of failing the node.
            Err(_) => break None,
        };
        let spec = match parse_response::<ExtractionSpec>(&response.text)
            .map_err(|e| format!("response is not an extraction spec: {e}"))
            .and_then(|s| s.check(&wanted_names).map(|_| s).map_err(|e| e.to_string()))
        {
            Ok(spec) => spec,
            Err(reason) => {
                failed_attempts += 1;
                failures.push(format!("attempt {failed_attempts}: {reason}"));
                continue;
            }
        };
        let (values, issues) = apply_spec(&spec, raw);
        if !issues.is_empty() {
            failed_attempts += 1;
            let notes: Vec<String> = issues.iter().map(|i| i.to_string()).collect();
            failures.push(format!("attempt {failed_attempts}: {}", notes.join("; ")));
            continue;
        }
        let anomalies = check_values(&values, &manifest.plausibility);
        if !anomalies.is_empty() && anomaly_regens == 0 {
            anomaly_regens = 1;
            failures.push(format!("implausible values, regenerate: {}", anomalies.join("; ")));
            continue;
        }
        break Some((values, anomalies));
    };

    let (values, anomalies) = match extracted {
        Some(found) => found,
        None => {
            let values = fixed_parser_values(manifest, raw);
            let anomalies = check_values(&values, &manifest.plausibility);
            (values, anomalies)
        }
    };
    build_digest(node_id, target_metric, &values, &units, anomalies, raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{GreedyBackend, ScriptedBackend, TranscriptEntry};
    use crate::sandbox::MonitorSample;
    use crate::target::{simkv_evaluate, simkv_manifest, ResourceSpec, WorkloadSpec};

    fn raw_ok(stdout: &str) -> RawBenchmarkOutput {
        RawBenchmarkOutput {
            stdout: stdout.to_string(),
            log_files: BTreeMap::new(),
            monitor_samples: Vec::new(),
            exit_status: RunStatus::Ok,
        }
    }

    fn spec_of(rules: Vec<ExtractionRule>) -> ExtractionSpec {
        ExtractionSpec { rules }
    }

    fn rule(metric: &str, pattern: &str) -> ExtractionRule {
        ExtractionRule {
            metric: metric.into(),
            source: RuleSource::Stdout,
            pattern: pattern.into(),
            unit: None,
            scale: 1.0,
        }
    }

    #[test]
    fn rule_source_serde_round_trips() {
        let json = serde_json::to_string(&RuleSource::Log("server".into())).unwrap();
        assert_eq!(json, "\"log:server\"");
        let back: RuleSource = serde_json::from_str(&json).unwrap();
        assert_eq!(back, RuleSource::Log("server".into()));
        let stdout: RuleSource = serde_json::from_str("\"stdout\"").unwrap();
        assert_eq!(stdout, RuleSource::Stdout);
        assert!(serde_json::from_str::<RuleSource>("\"screen\"").is_err());
    }

    #[test]
    fn check_rejects_malformed_specs() {
        let wanted = vec!["tp".to_string()];
        assert_eq!(spec_of(vec![]).check(&wanted), Err(SpecError::Empty));
        assert!(matches!(
            spec_of(vec![rule("tp", "tp=[0-9]+")]).check(&wanted),
            Err(SpecError::WrongCaptureCount { .. })
        ));
        assert!(matches!(
            spec_of(vec![rule("tp", "tp=(([0-9])+)")]).check(&wanted),
            Err(SpecError::WrongCaptureCount { .. })
        ));
        assert!(matches!(
            spec_of(vec![rule("tp", "tp=([0-9]+")]).check(&wanted),
            Err(SpecError::BadPattern { .. })
        ));
        assert!(matches!(
            spec_of(vec![rule("tp", "tp=([0-9]+)"), rule("tp", "x=([0-9]+)")]).check(&wanted),
            Err(SpecError::DuplicateMetric(_))
        ));
        assert_eq!(
            spec_of(vec![rule("other", "o=([0-9]+)")]).check(&wanted),
            Err(SpecError::MissingMetric("tp".into()))
        );
        assert!(spec_of(vec![rule("tp", "tp=([0-9.]+)")]).check(&wanted).is_ok());
    }

    #[test]
    fn apply_takes_the_first_match_and_scales() {
        let spec = spec_of(vec![ExtractionRule {
            metric: "tp".into(),
            source: RuleSource::Stdout,
            pattern: "tp=([0-9.]+)".into(),
            unit: None,
            scale: 0.001,
        }]);
        let raw = raw_ok("tp=1500\nlater tp=9999\n");
        let (values, issues) = apply_spec(&spec, &raw);
        assert!(issues.is_empty());
        assert_eq!(values["tp"], 1.5);
    }

    #[test]
    fn apply_reports_gaps_and_parse_failures() {
        let spec = spec_of(vec![
            rule("present", "present=([0-9.]+)"),
            rule("absent", "absent=([0-9.]+)"),
            rule("garbled", "garbled=([a-z0-9.]+)"),
        ]);
        let raw = raw_ok("present=4.2\ngarbled=abc\n");
        let (values, issues) = apply_spec(&spec, &raw);
        assert_eq!(values.len(), 1);
        assert_eq!(issues.len(), 2);
        assert!(issues.iter().any(|i| matches!(i, ExtractionIssue::Gap { metric } if metric == "absent")));
        assert!(issues.iter().any(
            |i| matches!(i, ExtractionIssue::ParseFailure { metric, .. } if metric == "garbled")
        ));
    }

    #[test]
    fn log_sources_read_matching_files() {
        let spec = spec_of(vec![ExtractionRule {
            metric: "stalls".into(),
            source: RuleSource::Log("server".into()),
            pattern: "stalls: ([0-9]+)".into(),
            unit: None,
            scale: 1.0,
        }]);
        let mut raw = raw_ok("");
        raw.log_files
            .insert("server.log".into(), "stalls: 17\n".into());
        let (values, issues) = apply_spec(&spec, &raw);
        assert!(issues.is_empty());
        assert_eq!(values["stalls"], 17.0);
    }

    #[test]
    fn implausible_and_non_finite_values_are_flagged() {
        let manifest = simkv_manifest();
        let mut values = BTreeMap::new();
        values.insert("throughput_kops".to_string(), 1e9);
        values.insert("p99_us".to_string(), f64::NAN);
        let anomalies = check_values(&values, &manifest.plausibility);
        assert_eq!(anomalies.len(), 2);
        assert!(anomalies[0].contains("not finite"));
        assert!(anomalies[1].contains("outside plausible range"));
    }

    fn simkv_raw() -> (RawBenchmarkOutput, f64) {
        let manifest = simkv_manifest();
        let config = manifest.schema.default_configuration();
        let workload = WorkloadSpec {
            name: "fillrandom".into(),
            write_fraction: 1.0,
            op_count: 100_000,
            extra: Default::default(),
        };
        let resources = ResourceSpec {
            cpu_cores: 2,
            memory_mb: 1024,
            time_limit_s: 60,
        };
        let metrics = simkv_evaluate(&config, &workload, &resources).unwrap();
        let tp = metrics["throughput_kops"];
        let stdout = format!(
            "simkv benchmark\nthroughput_kops={tp}\np99_us={}\nstatus: ok\n",
            metrics["p99_us"]
        );
        (raw_ok(&stdout), tp)
    }

    #[test]
    fn synthesized_extraction_matches_the_oracle_exactly() {
        let gateway = Gateway::new(Box::new(GreedyBackend::new()), None);
        let manifest = simkv_manifest();
        let (raw, tp) = simkv_raw();
        let digest = extract_digest(&gateway, manifest, &raw, "n0000", "throughput_kops");
        assert_eq!(digest.value_of("throughput_kops"), Some(tp));
        assert!(digest.anomalies.is_empty());
        assert_eq!(
            digest.summary,
            format!("throughput_kops={tp}; exit=ok; anomalies=0")
        );
        // one synthesis call, no retries
        assert_eq!(gateway.transcript().len(), 1);
    }

    #[test]
    fn three_bad_specs_force_the_fixed_parser_fallback() {
        let bad = |text: &str| TranscriptEntry {
            kind: RequestKind::SynthesizeExtraction,
            text: text.to_string(),
            tokens_in: 10,
            tokens_out: 10,
        };
        let backend = ScriptedBackend::new(vec![
            bad("not json at all"),
            bad("```json\n{\"rules\": [{\"metric\": \"throughput_kops\", \"source\": \"stdout\", \"pattern\": \"throughput_kops=[0-9.]+\"}]}\n```"),
            bad("```json\n{\"rules\": [{\"metric\": \"nothing\", \"source\": \"stdout\", \"pattern\": \"x=([0-9]+)\"}]}\n```"),
        ]);
        let gateway = Gateway::new(Box::new(backend), None);
        let manifest = simkv_manifest();
        let (raw, tp) = simkv_raw();
        let digest = extract_digest(&gateway, manifest, &raw, "n0001", "throughput_kops");
        assert_eq!(digest.value_of("throughput_kops"), Some(tp));
        assert_eq!(gateway.transcript().len(), 3);
    }

    #[test]
    fn anomalies_trigger_exactly_one_regeneration() {
        let gateway = Gateway::new(Box::new(GreedyBackend::new()), None);
        let manifest = simkv_manifest();
        let raw = raw_ok("throughput_kops=1000000000\np99_us=10\n");
        let digest = extract_digest(&gateway, manifest, &raw, "n0002", "throughput_kops");
        // value still reported, anomaly recorded, two synthesis calls
        assert_eq!(digest.value_of("throughput_kops"), Some(1e9));
        assert_eq!(digest.anomalies.len(), 1);
        assert!(digest.anomalies[0].contains("outside plausible range"));
        assert_eq!(gateway.transcript().len(), 2);
    }

    #[test]
    fn exhausted_budget_goes_straight_to_fixed_parsers() {
        let gateway = Gateway::new(Box::new(GreedyBackend::new()), Some(0));
        let manifest = simkv_manifest();
        let (raw, tp) = simkv_raw();
        let digest = extract_digest(&gateway, manifest, &raw, "n0003", "throughput_kops");
        assert_eq!(digest.value_of("throughput_kops"), Some(tp));
        assert!(gateway.transcript().is_empty());
        assert_eq!(gateway.ledger().total, 0);
    }

    #[test]
    fn failed_runs_produce_empty_metrics() {
        let gateway = Gateway::new(Box::new(GreedyBackend::new()), None);
        let manifest = simkv_manifest();
        let mut raw = raw_ok("partial output");
        raw.exit_status = RunStatus::Timeout;
        let digest = extract_digest(&gateway, manifest, &raw, "n0004", "throughput_kops");
        assert!(digest.metrics.is_empty());
        assert_eq!(digest.summary, "throughput_kops=n/a; exit=timeout; anomalies=0");
        assert!(gateway.transcript().is_empty());
    }

    #[test]
    fn monitor_samples_summarize_into_the_digest() {
        let units = BTreeMap::new();
        let mut raw = raw_ok("x");
        raw.monitor_samples = vec![
            MonitorSample { t_s: 1.0, cpu_pct: 50.0, mem_mb: 100.0 },
            MonitorSample { t_s: 2.0, cpu_pct: 150.0, mem_mb: 180.0 },
        ];
        let digest = build_digest("n0005", "tp", &BTreeMap::new(), &units, Vec::new(), &raw);
        assert_eq!(digest.value_of("monitor_cpu_mean_pct"), Some(100.0));
        assert_eq!(digest.value_of("monitor_cpu_max_pct"), Some(150.0));
        assert_eq!(digest.value_of("monitor_mem_max_mb"), Some(180.0));
    }
}
