//! The Executor agent: runs one benchmark per candidate in its own
//! working directory, supervises the process against its time budget,
//! samples cpu/memory once a second, and captures every artifact the
//! Extractor might need, even when the run fails.

use crate::target::{
    Configuration, LaunchOutcome, ResourceSpec, TargetAdapter, ValidationVerdict, WorkloadSpec,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// How a benchmark run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    /// Process exited with code 0 (or the adapter completed in-process).
    Ok,
    /// Process exited with a nonzero code, or could not be started.
    Nonzero,
    /// The wall-clock time limit elapsed and the process was killed.
    Timeout,
    /// The process died on a signal it did not ask for.
    Killed,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RunStatus::Ok => "ok",
            RunStatus::Nonzero => "nonzero",
            RunStatus::Timeout => "timeout",
            RunStatus::Killed => "killed",
        };
        f.write_str(s)
    }
}

/// One resource-usage observation of a running benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSample {
    pub t_s: f64,
    pub cpu_pct: f64,
    pub mem_mb: f64,
}

/// Everything captured from one benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBenchmarkOutput {
    /// Combined stdout plus (for external processes) stderr.
    pub stdout: String,
    /// Contents of `*.log` files found in the working directory.
    pub log_files: BTreeMap<String, String>,
    /// Periodic cpu/memory samples; empty for in-process targets.
    pub monitor_samples: Vec<MonitorSample>,
    pub exit_status: RunStatus,
}

impl RawBenchmarkOutput {
    fn failed(diagnostic: String) -> Self {
        RawBenchmarkOutput {
            stdout: diagnostic,
            log_files: BTreeMap::new(),
            monitor_samples: Vec::new(),
            exit_status: RunStatus::Nonzero,
        }
    }
}

/// A benchmark request for one tree node. Tasks can only be built from
/// a validation verdict, so the executor can prove no candidate skipped
/// the gate: `run_task` refuses tasks whose verdict was not clean.
#[derive(Debug, Clone)]
pub struct BenchmarkTask {
    pub node_id: String,
    pub config: Configuration,
    pub workload: WorkloadSpec,
    pub resources: ResourceSpec,
    validated: bool,
}

impl BenchmarkTask {
    pub fn new(
        node_id: impl Into<String>,
        config: Configuration,
        workload: WorkloadSpec,
        resources: ResourceSpec,
        verdict: &ValidationVerdict,
    ) -> Self {
        BenchmarkTask {
            node_id: node_id.into(),
            config,
            workload,
            resources,
            validated: verdict.ok,
        }
    }

    pub fn is_validated(&self) -> bool {
        self.validated
    }
}

/// Runs benchmark tasks for one session, one directory per node.
pub struct Executor {
    adapter: Arc<dyn TargetAdapter>,
    nodes_dir: PathBuf,
    tasks_run: AtomicU64,
}

impl Executor {
    pub fn new(adapter: Arc<dyn TargetAdapter>, nodes_dir: impl Into<PathBuf>) -> Self {
        Executor {
            adapter,
            nodes_dir: nodes_dir.into(),
            tasks_run: AtomicU64::new(0),
        }
    }

    pub fn adapter(&self) -> &dyn TargetAdapter {
        self.adapter.as_ref()
    }

    /// How many tasks have reached `run_task` so far.
    pub fn tasks_run(&self) -> u64 {
        self.tasks_run.load(Ordering::SeqCst)
    }

    /// Directory holding the artifacts of one node.
    pub fn node_dir(&self, node_id: &str) -> PathBuf {
        self.nodes_dir.join(node_id)
    }

    /// Run one benchmark and persist its artifacts (config file,
    /// stdout.txt, monitor.jsonl) under the node's directory. Never
    /// panics on target failure; failures come back as the output's
    /// exit status with a diagnostic in `stdout`.
    pub fn run_task(&self, task: &BenchmarkTask) -> RawBenchmarkOutput {
        self.tasks_run.fetch_add(1, Ordering::SeqCst);

        let workdir = self.node_dir(&task.node_id);
        if let Err(e) = recreate_dir(&workdir) {
            return RawBenchmarkOutput::failed(format!(
                "could not prepare working directory {}: {e}",
                workdir.display()
            ));
        }

        let mut output = if !task.validated {
            RawBenchmarkOutput::failed(format!(
                "refused: task for node {} was not validated",
                task.node_id
            ))
        } else {
            let (config_name, config_body) = self.adapter.render_config(&task.config);
            if let Err(e) = std::fs::write(workdir.join(&config_name), config_body) {
                RawBenchmarkOutput::failed(format!("could not write config file: {e}"))
            } else {
                match self
                    .adapter
                    .launch(&task.config, &task.workload, &task.resources, &workdir)
                {
                    Ok(LaunchOutcome::Completed { stdout }) => RawBenchmarkOutput {
                        stdout,
                        log_files: BTreeMap::new(),
                        monitor_samples: Vec::new(),
                        exit_status: RunStatus::Ok,
                    },
                    Ok(LaunchOutcome::Spawned(handle)) => {
                        supervise(handle.child, task.resources.time_limit_s)
                    }
                    Err(failure) => {
                        RawBenchmarkOutput::failed(format!("launch failed: {failure}"))
                    }
                }
            }
        };

        output.log_files = collect_logs(&workdir);
        persist_artifacts(&workdir, &output);
        output
    }

    /// Run a set of tasks on a bounded worker pool. Results are keyed
    /// by node id, so callers see the same map whatever the pool size.
    pub fn run_batch(
        &self,
        tasks: &[BenchmarkTask],
        parallelism: usize,
    ) -> BTreeMap<String, RawBenchmarkOutput> {
        let queue: Mutex<VecDeque<&BenchmarkTask>> = Mutex::new(tasks.iter().collect());
        let results: Mutex<BTreeMap<String, RawBenchmarkOutput>> = Mutex::new(BTreeMap::new());
        let workers = parallelism.max(1).min(tasks.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let task = queue.lock().unwrap().pop_front();
                    let Some(task) = task else { break };
                    let out = self.run_task(task);
                    results.lock().unwrap().insert(task.node_id.clone(), out);
                });
            }
        });
        results.into_inner().unwrap()
    }
}

fn recreate_dir(dir: &Path) -> std::io::Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)
}

fn collect_logs(workdir: &Path) -> BTreeMap<String, String> {
    let mut logs = BTreeMap::new();
    let Ok(entries) = std::fs::read_dir(workdir) else {
        return logs;
    };
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().to_string();
        if name.ends_with(".log") {
            if let Ok(body) = std::fs::read_to_string(entry.path()) {
                logs.insert(name, body);
            }
        }
    }
    logs
}

fn persist_artifacts(workdir: &Path, output: &RawBenchmarkOutput) {
    let _ = std::fs::write(workdir.join("stdout.txt"), &output.stdout);
    let mut monitor = String::new();
    for sample in &output.monitor_samples {
        monitor.push_str(&serde_json::to_string(sample).expect("samples are plain data"));
        monitor.push('\n');
    }
    let _ = std::fs::write(workdir.join("monitor.jsonl"), monitor);
}

/// Watch a spawned benchmark: sample /proc once a second, enforce the
/// wall-clock limit, and fold stderr into the stdout capture.
fn supervise(mut child: std::process::Child, time_limit_s: u64) -> RawBenchmarkOutput {
    let pid = child.id();
    let stdout_pipe = child.stdout.take();
    let stderr_pipe = child.stderr.take();
    let stdout_reader = std::thread::spawn(move || drain(stdout_pipe));
    let stderr_reader = std::thread::spawn(move || drain(stderr_pipe));

    let started = Instant::now();
    let mut samples = Vec::new();
    let mut monitor = ProcMonitor::new(pid);
    let mut next_sample_s = 1.0f64;

    let exit_status = loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                break if status.success() {
                    RunStatus::Ok
                } else if status.code().is_some() {
                    RunStatus::Nonzero
                } else {
                    RunStatus::Killed
                };
            }
            Ok(None) => {
                let elapsed = started.elapsed().as_secs_f64();
                if elapsed >= time_limit_s as f64 {
                    kill_group(pid);
                    let _ = child.wait();
                    break RunStatus::Timeout;
                }
                if elapsed >= next_sample_s {
                    if let Some(sample) = monitor.sample(elapsed) {
                        samples.push(sample);
                    }
                    next_sample_s = elapsed.floor() + 1.0;
                }
                std::thread::sleep(Duration::from_millis(25));
            }
            Err(_) => {
                kill_group(pid);
                let _ = child.wait();
                break RunStatus::Nonzero;
            }
        }
    };

    // The benchmark itself has exited; take any stragglers it spawned
    // with it so the output pipes actually close.
    kill_group(pid);

    let mut stdout = stdout_reader.join().unwrap_or_default();
    let stderr = stderr_reader.join().unwrap_or_default();
    if !stderr.is_empty() {
        if !stdout.is_empty() && !stdout.ends_with('\n') {
            stdout.push('\n');
        }
        stdout.push_str(&stderr);
    }

    RawBenchmarkOutput {
        stdout,
        log_files: BTreeMap::new(),
        monitor_samples: samples,
        exit_status,
    }
}

/// Kill the benchmark's process group; it was put in its own group at
/// spawn, so this cannot hit the session process.
fn kill_group(pid: u32) {
    unsafe {
        libc::kill(-(pid as i32), libc::SIGKILL);
    }
}

fn drain(pipe: Option<impl Read>) -> String {
    let mut buf = String::new();
    if let Some(mut pipe) = pipe {
        let _ = pipe.read_to_string(&mut buf);
    }
    buf
}

/// Reads cpu/memory usage of one process from /proc.
struct ProcMonitor {
    pid: u32,
    clk_tck: f64,
    page_mb: f64,
    last_ticks: u64,
    last_t_s: f64,
}

impl ProcMonitor {
    fn new(pid: u32) -> Self {
        let clk_tck = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
        let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
        ProcMonitor {
            pid,
            clk_tck: if clk_tck > 0 { clk_tck as f64 } else { 100.0 },
            page_mb: if page > 0 { page as f64 } else { 4096.0 } / (1024.0 * 1024.0),
            last_ticks: 0,
            last_t_s: 0.0,
        }
    }

    fn sample(&mut self, t_s: f64) -> Option<MonitorSample> {
        let stat = std::fs::read_to_string(format!("/proc/{}/stat", self.pid)).ok()?;
        // Fields after the parenthesized command name; utime and stime
        // are stat fields 14 and 15 (1-based).
        let rest = &stat[stat.rfind(')')? + 1..];
        let fields: Vec<&str> = rest.split_whitespace().collect();
        let utime: u64 = fields.get(11)?.parse().ok()?;
        let stime: u64 = fields.get(12)?.parse().ok()?;
        let ticks = utime + stime;

        let statm = std::fs::read_to_string(format!("/proc/{}/statm", self.pid)).ok()?;
        let resident_pages: f64 = statm.split_whitespace().nth(1)?.parse().ok()?;

        let dt = t_s - self.last_t_s;
        let cpu_pct = if dt > 0.0 {
            (ticks.saturating_sub(self.last_ticks)) as f64 / self.clk_tck / dt * 100.0
        } else {
            0.0
        };
        self.last_ticks = ticks;
        self.last_t_s = t_s;

        Some(MonitorSample {
            t_s,
            cpu_pct,
            mem_mb: resident_pages * self.page_mb,
        })
    }
}
