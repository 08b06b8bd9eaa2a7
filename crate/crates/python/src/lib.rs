//! Python bindings for agenttune.
//!
//! Configurations, workloads, resources, and reports cross the boundary
//! as plain dicts; everything is serialized through the same serde
//! definitions the Rust side uses, so the accepted shapes match the
//! JSON files in a session directory.

use ::agenttune::llm::estimate_tokens;
use ::agenttune::session::persist;
use ::agenttune::target::{
    resolve_adapter, simkv_evaluate, validate_config_with_cap, Configuration, ResourceSpec,
    WorkloadSpec, MEMORY_CAP_FACTOR,
};
use ::agenttune::{resume_session, run_session, SessionConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyList, PyString};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

fn json_to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match value {
        serde_json::Value::Null => py.None().into_bound(py),
        serde_json::Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.into_any()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any()
            }
        }
        serde_json::Value::String(s) => PyString::new(py, s).into_any(),
        serde_json::Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        serde_json::Value::Object(entries) => {
            let dict = PyDict::new(py);
            for (key, item) in entries {
                dict.set_item(key, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn py_to_json(value: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    if value.is_none() {
        return Ok(serde_json::Value::Null);
    }
    if let Ok(b) = value.cast::<PyBool>() {
        return Ok(serde_json::Value::Bool(b.is_true()));
    }
    if let Ok(i) = value.cast::<PyInt>() {
        return Ok(serde_json::Value::from(i.extract::<i64>()?));
    }
    if let Ok(f) = value.cast::<PyFloat>() {
        let n = serde_json::Number::from_f64(f.value())
            .ok_or_else(|| PyValueError::new_err("non-finite float"))?;
        return Ok(serde_json::Value::Number(n));
    }
    if let Ok(s) = value.cast::<PyString>() {
        return Ok(serde_json::Value::String(s.to_string()));
    }
    if let Ok(list) = value.cast::<PyList>() {
        let mut items = Vec::with_capacity(list.len());
        for item in list.iter() {
            items.push(py_to_json(&item)?);
        }
        return Ok(serde_json::Value::Array(items));
    }
    if let Ok(dict) = value.cast::<PyDict>() {
        let mut entries = serde_json::Map::new();
        for (key, item) in dict.iter() {
            entries.insert(key.extract::<String>()?, py_to_json(&item)?);
        }
        return Ok(serde_json::Value::Object(entries));
    }
    Err(PyValueError::new_err(format!(
        "cannot convert {} to JSON",
        value.get_type().name()?
    )))
}

fn extract_serde<T: serde::de::DeserializeOwned>(
    value: &Bound<'_, PyAny>,
    what: &str,
) -> PyResult<T> {
    serde_json::from_value(py_to_json(value)?)
        .map_err(|e| PyValueError::new_err(format!("bad {what}: {e}")))
}

fn to_py_via_serde<'py, T: serde::Serialize>(
    py: Python<'py>,
    value: &T,
) -> PyResult<Bound<'py, PyAny>> {
    let json = serde_json::to_value(value)
        .map_err(|e| PyRuntimeError::new_err(format!("serialize: {e}")))?;
    json_to_py(py, &json)
}

/// Rough token count used by the gateway's budget accounting.
#[pyfunction]
#[pyo3(name = "estimate_tokens")]
fn estimate_tokens_py(text: &str) -> u64 {
    estimate_tokens(text)
}

/// Evaluate the simulated key-value store's closed-form model.
#[pyfunction]
#[pyo3(name = "simkv_evaluate")]
fn simkv_evaluate_py<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
    workload: &Bound<'py, PyAny>,
    resources: &Bound<'py, PyAny>,
) -> PyResult<Bound<'py, PyAny>> {
    let values = extract_serde(config, "config")?;
    let config = Configuration {
        values,
        parent_id: None,
    };
    let workload: WorkloadSpec = extract_serde(workload, "workload")?;
    let resources: ResourceSpec = extract_serde(resources, "resources")?;
    let metrics = simkv_evaluate(&config, &workload, &resources)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py_via_serde(py, &metrics)
}

/// Default configuration of a target's schema.
#[pyfunction]
#[pyo3(name = "default_config")]
fn default_config_py<'py>(py: Python<'py>, target: &str) -> PyResult<Bound<'py, PyAny>> {
    let adapter = resolve_adapter(target).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let config = adapter.manifest().schema.default_configuration();
    to_py_via_serde(py, &config.values)
}

/// Check a configuration against a target's schema, resource budget,
/// and blacklist. Returns a list of violation strings; empty means the
/// configuration is safe to run.
#[pyfunction]
#[pyo3(name = "validate_config", signature = (target, config, resources, blacklist = vec![], cap_factor = MEMORY_CAP_FACTOR))]
fn validate_config_py(
    target: &str,
    config: &Bound<'_, PyAny>,
    resources: &Bound<'_, PyAny>,
    blacklist: Vec<String>,
    cap_factor: f64,
) -> PyResult<Vec<String>> {
    let adapter = resolve_adapter(target).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let values = extract_serde(config, "config")?;
    let config = Configuration {
        values,
        parent_id: None,
    };
    let resources: ResourceSpec = extract_serde(resources, "resources")?;
    let blacklist: BTreeSet<String> = blacklist.into_iter().collect();
    let verdict = validate_config_with_cap(
        &config,
        &adapter.manifest().schema,
        &resources,
        &blacklist,
        cap_factor,
    );
    Ok(verdict
        .violations
        .iter()
        .map(|v| format!("{} {}: {}", v.kind, v.param, v.detail))
        .collect())
}

/// Run a tuning session; `config` matches the CLI's JSON config format.
/// Returns the session report as a dict.
#[pyfunction]
#[pyo3(name = "run_session", signature = (config, out_dir, resume = false))]
fn run_session_py<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
    out_dir: PathBuf,
    resume: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let config: SessionConfig = extract_serde(config, "session config")?;
    let report = if resume {
        resume_session(&config, &out_dir)
    } else {
        run_session(&config, &out_dir)
    }
    .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py_via_serde(py, &report)
}

/// Load a finished session's report.json as a dict.
#[pyfunction]
#[pyo3(name = "load_report")]
fn load_report_py<'py>(py: Python<'py>, session_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let path = Path::new(&session_dir).join(persist::REPORT_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))?;
    let json: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))?;
    json_to_py(py, &json)
}

#[pymodule]
fn agenttune(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(estimate_tokens_py, m)?)?;
    m.add_function(wrap_pyfunction!(simkv_evaluate_py, m)?)?;
    m.add_function(wrap_pyfunction!(default_config_py, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config_py, m)?)?;
    m.add_function(wrap_pyfunction!(run_session_py, m)?)?;
    m.add_function(wrap_pyfunction!(load_report_py, m)?)?;
    Ok(())
}
