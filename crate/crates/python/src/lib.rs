//! Python bindings: the model, injection plans, generation and the trace
//! analyses, with reports handed back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde::Serialize;

use sinktrack_core::analysis;
use sinktrack_core::inject::validate_plan;
use sinktrack_core::runtime::{generate as run_generate, GenOptions};
use sinktrack_core::weights_io::{
    default_toy_config, load_model, make_toy_model, save_model, DEFAULT_TOY_SEED,
};
use sinktrack_core::{
    AttentionTrace, Error as CoreError, InfoSource, Injection, InjectionPlan, LayerSchedule, Mode,
    Model as CoreModel, ModelConfig, SourceForm, StrengthSchedule, TraceRecorder,
};

fn to_py_err(e: CoreError) -> PyErr {
    match &e {
        CoreError::Format(_) => PyIOError::new_err(e.to_string()),
        CoreError::Plan(_)
        | CoreError::Config(_)
        | CoreError::TokenOutOfRange { .. }
        | CoreError::MissingBos { .. }
        | CoreError::InfoSourceMissing { .. }
        | CoreError::InfoFormMismatch { .. }
        | CoreError::InfoSpan { .. }
        | CoreError::LengthMismatch { .. }
        | CoreError::TooFewValues { .. }
        | CoreError::BosOutOfRange { .. }
        | CoreError::CheckpointOutOfRange { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    match value {
        Value::Null => Ok(py.None()),
        Value::Bool(b) => b.into_py_any(py),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else if let Some(u) = n.as_u64() {
                u.into_py_any(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)
            }
        }
        Value::String(s) => s.into_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, json_to_py(py, v)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

fn report_to_py<T: Serialize>(py: Python<'_>, report: &T) -> PyResult<Py<PyAny>> {
    let value = serde_json::to_value(report)
        .map_err(|e| PyRuntimeError::new_err(format!("report does not serialize: {e}")))?;
    json_to_py(py, &value)
}

/// An injection plan: which anchoring mode runs, on which layers, how strong,
/// and which form the injected summary takes.
#[pyclass(module = "sinktrack", from_py_object)]
#[derive(Clone)]
struct Plan {
    inner: InjectionPlan,
}

#[pymethods]
impl Plan {
    #[new]
    #[pyo3(signature = (mode="none", schedule="every_k", k=5, offset=0, layers=None,
                        alpha=None, alpha_kind=None, alpha_start=None, alpha_end=None,
                        source_form=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        mode: &str,
        schedule: &str,
        k: usize,
        offset: usize,
        layers: Option<Vec<usize>>,
        alpha: Option<f32>,
        alpha_kind: Option<&str>,
        alpha_start: Option<f32>,
        alpha_end: Option<f32>,
        source_form: Option<&str>,
    ) -> PyResult<Plan> {
        let mode = match mode {
            "none" => Mode::None,
            "hard" => Mode::Hard,
            "soft" => Mode::Soft,
            "sinktrack" => Mode::Sinktrack,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown mode {other:?}: expected none, hard, soft or sinktrack"
                )))
            }
        };
        let schedule = match schedule {
            "all" => LayerSchedule::All,
            "every_k" => LayerSchedule::EveryK { k, offset },
            "explicit" => LayerSchedule::Explicit(layers.ok_or_else(|| {
                PyValueError::new_err("explicit schedule needs layers=[...]")
            })?),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown schedule {other:?}: expected all, every_k or explicit"
                )))
            }
        };
        let strength = match (alpha_kind, alpha, alpha_start, alpha_end) {
            (None, None, None, None) => None,
            (None | Some("constant"), Some(a), None, None) => {
                Some(StrengthSchedule::Constant { alpha: a })
            }
            (Some("linear_decay"), None, Some(s), Some(e)) => {
                Some(StrengthSchedule::LinearDecay { alpha_start: s, alpha_end: e })
            }
            (Some("linear_increase"), None, Some(s), Some(e)) => {
                Some(StrengthSchedule::LinearIncrease { alpha_start: s, alpha_end: e })
            }
            _ => {
                return Err(PyValueError::new_err(
                    "strength takes either alpha=... (constant) or \
                     alpha_kind=\"linear_decay\"/\"linear_increase\" with alpha_start and alpha_end",
                ))
            }
        };
        let source_form = match source_form {
            None => {
                if mode == Mode::Sinktrack {
                    SourceForm::Full
                } else {
                    SourceForm::Pooled
                }
            }
            Some("pooled") => SourceForm::Pooled,
            Some("full") => SourceForm::Full,
            Some(other) => {
                return Err(PyValueError::new_err(format!(
                    "unknown source_form {other:?}: expected pooled or full"
                )))
            }
        };
        Ok(Plan {
            inner: InjectionPlan { mode, schedule, strength, source_form },
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Plan(mode={}, schedule={:?}, strength={:?}, source_form={:?})",
            self.inner.mode.name(),
            self.inner.schedule,
            self.inner.strength,
            self.inner.source_form
        )
    }
}

fn plan_of(plan: Option<&Plan>) -> InjectionPlan {
    plan.map(|p| p.inner.clone()).unwrap_or_else(InjectionPlan::none)
}

fn span_range(span: Option<(usize, usize)>) -> Option<std::ops::Range<usize>> {
    span.map(|(start, end)| start..end)
}

/// The decoder-only model plus every operation that runs against it.
#[pyclass(module = "sinktrack")]
struct Model {
    inner: CoreModel,
}

impl Model {
    fn info_for(
        &self,
        plan: &InjectionPlan,
        prompt: &[u32],
        span: Option<(usize, usize)>,
    ) -> PyResult<Option<InfoSource>> {
        if plan.mode == Mode::None {
            return Ok(None);
        }
        InfoSource::from_prompt(&self.inner, prompt, plan.source_form, span_range(span))
            .map(Some)
            .map_err(to_py_err)
    }
}

#[pymethods]
impl Model {
    /// Read a model from an STKW file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Model> {
        Ok(Model { inner: load_model(&path).map_err(to_py_err)? })
    }

    /// Build the deterministic toy model; omitted sizes fall back to the
    /// stock 4-layer, 32-wide configuration.
    #[staticmethod]
    #[pyo3(signature = (seed=None, layers=None, d_model=None, heads=None, d_ff=None,
                        vocab=None, max_seq=None, ln_eps=None))]
    #[allow(clippy::too_many_arguments)]
    fn toy(
        seed: Option<u64>,
        layers: Option<usize>,
        d_model: Option<usize>,
        heads: Option<usize>,
        d_ff: Option<usize>,
        vocab: Option<usize>,
        max_seq: Option<usize>,
        ln_eps: Option<f32>,
    ) -> PyResult<Model> {
        let stock = default_toy_config();
        let config = ModelConfig {
            n_layers: layers.unwrap_or(stock.n_layers),
            d_model: d_model.unwrap_or(stock.d_model),
            n_heads: heads.unwrap_or(stock.n_heads),
            d_ff: d_ff.unwrap_or(stock.d_ff),
            vocab_size: vocab.unwrap_or(stock.vocab_size),
            max_seq: max_seq.unwrap_or(stock.max_seq),
            ln_eps: ln_eps.unwrap_or(stock.ln_eps),
        };
        let seed = seed.unwrap_or(DEFAULT_TOY_SEED);
        Ok(Model { inner: make_toy_model(&config, seed).map_err(to_py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&path, &self.inner).map_err(to_py_err)
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        report_to_py(py, self.inner.config())
    }

    /// Greedy generation. Returns the emitted token ids, or a
    /// (tokens, per-step logits) pair when return_logits is set.
    #[pyo3(signature = (prompt, bos_id=0, max_new_tokens=16, plan=None, info_span=None,
                        trace=None, return_logits=false))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        py: Python<'_>,
        prompt: Vec<u32>,
        bos_id: u32,
        max_new_tokens: usize,
        plan: Option<Plan>,
        info_span: Option<(usize, usize)>,
        trace: Option<PathBuf>,
        return_logits: bool,
    ) -> PyResult<Py<PyAny>> {
        let plan = plan_of(plan.as_ref());
        let resolved = validate_plan(&plan, self.inner.config()).map_err(to_py_err)?;
        let info = self.info_for(&plan, &prompt, info_span)?;
        let injection = Injection::new(&resolved, info.as_ref());

        let mut recorder = trace
            .as_deref()
            .map(TraceRecorder::streaming)
            .transpose()
            .map_err(to_py_err)?;
        let opts = GenOptions { max_new_tokens, record_logits: return_logits };
        let out = run_generate(
            &self.inner,
            &prompt,
            bos_id,
            Some(&injection),
            &opts,
            recorder.as_mut(),
        )
        .map_err(to_py_err)?;
        if let Some(rec) = recorder {
            rec.finish().map_err(to_py_err)?;
        }

        if return_logits {
            let logits = out.step_logits.unwrap_or_default();
            (out.tokens, logits).into_py_any(py)
        } else {
            out.tokens.into_py_any(py)
        }
    }

    /// Per-layer L1 norms of the cached anchor value row, plain run versus
    /// injected run. Rows are dicts with layer, l1_before, l1_after,
    /// difference.
    #[pyo3(signature = (prompt, bos_id=0, plan=None, info_span=None))]
    fn value_norm(
        &self,
        py: Python<'_>,
        prompt: Vec<u32>,
        bos_id: u32,
        plan: Option<Plan>,
        info_span: Option<(usize, usize)>,
    ) -> PyResult<Py<PyAny>> {
        let plan = plan_of(plan.as_ref());
        let resolved = validate_plan(&plan, self.inner.config()).map_err(to_py_err)?;
        let info = self.info_for(&plan, &prompt, info_span)?;
        let injection = Injection::new(&resolved, info.as_ref());
        let report = analysis::value_norm_for_runs(&self.inner, &prompt, bos_id, &injection)
            .map_err(to_py_err)?;
        report_to_py(py, &report)
    }

    /// Long-generation anchor-attention table on a synthetic prompt.
    /// checkpoints defaults to every generated step.
    #[pyo3(signature = (prompt_len=64, gen_steps=64, checkpoints=None, bos_id=0,
                        plan=None, trace=None))]
    #[allow(clippy::too_many_arguments)]
    fn drift_test(
        &self,
        py: Python<'_>,
        prompt_len: usize,
        gen_steps: usize,
        checkpoints: Option<Vec<usize>>,
        bos_id: u32,
        plan: Option<Plan>,
        trace: Option<PathBuf>,
    ) -> PyResult<Py<PyAny>> {
        let plan = plan_of(plan.as_ref());
        let resolved = validate_plan(&plan, self.inner.config()).map_err(to_py_err)?;
        let prompt = analysis::synthetic_prompt(prompt_len, self.inner.config().vocab_size, bos_id);
        let info = self.info_for(&plan, &prompt, None)?;
        let injection = Injection::new(&resolved, info.as_ref());
        let injection = if plan.mode == Mode::None { None } else { Some(&injection) };

        let checkpoints = checkpoints.unwrap_or_else(|| (1..=gen_steps).collect());
        let out = analysis::drift_test(
            &self.inner,
            injection,
            bos_id,
            prompt_len,
            gen_steps,
            &checkpoints,
        )
        .map_err(to_py_err)?;
        if let Some(path) = trace {
            out.trace.write_jsonl(&path).map_err(to_py_err)?;
        }
        report_to_py(py, &out.report)
    }

    /// Wall-time of prefill with and without the injection on a synthetic
    /// prompt. Returns the timing report as a dict.
    #[pyo3(signature = (prompt_len=64, reps=100, bos_id=0, plan=None))]
    fn bench(
        &self,
        py: Python<'_>,
        prompt_len: usize,
        reps: usize,
        bos_id: u32,
        plan: Option<Plan>,
    ) -> PyResult<Py<PyAny>> {
        let plan = plan_of(plan.as_ref());
        let resolved = validate_plan(&plan, self.inner.config()).map_err(to_py_err)?;
        let prompt = analysis::synthetic_prompt(prompt_len, self.inner.config().vocab_size, bos_id);
        let info = self.info_for(&plan, &prompt, None)?;
        let injection = Injection::new(&resolved, info.as_ref());
        let report = analysis::bench_prefill(&self.inner, &injection, &prompt, bos_id, reps)
            .map_err(to_py_err)?;
        report_to_py(py, &report)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(layers={}, d_model={}, heads={}, vocab={})",
            c.n_layers, c.d_model, c.n_heads, c.vocab_size
        )
    }
}

/// Spearman rank correlation with exact small-sample p-value. Returns a dict
/// with rho, p_value and n.
#[pyfunction]
fn spearman_layers(py: Python<'_>, before: Vec<f64>, after: Vec<f64>) -> PyResult<Py<PyAny>> {
    let result = analysis::spearman_layers(&before, &after).map_err(to_py_err)?;
    report_to_py(py, &result)
}

/// Rank-correlate per-layer mean anchor attention between two trace files.
#[pyfunction]
#[pyo3(signature = (trace_before, trace_after, bos_position=0))]
fn spearman_from_traces(
    py: Python<'_>,
    trace_before: PathBuf,
    trace_after: PathBuf,
    bos_position: usize,
) -> PyResult<Py<PyAny>> {
    let before = AttentionTrace::read_jsonl(&trace_before).map_err(to_py_err)?;
    let after = AttentionTrace::read_jsonl(&trace_after).map_err(to_py_err)?;
    let vb = analysis::mean_attention_to_bos_per_layer(&before, bos_position).map_err(to_py_err)?;
    let va = analysis::mean_attention_to_bos_per_layer(&after, bos_position).map_err(to_py_err)?;
    let result = analysis::spearman_layers(&vb, &va).map_err(to_py_err)?;
    report_to_py(py, &result)
}

/// Per-step anchor-attention drift table from a saved trace file.
#[pyfunction]
#[pyo3(signature = (trace, bos_position=0))]
fn drift_from_trace(py: Python<'_>, trace: PathBuf, bos_position: usize) -> PyResult<Py<PyAny>> {
    let trace = AttentionTrace::read_jsonl(&trace).map_err(to_py_err)?;
    let report = analysis::drift_report(&trace, bos_position).map_err(to_py_err)?;
    report_to_py(py, &report)
}

/// Deterministic filler prompt: BOS then token ids cycling the vocabulary.
#[pyfunction]
#[pyo3(signature = (len, vocab=64, bos_id=0))]
fn synthetic_prompt(len: usize, vocab: usize, bos_id: u32) -> Vec<u32> {
    analysis::synthetic_prompt(len, vocab, bos_id)
}

#[pymodule]
fn sinktrack(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Plan>()?;
    m.add_function(wrap_pyfunction!(spearman_layers, m)?)?;
    m.add_function(wrap_pyfunction!(spearman_from_traces, m)?)?;
    m.add_function(wrap_pyfunction!(drift_from_trace, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_prompt, m)?)?;
    m.add("DEFAULT_TOY_SEED", DEFAULT_TOY_SEED)?;
    Ok(())
}
