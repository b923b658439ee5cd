//! Python bindings for `ovseg`.
//!
//! `run` takes the same arguments as the `ovseg` binary and returns its exit
//! code. The remaining functions expose small pieces of the library.

use std::path::PathBuf;

use ovseg::eval::{interpolated_ap, EvalReport};
use ovseg::saim::prompts::build_prompt_bank;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

/// Runs one `ovseg` subcommand, e.g. `run(["synth", "--out", "data"])`.
#[pyfunction]
fn run(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("ovseg".to_string()).chain(args).collect();
    py.detach(|| ovseg::cli::run(argv))
}

/// Built-in prompt templates in bank order.
#[pyfunction]
fn templates() -> Vec<String> {
    build_prompt_bank().templates()
}

/// Template ids (`group/index`) matching `templates()`.
#[pyfunction]
fn template_ids() -> Vec<String> {
    build_prompt_bank().ids()
}

/// 101-point interpolated AP (percent) from score-ordered hit flags.
#[pyfunction]
fn average_precision(hits: Vec<bool>, num_positives: usize) -> PyResult<f64> {
    if num_positives == 0 {
        return Err(PyValueError::new_err("num_positives must be positive"));
    }
    Ok(interpolated_ap(&hits, num_positives))
}

/// Loads an evaluation report and returns it as a JSON string.
#[pyfunction]
fn load_report(path: PathBuf) -> PyResult<String> {
    EvalReport::load(&path).map(|r| r.to_json_string()).map_err(|e| PyIOError::new_err(e.to_string()))
}

#[pymodule]
fn ovseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("EXIT_USAGE", ovseg::cli::EXIT_USAGE)?;
    m.add("EXIT_DATA", ovseg::cli::EXIT_DATA)?;
    m.add("EXIT_DIVERGENCE", ovseg::cli::EXIT_DIVERGENCE)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(templates, m)?)?;
    m.add_function(wrap_pyfunction!(template_ids, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(load_report, m)?)?;
    Ok(())
}
