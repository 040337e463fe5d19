//! Python bindings for the bitesim core crate.
//!
//! Exposes a deliberately small surface: the signal analytics used for
//! interaction features, the outlier-robust rigid registration solver, and a
//! one-call closed-loop episode runner that returns the summary as a dict.

use bitesim::control::{Awareness, FsmConfig, TransferFsm};
use bitesim::perception::{robust_register, RegistrationConfig};
use bitesim::sim::gen::draw_profiles;
use bitesim::sim::{
    run_episode, EpisodeConfig, EventSource, PerceptionMode, Scenario,
    ScenarioKind,
};
use nalgebra::Point3;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Hjorth activity, mobility, and complexity of a 1-D signal.
#[pyfunction]
fn hjorth(series: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    bitesim::features::hjorth(&series).map_err(err)
}

/// FFT band energies of a 1-D signal sampled at `rate_hz`, one value per
/// `(low_hz, high_hz)` band.
#[pyfunction]
fn band_energies(series: Vec<f64>, rate_hz: f64, bands: Vec<(f64, f64)>) -> PyResult<Vec<f64>> {
    bitesim::features::band_energies(&series, rate_hz, &bands).map_err(err)
}

/// Outlier-robust rigid fit of `model` points (mm) onto `world` points.
/// `valid` masks correspondences; omitted entries default to valid.
#[pyfunction]
#[pyo3(signature = (model, world, valid=None))]
fn register<'py>(
    py: Python<'py>,
    model: Vec<[f64; 3]>,
    world: Vec<[f64; 3]>,
    valid: Option<Vec<bool>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mp: Vec<Point3<f64>> = model.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect();
    let wp: Vec<Point3<f64>> = world.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect();
    let v = valid.unwrap_or_else(|| vec![true; mp.len()]);
    let r = robust_register(&mp, &wp, &v, &RegistrationConfig::default(), None).map_err(err)?;
    let rot = r.pose.rotation.to_rotation_matrix();
    let rows: Vec<[f64; 3]> =
        (0..3).map(|i| [rot[(i, 0)], rot[(i, 1)], rot[(i, 2)]]).collect();
    let d = PyDict::new(py);
    d.set_item("translation_mm", r.pose.translation.vector.as_slice().to_vec())?;
    d.set_item("rotation", rows)?;
    d.set_item("rmse_inlier_mm", r.rmse_inlier)?;
    d.set_item("inlier_count", r.inlier_count)?;
    d.set_item("iterations", r.iterations)?;
    d.set_item("converged", r.converged)?;
    Ok(d)
}

/// Runs one closed-loop transfer episode with oracle interaction events and
/// returns the episode summary as a dict. `scenario` is one of the built-in
/// names (static, s1-turn, s2-speak, s3-spasm, feeding1, feeding2);
/// `awareness` is A..D; `mode` is realtime or onetime.
#[pyfunction]
#[pyo3(signature = (scenario, awareness="D", mode="realtime", seed=0))]
fn episode_summary<'py>(
    py: Python<'py>,
    scenario: &str,
    awareness: &str,
    mode: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let kind = ScenarioKind::parse(scenario).map_err(err)?;
    let aware = match awareness {
        "A" => Awareness::A,
        "B" => Awareness::B,
        "C" => Awareness::C,
        "D" => Awareness::D,
        other => return Err(err(format!("unknown awareness {other:?}, expected A..D"))),
    };
    let mode = PerceptionMode::parse(mode).map_err(err)?;
    let template = bitesim::headmodel::default_template();
    let scenario = Scenario::canonical(kind, seed);
    let profile = draw_profiles(&template, 1, seed).remove(0);
    let fsm = TransferFsm::new(aware, FsmConfig::default());
    let (trace, _) = run_episode(
        &template,
        &scenario,
        &profile,
        fsm,
        mode,
        &EventSource::Oracle,
        &EpisodeConfig::default(),
        seed,
    )
    .map_err(err)?;
    let value = serde_json::to_value(&trace.summary).map_err(err)?;
    let d = PyDict::new(py);
    if let serde_json::Value::Object(map) = value {
        for (k, v) in map {
            d.set_item(k, json_to_py(py, &v)?)?;
        }
    }
    Ok(d)
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        serde_json::Value::Null => py.None(),
        serde_json::Value::Bool(b) => b.into_pyobject(py)?.to_owned().unbind().into(),
        serde_json::Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| err("non-finite number"))?
            .into_pyobject(py)?
            .unbind()
            .into(),
        serde_json::Value::String(s) => s.into_pyobject(py)?.unbind().into(),
        serde_json::Value::Array(a) => {
            let items: Vec<Py<PyAny>> =
                a.iter().map(|x| json_to_py(py, x)).collect::<PyResult<_>>()?;
            items.into_pyobject(py)?.unbind().into()
        }
        serde_json::Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.unbind().into()
        }
    })
}

#[pymodule]
fn bitesim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hjorth, m)?)?;
    m.add_function(wrap_pyfunction!(band_energies, m)?)?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(episode_summary, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
