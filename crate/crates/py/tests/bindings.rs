use mitsgan_py::{to_array, to_py_err, to_rows};
use pyo3::exceptions::{PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyDict>)>(f: F) {
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(mitsgan_py::mitsgan_module)(py);
        let globals = PyDict::new(py);
        globals.set_item("mitsgan", m).unwrap();
        f(py, &globals);
    });
}

fn run(py: Python<'_>, globals: &Bound<'_, PyDict>, code: &str) {
    let code = std::ffi::CString::new(code).unwrap();
    if let Err(e) = py.run(&code, Some(globals), None) {
        panic!("python error: {e}");
    }
}

#[test]
fn rows_round_trip_through_arrays() {
    let rows = vec![vec![0.0, 0.5], vec![-1.0, 1.0]];
    assert_eq!(to_rows(&to_array(&rows).unwrap()), rows);
    Python::initialize();
    Python::attach(|py| {
        assert!(to_array(&vec![vec![1.0], vec![]]).unwrap_err().is_instance_of::<PyValueError>(py));
        assert!(to_array(&vec![]).unwrap_err().is_instance_of::<PyValueError>(py));
    });
}

#[test]
fn errors_map_to_python_exceptions() {
    Python::initialize();
    Python::attach(|py| {
        let e = to_py_err(mitsgan::Error::CheckpointNotFound("x".into()));
        assert!(e.is_instance_of::<PyFileNotFoundError>(py));
        let e = to_py_err(mitsgan::Error::Region("off the edge".into()));
        assert!(e.is_instance_of::<PyValueError>(py));
        let e = to_py_err(mitsgan::Error::Training { step: 3, term: "g_adv" });
        assert!(e.is_instance_of::<pyo3::exceptions::PyRuntimeError>(py));
    });
}

#[test]
fn module_metrics_and_tamper() {
    with_module(|py, g| {
        run(
            py,
            g,
            r#"
xs = mitsgan.phantom_slices(size=64, slices=2, seed=3)
assert len(xs) == 2 and len(xs[0]) == 64 and len(xs[0][0]) == 64
x = xs[0]
assert mitsgan.rmse(x, x) == 0.0
assert mitsgan.psnr(x, x) == float("inf")
assert abs(mitsgan.ssim(x, x) - 1.0) < 1e-12
assert mitsgan.lpips(x, x) == 0.0
m = mitsgan.Manipulator.blur_blend()
assert m.kind == "blur_blend"
t = m.tamper(x, 32, 32, 32)
assert mitsgan.rmse(x, t) > 0.0
h = mitsgan.heatmap(x, t)
assert h[0][0] == 0.0
try:
    m.tamper(x, 5, 5, 32)
    raise AssertionError("expected ValueError")
except ValueError:
    pass
"#,
        );
    });
}

#[test]
fn module_fit_protect_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    with_module(|py, g| {
        g.set_item("out", dir.path().join("run").to_str().unwrap()).unwrap();
        run(
            py,
            g,
            r#"
import pathlib
out = pathlib.Path(out)
xs = mitsgan.phantom_slices(size=32, slices=8, seed=1)
cfg = mitsgan.TrainingConfig(toy=True)
for k, v in [("epochs", "1"), ("batch_size", "4"), ("trunk_width", "4"), ("residual_blocks", "1"),
             ("disc_base_width", "2"), ("disc_min_input", "32"), ("region_size", "16"),
             ("manipulator_kind", "blur_blend")]:
    cfg.set(k, v)
try:
    cfg.set("warp_factor", "9")
    raise AssertionError("expected ValueError")
except ValueError:
    pass
ck = mitsgan.fit(xs, cfg, out_dir=str(out))
assert ck.epoch == 1 and ck.step == 2
p = ck.protect(xs[0])
assert len(p) == 32 and all(-1.0 <= v <= 1.0 for row in p for v in row)
path = str(out / "final.safetensors")
again = mitsgan.Checkpoint.load(path)
assert again.protect(xs[0]) == p
try:
    mitsgan.Checkpoint.load(str(out / "missing.safetensors"))
    raise AssertionError("expected FileNotFoundError")
except FileNotFoundError:
    pass
"#,
        );
    });
}
