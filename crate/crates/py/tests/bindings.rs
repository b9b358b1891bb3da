use std::ffi::CString;

use pyo3::prelude::*;

fn run(code: &str) -> PyResult<()> {
    Python::initialize();
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(cadnet_py::cadnet_py)(py);
        let globals = pyo3::types::PyDict::new(py);
        globals.set_item("cn", module)?;
        py.run(&CString::new(code).unwrap(), Some(&globals), None)
    })
}

#[test]
fn tensor_autodiff_from_python() {
    run(r#"
x = cn.Tensor([1.0, 2.0, 3.0], [3], requires_grad=True)
(x * x).sum().backward()
assert x.grad == [2.0, 4.0, 6.0], x.grad
assert x.shape == [3]
"#)
    .unwrap();
}

#[test]
fn loss_anchors_from_python() {
    run(r#"
import math
half = cn.Tensor([0.5] * 4, [4, 1])
assert abs(cn.feature_disc_loss(half, half).item() - 2 * math.log(2)) < 1e-6
emb = cn.Tensor([0, 0, 1, 0, 0, 2, 1, 2], [4, 2])
assert cn.batch_hard_triplet(emb, [0, 0, 1, 1], 2.0).item() == 1.0
"#)
    .unwrap();
}

#[test]
fn errors_become_python_exceptions() {
    Python::initialize();
    let err = run("cn.Tensor([1.0, 2.0], [3])").unwrap_err();
    Python::attach(|py| assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py)));
    let err = run("cn.Model.load('/nonexistent/model.cadnet')").unwrap_err();
    Python::attach(|py| assert!(err.is_instance_of::<pyo3::exceptions::PyIOError>(py)));
}
