use std::ffi::CString;
use std::path::Path;

use pickteach_py::pickteach_module;
use pyo3::prelude::*;

/// Runs python/smoke_test.py against the module registered as a builtin.
#[test]
fn python_smoke_script_passes() {
    pyo3::append_to_inittab!(pickteach_module);
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../python/smoke_test.py");
    let code = CString::new(std::fs::read_to_string(&script).unwrap()).unwrap();
    Python::attach(|py| {
        let main = PyModule::from_code(py, &code, c"smoke_test.py", c"smoke_test").unwrap();
        if let Err(e) = main.getattr("main").and_then(|f| f.call0()) {
            e.display(py);
            panic!("smoke script failed: {e}");
        }
    });
}
