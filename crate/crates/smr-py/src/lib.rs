use pyo3::prelude::*;

#[pymodule]
fn smr_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
