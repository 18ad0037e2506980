use pyo3::prelude::*;

#[pymodule]
fn freqscreen_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
