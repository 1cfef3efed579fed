use std::path::Path;

use crate::CliResult;

/// Writes a header and rows as CSV. Floats should already be formatted with
/// [`grafit_core::trainer::fmt_f64`] so reruns are byte-identical.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn flag(b: bool) -> String {
    u8::from(b).to_string()
}
