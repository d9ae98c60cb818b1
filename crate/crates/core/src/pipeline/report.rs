//! CSV export of per-step diagnostics.

use super::StepDiagnostics;
use crate::error::{Error, Result};

const HEADER: &str = "t,style_vs_stylized,style_vs_content";

/// One row per step, in reverse-step order, after a header row.
pub fn diagnostics_csv(diags: &[StepDiagnostics]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for d in diags {
        out.push_str(&format!("{},{},{}\n", d.t, d.style_vs_stylized, d.style_vs_content));
    }
    out
}

/// Parses [`diagnostics_csv`] output back into `(t, stylized, content)` rows.
pub fn parse_diagnostics_csv(text: &str) -> Result<Vec<(usize, f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Format { offset: 0, reason: "missing diagnostics header".into() });
    }
    let mut offset = HEADER.len() + 1;
    let mut rows = Vec::new();
    for line in lines {
        let bad = || Error::Format { offset, reason: format!("malformed row {line:?}") };
        let fields: Vec<&str> = line.split(',').collect();
        let [t, a, b] = fields.as_slice() else {
            return Err(bad());
        };
        rows.push((
            t.parse().map_err(|_| bad())?,
            a.parse().map_err(|_| bad())?,
            b.parse().map_err(|_| bad())?,
        ));
        offset += line.len() + 1;
    }
    Ok(rows)
}
