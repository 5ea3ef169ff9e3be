//! Versioned JSON matrix files.
//!
//! ```json
//! {"format":"driftwatch-matrix","version":1,"order":1,"category":"sysadmin",
//!  "alpha":0.0,"total":812,"rows":[{"context":["SAFE"],"total":210,
//!  "counts":[..5],"probabilities":[..5],"wilson_lo":[..5],"wilson_hi":[..5]}, ..]}
//! ```
//!
//! `counts`, `total` and the Wilson bounds are `null` for matrices that were
//! not estimated from data; Wilson bounds are also `null` for unseen rows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{decode_context, wilson_ci, TransitionCounts, TransitionMatrix, LEVELS};
use crate::state::RiskLevel;
use crate::trace::Category;

pub const FORMAT: &str = "driftwatch-matrix";
pub const VERSION: u32 = 1;
pub const WILSON_Z: f64 = 1.96;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RowRecord {
    context: Vec<RiskLevel>,
    total: Option<u64>,
    counts: Option<[u64; LEVELS]>,
    probabilities: [f64; LEVELS],
    wilson_lo: Option<[f64; LEVELS]>,
    wilson_hi: Option<[f64; LEVELS]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRecord {
    format: String,
    version: u32,
    order: usize,
    category: Option<Category>,
    alpha: f64,
    total: Option<u64>,
    rows: Vec<RowRecord>,
}

fn row_record(m: &TransitionMatrix, ctx: usize) -> Result<RowRecord> {
    let counts = m.counts().map(|c| c.counts[ctx]);
    let total = counts.map(|c| c.iter().sum::<u64>());
    let (mut lo, mut hi) = (None, None);
    if let (Some(c), Some(n)) = (counts, total) {
        if n > 0 {
            let mut l = [0.0; LEVELS];
            let mut h = [0.0; LEVELS];
            for i in 0..LEVELS {
                let ci = wilson_ci(c[i], n, WILSON_Z)?;
                l[i] = ci.lo;
                h[i] = ci.hi;
            }
            lo = Some(l);
            hi = Some(h);
        }
    }
    Ok(RowRecord {
        context: decode_context(ctx, m.order()),
        total,
        counts,
        probabilities: *m.row(ctx),
        wilson_lo: lo,
        wilson_hi: hi,
    })
}

pub fn encode_matrix(m: &TransitionMatrix) -> Result<String> {
    let record = MatrixRecord {
        format: FORMAT.into(),
        version: VERSION,
        order: m.order(),
        category: m.category,
        alpha: m.alpha(),
        total: m.counts().map(|c| c.total),
        rows: (0..m.rows().len()).map(|ctx| row_record(m, ctx)).collect::<Result<_>>()?,
    };
    let mut text = serde_json::to_string_pretty(&record).expect("matrix record serializes");
    text.push('\n');
    Ok(text)
}

pub fn decode_matrix(text: &str, path: &Path) -> Result<TransitionMatrix> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let record: MatrixRecord = serde_json::from_str(text).map_err(|e| parse_err(e.line(), e.to_string()))?;
    if record.format != FORMAT {
        return Err(parse_err(1, format!("unknown format tag `{}`", record.format)));
    }
    if record.version != VERSION {
        return Err(parse_err(1, format!("unsupported matrix file version {}", record.version)));
    }
    let rows = record.rows.iter().map(|r| r.probabilities).collect();
    let mut m = TransitionMatrix::from_rows(record.order, rows)
        .map_err(|e| parse_err(1, e.to_string()))?
        .with_category(record.category);
    for (ctx, r) in record.rows.iter().enumerate() {
        if r.context != decode_context(ctx, record.order) {
            return Err(parse_err(1, format!("row {ctx} has context {:?}", r.context)));
        }
    }
    let counts: Option<Vec<[u64; LEVELS]>> = record.rows.iter().map(|r| r.counts).collect();
    if let Some(counts) = counts {
        let total = counts.iter().flatten().sum();
        if record.total.is_some_and(|t| t != total) {
            return Err(parse_err(1, format!("total {:?} does not match row counts {total}", record.total)));
        }
        let counts = TransitionCounts {
            order: record.order,
            counts,
            total,
        };
        m = m.with_counts(counts, record.alpha).map_err(|e| parse_err(1, e.to_string()))?;
    }
    Ok(m)
}

pub fn write_matrix(m: &TransitionMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_matrix(m)?).map_err(|e| Error::io(path, e))
}

/// Reads a matrix file. The name `appendixB` selects the built-in reference
/// aggregate matrix.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<TransitionMatrix> {
    let path = path.as_ref();
    if path.as_os_str() == "appendixB" {
        return Ok(TransitionMatrix::reference_aggregate());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::{count_transitions, estimate_matrix};
    use RiskLevel::*;

    fn fitted() -> TransitionMatrix {
        let seqs = vec![
            vec![Safe, Mild, Mild, Violated],
            vec![Safe, Safe, Elevated, Critical, Violated],
            vec![Safe, Mild, Elevated],
        ];
        estimate_matrix(&count_transitions(&seqs, 1).unwrap(), 0.5)
            .unwrap()
            .with_category(Some(Category::DataHandling))
    }

    #[test]
    fn round_trip_preserves_everything() {
        let m = fitted();
        let text = encode_matrix(&m).unwrap();
        let back = decode_matrix(&text, Path::new("m.json")).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_matrix(&back).unwrap(), text);
    }

    #[test]
    fn reference_matrix_has_null_counts() {
        let text = encode_matrix(&TransitionMatrix::reference_aggregate()).unwrap();
        assert!(text.contains("\"counts\": null"));
        assert!(text.contains("\"wilson_lo\": null"));
        let back = decode_matrix(&text, Path::new("ref.json")).unwrap();
        assert_eq!(back, TransitionMatrix::reference_aggregate());
    }

    #[test]
    fn wilson_bounds_bracket_estimates() {
        let m = fitted().with_category(None);
        let m = estimate_matrix(m.counts().unwrap(), 0.0).unwrap();
        let text = encode_matrix(&m).unwrap();
        let record: MatrixRecord = serde_json::from_str(&text).unwrap();
        for r in &record.rows {
            if let (Some(lo), Some(hi)) = (r.wilson_lo, r.wilson_hi) {
                for i in 0..LEVELS {
                    assert!(lo[i] <= r.probabilities[i] + 1e-12 && r.probabilities[i] <= hi[i] + 1e-12);
                }
            }
        }
        // The never-left VIOLATED row carries no interval.
        assert!(record.rows[Violated.rank()].wilson_lo.is_none());
    }

    #[test]
    fn rejects_wrong_tag_and_version() {
        let text = encode_matrix(&fitted()).unwrap();
        let bad = text.replace(FORMAT, "something-else");
        assert!(matches!(decode_matrix(&bad, Path::new("x")), Err(Error::Parse { .. })));
        let bad = text.replace("\"version\": 1", "\"version\": 2");
        assert!(decode_matrix(&bad, Path::new("x")).is_err());
        let err = decode_matrix("{\n  \"format\": 3\n}", Path::new("x.json")).unwrap_err();
        assert!(err.to_string().starts_with("x.json:2:"), "{err}");
    }

    #[test]
    fn reference_name_is_builtin() {
        assert_eq!(read_matrix("appendixB").unwrap(), TransitionMatrix::reference_aggregate());
    }
}
