//! Machine-readable report schemas. Every emitter here has a parser that
//! accepts exactly what it produces, so outputs can be fed back into tools.
//!
//! - memory:  `block,role,bytes,mode` — blocks ascending then `head`, roles
//!   lexicographic, zero cells included
//! - flops:   `block,component,macs` — `embed` row, blocks ascending with
//!   components lexicographic, then the `head` row
//! - metrics: `step,split,loss,accuracy,lr,tape_bytes` — one row per
//!   training step or per-epoch evaluation
//! - search:  `plan,memory_bytes,flops_gmacs,accuracy` — ranked plans;
//!   accuracy is `NaN` for analysis-only runs
//! - compare: `scheme,accuracy,memory_bytes,flops_gmacs`

use bsr_core::memory::{FlopsReport, MemoryReport};
use bsr_core::train::{MetricsRow, Split};

use crate::CliError;

pub const MEMORY_HEADER: &str = "block,role,bytes,mode";
pub const FLOPS_HEADER: &str = "block,component,macs";
pub const METRICS_HEADER: &str = "step,split,loss,accuracy,lr,tape_bytes";
pub const SEARCH_HEADER: &str = "plan,memory_bytes,flops_gmacs,accuracy";
pub const COMPARE_HEADER: &str = "scheme,accuracy,memory_bytes,flops_gmacs";

/// Splits CSV text into rows of exactly `fields` columns under `header`.
fn rows_of(text: &str, header: &str, fields: usize) -> Result<Vec<Vec<String>>, CliError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(first) if first == header => {}
        other => {
            return Err(CliError::Validation(format!(
                "expected header `{header}`, got {other:?}"
            )));
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<String> = line.split(',').map(String::from).collect();
        if cols.len() != fields {
            return Err(CliError::Validation(format!(
                "row {}: expected {fields} fields, got {}",
                i + 2,
                cols.len()
            )));
        }
        rows.push(cols);
    }
    Ok(rows)
}

fn parse_field<T: core::str::FromStr>(value: &str, what: &str) -> Result<T, CliError> {
    value
        .parse::<T>()
        .map_err(|_| CliError::Validation(format!("{what}: cannot parse `{value}`")))
}

// ── Memory ──

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryCsvRow {
    pub block: String,
    pub role: String,
    pub bytes: u64,
    pub mode: String,
}

pub fn memory_csv(report: &MemoryReport) -> String {
    let mode = report.mode.label();
    let mut out = String::from(MEMORY_HEADER);
    out.push('\n');
    for (i, block) in report.per_block.iter().enumerate() {
        for (role, bytes) in block.roles() {
            out.push_str(&format!("{i},{role},{bytes},{mode}\n"));
        }
    }
    for (role, bytes) in report.head.roles() {
        out.push_str(&format!("head,{role},{bytes},{mode}\n"));
    }
    out
}

pub fn parse_memory_csv(text: &str) -> Result<Vec<MemoryCsvRow>, CliError> {
    rows_of(text, MEMORY_HEADER, 4)?
        .into_iter()
        .map(|cols| {
            Ok(MemoryCsvRow {
                block: cols[0].clone(),
                role: cols[1].clone(),
                bytes: parse_field(&cols[2], "bytes")?,
                mode: cols[3].clone(),
            })
        })
        .collect()
}

// ── FLOPs ──

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsCsvRow {
    pub block: String,
    pub component: String,
    pub macs: u64,
}

pub fn flops_csv(report: &FlopsReport) -> String {
    let mut out = String::from(FLOPS_HEADER);
    out.push('\n');
    out.push_str(&format!("embed,patch_embed,{}\n", report.patch_embed));
    for (i, b) in report.per_block.iter().enumerate() {
        for (component, macs) in [
            ("apply", b.apply),
            ("ffn", b.ffn),
            ("proj", b.proj),
            ("qkv", b.qkv),
            ("scores", b.scores),
        ] {
            out.push_str(&format!("{i},{component},{macs}\n"));
        }
    }
    out.push_str(&format!("head,classifier,{}\n", report.head));
    out
}

pub fn parse_flops_csv(text: &str) -> Result<Vec<FlopsCsvRow>, CliError> {
    rows_of(text, FLOPS_HEADER, 3)?
        .into_iter()
        .map(|cols| {
            Ok(FlopsCsvRow {
                block: cols[0].clone(),
                component: cols[1].clone(),
                macs: parse_field(&cols[2], "macs")?,
            })
        })
        .collect()
}

// ── Training metrics ──

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.split.label(),
            r.loss,
            r.accuracy,
            r.lr,
            r.tape_bytes
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, CliError> {
    rows_of(text, METRICS_HEADER, 6)?
        .into_iter()
        .map(|cols| {
            let split = match cols[1].as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(CliError::Validation(format!("unknown split `{other}`")));
                }
            };
            Ok(MetricsRow {
                step: parse_field(&cols[0], "step")?,
                split,
                loss: parse_field(&cols[2], "loss")?,
                accuracy: parse_field(&cols[3], "accuracy")?,
                lr: parse_field(&cols[4], "lr")?,
                tape_bytes: parse_field(&cols[5], "tape_bytes")?,
            })
        })
        .collect()
}

// ── Plan search ──

#[derive(Debug, Clone, PartialEq)]
pub struct SearchRow {
    /// Canonical plan key `t<blocks> d<drops> r<rate>` with dot-joined lists.
    pub plan: String,
    pub memory_bytes: u64,
    pub flops_gmacs: f64,
    /// Final test accuracy of the short fine-tune; `NaN` when analysis-only.
    pub accuracy: f64,
}

pub fn search_csv(rows: &[SearchRow]) -> String {
    let mut out = String::from(SEARCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.plan, r.memory_bytes, r.flops_gmacs, r.accuracy
        ));
    }
    out
}

pub fn parse_search_csv(text: &str) -> Result<Vec<SearchRow>, CliError> {
    rows_of(text, SEARCH_HEADER, 4)?
        .into_iter()
        .map(|cols| {
            Ok(SearchRow {
                plan: cols[0].clone(),
                memory_bytes: parse_field(&cols[1], "memory_bytes")?,
                flops_gmacs: parse_field(&cols[2], "flops_gmacs")?,
                accuracy: parse_field(&cols[3], "accuracy")?,
            })
        })
        .collect()
}

// ── Scheme comparison ──

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub scheme: String,
    pub accuracy: f64,
    pub memory_bytes: u64,
    pub flops_gmacs: f64,
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(COMPARE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.scheme, r.accuracy, r.memory_bytes, r.flops_gmacs
        ));
    }
    out
}

pub fn parse_compare_csv(text: &str) -> Result<Vec<CompareRow>, CliError> {
    rows_of(text, COMPARE_HEADER, 4)?
        .into_iter()
        .map(|cols| {
            Ok(CompareRow {
                scheme: cols[0].clone(),
                accuracy: parse_field(&cols[1], "accuracy")?,
                memory_bytes: parse_field(&cols[2], "memory_bytes")?,
                flops_gmacs: parse_field(&cols[3], "flops_gmacs")?,
            })
        })
        .collect()
}
