//! JSON-lines records and CSV tables.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use hop_core::data::SplitSpec;
use hop_core::linalg::Mat;
use hop_core::trainer::metrics::CONFIDENCE_BINS;
use hop_core::trainer::{AblationRow, Flags, MetricsReport, Summary};
use serde::{Deserialize, Serialize};

/// One evaluation, as written to `*.jsonl` and stdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    pub seed: u64,
    pub flags: Option<Flags>,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes `records` as JSON lines (replacing the file) and echoes them to
/// stdout.
pub fn emit_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    print!("{text}");
    write_text(path, &text)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn confusion_csv(confusion: &[Vec<u64>]) -> String {
    let mut s = String::from("truth");
    for j in 0..confusion.len() {
        write!(s, ",pred_{j}").unwrap();
    }
    s.push('\n');
    for (i, row) in confusion.iter().enumerate() {
        write!(s, "{i}").unwrap();
        for c in row {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn histogram_csv(hist: &[u64]) -> String {
    let mut s = String::from("bin_low,bin_high,count\n");
    let w = 1.0 / CONFIDENCE_BINS as f64;
    for (b, c) in hist.iter().enumerate() {
        writeln!(s, "{},{},{c}", b as f64 * w, (b + 1) as f64 * w).unwrap();
    }
    s
}

pub fn class_frequency_csv(split: &SplitSpec, report: &MetricsReport) -> String {
    let total: u64 = report.novel_pred_counts.iter().sum();
    let mut s = String::from("class,predicted_points,share\n");
    for (class, &c) in split.novel_classes().iter().zip(&report.novel_pred_counts) {
        let share = if total > 0 { c as f64 / total as f64 } else { 0.0 };
        writeln!(s, "{class},{c},{share}").unwrap();
    }
    s
}

pub fn matrix_csv(m: &Mat) -> String {
    let mut s = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn series_csv(header: &str, values: &[f64]) -> String {
    let mut s = format!("step,{header}\n");
    for (i, v) in values.iter().enumerate() {
        writeln!(s, "{i},{v}").unwrap();
    }
    s
}

const SUMMARY_METRICS: [&str; 8] = [
    "miou_b",
    "miou_n",
    "miou_a",
    "hm",
    "base_drop",
    "mean_confidence",
    "class_frequency_cv",
    "prototype_offdiag_cos",
];

fn row_metrics(r: &AblationRow) -> [Option<Summary>; 8] {
    [
        r.miou_b,
        r.miou_n,
        r.miou_a,
        r.hm,
        r.base_drop,
        r.mean_confidence,
        r.class_frequency_cv,
        r.prototype_offdiag_cos,
    ]
}

/// One line per cell: median, CI bounds and seed count of every metric.
pub fn summary_csv(rows: &[&AblationRow]) -> String {
    let mut s = String::from("group,cell,seeds");
    for m in SUMMARY_METRICS {
        write!(s, ",{m}_median,{m}_ci_low,{m}_ci_high").unwrap();
    }
    s.push('\n');
    for r in rows {
        write!(s, "{},{},{}", r.group, r.name, r.seeds).unwrap();
        for m in row_metrics(r) {
            write!(
                s,
                ",{},{},{}",
                opt(m.map(|x| x.median)),
                opt(m.map(|x| x.ci_low)),
                opt(m.map(|x| x.ci_high))
            )
            .unwrap();
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_layout() {
        let csv = confusion_csv(&[vec![1, 2], vec![3, 4]]);
        assert_eq!(csv, "truth,pred_0,pred_1\n0,1,2\n1,3,4\n");
    }

    #[test]
    fn histogram_layout() {
        let csv = histogram_csv(&[0; CONFIDENCE_BINS]);
        assert_eq!(csv.lines().count(), CONFIDENCE_BINS + 1);
        assert!(csv.lines().nth(10).unwrap().starts_with("0.9,1,"));
    }

    #[test]
    fn empty_summary_has_header_only() {
        let csv = summary_csv(&[]);
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("group,cell,seeds,miou_b_median"));
    }
}
