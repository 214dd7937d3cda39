//! Accuracy metrics, gold-relative comparison rows, and report emission
//! (CSV, JSON, SVG sweep plots).

mod svg;

pub use svg::emit_sweep_plot;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::Model;

/// Classification accuracy in percent. Argmax ties break toward the lowest
/// class index.
pub fn accuracy<S: Scalar>(model: &Model<S>, data: &LabeledDataset<S>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(data.id().to_string()));
    }
    let c = data.class_count();
    let mut correct = 0usize;
    let chunk = 256usize;
    let mut idx: Vec<usize> = Vec::with_capacity(chunk);
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        idx.clear();
        idx.extend(start..end);
        let (images, labels) = data.batch(&idx);
        let logits = model.logits(&images)?;
        for (row, &y) in logits.values().chunks_exact(c).zip(&labels) {
            let mut best = 0usize;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = j;
                }
            }
            if best == y {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Per-run metrics (Table-style row before gold comparison).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub model: String,
    pub algorithm: String,
    pub scenario: String,
    pub gamma: Option<f64>,
    pub seed: u64,
    pub acc_dr: f64,
    pub acc_df: f64,
    pub acc_test: f64,
    pub mia_percent: f64,
    pub unlearn_time_s: f64,
}

impl MetricsReport {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("acc_dr", self.acc_dr),
            ("acc_df", self.acc_df),
            ("acc_test", self.acc_test),
            ("mia_percent", self.mia_percent),
        ] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Contract(format!("{name} out of [0,100]: {v}")));
            }
        }
        if self.unlearn_time_s < 0.0 {
            return Err(Error::Contract("negative unlearning time".into()));
        }
        Ok(())
    }
}

/// Gold-relative deltas: `unlearned - gold` for forget-set accuracy and
/// MIA (negative means below gold).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    #[serde(flatten)]
    pub report: MetricsReport,
    pub delta_acc_df: f64,
    pub delta_mia: f64,
}

pub fn compare_to_gold(run: &MetricsReport, gold: &MetricsReport) -> Result<ComparisonRow> {
    if run.dataset != gold.dataset || run.scenario != gold.scenario {
        return Err(Error::Contract(format!(
            "comparison tags disagree: {}/{} vs {}/{}",
            run.dataset, run.scenario, gold.dataset, gold.scenario
        )));
    }
    run.validate()?;
    gold.validate()?;
    Ok(ComparisonRow {
        report: run.clone(),
        delta_acc_df: run.acc_df - gold.acc_df,
        delta_mia: run.mia_percent - gold.mia_percent,
    })
}

/// Output format for [`emit_report`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

const CSV_HEADER: &str = "dataset,model,algorithm,acc_dr,delta_acc_df,delta_mia,time_s";

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Render rows in the fixed column order; percents get two decimals,
/// seconds are whole.
pub fn render_report_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        let r = &row.report;
        out.push_str(&format!(
            "{},{},{},{:.2},{:.2},{:.2},{:.0}\n",
            r.dataset, r.model, r.algorithm, r.acc_dr, row.delta_acc_df, row.delta_mia,
            r.unlearn_time_s
        ));
    }
    out
}

pub fn emit_report(rows: &[ComparisonRow], format: ReportFormat, path: &Path) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => render_report_csv(rows),
        ReportFormat::Json => {
            let objects: Vec<serde_json::Value> = rows
                .iter()
                .map(|row| {
                    let r = &row.report;
                    serde_json::json!({
                        "dataset": r.dataset,
                        "model": r.model,
                        "algorithm": r.algorithm,
                        "acc_dr": round2(r.acc_dr),
                        "delta_acc_df": round2(row.delta_acc_df),
                        "delta_mia": round2(row.delta_mia),
                        "time_s": r.unlearn_time_s.round(),
                    })
                })
                .collect();
            let mut body = serde_json::to_string_pretty(&objects)
                .map_err(|e| Error::Format(format!("report JSON: {e}")))?;
            body.push('\n');
            body
        }
    };
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

/// One parsed row of the comparison CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvReportRow {
    pub dataset: String,
    pub model: String,
    pub algorithm: String,
    pub acc_dr: f64,
    pub delta_acc_df: f64,
    pub delta_mia: f64,
    pub time_s: f64,
}

/// Parse a comparison CSV produced by [`emit_report`].
pub fn read_report_csv(path: &Path) -> Result<Vec<CsvReportRow>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "unexpected report header {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Format(format!(
                "report line {}: expected 7 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("report line {}: {e}", lineno + 2)))
        };
        rows.push(CsvReportRow {
            dataset: fields[0].to_string(),
            model: fields[1].to_string(),
            algorithm: fields[2].to_string(),
            acc_dr: num(fields[3])?,
            delta_acc_df: num(fields[4])?,
            delta_mia: num(fields[5])?,
            time_s: num(fields[6])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::models::{build_model, ModelSpec};

    fn report(algorithm: &str, acc_df: f64, mia: f64) -> MetricsReport {
        MetricsReport {
            dataset: "mnist".into(),
            model: "mlp".into(),
            algorithm: algorithm.into(),
            scenario: "random".into(),
            gamma: Some(1.1),
            seed: 42,
            acc_dr: 98.74,
            acc_df,
            acc_test: 93.1,
            mia_percent: mia,
            unlearn_time_s: 71.2,
        }
    }

    #[test]
    fn accuracy_hand_cases() {
        // Fixed weights, 2 classes: predicts class of the larger logit.
        let spec = ModelSpec::mlp(&[1, 1, 2], &[], 2, 1);
        let mut model = build_model::<f64>(&spec).unwrap();
        // W maps x -> [x0, x1]; zero bias. Flat layout: W (2x2), b (2).
        model.store_mut().load_flat(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let images = Tensor::new(
            &[4, 1, 1, 2],
            vec![1.0, 0.0, 0.0, 1.0, 0.9, 0.1, 0.2, 0.8],
        )
        .unwrap();
        // 3 of 4 labels match the argmax.
        let data = LabeledDataset::new("t", images, vec![0, 1, 1, 1], 2).unwrap();
        assert_eq!(accuracy(&model, &data).unwrap(), 75.0);

        let perfect = LabeledDataset::new(
            "t2",
            data.images().clone(),
            vec![0, 1, 0, 1],
            2,
        )
        .unwrap();
        assert_eq!(accuracy(&model, &perfect).unwrap(), 100.0);
    }

    #[test]
    fn accuracy_ties_break_to_lowest_class() {
        let spec = ModelSpec::mlp(&[1, 1, 2], &[], 2, 1);
        let mut model = build_model::<f64>(&spec).unwrap();
        model.store_mut().load_flat(&[0.0; 6]).unwrap();
        let images = Tensor::new(&[2, 1, 1, 2], vec![0.3, 0.4, 0.9, 0.1]).unwrap();
        let data = LabeledDataset::new("t", images, vec![0, 1], 2).unwrap();
        // All logits equal: every prediction is class 0.
        assert_eq!(accuracy(&model, &data).unwrap(), 50.0);
    }

    #[test]
    fn accuracy_rejects_empty_dataset() {
        let spec = ModelSpec::mlp(&[1, 1, 2], &[], 2, 1);
        let model = build_model::<f64>(&spec).unwrap();
        let d = LabeledDataset::new("t", Tensor::zeros(&[1, 1, 1, 2]), vec![0], 2).unwrap();
        let empty = d.subset(&[], "empty");
        assert!(matches!(
            accuracy(&model, &empty),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn gold_deltas_match_published_arithmetic() {
        let gold = report("gold", 94.60, 74.71);
        let run = report("deepclean", 90.92, 69.38);
        let row = compare_to_gold(&run, &gold).unwrap();
        assert!((row.delta_acc_df - (-3.68)).abs() < 1e-9);
        assert!((row.delta_mia - (-5.33)).abs() < 1e-9);

        let zero = compare_to_gold(&gold, &gold).unwrap();
        assert_eq!(zero.delta_acc_df, 0.0);
        assert_eq!(zero.delta_mia, 0.0);
    }

    #[test]
    fn mismatched_tags_rejected() {
        let gold = report("gold", 94.60, 74.71);
        let mut run = report("deepclean", 90.92, 69.38);
        run.scenario = "class".into();
        assert!(compare_to_gold(&run, &gold).is_err());
    }

    #[test]
    fn csv_emit_parse_emit_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let gold = report("gold", 94.60, 74.71);
        let rows = vec![
            compare_to_gold(&gold, &gold).unwrap(),
            compare_to_gold(&report("deepclean", 90.92, 69.38), &gold).unwrap(),
        ];
        let p = dir.path().join("report.csv");
        emit_report(&rows, ReportFormat::Csv, &p).unwrap();
        let first = std::fs::read(&p).unwrap();

        let parsed = read_report_csv(&p).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1].algorithm, "deepclean");
        assert!((parsed[1].delta_acc_df + 3.68).abs() < 1e-12);

        // Re-render from parsed values.
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &parsed {
            out.push_str(&format!(
                "{},{},{},{:.2},{:.2},{:.2},{:.0}\n",
                r.dataset, r.model, r.algorithm, r.acc_dr, r.delta_acc_df, r.delta_mia, r.time_s
            ));
        }
        assert_eq!(out.as_bytes(), first.as_slice());
    }

    #[test]
    fn empty_row_list_gives_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.csv");
        emit_report(&[], ReportFormat::Csv, &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            format!("{CSV_HEADER}\n")
        );
    }

    #[test]
    fn json_round_trip_preserves_rows() {
        let dir = tempfile::tempdir().unwrap();
        let gold = report("gold", 94.60, 74.71);
        let rows = vec![compare_to_gold(&report("rl", 73.88, 0.0), &gold).unwrap()];
        let p = dir.path().join("report.json");
        emit_report(&rows, ReportFormat::Json, &p).unwrap();
        let parsed: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(parsed[0]["algorithm"], "rl");
        assert_eq!(parsed[0]["acc_dr"], 98.74);
        assert_eq!(parsed[0]["delta_acc_df"], -20.72);
    }

    #[test]
    fn out_of_range_metrics_rejected() {
        let gold = report("gold", 94.60, 74.71);
        let mut bad = report("deepclean", 101.0, 5.0);
        assert!(compare_to_gold(&bad, &gold).is_err());
        bad.acc_df = 50.0;
        bad.unlearn_time_s = -1.0;
        assert!(compare_to_gold(&bad, &gold).is_err());
    }
}
