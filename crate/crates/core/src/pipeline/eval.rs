//! With/without/gain tables. Scores are mean confidences expressed as
//! percentages and rounded to one decimal, as in published result tables.

use serde::{Deserialize, Serialize};

use super::adjust::AdjustReport;
use super::{PipelineError, Result};

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub method_label: String,
    pub fscore_without: f64,
    pub fscore_with: f64,
    /// Percentage points.
    pub gain: f64,
}

impl GainRow {
    /// Row from two percentages; all three numbers are rounded to one decimal.
    pub fn new(label: &str, without: f64, with: f64) -> Self {
        let (w0, w1) = (round1(without), round1(with));
        Self {
            method_label: label.to_string(),
            fscore_without: w0,
            fscore_with: w1,
            gain: round1(w1 - w0),
        }
    }
}

/// Per-record scores of one side of a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub image_ids: Vec<String>,
    pub conf: Vec<f64>,
    pub steps: Vec<usize>,
}

impl ScoreSet {
    /// The starting confidences of a report.
    pub fn before_of(r: &AdjustReport) -> Self {
        Self {
            image_ids: r.records.iter().map(|x| x.image_id.clone()).collect(),
            conf: r.records.iter().map(|x| x.conf_before).collect(),
            steps: vec![0; r.records.len()],
        }
    }

    /// The adjusted confidences of a report.
    pub fn after_of(r: &AdjustReport) -> Self {
        Self {
            image_ids: r.records.iter().map(|x| x.image_id.clone()).collect(),
            conf: r.records.iter().map(|x| x.conf_after).collect(),
            steps: r.records.iter().map(|x| x.steps_taken).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub row: GainRow,
    pub records: usize,
    pub mean_conf_delta: f64,
    pub improved_fraction: f64,
    pub mean_steps: f64,
}

/// Compares two score sets over the same records, in the same order.
pub fn eval_report(label: &str, before: &ScoreSet, after: &ScoreSet) -> Result<EvalSummary> {
    if before.image_ids != after.image_ids {
        let n = before.image_ids.len().min(after.image_ids.len());
        let at = (0..n)
            .find(|&i| before.image_ids[i] != after.image_ids[i])
            .unwrap_or(n);
        return Err(PipelineError::MismatchedRecords(format!(
            "{} vs {} records, first difference at index {at}",
            before.image_ids.len(),
            after.image_ids.len()
        )));
    }
    let n = before.conf.len();
    let mean = |v: &mut dyn Iterator<Item = f64>| if n == 0 { 0.0 } else { v.sum::<f64>() / n as f64 };
    let m0 = mean(&mut before.conf.iter().copied());
    let m1 = mean(&mut after.conf.iter().copied());
    Ok(EvalSummary {
        row: GainRow::new(label, 100.0 * m0, 100.0 * m1),
        records: n,
        mean_conf_delta: mean(&mut before.conf.iter().zip(&after.conf).map(|(b, a)| a - b)),
        improved_fraction: mean(
            &mut before.conf.iter().zip(&after.conf).map(|(b, a)| f64::from(u8::from(a > b))),
        ),
        mean_steps: mean(&mut after.steps.iter().map(|&s| s as f64)),
    })
}

pub const TSV_HEADER: &str = "method\twithout\twith\tgain\trecords\tmean_conf_delta\timproved_fraction\tmean_steps";

pub fn to_tsv(s: &EvalSummary) -> String {
    format!(
        "{TSV_HEADER}\n{}\t{:.1}\t{:.1}\t{:.1}\t{}\t{:.4}\t{:.3}\t{:.2}\n",
        s.row.method_label,
        s.row.fscore_without,
        s.row.fscore_with,
        s.row.gain,
        s.records,
        s.mean_conf_delta,
        s.improved_fraction,
        s.mean_steps
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str], conf: &[f64]) -> ScoreSet {
        ScoreSet {
            image_ids: ids.iter().map(|s| s.to_string()).collect(),
            conf: conf.to_vec(),
            steps: vec![3; conf.len()],
        }
    }

    #[test]
    fn table_row_arithmetic() {
        let row = GainRow::new("EAST+CRNN", 82.2, 83.9);
        assert_eq!(row.gain, 1.7);
        assert_eq!(format!("{:.1}", row.gain), "1.7");
        assert!((row.gain - (row.fscore_with - row.fscore_without)).abs() <= 0.05);
    }

    #[test]
    fn identical_sets_have_zero_gain() {
        let s = set(&["a", "b"], &[0.5, 0.7]);
        let e = eval_report("m", &s, &s).unwrap();
        assert_eq!(e.row.gain, 0.0);
        assert_eq!(e.mean_conf_delta, 0.0);
        assert_eq!(e.improved_fraction, 0.0);
    }

    #[test]
    fn merged_gain_is_record_weighted() {
        let (b1, a1) = (set(&["a", "b"], &[0.5, 0.6]), set(&["a", "b"], &[0.7, 0.6]));
        let (b2, a2) = (set(&["c", "d", "e"], &[0.4, 0.4, 0.9]), set(&["c", "d", "e"], &[0.5, 0.3, 0.9]));
        let g1 = eval_report("m", &b1, &a1).unwrap().mean_conf_delta;
        let g2 = eval_report("m", &b2, &a2).unwrap().mean_conf_delta;
        let cat = |x: &ScoreSet, y: &ScoreSet| ScoreSet {
            image_ids: [x.image_ids.clone(), y.image_ids.clone()].concat(),
            conf: [x.conf.clone(), y.conf.clone()].concat(),
            steps: [x.steps.clone(), y.steps.clone()].concat(),
        };
        let merged = eval_report("m", &cat(&b1, &b2), &cat(&a1, &a2)).unwrap();
        // by hand: (0.2 + 0.0 + 0.1 - 0.1 + 0.0) / 5 = 0.04
        assert!((merged.mean_conf_delta - 0.04).abs() < 1e-12);
        assert!((merged.mean_conf_delta - (2.0 * g1 + 3.0 * g2) / 5.0).abs() < 1e-12);
        assert!((merged.improved_fraction - 0.4).abs() < 1e-12);
    }

    #[test]
    fn mismatched_records_are_rejected() {
        let e = eval_report("m", &set(&["a", "b"], &[0.1, 0.2]), &set(&["a", "c"], &[0.1, 0.2]));
        assert!(matches!(e, Err(PipelineError::MismatchedRecords(_))));
        assert!(eval_report("m", &set(&["a"], &[0.1]), &set(&["a", "b"], &[0.1, 0.2])).is_err());
    }

    #[test]
    fn tsv_layout() {
        let s = set(&["a"], &[0.822]);
        let t = set(&["a"], &[0.839]);
        let tsv = to_tsv(&eval_report("EAST+CRNN", &s, &t).unwrap());
        let mut lines = tsv.lines();
        assert_eq!(lines.next(), Some(TSV_HEADER));
        assert!(lines.next().unwrap().starts_with("EAST+CRNN\t82.2\t83.9\t1.7\t1\t"));
    }
}
