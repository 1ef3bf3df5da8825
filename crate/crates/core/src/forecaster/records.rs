use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{FeatureWindow, N_FEATURES};
use crate::error::{Error, Result};

/// One logged control step as the forecaster sees it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStep {
    /// Raw (unstandardised) feature row observed at this step.
    pub features: [f64; N_FEATURES],
    /// Observed glucose at this step (mg/dL).
    pub bg: f64,
    /// Insulin delivered at this step (U).
    pub dose: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub window: FeatureWindow,
    pub dose: f64,
    /// Next `K` glucose values (mg/dL).
    pub target: Vec<f64>,
    /// Which patient log the record came from.
    pub source: String,
}

/// Stride-1 sliding windows over `steps`: record `i` sees rows `i..i+h`, the
/// dose delivered at row `i+h-1`, and targets `bg[i+h..i+h+k]`. Traces shorter
/// than `h + k` yield nothing.
pub fn extract_records(steps: &[FeatureStep], h: usize, k: usize, source: &str) -> Vec<TrainRecord> {
    if h == 0 || k == 0 || steps.len() < h + k {
        return Vec::new();
    }
    (0..=steps.len() - h - k)
        .map(|i| TrainRecord {
            window: FeatureWindow {
                rows: steps[i..i + h].iter().map(|s| s.features).collect(),
            },
            dose: steps[i + h - 1].dose,
            target: steps[i + h..i + h + k].iter().map(|s| s.bg).collect(),
            source: source.to_string(),
        })
        .collect()
}

/// Chronological train / calibration / validation records.
#[derive(Debug, Clone, Default)]
pub struct RecordSplit {
    pub train: Vec<TrainRecord>,
    pub calibration: Vec<TrainRecord>,
    pub validation: Vec<TrainRecord>,
}

/// Cut `steps` into three consecutive segments by the given fractions (train,
/// calibration; validation takes the rest) and extract records inside each
/// segment, so no window straddles a boundary.
pub fn split_records(
    steps: &[FeatureStep],
    h: usize,
    k: usize,
    train_frac: f64,
    cal_frac: f64,
    source: &str,
) -> Result<RecordSplit> {
    if !(train_frac > 0.0 && cal_frac > 0.0 && train_frac + cal_frac < 1.0) {
        return Err(Error::Config(format!(
            "split fractions {train_frac}/{cal_frac} must be positive and sum below 1"
        )));
    }
    let n = steps.len();
    let a = (n as f64 * train_frac).round() as usize;
    let b = (n as f64 * (train_frac + cal_frac)).round() as usize;
    Ok(RecordSplit {
        train: extract_records(&steps[..a], h, k, source),
        calibration: extract_records(&steps[a..b], h, k, source),
        validation: extract_records(&steps[b..], h, k, source),
    })
}

/// CSV dump: `f{row}_{feature}` columns for the flattened window, then `dose`,
/// then `y1..yK`.
pub fn write_records_csv<W: Write>(records: &[TrainRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    if let Some(first) = records.first() {
        let mut header: Vec<String> = Vec::new();
        header.push("source".into());
        for r in 0..first.window.rows.len() {
            for f in super::FEATURE_NAMES {
                header.push(format!("{f}_{r}"));
            }
        }
        header.push("dose".into());
        for k in 1..=first.target.len() {
            header.push(format!("y{k}"));
        }
        wtr.write_record(&header)?;
    }
    for rec in records {
        let mut row = vec![rec.source.clone()];
        row.extend(rec.window.rows.iter().flatten().map(|v| v.to_string()));
        row.push(rec.dose.to_string());
        row.extend(rec.target.iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("records csv", e))?;
    Ok(())
}
