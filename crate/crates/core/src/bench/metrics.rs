use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::looprt::StepRecord;

/// Which glucose signal the clinical metrics are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BgSource {
    #[default]
    True,
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percent of steps with 70 <= BG <= 180.
    pub tir: f64,
    pub below_70: f64,
    pub below_54: f64,
    pub above_180: f64,
    pub mean_bg: f64,
    pub steps: usize,
}

/// Time in range, time below 70 and 54, time above 180 (all percent) and mean
/// glucose over `trace`.
pub fn metrics(trace: &[StepRecord], source: BgSource) -> Result<Metrics> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let bg = |r: &StepRecord| match source {
        BgSource::True => r.bg_true,
        BgSource::Observed => r.bg_observed,
    };
    let n = trace.len() as f64;
    let pct = |f: &dyn Fn(f64) -> bool| trace.iter().filter(|r| f(bg(r))).count() as f64 / n * 100.0;
    Ok(Metrics {
        tir: pct(&|g| (70.0..=180.0).contains(&g)),
        below_70: pct(&|g| g < 70.0),
        below_54: pct(&|g| g < 54.0),
        above_180: pct(&|g| g > 180.0),
        mean_bg: trace.iter().map(bg).sum::<f64>() / n,
        steps: trace.len(),
    })
}

/// One line of `metrics.csv`. Metric fields are empty for failed cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub patient: String,
    pub controller: String,
    pub seed: u64,
    pub status: String,
    pub tir: Option<f64>,
    pub below_70: Option<f64>,
    pub below_54: Option<f64>,
    pub above_180: Option<f64>,
    pub mean_bg: Option<f64>,
    pub eval_days: f64,
}

impl MetricsRow {
    pub fn ok(patient: &str, controller: &str, seed: u64, m: &Metrics, steps_per_day: usize) -> Self {
        MetricsRow {
            patient: patient.to_string(),
            controller: controller.to_string(),
            seed,
            status: "ok".into(),
            tir: Some(m.tir),
            below_70: Some(m.below_70),
            below_54: Some(m.below_54),
            above_180: Some(m.above_180),
            mean_bg: Some(m.mean_bg),
            eval_days: m.steps as f64 / steps_per_day as f64,
        }
    }

    pub fn failed(patient: &str, controller: &str, seed: u64, reason: &str) -> Self {
        MetricsRow {
            patient: patient.to_string(),
            controller: controller.to_string(),
            seed,
            status: format!("failed: {}", reason.replace(['\n', '\r'], " ")),
            tir: None,
            below_70: None,
            below_54: None,
            above_180: None,
            mean_bg: None,
            eval_days: 0.0,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("metrics csv", e))?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Mean over the successful rows of one controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub controller: String,
    /// Patients included, `;`-separated.
    pub patients: String,
    pub cells: usize,
    pub failed: usize,
    pub tir: f64,
    pub below_70: f64,
    pub below_54: f64,
    pub above_180: f64,
    pub mean_bg: f64,
}

/// Unweighted mean of each controller's successful rows, in first-seen order.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.controller.as_str()) {
            order.push(&r.controller);
        }
    }
    order
        .into_iter()
        .map(|c| {
            let mine: Vec<&MetricsRow> = rows.iter().filter(|r| r.controller == c).collect();
            let ok: Vec<&MetricsRow> = mine.iter().copied().filter(|r| r.is_ok()).collect();
            let mean = |f: fn(&MetricsRow) -> Option<f64>| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().filter_map(|r| f(r)).sum::<f64>() / ok.len() as f64
                }
            };
            let mut patients: Vec<&str> = Vec::new();
            for r in &ok {
                if !patients.contains(&r.patient.as_str()) {
                    patients.push(&r.patient);
                }
            }
            SummaryRow {
                controller: c.to_string(),
                patients: patients.join(";"),
                cells: mine.len(),
                failed: mine.len() - ok.len(),
                tir: mean(|r| r.tir),
                below_70: mean(|r| r.below_70),
                below_54: mean(|r| r.below_54),
                above_180: mean(|r| r.above_180),
                mean_bg: mean(|r| r.mean_bg),
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("summary csv", e))?;
    Ok(())
}

/// Fixed-width table of the summary, one controller per line.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<16}{:>6}{:>9}{:>9}{:>9}{:>9}{:>10}\n",
        "controller", "cells", "TIR%", "<70%", "<54%", ">180%", "mean BG"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<16}{:>6}{:>9.2}{:>9.2}{:>9.2}{:>9.2}{:>10.1}\n",
            r.controller,
            r.cells - r.failed,
            r.tir,
            r.below_70,
            r.below_54,
            r.above_180,
            r.mean_bg
        ));
    }
    s
}
