//! Per-class success statistics from a finished manifest.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::run::manifest::{tally, ClassCounts, RunManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub considered: usize,
    pub generated: usize,
    pub filtered: usize,
    pub success: usize,
    /// `success / considered`; absent when nothing was considered.
    pub rate: Option<f64>,
}

impl ClassReport {
    pub fn from_counts(class: &str, c: &ClassCounts) -> Self {
        let considered = c.considered();
        Self {
            class: class.to_string(),
            considered,
            generated: c.images_generated,
            filtered: c.images_filtered,
            success: c.success,
            rate: ratio(c.success, considered),
        }
    }

    pub fn percent(&self) -> Option<f64> {
        self.rate.map(|r| 100.0 * r)
    }
}

pub(crate) fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessReport {
    pub victim: Option<String>,
    pub classes: Vec<ClassReport>,
    /// Sums over classes; `rate` is `sum success / sum considered`.
    pub overall: ClassReport,
}

impl SuccessReport {
    pub fn from_counts(counts: &BTreeMap<String, ClassCounts>) -> Self {
        let classes: Vec<ClassReport> = counts.iter().map(|(k, c)| ClassReport::from_counts(k, c)).collect();
        let sum = |f: fn(&ClassReport) -> usize| classes.iter().map(f).sum::<usize>();
        let (considered, success) = (sum(|c| c.considered), sum(|c| c.success));
        let overall = ClassReport {
            class: "overall".into(),
            considered,
            generated: sum(|c| c.generated),
            filtered: sum(|c| c.filtered),
            success,
            rate: ratio(success, considered),
        };
        Self {
            victim: None,
            classes,
            overall,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "considered", "generated", "filtered", "success", "rate_percent"])
            .map_err(csv_err)?;
        for c in self.classes.iter().chain(std::iter::once(&self.overall)) {
            w.write_record([
                c.class.clone(),
                c.considered.to_string(),
                c.generated.to_string(),
                c.filtered.to_string(),
                c.success.to_string(),
                c.percent().map(|p| format!("{p:.1}")).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("success csv", e))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

/// Refuses manifests with pending samples, listing them.
pub fn success_report(manifest: &RunManifest) -> Result<SuccessReport> {
    match &manifest.summary {
        Some(s) if s.complete => {}
        Some(s) => {
            return Err(Error::Contract(format!(
                "manifest has {} pending samples: {}",
                s.pending.len(),
                s.pending.join(", ")
            )));
        }
        None => return Err(Error::Contract("manifest has no summary line; resume the run first".into())),
    }
    manifest.verify_summary()?;
    let mut report = SuccessReport::from_counts(&tally(&manifest.records));
    report.victim = Some(manifest.header.victim.clone());
    Ok(report)
}
