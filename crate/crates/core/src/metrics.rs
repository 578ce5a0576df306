//! Accuracy, macro precision/recall, and regional coverage increase.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::data::{Prediction, Provenance};
use crate::gazetteer::BBox;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("gold has {gold} labels but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("no examples to score")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub label: usize,
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Per-class precision and recall over every label seen in gold or pred;
/// an empty denominator scores 0. Macro values are unweighted means over
/// those classes.
pub fn classification_metrics(gold: &[usize], pred: &[usize]) -> Result<MetricsReport, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    // label -> (tp, fp, fn, support)
    let mut counts: BTreeMap<usize, (usize, usize, usize, usize)> = BTreeMap::new();
    let mut correct = 0usize;
    for (&g, &p) in gold.iter().zip(pred) {
        counts.entry(g).or_default().3 += 1;
        if g == p {
            correct += 1;
            counts.entry(g).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(g).or_default().2 += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let per_class: Vec<ClassMetrics> = counts
        .iter()
        .map(|(&label, &(tp, fp, fn_, support))| ClassMetrics {
            label,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            support,
        })
        .collect();
    let k = per_class.len() as f64;
    Ok(MetricsReport {
        accuracy: correct as f64 / gold.len() as f64,
        precision_macro: per_class.iter().map(|c| c.precision).sum::<f64>() / k,
        recall_macro: per_class.iter().map(|c| c.recall).sum::<f64>() / k,
        per_class,
    })
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str("Precision  Recall  Accuracy\n");
        s.push_str(&format!(
            "{:<9.4}  {:<6.4}  {:.2}%\n",
            self.precision_macro,
            self.recall_macro,
            self.accuracy * 100.0
        ));
        s
    }

    pub fn to_kv_lines(&self) -> String {
        format!(
            "precision={:.4}\nrecall={:.4}\naccuracy={:.4}\nclasses={}\n",
            self.precision_macro,
            self.recall_macro,
            self.accuracy,
            self.per_class.len()
        )
    }
}

/// A percentage held as exact hundredths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Percent {
    hundredths: u64,
}

impl Percent {
    pub fn from_hundredths(hundredths: u64) -> Self {
        Self { hundredths }
    }

    pub fn hundredths(self) -> u64 {
        self.hundredths
    }

    pub fn as_f64(self) -> f64 {
        self.hundredths as f64 / 100.0
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.hundredths / 100, self.hundredths % 100)
    }
}

/// `100 * predicted / geotagged`, rounded half-up to two decimals, computed
/// in integers. `None` when nothing was geotagged.
pub fn percent_increase(n_geotagged: u64, n_predicted: u64) -> Option<Percent> {
    if n_geotagged == 0 {
        return None;
    }
    let num = 10_000u128 * n_predicted as u128;
    let den = n_geotagged as u128;
    let rounded = (2 * num + den) / (2 * den);
    Some(Percent::from_hundredths(rounded as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionStats {
    pub name: String,
    pub bbox: BBox,
    pub n_geotagged: u64,
    pub n_predicted: u64,
}

impl RegionStats {
    pub fn new(name: impl Into<String>, bbox: BBox) -> Self {
        Self {
            name: name.into(),
            bbox,
            n_geotagged: 0,
            n_predicted: 0,
        }
    }

    pub fn observe(&mut self, p: &Prediction) {
        if !self.bbox.contains(p.point.0, p.point.1) {
            return;
        }
        match p.provenance {
            Provenance::Geotagged => self.n_geotagged += 1,
            Provenance::Predicted => self.n_predicted += 1,
        }
    }

    /// Combines counts gathered over disjoint parts of one stream.
    pub fn merge(&mut self, other: &RegionStats) {
        self.n_geotagged += other.n_geotagged;
        self.n_predicted += other.n_predicted;
    }

    pub fn percent_increase(&self) -> Option<Percent> {
        percent_increase(self.n_geotagged, self.n_predicted)
    }

    pub fn to_kv_line(&self) -> String {
        let pct = self
            .percent_increase()
            .map(|p| format!("{p}%"))
            .unwrap_or_else(|| "absent".into());
        format!(
            "region={} min_lat={} max_lat={} min_lon={} max_lon={} geotagged={} predicted={} percent_increase={}",
            self.name.replace(' ', "_"),
            self.bbox.min_lat,
            self.bbox.max_lat,
            self.bbox.min_lon,
            self.bbox.max_lon,
            self.n_geotagged,
            self.n_predicted,
            pct
        )
    }
}

/// Counts predictions inside a closed box.
pub fn region_stats<'a>(
    predictions: impl IntoIterator<Item = &'a Prediction>,
    name: &str,
    bbox: BBox,
) -> RegionStats {
    let mut stats = RegionStats::new(name, bbox);
    for p in predictions {
        stats.observe(p);
    }
    stats
}
