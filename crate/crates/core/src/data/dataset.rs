use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::{LabeledExample, TweetRecord};
use crate::gazetteer::Gazetteer;

/// Where each archive line went. `examples + rejected() == lines`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub lines: usize,
    pub examples: usize,
    /// Unparseable lines, blank lines and read errors.
    pub parse_errors: usize,
    pub not_geotagged: usize,
    pub outside_gazetteer: usize,
}

impl DatasetStats {
    pub fn rejected(&self) -> usize {
        self.parse_errors + self.not_geotagged + self.outside_gazetteer
    }
}

/// Labels every geotagged tweet by the city box containing its geotag.
/// Per-line failures are counted, never fatal; output keeps input order.
pub fn read_dataset(reader: impl BufRead, g: &Gazetteer) -> (Vec<LabeledExample>, DatasetStats) {
    let mut stats = DatasetStats::default();
    let mut examples = Vec::new();
    for line in reader.lines() {
        stats.lines += 1;
        let tweet = match line.map(|l| TweetRecord::parse(&l)) {
            Ok(Ok(t)) => t,
            _ => {
                stats.parse_errors += 1;
                continue;
            }
        };
        let Some((lat, lon)) = tweet.geotag else {
            stats.not_geotagged += 1;
            continue;
        };
        match g.label_of(lat, lon) {
            Some(label) => {
                stats.examples += 1;
                examples.push(LabeledExample { tweet, label });
            }
            None => stats.outside_gazetteer += 1,
        }
    }
    (examples, stats)
}

pub fn build_dataset(
    archive: &Path,
    g: &Gazetteer,
) -> std::io::Result<(Vec<LabeledExample>, DatasetStats)> {
    let file = File::open(archive)?;
    Ok(read_dataset(BufReader::new(file), g))
}
