//! City label space: dense label ids with lat/lon bounding boxes.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GazetteerError {
    #[error("cannot read gazetteer")]
    Csv(#[from] csv::Error),
    #[error("missing label {0}")]
    MissingLabel(usize),
    #[error("duplicate label {0}")]
    DuplicateLabel(usize),
    #[error("label {label}: {reason}")]
    InvalidBox { label: usize, reason: String },
    #[error("unknown label {0}")]
    UnknownLabel(usize),
    #[error("gazetteer has no cities")]
    Empty,
}

/// Closed lat/lon box in WGS84 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl BBox {
    pub fn new(min_lat: f64, max_lat: f64, min_lon: f64, max_lon: f64) -> Result<Self, String> {
        let b = Self {
            min_lat,
            max_lat,
            min_lon,
            max_lon,
        };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<(), String> {
        let all = [self.min_lat, self.max_lat, self.min_lon, self.max_lon];
        if all.iter().any(|v| !v.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        if self.min_lat.abs() > 90.0 || self.max_lat.abs() > 90.0 {
            return Err("latitude out of range".into());
        }
        if self.min_lon.abs() > 180.0 || self.max_lon.abs() > 180.0 {
            return Err("longitude out of range".into());
        }
        if self.min_lat >= self.max_lat {
            return Err(format!(
                "inverted latitude range {} >= {}",
                self.min_lat, self.max_lat
            ));
        }
        if self.min_lon >= self.max_lon {
            return Err(format!(
                "inverted longitude range {} >= {}",
                self.min_lon, self.max_lon
            ));
        }
        Ok(())
    }

    /// Edges count as inside.
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.min_lat && lat <= self.max_lat && lon >= self.min_lon && lon <= self.max_lon
    }

    pub fn midpoint(&self) -> (f64, f64) {
        (
            (self.min_lat + self.max_lat) / 2.0,
            (self.min_lon + self.max_lon) / 2.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CityEntry {
    pub label_id: usize,
    pub name: String,
    pub bbox: BBox,
    pub centroid: (f64, f64),
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    label_id: usize,
    name: String,
    min_lat: f64,
    max_lat: f64,
    min_lon: f64,
    max_lon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gazetteer {
    entries: Vec<CityEntry>,
}

impl Gazetteer {
    /// Validates that label ids are exactly `0..C` and every box is sane.
    pub fn from_entries(
        rows: impl IntoIterator<Item = (usize, String, BBox)>,
    ) -> Result<Self, GazetteerError> {
        let mut slots: Vec<Option<CityEntry>> = Vec::new();
        for (label_id, name, bbox) in rows {
            bbox.validate()
                .map_err(|reason| GazetteerError::InvalidBox {
                    label: label_id,
                    reason,
                })?;
            if slots.len() <= label_id {
                slots.resize(label_id + 1, None);
            }
            if slots[label_id].is_some() {
                return Err(GazetteerError::DuplicateLabel(label_id));
            }
            slots[label_id] = Some(CityEntry {
                label_id,
                name,
                centroid: bbox.midpoint(),
                bbox,
            });
        }
        if slots.is_empty() {
            return Err(GazetteerError::Empty);
        }
        let entries = slots
            .into_iter()
            .enumerate()
            .map(|(i, e)| e.ok_or(GazetteerError::MissingLabel(i)))
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    /// Reads `label_id,name,min_lat,max_lat,min_lon,max_lon` CSV.
    pub fn load(path: &Path) -> Result<Self, GazetteerError> {
        Self::read(csv::Reader::from_path(path)?)
    }

    pub fn read<R: std::io::Read>(mut reader: csv::Reader<R>) -> Result<Self, GazetteerError> {
        let mut rows = Vec::new();
        for rec in reader.deserialize() {
            let r: CsvRow = rec?;
            let bbox = BBox {
                min_lat: r.min_lat,
                max_lat: r.max_lat,
                min_lon: r.min_lon,
                max_lon: r.max_lon,
            };
            rows.push((r.label_id, r.name, bbox));
        }
        Self::from_entries(rows)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, GazetteerError> {
        Self::read(csv::Reader::from_reader(text.as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CityEntry] {
        &self.entries
    }

    pub fn get(&self, label_id: usize) -> Option<&CityEntry> {
        self.entries.get(label_id)
    }

    /// Label whose box contains the point. Overlaps resolve to the nearest
    /// centroid (Euclidean in degrees), then to the smaller label id.
    pub fn label_of(&self, lat: f64, lon: f64) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for e in &self.entries {
            if !e.bbox.contains(lat, lon) {
                continue;
            }
            let d = (lat - e.centroid.0).powi(2) + (lon - e.centroid.1).powi(2);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, e.label_id));
            }
        }
        best.map(|(_, id)| id)
    }

    /// Uniform point inside the city's box.
    pub fn place_within<R: Rng + ?Sized>(
        &self,
        label_id: usize,
        rng: &mut R,
    ) -> Result<(f64, f64), GazetteerError> {
        let b = self
            .get(label_id)
            .ok_or(GazetteerError::UnknownLabel(label_id))?
            .bbox;
        let lat = rng.gen_range(b.min_lat..=b.max_lat);
        let lon = rng.gen_range(b.min_lon..=b.max_lon);
        Ok((lat, lon))
    }

    pub fn place_within_seeded(
        &self,
        label_id: usize,
        seed: u64,
    ) -> Result<(f64, f64), GazetteerError> {
        self.place_within(label_id, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}
