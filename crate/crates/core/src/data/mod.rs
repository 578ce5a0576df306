//! Tweet records and their NDJSON wire format.
//!
//! Wire objects carry `id`, `text`, `created_at`, `user.location`,
//! `user.created_at` and an optional `coordinates: [lon, lat]`. Internally
//! every point is `(lat, lon)`.

mod dataset;
mod synth;

pub use dataset::{build_dataset, read_dataset, DatasetStats};
pub use synth::{city_keywords, gen_synthetic, SynthCorpus, FILLER_WORDS};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
    #[error("invalid `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TweetRecord {
    pub id: String,
    pub text: String,
    pub created_at: DateTime<Utc>,
    pub user_location: Option<String>,
    pub user_created_at: DateTime<Utc>,
    /// `(lat, lon)`
    pub geotag: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub tweet: TweetRecord,
    pub label: usize,
}

pub fn parse_timestamp(field: &'static str, s: &str) -> Result<DateTime<Utc>, DataError> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| DataError::InvalidField {
            field,
            reason: format!("{s:?}: {e}"),
        })
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn str_field<'a>(
    obj: &'a Map<String, Value>,
    key: &str,
    field: &'static str,
) -> Result<&'a str, DataError> {
    match obj.get(key) {
        None | Some(Value::Null) => Err(DataError::MissingField(field)),
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(DataError::InvalidField {
            field,
            reason: format!("expected a string, got {other}"),
        }),
    }
}

fn parse_coordinates(v: &Value) -> Result<Option<(f64, f64)>, DataError> {
    let bad = |reason: String| DataError::InvalidField {
        field: "coordinates",
        reason,
    };
    let arr = match v {
        Value::Null => return Ok(None),
        Value::Array(a) => a,
        // GeoJSON point object
        Value::Object(o) => match o.get("coordinates") {
            Some(Value::Array(a)) => a,
            _ => return Err(bad("object without a coordinates array".into())),
        },
        other => return Err(bad(format!("expected [lon, lat], got {other}"))),
    };
    let nums: Vec<f64> = arr.iter().filter_map(Value::as_f64).collect();
    if arr.len() != 2 || nums.len() != 2 {
        return Err(bad(format!("expected [lon, lat], got {v}")));
    }
    let (lon, lat) = (nums[0], nums[1]);
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(bad(format!("({lat}, {lon}) out of range")));
    }
    Ok(Some((lat, lon)))
}

impl TweetRecord {
    /// Parses one NDJSON line. Errors name the offending field.
    pub fn parse(line: &str) -> Result<Self, DataError> {
        let value: Value =
            serde_json::from_str(line).map_err(|e| DataError::Json(e.to_string()))?;
        Self::from_value(&value)
    }

    pub fn from_value(value: &Value) -> Result<Self, DataError> {
        let obj = value
            .as_object()
            .ok_or_else(|| DataError::Json("line is not a JSON object".into()))?;
        let id = match obj.get("id") {
            None | Some(Value::Null) => return Err(DataError::MissingField("id")),
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            Some(other) => {
                return Err(DataError::InvalidField {
                    field: "id",
                    reason: format!("expected string or number, got {other}"),
                })
            }
        };
        if id.is_empty() {
            return Err(DataError::InvalidField {
                field: "id",
                reason: "empty".into(),
            });
        }
        let text = str_field(obj, "text", "text")?.to_string();
        let created_at =
            parse_timestamp("created_at", str_field(obj, "created_at", "created_at")?)?;
        let user = match obj.get("user") {
            Some(Value::Object(u)) => u,
            Some(_) => {
                return Err(DataError::InvalidField {
                    field: "user",
                    reason: "expected an object".into(),
                })
            }
            None => return Err(DataError::MissingField("user.created_at")),
        };
        let user_location = match user.get("location") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(other) => {
                return Err(DataError::InvalidField {
                    field: "user.location",
                    reason: format!("expected a string, got {other}"),
                })
            }
        };
        let user_created_at = parse_timestamp(
            "user.created_at",
            str_field(user, "created_at", "user.created_at")?,
        )?;
        let geotag = match obj.get("coordinates") {
            None => None,
            Some(v) => parse_coordinates(v)?,
        };
        Ok(Self {
            id,
            text,
            created_at,
            user_location,
            user_created_at,
            geotag,
        })
    }

    pub fn to_value(&self) -> Value {
        let mut user = Map::new();
        if let Some(loc) = &self.user_location {
            user.insert("location".into(), Value::String(loc.clone()));
        }
        user.insert(
            "created_at".into(),
            Value::String(format_timestamp(&self.user_created_at)),
        );
        let mut obj = Map::new();
        obj.insert("id".into(), Value::String(self.id.clone()));
        obj.insert("text".into(), Value::String(self.text.clone()));
        obj.insert(
            "created_at".into(),
            Value::String(format_timestamp(&self.created_at)),
        );
        obj.insert("user".into(), Value::Object(user));
        if let Some((lat, lon)) = self.geotag {
            obj.insert("coordinates".into(), json!([lon, lat]));
        }
        Value::Object(obj)
    }

    pub fn to_ndjson(&self) -> String {
        self.to_value().to_string()
    }

    pub fn has_geotag(&self) -> bool {
        self.geotag.is_some()
    }

    /// Has a nonblank profile location and no geotag.
    pub fn is_predictable(&self) -> bool {
        self.geotag.is_none()
            && self
                .user_location
                .as_deref()
                .is_some_and(|l| !l.trim().is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Geotagged,
    Predicted,
}

/// One located tweet as emitted downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub tweet_id: String,
    /// Predicted city, or for geotagged tweets the city containing the tag.
    pub label_id: Option<usize>,
    pub city_name: Option<String>,
    /// Full class distribution; empty for geotagged pass-through.
    pub distribution: Vec<f64>,
    /// `(lat, lon)`
    pub point: (f64, f64),
    pub provenance: Provenance,
}

impl Prediction {
    pub fn top_prob(&self) -> Option<f64> {
        self.label_id
            .and_then(|l| self.distribution.get(l).copied())
    }

    /// The tweet's wire object plus `label_id, city_name, lat, lon,
    /// provenance, top_prob`.
    pub fn to_ndjson(&self, tweet: &TweetRecord) -> String {
        let mut v = tweet.to_value();
        let obj = v.as_object_mut().expect("tweet serializes to an object");
        obj.insert("label_id".into(), json!(self.label_id));
        obj.insert("city_name".into(), json!(self.city_name));
        obj.insert("lat".into(), json!(self.point.0));
        obj.insert("lon".into(), json!(self.point.1));
        obj.insert("provenance".into(), json!(self.provenance));
        obj.insert("top_prob".into(), json!(self.top_prob()));
        v.to_string()
    }

    /// Reads back the fields written by [`Prediction::to_ndjson`]. The
    /// distribution is not serialized and comes back empty.
    pub fn from_ndjson(line: &str) -> Result<(TweetRecord, Prediction), DataError> {
        let value: Value =
            serde_json::from_str(line).map_err(|e| DataError::Json(e.to_string()))?;
        let tweet = TweetRecord::from_value(&value)?;
        let obj = value.as_object().expect("checked by from_value");
        let num = |key: &'static str| {
            obj.get(key)
                .and_then(Value::as_f64)
                .ok_or(DataError::MissingField(key))
        };
        let provenance: Provenance = obj
            .get("provenance")
            .cloned()
            .ok_or(DataError::MissingField("provenance"))
            .and_then(|p| {
                serde_json::from_value(p).map_err(|e| DataError::InvalidField {
                    field: "provenance",
                    reason: e.to_string(),
                })
            })?;
        let pred = Prediction {
            tweet_id: tweet.id.clone(),
            label_id: obj
                .get("label_id")
                .and_then(Value::as_u64)
                .map(|l| l as usize),
            city_name: obj
                .get("city_name")
                .and_then(Value::as_str)
                .map(String::from),
            distribution: Vec::new(),
            point: (num("lat")?, num("lon")?),
            provenance,
        };
        Ok((tweet, pred))
    }
}
