use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::gazetteer::BBox;

pub const ENV_PREFIX: &str = "GEOSTREAM_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("bad value for {key}: {reason}")]
    Value { key: String, reason: String },
    #[error("missing required setting {0}")]
    Missing(&'static str),
}

/// Flat `key = value` settings. Blank lines and `#` comments are skipped;
/// a repeated key keeps every value in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, Vec<String>>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            entries
                .entry(k.replace('-', "_"))
                .or_default()
                .push(v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Last value for `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .get(key)
            .and_then(|v| v.last())
            .map(String::as_str)
    }

    pub fn get_all(&self, key: &str) -> &[String] {
        self.entries.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse().map_err(|e: T::Err| ConfigError::Value {
                    key: key.to_string(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }
}

/// Environment variable name for a setting: `batch_size` ->
/// `GEOSTREAM_BATCH_SIZE`.
pub fn env_key(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase())
}

/// Where lines come from or go to. `-` means the standard stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Std,
    File(PathBuf),
}

impl std::str::FromStr for Endpoint {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(if s == "-" {
            Endpoint::Std
        } else {
            Endpoint::File(PathBuf::from(s))
        })
    }
}

/// A named box for live coverage counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub name: String,
    pub bbox: BBox,
}

impl std::str::FromStr for Region {
    type Err = String;

    /// `name:min_lat,max_lat,min_lon,max_lon`
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, coords) = s
            .rsplit_once(':')
            .ok_or_else(|| format!("expected name:min_lat,max_lat,min_lon,max_lon, got {s:?}"))?;
        let v: Vec<f64> = coords
            .split(',')
            .map(|c| c.trim().parse::<f64>().map_err(|e| format!("{c:?}: {e}")))
            .collect::<Result<_, _>>()?;
        if v.len() != 4 {
            return Err(format!("expected 4 coordinates, got {}", v.len()));
        }
        Ok(Region {
            name: name.trim().to_string(),
            bbox: BBox::new(v[0], v[1], v[2], v[3])?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub batch_size: usize,
    /// Seconds a buffered tweet may wait before its batch is flushed.
    pub flush_interval: f64,
    pub source: Endpoint,
    pub sink: Endpoint,
    pub checkpoint: PathBuf,
    pub gazetteer: PathBuf,
    pub vectors: Option<PathBuf>,
    pub vectors_limit: Option<usize>,
    /// Empty means one region per gazetteer city.
    pub regions: Vec<Region>,
    pub seed: u64,
    /// Tweets per minute; paces delivery when set.
    pub replay_rate: Option<f64>,
}

impl PipelineConfig {
    pub fn new(checkpoint: PathBuf, gazetteer: PathBuf) -> Self {
        Self {
            batch_size: 512,
            flush_interval: 60.0,
            source: Endpoint::Std,
            sink: Endpoint::Std,
            checkpoint,
            gazetteer,
            vectors: None,
            vectors_limit: None,
            regions: Vec::new(),
            seed: 0,
            replay_rate: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: &str| {
            Err(ConfigError::Value {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.flush_interval.is_finite() && self.flush_interval > 0.0) {
            return bad("flush_interval", "must be a positive number of seconds");
        }
        if let Some(r) = self.replay_rate {
            if !(r.is_finite() && r > 0.0) {
                return bad("replay_rate", "must be a positive tweets-per-minute rate");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_pairs() {
        let c = KvConfig::parse("# comment\nbatch_size = 64\n\nflush-interval=2.5\nregion=a:0,1,0,1\nregion=b:2,3,2,3\n").unwrap();
        assert_eq!(c.parse_value::<usize>("batch_size").unwrap(), Some(64));
        assert_eq!(c.parse_value::<f64>("flush_interval").unwrap(), Some(2.5));
        assert_eq!(c.get_all("region").len(), 2);
        assert_eq!(c.get("missing"), None);
        assert!(matches!(KvConfig::parse("novalue"), Err(ConfigError::Syntax { line: 1 })));
        assert!(c.parse_value::<usize>("flush_interval").is_err());
    }

    #[test]
    fn region_syntax() {
        let r: Region = "Philadelphia PA:39.86,40.13,-75.32,-74.93".parse().unwrap();
        assert_eq!(r.name, "Philadelphia PA");
        assert_eq!(r.bbox.max_lon, -74.93);
        assert!("x:1,2,3".parse::<Region>().is_err());
        assert!("x:2,1,0,1".parse::<Region>().is_err());
    }

    #[test]
    fn env_names() {
        assert_eq!(env_key("flush_interval"), "GEOSTREAM_FLUSH_INTERVAL");
    }
}
