//! Turning a tweet into encoder inputs.

use chrono::{DateTime, Datelike, Timelike, Utc};

use super::ModelConfig;
use crate::data::TweetRecord;
use crate::embeddings::{tokenize, CharVocab};

pub const TIME_ONEHOT_DIM: usize = 24 + 7;
pub const ACCOUNT_ONEHOT_DIM: usize = 20 + 12;
/// Account years are bucketed from this year, clamped to 20 buckets.
pub const ACCOUNT_BASE_YEAR: i32 = 2006;

/// Hour-of-day (24) then day-of-week from Monday (7).
pub fn time_onehot(t: &DateTime<Utc>) -> Vec<f64> {
    let mut v = vec![0.0; TIME_ONEHOT_DIM];
    v[t.hour() as usize] = 1.0;
    v[24 + t.weekday().num_days_from_monday() as usize] = 1.0;
    v
}

/// Year bucket (`year - 2006` clamped to `0..=19`) then month (12).
pub fn account_onehot(t: &DateTime<Utc>) -> Vec<f64> {
    let mut v = vec![0.0; ACCOUNT_ONEHOT_DIM];
    let bucket = (t.year() - ACCOUNT_BASE_YEAR).clamp(0, 19) as usize;
    v[bucket] = 1.0;
    v[20 + t.month0() as usize] = 1.0;
    v
}

/// Encoder-ready inputs for one tweet, already truncated.
#[derive(Debug, Clone, PartialEq)]
pub struct TweetFeatures {
    pub tokens: Vec<String>,
    pub loc_chars: Vec<usize>,
    pub time: Vec<f64>,
    pub account: Vec<f64>,
}

impl TweetFeatures {
    pub fn new(tweet: &TweetRecord, cvocab: &CharVocab, cfg: &ModelConfig) -> Self {
        let mut tokens = tokenize(&tweet.text);
        tokens.truncate(cfg.max_text_tokens);
        let loc_chars = tweet
            .user_location
            .as_deref()
            .unwrap_or("")
            .chars()
            .take(cfg.max_loc_chars)
            .map(|c| cvocab.id(c))
            .collect();
        Self {
            tokens,
            loc_chars,
            time: time_onehot(&tweet.created_at),
            account: account_onehot(&tweet.user_created_at),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn at(y: i32, m: u32, d: u32, h: u32, min: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, m, d, h, min, 0).unwrap()
    }

    #[test]
    fn midnight_monday() {
        // 2019-09-02 was a Monday.
        let v = time_onehot(&at(2019, 9, 2, 0, 0));
        let hot: Vec<usize> = v.iter().enumerate().filter(|(_, &x)| x == 1.0).map(|(i, _)| i).collect();
        assert_eq!(hot, vec![0, 24]);
    }

    #[test]
    fn same_bucket_same_vector() {
        assert_eq!(time_onehot(&at(2019, 9, 2, 13, 5)), time_onehot(&at(2019, 9, 9, 13, 55)));
        assert_ne!(time_onehot(&at(2019, 9, 2, 23, 59)), time_onehot(&at(2019, 9, 3, 0, 0)));
        assert_ne!(
            time_onehot(&at(2019, 9, 2, 23, 59))[..24],
            time_onehot(&at(2019, 9, 2, 0, 0))[..24]
        );
    }

    #[test]
    fn account_buckets_clamp() {
        let hot = |v: Vec<f64>| v.iter().enumerate().filter(|(_, &x)| x == 1.0).map(|(i, _)| i).collect::<Vec<_>>();
        assert_eq!(hot(account_onehot(&at(2006, 1, 15, 0, 0))), vec![0, 20]);
        assert_eq!(hot(account_onehot(&at(1999, 6, 1, 0, 0))), vec![0, 25]);
        assert_eq!(hot(account_onehot(&at(2040, 12, 1, 0, 0))), vec![19, 31]);
    }
}
