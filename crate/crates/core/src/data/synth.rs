//! Deterministic synthetic tweets for desk-scale training runs.
//!
//! Each city gets a fixed keyword list that depends only on the gazetteer,
//! so corpora generated with different seeds share one vocabulary.

use std::collections::HashSet;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabeledExample, TweetRecord};
use crate::embeddings::tokenize;
use crate::gazetteer::Gazetteer;

pub const FILLER_WORDS: &[&str] = &[
    "the", "a", "and", "to", "of", "in", "is", "it", "you", "that", "was", "for", "on", "are",
    "with", "as", "i", "my", "at", "be", "this", "have", "from", "or", "one", "had", "by", "but",
    "not", "what", "all", "were", "we", "when", "your", "can", "there", "so", "lol", "today",
];

const SYLLABLES: &[&str] = &[
    "ka", "ro", "mi", "te", "zu", "la", "po", "vin", "sa", "dor", "ne", "qui", "ba", "lu", "shi",
    "gar", "fe", "to", "mek", "ja",
];

const KEYWORDS_PER_CITY: usize = 8;
const MIN_TOKENS: usize = 6;
const MAX_TOKENS: usize = 14;
/// Probability that a city-vocabulary token is drawn from the city name
/// rather than its keyword list.
const NAME_TOKEN_RATE: f64 = 0.25;

pub type SynthCorpus = Vec<LabeledExample>;

/// Per-city keyword lists, unique across cities.
pub fn city_keywords(g: &Gazetteer) -> Vec<Vec<String>> {
    let mut used = HashSet::new();
    g.entries()
        .iter()
        .map(|e| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c17e ^ e.label_id as u64);
            let mut words = Vec::with_capacity(KEYWORDS_PER_CITY);
            while words.len() < KEYWORDS_PER_CITY {
                let n = rng.gen_range(2..=3);
                let w: String = (0..n)
                    .map(|_| *SYLLABLES.choose(&mut rng).expect("nonempty"))
                    .collect();
                if used.insert(w.clone()) {
                    words.push(w);
                }
            }
            words
        })
        .collect()
}

fn uniform_time<R: Rng>(rng: &mut R, from: DateTime<Utc>, to: DateTime<Utc>) -> DateTime<Utc> {
    let span = (to - from).num_seconds();
    from + Duration::seconds(rng.gen_range(0..span))
}

/// `per_city` geotagged tweets for every city. `noise` in `[0, 1]` is both
/// the rate of shared filler tokens in the text and the probability that
/// the profile location names a different city.
pub fn gen_synthetic(g: &Gazetteer, per_city: usize, noise: f64, seed: u64) -> SynthCorpus {
    assert!(per_city >= 1, "per_city must be at least 1");
    let noise = noise.clamp(0.0, 1.0);
    let keywords = city_keywords(g);
    let names: Vec<Vec<String>> = g.entries().iter().map(|e| tokenize(&e.name)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let year_start = Utc.with_ymd_and_hms(2019, 1, 1, 0, 0, 0).unwrap();
    let year_end = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
    let accounts_from = Utc.with_ymd_and_hms(2006, 3, 21, 0, 0, 0).unwrap();

    let mut out = Vec::with_capacity(per_city * g.len());
    for city in g.entries() {
        let label = city.label_id;
        for i in 0..per_city {
            let len = rng.gen_range(MIN_TOKENS..=MAX_TOKENS);
            let mut tokens = Vec::with_capacity(len);
            for pos in 0..len {
                let tok = if rng.gen_bool(noise) {
                    FILLER_WORDS.choose(&mut rng).expect("nonempty").to_string()
                } else if pos > 0 && !names[label].is_empty() && rng.gen_bool(NAME_TOKEN_RATE) {
                    names[label].choose(&mut rng).expect("nonempty").clone()
                } else {
                    keywords[label].choose(&mut rng).expect("nonempty").clone()
                };
                tokens.push(tok);
            }

            let location_label = if g.len() > 1 && rng.gen_bool(noise) {
                let other = rng.gen_range(0..g.len() - 1);
                if other >= label {
                    other + 1
                } else {
                    other
                }
            } else {
                label
            };

            let created_at = uniform_time(&mut rng, year_start, year_end);
            let user_created_at = uniform_time(&mut rng, accounts_from, year_start);
            let geotag = g
                .place_within(label, &mut rng)
                .expect("label comes from the gazetteer");
            out.push(LabeledExample {
                tweet: TweetRecord {
                    id: format!("synth-{seed}-{label}-{i}"),
                    text: tokens.join(" "),
                    created_at,
                    user_location: Some(g.entries()[location_label].name.clone()),
                    user_created_at,
                    geotag: Some(geotag),
                },
                label,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cities() -> Gazetteer {
        Gazetteer::from_csv_str(
            "label_id,name,min_lat,max_lat,min_lon,max_lon
0,Philadelphia PA,39.86,40.13,-75.32,-74.93
1,Chicago IL,41.57,42.12,-88.15,-87.49
2,New York NY,40.49,40.91,-74.26,-73.70
",
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_corpus() {
        let g = cities();
        assert_eq!(gen_synthetic(&g, 5, 0.3, 9), gen_synthetic(&g, 5, 0.3, 9));
        assert_ne!(gen_synthetic(&g, 5, 0.3, 9), gen_synthetic(&g, 5, 0.3, 10));
    }

    #[test]
    fn keywords_are_disjoint_and_seed_independent() {
        let g = cities();
        let kw = city_keywords(&g);
        let all: HashSet<_> = kw.iter().flatten().collect();
        assert_eq!(all.len(), 3 * KEYWORDS_PER_CITY);
        assert_eq!(kw, city_keywords(&g));
    }

    #[test]
    fn noise_one_location_is_always_another_city() {
        let g = cities();
        let corpus = gen_synthetic(&g, 200, 1.0, 3);
        let mut counts = [[0usize; 3]; 3];
        for ex in &corpus {
            let loc = ex.tweet.user_location.as_deref().unwrap();
            let loc_label = g.entries().iter().position(|e| e.name == loc).unwrap();
            assert_ne!(loc_label, ex.label);
            counts[ex.label][loc_label] += 1;
            assert!(tokenize(&ex.tweet.text)
                .iter()
                .all(|t| FILLER_WORDS.contains(&t.as_str())));
        }
        // Roughly uniform over the two other cities.
        for (label, row) in counts.iter().enumerate() {
            for (other, &c) in row.iter().enumerate() {
                if other != label {
                    assert!((60..=140).contains(&c), "{label}->{other}: {c}");
                }
            }
        }
    }

    #[test]
    fn geotags_fall_in_their_city() {
        let g = cities();
        for ex in gen_synthetic(&g, 30, 0.5, 1) {
            let (lat, lon) = ex.tweet.geotag.unwrap();
            assert_eq!(g.label_of(lat, lon), Some(ex.label));
        }
    }
}
